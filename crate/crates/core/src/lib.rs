//! Total-variation regularized electrical impedance tomography with the
//! complete electrode model on polygonal domains in the plane.
//!
//! Every numerical type is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below fix the precision for callers that do not care.

pub mod cem;
pub mod conductivity;
pub mod error;
pub mod fem;
pub mod inverse;
pub mod linalg;
pub mod mesh;
pub mod ntd;
pub mod scalar;

pub use error::{EitError, Result};
pub use scalar::Real;

pub type Mesh = mesh::TriMesh<f64>;
pub type Space = fem::FeSpace<f64>;
pub type Field = conductivity::NodalField<f64>;
pub type Layout = cem::ElectrodeLayout<f64>;
pub type Resistance = cem::ResistanceMatrix<f64>;
pub type Ntd = ntd::NtdRep<f64>;

pub type Mesh32 = mesh::TriMesh<f32>;
pub type Space32 = fem::FeSpace<f32>;
pub type Field32 = conductivity::NodalField<f32>;
pub type Layout32 = cem::ElectrodeLayout<f32>;
pub type Resistance32 = cem::ResistanceMatrix<f32>;
pub type Ntd32 = ntd::NtdRep<f32>;
