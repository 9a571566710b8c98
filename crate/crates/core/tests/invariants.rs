use eit_core::cem::{resistance_matrix, ElectrodeLayout, Provenance, ResistanceMatrix};
use eit_core::conductivity::{FieldKind, NodalField, Phantom};
use eit_core::fem::FeSpace;
use eit_core::inverse::{noise_inject, zero_sum_projection, NoiseMode};
use eit_core::linalg::spectral_norm;
use eit_core::mesh::{build_initial_triangulation, Polygon};
use eit_core::{Field32, Layout32, Mesh32, Space32};
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn refinement_preserves_area_and_conformity(
        x0 in -2.0..2.0f64, y0 in -2.0..2.0f64, w in 0.2..3.0f64, h in 0.2..3.0f64, level in 0usize..4,
    ) {
        let p = Polygon::rectangle(x0, y0, x0 + w, y0 + h).unwrap();
        let mesh = build_initial_triangulation(&p).unwrap().refined(level);
        prop_assert!((mesh.area() - w * h).abs() < 1e-10 * w * h);
        prop_assert!((mesh.perimeter() - 2.0 * (w + h)).abs() < 1e-10 * (w + h));
        prop_assert_eq!(mesh.triangle_count(), 2 << (2 * level));
        prop_assert!(mesh.check_topology().is_ok());
        prop_assert!(mesh.check_conforming().is_ok());
    }

    #[test]
    fn zero_sum_projection_is_idempotent(entries in prop::collection::vec(-5.0..5.0f64, 16)) {
        let x = DMatrix::from_vec(4, 4, entries);
        let p = zero_sum_projection(&x);
        prop_assert!((zero_sum_projection(&p) - &p).abs().max() < 1e-12);
        for i in 0..4 {
            prop_assert!(p.row(i).sum().abs() < 1e-12);
            prop_assert!(p.column(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn noise_level_is_exact(eps in 1e-6..1.0f64, seed in any::<u64>()) {
        let m = 6;
        let base = zero_sum_projection(&DMatrix::from_fn(m, m, |i, j| 1.0 / (1.0 + i as f64 + j as f64)));
        let r0 = ResistanceMatrix { matrix: base.clone(), provenance: Provenance::Simplified };
        let a = noise_inject(&r0, eps, seed, NoiseMode::Absolute).unwrap();
        prop_assert!(((&a.matrix - &base).norm() - m as f64 * eps).abs() < 1e-10);
        let r = noise_inject(&r0, eps, seed, NoiseMode::Relative).unwrap();
        prop_assert!((spectral_norm(&(&r.matrix - &base)) - eps).abs() < 1e-10);
    }

    #[test]
    fn projection_lands_in_the_admissible_set(values in prop::collection::vec(-3.0..8.0f64, 1..40)) {
        let f = NodalField::from_raw(FieldKind::Scalar, values, 0.5, 4.0).unwrap();
        let p = f.project_to_admissible();
        prop_assert!(p.is_admissible());
        let q = p.project_to_admissible();
        prop_assert_eq!(q.data(), p.data());
    }
}

#[test]
fn single_precision_tracks_double_precision() {
    let level = 3;
    let m64 = build_initial_triangulation(&Polygon::<f64>::unit_square()).unwrap().refined(level);
    let m32: Mesh32 = build_initial_triangulation(&Polygon::<f32>::unit_square()).unwrap().refined(level);
    let phantom = Phantom::disk(1.0, [0.5, 0.5], 0.25, 2.0);
    let s64 = FeSpace::new(m64);
    let s32 = Space32::new(m32);
    let f64_ = phantom.interpolate(s64.mesh(), 0.5, 4.0).unwrap();
    let f32_: Field32 = phantom.interpolate(s32.mesh(), 0.5, 4.0).unwrap();
    let l64 = ElectrodeLayout::from_mesh(s64.mesh(), 1, 1, 0.1).unwrap();
    let l32: Layout32 = ElectrodeLayout::from_mesh(s32.mesh(), 1, 1, 0.1).unwrap();
    let r64 = resistance_matrix(&s64, &f64_, &l64).unwrap().matrix;
    let r32 = resistance_matrix(&s32, &f32_, &l32).unwrap().matrix;
    let diff = DMatrix::from_fn(r64.nrows(), r64.ncols(), |i, j| r64[(i, j)] - r32[(i, j)] as f64);
    assert!(diff.norm() < 1e-4 * r64.norm(), "{} vs {}", diff.norm(), r64.norm());
}
