//! JSON run configuration shared by all subcommands.

use std::path::{Path, PathBuf};

use eit_core::conductivity::Phantom;
use eit_core::inverse::{DataModel, InversionConfig, LayoutSpec, NoiseMode, OptimizerOptions, Schedule, StudyConfig};
use eit_core::mesh::Polygon;
use eit_core::{EitError, Result};
use nalgebra::Point2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshSettings {
    /// Refinements of the initial triangulation used by `mesh`, `forward`
    /// and `invert`.
    pub level: usize,
    /// Upper bound on every mesh level a run may touch.
    pub max_level: usize,
}

impl Default for MeshSettings {
    fn default() -> Self {
        MeshSettings { level: 4, max_level: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSettings {
    pub epsilon: f64,
    pub noise_mode: NoiseMode,
    pub regularization: f64,
    pub data: DataModel,
}

impl Default for InversionSettings {
    fn default() -> Self {
        InversionSettings {
            epsilon: 1e-2,
            noise_mode: NoiseMode::Relative,
            regularization: 1e-4,
            data: DataModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySettings {
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub measurement_refinement: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings { epsilons: vec![0.1, 0.05, 0.025, 0.0125], seeds: vec![0], measurement_refinement: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Polygon vertices; the unit square when omitted.
    #[serde(default = "unit_square")]
    pub domain: Vec<[f64; 2]>,
    pub phantom: Phantom,
    /// Admissible eigenvalue range `[lambda0, lambda1]`.
    pub bounds: [f64; 2],
    #[serde(default)]
    pub mesh: MeshSettings,
    #[serde(default)]
    pub layout: LayoutSpec,
    #[serde(default)]
    pub inversion: InversionSettings,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub study: StudySettings,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_subdivision")]
    pub l1_subdivision: usize,
}

fn unit_square() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_subdivision() -> usize {
    3
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EitError::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn polygon(&self) -> Result<Polygon<f64>> {
        Polygon::new(self.domain.iter().map(|p| Point2::new(p[0], p[1])).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.polygon()?;
        let [l0, l1] = self.bounds;
        if !(l0 > 0.0 && l0 <= l1) {
            return Err(EitError::invalid(format!("bounds must satisfy 0 < lambda0 <= lambda1, got {l0}, {l1}")));
        }
        self.phantom.validate(l0, l1)?;
        let refinement = match self.inversion.data {
            DataModel::Cem { refinement } => refinement,
            DataModel::InverseCrime => 0,
        };
        let deepest = self.mesh.level + refinement;
        if deepest > self.mesh.max_level {
            return Err(EitError::invalid(format!(
                "mesh level {deepest} (level plus measurement refinement) exceeds max_level {}",
                self.mesh.max_level
            )));
        }
        if self.layout.coarsen > self.mesh.level {
            return Err(EitError::invalid("layout coarsening exceeds the mesh level"));
        }
        if self.layout.active == 0 || self.layout.active > 1 << self.layout.coarsen {
            return Err(EitError::invalid("active edges must lie in 1..=2^coarsen"));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.inversion_config().validate()?;
        Ok(())
    }

    pub fn inversion_config(&self) -> InversionConfig {
        InversionConfig {
            phantom: self.phantom.clone(),
            bounds: self.bounds,
            mesh_level: self.mesh.level,
            layout: self.layout.clone(),
            epsilon: self.inversion.epsilon,
            noise_mode: self.inversion.noise_mode,
            regularization: self.inversion.regularization,
            data: self.inversion.data.clone(),
            optimizer: self.optimizer.clone(),
            seed: self.seed,
            l1_subdivision: self.l1_subdivision,
        }
    }

    /// Study settings. The `--seed` override shifts every study seed.
    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            phantom: self.phantom.clone(),
            bounds: self.bounds,
            layout: self.layout.clone(),
            schedule: self.schedule.clone(),
            epsilons: self.study.epsilons.clone(),
            seeds: self.study.seeds.iter().map(|s| s.wrapping_add(self.seed)).collect(),
            measurement_refinement: self.study.measurement_refinement,
            max_level: self.mesh.max_level.saturating_sub(self.study.measurement_refinement),
            optimizer: self.optimizer.clone(),
            l1_subdivision: self.l1_subdivision,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "phantom": {"background": 1.0, "inclusions": [{"shape": "disk", "center": [0.5, 0.5], "radius": 0.25, "value": 3.0}]},
        "bounds": [0.5, 3.5]
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.domain.len(), 4);
        assert_eq!(cfg.mesh.level, 4);
        assert_eq!(cfg.output, PathBuf::from("out"));
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_levels_and_fields() {
        let mut cfg = RunConfig::from_json(MINIMAL).unwrap();
        cfg.mesh.level = 7;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::from_json(&MINIMAL.replace("\"bounds\"", "\"bonds\"")).is_err());
        assert!(RunConfig::from_json(&MINIMAL.replace("3.5]", "2.5]")).is_err());
    }
}
