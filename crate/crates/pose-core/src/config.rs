//! Experiment configuration: one JSON document describing data, networks,
//! all training stages, baselines, the ablation grid, seeds and output
//! layout. Defaults are desk-scale (tiny nets, few hundred steps) so a full
//! comparison finishes on one workstation; learning rates in particular are
//! far larger than the fine-tuning rates used at production scale.

use crate::baselines::BaselineConfig;
use crate::data::BlobConfig;
use crate::nets::NetConfig;
use crate::phase1::Phase1Config;
use crate::phase2::Phase2Config;
use crate::{PoseError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable overriding the output root.
pub const OUTPUT_ROOT_ENV: &str = "POSE_OUTPUT_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 600,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// sampler step counts evaluated for every method
    pub steps_list: Vec<usize>,
    pub n_projections: usize,
    /// teacher sampling uses guidance, doubling its NFE accounting
    pub guided_teacher: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps_list: vec![1, 4, 40],
            n_projections: 64,
            guided_teacher: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// frame-consistency weights to sweep
    pub lambda_grid: Vec<f64>,
    /// priming variants feeding the adversarial phase
    pub phase1_variants: Vec<String>,
    /// discriminator backbone modes: "ema" or "frozen" (decay 1.0)
    pub backbones: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            lambda_grid: vec![0.0, 2.5, 10.0, 100.0],
            phase1_variants: vec!["none".into(), "lcm".into(), "pose-i".into()],
            backbones: vec!["ema".into(), "frozen".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub data: BlobConfig,
    pub net: NetConfig,
    pub teacher: TeacherConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub baselines: Vec<BaselineConfig>,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_root: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        use crate::baselines::BaselineMethod;
        // desk-scale defaults; production-scale rates (1e-6 / 2e-6) would
        // barely move these tiny randomly-initialized nets
        let data = BlobConfig {
            n_clips: 128,
            frames: 4,
            channels: 1,
            height: 8,
            width: 8,
            shape_classes: 4,
            n_directions: 8,
            min_speed: 0.0,
            max_speed: 2.0,
            blob_radius: 1.5,
        };
        let net = NetConfig {
            channels: 1,
            height: 8,
            width: 8,
            patch: 2,
            d_model: 24,
            n_blocks: 2,
            n_heads: 2,
        };
        let phase1 = Phase1Config {
            steps: 200,
            batch_size: 8,
            lr_generator: 2e-5,
            lr_fake: 5e-4,
            fake_updates: 5,
            ..Phase1Config::default()
        };
        let phase2 = Phase2Config {
            steps: 100,
            batch_size: 8,
            lr_generator: 2e-5,
            lr_head: 5e-4,
            ..Phase2Config::default()
        };
        let baselines = vec![
            BaselineConfig {
                method: BaselineMethod::Lcm,
                steps: 300,
                batch_size: 8,
                lr: 5e-4,
                ..BaselineConfig::default()
            },
            BaselineConfig {
                method: BaselineMethod::Add,
                steps: 300,
                batch_size: 8,
                lr: 2e-4,
                ..BaselineConfig::default()
            },
            BaselineConfig {
                method: BaselineMethod::Dmd2,
                steps: 150,
                batch_size: 8,
                lr: 2e-4,
                ..BaselineConfig::default()
            },
        ];
        ExperimentSpec {
            data,
            net,
            teacher: TeacherConfig::default(),
            phase1,
            phase2,
            baselines,
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![1, 2, 3],
            output_root: PathBuf::from("runs"),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(PoseError::InvalidArgument(
                "seeds list must not be empty".into(),
            ));
        }
        if self.net.height != self.data.height
            || self.net.width != self.data.width
            || self.net.channels != self.data.channels
        {
            return Err(PoseError::InvalidArgument(format!(
                "net geometry {}x{}x{} does not match data {}x{}x{}",
                self.net.channels,
                self.net.height,
                self.net.width,
                self.data.channels,
                self.data.height,
                self.data.width
            )));
        }
        if self.net.height % self.net.patch != 0 || self.net.width % self.net.patch != 0 {
            return Err(PoseError::InvalidArgument(
                "patch size must divide height and width".into(),
            ));
        }
        if self.phase2.lambda_consist < 0.0 || self.phase2.eta_r1 < 0.0 {
            return Err(PoseError::InvalidArgument(
                "lambda and eta must be >= 0".into(),
            ));
        }
        if self.eval.steps_list.iter().any(|&s| s == 0) {
            return Err(PoseError::InvalidArgument(
                "eval step counts must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: ExperimentSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Output root with the environment override applied.
    pub fn resolved_output_root(&self) -> PathBuf {
        match std::env::var(OUTPUT_ROOT_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_root.clone(),
        }
    }

    /// Hex SHA-256 of the canonical (serialized) spec; changes iff the spec
    /// changes.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("spec serializes").as_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid_and_roundtrips() {
        let spec = ExperimentSpec::default();
        spec.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        spec.save(&path).unwrap();
        let back = ExperimentSpec::load(&path).unwrap();
        assert_eq!(back.hash(), spec.hash());
    }

    #[test]
    fn validation_catches_bad_specs() {
        let mut spec = ExperimentSpec::default();
        spec.seeds.clear();
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::default();
        spec.net.height = 16;
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::default();
        spec.eval.steps_list = vec![0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn hash_changes_with_spec() {
        let a = ExperimentSpec::default();
        let mut b = ExperimentSpec::default();
        assert_eq!(a.hash(), b.hash());
        b.phase2.lambda_consist = 2.5;
        assert_ne!(a.hash(), b.hash());
    }

    fn checked_in_defaults_path() -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs/default.json")
    }

    /// Regeneration helper: `cargo test -p pose-core regenerate_default_config -- --ignored`
    #[test]
    #[ignore]
    fn regenerate_default_config() {
        ExperimentSpec::default()
            .save(&checked_in_defaults_path())
            .unwrap();
    }

    #[test]
    fn checked_in_defaults_match_code_defaults() {
        let spec = ExperimentSpec::load(&checked_in_defaults_path()).unwrap();
        assert_eq!(spec.hash(), ExperimentSpec::default().hash());
    }

    #[test]
    fn ablation_grid_defaults_match_expectations() {
        let ab = AblationConfig::default();
        assert_eq!(ab.lambda_grid, vec![0.0, 2.5, 10.0, 100.0]);
        assert_eq!(ab.phase1_variants, vec!["none", "lcm", "pose-i"]);
    }
}
