//! Experiment configuration: one TOML file drives corpus location, model
//! capacities, the stage plan, loss weights, and seeds. Command-line flags
//! override individual fields; the effective values are echoed into every
//! run record header.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::EncoderConfig;
use crate::pipeline::{ProtocolConfig, TeacherTrainConfig};

pub fn default_teacher_model() -> EncoderConfig {
    EncoderConfig {
        image_size: 64,
        patch_size: 8,
        depth: 6,
        dim: 64,
        heads: 4,
        mlp_ratio: 2.0,
    }
}

pub fn default_student_model() -> EncoderConfig {
    EncoderConfig {
        image_size: 64,
        patch_size: 8,
        depth: 4,
        dim: 32,
        heads: 4,
        mlp_ratio: 2.0,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSection {
    pub model: EncoderConfig,
    pub train: TeacherTrainConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            model: default_teacher_model(),
            train: TeacherTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub label_fraction: f64,
    /// Cap on source samples scored during evaluation (targets are always
    /// scored in full).
    pub eval_source_count: usize,
    pub teacher: TeacherSection,
    pub student: EncoderConfig,
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("runs"),
            seeds: vec![1, 2, 3],
            label_fraction: 1.0,
            eval_source_count: 128,
            teacher: TeacherSection::default(),
            student: default_student_model(),
            protocol: ProtocolConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds must be nonempty"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        self.teacher.model.validate()?;
        self.student.validate()?;
        if self.teacher.model.image_size != self.student.image_size
            || self.teacher.model.patch_size != self.student.patch_size
        {
            return Err(Error::validation(
                "teacher and student must share image_size and patch_size",
            ));
        }
        self.protocol.qsd_weights.validate()?;
        if self.protocol.qsd.temperature <= 0.0 {
            return Err(Error::validation("qsd temperature must be positive"));
        }
        if !(self.protocol.mask_ratio > 0.0 && self.protocol.mask_ratio < 1.0) {
            return Err(Error::validation(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.protocol.mask_ratio
            )));
        }
        for (name, steps) in [
            ("stage1_steps", self.protocol.stage1_steps),
            ("stage2_steps", self.protocol.stage2_steps),
            ("stage3_steps", self.protocol.stage3_steps),
            ("joint_steps", self.protocol.joint_steps),
        ] {
            if steps == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.protocol.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        Ok(())
    }

    /// The effective configuration as a JSON value, for run-record headers.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let text = r#"
            seeds = [5]
            [protocol]
            stage1_steps = 10
        "#;
        let config: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(config.seeds, vec![5]);
        assert_eq!(config.protocol.stage1_steps, 10);
        assert_eq!(
            config.protocol.stage2_steps,
            ProtocolConfig::default().stage2_steps
        );
        assert_eq!(config.student.dim, 32);
        config.validate().unwrap();
    }

    #[test]
    fn invalid_values_rejected() {
        let mut config = ExperimentConfig::default();
        config.seeds.clear();
        assert!(config.validate().is_err());

        let mut config = ExperimentConfig::default();
        config.label_fraction = 0.0;
        assert!(config.validate().is_err());

        let mut config = ExperimentConfig::default();
        config.protocol.qsd_weights.alpha = -0.5;
        assert!(config.validate().is_err());

        let mut config = ExperimentConfig::default();
        config.student.image_size = 32;
        assert!(config.validate().is_err());
    }
}
