//! Run provenance: stage plan, per-step losses, data-loader trace, and
//! checkpoint hashes, serialized as JSON lines (header object, one line per
//! step, footer object).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a stage optimizes. Names describe the role, not the formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Attention-based reconstruction distillation (feature + mask + CLS).
    QsdDistill,
    /// Point-wise feature regression through a linear adapter.
    PointwiseDistill,
    /// Cross-entropy on labeled pixels only.
    SupervisedTask,
    /// Task loss plus point-wise distillation, jointly.
    JointTaskPointwise,
    /// Task loss plus the attention-based distillation, jointly.
    JointTaskQsd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub objective: Objective,
    /// Which corpus split feeds the stage.
    pub split: String,
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate per trainable parameter group.
    pub lrs: BTreeMap<String, f64>,
    /// Parameter groups that receive updates; everything else is frozen.
    pub trainable: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub method: String,
    pub seed: u64,
    pub label_fraction: f64,
    pub stages: Vec<StageSpec>,
    /// Effective configuration, echoed for provenance.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: String,
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
    /// Sample ids drawn this step.
    pub samples: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RunFooter {
    /// Module hash at each stage boundary, keyed `<stage>/<module>`.
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub stage_wall_secs: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub header: RunHeader,
    pub steps: Vec<StepLog>,
    pub footer: RunFooter,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(RunHeader),
    Step(StepLog),
    Footer(RunFooter),
}

impl RunRecord {
    pub fn new(header: RunHeader) -> Self {
        RunRecord {
            header,
            steps: Vec::new(),
            footer: RunFooter::default(),
        }
    }

    pub fn log_step(&mut self, step: StepLog) {
        debug_assert!(step.losses.values().all(|v| v.is_finite()));
        self.steps.push(step);
    }

    /// Losses for one named component across all steps of the given stages.
    pub fn loss_series(&self, stages: &[&str], key: &str) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|s| stages.contains(&s.stage.as_str()))
            .filter_map(|s| s.losses.get(key).copied())
            .collect()
    }

    /// The distillation-loss component over every step that has one, in step
    /// order across stages.
    pub fn distill_curve(&self) -> Vec<f64> {
        self.steps
            .iter()
            .filter_map(|s| s.losses.get("distill").copied())
            .collect()
    }

    /// All sample ids that appeared in any training step.
    pub fn trace_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.steps.iter().flat_map(|s| s.samples.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, &Line::Header(self.header.clone()))
            .map_err(|e| Error::format(e.to_string()))?;
        w.write_all(b"\n")?;
        for step in &self.steps {
            serde_json::to_writer(&mut w, &Line::Step(step.clone()))
                .map_err(|e| Error::format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &Line::Footer(self.footer.clone()))
            .map_err(|e| Error::format(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut header = None;
        let mut steps = Vec::new();
        let mut footer = None;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("run record line: {e}")))?;
            match parsed {
                Line::Header(h) => header = Some(h),
                Line::Step(s) => steps.push(s),
                Line::Footer(f) => footer = Some(f),
            }
        }
        let header = header.ok_or_else(|| Error::format("run record missing header"))?;
        let footer = footer.ok_or_else(|| Error::format("run record missing footer"))?;
        Ok(RunRecord {
            header,
            steps,
            footer,
        })
    }
}
