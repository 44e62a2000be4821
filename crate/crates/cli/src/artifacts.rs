//! On-disk layout of teacher and run directories.
//!
//! Teacher directory: `encoder.gkdc`, `decoder.gkdc`, `meta.json`,
//! `record.jsonl`.
//!
//! Run directory: `record.jsonl`, `student_<stage>.gkdc` per stage boundary,
//! `student_final.gkdc`, `decoder_final.gkdc`, `qsd_head.gkdc` or
//! `adapter.gkdc` when the method owns one, plus `report.json`,
//! `report.csv`, and `features.gkdc` once evaluated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gkd_core::checkpoint::{load_module, module_hash, save_module};
use gkd_core::config::ExperimentConfig;
use gkd_core::models::{init_decoder, init_encoder, Decoder, Encoder, Linear};
use gkd_core::pipeline::{Method, RunArtifacts, TeacherBundle};
use gkd_core::qsd::QsdHead;
use gkd_core::record::RunRecord;

use crate::error::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
pub struct TeacherMeta {
    pub val_miou: f64,
    pub encoder_hash: String,
    pub config: serde_json::Value,
}

pub fn teacher_dir(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("teacher")
}

pub fn save_teacher(
    dir: &Path,
    bundle: &TeacherBundle,
    record: &RunRecord,
    config: &ExperimentConfig,
) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    save_module(&dir.join("encoder.gkdc"), &bundle.encoder)?;
    save_module(&dir.join("decoder.gkdc"), &bundle.decoder)?;
    record.save(&dir.join("record.jsonl"))?;
    let meta = TeacherMeta {
        val_miou: bundle.val_miou,
        encoder_hash: module_hash(&bundle.encoder),
        config: config.echo(),
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| CliError::runtime(e.to_string()))?,
    )?;
    Ok(())
}

/// Loads the frozen teacher; a missing checkpoint points the user at
/// `pretrain-teacher`.
pub fn load_teacher(dir: &Path, config: &ExperimentConfig) -> CliResult<TeacherBundle> {
    let encoder_path = dir.join("encoder.gkdc");
    if !encoder_path.exists() {
        return Err(CliError::usage(format!(
            "teacher checkpoint {} not found; run `gkd pretrain-teacher --config <config>` first",
            encoder_path.display()
        )));
    }
    let mut encoder = init_encoder(&config.teacher.model, 0)?;
    load_module(&encoder_path, &mut encoder)?;
    let mut decoder = init_decoder(
        config.teacher.model.dim,
        gkd_core::datagen::CLASSES,
        config.teacher.model.grid(),
        config.teacher.model.image_size,
        0,
    );
    load_module(&dir.join("decoder.gkdc"), &mut decoder)?;
    let meta: TeacherMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
        .map_err(|e| CliError::runtime(format!("teacher meta: {e}")))?;
    Ok(TeacherBundle {
        encoder,
        decoder,
        val_miou: meta.val_miou,
    })
}

/// Compact directory name for one run.
pub fn run_dir_name(method: Method, label_fraction: f64, seed: u64) -> String {
    if label_fraction == 1.0 {
        format!("{}-s{}", method.name(), seed)
    } else {
        format!("{}-lf{}-s{}", method.name(), label_fraction, seed)
    }
}

pub fn save_run(dir: &Path, artifacts: &RunArtifacts) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    artifacts.record.save(&dir.join("record.jsonl"))?;
    for (stage, snapshot) in &artifacts.stage_students {
        save_module(&dir.join(format!("student_{stage}.gkdc")), snapshot)?;
    }
    save_module(&dir.join("student_final.gkdc"), &artifacts.student)?;
    save_module(&dir.join("decoder_final.gkdc"), &artifacts.decoder)?;
    if let Some(head) = &artifacts.qsd_head {
        save_module(&dir.join("qsd_head.gkdc"), head)?;
    }
    if let Some(adapter) = &artifacts.adapter {
        save_module(&dir.join("adapter.gkdc"), adapter)?;
    }
    Ok(())
}

pub struct LoadedRun {
    pub method: Method,
    pub seed: u64,
    pub label_fraction: f64,
    pub student: Encoder,
    pub decoder: Decoder,
    pub qsd_head: Option<QsdHead>,
    pub adapter: Option<Linear>,
    pub record: RunRecord,
}

pub fn load_run(dir: &Path, config: &ExperimentConfig) -> CliResult<LoadedRun> {
    let record_path = dir.join("record.jsonl");
    if !record_path.exists() {
        return Err(CliError::usage(format!(
            "{} is not a run directory (no record.jsonl)",
            dir.display()
        )));
    }
    let record = RunRecord::load(&record_path)?;
    let method = Method::parse(&record.header.method)
        .map_err(|e| CliError::runtime(format!("run record: {e}")))?;
    let mut student = init_encoder(&config.student, 0)?;
    load_module(&dir.join("student_final.gkdc"), &mut student)?;
    let mut decoder = init_decoder(
        config.student.dim,
        gkd_core::datagen::CLASSES,
        config.student.grid(),
        config.student.image_size,
        0,
    );
    load_module(&dir.join("decoder_final.gkdc"), &mut decoder)?;
    let qsd_head = {
        let path = dir.join("qsd_head.gkdc");
        if path.exists() {
            let mut head = QsdHead::init(config.student.dim, config.teacher.model.dim, 0);
            load_module(&path, &mut head)?;
            Some(head)
        } else {
            None
        }
    };
    let adapter = {
        let path = dir.join("adapter.gkdc");
        if path.exists() {
            let mut adapter = Linear {
                weight: gkd_core::Tensor::zeros(vec![config.student.dim, config.teacher.model.dim]),
                bias: gkd_core::Tensor::zeros(vec![config.teacher.model.dim]),
            };
            load_module(&path, &mut adapter)?;
            Some(adapter)
        } else {
            None
        }
    };
    Ok(LoadedRun {
        method,
        seed: record.header.seed,
        label_fraction: record.header.label_fraction,
        student,
        decoder,
        qsd_head,
        adapter,
        record,
    })
}

/// Refuses to clobber existing output unless `overwrite` is set.
pub fn guard_overwrite(path: &Path, overwrite: bool) -> CliResult<()> {
    if path.exists() && !overwrite {
        return Err(CliError::usage(format!(
            "{} exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}
