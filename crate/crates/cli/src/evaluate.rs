//! Per-run evaluation: domain mIoU reports, attention and feature-distance
//! diagnostics, and raw feature dumps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use gkd_core::checkpoint::write_tensors;
use gkd_core::config::ExperimentConfig;
use gkd_core::datagen::{generate_heldout_source, Corpus, Sample};
use gkd_core::eval::{
    attention_diagnostics, evaluate_domains, feature_distance_stats, fit_linear_alignment,
    reports_to_csv, unseen_average, AttentionDiagnostics, DistanceStats, DomainReport,
    FeatureAlignment,
};
use gkd_core::models::{encode_tensors, Encoder};
use gkd_core::tensor::Tensor;

use crate::artifacts::LoadedRun;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub label_fraction: f64,
    pub domains: Vec<DomainReport>,
    pub seen_miou: f64,
    pub unseen_avg: f64,
    /// Attention structure on a held-out source batch (absent for methods
    /// without a distillation head).
    pub attention: Option<AttentionDiagnostics>,
    /// Projected-feature distance to the teacher on target domains.
    pub feature_distance: DistanceStats,
}

/// Token pairs `(student [1,N,Cs], teacher [1,N,Ct])` for a sample list.
fn token_pairs(
    student: &Encoder,
    teacher: &Encoder,
    samples: &[&Sample],
) -> CliResult<Vec<(Tensor, Tensor)>> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let (_, st) = encode_tensors(student, &s.image, None)?;
        let (_, tt) = encode_tensors(teacher, &s.image, None)?;
        pairs.push((st, tt));
    }
    Ok(pairs)
}

pub fn evaluate_run(
    run: &LoadedRun,
    corpus: &Corpus,
    teacher: &Encoder,
    config: &ExperimentConfig,
) -> CliResult<RunReport> {
    let domains = evaluate_domains(
        &run.student,
        &run.decoder,
        corpus,
        config.protocol.batch_size,
        Some(config.eval_source_count),
    )?;
    let seen_miou = domains
        .iter()
        .find(|r| r.seen)
        .map(|r| r.miou)
        .ok_or_else(|| CliError::runtime("no seen domain in evaluation"))?;
    let unseen_avg = unseen_average(&domains)?;

    // Distances on every target sample; alignment depends on what the
    // method trained. Supervised-only runs get a least-squares adapter fit
    // on held-out source pairs.
    let target_refs: Vec<&Sample> = corpus.targets.iter().collect();
    let target_pairs = token_pairs(&run.student, teacher, &target_refs)?;
    let qsd_cfg = config.protocol.qsd.clone();
    let feature_distance = if let Some(head) = &run.qsd_head {
        feature_distance_stats(
            &FeatureAlignment::QsdReconstruction(head, &qsd_cfg),
            &target_pairs,
        )?
    } else if let Some(adapter) = &run.adapter {
        feature_distance_stats(&FeatureAlignment::Adapter(adapter), &target_pairs)?
    } else {
        let heldout = generate_heldout_source(&corpus.manifest, 32)?;
        let heldout_refs: Vec<&Sample> = heldout.iter().collect();
        let fit_pairs = token_pairs(&run.student, teacher, &heldout_refs)?;
        let fit = fit_linear_alignment(&fit_pairs, 1e-6)?;
        feature_distance_stats(&FeatureAlignment::Adapter(&fit), &target_pairs)?
    };

    let attention = match &run.qsd_head {
        Some(head) => {
            let heldout = generate_heldout_source(&corpus.manifest, 16)?;
            let heldout_refs: Vec<&Sample> = heldout.iter().collect();
            let pairs = token_pairs(&run.student, teacher, &heldout_refs)?;
            // One batch: stack pairs along the batch axis.
            let n = pairs[0].0.shape()[1];
            let (cs, ct) = (pairs[0].0.shape()[2], pairs[0].1.shape()[2]);
            let mut s_data = Vec::new();
            let mut t_data = Vec::new();
            for (s, t) in &pairs {
                s_data.extend_from_slice(s.data());
                t_data.extend_from_slice(t.data());
            }
            let s = Tensor::from_vec(vec![pairs.len(), n, cs], s_data)?;
            let t = Tensor::from_vec(vec![pairs.len(), n, ct], t_data)?;
            Some(attention_diagnostics(head, &qsd_cfg, &s, &t)?)
        }
        None => None,
    };

    Ok(RunReport {
        method: run.method.name().to_string(),
        seed: run.seed,
        label_fraction: run.label_fraction,
        domains,
        seen_miou,
        unseen_avg,
        attention,
        feature_distance,
    })
}

/// Writes report.json, report.csv, and a raw feature dump for the first few
/// target samples.
pub fn write_run_report(
    dir: &Path,
    run: &LoadedRun,
    report: &RunReport,
    corpus: &Corpus,
    teacher: &Encoder,
) -> CliResult<()> {
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report).map_err(|e| CliError::runtime(e.to_string()))?,
    )?;
    let run_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| report.method.clone());
    std::fs::write(
        dir.join("report.csv"),
        reports_to_csv(&run_id, report.seed, &report.domains),
    )?;

    let dump_count = corpus.targets.len().min(4);
    let mut tensors = Vec::new();
    let mut owned = Vec::new();
    for s in corpus.targets.iter().take(dump_count) {
        let (_, st) = encode_tensors(&run.student, &s.image, None)?;
        let (_, tt) = encode_tensors(teacher, &s.image, None)?;
        owned.push((format!("target{}.student_tokens", s.id), st));
        owned.push((format!("target{}.teacher_tokens", s.id), tt));
    }
    for (name, t) in &owned {
        tensors.push((name.clone(), t));
    }
    let file = std::fs::File::create(dir.join("features.gkdc"))?;
    write_tensors(std::io::BufWriter::new(file), &tensors)?;
    Ok(())
}
