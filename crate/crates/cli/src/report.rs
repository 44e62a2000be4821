//! Aggregated tables across runs: method comparison, label-fraction sweep,
//! and loss-smoothness statistics, as CSV plus a plain-text summary.

use std::collections::BTreeMap;
use std::path::Path;

use gkd_core::eval::{curve_stats, loss_curve_stats};
use gkd_core::record::RunRecord;

use crate::error::CliResult;
use crate::evaluate::RunReport;

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fraction_label(f: f64) -> String {
    if f == 1.0 {
        "1".to_string()
    } else {
        format!("{f}")
    }
}

/// Rows grouped by (method, label fraction); values across seeds.
fn grouped(
    runs: &[(RunReport, RunRecord)],
) -> BTreeMap<(String, String), Vec<&RunReport>> {
    let mut groups: BTreeMap<(String, String), Vec<&RunReport>> = BTreeMap::new();
    for (report, _) in runs {
        groups
            .entry((report.method.clone(), fraction_label(report.label_fraction)))
            .or_default()
            .push(report);
    }
    groups
}

pub fn write_reports(runs: &[(RunReport, RunRecord)], out: &Path) -> CliResult<()> {
    let groups = grouped(runs);
    let mut summary = String::new();

    // Method comparison table (per-domain mIoU and the unseen average).
    let mut domains: Vec<String> = Vec::new();
    for (report, _) in runs {
        for d in &report.domains {
            if !domains.contains(&d.domain_id) {
                domains.push(d.domain_id.clone());
            }
        }
    }
    let mut methods_csv = String::from("method,label_fraction,seeds");
    for d in &domains {
        methods_csv.push_str(&format!(",{d}_mean,{d}_std"));
    }
    methods_csv.push_str(",unseen_avg_mean,unseen_avg_std\n");
    summary.push_str("method comparison (mIoU, mean +- std over seeds)\n");
    for ((method, fraction), reports) in &groups {
        methods_csv.push_str(&format!("{method},{fraction},{}", reports.len()));
        for d in &domains {
            let vals: Vec<f64> = reports
                .iter()
                .filter_map(|r| {
                    r.domains
                        .iter()
                        .find(|dr| &dr.domain_id == d)
                        .map(|dr| dr.miou)
                })
                .collect();
            if vals.is_empty() {
                methods_csv.push_str(",,");
            } else {
                let (m, s) = mean_std(&vals);
                methods_csv.push_str(&format!(",{m:.6},{s:.6}"));
            }
        }
        let unseen: Vec<f64> = reports.iter().map(|r| r.unseen_avg).collect();
        let (m, s) = mean_std(&unseen);
        methods_csv.push_str(&format!(",{m:.6},{s:.6}\n"));
        summary.push_str(&format!(
            "  {method} (labels {fraction}, {} seeds): unseen {m:.4} +- {s:.4}\n",
            reports.len()
        ));
    }
    std::fs::write(out.join("methods.csv"), &methods_csv)?;

    // Label-fraction sweep.
    let mut sweep_csv = String::from("method,label_fraction,seeds,unseen_avg_mean,unseen_avg_std\n");
    summary.push_str("\nlabel-fraction sweep (unseen mIoU)\n");
    for ((method, fraction), reports) in &groups {
        let unseen: Vec<f64> = reports.iter().map(|r| r.unseen_avg).collect();
        let (m, s) = mean_std(&unseen);
        sweep_csv.push_str(&format!(
            "{method},{fraction},{},{m:.6},{s:.6}\n",
            reports.len()
        ));
        summary.push_str(&format!("  {method} @ {fraction}: {m:.4} +- {s:.4}\n"));
    }
    std::fs::write(out.join("label_fractions.csv"), &sweep_csv)?;

    // Loss smoothness per run, plus per-seed two-stage vs single-stage
    // comparisons when both are present.
    let mut smooth_csv =
        String::from("method,label_fraction,seed,distill_steps,upward_spikes,first_diff_variance\n");
    for (report, record) in runs {
        let curve = record.distill_curve();
        if curve.len() < 2 {
            continue;
        }
        let stats = curve_stats(&curve);
        smooth_csv.push_str(&format!(
            "{},{},{},{},{},{:.6e}\n",
            report.method,
            fraction_label(report.label_fraction),
            report.seed,
            stats.steps,
            stats.upward_spikes,
            stats.first_diff_variance
        ));
    }
    summary.push_str("\nloss smoothness (distillation component)\n");
    let find = |method: &str, seed: u64| {
        runs.iter()
            .find(|(r, _)| r.method == method && r.seed == seed && r.label_fraction == 1.0)
    };
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = runs.iter().map(|(r, _)| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    for &seed in &seeds {
        if let (Some((_, gkd_rec)), Some((_, joint_rec))) =
            (find("gkd", seed), find("single_stage", seed))
        {
            if let Ok((gkd_stats, joint_stats)) = loss_curve_stats(gkd_rec, joint_rec) {
                summary.push_str(&format!(
                    "  seed {seed}: two-stage spikes {} vs single-stage spikes {} over {} steps\n",
                    gkd_stats.upward_spikes, joint_stats.upward_spikes, gkd_stats.steps
                ));
            }
        }
    }
    std::fs::write(out.join("smoothness.csv"), &smooth_csv)?;

    // Diagnostics table.
    let mut diag_csv = String::from(
        "method,label_fraction,seed,attention_diagonal_mass,attention_row_entropy,feature_distance_median\n",
    );
    for (report, _) in runs {
        let (dm, re) = report
            .attention
            .map(|a| (format!("{:.6}", a.diagonal_mass), format!("{:.6}", a.row_entropy)))
            .unwrap_or_default();
        diag_csv.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            report.method,
            fraction_label(report.label_fraction),
            report.seed,
            dm,
            re,
            report.feature_distance.median
        ));
    }
    std::fs::write(out.join("diagnostics.csv"), &diag_csv)?;

    std::fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
