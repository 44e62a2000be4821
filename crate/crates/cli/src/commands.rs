//! Implementations of the six subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gkd_core::config::ExperimentConfig;
use gkd_core::datagen::{build_corpus, load_corpus, Sample, SplitManifest};
use gkd_core::gradcheck::run_standard_checks;
use gkd_core::pipeline::{
    pretrain_teacher, run_method, Method, RunInputs, TeacherFeatures,
};
use gkd_core::record::RunRecord;

use crate::artifacts::{
    guard_overwrite, load_run, load_teacher, run_dir_name, save_run, save_teacher, teacher_dir,
};
use crate::error::{CliError, CliResult};
use crate::evaluate::{evaluate_run, write_run_report, RunReport};
use crate::report;

pub struct CommonOverrides {
    pub seed: Option<u64>,
    pub label_fraction: Option<f64>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path, overrides: &CommonOverrides) -> CliResult<ExperimentConfig> {
    if !path.exists() {
        return Err(CliError::usage(format!(
            "config file {} not found",
            path.display()
        )));
    }
    let mut config = ExperimentConfig::load(path).map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(seed) = overrides.seed {
        config.seeds = vec![seed];
    }
    if let Some(f) = overrides.label_fraction {
        config.label_fraction = f;
    }
    if let Some(out) = &overrides.out {
        config.out_dir = out.clone();
    }
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(config)
}

// ---------------------------------------------------------------------------

pub fn cmd_build_corpus(manifest_path: &Path, out: &Path, overwrite: bool) -> CliResult<()> {
    if !manifest_path.exists() {
        return Err(CliError::usage(format!(
            "manifest {} not found",
            manifest_path.display()
        )));
    }
    let manifest =
        SplitManifest::load(manifest_path).map_err(|e| CliError::usage(e.to_string()))?;
    guard_overwrite(&out.join("proxy.gkdd"), overwrite)?;
    let started = Instant::now();
    let summary = build_corpus(&manifest, out)?;
    println!(
        "corpus written to {} in {:.1} s",
        out.display(),
        started.elapsed().as_secs_f64()
    );
    println!(
        "  proxy: {} (unlabeled)\n  source: {} ({} labeled)\n  targets: {}",
        summary.proxy, summary.source, summary.source_labeled, summary.targets
    );
    println!("  hash: {}", summary.hash);
    Ok(())
}

pub fn cmd_pretrain_teacher(
    config_path: &Path,
    overrides: &CommonOverrides,
    overwrite: bool,
) -> CliResult<()> {
    let config = load_config(config_path, overrides)?;
    let manifest_path = config.corpus_dir.join("manifest.toml");
    if !manifest_path.exists() {
        return Err(CliError::usage(format!(
            "corpus manifest {} not found; run `gkd build-corpus` first",
            manifest_path.display()
        )));
    }
    let manifest =
        SplitManifest::load(&manifest_path).map_err(|e| CliError::usage(e.to_string()))?;
    let dir = teacher_dir(&config);
    guard_overwrite(&dir.join("encoder.gkdc"), overwrite)?;

    let started = Instant::now();
    let (bundle, record) = pretrain_teacher(&manifest, &config.teacher.model, &config.teacher.train)?;
    save_teacher(&dir, &bundle, &record, &config)?;
    println!(
        "teacher written to {} in {:.1} s (validation mIoU {:.4})",
        dir.display(),
        started.elapsed().as_secs_f64(),
        bundle.val_miou
    );
    Ok(())
}

/// Runs one method for every configured seed, evaluates each run, and
/// writes run directories under `<out_dir>`.
pub fn cmd_run(
    config_path: &Path,
    method_name: &str,
    overrides: &CommonOverrides,
    overwrite: bool,
    parallel: bool,
) -> CliResult<()> {
    let config = load_config(config_path, overrides)?;
    let method = Method::parse(method_name).map_err(|e| CliError::usage(e.to_string()))?;
    if !config.corpus_dir.join("manifest.toml").exists() {
        return Err(CliError::usage(format!(
            "corpus not found at {}; run `gkd build-corpus` first",
            config.corpus_dir.display()
        )));
    }
    let corpus = load_corpus(&config.corpus_dir)?;
    let teacher = load_teacher(&teacher_dir(&config), &config)?;

    for &seed in &config.seeds {
        guard_overwrite(
            &config
                .out_dir
                .join(run_dir_name(method, config.label_fraction, seed)),
            overwrite,
        )?;
    }

    println!("computing teacher features over proxy + source splits ...");
    let all_train: Vec<&Sample> = corpus.proxy.iter().chain(corpus.source.iter()).collect();
    let teacher_feats =
        TeacherFeatures::compute(&teacher.encoder, &all_train, config.protocol.batch_size)?;

    let execute = |seed: u64| -> CliResult<(u64, RunReport, f64)> {
        let started = Instant::now();
        let inputs = RunInputs {
            corpus: &corpus,
            teacher: &teacher.encoder,
            teacher_feats: &teacher_feats,
            student_cfg: &config.student,
            protocol: &config.protocol,
            label_fraction: config.label_fraction,
            seed,
            config_echo: config.echo(),
        };
        let artifacts = run_method(method, &inputs)?;
        let dir = config
            .out_dir
            .join(run_dir_name(method, config.label_fraction, seed));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        save_run(&dir, &artifacts)?;
        let run = load_run(&dir, &config)?;
        let report = evaluate_run(&run, &corpus, &teacher.encoder, &config)?;
        write_run_report(&dir, &run, &report, &corpus, &teacher.encoder)?;
        Ok((seed, report, started.elapsed().as_secs_f64()))
    };

    let mut results: Vec<(u64, RunReport, f64)> = Vec::new();
    if parallel && config.seeds.len() > 1 {
        let workers = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        let mut pending = config.seeds.clone();
        while !pending.is_empty() {
            let chunk: Vec<u64> = pending
                .drain(..pending.len().min(workers))
                .collect();
            let chunk_results = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&seed| scope.spawn(move || execute(seed)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("run thread panicked"))
                    .collect::<Vec<_>>()
            });
            for r in chunk_results {
                results.push(r?);
            }
        }
    } else {
        for &seed in &config.seeds {
            results.push(execute(seed)?);
        }
    }

    for (seed, report, secs) in &results {
        println!(
            "{} seed {}: seen mIoU {:.4}, unseen avg {:.4} ({:.1} s)",
            method.name(),
            seed,
            report.seen_miou,
            report.unseen_avg,
            secs
        );
    }
    Ok(())
}

pub fn cmd_eval(config_path: &Path, run_dir: &Path, overrides: &CommonOverrides) -> CliResult<()> {
    let config = load_config(config_path, overrides)?;
    if !run_dir.exists() {
        return Err(CliError::usage(format!(
            "run directory {} not found",
            run_dir.display()
        )));
    }
    let corpus = load_corpus(&config.corpus_dir)?;
    let teacher = load_teacher(&teacher_dir(&config), &config)?;
    let run = load_run(run_dir, &config)?;
    let report = evaluate_run(&run, &corpus, &teacher.encoder, &config)?;
    write_run_report(run_dir, &run, &report, &corpus, &teacher.encoder)?;
    println!(
        "{}: seen mIoU {:.4}, unseen avg {:.4}",
        run_dir.display(),
        report.seen_miou,
        report.unseen_avg
    );
    for d in &report.domains {
        println!(
            "  {}{}: mIoU {:.4}",
            d.domain_id,
            if d.seen { " (seen)" } else { "" },
            d.miou
        );
    }
    Ok(())
}

pub fn cmd_gradcheck() -> CliResult<()> {
    let started = Instant::now();
    let results = run_standard_checks()?;
    let mut failures = 0usize;
    println!("{:<32} {:>14}  result", "operation", "max rel err");
    for r in &results {
        let ok = r.max_rel_err <= 1e-6;
        if !ok {
            failures += 1;
        }
        println!(
            "{:<32} {:>14.3e}  {}",
            r.name,
            r.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "{} checks, {} failures, {:.2} s",
        results.len(),
        failures,
        elapsed
    );
    if failures > 0 {
        return Err(CliError::runtime(format!(
            "{failures} gradient checks exceeded 1e-6"
        )));
    }
    Ok(())
}

pub fn cmd_report(run_dirs: &[PathBuf], out: &Path, overwrite: bool) -> CliResult<()> {
    if run_dirs.is_empty() {
        return Err(CliError::usage("report needs at least one run directory"));
    }
    let mut loaded = Vec::new();
    for dir in run_dirs {
        let report_path = dir.join("report.json");
        let record_path = dir.join("record.jsonl");
        if !report_path.exists() || !record_path.exists() {
            eprintln!(
                "warning: skipping incomplete run {} (missing report.json or record.jsonl)",
                dir.display()
            );
            continue;
        }
        let report: RunReport =
            serde_json::from_str(&std::fs::read_to_string(&report_path)?)
                .map_err(|e| CliError::runtime(format!("{}: {e}", report_path.display())))?;
        let record = RunRecord::load(&record_path)?;
        loaded.push((report, record));
    }
    if loaded.is_empty() {
        return Err(CliError::usage("no complete runs among the given directories"));
    }
    guard_overwrite(&out.join("summary.txt"), overwrite)?;
    std::fs::create_dir_all(out)?;
    report::write_reports(&loaded, out)?;
    println!("reports written to {}", out.display());
    Ok(())
}
