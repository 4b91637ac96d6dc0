//! One driver per subcommand. Each returns the text printed on success and
//! writes its artifacts under `<out>/<tag>/`.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use sam_core::harness::{
    build_model, evaluate, load_checkpoint, pretrain_saliency_for, prepare_stream, read_records,
    run_experiment, run_matrix, save_checkpoint, write_records, CheckpointMeta, ExperimentConfig,
    PretrainCache, ReportGrid, ResultRecord,
};
use sam_core::nn::ParamList;
use sam_core::robustness::{robustness_curve, spurious_arms, spurious_experiment, write_curve_csv};
use sam_core::{ModulatedBackbone, Sample};

use crate::{ensure_dir, io_err, CliError, CliResult};

/// Output root plus the optional `--seed-list` override.
#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    pub seeds: Option<Vec<u64>>,
}

impl Context {
    /// Applies the seed override and creates `<out>/<tag>/`.
    pub fn prepare(&self, mut cfg: ExperimentConfig) -> CliResult<(ExperimentConfig, PathBuf)> {
        if let Some(s) = &self.seeds {
            cfg.train.seeds = s.clone();
        }
        cfg.validate()?;
        let dir = self.out.join(&cfg.tag);
        ensure_dir(&dir)?;
        let path = dir.join("config.txt");
        fs::write(&path, cfg.to_kv_string()).map_err(|e| io_err(&path, e))?;
        Ok((cfg, dir))
    }
}

fn all_params(model: &ModulatedBackbone) -> ParamList {
    let mut p = model.classifier_params();
    p.extend(model.saliency_params());
    p
}

fn model_stem(dir: &Path, seed: u64) -> PathBuf {
    dir.join("models").join(format!("s{seed}"))
}

/// Pre-trains the saliency predictor for every seed and checkpoints it.
pub fn pretrain(ctx: &Context, cfg: ExperimentConfig) -> CliResult<String> {
    let (cfg, dir) = ctx.prepare(cfg)?;
    let mut text = String::from("seed  initial-kld  final-kld  checkpoint\n");
    for &seed in &cfg.train.seeds {
        let (pred, report) = pretrain_saliency_for(&cfg, seed)?;
        let stem = dir.join("pretrain").join(format!("saliency-s{seed}"));
        ensure_dir(stem.parent().expect("has parent"))?;
        let meta = CheckpointMeta {
            spec: cfg.model,
            size: cfg.benchmark.size,
            epochs: cfg.pretrain.epochs,
            seed,
            sha256: String::new(),
        };
        save_checkpoint(&stem, &pred.params(), &meta)?;
        let (a, b) = report.map_or((f64::NAN, f64::NAN), |r| (r.initial_kld, r.final_kld));
        let _ = writeln!(text, "{seed:>4}  {a:>11.4}  {b:>9.4}  {}", stem.display());
    }
    Ok(text)
}

/// Online training over every seed; records plus final-model checkpoints.
pub fn train(ctx: &Context, cfg: ExperimentConfig) -> CliResult<String> {
    let (cfg, dir) = ctx.prepare(cfg)?;
    let records_path = dir.join("records.jsonl");
    write_records(&records_path, &[], false)?;
    let mut cache = PretrainCache::new();
    let mut finals = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.train.seeds {
        match run_experiment(&cfg, seed, &mut cache) {
            Ok(run) => {
                write_records(&records_path, &run.records, true)?;
                let stem = model_stem(&dir, seed);
                ensure_dir(stem.parent().expect("has parent"))?;
                let meta = CheckpointMeta {
                    spec: cfg.model,
                    size: cfg.benchmark.size,
                    epochs: 1,
                    seed,
                    sha256: String::new(),
                };
                save_checkpoint(&stem, &all_params(&run.model), &meta)?;
                finals.extend(run.records.last().cloned());
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let mut text = ReportGrid::from_records(&finals).render();
    let _ = writeln!(text, "records: {}", records_path.display());
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} run(s) failed (partial results kept):\n{text}\n{}",
            failures.len(),
            failures.join("\n")
        )));
    }
    Ok(text)
}

/// Reloads the checkpoints written by `train` and re-evaluates them.
pub fn eval(ctx: &Context, cfg: ExperimentConfig) -> CliResult<String> {
    let (cfg, dir) = ctx.prepare(cfg)?;
    let mut csv = String::from("seed,task,class_il,task_il\n");
    let mut text = String::from("seed  class-il  task-il  per-task class-il\n");
    for &seed in &cfg.train.seeds {
        let stream = prepare_stream(&cfg, seed)?;
        let model = ModulatedBackbone::new(&cfg.model_config(), stream.size, stream.num_classes, seed)?;
        let stem = model_stem(&dir, seed);
        load_checkpoint(&stem, &all_params(&model))
            .map_err(|e| CliError::Runtime(format!("{}: {e} (run `sam train` first)", stem.display())))?;
        let ev = evaluate(&model, &stream, stream.num_tasks())?;
        for (t, (c, k)) in ev.class_il.iter().zip(&ev.task_il).enumerate() {
            let _ = writeln!(csv, "{seed},{t},{c},{k}");
        }
        let per: Vec<String> = ev.class_il.iter().map(|a| format!("{a:.3}")).collect();
        let _ = writeln!(
            text,
            "{seed:>4}  {:>8.4}  {:>7.4}  {}",
            ev.final_class_il()?,
            ev.final_task_il()?,
            per.join(" ")
        );
    }
    let path = dir.join("eval.csv");
    fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    Ok(text)
}

pub fn ablate(
    ctx: &Context,
    cfg: ExperimentConfig,
    schemes: &[String],
    variants: &[String],
) -> CliResult<String> {
    let (cfg, dir) = ctx.prepare(cfg)?;
    let schemes: Vec<&str> = schemes.iter().map(String::as_str).collect();
    let variants: Vec<&str> = variants.iter().map(String::as_str).collect();
    let configs = cfg.ablation_grid(&schemes, &variants)?;
    let path = dir.join("ablation.jsonl");
    let report = run_matrix(&configs, Some(&path))?;
    let finals: Vec<ResultRecord> = report.records.iter().filter(|r| r.is_final()).cloned().collect();
    let grid = ReportGrid::from_records(&finals);
    let mut text = grid.render();
    let _ = writeln!(text, "records: {}", path.display());
    let missing = grid.missing();
    if !report.failures.is_empty() || !missing.is_empty() {
        for f in &report.failures {
            let _ = writeln!(text, "failed: {} seed {}: {}", f.tag, f.seed, f.message);
        }
        for (r, c) in &missing {
            let _ = writeln!(text, "missing cell: {r} / {c}");
        }
        return Err(CliError::Acceptance(format!("ablation grid incomplete\n{text}")));
    }
    Ok(text)
}

/// Trains each seed, then attacks the final model at every ε (1/255 units).
pub fn attack(ctx: &Context, cfg: ExperimentConfig) -> CliResult<String> {
    let (cfg, dir) = ctx.prepare(cfg)?;
    let mut cache = PretrainCache::new();
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    let eps: Vec<f64> = cfg.attack.eps.iter().map(|e| e / 255.0).collect();
    for &seed in &cfg.train.seeds {
        let stream = prepare_stream(&cfg, seed)?;
        let model = build_model(&cfg, &stream, seed, &mut cache)?;
        let run = sam_core::harness::train_online(&cfg, &stream, model, seed, &Default::default())?;
        let test: Vec<&Sample> = stream.test_samples().collect();
        let curve = robustness_curve(
            &run.model,
            &test,
            &eps,
            cfg.attack.steps,
            cfg.attack.step_scale,
            cfg.attack.random_start,
            seed,
        )?;
        for (p, e255) in curve.iter().zip(&cfg.attack.eps) {
            if !p.budget_respected {
                violations.push(format!(
                    "seed {seed} eps {e255}: max perturbation {:.6} exceeds budget",
                    p.max_perturbation
                ));
            }
            rows.push((*e255, seed, p.accuracy));
        }
    }
    let path = dir.join("robustness.csv");
    write_curve_csv(&path, &rows)?;
    let mut text = String::from("epsilon(1/255)  accuracy(mean ± std)\n");
    let data = crate::plot::robustness_data(&rows)?;
    for p in &data.series[0].points {
        let _ = writeln!(text, "{:>14}  {:.4} ± {:.4}", p.x, p.mean, p.std);
    }
    let _ = writeln!(text, "curve: {}", path.display());
    if !violations.is_empty() {
        return Err(CliError::Acceptance(format!("{text}{}", violations.join("\n"))));
    }
    Ok(text)
}

/// Thresholds for the spurious-feature check.
#[derive(Debug, Clone, Copy)]
pub struct SpuriousCheck {
    pub min_gap: f64,
    pub min_recovery: f64,
    /// Fraction of seeds that must meet both thresholds.
    pub min_fraction: f64,
}

pub fn spurious(ctx: &Context, cfg: ExperimentConfig, scale: f32, check: SpuriousCheck) -> CliResult<String> {
    let (cfg, dir) = ctx.prepare(cfg)?;
    for arm in spurious_arms(&cfg, scale) {
        arm.validate()?;
    }
    let rows = spurious_experiment(&cfg, scale, &mut PretrainCache::new())?;
    let recs: Vec<ResultRecord> = rows
        .iter()
        .flat_map(|r| [r.clean.clone(), r.spurious.clone(), r.spurious_sam.clone()])
        .collect();
    write_records(&dir.join("spurious.jsonl"), &recs, false)?;
    let mut csv = String::from("seed,clean,spurious,spurious_sam,gap,recovery\n");
    let mut text = String::from("seed   clean  spurious  sf+sam    gap  recovery\n");
    let mut passing = 0usize;
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.seed,
            r.clean.class_il,
            r.spurious.class_il,
            r.spurious_sam.class_il,
            r.gap(),
            r.recovery()
        );
        let _ = writeln!(
            text,
            "{:>4}  {:.4}    {:.4}  {:.4}  {:+.3}  {:>8.3}",
            r.seed,
            r.clean.class_il,
            r.spurious.class_il,
            r.spurious_sam.class_il,
            r.gap(),
            r.recovery()
        );
        passing += usize::from(r.gap() >= check.min_gap && r.recovery() >= check.min_recovery);
    }
    let path = dir.join("spurious.csv");
    fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    let needed = (check.min_fraction * rows.len() as f64).ceil() as usize;
    let _ = writeln!(
        text,
        "{passing}/{} seeds with gap ≥ {} and recovery ≥ {} (need {needed})",
        rows.len(),
        check.min_gap,
        check.min_recovery
    );
    if passing < needed {
        return Err(CliError::Acceptance(text));
    }
    Ok(text)
}

/// Report grid over the final records of a JSONL file.
pub fn report(records: &Path, require_complete: bool) -> CliResult<String> {
    let recs = read_records(records)?;
    let finals: Vec<ResultRecord> = recs.into_iter().filter(|r| r.is_final()).collect();
    if finals.is_empty() {
        return Err(CliError::Runtime(format!(
            "{}: no completed runs",
            records.display()
        )));
    }
    let grid = ReportGrid::from_records(&finals);
    let text = grid.render();
    if require_complete && !grid.is_complete() {
        return Err(CliError::Acceptance(format!("report grid has missing cells\n{text}")));
    }
    Ok(text)
}
