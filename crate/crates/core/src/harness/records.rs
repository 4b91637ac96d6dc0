use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::{run_experiment, PretrainCache};
use crate::error::{Result, SamError};

pub const RECORD_SCHEMA: &str = "sam-result/1";

/// Metrics after one task of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema: String,
    pub tag: String,
    pub learner: String,
    pub buffer: usize,
    pub variant: String,
    pub scheme: String,
    pub seed: u64,
    /// 0-based index of the task just completed.
    pub task_index: usize,
    pub num_tasks: usize,
    /// Mean of `task_class_il`.
    pub class_il: f64,
    /// Mean of `task_task_il`.
    pub task_il: f64,
    /// Accuracy on each task seen so far, without task identity.
    pub task_class_il: Vec<f64>,
    /// Same, with prediction restricted to each task's classes.
    pub task_task_il: Vec<f64>,
    pub saliency_cc: Option<f64>,
    pub saliency_sim: Option<f64>,
    pub saliency_kld: Option<f64>,
    pub seconds: f64,
    pub params_train: usize,
    pub params_inference: usize,
}

impl ResultRecord {
    pub fn is_final(&self) -> bool {
        self.task_index + 1 == self.num_tasks
    }

    /// Grid cell this record aggregates into.
    pub fn cell(&self) -> CellKey {
        CellKey {
            tag: self.tag.clone(),
            learner: self.learner.clone(),
            buffer: self.buffer,
            variant: self.variant.clone(),
            scheme: self.scheme.clone(),
        }
    }
}

pub fn write_records(path: &Path, records: &[ResultRecord], append: bool) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SamError::io(dir, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| SamError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| SamError::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let f = fs::File::open(path).map_err(|e| SamError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| SamError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ResultRecord = serde_json::from_str(&line)
            .map_err(|e| SamError::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if r.schema != RECORD_SCHEMA {
            return Err(SamError::data(format!(
                "{}:{}: schema `{}`, expected `{RECORD_SCHEMA}`",
                path.display(),
                n + 1,
                r.schema
            )));
        }
        out.push(r);
    }
    Ok(out)
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for n = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub tag: String,
    pub learner: String,
    pub buffer: usize,
    pub variant: String,
    pub scheme: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub key: CellKey,
    pub runs: usize,
    pub class_il_mean: f64,
    pub class_il_std: f64,
    pub task_il_mean: f64,
    pub task_il_std: f64,
}

/// Mean ± sample std of the final-task accuracies per grid cell.
pub fn aggregate(records: &[ResultRecord]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<CellKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_final()) {
        let e = cells.entry(r.cell()).or_default();
        e.0.push(r.class_il);
        e.1.push(r.task_il);
    }
    cells
        .into_iter()
        .map(|(key, (c, t))| {
            let (cm, cs) = mean_std(&c);
            let (tm, ts) = mean_std(&t);
            CellSummary {
                key,
                runs: c.len(),
                class_il_mean: cm,
                class_il_std: cs,
                task_il_mean: tm,
                task_il_std: ts,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub config: usize,
    pub tag: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixReport {
    pub records: Vec<ResultRecord>,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<RunFailure>,
}

/// Runs every config over its seeds. Failed runs are recorded and skipped.
/// Records are appended to `out` as they complete.
pub fn run_matrix(configs: &[ExperimentConfig], out: Option<&Path>) -> Result<MatrixReport> {
    if let Some(p) = out {
        write_records(p, &[], false)?;
    }
    let mut cache = PretrainCache::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        for &seed in &cfg.train.seeds {
            match run_experiment(cfg, seed, &mut cache) {
                Ok(run) => {
                    if let Some(p) = out {
                        write_records(p, &run.records, true)?;
                    }
                    records.extend(run.records);
                }
                Err(e) => {
                    log::warn!("run `{}` seed {seed} failed: {e}", cfg.tag);
                    failures.push(RunFailure {
                        config: i,
                        tag: cfg.tag.clone(),
                        seed,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(MatrixReport {
        cells: aggregate(&records),
        records,
        failures,
    })
}

#[cfg(test)]
pub(crate) fn planted(tag: &str, learner: &str, buffer: usize, seed: u64, cil: f64, til: f64) -> ResultRecord {
    ResultRecord {
        schema: RECORD_SCHEMA.into(),
        tag: tag.into(),
        learner: learner.into(),
        buffer,
        variant: "none".into(),
        scheme: "11111".into(),
        seed,
        task_index: 0,
        num_tasks: 1,
        class_il: cil,
        task_il: til,
        task_class_il: vec![cil],
        task_task_il: vec![til],
        saliency_cc: None,
        saliency_sim: None,
        saliency_kld: None,
        seconds: 0.0,
        params_train: 0,
        params_inference: 0,
    }
}
