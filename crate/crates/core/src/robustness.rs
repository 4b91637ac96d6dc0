//! Adversarial (PGD) evaluation and the spurious-feature experiment.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch;
use crate::datastream::Sample;
use crate::error::{Result, SamError};
use crate::harness::{accuracy, run_experiment, ExperimentConfig, PretrainCache, ResultRecord};
use crate::modulation::{GradientRule, IntegrationVariant, ModulatedBackbone};
use crate::nn::{argmax_rows, cross_entropy, rng_for, DEVICE};

/// Slack for f32 rounding when checking the projection invariants.
pub const BUDGET_TOLERANCE: f64 = 1e-6;

/// ∞-norm PGD settings; `epsilon` and `step_size` are in [0, 1] pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl AttackConfig {
    /// `steps` iterations of size `step_scale·ε/steps`.
    pub fn scaled(epsilon: f64, steps: usize, step_scale: f64, random_start: bool) -> Self {
        Self {
            epsilon,
            steps,
            step_size: step_scale * epsilon / steps.max(1) as f64,
            random_start,
        }
    }

    /// 10 steps of 2.5·ε/10 from a random start.
    pub fn standard(epsilon: f64) -> Self {
        Self::scaled(epsilon, 10, 2.5, true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(SamError::config("attack epsilon must be ≥ 0"));
        }
        if self.steps == 0 {
            return Err(SamError::config("attack steps must be ≥ 1"));
        }
        if !(self.step_size >= 0.0) {
            return Err(SamError::config("attack step size must be ≥ 0"));
        }
        Ok(())
    }
}

/// Largest |x − x0| and whether every value lies in [0, 1].
pub fn budget_stats(x: &Tensor, x0: &Tensor) -> Result<(f64, bool)> {
    let d = (x - x0)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
    let v: Vec<f32> = x.flatten_all()?.to_vec1()?;
    Ok((f64::from(d), v.iter().all(|p| (0.0..=1.0).contains(p))))
}

/// PGD against an arbitrary differentiable `forward` (images → logits),
/// calling `inspect` with the iterate after every projection.
pub fn pgd_with<F, I>(
    forward: F,
    x0: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
    mut inspect: I,
) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    I: FnMut(&Tensor) -> Result<()>,
{
    cfg.validate()?;
    let x0 = x0.detach();
    if cfg.epsilon == 0.0 {
        return Ok(x0);
    }
    let lo = (&x0 - cfg.epsilon)?.maximum(0f64)?;
    let hi = (&x0 + cfg.epsilon)?.minimum(1f64)?;
    let mut x = if cfg.random_start {
        let n = x0.elem_count();
        let noise: Vec<f32> = (0..n)
            .map(|_| rng.random_range(-cfg.epsilon..=cfg.epsilon) as f32)
            .collect();
        let noise = Tensor::from_vec(noise, x0.dims(), &DEVICE)?;
        (&x0 + noise)?.clamp(&lo, &hi)?
    } else {
        x0.clone()
    };
    for _ in 0..cfg.steps {
        let xv = Var::from_tensor(&x)?;
        let loss = cross_entropy(&forward(xv.as_tensor())?, labels)?;
        let grads = loss.backward()?;
        let g = grads
            .get(xv.as_tensor())
            .ok_or_else(|| SamError::config("attack: model output does not depend on its input"))?;
        x = (&x + (g.sign()? * cfg.step_size)?)?.clamp(&lo, &hi)?.detach();
        inspect(&x)?;
    }
    Ok(x)
}

/// White-box PGD through the full deployed forward, saliency branch
/// included.
pub fn pgd_attack(
    model: &ModulatedBackbone,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    pgd_with(
        |x| Ok(model.forward(x, GradientRule::Through)?.logits),
        images,
        labels,
        cfg,
        rng,
        |_| Ok(()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub accuracy: f64,
    /// Largest ∞-norm perturbation observed at any step.
    pub max_perturbation: f64,
    /// Every iterate of every image stayed in the ε-ball and in [0, 1].
    pub budget_respected: bool,
}

/// Accuracy under attack for each ε (pixel units). ε = 0 reports clean
/// accuracy computed exactly as the evaluation harness does.
pub fn robustness_curve(
    model: &ModulatedBackbone,
    test: &[&Sample],
    epsilons: &[f64],
    steps: usize,
    step_scale: f64,
    random_start: bool,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(epsilons.len());
    for (k, &eps) in epsilons.iter().enumerate() {
        if eps == 0.0 {
            out.push(CurvePoint {
                epsilon: 0.0,
                accuracy: accuracy(model, test)?,
                max_perturbation: 0.0,
                budget_respected: true,
            });
            continue;
        }
        let cfg = AttackConfig::scaled(eps, steps, step_scale, random_start);
        let mut rng = rng_for(seed ^ k as u64, "pgd");
        let (mut hits, mut worst, mut ok) = (0usize, 0f64, true);
        for chunk in test.chunks(32) {
            let x0 = batch::images(chunk, model.size())?;
            let labels = batch::labels(chunk);
            let adv = pgd_with(
                |x| Ok(model.forward(x, GradientRule::Through)?.logits),
                &x0,
                &labels,
                &cfg,
                &mut rng,
                |x| {
                    let (d, in_range) = budget_stats(x, &x0)?;
                    worst = worst.max(d);
                    ok &= in_range && d <= eps + BUDGET_TOLERANCE;
                    Ok(())
                },
            )?;
            let pred = argmax_rows(&model.logits(&adv)?)?;
            hits += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
        }
        out.push(CurvePoint {
            epsilon: eps,
            accuracy: hits as f64 / test.len() as f64,
            max_perturbation: worst,
            budget_respected: ok,
        });
    }
    Ok(out)
}

/// `epsilon,seed,accuracy` rows.
pub fn write_curve_csv(path: &Path, rows: &[(f64, u64, f64)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SamError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| SamError::io(path, e))?;
    let mut text = String::from("epsilon,seed,accuracy\n");
    for (e, s, a) in rows {
        text.push_str(&format!("{e},{s},{a}\n"));
    }
    f.write_all(text.as_bytes()).map_err(|e| SamError::io(path, e))?;
    Ok(())
}

/// Final records of the three spurious-feature arms for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousRow {
    pub seed: u64,
    pub clean: ResultRecord,
    pub spurious: ResultRecord,
    pub spurious_sam: ResultRecord,
}

impl SpuriousRow {
    /// Class-IL points lost by training on spurious data.
    pub fn gap(&self) -> f64 {
        self.clean.class_il - self.spurious.class_il
    }

    /// Fraction of the gap recovered by SAM (NaN if there is no gap).
    pub fn recovery(&self) -> f64 {
        (self.spurious_sam.class_il - self.spurious.class_il) / self.gap()
    }
}

/// The three arm configurations: clean baseline, spurious-trained
/// baseline, spurious-trained with SAM. `scale` is the brightness scale.
pub fn spurious_arms(base: &ExperimentConfig, scale: f32) -> [ExperimentConfig; 3] {
    let mut clean = base.clone();
    clean.benchmark.spurious_scale = 0.0;
    clean.sam.variant = None;
    clean.tag = format!("{}-clean", base.tag);
    let mut sf = clean.clone();
    sf.benchmark.spurious_scale = scale;
    sf.tag = format!("{}-sf", base.tag);
    let mut sf_sam = sf.clone();
    sf_sam.sam.variant = Some(IntegrationVariant::Sam);
    sf_sam.tag = format!("{}-sf-sam", base.tag);
    [clean, sf, sf_sam]
}

/// Runs the three arms on identical seeds; test sets are never altered.
pub fn spurious_experiment(
    base: &ExperimentConfig,
    scale: f32,
    cache: &mut PretrainCache,
) -> Result<Vec<SpuriousRow>> {
    let [clean, sf, sf_sam] = spurious_arms(base, scale);
    let mut rows = Vec::with_capacity(base.train.seeds.len());
    for &seed in &base.train.seeds {
        let last = |cfg: &ExperimentConfig, cache: &mut PretrainCache| -> Result<ResultRecord> {
            let run = run_experiment(cfg, seed, cache)?;
            run.records
                .last()
                .cloned()
                .ok_or_else(|| SamError::data("run produced no records"))
        };
        rows.push(SpuriousRow {
            seed,
            clean: last(&clean, cache)?,
            spurious: last(&sf, cache)?,
            spurious_sam: last(&sf_sam, cache)?,
        });
    }
    Ok(rows)
}
