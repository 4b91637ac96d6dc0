use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Arch, BackboneSpec};
use crate::datastream::ImageSize;
use crate::error::{Result, SamError};
use crate::learners::{LearnerConfig, LearnerKind};
use crate::modulation::{IntegrationVariant, ModelConfig, ModulationScheme};
use crate::saliency::PretrainConfig;

/// Where the benchmark images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// Synthetic shapes with analytic saliency.
    Shapes,
    /// Train/test manifests; saliency from the manifest or `saliency_dir`.
    Manifest {
        train: PathBuf,
        test: PathBuf,
        saliency_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub source: DataSource,
    pub classes: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub size: ImageSize,
    pub distractors: usize,
    /// Seed of the generated dataset; run seeds only change the class order.
    pub data_seed: u64,
    /// Spurious brightness offset scale (0 disables).
    pub spurious_scale: f32,
}

/// How the classifier is initialized before the stream starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelInit {
    Scratch,
    /// Classifier backbone copied from the pre-trained saliency encoder.
    Saliency,
    /// Classifier and saliency encoder copied from a classifier pre-trained
    /// on the disjoint pre-training classes.
    Classification,
}

impl fmt::Display for ModelInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scratch => "scratch",
            Self::Saliency => "saliency",
            Self::Classification => "classification",
        })
    }
}

impl FromStr for ModelInit {
    type Err = SamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Self::Scratch),
            "saliency" => Ok(Self::Saliency),
            "classification" => Ok(Self::Classification),
            other => Err(SamError::config(format!(
                "model.init: unknown value `{other}` (expected scratch|saliency|classification)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub variant: Option<IntegrationVariant>,
    pub scheme: ModulationScheme,
    /// Weight λ of the classification loss in L = L_s + λ·L_c.
    pub lambda: f64,
    /// Keep training the saliency network online with L_s.
    pub train_saliency: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub epochs: usize,
    /// Number of shape classes used for pre-training; they follow the
    /// benchmark classes in the shapes catalogue and never overlap them.
    pub classes: usize,
    pub samples_per_class: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    /// Budgets in 1/255 pixel units.
    pub eps: Vec<f64>,
    pub steps: usize,
    /// Step size as a multiple of ε/steps.
    pub step_scale: f64,
    pub random_start: bool,
}

/// One experiment: benchmark, learner, saliency integration, optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tag: String,
    pub benchmark: BenchmarkConfig,
    pub learner: LearnerConfig,
    pub sam: SamConfig,
    pub model: BackboneSpec,
    pub init: ModelInit,
    pub train: TrainConfig,
    pub pretrain: PretrainSpec,
    pub attack: AttackSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tag: "run".into(),
            benchmark: BenchmarkConfig {
                source: DataSource::Shapes,
                classes: 10,
                tasks: 5,
                classes_per_task: 2,
                samples_per_class: 300,
                size: ImageSize::new(32, 32),
                distractors: 3,
                data_seed: 0,
                spurious_scale: 0.0,
            },
            learner: LearnerConfig::new(LearnerKind::Finetune),
            sam: SamConfig {
                variant: None,
                scheme: ModulationScheme::all(),
                lambda: 1.0,
                train_saliency: true,
            },
            model: BackboneSpec {
                arch: Arch::Plain,
                width: 8,
            },
            init: ModelInit::Saliency,
            train: TrainConfig {
                lr: 0.03,
                momentum: 0.0,
                batch: 8,
                seeds: vec![0, 1, 2, 3, 4],
            },
            pretrain: PretrainSpec {
                epochs: 5,
                classes: 10,
                samples_per_class: 40,
                lr: 0.03,
                momentum: 0.9,
                batch: 16,
            },
            attack: AttackSettings {
                eps: vec![0.0, 2.0, 4.0, 8.0],
                steps: 10,
                step_scale: 2.5,
                random_start: true,
            },
        }
    }
}

/// Every accepted key, in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "tag",
    "benchmark.source",
    "benchmark.train_manifest",
    "benchmark.test_manifest",
    "benchmark.saliency_dir",
    "benchmark.classes",
    "benchmark.tasks",
    "benchmark.classes_per_task",
    "benchmark.samples_per_class",
    "benchmark.height",
    "benchmark.width",
    "benchmark.distractors",
    "benchmark.data_seed",
    "benchmark.spurious_scale",
    "learner.kind",
    "learner.buffer",
    "learner.replay_batch",
    "learner.derpp_alpha",
    "learner.derpp_beta",
    "learner.lwf_temperature",
    "learner.lwf_weight",
    "learner.ewc_strength",
    "learner.ewc_decay",
    "sam.variant",
    "sam.scheme",
    "sam.lambda",
    "sam.train_saliency",
    "model.arch",
    "model.width",
    "model.init",
    "train.lr",
    "train.momentum",
    "train.batch",
    "train.seeds",
    "pretrain.epochs",
    "pretrain.classes",
    "pretrain.samples_per_class",
    "pretrain.lr",
    "pretrain.momentum",
    "pretrain.batch",
    "attack.eps",
    "attack.steps",
    "attack.step_scale",
    "attack.random_start",
];

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| SamError::config(format!("{key}: expected {what}, got `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s, what))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Resolves a possibly unqualified key (`buffer` → `learner.buffer`).
pub fn resolve_key(key: &str) -> Result<&'static str> {
    if let Some(k) = CONFIG_KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    let matches: Vec<&'static str> = CONFIG_KEYS
        .iter()
        .copied()
        .filter(|k| k.rsplit('.').next() == Some(key))
        .collect();
    match matches.as_slice() {
        [one] => Ok(one),
        [] => Err(SamError::config(format!("unknown config key `{key}`"))),
        many => Err(SamError::config(format!(
            "ambiguous config key `{key}` (could be {})",
            many.join(", ")
        ))),
    }
}

impl ExperimentConfig {
    /// Assigns one key. Values are validated for type here and for
    /// cross-field constraints in [`ExperimentConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = resolve_key(key)?;
        let v = value.trim();
        let b = &mut self.benchmark;
        match key {
            "tag" => self.tag = v.to_string(),
            "benchmark.source" => {
                b.source = match v {
                    "shapes" => DataSource::Shapes,
                    "manifest" => match &b.source {
                        DataSource::Manifest { .. } => b.source.clone(),
                        DataSource::Shapes => DataSource::Manifest {
                            train: PathBuf::new(),
                            test: PathBuf::new(),
                            saliency_dir: None,
                        },
                    },
                    other => {
                        return Err(SamError::config(format!(
                            "benchmark.source: expected shapes|manifest, got `{other}`"
                        )))
                    }
                }
            }
            "benchmark.train_manifest" | "benchmark.test_manifest" | "benchmark.saliency_dir" => {
                if v.is_empty() {
                    if key == "benchmark.saliency_dir" {
                        if let DataSource::Manifest { saliency_dir, .. } = &mut b.source {
                            *saliency_dir = None;
                        }
                    }
                    return Ok(());
                }
                if let DataSource::Shapes = b.source {
                    b.source = DataSource::Manifest {
                        train: PathBuf::new(),
                        test: PathBuf::new(),
                        saliency_dir: None,
                    };
                }
                if let DataSource::Manifest {
                    train,
                    test,
                    saliency_dir,
                } = &mut b.source
                {
                    match key {
                        "benchmark.train_manifest" => *train = v.into(),
                        "benchmark.test_manifest" => *test = v.into(),
                        _ => *saliency_dir = Some(v.into()),
                    }
                }
            }
            "benchmark.classes" => b.classes = parse(key, v, "an integer")?,
            "benchmark.tasks" => b.tasks = parse(key, v, "an integer")?,
            "benchmark.classes_per_task" => b.classes_per_task = parse(key, v, "an integer")?,
            "benchmark.samples_per_class" => b.samples_per_class = parse(key, v, "an integer")?,
            "benchmark.height" => b.size.height = parse(key, v, "an integer")?,
            "benchmark.width" => b.size.width = parse(key, v, "an integer")?,
            "benchmark.distractors" => b.distractors = parse(key, v, "an integer")?,
            "benchmark.data_seed" => b.data_seed = parse(key, v, "an integer")?,
            "benchmark.spurious_scale" => b.spurious_scale = parse(key, v, "a number")?,
            "learner.kind" => {
                let kind: LearnerKind = v.parse()?;
                if kind.is_rehearsal() != self.learner.kind.is_rehearsal() {
                    // Keep the buffer default consistent with the new kind.
                    self.learner.buffer_size = LearnerConfig::new(kind).buffer_size;
                }
                self.learner.kind = kind;
            }
            "learner.buffer" => self.learner.buffer_size = parse(key, v, "an integer")?,
            "learner.replay_batch" => self.learner.replay_batch = parse(key, v, "an integer")?,
            "learner.derpp_alpha" => self.learner.derpp_alpha = parse(key, v, "a number")?,
            "learner.derpp_beta" => self.learner.derpp_beta = parse(key, v, "a number")?,
            "learner.lwf_temperature" => self.learner.lwf_temperature = parse(key, v, "a number")?,
            "learner.lwf_weight" => self.learner.lwf_weight = parse(key, v, "a number")?,
            "learner.ewc_strength" => self.learner.ewc_strength = parse(key, v, "a number")?,
            "learner.ewc_decay" => self.learner.ewc_decay = parse(key, v, "a number")?,
            "sam.variant" => {
                self.sam.variant = match v {
                    "none" => None,
                    other => Some(other.parse().map_err(|e: SamError| {
                        SamError::config(format!("sam.variant: {e} (or none)"))
                    })?),
                }
            }
            "sam.scheme" => {
                self.sam.scheme = v
                    .parse()
                    .map_err(|e: SamError| SamError::config(format!("sam.scheme: {e}")))?
            }
            "sam.lambda" => self.sam.lambda = parse(key, v, "a number")?,
            "sam.train_saliency" => self.sam.train_saliency = parse(key, v, "true|false")?,
            "model.arch" => self.model.arch = v.parse()?,
            "model.width" => self.model.width = parse(key, v, "an integer")?,
            "model.init" => self.init = v.parse()?,
            "train.lr" => self.train.lr = parse(key, v, "a number")?,
            "train.momentum" => self.train.momentum = parse(key, v, "a number")?,
            "train.batch" => self.train.batch = parse(key, v, "an integer")?,
            "train.seeds" => self.train.seeds = parse_list(key, v, "a comma-separated integer list")?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v, "an integer")?,
            "pretrain.classes" => self.pretrain.classes = parse(key, v, "an integer")?,
            "pretrain.samples_per_class" => self.pretrain.samples_per_class = parse(key, v, "an integer")?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v, "a number")?,
            "pretrain.momentum" => self.pretrain.momentum = parse(key, v, "a number")?,
            "pretrain.batch" => self.pretrain.batch = parse(key, v, "an integer")?,
            "attack.eps" => self.attack.eps = parse_list(key, v, "a comma-separated number list")?,
            "attack.steps" => self.attack.steps = parse(key, v, "an integer")?,
            "attack.step_scale" => self.attack.step_scale = parse(key, v, "a number")?,
            "attack.random_start" => self.attack.random_start = parse(key, v, "true|false")?,
            _ => unreachable!("key list and setter out of sync: {key}"),
        }
        Ok(())
    }

    /// Current value of `key` in its textual form.
    pub fn get(&self, key: &str) -> Result<String> {
        let key = resolve_key(key)?;
        let b = &self.benchmark;
        let manifest = |pick: fn(&PathBuf, &PathBuf, &Option<PathBuf>) -> String| match &b.source {
            DataSource::Manifest {
                train,
                test,
                saliency_dir,
            } => pick(train, test, saliency_dir),
            DataSource::Shapes => String::new(),
        };
        Ok(match key {
            "tag" => self.tag.clone(),
            "benchmark.source" => match b.source {
                DataSource::Shapes => "shapes".into(),
                DataSource::Manifest { .. } => "manifest".into(),
            },
            "benchmark.train_manifest" => manifest(|t, _, _| t.display().to_string()),
            "benchmark.test_manifest" => manifest(|_, t, _| t.display().to_string()),
            "benchmark.saliency_dir" => {
                manifest(|_, _, s| s.as_ref().map(|p| p.display().to_string()).unwrap_or_default())
            }
            "benchmark.classes" => b.classes.to_string(),
            "benchmark.tasks" => b.tasks.to_string(),
            "benchmark.classes_per_task" => b.classes_per_task.to_string(),
            "benchmark.samples_per_class" => b.samples_per_class.to_string(),
            "benchmark.height" => b.size.height.to_string(),
            "benchmark.width" => b.size.width.to_string(),
            "benchmark.distractors" => b.distractors.to_string(),
            "benchmark.data_seed" => b.data_seed.to_string(),
            "benchmark.spurious_scale" => b.spurious_scale.to_string(),
            "learner.kind" => self.learner.kind.to_string(),
            "learner.buffer" => self.learner.buffer_size.to_string(),
            "learner.replay_batch" => self.learner.replay_batch.to_string(),
            "learner.derpp_alpha" => self.learner.derpp_alpha.to_string(),
            "learner.derpp_beta" => self.learner.derpp_beta.to_string(),
            "learner.lwf_temperature" => self.learner.lwf_temperature.to_string(),
            "learner.lwf_weight" => self.learner.lwf_weight.to_string(),
            "learner.ewc_strength" => self.learner.ewc_strength.to_string(),
            "learner.ewc_decay" => self.learner.ewc_decay.to_string(),
            "sam.variant" => self.variant_name(),
            "sam.scheme" => self.sam.scheme.to_string(),
            "sam.lambda" => self.sam.lambda.to_string(),
            "sam.train_saliency" => self.sam.train_saliency.to_string(),
            "model.arch" => self.model.arch.to_string(),
            "model.width" => self.model.width.to_string(),
            "model.init" => self.init.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.momentum" => self.train.momentum.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.seeds" => join(&self.train.seeds),
            "pretrain.epochs" => self.pretrain.epochs.to_string(),
            "pretrain.classes" => self.pretrain.classes.to_string(),
            "pretrain.samples_per_class" => self.pretrain.samples_per_class.to_string(),
            "pretrain.lr" => self.pretrain.lr.to_string(),
            "pretrain.momentum" => self.pretrain.momentum.to_string(),
            "pretrain.batch" => self.pretrain.batch.to_string(),
            "attack.eps" => join(&self.attack.eps),
            "attack.steps" => self.attack.steps.to_string(),
            "attack.step_scale" => self.attack.step_scale.to_string(),
            "attack.random_start" => self.attack.random_start.to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        })
    }

    pub fn variant_name(&self) -> String {
        self.sam
            .variant
            .map_or_else(|| "none".to_string(), |v| v.to_string())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.model,
            variant: self.sam.variant,
            scheme: self.sam.scheme.clone(),
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            momentum: self.pretrain.momentum,
            batch_size: self.pretrain.batch,
            holdout_fraction: 0.1,
            seed,
        }
    }

    /// Cross-field constraints; messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        let b = &self.benchmark;
        if b.tasks == 0 {
            return Err(SamError::config("benchmark.tasks must be ≥ 1"));
        }
        if b.classes_per_task < 2 {
            return Err(SamError::config("benchmark.classes_per_task must be ≥ 2"));
        }
        if let DataSource::Shapes = b.source {
            if b.tasks * b.classes_per_task > b.classes {
                return Err(SamError::config(format!(
                    "benchmark.classes: {} tasks × {} classes need {} classes, have {}",
                    b.tasks,
                    b.classes_per_task,
                    b.tasks * b.classes_per_task,
                    b.classes
                )));
            }
            if b.samples_per_class < 2 {
                return Err(SamError::config("benchmark.samples_per_class must be ≥ 2"));
            }
        }
        if let DataSource::Manifest { train, test, .. } = &b.source {
            if train.as_os_str().is_empty() || test.as_os_str().is_empty() {
                return Err(SamError::config(
                    "benchmark.train_manifest and benchmark.test_manifest are required for manifest data",
                ));
            }
        }
        if b.size.height < 16 || b.size.width < 16 {
            return Err(SamError::config("benchmark.height/width must be ≥ 16"));
        }
        if !(b.spurious_scale >= 0.0) {
            return Err(SamError::config("benchmark.spurious_scale must be ≥ 0"));
        }
        self.learner.validate()?;
        if self.model.width == 0 {
            return Err(SamError::config("model.width must be ≥ 1"));
        }
        if self.train.batch == 0 {
            return Err(SamError::config("train.batch must be ≥ 1"));
        }
        if !(self.train.lr > 0.0) {
            return Err(SamError::config("train.lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(SamError::config("train.momentum must lie in [0, 1)"));
        }
        if self.train.seeds.is_empty() {
            return Err(SamError::config("train.seeds must list at least one seed"));
        }
        if !(self.sam.lambda >= 0.0) {
            return Err(SamError::config("sam.lambda must be ≥ 0"));
        }
        let needs_saliency = self.init != ModelInit::Scratch || self.sam.variant.is_some();
        if needs_saliency && self.pretrain.classes > 0 && self.pretrain.samples_per_class < 2 {
            return Err(SamError::config("pretrain.samples_per_class must be ≥ 2"));
        }
        if self.pretrain.batch == 0 {
            return Err(SamError::config("pretrain.batch must be ≥ 1"));
        }
        if self.attack.steps == 0 {
            return Err(SamError::config("attack.steps must be ≥ 1"));
        }
        if self.attack.eps.iter().any(|e| !(*e >= 0.0)) {
            return Err(SamError::config("attack.eps values must be ≥ 0"));
        }
        Ok(())
    }

    /// Ablation matrix: a plain baseline, then every variant. Variants that
    /// read stage features are crossed with every scheme; SIM and SAI do not
    /// depend on the scheme and run once.
    pub fn ablation_grid(&self, schemes: &[&str], variants: &[&str]) -> Result<Vec<Self>> {
        let mut plain = self.clone();
        plain.sam.variant = None;
        let mut out = vec![plain];
        for v in variants {
            let variant: IntegrationVariant = v.parse()?;
            let own: Vec<&str> = if variant.uses_stage_features() {
                schemes.to_vec()
            } else {
                vec!["11111"]
            };
            for s in own {
                let mut c = self.clone();
                c.sam.variant = Some(variant);
                c.set("sam.scheme", s)?;
                c.validate()?;
                out.push(c);
            }
        }
        Ok(out)
    }

    /// Flat `key = value` text covering every key.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let v = self.get(key).expect("listed keys resolve");
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }

    /// Parses flat `key = value` text on top of the defaults. Blank lines
    /// and `#` comments are ignored; unknown keys are rejected.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SamError::config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| SamError::config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }
}

fn strip(e: SamError) -> String {
    match e {
        SamError::Config(m) => m,
        other => other.to_string(),
    }
}
