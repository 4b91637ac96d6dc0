use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;

use super::config::{DataSource, ExperimentConfig, ModelInit};
use super::records::{ResultRecord, RECORD_SCHEMA};
use crate::backbone::Backbone;
use crate::batch;
use crate::datastream::{
    attach_saliency, build_split_benchmark, generate_shapes_classes, inject_spurious_features,
    load_manifest, LabeledCollection, Sample, SaliencyOracle, ShapesConfig, TaskStream,
};
use crate::error::{Result, SamError};
use crate::learners::{LearnerKind, LearnerState};
use crate::modulation::{stop_gradient_guard, Classifier, GradientRule, ModulatedBackbone, Phase, StageMix};
use crate::nn::{argmax_rows, cross_entropy, rng_for, Sgd, DEVICE};
use crate::saliency::{evaluate_saliency, kld_loss, pretrain_saliency, PretrainReport, SaliencyPredictor, DEFAULT_EPSILON};

/// Builds the task stream for one run: the dataset is fixed by
/// `benchmark.data_seed`, the class-to-task assignment by `seed`.
pub fn prepare_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    let b = &cfg.benchmark;
    let stream = match &b.source {
        DataSource::Shapes => {
            let classes: Vec<usize> = (0..b.classes).collect();
            let data = generate_shapes_classes(&classes, &shapes_config(cfg, b.samples_per_class, b.data_seed))?;
            build_split_benchmark(&data, b.tasks, b.classes_per_task, seed)?
        }
        DataSource::Manifest {
            train,
            test,
            saliency_dir,
        } => {
            let data = LabeledCollection {
                size: b.size,
                train: load_manifest(train, b.size)?,
                test: load_manifest(test, b.size)?,
            };
            let stream = build_split_benchmark(&data, b.tasks, b.classes_per_task, seed)?;
            match saliency_dir {
                Some(dir) => attach_saliency(
                    &stream,
                    &SaliencyOracle::PrecomputedFiles {
                        dir: dir.clone(),
                        overwrite: false,
                    },
                )?,
                None => stream,
            }
        }
    };
    Ok(if b.spurious_scale > 0.0 {
        inject_spurious_features(&stream, b.spurious_scale)
    } else {
        stream
    })
}

fn shapes_config(cfg: &ExperimentConfig, samples_per_class: usize, seed: u64) -> ShapesConfig {
    let mut s = ShapesConfig::new(cfg.benchmark.size, samples_per_class, seed);
    s.distractors = cfg.benchmark.distractors;
    s
}

/// Shape classes reserved for pre-training: the ones right after the
/// benchmark classes, so the two sets never overlap.
pub fn pretrain_classes(cfg: &ExperimentConfig) -> Vec<usize> {
    let start = match cfg.benchmark.source {
        DataSource::Shapes => cfg.benchmark.classes,
        DataSource::Manifest { .. } => 0,
    };
    (start..start + cfg.pretrain.classes).collect()
}

/// The pre-training set (train split of the reserved classes).
pub fn pretrain_set(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let classes = pretrain_classes(cfg);
    if classes.len() < 2 {
        return Err(SamError::config("pretrain.classes must be ≥ 2"));
    }
    let data = generate_shapes_classes(
        &classes,
        &shapes_config(cfg, cfg.pretrain.samples_per_class, cfg.benchmark.data_seed ^ 0x5eed_0001),
    )?;
    Ok(data.train)
}

fn benchmark_class_set(cfg: &ExperimentConfig) -> BTreeSet<usize> {
    match cfg.benchmark.source {
        DataSource::Shapes => (0..cfg.benchmark.classes).collect(),
        // Pre-training always draws synthetic shapes, a separate catalogue.
        DataSource::Manifest { .. } => BTreeSet::new(),
    }
}

/// A saliency predictor seeded by `seed` and pre-trained per `cfg.pretrain`
/// (no report when `pretrain.epochs` is 0).
pub fn pretrain_saliency_for(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(SaliencyPredictor, Option<PretrainReport>)> {
    let pred = SaliencyPredictor::new(cfg.model, cfg.benchmark.size, seed)?;
    if cfg.pretrain.epochs == 0 {
        return Ok((pred, None));
    }
    let set = pretrain_set(cfg)?;
    let report = pretrain_saliency(&pred, &set, &benchmark_class_set(cfg), &cfg.pretrain_config(seed))?;
    log::info!(
        "saliency pre-training (seed {seed}): held-out KLD {:.4} -> {:.4}",
        report.initial_kld,
        report.final_kld
    );
    Ok((pred, Some(report)))
}

/// Memoizes pre-trained networks across runs that share a seed and the
/// relevant configuration.
#[derive(Debug, Default)]
pub struct PretrainCache {
    saliency: HashMap<String, SaliencyPredictor>,
    classifiers: HashMap<String, Backbone>,
}

impl PretrainCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(cfg: &ExperimentConfig, seed: u64) -> String {
        format!(
            "{:?}|{:?}|{:?}|{}|{}|{}",
            cfg.model, cfg.benchmark.size, cfg.pretrain, cfg.benchmark.data_seed, cfg.benchmark.classes, seed
        )
    }

    /// A saliency predictor pre-trained per `cfg.pretrain` (fresh copy).
    pub fn saliency(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<SaliencyPredictor> {
        let key = Self::key(cfg, seed);
        if !self.saliency.contains_key(&key) {
            let (pred, _) = pretrain_saliency_for(cfg, seed)?;
            self.saliency.insert(key.clone(), pred);
        }
        self.saliency[&key].deep_copy()
    }

    /// A classifier backbone trained with cross-entropy on the pre-training
    /// classes (fresh copy).
    pub fn classifier(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<Backbone> {
        let key = Self::key(cfg, seed);
        if !self.classifiers.contains_key(&key) {
            let set = pretrain_set(cfg)?;
            let k = set.iter().map(|s| s.label).max().unwrap_or(0) + 1;
            let clf = Classifier::new(cfg.model, 3, k, false, &mut rng_for(seed, "classification-pretrain"))?;
            let mut opt = Sgd::new(cfg.pretrain.lr, cfg.pretrain.momentum);
            let mut order: Vec<&Sample> = set.iter().collect();
            let mut rng = rng_for(seed, "classification-pretrain-order");
            let params = clf.params();
            for _ in 0..cfg.pretrain.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.pretrain.batch) {
                    let x = batch::images(chunk, cfg.benchmark.size)?;
                    let loss = cross_entropy(&clf.forward(&x, StageMix::Plain)?, &batch::labels(chunk))?;
                    opt.step(&params, &loss.backward()?)?;
                }
            }
            self.classifiers.insert(key.clone(), clf.backbone);
        }
        self.classifiers[&key].deep_copy()
    }
}

/// Model for one run: seeded classifier, pre-trained saliency branch when
/// the variant needs one, and the configured classifier initialization.
pub fn build_model(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    seed: u64,
    cache: &mut PretrainCache,
) -> Result<ModulatedBackbone> {
    let mut model = ModulatedBackbone::new(&cfg.model_config(), stream.size, stream.num_classes, seed)?;
    let needs_saliency = cfg.sam.variant.is_some();
    match cfg.init {
        ModelInit::Scratch => {
            if needs_saliency {
                model = model.with_saliency(cache.saliency(cfg, seed)?)?;
            }
        }
        ModelInit::Saliency => {
            let s = cache.saliency(cfg, seed)?;
            model.classifier.backbone.load_from(&s.encoder)?;
            if needs_saliency {
                model = model.with_saliency(s)?;
            }
        }
        ModelInit::Classification => {
            let b = cache.classifier(cfg, seed)?;
            model.classifier.backbone.load_from(&b)?;
            if let Some(s) = &model.saliency {
                s.encoder.load_from(&b)?;
            }
        }
    }
    Ok(model)
}

/// Per-step loss bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub task: usize,
    pub step: usize,
    pub loss: f64,
    pub saliency_loss: f64,
    pub classification_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Re-run the classification loss backward each step and fail if it
    /// reaches the saliency encoder.
    pub guard_gradients: bool,
}

pub struct RunOutput {
    pub model: ModulatedBackbone,
    pub learner: LearnerState,
    pub records: Vec<ResultRecord>,
    pub steps: Vec<StepLog>,
    /// Stream visits per sample id.
    pub visits: HashMap<String, usize>,
}

/// Per-task test accuracies of the current model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub class_il: Vec<f64>,
    pub task_il: Vec<f64>,
    pub test_sizes: Vec<usize>,
}

impl Evaluation {
    pub fn final_class_il(&self) -> Result<f64> {
        final_average(&self.class_il)
    }

    pub fn final_task_il(&self) -> Result<f64> {
        final_average(&self.task_il)
    }

    /// Accuracy over the union of the evaluated test sets.
    pub fn pooled(&self, task_il: bool) -> f64 {
        let acc = if task_il { &self.task_il } else { &self.class_il };
        let n: usize = self.test_sizes.iter().sum();
        acc.iter().zip(&self.test_sizes).map(|(a, &m)| a * m as f64).sum::<f64>() / n as f64
    }
}

/// Mean of per-task accuracies.
///
/// Uses a compensated sum and corrects the division with its exact
/// remainder, so short lists such as `[0.2, 0.4, 0.6]` average to the
/// correctly rounded `0.4` rather than `0.4000000000000001`.
pub fn final_average(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(SamError::data("final average over zero tasks"));
    }
    let (mut sum, mut carry) = (0f64, 0f64);
    for &x in per_task {
        let t = sum + x;
        carry += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    let n = per_task.len() as f64;
    let q = sum / n;
    let rem = (-q).mul_add(n, sum);
    Ok(q + (rem + carry) / n)
}

/// Logits for `samples`, computed in chunks.
pub fn predict_logits(model: &ModulatedBackbone, samples: &[&Sample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let x = batch::images(chunk, model.size())?;
        out.extend(model.logits(&x)?.to_vec2::<f32>()?);
    }
    Ok(out)
}

fn argmax_among(row: &[f32], classes: &[usize]) -> usize {
    let mut best = classes[0];
    for &c in &classes[1..] {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Class-IL (argmax over every logit) and Task-IL (argmax within the task's
/// classes) accuracy on the test sets of tasks `0..upto`.
pub fn evaluate(model: &ModulatedBackbone, stream: &TaskStream, upto: usize) -> Result<Evaluation> {
    let mut ev = Evaluation {
        class_il: Vec::new(),
        task_il: Vec::new(),
        test_sizes: Vec::new(),
    };
    for task in stream.tasks.iter().take(upto) {
        if task.test.is_empty() {
            return Err(SamError::data(format!("task {} has an empty test set", task.id)));
        }
        let refs: Vec<&Sample> = task.test.iter().collect();
        let logits = predict_logits(model, &refs)?;
        let (mut cil, mut til) = (0usize, 0usize);
        for (row, s) in logits.iter().zip(&refs) {
            let all: Vec<usize> = (0..row.len()).collect();
            cil += usize::from(argmax_among(row, &all) == s.label);
            til += usize::from(argmax_among(row, &task.classes) == s.label);
        }
        let n = refs.len() as f64;
        ev.class_il.push(cil as f64 / n);
        ev.task_il.push(til as f64 / n);
        ev.test_sizes.push(refs.len());
    }
    if ev.test_sizes.is_empty() {
        return Err(SamError::data("nothing to evaluate"));
    }
    Ok(ev)
}

/// Accuracy of `model` on arbitrary samples (argmax over all logits).
pub fn accuracy(model: &ModulatedBackbone, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(SamError::data("accuracy over an empty set"));
    }
    let mut hits = 0usize;
    for chunk in samples.chunks(64) {
        let x = batch::images(chunk, model.size())?;
        let pred = argmax_rows(&model.logits(&x)?)?;
        hits += pred.iter().zip(chunk).filter(|(p, s)| **p == s.label).count();
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Single-pass online training over the stream with L = L_s + λ·L_c,
/// evaluating after every task (after the single pass for Joint).
pub fn train_online(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    model: ModulatedBackbone,
    seed: u64,
    opts: &TrainOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    stream.validate()?;
    let mut learner = LearnerState::new(cfg.learner.clone(), seed)?;
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum);
    let train_saliency = cfg.sam.train_saliency && model.saliency.is_some();
    let mut params = model.classifier_params();
    if train_saliency {
        params.extend(model.saliency_params());
    }
    let started = Instant::now();
    let mut order_rng = rng_for(seed, "stream-order");
    let mut visits: HashMap<String, usize> = HashMap::new();
    let mut steps = Vec::new();
    let mut records = Vec::new();

    // Joint sees the concatenated stream as one shuffled pass.
    let phases: Vec<(Vec<&Sample>, Option<usize>)> = if cfg.learner.kind == LearnerKind::Joint {
        vec![(stream.train_samples().collect(), None)]
    } else {
        stream
            .tasks
            .iter()
            .enumerate()
            .map(|(t, task)| (task.train.iter().collect(), Some(t)))
            .collect()
    };

    for (mut order, task_idx) in phases {
        order.shuffle(&mut order_rng);
        let task_no = task_idx.unwrap_or(stream.num_tasks() - 1);
        for chunk in order.chunks(cfg.train.batch) {
            for s in chunk {
                let v = visits.entry(s.id.clone()).or_insert(0);
                *v += 1;
                if *v > 1 {
                    return Err(SamError::OnlineViolation(format!(
                        "sample `{}` revisited within the stream pass",
                        s.id
                    )));
                }
            }
            let x = batch::images(chunk, stream.size)?;
            let out = model.forward(&x, GradientRule::StopSaliency)?;
            let ls = match (&out.saliency_map, train_saliency) {
                (Some(map), true) => kld_loss(map, &batch::saliency_maps(chunk, stream.size)?, DEFAULT_EPSILON)?,
                _ => Tensor::zeros((), DType::F32, &DEVICE)?,
            };
            let lc = learner.classification_loss(&model, chunk, &out.logits)?;
            if opts.guard_gradients && model.saliency.is_some() {
                stop_gradient_guard(&model, &lc.backward()?)?;
            }
            let total = (&ls + (&lc * cfg.sam.lambda)?)?;
            let grads = total.backward()?;
            opt.step(&params, &grads)?;
            learner.observe(chunk, &out.logits)?;
            steps.push(StepLog {
                task: task_no,
                step: steps.len(),
                loss: f64::from(total.to_scalar::<f32>()?),
                saliency_loss: f64::from(ls.to_scalar::<f32>()?),
                classification_loss: f64::from(lc.to_scalar::<f32>()?),
            });
        }
        match task_idx {
            Some(t) => {
                learner.end_task(&model, &stream.tasks[t])?;
                records.push(make_record(cfg, stream, &model, seed, t, &started)?);
            }
            None => {
                for task in &stream.tasks {
                    learner.end_task(&model, task)?;
                }
                records.push(make_record(cfg, stream, &model, seed, stream.num_tasks() - 1, &started)?);
            }
        }
        let r = records.last().expect("just pushed");
        log::info!(
            "[{} seed {seed}] task {}/{}: class-il {:.3} task-il {:.3}",
            cfg.tag,
            r.task_index + 1,
            r.num_tasks,
            r.class_il,
            r.task_il
        );
    }
    Ok(RunOutput {
        model,
        learner,
        records,
        steps,
        visits,
    })
}

fn make_record(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    model: &ModulatedBackbone,
    seed: u64,
    task_index: usize,
    started: &Instant,
) -> Result<ResultRecord> {
    let ev = evaluate(model, stream, task_index + 1)?;
    let sal = match &model.saliency {
        Some(s) => {
            let test: Vec<Sample> = stream.test_samples().cloned().collect();
            Some(evaluate_saliency(s, &test)?)
        }
        None => None,
    };
    Ok(ResultRecord {
        schema: RECORD_SCHEMA.to_string(),
        tag: cfg.tag.clone(),
        learner: cfg.learner.kind.to_string(),
        buffer: cfg.learner.buffer_size,
        variant: cfg.variant_name(),
        scheme: cfg.sam.scheme.to_string(),
        seed,
        task_index,
        num_tasks: stream.num_tasks(),
        class_il: ev.final_class_il()?,
        task_il: ev.final_task_il()?,
        task_class_il: ev.class_il,
        task_task_il: ev.task_il,
        saliency_cc: sal.and_then(|m| m.cc_defined.then_some(m.cc)),
        saliency_sim: sal.map(|m| m.sim),
        saliency_kld: sal.map(|m| m.kld),
        seconds: started.elapsed().as_secs_f64(),
        params_train: model.count_parameters(Phase::Train),
        params_inference: model.count_parameters(Phase::Inference),
    })
}

/// Prepares the stream and model for `seed` and trains.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, cache: &mut PretrainCache) -> Result<RunOutput> {
    cfg.validate()?;
    let stream = prepare_stream(cfg, seed)?;
    let model = build_model(cfg, &stream, seed, cache)?;
    train_online(cfg, &stream, model, seed, &TrainOptions::default())
}
