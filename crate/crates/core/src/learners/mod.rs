//! Continual-learning strategies that supply the classification loss, and
//! the reservoir memory they replay from.

mod buffer;
mod losses;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{BufferEntry, MemoryBuffer, Reservoir};
pub use losses::{
    anchor, decay_fisher, derpp_loss, distillation_kl, erace_loss, fisher_diagonal, lwf_loss,
    mask_logits, mse, oewc_penalty,
};

use crate::batch;
use crate::datastream::{Sample, Task};
use crate::error::{Result, SamError};
use crate::modulation::ModulatedBackbone;
use crate::nn::{cross_entropy, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Finetune,
    Joint,
    Derpp,
    Erace,
    Lwf,
    Oewc,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 6] = [
        Self::Finetune,
        Self::Joint,
        Self::Derpp,
        Self::Erace,
        Self::Lwf,
        Self::Oewc,
    ];

    pub fn is_rehearsal(self) -> bool {
        matches!(self, Self::Derpp | Self::Erace)
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Finetune => "finetune",
            Self::Joint => "joint",
            Self::Derpp => "derpp",
            Self::Erace => "erace",
            Self::Lwf => "lwf",
            Self::Oewc => "oewc",
        })
    }
}

impl FromStr for LearnerKind {
    type Err = SamError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| {
                SamError::config(format!(
                    "unknown learner `{s}` (expected finetune|joint|derpp|erace|lwf|oewc)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub buffer_size: usize,
    pub replay_batch: usize,
    pub derpp_alpha: f64,
    pub derpp_beta: f64,
    pub lwf_temperature: f64,
    pub lwf_weight: f64,
    pub ewc_strength: f64,
    pub ewc_decay: f64,
}

impl LearnerConfig {
    pub fn new(kind: LearnerKind) -> Self {
        Self {
            kind,
            buffer_size: if kind.is_rehearsal() { 200 } else { 0 },
            replay_batch: 8,
            derpp_alpha: 0.5,
            derpp_beta: 0.5,
            lwf_temperature: 2.0,
            lwf_weight: 1.0,
            ewc_strength: 100.0,
            ewc_decay: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_rehearsal() && self.buffer_size == 0 {
            return Err(SamError::config(format!(
                "learner.buffer: {} is a rehearsal learner and needs a buffer > 0",
                self.kind
            )));
        }
        if !self.kind.is_rehearsal() && self.buffer_size != 0 {
            return Err(SamError::config(format!(
                "learner.buffer: {} does not replay; buffer must be 0",
                self.kind
            )));
        }
        if self.kind.is_rehearsal() && self.replay_batch == 0 {
            return Err(SamError::config("learner.replay_batch must be ≥ 1"));
        }
        if self.lwf_temperature <= 0.0 {
            return Err(SamError::config("learner.lwf_temperature must be > 0"));
        }
        for (key, v) in [
            ("learner.derpp_alpha", self.derpp_alpha),
            ("learner.derpp_beta", self.derpp_beta),
            ("learner.lwf_weight", self.lwf_weight),
            ("learner.ewc_strength", self.ewc_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SamError::config(format!("{key} must be a finite value ≥ 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.ewc_decay) {
            return Err(SamError::config("learner.ewc_decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// oEWC consolidation point.
#[derive(Debug, Clone)]
pub struct Consolidation {
    pub anchor: Vec<Tensor>,
    pub fisher: Vec<Tensor>,
}

/// Everything a learner carries between steps and tasks.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub config: LearnerConfig,
    pub buffer: MemoryBuffer,
    seen: BTreeSet<usize>,
    /// Classes observed in stream batches of the current task so far.
    observed: BTreeSet<usize>,
    completed_tasks: usize,
    snapshot: Option<ModulatedBackbone>,
    consolidation: Option<Consolidation>,
    replay_rng: ChaCha8Rng,
}

impl LearnerState {
    pub fn new(config: LearnerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            buffer: MemoryBuffer::new(config.buffer_size, seed),
            config,
            seen: BTreeSet::new(),
            observed: BTreeSet::new(),
            completed_tasks: 0,
            snapshot: None,
            consolidation: None,
            replay_rng: rng_for(seed, "replay"),
        })
    }

    pub fn kind(&self) -> LearnerKind {
        self.config.kind
    }

    /// Union of the class sets of every completed task.
    pub fn seen_classes(&self) -> &BTreeSet<usize> {
        &self.seen
    }

    pub fn completed_tasks(&self) -> usize {
        self.completed_tasks
    }

    pub fn snapshot(&self) -> Option<&ModulatedBackbone> {
        self.snapshot.as_ref()
    }

    pub fn consolidation(&self) -> Option<&Consolidation> {
        self.consolidation.as_ref()
    }

    fn replay_batch(&mut self) -> Vec<BufferEntry> {
        self.buffer
            .sample(self.config.replay_batch, &mut self.replay_rng)
            .into_iter()
            .cloned()
            .collect()
    }

    /// The learner's classification loss on one stream batch, given the
    /// model's logits for that batch. Replay and snapshot forwards go through
    /// `model` (or the stored snapshot) with the saliency branch detached.
    pub fn classification_loss(
        &mut self,
        model: &ModulatedBackbone,
        stream: &[&Sample],
        stream_logits: &Tensor,
    ) -> Result<Tensor> {
        let labels = batch::labels(stream);
        let size = model.size();
        let forward = |entries: &[BufferEntry]| -> Result<(Tensor, Vec<usize>)> {
            let refs: Vec<&Sample> = entries.iter().map(|e| &e.sample).collect();
            Ok((model.logits(&batch::images(&refs, size)?)?, batch::labels(&refs)))
        };
        match self.config.kind {
            LearnerKind::Finetune | LearnerKind::Joint => cross_entropy(stream_logits, &labels),
            LearnerKind::Derpp => {
                if self.buffer.is_empty() {
                    return cross_entropy(stream_logits, &labels);
                }
                let a = self.replay_batch();
                let b = self.replay_batch();
                let stored = stored_logits(&a, self.config.derpp_alpha > 0.0)?;
                let (la, _) = forward(&a)?;
                let (lb, yb) = forward(&b)?;
                let stored = match stored {
                    Some(s) => s,
                    None => la.zeros_like()?,
                };
                // α = 0 keeps the term at exactly zero, including when no
                // logits were stored.
                let a_term = if self.config.derpp_alpha > 0.0 {
                    Some((&la, &stored))
                } else {
                    None
                };
                derpp_loss(
                    stream_logits,
                    &labels,
                    a_term,
                    Some((&lb, &yb)),
                    self.config.derpp_alpha,
                    self.config.derpp_beta,
                )
            }
            LearnerKind::Erace => {
                self.observed.extend(labels.iter().copied());
                let seen: BTreeSet<usize> = self.seen.union(&self.observed).copied().collect();
                let mask_stream = self.completed_tasks > 0;
                if self.buffer.is_empty() {
                    return erace_loss(stream_logits, &labels, None, &seen, mask_stream);
                }
                let r = self.replay_batch();
                let (lr, yr) = forward(&r)?;
                erace_loss(stream_logits, &labels, Some((&lr, &yr)), &seen, mask_stream)
            }
            LearnerKind::Lwf => {
                let old = match &self.snapshot {
                    Some(prev) => Some(prev.logits(&batch::images(stream, size)?)?.detach()),
                    None => None,
                };
                let old_classes: Vec<usize> = self.seen.iter().copied().collect();
                lwf_loss(
                    stream_logits,
                    &labels,
                    old.as_ref(),
                    &old_classes,
                    self.config.lwf_temperature,
                    self.config.lwf_weight,
                )
            }
            LearnerKind::Oewc => {
                let ce = cross_entropy(stream_logits, &labels)?;
                match &self.consolidation {
                    Some(c) => {
                        let pen = oewc_penalty(
                            &model.classifier_params(),
                            &c.anchor,
                            &c.fisher,
                            self.config.ewc_strength,
                        )?;
                        Ok((ce + pen)?)
                    }
                    None => Ok(ce),
                }
            }
        }
    }

    /// Offers the stream batch to the buffer (rehearsal learners only).
    /// DER++ stores the logits computed before the update.
    pub fn observe(&mut self, stream: &[&Sample], stream_logits: &Tensor) -> Result<()> {
        if !self.config.kind.is_rehearsal() {
            return Ok(());
        }
        let rows: Option<Vec<Vec<f32>>> = if self.config.kind == LearnerKind::Derpp {
            Some(stream_logits.detach().to_vec2()?)
        } else {
            None
        };
        for (i, s) in stream.iter().enumerate() {
            self.buffer.insert(BufferEntry {
                sample: (*s).clone(),
                logits: rows.as_ref().map(|r| r[i].clone()),
            });
        }
        Ok(())
    }

    /// Consolidation after a task: the seen-class set grows; LwF snapshots
    /// the model; oEWC re-anchors and folds a fresh Fisher estimate into
    /// the decayed running one.
    pub fn end_task(&mut self, model: &ModulatedBackbone, task: &Task) -> Result<()> {
        self.seen.extend(task.classes.iter().copied());
        self.observed.clear();
        self.completed_tasks += 1;
        match self.config.kind {
            LearnerKind::Lwf => self.snapshot = Some(model.deep_copy()?),
            LearnerKind::Oewc => {
                let params = model.classifier_params();
                let size = model.size();
                let fresh = fisher_diagonal(&params, task.train.len(), |i| {
                    let s = &task.train[i];
                    let logits = model.logits(&batch::images(&[s], size)?)?;
                    Ok(cross_entropy(&logits, &[s.label])?.neg()?)
                })?;
                let prev = self.consolidation.as_ref().map(|c| c.fisher.as_slice());
                let fisher = decay_fisher(prev, fresh, self.config.ewc_decay)?;
                self.consolidation = Some(Consolidation {
                    anchor: anchor(&params)?,
                    fisher,
                });
            }
            _ => {}
        }
        Ok(())
    }
}

fn stored_logits(entries: &[BufferEntry], required: bool) -> Result<Option<Tensor>> {
    let rows: Option<Vec<&Vec<f32>>> = entries.iter().map(|e| e.logits.as_ref()).collect();
    match rows {
        Some(rows) => {
            let k = rows.first().map_or(0, |r| r.len());
            let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
            Ok(Some(Tensor::from_vec(flat, (rows.len(), k), &crate::nn::DEVICE)?))
        }
        None if required => Err(SamError::config(
            "DER++ with α > 0 needs stored logits on every replayed entry",
        )),
        None => Ok(None),
    }
}
