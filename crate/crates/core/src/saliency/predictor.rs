use std::collections::BTreeSet;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use super::loss::{kld_loss, DEFAULT_EPSILON};
use super::metrics::{saliency_metrics, SaliencyMetrics};
use crate::backbone::{Backbone, BackboneSpec, NUM_STAGES};
use crate::batch;
use crate::datastream::{ImageSize, Sample, TaskStream};
use crate::error::{Result, SamError};
use crate::nn::{log_softmax, rng_for, Conv2d, ParamList, Sgd};

/// Lightweight upsampling head: 1×1 channel reduction of the deepest encoder
/// features, then repeated (nearest ×2, 3×3 conv, ReLU) stages up to the
/// input resolution and a final 3×3 conv to one channel. The output is a
/// spatial softmax, so every map is strictly positive and sums to one.
#[derive(Debug, Clone)]
pub struct Decoder {
    reduce: Conv2d,
    ups: Vec<Conv2d>,
    out: Conv2d,
    size: ImageSize,
}

impl Decoder {
    pub fn new(spec: BackboneSpec, size: ImageSize, rng: &mut impl Rng) -> Result<Self> {
        let (c, h, w) = spec.stage_shapes(size)[NUM_STAGES - 1];
        let factor = size.height / h;
        if factor * h != size.height || factor * w != size.width || !factor.is_power_of_two() {
            return Err(SamError::config(format!(
                "decoder needs a power-of-two upscaling from {h}×{w} to {}×{}",
                size.height, size.width
            )));
        }
        let hidden = spec.width.max(8);
        let reduce = Conv2d::new(c, hidden, 1, 1, 0, rng)?;
        let ups = (0..factor.trailing_zeros())
            .map(|_| Conv2d::new(hidden, hidden, 3, 1, 1, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::new(hidden, 1, 3, 1, 1, rng)?;
        Ok(Self {
            reduce,
            ups,
            out,
            size,
        })
    }

    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            reduce: self.reduce.deep_copy()?,
            ups: self.ups.iter().map(Conv2d::deep_copy).collect::<Result<_>>()?,
            out: self.out.deep_copy()?,
            size: self.size,
        })
    }

    /// Maps `(B, C, h, w)` deep features to `(B, H, W)` saliency distributions.
    pub fn forward(&self, deep: &Tensor) -> Result<Tensor> {
        let mut h = self.reduce.forward(deep)?.relu()?;
        for conv in &self.ups {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            h = conv.forward(&h)?.relu()?;
        }
        let logits = self.out.forward(&h)?;
        let b = logits.dim(0)?;
        let flat = logits.reshape((b, self.size.pixels()))?;
        Ok(log_softmax(&flat)?
            .exp()?
            .reshape((b, self.size.height, self.size.width))?)
    }

    pub fn params(&self, prefix: &str) -> ParamList {
        let mut p = self.reduce.params(&format!("{prefix}.reduce"));
        for (i, c) in self.ups.iter().enumerate() {
            p.extend(c.params(&format!("{prefix}.up{i}")));
        }
        p.extend(self.out.params(&format!("{prefix}.out")));
        p
    }
}

pub struct SaliencyOutput {
    /// `(B, H, W)` predicted maps.
    pub map: Tensor,
    /// Encoder stage outputs, one per modulation point.
    pub features: Vec<Tensor>,
}

/// Saliency network `S = D ∘ E`, where the encoder shares the classifier's
/// stage layout.
#[derive(Debug, Clone)]
pub struct SaliencyPredictor {
    pub encoder: Backbone,
    pub decoder: Decoder,
    size: ImageSize,
}

impl SaliencyPredictor {
    pub fn new(spec: BackboneSpec, size: ImageSize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "saliency");
        Ok(Self {
            encoder: Backbone::new(spec, 3, &mut rng)?,
            decoder: Decoder::new(spec, size, &mut rng)?,
            size,
        })
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    /// Copy with freshly allocated parameters.
    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            encoder: self.encoder.deep_copy()?,
            decoder: self.decoder.deep_copy()?,
            size: self.size,
        })
    }

    pub fn spec(&self) -> BackboneSpec {
        self.encoder.spec()
    }

    pub fn forward(&self, x: &Tensor) -> Result<SaliencyOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.size.height || w != self.size.width {
            return Err(SamError::shape(format!(
                "saliency input {c}×{h}×{w}, expected 3×{}×{}",
                self.size.height, self.size.width
            )));
        }
        let features = self.encoder.forward_all(x)?;
        let map = self.decoder.forward(&features[NUM_STAGES - 1])?;
        Ok(SaliencyOutput { map, features })
    }

    /// Single-image prediction: the H×W map and the per-stage feature bundle.
    pub fn predict(&self, image: &[f32]) -> Result<(Vec<f32>, Vec<Tensor>)> {
        if image.len() != 3 * self.size.pixels() {
            return Err(SamError::shape(format!(
                "image has {} values, predictor expects 3×{}×{}",
                image.len(),
                self.size.height,
                self.size.width
            )));
        }
        let x = Tensor::from_slice(
            image,
            (1, 3, self.size.height, self.size.width),
            &crate::nn::DEVICE,
        )?;
        let out = self.forward(&x)?;
        let map = out.map.flatten_all()?.to_vec1()?;
        let features = out.features.into_iter().map(|f| f.detach()).collect();
        Ok((map, features))
    }

    pub fn predict_maps(&self, samples: &[&Sample], size: ImageSize) -> Result<Vec<Vec<f32>>> {
        if size != self.size {
            return Err(SamError::shape("predictor and stream sizes differ"));
        }
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let x = batch::images(samples, size)?;
        let maps = self.forward(&x)?.map.detach();
        Ok(maps
            .flatten_from(1)?
            .to_vec2()?)
    }

    pub fn encoder_params(&self) -> ParamList {
        self.encoder.params("saliency.encoder")
    }

    pub fn decoder_params(&self) -> ParamList {
        self.decoder.params("saliency.decoder")
    }

    pub fn params(&self) -> ParamList {
        let mut p = self.encoder_params();
        p.extend(self.decoder_params());
        p
    }
}

/// One SGD step on the saliency objective alone; returns the loss value.
pub fn saliency_step(pred: &SaliencyPredictor, samples: &[&Sample], opt: &mut Sgd) -> Result<f32> {
    let x = batch::images(samples, pred.size())?;
    let target = batch::saliency_maps(samples, pred.size())?;
    let loss = kld_loss(&pred.forward(&x)?.map, &target, DEFAULT_EPSILON)?;
    let grads = loss.backward()?;
    opt.step(&pred.params(), &grads)?;
    Ok(loss.to_scalar::<f32>()?)
}

/// Mean CC/Sim/KLD of `pred` over `samples`.
pub fn evaluate_saliency(pred: &SaliencyPredictor, samples: &[Sample]) -> Result<SaliencyMetrics> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let maps = pred.predict_maps(&refs, pred.size())?;
        for (s, m) in chunk.iter().zip(maps) {
            let target = s
                .saliency
                .as_ref()
                .ok_or_else(|| SamError::data(format!("sample `{}` has no saliency", s.id)))?;
            rows.push(saliency_metrics(&m, target)?);
        }
    }
    SaliencyMetrics::mean(&rows).ok_or_else(|| SamError::data("empty saliency evaluation set"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Fraction of the pre-training set held out to measure progress.
    pub holdout_fraction: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.03,
            momentum: 0.9,
            batch_size: 16,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainReport {
    pub initial_kld: f64,
    pub final_kld: f64,
    pub epochs: usize,
}

fn mean_kld(pred: &SaliencyPredictor, samples: &[&Sample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let x = batch::images(chunk, pred.size())?;
        let t = batch::saliency_maps(chunk, pred.size())?;
        let l = kld_loss(&pred.forward(&x)?.map, &t, DEFAULT_EPSILON)?.to_scalar::<f32>()?;
        total += f64::from(l) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `pred` on the saliency objective only. Class labels are never read
/// except to reject overlap with `benchmark_classes`.
pub fn pretrain_saliency(
    pred: &SaliencyPredictor,
    pretrain_set: &[Sample],
    benchmark_classes: &BTreeSet<usize>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if pretrain_set.is_empty() {
        return Err(SamError::config("saliency pre-training set is empty"));
    }
    let overlap: BTreeSet<usize> = pretrain_set
        .iter()
        .map(|s| s.label)
        .filter(|c| benchmark_classes.contains(c))
        .collect();
    if !overlap.is_empty() {
        return Err(SamError::config(format!(
            "pre-training classes overlap the benchmark: {overlap:?}"
        )));
    }

    let mut order: Vec<&Sample> = pretrain_set.iter().collect();
    order.shuffle(&mut rng_for(cfg.seed, "pretrain-split"));
    let n_hold = ((order.len() as f32 * cfg.holdout_fraction).round() as usize)
        .clamp(usize::from(order.len() > 1), order.len().saturating_sub(1).max(1));
    let (holdout, train) = order.split_at(n_hold);
    let train: Vec<&Sample> = if train.is_empty() { holdout.to_vec() } else { train.to_vec() };

    let initial_kld = mean_kld(pred, holdout)?;
    if cfg.epochs == 0 {
        return Ok(PretrainReport {
            initial_kld,
            final_kld: initial_kld,
            epochs: 0,
        });
    }

    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut rng = rng_for(cfg.seed, "pretrain-order");
    let mut epoch_order = train;
    for _ in 0..cfg.epochs {
        epoch_order.shuffle(&mut rng);
        for chunk in epoch_order.chunks(cfg.batch_size.max(1)) {
            saliency_step(pred, chunk, &mut opt)?;
        }
    }
    Ok(PretrainReport {
        initial_kld,
        final_kld: mean_kld(pred, holdout)?,
        epochs: cfg.epochs,
    })
}

/// Trains `pred` online over the stream with the saliency loss only (unless
/// `opt` is `None`, which freezes it) and reports metrics on `eval_set`
/// after each task.
pub fn track_saliency_over_tasks(
    pred: &SaliencyPredictor,
    stream: &TaskStream,
    eval_set: &[Sample],
    mut opt: Option<&mut Sgd>,
    batch_size: usize,
) -> Result<Vec<SaliencyMetrics>> {
    let mut rows = Vec::with_capacity(stream.num_tasks());
    for task in &stream.tasks {
        if let Some(opt) = opt.as_deref_mut() {
            let refs: Vec<&Sample> = task.train.iter().collect();
            for chunk in refs.chunks(batch_size.max(1)) {
                saliency_step(pred, chunk, opt)?;
            }
        }
        rows.push(evaluate_saliency(pred, eval_set)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Arch;

    fn spec() -> BackboneSpec {
        BackboneSpec {
            arch: Arch::Plain,
            width: 4,
        }
    }

    #[test]
    fn map_shape_and_bundle_length() {
        let size = ImageSize::new(16, 16);
        let p = SaliencyPredictor::new(spec(), size, 0).unwrap();
        let img = vec![0.5; 3 * 256];
        let (map, feats) = p.predict(&img).unwrap();
        assert_eq!(map.len(), 256);
        assert_eq!(feats.len(), NUM_STAGES);
        assert!(map.iter().all(|v| *v > 0.0));
        assert!((map.iter().sum::<f32>() - 1.0).abs() < 1e-4);
        let (again, _) = p.predict(&img).unwrap();
        assert_eq!(map, again);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let p = SaliencyPredictor::new(spec(), ImageSize::new(16, 16), 0).unwrap();
        assert!(matches!(p.predict(&[0.0; 10]), Err(SamError::Shape(_))));
    }

    #[test]
    fn non_power_of_two_decoder_is_rejected() {
        let err = SaliencyPredictor::new(spec(), ImageSize::new(20, 16), 0);
        assert!(err.is_err());
    }
}
