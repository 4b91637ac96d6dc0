//! Saliency-guided classification.
//!
//! A [`ModulatedBackbone`] pairs a classifier with a saliency predictor whose
//! encoder has the same stage layout. At every enabled modulation point the
//! classifier's stage output is combined with the encoder's stage output
//! before it feeds the next stage:
//!
//! * SAM multiplies the two elementwise,
//! * LSM mixes their channel concatenation with a learned 1×1 convolution.
//!
//! SIM and SAI instead use the final saliency map at the input (pixelwise
//! product, or an extra input channel).
//!
//! Encoder features reach the classifier detached, so the classification
//! loss never produces gradients for the saliency encoder.

use std::fmt;
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec, NUM_STAGES};
use crate::datastream::ImageSize;
use crate::error::{Result, SamError};
use crate::nn::{self, rng_for, Conv2d, Linear, ParamList, DEVICE};
use crate::saliency::SaliencyPredictor;

/// Binary mask over the modulation points, written as e.g. `"11100"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModulationScheme(Vec<bool>);

impl ModulationScheme {
    pub fn all() -> Self {
        Self(vec![true; NUM_STAGES])
    }

    pub fn none() -> Self {
        Self(vec![false; NUM_STAGES])
    }

    pub fn from_mask(mask: &[bool]) -> Result<Self> {
        if mask.len() != NUM_STAGES {
            return Err(SamError::config(format!(
                "modulation scheme must have length {NUM_STAGES}, got {}",
                mask.len()
            )));
        }
        Ok(Self(mask.to_vec()))
    }

    pub fn enabled(&self, point: usize) -> bool {
        self.0[point]
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn mask(&self) -> &[bool] {
        &self.0
    }
}

impl FromStr for ModulationScheme {
    type Err = SamError;

    fn from_str(s: &str) -> Result<Self> {
        let mask = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(SamError::config(format!(
                    "modulation scheme `{s}`: unexpected character `{other}` (use 0/1)"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        if mask.len() != NUM_STAGES {
            return Err(SamError::config(format!(
                "modulation scheme `{s}` must have length {NUM_STAGES}, got {}",
                mask.len()
            )));
        }
        Ok(Self(mask))
    }
}

impl fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl TryFrom<String> for ModulationScheme {
    type Error = SamError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModulationScheme> for String {
    fn from(s: ModulationScheme) -> String {
        s.to_string()
    }
}

/// How saliency information enters the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationVariant {
    /// Multiplicative stage modulation by encoder features.
    Sam,
    /// Input image multiplied by the predicted map.
    Sim,
    /// Predicted map appended as a fourth input channel.
    Sai,
    /// Learned 1×1 fusion of classifier and encoder stage features.
    Lsm,
}

impl IntegrationVariant {
    pub fn uses_stage_features(self) -> bool {
        matches!(self, Self::Sam | Self::Lsm)
    }
}

impl fmt::Display for IntegrationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sam => "sam",
            Self::Sim => "sim",
            Self::Sai => "sai",
            Self::Lsm => "lsm",
        })
    }
}

impl FromStr for IntegrationVariant {
    type Err = SamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sam" => Ok(Self::Sam),
            "sim" => Ok(Self::Sim),
            "sai" => Ok(Self::Sai),
            "lsm" => Ok(Self::Lsm),
            other => Err(SamError::config(format!(
                "unknown integration variant `{other}` (expected sam|sim|sai|lsm)"
            ))),
        }
    }
}

/// What a classifier stage output is combined with before the next stage.
#[derive(Clone, Copy)]
pub enum StageMix<'a> {
    Plain,
    Multiply(&'a [Tensor], &'a ModulationScheme),
    Fuse(&'a [Tensor], &'a ModulationScheme),
}

/// 1×1 fusion initialized to pass the classifier half through unchanged and
/// read the saliency half with weights drawn from `±saliency_bound`.
pub fn identity_fusion(channels: usize, saliency_bound: f32, rng: &mut impl Rng) -> Result<Conv2d> {
    let mut w = vec![0f32; channels * 2 * channels];
    for o in 0..channels {
        w[o * 2 * channels + o] = 1.0;
        if saliency_bound > 0.0 {
            for i in 0..channels {
                w[o * 2 * channels + channels + i] = rng.random_range(-saliency_bound..=saliency_bound);
            }
        }
    }
    Conv2d::from_tensors(
        Tensor::from_vec(w, (channels, 2 * channels, 1, 1), &DEVICE)?,
        Tensor::zeros(channels, candle_core::DType::F32, &DEVICE)?,
        1,
        0,
    )
}

/// Stage backbone plus a linear head over globally pooled final features.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: Linear,
    /// LSM fusion layers, one per modulation point (empty otherwise).
    pub fusions: Vec<Conv2d>,
}

impl Classifier {
    pub fn new(
        spec: BackboneSpec,
        in_channels: usize,
        num_classes: usize,
        with_fusions: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let backbone = Backbone::new(spec, in_channels, rng)?;
        let head = Linear::new(backbone.out_channels(), num_classes, rng)?;
        let fusions = if with_fusions {
            spec.channels()
                .iter()
                .map(|&c| identity_fusion(c, 0.01, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            backbone,
            head,
            fusions,
        })
    }

    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            backbone: self.backbone.deep_copy()?,
            head: self.head.deep_copy()?,
            fusions: self.fusions.iter().map(Conv2d::deep_copy).collect::<Result<_>>()?,
        })
    }

    /// Stage outputs after mixing, i.e. the tensors that feed each next stage.
    pub fn forward_stages(&self, x: &Tensor, mix: StageMix<'_>) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(NUM_STAGES);
        let mut h = x.clone();
        for i in 0..NUM_STAGES {
            h = self.backbone.stage(i, &h)?;
            h = match mix {
                StageMix::Plain => h,
                StageMix::Multiply(feats, scheme) if scheme.enabled(i) => {
                    let s = paired(&feats[i], &h, i)?;
                    (h * s)?
                }
                StageMix::Fuse(feats, scheme) if scheme.enabled(i) => {
                    let s = paired(&feats[i], &h, i)?;
                    let fusion = self.fusions.get(i).ok_or_else(|| {
                        SamError::config("LSM variant requires fusion layers on the classifier")
                    })?;
                    fusion.forward(&Tensor::cat(&[&h, s], 1)?)?
                }
                _ => h,
            };
            outs.push(h.clone());
        }
        Ok(outs)
    }

    pub fn head_logits(&self, last: &Tensor) -> Result<Tensor> {
        let pooled = last.mean(D::Minus1)?.mean(D::Minus1)?;
        self.head.forward(&pooled)
    }

    pub fn forward(&self, x: &Tensor, mix: StageMix<'_>) -> Result<Tensor> {
        let stages = self.forward_stages(x, mix)?;
        self.head_logits(&stages[NUM_STAGES - 1])
    }

    /// Backbone and head parameters, plus fusion layers when present.
    pub fn params(&self) -> ParamList {
        let mut p = self.backbone.params("classifier.backbone");
        p.extend(self.head.params("classifier.head"));
        for (i, f) in self.fusions.iter().enumerate() {
            p.extend(f.params(&format!("classifier.fusion{i}")));
        }
        p
    }
}

fn paired<'t>(s: &'t Tensor, c: &Tensor, stage: usize) -> Result<&'t Tensor> {
    if s.dims() != c.dims() {
        return Err(SamError::shape(format!(
            "stage {}: classifier features {:?} vs saliency features {:?}",
            stage + 1,
            c.dims(),
            s.dims()
        )));
    }
    Ok(s)
}

/// Whether the classification loss may backpropagate into the saliency
/// branch. Training always stops it; attacks differentiate the full forward
/// with respect to the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientRule {
    StopSaliency,
    Through,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub variant: Option<IntegrationVariant>,
    pub scheme: ModulationScheme,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    /// Predicted saliency with gradients to the saliency parameters.
    pub saliency_map: Option<Tensor>,
}

/// Saliency inputs handed to the classifier.
pub struct Guidance {
    pub map: Option<Tensor>,
    pub features: Option<Vec<Tensor>>,
}

/// Classifier paired with an optional saliency predictor.
#[derive(Debug, Clone)]
pub struct ModulatedBackbone {
    pub classifier: Classifier,
    pub saliency: Option<SaliencyPredictor>,
    pub variant: Option<IntegrationVariant>,
    scheme: ModulationScheme,
    size: ImageSize,
}

impl ModulatedBackbone {
    pub fn new(cfg: &ModelConfig, size: ImageSize, num_classes: usize, seed: u64) -> Result<Self> {
        let in_channels = if cfg.variant == Some(IntegrationVariant::Sai) { 4 } else { 3 };
        let classifier = Classifier::new(
            cfg.backbone,
            in_channels,
            num_classes,
            cfg.variant == Some(IntegrationVariant::Lsm),
            &mut rng_for(seed, "classifier"),
        )?;
        let saliency = match cfg.variant {
            Some(_) => Some(SaliencyPredictor::new(cfg.backbone, size, seed)?),
            None => None,
        };
        Ok(Self {
            classifier,
            saliency,
            variant: cfg.variant,
            scheme: cfg.scheme.clone(),
            size,
        })
    }

    /// Plain classifier without a saliency branch.
    pub fn plain(spec: BackboneSpec, size: ImageSize, num_classes: usize, seed: u64) -> Result<Self> {
        Self::new(
            &ModelConfig {
                backbone: spec,
                variant: None,
                scheme: ModulationScheme::none(),
            },
            size,
            num_classes,
            seed,
        )
    }

    /// Attaches a saliency predictor (e.g. a pre-trained one).
    pub fn with_saliency(mut self, predictor: SaliencyPredictor) -> Result<Self> {
        if predictor.spec() != self.classifier.backbone.spec() {
            return Err(SamError::config(
                "saliency encoder and classifier must share the stage architecture",
            ));
        }
        self.saliency = Some(predictor);
        Ok(self)
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    /// Independent copy: no parameter storage is shared with `self`.
    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            classifier: self.classifier.deep_copy()?,
            saliency: self
                .saliency
                .as_ref()
                .map(SaliencyPredictor::deep_copy)
                .transpose()?,
            variant: self.variant,
            scheme: self.scheme.clone(),
            size: self.size,
        })
    }

    pub fn scheme(&self) -> &ModulationScheme {
        &self.scheme
    }

    pub fn set_scheme(&mut self, mask: &[bool]) -> Result<()> {
        self.scheme = ModulationScheme::from_mask(mask)?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.head.weight.dims()[0]
    }

    /// Classifier logits given explicit saliency inputs.
    pub fn classify_with(&self, x: &Tensor, guidance: &Guidance) -> Result<Tensor> {
        let Some(variant) = self.variant else {
            return self.classifier.forward(x, StageMix::Plain);
        };
        let need_map = || {
            guidance
                .map
                .as_ref()
                .ok_or_else(|| SamError::config(format!("{variant} needs a saliency map")))
        };
        let need_feats = || {
            guidance
                .features
                .as_deref()
                .ok_or_else(|| SamError::config(format!("{variant} needs stage features")))
        };
        match variant {
            IntegrationVariant::Sam => self
                .classifier
                .forward(x, StageMix::Multiply(need_feats()?, &self.scheme)),
            IntegrationVariant::Lsm => self
                .classifier
                .forward(x, StageMix::Fuse(need_feats()?, &self.scheme)),
            IntegrationVariant::Sim => {
                let m = peak_normalized(need_map()?)?;
                self.classifier
                    .forward(&x.broadcast_mul(&m)?, StageMix::Plain)
            }
            IntegrationVariant::Sai => {
                if self.classifier.backbone.in_channels() != 4 {
                    return Err(SamError::config(
                        "SAI requires a classifier stem with 4 input channels",
                    ));
                }
                let m = peak_normalized(need_map()?)?;
                let x4 = Tensor::cat(&[x, &m], 1)?;
                self.classifier.forward(&x4, StageMix::Plain)
            }
        }
    }

    /// Full forward: saliency prediction (if any) followed by the guided classifier.
    pub fn forward(&self, x: &Tensor, rule: GradientRule) -> Result<ForwardOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.size.height || w != self.size.width {
            return Err(SamError::shape(format!(
                "input {c}×{h}×{w}, model expects 3×{}×{}",
                self.size.height, self.size.width
            )));
        }
        let Some(variant) = self.variant else {
            return Ok(ForwardOutput {
                logits: self.classifier.forward(x, StageMix::Plain)?,
                saliency_map: None,
            });
        };
        let predictor = self
            .saliency
            .as_ref()
            .ok_or_else(|| SamError::config(format!("{variant} requires a saliency predictor")))?;
        let out = predictor.forward(x)?;
        let cut = |t: &Tensor| match rule {
            GradientRule::StopSaliency => t.detach(),
            GradientRule::Through => t.clone(),
        };
        let guidance = Guidance {
            map: Some(cut(&out.map)),
            features: Some(out.features.iter().map(cut).collect()),
        };
        Ok(ForwardOutput {
            logits: self.classify_with(x, &guidance)?,
            saliency_map: Some(out.map),
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, GradientRule::StopSaliency)?.logits)
    }

    pub fn classifier_params(&self) -> ParamList {
        self.classifier.params()
    }

    pub fn encoder_params(&self) -> ParamList {
        self.saliency
            .as_ref()
            .map(SaliencyPredictor::encoder_params)
            .unwrap_or_default()
    }

    pub fn saliency_params(&self) -> ParamList {
        self.saliency
            .as_ref()
            .map(SaliencyPredictor::params)
            .unwrap_or_default()
    }

    /// Parameter count. Training counts the classifier and the whole saliency
    /// network. Inference counts the classifier plus what the deployed forward
    /// actually reads: the encoder for SAM/LSM with at least one enabled
    /// point, the full predictor for SIM/SAI, nothing for a plain model.
    pub fn count_parameters(&self, phase: Phase) -> usize {
        let backbone_head = nn::count(&self.classifier.backbone.params("c"))
            + nn::count(&self.classifier.head.params("h"));
        let fusions: usize = self
            .classifier
            .fusions
            .iter()
            .enumerate()
            .filter(|(i, _)| phase == Phase::Train || self.scheme.enabled(*i))
            .map(|(_, f)| nn::count(&f.params("f")))
            .sum();
        let saliency = match (phase, self.variant, &self.saliency) {
            (_, None, _) | (_, _, None) => 0,
            (Phase::Train, Some(_), Some(s)) => nn::count(&s.params()),
            (Phase::Inference, Some(v), Some(s)) if v.uses_stage_features() => {
                if self.scheme.any() {
                    nn::count(&s.encoder_params())
                } else {
                    0
                }
            }
            (Phase::Inference, Some(_), Some(s)) => nn::count(&s.params()),
        };
        backbone_head + fusions + saliency
    }
}

fn peak_normalized(map: &Tensor) -> Result<Tensor> {
    let (b, h, w) = map.dims3()?;
    let peak = map.flatten_from(1)?.max_keepdim(D::Minus1)?.reshape((b, 1, 1))?;
    Ok(map.broadcast_div(&peak)?.reshape((b, 1, h, w))?)
}

/// Fails if any saliency-encoder parameter carries a non-zero gradient in
/// `grads`, which must come from a backward of the classification loss only.
pub fn stop_gradient_guard(model: &ModulatedBackbone, grads: &GradStore) -> Result<()> {
    for (name, var) in model.encoder_params() {
        if let Some(g) = grads.get(var.as_tensor()) {
            let m = g.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
            if m != 0.0 {
                return Err(SamError::GradientLeak(name));
            }
        }
    }
    Ok(())
}

/// Runs a classification-only backward on `x` and checks [`stop_gradient_guard`].
pub fn check_gradient_isolation(model: &ModulatedBackbone, x: &Tensor, labels: &[usize]) -> Result<()> {
    let logits = model.forward(x, GradientRule::StopSaliency)?.logits;
    let grads = nn::cross_entropy(&logits, labels)?.backward()?;
    stop_gradient_guard(model, &grads)
}
