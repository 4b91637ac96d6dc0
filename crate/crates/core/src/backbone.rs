//! Stage-structured convolutional backbones shared by the classifier and the
//! saliency encoder.
//!
//! Both architectures expose exactly [`NUM_STAGES`] stages; the output of each
//! stage is a modulation point.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastream::ImageSize;
use crate::error::{Result, SamError};
use crate::nn::{Conv2d, ParamList};

pub const NUM_STAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Five 3×3 conv + ReLU stages, strides 1,2,2,2,1.
    Plain,
    /// ResNet-18 layout without normalization: a stem conv and four layers
    /// of two basic blocks each.
    Resnet18,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Plain => "plain",
            Arch::Resnet18 => "resnet18",
        })
    }
}

impl FromStr for Arch {
    type Err = SamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Arch::Plain),
            "resnet18" => Ok(Arch::Resnet18),
            other => Err(SamError::config(format!(
                "unknown architecture `{other}` (expected plain|resnet18)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub arch: Arch,
    /// Channel count of the first stage; later stages are multiples of it.
    pub width: usize,
}

impl BackboneSpec {
    pub fn channels(&self) -> [usize; NUM_STAGES] {
        let w = self.width;
        match self.arch {
            Arch::Plain => [w, 2 * w, 2 * w, 4 * w, 4 * w],
            Arch::Resnet18 => [w, w, 2 * w, 4 * w, 8 * w],
        }
    }

    pub fn strides(&self) -> [usize; NUM_STAGES] {
        match self.arch {
            Arch::Plain => [1, 2, 2, 2, 1],
            Arch::Resnet18 => [1, 1, 2, 2, 2],
        }
    }

    /// `(channels, height, width)` of each stage output for one image.
    pub fn stage_shapes(&self, size: ImageSize) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (size.height, size.width);
        self.channels()
            .iter()
            .zip(self.strides())
            .map(|(&c, s)| {
                h = h.div_ceil(s);
                w = w.div_ceil(s);
                (c, h, w)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some(Conv2d::new(cin, cout, 1, stride, 0, rng)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, rng)?,
            conv2: Conv2d::new(cout, cout, 3, 1, 1, rng)?,
            shortcut,
        })
    }

    fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            conv1: self.conv1.deep_copy()?,
            conv2: self.conv2.deep_copy()?,
            shortcut: self.shortcut.as_ref().map(Conv2d::deep_copy).transpose()?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }

    fn params(&self, prefix: &str) -> ParamList {
        let mut p = self.conv1.params(&format!("{prefix}.conv1"));
        p.extend(self.conv2.params(&format!("{prefix}.conv2")));
        if let Some(s) = &self.shortcut {
            p.extend(s.params(&format!("{prefix}.shortcut")));
        }
        p
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Conv(Conv2d),
    Blocks(Vec<BasicBlock>),
}

/// A five-stage feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    in_channels: usize,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec, in_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if spec.width == 0 {
            return Err(SamError::config("backbone width must be ≥ 1"));
        }
        let channels = spec.channels();
        let strides = spec.strides();
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = in_channels;
        for i in 0..NUM_STAGES {
            let stage = match spec.arch {
                Arch::Plain => Stage::Conv(Conv2d::new(cin, channels[i], 3, strides[i], 1, rng)?),
                Arch::Resnet18 if i == 0 => {
                    Stage::Conv(Conv2d::new(cin, channels[0], 3, strides[0], 1, rng)?)
                }
                Arch::Resnet18 => Stage::Blocks(vec![
                    BasicBlock::new(cin, channels[i], strides[i], rng)?,
                    BasicBlock::new(channels[i], channels[i], 1, rng)?,
                ]),
            };
            stages.push(stage);
            cin = channels[i];
        }
        Ok(Self {
            spec,
            in_channels,
            stages,
        })
    }

    pub fn spec(&self) -> BackboneSpec {
        self.spec
    }

    /// Copy with freshly allocated parameters.
    pub fn deep_copy(&self) -> Result<Self> {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                Ok(match s {
                    Stage::Conv(c) => Stage::Conv(c.deep_copy()?),
                    Stage::Blocks(bs) => {
                        Stage::Blocks(bs.iter().map(BasicBlock::deep_copy).collect::<Result<_>>()?)
                    }
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: self.spec,
            in_channels: self.in_channels,
            stages,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.spec.channels()[NUM_STAGES - 1]
    }

    /// Runs stage `i` (0-based) including its non-linearity.
    pub fn stage(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        match &self.stages[i] {
            Stage::Conv(c) => Ok(c.forward(x)?.relu()?),
            Stage::Blocks(blocks) => {
                let mut h = x.clone();
                for b in blocks {
                    h = b.forward(&h)?;
                }
                Ok(h)
            }
        }
    }

    /// Outputs of every stage, in order.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(NUM_STAGES);
        let mut h = x.clone();
        for i in 0..NUM_STAGES {
            h = self.stage(i, &h)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    pub fn params(&self, prefix: &str) -> ParamList {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Conv(c) => out.extend(c.params(&format!("{prefix}.stage{i}"))),
                Stage::Blocks(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        out.extend(b.params(&format!("{prefix}.stage{i}.block{j}")));
                    }
                }
            }
        }
        out
    }

    /// Copies every parameter value from `other`, which must share the
    /// architecture. The input stem may differ in channel count; extra input
    /// channels keep their current weights.
    pub fn load_from(&self, other: &Backbone) -> Result<()> {
        if self.spec != other.spec {
            return Err(SamError::config("cannot copy weights across architectures"));
        }
        for ((name, dst), (_, src)) in self.params("b").iter().zip(other.params("b")) {
            if dst.dims() == src.dims() {
                dst.set(src.as_tensor())?;
            } else {
                // Widened stem: overwrite the leading input channels.
                let n = src.dims()[1];
                let rest = dst.as_tensor().narrow(1, n, dst.dims()[1] - n)?;
                let merged = Tensor::cat(&[src.as_tensor(), &rest], 1)?;
                if merged.dims() != dst.dims() {
                    return Err(SamError::shape(format!("cannot copy `{name}`")));
                }
                dst.set(&merged)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{count, rng_for, DEVICE};

    #[test]
    fn stage_shapes_match_forward() {
        for arch in [Arch::Plain, Arch::Resnet18] {
            let spec = BackboneSpec { arch, width: 4 };
            let b = Backbone::new(spec, 3, &mut rng_for(0, "b")).unwrap();
            let x = Tensor::zeros((2, 3, 16, 16), candle_core::DType::F32, &DEVICE).unwrap();
            let feats = b.forward_all(&x).unwrap();
            let shapes = spec.stage_shapes(ImageSize::new(16, 16));
            for (f, (c, h, w)) in feats.iter().zip(shapes) {
                assert_eq!(f.dims(), &[2, c, h, w]);
            }
        }
    }

    #[test]
    fn resnet18_parameter_count() {
        // Conv weights and biases of the normalization-free ResNet-18 layout at width 64.
        let b = Backbone::new(
            BackboneSpec {
                arch: Arch::Resnet18,
                width: 64,
            },
            3,
            &mut rng_for(0, "r"),
        )
        .unwrap();
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let block = |cin: usize, cout: usize| {
            conv(cin, cout, 3) + conv(cout, cout, 3) + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let expected = conv(3, 64, 3)
            + 2 * block(64, 64)
            + block(64, 128)
            + block(128, 128)
            + block(128, 256)
            + block(256, 256)
            + block(256, 512)
            + block(512, 512);
        assert_eq!(count(&b.params("c")), expected);
    }
}
