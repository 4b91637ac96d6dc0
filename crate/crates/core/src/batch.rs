use candle_core::Tensor;

use crate::datastream::{ImageSize, Sample};
use crate::error::{Result, SamError};
use crate::nn::DEVICE;

/// Stacks sample images into a `(B, 3, H, W)` tensor.
pub fn images(samples: &[&Sample], size: ImageSize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * 3 * size.pixels());
    for s in samples {
        if s.image.len() != 3 * size.pixels() {
            return Err(SamError::shape(format!(
                "sample `{}` does not match {}×{}",
                s.id, size.height, size.width
            )));
        }
        data.extend_from_slice(&s.image);
    }
    Ok(Tensor::from_vec(
        data,
        (samples.len(), 3, size.height, size.width),
        &DEVICE,
    )?)
}

/// Stacks target saliency maps into a `(B, H, W)` tensor.
pub fn saliency_maps(samples: &[&Sample], size: ImageSize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * size.pixels());
    for s in samples {
        let map = s.saliency.as_ref().ok_or_else(|| {
            SamError::data(format!("sample `{}` has no saliency map attached", s.id))
        })?;
        if map.len() != size.pixels() {
            return Err(SamError::shape(format!("sample `{}` map size", s.id)));
        }
        data.extend_from_slice(map);
    }
    Ok(Tensor::from_vec(
        data,
        (samples.len(), size.height, size.width),
        &DEVICE,
    )?)
}

pub fn labels(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}
