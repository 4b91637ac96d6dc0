use candle_core::{DType, Tensor, D};

use crate::error::{Result, SamError};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Divides each map of a `(B, N)` batch by its sum.
fn sum_normalize(maps: &Tensor) -> Result<Tensor> {
    let sums = maps.sum_keepdim(D::Minus1)?;
    let min_sum = sums.flatten_all()?.to_dtype(DType::F64)?.min(0)?.to_scalar::<f64>()?;
    if !(min_sum > 0.0) {
        return Err(SamError::data("saliency map has no positive mass"));
    }
    Ok(maps.broadcast_div(&sums)?)
}

/// Saliency KL objective, averaged over the batch:
///
/// `Σ_i s_i · log(s_i / (p_i + ε) + ε)`
///
/// with `s` the target and `p` the prediction, both sum-normalized per map
/// first. Cells where the target is zero contribute nothing. Accepts `(H, W)`
/// or `(B, H, W)` tensors of any float dtype; differentiable w.r.t.
/// `predicted`.
pub fn kld_loss(predicted: &Tensor, target: &Tensor, epsilon: f64) -> Result<Tensor> {
    if predicted.dims() != target.dims() {
        return Err(SamError::shape(format!(
            "kld_loss: predicted {:?} vs target {:?}",
            predicted.dims(),
            target.dims()
        )));
    }
    let (b, n) = match predicted.dims() {
        [h, w] => (1, h * w),
        [b, h, w] => (*b, h * w),
        other => {
            return Err(SamError::shape(format!(
                "kld_loss expects (H,W) or (B,H,W), got {other:?}"
            )))
        }
    };
    let target = target.to_dtype(predicted.dtype())?.detach();
    let p = sum_normalize(&predicted.reshape((b, n))?)?;
    let s = sum_normalize(&target.reshape((b, n))?)?;

    let ratio = (s.clone() / (p + epsilon)?)? + epsilon;
    let positive = s.gt(0.0)?;
    let ones = Tensor::ones_like(&s)?;
    // log(1) = 0 on cells with no target mass, so 0·log(·) never becomes NaN.
    let log_term = positive.where_cond(&ratio?, &ones)?.log()?;
    let per_map = (s * log_term)?.sum(D::Minus1)?;
    Ok(per_map.mean_all()?)
}

/// Scalar convenience wrapper over [`kld_loss`] for plain slices.
pub fn kld_value(predicted: &[f32], target: &[f32], epsilon: f64) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(SamError::shape(format!(
            "kld: {} vs {} cells",
            predicted.len(),
            target.len()
        )));
    }
    let n = predicted.len();
    let dev = &crate::nn::DEVICE;
    let p = Tensor::from_iter(predicted.iter().map(|&v| f64::from(v)), dev)?.reshape((1, 1, n))?;
    let t = Tensor::from_iter(target.iter().map(|&v| f64::from(v)), dev)?.reshape((1, 1, n))?;
    Ok(kld_loss(&p, &t, epsilon)?.to_scalar::<f64>()?)
}
