use serde::{Deserialize, Serialize};

use super::loss::{kld_value, DEFAULT_EPSILON};
use crate::error::{Result, SamError};

/// Agreement between a predicted and a target saliency map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMetrics {
    /// Pearson correlation; `0.0` when `cc_defined` is false.
    pub cc: f64,
    /// False when either map has zero variance.
    pub cc_defined: bool,
    pub sim: f64,
    pub kld: f64,
}

impl SaliencyMetrics {
    /// Mean of each metric over a non-empty list; `cc` averages defined values only.
    pub fn mean(rows: &[SaliencyMetrics]) -> Option<SaliencyMetrics> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let defined: Vec<f64> = rows.iter().filter(|m| m.cc_defined).map(|m| m.cc).collect();
        Some(SaliencyMetrics {
            cc: if defined.is_empty() {
                0.0
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            },
            cc_defined: !defined.is_empty(),
            sim: rows.iter().map(|m| m.sim).sum::<f64>() / n,
            kld: rows.iter().map(|m| m.kld).sum::<f64>() / n,
        })
    }
}

fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mb = b.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = f64::from(x) - ma;
        let dy = f64::from(y) - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// CC, Sim and KLD between two maps of equal size.
pub fn saliency_metrics(predicted: &[f32], target: &[f32]) -> Result<SaliencyMetrics> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(SamError::shape(format!(
            "metrics: predicted has {} cells, target {}",
            predicted.len(),
            target.len()
        )));
    }
    let ps: f64 = predicted.iter().map(|&v| f64::from(v)).sum();
    let ts: f64 = target.iter().map(|&v| f64::from(v)).sum();
    if !(ts > 0.0) || !(ps > 0.0) {
        return Err(SamError::data("metrics: map without positive mass"));
    }
    let sim = predicted
        .iter()
        .zip(target)
        .map(|(&p, &t)| (f64::from(p) / ps).min(f64::from(t) / ts))
        .sum::<f64>()
        .min(1.0);
    let cc = pearson(predicted, target);
    Ok(SaliencyMetrics {
        cc: cc.unwrap_or(0.0),
        cc_defined: cc.is_some(),
        sim,
        // The ε terms can push an exact match a hair below zero.
        kld: kld_value(predicted, target, DEFAULT_EPSILON)?.max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let t = [0.1, 0.5, 0.2, 0.9];
        let m = saliency_metrics(&t, &t).unwrap();
        assert!((m.cc - 1.0).abs() < 1e-12);
        assert!((m.sim - 1.0).abs() < 1e-12);
        assert!(m.kld < 1e-6);
    }

    #[test]
    fn disjoint_support_has_zero_similarity() {
        let m = saliency_metrics(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.sim, 0.0);
    }

    #[test]
    fn similarity_hand_value() {
        let m = saliency_metrics(&[0.75, 0.25], &[0.25, 0.75]).unwrap();
        assert!((m.sim - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_map_flags_cc() {
        let m = saliency_metrics(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!(!m.cc_defined);
        assert_eq!(m.cc, 0.0);
    }

    fn map4() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.01f32..10.0, 16)
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range(p in map4(), q in map4()) {
            let m = saliency_metrics(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.sim));
            prop_assert!((-1.0..=1.0).contains(&m.cc));
            prop_assert!(m.kld >= 0.0);
        }

        #[test]
        fn metrics_ignore_positive_rescaling(p in map4(), q in map4(), a in 0.1f32..20.0, b in 0.1f32..20.0) {
            let base = saliency_metrics(&p, &q).unwrap();
            let ps: Vec<f32> = p.iter().map(|v| v * a).collect();
            let qs: Vec<f32> = q.iter().map(|v| v * b).collect();
            let scaled = saliency_metrics(&ps, &qs).unwrap();
            prop_assert!((base.sim - scaled.sim).abs() < 1e-5);
            prop_assert!((base.cc - scaled.cc).abs() < 1e-5);
            prop_assert!((base.kld - scaled.kld).abs() < 1e-4);
        }
    }
}
