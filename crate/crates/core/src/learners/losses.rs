use std::collections::BTreeSet;

use candle_core::{DType, Tensor};

use crate::error::{Result, SamError};
use crate::nn::{cross_entropy, log_softmax, softmax, ParamList, DEVICE};

/// Logits with every column not in `keep` replaced by −∞.
pub fn mask_logits(logits: &Tensor, keep: &BTreeSet<usize>) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    let row: Vec<u8> = (0..k).map(|c| u8::from(keep.contains(&c))).collect();
    let mask = Tensor::from_vec(row, (1, k), &DEVICE)?.broadcast_as((b, k))?;
    let neg = Tensor::full(f32::NEG_INFINITY, (b, k), &DEVICE)?.to_dtype(logits.dtype())?;
    Ok(mask.where_cond(logits, &neg)?)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(SamError::shape(format!("mse: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// DER++: stream CE + α·MSE(current vs stored logits on replay batch a)
/// + β·CE(replay batch b). Missing replay batches contribute nothing.
pub fn derpp_loss(
    stream_logits: &Tensor,
    stream_labels: &[usize],
    replay_a: Option<(&Tensor, &Tensor)>,
    replay_b: Option<(&Tensor, &[usize])>,
    alpha: f64,
    beta: f64,
) -> Result<Tensor> {
    let mut loss = cross_entropy(stream_logits, stream_labels)?;
    if let Some((logits, stored)) = replay_a {
        loss = (loss + (mse(logits, &stored.detach())? * alpha)?)?;
    }
    if let Some((logits, labels)) = replay_b {
        loss = (loss + (cross_entropy(logits, labels)? * beta)?)?;
    }
    Ok(loss)
}

/// ER-ACE. When `mask_stream` is set (some task has already been completed),
/// the stream term hides every seen class that is absent from the stream
/// batch; the replay term sees all seen classes.
pub fn erace_loss(
    stream_logits: &Tensor,
    stream_labels: &[usize],
    replay: Option<(&Tensor, &[usize])>,
    seen_classes: &BTreeSet<usize>,
    mask_stream: bool,
) -> Result<Tensor> {
    if seen_classes.is_empty() {
        return Err(SamError::config("ER-ACE needs a non-empty seen-class set"));
    }
    let stream_term = if mask_stream {
        let present: BTreeSet<usize> = stream_labels.iter().copied().collect();
        let k = stream_logits.dim(1)?;
        let keep: BTreeSet<usize> = (0..k)
            .filter(|c| present.contains(c) || !seen_classes.contains(c))
            .collect();
        cross_entropy(&mask_logits(stream_logits, &keep)?, stream_labels)?
    } else {
        cross_entropy(stream_logits, stream_labels)?
    };
    match replay {
        Some((logits, labels)) => {
            let replay_term = cross_entropy(&mask_logits(logits, seen_classes)?, labels)?;
            Ok((stream_term + replay_term)?)
        }
        None => Ok(stream_term),
    }
}

/// Batch-mean KL(softmax(old/T) ‖ softmax(new/T)) restricted to `classes`.
pub fn distillation_kl(new: &Tensor, old: &Tensor, classes: &[usize], temperature: f64) -> Result<Tensor> {
    let idx = Tensor::from_vec(
        classes.iter().map(|&c| c as u32).collect::<Vec<_>>(),
        classes.len(),
        &DEVICE,
    )?;
    let new = (new.index_select(&idx, 1)? / temperature)?;
    let old = (old.detach().index_select(&idx, 1)? / temperature)?;
    let p_old = softmax(&old)?;
    let kl = (p_old * (log_softmax(&old)? - log_softmax(&new)?)?)?.sum(1)?;
    Ok(kl.mean_all()?)
}

/// LwF: stream CE plus `weight` times the distillation term over
/// `old_classes`; the term vanishes without a snapshot or old classes.
pub fn lwf_loss(
    stream_logits: &Tensor,
    stream_labels: &[usize],
    old_logits: Option<&Tensor>,
    old_classes: &[usize],
    temperature: f64,
    weight: f64,
) -> Result<Tensor> {
    let ce = cross_entropy(stream_logits, stream_labels)?;
    match old_logits {
        Some(old) if !old_classes.is_empty() => {
            let kl = distillation_kl(stream_logits, old, old_classes, temperature)?;
            Ok((ce + (kl * weight)?)?)
        }
        _ => Ok(ce),
    }
}

/// (strength/2)·Σ F (θ − θ*)².
pub fn oewc_penalty(params: &ParamList, anchor: &[Tensor], fisher: &[Tensor], strength: f64) -> Result<Tensor> {
    if params.len() != anchor.len() || params.len() != fisher.len() {
        return Err(SamError::shape(format!(
            "oEWC: {} parameters, {} anchors, {} Fisher tensors",
            params.len(),
            anchor.len(),
            fisher.len()
        )));
    }
    let mut total = Tensor::zeros((), DType::F32, &DEVICE)?;
    for (((name, p), a), f) in params.iter().zip(anchor).zip(fisher) {
        if p.dims() != a.dims() || p.dims() != f.dims() {
            return Err(SamError::shape(format!(
                "oEWC `{name}`: parameter {:?}, anchor {:?}, Fisher {:?}",
                p.dims(),
                a.dims(),
                f.dims()
            )));
        }
        let d = (p.as_tensor() - a)?;
        total = (total + (d.sqr()? * f)?.sum_all()?)?;
    }
    Ok((total * (strength / 2.0))?)
}

/// Empirical Fisher diagonal: the mean over `n` samples of the squared
/// gradient of `log_lik(i)` with respect to each parameter.
pub fn fisher_diagonal(
    params: &ParamList,
    n: usize,
    mut log_lik: impl FnMut(usize) -> Result<Tensor>,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(SamError::data("Fisher estimate needs at least one sample"));
    }
    let mut acc: Vec<Tensor> = params
        .iter()
        .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
        .collect::<Result<_>>()?;
    for i in 0..n {
        let grads = log_lik(i)?.backward()?;
        for (a, (_, v)) in acc.iter_mut().zip(params) {
            if let Some(g) = grads.get(v.as_tensor()) {
                *a = (&*a + g.sqr()?)?;
            }
        }
    }
    acc.into_iter().map(|a| Ok((a / n as f64)?.detach())).collect()
}

/// F ← γ·F + F_new.
pub fn decay_fisher(previous: Option<&[Tensor]>, fresh: Vec<Tensor>, gamma: f64) -> Result<Vec<Tensor>> {
    match previous {
        None => Ok(fresh),
        Some(prev) => prev
            .iter()
            .zip(fresh)
            .map(|(p, f)| Ok(((p * gamma)? + f)?))
            .collect(),
    }
}

/// Current values of `params`, detached.
pub fn anchor(params: &ParamList) -> Result<Vec<Tensor>> {
    crate::nn::snapshot(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use candle_core::Var;

    fn t2(rows: &[[f32; 2]]) -> Tensor {
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (rows.len(), 2), &DEVICE).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        f64::from(t.to_scalar::<f32>().unwrap())
    }

    fn ce_ref(logits: [f64; 2], y: usize) -> f64 {
        let lse = (logits[0].exp() + logits[1].exp()).ln();
        lse - logits[y]
    }

    #[test]
    fn derpp_hand_value() {
        let s = t2(&[[1.0, 2.0]]);
        let a = t2(&[[0.5, -0.5]]);
        let stored = t2(&[[1.5, 0.5]]);
        let b = t2(&[[3.0, 0.0]]);
        let got = derpp_loss(&s, &[0], Some((&a, &stored)), Some((&b, &[1])), 0.5, 0.5).unwrap();
        let expected = ce_ref([1.0, 2.0], 0) + 0.5 * ((1.0f64 + 1.0) / 2.0) + 0.5 * ce_ref([3.0, 0.0], 1);
        assert_abs_diff_eq!(scalar(&got), expected, epsilon = 1e-6);
    }

    #[test]
    fn derpp_degenerates_to_ce() {
        let s = t2(&[[1.0, 2.0], [0.0, -1.0]]);
        let a = t2(&[[9.0, -4.0]]);
        let got = derpp_loss(&s, &[0, 1], Some((&a, &a.zeros_like().unwrap())), Some((&a, &[0])), 0.0, 0.0).unwrap();
        let ce = cross_entropy(&s, &[0, 1]).unwrap();
        assert_eq!(scalar(&got), scalar(&ce));
        let same = derpp_loss(&s, &[0, 1], Some((&a, &a)), None, 1.0, 0.0).unwrap();
        assert_eq!(scalar(&same), scalar(&ce));
    }

    #[test]
    fn erace_masks_absent_seen_classes() {
        let logits = Tensor::new(&[[0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]], &DEVICE).unwrap();
        let seen: BTreeSet<usize> = (0..6).collect();
        let present: BTreeSet<usize> = [4, 5].into();
        let keep: BTreeSet<usize> = (0..7).filter(|c| present.contains(c) || !seen.contains(c)).collect();
        let masked: Vec<Vec<f32>> = mask_logits(&logits, &keep).unwrap().to_vec2().unwrap();
        for c in 0..4 {
            assert_eq!(masked[0][c], f32::NEG_INFINITY);
        }
        assert_eq!(&masked[0][4..], &[0.5, 0.6, 0.7]);
        // A batch holding only class 4 also hides seen class 5; unseen 6 stays.
        let got = scalar(&erace_loss(&logits, &[4], None, &seen, true).unwrap());
        let lse = (0.5f64.exp() + 0.7f64.exp()).ln();
        assert_abs_diff_eq!(got, lse - 0.5, epsilon = 1e-6);
    }

    #[test]
    fn erace_first_task_is_plain_ce() {
        let logits = t2(&[[0.3, -0.2], [1.0, 0.0]]);
        let seen: BTreeSet<usize> = [0, 1].into();
        let got = erace_loss(&logits, &[1, 0], None, &seen, false).unwrap();
        assert_eq!(scalar(&got), scalar(&cross_entropy(&logits, &[1, 0]).unwrap()));
        assert!(erace_loss(&logits, &[1, 0], None, &BTreeSet::new(), false).is_err());
    }

    #[test]
    fn erace_replay_over_all_classes_is_plain_ce() {
        let logits = t2(&[[0.3, -0.2]]);
        let seen: BTreeSet<usize> = [0, 1].into();
        let got = erace_loss(&logits, &[0], Some((&logits, &[1])), &seen, false).unwrap();
        let expected = scalar(&cross_entropy(&logits, &[0]).unwrap()) + scalar(&cross_entropy(&logits, &[1]).unwrap());
        assert_abs_diff_eq!(scalar(&got), expected, epsilon = 1e-6);
    }

    #[test]
    fn lwf_hand_value() {
        let new = t2(&[[1.0, -1.0]]);
        let old = t2(&[[2.0, 0.0]]);
        let got = lwf_loss(&new, &[0], Some(&old), &[0, 1], 2.0, 1.0).unwrap();
        let sm = |a: f64, b: f64| {
            let z = a.exp() + b.exp();
            [a.exp() / z, b.exp() / z]
        };
        let p = sm(1.0, 0.0);
        let q = sm(0.5, -0.5);
        let kl = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        assert_abs_diff_eq!(scalar(&got), ce_ref([1.0, -1.0], 0) + kl, epsilon = 1e-6);
    }

    #[test]
    fn lwf_degenerate_cases() {
        let new = t2(&[[1.0, -1.0]]);
        let ce = scalar(&cross_entropy(&new, &[1]).unwrap());
        let same = lwf_loss(&new, &[1], Some(&new), &[0, 1], 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(scalar(&same), ce, epsilon = 1e-7);
        let zero = lwf_loss(&new, &[1], Some(&t2(&[[5.0, 0.0]])), &[0, 1], 2.0, 0.0).unwrap();
        assert_eq!(scalar(&zero), ce);
    }

    #[test]
    fn oewc_hand_value() {
        let v = Var::new(&[1f32, -2.0], &DEVICE).unwrap();
        let params = vec![("w".to_string(), v)];
        let anchor = vec![Tensor::zeros(2, DType::F32, &DEVICE).unwrap()];
        let ones = vec![Tensor::ones(2, DType::F32, &DEVICE).unwrap()];
        assert_abs_diff_eq!(scalar(&oewc_penalty(&params, &anchor, &ones, 1.0).unwrap()), 2.5, epsilon = 1e-7);
        assert_eq!(scalar(&oewc_penalty(&params, &anchor, &ones, 0.0).unwrap()), 0.0);
        let at_anchor = anchor_of(&params);
        assert_eq!(scalar(&oewc_penalty(&params, &at_anchor, &ones, 3.0).unwrap()), 0.0);
        let bad = vec![Tensor::zeros(3, DType::F32, &DEVICE).unwrap()];
        assert!(oewc_penalty(&params, &bad, &ones, 1.0).is_err());
    }

    fn anchor_of(p: &ParamList) -> Vec<Tensor> {
        anchor(p).unwrap()
    }

    #[test]
    fn fisher_matches_closed_form_on_quadratic_model() {
        // Gaussian log-likelihood of a 1-D linear model: log p = −(y − w·x)²/2,
        // gradient (y − w·x)·x; the oracle averages its square in f64.
        let w = Var::new(&[0.7f32], &DEVICE).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let xs: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.37).sin() * 2.0).collect();
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| 1.3 * x + ((i as f64) * 1.7).cos()).collect();
        let fisher = fisher_diagonal(&params, xs.len(), |i| {
            let x = Tensor::new(&[xs[i] as f32], &DEVICE)?;
            let y = Tensor::new(&[ys[i] as f32], &DEVICE)?;
            let r = (y - w.as_tensor().mul(&x)?)?;
            Ok((r.sqr()?.sum_all()? * -0.5)?)
        })
        .unwrap();
        let got = f64::from(fisher[0].to_vec1::<f32>().unwrap()[0]);
        let oracle: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| ((y - 0.7 * x) * x).powi(2))
            .sum::<f64>()
            / xs.len() as f64;
        assert!((got - oracle).abs() / oracle < 0.05, "{got} vs {oracle}");
    }

    #[test]
    fn fisher_decay_accumulates() {
        let a = vec![Tensor::new(&[2f32], &DEVICE).unwrap()];
        let b = vec![Tensor::new(&[1f32], &DEVICE).unwrap()];
        let f = decay_fisher(Some(&a), b, 0.9).unwrap();
        assert_abs_diff_eq!(f[0].to_vec1::<f32>().unwrap()[0], 2.8, epsilon = 1e-6);
    }
}
