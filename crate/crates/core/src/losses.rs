//! Multi-scale weighted cross entropy and the target adaptive loss for
//! partially labeled data. Every loss returns its value together with the
//! gradient with respect to the logits it was given. Values are accumulated
//! in `f64`.

use std::collections::BTreeSet;

use ndarray::{Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Clamp applied to the merged complement probability before the log.
pub const TAL_EPS: f64 = 1e-12;

/// Where the target adaptive loss is applied during deep supervision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TalScope {
    #[default]
    AllScales,
    FullResolutionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Per-class weights of the fully supervised cross entropy.
    pub class_weights: Vec<f64>,
    pub tal_scope: TalScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::multi_organ(4)
    }
}

impl LossConfig {
    /// Unit weights for every class.
    pub fn multi_organ(class_count: usize) -> Self {
        Self {
            class_weights: vec![1.0; class_count],
            tal_scope: TalScope::AllScales,
        }
    }

    /// Background 0.2, organ 1.2.
    pub fn single_organ() -> Self {
        Self {
            class_weights: vec![0.2, 1.2],
            tal_scope: TalScope::AllScales,
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.class_weights.len() != class_count {
            return Err(Error::Config(format!(
                "{} class weights for {class_count} classes",
                self.class_weights.len()
            )));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        Ok(())
    }
}

/// Channel softmax of `(N, C, H, W)` logits, stabilized by max subtraction.
pub fn softmax_probs<F: Real>(logits: &Array4<F>) -> Array4<F> {
    let mut out = logits.clone();
    Zip::from(out.lanes_mut(Axis(1))).for_each(|mut lane| {
        let m = lane.iter().copied().fold(F::neg_infinity(), F::max);
        lane.mapv_inplace(|v| (v - m).exp());
        let z = lane.iter().copied().sum::<F>();
        lane.mapv_inplace(|v| v / z);
    });
    out
}

fn check_shapes<F>(logits: &Array4<F>, labels: &Array3<u8>) -> Result<()> {
    let (n, c, h, w) = logits.dim();
    if labels.dim() != (n, h, w) {
        return Err(Error::Contract(format!(
            "labels {:?} do not match logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= c) {
        return Err(Error::Contract(format!("label {bad} outside {c} classes")));
    }
    Ok(())
}

/// Weighted cross entropy averaged over voxels: `-(1/N) sum w_y log p_y`.
pub fn weighted_ce<F: Real>(logits: &Array4<F>, labels: &Array3<u8>, weights: &[f64]) -> Result<(f64, Array4<F>)> {
    check_shapes(logits, labels)?;
    let (n, c, h, w) = logits.dim();
    if weights.len() != c {
        return Err(Error::Contract(format!("{} weights for {c} classes", weights.len())));
    }
    let voxels = (n * h * w) as f64;
    let mut grad = softmax_probs(logits);
    let mut total = 0.0;
    let mut lse_buf = vec![0.0f64; c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let t = labels[[b, y, x]] as usize;
                for (k, v) in lse_buf.iter_mut().enumerate() {
                    *v = logits[[b, k, y, x]].as_f64();
                }
                let m = lse_buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + lse_buf.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let wt = weights[t];
                total += wt * (lse - lse_buf[t]);
                let scale = F::lit(wt / voxels);
                for k in 0..c {
                    let g = &mut grad[[b, k, y, x]];
                    let onehot = if k == t { F::one() } else { F::zero() };
                    *g = (*g - onehot) * scale;
                }
            }
        }
    }
    Ok((total / voxels, grad))
}

/// Deep pyramid supervision: mean over scales of the per-scale weighted
/// cross entropy.
pub fn dps_loss<F: Real>(scores: &[Array4<F>], labels: &[Array3<u8>], weights: &[f64]) -> Result<(f64, Vec<Array4<F>>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Contract(format!(
            "{} score maps for {} label maps",
            scores.len(),
            labels.len()
        )));
    }
    let s = scores.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for (f, y) in scores.iter().zip(labels) {
        let (l, mut g) = weighted_ce(f, y, weights)?;
        total += l;
        g.mapv_inplace(|v| v / F::lit(s));
        grads.push(g);
    }
    Ok((total / s, grads))
}

fn check_labeled_set(c: usize, labeled: &BTreeSet<u8>) -> Result<()> {
    if labeled.is_empty() || labeled.iter().any(|&k| k == 0 || k as usize >= c) {
        return Err(Error::Contract(format!("labeled set {labeled:?} must lie in 1..{c}")));
    }
    Ok(())
}

fn check_partial_labels(labels: &Array3<u8>, labeled: &BTreeSet<u8>) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&v| v != 0 && !labeled.contains(&v)) {
        return Err(Error::Contract(format!("label {bad} outside C_k {labeled:?} and background")));
    }
    Ok(())
}

/// Target adaptive loss evaluated on probabilities.
///
/// A voxel labeled `c` in `C_k` contributes `-log p_c`; a voxel labeled 0
/// contributes `-log(1 - sum_{c in C_k} p_c)`, with the complement clamped
/// at [`TAL_EPS`]. Returns the voxel mean.
pub fn tal_loss<F: Real>(probs: &Array4<F>, labels: &Array3<u8>, labeled: &BTreeSet<u8>) -> Result<f64> {
    check_shapes(probs, labels)?;
    let (n, c, h, w) = probs.dim();
    check_labeled_set(c, labeled)?;
    check_partial_labels(labels, labeled)?;
    let mut total = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let t = labels[[b, y, x]];
                total -= if t != 0 {
                    probs[[b, t as usize, y, x]].as_f64().ln()
                } else {
                    let fg: f64 = labeled.iter().map(|&k| probs[[b, k as usize, y, x]].as_f64()).sum();
                    (1.0 - fg).max(TAL_EPS).ln()
                };
            }
        }
    }
    Ok(total / (n * h * w) as f64)
}

/// Gradient of [`tal_loss`] with respect to the probabilities, with the
/// complement written as the sum of the unlabeled classes' probabilities.
/// Every unlabeled class of an unknown voxel receives the same value.
pub fn tal_prob_grad<F: Real>(probs: &Array4<F>, labels: &Array3<u8>, labeled: &BTreeSet<u8>) -> Result<Array4<F>> {
    check_shapes(probs, labels)?;
    let (n, c, h, w) = probs.dim();
    check_labeled_set(c, labeled)?;
    check_partial_labels(labels, labeled)?;
    let m = (n * h * w) as f64;
    let mut grad = Array4::<F>::zeros(probs.dim());
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let t = labels[[b, y, x]];
                if t != 0 {
                    grad[[b, t as usize, y, x]] = F::lit(-1.0 / (m * probs[[b, t as usize, y, x]].as_f64()));
                    continue;
                }
                let q: f64 = (0..c)
                    .filter(|k| !labeled.contains(&(*k as u8)))
                    .map(|k| probs[[b, k, y, x]].as_f64())
                    .sum();
                if q < TAL_EPS {
                    continue;
                }
                let g = F::lit(-1.0 / (m * q));
                for k in (0..c).filter(|k| !labeled.contains(&(*k as u8))) {
                    grad[[b, k, y, x]] = g;
                }
            }
        }
    }
    Ok(grad)
}

/// Target adaptive loss on logits, with its logit gradient.
///
/// The merged complement is evaluated in the log domain, so the only place
/// the clamp matters is a complement probability below [`TAL_EPS`], where
/// the loss is constant and the gradient is zero.
pub fn tal_loss_logits<F: Real>(logits: &Array4<F>, labels: &Array3<u8>, labeled: &BTreeSet<u8>) -> Result<(f64, Array4<F>)> {
    check_shapes(logits, labels)?;
    let (n, c, h, w) = logits.dim();
    check_labeled_set(c, labeled)?;
    check_partial_labels(labels, labeled)?;
    let m = (n * h * w) as f64;
    let in_ck: Vec<bool> = (0..c).map(|k| labeled.contains(&(k as u8))).collect();
    let log_eps = TAL_EPS.ln();
    let mut grad = Array4::<F>::zeros(logits.dim());
    let mut z = vec![0.0f64; c];
    let mut total = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for (k, v) in z.iter_mut().enumerate() {
                    *v = logits[[b, k, y, x]].as_f64();
                }
                let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                let t = labels[[b, y, x]] as usize;
                if t != 0 {
                    total += lse - z[t];
                    for k in 0..c {
                        let p = (z[k] - lse).exp();
                        let onehot = if k == t { 1.0 } else { 0.0 };
                        grad[[b, k, y, x]] = F::lit((p - onehot) / m);
                    }
                    continue;
                }
                let mc = (0..c).filter(|&k| !in_ck[k]).map(|k| z[k]).fold(f64::NEG_INFINITY, f64::max);
                let lse_c = mc + (0..c).filter(|&k| !in_ck[k]).map(|k| (z[k] - mc).exp()).sum::<f64>().ln();
                let log_q = lse_c - lse;
                if log_q < log_eps {
                    total -= log_eps;
                    continue;
                }
                total -= log_q;
                for k in 0..c {
                    let p = (z[k] - lse).exp();
                    let restricted = if in_ck[k] { 0.0 } else { (z[k] - lse_c).exp() };
                    grad[[b, k, y, x]] = F::lit((p - restricted) / m);
                }
            }
        }
    }
    Ok((total / m, grad))
}

/// Target adaptive loss over a score pyramid. With [`TalScope::AllScales`]
/// the result is the mean of the per-scale losses; otherwise only the first
/// (full resolution) level contributes and the other gradients are `None`.
pub fn tal_dps_loss<F: Real>(
    scores: &[Array4<F>],
    labels: &[Array3<u8>],
    labeled: &BTreeSet<u8>,
    scope: TalScope,
) -> Result<(f64, Vec<Option<Array4<F>>>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Contract(format!(
            "{} score maps for {} label maps",
            scores.len(),
            labels.len()
        )));
    }
    let used = match scope {
        TalScope::AllScales => scores.len(),
        TalScope::FullResolutionOnly => 1,
    };
    let s = F::lit(used as f64);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for (i, (f, y)) in scores.iter().zip(labels).enumerate() {
        if i >= used {
            grads.push(None);
            continue;
        }
        let (l, mut g) = tal_loss_logits(f, y, labeled)?;
        total += l;
        g.mapv_inplace(|v| v / s);
        grads.push(Some(g));
    }
    Ok((total / used as f64, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits1(v: &[f64]) -> Array4<f64> {
        Array4::from_shape_vec((1, v.len(), 1, 1), v.to_vec()).unwrap()
    }

    fn probs1(v: &[f64]) -> Array4<f64> {
        logits1(v)
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_probs(&logits1(&[0.0; 4]));
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let p = softmax_probs(&logits1(&[3f64.ln(), 0.0]));
        assert!((p[[0, 0, 0, 0]] - 0.75).abs() < 1e-12);
        let shifted = softmax_probs(&logits1(&[1001.0, 1000.0, 999.0]));
        let base = softmax_probs(&logits1(&[1.0, 0.0, -1.0]));
        assert!((&shifted - &base).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dps_examples() {
        let y = Array3::<u8>::zeros((1, 1, 1));
        let (l, _) = dps_loss(&[logits1(&[800.0, 0.0])], &[y.clone()], &[1.0, 1.0]).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = dps_loss(&[logits1(&[0.0, 0.0])], &[y.clone()], &[1.0, 1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let f = logits1(&[0.3, -0.2]);
        let (one, _) = dps_loss(&[f.clone()], &[y.clone()], &[1.0, 1.0]).unwrap();
        let (two, _) = dps_loss(&[f.clone(), f], &[y.clone(), y], &[1.0, 1.0]).unwrap();
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    fn dps_rejects_shape_mismatch() {
        let y = Array3::<u8>::zeros((1, 2, 2));
        assert!(matches!(dps_loss(&[logits1(&[0.0, 0.0])], &[y], &[1.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn tal_examples() {
        let liver = BTreeSet::from([1u8]);
        let l = tal_loss(&probs1(&[0.1, 0.8, 0.05, 0.05]), &Array3::from_elem((1, 1, 1), 1u8), &liver).unwrap();
        assert!((l - 0.2231435513142097).abs() < 1e-12);
        let l = tal_loss(&probs1(&[0.4, 0.3, 0.2, 0.1]), &Array3::zeros((1, 1, 1)), &liver).unwrap();
        assert!((l - 0.35667494393873245).abs() < 1e-12);
    }

    #[test]
    fn tal_rejects_labels_outside_set() {
        let liver = BTreeSet::from([1u8]);
        let err = tal_loss(&probs1(&[0.25; 4]), &Array3::from_elem((1, 1, 1), 2u8), &liver).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn tal_on_logits_matches_tal_on_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.random_range(-3.0..3.0));
        let labels = Array3::from_shape_fn((2, 3, 3), |_| [0u8, 0, 2, 3][rng.random_range(0..4)]);
        let ck = BTreeSet::from([2u8, 3]);
        let (a, _) = tal_loss_logits(&logits, &labels, &ck).unwrap();
        let b = tal_loss(&softmax_probs(&logits), &labels, &ck).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn merged_classes_share_probability_gradient() {
        let ck = BTreeSet::from([1u8]);
        let p = probs1(&[0.1, 0.5, 0.3, 0.1]);
        let g = tal_prob_grad(&p, &Array3::zeros((1, 1, 1)), &ck).unwrap();
        assert_eq!(g[[0, 0, 0, 0]], g[[0, 2, 0, 0]]);
        assert_eq!(g[[0, 0, 0, 0]], g[[0, 3, 0, 0]]);
        assert_eq!(g[[0, 1, 0, 0]], 0.0);
    }

    #[test]
    fn saturated_complement_is_clamped() {
        let ck = BTreeSet::from([1u8]);
        let (l, g) = tal_loss_logits(&logits1(&[0.0, 200.0]), &Array3::zeros((1, 1, 1)), &ck).unwrap();
        assert!((l + TAL_EPS.ln()).abs() < 1e-12);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scope_switch_limits_to_full_resolution() {
        let ck = BTreeSet::from([1u8]);
        let f = vec![logits1(&[0.2, 0.1]), logits1(&[1.0, -1.0])];
        let y = vec![Array3::zeros((1, 1, 1)), Array3::zeros((1, 1, 1))];
        let (full, g) = tal_dps_loss(&f, &y, &ck, TalScope::FullResolutionOnly).unwrap();
        let (single, _) = tal_loss_logits(&f[0], &y[0], &ck).unwrap();
        assert_eq!(full, single);
        assert!(g[1].is_none());
        let (all, _) = tal_dps_loss(&f, &y, &ck, TalScope::AllScales).unwrap();
        assert_ne!(all, full);
    }
}
