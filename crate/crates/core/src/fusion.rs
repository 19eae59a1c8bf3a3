//! Adaptive fusion of per-scale score maps.
//!
//! A single 3x3 convolution maps each score map to one channel; global
//! average plus global max pooling of that map gives a confidence per scale,
//! a softmax over scales turns the confidences into weights, and the weighted
//! sum of upsampled score maps is normalized by a channel softmax.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::softmax_probs;
use crate::nn::{join, resize_bilinear, resize_bilinear_backward, Conv2d, Param, Parameterized, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInit {
    /// All scales start with equal weight.
    #[default]
    Zero,
    FanIn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub init: FusionInit,
}

#[derive(Clone, Debug)]
pub struct FusionParams<F> {
    pub shared_conv: Conv2d<F>,
}

#[derive(Clone, Debug)]
pub struct FusionOutput<F> {
    /// `(N, S)` softmax weights, one row per sample.
    pub weights: Array2<F>,
    pub fused_logits: Array4<F>,
    pub fused_probs: Array4<F>,
}

#[derive(Clone, Debug)]
pub struct FusionCache<F> {
    scores: Vec<Array4<F>>,
    upsampled: Vec<Array4<F>>,
    conv_maps: Vec<Array4<F>>,
    weights: Array2<F>,
}

impl<F: Real> FusionParams<F> {
    /// Zero weights and bias, so every scale starts with the same weight.
    pub fn new(class_count: usize) -> Self {
        Self {
            shared_conv: Conv2d::new(class_count, 1, 3, true),
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.shared_conv.init_fan_in(rng);
    }

    pub fn class_count(&self) -> usize {
        self.shared_conv.in_channels()
    }
}

/// Per-sample `GAP + GMP` of a one-channel map.
fn pool_scores<F: Real>(map: &Array4<F>) -> Array1<F> {
    map.outer_iter()
        .map(|sample| {
            let n = F::lit(sample.len() as f64);
            let sum = sample.iter().copied().sum::<F>();
            let max = sample.iter().copied().fold(F::neg_infinity(), F::max);
            sum / n + max
        })
        .collect()
}

/// Confidence `S_s` of one score map, one value per sample.
pub fn scale_score<F: Real>(score_map: &Array4<F>, params: &FusionParams<F>) -> Array1<F> {
    pool_scores(&params.shared_conv.forward(score_map))
}

fn softmax_rows<F: Real>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Fuses score maps given in any order and at any resolution into a
/// `target`-sized probability map.
pub fn fuse<F: Real>(
    scores: &[Array4<F>],
    params: &FusionParams<F>,
    target: (usize, usize),
) -> Result<(FusionOutput<F>, FusionCache<F>)> {
    let first = scores.first().ok_or(Error::EmptyPyramid)?;
    let (n, c, _, _) = first.dim();
    for (s, f) in scores.iter().enumerate() {
        let (nn, cc, _, _) = f.dim();
        if nn != n || cc != c || c != params.class_count() {
            return Err(Error::Contract(format!(
                "score map {s} has shape {:?}; expected {n} samples of {} channels",
                f.shape(),
                params.class_count()
            )));
        }
    }
    let (th, tw) = target;
    let mut conv_maps = Vec::with_capacity(scores.len());
    let mut raw = Array2::<F>::zeros((n, scores.len()));
    for (s, f) in scores.iter().enumerate() {
        let map = params.shared_conv.forward(f);
        raw.column_mut(s).assign(&pool_scores(&map));
        conv_maps.push(map);
    }
    let weights = softmax_rows(&raw);
    let upsampled: Vec<Array4<F>> = scores.iter().map(|f| resize_bilinear(f, th, tw)).collect();
    let mut fused = Array4::<F>::zeros((n, c, th, tw));
    for (s, u) in upsampled.iter().enumerate() {
        for b in 0..n {
            let wgt = weights[[b, s]];
            fused
                .index_axis_mut(Axis(0), b)
                .scaled_add(wgt, &u.index_axis(Axis(0), b));
        }
    }
    let probs = softmax_probs(&fused);
    Ok((
        FusionOutput {
            weights: weights.clone(),
            fused_logits: fused,
            fused_probs: probs,
        },
        FusionCache {
            scores: scores.to_vec(),
            upsampled,
            conv_maps,
            weights,
        },
    ))
}

/// Back-propagates a gradient on the fused logits. Accumulates into the
/// shared convolution and returns one gradient per input score map.
pub fn fuse_backward<F: Real>(
    params: &mut FusionParams<F>,
    cache: &FusionCache<F>,
    d_fused: &Array4<F>,
) -> Vec<Array4<F>> {
    let (n, s_count) = cache.weights.dim();
    // dL/dW_s per sample.
    let mut d_w = Array2::<F>::zeros((n, s_count));
    for (s, u) in cache.upsampled.iter().enumerate() {
        for b in 0..n {
            let dot = (&u.index_axis(Axis(0), b) * &d_fused.index_axis(Axis(0), b)).sum();
            d_w[[b, s]] = dot;
        }
    }
    // Through the softmax over scales.
    let mut d_raw = Array2::<F>::zeros((n, s_count));
    for b in 0..n {
        let dot: F = (0..s_count).map(|s| cache.weights[[b, s]] * d_w[[b, s]]).sum();
        for s in 0..s_count {
            d_raw[[b, s]] = cache.weights[[b, s]] * (d_w[[b, s]] - dot);
        }
    }
    let mut grads = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let f = &cache.scores[s];
        let (_, _, h, w) = f.dim();
        let mut d_up = d_fused.clone();
        for b in 0..n {
            d_up.index_axis_mut(Axis(0), b).mapv_inplace(|v| v * cache.weights[[b, s]]);
        }
        let mut d_f = resize_bilinear_backward(&d_up, h, w);
        let map = &cache.conv_maps[s];
        let mut d_map = Array4::<F>::zeros(map.dim());
        for b in 0..n {
            let g = d_raw[[b, s]];
            let sample = map.index_axis(Axis(0), b);
            let avg = g / F::lit(sample.len() as f64);
            let mut arg = 0;
            let mut best = F::neg_infinity();
            for (i, &v) in sample.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            let mut dm = d_map.index_axis_mut(Axis(0), b);
            dm.fill(avg);
            let flat = dm.as_slice_mut().expect("fresh array");
            flat[arg] += g;
        }
        d_f += &params.shared_conv.backward(f, &d_map);
        grads.push(d_f);
    }
    grads
}

impl<F: Real> Parameterized<F> for FusionParams<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.shared_conv.visit_params(&join(prefix, "shared_conv"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.shared_conv.visit_params_mut(&join(prefix, "shared_conv"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_scores(rng: &mut ChaCha8Rng, n: usize, c: usize, sizes: &[usize]) -> Vec<Array4<f64>> {
        sizes
            .iter()
            .map(|&s| Array4::from_shape_fn((n, c, s, s), |_| rng.random_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn pooled_score_examples() {
        let constant = Array4::from_elem((1, 1, 3, 3), 1.5);
        assert_eq!(pool_scores(&constant)[0], 3.0);
        let m = array![[[[0.0, 4.0], [0.0, 0.0]]]];
        assert_eq!(pool_scores(&m)[0], 5.0);
        let p = FusionParams::<f64>::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_scores(&mut rng, 2, 4, &[4]).remove(0);
        assert!(scale_score(&x, &p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let p = FusionParams::<f64>::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = random_scores(&mut rng, 1, 4, &[16, 8, 4, 2, 1]);
        let (out, _) = fuse(&scores, &p, (16, 16)).unwrap();
        assert!(out.weights.iter().all(|&w| (w - 0.2).abs() < 1e-12));
    }

    #[test]
    fn single_scale_passes_through() {
        let mut p = FusionParams::<f64>::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.init(&mut rng);
        let scores = random_scores(&mut rng, 2, 3, &[4]);
        let (out, _) = fuse(&scores, &p, (4, 4)).unwrap();
        assert!(out.weights.iter().all(|&w| w == 1.0));
        assert_eq!(out.fused_logits, scores[0]);
    }

    #[test]
    fn softmax_of_ln2_and_zero() {
        let w = softmax_rows(&array![[2f64.ln(), 0.0]]);
        assert!((w[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[[0, 1]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_pyramid_is_error() {
        let p = FusionParams::<f64>::new(2);
        assert!(matches!(fuse(&[], &p, (2, 2)), Err(Error::EmptyPyramid)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = FusionParams::<f64>::new(3);
        p.init(&mut rng);
        let scores = random_scores(&mut rng, 2, 3, &[8, 4, 2]);
        let proj = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &FusionParams<f64>, s: &[Array4<f64>]| (fuse(s, p, (8, 8)).unwrap().0.fused_logits * &proj).sum();
        let (_, cache) = fuse(&scores, &p, (8, 8)).unwrap();
        let d_scores = fuse_backward(&mut p, &cache, &proj);
        let h = 1e-6;
        for (s, idx) in [(0, [1, 2, 3, 4]), (1, [0, 1, 2, 3]), (2, [1, 0, 1, 1])] {
            let mut plus = scores.clone();
            plus[s][idx] += h;
            let mut minus = scores.clone();
            minus[s][idx] -= h;
            let fd = (loss(&p, &plus) - loss(&p, &minus)) / (2.0 * h);
            assert!((fd - d_scores[s][idx]).abs() < 1e-6, "scale {s}: {fd} vs {}", d_scores[s][idx]);
        }
        let an = p.shared_conv.weight.grad.as_slice().unwrap()[5];
        let mut plus = p.clone();
        plus.shared_conv.weight.value.as_slice_mut().unwrap()[5] += h;
        let mut minus = p.clone();
        minus.shared_conv.weight.value.as_slice_mut().unwrap()[5] -= h;
        let fd = (loss(&plus, &scores) - loss(&minus, &scores)) / (2.0 * h);
        assert!((fd - an).abs() < 1e-6, "{fd} vs {an}");
    }
}
