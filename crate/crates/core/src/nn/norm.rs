use ndarray::{Array1, Array4};

use super::param::join;
use super::{Mode, Param, Parameterized, Real};

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub eps: f64,
    pub momentum: f64,
}

/// What [`BatchNorm2d::backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
    mode: Mode,
    batch_mean: Array1<F>,
    batch_var_unbiased: Array1<F>,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], F::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, NormCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch norm channel mismatch");
        let hw = h * w;
        let m = n * hw;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let eps = F::lit(self.eps);

        let (mean, var_biased, var_unbiased) = match mode {
            Mode::Train => {
                let mut mean = Array1::<F>::zeros(c);
                let mut var = Array1::<F>::zeros(c);
                for ch in 0..c {
                    let mut s = F::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        s += xs[off..off + hw].iter().copied().sum::<F>();
                    }
                    let mu = s / F::lit(m as f64);
                    let mut ss = F::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        ss += xs[off..off + hw]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<F>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / F::lit(m as f64);
                }
                let unbiased = if m > 1 {
                    var.mapv(|v| v * F::lit(m as f64 / (m as f64 - 1.0)))
                } else {
                    var.clone()
                };
                (mean, var, unbiased)
            }
            Mode::Eval => (
                self.running_mean.clone(),
                self.running_var.clone(),
                self.running_var.clone(),
            ),
        };

        let inv_std = var_biased.mapv(|v| F::one() / (v + eps).sqrt());
        let mut xhat = Array4::<F>::zeros((n, c, h, w));
        let mut y = Array4::<F>::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().expect("fresh array");
            let ys = y.as_slice_mut().expect("fresh array");
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let (g, be) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
                    for i in off..off + hw {
                        let v = (xs[i] - mu) * is;
                        xh[i] = v;
                        ys[i] = g * v + be;
                    }
                }
            }
        }
        (
            y,
            NormCache {
                xhat,
                inv_std,
                mode,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
            },
        )
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, cache: &NormCache<F>) {
        if cache.mode != Mode::Train {
            return;
        }
        let mo = F::lit(self.momentum);
        let keep = F::one() - mo;
        self.running_mean
            .zip_mut_with(&cache.batch_mean, |r, &b| *r = keep * *r + mo * b);
        self.running_var
            .zip_mut_with(&cache.batch_var_unbiased, |r, &b| *r = keep * *r + mo * b);
    }

    pub fn backward(&mut self, cache: &NormCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = dy.dim();
        let hw = h * w;
        let m = F::lit((n * hw) as f64);
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh array");
        for ch in 0..c {
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    sum_dy += dys[i];
                    sum_dy_xhat += dys[i] * xh[i];
                }
            }
            self.gamma.grad[[ch]] += sum_dy_xhat;
            self.beta.grad[[ch]] += sum_dy;
            let g = self.gamma.value[[ch]];
            let is = cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let k = g * is / m;
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dxs[i] = k * (m * dys[i] - sum_dy - xh[i] * sum_dy_xhat);
                        }
                    }
                }
                Mode::Eval => {
                    let k = g * is;
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dxs[i] = k * dys[i];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<F: Real> Parameterized<F> for BatchNorm2d<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array1<F>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array1<F>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
