use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::param::join;
use super::{Param, Parameterized, Real};

/// Stride-1, same-padded 2D convolution over `(N, C, H, W)` tensors.
///
/// Implemented as im2col followed by a matrix product. Odd kernel sizes only.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl<F: Real> Conv2d<F> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            weight: Param::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// Fan-in scaled normal initialization (He et al.); bias starts at zero.
    pub fn init_fan_in<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        self.weight
            .value
            .mapv_inplace(|_| F::lit(normal.sample(rng)));
        if let Some(b) = &mut self.bias {
            b.value.fill(F::zero());
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn weight_matrix(&self) -> ArrayView2<'_, F> {
        self.weight
            .value
            .view()
            .into_shape_with_order((
                self.out_channels,
                self.in_channels * self.kernel * self.kernel,
            ))
            .expect("weight is contiguous")
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let x = x.as_standard_layout();
        let wmat = self.weight_matrix();
        let mut y = Array4::zeros((n, self.out_channels, h, w));
        let mut cols = Array2::zeros((c * self.kernel * self.kernel, h * w));
        for i in 0..n {
            let xs = x.index_axis(Axis(0), i);
            let mut out = y
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.out_channels, h * w))
                .expect("contiguous output");
            if self.kernel == 1 {
                let cols = xs.into_shape_with_order((c, h * w)).expect("contiguous");
                general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut out);
            } else {
                im2col(xs, self.kernel, &mut cols);
                general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut out);
            }
            if let Some(b) = &self.bias {
                for (mut row, &bv) in out.rows_mut().into_iter().zip(b.value.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients for input `x` and upstream `dy`, and
    /// returns the gradient with respect to `x`.
    pub fn backward(&mut self, x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let ckk = c * self.kernel * self.kernel;
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let wmat = self.weight_matrix().to_owned();
        let mut dw = Array2::<F>::zeros((self.out_channels, ckk));
        let mut dx = Array4::zeros((n, c, h, w));
        let mut cols = Array2::zeros((ckk, h * w));
        let mut dcols = Array2::zeros((ckk, h * w));
        let mut db = Array1::<F>::zeros(self.out_channels);
        for i in 0..n {
            let xs = x.index_axis(Axis(0), i);
            let dys = dy
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.out_channels, h * w))
                .expect("contiguous gradient");
            if self.bias.is_some() {
                db += &dys.sum_axis(Axis(1));
            }
            let mut dxs = dx.index_axis_mut(Axis(0), i);
            if self.kernel == 1 {
                let cols = xs.into_shape_with_order((c, h * w)).expect("contiguous");
                general_mat_mul(F::one(), &dys, &cols.t(), F::one(), &mut dw);
                let mut dxm = dxs.into_shape_with_order((c, h * w)).expect("contiguous");
                general_mat_mul(F::one(), &wmat.t(), &dys, F::zero(), &mut dxm);
            } else {
                im2col(xs, self.kernel, &mut cols);
                general_mat_mul(F::one(), &dys, &cols.t(), F::one(), &mut dw);
                general_mat_mul(F::one(), &wmat.t(), &dys, F::zero(), &mut dcols);
                col2im(&dcols, self.kernel, &mut dxs);
            }
        }
        let dw = dw
            .into_shape_with_order(self.weight.grad.raw_dim())
            .expect("same element count");
        self.weight.grad += &dw;
        if let Some(b) = &mut self.bias {
            b.grad += &db.into_dyn();
        }
        dx
    }
}

impl<F: Real> Parameterized<F> for Conv2d<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Valid output column range `[lo, hi)` for kernel offset `kk` with padding `pad`.
fn valid_range(len: usize, kk: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (len + pad).saturating_sub(kk).min(len);
    (lo, hi.max(lo))
}

fn im2col<F: Real>(x: ArrayView3<'_, F>, k: usize, cols: &mut Array2<F>) {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    cols.fill(F::zero());
    let src = x.as_slice().expect("standard layout input");
    let dst = cols.as_slice_mut().expect("standard layout buffer");
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(h, ki, pad);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(w, kj, pad);
                let row = (ci * k + ki) * k + kj;
                let out = &mut dst[row * hw..(row + 1) * hw];
                for y in ylo..yhi {
                    let sy = y + ki - pad;
                    let s0 = sy * w + xlo + kj - pad;
                    out[y * w + xlo..y * w + xhi].copy_from_slice(&plane[s0..s0 + (xhi - xlo)]);
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &Array2<F>, k: usize, dx: &mut ArrayViewMut3<'_, F>) {
    let (c, h, w) = dx.dim();
    let pad = k / 2;
    let hw = h * w;
    let src = cols.as_slice().expect("standard layout buffer");
    let dst = dx.as_slice_mut().expect("standard layout gradient");
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(h, ki, pad);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(w, kj, pad);
                let row = (ci * k + ki) * k + kj;
                let col = &src[row * hw..(row + 1) * hw];
                for y in ylo..yhi {
                    let sy = y + ki - pad;
                    let d0 = sy * w + xlo + kj - pad;
                    for (d, &s) in plane[d0..d0 + (xhi - xlo)]
                        .iter_mut()
                        .zip(&col[y * w + xlo..y * w + xhi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct (loop) convolution used as an independent reference.
    fn naive_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let k = conv.kernel();
        let p = (k / 2) as isize;
        let co = conv.out_channels();
        let wt = conv.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        Array4::from_shape_fn((n, co, h, w), |(b, o, y, xx)| {
            let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[[o]]);
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let sy = y as isize + ki as isize - p;
                        let sx = xx as isize + kj as isize - p;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += wt[[o, ci, ki, kj]] * x[[b, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &k in &[1usize, 3] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, true);
            conv.init_fan_in(&mut rng);
            conv.bias.as_mut().unwrap().value.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            let x = random4((2, 3, 5, 6), &mut rng);
            let got = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            let err = (&got - &want).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12, "k={k} err={err}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, true);
        conv.init_fan_in(&mut rng);
        let x = random4((2, 2, 4, 5), &mut rng);
        let proj = random4((2, 3, 4, 5), &mut rng);
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| (c.forward(x) * &proj).sum();
        let dx = conv.backward(&x, &proj);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 3, 4], [0, 1, 2, 2]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7, "dx {idx:?}: {fd} vs {}", dx[idx]);
        }
        for flat in [0usize, 7, 31, 53] {
            let analytic = conv.weight.grad.as_slice().unwrap()[flat];
            let mut cp = conv.clone();
            cp.weight.value.as_slice_mut().unwrap()[flat] += h;
            let mut cm = conv.clone();
            cm.weight.value.as_slice_mut().unwrap()[flat] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-7, "dw[{flat}]: {fd} vs {analytic}");
        }
        let db = conv.bias.as_ref().unwrap().grad[[1]];
        assert!((db - proj.index_axis(Axis(1), 1).sum()).abs() < 1e-12);
    }

    #[test]
    fn one_by_one_backward_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(3, 2, 1, false);
        conv.init_fan_in(&mut rng);
        let x = random4((1, 3, 2, 2), &mut rng);
        let dy = random4((1, 2, 2, 2), &mut rng);
        let dx = conv.backward(&x, &dy);
        let w = conv.weight.value.view().into_shape_with_order((2, 3)).unwrap();
        for ci in 0..3 {
            let want: f64 = (0..2).map(|o| w[[o, ci]] * dy[[0, o, 1, 0]]).sum();
            assert!((dx[[0, ci, 1, 0]] - want).abs() < 1e-12);
        }
    }
}
