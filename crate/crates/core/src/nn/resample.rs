use ndarray::{Array2, Array4, ArrayView2};

use super::Real;

/// Linear interpolation taps along one axis, using half-pixel centers
/// (`align_corners = false`) with edge clamping.
#[derive(Clone, Debug)]
pub struct AxisInterp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl AxisInterp {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        assert!(in_len > 0 && out_len > 0, "empty axis");
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut w_hi = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            lo.push(i0);
            hi.push(i1);
            w_hi.push(src - i0 as f64);
        }
        Self { lo, hi, w_hi }
    }

    pub fn out_len(&self) -> usize {
        self.lo.len()
    }
}

/// Bilinear resize of every `(H, W)` plane of an `(N, C, H, W)` tensor.
pub fn resize_bilinear<F: Real>(x: &Array4<F>, out_h: usize, out_w: usize) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ih = AxisInterp::new(h, out_h);
    let iw = AxisInterp::new(w, out_w);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = Array4::<F>::zeros((n, c, out_h, out_w));
    let dst = out.as_slice_mut().expect("fresh array");
    let mut tmp = vec![F::zero(); h * out_w];
    let whi_w: Vec<F> = iw.w_hi.iter().map(|&v| F::lit(v)).collect();
    let whi_h: Vec<F> = ih.w_hi.iter().map(|&v| F::lit(v)).collect();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for j in 0..out_w {
                let t = whi_w[j];
                tmp[y * out_w + j] = row[iw.lo[j]] * (F::one() - t) + row[iw.hi[j]] * t;
            }
        }
        let o = &mut dst[p * out_h * out_w..(p + 1) * out_h * out_w];
        for i in 0..out_h {
            let t = whi_h[i];
            let (r0, r1) = (ih.lo[i] * out_w, ih.hi[i] * out_w);
            for j in 0..out_w {
                o[i * out_w + j] = tmp[r0 + j] * (F::one() - t) + tmp[r1 + j] * t;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps a gradient at the output size back to
/// the input size `(in_h, in_w)`.
pub fn resize_bilinear_backward<F: Real>(dy: &Array4<F>, in_h: usize, in_w: usize) -> Array4<F> {
    let (n, c, out_h, out_w) = dy.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let ih = AxisInterp::new(in_h, out_h);
    let iw = AxisInterp::new(in_w, out_w);
    let dy = dy.as_standard_layout();
    let src = dy.as_slice().expect("standard layout");
    let mut dx = Array4::<F>::zeros((n, c, in_h, in_w));
    let dst = dx.as_slice_mut().expect("fresh array");
    let whi_w: Vec<F> = iw.w_hi.iter().map(|&v| F::lit(v)).collect();
    let whi_h: Vec<F> = ih.w_hi.iter().map(|&v| F::lit(v)).collect();
    let mut tmp = vec![F::zero(); in_h * out_w];
    for p in 0..n * c {
        tmp.iter_mut().for_each(|v| *v = F::zero());
        let g = &src[p * out_h * out_w..(p + 1) * out_h * out_w];
        for i in 0..out_h {
            let t = whi_h[i];
            let (r0, r1) = (ih.lo[i] * out_w, ih.hi[i] * out_w);
            for j in 0..out_w {
                let v = g[i * out_w + j];
                tmp[r0 + j] += v * (F::one() - t);
                tmp[r1 + j] += v * t;
            }
        }
        let o = &mut dst[p * in_h * in_w..(p + 1) * in_h * in_w];
        for y in 0..in_h {
            for j in 0..out_w {
                let v = tmp[y * out_w + j];
                let t = whi_w[j];
                o[y * in_w + iw.lo[j]] += v * (F::one() - t);
                o[y * in_w + iw.hi[j]] += v * t;
            }
        }
    }
    dx
}

/// Nearest-neighbor resize of a 2D plane; output values are always a subset
/// of the input values.
pub fn resize_nearest<T: Copy>(plane: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = plane.dim();
    let pick = |i: usize, inl: usize, outl: usize| -> usize {
        let src = ((i as f64 + 0.5) * inl as f64 / outl as f64).floor() as usize;
        src.min(inl - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| plane[[pick(i, h, out_h), pick(j, w, out_w)]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn halving_averages_pixel_pairs() {
        let x = array![[[[0.0f64, 2.0], [2.0, 4.0]]]];
        let y = resize_bilinear(&x, 1, 1);
        assert!((y[[0, 0, 0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn upsampling_constant_is_constant() {
        let x = Array4::from_elem((1, 2, 3, 3), 1.5f64);
        let y = resize_bilinear(&x, 12, 6);
        assert!(y.iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((1, 2, 3, 5), |_| rng.random_range(-1.0f64..1.0));
        let g = Array4::from_shape_fn((1, 2, 8, 7), |_| rng.random_range(-1.0..1.0));
        let lhs = (resize_bilinear(&x, 8, 7) * &g).sum();
        let rhs = (resize_bilinear_backward(&g, 3, 5) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn nearest_keeps_value_set() {
        let plane = array![[0u8, 1, 1, 0], [2, 2, 0, 0], [0, 0, 1, 1], [1, 1, 0, 0]];
        let down = resize_nearest(plane.view(), 2, 2);
        assert!(down.iter().all(|v| [0u8, 1, 2].contains(v)));
        assert_eq!(resize_nearest(plane.view(), 4, 4), plane);
    }
}
