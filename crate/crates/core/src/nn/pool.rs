use ndarray::Array4;

use super::Real;

/// 2x2 average pooling with stride 2. Spatial dims must be even.
pub fn avg_pool2<F: Real>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
    let quarter = F::lit(0.25);
    Array4::from_shape_fn((n, c, h / 2, w / 2), |(b, ch, i, j)| {
        let (y, xx) = (2 * i, 2 * j);
        (x[[b, ch, y, xx]] + x[[b, ch, y, xx + 1]] + x[[b, ch, y + 1, xx]] + x[[b, ch, y + 1, xx + 1]])
            * quarter
    })
}

pub fn avg_pool2_backward<F: Real>(dy: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = dy.dim();
    let quarter = F::lit(0.25);
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, y, xx)| {
        dy[[b, ch, y / 2, xx / 2]] * quarter
    })
}
