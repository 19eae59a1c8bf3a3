use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::{Parameterized, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsPropConfig {
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { alpha: 0.99, eps: 1e-8 }
    }
}

/// Root-mean-square propagation: `v <- a v + (1 - a) g^2`,
/// `p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<F> {
    pub config: RmsPropConfig,
    /// Squared-gradient averages in parameter visit order, keyed by name.
    pub square_avg: Vec<(String, ArrayD<F>)>,
}

impl<F: Real> RmsProp<F> {
    pub fn new<M: Parameterized<F>>(config: RmsPropConfig, model: &M) -> Self {
        let mut square_avg = Vec::new();
        model.visit_params("", &mut |name, p| {
            square_avg.push((name.to_string(), ArrayD::zeros(p.value.raw_dim())))
        });
        Self { config, square_avg }
    }

    pub fn step<M: Parameterized<F>>(&mut self, model: &mut M, lr: f64) {
        let alpha = F::lit(self.config.alpha);
        let one_minus = F::lit(1.0 - self.config.alpha);
        let eps = F::lit(self.config.eps);
        let lr = F::lit(lr);
        let mut i = 0;
        let state = &mut self.square_avg;
        model.visit_params_mut("", &mut |name, p| {
            let (key, v) = &mut state[i];
            debug_assert_eq!(key, name);
            Zip::from(&mut p.value).and(v).and(&p.grad).for_each(|w, v, &g| {
                *v = alpha * *v + one_minus * g * g;
                *w -= lr * g / (v.sqrt() + eps);
            });
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Param};

    #[test]
    fn first_step_matches_hand_computation() {
        let mut conv = Conv2d::<f64>::new(1, 1, 1, true);
        conv.weight.value.fill(1.0);
        conv.weight.grad.fill(2.0);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &conv);
        opt.step(&mut conv, 0.1);
        // v = 0.01 * 4 = 0.04, step = 0.1 * 2 / (0.2 + 1e-8)
        let expected = 1.0 - 0.1 * 2.0 / (0.04f64.sqrt() + 1e-8);
        assert!((conv.weight.value[[0, 0, 0, 0]] - expected).abs() < 1e-12);
        let bias: &Param<f64> = conv.bias.as_ref().unwrap();
        assert_eq!(bias.value[[0]], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut conv = Conv2d::<f64>::new(2, 3, 3, true);
        conv.weight.value.fill(0.5);
        let before = conv.weight.value.clone();
        let mut opt = RmsProp::new(RmsPropConfig::default(), &conv);
        opt.step(&mut conv, 1.0);
        assert_eq!(conv.weight.value, before);
    }
}
