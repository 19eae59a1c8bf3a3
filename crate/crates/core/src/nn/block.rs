use ndarray::{Array1, Array4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::join;
use super::{BatchNorm2d, Conv2d, Mode, NormCache, Param, Parameterized, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Plain,
    Residual,
}

/// Two 3x3 convolutions, each followed by batch normalization and ReLU.
///
/// The residual variant adds the block input (projected by a 1x1 convolution
/// when the channel count changes) before the final ReLU. Convolutions that
/// feed a normalization layer carry no bias.
#[derive(Clone, Debug)]
pub struct ConvBlock<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    proj: Option<Conv2d<F>>,
    kind: BlockKind,
}

#[derive(Clone, Debug)]
pub struct BlockCache<F> {
    norm1: NormCache<F>,
    hidden: Array4<F>,
    norm2: NormCache<F>,
    out: Array4<F>,
}

fn relu_inplace<F: Real>(x: &mut Array4<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

fn relu_mask_inplace<F: Real>(grad: &mut Array4<F>, activated: &Array4<F>) {
    Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

impl<F: Real> ConvBlock<F> {
    pub fn new(in_channels: usize, out_channels: usize, kind: BlockKind) -> Self {
        let proj = (kind == BlockKind::Residual && in_channels != out_channels)
            .then(|| Conv2d::new(in_channels, out_channels, 1, true));
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, false),
            bn1: BatchNorm2d::new(out_channels),
            conv2: Conv2d::new(out_channels, out_channels, 3, false),
            bn2: BatchNorm2d::new(out_channels),
            proj,
            kind,
        }
    }

    pub fn init_fan_in<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.conv1.init_fan_in(rng);
        self.conv2.init_fan_in(rng);
        if let Some(p) = &mut self.proj {
            p.init_fan_in(rng);
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn forward(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, BlockCache<F>) {
        let a1 = self.conv1.forward(x);
        let (mut hidden, norm1) = self.bn1.forward(&a1, mode);
        drop(a1);
        relu_inplace(&mut hidden);
        let a2 = self.conv2.forward(&hidden);
        let (mut out, norm2) = self.bn2.forward(&a2, mode);
        drop(a2);
        if self.kind == BlockKind::Residual {
            match &self.proj {
                Some(p) => out += &p.forward(x),
                None => out += x,
            }
        }
        relu_inplace(&mut out);
        let cache = BlockCache {
            norm1,
            hidden,
            norm2,
            out: out.clone(),
        };
        (out, cache)
    }

    pub fn update_running_stats(&mut self, cache: &BlockCache<F>) {
        self.bn1.update_running_stats(&cache.norm1);
        self.bn2.update_running_stats(&cache.norm2);
    }

    pub fn backward(&mut self, x: &Array4<F>, cache: &BlockCache<F>, dout: &Array4<F>) -> Array4<F> {
        let mut dpre = dout.clone();
        relu_mask_inplace(&mut dpre, &cache.out);
        let da2 = self.bn2.backward(&cache.norm2, &dpre);
        let mut dhidden = self.conv2.backward(&cache.hidden, &da2);
        relu_mask_inplace(&mut dhidden, &cache.hidden);
        let da1 = self.bn1.backward(&cache.norm1, &dhidden);
        let mut dx = self.conv1.backward(x, &da1);
        if self.kind == BlockKind::Residual {
            match &mut self.proj {
                Some(p) => dx += &p.backward(x, &dpre),
                None => dx += &dpre,
            }
        }
        dx
    }
}

impl<F: Real> Parameterized<F> for ConvBlock<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        if let Some(p) = &self.proj {
            p.visit_params(&join(prefix, "proj"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_params_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_params_mut(&join(prefix, "bn2"), f);
        if let Some(p) = &mut self.proj {
            p.visit_params_mut(&join(prefix, "proj"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array1<F>)) {
        self.bn1.visit_buffers(&join(prefix, "bn1"), f);
        self.bn2.visit_buffers(&join(prefix, "bn2"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array1<F>)) {
        self.bn1.visit_buffers_mut(&join(prefix, "bn1"), f);
        self.bn2.visit_buffers_mut(&join(prefix, "bn2"), f);
    }
}
