//! Backbone plus fusion, the unit that is trained, checkpointed and run.

use ndarray::Array4;
use rand::Rng;

use crate::datamodel::{ScalePyramid, SegmentationOutput};
use crate::error::Result;
use crate::fusion::{fuse, FusionParams};
use crate::network::{build_input_pyramid, Network, NetworkConfig};
use crate::nn::{join, Mode, Param, Parameterized, Real};

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub network: Network<F>,
    pub fusion: FusionParams<F>,
}

impl<F: Real> Model<F> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let fusion = FusionParams::new(config.class_count);
        Ok(Self {
            network: Network::new(config)?,
            fusion,
        })
    }

    /// Initializes the backbone; the fusion convolution stays at zero so all
    /// scales start equally weighted.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.network.init(rng);
    }

    pub fn config(&self) -> &NetworkConfig {
        self.network.config()
    }

    pub fn input_pyramid(&self, input: &Array4<F>) -> Result<ScalePyramid<Array4<F>>> {
        build_input_pyramid(input, self.config().scales)
    }

    /// Full forward pass without keeping training caches.
    pub fn segment(&self, input: &Array4<F>, mode: Mode) -> Result<SegmentationOutput<F>> {
        let (_, _, h, w) = input.dim();
        let scores = self.network.predict(&self.input_pyramid(input)?, mode)?;
        let (out, _) = fuse(scores.levels(), &self.fusion, (h, w))?;
        Ok(SegmentationOutput {
            score_pyramid: scores,
            fusion_weights: out.weights,
            fused_probs: out.fused_probs,
        })
    }
}

impl<F: Real> Parameterized<F> for Model<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.network.visit_params(&join(prefix, "net"), f);
        self.fusion.visit_params(&join(prefix, "fusion"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.network.visit_params_mut(&join(prefix, "net"), f);
        self.fusion.visit_params_mut(&join(prefix, "fusion"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::Array1<F>)) {
        self.network.visit_buffers(&join(prefix, "net"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::Array1<F>)) {
        self.network.visit_buffers_mut(&join(prefix, "net"), f);
    }
}
