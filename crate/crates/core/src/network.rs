//! The pyramid-input, pyramid-output backbone: builds the feature graph,
//! owns its parameters and runs forward and backward passes over it.

use ndarray::{concatenate, s, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{check_divisible, ScalePyramid};
use crate::error::{Error, Result};
use crate::graph::{build_pipo_graph, FeatureGraph, Op};
use crate::nn::{
    join,
    avg_pool2, avg_pool2_backward, resize_bilinear, resize_bilinear_backward, BlockCache, BlockKind,
    Conv2d, ConvBlock, Mode, Param, Parameterized, Real,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub scales: usize,
    pub channels: Vec<usize>,
    pub block_type: BlockKind,
    pub class_count: usize,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            scales: 5,
            channels: vec![64, 128, 256, 512, 512, 512, 256, 128, 64],
            block_type: BlockKind::Plain,
            class_count: 4,
            input_channels: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::Config("scales must be at least 1".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config(format!("class_count {} must be at least 2", self.class_count)));
        }
        if self.channels.len() != 2 * self.scales - 1 {
            return Err(Error::Config(format!(
                "channels has {} entries; {} scales need {}",
                self.channels.len(),
                self.scales,
                2 * self.scales - 1
            )));
        }
        Ok(())
    }
}

/// Parameter count of the default five-scale configuration as published for
/// the reference implementation. Our block layout does not reproduce it
/// exactly, so it is only compared to emit a warning.
pub const REFERENCE_PARAMETER_COUNT: usize = 28_270_986;

/// 2x2 average pooling repeated `scales - 1` times.
pub fn build_input_pyramid<F: Real>(input: &Array4<F>, scales: usize) -> Result<ScalePyramid<Array4<F>>> {
    let (_, _, h, w) = input.dim();
    check_divisible(h, w, scales)?;
    let mut levels = vec![input.clone()];
    for _ in 1..scales {
        let next = avg_pool2(levels.last().unwrap());
        levels.push(next);
    }
    ScalePyramid::new(levels)
}

#[derive(Clone, Debug)]
pub struct Network<F> {
    config: NetworkConfig,
    graph: FeatureGraph,
    blocks: Vec<ConvBlock<F>>,
    ups: Vec<Conv2d<F>>,
    heads: Vec<Conv2d<F>>,
}

/// Intermediate values kept by a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    values: Vec<Array4<F>>,
    blocks: Vec<Option<BlockCache<F>>>,
}

impl<F: Real> Network<F> {
    /// Builds the graph with zero convolution weights. Call
    /// [`Network::init`] for a trainable starting point.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let graph = build_pipo_graph(config.scales, config.input_channels, &config.channels)?;
        let blocks = graph
            .blocks()
            .iter()
            .map(|b| ConvBlock::new(b.in_channels, b.out_channels, config.block_type))
            .collect();
        let ups = graph
            .ups()
            .iter()
            .map(|u| Conv2d::new(u.in_channels, u.out_channels, 1, true))
            .collect();
        let heads = graph
            .outputs()
            .iter()
            .map(|&o| Conv2d::new(graph.node(o).channels, config.class_count, 1, true))
            .collect();
        Ok(Self {
            config,
            graph,
            blocks,
            ups,
            heads,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for b in &mut self.blocks {
            b.init_fan_in(rng);
        }
        for u in &mut self.ups {
            u.init_fan_in(rng);
        }
        for h in &mut self.heads {
            h.init_fan_in(rng);
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn graph(&self) -> &FeatureGraph {
        &self.graph
    }

    pub fn zero_heads(&mut self) {
        for h in &mut self.heads {
            h.visit_params_mut("", &mut |_, p| p.value.fill(F::zero()));
        }
    }

    /// Visits only the per-scale output heads.
    pub fn visit_head_params(&self, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (s, h) in self.heads.iter().enumerate() {
            h.visit_params(&format!("head.s{}", s + 1), f);
        }
    }

    fn check_input(&self, pyramid: &ScalePyramid<Array4<F>>) -> Result<()> {
        if pyramid.scales() != self.config.scales {
            return Err(Error::Contract(format!(
                "input pyramid has {} levels, network expects {}",
                pyramid.scales(),
                self.config.scales
            )));
        }
        let c = pyramid.level(0).dim().1;
        if c != self.config.input_channels {
            return Err(Error::Contract(format!(
                "input has {c} channels, network expects {}",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    fn eval_node(&self, id: usize, values: &[Option<Array4<F>>], pyramid: &ScalePyramid<Array4<F>>, mode: Mode) -> (Array4<F>, Option<BlockCache<F>>) {
        let node = self.graph.node(id);
        let arg = |k: usize| values[node.inputs[k]].as_ref().expect("input computed");
        match node.op {
            Op::Input => (pyramid.level(node.scale - 1).clone(), None),
            Op::Conv { block } => {
                let (y, cache) = self.blocks[block].forward(arg(0), mode);
                (y, Some(cache))
            }
            Op::Pool => (avg_pool2(arg(0)), None),
            Op::Upsample { conv } => {
                // A 1x1 convolution commutes with bilinear resampling, so it
                // runs at the coarse resolution.
                let x = arg(0);
                let (_, _, h, w) = x.dim();
                (resize_bilinear(&self.ups[conv].forward(x), 2 * h, 2 * w), None)
            }
            Op::Sum => (arg(0) + arg(1), None),
            Op::Concat => (
                concatenate(Axis(1), &[arg(0).view(), arg(1).view()]).expect("same spatial size"),
                None,
            ),
        }
    }

    /// Forward pass keeping every intermediate needed by
    /// [`Network::backward`].
    pub fn forward(&self, pyramid: &ScalePyramid<Array4<F>>, mode: Mode) -> Result<(ScalePyramid<Array4<F>>, ForwardCache<F>)> {
        self.check_input(pyramid)?;
        let n = self.graph.nodes().len();
        let mut values: Vec<Option<Array4<F>>> = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for id in 0..n {
            let (v, c) = self.eval_node(id, &values, pyramid, mode);
            values.push(Some(v));
            caches.push(c);
        }
        let values: Vec<Array4<F>> = values.into_iter().map(|v| v.expect("computed")).collect();
        let scores = self.apply_heads(|o| &values[o]);
        Ok((
            ScalePyramid::new(scores)?,
            ForwardCache {
                values,
                blocks: caches,
            },
        ))
    }

    /// Forward pass that frees intermediates as soon as they are consumed.
    pub fn predict(&self, pyramid: &ScalePyramid<Array4<F>>, mode: Mode) -> Result<ScalePyramid<Array4<F>>> {
        self.check_input(pyramid)?;
        let nodes = self.graph.nodes();
        let mut last_use = vec![usize::MAX; nodes.len()];
        for (id, node) in nodes.iter().enumerate() {
            for &i in &node.inputs {
                last_use[i] = id;
            }
        }
        for &o in self.graph.outputs() {
            last_use[o] = usize::MAX;
        }
        let mut values: Vec<Option<Array4<F>>> = Vec::with_capacity(nodes.len());
        for id in 0..nodes.len() {
            let (v, _) = self.eval_node(id, &values, pyramid, mode);
            values.push(Some(v));
            for &i in &nodes[id].inputs {
                if last_use[i] == id {
                    values[i] = None;
                }
            }
        }
        let scores = self.apply_heads(|o| values[o].as_ref().expect("output kept"));
        ScalePyramid::new(scores)
    }

    fn apply_heads<'a>(&self, value: impl Fn(usize) -> &'a Array4<F>) -> Vec<Array4<F>>
    where
        F: 'a,
    {
        self.graph
            .outputs()
            .iter()
            .zip(&self.heads)
            .map(|(&o, h)| h.forward(value(o)))
            .collect()
    }

    /// Folds batch statistics from a training forward pass into the running
    /// estimates of every normalization layer.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<F>) {
        for (id, node) in self.graph.nodes().iter().enumerate() {
            if let (Op::Conv { block }, Some(c)) = (node.op, &cache.blocks[id]) {
                self.blocks[block].update_running_stats(c);
            }
        }
    }

    /// Accumulates parameter gradients given the loss gradient for each
    /// score map. Entries may be `None` for scales that receive no gradient.
    pub fn backward(&mut self, cache: &ForwardCache<F>, d_scores: &[Option<Array4<F>>]) -> Result<()> {
        if d_scores.len() != self.heads.len() {
            return Err(Error::Contract(format!(
                "{} score gradients for {} scales",
                d_scores.len(),
                self.heads.len()
            )));
        }
        let n = self.graph.nodes().len();
        let mut grads: Vec<Option<Array4<F>>> = vec![None; n];
        let outputs = self.graph.outputs().to_vec();
        for ((&o, head), d) in outputs.iter().zip(&mut self.heads).zip(d_scores) {
            if let Some(d) = d {
                let g = head.backward(&cache.values[o], d);
                accumulate(&mut grads[o], g);
            }
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = self.graph.node(id).clone();
            match node.op {
                Op::Input => {}
                Op::Conv { block } => {
                    let x = &cache.values[node.inputs[0]];
                    let bc = cache.blocks[id].as_ref().expect("training cache");
                    let dx = self.blocks[block].backward(x, bc, &g);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Pool => accumulate(&mut grads[node.inputs[0]], avg_pool2_backward(&g)),
                Op::Upsample { conv } => {
                    let x = &cache.values[node.inputs[0]];
                    let (_, _, h, w) = x.dim();
                    let d_small = resize_bilinear_backward(&g, h, w);
                    let dx = self.ups[conv].backward(x, &d_small);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Sum => {
                    accumulate(&mut grads[node.inputs[1]], g.clone());
                    accumulate(&mut grads[node.inputs[0]], g);
                }
                Op::Concat => {
                    let ca = self.graph.node(node.inputs[0]).channels;
                    let ga = g.slice(s![.., ..ca, .., ..]).to_owned();
                    let gb = g.slice(s![.., ca.., .., ..]).to_owned();
                    accumulate(&mut grads[node.inputs[0]], ga);
                    accumulate(&mut grads[node.inputs[1]], gb);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Real>(slot: &mut Option<Array4<F>>, g: Array4<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<F: Real> Parameterized<F> for Network<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (spec, b) in self.graph.blocks().iter().zip(&self.blocks) {
            b.visit_params(&join(prefix, &spec.name), f);
        }
        for (spec, u) in self.graph.ups().iter().zip(&self.ups) {
            u.visit_params(&join(prefix, &spec.name), f);
        }
        for (s, h) in self.heads.iter().enumerate() {
            h.visit_params(&join(prefix, &format!("head.s{}", s + 1)), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (spec, b) in self.graph.blocks().iter().zip(&mut self.blocks) {
            b.visit_params_mut(&join(prefix, &spec.name), f);
        }
        for (spec, u) in self.graph.ups().iter().zip(&mut self.ups) {
            u.visit_params_mut(&join(prefix, &spec.name), f);
        }
        for (s, h) in self.heads.iter_mut().enumerate() {
            h.visit_params_mut(&join(prefix, &format!("head.s{}", s + 1)), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::Array1<F>)) {
        for (spec, b) in self.graph.blocks().iter().zip(&self.blocks) {
            b.visit_buffers(&join(prefix, &spec.name), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::Array1<F>)) {
        for (spec, b) in self.graph.blocks().iter().zip(&mut self.blocks) {
            b.visit_buffers_mut(&join(prefix, &spec.name), f);
        }
    }
}
