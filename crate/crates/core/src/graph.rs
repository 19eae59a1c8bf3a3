//! Feature graph of the pyramid network and its equal-convolutional-depth
//! check.
//!
//! Nodes are stored in topological order: every input of node `i` has an
//! index below `i`. A node's position `(s, j)` follows the usual grid
//! convention, where a feature at column `j` has passed through `j - 1`
//! convolution blocks.

use std::fmt;

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Pyramid input level at the node's scale.
    Input,
    /// Convolution block, indexing the network's block list.
    Conv { block: usize },
    /// 2x2 average pooling from the next finer scale.
    Pool,
    /// Bilinear x2 upsampling from the next coarser scale plus a 1x1
    /// channel-halving convolution, indexing the network's upsample list.
    Upsample { conv: usize },
    Sum,
    Concat,
}

impl Op {
    pub fn is_merge(&self) -> bool {
        matches!(self, Op::Sum | Op::Concat)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    /// Scale, 1 = full resolution.
    pub scale: usize,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub channels: usize,
}

/// A convolution block specification referenced by [`Op::Conv`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// An upsampling 1x1 convolution referenced by [`Op::Upsample`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureGraph {
    nodes: Vec<Node>,
    blocks: Vec<BlockSpec>,
    ups: Vec<UpSpec>,
    outputs: Vec<NodeId>,
}

impl FeatureGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn ups(&self) -> &[UpSpec] {
        &self.ups
    }

    /// Output node per scale, finest first.
    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn set_outputs(&mut self, outputs: Vec<NodeId>) {
        self.outputs = outputs;
    }

    pub fn input(&mut self, scale: usize, channels: usize) -> NodeId {
        self.push(format!("input.s{scale}"), scale, Op::Input, vec![], channels)
    }

    pub fn conv(&mut self, name: String, from: NodeId, out_channels: usize) -> NodeId {
        let block = self.blocks.len();
        let in_channels = self.nodes[from].channels;
        self.blocks.push(BlockSpec {
            name: name.clone(),
            in_channels,
            out_channels,
        });
        let scale = self.nodes[from].scale;
        self.push(name, scale, Op::Conv { block }, vec![from], out_channels)
    }

    pub fn pool(&mut self, from: NodeId) -> NodeId {
        let scale = self.nodes[from].scale + 1;
        let channels = self.nodes[from].channels;
        self.push(format!("pool.s{scale}"), scale, Op::Pool, vec![from], channels)
    }

    pub fn upsample(&mut self, from: NodeId, out_channels: usize) -> NodeId {
        let scale = self.nodes[from].scale - 1;
        let conv = self.ups.len();
        let name = format!("up.s{scale}");
        self.ups.push(UpSpec {
            name: name.clone(),
            in_channels: self.nodes[from].channels,
            out_channels,
        });
        self.push(name, scale, Op::Upsample { conv }, vec![from], out_channels)
    }

    pub fn sum(&mut self, name: String, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        if na.channels != nb.channels || na.scale != nb.scale {
            return Err(Error::Config(format!(
                "sum `{name}` joins {}ch@s{} with {}ch@s{}",
                na.channels, na.scale, nb.channels, nb.scale
            )));
        }
        let (scale, channels) = (na.scale, na.channels);
        Ok(self.push(name, scale, Op::Sum, vec![a, b], channels))
    }

    pub fn concat(&mut self, name: String, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        if na.scale != nb.scale {
            return Err(Error::Config(format!(
                "concat `{name}` joins scales {} and {}",
                na.scale, nb.scale
            )));
        }
        let (scale, channels) = (na.scale, na.channels + nb.channels);
        Ok(self.push(name, scale, Op::Concat, vec![a, b], channels))
    }

    fn push(&mut self, name: String, scale: usize, op: Op, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push(Node {
            name,
            scale,
            op,
            inputs,
            channels,
        });
        self.nodes.len() - 1
    }

    /// Depths of every node, failing at the first merge whose branches
    /// disagree.
    pub fn conv_depths(&self) -> Result<Vec<usize>> {
        let mut depth = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let d = match node.op {
                Op::Input => 0,
                Op::Conv { .. } => depth[node.inputs[0]] + 1,
                Op::Pool | Op::Upsample { .. } => depth[node.inputs[0]],
                Op::Sum | Op::Concat => {
                    let ds: Vec<usize> = node.inputs.iter().map(|&i| depth[i]).collect();
                    if ds.iter().any(|&d| d != ds[0]) {
                        return Err(Error::EcdViolation {
                            node: node.name.clone(),
                            depths: ds,
                        });
                    }
                    ds[0]
                }
            };
            depth.push(d);
        }
        Ok(depth)
    }

    /// Every merge node paired with the depths of its incoming branches.
    pub fn merge_depths(&self) -> Vec<(NodeId, Vec<usize>)> {
        let mut depth: Vec<usize> = Vec::with_capacity(self.nodes.len());
        let mut merges = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let ins: Vec<usize> = node.inputs.iter().map(|&i| depth[i]).collect();
            let d = match node.op {
                Op::Input => 0,
                Op::Conv { .. } => ins[0] + 1,
                Op::Pool | Op::Upsample { .. } => ins[0],
                Op::Sum | Op::Concat => {
                    merges.push((id, ins.clone()));
                    ins.iter().copied().max().unwrap_or(0)
                }
            };
            depth.push(d);
        }
        merges
    }
}

/// Number of convolution blocks on every path from an input to `node`.
pub fn conv_depth(graph: &FeatureGraph, node: NodeId) -> Result<usize> {
    let n = &graph.nodes()[node];
    match n.op {
        Op::Input => Ok(0),
        Op::Conv { .. } => Ok(conv_depth(graph, n.inputs[0])? + 1),
        Op::Pool | Op::Upsample { .. } => conv_depth(graph, n.inputs[0]),
        Op::Sum | Op::Concat => {
            let ds = n
                .inputs
                .iter()
                .map(|&i| conv_depth(graph, i))
                .collect::<Result<Vec<_>>>()?;
            if ds.iter().any(|&d| d != ds[0]) {
                return Err(Error::EcdViolation {
                    node: n.name.clone(),
                    depths: ds,
                });
            }
            Ok(ds[0])
        }
    }
}

impl fmt::Display for FeatureGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, n) in self.nodes.iter().enumerate() {
            writeln!(f, "{id:3} {:<14} s{} {:>4}ch {:?} <- {:?}", n.name, n.scale, n.channels, n.op, n.inputs)?;
        }
        Ok(())
    }
}

/// Builds the pyramid-input, pyramid-output graph for `scales` levels.
///
/// `channels` has `2 * scales - 1` entries: encoder widths for scales
/// `1..=S` followed by decoder widths for scales `S-1..=1`.
pub fn build_pipo_graph(scales: usize, input_channels: usize, channels: &[usize]) -> Result<FeatureGraph> {
    if scales == 0 {
        return Err(Error::Config("at least one scale is required".into()));
    }
    if channels.len() != 2 * scales - 1 {
        return Err(Error::Config(format!(
            "{} channel widths given; {scales} scales need {}",
            channels.len(),
            2 * scales - 1
        )));
    }
    if channels.contains(&0) || input_channels == 0 {
        return Err(Error::Config("channel widths must be positive".into()));
    }
    let big_s = scales;
    let base = channels[0];
    let mut g = FeatureGraph::new();
    let block = |s: usize, d: usize| format!("block.s{s}.d{d}");

    // main[s] = Conv(f_{s,s}), the encoder output at scale s.
    let mut main: Vec<NodeId> = Vec::with_capacity(big_s);
    for s in 1..=big_s {
        let input = g.input(s, input_channels);
        let merged = if s == 1 {
            input
        } else {
            let mut x = input;
            for d in 1..s {
                let width = if d == s - 1 { channels[s - 2] } else { base };
                x = g.conv(block(s, d), x, width);
            }
            let pooled = g.pool(main[s - 2]);
            g.sum(format!("f{s},{s}"), x, pooled)?
        };
        main.push(g.conv(block(s, s), merged, channels[s - 1]));
    }

    // dec[s] for s = S..1, finest last.
    let mut dec: Vec<Option<NodeId>> = vec![None; big_s + 1];
    dec[big_s] = Some(main[big_s - 1]);
    for s in (1..big_s).rev() {
        let coarse = dec[s + 1].expect("decoded coarser scale");
        let up_width = g.node(coarse).channels.div_ceil(2);
        let up = g.upsample(coarse, up_width);
        let mut skip = main[s - 1];
        let extra = 2 * big_s - 2 * s - 1;
        for k in 1..=extra {
            let width = if k == extra { channels[s - 1] } else { base };
            skip = g.conv(block(s, s + k), skip, width);
        }
        let j = 2 * big_s - s;
        let cat = g.concat(format!("f{s},{j}"), up, skip)?;
        dec[s] = Some(g.conv(block(s, j), cat, channels[2 * big_s - s - 1]));
    }

    // Pad every output to depth 2S - 1.
    let mut outputs = Vec::with_capacity(big_s);
    for (s, d) in dec.iter().enumerate().skip(1) {
        let mut x = d.expect("decoded");
        let width = g.node(x).channels;
        let start = if s == big_s { big_s } else { 2 * big_s - s };
        for depth in start + 1..2 * big_s {
            x = g.conv(block(s, depth), x, width);
        }
        outputs.push(x);
    }
    g.set_outputs(outputs);
    g.conv_depths()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WIDTHS: [usize; 9] = [64, 128, 256, 512, 512, 512, 256, 128, 64];

    fn widths(s: usize) -> Vec<usize> {
        let mut w: Vec<usize> = (0..s).map(|i| 8 << i).collect();
        w.extend((0..s - 1).rev().map(|i| 8 << i));
        w
    }

    #[test]
    fn default_graph_has_equal_depth_merges() {
        let g = build_pipo_graph(5, 3, &WIDTHS).unwrap();
        for (id, ds) in g.merge_depths() {
            assert!(ds.iter().all(|&d| d == ds[0]), "{}", g.node(id).name);
        }
        assert_eq!(g.blocks().len(), 45);
        let depths = g.conv_depths().unwrap();
        for &o in g.outputs() {
            assert_eq!(depths[o], 9);
        }
    }

    #[test]
    fn encoder_merge_at_scale_three_has_depth_two() {
        let g = build_pipo_graph(5, 3, &WIDTHS).unwrap();
        let id = g.nodes().iter().position(|n| n.name == "f3,3").unwrap();
        let node = g.node(id);
        assert_eq!(node.op, Op::Sum);
        for &i in &node.inputs {
            assert_eq!(conv_depth(&g, i).unwrap(), 2);
        }
        assert_eq!(conv_depth(&g, 0).unwrap(), 0);
    }

    #[test]
    fn decoder_concats_sit_on_anti_diagonal() {
        for s_total in 2..=5 {
            let g = build_pipo_graph(s_total, 3, &widths(s_total)).unwrap();
            let concats: Vec<&Node> = g.nodes().iter().filter(|n| n.op == Op::Concat).collect();
            assert_eq!(concats.len(), s_total - 1);
            for n in concats {
                let j: usize = n.name.split(',').nth(1).unwrap().parse().unwrap();
                assert_eq!(n.scale + j, 2 * s_total);
            }
        }
    }

    #[test]
    fn single_scale_collapses_to_one_block() {
        let g = build_pipo_graph(1, 3, &[16]).unwrap();
        assert_eq!(g.blocks().len(), 1);
        assert!(g.nodes().iter().all(|n| !n.op.is_merge()));
        assert_eq!(g.outputs().len(), 1);
    }

    #[test]
    fn mismatched_branches_are_reported() {
        let mut g = FeatureGraph::new();
        let a = g.input(1, 4);
        let b = g.conv("b".into(), a, 4);
        let m = g.sum("bad".into(), a, b).unwrap();
        let err = conv_depth(&g, m).unwrap_err();
        assert!(matches!(err, Error::EcdViolation { ref node, ref depths } if node == "bad" && depths == &vec![0, 1]));
        assert!(g.conv_depths().is_err());
    }

    #[test]
    fn wrong_width_count_is_config_error() {
        assert!(matches!(build_pipo_graph(5, 3, &[64, 128]), Err(Error::Config(_))));
    }
}
