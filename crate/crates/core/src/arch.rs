//! Desk-scale topology (`tss`) and size (`sss`) search spaces.
//!
//! Both spaces take `3 x 16 x 16` inputs. A topology network is a 3x3 conv
//! stem, `num_cells` cells at `stem_channels` width with 2x2 average pooling
//! between consecutive cells, global average pooling and a linear head. A size
//! network is five conv3x3 + relu stages with the given widths, pooling after
//! stages 1 and 3, global pooling and a linear head.
//!
//! Cells are four-node DAGs; edge `i -> j` applies its operation to node `i`
//! and node `j` sums its incoming edges. Convolution edges are relu-conv.
//! Channel width is constant inside a cell, so `skip` is a plain identity.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::tensor::{ShapeError, Tensor};

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 16;
pub const DEFAULT_BATCH: usize = 16;
pub const SSS_WIDTHS: [usize; 8] = [8, 16, 24, 32, 40, 48, 56, 64];
pub const TSS_EDGES: usize = 6;
/// `(from, to)` for each edge slot in canonical order.
pub const EDGE_NODES: [(usize, usize); TSS_EDGES] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("unknown search space `{0}` (expected sss or tss)")]
    UnknownSpace(String),
    #[error("malformed spec `{text}` at byte {offset}: {reason}")]
    Malformed {
        text: String,
        offset: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SearchSpace {
    Tss,
    Sss,
}

impl SearchSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchSpace::Tss => "tss",
            SearchSpace::Sss => "sss",
        }
    }
}

impl fmt::Display for SearchSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SearchSpace {
    type Err = SpecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tss" => Ok(SearchSpace::Tss),
            "sss" => Ok(SearchSpace::Sss),
            other => Err(SpecError::UnknownSpace(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeOp {
    None,
    Skip,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
}

impl EdgeOp {
    pub const ALL: [EdgeOp; 5] = [
        EdgeOp::None,
        EdgeOp::Skip,
        EdgeOp::Conv1x1,
        EdgeOp::Conv3x3,
        EdgeOp::AvgPool3x3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeOp::None => "none",
            EdgeOp::Skip => "skip",
            EdgeOp::Conv1x1 => "conv1x1",
            EdgeOp::Conv3x3 => "conv3x3",
            EdgeOp::AvgPool3x3 => "avgpool3x3",
        }
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            EdgeOp::Conv1x1 => Some(1),
            EdgeOp::Conv3x3 => Some(3),
            _ => None,
        }
    }
}

impl FromStr for EdgeOp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        EdgeOp::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| format!("unknown edge operation `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellSpec {
    pub edge_ops: [EdgeOp; TSS_EDGES],
    pub stem_channels: usize,
    pub num_cells: usize,
    pub num_classes: usize,
}

impl CellSpec {
    pub fn new(edge_ops: [EdgeOp; TSS_EDGES]) -> Self {
        Self {
            edge_ops,
            stem_channels: 16,
            num_cells: 3,
            num_classes: 10,
        }
    }

    /// Conv edges on the longest node-0 to node-3 path, or `None` when the
    /// output is disconnected from the input.
    pub fn longest_conv_path(&self) -> Option<usize> {
        let mut best: [Option<usize>; 4] = [Some(0), None, None, None];
        for (slot, &(from, to)) in EDGE_NODES.iter().enumerate() {
            let op = self.edge_ops[slot];
            if op == EdgeOp::None {
                continue;
            }
            if let Some(d) = best[from] {
                let cand = d + usize::from(op.kernel().is_some());
                best[to] = Some(best[to].map_or(cand, |b| b.max(cand)));
            }
        }
        best[3]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SizeSpec {
    pub stage_widths: [usize; 5],
    pub num_classes: usize,
}

impl SizeSpec {
    pub fn new(stage_widths: [usize; 5]) -> Self {
        Self {
            stage_widths,
            num_classes: 10,
        }
    }
}

/// A point in one of the two search spaces.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ArchSpec {
    Tss(CellSpec),
    Sss(SizeSpec),
}

impl ArchSpec {
    pub fn space(&self) -> SearchSpace {
        match self {
            ArchSpec::Tss(_) => SearchSpace::Tss,
            ArchSpec::Sss(_) => SearchSpace::Sss,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ArchSpec::Tss(c) => c.num_classes,
            ArchSpec::Sss(s) => s.num_classes,
        }
    }

    pub fn with_num_classes(mut self, classes: usize) -> Self {
        match &mut self {
            ArchSpec::Tss(c) => c.num_classes = classes,
            ArchSpec::Sss(s) => s.num_classes = classes,
        }
        self
    }

    /// Parameterized layers on the longest input-to-output path, counting
    /// the stem and the head.
    pub fn effective_depth(&self) -> usize {
        match self {
            ArchSpec::Tss(c) => 2 + c.num_cells * c.longest_conv_path().unwrap_or(0),
            ArchSpec::Sss(_) => 6,
        }
    }

    /// Draw uniformly from `space`.
    pub fn sample<R: Rng + ?Sized>(space: SearchSpace, rng: &mut R) -> Self {
        match space {
            SearchSpace::Tss => {
                let ops = std::array::from_fn(|_| EdgeOp::ALL[rng.random_range(0..EdgeOp::ALL.len())]);
                ArchSpec::Tss(CellSpec::new(ops))
            }
            SearchSpace::Sss => {
                let widths = std::array::from_fn(|_| SSS_WIDTHS[rng.random_range(0..SSS_WIDTHS.len())]);
                ArchSpec::Sss(SizeSpec::new(widths))
            }
        }
    }
}

/// Deterministic sample from `space` for `seed`.
pub fn sample_spec(space: &str, seed: u64) -> Result<ArchSpec, SpecError> {
    let space: SearchSpace = space.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ArchSpec::sample(space, &mut rng))
}

/// Canonical text: `tss|op,op,op,op,op,op` or `sss|w,w,w,w,w`.
impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchSpec::Tss(c) => {
                let ops: Vec<&str> = c.edge_ops.iter().map(|o| o.as_str()).collect();
                write!(f, "tss|{}", ops.join(","))
            }
            ArchSpec::Sss(s) => {
                let ws: Vec<String> = s.stage_widths.iter().map(|w| w.to_string()).collect();
                write!(f, "sss|{}", ws.join(","))
            }
        }
    }
}

impl FromStr for ArchSpec {
    type Err = SpecError;

    fn from_str(text: &str) -> Result<Self, SpecError> {
        let malformed = |offset: usize, reason: String| SpecError::Malformed {
            text: text.to_string(),
            offset,
            reason,
        };
        let Some(bar) = text.find('|') else {
            return Err(malformed(0, "missing `|` after the space tag".into()));
        };
        let space: SearchSpace = text[..bar].parse()?;
        let mut items = Vec::new();
        let mut offset = bar + 1;
        for item in text[bar + 1..].split(',') {
            items.push((offset, item));
            offset += item.len() + 1;
        }
        match space {
            SearchSpace::Tss => {
                if items.len() != TSS_EDGES {
                    return Err(malformed(
                        bar + 1,
                        format!("expected {TSS_EDGES} edge ops, got {}", items.len()),
                    ));
                }
                let mut ops = [EdgeOp::None; TSS_EDGES];
                for (slot, (off, item)) in items.into_iter().enumerate() {
                    ops[slot] = item.parse().map_err(|e| malformed(off, e))?;
                }
                Ok(ArchSpec::Tss(CellSpec::new(ops)))
            }
            SearchSpace::Sss => {
                if items.len() != 5 {
                    return Err(malformed(bar + 1, format!("expected 5 widths, got {}", items.len())));
                }
                let mut widths = [0; 5];
                for (slot, (off, item)) in items.into_iter().enumerate() {
                    let w: usize = item
                        .parse()
                        .map_err(|_| malformed(off, format!("`{item}` is not a width")))?;
                    if !SSS_WIDTHS.contains(&w) {
                        return Err(malformed(off, format!("width {w} not in {SSS_WIDTHS:?}")));
                    }
                    widths[slot] = w;
                }
                Ok(ArchSpec::Sss(SizeSpec::new(widths)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { c_in: usize, c_out: usize, kernel: usize },
    Linear { f_in: usize, f_out: usize },
}

/// A layer owning trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamLayer {
    fn new<R: Rng + ?Sized>(name: String, kind: LayerKind, rng: &mut R) -> Self {
        let (shape, fan_in, out) = match kind {
            LayerKind::Conv { c_in, c_out, kernel } => {
                (vec![c_out, c_in, kernel, kernel], c_in * kernel * kernel, c_out)
            }
            LayerKind::Linear { f_in, f_out } => (vec![f_out, f_in], f_in, f_out),
        };
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            name,
            kind,
            weight: Tensor::randn(&shape, std, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// A concrete, initialized network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ArchSpec,
    pub init_seed: u64,
    /// Forward order: stem, body layers, head.
    pub layers: Vec<ParamLayer>,
}

/// Handles produced by one forward pass on a [`Tape`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Var,
    pub logits: Var,
    /// Feature map feeding the global pool (pre-head).
    pub features: Var,
    pub layers: Vec<LayerTrace>,
    /// Outputs of every relu, in forward order.
    pub relus: Vec<Var>,
    /// `(block input, block output)` per block: cells or size stages.
    pub blocks: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub input: Var,
    pub output: Var,
    pub weight: Var,
    pub bias: Var,
}

/// Build a network from `spec` with Kaiming-normal weights
/// (`std = sqrt(2 / fan_in)`) and zero biases.
pub fn instantiate(spec: &ArchSpec, init_seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut layers = Vec::new();
    match spec {
        ArchSpec::Tss(cell) => {
            let c = cell.stem_channels;
            layers.push(ParamLayer::new(
                "stem".into(),
                LayerKind::Conv {
                    c_in: INPUT_CHANNELS,
                    c_out: c,
                    kernel: 3,
                },
                &mut rng,
            ));
            for cell_idx in 0..cell.num_cells {
                for (slot, op) in cell.edge_ops.iter().enumerate() {
                    if let Some(kernel) = op.kernel() {
                        let (from, to) = EDGE_NODES[slot];
                        layers.push(ParamLayer::new(
                            format!("cell{cell_idx}.e{from}{to}.{}", op.as_str()),
                            LayerKind::Conv {
                                c_in: c,
                                c_out: c,
                                kernel,
                            },
                            &mut rng,
                        ));
                    }
                }
            }
            layers.push(ParamLayer::new(
                "head".into(),
                LayerKind::Linear {
                    f_in: c,
                    f_out: cell.num_classes,
                },
                &mut rng,
            ));
        }
        ArchSpec::Sss(size) => {
            let mut c_in = INPUT_CHANNELS;
            for (i, &w) in size.stage_widths.iter().enumerate() {
                layers.push(ParamLayer::new(
                    format!("stage{i}"),
                    LayerKind::Conv {
                        c_in,
                        c_out: w,
                        kernel: 3,
                    },
                    &mut rng,
                ));
                c_in = w;
            }
            layers.push(ParamLayer::new(
                "head".into(),
                LayerKind::Linear {
                    f_in: c_in,
                    f_out: size.num_classes,
                },
                &mut rng,
            ));
        }
    }
    Network {
        spec: spec.clone(),
        init_seed,
        layers,
    }
}

/// Whether a 2x2 average pool follows each size stage.
const SSS_POOL_AFTER: [bool; 5] = [false, true, false, true, false];

impl Network {
    pub fn num_params(&self) -> usize {
        count_params(self)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE]
    }

    /// Put `input` and every weight on `tape` and run the network forward.
    /// The input is a differentiable leaf so that input gradients exist.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<Trace, ShapeError> {
        self.forward_with(tape, input, |t| t.clone())
    }

    /// Like [`forward`](Self::forward) but with each weight replaced by
    /// `map(weight)` on the tape; the network itself is untouched.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        map: impl Fn(&Tensor) -> Tensor,
    ) -> Result<Trace, ShapeError> {
        self.forward_impl(tape, input, map, true)
    }

    /// Like [`forward`](Self::forward) but with weights and biases as
    /// constants: backward then yields activation gradients only, skipping
    /// the weight-gradient products.
    pub fn forward_frozen(&self, tape: &mut Tape, input: &Tensor) -> Result<Trace, ShapeError> {
        self.forward_impl(tape, input, |t| t.clone(), false)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        map: impl Fn(&Tensor) -> Tensor,
        trainable: bool,
    ) -> Result<Trace, ShapeError> {
        let [_, c, h, w] = self.input_shape(1);
        if input.rank() != 4 || input.shape()[1..] != [c, h, w] {
            return Err(ShapeError::new(
                "network",
                format!("input {:?} does not match (N, {c}, {h}, {w})", input.shape()),
            ));
        }
        let x = tape.param(input.clone());
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut relus = Vec::new();
        let mut blocks = Vec::new();
        let mut next = 0usize;

        let mut apply = |tape: &mut Tape, inp: Var, layers: &mut Vec<LayerTrace>| -> Result<Var, ShapeError> {
            let layer = &self.layers[next];
            next += 1;
            let (wv, bv) = if trainable {
                (tape.param(map(&layer.weight)), tape.param(layer.bias.clone()))
            } else {
                (tape.constant(map(&layer.weight)), tape.constant(layer.bias.clone()))
            };
            let out = match layer.kind {
                LayerKind::Conv { .. } => tape.conv2d(inp, wv, Some(bv))?,
                LayerKind::Linear { .. } => tape.linear(inp, wv, Some(bv))?,
            };
            layers.push(LayerTrace {
                input: inp,
                output: out,
                weight: wv,
                bias: bv,
            });
            Ok(out)
        };

        let features = match &self.spec {
            ArchSpec::Tss(cell) => {
                let mut cur = apply(tape, x, &mut layers)?;
                for cell_idx in 0..cell.num_cells {
                    if cell_idx > 0 {
                        cur = tape.avg_pool2(cur)?;
                    }
                    let block_in = cur;
                    let mut nodes: [Option<Var>; 4] = [Some(cur), None, None, None];
                    for (slot, &(from, to)) in EDGE_NODES.iter().enumerate() {
                        // every edge into `from` precedes the first edge out of it
                        let src = match nodes[from] {
                            Some(v) => v,
                            None => {
                                let zeros = tape.constant(Tensor::zeros(tape.value(block_in).shape()));
                                nodes[from] = Some(zeros);
                                zeros
                            }
                        };
                        let contrib = match cell.edge_ops[slot] {
                            EdgeOp::None => None,
                            EdgeOp::Skip => Some(src),
                            EdgeOp::AvgPool3x3 => Some(tape.avg_pool3(src)?),
                            EdgeOp::Conv1x1 | EdgeOp::Conv3x3 => {
                                let act = tape.relu(src);
                                relus.push(act);
                                Some(apply(tape, act, &mut layers)?)
                            }
                        };
                        if let Some(v) = contrib {
                            nodes[to] = Some(match nodes[to] {
                                Some(acc) => tape.add(acc, v)?,
                                None => v,
                            });
                        }
                    }
                    cur = match nodes[3] {
                        Some(v) => v,
                        None => tape.constant(Tensor::zeros(tape.value(block_in).shape())),
                    };
                    blocks.push((block_in, cur));
                }
                cur
            }
            ArchSpec::Sss(_) => {
                let mut cur = x;
                for pool in SSS_POOL_AFTER {
                    let block_in = cur;
                    let pre = apply(tape, cur, &mut layers)?;
                    cur = tape.relu(pre);
                    relus.push(cur);
                    if pool {
                        cur = tape.avg_pool2(cur)?;
                    }
                    blocks.push((block_in, cur));
                }
                cur
            }
        };
        let pooled = tape.global_avg_pool(features)?;
        let logits = apply(tape, pooled, &mut layers)?;
        Ok(Trace {
            input: x,
            logits,
            features,
            layers,
            relus,
            blocks,
        })
    }

    /// Forward pass returning only the pre-head feature map.
    pub fn features(&self, input: &Tensor) -> Result<Tensor, ShapeError> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, input)?;
        Ok(tape.value(trace.features).clone())
    }
}

/// Weight plus bias scalars over all layers.
pub fn count_params(network: &Network) -> usize {
    network.layers.iter().map(ParamLayer::num_params).sum()
}

/// FLOPs of one forward pass, counting a multiply-accumulate as 2 FLOPs.
/// Only convolutions and linear layers are counted; bias adds, pooling,
/// skips and sums are free.
pub fn count_flops(network: &Network, input_shape: &[usize]) -> Result<u64, ShapeError> {
    let [batch, c, h, w] = *input_shape else {
        return Err(ShapeError::new(
            "count_flops",
            format!("expected (N, C, H, W), got {input_shape:?}"),
        ));
    };
    if c != INPUT_CHANNELS || h != w || h % 4 != 0 {
        return Err(ShapeError::new(
            "count_flops",
            format!("input {input_shape:?} does not match the stem"),
        ));
    }
    let conv = |kind: LayerKind, side: usize| -> u64 {
        match kind {
            LayerKind::Conv { c_in, c_out, kernel } => 2 * (c_in * c_out * kernel * kernel * side * side) as u64,
            LayerKind::Linear { f_in, f_out } => 2 * (f_in * f_out) as u64,
        }
    };
    let mut total = 0u64;
    match &network.spec {
        ArchSpec::Tss(_) => {
            let mut side = h;
            let mut cell_idx: Option<usize> = None;
            for layer in &network.layers {
                if let Some(rest) = layer.name.strip_prefix("cell") {
                    let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
                    if cell_idx != Some(idx) {
                        side = h >> idx;
                        cell_idx = Some(idx);
                    }
                } else if layer.name == "head" {
                    side = 1;
                }
                total += conv(layer.kind, side);
            }
        }
        ArchSpec::Sss(_) => {
            let mut side = h;
            for (i, layer) in network.layers.iter().enumerate() {
                if i < 5 {
                    total += conv(layer.kind, side);
                    if SSS_POOL_AFTER[i] {
                        side /= 2;
                    }
                } else {
                    total += conv(layer.kind, 1);
                }
            }
        }
    }
    Ok(total * batch as u64)
}
