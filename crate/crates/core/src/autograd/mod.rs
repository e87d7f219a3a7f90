//! Layer graphs and tape-based reverse mode.
//!
//! A network is described as an ordered list of [`LayerSpec`]s. Each layer
//! names its inputs; the reserved name [`INPUT`] refers to the network input
//! and an empty input list means "the previous layer". [`compile`] resolves
//! names, computes every intermediate shape and resolves full-depth kernels
//! against the depth reaching them. The last layer is the output and must
//! produce two channels (per-voxel class logits).

mod params;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::ops::{
    self, ConvSpec, NormCache, Padding, PoolIndices,
};
use crate::tensor::{Shape5, Tensor};
use crate::{Error, Result};

pub use params::{
    init_params, truncated_normal, LayerParams, NamedValues, ParamEntry, ParamStore, INIT_BIAS, INIT_SIGMA,
};

/// Name of the network input in [`LayerSpec::inputs`].
pub const INPUT: &str = "input";

/// Depth extent of a kernel: a fixed count or the whole incoming depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthExtent {
    Fixed(usize),
    FullDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { kh: usize, kw: usize, kd: DepthExtent, stride: usize, padding: Padding, c_out: usize },
    /// 2x2x2 stride-2 transposed convolution.
    UpConv { c_out: usize },
    InstanceNorm,
    Relu,
    /// 2x2x2 stride-2 max pooling.
    MaxPool,
    Concat,
    Add,
}

impl LayerKind {
    /// Stride-1 same-padded convolution.
    pub fn conv(kh: usize, kw: usize, kd: DepthExtent, c_out: usize) -> Self {
        LayerKind::Conv { kh, kw, kd, stride: 1, padding: Padding::Same, c_out }
    }

    /// 2x2x2 stride-2 down-sampling convolution.
    pub fn down_conv(c_out: usize) -> Self {
        LayerKind::Conv { kh: 2, kw: 2, kd: DepthExtent::Fixed(2), stride: 2, padding: Padding::Valid, c_out }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Concat | LayerKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Producer names; empty means the previous layer (or the input for the first).
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind, inputs: Vec::new() }
    }

    pub fn from(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// Resolved operation of a compiled node. Parameter-owning nodes carry their
/// slot index into [`ParamStore::entries`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOp {
    Input,
    Conv { spec: ConvSpec, slot: usize },
    UpConv { spec: ConvSpec, slot: usize },
    Norm { slot: usize },
    Relu,
    MaxPool,
    Concat,
    Add,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    pub shape: Shape5,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamSlotKind {
    Conv(ConvSpec),
    Norm(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: String,
    pub kind: ParamSlotKind,
}

/// Executable form of a [`LayerSpec`] list at a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub nodes: Vec<Node>,
    pub slots: Vec<ParamSlot>,
    pub input_shape: Shape5,
    id: u64,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

impl ModelGraph {
    pub fn output(&self) -> &Node {
        self.nodes.last().expect("compiled graphs have an output")
    }

    pub fn param_count(&self) -> usize {
        self.slots
            .iter()
            .map(|s| match &s.kind {
                ParamSlotKind::Conv(spec) => spec.param_count(),
                ParamSlotKind::Norm(c) => 2 * c,
            })
            .sum()
    }

    /// Same graph at a different batch size.
    pub fn with_batch(&self, n: usize) -> Result<ModelGraph> {
        if n == 0 {
            return Err(Error::InvalidShape("batch of zero".into()));
        }
        let mut g = self.clone();
        g.input_shape = g.input_shape.with_n(n);
        for node in &mut g.nodes {
            node.shape = node.shape.with_n(n);
        }
        Ok(g)
    }

    /// True when parameters created for `other` fit this graph.
    pub fn same_params_as(&self, other: &ModelGraph) -> bool {
        self.slots == other.slots
    }
}

fn graph_err(layer: &str, e: Error) -> Error {
    Error::Graph(format!("layer {layer}: {e}"))
}

/// Resolves names, shapes and full-depth kernels.
pub fn compile(spec: &[LayerSpec], input_shape: Shape5) -> Result<ModelGraph> {
    let g = resolve(spec, input_shape)?;
    let out = g.output();
    if out.shape.c != 2 {
        return Err(Error::Graph(format!("output layer {} has {} channels, expected 2", out.name, out.shape.c)));
    }
    Ok(g)
}

/// [`compile`] without the requirement on the output channel count.
pub(crate) fn resolve(spec: &[LayerSpec], input_shape: Shape5) -> Result<ModelGraph> {
    input_shape.validate()?;
    if spec.is_empty() {
        return Err(Error::Graph("empty layer list".into()));
    }
    let mut names: BTreeMap<&str, usize> = BTreeMap::new();
    names.insert(INPUT, 0);
    let mut nodes = vec![Node { name: INPUT.into(), op: NodeOp::Input, inputs: vec![], shape: input_shape }];
    let mut slots = Vec::new();

    for layer in spec {
        let name = layer.name.as_str();
        if names.contains_key(name) {
            return Err(Error::Graph(format!("duplicate layer name {name}")));
        }
        let inputs: Vec<usize> = if layer.inputs.is_empty() {
            vec![nodes.len() - 1]
        } else {
            layer
                .inputs
                .iter()
                .map(|i| {
                    names
                        .get(i.as_str())
                        .copied()
                        .ok_or_else(|| Error::Graph(format!("layer {name}: dangling input {i}")))
                })
                .collect::<Result<_>>()?
        };
        if inputs.len() != layer.kind.arity() {
            return Err(Error::Graph(format!(
                "layer {name}: expects {} inputs, got {}",
                layer.kind.arity(),
                inputs.len()
            )));
        }
        let in_shape = nodes[inputs[0]].shape;
        let (op, shape) = match layer.kind {
            LayerKind::Conv { kh, kw, kd, stride, padding, c_out } => {
                let kd = match kd {
                    DepthExtent::Fixed(k) => k,
                    DepthExtent::FullDepth => in_shape.d,
                };
                let conv = ConvSpec { kh, kw, kd, stride, c_in: in_shape.c, c_out, padding, transposed: false };
                let out = conv.output_shape(in_shape).map_err(|e| graph_err(name, e))?;
                slots.push(ParamSlot { layer: name.into(), kind: ParamSlotKind::Conv(conv) });
                (NodeOp::Conv { spec: conv, slot: slots.len() - 1 }, out)
            }
            LayerKind::UpConv { c_out } => {
                let conv = ConvSpec::upsample(in_shape.c, c_out);
                let out = conv.output_shape(in_shape).map_err(|e| graph_err(name, e))?;
                slots.push(ParamSlot { layer: name.into(), kind: ParamSlotKind::Conv(conv) });
                (NodeOp::UpConv { spec: conv, slot: slots.len() - 1 }, out)
            }
            LayerKind::InstanceNorm => {
                slots.push(ParamSlot { layer: name.into(), kind: ParamSlotKind::Norm(in_shape.c) });
                (NodeOp::Norm { slot: slots.len() - 1 }, in_shape)
            }
            LayerKind::Relu => (NodeOp::Relu, in_shape),
            LayerKind::MaxPool => {
                if in_shape.h < 2 || in_shape.w < 2 || in_shape.d < 2 {
                    return Err(Error::Graph(format!("layer {name}: pooling {in_shape} underflows")));
                }
                (NodeOp::MaxPool, Shape5 { h: in_shape.h / 2, w: in_shape.w / 2, d: in_shape.d / 2, ..in_shape })
            }
            LayerKind::Concat => {
                let other = nodes[inputs[1]].shape;
                if other.with_c(1) != in_shape.with_c(1) {
                    return Err(Error::Graph(format!(
                        "layer {name}: cannot concatenate {in_shape} and {other}"
                    )));
                }
                (NodeOp::Concat, in_shape.with_c(in_shape.c + other.c))
            }
            LayerKind::Add => {
                let other = nodes[inputs[1]].shape;
                if other != in_shape {
                    return Err(Error::Graph(format!("layer {name}: cannot add {in_shape} and {other}")));
                }
                (NodeOp::Add, in_shape)
            }
        };
        names.insert(name, nodes.len());
        nodes.push(Node { name: name.into(), op, inputs, shape });
    }
    Ok(ModelGraph { nodes, slots, input_shape, id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed) })
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    Pool(PoolIndices),
    Norm(NormCache),
}

/// Intermediates recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    outputs: Vec<Tensor>,
    saved: Vec<Saved>,
    graph_id: u64,
    version: u64,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("tape has the output")
    }

    /// Activation recorded for node `i`.
    pub fn activation(&self, i: usize) -> &Tensor {
        &self.outputs[i]
    }
}

fn check_params(g: &ModelGraph, params: &ParamStore) -> Result<()> {
    if params.entries.len() != g.slots.len() {
        return Err(Error::Graph(format!(
            "parameter store has {} entries, graph needs {}",
            params.entries.len(),
            g.slots.len()
        )));
    }
    for (entry, slot) in params.entries.iter().zip(&g.slots) {
        let fits = match (&entry.params, &slot.kind) {
            (LayerParams::Conv(p), ParamSlotKind::Conv(spec)) => p.check(spec).is_ok(),
            (LayerParams::Norm(p), ParamSlotKind::Norm(c)) => p.channels() == *c,
            _ => false,
        };
        if entry.layer != slot.layer || !fits {
            return Err(Error::Graph(format!("parameters for {} do not fit layer {}", entry.layer, slot.layer)));
        }
    }
    Ok(())
}

fn conv_params(params: &ParamStore, slot: usize) -> Result<&ops::ConvParams> {
    match &params.entries[slot].params {
        LayerParams::Conv(p) => Ok(p),
        LayerParams::Norm(_) => Err(Error::Graph(format!("slot {slot} is not a convolution"))),
    }
}

/// Runs the graph and records everything the backward pass needs.
pub fn forward(g: &ModelGraph, params: &ParamStore, x: &Tensor) -> Result<(Tensor, Tape)> {
    check_params(g, params)?;
    if x.shape() != g.input_shape {
        return Err(Error::ShapeMismatch(format!("input {} but graph compiled for {}", x.shape(), g.input_shape)));
    }
    x.ensure_finite("network input")?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(g.nodes.len());
    let mut saved = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let arg = |k: usize| &outputs[node.inputs[k]];
        let (out, aux) = match node.op {
            NodeOp::Input => (x.clone(), Saved::None),
            NodeOp::Conv { spec, slot } => (ops::conv3d_fwd(arg(0), &spec, conv_params(params, slot)?)?, Saved::None),
            NodeOp::UpConv { spec, slot } => {
                (ops::conv_transpose3d_fwd(arg(0), &spec, conv_params(params, slot)?)?, Saved::None)
            }
            NodeOp::Norm { slot } => {
                let LayerParams::Norm(p) = &params.entries[slot].params else {
                    return Err(Error::Graph(format!("slot {slot} is not a norm layer")));
                };
                let (y, cache) = ops::instance_norm_fwd(arg(0), p)?;
                (y, Saved::Norm(cache))
            }
            NodeOp::Relu => (ops::relu_fwd(arg(0)), Saved::None),
            NodeOp::MaxPool => {
                let (y, idx) = ops::maxpool3d_fwd(arg(0), 2, 2)?;
                (y, Saved::Pool(idx))
            }
            NodeOp::Concat => (ops::concat_channels_fwd(arg(0), arg(1))?, Saved::None),
            NodeOp::Add => (ops::add_fwd(arg(0), arg(1))?, Saved::None),
        };
        if out.shape() != node.shape {
            return Err(Error::Graph(format!(
                "layer {} produced {} but was compiled for {}",
                node.name,
                out.shape(),
                node.shape
            )));
        }
        out.ensure_finite(&node.name)?;
        outputs.push(out);
        saved.push(aux);
    }
    let logits = outputs.last().expect("non-empty").clone();
    Ok((logits, Tape { outputs, saved, graph_id: g.id, version: params.version }))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Reverse pass. Parameter gradients are zeroed first and then filled; the
/// returned tensor is the gradient with respect to the network input.
pub fn backward(g: &ModelGraph, params: &mut ParamStore, tape: &Tape, loss_grad: &Tensor) -> Result<Tensor> {
    check_params(g, params)?;
    if tape.graph_id != g.id || tape.outputs.len() != g.nodes.len() {
        return Err(Error::Graph("tape was recorded on a different graph".into()));
    }
    if tape.version != params.version {
        return Err(Error::Graph("stale tape: parameters changed after the forward pass".into()));
    }
    let out_shape = g.output().shape;
    if loss_grad.shape() != out_shape {
        return Err(Error::ShapeMismatch(format!("loss gradient {} vs output {out_shape}", loss_grad.shape())));
    }
    params.zero_grad();
    let mut grads: Vec<Option<Tensor>> = vec![None; g.nodes.len()];
    grads[g.nodes.len() - 1] = Some(loss_grad.clone());

    for (i, node) in g.nodes.iter().enumerate().rev() {
        let Some(gout) = grads[i].take() else { continue };
        let input = |k: usize| &tape.outputs[node.inputs[k]];
        match node.op {
            NodeOp::Input => {
                grads[i] = Some(gout);
            }
            NodeOp::Conv { spec, slot } | NodeOp::UpConv { spec, slot } => {
                let LayerParams::Conv(p) = &mut params.entries[slot].params else {
                    return Err(Error::Graph(format!("slot {slot} is not a convolution")));
                };
                let gx = if spec.transposed {
                    ops::conv_transpose3d_bwd(input(0), &spec, p, &gout)?
                } else {
                    ops::conv3d_bwd(input(0), &spec, p, &gout)?
                };
                accumulate(&mut grads[node.inputs[0]], gx)?;
            }
            NodeOp::Norm { slot } => {
                let LayerParams::Norm(p) = &mut params.entries[slot].params else {
                    return Err(Error::Graph(format!("slot {slot} is not a norm layer")));
                };
                let Saved::Norm(cache) = &tape.saved[i] else {
                    return Err(Error::Graph("tape lost norm statistics".into()));
                };
                let gx = ops::instance_norm_bwd(cache, p, &gout)?;
                accumulate(&mut grads[node.inputs[0]], gx)?;
            }
            NodeOp::Relu => {
                let gx = ops::relu_bwd(input(0), &gout)?;
                accumulate(&mut grads[node.inputs[0]], gx)?;
            }
            NodeOp::MaxPool => {
                let Saved::Pool(idx) = &tape.saved[i] else {
                    return Err(Error::Graph("tape lost pooling indices".into()));
                };
                let gx = ops::maxpool3d_bwd(idx, &gout)?;
                accumulate(&mut grads[node.inputs[0]], gx)?;
            }
            NodeOp::Concat => {
                let (ga, gb) = ops::concat_channels_bwd(&gout, input(0).shape().c)?;
                accumulate(&mut grads[node.inputs[0]], ga)?;
                accumulate(&mut grads[node.inputs[1]], gb)?;
            }
            NodeOp::Add => {
                accumulate(&mut grads[node.inputs[0]], gout.clone())?;
                accumulate(&mut grads[node.inputs[1]], gout)?;
            }
        }
    }
    match grads[0].take() {
        Some(gx) => Ok(gx),
        None => Tensor::zeros(g.input_shape),
    }
}
