//! Compute graphs with reverse-mode automatic differentiation.
//!
//! A [`ComputeGraph`] is a topologically ordered list of nodes over a named
//! parameter store. The operator set is the minimum needed for small
//! convnets and margin/feature losses: dense, conv2d (stride 1 or 2, zero
//! padding), relu, 2x2 max-pool, global average pool, softmax, elementwise
//! add/clip/tanh, nearest-neighbour 2x upsample, scale-and-shift, L1 mean
//! distance and weighted scalar combine.
//!
//! Forward evaluation is generic over f32/f64; the f64 path exists so the
//! finite-difference oracle in [`ComputeGraph::grad_check`] stays
//! trustworthy at 1e-3 relative error while the production path is f32.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node inside its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter inside the graph's store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Operator kinds. Attributes that never receive gradients (strides,
/// clip bounds, combine weights) live inline.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input,
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    Conv2d {
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2x2,
    GlobalAvgPool,
    /// Softmax along the last axis.
    Softmax,
    Add,
    Clip {
        lo: f32,
        hi: f32,
    },
    /// Mean absolute difference of two equal-shape tensors, scalar output.
    L1MeanDistance,
    /// Weighted sum of scalar inputs.
    Combine {
        weights: Vec<f32>,
    },
    Tanh,
    ScaleShift {
        scale: f32,
        shift: f32,
    },
    /// Nearest-neighbour 2x spatial upsample.
    Upsample2x,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Dense { .. } => "dense",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2x2 => "max_pool_2x2",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Softmax => "softmax",
            OpKind::Add => "add",
            OpKind::Clip { .. } => "clip",
            OpKind::L1MeanDistance => "l1_mean_distance",
            OpKind::Combine { .. } => "combine",
            OpKind::Tanh => "tanh",
            OpKind::ScaleShift { .. } => "scale_shift",
            OpKind::Upsample2x => "upsample_2x",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub out_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
}

/// Immutable node list plus a named parameter store. Parameters may be
/// updated between steps via [`ComputeGraph::apply_param_update`] or
/// [`ComputeGraph::set_param`]; the topology never changes.
#[derive(Debug, Clone)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    params: Vec<Param>,
    input_shape: Vec<usize>,
}

/// Cached forward values for every node of one evaluation.
#[derive(Debug, Clone)]
pub struct Activations {
    values: Vec<Tensor>,
}

impl Activations {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn output(&self) -> &Tensor {
        self.values.last().expect("graph has nodes")
    }
}

/// Gradients of a scalar objective with respect to every parameter and
/// the graph input.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub params: BTreeMap<String, Tensor>,
    pub input: Tensor,
}

impl GradResult {
    /// Accumulate `scale * other` into this result.
    pub fn scaled_add(&mut self, scale: f32, other: &GradResult) -> Result<()> {
        self.input.scaled_add(scale, &other.input)?;
        for (name, grad) in &other.params {
            match self.params.get_mut(name) {
                Some(acc) => acc.scaled_add(scale, grad)?,
                None => {
                    let mut g = Tensor::zeros(grad.shape());
                    g.scaled_add(scale, grad)?;
                    self.params.insert(name.clone(), g);
                }
            }
        }
        Ok(())
    }
}

// ── Element abstraction: forward kernels run in f32 or f64 ─────────────

pub(crate) trait Elem:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
{
    fn zero() -> Self;
    fn from_f32(v: f32) -> Self;
    fn from_usize(v: usize) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
}

impl Elem for f32 {
    fn zero() -> Self {
        0.0
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_usize(v: usize) -> Self {
        v as f32
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
}

impl Elem for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_usize(v: usize) -> Self {
        v as f64
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

// ── Builder ─────────────────────────────────────────────────────────────

/// Constructs a graph node by node; shapes are inferred and validated as
/// nodes are added, so a finished graph cannot contain shape errors.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<Param>,
    input_shape: Vec<usize>,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> Result<Self> {
        crate::tensor::check_shape(input_shape)?;
        Ok(GraphBuilder {
            nodes: vec![Node {
                op: OpKind::Input,
                inputs: vec![],
                out_shape: input_shape.to_vec(),
            }],
            params: Vec::new(),
            input_shape: input_shape.to_vec(),
        })
    }

    /// Resume building on top of an existing graph (parameters are copied).
    /// Returns the builder and the id of the old output node.
    pub fn from_graph(graph: &ComputeGraph) -> (Self, NodeId) {
        let out = graph.output_node();
        (
            GraphBuilder {
                nodes: graph.nodes.clone(),
                params: graph.params.clone(),
                input_shape: graph.input_shape.clone(),
            },
            out,
        )
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    /// Inferred output shape of an already-added node.
    pub fn node_shape(&self, node: NodeId) -> Result<&[usize]> {
        self.shape_of(node)
    }

    fn shape_of(&self, node: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(node.0)
            .map(|n| n.out_shape.as_slice())
            .ok_or_else(|| Error::InvalidGraph(format!("node {} does not exist", node.0)))
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, out_shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            out_shape,
        });
        id
    }

    fn add_param(&mut self, name: String, value: Tensor) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidGraph(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name, value });
        Ok(id)
    }

    pub fn dense(
        &mut self,
        input: NodeId,
        name: &str,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<NodeId> {
        let in_shape = self.shape_of(input)?.to_vec();
        if in_shape.len() != 1 {
            return Err(Error::InvalidGraph(format!(
                "dense '{name}' needs a 1-d input, got shape {in_shape:?}"
            )));
        }
        let n_in = in_shape[0];
        if weight.shape().len() != 2 || weight.shape()[1] != n_in {
            return Err(Error::shape(
                format!("dense '{name}' weight"),
                &[weight.shape().first().copied().unwrap_or(0), n_in],
                weight.shape(),
            ));
        }
        let n_out = weight.shape()[0];
        if bias.shape() != [n_out] {
            return Err(Error::shape(
                format!("dense '{name}' bias"),
                &[n_out],
                bias.shape(),
            ));
        }
        let w = self.add_param(format!("{name}.weight"), weight)?;
        let b = self.add_param(format!("{name}.bias"), bias)?;
        Ok(self.push(OpKind::Dense { weight: w, bias: b }, vec![input], vec![n_out]))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        name: &str,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let in_shape = self.shape_of(input)?.to_vec();
        if in_shape.len() != 3 {
            return Err(Error::InvalidGraph(format!(
                "conv2d '{name}' needs a CHW input, got shape {in_shape:?}"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidGraph(format!(
                "conv2d '{name}': stride must be 1 or 2, got {stride}"
            )));
        }
        let (c_in, h, w) = chw(&in_shape);
        let ws = weight.shape().to_vec();
        if ws.len() != 4 || ws[1] != c_in {
            return Err(Error::shape(
                format!("conv2d '{name}' weight"),
                &[0, c_in, 0, 0],
                &ws,
            ));
        }
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if bias.shape() != [c_out] {
            return Err(Error::shape(
                format!("conv2d '{name}' bias"),
                &[c_out],
                bias.shape(),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::InvalidGraph(format!(
                "conv2d '{name}': kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let wp = self.add_param(format!("{name}.weight"), weight)?;
        let bp = self.add_param(format!("{name}.bias"), bias)?;
        Ok(self.push(
            OpKind::Conv2d {
                weight: wp,
                bias: bp,
                stride,
                padding,
            },
            vec![input],
            vec![c_out, oh, ow],
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input)?.to_vec();
        Ok(self.push(OpKind::Relu, vec![input], s))
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input)?.to_vec();
        Ok(self.push(OpKind::Tanh, vec![input], s))
    }

    pub fn clip(&mut self, input: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::InvalidGraph(format!(
                "clip bounds [{lo}, {hi}] are degenerate"
            )));
        }
        let s = self.shape_of(input)?.to_vec();
        Ok(self.push(OpKind::Clip { lo, hi }, vec![input], s))
    }

    pub fn scale_shift(&mut self, input: NodeId, scale: f32, shift: f32) -> Result<NodeId> {
        let s = self.shape_of(input)?.to_vec();
        Ok(self.push(OpKind::ScaleShift { scale, shift }, vec![input], s))
    }

    pub fn max_pool_2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input)?.to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidGraph(format!(
                "max_pool_2x2 needs a CHW input, got shape {s:?}"
            )));
        }
        let (c, h, w) = chw(&s);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidGraph(format!(
                "max_pool_2x2 requires even spatial dims, got {h}x{w}"
            )));
        }
        Ok(self.push(OpKind::MaxPool2x2, vec![input], vec![c, h / 2, w / 2]))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input)?.to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidGraph(format!(
                "global_avg_pool needs a CHW input, got shape {s:?}"
            )));
        }
        Ok(self.push(OpKind::GlobalAvgPool, vec![input], vec![s[0]]))
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input)?.to_vec();
        Ok(self.push(OpKind::Softmax, vec![input], s))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a)?.to_vec();
        let sb = self.shape_of(b)?.to_vec();
        if sa != sb {
            return Err(Error::shape("add", &sa, &sb));
        }
        Ok(self.push(OpKind::Add, vec![a, b], sa))
    }

    pub fn l1_mean_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a)?.to_vec();
        let sb = self.shape_of(b)?.to_vec();
        if sa != sb {
            return Err(Error::shape("l1_mean_distance", &sa, &sb));
        }
        Ok(self.push(OpKind::L1MeanDistance, vec![a, b], vec![1]))
    }

    pub fn combine(&mut self, inputs: &[NodeId], weights: &[f32]) -> Result<NodeId> {
        if inputs.is_empty() || inputs.len() != weights.len() {
            return Err(Error::InvalidGraph(format!(
                "combine needs matching non-empty inputs/weights, got {}/{}",
                inputs.len(),
                weights.len()
            )));
        }
        for &n in inputs {
            let s = self.shape_of(n)?;
            if s != [1] {
                return Err(Error::shape("combine input", &[1], s));
            }
        }
        Ok(self.push(
            OpKind::Combine {
                weights: weights.to_vec(),
            },
            inputs.to_vec(),
            vec![1],
        ))
    }

    pub fn upsample_2x(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input)?.to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidGraph(format!(
                "upsample_2x needs a CHW input, got shape {s:?}"
            )));
        }
        let (c, h, w) = chw(&s);
        Ok(self.push(OpKind::Upsample2x, vec![input], vec![c, 2 * h, 2 * w]))
    }

    pub fn finish(self) -> ComputeGraph {
        ComputeGraph {
            nodes: self.nodes,
            params: self.params,
            input_shape: self.input_shape,
        }
    }
}

// ── Evaluation ──────────────────────────────────────────────────────────

impl ComputeGraph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes.last().expect("graph has nodes").out_shape
    }

    pub fn output_node(&self) -> NodeId {
        NodeId(self.nodes.len() - 1)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count_elems(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidGraph(format!("no parameter named '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                format!("parameter '{name}'"),
                p.value.shape(),
                value.shape(),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// `theta += scale * grad` for every parameter present in `grads`.
    /// Descent passes a negative scale, ascent a positive one.
    pub fn apply_param_update(&mut self, grads: &GradResult, scale: f32) -> Result<()> {
        for p in &mut self.params {
            if let Some(g) = grads.params.get(&p.name) {
                p.value.scaled_add(scale, g)?;
            }
        }
        Ok(())
    }

    /// Evaluate all nodes in topological order, returning the output value.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.evaluate(input)?.output().clone())
    }

    /// Evaluate all nodes, keeping every intermediate for a later backward pass.
    pub fn evaluate(&self, input: &Tensor) -> Result<Activations> {
        if input.shape() != self.input_shape {
            return Err(Error::shape("graph input", &self.input_shape, input.shape()));
        }
        let params: Vec<&[f32]> = self.params.iter().map(|p| p.value.data()).collect();
        let mut values: Vec<Vec<f32>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let out = self.eval_node::<f32>(node, input.data(), &params, &values);
            values.push(out);
        }
        Ok(Activations {
            values: self
                .nodes
                .iter()
                .zip(values)
                .map(|(n, v)| Tensor::new(n.out_shape.clone(), v).expect("kernel output shape"))
                .collect(),
        })
    }

    fn eval_node<T: Elem>(
        &self,
        node: &Node,
        input: &[T],
        params: &[&[T]],
        values: &[Vec<T>],
    ) -> Vec<T> {
        let val = |n: NodeId| values[n.0].as_slice();
        match &node.op {
            OpKind::Input => input.to_vec(),
            OpKind::Dense { weight, bias } => {
                let x = val(node.inputs[0]);
                let w = params[weight.0];
                let b = params[bias.0];
                let n_out = node.out_shape[0];
                let n_in = x.len();
                let mut y = Vec::with_capacity(n_out);
                for o in 0..n_out {
                    let mut acc = b[o];
                    for (wi, xi) in w[o * n_in..(o + 1) * n_in].iter().zip(x.iter()) {
                        acc = acc + *wi * *xi;
                    }
                    y.push(acc);
                }
                y
            }
            OpKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => conv2d_forward(
                val(node.inputs[0]),
                chw(&self.nodes[node.inputs[0].0].out_shape),
                params[weight.0],
                params[bias.0],
                chw(&node.out_shape),
                self.kernel_dims(*weight),
                *stride,
                *padding,
            ),
            OpKind::Relu => val(node.inputs[0])
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            OpKind::Tanh => val(node.inputs[0]).iter().map(|&v| v.tanh()).collect(),
            OpKind::Clip { lo, hi } => {
                let lo = T::from_f32(*lo);
                let hi = T::from_f32(*hi);
                val(node.inputs[0])
                    .iter()
                    .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
                    .collect()
            }
            OpKind::ScaleShift { scale, shift } => {
                let a = T::from_f32(*scale);
                let b = T::from_f32(*shift);
                val(node.inputs[0]).iter().map(|&v| a * v + b).collect()
            }
            OpKind::MaxPool2x2 => max_pool_forward(
                val(node.inputs[0]),
                chw(&self.nodes[node.inputs[0].0].out_shape),
            ),
            OpKind::GlobalAvgPool => {
                let (c, h, w) = chw(&self.nodes[node.inputs[0].0].out_shape);
                let x = val(node.inputs[0]);
                let denom = T::from_usize(h * w);
                (0..c)
                    .map(|ci| {
                        let mut acc = T::zero();
                        for &v in &x[ci * h * w..(ci + 1) * h * w] {
                            acc = acc + v;
                        }
                        acc / denom
                    })
                    .collect()
            }
            OpKind::Softmax => {
                let x = val(node.inputs[0]);
                let last = *node.out_shape.last().unwrap();
                let mut y = Vec::with_capacity(x.len());
                for row in x.chunks(last) {
                    let mut m = row[0];
                    for &v in row {
                        if v > m {
                            m = v;
                        }
                    }
                    let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
                    let mut sum = T::zero();
                    for &e in &exps {
                        sum = sum + e;
                    }
                    y.extend(exps.iter().map(|&e| e / sum));
                }
                y
            }
            OpKind::Add => {
                let a = val(node.inputs[0]);
                let b = val(node.inputs[1]);
                a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
            }
            OpKind::L1MeanDistance => {
                let a = val(node.inputs[0]);
                let b = val(node.inputs[1]);
                let mut acc = T::zero();
                for (&x, &y) in a.iter().zip(b.iter()) {
                    acc = acc + (x - y).abs();
                }
                vec![acc / T::from_usize(a.len())]
            }
            OpKind::Combine { weights } => {
                let mut acc = T::zero();
                for (&n, &w) in node.inputs.iter().zip(weights.iter()) {
                    acc = acc + T::from_f32(w) * val(n)[0];
                }
                vec![acc]
            }
            OpKind::Upsample2x => {
                let (c, h, w) = chw(&self.nodes[node.inputs[0].0].out_shape);
                let x = val(node.inputs[0]);
                let mut y = Vec::with_capacity(c * 4 * h * w);
                for ci in 0..c {
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            y.push(x[(ci * h + oy / 2) * w + ox / 2]);
                        }
                    }
                }
                y
            }
        }
    }

    fn kernel_dims(&self, weight: ParamId) -> (usize, usize) {
        let s = self.params[weight.0].value.shape();
        (s[2], s[3])
    }

    /// Reverse-mode gradients of the graph output against `output_grad`.
    pub fn backward(&self, acts: &Activations, output_grad: &Tensor) -> Result<GradResult> {
        self.backward_from(acts, self.output_node(), output_grad)
    }

    /// Reverse-mode gradients seeded at an arbitrary node, for objectives
    /// that hang off an intermediate activation (e.g. a feature tap).
    pub fn backward_from(
        &self,
        acts: &Activations,
        from: NodeId,
        output_grad: &Tensor,
    ) -> Result<GradResult> {
        let seed_node = self
            .nodes
            .get(from.0)
            .ok_or_else(|| Error::InvalidGraph(format!("node {} does not exist", from.0)))?;
        if output_grad.shape() != seed_node.out_shape {
            return Err(Error::shape(
                format!("output_grad at node {} ({})", from.0, seed_node.op.name()),
                &seed_node.out_shape,
                output_grad.shape(),
            ));
        }
        if acts.values.len() != self.nodes.len() {
            return Err(Error::InvalidGraph(
                "activations do not belong to this graph".into(),
            ));
        }

        let mut node_grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<Vec<f32>>> = vec![None; self.params.len()];
        node_grads[from.0] = Some(output_grad.data().to_vec());

        for i in (0..=from.0).rev() {
            let g = match node_grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[i].op, OpKind::Input) {
                node_grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, acts, &mut node_grads, &mut param_grads);
        }

        let input = match node_grads[0].take() {
            Some(g) => Tensor::new(self.input_shape.clone(), g).expect("input grad shape"),
            None => Tensor::zeros(&self.input_shape),
        };
        let mut params = BTreeMap::new();
        for (p, g) in self.params.iter().zip(param_grads.into_iter()) {
            if let Some(g) = g {
                params.insert(
                    p.name.clone(),
                    Tensor::new(p.value.shape().to_vec(), g).expect("param grad shape"),
                );
            }
        }
        Ok(GradResult { params, input })
    }

    fn backprop_node(
        &self,
        index: usize,
        g: &[f32],
        acts: &Activations,
        node_grads: &mut [Option<Vec<f32>>],
        param_grads: &mut [Option<Vec<f32>>],
    ) {
        let node = &self.nodes[index];
        match &node.op {
            OpKind::Input => {}
            OpKind::Dense { weight, bias } => {
                let x = acts.value(node.inputs[0]).data();
                let w = self.params[weight.0].value.data();
                let n_out = node.out_shape[0];
                let n_in = x.len();
                let mut dw = vec![0.0f32; n_out * n_in];
                for o in 0..n_out {
                    let go = g[o];
                    for (dwi, xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x.iter()) {
                        *dwi += go * xi;
                    }
                }
                accumulate_into(&mut param_grads[weight.0], dw);
                accumulate_into(&mut param_grads[bias.0], g.to_vec());
                let mut dx = vec![0.0f32; n_in];
                for o in 0..n_out {
                    let go = g[o];
                    for (dxi, wi) in dx.iter_mut().zip(w[o * n_in..(o + 1) * n_in].iter()) {
                        *dxi += go * wi;
                    }
                }
                accumulate_into(&mut node_grads[node.inputs[0].0], dx);
            }
            OpKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let in_id = node.inputs[0];
                let x = acts.value(in_id).data();
                let (ci, h, w) = chw(&self.nodes[in_id.0].out_shape);
                let (kh, kw) = self.kernel_dims(*weight);
                let (co, oh, ow) = chw(&node.out_shape);
                let wgt = self.params[weight.0].value.data();
                let mut dx = vec![0.0f32; ci * h * w];
                let mut dw = vec![0.0f32; co * ci * kh * kw];
                let mut db = vec![0.0f32; co];
                for c_out in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(c_out * oh + oy) * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            db[c_out] += gv;
                            for c_in in 0..ci {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let iy = iy as usize;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let ix = ix as usize;
                                        let widx = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                                        dw[widx] += gv * x[(c_in * h + iy) * w + ix];
                                        dx[(c_in * h + iy) * w + ix] += gv * wgt[widx];
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate_into(&mut param_grads[weight.0], dw);
                accumulate_into(&mut param_grads[bias.0], db);
                accumulate_into(&mut node_grads[in_id.0], dx);
            }
            OpKind::Relu => {
                let x = acts.value(node.inputs[0]).data();
                let dx: Vec<f32> = x
                    .iter()
                    .zip(g.iter())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                accumulate_into(&mut node_grads[node.inputs[0].0], dx);
            }
            OpKind::Tanh => {
                let y = acts.value(NodeId(index)).data();
                let dx: Vec<f32> = y
                    .iter()
                    .zip(g.iter())
                    .map(|(&yi, &gi)| gi * (1.0 - yi * yi))
                    .collect();
                accumulate_into(&mut node_grads[node.inputs[0].0], dx);
            }
            OpKind::Clip { lo, hi } => {
                // gradient 1 strictly inside (lo, hi); 0 outside and at the boundary
                let x = acts.value(node.inputs[0]).data();
                let dx: Vec<f32> = x
                    .iter()
                    .zip(g.iter())
                    .map(|(&xi, &gi)| if xi > *lo && xi < *hi { gi } else { 0.0 })
                    .collect();
                accumulate_into(&mut node_grads[node.inputs[0].0], dx);
            }
            OpKind::ScaleShift { scale, .. } => {
                let dx: Vec<f32> = g.iter().map(|&gi| gi * scale).collect();
                accumulate_into(&mut node_grads[node.inputs[0].0], dx);
            }
            OpKind::MaxPool2x2 => {
                let in_id = node.inputs[0];
                let x = acts.value(in_id).data();
                let (c, h, w) = chw(&self.nodes[in_id.0].out_shape);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0f32; x.len()];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            // first maximum in scan order wins ties
                            let mut best = (2 * oy, 2 * ox);
                            let mut bv = x[(ci * h + 2 * oy) * w + 2 * ox];
                            for (dy, dxo) in [(0usize, 1usize), (1, 0), (1, 1)] {
                                let (iy, ix) = (2 * oy + dy, 2 * ox + dxo);
                                let v = x[(ci * h + iy) * w + ix];
                                if v > bv {
                                    bv = v;
                                    best = (iy, ix);
                                }
                            }
                            dx[(ci * h + best.0) * w + best.1] += g[(ci * oh + oy) * ow + ox];
                        }
                    }
                }
                accumulate_into(&mut node_grads[in_id.0], dx);
            }
            OpKind::GlobalAvgPool => {
                let in_id = node.inputs[0];
                let (c, h, w) = chw(&self.nodes[in_id.0].out_shape);
                let denom = (h * w) as f32;
                let mut dx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    let gv = g[ci] / denom;
                    for v in &mut dx[ci * h * w..(ci + 1) * h * w] {
                        *v = gv;
                    }
                }
                accumulate_into(&mut node_grads[in_id.0], dx);
            }
            OpKind::Softmax => {
                let y = acts.value(NodeId(index)).data();
                let last = *node.out_shape.last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(last).zip(g.chunks(last)) {
                    let dot: f32 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr.iter()).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                accumulate_into(&mut node_grads[node.inputs[0].0], dx);
            }
            OpKind::Add => {
                accumulate_into(&mut node_grads[node.inputs[0].0], g.to_vec());
                accumulate_into(&mut node_grads[node.inputs[1].0], g.to_vec());
            }
            OpKind::L1MeanDistance => {
                let a = acts.value(node.inputs[0]).data();
                let b = acts.value(node.inputs[1]).data();
                let scale = g[0] / a.len() as f32;
                let da: Vec<f32> = a
                    .iter()
                    .zip(b.iter())
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let db: Vec<f32> = da.iter().map(|&v| -v).collect();
                accumulate_into(&mut node_grads[node.inputs[0].0], da);
                accumulate_into(&mut node_grads[node.inputs[1].0], db);
            }
            OpKind::Combine { weights } => {
                for (&n, &w) in node.inputs.iter().zip(weights.iter()) {
                    accumulate_into(&mut node_grads[n.0], vec![g[0] * w]);
                }
            }
            OpKind::Upsample2x => {
                let in_id = node.inputs[0];
                let (c, h, w) = chw(&self.nodes[in_id.0].out_shape);
                let mut dx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            dx[(ci * h + oy / 2) * w + ox / 2] +=
                                g[(ci * 2 * h + oy) * 2 * w + ox];
                        }
                    }
                }
                accumulate_into(&mut node_grads[in_id.0], dx);
            }
        }
    }

    fn eval_f64(&self, input: &[f64], params: &[Vec<f64>]) -> f64 {
        let param_refs: Vec<&[f64]> = params.iter().map(|p| p.as_slice()).collect();
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let out = self.eval_node::<f64>(node, input, &param_refs, &values);
            values.push(out);
        }
        values.last().unwrap()[0]
    }

    /// Maximum relative error between reverse-mode gradients and a central
    /// finite-difference oracle (evaluated in f64) over every parameter
    /// element and every input element. Requires a scalar output.
    pub fn grad_check(&self, input: &Tensor, step: f64) -> Result<f64> {
        if self.output_shape() != [1] {
            return Err(Error::InvalidArgument(format!(
                "grad_check requires scalar output, graph produces {:?}",
                self.output_shape()
            )));
        }
        let acts = self.evaluate(input)?;
        let grads = self.backward(&acts, &Tensor::scalar(1.0))?;

        let mut params64: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|p| p.value.data().iter().map(|&v| v as f64).collect())
            .collect();
        let mut input64: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();

        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let mut worst: f64 = 0.0;

        for (pi, p) in self.params.iter().enumerate() {
            let rg = grads.params.get(&p.name);
            for e in 0..p.value.len() {
                let saved = params64[pi][e];
                params64[pi][e] = saved + step;
                let up = self.eval_f64(&input64, &params64);
                params64[pi][e] = saved - step;
                let dn = self.eval_f64(&input64, &params64);
                params64[pi][e] = saved;
                let fd = (up - dn) / (2.0 * step);
                let an = rg.map_or(0.0, |t| t.data()[e] as f64);
                worst = worst.max(rel(fd, an));
            }
        }
        for e in 0..input64.len() {
            let saved = input64[e];
            input64[e] = saved + step;
            let up = self.eval_f64(&input64, &params64);
            input64[e] = saved - step;
            let dn = self.eval_f64(&input64, &params64);
            input64[e] = saved;
            let fd = (up - dn) / (2.0 * step);
            worst = worst.max(rel(fd, grads.input.data()[e] as f64));
        }
        Ok(worst)
    }
}

fn accumulate_into(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Elem>(
    x: &[T],
    (ci, h, w): (usize, usize, usize),
    wgt: &[T],
    bias: &[T],
    (co, oh, ow): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(co * oh * ow);
    for c_out in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[c_out];
                for c_in in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_base = (c_in * h + iy as usize) * w;
                        let w_base = ((c_out * ci + c_in) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc + wgt[w_base + kx] * x[row_base + ix as usize];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn max_pool_forward<T: Elem>(x: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[(ci * h + 2 * oy) * w + 2 * ox];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let v = x[(ci * h + 2 * oy + dy) * w + 2 * ox + dx];
                    if v > best {
                        best = v;
                    }
                }
                out.push(best);
            }
        }
    }
    out
}
