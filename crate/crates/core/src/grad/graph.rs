//! Computation graph: eager tape of primitive ops with named leaves and
//! named outputs.
//!
//! A graph is built once per forward pass (models are tiny, so rebuild cost
//! is negligible), evaluated against leaf bindings, and differentiated in
//! reverse. Construction validates shapes eagerly; evaluation validates the
//! bindings. Both `evaluate` and `gradient` are pure: identical inputs give
//! bitwise-identical outputs.

use std::collections::HashMap;

use crate::grad::tensor::{strides, Tensor};
use crate::{Error, Result};

/// Handle to a node inside one [`Graph`]. Ids from different graphs must not
/// be mixed; indices are validated on use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf { name: String },
    Const(Tensor),
    Conv2d { stride: usize, padding: usize },
    Dense,
    MaxPool2,
    Relu,
    Sigmoid,
    Ln,
    SoftmaxLast,
    Add,
    Mul,
    Affine { mul: f32, add: f32 },
    SqNorm,
    Mean,
    L2Norm,
    MinDistCols,
    ProjectCols,
    Rot90 { quarter_turns: u8 },
    ClampSt { lo: f32, hi: f32 },
    EmbedPatch { row: usize, col: usize },
    SliceBands { keep: Vec<usize> },
    NegLogSigmoid,
    BceLogit { target: f32, fp_weight: f32 },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "const",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense => "dense",
            Op::MaxPool2 => "max_pool2",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Ln => "ln",
            Op::SoftmaxLast => "softmax_last",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::SqNorm => "sq_norm",
            Op::Mean => "mean",
            Op::L2Norm => "l2_norm",
            Op::MinDistCols => "min_dist_cols",
            Op::ProjectCols => "project_cols",
            Op::Rot90 { .. } => "rot90",
            Op::ClampSt { .. } => "clamp_st",
            Op::EmbedPatch { .. } => "embed_patch",
            Op::SliceBands { .. } => "slice_bands",
            Op::NegLogSigmoid => "neg_log_sigmoid",
            Op::BceLogit { .. } => "bce_logit",
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// Leaf bindings for evaluation: leaf name → tensor.
pub type Bindings<'a> = HashMap<&'a str, &'a Tensor>;

#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    leaves: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, shape });
        id
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::graph(format!("node id {} out of range", id.0)))
    }

    fn shape_of(&self, id: NodeId) -> Result<&[usize]> {
        Ok(self.node(id)?.shape.as_slice())
    }

    /// Declare a named leaf that must be bound at evaluation time.
    pub fn leaf(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        if self.leaves.iter().any(|(n, _)| n == name) {
            return Err(Error::graph(format!("duplicate leaf name '{name}'")));
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
            },
            vec![],
            shape,
        );
        self.leaves.push((name.to_string(), id));
        Ok(id)
    }

    /// Embed a constant tensor into the graph.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), vec![], shape)
    }

    /// 2-D convolution with zero padding. Input `[H, W, Cin]`, weight
    /// `[kh, kw, Cin, Cout]`, bias `[Cout]`, output `[Ho, Wo, Cout]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xs = self.shape_of(input)?.to_vec();
        let ws = self.shape_of(weight)?.to_vec();
        let bs = self.shape_of(bias)?.to_vec();
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "conv2d expects input [H,W,Cin], weight [kh,kw,Cin,Cout], bias [Cout]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be >= 1".to_string()));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        if bs[0] != cout {
            return Err(Error::shape(format!(
                "conv2d bias length {} != out channels {cout}",
                bs[0]
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(self.push(
            Op::Conv2d { stride, padding },
            vec![input, weight, bias],
            vec![ho, wo, cout],
        ))
    }

    /// Affine layer. The input is read in row-major flattened order; weight
    /// `[out, in]`, bias `[out]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let n: usize = self.shape_of(input)?.iter().product();
        let ws = self.shape_of(weight)?.to_vec();
        let bs = self.shape_of(bias)?.to_vec();
        if ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "dense expects weight [out,in], bias [out]; got {ws:?}, {bs:?}"
            )));
        }
        if ws[1] != n {
            return Err(Error::shape(format!(
                "dense weight expects {} inputs, input has {n} elements",
                ws[1]
            )));
        }
        if ws[0] != bs[0] {
            return Err(Error::shape(format!(
                "dense weight rows {} != bias length {}",
                ws[0], bs[0]
            )));
        }
        Ok(self.push(Op::Dense, vec![input, weight, bias], vec![ws[0]]))
    }

    /// 2x2 max pooling with stride 2. Trailing odd rows/columns are dropped.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape_of(input)?.to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!(
                "max_pool2 expects [H,W,C], got {xs:?}"
            )));
        }
        let (ho, wo) = (xs[0] / 2, xs[1] / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(format!(
                "max_pool2 output would be empty for input {xs:?}"
            )));
        }
        Ok(self.push(Op::MaxPool2, vec![input], vec![ho, wo, xs[2]]))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::Relu, vec![input], shape))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::Sigmoid, vec![input], shape))
    }

    /// Elementwise natural log. Evaluation fails on non-positive inputs.
    pub fn ln(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::Ln, vec![input], shape))
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(input)?.to_vec();
        if shape.is_empty() {
            return Err(Error::shape(
                "softmax_last needs at least one axis".to_string(),
            ));
        }
        Ok(self.push(Op::SoftmaxLast, vec![input], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a)?.to_vec();
        let sb = self.shape_of(b)?.to_vec();
        if sa != sb {
            return Err(Error::shape(format!(
                "add shape mismatch: {sa:?} vs {sb:?}"
            )));
        }
        Ok(self.push(Op::Add, vec![a, b], sa))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a)?.to_vec();
        let sb = self.shape_of(b)?.to_vec();
        if sa != sb {
            return Err(Error::shape(format!(
                "mul shape mismatch: {sa:?} vs {sb:?}"
            )));
        }
        Ok(self.push(Op::Mul, vec![a, b], sa))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, input: NodeId, mul: f32, add: f32) -> Result<NodeId> {
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::Affine { mul, add }, vec![input], shape))
    }

    /// Scalar multiply (affine with zero offset).
    pub fn scale(&mut self, input: NodeId, mul: f32) -> Result<NodeId> {
        self.affine(input, mul, 0.0)
    }

    /// Squared L2 norm over all elements → scalar.
    pub fn sq_norm(&mut self, input: NodeId) -> Result<NodeId> {
        self.node(input)?;
        Ok(self.push(Op::SqNorm, vec![input], vec![]))
    }

    /// Mean over all elements → scalar.
    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        self.node(input)?;
        Ok(self.push(Op::Mean, vec![input], vec![]))
    }

    /// L2 norm over all elements → scalar. Subgradient 0 at the origin.
    pub fn l2_norm(&mut self, input: NodeId) -> Result<NodeId> {
        self.node(input)?;
        Ok(self.push(Op::L2Norm, vec![input], vec![]))
    }

    /// Per-position minimum L2 distance to the columns of `cols`.
    /// `input [..., B]`, `cols [B, Q]` → `[...]`. Ties pick the lowest
    /// column index; the gradient follows the achieving column.
    pub fn min_dist_cols(&mut self, input: NodeId, cols: NodeId) -> Result<NodeId> {
        let xs = self.shape_of(input)?.to_vec();
        let cs = self.shape_of(cols)?.to_vec();
        if xs.is_empty() || cs.len() != 2 {
            return Err(Error::shape(format!(
                "min_dist_cols expects input [...,B], cols [B,Q]; got {xs:?}, {cs:?}"
            )));
        }
        let b = *xs.last().unwrap();
        if cs[0] != b {
            return Err(Error::shape(format!(
                "min_dist_cols band mismatch: input has {b}, cols expect {}",
                cs[0]
            )));
        }
        Ok(self.push(
            Op::MinDistCols,
            vec![input, cols],
            xs[..xs.len() - 1].to_vec(),
        ))
    }

    /// Linear projection of the last axis by a column matrix:
    /// `cols [B, Q]`, `input [..., Q]` → `[..., B]`.
    pub fn project_cols(&mut self, cols: NodeId, input: NodeId) -> Result<NodeId> {
        let cs = self.shape_of(cols)?.to_vec();
        let xs = self.shape_of(input)?.to_vec();
        if cs.len() != 2 || xs.is_empty() {
            return Err(Error::shape(format!(
                "project_cols expects cols [B,Q], input [...,Q]; got {cs:?}, {xs:?}"
            )));
        }
        if *xs.last().unwrap() != cs[1] {
            return Err(Error::shape(format!(
                "project_cols mixture length mismatch: input has {}, cols expect {}",
                xs.last().unwrap(),
                cs[1]
            )));
        }
        let mut out = xs[..xs.len() - 1].to_vec();
        out.push(cs[0]);
        Ok(self.push(Op::ProjectCols, vec![cols, input], out))
    }

    /// Rotate the spatial axes of `[M, N, B]` clockwise by `quarter_turns`
    /// right angles.
    pub fn rot90(&mut self, input: NodeId, quarter_turns: u8) -> Result<NodeId> {
        let xs = self.shape_of(input)?.to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!("rot90 expects [M,N,B], got {xs:?}")));
        }
        let k = quarter_turns % 4;
        let shape = if k % 2 == 0 {
            xs.clone()
        } else {
            vec![xs[1], xs[0], xs[2]]
        };
        Ok(self.push(Op::Rot90 { quarter_turns: k }, vec![input], shape))
    }

    /// Clamp to `[lo, hi]` with a straight-through gradient: the backward
    /// pass ignores saturation so optimization keeps moving at the bounds.
    pub fn clamp_st(&mut self, input: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::shape(format!("clamp_st needs lo < hi, got {lo}..{hi}")));
        }
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::ClampSt { lo, hi }, vec![input], shape))
    }

    /// Copy of `host` with `patch` written at `(row, col)`. Pixels outside
    /// the patch footprint are bitwise equal to the host.
    pub fn embed_patch(
        &mut self,
        host: NodeId,
        patch: NodeId,
        row: usize,
        col: usize,
    ) -> Result<NodeId> {
        let hs = self.shape_of(host)?.to_vec();
        let ps = self.shape_of(patch)?.to_vec();
        if hs.len() != 3 || ps.len() != 3 {
            return Err(Error::shape(format!(
                "embed_patch expects host [H,W,B], patch [m,n,B]; got {hs:?}, {ps:?}"
            )));
        }
        if hs[2] != ps[2] {
            return Err(Error::shape(format!(
                "embed_patch band mismatch: host {} vs patch {}",
                hs[2], ps[2]
            )));
        }
        if row + ps[0] > hs[0] || col + ps[1] > hs[1] {
            return Err(Error::shape(format!(
                "embed_patch out of bounds: patch {}x{} at ({row},{col}) in host {}x{}",
                ps[0], ps[1], hs[0], hs[1]
            )));
        }
        Ok(self.push(Op::EmbedPatch { row, col }, vec![host, patch], hs))
    }

    /// Select indices of the last axis (e.g. extract a band subset in-graph).
    /// Indices are 0-based, strictly increasing.
    pub fn slice_bands(&mut self, input: NodeId, keep: &[usize]) -> Result<NodeId> {
        let xs = self.shape_of(input)?.to_vec();
        if xs.is_empty() {
            return Err(Error::shape("slice_bands needs at least one axis".to_string()));
        }
        let b = *xs.last().unwrap();
        if keep.is_empty() || keep.windows(2).any(|w| w[0] >= w[1]) || *keep.last().unwrap() >= b {
            return Err(Error::shape(format!(
                "slice_bands indices must be strictly increasing and < {b}, got {keep:?}"
            )));
        }
        let mut out = xs[..xs.len() - 1].to_vec();
        out.push(keep.len());
        Ok(self.push(
            Op::SliceBands {
                keep: keep.to_vec(),
            },
            vec![input],
            out,
        ))
    }

    /// Elementwise `-log(sigmoid(x))`, computed in log-space so confident
    /// inputs neither overflow nor kill the gradient.
    pub fn neg_log_sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::NegLogSigmoid, vec![input], shape))
    }

    /// Class-weighted binary cross entropy on a scalar logit:
    /// `y*softplus(-z) + fp_weight*(1-y)*softplus(z)`. The false-positive
    /// branch carries `fp_weight`.
    pub fn bce_logit(&mut self, logit: NodeId, target: f32, fp_weight: f32) -> Result<NodeId> {
        let shape = self.shape_of(logit)?.to_vec();
        let n: usize = shape.iter().product();
        if n != 1 {
            return Err(Error::shape(format!(
                "bce_logit expects a scalar logit, got shape {shape:?}"
            )));
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::shape(format!("bce_logit target {target} outside [0,1]")));
        }
        Ok(self.push(Op::BceLogit { target, fp_weight }, vec![logit], vec![]))
    }

    /// Register a named output.
    pub fn output(&mut self, name: &str, id: NodeId) -> Result<()> {
        self.node(id)?;
        if self.outputs.iter().any(|(n, _)| n == name) {
            return Err(Error::graph(format!("duplicate output name '{name}'")));
        }
        self.outputs.push((name.to_string(), id));
        Ok(())
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.iter().map(|(n, _)| n.as_str())
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.iter().map(|(n, _)| n.as_str())
    }

    pub(crate) fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    pub(crate) fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    /// Forward pass; returns the registered outputs.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<HashMap<String, Tensor>> {
        let pass = self.forward(bindings, false)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), pass.values[id.0].clone()))
            .collect())
    }

    /// Forward pass retaining every node value, optionally recording the
    /// branch signature (relu signs, pool/min argselects, clamp saturation).
    pub(crate) fn forward(&self, bindings: &Bindings, with_signature: bool) -> Result<ForwardPass> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut sig = Signature::new(with_signature);
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = self.eval_node(idx, node, &values, bindings, &mut sig)?;
            if !value.all_finite() {
                return Err(Error::graph(format!(
                    "non-finite value produced by node {idx} ({})",
                    node.op.name()
                )));
            }
            values.push(value);
        }
        Ok(ForwardPass {
            values,
            signature: sig.finish(),
        })
    }

    fn eval_node(
        &self,
        idx: usize,
        node: &Node,
        values: &[Tensor],
        bindings: &Bindings,
        sig: &mut Signature,
    ) -> Result<Tensor> {
        let input = |i: usize| -> &Tensor { &values[node.inputs[i].0] };
        match &node.op {
            Op::Leaf { name } => {
                let bound = bindings.get(name.as_str()).ok_or_else(|| {
                    Error::graph(format!("unbound leaf '{name}' (node {idx})"))
                })?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(Error::shape(format!(
                        "leaf '{name}' bound with shape {:?}, declared {:?}",
                        bound.shape(),
                        node.shape
                    )));
                }
                Ok((*bound).clone())
            }
            Op::Const(t) => Ok(t.clone()),
            Op::Conv2d { stride, padding } => Ok(forward_conv2d(
                input(0),
                input(1),
                input(2),
                *stride,
                *padding,
                &node.shape,
            )),
            Op::Dense => Ok(forward_dense(input(0), input(1), input(2))),
            Op::MaxPool2 => Ok(forward_max_pool2(input(0), &node.shape, sig)),
            Op::Relu => {
                let x = input(0);
                if sig.enabled() {
                    for v in x.iter() {
                        sig.push_bit(*v > 0.0);
                    }
                }
                Ok(Tensor::from_fn(node.shape.clone(), |i| {
                    x.data()[i].max(0.0)
                }))
            }
            Op::Sigmoid => {
                let x = input(0);
                Ok(Tensor::from_fn(node.shape.clone(), |i| {
                    sigmoid(x.data()[i] as f64) as f32
                }))
            }
            Op::Ln => {
                let x = input(0);
                if let Some(pos) = x.iter().position(|v| *v <= 0.0) {
                    return Err(Error::graph(format!(
                        "ln of non-positive value {} at element {pos} (node {idx})",
                        x.data()[pos]
                    )));
                }
                Ok(Tensor::from_fn(node.shape.clone(), |i| {
                    (x.data()[i] as f64).ln() as f32
                }))
            }
            Op::SoftmaxLast => Ok(forward_softmax_last(input(0))),
            Op::Add => {
                let (a, b) = (input(0), input(1));
                Ok(Tensor::from_fn(node.shape.clone(), |i| {
                    a.data()[i] + b.data()[i]
                }))
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                Ok(Tensor::from_fn(node.shape.clone(), |i| {
                    a.data()[i] * b.data()[i]
                }))
            }
            Op::Affine { mul, add } => {
                let x = input(0);
                Ok(Tensor::from_fn(node.shape.clone(), |i| {
                    mul * x.data()[i] + add
                }))
            }
            Op::SqNorm => {
                let s: f64 = input(0).iter().map(|&v| (v as f64) * (v as f64)).sum();
                Ok(Tensor::scalar(s as f32))
            }
            Op::Mean => {
                let x = input(0);
                let s: f64 = x.iter().map(|&v| v as f64).sum();
                Ok(Tensor::scalar((s / x.numel() as f64) as f32))
            }
            Op::L2Norm => {
                let s: f64 = input(0).iter().map(|&v| (v as f64) * (v as f64)).sum();
                Ok(Tensor::scalar(s.sqrt() as f32))
            }
            Op::MinDistCols => Ok(forward_min_dist_cols(input(0), input(1), &node.shape, sig)),
            Op::ProjectCols => Ok(forward_project_cols(input(0), input(1), &node.shape)),
            Op::Rot90 { quarter_turns } => Ok(forward_rot90(input(0), *quarter_turns, &node.shape)),
            Op::ClampSt { lo, hi } => {
                let x = input(0);
                if sig.enabled() {
                    for v in x.iter() {
                        sig.push_bit(*v < *lo);
                        sig.push_bit(*v > *hi);
                    }
                }
                Ok(Tensor::from_fn(node.shape.clone(), |i| {
                    x.data()[i].clamp(*lo, *hi)
                }))
            }
            Op::EmbedPatch { row, col } => Ok(forward_embed_patch(input(0), input(1), *row, *col)),
            Op::SliceBands { keep } => Ok(forward_slice_bands(input(0), keep, &node.shape)),
            Op::NegLogSigmoid => {
                let x = input(0);
                Ok(Tensor::from_fn(node.shape.clone(), |i| {
                    softplus(-(x.data()[i] as f64)) as f32
                }))
            }
            Op::BceLogit { target, fp_weight } => {
                let z = input(0).data()[0] as f64;
                let y = *target as f64;
                let w = *fp_weight as f64;
                let loss = y * softplus(-z) + (1.0 - y) * w * softplus(z);
                Ok(Tensor::scalar(loss as f32))
            }
        }
    }
}

/// Retained forward state: one value per node plus the branch signature.
pub(crate) struct ForwardPass {
    pub values: Vec<Tensor>,
    pub signature: u64,
}

/// Forward state of the float64 shadow evaluation used by the
/// finite-difference oracle.
pub(crate) struct ForwardPass64 {
    pub values: Vec<Vec<f64>>,
    pub signature: u64,
}

impl Graph {
    /// Full-precision forward pass. Only the gradient checker uses this:
    /// central differences divide an O(eps) function perturbation by 2h, so
    /// the probe evaluations must not carry f32 storage rounding.
    pub(crate) fn forward_f64(
        &self,
        bindings: &Bindings,
        with_signature: bool,
    ) -> Result<ForwardPass64> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        let mut sig = Signature::new(with_signature);
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = self.eval_node_f64(idx, node, &values, bindings, &mut sig)?;
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::graph(format!(
                    "non-finite value produced by node {idx} ({})",
                    node.op.name()
                )));
            }
            values.push(value);
        }
        Ok(ForwardPass64 {
            values,
            signature: sig.finish(),
        })
    }

    fn eval_node_f64(
        &self,
        idx: usize,
        node: &Node,
        values: &[Vec<f64>],
        bindings: &Bindings,
        sig: &mut Signature,
    ) -> Result<Vec<f64>> {
        let input = |i: usize| -> &[f64] { &values[node.inputs[i].0] };
        let in_shape = |i: usize| -> &[usize] { &self.nodes[node.inputs[i].0].shape };
        Ok(match &node.op {
            Op::Leaf { name } => {
                let bound = bindings.get(name.as_str()).ok_or_else(|| {
                    Error::graph(format!("unbound leaf '{name}' (node {idx})"))
                })?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(Error::shape(format!(
                        "leaf '{name}' bound with shape {:?}, declared {:?}",
                        bound.shape(),
                        node.shape
                    )));
                }
                bound.iter().map(|&v| v as f64).collect()
            }
            Op::Const(t) => t.iter().map(|&v| v as f64).collect(),
            Op::Conv2d { stride, padding } => {
                let xs = in_shape(0);
                let ws = in_shape(1);
                let (h, w, cin) = (xs[0], xs[1], xs[2]);
                let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
                let (ho, wo) = (node.shape[0], node.shape[1]);
                let (xd, wd, bd) = (input(0), input(1), input(2));
                let mut out = vec![0.0f64; ho * wo * cout];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let o_base = (oy * wo + ox) * cout;
                        out[o_base..o_base + cout].copy_from_slice(bd);
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - *padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - *padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let x_base = ((iy as usize) * w + ix as usize) * cin;
                                let w_base = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let v = xd[x_base + ci];
                                    let wr = &wd[w_base + ci * cout..w_base + (ci + 1) * cout];
                                    for (c, wv) in wr.iter().enumerate() {
                                        out[o_base + c] += v * wv;
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
            Op::Dense => {
                let n = in_shape(0).iter().product::<usize>();
                let m = node.shape[0];
                let (xd, wd, bd) = (input(0), input(1), input(2));
                (0..m)
                    .map(|mi| {
                        let row = &wd[mi * n..(mi + 1) * n];
                        bd[mi] + xd.iter().zip(row).map(|(x, w)| x * w).sum::<f64>()
                    })
                    .collect()
            }
            Op::MaxPool2 => {
                let xs = in_shape(0);
                let (w, c) = (xs[1], xs[2]);
                let (ho, wo) = (node.shape[0], node.shape[1]);
                let xd = input(0);
                let mut out = vec![0.0f64; ho * wo * c];
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_k = 0usize;
                            for k in 0..4 {
                                let (dy, dx) = (k / 2, k % 2);
                                let v = xd[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                                if v > best {
                                    best = v;
                                    best_k = k;
                                }
                            }
                            sig.push_index(best_k);
                            out[(oy * wo + ox) * c + ch] = best;
                        }
                    }
                }
                out
            }
            Op::Relu => {
                let xd = input(0);
                if sig.enabled() {
                    for v in xd {
                        sig.push_bit(*v > 0.0);
                    }
                }
                xd.iter().map(|&v| v.max(0.0)).collect()
            }
            Op::Sigmoid => input(0).iter().map(|&v| sigmoid(v)).collect(),
            Op::Ln => {
                let xd = input(0);
                if let Some(pos) = xd.iter().position(|v| *v <= 0.0) {
                    return Err(Error::graph(format!(
                        "ln of non-positive value {} at element {pos} (node {idx})",
                        xd[pos]
                    )));
                }
                xd.iter().map(|&v| v.ln()).collect()
            }
            Op::SoftmaxLast => {
                let q = *node.shape.last().unwrap();
                let xd = input(0);
                let rows = xd.len() / q;
                let mut out = vec![0.0f64; xd.len()];
                for r in 0..rows {
                    let row = &xd[r * q..(r + 1) * q];
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for i in 0..q {
                        out[r * q + i] = (row[i] - max).exp() / sum;
                    }
                }
                out
            }
            Op::Add => input(0)
                .iter()
                .zip(input(1))
                .map(|(a, b)| a + b)
                .collect(),
            Op::Mul => input(0)
                .iter()
                .zip(input(1))
                .map(|(a, b)| a * b)
                .collect(),
            Op::Affine { mul, add } => input(0)
                .iter()
                .map(|&v| *mul as f64 * v + *add as f64)
                .collect(),
            Op::SqNorm => vec![input(0).iter().map(|&v| v * v).sum()],
            Op::Mean => {
                let xd = input(0);
                vec![xd.iter().sum::<f64>() / xd.len() as f64]
            }
            Op::L2Norm => vec![input(0).iter().map(|&v| v * v).sum::<f64>().sqrt()],
            Op::MinDistCols => {
                let b = *in_shape(0).last().unwrap();
                let cs = in_shape(1);
                let nq = cs[1];
                let (xd, cd) = (input(0), input(1));
                let positions = xd.len() / b;
                let mut out = vec![0.0f64; positions];
                for p in 0..positions {
                    let xv = &xd[p * b..(p + 1) * b];
                    let mut best = f64::INFINITY;
                    let mut best_q = 0usize;
                    for q in 0..nq {
                        let mut s = 0.0f64;
                        for bi in 0..b {
                            let d = xv[bi] - cd[bi * nq + q];
                            s += d * d;
                        }
                        if s < best {
                            best = s;
                            best_q = q;
                        }
                    }
                    sig.push_index(best_q);
                    sig.push_bit(best == 0.0);
                    out[p] = best.sqrt();
                }
                out
            }
            Op::ProjectCols => {
                let cs = in_shape(0);
                let (b, q) = (cs[0], cs[1]);
                let (cd, xd) = (input(0), input(1));
                let positions = xd.len() / q;
                let mut out = vec![0.0f64; positions * b];
                for p in 0..positions {
                    let xv = &xd[p * q..(p + 1) * q];
                    for bi in 0..b {
                        let row = &cd[bi * q..(bi + 1) * q];
                        out[p * b + bi] = row.iter().zip(xv).map(|(c, w)| c * w).sum();
                    }
                }
                out
            }
            Op::Rot90 { quarter_turns } => {
                let xs = in_shape(0);
                let (m, n, b) = (xs[0], xs[1], xs[2]);
                let (om, on) = (node.shape[0], node.shape[1]);
                let xd = input(0);
                let mut out = vec![0.0f64; xd.len()];
                for i in 0..om {
                    for j in 0..on {
                        let (si, sj) = match quarter_turns {
                            0 => (i, j),
                            1 => (m - 1 - j, i),
                            2 => (m - 1 - i, n - 1 - j),
                            3 => (j, n - 1 - i),
                            _ => unreachable!(),
                        };
                        let src = (si * n + sj) * b;
                        let dst = (i * on + j) * b;
                        out[dst..dst + b].copy_from_slice(&xd[src..src + b]);
                    }
                }
                out
            }
            Op::ClampSt { lo, hi } => {
                let (lo, hi) = (*lo as f64, *hi as f64);
                let xd = input(0);
                if sig.enabled() {
                    for v in xd {
                        sig.push_bit(*v < lo);
                        sig.push_bit(*v > hi);
                    }
                }
                xd.iter().map(|&v| v.clamp(lo, hi)).collect()
            }
            Op::EmbedPatch { row, col } => {
                let hs = in_shape(0);
                let ps = in_shape(1);
                let (hw, b) = (hs[1], hs[2]);
                let (pm, pn) = (ps[0], ps[1]);
                let mut out = input(0).to_vec();
                for i in 0..pm {
                    let dst = ((row + i) * hw + col) * b;
                    let src = i * pn * b;
                    out[dst..dst + pn * b].copy_from_slice(&input(1)[src..src + pn * b]);
                }
                out
            }
            Op::SliceBands { keep } => {
                let b = *in_shape(0).last().unwrap();
                let xd = input(0);
                let positions = xd.len() / b;
                let k = keep.len();
                let mut out = vec![0.0f64; positions * k];
                for p in 0..positions {
                    for (j, &band) in keep.iter().enumerate() {
                        out[p * k + j] = xd[p * b + band];
                    }
                }
                out
            }
            Op::NegLogSigmoid => input(0).iter().map(|&v| softplus(-v)).collect(),
            Op::BceLogit { target, fp_weight } => {
                let z = input(0)[0];
                let y = *target as f64;
                let w = *fp_weight as f64;
                vec![y * softplus(-z) + (1.0 - y) * w * softplus(z)]
            }
        })
    }
}

/// FNV-1a accumulator over discrete branch decisions. Two evaluations with
/// the same signature took the same relu/pool/min/clamp branches everywhere.
pub(crate) struct Signature {
    enabled: bool,
    hash: u64,
}

impl Signature {
    fn new(enabled: bool) -> Self {
        Signature {
            enabled,
            hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    fn enabled(&self) -> bool {
        self.enabled
    }

    #[inline]
    fn mix(&mut self, word: u64) {
        self.hash ^= word;
        self.hash = self.hash.wrapping_mul(0x0000_0100_0000_01b3);
    }

    #[inline]
    fn push_bit(&mut self, bit: bool) {
        if self.enabled {
            self.mix(bit as u64 + 1);
        }
    }

    #[inline]
    fn push_index(&mut self, index: usize) {
        if self.enabled {
            self.mix(index as u64 + 0x9e37_79b9);
        }
    }

    fn finish(self) -> u64 {
        self.hash
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn forward_conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (out_shape[0], out_shape[1]);
    let xd = x.data();
    let wd_ = w.data();
    let bd = b.data();
    let mut out = vec![0.0f32; ho * wo * cout];
    let mut acc = vec![0.0f64; cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for (c, a) in acc.iter_mut().enumerate() {
                *a = bd[c] as f64;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let x_base = ((iy as usize) * wd + ix as usize) * cin;
                    let w_base = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = xd[x_base + ci] as f64;
                        let wr = &wd_[w_base + ci * cout..w_base + (ci + 1) * cout];
                        for (c, wv) in wr.iter().enumerate() {
                            acc[c] += v * (*wv as f64);
                        }
                    }
                }
            }
            let o_base = (oy * wo + ox) * cout;
            for c in 0..cout {
                out[o_base + c] = acc[c] as f32;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv2d output shape")
}

fn forward_dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.numel();
    let m = w.shape()[0];
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0f32; m];
    for mi in 0..m {
        let mut acc = b.data()[mi] as f64;
        let row = &wd[mi * n..(mi + 1) * n];
        for (xv, wv) in xd.iter().zip(row) {
            acc += (*xv as f64) * (*wv as f64);
        }
        out[mi] = acc as f32;
    }
    Tensor::new(vec![m], out).expect("dense output shape")
}

fn forward_max_pool2(x: &Tensor, out_shape: &[usize], sig: &mut Signature) -> Tensor {
    let (_, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (out_shape[0], out_shape[1]);
    let xd = x.data();
    let mut out = vec![0.0f32; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_k = 0usize;
                for k in 0..4 {
                    let (dy, dx) = (k / 2, k % 2);
                    let v = xd[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                sig.push_index(best_k);
                out[(oy * wo + ox) * c + ch] = best;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("max_pool2 output shape")
}

fn forward_softmax_last(x: &Tensor) -> Tensor {
    let q = *x.shape().last().unwrap();
    let rows = x.numel() / q;
    let xd = x.data();
    let mut out = vec![0.0f32; x.numel()];
    for r in 0..rows {
        let row = &xd[r * q..(r + 1) * q];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut sum = 0.0f64;
        let mut exps = vec![0.0f64; q];
        for (i, &v) in row.iter().enumerate() {
            let e = ((v as f64) - max).exp();
            exps[i] = e;
            sum += e;
        }
        for i in 0..q {
            out[r * q + i] = (exps[i] / sum) as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax output shape")
}

/// Squared distance from one position's band vector to column `q`.
fn col_dist_sq(xv: &[f32], cols: &Tensor, q: usize) -> f64 {
    let (b, nq) = (cols.shape()[0], cols.shape()[1]);
    let cd = cols.data();
    let mut s = 0.0f64;
    for bi in 0..b {
        let d = xv[bi] as f64 - cd[bi * nq + q] as f64;
        s += d * d;
    }
    s
}

pub(crate) fn min_dist_argmin(xv: &[f32], cols: &Tensor) -> (usize, f64) {
    let nq = cols.shape()[1];
    let mut best_q = 0usize;
    let mut best = f64::INFINITY;
    for q in 0..nq {
        let d = col_dist_sq(xv, cols, q);
        if d < best {
            best = d;
            best_q = q;
        }
    }
    (best_q, best)
}

fn forward_min_dist_cols(
    x: &Tensor,
    cols: &Tensor,
    out_shape: &[usize],
    sig: &mut Signature,
) -> Tensor {
    let b = *x.shape().last().unwrap();
    let positions = x.numel() / b;
    let xd = x.data();
    let mut out = vec![0.0f32; positions];
    for p in 0..positions {
        let xv = &xd[p * b..(p + 1) * b];
        let (q, d2) = min_dist_argmin(xv, cols);
        sig.push_index(q);
        sig.push_bit(d2 == 0.0);
        out[p] = d2.sqrt() as f32;
    }
    Tensor::new(out_shape.to_vec(), out).expect("min_dist output shape")
}

fn forward_project_cols(cols: &Tensor, x: &Tensor, out_shape: &[usize]) -> Tensor {
    let (b, q) = (cols.shape()[0], cols.shape()[1]);
    let positions = x.numel() / q;
    let cd = cols.data();
    let xd = x.data();
    let mut out = vec![0.0f32; positions * b];
    for p in 0..positions {
        let xv = &xd[p * q..(p + 1) * q];
        for bi in 0..b {
            let row = &cd[bi * q..(bi + 1) * q];
            let mut acc = 0.0f64;
            for (c, w) in row.iter().zip(xv) {
                acc += (*c as f64) * (*w as f64);
            }
            out[p * b + bi] = acc as f32;
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("project_cols output shape")
}

/// Index mapping for a clockwise quarter-turn rotation; used by both the
/// forward op and its adjoint (which rotates the other way).
fn forward_rot90(x: &Tensor, k: u8, out_shape: &[usize]) -> Tensor {
    let (m, n, b) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let (om, on) = (out_shape[0], out_shape[1]);
    let mut out = vec![0.0f32; x.numel()];
    for i in 0..om {
        for j in 0..on {
            let (si, sj) = match k {
                0 => (i, j),
                1 => (m - 1 - j, i),
                2 => (m - 1 - i, n - 1 - j),
                3 => (j, n - 1 - i),
                _ => unreachable!(),
            };
            let src = (si * n + sj) * b;
            let dst = (i * on + j) * b;
            out[dst..dst + b].copy_from_slice(&xd[src..src + b]);
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("rot90 output shape")
}

fn forward_embed_patch(host: &Tensor, patch: &Tensor, row: usize, col: usize) -> Tensor {
    let (hw, b) = (host.shape()[1], host.shape()[2]);
    let (pm, pn) = (patch.shape()[0], patch.shape()[1]);
    let mut out = host.data().to_vec();
    for i in 0..pm {
        let dst = ((row + i) * hw + col) * b;
        let src = i * pn * b;
        out[dst..dst + pn * b].copy_from_slice(&patch.data()[src..src + pn * b]);
    }
    Tensor::new(host.shape().to_vec(), out).expect("embed_patch output shape")
}

fn forward_slice_bands(x: &Tensor, keep: &[usize], out_shape: &[usize]) -> Tensor {
    let b = *x.shape().last().unwrap();
    let positions = x.numel() / b;
    let k = keep.len();
    let xd = x.data();
    let mut out = vec![0.0f32; positions * k];
    for p in 0..positions {
        for (j, &band) in keep.iter().enumerate() {
            out[p * k + j] = xd[p * b + band];
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("slice_bands output shape")
}
