use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::ot::{self, CostMatrix, SinkhornSettings};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds with their attributes.
#[derive(Clone, Debug)]
pub enum Op {
    Input {
        name: String,
        requires_grad: bool,
    },
    Param {
        name: String,
    },
    Constant(Tensor),
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Relu,
    Tanh,
    Sum,
    Mean,
    Reshape,
    BroadcastTo,
    ConcatChannels,
    ConcatRows,
    SliceRows {
        start: usize,
        end: usize,
    },
    Conv2d {
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    MaxPool2x2,
    InstanceNorm {
        eps: f64,
    },
    GlobalAvgPool,
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    L1Loss,
    CosineCost,
    SinkhornCost {
        settings: SinkhornSettings,
        regularized: bool,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reshape => "reshape",
            Op::BroadcastTo => "broadcast",
            Op::ConcatChannels => "concat_channels",
            Op::ConcatRows => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool2x2 => "max_pool2x2",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::L1Loss => "l1_loss",
            Op::CosineCost => "cosine_cost",
            Op::SinkhornCost { .. } => "sinkhorn_cost",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// An acyclic op list in topological order plus its named parameter set.
///
/// Nodes can only reference earlier nodes, so the insertion order is always a
/// valid evaluation order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, (Var, Tensor)>,
    inputs: BTreeMap<String, Var>,
    outputs: BTreeMap<String, Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn node_inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, (_, t))| (k.as_str(), t))
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn outputs(&self) -> &BTreeMap<String, Var> {
        &self.outputs
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, shape: Vec<usize>) -> Var {
        let needs_grad = match &op {
            Op::Input { requires_grad, .. } => *requires_grad,
            Op::Param { name } => self.params[name].1.requires_grad(),
            Op::Constant(_) => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Declares a named input fed at execution time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Var {
        self.input_impl(name, shape, false)
    }

    /// Declares a named input whose gradient is reported by backward.
    pub fn input_with_grad(&mut self, name: &str, shape: &[usize]) -> Var {
        self.input_impl(name, shape, true)
    }

    fn input_impl(&mut self, name: &str, shape: &[usize], requires_grad: bool) -> Var {
        if let Some(&v) = self.inputs.get(name) {
            return v;
        }
        let v = self.push(
            Op::Input {
                name: name.to_string(),
                requires_grad,
            },
            vec![],
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), v);
        v
    }

    /// Registers a parameter; trainability follows `value.requires_grad()`.
    /// Registering the same name twice returns the existing node, which is how
    /// a network is applied more than once with shared weights.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some((v, _)) = self.params.get(name) {
            return *v;
        }
        self.params.insert(name.to_string(), (Var(usize::MAX), value.clone()));
        let v = self.push(Op::Param { name: name.to_string() }, vec![], value.shape().to_vec());
        self.params.get_mut(name).unwrap().0 = v;
        v
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) {
        let slot = self.params.get_mut(name).expect("unknown parameter");
        assert_eq!(slot.1.shape(), value.shape(), "parameter shape is fixed");
        slot.1 = value;
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), vec![], shape)
    }

    pub fn mark_output(&mut self, name: &str, v: Var) {
        self.outputs.insert(name.to_string(), v);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add, vec![a, b], s))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub, vec![a, b], s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul, vec![a, b], s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(c), vec![a], s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let s = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul, vec![a, b], s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::Relu, vec![a], s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::Tanh, vec![a], s)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum, vec![a], vec![1])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean, vec![a], vec![1])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        Ok(self.push(Op::Reshape, vec![a], shape.to_vec()))
    }

    /// Right-aligned broadcasting: every source extent equals the target's or is 1.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a);
        let ok = src.len() <= shape.len()
            && src
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&s, &t)| s == t || s == 1);
        if !ok {
            return Err(Error::shape("broadcast", format!("{src:?} -> {shape:?}")));
        }
        Ok(self.push(Op::BroadcastTo, vec![a], shape.to_vec()))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::shape("concat_channels", format!("rank of {first:?}")));
        }
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::shape("concat_channels", format!("{first:?} vs {s:?}")));
            }
            c += s[1];
        }
        Ok(self.push(
            Op::ConcatChannels,
            parts.to_vec(),
            vec![first[0], c, first[2], first[3]],
        ))
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(Error::shape("concat_rows", format!("{first:?} vs {s:?}")));
            }
            rows += s[0];
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.push(Op::ConcatRows, parts.to_vec(), shape))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if start >= end || end > s[0] {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {s:?}")));
        }
        let mut shape = s;
        shape[0] = end - start;
        Ok(self.push(Op::SliceRows { start, end }, vec![a], shape))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] {
            return Err(Error::geometry("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::geometry("conv2d", format!("stride {stride}")));
        }
        let g = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, padding)
            .ok_or_else(|| Error::geometry("conv2d", format!("kernel {} on {sx:?} pad {padding}", sw[2])))?;
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
            inputs.push(b);
        }
        Ok(self.push(
            Op::Conv2d { stride, padding },
            inputs,
            vec![sx[0], sw[0], g.out_h, g.out_w],
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[0] {
            return Err(Error::geometry("conv_transpose2d", format!("x {sx:?}, w {sw:?}")));
        }
        let g = transpose_geom(&sx, &sw, stride, padding, output_padding)?;
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            if self.shape(b) != [sw[1]] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?}", self.shape(b))));
            }
            inputs.push(b);
        }
        Ok(self.push(
            Op::ConvTranspose2d {
                stride,
                padding,
                output_padding,
            },
            inputs,
            vec![sx[0], sw[1], g.height, g.width],
        ))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::geometry("max_pool2x2", format!("{s:?} needs even H, W")));
        }
        Ok(self.push(Op::MaxPool2x2, vec![x], vec![s[0], s[1], s[2] / 2, s[3] / 2]))
    }

    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gain) != [s[1]] || self.shape(bias) != [s[1]] {
            return Err(Error::shape("instance_norm", format!("x {s:?}")));
        }
        Ok(self.push(Op::InstanceNorm { eps }, vec![x, gain, bias], s))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        Ok(self.push(Op::GlobalAvgPool, vec![x], vec![s[0], s[1]]))
    }

    /// `x·w + b` for `x: N×D`, `w: D×E`, `b: E`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let shape = self.shape(y).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(y, bb)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?}, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: s[1],
            });
        }
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            vec![1],
        ))
    }

    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        Ok(self.push(Op::L1Loss, vec![a, b], vec![1]))
    }

    /// Pairwise cosine distance between the rows of two feature matrices.
    pub fn cosine_cost(&mut self, fa: Var, fb: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(fa).to_vec(), self.shape(fb).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("cosine_cost", format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::CosineCost, vec![fa, fb], vec![sa[0], sb[0]]))
    }

    /// Sharp entropic transport cost `<M, C>`; the plan is held fixed in the
    /// reverse sweep, so `dC = M`.
    pub fn sinkhorn_cost(&mut self, cost: Var, settings: &SinkhornSettings) -> Result<Var> {
        self.sinkhorn_op(cost, settings, false)
    }

    /// Entropy-regularized optimum `<M, C> + ε·KL(M | a⊗b)`. Same reverse
    /// rule as [`Graph::sinkhorn_cost`], which is this value's exact
    /// gradient at convergence.
    pub fn sinkhorn_regularized(&mut self, cost: Var, settings: &SinkhornSettings) -> Result<Var> {
        self.sinkhorn_op(cost, settings, true)
    }

    fn sinkhorn_op(&mut self, cost: Var, settings: &SinkhornSettings, regularized: bool) -> Result<Var> {
        let s = self.shape(cost).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("sinkhorn_cost", format!("{s:?}")));
        }
        settings.validate()?;
        let op = Op::SinkhornCost {
            settings: settings.clone(),
            regularized,
        };
        Ok(self.push(op, vec![cost], vec![1]))
    }
}

fn transpose_geom(
    sx: &[usize],
    sw: &[usize],
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<ConvGeom> {
    let k = sw[2];
    if !(1..=2).contains(&stride) || output_padding >= stride {
        return Err(Error::geometry(
            "conv_transpose2d",
            format!("stride {stride}, output_padding {output_padding}"),
        ));
    }
    let oh = ((sx[2] - 1) * stride + k + output_padding).checked_sub(2 * padding);
    let ow = ((sx[3] - 1) * stride + k + output_padding).checked_sub(2 * padding);
    let (oh, ow) = match (oh, ow) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(Error::geometry(
                "conv_transpose2d",
                format!("output size not positive for {sx:?}"),
            ))
        }
    };
    let g = ConvGeom::new(sw[1], oh, ow, k, stride, padding)
        .filter(|g| g.out_h == sx[2] && g.out_w == sx[3])
        .ok_or_else(|| Error::geometry("conv_transpose2d", "inconsistent geometry"))?;
    Ok(g)
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    ArgMax(Vec<usize>),
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Vec<f64>),
    Cosine {
        ua: Vec<f64>,
        ub: Vec<f64>,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
    Plan(Vec<f64>),
}

#[derive(Clone, Debug)]
struct ForwardState {
    values: Vec<Tensor>,
    aux: Vec<Aux>,
}

/// Executes a graph and runs its reverse sweep.
pub struct Session<'g> {
    graph: &'g Graph,
    state: Option<ForwardState>,
}

/// Runs `graph` once and returns its named outputs.
pub fn execute(graph: &Graph, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    Session::new(graph).forward(inputs)
}

use crate::ot::COSINE_NORM_FLOOR as NORM_FLOOR;

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        Self { graph, state: None }
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// Evaluates every node in order and returns the marked outputs.
    pub fn forward(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        if let Some(name) = inputs.keys().find(|k| !self.graph.inputs.contains_key(*k)) {
            return Err(Error::UnknownInput(name.clone()));
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.graph.nodes.len());
        let mut aux = Vec::with_capacity(self.graph.nodes.len());
        for (id, node) in self.graph.nodes.iter().enumerate() {
            let (data, a) = match &node.op {
                Op::Input { name, .. } => {
                    let t = inputs.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            "input",
                            format!("`{name}` expects {:?}, got {:?}", node.shape, t.shape()),
                        ));
                    }
                    if !t.is_finite() {
                        return Err(Error::NonFinite { node: id, op: "input" });
                    }
                    values.push(t.clone());
                    aux.push(Aux::None);
                    continue;
                }
                Op::Param { name } => {
                    values.push(self.graph.params[name].1.clone());
                    aux.push(Aux::None);
                    continue;
                }
                Op::Constant(t) => {
                    values.push(t.clone());
                    aux.push(Aux::None);
                    continue;
                }
                op => eval(op, node, &values),
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: id,
                    op: node.op.name(),
                });
            }
            values.push(Tensor::new(&node.shape, data)?);
            aux.push(a);
        }
        let outs = self
            .graph
            .outputs
            .iter()
            .map(|(k, v)| (k.clone(), values[v.0].clone()))
            .collect();
        self.state = Some(ForwardState { values, aux });
        Ok(outs)
    }

    pub fn value(&self, v: Var) -> Option<&Tensor> {
        self.state.as_ref().map(|s| &s.values[v.0])
    }

    /// Reverse sweep from a scalar loss with upstream gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let state = self.state.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let shape = &self.graph.nodes[loss.0].shape;
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        let nodes = &self.graph.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if node.inputs.is_empty() || !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[id].take() else { continue };
            let wants: Vec<bool> = node.inputs.iter().map(|v| nodes[v.0].needs_grad).collect();
            let din = grad(&node.op, node, &state.values, &state.aux[id], &dout, &wants);
            for ((v, d), want) in node.inputs.iter().zip(din).zip(wants) {
                let Some(d) = d else { continue };
                if !want {
                    continue;
                }
                if d.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        node: id,
                        op: node.op.name(),
                    });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(d),
                }
            }
        }
        let mut leaf = BTreeMap::new();
        for (name, (v, t)) in &self.graph.params {
            let g = match (&grads[v.0], t.requires_grad()) {
                (Some(g), true) => Tensor::new(t.shape(), g.clone())?,
                _ => Tensor::zeros(t.shape()),
            };
            leaf.insert(name.clone(), g);
        }
        let mut inputs = BTreeMap::new();
        for (name, v) in &self.graph.inputs {
            if let Some(g) = &grads[v.0] {
                inputs.insert(name.clone(), Tensor::new(&nodes[v.0].shape, g.clone())?);
            }
        }
        Ok(Gradients { params: leaf, inputs })
    }
}

/// Parameter and input gradients from one reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    inputs: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter; frozen or unreached parameters give zeros.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient of an input declared with [`Graph::input_with_grad`].
    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }

    /// Global L2 norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn eval(op: &Op, node: &Node, values: &[Tensor]) -> (Vec<f64>, Aux) {
    let arg = |i: usize| values[node.inputs[i].0].data();
    let sh = |i: usize| values[node.inputs[i].0].shape();
    let plain = |v: Vec<f64>| (v, Aux::None);
    match op {
        Op::Add => plain(arg(0).iter().zip(arg(1)).map(|(a, b)| a + b).collect()),
        Op::Sub => plain(arg(0).iter().zip(arg(1)).map(|(a, b)| a - b).collect()),
        Op::Mul => plain(arg(0).iter().zip(arg(1)).map(|(a, b)| a * b).collect()),
        Op::Scale(c) => plain(arg(0).iter().map(|a| a * c).collect()),
        Op::MatMul => {
            let (m, k, n) = (sh(0)[0], sh(0)[1], sh(1)[1]);
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, arg(0), false, arg(1), false, 0.0, &mut out);
            plain(out)
        }
        Op::Relu => plain(arg(0).iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect()),
        Op::Tanh => plain(arg(0).iter().map(|a| a.tanh()).collect()),
        Op::Sum => plain(vec![arg(0).iter().sum()]),
        Op::Mean => plain(vec![arg(0).iter().sum::<f64>() / arg(0).len() as f64]),
        Op::Reshape => plain(arg(0).to_vec()),
        Op::BroadcastTo => {
            let map = broadcast_map(sh(0), &node.shape);
            let src = arg(0);
            plain(map.iter().map(|&i| src[i]).collect())
        }
        Op::ConcatChannels => {
            let (n, h, w) = (node.shape[0], node.shape[2], node.shape[3]);
            let mut out = Vec::with_capacity(numel(&node.shape));
            for i in 0..n {
                for k in 0..node.inputs.len() {
                    let c = sh(k)[1];
                    let sz = c * h * w;
                    out.extend_from_slice(&arg(k)[i * sz..(i + 1) * sz]);
                }
            }
            plain(out)
        }
        Op::ConcatRows => {
            let mut out = Vec::with_capacity(numel(&node.shape));
            for k in 0..node.inputs.len() {
                out.extend_from_slice(arg(k));
            }
            plain(out)
        }
        Op::SliceRows { start, end } => {
            let stride = numel(&sh(0)[1..]);
            plain(arg(0)[start * stride..end * stride].to_vec())
        }
        Op::Conv2d { stride, padding } => {
            let (sx, sw) = (sh(0), sh(1));
            let g = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], *stride, *padding).unwrap();
            let bias = (node.inputs.len() == 3).then(|| arg(2));
            plain(kernels::conv2d_forward(arg(0), sx[0], &g, arg(1), sw[0], bias))
        }
        Op::ConvTranspose2d {
            stride,
            padding,
            output_padding,
        } => {
            let (sx, sw) = (sh(0), sh(1));
            let g = transpose_geom(sx, sw, *stride, *padding, *output_padding).unwrap();
            let bias = (node.inputs.len() == 3).then(|| arg(2));
            plain(kernels::conv_transpose2d_forward(
                arg(0),
                sx[0],
                &g,
                arg(1),
                sx[1],
                bias,
            ))
        }
        Op::MaxPool2x2 => {
            let s = sh(0);
            let (out, idx) = kernels::max_pool2x2(arg(0), s[0] * s[1], s[2], s[3]);
            (out, Aux::ArgMax(idx))
        }
        Op::InstanceNorm { eps } => {
            let s = sh(0);
            let (y, xhat, inv_std) =
                kernels::instance_norm_forward(arg(0), s[0], s[1], s[2] * s[3], arg(1), arg(2), *eps);
            (y, Aux::Norm { xhat, inv_std })
        }
        Op::GlobalAvgPool => {
            let s = sh(0);
            let plane = s[2] * s[3];
            plain(
                arg(0)
                    .chunks(plane)
                    .map(|p| p.iter().sum::<f64>() / plane as f64)
                    .collect(),
            )
        }
        Op::SoftmaxCrossEntropy { labels } => {
            let c = sh(0)[1];
            let mut probs = Vec::with_capacity(arg(0).len());
            let mut loss = 0.0;
            for (row, &y) in arg(0).chunks(c).zip(labels) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let lse = m + z.ln();
                loss += lse - row[y];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            (vec![loss / labels.len() as f64], Aux::Softmax(probs))
        }
        Op::L1Loss => {
            let n = arg(0).len() as f64;
            plain(vec![
                arg(0).iter().zip(arg(1)).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
            ])
        }
        Op::CosineCost => {
            let d = sh(0)[1];
            let (ua, na) = ot::normalized_rows(arg(0), d);
            let (ub, nb) = ot::normalized_rows(arg(1), d);
            let cost = ot::cosine_from_unit(&ua, &ub, sh(0)[0], sh(1)[0], d);
            (cost, Aux::Cosine { ua, ub, na, nb })
        }
        Op::SinkhornCost { settings, regularized } => {
            let s = sh(0);
            let cm = CostMatrix::from_values(s[0], s[1], arg(0).to_vec()).expect("shape checked at build time");
            let sol = ot::sinkhorn(&cm, settings);
            let v = if *regularized {
                sol.regularized_value
            } else {
                sol.sharp_cost
            };
            (vec![v], Aux::Plan(sol.plan.values().to_vec()))
        }
        Op::Input { .. } | Op::Param { .. } | Op::Constant(_) => unreachable!(),
    }
}

/// For each output element of a broadcast, the flat source index it reads.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let lead = dst.len() - src.len();
    let mut src_strides = vec![0; dst.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        src_strides[lead + i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total = numel(dst);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..total {
        out.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for ax in (0..dst.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < dst[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn grad(op: &Op, node: &Node, values: &[Tensor], aux: &Aux, dout: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
    let arg = |i: usize| values[node.inputs[i].0].data();
    let sh = |i: usize| values[node.inputs[i].0].shape();
    match op {
        Op::Add => vec![Some(dout.to_vec()), Some(dout.to_vec())],
        Op::Sub => vec![Some(dout.to_vec()), Some(dout.iter().map(|d| -d).collect())],
        Op::Mul => vec![
            wants[0].then(|| dout.iter().zip(arg(1)).map(|(d, b)| d * b).collect()),
            wants[1].then(|| dout.iter().zip(arg(0)).map(|(d, a)| d * a).collect()),
        ],
        Op::Scale(c) => vec![Some(dout.iter().map(|d| d * c).collect())],
        Op::MatMul => {
            let (m, k, n) = (sh(0)[0], sh(0)[1], sh(1)[1]);
            let da = wants[0].then(|| {
                let mut g = vec![0.0; m * k];
                kernels::gemm(m, n, k, dout, false, arg(1), true, 0.0, &mut g);
                g
            });
            let db = wants[1].then(|| {
                let mut g = vec![0.0; k * n];
                kernels::gemm(k, m, n, arg(0), true, dout, false, 0.0, &mut g);
                g
            });
            vec![da, db]
        }
        Op::Relu => vec![Some(
            dout.iter()
                .zip(arg(0))
                .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                .collect(),
        )],
        Op::Tanh => vec![Some(
            dout.iter()
                .zip(arg(0))
                .map(|(d, x)| {
                    let t = x.tanh();
                    d * (1.0 - t * t)
                })
                .collect(),
        )],
        Op::Sum => vec![Some(vec![dout[0]; arg(0).len()])],
        Op::Mean => {
            let n = arg(0).len();
            vec![Some(vec![dout[0] / n as f64; n])]
        }
        Op::Reshape => vec![Some(dout.to_vec())],
        Op::BroadcastTo => {
            let map = broadcast_map(sh(0), &node.shape);
            let mut g = vec![0.0; arg(0).len()];
            for (d, &i) in dout.iter().zip(&map) {
                g[i] += d;
            }
            vec![Some(g)]
        }
        Op::ConcatChannels => {
            let (n, h, w) = (node.shape[0], node.shape[2], node.shape[3]);
            let mut parts: Vec<Vec<f64>> = (0..node.inputs.len())
                .map(|k| Vec::with_capacity(arg(k).len()))
                .collect();
            let mut off = 0;
            for _ in 0..n {
                for (k, part) in parts.iter_mut().enumerate() {
                    let sz = sh(k)[1] * h * w;
                    part.extend_from_slice(&dout[off..off + sz]);
                    off += sz;
                }
            }
            parts.into_iter().zip(wants).map(|(p, &w)| w.then_some(p)).collect()
        }
        Op::ConcatRows => {
            let mut off = 0;
            (0..node.inputs.len())
                .map(|k| {
                    let len = arg(k).len();
                    let part = dout[off..off + len].to_vec();
                    off += len;
                    wants[k].then_some(part)
                })
                .collect()
        }
        Op::SliceRows { start, end } => {
            let stride = numel(&sh(0)[1..]);
            let mut g = vec![0.0; arg(0).len()];
            g[start * stride..end * stride].copy_from_slice(dout);
            vec![Some(g)]
        }
        Op::Conv2d { stride, padding } => {
            let (sx, sw) = (sh(0), sh(1));
            let g = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], *stride, *padding).unwrap();
            let (dx, dw) = kernels::conv2d_backward(arg(0), sx[0], &g, arg(1), sw[0], dout, wants[0], wants[1]);
            let mut r = vec![dx, dw];
            if node.inputs.len() == 3 {
                r.push(wants[2].then(|| kernels::channel_sums(dout, sx[0], sw[0], g.col_cols())));
            }
            r
        }
        Op::ConvTranspose2d {
            stride,
            padding,
            output_padding,
        } => {
            let (sx, sw) = (sh(0), sh(1));
            let g = transpose_geom(sx, sw, *stride, *padding, *output_padding).unwrap();
            let (dx, dw) =
                kernels::conv_transpose2d_backward(arg(0), sx[0], &g, arg(1), sx[1], dout, wants[0], wants[1]);
            let mut r = vec![dx, dw];
            if node.inputs.len() == 3 {
                r.push(wants[2].then(|| kernels::channel_sums(dout, sx[0], sw[1], g.height * g.width)));
            }
            r
        }
        Op::MaxPool2x2 => {
            let Aux::ArgMax(idx) = aux else { unreachable!() };
            let mut g = vec![0.0; arg(0).len()];
            for (d, &i) in dout.iter().zip(idx) {
                g[i] += d;
            }
            vec![Some(g)]
        }
        Op::InstanceNorm { .. } => {
            let Aux::Norm { xhat, inv_std } = aux else {
                unreachable!()
            };
            let s = sh(0);
            let (dx, dg, db) = kernels::instance_norm_backward(dout, xhat, inv_std, s[0], s[1], s[2] * s[3], arg(1));
            vec![Some(dx), Some(dg), Some(db)]
        }
        Op::GlobalAvgPool => {
            let s = sh(0);
            let plane = s[2] * s[3];
            let mut g = Vec::with_capacity(arg(0).len());
            for d in dout {
                g.extend(std::iter::repeat_n(d / plane as f64, plane));
            }
            vec![Some(g)]
        }
        Op::SoftmaxCrossEntropy { labels } => {
            let Aux::Softmax(p) = aux else { unreachable!() };
            let c = sh(0)[1];
            let scale = dout[0] / labels.len() as f64;
            let mut g: Vec<f64> = p.iter().map(|v| v * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                g[i * c + y] -= scale;
            }
            vec![Some(g)]
        }
        Op::L1Loss => {
            let n = arg(0).len() as f64;
            let g: Vec<f64> = arg(0)
                .iter()
                .zip(arg(1))
                .map(|(a, b)| {
                    let s = if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    };
                    s * dout[0] / n
                })
                .collect();
            let neg = wants[1].then(|| g.iter().map(|v| -v).collect());
            vec![wants[0].then_some(g), neg]
        }
        Op::CosineCost => {
            let Aux::Cosine { ua, ub, na, nb } = aux else {
                unreachable!()
            };
            let d = sh(0)[1];
            let (n, m) = (sh(0)[0], sh(1)[0]);
            // C = 1 - ua ubᵀ  ⇒  dua = -dC ub, dub = -dCᵀ ua
            let neg: Vec<f64> = dout.iter().map(|v| -v).collect();
            let da = wants[0].then(|| {
                let mut du = vec![0.0; n * d];
                kernels::gemm(n, m, d, &neg, false, ub, false, 0.0, &mut du);
                unnormalize_grad(&du, ua, na, d)
            });
            let db = wants[1].then(|| {
                let mut du = vec![0.0; m * d];
                kernels::gemm(m, n, d, &neg, true, ua, false, 0.0, &mut du);
                unnormalize_grad(&du, ub, nb, d)
            });
            vec![da, db]
        }
        Op::SinkhornCost { .. } => {
            let Aux::Plan(plan) = aux else { unreachable!() };
            vec![Some(plan.iter().map(|p| p * dout[0]).collect())]
        }
        Op::Input { .. } | Op::Param { .. } | Op::Constant(_) => vec![],
    }
}

/// Back-propagates through `u = x / max(‖x‖, floor)` row by row.
fn unnormalize_grad(du: &[f64], u: &[f64], norms: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(du.len());
    for ((g, uu), &nrm) in du.chunks(d).zip(u.chunks(d)).zip(norms) {
        if nrm < NORM_FLOOR {
            out.extend(g.iter().map(|v| v / NORM_FLOOR));
        } else {
            let proj: f64 = g.iter().zip(uu).map(|(a, b)| a * b).sum();
            out.extend(g.iter().zip(uu).map(|(a, b)| (a - b * proj) / nrm));
        }
    }
    out
}
