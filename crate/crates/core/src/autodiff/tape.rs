use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// An operation whose forward and vector-Jacobian product are supplied from
/// outside the tape (e.g. an implicit layer such as a manifold projection).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>>;

    fn forward(&self, inputs: &[&Tensor]) -> Result<CustomForward>;

    /// Pulls `grad` (shaped like the output) back to one gradient per input.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: &[Tensor],
        grad: &Tensor,
    ) -> Result<Vec<Tensor>>;
}

pub struct CustomForward {
    pub value: Tensor,
    /// Intermediates kept for the backward pass.
    pub saved: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Data,
    /// No value until bound by [`Tape::forward`].
    Placeholder,
}

#[derive(Clone)]
enum Op {
    Leaf(LeafKind),
    Const,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    AddRow,
    Tanh,
    Softplus,
    Ln,
    Sqrt,
    Exp,
    Asinh,
    Sin,
    Cos,
    Square,
    Recip,
    Cross,
    Sum,
    Mean,
    Concat,
    Slice { start: usize, len: usize },
    Index(usize),
    Column(usize),
    StackColumns,
    Custom(Arc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(LeafKind::Param) => "param",
            Op::Leaf(LeafKind::Data) => "leaf",
            Op::Leaf(LeafKind::Placeholder) => "input",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul => "matmul",
            Op::AddRow => "add_row",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Ln => "log",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Asinh => "arcsinh",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Square => "square",
            Op::Recip => "reciprocal",
            Op::Cross => "cross",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Index(_) => "index",
            Op::Column(_) => "column",
            Op::StackColumns => "stack_columns",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Option<Tensor>,
    saved: Vec<Tensor>,
    requires_grad: bool,
}

/// Reverse-mode tape. Operations record eagerly: every node whose inputs
/// carry values is evaluated at record time. Placeholder leaves defer
/// evaluation until [`Tape::forward`] binds them.
///
/// A tape is single-owner while recording (interior mutability through
/// `RefCell`); separate tapes may be used from separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf bindings used when replaying a tape.
#[derive(Default, Clone, Debug)]
pub struct Bindings(HashMap<NodeId, Tensor>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, leaf: Var<'_>, value: Tensor) -> Self {
        self.0.insert(leaf.id, value);
        self
    }

    pub fn insert(&mut self, leaf: Var<'_>, value: Tensor) {
        self.0.insert(leaf.id, value);
    }
}

/// Gradients of a root with respect to every leaf reachable from it.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: HashMap<NodeId, Tensor>,
    shapes: HashMap<NodeId, Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, leaf: Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&leaf.id)
    }

    /// Gradient for `leaf`, zero when the root does not depend on it.
    pub fn wrt(&self, leaf: Var<'_>) -> Tensor {
        match self.by_leaf.get(&leaf.id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes.get(&leaf.id).cloned().unwrap_or_else(|| leaf.shape())),
        }
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable parameter leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(LeafKind::Param, value.shape().to_vec(), Some(value))
    }

    /// Data leaf: differentiable input that is not a parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(LeafKind::Data, value.shape().to_vec(), Some(value))
    }

    /// Unbound leaf of fixed shape; its value is supplied by [`Tape::forward`].
    pub fn input(&self, shape: &[usize]) -> Var<'_> {
        self.push_leaf(LeafKind::Placeholder, shape.to_vec(), None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let shape = value.shape().to_vec();
        self.push_raw(Op::Const, Vec::new(), shape, Some(value), Vec::new(), false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&self, kind: LeafKind, shape: Vec<usize>, value: Option<Tensor>) -> Var<'_> {
        self.push_raw(Op::Leaf(kind), Vec::new(), shape, value, Vec::new(), true)
    }

    fn push_raw(
        &self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        value: Option<Tensor>,
        saved: Vec<Tensor>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, inputs, shape, value, saved, requires_grad });
        Var { tape: self, id }
    }

    fn record(&self, op: Op, inputs: &[Var<'_>]) -> Result<Var<'_>> {
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        let (shape, value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let shapes: Vec<&[usize]> = ids.iter().map(|&i| nodes[i].shape.as_slice()).collect();
            let shape = infer_shape(&op, &shapes)?;
            let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
            let values: Option<Vec<&Tensor>> = ids.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let value = values.map(|vals| eval(&op, &vals, &shape));
            (shape, value, requires_grad)
        };
        Ok(self.push_raw(op, ids, shape, value, Vec::new(), requires_grad))
    }

    fn record_or_panic(&self, op: Op, inputs: &[Var<'_>]) -> Var<'_> {
        match self.record(op, inputs) {
            Ok(v) => v,
            Err(e) => panic!("{e}"),
        }
    }

    /// Records a custom operation. Evaluates it immediately when all inputs
    /// carry values and returns the saved intermediates alongside the node.
    pub fn custom(&self, op: Arc<dyn CustomOp>, inputs: &[Var<'_>]) -> Result<(Var<'_>, Vec<Tensor>)> {
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        let (shape, forward, requires_grad) = {
            let nodes = self.nodes.borrow();
            let shapes: Vec<&[usize]> = ids.iter().map(|&i| nodes[i].shape.as_slice()).collect();
            let shape = op.output_shape(&shapes)?;
            let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
            let values: Option<Vec<&Tensor>> = ids.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let forward = match values {
                Some(vals) => Some(op.forward(&vals)?),
                None => None,
            };
            (shape, forward, requires_grad)
        };
        let (value, saved) = match forward {
            Some(f) => (Some(f.value), f.saved),
            None => (None, Vec::new()),
        };
        let var = self.push_raw(Op::Custom(op), ids, shape, value, saved.clone(), requires_grad);
        Ok((var, saved))
    }

    pub fn value(&self, v: Var<'_>) -> Result<Tensor> {
        self.nodes.borrow()[v.id]
            .value
            .clone()
            .ok_or_else(|| Error::State(format!("node {} has not been evaluated", v.id)))
    }

    /// First node (in recording order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().find_map(|(i, n)| match &n.value {
            Some(v) if !v.is_finite() => Some((i, n.op.name())),
            _ => None,
        })
    }

    /// Re-evaluates every node up to `root` with the given leaf bindings and
    /// returns the root value. Unbound leaves keep their recorded values;
    /// unbound placeholders are an error.
    pub fn forward(&self, bindings: &Bindings, root: Var<'_>) -> Result<Tensor> {
        let mut nodes = self.nodes.borrow_mut();
        for id in 0..=root.id {
            let (head, tail) = nodes.split_at_mut(id);
            let node = &mut tail[0];
            match &node.op {
                Op::Leaf(kind) => {
                    if let Some(v) = bindings.0.get(&id) {
                        if v.shape() != node.shape.as_slice() {
                            return Err(Error::structural(format!(
                                "leaf {id} expects shape {:?}, bound {:?}",
                                node.shape,
                                v.shape()
                            )));
                        }
                        node.value = Some(v.clone());
                    } else if *kind == LeafKind::Placeholder && node.value.is_none() {
                        return Err(Error::structural(format!("leaf {id} is unbound")));
                    }
                }
                Op::Const => {}
                op => {
                    let vals: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|&i| head[i].value.as_ref().expect("inputs evaluated in order"))
                        .collect();
                    match op {
                        Op::Custom(c) => {
                            let f = c.forward(&vals)?;
                            node.value = Some(f.value);
                            node.saved = f.saved;
                        }
                        _ => node.value = Some(eval(op, &vals, &node.shape)),
                    }
                }
            }
            let value = node.value.as_ref().expect("evaluated above");
            if let Some(pos) = value.first_non_finite() {
                return Err(Error::divergence(
                    format!("node {id} ({})", node.op.name()),
                    format!("non-finite value {} at element {pos}", value.data()[pos]),
                ));
            }
        }
        Ok(nodes[root.id].value.clone().expect("root evaluated"))
    }

    /// Reverse sweep from `root` seeded with `seed`.
    pub fn backward(&self, root: Var<'_>, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.is_none() {
            return Err(Error::State("backward called before forward".into()));
        }
        if seed.shape() != root_node.shape.as_slice() {
            return Err(Error::structural(format!(
                "seed shape {:?} does not match root shape {:?}",
                seed.shape(),
                root_node.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed);
        let mut out = Gradients::default();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf(_) = node.op {
                out.shapes.insert(id, node.shape.clone());
                out.by_leaf.insert(id, g);
                continue;
            }
            let vals: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&i| {
                    nodes[i]
                        .value
                        .as_ref()
                        .ok_or_else(|| Error::State(format!("node {i} has no value; run forward first")))
                })
                .collect::<Result<_>>()?;
            let output = node.value.as_ref().expect("checked above");
            let input_grads = backprop(&node.op, &vals, output, &node.saved, &g)?;
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(out)
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        self.record_or_panic(Op::Concat, parts)
    }

    /// Stacks `[rows]` columns (or broadcast scalars) into a `[rows, k]` matrix.
    pub fn stack_columns<'t>(&'t self, cols: &[Var<'t>]) -> Var<'t> {
        self.record_or_panic(Op::StackColumns, cols)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn try_value(&self) -> Result<Tensor> {
        self.tape.value(*self)
    }

    /// Recorded value. Panics on an unevaluated placeholder.
    pub fn value(&self) -> Tensor {
        self.try_value().expect("value of an unbound placeholder")
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op) -> Var<'t> {
        self.tape.record_or_panic(op, &[self])
    }

    fn binary(self, op: Op, other: Var<'t>) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "operands recorded on different tapes");
        self.tape.record_or_panic(op, &[self, other])
    }

    pub fn try_add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(Op::Add, &[self, other])
    }

    pub fn try_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(Op::Mul, &[self, other])
    }

    pub fn try_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(Op::MatMul, &[self, other])
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(Op::MatMul, other)
    }

    /// Adds a `[cols]` row vector to every row of a `[rows, cols]` matrix.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(Op::AddRow, row)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(c))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp)
    }

    pub fn asinh(self) -> Var<'t> {
        self.unary(Op::Asinh)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip)
    }

    pub fn cross(self, other: Var<'t>) -> Var<'t> {
        self.binary(Op::Cross, other)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum)
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean)
    }

    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        self.unary(Op::Slice { start, len })
    }

    /// Element `i` of a vector as a scalar.
    pub fn index(self, i: usize) -> Var<'t> {
        self.unary(Op::Index(i))
    }

    /// Column `j` of a matrix as a `[rows]` vector.
    pub fn column(self, j: usize) -> Var<'t> {
        self.unary(Op::Column(j))
    }

    /// Splits a vector into scalars.
    pub fn components(self) -> Vec<Var<'t>> {
        (0..self.len()).map(|i| self.index(i)).collect()
    }

    /// Splits a `[rows, cols]` matrix into `[rows]` columns.
    pub fn columns(self) -> Vec<Var<'t>> {
        let shape = self.shape();
        (0..shape[1]).map(|j| self.column(j)).collect()
    }

    /// Constant on the same tape.
    pub fn constant_like(self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(Op::Add, rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(Op::Sub, rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(Op::Mul, rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if a.is_empty() {
        Ok(b.to_vec())
    } else if b.is_empty() {
        Ok(a.to_vec())
    } else {
        Err(Error::structural(format!("{op}: incompatible shapes {a:?} and {b:?}")))
    }
}

fn infer_shape(op: &Op, s: &[&[usize]]) -> Result<Vec<usize>> {
    match op {
        Op::Add => broadcast_shape(s[0], s[1], "add"),
        Op::Sub => broadcast_shape(s[0], s[1], "sub"),
        Op::Mul => broadcast_shape(s[0], s[1], "mul"),
        Op::MatMul => match (s[0], s[1]) {
            ([k], [k2, c]) if k == k2 => Ok(vec![*c]),
            ([r, k], [k2, c]) if k == k2 => Ok(vec![*r, *c]),
            (a, b) => Err(Error::structural(format!("matmul: incompatible shapes {a:?} and {b:?}"))),
        },
        Op::AddRow => match (s[0], s[1]) {
            ([r, c], [c2]) if c == c2 => Ok(vec![*r, *c]),
            (a, b) => Err(Error::structural(format!("add_row: incompatible shapes {a:?} and {b:?}"))),
        },
        Op::Cross => match (s[0], s[1]) {
            ([3], [3]) => Ok(vec![3]),
            (a, b) => Err(Error::structural(format!("cross: needs two 3-vectors, got {a:?} and {b:?}"))),
        },
        Op::Sum | Op::Mean => Ok(Vec::new()),
        Op::Concat => {
            let mut total = 0;
            for shape in s {
                match shape {
                    [] => total += 1,
                    [n] => total += n,
                    other => return Err(Error::structural(format!("concat: rank-2 part {other:?}"))),
                }
            }
            Ok(vec![total])
        }
        Op::Slice { start, len } => match s[0] {
            [n] if start + len <= *n => Ok(vec![*len]),
            other => Err(Error::structural(format!("slice {start}..{} of {other:?}", start + len))),
        },
        Op::Index(i) => match s[0] {
            [n] if i < n => Ok(Vec::new()),
            other => Err(Error::structural(format!("index {i} of {other:?}"))),
        },
        Op::Column(j) => match s[0] {
            [r, c] if j < c => Ok(vec![*r]),
            other => Err(Error::structural(format!("column {j} of {other:?}"))),
        },
        Op::StackColumns => {
            let mut rows = None;
            for shape in s {
                match shape {
                    [] => {}
                    [r] => match rows {
                        None => rows = Some(*r),
                        Some(existing) if existing == *r => {}
                        Some(existing) => {
                            return Err(Error::structural(format!(
                                "stack_columns: column lengths {existing} and {r}"
                            )))
                        }
                    },
                    other => return Err(Error::structural(format!("stack_columns: part {other:?}"))),
                }
            }
            let rows = rows.ok_or_else(|| Error::structural("stack_columns: no vector column"))?;
            Ok(vec![rows, s.len()])
        }
        Op::Leaf(_) | Op::Const | Op::Custom(_) => unreachable!("shape supplied by caller"),
        _ => Ok(s[0].to_vec()),
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = if a.len() == b.len() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.is_scalar() {
        let x = a.item();
        b.data().iter().map(|&y| f(x, y)).collect()
    } else {
        let y = b.item();
        a.data().iter().map(|&x| f(x, y)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("shape inferred")
}

fn matmul(a: &Tensor, b: &Tensor, shape: &[usize]) -> Tensor {
    let (r, k) = (a.rows(), a.cols());
    let c = b.cols();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * c..(p + 1) * c];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape inferred")
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn cross3(a: &[f64], b: &[f64]) -> Vec<f64> {
    vec![a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn eval(op: &Op, v: &[&Tensor], shape: &[usize]) -> Tensor {
    match op {
        Op::Add => zip_broadcast(v[0], v[1], shape, |a, b| a + b),
        Op::Sub => zip_broadcast(v[0], v[1], shape, |a, b| a - b),
        Op::Mul => zip_broadcast(v[0], v[1], shape, |a, b| a * b),
        Op::Neg => v[0].map(|a| -a),
        Op::Scale(c) => v[0].map(|a| a * c),
        Op::AddScalar(c) => v[0].map(|a| a + c),
        Op::MatMul => matmul(v[0], v[1], shape),
        Op::AddRow => {
            let c = v[1].len();
            let data = v[0].data().iter().enumerate().map(|(i, &a)| a + v[1].data()[i % c]).collect();
            Tensor::new(shape.to_vec(), data).expect("shape inferred")
        }
        Op::Tanh => v[0].map(f64::tanh),
        Op::Softplus => v[0].map(softplus),
        Op::Ln => v[0].map(f64::ln),
        Op::Sqrt => v[0].map(f64::sqrt),
        Op::Exp => v[0].map(f64::exp),
        Op::Asinh => v[0].map(f64::asinh),
        Op::Sin => v[0].map(f64::sin),
        Op::Cos => v[0].map(f64::cos),
        Op::Square => v[0].map(|a| a * a),
        Op::Recip => v[0].map(|a| 1.0 / a),
        Op::Cross => Tensor::vector(cross3(v[0].data(), v[1].data())),
        Op::Sum => Tensor::scalar(v[0].sum()),
        Op::Mean => Tensor::scalar(v[0].sum() / v[0].len() as f64),
        Op::Concat => Tensor::vector(v.iter().flat_map(|t| t.data().iter().copied()).collect()),
        Op::Slice { start, len } => Tensor::vector(v[0].data()[*start..start + len].to_vec()),
        Op::Index(i) => Tensor::scalar(v[0].data()[*i]),
        Op::Column(j) => {
            let c = v[0].cols();
            Tensor::vector(v[0].data().iter().skip(*j).step_by(c).copied().collect())
        }
        Op::StackColumns => {
            let (rows, k) = (shape[0], shape[1]);
            let mut data = vec![0.0; rows * k];
            for (j, col) in v.iter().enumerate() {
                for i in 0..rows {
                    data[i * k + j] = if col.is_scalar() { col.item() } else { col.data()[i] };
                }
            }
            Tensor::new(shape.to_vec(), data).expect("shape inferred")
        }
        Op::Leaf(_) | Op::Const | Op::Custom(_) => unreachable!("not evaluated here"),
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(grad: Tensor, operand: &Tensor) -> Tensor {
    if operand.is_scalar() && !grad.is_scalar() {
        Tensor::scalar(grad.sum())
    } else {
        grad
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn transpose_matmul_left(g: &Tensor, b: &Tensor, a_shape: &[usize]) -> Tensor {
    // dA = G · Bᵀ
    let (r, c) = (g.rows(), g.cols());
    let k = b.rows();
    let (gd, bd) = (g.data(), b.data());
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..c {
                s += gd[i * c + j] * bd[p * c + j];
            }
            out[i * k + p] = s;
        }
    }
    Tensor::new(a_shape.to_vec(), out).expect("operand shape")
}

fn transpose_matmul_right(a: &Tensor, g: &Tensor, b_shape: &[usize]) -> Tensor {
    // dB = Aᵀ · G
    let (r, k) = (a.rows(), a.cols());
    let c = g.cols();
    let (ad, gd) = (a.data(), g.data());
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..c {
                out[p * c + j] += aip * gd[i * c + j];
            }
        }
    }
    Tensor::new(b_shape.to_vec(), out).expect("operand shape")
}

fn backprop(op: &Op, v: &[&Tensor], out: &Tensor, saved: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
    let grads = match op {
        Op::Add => vec![reduce_to(g.clone(), v[0]), reduce_to(g.clone(), v[1])],
        Op::Sub => vec![reduce_to(g.clone(), v[0]), reduce_to(g.map(|x| -x), v[1])],
        Op::Mul => {
            let ga = zip_broadcast(g, v[1], g.shape(), |gv, b| gv * b);
            let gb = zip_broadcast(g, v[0], g.shape(), |gv, a| gv * a);
            vec![reduce_to(ga, v[0]), reduce_to(gb, v[1])]
        }
        Op::Neg => vec![g.map(|x| -x)],
        Op::Scale(c) => vec![g.map(|x| x * c)],
        Op::AddScalar(_) => vec![g.clone()],
        Op::MatMul => vec![
            transpose_matmul_left(g, v[1], v[0].shape()),
            transpose_matmul_right(v[0], g, v[1].shape()),
        ],
        Op::AddRow => {
            let c = v[1].len();
            let mut gb = vec![0.0; c];
            for (i, &x) in g.data().iter().enumerate() {
                gb[i % c] += x;
            }
            vec![g.clone(), Tensor::vector(gb)]
        }
        Op::Tanh => vec![elementwise(g, out, |gv, y| gv * (1.0 - y * y))],
        Op::Softplus => vec![elementwise(g, v[0], |gv, x| gv * sigmoid(x))],
        Op::Ln => vec![elementwise(g, v[0], |gv, x| gv / x)],
        Op::Sqrt => vec![elementwise(g, out, |gv, y| gv / (2.0 * y))],
        Op::Exp => vec![elementwise(g, out, |gv, y| gv * y)],
        Op::Asinh => vec![elementwise(g, v[0], |gv, x| gv / (x * x + 1.0).sqrt())],
        Op::Sin => vec![elementwise(g, v[0], |gv, x| gv * x.cos())],
        Op::Cos => vec![elementwise(g, v[0], |gv, x| -gv * x.sin())],
        Op::Square => vec![elementwise(g, v[0], |gv, x| 2.0 * x * gv)],
        Op::Recip => vec![elementwise(g, out, |gv, y| -gv * y * y)],
        Op::Cross => vec![
            Tensor::vector(cross3(v[1].data(), g.data())),
            Tensor::vector(cross3(g.data(), v[0].data())),
        ],
        Op::Sum => vec![Tensor::filled(v[0].shape(), g.item())],
        Op::Mean => vec![Tensor::filled(v[0].shape(), g.item() / v[0].len() as f64)],
        Op::Concat => {
            let mut offset = 0;
            v.iter()
                .map(|part| {
                    let n = part.len();
                    let piece = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    Tensor::new(part.shape().to_vec(), piece).expect("part shape")
                })
                .collect()
        }
        Op::Slice { start, len } => {
            let mut full = Tensor::zeros(v[0].shape());
            full.data_mut()[*start..start + len].copy_from_slice(g.data());
            vec![full]
        }
        Op::Index(i) => {
            let mut full = Tensor::zeros(v[0].shape());
            full.data_mut()[*i] = g.item();
            vec![full]
        }
        Op::Column(j) => {
            let mut full = Tensor::zeros(v[0].shape());
            let c = v[0].cols();
            for (i, &x) in g.data().iter().enumerate() {
                full.data_mut()[i * c + j] = x;
            }
            vec![full]
        }
        Op::StackColumns => {
            let k = g.cols();
            v.iter()
                .enumerate()
                .map(|(j, col)| {
                    let column: Vec<f64> = g.data().iter().skip(j).step_by(k).copied().collect();
                    if col.is_scalar() {
                        Tensor::scalar(column.iter().sum())
                    } else {
                        Tensor::vector(column)
                    }
                })
                .collect()
        }
        Op::Custom(c) => c.backward(v, out, saved, g)?,
        Op::Leaf(_) | Op::Const => Vec::new(),
    };
    Ok(grads)
}
