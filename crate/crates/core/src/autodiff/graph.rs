use crate::error::{Error, Result};

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceMode {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    Abs,
    Sqrt,
    Softplus,
    Square,
    Neg,
}

/// Backward rule for a custom operation: `(inputs, output, output grad) -> input grads`.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Reduce {
        input: Var,
        axes: Vec<usize>,
        mode: ReduceMode,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the index order is a topological order and backward replays it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of leaf tensors produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ([n, p], [p2, q]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let (n, p, p2, q) = (*n, *p, *p2, *q);
        if p != p2 {
            return Err(Error::dim(format!("matmul inner extents {p} != {p2}")));
        }
        let mut out = vec![0.0; n * q];
        gemm_acc(ta.data(), tb.data(), &mut out, n, p, q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, q], out)?, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `input[N×C×H×W]` with `kernel[F×C×kH×kW]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = geom.forward(self.value(input).data(), self.value(kernel).data());
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            Tensor::new(vec![geom.n, geom.f, geom.oh, geom.ow], out)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let out = self.value(a).map(|x| unary_forward(u, x));
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, u), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    /// Subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Gradient taken as 0 where the output is exactly 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    // ---------------------------------------------------------- structural

    /// Reduces `axes` away. Reducing every axis yields a scalar.
    pub fn reduce(&mut self, a: Var, axes: &[usize], mode: ReduceMode) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::dim(format!("axis {bad} invalid for shape {shape:?}")));
        }
        let (out_shape, map) = reduce_map(&shape, &axes);
        let out_len: usize = out_shape.iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; out_len];
        let mut argmax = Vec::new();
        match mode {
            ReduceMode::Sum | ReduceMode::Mean => {
                for (i, &o) in map.iter().enumerate() {
                    out[o] += src[i];
                }
                if mode == ReduceMode::Mean {
                    let count = (src.len() / out_len) as f64;
                    out.iter_mut().for_each(|v| *v /= count);
                }
            }
            ReduceMode::Max => {
                out.fill(f64::NEG_INFINITY);
                argmax = vec![usize::MAX; out_len];
                for (i, &o) in map.iter().enumerate() {
                    // strict comparison keeps the first index on ties
                    if argmax[o] == usize::MAX || src[i] > out[o] {
                        out[o] = src[i];
                        argmax[o] = i;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce {
                input: a,
                axes,
                mode,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, ReduceMode::Sum).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, ReduceMode::Mean).expect("all axes are valid")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow({axis}, {start}, {len}) invalid for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { input: a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of nothing"))?;
        let ref_shape = self.shape(*first).to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::dim(format!("concat axis {axis} for shape {ref_shape:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat shapes {ref_shape:?} and {s:?} differ off axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&ref_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = ref_shape;
        out_shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("log_softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|k| (src[at(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[at(k)] = src[at(k)] - lse;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { input: a, axis }, rg))
    }

    /// Records an operation with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: BackwardFn) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a one-element `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gi) in self.input_grads(node, &g)? {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let y = &node.value;
        let v = |var: Var| self.value(var);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (n, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut ga = vec![0.0; n * p];
                gemm_nt_acc(g.data(), tb.data(), &mut ga, n, q, p);
                let mut gb = vec![0.0; p * q];
                gemm_tn_acc(ta.data(), g.data(), &mut gb, n, p, q);
                vec![
                    (*a, Tensor::new(vec![n, p], ga)?),
                    (*b, Tensor::new(vec![p, q], gb)?),
                ]
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (ti, tk) = (v(*input), v(*kernel));
                let geom = ConvGeom::new(ti.shape(), tk.shape(), *stride, *padding)?;
                let (gi, gk) = geom.backward(ti.data(), tk.data(), g.data());
                vec![
                    (*input, Tensor::new(ti.shape().to_vec(), gi)?),
                    (*kernel, Tensor::new(tk.shape().to_vec(), gk)?),
                ]
            }
            Op::Add(a, b) => vec![
                (*a, sum_to_shape(g, v(*a).shape())),
                (*b, sum_to_shape(g, v(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, sum_to_shape(g, v(*a).shape())),
                (*b, sum_to_shape(&g.map(|x| -x), v(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let ga = broadcast_binary(g, v(*b), |x, y| x * y)?;
                let gb = broadcast_binary(g, v(*a), |x, y| x * y)?;
                vec![
                    (*a, sum_to_shape(&ga, v(*a).shape())),
                    (*b, sum_to_shape(&gb, v(*b).shape())),
                ]
            }
            Op::Div(a, b) => {
                let ga = broadcast_binary(g, v(*b), |x, y| x / y)?;
                // d(a/b)/db = -(a/b)/b = -y/b
                let gy = g.zip_map(y, |x, yv| -x * yv);
                let gb = broadcast_binary(&gy, v(*b), |x, bv| x / bv)?;
                vec![
                    (*a, sum_to_shape(&ga, v(*a).shape())),
                    (*b, sum_to_shape(&gb, v(*b).shape())),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Unary(a, u) => {
                let x = v(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * unary_derivative(*u, xi, yi))
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Reduce {
                input,
                axes,
                mode,
                argmax,
            } => {
                let shape = v(*input).shape();
                let n_in: usize = shape.iter().product();
                let mut gi = vec![0.0; n_in];
                match mode {
                    ReduceMode::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            gi[i] += g.data()[o];
                        }
                    }
                    ReduceMode::Sum | ReduceMode::Mean => {
                        let (_, map) = reduce_map(shape, axes);
                        let w = if *mode == ReduceMode::Mean {
                            1.0 / (n_in / g.len()) as f64
                        } else {
                            1.0
                        };
                        for (i, &o) in map.iter().enumerate() {
                            gi[i] = g.data()[o] * w;
                        }
                    }
                }
                vec![(*input, Tensor::new(shape.to_vec(), gi)?)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(v(*a).shape())?)],
            Op::Narrow { input, axis, start } => {
                let shape = v(*input).shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let len = y.shape()[*axis];
                let mut gi = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gi[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, Tensor::new(shape.to_vec(), gi)?)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &p in inputs {
                    let shape = v(p).shape();
                    let n = shape[*axis];
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gp.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    offset += n;
                    res.push((p, Tensor::new(shape.to_vec(), gp)?));
                }
                res
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let gsum: f64 = (0..n).map(|k| g.data()[at(k)]).sum();
                        for k in 0..n {
                            gi[at(k)] = g.data()[at(k)] - y.data()[at(k)].exp() * gsum;
                        }
                    }
                }
                vec![(*input, Tensor::new(y.shape().to_vec(), gi)?)]
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| v(i)).collect();
                let gs = backward(&ins, y, g);
                if gs.len() != inputs.len() {
                    return Err(Error::dim("custom backward returned wrong arity"));
                }
                for (t, gt) in ins.iter().zip(&gs) {
                    if t.shape() != gt.shape() {
                        return Err(Error::dim("custom backward returned wrong shape"));
                    }
                }
                inputs.iter().copied().zip(gs).collect()
            }
        };
        Ok(out)
    }
}

fn unary_forward(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Relu => x.max(0.0),
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Sqrt => x.sqrt(),
        Unary::Softplus => softplus(x),
        Unary::Square => x * x,
        Unary::Neg => -x,
    }
}

fn unary_derivative(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Softplus => sigmoid(x),
        Unary::Square => 2.0 * x,
        Unary::Neg => -1.0,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(prod(shape[..axis]), shape[axis], prod(shape[axis+1..]))`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Output shape and, for every input element, the flat index it reduces into.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &e)| e)
        .collect();
    // stride of each input axis in the output, 0 for reduced axes
    let mut out_strides = vec![0usize; shape.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            out_strides[d] = s;
            s *= shape[d];
        }
    }
    (out_shape, index_map(shape, &out_strides))
}

/// For every position of `shape` (row-major), `Σ idx_d * strides_d`.
fn index_map(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Strides of `src` aligned to trailing axes of `out`, 0 where broadcast.
fn broadcast_strides(out: &[usize], src: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let lead = out.len() - src.len();
    let mut s = 1;
    for d in (0..src.len()).rev() {
        if src[d] != 1 {
            strides[lead + d] = s;
        }
        s *= src[d];
    }
    strides
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let ia = index_map(&shape, &broadcast_strides(&shape, a.shape()));
    let ib = index_map(&shape, &broadcast_strides(&shape, b.shape()));
    let (da, db) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(shape, data)
}

/// Sums a broadcast gradient back down to `target` shape.
fn sum_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let map = index_map(g.shape(), &broadcast_strides(g.shape(), target));
    let n: usize = target.iter().product();
    let mut out = vec![0.0; n];
    for (&o, &v) in map.iter().zip(g.data()) {
        out[o] += v;
    }
    Tensor::new(target.to_vec(), out).expect("target shape is valid")
}

/// Shape bookkeeping for a 2-D cross-correlation.
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let ([n, c, h, w], [f, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::dim(format!(
                "conv2d needs 4-D input and kernel, got {input:?} and {kernel:?}"
            )));
        };
        if c != kc {
            return Err(Error::dim(format!("conv2d channels {c} != kernel channels {kc}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if *kh > h + 2 * pad || *kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            n: *n,
            c: *c,
            h: *h,
            w: *w,
            f: *f,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), if inside.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// cols[patch × (oh·ow)] for one sample.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let npos = self.oh * self.ow;
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row * npos + oy * self.ow + ox] = match self.src(oy, ox, ky, kx) {
                                Some((y, x)) => img[(c * self.h + y) * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let npos = self.oh * self.ow;
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.src(oy, ox, ky, kx) {
                                img[(c * self.h + y) * self.w + x] += cols[row * npos + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (npos, patch) = (self.oh * self.ow, self.patch());
        let img_len = self.c * self.h * self.w;
        let mut out = vec![0.0; self.n * self.f * npos];
        let mut cols = vec![0.0; patch * npos];
        for s in 0..self.n {
            self.im2col(&input[s * img_len..(s + 1) * img_len], &mut cols);
            let o = &mut out[s * self.f * npos..(s + 1) * self.f * npos];
            gemm_acc(kernel, &cols, o, self.f, patch, npos);
        }
        out
    }

    fn backward(&self, input: &[f64], kernel: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (npos, patch) = (self.oh * self.ow, self.patch());
        let img_len = self.c * self.h * self.w;
        let mut gi = vec![0.0; input.len()];
        let mut gk = vec![0.0; kernel.len()];
        let mut cols = vec![0.0; patch * npos];
        let mut gcols = vec![0.0; patch * npos];
        for s in 0..self.n {
            self.im2col(&input[s * img_len..(s + 1) * img_len], &mut cols);
            let gs = &g[s * self.f * npos..(s + 1) * self.f * npos];
            // gk[f×patch] += gs[f×npos] · colsᵀ
            gemm_nt_acc(gs, &cols, &mut gk, self.f, npos, patch);
            // gcols[patch×npos] = kernelᵀ · gs
            gcols.fill(0.0);
            gemm_tn_acc(kernel, gs, &mut gcols, self.f, patch, npos);
            self.col2im(&gcols, &mut gi[s * img_len..(s + 1) * img_len]);
        }
        (gi, gk)
    }
}
