//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! Design:
//!
//! - Define-by-run tape: each operation eagerly computes forward values and
//!   appends a node recording its inputs, so the tape order is already a
//!   topological order for the backward sweep.
//! - A [`Graph`] owns the tape; [`Var`] is a cheap handle (graph + node id).
//!   Mixing handles from different graphs is an error, not undefined
//!   behaviour.
//! - `backward` runs at most once per graph, accumulates gradients with
//!   `+=`, and stores them on every `requires_grad` node reached from the
//!   loss.
//! - No implicit broadcasting. The only rank-polymorphic coupling is
//!   scalar×tensor via [`Var::scale`]. Masking is additive
//!   ([`Var::masked_add`]), which keeps the op set closed and the backward
//!   rules trivial.
//! - Empty tensors are rejected at creation; every node holds at least one
//!   element, so reductions are always well defined.
//!
//! Graphs are single-threaded (`Rc<RefCell<_>>`). Parallel work is done by
//! building disjoint graphs on separate threads, which is how the gradient
//! checker uses rayon.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::Error;
use crate::Result;

/// Coefficient of the cubic term in the tanh-based GELU approximation.
const GELU_COEFF: f64 = 0.044715;
/// sqrt(2/pi), the scale inside the GELU tanh argument.
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// One recorded operation. Payload vectors (indices, masks) are data, not
/// differentiable inputs; no gradient flows into them.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    GatherRows(usize, Vec<usize>),
    Slice { src: usize, start: usize },
    MaskedAdd { src: usize },
    LogSoftmax(usize),
    Exp(usize),
    Gelu(usize),
    LayerNorm { src: usize, gain: usize, bias: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Sum(usize),
    Mean(usize),
    SelectPerRow { src: usize, ids: Vec<usize> },
    SelectIndices { src: usize, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// A tape of tensor operations. Cloning is cheap (shared handle).
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one tensor on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn same_graph(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &other.graph.inner) {
            Ok(())
        } else {
            Err(Error::Autodiff("operands belong to different graphs".into()))
        }
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(values.len(), numel(&shape));
        inner.nodes.push(Node { shape, values, grad: None, requires_grad, op });
        Var { graph: self.clone(), id: inner.nodes.len() - 1 }
    }

    /// Creates an input tensor. `values` must match the shape volume, which
    /// must be at least one element.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        let n = numel(shape);
        if n == 0 {
            return Err(Error::Shape(format!("empty tensor shape {}", fmt_shape(shape))));
        }
        if values.len() != n {
            return Err(Error::Shape(format!(
                "leaf values length {} does not match shape {} ({} elements)",
                values.len(),
                fmt_shape(shape),
                n
            )));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// A non-differentiable scalar constant.
    pub fn scalar(&self, value: f64) -> Var {
        self.push(vec![], vec![value], false, Op::Leaf)
    }

    /// A non-differentiable tensor constant.
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    /// Number of nodes recorded so far.
    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Reverse sweep from a scalar `loss`. Populates `grad` on every
    /// `requires_grad` tensor that contributes to the loss. May be called at
    /// most once per graph.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        self.same_graph(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::Autodiff("backward already ran on this graph".into()));
        }
        if !inner.nodes[loss.id].shape.is_empty() {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {}",
                fmt_shape(&inner.nodes[loss.id].shape)
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let gy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&inner.nodes, id, &gy, &mut grads);
            grads[id] = Some(gy);
        }

        for (id, grad) in grads.into_iter().enumerate() {
            if let Some(g) = grad {
                if inner.nodes[id].requires_grad {
                    inner.nodes[id].grad = Some(g);
                }
            }
        }
        inner.backward_done = true;
        Ok(())
    }
}

/// Accumulation buffer for `id`, or `None` when the node does not take
/// gradients (constant subgraphs are skipped entirely).
fn sink<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].values.len()]))
}

fn backprop_node(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = sink(grads, nodes, *a) {
                for (g, &u) in ga.iter_mut().zip(gy) {
                    *g += u;
                }
            }
            if let Some(gb) = sink(grads, nodes, *b) {
                for (g, &u) in gb.iter_mut().zip(gy) {
                    *g += u;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = sink(grads, nodes, *a) {
                for (g, &u) in ga.iter_mut().zip(gy) {
                    *g += u;
                }
            }
            if let Some(gb) = sink(grads, nodes, *b) {
                for (g, &u) in gb.iter_mut().zip(gy) {
                    *g -= u;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].values, &nodes[*b].values);
            if let Some(ga) = sink(grads, nodes, *a) {
                for ((g, &u), &bx) in ga.iter_mut().zip(gy).zip(bv) {
                    *g += u * bx;
                }
            }
            if let Some(gb) = sink(grads, nodes, *b) {
                for ((g, &u), &ax) in gb.iter_mut().zip(gy).zip(av) {
                    *g += u * ax;
                }
            }
        }
        Op::ScalarMul(a, c) => {
            if let Some(ga) = sink(grads, nodes, *a) {
                for (g, &u) in ga.iter_mut().zip(gy) {
                    *g += c * u;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let av = nodes[*a].values.clone();
            let bv = nodes[*b].values.clone();
            if let Some(ga) = sink(grads, nodes, *a) {
                // dA[i,p] += sum_j dY[i,j] * B[p,j]; go through B transposed
                // so the inner loop is contiguous.
                let bt = transpose_vals(&bv, k, n);
                for i in 0..m {
                    let gyr = &gy[i * n..(i + 1) * n];
                    let gar = &mut ga[i * k..(i + 1) * k];
                    for (j, &u) in gyr.iter().enumerate() {
                        let btr = &bt[j * k..(j + 1) * k];
                        for (g, &w) in gar.iter_mut().zip(btr) {
                            *g += u * w;
                        }
                    }
                }
            }
            if let Some(gb) = sink(grads, nodes, *b) {
                // dB[p,j] += sum_i A[i,p] * dY[i,j]
                for i in 0..m {
                    let ar = &av[i * k..(i + 1) * k];
                    let gyr = &gy[i * n..(i + 1) * n];
                    for (p, &w) in ar.iter().enumerate() {
                        let gbr = &mut gb[p * n..(p + 1) * n];
                        for (g, &u) in gbr.iter_mut().zip(gyr) {
                            *g += w * u;
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            if let Some(ga) = sink(grads, nodes, *a) {
                // y[j,i] = x[i,j] => dx[i,j] += dy[j,i]
                for j in 0..c {
                    for i in 0..r {
                        ga[i * c + j] += gy[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = sink(grads, nodes, *a) {
                for (g, &u) in ga.iter_mut().zip(gy) {
                    *g += u;
                }
            }
        }
        Op::GatherRows(a, rows) => {
            let cols = nodes[*a].shape[1];
            if let Some(ga) = sink(grads, nodes, *a) {
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut ga[r * cols..(r + 1) * cols];
                    let src = &gy[i * cols..(i + 1) * cols];
                    for (g, &u) in dst.iter_mut().zip(src) {
                        *g += u;
                    }
                }
            }
        }
        Op::Slice { src, start } => {
            if let Some(ga) = sink(grads, nodes, *src) {
                for (g, &u) in ga[*start..*start + gy.len()].iter_mut().zip(gy) {
                    *g += u;
                }
            }
        }
        Op::MaskedAdd { src } => {
            if let Some(ga) = sink(grads, nodes, *src) {
                for (g, &u) in ga.iter_mut().zip(gy) {
                    *g += u;
                }
            }
        }
        Op::LogSoftmax(a) => {
            let shape = &nodes[id].shape;
            let cols = *shape.last().unwrap();
            let yv = nodes[id].values.clone();
            if let Some(ga) = sink(grads, nodes, *a) {
                for row in 0..yv.len() / cols {
                    let off = row * cols;
                    let dy = &gy[off..off + cols];
                    let y = &yv[off..off + cols];
                    let total: f64 = dy.iter().sum();
                    let gr = &mut ga[off..off + cols];
                    for ((g, &u), &yi) in gr.iter_mut().zip(dy).zip(y) {
                        *g += u - yi.exp() * total;
                    }
                }
            }
        }
        Op::Exp(a) => {
            let yv = nodes[id].values.clone();
            if let Some(ga) = sink(grads, nodes, *a) {
                for ((g, &u), &y) in ga.iter_mut().zip(gy).zip(&yv) {
                    *g += u * y;
                }
            }
        }
        Op::Gelu(a) => {
            let xv = nodes[*a].values.clone();
            if let Some(ga) = sink(grads, nodes, *a) {
                for ((g, &u), &x) in ga.iter_mut().zip(gy).zip(&xv) {
                    *g += u * gelu_derivative(x);
                }
            }
        }
        Op::LayerNorm { src, gain, bias, mean, rstd } => {
            let cols = *nodes[*src].shape.last().unwrap();
            let rows = nodes[*src].values.len() / cols;
            let xv = nodes[*src].values.clone();
            let gv = nodes[*gain].values.clone();
            if let Some(gx) = sink(grads, nodes, *src) {
                for r in 0..rows {
                    let off = r * cols;
                    let x = &xv[off..off + cols];
                    let dy = &gy[off..off + cols];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for i in 0..cols {
                        let xhat = (x[i] - mu) * rs;
                        let dxhat = dy[i] * gv[i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_n = 1.0 / cols as f64;
                    let gxr = &mut gx[off..off + cols];
                    for i in 0..cols {
                        let xhat = (x[i] - mu) * rs;
                        let dxhat = dy[i] * gv[i];
                        gxr[i] += rs * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
            }
            if let Some(gg) = sink(grads, nodes, *gain) {
                for r in 0..rows {
                    let off = r * cols;
                    let (mu, rs) = (mean[r], rstd[r]);
                    for i in 0..cols {
                        let xhat = (xv[off + i] - mu) * rs;
                        gg[i] += gy[off + i] * xhat;
                    }
                }
            }
            if let Some(gb) = sink(grads, nodes, *bias) {
                for r in 0..rows {
                    let off = r * cols;
                    for i in 0..cols {
                        gb[i] += gy[off + i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            let u = gy[0];
            if let Some(ga) = sink(grads, nodes, *a) {
                for g in ga.iter_mut() {
                    *g += u;
                }
            }
        }
        Op::Mean(a) => {
            let u = gy[0] / nodes[*a].values.len() as f64;
            if let Some(ga) = sink(grads, nodes, *a) {
                for g in ga.iter_mut() {
                    *g += u;
                }
            }
        }
        Op::SelectPerRow { src, ids } => {
            let cols = nodes[*src].shape[1];
            if let Some(ga) = sink(grads, nodes, *src) {
                for (i, &c) in ids.iter().enumerate() {
                    ga[i * cols + c] += gy[i];
                }
            }
        }
        Op::SelectIndices { src, ids } => {
            if let Some(ga) = sink(grads, nodes, *src) {
                for (i, &c) in ids.iter().enumerate() {
                    ga[c] += gy[i];
                }
            }
        }
    }
}

fn transpose_vals(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = v[i * cols + j];
        }
    }
    out
}

fn gelu_value(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Var {
    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].values.clone()
    }

    /// Value of a scalar (shape `[]`) tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if !node.shape.is_empty() {
            return Err(Error::Shape(format!(
                "scalar_value on tensor of shape {}",
                fmt_shape(&node.shape)
            )));
        }
        Ok(node.values[0])
    }

    /// Gradient accumulated by `backward`, if this tensor requires grad and
    /// contributed to the loss.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// The graph this tensor lives on.
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn binary_elementwise(&self, other: &Var, name: &str) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>, bool)> {
        self.graph.same_graph(other)?;
        let inner = self.graph.inner.borrow();
        let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "{name}: mismatched shapes {} and {}",
                fmt_shape(&a.shape),
                fmt_shape(&b.shape)
            )));
        }
        Ok((a.values.clone(), b.values.clone(), a.shape.clone(), a.requires_grad || b.requires_grad))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let (av, bv, shape, rg) = self.binary_elementwise(other, "add")?;
        let values = av.iter().zip(&bv).map(|(&x, &y)| x + y).collect();
        Ok(self.graph.push(shape, values, rg, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let (av, bv, shape, rg) = self.binary_elementwise(other, "sub")?;
        let values = av.iter().zip(&bv).map(|(&x, &y)| x - y).collect();
        Ok(self.graph.push(shape, values, rg, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let (av, bv, shape, rg) = self.binary_elementwise(other, "mul")?;
        let values = av.iter().zip(&bv).map(|(&x, &y)| x * y).collect();
        Ok(self.graph.push(shape, values, rg, Op::Mul(self.id, other.id)))
    }

    /// Multiplication by a compile-time-known scalar constant.
    pub fn scale(&self, c: f64) -> Var {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        let values = node.values.iter().map(|&x| c * x).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(inner);
        self.graph.push(shape, values, rg, Op::ScalarMul(self.id, c))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    ///
    /// The inner loops run in i-k-j order so the innermost accumulation is
    /// over contiguous rows; the per-element reduction order over `k` is
    /// fixed, keeping results bit-identical regardless of vector width.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.graph.same_graph(other)?;
        let inner = self.graph.inner.borrow();
        let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
        if a.shape.len() != 2 || b.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul requires 2-D operands, got {} and {}",
                fmt_shape(&a.shape),
                fmt_shape(&b.shape)
            )));
        }
        if a.shape[1] != b.shape[0] {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {} x {}",
                fmt_shape(&a.shape),
                fmt_shape(&b.shape)
            )));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &a.values[i * k..(i + 1) * k];
            let or = &mut out[i * n..(i + 1) * n];
            for (p, &av) in ar.iter().enumerate() {
                let br = &b.values[p * n..(p + 1) * n];
                for (o, &bv) in or.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        Ok(self.graph.push(vec![m, n], out, rg, Op::MatMul(self.id, other.id)))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose requires a 2-D tensor, got {}",
                fmt_shape(&node.shape)
            )));
        }
        let (r, c) = (node.shape[0], node.shape[1]);
        let values = transpose_vals(&node.values, r, c);
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.graph.push(vec![c, r], values, rg, Op::Transpose(self.id)))
    }

    /// Same data, new shape of equal volume.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if numel(shape) != node.values.len() {
            return Err(Error::Shape(format!(
                "reshape from {} to {} changes element count",
                fmt_shape(&node.shape),
                fmt_shape(shape)
            )));
        }
        let (values, rg) = (node.values.clone(), node.requires_grad);
        drop(inner);
        Ok(self.graph.push(shape.to_vec(), values, rg, Op::Reshape(self.id)))
    }

    /// Row lookup on a 2-D tensor: `rows[i]` selects source row `i` of the
    /// output. Indices may repeat; gradients scatter-add back.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "gather_rows requires a 2-D tensor, got {}",
                fmt_shape(&node.shape)
            )));
        }
        if rows.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        let (r, c) = (node.shape[0], node.shape[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidInput(format!(
                "gather_rows index {bad} out of range for {} rows",
                r
            )));
        }
        let mut values = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            values.extend_from_slice(&node.values[i * c..(i + 1) * c]);
        }
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.graph.push(
            vec![rows.len(), c],
            values,
            rg,
            Op::GatherRows(self.id, rows.to_vec()),
        ))
    }

    /// Contiguous sub-range of a 1-D tensor.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.shape.len() != 1 {
            return Err(Error::Shape(format!(
                "slice requires a 1-D tensor, got {}",
                fmt_shape(&node.shape)
            )));
        }
        if len == 0 || start + len > node.values.len() {
            return Err(Error::Shape(format!(
                "slice [{start}, {start}+{len}) out of range for length {}",
                node.values.len()
            )));
        }
        let values = node.values[start..start + len].to_vec();
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.graph.push(vec![len], values, rg, Op::Slice { src: self.id, start }))
    }

    /// Adds `fill` at every position where `mask` is true. Used for causal
    /// attention masking with a large negative fill.
    pub fn masked_add(&self, mask: &[bool], fill: f64) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if mask.len() != node.values.len() {
            return Err(Error::Shape(format!(
                "mask length {} does not match tensor {} ({} elements)",
                mask.len(),
                fmt_shape(&node.shape),
                node.values.len()
            )));
        }
        let values = node
            .values
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { x + fill } else { x })
            .collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(inner);
        Ok(self.graph.push(shape, values, rg, Op::MaskedAdd { src: self.id }))
    }

    /// Log-softmax along the last axis, computed with the max-subtraction
    /// trick so arbitrarily large logits stay finite.
    pub fn log_softmax(&self) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        let cols = match node.shape.last() {
            Some(&c) if c > 0 => c,
            _ => {
                return Err(Error::Shape(format!(
                    "log_softmax needs a non-empty last axis, got {}",
                    fmt_shape(&node.shape)
                )))
            }
        };
        let mut values = vec![0.0; node.values.len()];
        for row in 0..node.values.len() / cols {
            let off = row * cols;
            let x = &node.values[off..off + cols];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &xi in x {
                z += (xi - m).exp();
            }
            let log_z = z.ln();
            for (o, &xi) in values[off..off + cols].iter_mut().zip(x) {
                *o = xi - m - log_z;
            }
        }
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(inner);
        Ok(self.graph.push(shape, values, rg, Op::LogSoftmax(self.id)))
    }

    /// Elementwise exponential. `exp(log_softmax(x))` is the numerically
    /// stable softmax used inside attention.
    pub fn exp(&self) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        let values = node.values.iter().map(|&x| x.exp()).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(inner);
        Ok(self.graph.push(shape, values, rg, Op::Exp(self.id)))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        let values = node.values.iter().map(|&x| gelu_value(x)).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(inner);
        Ok(self.graph.push(shape, values, rg, Op::Gelu(self.id)))
    }

    /// Layer normalization along the last axis with learned gain and bias
    /// (shape `[last]`), epsilon 1e-5 inside the square root.
    pub fn layer_norm(&self, gain: &Var, bias: &Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        self.graph.same_graph(gain)?;
        self.graph.same_graph(bias)?;
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        let cols = match node.shape.last() {
            Some(&c) if c > 0 => c,
            _ => {
                return Err(Error::Shape(format!(
                    "layer_norm needs a non-empty last axis, got {}",
                    fmt_shape(&node.shape)
                )))
            }
        };
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = &inner.nodes[v.id].shape;
            if s.as_slice() != [cols] {
                return Err(Error::Shape(format!(
                    "layer_norm {name} must have shape [{cols}], got {}",
                    fmt_shape(s)
                )));
            }
        }
        let rows = node.values.len() / cols;
        let gv = &inner.nodes[gain.id].values;
        let bv = &inner.nodes[bias.id].values;
        let mut values = vec![0.0; node.values.len()];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let off = r * cols;
            let x = &node.values[off..off + cols];
            let mu = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|&xi| (xi - mu) * (xi - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for i in 0..cols {
                values[off + i] = (x[i] - mu) * rs * gv[i] + bv[i];
            }
        }
        let shape = node.shape.clone();
        let rg = node.requires_grad
            || inner.nodes[gain.id].requires_grad
            || inner.nodes[bias.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            shape,
            values,
            rg,
            Op::LayerNorm { src: self.id, gain: gain.id, bias: bias.id, mean, rstd },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        let total = node.values.iter().sum();
        let rg = node.requires_grad;
        drop(inner);
        self.graph.push(vec![], vec![total], rg, Op::Sum(self.id))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Var {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        let m = node.values.iter().sum::<f64>() / node.values.len() as f64;
        let rg = node.requires_grad;
        drop(inner);
        self.graph.push(vec![], vec![m], rg, Op::Mean(self.id))
    }

    /// Per-row selection on a 2-D tensor: output `[i] = self[i, ids[i]]`.
    pub fn select_per_row(&self, ids: &[usize]) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "select_per_row requires a 2-D tensor, got {}",
                fmt_shape(&node.shape)
            )));
        }
        let (r, c) = (node.shape[0], node.shape[1]);
        if ids.len() != r {
            return Err(Error::Shape(format!(
                "select_per_row needs one index per row: {} rows, {} indices",
                r,
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return Err(Error::InvalidInput(format!(
                "select_per_row index {bad} out of range for {c} columns"
            )));
        }
        let values = ids.iter().enumerate().map(|(i, &j)| node.values[i * c + j]).collect();
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.graph.push(
            vec![r],
            values,
            rg,
            Op::SelectPerRow { src: self.id, ids: ids.to_vec() },
        ))
    }

    /// Index selection on a 1-D tensor: output `[i] = self[ids[i]]`.
    /// Indices may repeat; gradients scatter-add.
    pub fn select_indices(&self, ids: &[usize]) -> Result<Var> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.shape.len() != 1 {
            return Err(Error::Shape(format!(
                "select_indices requires a 1-D tensor, got {}",
                fmt_shape(&node.shape)
            )));
        }
        if ids.is_empty() {
            return Err(Error::Shape("select_indices with no indices".into()));
        }
        let n = node.values.len();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidInput(format!(
                "select_indices index {bad} out of range for length {n}"
            )));
        }
        let values = ids.iter().map(|&i| node.values[i]).collect();
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.graph.push(
            vec![ids.len()],
            values,
            rg,
            Op::SelectIndices { src: self.id, ids: ids.to_vec() },
        ))
    }
}
