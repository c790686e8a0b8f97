//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive executed through a [`Var`] appends a node to its [`Tape`].
//! Nodes only reference earlier nodes, so a single reverse sweep over the
//! tape visits each node once and accumulates vector-Jacobian products.
//!
//! ```
//! use tcc::tape::Tape;
//! use tcc::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let loss = p.mul(&p).unwrap().sum();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&p).data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;

use crate::error::{ensure, Result, TccError};
use crate::tensor::{self, gemm, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    SubCol(usize, usize),
    PairwiseSqDist(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Reshape(usize),
    SelectRows(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    External(Vec<(usize, Tensor)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero when `v` does not influence the output.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A scalar whose value and partial derivatives were computed elsewhere.
    ///
    /// Each `(input, partial)` pair contributes `upstream · partial` to the
    /// gradient of `input` during the backward sweep.
    pub fn external_scalar<'t>(&'t self, value: f64, parts: Vec<(Var<'t>, Tensor)>) -> Result<Var<'t>> {
        let mut ids = Vec::with_capacity(parts.len());
        let mut rg = false;
        for (v, p) in parts {
            self.check_owner(&v)?;
            let shape = self.shape_of(v.id);
            ensure!(
                shape.iter().product::<usize>() == p.len(),
                Shape,
                "external partial has {} values for input of shape {:?}",
                p.len(),
                shape
            );
            rg |= self.requires(v.id);
            ids.push((v.id, p));
        }
        Ok(self.push(Tensor::scalar(value), Op::External(ids), rg))
    }

    fn check_owner(&self, v: &Var<'_>) -> Result<()> {
        ensure!(
            std::ptr::eq(self, v.tape),
            Contract,
            "variable belongs to a different tape"
        );
        Ok(())
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        self.check_owner(loss)?;
        let shape = self.shape_of(loss.id);
        ensure!(
            shape.iter().product::<usize>() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            shape
        );
        self.backward_seeded(&[(*loss, Tensor::filled(&shape, 1.0))])
    }

    /// Backward sweep starting from explicit upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, Tensor)]) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut top = 0;
        for (v, g) in seeds {
            self.check_owner(v)?;
            ensure!(
                nodes[v.id].value.shape() == g.shape(),
                Shape,
                "seed shape {:?} does not match value shape {:?}",
                g.shape(),
                nodes[v.id].value.shape()
            );
            accumulate(&mut grads[v.id], g.clone());
            top = top.max(v.id + 1);
        }
        for id in (0..top).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn send(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if nodes[id].requires_grad {
        accumulate(&mut grads[id], g);
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            send(nodes, grads, *a, g.clone());
            send(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            send(nodes, grads, *a, g.clone());
            send(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                send(nodes, grads, *a, g.zip_map(val(*b), |g, y| g * y));
            }
            if needs(*b) {
                send(nodes, grads, *b, g.zip_map(val(*a), |g, x| g * x));
            }
        }
        Op::Div(a, b) => {
            if needs(*a) {
                send(nodes, grads, *a, g.zip_map(val(*b), |g, y| g / y));
            }
            if needs(*b) {
                let gb = g.zip_map(out, |g, q| g * q).zip_map(val(*b), |gq, y| -gq / y);
                send(nodes, grads, *b, gb);
            }
        }
        Op::Scale(a, c) => send(nodes, grads, *a, g.map(|x| x * c)),
        Op::AddScalar(a) => send(nodes, grads, *a, g.clone()),
        Op::Exp(a) => send(nodes, grads, *a, g.zip_map(out, |g, y| g * y)),
        Op::Log(a) => send(nodes, grads, *a, g.zip_map(val(*a), |g, x| g / x)),
        Op::Relu(a) => send(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        Op::ClampMin(a, floor) => send(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > *floor { g } else { 0.0 }),
        ),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(g.data(), m, n, false, bv.data(), k, n, true, &mut ga, false);
                send(nodes, grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(av.data(), m, k, true, g.data(), m, n, false, &mut gb, false);
                send(nodes, grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
        }
        Op::AddRowBias(a, b) => {
            send(nodes, grads, *a, g.clone());
            if needs(*b) {
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                send(nodes, grads, *b, Tensor::vector(gb));
            }
        }
        Op::SubCol(a, b) => {
            send(nodes, grads, *a, g.clone());
            if needs(*b) {
                let c = g.cols();
                let gb = g.data().chunks(c).map(|r| -r.iter().sum::<f64>()).collect();
                send(nodes, grads, *b, Tensor::vector(gb));
            }
        }
        Op::PairwiseSqDist(a, b) => {
            // dA = 2(diag(G 1) A − G B), dB = 2(diag(Gᵀ 1) B − Gᵀ A)
            let (av, bv) = (val(*a), val(*b));
            let (n, d) = (av.shape()[0], av.shape()[1]);
            let m = bv.shape()[0];
            if needs(*a) {
                let mut ga = vec![0.0; n * d];
                gemm(g.data(), n, m, false, bv.data(), m, d, false, &mut ga, false);
                for i in 0..n {
                    let rs: f64 = g.row(i).iter().sum();
                    let ai = av.row(i);
                    for c in 0..d {
                        ga[i * d + c] = 2.0 * (rs * ai[c] - ga[i * d + c]);
                    }
                }
                send(nodes, grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            if needs(*b) {
                let mut gb = vec![0.0; m * d];
                gemm(g.data(), n, m, true, av.data(), n, d, false, &mut gb, false);
                let mut cs = vec![0.0; m];
                for i in 0..n {
                    for (acc, x) in cs.iter_mut().zip(g.row(i)) {
                        *acc += x;
                    }
                }
                for j in 0..m {
                    let bj = bv.row(j);
                    for c in 0..d {
                        gb[j * d + c] = 2.0 * (cs[j] * bj[c] - gb[j * d + c]);
                    }
                }
                send(nodes, grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut gx = vec![0.0; out.len()];
            for ((y, gy), dst) in out.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gy) {
                    *d = yi * (gi - dot);
                }
            }
            send(nodes, grads, *a, Tensor::new(out.shape().to_vec(), gx).unwrap());
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut gx = vec![0.0; out.len()];
            for ((y, gy), dst) in out.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let total: f64 = gy.iter().sum();
                for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gy) {
                    *d = gi - yi.exp() * total;
                }
            }
            send(nodes, grads, *a, Tensor::new(out.shape().to_vec(), gx).unwrap());
        }
        Op::Sum(a) => {
            let s = g.item();
            send(nodes, grads, *a, Tensor::filled(val(*a).shape(), s));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let s = g.item() / av.len() as f64;
            send(nodes, grads, *a, Tensor::filled(av.shape(), s));
        }
        Op::SumRows(a) => {
            let av = val(*a);
            let c = av.cols();
            let mut gx = Vec::with_capacity(av.len());
            for &gi in g.data() {
                gx.extend(std::iter::repeat_n(gi, c));
            }
            send(nodes, grads, *a, Tensor::new(av.shape().to_vec(), gx).unwrap());
        }
        Op::Reshape(a) => {
            send(nodes, grads, *a, g.reshape(val(*a).shape()).unwrap());
        }
        Op::SelectRows(a, idx) => {
            let av = val(*a);
            let c = av.cols();
            let mut gx = Tensor::zeros(av.shape());
            let data = gx.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for (dst, src) in data[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                    *dst += src;
                }
            }
            send(nodes, grads, *a, gx);
        }
        Op::Gather(a, idx) => {
            let mut gx = Tensor::zeros(val(*a).shape());
            let data = gx.data_mut();
            for (&i, gi) in idx.iter().zip(g.data()) {
                data[i] += gi;
            }
            send(nodes, grads, *a, gx);
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let rows = g.rows();
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let c = pv.cols();
                if needs(p) {
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    send(nodes, grads, p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
                }
                offset += c;
            }
        }
        Op::External(parts) => {
            let s = g.item();
            for (p, partial) in parts {
                send(nodes, grads, *p, partial.map(|x| x * s));
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// A copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with2<R>(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> Result<R> {
        self.tape.check_owner(other)?;
        let nodes = self.tape.nodes.borrow();
        Ok(f(&nodes[self.id].value, &nodes[other.id].value))
    }

    fn rg(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.rg())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.rg() || other.rg();
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        ensure!(a == b, Shape, "{what}: shapes {:?} and {:?} differ", a, b);
        Ok(())
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let v = self.with2(other, |a, b| a.zip_map(b, |x, y| x + y))?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let v = self.with2(other, |a, b| a.zip_map(b, |x, y| x - y))?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let v = self.with2(other, |a, b| a.zip_map(b, |x, y| x * y))?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "div")?;
        let v = self.with2(other, |a, b| a.zip_map(b, |x, y| x / y))?;
        Ok(self.binary(other, v, Op::Div(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.with(|a| a.map(|x| x * c));
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.with(|a| a.map(|x| x + c));
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.with(|a| a.map(f64::exp));
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.with(|a| a.map(f64::ln));
        self.unary(v, Op::Log(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.with(|a| a.map(|x| x.max(0.0)));
        self.unary(v, Op::Relu(self.id))
    }

    /// `max(x, floor)` elementwise; no gradient flows where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Var<'t> {
        let v = self.with(|a| a.map(|x| x.max(floor)));
        self.unary(v, Op::ClampMin(self.id, floor))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with2(other, tensor::matmul)??;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_row_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with2(bias, |a, b| -> Result<Tensor> {
            ensure!(
                a.shape().len() == 2 && b.shape() == [a.cols()],
                Shape,
                "row bias {:?} does not fit {:?}",
                b.shape(),
                a.shape()
            );
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(b.len()) {
                for (x, y) in row.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Ok(out)
        })??;
        Ok(self.binary(bias, v, Op::AddRowBias(self.id, bias.id)))
    }

    /// Subtracts `col[i]` from every entry of row `i`.
    pub fn sub_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with2(col, |a, b| -> Result<Tensor> {
            ensure!(
                a.shape().len() == 2 && b.shape() == [a.rows()],
                Shape,
                "column {:?} does not fit {:?}",
                b.shape(),
                a.shape()
            );
            let c = a.cols();
            let mut out = a.clone();
            for (row, y) in out.data_mut().chunks_mut(c).zip(b.data()) {
                row.iter_mut().for_each(|x| *x -= y);
            }
            Ok(out)
        })??;
        Ok(self.binary(col, v, Op::SubCol(self.id, col.id)))
    }

    pub fn pairwise_sq_dist(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with2(other, tensor::pairwise_sq_dist)??;
        Ok(self.binary(other, v, Op::PairwiseSqDist(self.id, other.id)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let v = self.with(tensor::softmax)?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let v = self.with(|a| -> Result<Tensor> {
            ensure!(!a.is_empty() && a.cols() > 0, Shape, "log_softmax of empty input");
            let c = a.cols();
            let mut out = vec![0.0; a.len()];
            for (src, dst) in a.data().chunks(c).zip(out.chunks_mut(c)) {
                tensor::log_softmax_into(src, dst);
            }
            Tensor::new(a.shape().to_vec(), out)
        })?;
        Ok(self.unary(v, Op::LogSoftmax(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.with(|a| Tensor::scalar(a.sum()));
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.with(|a| Tensor::scalar(a.sum() / a.len() as f64));
        self.unary(v, Op::Mean(self.id))
    }

    /// Sum over the last axis: `n×m → n`.
    pub fn sum_rows(&self) -> Var<'t> {
        let v = self.with(|a| {
            let c = a.cols();
            Tensor::vector(a.data().chunks(c).map(|r| r.iter().sum()).collect())
        });
        self.unary(v, Op::SumRows(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.with(|a| a.reshape(shape))?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Rows `idx` of a matrix (elements, for a vector), repeats allowed.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let rows = self.with(|a| if a.shape().len() <= 1 { a.len() } else { a.rows() });
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TccError::Contract(format!("row {bad} out of range 0..{rows}")));
        }
        let v = self.with(|a| a.select_rows(idx));
        Ok(self.unary(v, Op::SelectRows(self.id, idx.to_vec())))
    }

    /// Elements at flat row-major positions, as a vector.
    pub fn gather(&self, flat: &[usize]) -> Result<Var<'t>> {
        let n = self.with(|a| a.len());
        if let Some(&bad) = flat.iter().find(|&&i| i >= n) {
            return Err(TccError::Contract(format!("element {bad} out of range 0..{n}")));
        }
        let v = self.with(|a| Tensor::vector(flat.iter().map(|&i| a.data()[i]).collect()));
        Ok(self.unary(v, Op::Gather(self.id, flat.to_vec())))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        ensure!(!parts.is_empty(), Shape, "concat of nothing");
        let tape = parts[0].tape;
        let nodes = tape.nodes.borrow();
        let rows = nodes[parts[0].id].value.rows();
        let mut total = 0;
        for p in parts {
            tape.check_owner(p)?;
            let v = &nodes[p.id].value;
            ensure!(
                v.shape().len() == 2 && v.rows() == rows,
                Shape,
                "concat_cols: shape {:?} vs {} rows",
                v.shape(),
                rows
            );
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.row(r));
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let value = Tensor::matrix(rows, total, data)?;
        Ok(tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = c.scale(2.0);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = p.mul(&p).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&p), Err(TccError::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = (2p) * (2p) -> df/dp = 8p
        let tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(3.0));
        let q = p.scale(2.0);
        let f = q.mul(&q).unwrap();
        let g = tape.backward(&f).unwrap();
        assert_eq!(g.wrt(&p).item(), 24.0);
    }

    #[test]
    fn external_scalar_chains() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        let q = p.scale(3.0);
        let e = tape
            .external_scalar(0.0, vec![(q, Tensor::vector(vec![1.0, 2.0]))])
            .unwrap();
        let g = tape.backward(&e.scale(0.5)).unwrap();
        assert_eq!(g.wrt(&p).data(), &[1.5, 3.0]);
    }

    #[test]
    fn foreign_variables_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(1.0));
        assert!(a.add(&b).is_err());
    }
}
