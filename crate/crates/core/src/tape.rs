//! Reverse-mode automatic differentiation over a flat tape of eagerly
//! evaluated ops. One tape per training step; values are immutable once
//! recorded and the backward pass walks the tape in reverse.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Val(usize);

enum Op<E: Scalar> {
    Leaf { requires_grad: bool },
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    AddRow(Val, Val),
    Scale(Val, E),
    Matmul(Val, Val),
    Transpose(Val),
    Gather(Val, Vec<usize>),
    ConcatCols(Val, Val),
    SliceCols(Val, usize, usize),
    LayerNorm {
        x: Val,
        gamma: Val,
        beta: Val,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    Gelu(Val),
    Softplus(Val),
    Softmax(Val),
    LogSoftmax(Val),
    TakePerRow(Val, Vec<usize>),
    Sum(Val),
}

struct Node<E: Scalar> {
    op: Op<E>,
    value: Tensor<E>,
}

pub struct Tape<E: Scalar = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>) -> Val {
        self.nodes.push(Node { op, value });
        Val(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Val) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Register a leaf; gradient is tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor<E>) -> Val {
        let rg = t.requires_grad();
        self.push(Op::Leaf { requires_grad: rg }, t)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Val {
        self.push(
            Op::Leaf {
                requires_grad: false,
            },
            t,
        )
    }

    pub fn scalar_const(&mut self, v: E) -> Val {
        self.constant(Tensor::scalar(v))
    }

    /// Copy a value out of the graph: gradient stops here.
    pub fn detach(&mut self, v: Val) -> Val {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary_same_shape(&self, a: Val, b: Val, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let shape = self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), Tensor::from_vec(shape, data)?))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let shape = self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a, b), Tensor::from_vec(shape, data)?))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let shape = self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), Tensor::from_vec(shape, data)?))
    }

    /// [T,D] + [D], row-broadcast.
    pub fn add_row(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 1 || ta.cols() != tb.shape()[0] {
            return Err(Error::shape(format!(
                "add_row: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (t, d) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(t * d);
        for i in 0..t {
            for j in 0..d {
                data.push(ta.data()[i * d + j] + tb.data()[j]);
            }
        }
        Ok(self.push(Op::AddRow(a, b), Tensor::from_vec(vec![t, d], data)?))
    }

    pub fn scale(&mut self, a: Val, c: E) -> Result<Val> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * c).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::Scale(a, c), Tensor::from_vec(shape, data)?))
    }

    pub fn neg(&mut self, a: Val) -> Result<Val> {
        self.scale(a, -E::one())
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(format!(
                "matmul: {:?} @ {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = kernels::matmul_nn(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Op::Matmul(a, b), Tensor::from_vec(vec![m, n], data)?))
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape(format!("transpose: {:?}", ta.shape())));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose(a), Tensor::from_vec(vec![n, m], data)?))
    }

    /// Select rows of a rank-2 tensor; covers embedding lookups and the
    /// delayed hidden-state selection. Backward scatter-adds.
    pub fn gather(&mut self, a: Val, rows: Vec<usize>) -> Result<Val> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape(format!("gather: {:?}", ta.shape())));
        }
        let (m, d) = (ta.rows(), ta.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::invalid(format!("gather: row {bad} out of {m}")));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            data.extend_from_slice(&ta.data()[r * d..(r + 1) * d]);
        }
        let shape = vec![rows.len(), d];
        Ok(self.push(Op::Gather(a, rows), Tensor::from_vec(shape, data)?))
    }

    pub fn concat_cols(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows() {
            return Err(Error::shape(format!(
                "concat_cols: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (t, da, db) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(t * (da + db));
        for i in 0..t {
            data.extend_from_slice(&ta.data()[i * da..(i + 1) * da]);
            data.extend_from_slice(&tb.data()[i * db..(i + 1) * db]);
        }
        Ok(self.push(
            Op::ConcatCols(a, b),
            Tensor::from_vec(vec![t, da + db], data)?,
        ))
    }

    pub fn slice_cols(&mut self, a: Val, start: usize, width: usize) -> Result<Val> {
        let ta = self.value(a);
        if ta.rank() != 2 || start + width > ta.cols() {
            return Err(Error::shape(format!(
                "slice_cols: {:?} [{}..{}]",
                ta.shape(),
                start,
                start + width
            )));
        }
        let (t, d) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(t * width);
        for i in 0..t {
            data.extend_from_slice(&ta.data()[i * d + start..i * d + start + width]);
        }
        Ok(self.push(
            Op::SliceCols(a, start, width),
            Tensor::from_vec(vec![t, width], data)?,
        ))
    }

    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: E) -> Result<Val> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tx.rank() != 2 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm: x {:?} gamma {:?} beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let t = tx.rows();
        let mut out = vec![E::zero(); t * d];
        let mut mean = vec![E::zero(); t];
        let mut rstd = vec![E::zero(); t];
        for i in 0..t {
            let (m, r) = kernels::layernorm_row(
                tx.row(i),
                tg.data(),
                tb.data(),
                eps,
                &mut out[i * d..(i + 1) * d],
            );
            mean[i] = m;
            rstd[i] = r;
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            Tensor::from_vec(vec![t, d], out)?,
        ))
    }

    pub fn gelu(&mut self, a: Val) -> Result<Val> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::Gelu(a), Tensor::from_vec(shape, data)?))
    }

    pub fn softplus(&mut self, a: Val) -> Result<Val> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| kernels::softplus(x)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::Softplus(a), Tensor::from_vec(shape, data)?))
    }

    pub fn softmax(&mut self, a: Val) -> Result<Val> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape(format!("softmax: {:?}", ta.shape())));
        }
        let (t, d) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for i in 0..t {
            kernels::softmax_row(&mut data[i * d..(i + 1) * d]);
        }
        Ok(self.push(Op::Softmax(a), Tensor::from_vec(vec![t, d], data)?))
    }

    pub fn log_softmax(&mut self, a: Val) -> Result<Val> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape(format!("log_softmax: {:?}", ta.shape())));
        }
        let (t, d) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for i in 0..t {
            kernels::log_softmax_row(&mut data[i * d..(i + 1) * d]);
        }
        Ok(self.push(Op::LogSoftmax(a), Tensor::from_vec(vec![t, d], data)?))
    }

    /// out[t] = a[t, idx[t]].
    pub fn take_per_row(&mut self, a: Val, idx: Vec<usize>) -> Result<Val> {
        let ta = self.value(a);
        if ta.rank() != 2 || idx.len() != ta.rows() {
            return Err(Error::shape(format!(
                "take_per_row: {:?} with {} indices",
                ta.shape(),
                idx.len()
            )));
        }
        let d = ta.cols();
        if let Some(&bad) = idx.iter().find(|&&j| j >= d) {
            return Err(Error::invalid(format!("take_per_row: col {bad} out of {d}")));
        }
        let data: Vec<E> = idx
            .iter()
            .enumerate()
            .map(|(t, &j)| ta.data()[t * d + j])
            .collect();
        let shape = vec![idx.len()];
        Ok(self.push(Op::TakePerRow(a, idx), Tensor::from_vec(shape, data)?))
    }

    /// Full reduction to a rank-0 scalar, ascending order.
    pub fn sum(&mut self, a: Val) -> Result<Val> {
        let ta = self.value(a);
        let mut acc = E::zero();
        for &v in ta.data() {
            acc = acc + v;
        }
        Ok(self.push(Op::Sum(a), Tensor::scalar(acc)))
    }

    pub fn mean(&mut self, a: Val) -> Result<Val> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, E::one() / E::from_f64(n as f64))
    }

    /// Reverse sweep from a rank-0 loss. Returns per-node gradients.
    pub fn backward(&self, loss: Val) -> Result<Gradients<E>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![E::one()]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[i] = Some(g); // keep for collection
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, &g);
                    self.accum(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, &g);
                    let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                    self.accum(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<E> = g.iter().zip(vb).map(|(&gv, &bv)| gv * bv).collect();
                    let gb: Vec<E> = g.iter().zip(va).map(|(&gv, &av)| gv * av).collect();
                    self.accum(&mut grads, *a, &ga);
                    self.accum(&mut grads, *b, &gb);
                }
                Op::AddRow(a, b) => {
                    self.accum(&mut grads, *a, &g);
                    let d = self.value(*b).numel();
                    let t = self.value(*a).rows();
                    let mut gb = vec![E::zero(); d];
                    for ti in 0..t {
                        for j in 0..d {
                            gb[j] = gb[j] + g[ti * d + j];
                        }
                    }
                    self.accum(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<E> = g.iter().map(|&v| v * *c).collect();
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let ga = kernels::matmul_nt(&g, tb.data(), m, n, k);
                    let gb = kernels::matmul_tn(ta.data(), &g, m, k, n);
                    self.accum(&mut grads, *a, &ga);
                    self.accum(&mut grads, *b, &gb);
                }
                Op::Transpose(a) => {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut ga = vec![E::zero(); m * n];
                    // g has shape [n, m]
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] = g[j * m + i];
                        }
                    }
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Gather(a, rows) => {
                    let ta = self.value(*a);
                    let d = ta.cols();
                    let mut ga = vec![E::zero(); ta.numel()];
                    for (out_i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            ga[r * d + j] = ga[r * d + j] + g[out_i * d + j];
                        }
                    }
                    self.accum(&mut grads, *a, &ga);
                }
                Op::ConcatCols(a, b) => {
                    let (da, db) = (self.value(*a).cols(), self.value(*b).cols());
                    let t = self.value(*a).rows();
                    let mut ga = vec![E::zero(); t * da];
                    let mut gb = vec![E::zero(); t * db];
                    for i in 0..t {
                        ga[i * da..(i + 1) * da]
                            .copy_from_slice(&g[i * (da + db)..i * (da + db) + da]);
                        gb[i * db..(i + 1) * db]
                            .copy_from_slice(&g[i * (da + db) + da..(i + 1) * (da + db)]);
                    }
                    self.accum(&mut grads, *a, &ga);
                    self.accum(&mut grads, *b, &gb);
                }
                Op::SliceCols(a, start, width) => {
                    let ta = self.value(*a);
                    let (t, d) = (ta.rows(), ta.cols());
                    let mut ga = vec![E::zero(); t * d];
                    for i in 0..t {
                        for j in 0..*width {
                            ga[i * d + start + j] = g[i * width + j];
                        }
                    }
                    self.accum(&mut grads, *a, &ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let tx = self.value(*x);
                    let tg = self.value(*gamma);
                    let (t, d) = (tx.rows(), tx.cols());
                    let dn = E::from_f64(d as f64);
                    let mut gx = vec![E::zero(); t * d];
                    let mut gg = vec![E::zero(); d];
                    let mut gb = vec![E::zero(); d];
                    for i in 0..t {
                        let xr = tx.row(i);
                        let gr = &g[i * d..(i + 1) * d];
                        let (m, r) = (mean[i], rstd[i]);
                        let mut sum_ggam = E::zero();
                        let mut sum_ggam_xhat = E::zero();
                        for j in 0..d {
                            let xhat = (xr[j] - m) * r;
                            let ggam = gr[j] * tg.data()[j];
                            sum_ggam = sum_ggam + ggam;
                            sum_ggam_xhat = sum_ggam_xhat + ggam * xhat;
                            gg[j] = gg[j] + gr[j] * xhat;
                            gb[j] = gb[j] + gr[j];
                        }
                        let mean_ggam = sum_ggam / dn;
                        let mean_ggam_xhat = sum_ggam_xhat / dn;
                        for j in 0..d {
                            let xhat = (xr[j] - m) * r;
                            let ggam = gr[j] * tg.data()[j];
                            gx[i * d + j] = r * (ggam - mean_ggam - xhat * mean_ggam_xhat);
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                    self.accum(&mut grads, *gamma, &gg);
                    self.accum(&mut grads, *beta, &gb);
                }
                Op::Gelu(a) => {
                    let va = self.value(*a).data();
                    let ga: Vec<E> = g
                        .iter()
                        .zip(va)
                        .map(|(&gv, &x)| gv * kernels::gelu_grad(x))
                        .collect();
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Softplus(a) => {
                    let va = self.value(*a).data();
                    let ga: Vec<E> = g
                        .iter()
                        .zip(va)
                        .map(|(&gv, &x)| gv * kernels::sigmoid(x))
                        .collect();
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Softmax(a) => {
                    let s = self.nodes[i].value.data();
                    let d = self.nodes[i].value.cols();
                    let t = self.nodes[i].value.rows();
                    let mut ga = vec![E::zero(); t * d];
                    for ti in 0..t {
                        let sr = &s[ti * d..(ti + 1) * d];
                        let gr = &g[ti * d..(ti + 1) * d];
                        let mut dot = E::zero();
                        for j in 0..d {
                            dot = dot + gr[j] * sr[j];
                        }
                        for j in 0..d {
                            ga[ti * d + j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    self.accum(&mut grads, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let y = self.nodes[i].value.data();
                    let d = self.nodes[i].value.cols();
                    let t = self.nodes[i].value.rows();
                    let mut ga = vec![E::zero(); t * d];
                    for ti in 0..t {
                        let yr = &y[ti * d..(ti + 1) * d];
                        let gr = &g[ti * d..(ti + 1) * d];
                        let mut gsum = E::zero();
                        for j in 0..d {
                            gsum = gsum + gr[j];
                        }
                        for j in 0..d {
                            ga[ti * d + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    self.accum(&mut grads, *a, &ga);
                }
                Op::TakePerRow(a, idx) => {
                    let ta = self.value(*a);
                    let d = ta.cols();
                    let mut ga = vec![E::zero(); ta.numel()];
                    for (t, &j) in idx.iter().enumerate() {
                        ga[t * d + j] = ga[t * d + j] + g[t];
                    }
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    let ga = vec![g[0]; n];
                    self.accum(&mut grads, *a, &ga);
                }
            }
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.map(|data| {
                        Tensor::from_vec(self.nodes[i].value.shape().to_vec(), data)
                            .expect("gradient shape matches node shape")
                    })
                })
                .collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Vec<E>>], target: Val, g: &[E]) {
        match &mut grads[target.0] {
            Some(acc) => {
                for (o, &v) in acc.iter_mut().zip(g) {
                    *o = *o + v;
                }
            }
            None => grads[target.0] = Some(g.to_vec()),
        }
    }
}

/// Gradients indexed by tape value.
pub struct Gradients<E: Scalar = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn wrt(&self, v: Val) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
