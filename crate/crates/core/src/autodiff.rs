//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive pushes one node holding its output value plus whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in exact
//! reverse order, so gradient accumulation order is fixed by the forward
//! program and results are bit-reproducible.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities with analytic derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `x` for `x > 0`, `e^x - 1` otherwise (alpha = 1).
    Elu,
    Relu,
    /// Tanh approximation of GeLU.
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: Scalar) -> Scalar {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: Scalar) -> Scalar {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

const GELU_C: Scalar = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Scalar = 0.044_715;

pub fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which slices [`Tape::l2_normalize`] rescales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Each row, split into consecutive segments of `group` columns.
    Row,
    /// Each column, within consecutive blocks of `group` rows.
    Col,
}

/// Broadcast pattern for [`Tape::mul_broadcast`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// A `1 x c` vector multiplied into every row.
    Row,
    /// An `r x 1` vector multiplied into every column.
    Col,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast(Var, Var, Broadcast),
    AddBias(Var, Var),
    Scale(Var, Scalar),
    ScaleBy(Var, Var),
    Unary(Var, Activation),
    L2Normalize {
        x: Var,
        axis: NormAxis,
        group: usize,
        dim_scale: Scalar,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        active: Option<Rc<Vec<bool>>>,
        xhat: Vec<Scalar>,
        inv_std: Vec<Scalar>,
    },
    Dropout(Var, Rc<Vec<Scalar>>),
    SoftmaxRows(Var),
    Gather(Var, Rc<Vec<usize>>),
    SliceRows(Var, usize),
    SelectRows(Var, Rc<Vec<usize>>),
    Index(Var, usize),
    Sum(Var),
    BlockLinearAttention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        kv: Vec<Scalar>,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        probs: Vec<Scalar>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or `None` when `v` did not influence the loss.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k, c) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; r * c];
        gemm_nt(av.data(), bv.data(), &mut out, r, k, c);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies `x` by a vector broadcast across rows or columns.
    pub fn mul_broadcast(&mut self, x: Var, v: Var, pattern: Broadcast) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let (r, c) = (xv.rows(), xv.cols());
        let ok = match pattern {
            Broadcast::Row => vv.len() == c && vv.rows() == 1,
            Broadcast::Col => vv.len() == r && vv.cols() == 1,
        };
        if !ok {
            return Err(shape_err("mul_broadcast", xv.shape(), vv.shape()));
        }
        let mut out = xv.clone();
        let vd = vv.data();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            match pattern {
                Broadcast::Row => row.iter_mut().zip(vd).for_each(|(o, m)| *o *= m),
                Broadcast::Col => row.iter_mut().for_each(|o| *o *= vd[i]),
            }
        }
        Ok(self.push(out, Op::MulBroadcast(x, v, pattern)))
    }

    /// Adds a `1 x c` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c || bv.rows() != 1 {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let bd = bv.data();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: Scalar) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    /// Multiplies `x` by the single entry of the `1 x 1` tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("scale_by", self.value(x).shape(), sv.shape()));
        }
        let f = sv.data()[0];
        let out = self.value(x).map(|v| v * f);
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).map(|v| act.apply(v));
        self.push(out, Op::Unary(x, act))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Elu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Rescales every slice to L2 norm `1/sqrt(dim_scale)`; all-zero slices stay zero.
    ///
    /// With `group` equal to the full width (rows) or height (columns) this is
    /// plain row or column normalization.
    pub fn l2_normalize(&mut self, x: Var, axis: NormAxis, group: usize, dim_scale: Scalar) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let ok = group > 0
            && dim_scale > 0.0
            && match axis {
                NormAxis::Row => c % group == 0,
                NormAxis::Col => r % group == 0,
            };
        if !ok {
            return Err(Error::Usage(format!(
                "l2_normalize: group {group} / scale {dim_scale} invalid for shape {:?}",
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let root = dim_scale.sqrt();
        for_each_slice(r, c, axis, group, |idx| {
            let d = out.data_mut();
            let norm = idx.clone().map(|i| d[i] * d[i]).sum::<Scalar>().sqrt();
            if norm > 0.0 {
                let f = 1.0 / (root * norm);
                idx.for_each(|i| d[i] *= f);
            }
        });
        Ok(self.push(
            out,
            Op::L2Normalize {
                x,
                axis,
                group,
                dim_scale,
            },
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Scalar) -> Result<Var> {
        self.layer_norm_masked(x, gain, bias, eps, None)
    }

    /// Layer norm whose statistics and output cover only `active` columns;
    /// inactive columns are written as exact zeros.
    pub fn layer_norm_masked(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: Scalar,
        active: Option<Rc<Vec<bool>>>,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = (xv.rows(), xv.cols());
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        if let Some(a) = &active {
            if a.len() != c {
                return Err(shape_err("layer_norm mask", xv.shape(), &[a.len()]));
            }
        }
        let is_active = |j: usize| active.as_ref().map_or(true, |a| a[j]);
        let count = (0..c).filter(|&j| is_active(j)).count().max(1) as Scalar;
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let (xd, gd, bd) = (xv.data(), gv.data(), bv.data());
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut mean = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if is_active(j) {
                    mean += v;
                }
            }
            mean /= count;
            let mut var = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if is_active(j) {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= count;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                if is_active(j) {
                    let h = (row[j] - mean) * s;
                    xhat[i * c + j] = h;
                    out[i * c + j] = gd[j] * h + bd[j];
                }
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                active,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout with a precomputed per-element multiplier (0 or `1/(1-p)`).
    pub fn dropout_with(&mut self, x: Var, multipliers: Rc<Vec<Scalar>>) -> Result<Var> {
        let xv = self.value(x);
        if multipliers.len() != xv.len() {
            return Err(shape_err("dropout", xv.shape(), &[multipliers.len()]));
        }
        let mut out = xv.clone();
        out.data_mut().iter_mut().zip(multipliers.iter()).for_each(|(o, m)| *o *= m);
        Ok(self.push(out, Op::Dropout(x, multipliers)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::IdOutOfRange {
                id: bad,
                max: tv.rows() - 1,
            });
        }
        let out = tv.select_rows(&ids);
        Ok(self.push(out, Op::Gather(table, ids)))
    }

    /// Rows `start..` of `x`.
    pub fn slice_rows_from(&mut self, x: Var, start: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= xv.rows() {
            return Err(shape_err("slice_rows", xv.shape(), &[start]));
        }
        let c = xv.cols();
        let out = Tensor::new(vec![xv.rows() - start, c], xv.data()[start * c..].to_vec())?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn select_rows(&mut self, x: Var, rows: Rc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if rows.iter().any(|&r| r >= xv.rows()) {
            return Err(shape_err("select_rows", xv.shape(), &[rows.len()]));
        }
        let out = xv.select_rows(&rows);
        Ok(self.push(out, Op::SelectRows(x, rows)))
    }

    /// The flat element `x[idx]` as a `1 x 1` tensor.
    pub fn index(&mut self, x: Var, idx: usize) -> Var {
        let v = self.value(x).data()[idx];
        self.push(Tensor::scalar(v), Op::Index(x, idx))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    /// Per-(sequence, head) linear attention core `Q · (Kᵀ · V)`.
    ///
    /// Inputs are `(B·seq) x d` with heads laid out as `d/heads`-wide column
    /// slices; the `Kᵀ·V` product is formed first so cost is linear in `seq`.
    pub fn block_linear_attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (qv, kv_, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv_.shape() || qv.shape() != vv.shape() {
            return Err(shape_err("linear_attention", qv.shape(), kv_.shape()));
        }
        let (r, d) = (qv.rows(), qv.cols());
        if seq == 0 || heads == 0 || r % seq != 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "linear_attention: seq {seq} / heads {heads} incompatible with shape {:?}",
                qv.shape()
            )));
        }
        let dh = d / heads;
        let blocks = r / seq;
        let mut kv = vec![0.0; blocks * heads * dh * dh];
        let mut out = vec![0.0; r * d];
        let (qd, kd, vd) = (qv.data(), kv_.data(), vv.data());
        for b in 0..blocks {
            for h in 0..heads {
                let m = &mut kv[(b * heads + h) * dh * dh..(b * heads + h + 1) * dh * dh];
                let off = h * dh;
                for t in 0..seq {
                    let row = (b * seq + t) * d + off;
                    let (krow, vrow) = (&kd[row..row + dh], &vd[row..row + dh]);
                    for (a, &kx) in krow.iter().enumerate() {
                        if kx == 0.0 {
                            continue;
                        }
                        for (mm, &vx) in m[a * dh..(a + 1) * dh].iter_mut().zip(vrow) {
                            *mm += kx * vx;
                        }
                    }
                }
                for t in 0..seq {
                    let row = (b * seq + t) * d + off;
                    let qrow = &qd[row..row + dh];
                    let orow = &mut out[row..row + dh];
                    for (a, &qx) in qrow.iter().enumerate() {
                        if qx == 0.0 {
                            continue;
                        }
                        for (o, &mm) in orow.iter_mut().zip(&m[a * dh..(a + 1) * dh]) {
                            *o += qx * mm;
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BlockLinearAttention {
                q,
                k,
                v,
                seq,
                heads,
                kv,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::IdOutOfRange { id: bad, max: c - 1 });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<Scalar>().ln();
            loss += lse - row[targets[i]];
            softmax_in_place(row);
        }
        loss /= r as Scalar;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }))
    }

    /// Back-propagates from the scalar `loss`, visiting nodes in reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage(format!("loss {loss:?} is not on this tape")))?;
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.value.all_finite() {
            return Err(Error::NonFinite(format!("loss value {}", node.value.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; r * k];
                gemm_nt(g.data(), bv.data(), &mut da, r, c, k);
                let mut db = vec![0.0; k * c];
                gemm_tn(av.data(), g.data(), &mut db, r, k, c);
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, k, c) = (av.rows(), av.cols(), bv.rows());
                let mut da = vec![0.0; r * k];
                gemm_nn(g.data(), bv.data(), &mut da, r, c, k);
                let mut db = vec![0.0; c * k];
                gemm_tn(g.data(), av.data(), &mut db, r, c, k);
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.shape(), g.zip_map(bv, |x, y| x * y).into_data());
                accumulate(grads, *b, g.shape(), g.zip_map(av, |x, y| x * y).into_data());
            }
            Op::MulBroadcast(x, v, pattern) => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let c = xv.cols();
                let mut dx = g.data().to_vec();
                let mut dv = vec![0.0; vv.len()];
                let vd = vv.data();
                for (i, (drow, xrow)) in dx.chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
                    match pattern {
                        Broadcast::Row => {
                            for j in 0..c {
                                dv[j] += drow[j] * xrow[j];
                                drow[j] *= vd[j];
                            }
                        }
                        Broadcast::Col => {
                            for j in 0..c {
                                dv[i] += drow[j] * xrow[j];
                                drow[j] *= vd[i];
                            }
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
                accumulate(grads, *v, vv.shape(), dv);
            }
            Op::AddBias(x, b) => {
                let c = g.cols();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                accumulate(grads, *x, g.shape(), g.data().to_vec());
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, g.shape(), g.data().iter().map(|v| v * f).collect());
            }
            Op::ScaleBy(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let f = sv.data()[0];
                let ds: Scalar = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                accumulate(grads, *x, g.shape(), g.data().iter().map(|v| v * f).collect());
                accumulate(grads, *s, sv.shape(), vec![ds]);
            }
            Op::Unary(x, act) => {
                let xv = self.value(*x);
                let dx = g.zip_map(xv, |gv, xv| gv * act.derivative(xv));
                accumulate(grads, *x, g.shape(), dx.into_data());
            }
            Op::L2Normalize {
                x,
                axis,
                group,
                dim_scale,
            } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let (xd, gd) = (xv.data(), g.data());
                let mut dx = vec![0.0; r * c];
                let root = dim_scale.sqrt();
                for_each_slice(r, c, *axis, *group, |idx| {
                    let norm = idx.clone().map(|i| xd[i] * xd[i]).sum::<Scalar>().sqrt();
                    if norm > 0.0 {
                        let dot: Scalar = idx.clone().map(|i| xd[i] * gd[i]).sum::<Scalar>() / norm;
                        let f = 1.0 / (root * norm);
                        for i in idx {
                            dx[i] = f * (gd[i] - xd[i] / norm * dot);
                        }
                    }
                });
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                active,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (r, c) = (g.rows(), g.cols());
                let is_active = |j: usize| active.as_ref().map_or(true, |a| a[j]);
                let count = (0..c).filter(|&j| is_active(j)).count().max(1) as Scalar;
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let (gd, gain_d) = (g.data(), gv.data());
                for i in 0..r {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        if is_active(j) {
                            let k = i * c + j;
                            dgain[j] += gd[k] * xhat[k];
                            dbias[j] += gd[k];
                            let dh = gd[k] * gain_d[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[k];
                        }
                    }
                    mean_dh /= count;
                    mean_dh_h /= count;
                    for j in 0..c {
                        if is_active(j) {
                            let k = i * c + j;
                            let dh = gd[k] * gain_d[j];
                            dx[k] = inv_std[i] * (dh - mean_dh - xhat[k] * mean_dh_h);
                        }
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
                accumulate(grads, *gain, gv.shape(), dgain);
                accumulate(grads, *bias, self.value(*bias).shape(), dbias);
            }
            Op::Dropout(x, m) => {
                let dx = g.data().iter().zip(m.iter()).map(|(a, b)| a * b).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::SoftmaxRows(x) => {
                let c = g.cols();
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                    let dot: Scalar = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Gather(table, ids) => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (grow, &id) in g.data().chunks(c).zip(ids.iter()) {
                    dt[id * c..(id + 1) * c].iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                }
                accumulate(grads, *table, tv.shape(), dt);
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..].copy_from_slice(g.data());
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::SelectRows(x, rows) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (grow, &r) in g.data().chunks(c).zip(rows.iter()) {
                    dx[r * c..(r + 1) * c].iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Index(x, i) => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                dx[*i] = g.data()[0];
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), vec![g.data()[0]; xv.len()]);
            }
            Op::BlockLinearAttention {
                q,
                k,
                v,
                seq,
                heads,
                kv,
            } => {
                let (qv, kv_, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (r, d) = (qv.rows(), qv.cols());
                let dh = d / heads;
                let (seq, heads) = (*seq, *heads);
                let (qd, kd, vd, gd) = (qv.data(), kv_.data(), vv.data(), g.data());
                let mut dq = vec![0.0; r * d];
                let mut dk = vec![0.0; r * d];
                let mut dv = vec![0.0; r * d];
                let mut dm = vec![0.0; dh * dh];
                for b in 0..r / seq {
                    for h in 0..heads {
                        let m = &kv[(b * heads + h) * dh * dh..(b * heads + h + 1) * dh * dh];
                        let off = h * dh;
                        dm.iter_mut().for_each(|x| *x = 0.0);
                        for t in 0..seq {
                            let row = (b * seq + t) * d + off;
                            let (qrow, grow) = (&qd[row..row + dh], &gd[row..row + dh]);
                            // dM += q_tᵀ g_t ; dQ_t = g_t Mᵀ
                            for a in 0..dh {
                                let qa = qrow[a];
                                let mrow = &m[a * dh..(a + 1) * dh];
                                let mut acc = 0.0;
                                for e in 0..dh {
                                    dm[a * dh + e] += qa * grow[e];
                                    acc += grow[e] * mrow[e];
                                }
                                dq[row + a] = acc;
                            }
                        }
                        for t in 0..seq {
                            let row = (b * seq + t) * d + off;
                            let (krow, vrow) = (&kd[row..row + dh], &vd[row..row + dh]);
                            // dK_t = v_t dMᵀ ; dV_t = k_t dM
                            for a in 0..dh {
                                let dmrow = &dm[a * dh..(a + 1) * dh];
                                let mut acc = 0.0;
                                for e in 0..dh {
                                    acc += vrow[e] * dmrow[e];
                                }
                                dk[row + a] = acc;
                                let ka = krow[a];
                                if ka != 0.0 {
                                    for e in 0..dh {
                                        dv[row + e] += ka * dmrow[e];
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *q, qv.shape(), dq);
                accumulate(grads, *k, kv_.shape(), dk);
                accumulate(grads, *v, vv.shape(), dv);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let (r, c) = (lv.rows(), lv.cols());
                let f = g.data()[0] / r as Scalar;
                let mut dl: Vec<Scalar> = probs.iter().map(|p| p * f).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] -= f;
                }
                accumulate(grads, *logits, lv.shape(), dl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<Scalar>) {
    match &mut grads[v.0] {
        Some(existing) => {
            existing.data_mut().iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape matches value"));
        }
    }
}

/// Calls `f` once per normalization slice with the slice's flat indices.
fn for_each_slice<F>(r: usize, c: usize, axis: NormAxis, group: usize, mut f: F)
where
    F: FnMut(SliceIter),
{
    match axis {
        NormAxis::Row => {
            for i in 0..r {
                for s in 0..c / group {
                    let start = i * c + s * group;
                    f(SliceIter {
                        next: start,
                        step: 1,
                        remaining: group,
                    });
                }
            }
        }
        NormAxis::Col => {
            for b in 0..r / group {
                for j in 0..c {
                    f(SliceIter {
                        next: b * group * c + j,
                        step: c,
                        remaining: group,
                    });
                }
            }
        }
    }
}

#[derive(Clone)]
struct SliceIter {
    next: usize,
    step: usize,
    remaining: usize,
}

impl Iterator for SliceIter {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let i = self.next;
        self.next += self.step;
        self.remaining -= 1;
        Some(i)
    }
}

pub(crate) fn softmax_in_place(row: &mut [Scalar]) {
    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}
