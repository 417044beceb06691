use std::cell::{Ref, RefCell};

use super::kernels::{self, Conv1dGeom};
use super::{order_free_sum, ParamId, ParamStore, Scalar, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel statistics of one training-mode batchnorm call. `var` is the
/// unbiased estimate used for running-statistic updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    SumAxis {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    SumAll(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    LogSoftmax(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    EmbedMean {
        table: Var,
        rows: Vec<Vec<usize>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Tape recording one forward pass. Build a fresh graph per step and drop it
/// after [`Graph::backward`].
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass: gradients of every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of parameter leaves, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

fn dim_err(msg: impl Into<String>) -> TensorError {
    TensorError::Dimension(msg.into())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for gradient checks on inputs).
    pub fn variable(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies a stored parameter onto the tape; it requires grad iff the
    /// stored entry does.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.requires_grad);
        self.nodes.borrow_mut()[v.0].param = Some(id);
        v
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa != sb {
            return Err(dim_err(format!("{name}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let ta = &nodes[a.0].value;
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    /// Multiplies every element by a constant scalar.
    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s), self.rg(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = self.map(a, |x| -x);
        self.push(out, Op::Neg(a), self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), self.rg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.map(a, |x| x.exp());
        self.push(out, Op::Exp(a), self.rg(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(TensorError::Domain(format!("log of non-positive value {bad:?}")));
        }
        let out = self.map(a, |x| x.ln());
        Ok(self.push(out, Op::Log(a), self.rg(a)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(dim_err(format!(
                    "matmul: {:?} · {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = Tensor::zeros(&[m, n]);
            kernels::matmul_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
            out
        };
        Ok(self.push(out, Op::MatMul(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.rank() != 2 {
                return Err(dim_err(format!("transpose of rank-{} tensor", ta.rank())));
            }
            transpose2(ta)
        };
        Ok(self.push(out, Op::Transpose(a), self.rg(a)))
    }

    /// Adds `bias[C]` along axis 1 of `x[B,C,...]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            if tx.rank() < 2 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
                return Err(dim_err(format!(
                    "add_bias: {:?} + {:?}",
                    tx.shape(),
                    tb.shape()
                )));
            }
            let c = tx.shape()[1];
            let inner: usize = tx.shape()[2..].iter().product();
            let mut out = tx.clone();
            for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                let bv = tb.data()[i % c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            out
        };
        Ok(self.push(out, Op::AddBias(x, bias), self.rg(x) || self.rg(bias)))
    }

    /// Cross-correlation of `x[B,C_in,L]` with `w[C_out,C_in,K]`.
    pub fn conv1d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::Contract("conv1d stride must be >= 1".into()));
        }
        let (out, geom) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            if tx.rank() != 3 || tw.rank() != 3 {
                return Err(dim_err(format!(
                    "conv1d expects rank-3 input and weight, got {:?} and {:?}",
                    tx.shape(),
                    tw.shape()
                )));
            }
            let (batch, c_in, len_in) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (c_out, wc_in, kernel) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
            if wc_in != c_in {
                return Err(dim_err(format!(
                    "conv1d: input has {c_in} channels, weight expects {wc_in}"
                )));
            }
            if len_in + 2 * pad < kernel {
                return Err(dim_err(format!(
                    "conv1d: length {len_in} with padding {pad} is shorter than kernel {kernel}"
                )));
            }
            let bias = match b {
                Some(bv) => {
                    let tb = &nodes[bv.0].value;
                    if tb.shape() != [c_out] {
                        return Err(dim_err(format!(
                            "conv1d bias shape {:?}, expected [{c_out}]",
                            tb.shape()
                        )));
                    }
                    Some(tb.data())
                }
                None => None,
            };
            let len_out = (len_in + 2 * pad - kernel) / stride + 1;
            let geom = Conv1dGeom {
                batch,
                c_in,
                c_out,
                len_in,
                len_out,
                kernel,
                stride,
                pad,
            };
            let mut out = Tensor::zeros(&[batch, c_out, len_out]);
            kernels::conv1d_forward(&geom, tx.data(), tw.data(), bias, out.data_mut());
            (out, geom)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|bv| self.rg(bv));
        Ok(self.push(out, Op::Conv1d { x, w, b, geom }, rg))
    }

    /// Max pooling over the last axis of `x[B,C,L]` with implicit `-inf`
    /// padding. Ties resolve to the lowest index.
    pub fn max_pool1d(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        if kernel == 0 || stride == 0 || pad >= kernel {
            return Err(TensorError::Contract(format!(
                "max_pool1d: invalid kernel {kernel}, stride {stride}, pad {pad}"
            )));
        }
        let (out, argmax) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 3 || tx.shape()[2] + 2 * pad < kernel {
                return Err(dim_err(format!(
                    "max_pool1d: window {kernel} does not fit {:?}",
                    tx.shape()
                )));
            }
            let (b, c, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let len_out = (len + 2 * pad - kernel) / stride + 1;
            let mut out = Tensor::zeros(&[b, c, len_out]);
            let mut argmax = Vec::with_capacity(b * c * len_out);
            for (row, orow) in tx.data().chunks(len).zip(out.data_mut().chunks_mut(len_out)) {
                let base = argmax.len() / len_out * len;
                for (o, ov) in orow.iter_mut().enumerate() {
                    let start = (o * stride) as isize - pad as isize;
                    let lo = start.max(0) as usize;
                    let hi = ((start + kernel as isize) as usize).min(len);
                    let mut best = lo;
                    for i in lo + 1..hi {
                        if row[i] > row[best] {
                            best = i;
                        }
                    }
                    *ov = row[best];
                    argmax.push(base + best);
                }
            }
            (out, argmax)
        };
        Ok(self.push(out, Op::MaxPool1d { x, argmax }, self.rg(x)))
    }

    /// Mean over the last axis: `[B,C,L] -> [B,C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 3 {
                return Err(dim_err(format!("global_avg_pool of {:?}", tx.shape())));
            }
            let len = tx.shape()[2];
            let inv = T::one() / T::from_f64(len as f64);
            let data = tx
                .data()
                .chunks(len)
                .map(|r| r.iter().fold(T::zero(), |a, &v| a + v) * inv)
                .collect();
            Tensor::new(vec![tx.shape()[0], tx.shape()[1]], data)?
        };
        Ok(self.push(out, Op::GlobalAvgPool(x), self.rg(x)))
    }

    /// Sum over one axis, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum(&self, x: Var, axis: usize) -> Result<Var> {
        let (out, outer, axis_len, inner) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if axis >= tx.rank() {
                return Err(dim_err(format!(
                    "axis {axis} out of range for rank {}",
                    tx.rank()
                )));
            }
            let shape = tx.shape();
            let outer: usize = shape[..axis].iter().product();
            let axis_len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for a in 0..axis_len {
                    let src = &tx.data()[(o * axis_len + a) * inner..][..inner];
                    for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut out_shape: Vec<usize> = shape.to_vec();
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            (Tensor::new(out_shape, data)?, outer, axis_len, inner)
        };
        Ok(self.push(
            out,
            Op::SumAxis {
                x,
                outer,
                axis_len,
                inner,
            },
            self.rg(x),
        ))
    }

    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| dim_err(format!("axis {axis} out of range")))?;
        let s = self.sum(x, axis)?;
        Ok(self.scale(s, T::one() / T::from_f64(n as f64)))
    }

    /// Sum of all elements, independent of element order.
    pub fn sum_all(&self, x: Var) -> Var {
        let s = order_free_sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::SumAll(x), self.rg(x))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Batch normalization over `x[B,C,L]` (or `x[B,C]`) per channel.
    ///
    /// In `Train` mode the batch statistics are used and returned so the
    /// caller can update its running estimates; in `Eval` mode the supplied
    /// running statistics are used.
    pub fn batchnorm1d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: BnMode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (out, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (tg, tb) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if tx.rank() < 2 {
                return Err(dim_err(format!("batchnorm1d of {:?}", tx.shape())));
            }
            let (b, c) = (tx.shape()[0], tx.shape()[1]);
            let l: usize = tx.shape()[2..].iter().product();
            if tg.shape() != [c] || tb.shape() != [c] || running_mean.len() != c || running_var.len() != c {
                return Err(dim_err(format!("batchnorm1d parameters do not match {c} channels")));
            }
            let n = b * l;
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let mut stats = None;
            match mode {
                BnMode::Train => {
                    if n <= 1 {
                        return Err(TensorError::DegenerateBatch);
                    }
                    let nf = T::from_f64(n as f64);
                    for ch in 0..c {
                        let mut s = T::zero();
                        for bi in 0..b {
                            s += tx.data()[(bi * c + ch) * l..][..l].iter().fold(T::zero(), |a, &v| a + v);
                        }
                        let m = s / nf;
                        let mut sq = T::zero();
                        for bi in 0..b {
                            sq += tx.data()[(bi * c + ch) * l..][..l]
                                .iter()
                                .fold(T::zero(), |a, &v| a + (v - m) * (v - m));
                        }
                        mean[ch] = m;
                        var[ch] = sq / nf;
                    }
                    let unbiased = var
                        .iter()
                        .map(|&v| v * nf / T::from_f64((n - 1) as f64))
                        .collect();
                    stats = Some(BatchStats {
                        mean: mean.clone(),
                        var: unbiased,
                    });
                }
                BnMode::Eval => {
                    mean.copy_from_slice(running_mean);
                    var.copy_from_slice(running_var);
                }
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); tx.numel()];
            let mut out = Tensor::zeros(tx.shape());
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * l;
                    let (m, is, g, be) = (mean[ch], inv_std[ch], tg.data()[ch], tb.data()[ch]);
                    for i in off..off + l {
                        let h = (tx.data()[i] - m) * is;
                        xhat[i] = h;
                        out.data_mut()[i] = g * h + be;
                    }
                }
            }
            (out, xhat, inv_std, stats)
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Scales each row of `x[B,d]` to unit L2 norm.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let (out, norms) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 2 {
                return Err(dim_err(format!("l2_normalize of {:?}", tx.shape())));
            }
            let d = tx.shape()[1];
            let mut norms = Vec::with_capacity(tx.shape()[0]);
            let mut out = tx.clone();
            for row in out.data_mut().chunks_mut(d) {
                let nrm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
                if !(nrm > T::from_f64(1e-12)) {
                    return Err(TensorError::Domain(format!(
                        "l2_normalize: row norm {nrm:?} too small"
                    )));
                }
                row.iter_mut().for_each(|v| *v = *v / nrm);
                norms.push(nrm);
            }
            (out, norms)
        };
        Ok(self.push(out, Op::L2Normalize { x, norms }, self.rg(x)))
    }

    /// Row-wise log-softmax of `x[B,C]` in log-sum-exp form. The row
    /// normalizer does not depend on column order.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 2 {
                return Err(dim_err(format!("log_softmax of {:?}", tx.shape())));
            }
            let c = tx.shape()[1];
            let mut out = tx.clone();
            let mut exps = vec![T::zero(); c];
            for row in out.data_mut().chunks_mut(c) {
                let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                for (e, &v) in exps.iter_mut().zip(row.iter()) {
                    *e = (v - m).exp();
                }
                let log_norm = order_free_sum(&exps).ln();
                row.iter_mut().for_each(|v| *v = (*v - m) - log_norm);
            }
            out
        };
        Ok(self.push(out, Op::LogSoftmax(x), self.rg(x)))
    }

    /// Gathers `x[i, idx[i]]` from `x[B,C]` into a `[B]` tensor.
    pub fn pick(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 2 || tx.shape()[0] != idx.len() {
                return Err(dim_err(format!(
                    "pick: {} indices for {:?}",
                    idx.len(),
                    tx.shape()
                )));
            }
            let c = tx.shape()[1];
            let mut data = Vec::with_capacity(idx.len());
            for (i, &j) in idx.iter().enumerate() {
                if j >= c {
                    return Err(dim_err(format!("pick: index {j} >= {c}")));
                }
                data.push(tx.data()[i * c + j]);
            }
            Tensor::new(vec![idx.len()], data)?
        };
        Ok(self.push(out, Op::Pick { x, idx: idx.to_vec() }, self.rg(x)))
    }

    /// Mean of selected rows of `table[V,D]` for each output row: `[B,D]`.
    pub fn embed_mean(&self, table: Var, rows: &[Vec<usize>]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let tt = &nodes[table.0].value;
            if tt.rank() != 2 {
                return Err(dim_err(format!("embedding table of {:?}", tt.shape())));
            }
            let (v, d) = (tt.shape()[0], tt.shape()[1]);
            let mut out = Tensor::zeros(&[rows.len().max(1), d]);
            if rows.is_empty() {
                return Err(TensorError::Contract("embed_mean over an empty batch".into()));
            }
            for (r, ids) in rows.iter().enumerate() {
                if ids.is_empty() {
                    return Err(TensorError::DegenerateInput(format!(
                        "row {r} has no unmasked tokens"
                    )));
                }
                let inv = T::one() / T::from_f64(ids.len() as f64);
                let orow = &mut out.data_mut()[r * d..(r + 1) * d];
                for &id in ids {
                    if id >= v {
                        return Err(dim_err(format!("token id {id} >= vocabulary size {v}")));
                    }
                    for (o, &e) in orow.iter_mut().zip(tt.row(id)) {
                        *o += e;
                    }
                }
                orow.iter_mut().for_each(|o| *o *= inv);
            }
            out
        };
        Ok(self.push(
            out,
            Op::EmbedMean {
                table,
                rows: rows.to_vec(),
            },
            self.rg(table),
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        }

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop_node(&nodes, node, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = t.data()[i * c + j];
        }
    }
    out
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    target: Var,
    f: impl FnOnce(&mut Tensor<T>),
) {
    if !nodes[target.0].requires_grad {
        return;
    }
    let slot = &mut grads[target.0];
    let g = slot.get_or_insert_with(|| Tensor::zeros(nodes[target.0].value.shape()));
    f(g);
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let dyd = dy.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |g| g.add_assign(dy));
            accumulate(nodes, grads, *b, |g| g.add_assign(dy));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |g| g.add_assign(dy));
            accumulate(nodes, grads, *b, |g| {
                g.data_mut().iter_mut().zip(dyd).for_each(|(o, &d)| *o -= d)
            });
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |g| {
                for ((o, &d), &y) in g.data_mut().iter_mut().zip(dyd).zip(tb.data()) {
                    *o += d * y;
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for ((o, &d), &x) in g.data_mut().iter_mut().zip(dyd).zip(ta.data()) {
                    *o += d * x;
                }
            });
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, |g| {
            g.data_mut().iter_mut().zip(dyd).for_each(|(o, &d)| *o += d * *s)
        }),
        Op::Neg(a) => accumulate(nodes, grads, *a, |g| {
            g.data_mut().iter_mut().zip(dyd).for_each(|(o, &d)| *o -= d)
        }),
        Op::Relu(a) => {
            let ta = val(*a);
            accumulate(nodes, grads, *a, |g| {
                for ((o, &d), &x) in g.data_mut().iter_mut().zip(dyd).zip(ta.data()) {
                    if x > T::zero() {
                        *o += d;
                    }
                }
            })
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, |g| {
            for ((o, &d), &y) in g.data_mut().iter_mut().zip(dyd).zip(node.value.data()) {
                *o += d * y;
            }
        }),
        Op::Log(a) => {
            let ta = val(*a);
            accumulate(nodes, grads, *a, |g| {
                for ((o, &d), &x) in g.data_mut().iter_mut().zip(dyd).zip(ta.data()) {
                    *o += d / x;
                }
            })
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            accumulate(nodes, grads, *a, |g| {
                kernels::matmul_bt_acc(dyd, tb.data(), g.data_mut(), m, n, k)
            });
            accumulate(nodes, grads, *b, |g| {
                kernels::matmul_at_acc(ta.data(), dyd, g.data_mut(), m, k, n)
            });
        }
        Op::Transpose(a) => {
            let dt = transpose2(dy);
            accumulate(nodes, grads, *a, |g| g.add_assign(&dt));
        }
        Op::AddBias(x, bias) => {
            accumulate(nodes, grads, *x, |g| g.add_assign(dy));
            let c = val(*bias).numel();
            let inner: usize = dy.shape()[2..].iter().product();
            accumulate(nodes, grads, *bias, |g| {
                for (i, chunk) in dyd.chunks(inner).enumerate() {
                    g.data_mut()[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                }
            });
        }
        Op::Conv1d { x, w, b, geom } => {
            let (tx, tw) = (val(*x), val(*w));
            let mut dx = nodes[x.0].requires_grad.then(|| Tensor::zeros(tx.shape()));
            let mut dw = nodes[w.0].requires_grad.then(|| Tensor::zeros(tw.shape()));
            let mut db = b
                .filter(|bv| nodes[bv.0].requires_grad)
                .map(|bv| Tensor::zeros(val(bv).shape()));
            kernels::conv1d_backward(
                geom,
                tx.data(),
                tw.data(),
                dyd,
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, |g| g.add_assign(&dx));
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, |g| g.add_assign(&dw));
            }
            if let (Some(db), Some(bv)) = (db, b) {
                accumulate(nodes, grads, *bv, |g| g.add_assign(&db));
            }
        }
        Op::MaxPool1d { x, argmax } => accumulate(nodes, grads, *x, |g| {
            for (&src, &d) in argmax.iter().zip(dyd) {
                g.data_mut()[src] += d;
            }
        }),
        Op::GlobalAvgPool(x) => {
            let len = val(*x).shape()[2];
            let inv = T::one() / T::from_f64(len as f64);
            accumulate(nodes, grads, *x, |g| {
                for (chunk, &d) in g.data_mut().chunks_mut(len).zip(dyd) {
                    chunk.iter_mut().for_each(|o| *o += d * inv);
                }
            })
        }
        Op::SumAxis {
            x,
            outer,
            axis_len,
            inner,
        } => accumulate(nodes, grads, *x, |g| {
            for o in 0..*outer {
                let src = &dyd[o * inner..(o + 1) * inner];
                for a in 0..*axis_len {
                    let dst = &mut g.data_mut()[(o * axis_len + a) * inner..][..*inner];
                    dst.iter_mut().zip(src).for_each(|(t, &s)| *t += s);
                }
            }
        }),
        Op::SumAll(x) => {
            let d = dyd[0];
            accumulate(nodes, grads, *x, |g| g.data_mut().iter_mut().for_each(|o| *o += d))
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let tx = val(*x);
            let (b, c) = (tx.shape()[0], tx.shape()[1]);
            let l: usize = tx.shape()[2..].iter().product();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * l;
                    for i in off..off + l {
                        sum_dy[ch] += dyd[i];
                        sum_dy_xhat[ch] += dyd[i] * xhat[i];
                    }
                }
            }
            accumulate(nodes, grads, *gamma, |g| g.add_assign_slice(&sum_dy_xhat));
            accumulate(nodes, grads, *beta, |g| g.add_assign_slice(&sum_dy));
            let tg = val(*gamma);
            let nf = T::from_f64((b * l) as f64);
            accumulate(nodes, grads, *x, |g| {
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * l;
                        let k = tg.data()[ch] * inv_std[ch];
                        for i in off..off + l {
                            let d = if *train {
                                k * (dyd[i] - sum_dy[ch] / nf - xhat[i] * sum_dy_xhat[ch] / nf)
                            } else {
                                k * dyd[i]
                            };
                            g.data_mut()[i] += d;
                        }
                    }
                }
            });
        }
        Op::L2Normalize { x, norms } => {
            let d = node.value.shape()[1];
            accumulate(nodes, grads, *x, |g| {
                for (r, &nrm) in norms.iter().enumerate() {
                    let y = &node.value.data()[r * d..(r + 1) * d];
                    let dyr = &dyd[r * d..(r + 1) * d];
                    let dot = y.iter().zip(dyr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for ((o, &yv), &dv) in g.data_mut()[r * d..(r + 1) * d].iter_mut().zip(y).zip(dyr) {
                        *o += (dv - yv * dot) / nrm;
                    }
                }
            })
        }
        Op::LogSoftmax(x) => {
            let c = node.value.shape()[1];
            accumulate(nodes, grads, *x, |g| {
                for ((orow, yrow), drow) in g
                    .data_mut()
                    .chunks_mut(c)
                    .zip(node.value.data().chunks(c))
                    .zip(dyd.chunks(c))
                {
                    let s = drow.iter().fold(T::zero(), |a, &v| a + v);
                    for ((o, &y), &d) in orow.iter_mut().zip(yrow).zip(drow) {
                        *o += d - y.exp() * s;
                    }
                }
            })
        }
        Op::Pick { x, idx } => {
            let c = val(*x).shape()[1];
            accumulate(nodes, grads, *x, |g| {
                for (i, &j) in idx.iter().enumerate() {
                    g.data_mut()[i * c + j] += dyd[i];
                }
            })
        }
        Op::EmbedMean { table, rows } => {
            let d = val(*table).shape()[1];
            accumulate(nodes, grads, *table, |g| {
                for (r, ids) in rows.iter().enumerate() {
                    let inv = T::one() / T::from_f64(ids.len() as f64);
                    let drow = &dyd[r * d..(r + 1) * d];
                    for &id in ids {
                        for (o, &dv) in g.data_mut()[id * d..(id + 1) * d].iter_mut().zip(drow) {
                            *o += dv * inv;
                        }
                    }
                }
            })
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn add_assign_slice(&mut self, other: &[T]) {
        for (a, &b) in self.data_mut().iter_mut().zip(other) {
            *a += b;
        }
    }
}
