use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along rows (stacks vertically / reduces each column).
    Rows,
    /// Along columns (stacks horizontally / reduces each row).
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { a: Var, axis: Axis, start: usize },
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    Gather { table: Var, idx: Vec<usize> },
    LeakyRelu(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { a: Var, axis: Axis },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f64> },
    Dropout { a: Var, keep: Vec<f64> },
    Scale(Var, f64),
    SigmoidCe { logits: Var, targets: Tensor, scale: f64 },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Tensor, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive applications in topological order so that a single
/// reverse sweep yields every adjoint.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Adjoint of a recorded value, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient summed over every use site of the parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
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

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a parameter. Each call creates a fresh leaf; gradients from all
    /// leaves of the same parameter are summed by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm_nn(av, bv, &mut out);
        self.push("matmul", out, Op::MatMul { a, b, trans_b: false })
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm_nt(av, bv, &mut out);
        self.push("matmul_t", out, Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push("add", out, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape(
                "broadcast_add",
                format!("{:?} + {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push("broadcast_add", out, Op::AddRow(a, row))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.value(parts[0]).shape();
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != first[1] {
                        return Err(Error::shape(
                            "concat",
                            format!("rows: {:?} vs {:?}", first, t.shape()),
                        ));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(rows, first[1], data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != first[0] {
                        return Err(Error::shape(
                            "concat",
                            format!("cols: {:?} vs {:?}", first, t.shape()),
                        ));
                    }
                    cols += t.cols();
                }
                let mut out = Tensor::zeros(first[0], cols);
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    for r in 0..t.rows() {
                        out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
                    }
                    offset += t.cols();
                }
                out
            }
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// `len` consecutive rows or columns starting at `start`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let out = match axis {
            Axis::Rows => {
                if start + len > av.rows() {
                    return Err(Error::shape(
                        "slice",
                        format!("rows {start}..{} of {:?}", start + len, av.shape()),
                    ));
                }
                let c = av.cols();
                Tensor::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec())?
            }
            Axis::Cols => {
                if start + len > av.cols() {
                    return Err(Error::shape(
                        "slice",
                        format!("cols {start}..{} of {:?}", start + len, av.shape()),
                    ));
                }
                let mut out = Tensor::zeros(av.rows(), len);
                for r in 0..av.rows() {
                    out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
                }
                out
            }
        };
        self.push("slice", out, Op::Slice { a, axis, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_sq();
        self.push("sum_sq", Tensor::scalar(s), Op::SumSq(a))
    }

    /// Rows of `table` selected by `idx`, in order.
    pub fn embedding_lookup(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut out = Tensor::zeros(idx.len(), c);
        for (r, &i) in idx.iter().enumerate() {
            if i >= t.rows() {
                return Err(Error::shape(
                    "embedding_lookup",
                    format!("index {i} into {:?}", t.shape()),
                ));
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(
            "embedding_lookup",
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(name, out, op)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.map(
            "leaky_relu",
            a,
            |v| if v > 0.0 { v } else { alpha * v },
            Op::LeakyRelu(a, alpha),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, |v| v * s, Op::Scale(a, s))
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        let out = match axis {
            Axis::Cols => {
                let mut out = t.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r), None);
                }
                out
            }
            Axis::Rows => {
                let mut tt = t.transpose();
                for r in 0..tt.rows() {
                    softmax_in_place(tt.row_mut(r), None);
                }
                tt.transpose()
            }
        };
        self.push("softmax", out, Op::Softmax { a, axis })
    }

    /// Row-wise softmax over the columns flagged `true` in `valid`; the
    /// rest receive probability exactly zero.
    pub fn masked_softmax(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if valid.len() != t.cols() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} for {:?}", valid.len(), t.shape()),
            ));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Invalid(
                "masked_softmax: mask excludes every position".into(),
            ));
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), Some(valid));
        }
        // The adjoint of a masked softmax is the ordinary softmax adjoint
        // because masked outputs are exactly zero.
        self.push(
            "masked_softmax",
            out,
            Op::Softmax {
                a,
                axis: Axis::Cols,
            },
        )
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.shape() != [1, n] || bv.shape() != [1, n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let mut xhat = Tensor::zeros(xv.rows(), n);
        let mut out = Tensor::zeros(xv.rows(), n);
        let mut rstds = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rstd;
            }
            let o = out.row_mut(r);
            for c in 0..n {
                o[c] = xhat.get(r, c) * gv.data()[c] + bv.data()[c];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd: rstds,
            },
        )
    }

    /// Inverted dropout. Identity (a pass-through node) when not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let keep: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let mut out = self.value(a).clone();
        for (o, k) in out.data_mut().iter_mut().zip(&keep) {
            *o *= k;
        }
        self.push("dropout", out, Op::Dropout { a, keep })
    }

    /// Stable sigmoid cross-entropy against `{0,1}` targets.
    pub fn sigmoid_ce(&mut self, logits: Var, targets: &Tensor, reduction: Reduction) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::shape(
                "sigmoid_ce",
                format!("logits {:?}, targets {:?}", z.shape(), targets.shape()),
            ));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| sigmoid_ce_elem(z, t))
            .sum();
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / z.len().max(1) as f64,
        };
        self.push(
            "sigmoid_ce",
            Tensor::scalar(total * scale),
            Op::SigmoidCe {
                logits,
                targets: targets.clone(),
                scale,
            },
        )
    }

    /// Row-wise softmax cross-entropy; row `r` has target class `targets[r]`.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != targets.len() {
            return Err(Error::shape(
                "softmax_ce",
                format!("{} targets for logits {:?}", targets.len(), z.shape()),
            ));
        }
        let mut probs = z.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= z.cols() {
                return Err(Error::Invalid(format!(
                    "softmax_ce: target class {t} out of range for {} classes",
                    z.cols()
                )));
            }
            let row = z.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(probs.row_mut(r), None);
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / targets.len().max(1) as f64,
        };
        self.push(
            "softmax_ce",
            Tensor::scalar(total * scale),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
        )
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match params.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        params.insert(*id, g.clone());
                    }
                },
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    if *trans_b {
                        // out = a b^T: da = g b, db = g^T a
                        gemm_nn(&g, bv, &mut ga);
                        gemm_tn(&g, av, &mut gb);
                    } else {
                        gemm_nt(&g, bv, &mut ga);
                        gemm_tn(av, &g, &mut gb);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let [pr, pc] = self.value(p).shape();
                        let gp = match axis {
                            Axis::Rows => {
                                let c = g.cols();
                                let t = Tensor::from_vec(
                                    pr,
                                    pc,
                                    g.data()[offset * c..(offset + pr) * c].to_vec(),
                                )?;
                                offset += pr;
                                t
                            }
                            Axis::Cols => {
                                let mut t = Tensor::zeros(pr, pc);
                                for r in 0..pr {
                                    t.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                                }
                                offset += pc;
                                t
                            }
                        };
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Slice { a, axis, start } => {
                    let [ar, ac] = self.value(*a).shape();
                    let mut ga = Tensor::zeros(ar, ac);
                    match axis {
                        Axis::Rows => {
                            ga.data_mut()[start * ac..start * ac + g.len()]
                                .copy_from_slice(g.data());
                        }
                        Axis::Cols => {
                            for r in 0..ar {
                                ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let [r, c] = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::full(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let [r, c] = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::full(r, c, g.item() / (r * c) as f64));
                }
                Op::SumSq(a) => {
                    let mut ga = self.value(*a).clone();
                    let s = 2.0 * g.item();
                    ga.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather { table, idx } => {
                    let [tr, tc] = self.value(*table).shape();
                    let mut gt = Tensor::zeros(tr, tc);
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::LeakyRelu(a, alpha) => {
                    let mut ga = g.clone();
                    for (d, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if x <= 0.0 {
                            *d *= alpha;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    for (d, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    for (d, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    for (d, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax { a, axis } => {
                    let ga = match axis {
                        Axis::Cols => softmax_backward_rows(&node.value, &g),
                        Axis::Rows => {
                            softmax_backward_rows(&node.value.transpose(), &g.transpose())
                                .transpose()
                        }
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let n = g.cols();
                    let mut gx = Tensor::zeros(g.rows(), n);
                    let mut ggain = Tensor::zeros(1, n);
                    let mut gbias = Tensor::zeros(1, n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        for c in 0..n {
                            ggain.data_mut()[c] += gr[c] * xh[c];
                            gbias.data_mut()[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data()[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>()
                            / n as f64;
                        let out = gx.row_mut(r);
                        for c in 0..n {
                            out[c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *bias, gbias);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dropout { a, keep } => {
                    let mut ga = g.clone();
                    for (d, k) in ga.data_mut().iter_mut().zip(keep) {
                        *d *= k;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    let mut ga = g.clone();
                    ga.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SigmoidCe {
                    logits,
                    targets,
                    scale,
                } => {
                    let s = g.item() * scale;
                    let mut gz = self.value(*logits).clone();
                    for (z, &t) in gz.data_mut().iter_mut().zip(targets.data()) {
                        *z = s * (sigmoid(*z) - t);
                    }
                    accumulate(&mut grads, *logits, gz);
                }
                Op::SoftmaxCe {
                    targets,
                    probs,
                    logits,
                    scale,
                } => {
                    let s = g.item() * scale;
                    let mut gz = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = gz.row_mut(r);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads, *logits, gz);
                }
            }
            grads[i] = Some(g);
        }
        for (id, g) in &params {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(format!("#{}", id.index())));
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(z,0) - z t + ln(1 + e^-|z|)`
#[inline]
pub fn sigmoid_ce_elem(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn softmax_in_place(row: &mut [f64], valid: Option<&[bool]>) {
    let is_valid = |i: usize| valid.is_none_or(|m| m[i]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| is_valid(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (i, v) in row.iter_mut().enumerate() {
        if is_valid(i) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn softmax_backward_rows(y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), g.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (yv, gv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = yv * (gv - dot);
        }
    }
    out
}
