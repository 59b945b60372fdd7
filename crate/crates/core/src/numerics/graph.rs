//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Each
//! node owns its value; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node that depends on a parameter or on an
//! input marked `requires_grad`.

use std::collections::HashMap;

use super::param::{ParamGrads, ParamId, ParamStore};
use super::tensor::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Residual(usize, usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, shift: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    RepeatRows(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    SelectRows(usize, Vec<usize>),
    Pick(usize, Vec<(usize, usize)>),
    L2NormalizeRows { x: usize, norms: Vec<f64> },
    BceWithLogits(usize, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it
    /// or does not track gradients.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl<'a> Graph<'a> {
    /// A graph with no parameter store; only [`Graph::input`] leaves.
    pub fn new() -> Self {
        Graph { store: None, nodes: Vec::new(), param_vars: HashMap::new(), track_params: true }
    }

    /// A graph whose parameter leaves read from `store` and receive gradients.
    pub fn with_params(store: &'a ParamStore) -> Self {
        Graph { store: Some(store), ..Graph::new() }
    }

    /// Like [`Graph::with_params`] but nothing tracks gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Graph { store: Some(store), track_params: false, ..Graph::new() }
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

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param => self.track_params,
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b)
            | Op::AddRow(a, b)
            | Op::Residual(a, b, _) => self.needs(*a) || self.needs(*b),
            Op::LayerNorm { x, gain, shift, .. } => self.needs(*x) || self.needs(*gain) || self.needs(*shift),
            Op::ConcatRows(parts) => parts.iter().any(|&p| self.needs(p)),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RepeatRows(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::SelectRows(a, _)
            | Op::Pick(a, _)
            | Op::BceWithLogits(a, _)
            | Op::L2NormalizeRows { x: a, .. } => self.needs(*a),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// A leaf that optionally tracks gradients (for checking derivatives
    /// with respect to non-parameter inputs).
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        assert!(t.is_finite(), "non-finite input leaf");
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let value = store.tensor(id).clone();
        let needs_grad = self.track_params;
        self.nodes.push(Node { value, op: Op::Param, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- products

    /// `a · b` for `a: n x k`, `b: k x m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{} x {}", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), self.value(b).data(), &mut out, false);
        self.push("matmul", Tensor::matrix(n, m, out), Op::MatMul(a.0, b.0))
    }

    /// `a · bᵀ` for `a: n x k`, `b: m x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2();
        let (m, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("{} x {}ᵀ", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm_strided(
            n,
            k,
            m,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            &mut out,
            false,
        );
        self.push("matmul_nt", Tensor::matrix(n, m, out), Op::MatMulNT(a.0, b.0))
    }

    /// `x · weight (+ bias)`, with `bias` broadcast over rows.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ------------------------------------------------------------ elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).dims2() != self.value(b).dims2() {
            return Err(Error::dim(op, format!("{} vs {}", shape_str(self.value(a)), shape_str(self.value(b)))));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, Tensor::matrix(r, c, data), op)
    }

    fn map_unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(name, Tensor::matrix(r, c, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, Op::Minimum(a.0, b.0), |x, y| if x <= y { x } else { y })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, Op::Maximum(a.0, b.0), |x, y| if x >= y { x } else { y })
    }

    /// `a + bias` where `bias` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(bias).dims2() != (1, c) {
            return Err(Error::dim(
                "add_row",
                format!("{} + row {}", shape_str(self.value(a)), shape_str(self.value(bias))),
            ));
        }
        let b = self.value(bias).data();
        let data = self.value(a).data().chunks(c).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        self.push("add_row", Tensor::matrix(r, c, data), Op::AddRow(a.0, bias.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map_unary("scale", a, Op::Scale(a.0, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map_unary("add_scalar", a, Op::AddScalar(a.0), |x| x + k)
    }

    /// `base + weight · aux`, elementwise and unnormalised.
    pub fn residual_enhance(&mut self, base: Var, aux: Var, weight: f64) -> Result<Var> {
        self.zip_with("residual_enhance", base, aux, Op::Residual(base.0, aux.0, weight), |x, y| x + weight * y)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary("relu", a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_unary("sigmoid", a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map_unary("abs", a, Op::Abs(a.0), f64::abs)
    }

    /// Elementwise `max(x,0) - x·t + ln(1 + e^{-|x|})`, the binary cross
    /// entropy of logits `x` against targets `t`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        if self.value(x).numel() != targets.len() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{} logits vs {} targets", self.value(x).numel(), targets.len()),
            ));
        }
        let (r, c) = self.value(x).dims2();
        let data = self.value(x).data().iter().zip(targets).map(|(&x, &t)| bce_logit(x, t)).collect();
        self.push("bce_with_logits", Tensor::matrix(r, c, data), Op::BceWithLogits(x.0, targets.to_vec()))
    }

    // ---------------------------------------------------------------- rowwise

    /// Row softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", Tensor::matrix(r, c, data), Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax_rows", Tensor::matrix(r, c, data), Op::LogSoftmaxRows(a.0))
    }

    /// Row layer normalisation with population variance; `gain` and `shift`
    /// are `1 x m` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if c < 2 {
            return Err(Error::Degenerate { op: "layer_norm", detail: format!("row width {c} < 2") });
        }
        if self.value(gain).dims2() != (1, c) || self.value(shift).dims2() != (1, c) {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "x {} gain {} shift {}",
                    shape_str(self.value(x)),
                    shape_str(self.value(gain)),
                    shape_str(self.value(shift))
                ),
            ));
        }
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + s[j]);
            }
        }
        self.push(
            "layer_norm",
            Tensor::matrix(r, c, out),
            Op::LayerNorm { x: x.0, gain: gain.0, shift: shift.0, xhat, rstd },
        )
    }

    /// Divides every row by its L2 norm. A zero row maps to the uniform
    /// vector `1/sqrt(m)` and passes no gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for row in self.value(a).data().chunks(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                data.extend(row.iter().map(|v| v / n));
            } else {
                data.extend(std::iter::repeat_n(1.0 / (c as f64).sqrt(), c));
            }
        }
        self.push("l2_normalize_rows", Tensor::matrix(r, c, data), Op::L2NormalizeRows { x: a.0, norms })
    }

    // -------------------------------------------------------------- reductions

    /// Column means: `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push("mean_rows", Tensor::matrix(1, c, out), Op::MeanRows(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a.0))
    }

    // ------------------------------------------------------------- structural

    /// Broadcasts a single row to `n` identical rows.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if r != 1 || n == 0 {
            return Err(Error::dim("repeat_rows", format!("{} to {n} rows", shape_str(self.value(a)))));
        }
        let data = self.value(a).data().repeat(n);
        self.push("repeat_rows", Tensor::matrix(n, c, data), Op::RepeatRows(a.0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pc != c {
                return Err(Error::dim("concat_rows", format!("width {pc} vs {c}")));
            }
            data.extend_from_slice(self.value(p).data());
            r += pr;
        }
        self.push("concat_rows", Tensor::matrix(r, c, data), Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::matrix(len, c, data), Op::SliceRows(a.0, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let data = self.value(a).data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        self.push("slice_cols", Tensor::matrix(r, len, data), Op::SliceCols(a.0, start))
    }

    /// Gathers the listed rows (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::dim("select_rows", format!("indices {rows:?} of {r} rows")));
        }
        let src = self.value(a).data();
        let data = rows.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        self.push("select_rows", Tensor::matrix(rows.len(), c, data), Op::SelectRows(a.0, rows.to_vec()))
    }

    /// Gathers single entries into a `k x 1` column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if at.is_empty() || at.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Error::dim("pick", format!("entries {at:?} of {r}x{c}")));
        }
        let data = at.iter().map(|&(i, j)| self.value(a).data()[i * c + j]).collect();
        self.push("pick", Tensor::matrix(at.len(), 1, data), Op::Pick(a.0, at.to_vec()))
    }

    // --------------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut params = ParamGrads(vec![None; self.store.map_or(0, |s| s.len())]);
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                params.0[id.0] = Some(g.clone());
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.val(*a).dims2();
                let m = self.val(*b).cols();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dY · Bᵀ
                    gemm_strided(n, m, k, gy, (m as isize, 1), self.val(*b).data(), (1, m as isize), ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dY
                    gemm_strided(k, n, m, self.val(*a).data(), (1, k as isize), gy, (m as isize, 1), gb, true);
                }
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = self.val(*a).dims2();
                let m = self.val(*b).rows();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dY · B
                    gemm(n, m, k, gy, self.val(*b).data(), ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = dYᵀ · A
                    gemm_strided(m, n, k, gy, (1, m as isize), self.val(*a).data(), (k as isize, 1), gb, true);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).zip(bv).for_each(|((g, d), b)| *g += d * b));
                self.acc(grads, *b, |g| g.iter_mut().zip(gy).zip(av).for_each(|((g, d), a)| *g += d * a));
            }
            Op::Div(a, b) => {
                let bv = self.val(*b).data();
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).zip(bv).for_each(|((g, d), b)| *g += d / b));
                self.acc(grads, *b, |g| {
                    g.iter_mut().zip(gy).zip(bv).zip(y).for_each(|(((g, d), b), y)| *g -= d * y / b)
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let picks_a = |x: f64, z: f64| if is_min { x <= z } else { x >= z };
                self.acc(grads, *a, |g| {
                    for (j, gj) in g.iter_mut().enumerate() {
                        if picks_a(av[j], bv[j]) {
                            *gj += gy[j];
                        }
                    }
                });
                self.acc(grads, *b, |g| {
                    for (j, gj) in g.iter_mut().enumerate() {
                        if !picks_a(av[j], bv[j]) {
                            *gj += gy[j];
                        }
                    }
                });
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                let c = self.val(*bias).numel();
                self.acc(grads, *bias, |g| {
                    for row in gy.chunks(c) {
                        axpy(g, row, 1.0);
                    }
                });
            }
            Op::Scale(a, k) => self.acc(grads, *a, |g| axpy(g, gy, *k)),
            Op::AddScalar(a) => self.acc(grads, *a, |g| axpy(g, gy, 1.0)),
            Op::Residual(base, aux, w) => {
                self.acc(grads, *base, |g| axpy(g, gy, 1.0));
                self.acc(grads, *aux, |g| axpy(g, gy, *w));
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                self.acc(grads, *a, |g| {
                    g.iter_mut().zip(gy).zip(x).for_each(|((g, d), x)| {
                        if *x > 0.0 {
                            *g += d
                        }
                    })
                });
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).zip(y).for_each(|((g, d), s)| *g += d * s * (1.0 - s)));
            }
            Op::Abs(a) => {
                let x = self.val(*a).data();
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).zip(x).for_each(|((g, d), x)| *g += d * sign(*x)));
            }
            Op::BceWithLogits(a, t) => {
                let x = self.val(*a).data();
                self.acc(grads, *a, |g| {
                    g.iter_mut()
                        .zip(gy)
                        .zip(x.iter().zip(t))
                        .for_each(|((g, d), (x, t))| *g += d * (sigmoid(*x) - t))
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                self.acc(grads, *a, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, s)| d * s).sum();
                        gr.iter_mut().zip(dr).zip(yr).for_each(|((g, d), s)| *g += s * (d - dot));
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.cols();
                self.acc(grads, *a, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = dr.iter().sum();
                        gr.iter_mut().zip(dr).zip(yr).for_each(|((g, d), l)| *g += d - l.exp() * total);
                    }
                });
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let c = node.value.cols();
                let gv = self.val(*gain).data();
                self.acc(grads, *gain, |g| {
                    for (dr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        g.iter_mut().zip(dr).zip(hr).for_each(|((g, d), h)| *g += d * h);
                    }
                });
                self.acc(grads, *shift, |g| {
                    for dr in gy.chunks(c) {
                        axpy(g, dr, 1.0);
                    }
                });
                self.acc(grads, *x, |g| {
                    let mut dh = vec![0.0; c];
                    for (((gr, dr), hr), rs) in g.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)).zip(rstd) {
                        dh.iter_mut().zip(dr).zip(gv).for_each(|((o, d), w)| *o = d * w);
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gr[j] += rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = node.value.cols();
                self.acc(grads, *x, |g| {
                    for (((gr, dr), yr), n) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)).zip(norms) {
                        if *n == 0.0 {
                            continue;
                        }
                        let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        gr.iter_mut().zip(dr).zip(yr).for_each(|((g, d), y)| *g += (d - y * dot) / n);
                    }
                });
            }
            Op::MeanRows(a) => {
                let r = self.val(*a).rows();
                self.acc(grads, *a, |g| {
                    for gr in g.chunks_mut(gy.len()) {
                        axpy(gr, gy, 1.0 / r as f64);
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(a) => {
                let n = self.val(*a).numel() as f64;
                self.acc(grads, *a, |g| g.iter_mut().for_each(|v| *v += gy[0] / n));
            }
            Op::RepeatRows(a) => {
                let c = node.value.cols();
                self.acc(grads, *a, |g| {
                    for dr in gy.chunks(c) {
                        axpy(g, dr, 1.0);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    let seg = &gy[off..off + n];
                    self.acc(grads, p, |g| axpy(g, seg, 1.0));
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.cols();
                let off = start * c;
                self.acc(grads, *a, |g| axpy(&mut g[off..off + gy.len()], gy, 1.0));
            }
            Op::SliceCols(a, start) => {
                let len = node.value.cols();
                let c = self.val(*a).cols();
                self.acc(grads, *a, |g| {
                    for (gr, dr) in g.chunks_mut(c).zip(gy.chunks(len)) {
                        axpy(&mut gr[*start..start + len], dr, 1.0);
                    }
                });
            }
            Op::SelectRows(a, rows) => {
                let c = node.value.cols();
                self.acc(grads, *a, |g| {
                    for (k, &ri) in rows.iter().enumerate() {
                        axpy(&mut g[ri * c..(ri + 1) * c], &gy[k * c..(k + 1) * c], 1.0);
                    }
                });
            }
            Op::Pick(a, at) => {
                let c = self.val(*a).cols();
                self.acc(grads, *a, |g| {
                    for (k, &(ri, cj)) in at.iter().enumerate() {
                        g[ri * c + cj] += gy[k];
                    }
                });
            }
        }
    }

    /// The gradient buffer of `parent`, created on first use; `None` when the
    /// parent does not track gradients.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], parent: usize) -> Option<&'g mut [f64]> {
        if !self.nodes[parent].needs_grad {
            return None;
        }
        let n = self.nodes[parent].value.numel();
        Some(grads[parent].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], parent: usize, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.slot(grads, parent) {
            f(g);
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

/// Binary cross entropy of one logit against target `t`, in the stable
/// `max(x,0) - x·t + ln(1 + e^{-|x|})` form.
pub fn bce_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
