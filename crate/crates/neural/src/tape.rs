//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every primitive appends a node holding its forward value; `backward`
//! walks the nodes in reverse and applies the matching vector-Jacobian
//! product. A tape can be differentiated once.

use std::collections::{BTreeMap, HashMap};

use crate::error::{NeuralError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter path.
pub type ParamGrads = BTreeMap<String, Tensor>;

pub const LAYER_NORM_VARIANCE_FLOOR: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Sequence layout for [`Tape::attention`]: inputs hold `batch * seq` rows,
/// sequence-major, and `heads` equal column slices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    /// Optional per-row key validity. Invalid keys are only visible to their
    /// own query position, so a fully padded prefix still has a defined output.
    pub key_valid: Option<Vec<bool>>,
}

impl AttentionLayout {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_valid {
            Some(valid) => i == j || valid[b * self.seq + j],
            None => true,
        }
    }
}

enum Op {
    Input,
    Param(String),
    Affine { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SelectRows { x: Var, rows: Vec<usize> },
    Modulate { x: Var, scale: Var, shift: Var, group: usize },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::Embedding { .. } => "embedding",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::Modulate { .. } => "modulate",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    scope: String,
    consumed: bool,
    fault: Option<(&'static str, f64)>,
    output: Option<Var>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    params: ParamGrads,
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn param(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }

    /// Gradient with respect to an input or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Label used in error messages for subsequent operations.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Record which node is the network output consumed by [`backprop`].
    pub fn mark_output(&mut self, v: Var) {
        self.output = Some(v);
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Test hook: scale the input-gradient of every `op` node by `factor`
    /// during backward. Used to confirm the gradient checker catches
    /// broken rules.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(NeuralError::NonFinite { layer: self.scope.clone(), op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, detail: String) -> NeuralError {
        NeuralError::Shape { layer: self.scope.clone(), detail }
    }

    fn label(&self, v: Var) -> String {
        match &self.nodes[v.0].op {
            Op::Param(path) => path.clone(),
            _ => self.scope.clone(),
        }
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input)
    }

    /// Parameter leaf; repeated requests for the same path share one node.
    pub fn param(&mut self, params: &ParamSet, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let t = params.get(path)?.clone();
        let v = self.push(t, Op::Param(path.to_string()))?;
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    /// `x·w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, fan_in) = (xt.rows(), xt.cols());
        if wt.rank() != 2 || wt.shape()[0] != fan_in {
            let layer = self.label(w);
            return Err(NeuralError::Shape {
                layer,
                detail: format!("input has {fan_in} columns but weight is {:?}", wt.shape()),
            });
        }
        let fan_out = wt.cols();
        let mut out = vec![0.0; n * fan_out];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != fan_out {
                let layer = self.label(b);
                return Err(NeuralError::Shape {
                    layer,
                    detail: format!("bias has {} entries, expected {fan_out}", bt.len()),
                });
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bt.data());
            }
        }
        gemm(
            n, fan_in, fan_out,
            xt.data(), (fan_in, 1),
            wt.data(), (fan_out, 1),
            &mut out, (fan_out, 1),
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let value = Tensor::matrix(n, fan_out, out)?;
        self.push(value, Op::Affine { x, w, b })
    }

    /// Row-wise normalization to zero mean and unit variance, optionally
    /// followed by an elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let xt = self.value(x);
        let (n, d) = (xt.rows(), xt.cols());
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).len() != d {
                return Err(self.shape_err(format!(
                    "layer norm over {d} columns given a {}-element affine",
                    self.value(p).len()
                )));
            }
        }
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_VARIANCE_FLOOR).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(g).for_each(|(o, g)| *o *= g);
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = xt
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::Gelu { x })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { x })
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `[batch * seq, dim]` with `dim` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let rows = layout.batch * layout.seq;
        let d = qt.cols();
        if qt.rows() != rows || kt.rows() != rows || vt.rows() != rows {
            return Err(self.shape_err(format!(
                "attention expects {rows} rows for batch {} x seq {}",
                layout.batch, layout.seq
            )));
        }
        if kt.cols() != d || vt.cols() != d || layout.heads == 0 || d % layout.heads != 0 {
            return Err(self.shape_err(format!(
                "attention width {d} incompatible with {} heads or k/v widths {}/{}",
                layout.heads,
                kt.cols(),
                vt.cols()
            )));
        }
        if let Some(valid) = &layout.key_valid {
            if valid.len() != rows {
                return Err(self.shape_err("key mask length does not match rows".into()));
            }
        }
        let (seq, heads) = (layout.seq, layout.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; layout.batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..layout.batch {
            for h in 0..heads {
                let base = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    seq, dh, seq,
                    &qt.data()[base..], (d, 1),
                    &kt.data()[base..], (1, d),
                    p, (seq, 1),
                    0.0,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        if layout.allowed(b, i, j) {
                            *s *= scale;
                            max = max.max(*s);
                        }
                    }
                    let mut total = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        if layout.allowed(b, i, j) {
                            *s = (*s - max).exp();
                            total += *s;
                        } else {
                            *s = 0.0;
                        }
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                gemm(
                    seq, seq, dh,
                    p, (seq, 1),
                    &vt.data()[base..], (d, 1),
                    &mut out[base..], (d, 1),
                    0.0,
                );
            }
        }
        let value = Tensor::matrix(rows, d, out)?;
        self.push(value, Op::Attention { q, k, v, layout, probs })
    }

    /// Row lookup into `table: [count, dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (count, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= count) {
            let layer = self.label(table);
            return Err(NeuralError::Shape {
                layer,
                detail: format!("embedding id {bad} out of range for table of {count}"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        self.push(value, Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(self.shape_err("concat_cols parts differ in row count".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(n, total, out)?;
        self.push(value, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != d) {
            return Err(self.shape_err("concat_rows parts differ in column count".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let n = out.len() / d;
        let value = Tensor::matrix(n, d, out)?;
        self.push(value, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xt.rows()) {
            return Err(self.shape_err(format!("row {bad} out of range for {} rows", xt.rows())));
        }
        let d = xt.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(xt.row(r));
        }
        let value = Tensor::matrix(rows.len(), d, out)?;
        self.push(value, Op::SelectRows { x, rows: rows.to_vec() })
    }

    /// `x·(1 + scale) + shift`, where rows `g·group .. (g+1)·group` of `x`
    /// use row `g` of `scale` and `shift`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var, group: usize) -> Result<Var> {
        let (xt, st, ht) = (self.value(x), self.value(scale), self.value(shift));
        let d = xt.cols();
        if group == 0
            || xt.rows() != st.rows() * group
            || st.cols() != d
            || ht.cols() != d
            || ht.rows() != st.rows()
        {
            return Err(self.shape_err(format!(
                "modulate: x {}x{d}, scale {}x{}, shift {}x{}, group {group}",
                xt.rows(),
                st.rows(),
                st.cols(),
                ht.rows(),
                ht.cols()
            )));
        }
        let mut out = xt.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let g = r / group;
            for ((o, s), t) in row.iter_mut().zip(st.row(g)).zip(ht.row(g)) {
                *o = *o * (1.0 + s) + t;
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        self.push(value, Op::Modulate { x, scale, shift, group })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.len() != bt.len() || at.cols() != bt.cols() {
            return Err(self.shape_err(format!(
                "add: {:?} vs {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::Scale { x, factor })
    }

    /// Reverse pass from `output` seeded with `loss_grad` (dL/d output).
    pub fn backward(&mut self, output: Var, loss_grad: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(NeuralError::TapeConsumed);
        }
        let out_val = self.value(output);
        if out_val.len() != loss_grad.len() {
            return Err(self.shape_err(format!(
                "loss gradient has {} elements, output has {}",
                loss_grad.len(),
                out_val.len()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(loss_grad.data().to_vec());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let is_leaf = matches!(node.op, Op::Input | Op::Param(_));
            if is_leaf {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            if let Some((op, factor)) = self.fault {
                if op == node.op.name() {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.backward_node(node, &g, &mut grads);
        }

        let mut params = ParamGrads::new();
        for (idx, g) in grads.iter().enumerate() {
            if let (Op::Param(path), Some(g)) = (&self.nodes[idx].op, g) {
                let shape = self.nodes[idx].value.shape().to_vec();
                params.insert(path.clone(), Tensor::new(shape, g.clone())?);
            }
        }
        Ok(Gradients { params, leaves: grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xt, wt) = (val(*x), val(*w));
                let (n, fan_in, fan_out) = (xt.rows(), xt.cols(), wt.cols());
                let mut dx = vec![0.0; n * fan_in];
                gemm(
                    n, fan_out, fan_in,
                    g, (fan_out, 1),
                    wt.data(), (1, fan_out),
                    &mut dx, (fan_in, 1),
                    0.0,
                );
                accumulate(grads, *x, dx);
                let mut dw = vec![0.0; fan_in * fan_out];
                gemm(
                    fan_in, n, fan_out,
                    xt.data(), (1, fan_in),
                    g, (fan_out, 1),
                    &mut dw, (fan_out, 1),
                    0.0,
                );
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; fan_out];
                    for row in g.chunks(fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = val(*x).cols();
                let mut dxhat = g.to_vec();
                if let Some(gv) = gain {
                    let gd = val(*gv).data();
                    let mut dgain = vec![0.0; d];
                    for (r, row) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dgain[j] += row[j] * xh[j];
                        }
                    }
                    for row in dxhat.chunks_mut(d) {
                        row.iter_mut().zip(gd).for_each(|(o, gg)| *o *= gg);
                    }
                    accumulate(grads, *gv, dgain);
                }
                if let Some(bv) = bias {
                    let mut dbias = vec![0.0; d];
                    for row in g.chunks(d) {
                        dbias.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    accumulate(grads, *bv, dbias);
                }
                let mut dx = vec![0.0; dxhat.len()];
                for (r, (dxr, dh)) in dx.chunks_mut(d).zip(dxhat.chunks(d)).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dxr[j] = rstd[r] * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gelu { x } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt)
                    })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (qt, kt, vt) = (val(*q), val(*k), val(*v));
                let d = qt.cols();
                let (seq, heads) = (layout.seq, layout.heads);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let rows = layout.batch * seq;
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..layout.batch {
                    for h in 0..heads {
                        let base = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        // dV = Pᵀ·dO
                        gemm(
                            seq, seq, dh,
                            p, (1, seq),
                            &g[base..], (d, 1),
                            &mut dv[base..], (d, 1),
                            0.0,
                        );
                        // dP = dO·Vᵀ
                        gemm(
                            seq, dh, seq,
                            &g[base..], (d, 1),
                            &vt.data()[base..], (1, d),
                            &mut dp, (seq, 1),
                            0.0,
                        );
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..seq {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        // dQ = dS·K, dK = dSᵀ·Q
                        gemm(
                            seq, seq, dh,
                            &dp, (seq, 1),
                            &kt.data()[base..], (d, 1),
                            &mut dq[base..], (d, 1),
                            0.0,
                        );
                        gemm(
                            seq, seq, dh,
                            &dp, (1, seq),
                            &qt.data()[base..], (d, 1),
                            &mut dk[base..], (d, 1),
                            0.0,
                        );
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.cols();
                let mut dt = vec![0.0; tt.len()];
                for (r, &i) in ids.iter().enumerate() {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(o, v)| *o += v);
                }
                accumulate(grads, *table, dt);
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut dp = Vec::with_capacity(val(p).len());
                    for row in g.chunks(total) {
                        dp.extend_from_slice(&row[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(grads, p, dp);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let xt = val(*x);
                let d = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                for (i, &r) in rows.iter().enumerate() {
                    dx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(o, v)| *o += v);
                }
                accumulate(grads, *x, dx);
            }
            Op::Modulate { x, scale, shift, group } => {
                let (xt, st) = (val(*x), val(*scale));
                let d = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                let mut ds = vec![0.0; st.len()];
                let mut dsh = vec![0.0; st.len()];
                for (r, gr) in g.chunks(d).enumerate() {
                    let gi = r / group;
                    let xr = xt.row(r);
                    let sr = st.row(gi);
                    for j in 0..d {
                        dx[r * d + j] = gr[j] * (1.0 + sr[j]);
                        ds[gi * d + j] += gr[j] * xr[j];
                        dsh[gi * d + j] += gr[j];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *scale, ds);
                accumulate(grads, *shift, dsh);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
        }
    }
}

/// Differentiate a tape produced by [`crate::net_forward`] with respect to
/// its marked output.
pub fn backprop(tape: &mut Tape, loss_grad: &Tensor) -> Result<Gradients> {
    let out = tape.output.ok_or_else(|| NeuralError::Shape {
        layer: tape.scope.clone(),
        detail: "tape has no marked output".into(),
    })?;
    tape.backward(out, loss_grad)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `c ← beta·c + a·b` for an `m×k` by `k×n` product with explicit
/// (row, column) strides. Slices start at the first element of each view.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs view out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs view out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output view out of bounds");
    // SAFETY: the asserts above bound every element each view can touch.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n,
            1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta,
            c.as_mut_ptr(), rsc as isize, csc as isize,
        );
    }
}
