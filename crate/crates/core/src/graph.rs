//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Node
//! values are kept on the tape, so a graph lives for exactly one forward and
//! at most one backward pass. Parameters are borrowed from a [`ParamStore`]
//! and appear on the tape once, however many times they are used.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, sigmoid, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Work accounting for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OpCounter {
    pub mul_adds: u64,
    /// Number of query x key score evaluations, summed over heads.
    pub attention_cells: u64,
    pub peak_live_values: u64,
}

impl OpCounter {
    pub fn merge(&mut self, other: &OpCounter) {
        self.mul_adds += other.mul_adds;
        self.attention_cells += other.attention_cells;
        self.peak_live_values = self.peak_live_values.max(other.peak_live_values);
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    StraightThrough { x: Var },
    MaskRows { x: Var, keep: Vec<bool> },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatCols { xs: Vec<Var> },
    ConcatRows { xs: Vec<Var> },
    Reshape { x: Var },
    AttnMaps { q: Var, k: Var, heads: usize, scale: f64, mask: Vec<bool>, gate: Option<Var>, ez: Option<Vec<f64>> },
    AttnApply { maps: Var, v: Var, heads: usize, rows: Vec<usize> },
    Sum { x: Var },
    BceWithLogits { x: Var, targets: Vec<f64> },
    SmoothL1 { x: Var, targets: Vec<f64>, beta: f64 },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    train: bool,
    counter: OpCounter,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter that received one, in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

impl<'p> Graph<'p> {
    /// A graph whose parameters receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_mode(params, true)
    }

    /// A graph for inference: parameters are constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'p ParamStore, train: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            train,
            counter: OpCounter::default(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.tensor(*id),
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.counter.peak_live_values += value.len() as u64;
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (useful for gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad: self.train });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn ensure_finite(&self, v: Var, what: &'static str) -> Result<()> {
        self.value(v).ensure_finite(what)
    }

    // ---- forward operations -------------------------------------------

    /// `x W + b` with `W: din x dout` and `b: dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.dims(x);
        let (wr, dout) = self.dims(w);
        if wr != din {
            return Err(dim_err("linear", format!("x is {n}x{din}, W is {wr}x{dout}")));
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bd = self.data(b);
            if bd.len() != dout {
                return Err(dim_err("linear", format!("bias has {} values, need {dout}", bd.len())));
            }
            for row in out.chunks_mut(dout.max(1)) {
                row.copy_from_slice(bd);
            }
        }
        matmul_acc(self.data(x), self.data(w), &mut out, n, din, dout);
        self.counter.mul_adds += (n * din * dout) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::matrix(n, dout, out), Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (kb, m) = self.dims(b);
        if k != kb {
            return Err(dim_err("matmul", format!("{n}x{k} * {kb}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.data(a), self.data(b), &mut out, n, k, m);
        self.counter.mul_adds += (n * k * m) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul { a, b }, rg))
    }

    /// Elementwise sum; a single-row `b` is broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let (bn, bm) = self.dims(b);
        if bm != m || (bn != n && bn != 1) {
            return Err(dim_err("add", format!("{n}x{m} + {bn}x{bm}")));
        }
        let bd = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &av)| av + if bn == n { bd[i] } else { bd[i % m] })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out), Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let (n, m) = t.dims2();
        let out = t.data().iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(n, m, out), Op::Scale { x, c }, rg)
    }

    /// `x + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != c.len() {
            return Err(dim_err("add_const", format!("{} vs {}", t.len(), c.len())));
        }
        let (n, m) = t.dims2();
        let out = t.data().iter().zip(c).map(|(a, b)| a + b).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, m, out), Op::AddConst { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, m) = t.dims2();
        let out = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(n, m, out), Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, m) = t.dims2();
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(n, m, out), Op::Sigmoid { x }, rg)
    }

    /// Forward value `hard`, identity gradient to `x`.
    pub fn straight_through(&mut self, x: Var, hard: &[f64]) -> Result<Var> {
        let (n, m) = self.dims(x);
        if hard.len() != n * m {
            return Err(dim_err("straight_through", format!("{} vs {}", hard.len(), n * m)));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, m, hard.to_vec()), Op::StraightThrough { x }, rg))
    }

    /// Zero the rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (n, m) = self.dims(x);
        if keep.len() != n {
            return Err(dim_err("mask_rows", format!("{} flags for {n} rows", keep.len())));
        }
        let mut out = self.data(x).to_vec();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out[i * m..(i + 1) * m].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MaskRows { x, keep: keep.to_vec() }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, m) = t.dims2();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(n, m, out), Op::SoftmaxRows { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        if self.value(gain).len() != d || self.value(shift).len() != d {
            return Err(dim_err("layer_norm", format!("affine params must have {d} values")));
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let sd = self.data(shift);
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[i] = r;
            for c in 0..d {
                let h = (row[c] - mean) * r;
                xhat[i * d + c] = h;
                out[i * d + c] = h * gd[c] + sd[c];
            }
        }
        self.counter.mul_adds += (2 * n * d) as u64;
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(Tensor::matrix(n, d, out), Op::LayerNorm { x, gain, shift, xhat, rstd }, rg))
    }

    /// Channelwise maximum over rows, returned as a `1 x D` row.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        if n == 0 {
            return Err(dim_err("max_pool_rows", "empty sequence".into()));
        }
        let xd = self.data(x);
        let mut out = xd[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..n {
            for c in 0..d {
                let v = xd[i * d + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(1, d, out), Op::MaxPoolRows { x, argmax }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x).gather_rows(idx)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let n = xs.first().map(|&v| self.dims(v).0).unwrap_or(0);
        let widths: Vec<usize> = xs.iter().map(|&v| self.dims(v).1).collect();
        if xs.iter().any(|&v| self.dims(v).0 != n) {
            return Err(dim_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[i * w..(i + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::matrix(n, total, out), Op::ConcatCols { xs: xs.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let m = xs.first().map(|&v| self.dims(v).1).unwrap_or(0);
        if xs.iter().any(|&v| self.dims(v).1 != m) {
            return Err(dim_err("concat_rows", "column counts differ".into()));
        }
        let mut out = Vec::new();
        let mut n = 0;
        for &v in xs {
            out.extend_from_slice(self.data(v));
            n += self.dims(v).0;
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::matrix(n, m, out), Op::ConcatRows { xs: xs.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if t.len() != rows * cols {
            return Err(dim_err("reshape", format!("{} values into {rows}x{cols}", t.len())));
        }
        let out = Tensor::matrix(rows, cols, t.data().to_vec());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Per-head scaled dot-product attention weights.
    ///
    /// `q: Nq x D` and `k: Nk x D` are already projected. The result stacks
    /// the head maps as an `(H * Nq) x Nk` matrix, head-major. Keys with a
    /// false `key_mask` entry get zero weight. An optional `gate` (`Nk`
    /// values in `[0, 1]`) reweights keys multiplicatively before
    /// normalisation: `A_ij = g_j exp(s_ij) / sum_k g_k exp(s_ik)`.
    pub fn attention_maps(
        &mut self,
        q: Var,
        k: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
        gate: Option<Var>,
    ) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if d != dk {
            return Err(dim_err("attention", format!("query width {d}, key width {dk}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let mask: Vec<bool> = match key_mask {
            Some(m) if m.len() != nk => {
                return Err(dim_err("attention", format!("{} mask flags for {nk} keys", m.len())))
            }
            Some(m) => m.to_vec(),
            None => vec![true; nk],
        };
        let mut w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        if let Some(g) = gate {
            let gd = self.data(g);
            if gd.len() != nk {
                return Err(dim_err("attention", format!("{} gates for {nk} keys", gd.len())));
            }
            for (wj, gj) in w.iter_mut().zip(gd) {
                *wj *= gj;
            }
        }
        if !w.iter().any(|&v| v > 0.0) {
            return Err(Error::EmptyRegion);
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let qd = self.data(q);
        let kd = self.data(k);
        let want_ez = gate.is_some_and(|g| self.rg(g));
        let mut maps = vec![0.0; heads * nq * nk];
        let mut ez = if want_ez { Some(vec![0.0; heads * nq * nk]) } else { None };
        for h in 0..heads {
            for i in 0..nq {
                let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                let base = (h * nq + i) * nk;
                let row = &mut maps[base..base + nk];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..nk {
                    if w[j] > 0.0 {
                        let s = dot(qi, &kd[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
                        row[j] = s;
                        if s > mx {
                            mx = s;
                        }
                    }
                }
                let mut z = 0.0;
                for j in 0..nk {
                    if w[j] > 0.0 {
                        let e = libm::exp(row[j] - mx);
                        row[j] = e;
                        z += w[j] * e;
                    } else {
                        row[j] = 0.0;
                    }
                }
                if let Some(ez) = ez.as_mut() {
                    for j in 0..nk {
                        ez[base + j] = row[j] / z;
                    }
                }
                for j in 0..nk {
                    row[j] = w[j] * row[j] / z;
                }
            }
        }
        self.counter.attention_cells += (heads * nq * nk) as u64;
        self.counter.mul_adds += (heads * nq * nk * dh) as u64;
        let rg = self.rg(q) || self.rg(k) || want_ez;
        Ok(self.push(
            Tensor::matrix(heads * nq, nk, maps),
            Op::AttnMaps { q, k, heads, scale, mask, gate, ez },
            rg,
        ))
    }

    /// Concatenated head outputs `gather(A_h, rows) V_h` for the selected
    /// query rows. `v: Nk x D`; the result is `|rows| x D`.
    pub fn attention_apply(&mut self, maps: Var, v: Var, heads: usize, rows: &[usize]) -> Result<Var> {
        let (hn, nk) = self.dims(maps);
        let (nv, d) = self.dims(v);
        if heads == 0 || hn % heads != 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide the maps")));
        }
        if nv != nk {
            return Err(dim_err("attention", format!("{nk} keys but {nv} values")));
        }
        let nq = hn / heads;
        if let Some(&bad) = rows.iter().find(|&&r| r >= nq) {
            return Err(dim_err("attention", format!("row {bad} of {nq}")));
        }
        let dh = d / heads;
        let ad = self.data(maps);
        let vd = self.data(v);
        let mut out = vec![0.0; rows.len() * d];
        for (r, &qi) in rows.iter().enumerate() {
            for h in 0..heads {
                let arow = &ad[(h * nq + qi) * nk..(h * nq + qi + 1) * nk];
                let orow = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for (j, &a) in arow.iter().enumerate() {
                    let vrow = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += a * vv;
                    }
                }
            }
        }
        self.counter.mul_adds += (heads * rows.len() * nk * dh) as u64;
        let rg = self.rg(maps) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(rows.len(), d, out),
            Op::AttnApply { maps, v, heads, rows: rows.to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::matrix(1, 1, vec![s]), Op::Sum { x }, rg)
    }

    /// Summed binary cross-entropy of logits `x` against `targets`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xd = self.data(x);
        if xd.len() != targets.len() {
            return Err(dim_err("bce", format!("{} logits, {} targets", xd.len(), targets.len())));
        }
        let s = xd
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + libm::log1p(libm::exp(-z.abs())))
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(1, 1, vec![s]),
            Op::BceWithLogits { x, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Summed smooth-L1 distance between `x` and `targets`.
    pub fn smooth_l1(&mut self, x: Var, targets: &[f64], beta: f64) -> Result<Var> {
        let xd = self.data(x);
        if xd.len() != targets.len() {
            return Err(dim_err("smooth_l1", format!("{} vs {}", xd.len(), targets.len())));
        }
        let s = xd.iter().zip(targets).map(|(&a, &t)| smooth_l1(a - t, beta)).sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(1, 1, vec![s]),
            Op::SmoothL1 { x, targets: targets.to_vec(), beta },
            rg,
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagate from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).len() != 1 {
            return Err(dim_err("backward", "output must be a scalar".into()));
        }
        self.backward_with(out, &[1.0])
    }

    /// Back-propagate an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: &[f64]) -> Result<Grads> {
        if seed.len() != self.value(out).len() {
            return Err(dim_err("backward", "seed shape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, Var(i), &dy, &mut grads);
            grads[i] = Some(dy);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
        }
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Grads { grads, params })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, this: Var, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = self.dims(*x);
                let dout = self.dims(*w).1;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    matmul_a_bt_acc(dy, self.data(*w), dx, n, dout, din);
                }
                if let Some(dw) = self.grad_slot(grads, *w) {
                    matmul_at_b_acc(self.data(*x), dy, dw, n, din, dout);
                }
                if let Some(b) = b {
                    if let Some(db) = self.grad_slot(grads, *b) {
                        for row in dy.chunks(dout.max(1)) {
                            for (g, d) in db.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if let Some(da) = self.grad_slot(grads, *a) {
                    matmul_a_bt_acc(dy, self.data(*b), da, n, m, k);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    matmul_at_b_acc(self.data(*a), dy, db, n, k, m);
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    add_into(da, dy);
                }
                let (bn, bm) = self.dims(*b);
                if let Some(db) = self.grad_slot(grads, *b) {
                    if bn * bm == dy.len() {
                        add_into(db, dy);
                    } else {
                        for row in dy.chunks(bm.max(1)) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (g, d) in dx.iter_mut().zip(dy) {
                        *g += c * d;
                    }
                }
            }
            Op::AddConst { x } | Op::StraightThrough { x } | Op::Reshape { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    add_into(dx, dy);
                }
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((g, d), &v) in dx.iter_mut().zip(dy).zip(xd) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let yd = self.data(this);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((g, d), &y) in dx.iter_mut().zip(dy).zip(yd) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::MaskRows { x, keep } => {
                let m = self.dims(*x).1;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (i, &k) in keep.iter().enumerate() {
                        if k {
                            add_into(&mut dx[i * m..(i + 1) * m], &dy[i * m..(i + 1) * m]);
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let m = self.dims(*x).1.max(1);
                let yd = self.data(this);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((gx, gy), y) in dx.chunks_mut(m).zip(dy.chunks(m)).zip(yd.chunks(m)) {
                        let r = dot(gy, y);
                        for j in 0..m {
                            gx[j] += y[j] * (gy[j] - r);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let (n, d) = self.dims(*x);
                let gd = self.data(*gain);
                if let Some(dg) = self.grad_slot(grads, *gain) {
                    for i in 0..n {
                        for c in 0..d {
                            dg[c] += dy[i * d + c] * xhat[i * d + c];
                        }
                    }
                }
                if let Some(ds) = self.grad_slot(grads, *shift) {
                    for row in dy.chunks(d.max(1)) {
                        add_into(ds, row);
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            let v = dy[i * d + c] * gd[c];
                            dxhat[c] = v;
                            mean_d += v;
                            mean_dx += v * xhat[i * d + c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            dx[i * d + c] += rstd[i] * (dxhat[c] - mean_d - xhat[i * d + c] * mean_dx);
                        }
                    }
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                let d = self.dims(*x).1;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (c, &i) in argmax.iter().enumerate() {
                        dx[i * d + c] += dy[c];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let m = self.dims(*x).1;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * m..(i + 1) * m], &dy[r * m..(r + 1) * m]);
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let total = self.dims(this).1;
                let n = self.dims(this).0;
                let mut off = 0;
                for &v in xs {
                    let w = self.dims(v).1;
                    if let Some(dx) = self.grad_slot(grads, v) {
                        for i in 0..n {
                            add_into(&mut dx[i * w..(i + 1) * w], &dy[i * total + off..i * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &v in xs {
                    let len = self.value(v).len();
                    if let Some(dx) = self.grad_slot(grads, v) {
                        add_into(dx, &dy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::AttnMaps { q, k, heads, scale, mask, gate, ez } => {
                let (nq, d) = self.dims(*q);
                let nk = self.dims(*k).0;
                let dh = d / heads;
                let ad = self.data(this);
                let qd = self.data(*q);
                let kd = self.data(*k);
                let mut dq = if self.rg(*q) { Some(vec![0.0; nq * d]) } else { None };
                let mut dk = if self.rg(*k) { Some(vec![0.0; nk * d]) } else { None };
                let mut dgate = if ez.is_some() { Some(vec![0.0; nk]) } else { None };
                for h in 0..*heads {
                    for i in 0..nq {
                        let base = (h * nq + i) * nk;
                        let gy = &dy[base..base + nk];
                        if gy.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        let arow = &ad[base..base + nk];
                        let r = dot(gy, arow);
                        for j in 0..nk {
                            let ds = arow[j] * (gy[j] - r) * scale;
                            if ds != 0.0 {
                                if let Some(dq) = dq.as_mut() {
                                    let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                                    for (g, kv) in dq[i * d + h * dh..i * d + (h + 1) * dh].iter_mut().zip(kj) {
                                        *g += ds * kv;
                                    }
                                }
                                if let Some(dk) = dk.as_mut() {
                                    let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                                    for (g, qv) in dk[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(qi) {
                                        *g += ds * qv;
                                    }
                                }
                            }
                            if let (Some(dg), Some(ez)) = (dgate.as_mut(), ez.as_ref()) {
                                if mask[j] {
                                    dg[j] += ez[base + j] * (gy[j] - r);
                                }
                            }
                        }
                    }
                }
                if let Some(g) = dq {
                    if let Some(slot) = self.grad_slot(grads, *q) {
                        add_into(slot, &g);
                    }
                }
                if let Some(g) = dk {
                    if let Some(slot) = self.grad_slot(grads, *k) {
                        add_into(slot, &g);
                    }
                }
                if let (Some(g), Some(gv)) = (dgate, gate) {
                    if let Some(slot) = self.grad_slot(grads, *gv) {
                        add_into(slot, &g);
                    }
                }
            }
            Op::AttnApply { maps, v, heads, rows } => {
                let (hn, nk) = self.dims(*maps);
                let nq = hn / heads;
                let d = self.dims(*v).1;
                let dh = d / heads;
                let vd = self.data(*v);
                let ad = self.data(*maps);
                if let Some(da) = self.grad_slot(grads, *maps) {
                    for (r, &qi) in rows.iter().enumerate() {
                        for h in 0..*heads {
                            let g = &dy[r * d + h * dh..r * d + (h + 1) * dh];
                            let base = (h * nq + qi) * nk;
                            for j in 0..nk {
                                da[base + j] += dot(g, &vd[j * d + h * dh..j * d + (h + 1) * dh]);
                            }
                        }
                    }
                }
                if let Some(dv) = self.grad_slot(grads, *v) {
                    for (r, &qi) in rows.iter().enumerate() {
                        for h in 0..*heads {
                            let g = &dy[r * d + h * dh..r * d + (h + 1) * dh];
                            let base = (h * nq + qi) * nk;
                            for j in 0..nk {
                                let a = ad[base + j];
                                if a != 0.0 {
                                    for (o, gv) in dv[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(g) {
                                        *o += a * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::BceWithLogits { x, targets } => {
                let xd = self.data(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((g, &z), &t) in dx.iter_mut().zip(xd).zip(targets) {
                        *g += dy[0] * (sigmoid(z) - t);
                    }
                }
            }
            Op::SmoothL1 { x, targets, beta } => {
                let xd = self.data(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((g, &a), &t) in dx.iter_mut().zip(xd).zip(targets) {
                        let diff = a - t;
                        let d = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                        *g += dy[0] * d;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - mx);
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub fn smooth_l1(diff: f64, beta: f64) -> f64 {
    let a = diff.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}
