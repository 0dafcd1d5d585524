//! Reverse-mode differentiation over a closed set of primitives.
//!
//! A [`Tape`] records the graph once; [`forward`] and [`backward`] replay it
//! against concrete parameter and input tensors. Every node's value is kept,
//! so a backward pass needs the [`Values`] of the matching forward pass.
//! Reductions over rows (weight gradients, sums, squared errors) accumulate in
//! f64 whatever the storage width.

use crate::error::{Error, Result};
use crate::latent::NeighborTable;
use crate::tensor::{Mat, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(usize),
    Input(usize),
    Add(NodeId, NodeId),
    /// `x W + b`, `W` is `in x out`, `b` is `1 x out`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    /// 27-tap sparse convolution, `W` is `(27 * in) x out`.
    SparseConv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        nbr: Arc<NeighborTable>,
    },
    /// Column `j` of the output is level `j` gathered through `maps[j]`.
    Upsample {
        levels: Vec<NodeId>,
        maps: Arc<Vec<Vec<u32>>>,
    },
    CausalContext {
        x: NodeId,
        width: usize,
    },
    ConcatRows(Vec<NodeId>),
    /// Per-row discretized Laplace codelength; `raw` columns are (mu, scale logit).
    LaplaceBits {
        values: NodeId,
        raw: NodeId,
    },
    Mse {
        a: NodeId,
        target: NodeId,
    },
    Sum(NodeId),
    LinearSum(Vec<(NodeId, f64)>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<(usize, usize)>>,
    inputs: Vec<Option<(usize, usize)>>,
}

fn bind(slots: &mut Vec<Option<(usize, usize)>>, slot: usize, shape: (usize, usize)) -> Result<()> {
    if slots.len() <= slot {
        slots.resize(slot + 1, None);
    }
    match slots[slot] {
        Some(s) if s != shape => Err(Error::Graph(format!(
            "slot {slot} declared as {s:?} and {shape:?}"
        ))),
        _ => {
            slots[slot] = Some(shape);
            Ok(())
        }
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

    pub fn shape(&self, n: NodeId) -> (usize, usize) {
        let node = &self.nodes[n.0];
        (node.rows, node.cols)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, rows, cols });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, n: NodeId) -> Result<(usize, usize)> {
        if n.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("node {} not on this tape", n.0)));
        }
        Ok(self.shape(n))
    }

    pub fn param(&mut self, slot: usize, rows: usize, cols: usize) -> Result<NodeId> {
        bind(&mut self.params, slot, (rows, cols))?;
        Ok(self.push(Op::Param(slot), rows, cols))
    }

    pub fn input(&mut self, slot: usize, rows: usize, cols: usize) -> Result<NodeId> {
        bind(&mut self.inputs, slot, (rows, cols))?;
        Ok(self.push(Op::Input(slot), rows, cols))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa != sb {
            return Err(Error::shape(format!("add {sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa.0, sa.1))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.check(x)?, self.check(w)?, self.check(b)?);
        if sx.1 != sw.0 || sb != (1, sw.1) {
            return Err(Error::shape(format!("affine x{sx:?} W{sw:?} b{sb:?}")));
        }
        Ok(self.push(Op::Affine { x, w, b }, sx.0, sw.1))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?;
        Ok(self.push(Op::Relu(x), s.0, s.1))
    }

    pub fn sparse_conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        nbr: Arc<NeighborTable>,
    ) -> Result<NodeId> {
        let (sx, sw, sb) = (self.check(x)?, self.check(w)?, self.check(b)?);
        if sx.0 != nbr.len() || sw.0 != 27 * sx.1 || sb != (1, sw.1) {
            return Err(Error::shape(format!(
                "sparse conv x{sx:?} W{sw:?} b{sb:?} over {} voxels",
                nbr.len()
            )));
        }
        Ok(self.push(Op::SparseConv { x, w, b, nbr }, sx.0, sw.1))
    }

    pub fn upsample(&mut self, levels: Vec<NodeId>, maps: Arc<Vec<Vec<u32>>>) -> Result<NodeId> {
        if levels.is_empty() || levels.len() > maps.len() {
            return Err(Error::shape(format!(
                "upsample of {} levels with {} parent maps",
                levels.len(),
                maps.len()
            )));
        }
        let m = maps[0].len();
        for (j, &l) in levels.iter().enumerate() {
            let s = self.check(l)?;
            let max = maps[j].iter().copied().max().map_or(0, |v| v as usize + 1);
            if s.1 != 1 || maps[j].len() != m || s.0 < max {
                return Err(Error::shape(format!("upsample level {j} has shape {s:?}")));
            }
        }
        let k = levels.len();
        Ok(self.push(Op::Upsample { levels, maps }, m, k))
    }

    pub fn causal_context(&mut self, x: NodeId, width: usize) -> Result<NodeId> {
        let s = self.check(x)?;
        if s.1 != 1 {
            return Err(Error::shape(format!("causal context of a {s:?} matrix")));
        }
        Ok(self.push(Op::CausalContext { x, width }, s.0, width))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let mut rows = 0;
        let mut cols = None;
        for &p in &parts {
            let s = self.check(p)?;
            if cols.is_some_and(|c| c != s.1) {
                return Err(Error::shape("concat of mismatched widths"));
            }
            cols = Some(s.1);
            rows += s.0;
        }
        let cols = cols.ok_or_else(|| Error::shape("concat of nothing"))?;
        Ok(self.push(Op::ConcatRows(parts), rows, cols))
    }

    pub fn laplace_bits(&mut self, values: NodeId, raw: NodeId) -> Result<NodeId> {
        let (sv, sr) = (self.check(values)?, self.check(raw)?);
        if sv.1 != 1 || sr != (sv.0, 2) {
            return Err(Error::shape(format!("laplace bits values{sv:?} raw{sr:?}")));
        }
        Ok(self.push(Op::LaplaceBits { values, raw }, sv.0, 1))
    }

    pub fn mse(&mut self, a: NodeId, target: NodeId) -> Result<NodeId> {
        let (sa, st) = (self.check(a)?, self.check(target)?);
        if sa != st || sa.0 * sa.1 == 0 {
            return Err(Error::shape(format!("mse {sa:?} vs {st:?}")));
        }
        Ok(self.push(Op::Mse { a, target }, 1, 1))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::Sum(x), 1, 1))
    }

    pub fn linear_sum(&mut self, terms: Vec<(NodeId, f64)>) -> Result<NodeId> {
        let first = terms
            .first()
            .ok_or_else(|| Error::shape("empty linear sum"))?
            .0;
        let s = self.check(first)?;
        for &(t, _) in &terms {
            if self.check(t)? != s {
                return Err(Error::shape("linear sum of mismatched shapes"));
            }
        }
        Ok(self.push(Op::LinearSum(terms), s.0, s.1))
    }
}

/// Node values from one forward pass.
#[derive(Debug, Clone)]
pub struct Values<T> {
    vals: Vec<Mat<T>>,
    /// Per-row `(d/dv, d/dmu, d/draw)` of each Laplace node, kept from the
    /// forward pass.
    partials: Vec<Option<Vec<[f64; 3]>>>,
}

impl<T: Real> Values<T> {
    pub fn get(&self, n: NodeId) -> &Mat<T> {
        &self.vals[n.0]
    }

    pub fn scalar(&self, n: NodeId) -> T {
        self.vals[n.0].data[0]
    }
}

#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub params: Vec<Mat<T>>,
    pub inputs: Vec<Mat<T>>,
}

// ---- kernels shared with the plain forward paths ----

pub(crate) fn affine_fwd<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let (n, k) = (w.rows, w.cols);
    let mut y = Mat::zeros(x.rows, k);
    let mut acc = vec![T::zero(); k];
    for i in 0..x.rows {
        acc.iter_mut().for_each(|a| *a = T::zero());
        let xr = x.row(i);
        for c in 0..n {
            let xv = xr[c];
            for (a, &wv) in acc.iter_mut().zip(w.row(c)) {
                *a = *a + xv * wv;
            }
        }
        for ((o, a), &bv) in y.row_mut(i).iter_mut().zip(&acc).zip(&b.data) {
            *o = *a + bv;
        }
    }
    y
}

pub(crate) fn relu_fwd<T: Real>(x: &Mat<T>) -> Mat<T> {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect(),
    }
}

pub(crate) fn conv_fwd<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &Mat<T>, nbr: &NeighborTable) -> Mat<T> {
    let (cin, cout) = (x.cols, w.cols);
    let mut y = Mat::zeros(x.rows, cout);
    let mut acc = vec![T::zero(); cout];
    for i in 0..x.rows {
        acc.iter_mut().for_each(|a| *a = T::zero());
        for &(tap, j) in nbr.neighbors(i) {
            let xr = x.row(j as usize);
            for (ci, &xv) in xr.iter().enumerate() {
                for (a, &wv) in acc.iter_mut().zip(w.row(tap as usize * cin + ci)) {
                    *a = *a + xv * wv;
                }
            }
        }
        for ((o, a), &bv) in y.row_mut(i).iter_mut().zip(&acc).zip(&b.data) {
            *o = *a + bv;
        }
    }
    y
}

pub(crate) fn upsample_fwd<T: Real>(levels: &[&Mat<T>], maps: &[Vec<u32>]) -> Mat<T> {
    let m = maps[0].len();
    let k = levels.len();
    let mut y = Mat::zeros(m, k);
    for i in 0..m {
        for (j, l) in levels.iter().enumerate() {
            y.data[i * k + j] = l.data[maps[j][i] as usize];
        }
    }
    y
}

pub(crate) fn context_fwd<T: Real>(x: &[T], width: usize) -> Mat<T> {
    let mut y = Mat::zeros(x.len(), width);
    for i in 0..x.len() {
        let row = y.row_mut(i);
        for (m, r) in row.iter_mut().enumerate().take(width.min(i)) {
            *r = x[i - 1 - m];
        }
    }
    y
}

pub const B_MIN: f64 = 1e-3;
pub const MAX_SYMBOL_BITS: f64 = 32.0;

/// Laplace scale from the raw network output: softplus clamped to `B_MIN`.
/// Returns the scale and its derivative with respect to `raw`.
#[inline]
pub(crate) fn scale_from_raw(raw: f64) -> (f64, f64) {
    let (sp, dsp) = if raw > 30.0 {
        (raw, 1.0)
    } else {
        let e = raw.exp();
        (e.ln_1p(), e / (1.0 + e))
    };
    if sp < B_MIN {
        (B_MIN, 0.0)
    } else {
        (sp, dsp)
    }
}

/// Codelength of integer bin `[v - 1/2, v + 1/2]` under Laplace(mu, b), with
/// partial derivatives (d/dv, d/dmu, d/db). Capped at [`MAX_SYMBOL_BITS`],
/// where all derivatives vanish.
pub(crate) fn laplace_bits_grad(v: f64, mu: f64, b: f64) -> (f64, f64, f64, f64) {
    let t = 1.0 / b;
    let lo = v - 0.5 - mu;
    let hi = v + 0.5 - mu;
    let ln2 = std::f64::consts::LN_2;
    // ln(1 - e^{-t}) and its t-derivative 1 / (e^t - 1)
    let width = -(-t).exp_m1();
    let ln_width = width.ln();
    let dln_width = (1.0 - width) / width;
    let (ln_p, dv, dmu, dt) = if lo >= 0.0 {
        (0.5f64.ln() - lo * t + ln_width, -t, t, -lo + dln_width)
    } else if hi <= 0.0 {
        (0.5f64.ln() + hi * t + ln_width, t, -t, hi + dln_width)
    } else {
        let eh = 0.5 * (-hi * t).exp();
        let el = 0.5 * (lo * t).exp();
        let p = 1.0 - eh - el;
        let dp_dv = t * eh - t * el;
        let dp_dt = hi * eh - lo * el;
        (p.ln(), dp_dv / p, -dp_dv / p, dp_dt / p)
    };
    let bits = -ln_p / ln2;
    if !(bits < MAX_SYMBOL_BITS) {
        return (MAX_SYMBOL_BITS, 0.0, 0.0, 0.0);
    }
    let db = dt * (-t * t);
    (bits.max(0.0), -dv / ln2, -dmu / ln2, -db / ln2)
}

fn check_bound(slots: &[Option<(usize, usize)>], given: usize, kind: &str) -> Result<()> {
    if given < slots.len() {
        return Err(Error::Graph(format!(
            "{kind} slot {given} is unbound ({} required)",
            slots.len()
        )));
    }
    Ok(())
}

pub fn forward<T: Real>(tape: &Tape, params: &[Mat<T>], inputs: &[Mat<T>]) -> Result<Values<T>> {
    check_bound(&tape.params, params.len(), "parameter")?;
    check_bound(&tape.inputs, inputs.len(), "input")?;
    let mut vals: Vec<Mat<T>> = Vec::with_capacity(tape.nodes.len());
    let mut partials = vec![None; tape.nodes.len()];
    for (idx, node) in tape.nodes.iter().enumerate() {
        let v = |n: &NodeId| &vals[n.0];
        let out = match &node.op {
            Op::Param(s) | Op::Input(s) => {
                let (src, kind) = match node.op {
                    Op::Param(_) => (params, "parameter"),
                    _ => (inputs, "input"),
                };
                let m = &src[*s];
                if m.shape() != (node.rows, node.cols) {
                    return Err(Error::Graph(format!(
                        "{kind} slot {s} bound to {:?}, node {idx} expects {:?}",
                        m.shape(),
                        (node.rows, node.cols)
                    )));
                }
                m.clone()
            }
            Op::Add(a, b) => {
                let (a, b) = (v(a), v(b));
                Mat {
                    rows: a.rows,
                    cols: a.cols,
                    data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
                }
            }
            Op::Affine { x, w, b } => affine_fwd(v(x), v(w), v(b)),
            Op::Relu(x) => relu_fwd(v(x)),
            Op::SparseConv { x, w, b, nbr } => conv_fwd(v(x), v(w), v(b), nbr),
            Op::Upsample { levels, maps } => {
                let ls: Vec<&Mat<T>> = levels.iter().map(v).collect();
                upsample_fwd(&ls, maps)
            }
            Op::CausalContext { x, width } => context_fwd(&v(x).data, *width),
            Op::ConcatRows(parts) => {
                let mut data = Vec::with_capacity(node.rows * node.cols);
                for p in parts {
                    data.extend_from_slice(&v(p).data);
                }
                Mat {
                    rows: node.rows,
                    cols: node.cols,
                    data,
                }
            }
            Op::LaplaceBits { values, raw } => {
                let (vv, r) = (v(values), v(raw));
                let mut part = Vec::with_capacity(vv.rows);
                let data = (0..vv.rows)
                    .map(|i| {
                        let (b, db_draw) = scale_from_raw(r.get(i, 1).wide());
                        let (bits, gv, gmu, gb) =
                            laplace_bits_grad(vv.data[i].wide(), r.get(i, 0).wide(), b);
                        part.push([gv, gmu, gb * db_draw]);
                        T::lit(bits)
                    })
                    .collect();
                partials[idx] = Some(part);
                Mat::column_vector(data)
            }
            Op::Mse { a, target } => {
                let (a, t) = (v(a), v(target));
                let s: f64 = a
                    .data
                    .iter()
                    .zip(&t.data)
                    .map(|(&x, &y)| {
                        let d = x.wide() - y.wide();
                        d * d
                    })
                    .sum();
                Mat::scalar(T::lit(s / a.len() as f64))
            }
            Op::Sum(x) => Mat::scalar(T::lit(v(x).data.iter().map(|x| x.wide()).sum())),
            Op::LinearSum(terms) => {
                let mut acc = vec![0.0f64; node.rows * node.cols];
                for (t, c) in terms {
                    for (a, &x) in acc.iter_mut().zip(&v(t).data) {
                        *a += c * x.wide();
                    }
                }
                Mat {
                    rows: node.rows,
                    cols: node.cols,
                    data: acc.into_iter().map(T::lit).collect(),
                }
            }
        };
        vals.push(out);
    }
    Ok(Values { vals, partials })
}

fn transpose<T: Real>(m: &Mat<T>) -> Vec<T> {
    let mut t = vec![T::zero(); m.len()];
    for r in 0..m.rows {
        for c in 0..m.cols {
            t[c * m.rows + r] = m.data[r * m.cols + c];
        }
    }
    t
}

fn accumulate<T: Real>(slot: &mut Option<Mat<T>>, rows: usize, cols: usize) -> &mut Mat<T> {
    slot.get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn add_into<T: Real>(dst: &mut Mat<T>, src: &[T]) {
    for (d, &s) in dst.data.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients of `output` (weighted by `cotangent`) with respect to every
/// parameter and input slot. Unreached slots get zero gradients.
pub fn backward<T: Real>(
    tape: &Tape,
    values: &Values<T>,
    output: NodeId,
    cotangent: &Mat<T>,
) -> Result<Grads<T>> {
    let out_shape = tape.check(output)?;
    if cotangent.shape() != out_shape {
        return Err(Error::shape(format!(
            "cotangent {:?} for output {out_shape:?}",
            cotangent.shape()
        )));
    }
    if values.vals.len() != tape.nodes.len() {
        return Err(Error::Graph("values do not belong to this tape".into()));
    }
    let mut adj: Vec<Option<Mat<T>>> = vec![None; tape.nodes.len()];
    adj[output.0] = Some(cotangent.clone());
    let mut grads = Grads {
        params: tape
            .params
            .iter()
            .map(|s| {
                let (r, c) = s.unwrap_or((0, 0));
                Mat::zeros(r, c)
            })
            .collect(),
        inputs: tape
            .inputs
            .iter()
            .map(|s| {
                let (r, c) = s.unwrap_or((0, 0));
                Mat::zeros(r, c)
            })
            .collect(),
    };

    for idx in (0..=output.0).rev() {
        let Some(g) = adj[idx].take() else { continue };
        let node = &tape.nodes[idx];
        let val = |n: &NodeId| &values.vals[n.0];
        let shape = |n: &NodeId| tape.shape(*n);
        match &node.op {
            Op::Param(s) => add_into(&mut grads.params[*s], &g.data),
            Op::Input(s) => add_into(&mut grads.inputs[*s], &g.data),
            Op::Add(a, b) => {
                let (r, c) = shape(a);
                add_into(accumulate(&mut adj[a.0], r, c), &g.data);
                add_into(accumulate(&mut adj[b.0], r, c), &g.data);
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (n, k) = (wv.rows, wv.cols);
                let wt = transpose(wv);
                let mut dx = vec![T::zero(); xv.rows * n];
                let mut dw = vec![0.0f64; n * k];
                let mut db = vec![0.0f64; k];
                let mut gw = vec![0.0f64; k];
                for i in 0..xv.rows {
                    let gr = g.row(i);
                    let dxr = &mut dx[i * n..(i + 1) * n];
                    for (o, &gv) in gr.iter().enumerate() {
                        gw[o] = gv.wide();
                        for (d, &wv) in dxr.iter_mut().zip(&wt[o * n..(o + 1) * n]) {
                            *d = *d + gv * wv;
                        }
                    }
                    for (c, &xc) in xv.row(i).iter().enumerate() {
                        let xw = xc.wide();
                        if xw != 0.0 {
                            for (d, &gv) in dw[c * k..(c + 1) * k].iter_mut().zip(&gw) {
                                *d += xw * gv;
                            }
                        }
                    }
                    for (d, &gv) in db.iter_mut().zip(&gw) {
                        *d += gv;
                    }
                }
                add_into(accumulate(&mut adj[x.0], xv.rows, n), &dx);
                let dw: Vec<T> = dw.into_iter().map(T::lit).collect();
                add_into(accumulate(&mut adj[w.0], n, k), &dw);
                let db: Vec<T> = db.into_iter().map(T::lit).collect();
                add_into(accumulate(&mut adj[b.0], 1, k), &db);
            }
            Op::Relu(x) => {
                let xv = val(x);
                let d: Vec<T> = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                add_into(accumulate(&mut adj[x.0], xv.rows, xv.cols), &d);
            }
            Op::SparseConv { x, w, b, nbr } => {
                let (xv, wv) = (val(x), val(w));
                let (cin, cout) = (xv.cols, wv.cols);
                // wt[tap][o][ci] so the input gradient is an axpy over ci
                let mut wt = vec![T::zero(); 27 * cin * cout];
                for tap in 0..27 {
                    for ci in 0..cin {
                        for o in 0..cout {
                            wt[(tap * cout + o) * cin + ci] = wv.data[(tap * cin + ci) * cout + o];
                        }
                    }
                }
                let mut dx = vec![T::zero(); xv.rows * cin];
                let mut dw = vec![0.0f64; 27 * cin * cout];
                let mut db = vec![0.0f64; cout];
                let mut gw = vec![0.0f64; cout];
                for i in 0..xv.rows {
                    let gr = g.row(i);
                    for (d, &gv) in gw.iter_mut().zip(gr) {
                        *d = gv.wide();
                    }
                    for &(tap, j) in nbr.neighbors(i) {
                        let (tap, j) = (tap as usize, j as usize);
                        let dxr = &mut dx[j * cin..(j + 1) * cin];
                        for (o, &gv) in gr.iter().enumerate() {
                            let base = (tap * cout + o) * cin;
                            for (d, &wv) in dxr.iter_mut().zip(&wt[base..base + cin]) {
                                *d = *d + gv * wv;
                            }
                        }
                        for (ci, &xc) in xv.row(j).iter().enumerate() {
                            let xw = xc.wide();
                            if xw != 0.0 {
                                let r = tap * cin + ci;
                                for (d, &gv) in dw[r * cout..(r + 1) * cout].iter_mut().zip(&gw) {
                                    *d += xw * gv;
                                }
                            }
                        }
                    }
                    for (d, &gv) in db.iter_mut().zip(&gw) {
                        *d += gv;
                    }
                }
                add_into(accumulate(&mut adj[x.0], xv.rows, cin), &dx);
                let dw: Vec<T> = dw.into_iter().map(T::lit).collect();
                add_into(accumulate(&mut adj[w.0], 27 * cin, cout), &dw);
                let db: Vec<T> = db.into_iter().map(T::lit).collect();
                add_into(accumulate(&mut adj[b.0], 1, cout), &db);
            }
            Op::Upsample { levels, maps } => {
                let k = levels.len();
                for (j, l) in levels.iter().enumerate() {
                    let (r, _) = shape(l);
                    let mut d = vec![0.0f64; r];
                    for (i, &p) in maps[j].iter().enumerate() {
                        d[p as usize] += g.data[i * k + j].wide();
                    }
                    let d: Vec<T> = d.into_iter().map(T::lit).collect();
                    add_into(accumulate(&mut adj[l.0], r, 1), &d);
                }
            }
            Op::CausalContext { x, width } => {
                let n = node.rows;
                let mut d = vec![T::zero(); n];
                for i in 0..n {
                    for m in 0..(*width).min(i) {
                        d[i - 1 - m] = d[i - 1 - m] + g.data[i * width + m];
                    }
                }
                add_into(accumulate(&mut adj[x.0], n, 1), &d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = shape(p);
                    add_into(accumulate(&mut adj[p.0], r, c), &g.data[off..off + r * c]);
                    off += r * c;
                }
            }
            Op::LaplaceBits { values: vn, raw } => {
                let n = node.rows;
                let part = values.partials[idx].as_ref().expect("set by forward");
                let mut dv = vec![T::zero(); n];
                let mut dr = vec![T::zero(); n * 2];
                for (i, p) in part.iter().enumerate() {
                    let gi = g.data[i].wide();
                    dv[i] = T::lit(gi * p[0]);
                    dr[2 * i] = T::lit(gi * p[1]);
                    dr[2 * i + 1] = T::lit(gi * p[2]);
                }
                add_into(accumulate(&mut adj[vn.0], n, 1), &dv);
                add_into(accumulate(&mut adj[raw.0], n, 2), &dr);
            }
            Op::Mse { a, target } => {
                let (av, tv) = (val(a), val(target));
                let scale = 2.0 * g.data[0].wide() / av.len() as f64;
                let da: Vec<T> = av
                    .data
                    .iter()
                    .zip(&tv.data)
                    .map(|(&x, &y)| T::lit(scale * (x.wide() - y.wide())))
                    .collect();
                let dt: Vec<T> = da.iter().map(|&d| -d).collect();
                add_into(accumulate(&mut adj[a.0], av.rows, av.cols), &da);
                add_into(accumulate(&mut adj[target.0], av.rows, av.cols), &dt);
            }
            Op::Sum(x) => {
                let (r, c) = shape(x);
                let d = vec![g.data[0]; r * c];
                add_into(accumulate(&mut adj[x.0], r, c), &d);
            }
            Op::LinearSum(terms) => {
                for (t, c) in terms {
                    let d: Vec<T> = g.data.iter().map(|&x| T::lit(c * x.wide())).collect();
                    add_into(accumulate(&mut adj[t.0], node.rows, node.cols), &d);
                }
            }
        }
    }
    Ok(grads)
}

/// Largest relative error `|analytic - fd| / (|analytic| + 1e-8)` over
/// `probes` parameter coordinates, cycling through the parameter tensors.
/// The analytic gradient comes from an f32 pass; the central differences are
/// taken on an f64 replay of the same graph.
pub fn fd_check(
    tape: &Tape,
    output: NodeId,
    params: &[Mat<f32>],
    inputs: &[Mat<f32>],
    eps: f64,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Config(format!("fd step {eps} outside [1e-5, 1e-2]")));
    }
    if tape.check(output)? != (1, 1) {
        return Err(Error::shape("fd_check needs a scalar output"));
    }
    let vals = forward(tape, params, inputs)?;
    let grads = backward(tape, &vals, output, &Mat::scalar(1.0f32))?;

    let p64: Vec<Mat<f64>> = params.iter().map(Mat::cast).collect();
    let i64: Vec<Mat<f64>> = inputs.iter().map(Mat::cast).collect();
    let tensors: Vec<usize> = (0..params.len())
        .filter(|&s| !params[s].is_empty())
        .collect();
    if tensors.is_empty() {
        return Err(Error::EmptyInput("parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for p in 0..probes {
        let s = tensors[p % tensors.len()];
        let c = rng.random_range(0..params[s].len());
        let eval = |delta: f64| -> Result<f64> {
            let mut pp = p64.clone();
            pp[s].data[c] += delta;
            Ok(forward(tape, &pp, &i64)?.scalar(output))
        };
        let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let a = grads.params[s].data[c] as f64;
        worst = worst.max((a - fd).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}
