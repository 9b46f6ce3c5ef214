//! A small tape-based reverse-mode autodiff over `f64` matrices.
//!
//! A [`Graph`] borrows a [`ParamSet`], records every operation as a node and
//! runs backward in reverse insertion order. Operations are the handful a
//! transformer needs; attention is a single fused node that handles
//! multi-head splitting, relative position bias, key padding and causal
//! masking over a list of row segments.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis, Zip};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable matrices. Vectors are stored as `1 x d`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// T5-style bucketing of relative distances: exact buckets for short
/// distances, logarithmic ones up to `max_distance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelativeBuckets {
    pub bidirectional: bool,
    pub n_buckets: usize,
    pub max_distance: usize,
}

impl RelativeBuckets {
    pub fn bucket(&self, query: usize, key: usize) -> usize {
        let mut n = query as i64 - key as i64;
        let mut n_buckets = self.n_buckets;
        let mut ret = 0;
        if self.bidirectional {
            n_buckets /= 2;
            if n < 0 {
                ret += n_buckets;
            }
            n = n.abs();
        } else {
            n = n.max(0);
        }
        let n = n as usize;
        let max_exact = (n_buckets / 2).max(1);
        if n < max_exact {
            return ret + n;
        }
        let ratio = (n as f64 / max_exact as f64).ln() / (self.max_distance as f64 / max_exact as f64).ln();
        let large = max_exact + (ratio * (n_buckets - max_exact) as f64) as usize;
        ret + large.min(n_buckets - 1)
    }
}

/// A block of rows attending only among themselves. Rows at positions
/// `>= valid` are padding: they never serve as keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub segments: Vec<Segment>,
    pub causal: bool,
    pub n_heads: usize,
    pub buckets: RelativeBuckets,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        spec: Rc<AttentionSpec>,
        /// Per (segment, head): softmax weights, `len x valid`.
        probs: Vec<Array2<f64>>,
        /// Per segment: bucket of each (query, key) pair.
        buckets: Vec<Array2<usize>>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    MaskRows {
        x: Var,
        masked: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
        scale: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Loss normalization for [`Graph::cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Average over rows that have a target.
    Mean,
    Sum,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Array2::zeros((0, 0)), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    /// `a + row`, broadcasting a `1 x d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            let i = *inv;
            row.mapv_inplace(|v| (v - mean) * i);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention with an additive learned bias
    /// per (relative bucket, head). `table` is `n_buckets x n_heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, table: Var, spec: Rc<AttentionSpec>) -> Var {
        let (qv, kv, vv, tv) = (self.value(q), self.value(k), self.value(v), self.value(table));
        let (rows, d) = qv.dim();
        assert_eq!(kv.dim(), (rows, d));
        assert_eq!(vv.dim(), (rows, d));
        assert_eq!(d % spec.n_heads, 0, "d_model must divide by heads");
        assert_eq!(tv.dim(), (spec.buckets.n_buckets, spec.n_heads));
        let dh = d / spec.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(spec.segments.len() * spec.n_heads);
        let mut buckets = Vec::with_capacity(spec.segments.len());
        for seg in &spec.segments {
            assert!(seg.valid >= 1 && seg.valid <= seg.len && seg.start + seg.len <= rows);
            let b = Array2::from_shape_fn((seg.len, seg.valid), |(i, j)| spec.buckets.bucket(i, j));
            for h in 0..spec.n_heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qs = qv.slice(s![seg.start..seg.start + seg.len, c0..c1]);
                let ks = kv.slice(s![seg.start..seg.start + seg.valid, c0..c1]);
                let vs = vv.slice(s![seg.start..seg.start + seg.valid, c0..c1]);
                let mut sc = qs.dot(&ks.t()) * scale;
                for ((i, j), x) in sc.indexed_iter_mut() {
                    *x += tv[[b[[i, j]], h]];
                }
                for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                    let limit = if spec.causal { (i + 1).min(seg.valid) } else { seg.valid };
                    let max = row.slice(s![..limit]).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let mut sum = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        if j < limit {
                            *x = (*x - max).exp();
                            sum += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    row.mapv_inplace(|x| x / sum);
                }
                out.slice_mut(s![seg.start..seg.start + seg.len, c0..c1]).assign(&sc.dot(&vs));
                probs.push(sc);
            }
            buckets.push(b);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                table,
                spec,
                probs,
                buckets,
            },
        )
    }

    /// Rows of `src` selected by `idx` (repeats allowed).
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let sv = self.value(src);
        let mut out = Array2::zeros((idx.len(), sv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&sv.row(i));
        }
        self.push(out, Op::Gather { src, idx })
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat widths agree");
        self.push(out, Op::ConcatRows(parts))
    }

    /// Replace rows flagged in `masked` with zeros.
    pub fn mask_rows(&mut self, x: Var, masked: Vec<bool>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(masked.len(), out.nrows());
        for (mut row, &m) in out.rows_mut().into_iter().zip(&masked) {
            if m {
                row.fill(0.0);
            }
        }
        self.push(out, Op::MaskRows { x, masked })
    }

    /// Negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; rows without a target are ignored. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>, reduction: Reduction) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.nrows());
        let logp = log_softmax_rows(lv);
        let count = targets.iter().flatten().count();
        let scale = match reduction {
            Reduction::Mean if count > 0 => 1.0 / count as f64,
            Reduction::Mean => 0.0,
            Reduction::Sum => 1.0,
        };
        let total: f64 = targets
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|t| -logp[[r, t]]))
            .sum();
        let probs = logp.mapv(f64::exp);
        self.push(
            Array2::from_elem((1, 1), total * scale),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            },
        )
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(gelu_grad);
                    d *= &g;
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * self.value(*gain);
                    let d = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    Zip::from(dx.rows_mut())
                        .and(dxhat.rows())
                        .and(xhat.rows())
                        .and(inv_std)
                        .for_each(|mut out, dh, xh, &inv| {
                            let sum_d = dh.sum();
                            let sum_dx = dh.dot(&xh);
                            for ((o, &a), &b) in out.iter_mut().zip(dh).zip(xh) {
                                *o = inv / d * (d * a - sum_d - b * sum_dx);
                            }
                        });
                    acc(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    table,
                    spec,
                    probs,
                    buckets,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / spec.n_heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    let mut dt = Array2::zeros(self.value(*table).dim());
                    for (si, seg) in spec.segments.iter().enumerate() {
                        let b = &buckets[si];
                        let qrows = seg.start..seg.start + seg.len;
                        let krows = seg.start..seg.start + seg.valid;
                        for h in 0..spec.n_heads {
                            let (c0, c1) = (h * dh, (h + 1) * dh);
                            let p = &probs[si * spec.n_heads + h];
                            let go = g.slice(s![qrows.clone(), c0..c1]);
                            let qs = qv.slice(s![qrows.clone(), c0..c1]);
                            let ks = kv.slice(s![krows.clone(), c0..c1]);
                            let vs = vv.slice(s![krows.clone(), c0..c1]);
                            let mut ds = go.dot(&vs.t());
                            let mut dvs = dv.slice_mut(s![krows.clone(), c0..c1]);
                            dvs += &p.t().dot(&go);
                            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = drow.dot(&prow);
                                Zip::from(&mut drow).and(&prow).for_each(|x, &pp| *x = pp * (*x - dot));
                            }
                            let mut dqs = dq.slice_mut(s![qrows.clone(), c0..c1]);
                            dqs.scaled_add(scale, &ds.dot(&ks));
                            let mut dks = dk.slice_mut(s![krows.clone(), c0..c1]);
                            dks.scaled_add(scale, &ds.t().dot(&qs));
                            for ((i, j), &x) in ds.indexed_iter() {
                                dt[[b[[i, j]], h]] += x;
                            }
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                    acc(*table, dt);
                }
                Op::Gather { src, idx } => {
                    let mut d = Array2::zeros(self.value(*src).dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(*src, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::MaskRows { x, masked } => {
                    let mut d = g;
                    for (mut row, &m) in d.rows_mut().into_iter().zip(masked) {
                        if m {
                            row.fill(0.0);
                        }
                    }
                    acc(*x, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    scale,
                } => {
                    let c = g[[0, 0]] * scale;
                    let mut d = probs * c;
                    for (r, t) in targets.iter().enumerate() {
                        match t {
                            Some(t) => d[[r, *t]] -= c,
                            None => d.row_mut(r).fill(0.0),
                        }
                    }
                    acc(*logits, d);
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients aligned with the parameter set; unused parameters get
    /// zeros.
    pub fn for_params(&self, graph: &Graph<'_>) -> Vec<Array2<f64>> {
        let mut out: Vec<Array2<f64>> = graph.params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        for (id, var) in &graph.param_vars {
            if let Some(g) = &self.grads[var.0] {
                out[id.0] = g.clone();
            }
        }
        out
    }
}
