//! Tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every value in the graph is a 2-d array. Row vectors are `1 x n`,
//! column vectors `n x 1`, scalars `1 x 1`. A [`Graph`] is built fresh for
//! each forward pass and discarded afterwards.

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + row` with the `1 x m` row broadcast over every row of `a`.
    AddRow(Var, Var),
    /// `a + c` for a constant `c`.
    AddConst(Var),
    Scale(Var, f64),
    MulConst(Var, Array2<f64>),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterSum(Vec<(Var, Vec<usize>)>),
    /// Row `i` of `a` multiplied by `w[i, 0]`.
    ScaleRows(Var, Var),
    /// Row `i` of `a` divided by `c[i, 0]`.
    DivRows(Var, Var),
    RowSum(Var),
    MeanRows(Var),
    SumAll(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: AttentionPlan,
        probs: Vec<Array2<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
        smoothing: f64,
    },
}

/// Which rows of the query matrix attend to which rows of the key/value
/// matrix in a fused multi-head attention.
#[derive(Clone, Debug)]
pub struct AttentionPlan {
    /// `(query_start, query_len, key_start, key_len)` per sequence.
    pub segments: Vec<(usize, usize, usize, usize)>,
    pub heads: usize,
    /// Query `i` of a segment sees keys `0..=i` only.
    pub causal: bool,
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every parameter that took part in
/// the forward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_param: Vec<(ParamId, Array2<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b)
            | Op::DivRows(a, b) => vec![*a, *b],
            Op::AddConst(a)
            | Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::RowSum(a)
            | Op::MeanRows(a)
            | Op::SumAll(a)
            | Op::SliceCols(a, _) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ScatterSum(parts) => parts.iter().map(|(v, _)| *v).collect(),
            Op::ConcatCols(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row-wise softmax. Entries equal to `-inf` receive probability zero.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / cols;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / cols;
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
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

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Sum of the parts, each scattered into a `rows x cols` zero matrix at
    /// the given row positions.
    pub fn scatter_sum(&mut self, parts: Vec<(Var, Vec<usize>)>, rows: usize, cols: usize) -> Var {
        let mut out = Array2::zeros((rows, cols));
        for (v, idx) in &parts {
            let src = self.value(*v);
            for (r, &i) in idx.iter().enumerate() {
                let mut dst = out.row_mut(i);
                dst += &src.row(r);
            }
        }
        self.push(out, Op::ScatterSum(parts))
    }

    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let v = self.value(a) * self.value(w);
        self.push(v, Op::ScaleRows(a, w))
    }

    pub fn div_rows(&mut self, a: Var, c: Var) -> Var {
        let v = self.value(a) / self.value(c);
        self.push(v, Op::DivRows(a, c))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean over empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, vs: Vec<Var>) -> Var {
        let views: Vec<_> = vs.iter().map(|v| self.value(*v).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        self.push(v, Op::ConcatCols(vs))
    }

    /// Scaled dot-product attention computed independently for every
    /// segment and head; equivalent to a block-diagonal masked attention
    /// over the packed matrices without the off-block work.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: AttentionPlan) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let hd = d / plan.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(plan.segments.len() * plan.heads);
        for &(qs, ql, ks, kl) in &plan.segments {
            for h in 0..plan.heads {
                let cols = h * hd..(h + 1) * hd;
                let qh = qv.slice(s![qs..qs + ql, cols.clone()]);
                let kh = kv.slice(s![ks..ks + kl, cols.clone()]);
                let vh = vv.slice(s![ks..ks + kl, cols.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                if plan.causal {
                    for i in 0..ql {
                        for j in (i + 1)..kl {
                            scores[[i, j]] = f64::NEG_INFINITY;
                        }
                    }
                }
                let p = softmax_rows(&scores);
                out.slice_mut(s![qs..qs + ql, cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, plan, probs })
    }

    /// Mean label-smoothed cross-entropy. The smoothed target distribution
    /// puts `1 - smoothing` on the gold class plus `smoothing / V` on every
    /// class.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, smoothing: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let vocab = lv.ncols() as f64;
        let log_probs = log_softmax_rows(lv);
        let mut total = 0.0;
        for (row, &t) in log_probs.rows().into_iter().zip(&targets) {
            let nll = -row[t];
            let uniform = -row.sum() / vocab;
            total += (1.0 - smoothing) * nll + smoothing * uniform;
        }
        let loss = total / targets.len() as f64;
        let probs = log_probs.mapv(f64::exp);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                smoothing,
            },
        )
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match out.by_param.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => *acc += &g,
                    None => out.by_param.push((*id, g)),
                },
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g * c),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let dot = (&g * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = p * &(&g - &dot);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*gain) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gain, gg);
                    }
                    if self.needs(*x) {
                        let n = xhat.ncols() as f64;
                        let dxhat = &g * self.value(*gain);
                        let mean_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                        let mean_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                        let gx = (&dxhat - &mean_d - &(xhat * &mean_dx)) * inv_std.view().insert_axis(Axis(1));
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut ga = Array2::zeros(src.dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterSum(parts) => {
                    for (v, idx) in parts {
                        if !self.needs(*v) {
                            continue;
                        }
                        let mut gv = Array2::zeros((idx.len(), g.ncols()));
                        for (r, &i) in idx.iter().enumerate() {
                            gv.row_mut(r).assign(&g.row(i));
                        }
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::ScaleRows(a, w) => {
                    if self.needs(*w) {
                        let gw = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *w, gw);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*w));
                    }
                }
                Op::DivRows(a, c) => {
                    let cv = self.value(*c);
                    if self.needs(*c) {
                        // d(a/c)/dc = -a/c² = -out/c
                        let gc = -(&g * &node.value).sum_axis(Axis(1)).insert_axis(Axis(1)) / cv;
                        accumulate(&mut grads, *c, gc);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g / cv);
                    }
                }
                Op::RowSum(a) => {
                    let shape = self.value(*a).dim();
                    let ga = g.broadcast(shape).expect("row sum broadcast").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let shape = self.value(*a).dim();
                    let ga = g.broadcast(shape).expect("mean broadcast").to_owned() / shape.0 as f64;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).dim();
                    accumulate(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::SliceCols(a, start) => {
                    let shape = self.value(*a).dim();
                    let mut ga = Array2::zeros(shape);
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(vs) => {
                    let mut offset = 0;
                    for v in vs {
                        let w = self.value(*v).ncols();
                        if self.needs(*v) {
                            accumulate(&mut grads, *v, g.slice(s![.., offset..offset + w]).to_owned());
                        }
                        offset += w;
                    }
                }
                Op::Attention { q, k, v, plan, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let hd = d / plan.heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    let mut p_iter = probs.iter();
                    for &(qs, ql, ks, kl) in &plan.segments {
                        for h in 0..plan.heads {
                            let p = p_iter.next().expect("one probability block per head");
                            let cols = h * hd..(h + 1) * hd;
                            let qh = qv.slice(s![qs..qs + ql, cols.clone()]);
                            let kh = kv.slice(s![ks..ks + kl, cols.clone()]);
                            let vh = vv.slice(s![ks..ks + kl, cols.clone()]);
                            let go = g.slice(s![qs..qs + ql, cols.clone()]);
                            let mut gvs = gv.slice_mut(s![ks..ks + kl, cols.clone()]);
                            gvs += &p.t().dot(&go);
                            let dp = go.dot(&vh.t());
                            let dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                            let ds = (p * &(&dp - &dot)) * scale;
                            let mut gqs = gq.slice_mut(s![qs..qs + ql, cols.clone()]);
                            gqs += &ds.dot(&kh);
                            let mut gks = gk.slice_mut(s![ks..ks + kl, cols]);
                            gks += &ds.t().dot(&qh);
                        }
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    smoothing,
                } => {
                    let rows = targets.len() as f64;
                    let vocab = probs.ncols() as f64;
                    let mut gl = probs - smoothing / vocab;
                    for (r, &t) in targets.iter().enumerate() {
                        gl[[r, t]] -= 1.0 - smoothing;
                    }
                    gl *= g[[0, 0]] / rows;
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax on a plain matrix; `-inf` entries map to zero.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn log_softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(values: Vec<Array2<f64>>) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::default();
        let ids = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| store.insert(format!("p{i}"), v))
            .collect();
        (store, ids)
    }

    /// Central finite differences over every entry of every parameter.
    fn check<F>(store: &mut ParamStore, ids: &[ParamId], f: F)
    where
        F: Fn(&mut Graph, &ParamStore) -> Var,
    {
        let mut g = Graph::new();
        let out = f(&mut g, store);
        let grads = g.backward(out);
        let h = 1e-5;
        for &id in ids {
            let analytic = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(store.value(id).dim()));
            let shape = store.value(id).dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = store.value(id)[[r, c]];
                    store.value_mut(id)[[r, c]] = orig + h;
                    let mut gp = Graph::new();
                    let op = f(&mut gp, store);
                    let plus = gp.value(op)[[0, 0]];
                    store.value_mut(id)[[r, c]] = orig - h;
                    let mut gm = Graph::new();
                    let om = f(&mut gm, store);
                    let minus = gm.value(om)[[0, 0]];
                    store.value_mut(id)[[r, c]] = orig;
                    let numeric = (plus - minus) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(numeric.abs()).max(1e-7);
                    assert!(
                        (a - numeric).abs() / denom < 1e-5,
                        "param {id:?}[{r},{c}]: analytic {a} numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn softmax_handles_negative_infinity() {
        let p = softmax_rows(&array![[0.0, f64::NEG_INFINITY, 0.0]]);
        assert_eq!(p, array![[0.5, 0.0, 0.5]]);
    }

    #[test]
    fn matmul_softmax_layernorm_gradients() {
        let (mut store, ids) = store_with(vec![
            array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]],
            array![[0.2, -0.1], [0.7, 0.3], [-0.5, 0.9]],
            array![[1.1, 0.9]],
            array![[0.05, -0.02]],
        ]);
        check(&mut store, &ids, |g, s| {
            let a = g.param(s, ids[0]);
            let b = g.param(s, ids[1]);
            let gain = g.param(s, ids[2]);
            let bias = g.param(s, ids[3]);
            let x = g.matmul(a, b);
            let n = g.layer_norm(x, gain, bias);
            let y = g.matmul_t(n, n);
            let p = g.softmax_rows(y);
            let w = g.mul_const(p, array![[1.0, 2.0], [3.0, -1.0]]);
            g.sum_all(w)
        });
    }

    #[test]
    fn routing_ops_gradients() {
        let (mut store, ids) = store_with(vec![
            array![[0.3, -0.2], [0.1, 0.4], [-0.3, 0.8]],
            array![[0.5, 0.1, -0.4], [0.2, -0.7, 0.6]],
        ]);
        check(&mut store, &ids, |g, s| {
            let x = g.param(s, ids[0]);
            let w = g.param(s, ids[1]);
            let logits = g.matmul(x, w);
            let probs = g.softmax_rows(logits);
            let sel = g.mul_const(probs, array![[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]]);
            let denom = g.row_sum(sel);
            let weights = g.div_rows(sel, denom);
            let col = g.slice_cols(weights, 1, 1);
            let picked = g.gather_rows(col, vec![0, 1]);
            let xs = g.gather_rows(x, vec![0, 1]);
            let act = g.relu(xs);
            let scaled = g.scale_rows(act, picked);
            let back = g.scatter_sum(vec![(scaled, vec![2, 0]), (x, vec![0, 1, 2])], 3, 2);
            let both = g.concat_cols(vec![back, probs]);
            let m = g.mean_rows(both);
            let sq = g.matmul_t(m, m);
            let lb = g.scale(sq, 3.0);
            let ce = g.cross_entropy(logits, vec![2, 0, 1], 0.1);
            g.add(lb, ce)
        });
    }

    #[test]
    fn fused_attention_gradients() {
        let (mut store, ids) = store_with(vec![
            Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.7).sin()),
            Array2::from_shape_fn((4, 4), |(i, j)| ((i * 3 + j) as f64 * 1.3).cos() * 0.5),
        ]);
        for causal in [false, true] {
            check(&mut store, &ids, |g, s| {
                let x = g.param(s, ids[0]);
                let w = g.param(s, ids[1]);
                let q = g.matmul(x, w);
                let plan = AttentionPlan {
                    segments: vec![(0, 3, 0, 3), (3, 2, 3, 2)],
                    heads: 2,
                    causal,
                };
                let a = g.attention(q, x, x, plan);
                let t = g.matmul_t(a, x);
                let p = g.softmax_rows(t);
                g.cross_entropy(p, vec![0, 1, 2, 3, 4], 0.0)
            });
        }
    }

    #[test]
    fn fused_attention_matches_masked_dense_attention() {
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((5, 4), |(i, j)| ((i * 5 + j) as f64 * 0.3).sin()));
        let plan = AttentionPlan {
            segments: vec![(0, 2, 0, 3), (2, 3, 3, 2)],
            heads: 1,
            causal: false,
        };
        let fused = g.attention(x, x, x, plan);
        let mut mask = Array2::from_elem((5, 5), f64::NEG_INFINITY);
        mask.slice_mut(s![0..2, 0..3]).fill(0.0);
        mask.slice_mut(s![2..5, 3..5]).fill(0.0);
        let scores = g.matmul_t(x, x);
        let scores = g.scale(scores, 0.5);
        let scores = g.add_const(scores, &mask);
        let p = g.softmax_rows(scores);
        let dense = g.matmul(p, x);
        let diff = (g.value(fused) - g.value(dense)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn label_smoothing_zero_matches_plain_nll() {
        let mut g = Graph::new();
        let l = g.constant(array![[1.0, 2.0, 3.0]]);
        let ce = g.cross_entropy(l, vec![2], 0.0);
        let expected = -(3.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp())).ln();
        assert!((g.value(ce)[[0, 0]] - expected).abs() < 1e-12);
    }
}
