//! Tape-based reverse-mode differentiation over row-major 2-D arrays.
//!
//! Every value is an `Array2`. Row vectors are `1 x n`, scalars `1 x 1`.
//! Parameters enter the tape by reference, so building a tape per forward
//! pass does not copy weights.

use std::ops::Deref;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Val<'a, F> {
    Owned(Array2<F>),
    Borrowed(&'a Array2<F>),
}

impl<F> Deref for Val<'_, F> {
    type Target = Array2<F>;
    fn deref(&self) -> &Array2<F> {
        match self {
            Val::Owned(a) => a,
            Val::Borrowed(a) => a,
        }
    }
}

/// Weighted row selections: output row `r` is `sum_j w_j * table[idx_j]`.
pub type RowMix<F> = Vec<Vec<(usize, F)>>;

enum Op<F> {
    Leaf,
    Param(usize),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<F>,
        rstd: Array1<F>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        /// One `len x len` probability matrix per (segment, head).
        probs: Vec<Array2<F>>,
    },
    Concat(Vec<Var>),
    Gather {
        table: Var,
        rows: RowMix<F>,
    },
    ReplaceRows {
        x: Var,
        fill: Var,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<F>,
        count: usize,
    },
    SqErr {
        pred: Var,
        target: Array2<F>,
    },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<'a, F> {
    value: Val<'a, F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<'a, F: Scalar> {
    nodes: Vec<Node<'a, F>>,
}

impl<F: Scalar> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Val<'a, F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(Val::Owned(value), Op::Leaf, false)
    }

    /// Parameter `index`, borrowed for the lifetime of the tape.
    pub fn param(&mut self, index: usize, value: &'a Array2<F>) -> Var {
        self.push(Val::Borrowed(value), Op::Param(index), true)
    }

    /// `x W (+ b)`, with `W` shaped `in x out` and `b` shaped `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut y = self.value(x).dot(self.value(w));
        if let Some(b) = b {
            y += &self.value(b).row(0);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Val::Owned(y), Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Val::Owned(y), Op::Add(a, b), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (y, xhat, rstd) = layer_norm_forward(
            self.value(x).view(),
            self.value(gain).row(0),
            self.value(bias).row(0),
        );
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Val::Owned(y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(gelu);
        let ng = self.ng(x);
        self.push(Val::Owned(y), Op::Gelu(x), ng)
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `n x 3d` with query, key and value blocks side by side.
    /// `segments` lists `(start_row, len)` for each sequence; rows attend only
    /// to earlier-or-equal rows of their own segment. Output is `n x d`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, segments: Vec<(usize, usize)>) -> Var {
        let input = self.value(qkv);
        let d = input.ncols() / 3;
        assert_eq!(d * 3, input.ncols(), "qkv width must be a multiple of 3");
        assert_eq!(d % heads, 0, "model width must divide into heads");
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut out = Array2::<F>::zeros((input.nrows(), d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in &segments {
            for h in 0..heads {
                let rows = start..start + len;
                let q = input.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = input.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = input.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t()) * scale;
                causal_softmax_in_place(&mut p);
                out.slice_mut(s![rows, h * dh..(h + 1) * dh]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let ng = self.ng(qkv);
        self.push(
            Val::Owned(out),
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&v| self.value(v).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        let ng = parts.iter().any(|&v| self.ng(v));
        self.push(Val::Owned(y), Op::Concat(parts.to_vec()), ng)
    }

    /// Weighted row gather from `table` (embedding lookup when every row has one
    /// entry with weight one). A row with no entries is zero.
    pub fn gather(&mut self, table: Var, rows: RowMix<F>) -> Var {
        let t = self.value(table);
        let mut y = Array2::<F>::zeros((rows.len(), t.ncols()));
        for (r, mix) in rows.iter().enumerate() {
            let mut out = y.row_mut(r);
            for &(idx, w) in mix {
                out.scaled_add(w, &t.row(idx));
            }
        }
        let ng = self.ng(table);
        self.push(Val::Owned(y), Op::Gather { table, rows }, ng)
    }

    /// Rows with `mask[r]` set are replaced by the single row of `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, mask: Vec<bool>) -> Var {
        let mut y = self.value(x).clone();
        assert_eq!(mask.len(), y.nrows());
        let f = self.value(fill);
        for (r, &m) in mask.iter().enumerate() {
            if m {
                y.row_mut(r).assign(&f.row(0));
            }
        }
        let ng = self.ng(x) || self.ng(fill);
        self.push(Val::Owned(y), Op::ReplaceRows { x, fill, mask }, ng)
    }

    /// Mean softmax cross-entropy over rows with a target; `1 x 1`. Zero when
    /// no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len());
        let mut probs = z.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (mut row, target) in probs.rows_mut().into_iter().zip(&targets) {
            let lse = log_sum_exp(row.view());
            if let Some(t) = *target {
                total += lse.f64() - row[t].f64();
                count += 1;
            }
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.ng(logits);
        self.push(
            Val::Owned(Array2::from_elem((1, 1), F::of(loss))),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            ng,
        )
    }

    /// Mean over rows of the squared row-wise distance to a constant target.
    pub fn sq_err(&mut self, pred: Var, target: Array2<F>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        let n = p.nrows().max(1);
        let total: f64 = Zip::from(p)
            .and(&target)
            .fold(0.0, |acc, &a, &b| acc + ((a - b) * (a - b)).f64());
        let ng = self.ng(pred);
        self.push(
            Val::Owned(Array2::from_elem((1, 1), F::of(total / n as f64))),
            Op::SqErr { pred, target },
            ng,
        )
    }

    /// `sum_i c_i * s_i` over `1 x 1` inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let total = terms
            .iter()
            .fold(F::zero(), |acc, &(v, c)| acc + c * self.scalar(v));
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(
            Val::Owned(Array2::from_elem((1, 1), total)),
            Op::WeightedSum(terms.to_vec()),
            ng,
        )
    }

    /// Back-propagate from the scalar `root`. Returns one gradient slot per
    /// parameter index in `0..n_params`; parameters not reached are zero.
    pub fn backward(&self, root: Var, n_params: usize) -> Vec<Option<Array2<F>>> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut params: Vec<Option<Array2<F>>> = (0..n_params).map(|_| None).collect();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => accumulate(&mut params[*p], g),
                Op::Linear { x, w, b } => {
                    if self.ng(*x) {
                        let dx = g.dot(&self.value(*w).t());
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.ng(*w) {
                        let dw = self.value(*x).t().dot(&g);
                        accumulate(&mut grads[w.0], dw);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    if self.ng(*gain) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[gain.0], dg);
                    }
                    if self.ng(*bias) {
                        accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dx = layer_norm_backward(&g, xhat, rstd, self.value(*gain).row(0));
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= &g;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Attention {
                    qkv,
                    heads,
                    segments,
                    probs,
                } => {
                    let dqkv = attention_backward(self.value(*qkv), &g, *heads, segments, probs);
                    accumulate(&mut grads[qkv.0], dqkv);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.ng(p) {
                            accumulate(&mut grads[p.0], g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::Gather { table, rows } => {
                    let t = self.value(*table);
                    let mut dt = Array2::<F>::zeros(t.dim());
                    for (r, mix) in rows.iter().enumerate() {
                        for &(idx, w) in mix {
                            dt.row_mut(idx).scaled_add(w, &g.row(r));
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::ReplaceRows { x, fill, mask } => {
                    if self.ng(*fill) {
                        let mut df = Array2::<F>::zeros((1, g.ncols()));
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                df.row_mut(0).scaled_add(F::one(), &g.row(r));
                            }
                        }
                        accumulate(&mut grads[fill.0], df);
                    }
                    if self.ng(*x) {
                        let mut dx = g;
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                dx.row_mut(r).fill(F::zero());
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let mut dz = Array2::<F>::zeros(probs.dim());
                    if *count > 0 {
                        let scale = g[[0, 0]] / F::of(*count as f64);
                        for (r, target) in targets.iter().enumerate() {
                            if let Some(t) = *target {
                                let mut row = dz.row_mut(r);
                                row.assign(&probs.row(r));
                                row[t] = row[t] - F::one();
                                row.mapv_inplace(|v| v * scale);
                            }
                        }
                    }
                    accumulate(&mut grads[logits.0], dz);
                }
                Op::SqErr { pred, target } => {
                    let p = self.value(*pred);
                    let scale = g[[0, 0]] * F::of(2.0 / p.nrows().max(1) as f64);
                    let dp = (p - target) * scale;
                    accumulate(&mut grads[pred.0], dp);
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        if self.ng(v) {
                            accumulate(&mut grads[v.0], Array2::from_elem((1, 1), c * g[[0, 0]]));
                        }
                    }
                }
            }
        }
        params
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Array2<F>>, g: Array2<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub fn log_sum_exp<F: Scalar>(row: ArrayView1<F>) -> F {
    let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
    let s: F = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Row-wise softmax with entries above the diagonal masked out.
pub fn causal_softmax_in_place<F: Scalar>(scores: &mut Array2<F>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let m = row
            .slice(s![..=i])
            .fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - m).exp();
                sum = sum + *v;
            } else {
                *v = F::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

fn attention_backward<F: Scalar>(
    qkv: &Array2<F>,
    g: &Array2<F>,
    heads: usize,
    segments: &[(usize, usize)],
    probs: &[Array2<F>],
) -> Array2<F> {
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dqkv = Array2::<F>::zeros(qkv.dim());
    let mut pi = 0;
    for &(start, len) in segments {
        let rows = start..start + len;
        for h in 0..heads {
            let p = &probs[pi];
            pi += 1;
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let go = g.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let dv = p.t().dot(&go);
            let dp = go.dot(&v.t());
            // softmax backward: ds = p * (dp - rowsum(dp * p))
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: F = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|r, &pv| *r = *r - pv * dot);
            }
            ds.mapv_inplace(|x| x * scale);
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
    }
    dqkv
}

/// Returns `(y, xhat, rstd)`.
pub fn layer_norm_forward<F: Scalar>(
    x: ArrayView2<F>,
    gain: ArrayView1<F>,
    bias: ArrayView1<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let n = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::<F>::zeros(x.nrows());
    for (r, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * rs);
        rstd[r] = rs;
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, xhat, rstd)
}

fn layer_norm_backward<F: Scalar>(
    g: &Array2<F>,
    xhat: &Array2<F>,
    rstd: &Array1<F>,
    gain: ArrayView1<F>,
) -> Array2<F> {
    let n = F::of(xhat.ncols() as f64);
    let mut dx = g * &gain;
    for ((mut row, xh), &rs) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / n;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|d, &h| *d = rs * (*d - mean_d - h * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    F::of(0.5) * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (F::one() + F::of(3.0) * k * x * x);
    F::of(0.5) * (F::one() + th) + F::of(0.5) * x * (F::one() - th * th) * du
}
