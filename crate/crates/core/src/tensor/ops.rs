use super::nn::{self, ConvGeom, PoolGeom};
use super::tape::{Node, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Floor applied to the reference-side probability inside KL divergence.
pub const KL_CLAMP: f64 = 1e-12;

const DISTRIBUTION_TOLERANCE: f64 = 1e-5;

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
    Relu(Var),
    Softmax { x: Var, tau: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Kl { p: Var, q: Var },
    L2DistSq { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeom },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
}

impl<T: Real> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Sum(x) | Op::Mean(x) | Op::Relu(x) | Op::GlobalAvgPool(x) => vec![*x],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Softmax { x, .. } | Op::MaxPool { x, .. } | Op::AvgPool { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Kl { p, q } => vec![*p, *q],
            Op::L2DistSq { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }

    pub(crate) fn backward(
        &self,
        nodes: &[Node<T>],
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let val = |v: &Var| nodes[v.0].value.data();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = acc(nodes, grads, *v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += *c * s);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let s = g[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    if let Some(gv) = acc(nodes, grads, *v) {
                        gv[0] += *w * g[0];
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(x);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((d, &s), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax { x, tau } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let y = out.data();
                    let m = *out.shape().last().unwrap();
                    for ((gr, yr), dr) in g.chunks(m).zip(y.chunks(m)).zip(gx.chunks_mut(m)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot) / *tau;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(gl) = acc(nodes, grads, *logits) {
                    let m = probs.len() / labels.len();
                    let scale = g[0] / T::of(labels.len() as f64);
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..m {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[row * m + j] += scale * (probs[row * m + j] - onehot);
                        }
                    }
                }
            }
            Op::Kl { p, q } => {
                let (pv, qv) = (val(p), val(q));
                let batch = T::of(nodes[p.0].value.shape()[0] as f64);
                let scale = g[0] / batch;
                let floor = T::of(KL_CLAMP);
                if let Some(gp) = acc(nodes, grads, *p) {
                    for ((d, &pi), &qi) in gp.iter_mut().zip(pv).zip(qv) {
                        *d += scale * (pi.max(floor).ln() - qi.max(floor).ln() + T::one());
                    }
                }
                if let Some(gq) = acc(nodes, grads, *q) {
                    for ((d, &pi), &qi) in gq.iter_mut().zip(pv).zip(qv) {
                        if qi >= floor {
                            *d -= scale * pi / qi;
                        }
                    }
                }
            }
            Op::L2DistSq { a, b } => {
                let (av, bv) = (val(a), val(b));
                let batch = T::of(nodes[a.0].value.shape()[0] as f64);
                let scale = T::of(2.0) * g[0] / batch;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += scale * (x - y);
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((d, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= scale * (x - y);
                    }
                }
            }
            Op::Linear { x, w, b } => nn::linear_backward(nodes, grads, *x, *w, *b, g),
            Op::Conv2d { x, w, geom } => nn::conv2d_backward(nodes, grads, *x, *w, geom, g),
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (&src, &s) in argmax.iter().zip(g) {
                        gx[src] += s;
                    }
                }
            }
            Op::AvgPool { x, geom } => nn::avg_pool_backward(nodes, grads, *x, geom, g),
            Op::GlobalAvgPool(x) => {
                let shape = nodes[x.0].value.shape();
                let spatial: usize = shape[2..].iter().product();
                if let Some(gx) = acc(nodes, grads, *x) {
                    let inv = T::one() / T::of(spatial as f64);
                    for (chunk, &s) in gx.chunks_mut(spatial).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += s * inv);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                nn::batch_norm_backward(nodes, grads, *x, *gamma, *beta, xhat, inv_std, g)
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                nn::batch_norm_eval_backward(nodes, grads, *x, *gamma, *beta, mean, inv_std, g)
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` takes no gradient.
pub(crate) fn acc<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn rows_of(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [b, m] if *b > 0 && *m > 0 => Ok((*b, *m)),
        _ => Err(Error::shape(format!("{what} expects [batch, classes], got {shape:?}"))),
    }
}

fn softmax_rows<T: Real>(x: &[T], m: usize, tau: T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(m) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = ((v - max) / tau).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / total);
    }
    out
}

fn check_distribution<T: Real>(data: &[T], m: usize, what: &str) -> Result<()> {
    for (r, row) in data.chunks(m).enumerate() {
        let mut sum = 0.0;
        for &v in row {
            let v = v.as_f64();
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidValue(format!("{what} row {r} has entry {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidValue(format!("{what} row {r} sums to {sum}")));
        }
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, Op::Add(a, b)))
    }

    /// Skip-connection sum of a residual block.
    pub fn residual_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add(a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push_op(value, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push_op(Tensor::scalar(s), Op::Mean(x))
    }

    /// `Σ w_k · v_k` over one-element nodes, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            total += w * self.scalar(v)?;
        }
        Ok(self.push_op(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push_op(value, Op::Relu(x))
    }

    /// Row-wise softmax over `[batch, M]` logits.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        self.tempered_softmax(logits, T::one())
    }

    /// Row-wise `softmax(logits / tau)`, max-subtracted.
    pub fn tempered_softmax(&mut self, logits: Var, tau: T) -> Result<Var> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
        }
        let (_, m) = rows_of(self.shape(logits), "softmax")?;
        let x = self.value(logits);
        if !x.is_finite() {
            return Err(Error::InvalidValue("softmax input contains non-finite logits".into()));
        }
        let data = softmax_rows(x.data(), m, tau);
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Softmax { x: logits, tau }))
    }

    /// Batch-mean of `-ln softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, m) = rows_of(self.shape(logits), "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Index { what: "label", index: bad, limit: m });
        }
        let x = self.value(logits);
        if !x.is_finite() {
            return Err(Error::InvalidValue("cross_entropy input contains non-finite logits".into()));
        }
        let mut total = T::zero();
        for (row, &label) in x.data().chunks(m).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[label];
        }
        let probs = softmax_rows(x.data(), m, T::one());
        let loss = total / T::of(b as f64);
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Batch-mean of `Σ_i p_i (ln p_i − ln q_i)` over rows of two `[batch, M]`
    /// distributions, with `0 · ln 0 = 0`. Entries of `q` below
    /// [`KL_CLAMP`] are clamped; zero entries facing positive `p` are
    /// counted in [`Tape::kl_clamp_events`].
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_divergence")?;
        let (b, m) = rows_of(self.shape(p), "kl_divergence")?;
        let (pv, qv) = (self.value(p).data(), self.value(q).data());
        check_distribution(pv, m, "kl_divergence p")?;
        check_distribution(qv, m, "kl_divergence q")?;
        let floor = T::of(KL_CLAMP);
        let mut total = T::zero();
        let mut clamps = 0;
        for (&pi, &qi) in pv.iter().zip(qv) {
            if pi > T::zero() {
                if qi == T::zero() {
                    clamps += 1;
                }
                total += pi * (pi.ln() - qi.max(floor).ln());
            }
        }
        self.kl_clamp_events += clamps;
        let loss = total / T::of(b as f64);
        Ok(self.push_op(Tensor::scalar(loss), Op::Kl { p, q }))
    }

    /// `Σ (a − b)²` divided by the leading (batch) dimension.
    pub fn l2_distance_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l2_distance_sq")?;
        let batch = *self
            .shape(a)
            .first()
            .ok_or_else(|| Error::shape("l2_distance_sq needs a batch dimension"))?;
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let loss = total / T::of(batch as f64);
        Ok(self.push_op(Tensor::scalar(loss), Op::L2DistSq { a, b }))
    }
}
