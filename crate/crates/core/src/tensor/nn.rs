use super::ops::{acc, Op};
use super::tape::{Node, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// The layer kinds a [`Tape`] can evaluate through [`Tape::layer_forward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    /// `y = x Wᵀ + b` with `W: [out, in]`.
    Linear { weight: Var, bias: Option<Var> },
    /// Cross-correlation with `W: [C_out, C_in, K, K]`, zero padding.
    Conv2d { weight: Var, stride: usize, padding: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    ResidualAdd { skip: Var },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

/// Output spatial size of a convolution or pooling window.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn linear_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[T],
) {
    let xs = nodes[x.0].value.shape();
    let (batch, inp) = (xs[0], xs[1]);
    let out = nodes[w.0].value.shape()[0];
    let xv = nodes[x.0].value.data();
    let wv = nodes[w.0].value.data();
    if let Some(gx) = acc(nodes, grads, x) {
        T::gemm(batch, out, inp, T::one(), g, (out, 1), wv, (inp, 1), T::one(), gx, (inp, 1));
    }
    if let Some(gw) = acc(nodes, grads, w) {
        T::gemm(out, batch, inp, T::one(), g, (1, out), xv, (inp, 1), T::one(), gw, (inp, 1));
    }
    if let Some(b) = b {
        if let Some(gb) = acc(nodes, grads, b) {
            for row in g.chunks(out) {
                gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    x: Var,
    w: Var,
    geom: &ConvGeom,
    g: &[T],
) {
    let need_x = nodes[x.0].requires_grad;
    let need_w = nodes[w.0].requires_grad;
    let xv = nodes[x.0].value.data();
    let wv = nodes[w.0].value.data();
    let (rows, n) = (geom.col_rows(), geom.col_cols());
    let in_plane = geom.cin * geom.h * geom.w;
    let out_plane = geom.cout * n;
    let mut cols = vec![T::zero(); rows * n];
    if need_w {
        let mut gw = vec![T::zero(); wv.len()];
        for bi in 0..geom.batch {
            im2col(&xv[bi * in_plane..(bi + 1) * in_plane], geom, &mut cols);
            let gout = &g[bi * out_plane..(bi + 1) * out_plane];
            T::gemm(geom.cout, n, rows, T::one(), gout, (n, 1), &cols, (1, n), T::one(), &mut gw, (rows, 1));
        }
        let dst = acc(nodes, grads, w).expect("weight requires grad");
        dst.iter_mut().zip(&gw).for_each(|(d, &s)| *d += s);
    }
    if need_x {
        let mut gx = vec![T::zero(); xv.len()];
        for bi in 0..geom.batch {
            let gout = &g[bi * out_plane..(bi + 1) * out_plane];
            T::gemm(rows, geom.cout, n, T::one(), wv, (1, rows), gout, (n, 1), T::zero(), &mut cols, (n, 1));
            col2im_add(&cols, geom, &mut gx[bi * in_plane..(bi + 1) * in_plane]);
        }
        let dst = acc(nodes, grads, x).expect("input requires grad");
        dst.iter_mut().zip(&gx).for_each(|(d, &s)| *d += s);
    }
}

pub(crate) fn avg_pool_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    x: Var,
    p: &PoolGeom,
    g: &[T],
) {
    if let Some(gx) = acc(nodes, grads, x) {
        let inv = T::one() / T::of((p.k * p.k) as f64);
        for plane in 0..p.planes {
            for oy in 0..p.ho {
                for ox in 0..p.wo {
                    let s = g[(plane * p.ho + oy) * p.wo + ox] * inv;
                    for ki in 0..p.k {
                        let row = plane * p.h * p.w + (oy * p.stride + ki) * p.w + ox * p.stride;
                        gx[row..row + p.k].iter_mut().for_each(|d| *d += s);
                    }
                }
            }
        }
    }
}

/// Channel layout of a normalization input `[B, C, ...]`.
fn norm_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("batch_norm expects [B, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) {
    let (b, c, s) = norm_layout(nodes[x.0].value.shape()).expect("validated in forward");
    let gam = nodes[gamma.0].value.data();
    let m = T::of((b * s) as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            for i in off..off + s {
                sum_dy[ch] += g[i];
                sum_dy_xhat[ch] += g[i] * xhat[i];
            }
        }
    }
    if let Some(gx) = acc(nodes, grads, x) {
        for bi in 0..b {
            for ch in 0..c {
                let k = gam[ch] * inv_std[ch] / m;
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    gx[i] += k * (m * g[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                }
            }
        }
    }
    if let Some(gg) = acc(nodes, grads, gamma) {
        gg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d += v);
    }
    if let Some(gb) = acc(nodes, grads, beta) {
        gb.iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d += v);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_eval_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    inv_std: &[T],
    g: &[T],
) {
    let (b, c, s) = norm_layout(nodes[x.0].value.shape()).expect("validated in forward");
    let xv = nodes[x.0].value.data();
    let gam = nodes[gamma.0].value.data();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            for i in off..off + s {
                sum_dy[ch] += g[i];
                sum_dy_xhat[ch] += g[i] * (xv[i] - mean[ch]) * inv_std[ch];
            }
        }
    }
    if let Some(gx) = acc(nodes, grads, x) {
        for bi in 0..b {
            for ch in 0..c {
                let k = gam[ch] * inv_std[ch];
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    gx[i] += k * g[i];
                }
            }
        }
    }
    if let Some(gg) = acc(nodes, grads, gamma) {
        gg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d += v);
    }
    if let Some(gb) = acc(nodes, grads, beta) {
        gb.iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d += v);
    }
}

/// Per-channel batch statistics produced by a training-mode normalization.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as tracked by running estimates.
    pub var: Vec<T>,
}

impl<T: Real> Tape<T> {
    /// Dispatches one layer of the given kind.
    pub fn layer_forward(&mut self, kind: &LayerKind, input: Var) -> Result<Var> {
        match *kind {
            LayerKind::Linear { weight, bias } => self.linear(input, weight, bias),
            LayerKind::Conv2d { weight, stride, padding } => self.conv2d(input, weight, stride, padding),
            LayerKind::Relu => Ok(self.relu(input)),
            LayerKind::MaxPool { kernel, stride } => self.max_pool(input, kernel, stride),
            LayerKind::AvgPool { kernel, stride } => self.avg_pool(input, kernel, stride),
            LayerKind::GlobalAvgPool => self.global_avg_pool(input),
            LayerKind::ResidualAdd { skip } => self.residual_add(input, skip),
        }
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (batch, inp, out) = match (xs, ws) {
            ([batch, inp], [out, win]) if inp == win => (*batch, *inp, *out),
            _ => return Err(Error::shape(format!("linear: input {xs:?} vs weight {ws:?}"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape(format!("linear: bias {:?} for {out} outputs", self.shape(b))));
            }
        }
        let mut y = vec![T::zero(); batch * out];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        T::gemm(batch, inp, out, T::one(), xv, (inp, 1), wv, (1, inp), T::zero(), &mut y, (out, 1));
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bv).for_each(|(d, &s)| *d += s);
            }
        }
        self.macs += (batch * inp * out) as u64;
        let value = Tensor::new(vec![batch, out], y)?;
        Ok(self.push_op(value, Op::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, cin, h, wd, cout, k) = match (xs.as_slice(), ws.as_slice()) {
            ([b, c, h, w], [co, ci, k1, k2]) if c == ci && k1 == k2 => (*b, *c, *h, *w, *co, *k1),
            _ => return Err(Error::shape(format!("conv2d: input {xs:?} vs weight {ws:?}"))),
        };
        if !(1..=2).contains(&stride) {
            return Err(Error::shape(format!("conv2d: unsupported stride {stride}")));
        }
        let (ho, wo) = match (
            conv_output_size(h, k, stride, padding),
            conv_output_size(wd, k, stride, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape(format!("conv2d: kernel {k} too large for {h}x{wd}"))),
        };
        let geom = ConvGeom { batch, cin, h, w: wd, cout, k, stride, pad: padding, ho, wo };
        let (rows, n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * n];
        let mut y = vec![T::zero(); batch * cout * n];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let in_plane = cin * h * wd;
        for bi in 0..batch {
            im2col(&xv[bi * in_plane..(bi + 1) * in_plane], &geom, &mut cols);
            let dst = &mut y[bi * cout * n..(bi + 1) * cout * n];
            T::gemm(cout, rows, n, T::one(), wv, (rows, 1), &cols, (n, 1), T::zero(), dst, (n, 1));
        }
        self.macs += (batch * cout * rows * n) as u64;
        let value = Tensor::new(vec![batch, cout, ho, wo], y)?;
        Ok(self.push_op(value, Op::Conv2d { x, w, geom }))
    }

    fn pool_geom(&self, x: Var, k: usize, stride: usize) -> Result<PoolGeom> {
        let xs = self.shape(x);
        let [b, c, h, w] = *xs else {
            return Err(Error::shape(format!("pooling expects [B, C, H, W], got {xs:?}")));
        };
        match (conv_output_size(h, k, stride, 0), conv_output_size(w, k, stride, 0)) {
            (Some(ho), Some(wo)) if k > 0 => Ok(PoolGeom { planes: b * c, h, w, k, stride, ho, wo }),
            _ => Err(Error::shape(format!("pool window {k}/{stride} does not fit {h}x{w}"))),
        }
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let p = self.pool_geom(x, kernel, stride)?;
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(p.planes * p.ho * p.wo);
        let mut argmax = Vec::with_capacity(y.capacity());
        for plane in 0..p.planes {
            for oy in 0..p.ho {
                for ox in 0..p.wo {
                    let mut best = plane * p.h * p.w + oy * p.stride * p.w + ox * p.stride;
                    for ki in 0..p.k {
                        for kj in 0..p.k {
                            let i = plane * p.h * p.w + (oy * p.stride + ki) * p.w + ox * p.stride + kj;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[2] = p.ho;
        shape[3] = p.wo;
        let value = Tensor::new(shape, y)?;
        Ok(self.push_op(value, Op::MaxPool { x, argmax }))
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let p = self.pool_geom(x, kernel, stride)?;
        let xv = self.value(x).data();
        let inv = T::one() / T::of((kernel * kernel) as f64);
        let mut y = Vec::with_capacity(p.planes * p.ho * p.wo);
        for plane in 0..p.planes {
            for oy in 0..p.ho {
                for ox in 0..p.wo {
                    let mut s = T::zero();
                    for ki in 0..p.k {
                        let row = plane * p.h * p.w + (oy * p.stride + ki) * p.w + ox * p.stride;
                        s += xv[row..row + p.k].iter().copied().sum::<T>();
                    }
                    y.push(s * inv);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[2] = p.ho;
        shape[3] = p.wo;
        let value = Tensor::new(shape, y)?;
        Ok(self.push_op(value, Op::AvgPool { x, geom: p }))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let [b, c, h, w] = *xs else {
            return Err(Error::shape(format!("global_avg_pool expects [B, C, H, W], got {xs:?}")));
        };
        let inv = T::one() / T::of((h * w) as f64);
        let y = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![b, c], y)?;
        Ok(self.push_op(value, Op::GlobalAvgPool(x)))
    }

    fn check_norm_params(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (b, c, s) = norm_layout(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm: {c} channels vs scale {:?} / shift {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((b, c, s))
    }

    /// Training-mode batch normalization over `(B, spatial)` per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, NormStats<T>)> {
        let (b, c, s) = self.check_norm_params(x, gamma, beta)?;
        let xv = self.value(x).data();
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let m = b * s;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                mean[ch] += xv[off..off + s].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / T::of(m as f64));
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                var[ch] += xv[off..off + s].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        let biased: Vec<T> = var.iter().map(|&v| v / T::of(m as f64)).collect();
        let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    y[i] = gam[ch] * xhat[i] + bet[ch];
                }
            }
        }
        let unbiased = var
            .iter()
            .map(|&v| if m > 1 { v / T::of((m - 1) as f64) } else { T::zero() })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        let out = self.push_op(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((out, NormStats { mean, var: unbiased }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (b, c, s) = self.check_norm_params(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm_eval: statistics length mismatch"));
        }
        let xv = self.value(x).data();
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut y = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    y[i] = gam[ch] * (xv[i] - mean[ch]) * inv_std[ch] + bet[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        let op = Op::BatchNormEval { x, gamma, beta, mean: mean.to_vec(), inv_std };
        Ok(self.push_op(value, op))
    }
}
