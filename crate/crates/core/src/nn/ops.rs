//! Forward and backward kernels on row-major `(rows, cols)` buffers.
//!
//! Backward functions accumulate parameter gradients into a flat gradient
//! buffer laid out like the parameters and return the input gradient.

use super::{Linear, Slot};
use crate::scalar::{gemm, View, ViewMut};
use crate::Scalar;

pub const LN_EPS: f64 = 1e-6;

/// `y = x W + b` for `rows` input rows.
pub fn linear_forward<T: Scalar>(params: &[T], lin: &Linear, x: &[T], rows: usize) -> Vec<T> {
    let (i, o) = (lin.input(), lin.output());
    debug_assert_eq!(x.len(), rows * i);
    let bias = lin.b.get(params);
    let mut y = Vec::with_capacity(rows * o);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(T::one(), View::new(x, rows, i), lin.w.view(params), T::one(), ViewMut::new(&mut y, rows, o));
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ` when requested.
pub fn linear_backward<T: Scalar>(
    params: &[T],
    grads: &mut [T],
    lin: &Linear,
    x: &[T],
    dy: &[T],
    rows: usize,
    want_dx: bool,
) -> Option<Vec<T>> {
    let (i, o) = (lin.input(), lin.output());
    debug_assert_eq!(dy.len(), rows * o);
    if rows > 0 {
        gemm(
            T::one(),
            View::new(x, rows, i).t(),
            View::new(dy, rows, o),
            T::one(),
            ViewMut::new(lin.w.get_mut(grads), i, o),
        );
        let db = lin.b.get_mut(grads);
        for r in dy.chunks_exact(o) {
            for (g, &d) in db.iter_mut().zip(r) {
                *g += d;
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * i];
        gemm(
            T::one(),
            View::new(dy, rows, o),
            lin.w.view(params).t(),
            T::zero(),
            ViewMut::new(&mut dx, rows, i),
        );
        dx
    })
}

/// Layer norm without affine parameters. Returns `(normalized, rstd per row)`.
pub fn layernorm_forward<T: Scalar>(x: &[T], cols: usize) -> (Vec<T>, Vec<T>) {
    let n = T::lit(cols as f64);
    let eps = T::lit(LN_EPS);
    let rows = x.len() / cols;
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(cols).zip(y.chunks_exact_mut(cols)) {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (y, rstd)
}

pub fn layernorm_backward<T: Scalar>(y: &[T], rstd: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let n = T::lit(cols as f64);
    let mut dx = vec![T::zero(); y.len()];
    for (((yr, dyr), dxr), &r) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
        .zip(rstd)
    {
        let mean_dy = dyr.iter().copied().sum::<T>() / n;
        let mean_dyy = dyr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<T>() / n;
        for ((o, &d), &v) in dxr.iter_mut().zip(dyr).zip(yr) {
            *o = r * (d - mean_dy - v * mean_dyy);
        }
    }
    dx
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    x.iter()
        .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let th = (c * (v + a * v * v * v)).tanh();
            let dth = (T::one() - th * th) * c * (T::one() + three * a * v * v);
            d * half * (T::one() + th + v * dth)
        })
        .collect()
}

/// Per-sample modulation vectors: row `s` of a `(samples, stride)` matrix,
/// columns `offset..offset + dim`.
#[derive(Debug, Clone, Copy)]
pub struct ModSlice {
    pub offset: usize,
    pub stride: usize,
}

impl ModSlice {
    #[inline]
    pub fn of<'a, T>(&self, mods: &'a [T], sample: usize, dim: usize) -> &'a [T] {
        &mods[sample * self.stride + self.offset..][..dim]
    }

    #[inline]
    pub fn of_mut<'a, T>(&self, mods: &'a mut [T], sample: usize, dim: usize) -> &'a mut [T] {
        &mut mods[sample * self.stride + self.offset..][..dim]
    }
}

/// `y = h (1 + scale) + shift` with per-row sample lookup.
pub fn modulate_forward<T: Scalar>(
    h: &[T],
    dim: usize,
    row_sample: &[usize],
    mods: &[T],
    shift: ModSlice,
    scale: ModSlice,
) -> Vec<T> {
    let mut y = vec![T::zero(); h.len()];
    for ((hr, yr), &s) in h.chunks_exact(dim).zip(y.chunks_exact_mut(dim)).zip(row_sample) {
        let sh = shift.of(mods, s, dim);
        let sc = scale.of(mods, s, dim);
        for j in 0..dim {
            yr[j] = hr[j] * (T::one() + sc[j]) + sh[j];
        }
    }
    y
}

/// Returns `dh`; accumulates shift/scale gradients into `dmods`.
pub fn modulate_backward<T: Scalar>(
    h: &[T],
    dy: &[T],
    dim: usize,
    row_sample: &[usize],
    mods: &[T],
    dmods: &mut [T],
    shift: ModSlice,
    scale: ModSlice,
) -> Vec<T> {
    let mut dh = vec![T::zero(); h.len()];
    for (((hr, dyr), dhr), &s) in h
        .chunks_exact(dim)
        .zip(dy.chunks_exact(dim))
        .zip(dh.chunks_exact_mut(dim))
        .zip(row_sample)
    {
        let sc = scale.of(mods, s, dim);
        for j in 0..dim {
            dhr[j] = dyr[j] * (T::one() + sc[j]);
        }
        let dsc = scale.of_mut(dmods, s, dim);
        for j in 0..dim {
            dsc[j] += dyr[j] * hr[j];
        }
        let dsh = shift.of_mut(dmods, s, dim);
        for j in 0..dim {
            dsh[j] += dyr[j];
        }
    }
    dh
}

/// `x += gate ⊙ f` in place.
pub fn gated_residual_forward<T: Scalar>(x: &mut [T], f: &[T], dim: usize, row_sample: &[usize], mods: &[T], gate: ModSlice) {
    for ((xr, fr), &s) in x.chunks_exact_mut(dim).zip(f.chunks_exact(dim)).zip(row_sample) {
        let g = gate.of(mods, s, dim);
        for j in 0..dim {
            xr[j] += g[j] * fr[j];
        }
    }
}

/// Returns `df = dy ⊙ gate`; accumulates the gate gradient. The residual
/// path passes `dy` through unchanged.
pub fn gated_residual_backward<T: Scalar>(
    f: &[T],
    dy: &[T],
    dim: usize,
    row_sample: &[usize],
    mods: &[T],
    dmods: &mut [T],
    gate: ModSlice,
) -> Vec<T> {
    let mut df = vec![T::zero(); f.len()];
    for (((fr, dyr), dfr), &s) in f
        .chunks_exact(dim)
        .zip(dy.chunks_exact(dim))
        .zip(df.chunks_exact_mut(dim))
        .zip(row_sample)
    {
        let g = gate.of(mods, s, dim);
        for j in 0..dim {
            dfr[j] = dyr[j] * g[j];
        }
        let dg = gate.of_mut(dmods, s, dim);
        for j in 0..dim {
            dg[j] += dyr[j] * fr[j];
        }
    }
    df
}

/// Multi-head softmax attention over one token sequence.
///
/// `q`, `k`, `v` are `(tokens, heads·head_dim)`. Returns the output and the
/// attention probabilities `(heads, tokens, tokens)`.
pub fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], tokens: usize, heads: usize, head_dim: usize) -> (Vec<T>, Vec<T>) {
    let d = heads * head_dim;
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let mut out = vec![T::zero(); tokens * d];
    let mut probs = vec![T::zero(); heads * tokens * tokens];
    for h in 0..heads {
        let qh = View::new(q, tokens, d).cols_range(h * head_dim, head_dim);
        let kh = View::new(k, tokens, d).cols_range(h * head_dim, head_dim);
        let vh = View::new(v, tokens, d).cols_range(h * head_dim, head_dim);
        let p = &mut probs[h * tokens * tokens..(h + 1) * tokens * tokens];
        gemm(scale, qh, kh.t(), T::zero(), ViewMut::new(p, tokens, tokens));
        softmax_rows(p, tokens);
        let o = ViewMut::strided(&mut out[h * head_dim..], tokens, head_dim, d, 1);
        gemm(T::one(), View::new(p, tokens, tokens), vh, T::zero(), o);
    }
    (out, probs)
}

pub fn softmax_rows<T: Scalar>(p: &mut [T], cols: usize) {
    for row in p.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Gradients `(dq, dk, dv)` of [`attention_forward`].
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    tokens: usize,
    heads: usize,
    head_dim: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = heads * head_dim;
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let mut dq = vec![T::zero(); tokens * d];
    let mut dk = vec![T::zero(); tokens * d];
    let mut dv = vec![T::zero(); tokens * d];
    let mut dp = vec![T::zero(); tokens * tokens];
    for h in 0..heads {
        let p = &probs[h * tokens * tokens..(h + 1) * tokens * tokens];
        let doh = View::new(dout, tokens, d).cols_range(h * head_dim, head_dim);
        let qh = View::new(q, tokens, d).cols_range(h * head_dim, head_dim);
        let kh = View::new(k, tokens, d).cols_range(h * head_dim, head_dim);
        let vh = View::new(v, tokens, d).cols_range(h * head_dim, head_dim);
        // dV = Pᵀ dO
        gemm(
            T::one(),
            View::new(p, tokens, tokens).t(),
            doh,
            T::zero(),
            ViewMut::strided(&mut dv[h * head_dim..], tokens, head_dim, d, 1),
        );
        // dP = dO Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P)), pre-multiplied by the score scale.
        gemm(T::one(), doh, vh.t(), T::zero(), ViewMut::new(&mut dp, tokens, tokens));
        for (dpr, pr) in dp.chunks_exact_mut(tokens).zip(p.chunks_exact(tokens)) {
            let dot = dpr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
            for (x, &pv) in dpr.iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        gemm(
            T::one(),
            View::new(&dp, tokens, tokens),
            kh,
            T::zero(),
            ViewMut::strided(&mut dq[h * head_dim..], tokens, head_dim, d, 1),
        );
        gemm(
            T::one(),
            View::new(&dp, tokens, tokens).t(),
            qh,
            T::zero(),
            ViewMut::strided(&mut dk[h * head_dim..], tokens, head_dim, d, 1),
        );
    }
    (dq, dk, dv)
}

/// Adds row `idx[r]` of a table slot to output row `r`.
pub fn gather_rows<T: Scalar>(params: &[T], table: Slot, idx: &[usize], out: &mut [T]) {
    let d = table.cols;
    for (o, &i) in out.chunks_exact_mut(d).zip(idx) {
        for (x, &t) in o.iter_mut().zip(table.row(params, i)) {
            *x += t;
        }
    }
}

/// Scatter-adds `dy` rows into the gradient of table rows `idx`.
pub fn scatter_rows<T: Scalar>(grads: &mut [T], table: Slot, idx: &[usize], dy: &[T]) {
    let d = table.cols;
    for (dr, &i) in dy.chunks_exact(d).zip(idx) {
        let g = &mut grads[table.offset + i * d..table.offset + (i + 1) * d];
        for (x, &v) in g.iter_mut().zip(dr) {
            *x += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let g = gelu_backward(&[x], &[1.0])[0];
            assert!((g - fd(|v| gelu_forward(&[v])[0], x)).abs() < 1e-8);
            let s = silu_backward(&[x], &[1.0])[0];
            assert!((s - fd(|v| silu_forward(&[v])[0], x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layernorm_gradient() {
        let x = [0.3, -1.2, 2.0, 0.5];
        let w = [0.7, -0.1, 0.4, 1.3];
        let loss = |x: &[f64]| {
            let (y, _) = layernorm_forward(x, 4);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (y, r) = layernorm_forward(&x, 4);
        let dx = layernorm_backward(&y, &r, &w, 4);
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let num = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((dx[i] - num).abs() < 1e-7, "{i}: {} vs {num}", dx[i]);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let t = 6;
        let q: Vec<f64> = (0..t * 8).map(|i| (i as f64 * 0.31).sin()).collect();
        let k: Vec<f64> = (0..t * 8).map(|i| (i as f64 * 0.17).cos()).collect();
        let (_, p) = attention_forward(&q, &k, &q, t, 2, 4);
        for row in p.chunks_exact(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x > 0.0));
        }
    }
}
