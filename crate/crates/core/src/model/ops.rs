//! Differentiable building blocks. Every forward returns the cache its
//! backward needs; backwards accumulate into parameter gradients.
//!
//! Weight gradients are accumulated one example at a time, in example order.
//! Splitting a batch into consecutive micro-batches therefore sums exactly
//! the same terms in exactly the same order.

use super::params::ParamId;
use crate::generators::RngStream;
use crate::scalar::{gemm, Scalar};

type Vals<T> = [Vec<T>];

/// Affine map `y = x·W + b`. With `transposed`, `W` is stored `out × in`
/// (used when the output projection shares the token embedding).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub transposed: bool,
}

pub struct LinearCache<T> {
    x: Vec<T>,
    rows: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(
        &self,
        vals: &Vals<T>,
        x: &[T],
        rows: usize,
    ) -> (Vec<T>, LinearCache<T>) {
        let y = self.apply(vals, x, rows);
        (
            y,
            LinearCache {
                x: x.to_vec(),
                rows,
            },
        )
    }

    pub fn apply<T: Scalar>(&self, vals: &Vals<T>, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.d_in);
        let w = &vals[self.w.0];
        let mut y = vec![T::zero(); rows * self.d_out];
        if let Some(b) = self.b {
            let b = &vals[b.0];
            for row in y.chunks_exact_mut(self.d_out) {
                row.copy_from_slice(b);
            }
        }
        let beta = if self.b.is_some() {
            T::one()
        } else {
            T::zero()
        };
        gemm(
            false,
            self.transposed,
            rows,
            self.d_in,
            self.d_out,
            x,
            w,
            beta,
            &mut y,
        );
        y
    }

    /// Returns `dx`. `group` is the number of rows belonging to one example.
    pub fn backward<T: Scalar>(
        &self,
        vals: &Vals<T>,
        grads: &mut Vals<T>,
        cache: &LinearCache<T>,
        dy: &[T],
        group: usize,
    ) -> Vec<T> {
        let rows = cache.rows;
        let (din, dout) = (self.d_in, self.d_out);
        let mut dx = vec![T::zero(); rows * din];
        gemm(
            false,
            !self.transposed,
            rows,
            dout,
            din,
            dy,
            &vals[self.w.0],
            T::zero(),
            &mut dx,
        );
        let gw = &mut grads[self.w.0];
        let group = group.max(1);
        let mut start = 0;
        while start < rows {
            let n = group.min(rows - start);
            let xs = &cache.x[start * din..(start + n) * din];
            let ds = &dy[start * dout..(start + n) * dout];
            if self.transposed {
                gemm(true, false, dout, n, din, ds, xs, T::one(), gw);
            } else {
                gemm(true, false, din, n, dout, xs, ds, T::one(), gw);
            }
            start += n;
        }
        if let Some(b) = self.b {
            let gb = &mut grads[b.0];
            for row in dy.chunks_exact(dout) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += *d;
                }
            }
        }
        dx
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, vals: &Vals<T>, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim;
        let rows = x.len() / d;
        let g = &vals[self.gamma.0];
        let b = &vals[self.beta.0];
        let eps = T::lit(LN_EPS);
        let dn = T::from_usize_lossy(d);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (xr[i] - mean) * is;
                xhat[r * d + i] = h;
                y[r * d + i] = h * g[i] + b[i];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        vals: &Vals<T>,
        grads: &mut Vals<T>,
        cache: &LayerNormCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let d = self.dim;
        let rows = dy.len() / d;
        let g = &vals[self.gamma.0];
        let dn = T::from_usize_lossy(d);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            {
                let gg = &mut grads[self.gamma.0];
                for i in 0..d {
                    gg[i] += dyr[i] * xh[i];
                }
            }
            {
                let gb = &mut grads[self.beta.0];
                for i in 0..d {
                    gb[i] += dyr[i];
                }
            }
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for i in 0..d {
                dxhat[i] = dyr[i] * g[i];
                m1 += dxhat[i];
                m2 += dxhat[i] * xh[i];
            }
            m1 /= dn;
            m2 /= dn;
            let is = cache.inv_std[r];
            for i in 0..d {
                dx[r * d + i] = is * (dxhat[i] - m1 - xh[i] * m2);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

fn gelu_f64(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

impl Activation {
    pub fn forward<T: Scalar>(self, z: &[T]) -> Vec<T> {
        match self {
            Activation::Relu => z
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            Activation::Gelu => z
                .iter()
                .map(|&v| T::lit(gelu_f64(v.to_f64().unwrap_or(0.0)).0))
                .collect(),
        }
    }

    /// `dz` given the pre-activation `z`.
    pub fn backward<T: Scalar>(self, z: &[T], dy: &[T]) -> Vec<T> {
        match self {
            Activation::Relu => z
                .iter()
                .zip(dy)
                .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                .collect(),
            Activation::Gelu => z
                .iter()
                .zip(dy)
                .map(|(&v, &d)| d * T::lit(gelu_f64(v.to_f64().unwrap_or(0.0)).1))
                .collect(),
        }
    }
}

/// Inverted dropout. Returns the mask (already divided by the keep
/// probability) when anything was dropped.
pub fn dropout<T: Scalar>(x: &mut [T], p: f64, rng: Option<&mut RngStream>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.unit() < p { T::zero() } else { keep })
        .collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= *m;
    }
    Some(mask)
}

pub fn dropout_backward<T: Scalar>(dy: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (d, k) in dy.iter_mut().zip(m) {
            *d *= *k;
        }
    }
}

/// Zeroes rows `t >= lengths[b]` of a `[batch, width, dim]` tensor.
pub fn mask_rows<T: Scalar>(x: &mut [T], lengths: &[usize], width: usize, dim: usize) {
    for (b, &len) in lengths.iter().enumerate() {
        for t in len.min(width)..width {
            let off = (b * width + t) * dim;
            x[off..off + dim].iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy)]
pub enum KeyMask<'a> {
    /// Key `j` of example `b` is visible iff `j < lengths[b]`.
    Padding(&'a [usize]),
    /// Key `j` is visible to query `i` iff `j <= i`.
    Causal,
}

impl KeyMask<'_> {
    fn visible(&self, b: usize, i: usize, tk: usize) -> usize {
        match self {
            KeyMask::Padding(lens) => lens[b].min(tk),
            KeyMask::Causal => (i + 1).min(tk),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

pub struct AttentionCache<T> {
    q_cache: LinearCache<T>,
    k_cache: LinearCache<T>,
    v_cache: LinearCache<T>,
    o_cache: LinearCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Softmax weights `[batch, heads, tq, tk]`, zero where masked.
    probs: Vec<T>,
    drop_mask: Option<Vec<T>>,
    visible: Vec<usize>,
    batch: usize,
    tq: usize,
    tk: usize,
}

impl MultiHeadAttention {
    /// `xq` is `[batch, tq, dim]`, `xkv` is `[batch, tk, dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        vals: &Vals<T>,
        xq: &[T],
        xkv: &[T],
        batch: usize,
        tq: usize,
        tk: usize,
        mask: KeyMask<'_>,
        attn_dropout: f64,
        rng: Option<&mut RngStream>,
    ) -> (Vec<T>, AttentionCache<T>) {
        let d = self.dim;
        let h = self.n_heads;
        let hd = d / h;
        let scale = T::one() / T::from_usize_lossy(hd).sqrt();
        let (q, q_cache) = self.q.forward(vals, xq, batch * tq);
        let (k, k_cache) = self.k.forward(vals, xkv, batch * tk);
        let (v, v_cache) = self.v.forward(vals, xkv, batch * tk);
        let mut probs = vec![T::zero(); batch * h * tq * tk];
        let mut visible = vec![0usize; batch * tq];
        for b in 0..batch {
            for i in 0..tq {
                visible[b * tq + i] = mask.visible(b, i, tk);
            }
        }
        for b in 0..batch {
            for hh in 0..h {
                for i in 0..tq {
                    let nv = visible[b * tq + i];
                    if nv == 0 {
                        continue;
                    }
                    let qi = &q[(b * tq + i) * d + hh * hd..][..hd];
                    let row = &mut probs[((b * h + hh) * tq + i) * tk..][..tk];
                    let mut mx = T::neg_infinity();
                    for j in 0..nv {
                        let kj = &k[(b * tk + j) * d + hh * hd..][..hd];
                        let s = dot(qi, kj) * scale;
                        row[j] = s;
                        if s > mx {
                            mx = s;
                        }
                    }
                    let mut sum = T::zero();
                    for p in row[..nv].iter_mut() {
                        *p = (*p - mx).exp();
                        sum += *p;
                    }
                    for p in row[..nv].iter_mut() {
                        *p /= sum;
                    }
                }
            }
        }
        let mut used = probs.clone();
        let drop_mask = dropout(&mut used, attn_dropout, rng);
        let mut ctx = vec![T::zero(); batch * tq * d];
        for b in 0..batch {
            for hh in 0..h {
                for i in 0..tq {
                    let nv = visible[b * tq + i];
                    let row = &used[((b * h + hh) * tq + i) * tk..][..tk];
                    let out = &mut ctx[(b * tq + i) * d + hh * hd..][..hd];
                    for j in 0..nv {
                        let p = row[j];
                        let vj = &v[(b * tk + j) * d + hh * hd..][..hd];
                        for (o, &x) in out.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let (y, o_cache) = self.o.forward(vals, &ctx, batch * tq);
        let cache = AttentionCache {
            q_cache,
            k_cache,
            v_cache,
            o_cache,
            q,
            k,
            v,
            probs,
            drop_mask,
            visible,
            batch,
            tq,
            tk,
        };
        (y, cache)
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward<T: Scalar>(
        &self,
        vals: &Vals<T>,
        grads: &mut Vals<T>,
        c: &AttentionCache<T>,
        dy: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let d = self.dim;
        let h = self.n_heads;
        let hd = d / h;
        let (batch, tq, tk) = (c.batch, c.tq, c.tk);
        let scale = T::one() / T::from_usize_lossy(hd).sqrt();
        let dctx = self.o.backward(vals, grads, &c.o_cache, dy, tq);
        let mut dq = vec![T::zero(); batch * tq * d];
        let mut dk = vec![T::zero(); batch * tk * d];
        let mut dv = vec![T::zero(); batch * tk * d];
        let mut dp = vec![T::zero(); tk];
        for b in 0..batch {
            for hh in 0..h {
                for i in 0..tq {
                    let nv = c.visible[b * tq + i];
                    if nv == 0 {
                        continue;
                    }
                    let base = ((b * h + hh) * tq + i) * tk;
                    let probs = &c.probs[base..base + tk];
                    let keep = c.drop_mask.as_ref().map(|m| &m[base..base + tk]);
                    let dci = &dctx[(b * tq + i) * d + hh * hd..][..hd];
                    for j in 0..nv {
                        let vj = &c.v[(b * tk + j) * d + hh * hd..][..hd];
                        let kf = keep.map_or(T::one(), |m| m[j]);
                        dp[j] = dot(dci, vj) * kf;
                        let pu = probs[j] * kf;
                        let dvj = &mut dv[(b * tk + j) * d + hh * hd..][..hd];
                        for (g, &x) in dvj.iter_mut().zip(dci) {
                            *g += pu * x;
                        }
                    }
                    let mut inner = T::zero();
                    for j in 0..nv {
                        inner += probs[j] * dp[j];
                    }
                    let qi = &c.q[(b * tq + i) * d + hh * hd..][..hd];
                    for j in 0..nv {
                        let ds = probs[j] * (dp[j] - inner) * scale;
                        let kj = &c.k[(b * tk + j) * d + hh * hd..][..hd];
                        let dqi = &mut dq[(b * tq + i) * d + hh * hd..][..hd];
                        for (g, &x) in dqi.iter_mut().zip(kj) {
                            *g += ds * x;
                        }
                        let dkj = &mut dk[(b * tk + j) * d + hh * hd..][..hd];
                        for (g, &x) in dkj.iter_mut().zip(qi) {
                            *g += ds * x;
                        }
                    }
                }
            }
        }
        let dxq = self.q.backward(vals, grads, &c.q_cache, &dq, tq);
        let mut dxkv = self.k.backward(vals, grads, &c.k_cache, &dk, tk);
        let dxv = self.v.backward(vals, grads, &c.v_cache, &dv, tk);
        for (a, b) in dxkv.iter_mut().zip(&dxv) {
            *a += *b;
        }
        (dxq, dxkv)
    }

    /// Softmax weights of the last forward, `[batch, heads, tq, tk]`.
    pub fn probabilities<T: Scalar>(cache: &AttentionCache<T>) -> &[T] {
        &cache.probs
    }

    /// One query row per example against already projected keys and values
    /// (`keys[b]`, `values[b]` are `[tk_b, dim]`, the first `visible[b]` rows
    /// used). Same arithmetic as [`MultiHeadAttention::forward`] without
    /// dropout. Returns the output projection, `[n, dim]`.
    pub fn attend<T: Scalar>(
        &self,
        vals: &Vals<T>,
        xq: &[T],
        keys: &[&[T]],
        values: &[&[T]],
        visible: &[usize],
    ) -> Vec<T> {
        let d = self.dim;
        let h = self.n_heads;
        let hd = d / h;
        let n = keys.len();
        let scale = T::one() / T::from_usize_lossy(hd).sqrt();
        let q = self.q.apply(vals, xq, n);
        let mut ctx = vec![T::zero(); n * d];
        let mut row = Vec::new();
        for b in 0..n {
            let nv = visible[b];
            for hh in 0..h {
                let qi = &q[b * d + hh * hd..][..hd];
                row.clear();
                let mut mx = T::neg_infinity();
                for j in 0..nv {
                    let s = dot(qi, &keys[b][j * d + hh * hd..][..hd]) * scale;
                    row.push(s);
                    if s > mx {
                        mx = s;
                    }
                }
                let mut sum = T::zero();
                for p in row.iter_mut() {
                    *p = (*p - mx).exp();
                    sum += *p;
                }
                for p in row.iter_mut() {
                    *p /= sum;
                }
                let out = &mut ctx[b * d + hh * hd..][..hd];
                for (j, &p) in row.iter().enumerate() {
                    for (o, &x) in out.iter_mut().zip(&values[b][j * d + hh * hd..][..hd]) {
                        *o += p * x;
                    }
                }
            }
        }
        self.o.apply(vals, &ctx, n)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Fixed sinusoidal position code: `sin` on even, `cos` on odd components,
/// frequencies `10000^(-2i/dim)`.
pub fn sinusoidal_embedding(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let i = c / 2;
            let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
            let angle = position as f64 * freq;
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Masked mean cross-entropy over rows of `logits` (`rows × vocab`).
///
/// Returns the summed loss (in `f64`), the number of counted rows and
/// `scale · ∂(summed loss)/∂logits`; rows with `valid[r] == false`
/// contribute nothing.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    targets: &[u32],
    valid: &[bool],
    vocab: usize,
    scale: Option<T>,
) -> (f64, usize, Vec<T>) {
    let rows = targets.len();
    let n = valid.iter().filter(|&&v| v).count();
    let scale = scale.unwrap_or_else(|| T::one() / T::from_usize_lossy(n.max(1)));
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0f64;
    for r in 0..rows {
        if !valid[r] {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&x| (x - mx).exp()).sum();
        let lse = mx + sum.ln();
        let t = targets[r] as usize;
        total += (lse - row[t]).to_f64().unwrap_or(f64::NAN);
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi = (x - lse).exp() * scale;
        }
        g[t] -= scale;
    }
    (total, n, grad)
}

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(logits: &[T], vocab: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(vocab) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], vocab: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(vocab) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_position_zero() {
        let e = sinusoidal_embedding(0, 8);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sinusoidal_bounded_and_distinct() {
        for dim in [2usize, 4, 16] {
            let mut seen: Vec<Vec<f64>> = Vec::new();
            for p in (0..10_000).step_by(if dim == 2 { 1 } else { 7 }) {
                let e = sinusoidal_embedding(p, dim);
                assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
                if p < 300 {
                    seen.push(e);
                }
            }
            for i in 0..seen.len() {
                for j in i + 1..seen.len() {
                    let diff: f64 = seen[i]
                        .iter()
                        .zip(&seen[j])
                        .map(|(a, b)| (a - b).abs())
                        .sum();
                    assert!(diff > 1e-9, "positions collide at dim {dim}");
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let v = 12;
        let logits = vec![0.0f64; 3 * v];
        let (loss, n, _) = cross_entropy(&logits, &[1, 2, 3], &[true, true, false], v, None);
        assert_eq!(n, 2);
        assert!((loss / n as f64 - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let v = 5;
        let mut logits = vec![-50.0f64; v];
        logits[2] = 50.0;
        let (loss, _, _) = cross_entropy(&logits, &[2], &[true], v, None);
        assert!(loss < 1e-30);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let v = 7;
        let rows = 4;
        let logits: Vec<f64> = (0..rows * v)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3)
            .collect();
        let targets = [0u32, 3, 6, 2];
        let valid = [true, true, false, true];
        let (_, n, grad) = cross_entropy(&logits, &targets, &valid, v, None);
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let lp = cross_entropy(&p, &targets, &valid, v, None).0 / n as f64;
            let lm = cross_entropy(&m, &targets, &valid, v, None).0 / n as f64;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom <= 1e-6,
                "entry {i}: {fd} vs {}",
                grad[i]
            );
        }
        for r in 0..rows {
            if !valid[r] {
                assert!(grad[r * v..(r + 1) * v].iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits: Vec<f64> = (0..40).map(|i| (i as f64).sin() * 7.0).collect();
        for row in softmax_rows(&logits, 8).chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu_f64(x + h).0 - gelu_f64(x - h).0) / (2.0 * h);
            assert!((fd - gelu_f64(x).1).abs() < 1e-8);
        }
    }
}
