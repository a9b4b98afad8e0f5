//! Neural-net primitives with hand-written backward passes: linear layers,
//! layer norm, activations, rotary position encoding over the (physical
//! timestep, discretized noise level) pair, and masked multi-head attention.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::params::{GradBuffer, Init, ParamBuilder, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-6;

/// y = x . w + b, with x of shape (n, din).
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder<'_, impl Rng>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Self {
        Linear {
            w: pb.add(format!("{name}.w"), &[din, dout], init),
            b: pb.add(format!("{name}.b"), &[dout], Init::Zero),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&ps.view2(self.w));
        y += &ps.view1(self.b);
        y
    }

    /// Accumulates dW and db, returns dx.
    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        g: &mut GradBuffer,
    ) -> Array2<f64> {
        {
            let dw = x.t().dot(dy);
            let mut gw = g.view2_mut(self.w);
            gw += &dw;
        }
        {
            let db = dy.sum_axis(Axis(0));
            let mut gb = g.view1_mut(self.b);
            gb += &db;
        }
        dy.dot(&ps.view2(self.w).t())
    }
}

/// Per-row layer normalization; affine parameters optional (adaptive
/// normalization supplies shift/scale externally when absent).
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
}

pub struct LayerNormCache {
    /// Normalized activations (before affine).
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl LayerNorm {
    /// Affine LN starting as the identity: gamma is stored as an offset
    /// from 1, so zero-initialized parameters mean "no rescaling".
    pub fn affine(pb: &mut ParamBuilder<'_, impl Rng>, name: &str, dim: usize) -> Self {
        let gamma = pb.add(format!("{name}.gamma"), &[dim], Init::Zero);
        let beta = pb.add(format!("{name}.beta"), &[dim], Init::Zero);
        LayerNorm {
            gamma: Some(gamma),
            beta: Some(beta),
        }
    }

    pub fn plain() -> Self {
        LayerNorm {
            gamma: None,
            beta: None,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (n, d) = x.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[[i, j]] = (x[[i, j]] - mean) * is;
            }
        }
        let mut y = xhat.clone();
        if let (Some(gid), Some(bid)) = (self.gamma, self.beta) {
            let gamma = ps.view1(gid);
            let beta = ps.view1(bid);
            for i in 0..n {
                for j in 0..d {
                    y[[i, j]] = xhat[[i, j]] * (1.0 + gamma[j]) + beta[j];
                }
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        g: &mut GradBuffer,
    ) -> Array2<f64> {
        let (n, d) = dy.dim();
        let mut dxhat = dy.clone();
        if let (Some(gid), Some(bid)) = (self.gamma, self.beta) {
            {
                let mut gg = g.view1_mut(gid);
                for i in 0..n {
                    for j in 0..d {
                        gg[j] += dy[[i, j]] * cache.xhat[[i, j]];
                    }
                }
            }
            {
                let mut gb = g.view1_mut(bid);
                for i in 0..n {
                    for j in 0..d {
                        gb[j] += dy[[i, j]];
                    }
                }
            }
            let gamma = ps.view1(gid);
            for i in 0..n {
                for j in 0..d {
                    dxhat[[i, j]] = dy[[i, j]] * (1.0 + gamma[j]);
                }
            }
        }
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..d {
                mean_dxhat += dxhat[[i, j]];
                mean_dxhat_xhat += dxhat[[i, j]] * cache.xhat[[i, j]];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            for j in 0..d {
                dx[[i, j]] = cache.inv_std[i]
                    * (dxhat[[i, j]] - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_arr(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(silu)
}

pub fn silu_bwd(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| *d *= silu_deriv(v));
    dx
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_arr(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

pub fn gelu_bwd(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| *d *= gelu_deriv(v));
    dx
}

/// Rotary encoding over two integer position axes. The head dimension is
/// split in half: the first half rotates with the physical-timestep index,
/// the second with the discretized noise index.
#[derive(Clone, Debug)]
pub struct Rope {
    half_pairs: usize,
    inv_freq: Vec<f64>,
}

impl Rope {
    /// `head_dim` must be divisible by 4 (two axes of rotation pairs).
    pub fn new(head_dim: usize) -> Self {
        assert!(head_dim % 4 == 0, "head dim must be divisible by 4");
        let half = head_dim / 2;
        let pairs = half / 2;
        let inv_freq = (0..pairs)
            .map(|j| 10000f64.powf(-2.0 * j as f64 / half as f64))
            .collect();
        Rope {
            half_pairs: pairs,
            inv_freq,
        }
    }

    /// Rotates one head's rows in place. `pos_t` and `pos_n` give each row's
    /// timestep and noise-grid index.
    pub fn apply(&self, x: &mut Array2<f64>, pos_t: &[usize], pos_n: &[usize]) {
        self.rotate(x, pos_t, pos_n, 1.0);
    }

    /// Transposed rotation (used for gradients).
    pub fn apply_inverse(&self, x: &mut Array2<f64>, pos_t: &[usize], pos_n: &[usize]) {
        self.rotate(x, pos_t, pos_n, -1.0);
    }

    fn rotate(&self, x: &mut Array2<f64>, pos_t: &[usize], pos_n: &[usize], sign: f64) {
        let n = x.dim().0;
        let half = self.half_pairs * 2;
        for i in 0..n {
            for (axis, pos) in [(0usize, pos_t[i] as f64), (1usize, pos_n[i] as f64)] {
                let base = axis * half;
                for j in 0..self.half_pairs {
                    let theta = sign * pos * self.inv_freq[j];
                    let (sin, cos) = theta.sin_cos();
                    let a = x[[i, base + 2 * j]];
                    let b = x[[i, base + 2 * j + 1]];
                    x[[i, base + 2 * j]] = a * cos - b * sin;
                    x[[i, base + 2 * j + 1]] = a * sin + b * cos;
                }
            }
        }
    }
}

/// Row-wise masked softmax. Rows with no unmasked key become all zero.
fn masked_softmax_rows(scores: &mut Array2<f64>, key_mask: &[bool]) {
    let (nq, nk) = scores.dim();
    for i in 0..nq {
        let mut max = f64::NEG_INFINITY;
        for j in 0..nk {
            if key_mask[j] && scores[[i, j]] > max {
                max = scores[[i, j]];
            }
        }
        if max == f64::NEG_INFINITY {
            for j in 0..nk {
                scores[[i, j]] = 0.0;
            }
            continue;
        }
        let mut sum = 0.0;
        for j in 0..nk {
            if key_mask[j] {
                let e = (scores[[i, j]] - max).exp();
                scores[[i, j]] = e;
                sum += e;
            } else {
                scores[[i, j]] = 0.0;
            }
        }
        for j in 0..nk {
            scores[[i, j]] /= sum;
        }
    }
}

/// d(scores) given softmax weights and d(weights):
/// `dscore = w * (dw - sum_j(dw_j * w_j))` per row.
fn softmax_backward_rows(weights: &Array2<f64>, dweights: &Array2<f64>) -> Array2<f64> {
    let (nq, nk) = weights.dim();
    let mut out = Array2::zeros((nq, nk));
    for i in 0..nq {
        let dot: f64 = (0..nk).map(|j| dweights[[i, j]] * weights[[i, j]]).sum();
        for j in 0..nk {
            out[[i, j]] = weights[[i, j]] * (dweights[[i, j]] - dot);
        }
    }
    out
}

/// Multi-head attention over already-projected q/k/v matrices of shape
/// (n, H). Rotary encoding is applied per head when positions are given.
pub struct AttnCore {
    pub heads: usize,
}

pub struct AttnCoreCache {
    /// Per head: rotated q, rotated k, v, softmax weights.
    pub per_head: Vec<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)>,
}

pub struct RopeArgs<'a> {
    pub rope: &'a Rope,
    pub q_pos_t: &'a [usize],
    pub q_pos_n: &'a [usize],
    pub k_pos_t: &'a [usize],
    pub k_pos_n: &'a [usize],
}

impl AttnCore {
    /// Returns the attention output (n_q, H) plus the cache.
    pub fn forward(
        &self,
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
        key_mask: &[bool],
        rope: Option<&RopeArgs<'_>>,
    ) -> (Array2<f64>, AttnCoreCache) {
        let (nq, h) = q.dim();
        let nk = k.dim().0;
        let dh = h / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((nq, h));
        let mut per_head = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let cols = hd * dh..(hd + 1) * dh;
            let mut qh = q.slice(ndarray::s![.., cols.clone()]).to_owned();
            let mut kh = k.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = v.slice(ndarray::s![.., cols.clone()]).to_owned();
            if let Some(r) = rope {
                r.rope.apply(&mut qh, r.q_pos_t, r.q_pos_n);
                r.rope.apply(&mut kh, r.k_pos_t, r.k_pos_n);
            }
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            masked_softmax_rows(&mut scores, key_mask);
            let oh = scores.dot(&vh);
            out.slice_mut(ndarray::s![.., cols]).assign(&oh);
            per_head.push((qh, kh, vh, scores));
            let _ = nk;
        }
        (out, AttnCoreCache { per_head })
    }

    /// Returns (dq, dk, dv) in the pre-rotation basis.
    pub fn backward(
        &self,
        cache: &AttnCoreCache,
        dout: &Array2<f64>,
        rope: Option<&RopeArgs<'_>>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (nq, h) = dout.dim();
        let dh = h / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nk = cache.per_head[0].1.dim().0;
        let mut dq = Array2::zeros((nq, h));
        let mut dk = Array2::zeros((nk, h));
        let mut dv = Array2::zeros((nk, h));
        for hd in 0..self.heads {
            let cols = hd * dh..(hd + 1) * dh;
            let (qh, kh, vh, weights) = &cache.per_head[hd];
            let doh = dout.slice(ndarray::s![.., cols.clone()]).to_owned();
            let dweights = doh.dot(&vh.t());
            let dvh = weights.t().dot(&doh);
            let mut dscores = softmax_backward_rows(weights, &dweights);
            dscores *= scale;
            let mut dqh = dscores.dot(kh);
            let mut dkh = dscores.t().dot(qh);
            if let Some(r) = rope {
                r.rope.apply_inverse(&mut dqh, r.q_pos_t, r.q_pos_n);
                r.rope.apply_inverse(&mut dkh, r.k_pos_t, r.k_pos_n);
            }
            dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&dqh);
            dk.slice_mut(ndarray::s![.., cols.clone()]).assign(&dkh);
            dv.slice_mut(ndarray::s![.., cols]).assign(&dvh);
        }
        (dq, dk, dv)
    }
}
