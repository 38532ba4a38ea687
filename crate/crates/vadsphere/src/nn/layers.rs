//! Forward/backward primitives for the pooling network.
//!
//! Every function here is pure: forward passes return the output plus
//! whatever intermediate values the matching backward pass needs, and
//! backward passes return freshly allocated gradients. Weight matrices are
//! stored input-major (`[in, out]`, so `y_j = b_j + sum_i x_i * W[i, j]`);
//! convolution kernels are `[out_ch, in_ch, tap]`.

use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Variance guard inside the attentive-statistics standard deviation.
pub const ATT_STD_EPS: f64 = 1e-9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

#[inline]
pub fn mish_grad(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

// ---------------------------------------------------------------------------
// Layer normalization over the trailing feature axis of a [B, T, D] tensor.

pub struct LayerNormCache {
    /// 1 / sqrt(var + eps) per (b, t) frame.
    inv_std: Vec<f64>,
    /// Standardized activations before gain/bias.
    normed: Tensor,
}

pub fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LayerNormCache) {
    let [b, t, d] = shape3(x);
    debug_assert_eq!(gain.len(), d);
    debug_assert_eq!(bias.len(), d);
    let mut out = Tensor::zeros_like(x);
    let mut normed = Tensor::zeros_like(x);
    let mut inv_std = Vec::with_capacity(b * t);
    for bi in 0..b {
        for ti in 0..t {
            let frame = x.frame(bi, ti);
            let mean = frame.iter().sum::<f64>() / d as f64;
            let var = frame.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let base = x.at3(bi, ti, 0);
            for di in 0..d {
                let n = (frame[di] - mean) * inv;
                normed.data_mut()[base + di] = n;
                out.data_mut()[base + di] = gain.data()[di] * n + bias.data()[di];
            }
        }
    }
    (out, LayerNormCache { inv_std, normed })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, t, d] = shape3(dy);
    let mut dx = Tensor::zeros_like(dy);
    let mut dgain = Tensor::zeros_like(gain);
    let mut dbias = Tensor::zeros_like(gain);
    for bi in 0..b {
        for ti in 0..t {
            let base = dy.at3(bi, ti, 0);
            let inv = cache.inv_std[bi * t + ti];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for di in 0..d {
                let g = dy.data()[base + di];
                let n = cache.normed.data()[base + di];
                dgain.data_mut()[di] += g * n;
                dbias.data_mut()[di] += g;
                let dxhat = g * gain.data()[di];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * n;
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            for di in 0..d {
                let dxhat = dy.data()[base + di] * gain.data()[di];
                let n = cache.normed.data()[base + di];
                dx.data_mut()[base + di] = inv * (dxhat - mean_dxhat - n * mean_dxhat_xhat);
            }
        }
    }
    (dx, dgain, dbias)
}

// ---------------------------------------------------------------------------
// Frame-wise affine maps.

/// `[B, T, I] x [I, J] + [J] -> [B, T, J]`.
pub fn linear3_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [bs, t, i_dim] = shape3(x);
    let j_dim = w.shape()[1];
    debug_assert_eq!(w.shape()[0], i_dim);
    debug_assert_eq!(b.len(), j_dim);
    let mut out = Tensor::zeros(&[bs, t, j_dim]);
    for bi in 0..bs {
        for ti in 0..t {
            let frame = x.frame(bi, ti);
            let out_frame = out.frame_mut(bi, ti);
            out_frame.copy_from_slice(b.data());
            for (ii, &xv) in frame.iter().enumerate() {
                let wrow = &w.data()[ii * j_dim..(ii + 1) * j_dim];
                for (o, &wv) in out_frame.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

pub fn linear3_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [bs, t, i_dim] = shape3(x);
    let j_dim = w.shape()[1];
    let mut dx = Tensor::zeros_like(x);
    let mut dw = Tensor::zeros_like(w);
    let mut db = Tensor::zeros(&[j_dim]);
    for bi in 0..bs {
        for ti in 0..t {
            let frame = x.frame(bi, ti);
            let dy_frame = dy.frame(bi, ti);
            for (acc, &g) in db.data_mut().iter_mut().zip(dy_frame) {
                *acc += g;
            }
            let dx_frame = dx.frame_mut(bi, ti);
            for ii in 0..i_dim {
                let wrow = &w.data()[ii * j_dim..(ii + 1) * j_dim];
                let dwrow = &mut dw.data_mut()[ii * j_dim..(ii + 1) * j_dim];
                let xv = frame[ii];
                let mut acc = 0.0;
                for jj in 0..j_dim {
                    let g = dy_frame[jj];
                    acc += wrow[jj] * g;
                    dwrow[jj] += xv * g;
                }
                dx_frame[ii] = acc;
            }
        }
    }
    (dx, dw, db)
}

/// `[B, I] x [I, J] + [J] -> [B, J]`.
pub fn linear2_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (bs, i_dim) = (x.shape()[0], x.shape()[1]);
    let j_dim = w.shape()[1];
    debug_assert_eq!(w.shape()[0], i_dim);
    let mut out = Tensor::zeros(&[bs, j_dim]);
    for bi in 0..bs {
        let row = x.row2(bi);
        let base = bi * j_dim;
        out.data_mut()[base..base + j_dim].copy_from_slice(b.data());
        for (ii, &xv) in row.iter().enumerate() {
            let wrow = &w.data()[ii * j_dim..(ii + 1) * j_dim];
            for jj in 0..j_dim {
                out.data_mut()[base + jj] += xv * wrow[jj];
            }
        }
    }
    out
}

pub fn linear2_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bs, i_dim) = (x.shape()[0], x.shape()[1]);
    let j_dim = w.shape()[1];
    let mut dx = Tensor::zeros_like(x);
    let mut dw = Tensor::zeros_like(w);
    let mut db = Tensor::zeros(&[j_dim]);
    for bi in 0..bs {
        let row = x.row2(bi);
        let dy_row = dy.row2(bi);
        for (acc, &g) in db.data_mut().iter_mut().zip(dy_row) {
            *acc += g;
        }
        for ii in 0..i_dim {
            let wrow = &w.data()[ii * j_dim..(ii + 1) * j_dim];
            let dwrow = &mut dw.data_mut()[ii * j_dim..(ii + 1) * j_dim];
            let mut acc = 0.0;
            for jj in 0..j_dim {
                let g = dy_row[jj];
                acc += wrow[jj] * g;
                dwrow[jj] += row[ii] * g;
            }
            dx.data_mut()[bi * i_dim + ii] = acc;
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Mish applied elementwise; backward needs the pre-activation values.

pub fn mish_forward(pre: &Tensor) -> Tensor {
    let mut out = pre.clone();
    out.data_mut().iter_mut().for_each(|v| *v = mish(*v));
    out
}

pub fn mish_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &p) in dx.data_mut().iter_mut().zip(pre.data()) {
        *g *= mish_grad(p);
    }
    dx
}

// ---------------------------------------------------------------------------
// Temporal convolution, same-padded with zeros, channels last.

/// `x [B, T, C_in]`, `w [C_out, C_in, K]` (K odd), `b [C_out]` -> `[B, T, C_out]`.
pub fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [bs, t, c_in] = shape3(x);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    debug_assert_eq!(w.shape()[1], c_in);
    debug_assert_eq!(k % 2, 1);
    let pad = k / 2;
    let mut out = Tensor::zeros(&[bs, t, c_out]);
    for bi in 0..bs {
        for ti in 0..t {
            let out_frame = out.frame_mut(bi, ti);
            out_frame.copy_from_slice(b.data());
            for tau in 0..k {
                let src = ti as isize + tau as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let frame = x.frame(bi, src as usize);
                for (oc, o) in out_frame.iter_mut().enumerate() {
                    let wbase = (oc * c_in) * k + tau;
                    let mut acc = 0.0;
                    for (ic, &xv) in frame.iter().enumerate() {
                        acc += xv * w.data()[wbase + ic * k];
                    }
                    *o += acc;
                }
            }
        }
    }
    out
}

pub fn conv1d_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [bs, t, c_in] = shape3(x);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let pad = k / 2;
    let mut dx = Tensor::zeros_like(x);
    let mut dw = Tensor::zeros_like(w);
    let mut db = Tensor::zeros(&[c_out]);
    for bi in 0..bs {
        for ti in 0..t {
            let dy_frame = dy.frame(bi, ti);
            for (acc, &g) in db.data_mut().iter_mut().zip(dy_frame) {
                *acc += g;
            }
            for tau in 0..k {
                let src = ti as isize + tau as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let frame = x.frame(bi, src);
                for (oc, &g) in dy_frame.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let wbase = (oc * c_in) * k + tau;
                    let dx_frame_base = dx.at3(bi, src, 0);
                    for ic in 0..c_in {
                        dw.data_mut()[wbase + ic * k] += frame[ic] * g;
                        dx.data_mut()[dx_frame_base + ic] += w.data()[wbase + ic * k] * g;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Gated linear unit over a doubled channel axis.

/// `pre [B, T, 2H] -> [B, T, H]`: first half gated by the sigmoid of the second.
pub fn glu_forward(pre: &Tensor) -> Tensor {
    let [bs, t, twoh] = shape3(pre);
    let h = twoh / 2;
    let mut out = Tensor::zeros(&[bs, t, h]);
    for bi in 0..bs {
        for ti in 0..t {
            let frame = pre.frame(bi, ti);
            let out_frame = out.frame_mut(bi, ti);
            for hi in 0..h {
                out_frame[hi] = frame[hi] * sigmoid(frame[h + hi]);
            }
        }
    }
    out
}

pub fn glu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let [bs, t, twoh] = shape3(pre);
    let h = twoh / 2;
    let mut dpre = Tensor::zeros_like(pre);
    for bi in 0..bs {
        for ti in 0..t {
            let frame = pre.frame(bi, ti);
            let dy_frame = dy.frame(bi, ti);
            let dpre_frame = dpre.frame_mut(bi, ti);
            for hi in 0..h {
                let s = sigmoid(frame[h + hi]);
                dpre_frame[hi] = dy_frame[hi] * s;
                dpre_frame[h + hi] = dy_frame[hi] * frame[hi] * s * (1.0 - s);
            }
        }
    }
    dpre
}

// ---------------------------------------------------------------------------
// Multi-head self-attention with a residual connection.

pub struct MhsaParams<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
}

pub struct MhsaGrads {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

pub struct MhsaCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Softmaxed attention, `[B, heads, T, T]` row-major.
    pub attn: Tensor,
    /// Concatenated per-head context before the output projection.
    context: Tensor,
}

pub fn mhsa_forward(x: &Tensor, p: &MhsaParams, n_heads: usize) -> (Tensor, MhsaCache) {
    let [bs, t, h] = shape3(x);
    debug_assert_eq!(h % n_heads, 0);
    let dh = h / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear3_forward(x, p.wq, p.bq);
    let k = linear3_forward(x, p.wk, p.bk);
    let v = linear3_forward(x, p.wv, p.bv);
    let mut attn = Tensor::zeros(&[bs, n_heads, t, t]);
    let mut context = Tensor::zeros(&[bs, t, h]);

    for bi in 0..bs {
        for head in 0..n_heads {
            let off = head * dh;
            for ti in 0..t {
                let attn_base = ((bi * n_heads + head) * t + ti) * t;
                let q_row = &q.frame(bi, ti)[off..off + dh];
                let mut max_score = f64::NEG_INFINITY;
                for tj in 0..t {
                    let k_row = &k.frame(bi, tj)[off..off + dh];
                    let score: f64 =
                        q_row.iter().zip(k_row).map(|(&a, &b)| a * b).sum::<f64>() * scale;
                    attn.data_mut()[attn_base + tj] = score;
                    max_score = max_score.max(score);
                }
                let mut sum = 0.0;
                for tj in 0..t {
                    let e = (attn.data()[attn_base + tj] - max_score).exp();
                    attn.data_mut()[attn_base + tj] = e;
                    sum += e;
                }
                for tj in 0..t {
                    attn.data_mut()[attn_base + tj] /= sum;
                }
                let ctx_base = context.at3(bi, ti, off);
                for tj in 0..t {
                    let a = attn.data()[attn_base + tj];
                    let v_row = &v.frame(bi, tj)[off..off + dh];
                    for di in 0..dh {
                        context.data_mut()[ctx_base + di] += a * v_row[di];
                    }
                }
            }
        }
    }

    let mut out = linear3_forward(&context, p.wo, p.bo);
    for (o, &xi) in out.data_mut().iter_mut().zip(x.data()) {
        *o += xi;
    }
    (out, MhsaCache { q, k, v, attn, context })
}

pub fn mhsa_backward(
    x: &Tensor,
    p: &MhsaParams,
    cache: &MhsaCache,
    dy: &Tensor,
    n_heads: usize,
) -> (Tensor, MhsaGrads) {
    let [bs, t, h] = shape3(x);
    let dh = h / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (dcontext, dwo, dbo) = linear3_backward(&cache.context, p.wo, dy);

    let mut dq = Tensor::zeros(&[bs, t, h]);
    let mut dk = Tensor::zeros(&[bs, t, h]);
    let mut dv = Tensor::zeros(&[bs, t, h]);
    for bi in 0..bs {
        for head in 0..n_heads {
            let off = head * dh;
            for ti in 0..t {
                let attn_base = ((bi * n_heads + head) * t + ti) * t;
                let dctx_row = &dcontext.frame(bi, ti)[off..off + dh];

                // dA and dV from context = A * V.
                let mut dattn = vec![0.0; t];
                for tj in 0..t {
                    let a = cache.attn.data()[attn_base + tj];
                    let v_row = &cache.v.frame(bi, tj)[off..off + dh];
                    let mut acc = 0.0;
                    let dv_base = dv.at3(bi, tj, off);
                    for di in 0..dh {
                        acc += dctx_row[di] * v_row[di];
                        dv.data_mut()[dv_base + di] += a * dctx_row[di];
                    }
                    dattn[tj] = acc;
                }

                // Softmax backward over the row.
                let mut dot = 0.0;
                for tj in 0..t {
                    dot += cache.attn.data()[attn_base + tj] * dattn[tj];
                }
                for tj in 0..t {
                    let a = cache.attn.data()[attn_base + tj];
                    let dscore = a * (dattn[tj] - dot) * scale;
                    let q_row = &cache.q.frame(bi, ti)[off..off + dh];
                    let k_row = &cache.k.frame(bi, tj)[off..off + dh];
                    let dq_base = dq.at3(bi, ti, off);
                    let dk_base = dk.at3(bi, tj, off);
                    for di in 0..dh {
                        dq.data_mut()[dq_base + di] += dscore * k_row[di];
                        dk.data_mut()[dk_base + di] += dscore * q_row[di];
                    }
                }
            }
        }
    }

    let (dx_q, dwq, dbq) = linear3_backward(x, p.wq, &dq);
    let (dx_k, dwk, dbk) = linear3_backward(x, p.wk, &dk);
    let (dx_v, dwv, dbv) = linear3_backward(x, p.wv, &dv);

    let mut dx = dx_q;
    dx.add_scaled(&dx_k, 1.0).expect("same shape");
    dx.add_scaled(&dx_v, 1.0).expect("same shape");
    dx.add_scaled(dy, 1.0).expect("residual shape");

    (
        dx,
        MhsaGrads {
            wq: dwq,
            bq: dbq,
            wk: dwk,
            bk: dbk,
            wv: dwv,
            bv: dbv,
            wo: dwo,
            bo: dbo,
        },
    )
}

// ---------------------------------------------------------------------------
// Pooling.

/// Arithmetic mean over the time axis: `[B, T, H] -> [B, H]`.
pub fn avg_pool_forward(x: &Tensor) -> Tensor {
    let [bs, t, h] = shape3(x);
    let mut out = Tensor::zeros(&[bs, h]);
    for bi in 0..bs {
        for ti in 0..t {
            let frame = x.frame(bi, ti);
            let base = bi * h;
            for hi in 0..h {
                out.data_mut()[base + hi] += frame[hi];
            }
        }
    }
    out.scale(1.0 / t as f64);
    out
}

pub fn avg_pool_backward(t_len: usize, dy: &Tensor) -> Tensor {
    let (bs, h) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = Tensor::zeros(&[bs, t_len, h]);
    let inv = 1.0 / t_len as f64;
    for bi in 0..bs {
        let dy_row = dy.row2(bi);
        for ti in 0..t_len {
            let frame = dx.frame_mut(bi, ti);
            for hi in 0..h {
                frame[hi] = dy_row[hi] * inv;
            }
        }
    }
    dx
}

pub struct AttStatsParams<'a> {
    pub score_w1: &'a Tensor,
    pub score_b1: &'a Tensor,
    pub score_w2: &'a Tensor,
    pub score_b2: &'a Tensor,
    pub proj_w: &'a Tensor,
    pub proj_b: &'a Tensor,
}

pub struct AttStatsGrads {
    pub score_w1: Tensor,
    pub score_b1: Tensor,
    pub score_w2: Tensor,
    pub score_b2: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

pub struct AttStatsCache {
    hidden: Tensor,
    /// Softmaxed frame weights, `[B, T]`.
    pub alpha: Tensor,
    mean: Tensor,
    sq_mean: Tensor,
    std: Tensor,
    concat: Tensor,
}

/// Attention-weighted mean and standard deviation over frames, projected
/// back to the hidden width: `[B, T, H] -> [B, H]`.
pub fn attentive_stats_forward(x: &Tensor, p: &AttStatsParams) -> (Tensor, AttStatsCache) {
    let [bs, t, h] = shape3(x);
    let hidden_pre = linear3_forward(x, p.score_w1, p.score_b1);
    let mut hidden = hidden_pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = v.tanh());

    let mut alpha = Tensor::zeros(&[bs, t]);
    for bi in 0..bs {
        let mut max_score = f64::NEG_INFINITY;
        for ti in 0..t {
            let frame = hidden.frame(bi, ti);
            let score = frame
                .iter()
                .zip(p.score_w2.data())
                .map(|(&a, &b)| a * b)
                .sum::<f64>()
                + p.score_b2.data()[0];
            alpha.data_mut()[bi * t + ti] = score;
            max_score = max_score.max(score);
        }
        let mut sum = 0.0;
        for ti in 0..t {
            let e = (alpha.data()[bi * t + ti] - max_score).exp();
            alpha.data_mut()[bi * t + ti] = e;
            sum += e;
        }
        for ti in 0..t {
            alpha.data_mut()[bi * t + ti] /= sum;
        }
    }

    let mut mean = Tensor::zeros(&[bs, h]);
    let mut sq_mean = Tensor::zeros(&[bs, h]);
    for bi in 0..bs {
        for ti in 0..t {
            let a = alpha.data()[bi * t + ti];
            let frame = x.frame(bi, ti);
            for hi in 0..h {
                mean.data_mut()[bi * h + hi] += a * frame[hi];
                sq_mean.data_mut()[bi * h + hi] += a * frame[hi] * frame[hi];
            }
        }
    }
    let mut std = Tensor::zeros(&[bs, h]);
    let mut concat = Tensor::zeros(&[bs, 2 * h]);
    for bi in 0..bs {
        for hi in 0..h {
            let m = mean.data()[bi * h + hi];
            let var = (sq_mean.data()[bi * h + hi] - m * m).max(0.0);
            let s = (var + ATT_STD_EPS).sqrt();
            std.data_mut()[bi * h + hi] = s;
            concat.data_mut()[bi * 2 * h + hi] = m;
            concat.data_mut()[bi * 2 * h + h + hi] = s;
        }
    }

    let out = linear2_forward(&concat, p.proj_w, p.proj_b);
    (
        out,
        AttStatsCache {
            hidden,
            alpha,
            mean,
            sq_mean,
            std,
            concat,
        },
    )
}

pub fn attentive_stats_backward(
    x: &Tensor,
    p: &AttStatsParams,
    cache: &AttStatsCache,
    dy: &Tensor,
) -> (Tensor, AttStatsGrads) {
    let [bs, t, h] = shape3(x);
    let (dconcat, dproj_w, dproj_b) = linear2_backward(&cache.concat, p.proj_w, dy);

    let mut dx = Tensor::zeros_like(x);
    let mut dalpha = Tensor::zeros(&[bs, t]);
    let mut dhidden = Tensor::zeros(&[bs, t, h]);
    let mut dscore_w2 = Tensor::zeros_like(p.score_w2);
    let mut dscore_b2 = Tensor::zeros_like(p.score_b2);

    for bi in 0..bs {
        // Through the concat into mean / squared-mean space.
        let mut dmean = vec![0.0; h];
        let mut dsq = vec![0.0; h];
        for hi in 0..h {
            let dm = dconcat.data()[bi * 2 * h + hi];
            let ds = dconcat.data()[bi * 2 * h + h + hi];
            let m = cache.mean.data()[bi * h + hi];
            let s = cache.std.data()[bi * h + hi];
            let var = cache.sq_mean.data()[bi * h + hi] - m * m;
            // The max(0) clamp zeroes the variance path on the boundary.
            let dvar = if var > 0.0 { ds * 0.5 / s } else { 0.0 };
            dmean[hi] = dm - 2.0 * m * dvar;
            dsq[hi] = dvar;
        }
        for ti in 0..t {
            let a = cache.alpha.data()[bi * t + ti];
            let frame = x.frame(bi, ti);
            let mut da = 0.0;
            let dx_base = dx.at3(bi, ti, 0);
            for hi in 0..h {
                da += dmean[hi] * frame[hi] + dsq[hi] * frame[hi] * frame[hi];
                dx.data_mut()[dx_base + hi] +=
                    a * (dmean[hi] + 2.0 * frame[hi] * dsq[hi]);
            }
            dalpha.data_mut()[bi * t + ti] = da;
        }

        // Softmax backward over the frame axis.
        let mut dot = 0.0;
        for ti in 0..t {
            dot += cache.alpha.data()[bi * t + ti] * dalpha.data()[bi * t + ti];
        }
        for ti in 0..t {
            let a = cache.alpha.data()[bi * t + ti];
            let dscore = a * (dalpha.data()[bi * t + ti] - dot);
            dscore_b2.data_mut()[0] += dscore;
            let hidden_frame = cache.hidden.frame(bi, ti);
            let dh_frame = dhidden.frame_mut(bi, ti);
            for hi in 0..h {
                dscore_w2.data_mut()[hi] += dscore * hidden_frame[hi];
                // tanh backward folded in.
                dh_frame[hi] =
                    dscore * p.score_w2.data()[hi] * (1.0 - hidden_frame[hi] * hidden_frame[hi]);
            }
        }
    }

    let (dx_score, dscore_w1, dscore_b1) = linear3_backward(x, p.score_w1, &dhidden);
    dx.add_scaled(&dx_score, 1.0).expect("same shape");

    (
        dx,
        AttStatsGrads {
            score_w1: dscore_w1,
            score_b1: dscore_b1,
            score_w2: dscore_w2,
            score_b2: dscore_b2,
            proj_w: dproj_w,
            proj_b: dproj_b,
        },
    )
}

#[inline]
fn shape3(x: &Tensor) -> [usize; 3] {
    let s = x.shape();
    debug_assert_eq!(s.len(), 3, "expected rank-3 tensor, got {s:?}");
    [s[0], s[1], s[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::from_vec(&[1, 1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let gain = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
        let bias = Tensor::zeros(&[3]);
        let (y, _) = layer_norm_forward(&x, &gain, &bias);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_vec(&[1, 1, 2], vec![1.0, -1.0]).unwrap();
        let gain = Tensor::from_vec(&[2], vec![1.0; 2]).unwrap();
        let bias = Tensor::zeros(&[2]);
        let (y, _) = layer_norm_forward(&x, &gain, &bias);
        assert_close(y.data()[0], 0.9999950000374997, 1e-15);
        assert_close(y.data()[1], -0.9999950000374997, 1e-15);
    }

    #[test]
    fn mish_fixes_zero() {
        assert_eq!(mish(0.0), 0.0);
        // Large inputs behave like the identity, large negatives like zero.
        assert_close(mish(20.0), 20.0, 1e-6);
        assert_close(mish(-20.0), 0.0, 1e-6);
    }

    #[test]
    fn conv_center_tap_only_for_single_frame() {
        // T=1 with k=5: only the center tap can touch data.
        let x = Tensor::from_vec(&[1, 1, 1], vec![0.7]).unwrap();
        let mut w = Tensor::zeros(&[2, 1, 5]);
        // value channel weight 0.3, gate channel weight -0.2, at the center tap.
        w.data_mut()[2] = 0.3;
        w.data_mut()[5 + 2] = -0.2;
        // Off-center taps must not contribute.
        w.data_mut()[0] = 99.0;
        w.data_mut()[4] = -99.0;
        let b = Tensor::from_vec(&[2], vec![0.1, 0.05]).unwrap();
        let y = conv1d_forward(&x, &w, &b);
        assert_close(y.data()[0], 0.31, 1e-12);
        assert_close(y.data()[1], -0.09, 1e-12);

        let glu = glu_forward(&y);
        assert_close(glu.data()[0], 0.14802970431454196, 1e-12);
    }

    #[test]
    fn zeroed_conv_glu_is_identity_under_residual() {
        let x = Tensor::from_vec(&[1, 3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let w = Tensor::zeros(&[4, 2, 3]);
        let b = Tensor::zeros(&[4]);
        let pre = conv1d_forward(&x, &w, &b);
        let gated = glu_forward(&pre);
        assert!(gated.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let h = 6;
        let rand_t = |shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
            let len: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let wq = rand_t(&[h, h], &mut rng);
        let bq = rand_t(&[h], &mut rng);
        let wk = rand_t(&[h, h], &mut rng);
        let bk = rand_t(&[h], &mut rng);
        let wv = rand_t(&[h, h], &mut rng);
        let bv = rand_t(&[h], &mut rng);
        let wo = rand_t(&[h, h], &mut rng);
        let bo = rand_t(&[h], &mut rng);
        let params = MhsaParams {
            wq: &wq,
            bq: &bq,
            wk: &wk,
            bk: &bk,
            wv: &wv,
            bv: &bv,
            wo: &wo,
            bo: &bo,
        };
        let x = rand_t(&[2, 4, h], &mut rng);
        let (_, cache) = mhsa_forward(&x, &params, 2);
        for row in 0..2 * 2 * 4 {
            let sum: f64 = cache.attn.data()[row * 4..(row + 1) * 4].iter().sum();
            assert_close(sum, 1.0, 1e-9);
        }
    }

    #[test]
    fn single_frame_attention_is_projected_value_plus_residual() {
        let h = 4;
        let eye = |n: usize| {
            let mut t = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let idx = t.at2(i, i);
                t.data_mut()[idx] = 1.0;
            }
            t
        };
        let zero_b = Tensor::zeros(&[h]);
        let wq = eye(h);
        let wk = eye(h);
        let wv = eye(h);
        let wo = eye(h);
        let params = MhsaParams {
            wq: &wq,
            bq: &zero_b,
            wk: &wk,
            bk: &zero_b,
            wv: &wv,
            bv: &zero_b,
            wo: &wo,
            bo: &zero_b,
        };
        let x = Tensor::from_vec(&[1, 1, h], vec![0.2, -0.4, 0.6, -0.8]).unwrap();
        let (y, cache) = mhsa_forward(&x, &params, 2);
        assert_eq!(cache.attn.data(), &[1.0, 1.0]);
        for (got, &want) in y.data().iter().zip(x.data()) {
            assert_close(*got, 2.0 * want, 1e-12); // identity projection of v, plus residual
        }
    }

    #[test]
    fn uniform_scores_attend_to_the_mean() {
        // Zero query/key weights make every score 0 -> uniform attention.
        let h = 2;
        let zeros_w = Tensor::zeros(&[h, h]);
        let zero_b = Tensor::zeros(&[h]);
        let mut wv = Tensor::zeros(&[h, h]);
        let mut wo = Tensor::zeros(&[h, h]);
        for i in 0..h {
            let idx = wv.at2(i, i);
            wv.data_mut()[idx] = 1.0;
            let idx = wo.at2(i, i);
            wo.data_mut()[idx] = 1.0;
        }
        let params = MhsaParams {
            wq: &zeros_w,
            bq: &zero_b,
            wk: &zeros_w,
            bk: &zero_b,
            wv: &wv,
            bv: &zero_b,
            wo: &wo,
            bo: &zero_b,
        };
        let x = Tensor::from_vec(&[1, 3, h], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (y, cache) = mhsa_forward(&x, &params, 1);
        for a in cache.attn.data() {
            assert_close(*a, 1.0 / 3.0, 1e-12);
        }
        // mean frame is [3, 4]; output = mean + residual.
        for ti in 0..3 {
            assert_close(y.get3(0, ti, 0), 3.0 + x.get3(0, ti, 0), 1e-12);
            assert_close(y.get3(0, ti, 1), 4.0 + x.get3(0, ti, 1), 1e-12);
        }
    }

    #[test]
    fn avg_pool_examples() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![3.0, -4.0]).unwrap();
        assert_eq!(avg_pool_forward(&x).data(), &[3.0, -4.0]);

        let x = Tensor::from_vec(&[1, 2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(avg_pool_forward(&x).data(), &[2.0]);
    }

    #[test]
    fn avg_pool_padding_scales_by_length_ratio() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pooled = avg_pool_forward(&x);
        let mut padded = Tensor::zeros(&[1, 4, 2]);
        padded.data_mut()[..8].copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        let pooled_padded = avg_pool_forward(&padded);
        for (a, b) in pooled.data().iter().zip(pooled_padded.data()) {
            assert_close(*b, a * 2.0 / 4.0, 1e-12);
        }
    }

    #[test]
    fn attentive_stats_on_identical_frames() {
        let h = 3;
        let frame_vals = [0.4, -0.7, 1.1];
        let x = Tensor::from_vec(
            &[1, 4, h],
            (0..4).flat_map(|_| frame_vals.to_vec()).collect(),
        )
        .unwrap();
        let score_w1 = Tensor::from_vec(&[h, h], vec![0.1; h * h]).unwrap();
        let score_b1 = Tensor::zeros(&[h]);
        let score_w2 = Tensor::from_vec(&[h], vec![0.2; h]).unwrap();
        let score_b2 = Tensor::zeros(&[1]);
        // Identity-selecting projection: out = mean part of the concat.
        let mut proj_w = Tensor::zeros(&[2 * h, h]);
        for i in 0..h {
            let idx = proj_w.at2(i, i);
            proj_w.data_mut()[idx] = 1.0;
        }
        let proj_b = Tensor::zeros(&[h]);
        let params = AttStatsParams {
            score_w1: &score_w1,
            score_b1: &score_b1,
            score_w2: &score_w2,
            score_b2: &score_b2,
            proj_w: &proj_w,
            proj_b: &proj_b,
        };
        let (y, cache) = attentive_stats_forward(&x, &params);
        for a in cache.alpha.data() {
            assert_close(*a, 0.25, 1e-12);
        }
        for hi in 0..h {
            assert_close(y.data()[hi], frame_vals[hi], 1e-9);
            // Weighted std of identical frames is ~0 (epsilon-dominated).
            assert!(cache.std.data()[hi] < 1e-4);
        }
    }
}
