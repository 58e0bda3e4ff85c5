//! Loss and hand-derived exact gradients.

use crate::error::Result;
use crate::math::{matmul, Mat, Op, Scalar};
use crate::model::forward::{
    forward_impl, gemm_block, predictor_row, sigmoid, silu, CaptureFlags,
};
use crate::model::{ModelConfig, Params};

/// Mean next-token cross-entropy in nats, accumulated in f64. Targets are
/// `ids[1..]`; bos (and the conditioning position, when present) is never a
/// target, so the token count in the loss is always len(ids) - 1.
pub fn loss<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    ids: &[u16],
    cond: Option<usize>,
) -> Result<f64> {
    if ids.len() < 2 {
        return Err(crate::error::Error::invalid("loss needs at least 2 tokens"));
    }
    let (trace, _) = forward_impl(params, cfg, ids, cond, CaptureFlags::none(), false)?;
    let mut total = 0.0f64;
    for j in 1..ids.len() {
        let row = trace.logits.row(predictor_row(j, cond));
        total += ce_f64(row, ids[j] as usize);
    }
    Ok(total / (ids.len() - 1) as f64)
}

fn ce_f64<T: Scalar>(logits: &[T], target: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        max = max.max(v.to_f64());
    }
    let mut sum = 0.0f64;
    for &v in logits {
        sum += (v.to_f64() - max).exp();
    }
    sum.ln() - (logits[target].to_f64() - max)
}

fn rmsnorm_backward_acc(
    x: &Mat<f32>,
    inv_rms: &[f32],
    gain: &[f32],
    dy: &Mat<f32>,
    dx: &mut Mat<f32>,
    dgain: &mut [f32],
) {
    let d = x.cols;
    for r in 0..x.rows {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let inv = inv_rms[r];
        let mut dot = 0.0f32;
        for j in 0..d {
            let du = dyr[j] * gain[j];
            dot += du * xr[j];
            dgain[j] += dyr[j] * xr[j] * inv;
        }
        let coef = dot * inv * inv * inv / d as f32;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] += dyr[j] * gain[j] * inv - xr[j] * coef;
        }
    }
}

/// Loss plus exact parameter gradients, accumulated into `grads` (callers
/// zero or reuse the buffer across a batch).
pub fn loss_and_grad_into(
    params: &Params<f32>,
    cfg: &ModelConfig,
    ids: &[u16],
    cond: Option<usize>,
    grads: &mut Params<f32>,
) -> Result<f64> {
    if ids.len() < 2 {
        return Err(crate::error::Error::invalid("loss needs at least 2 tokens"));
    }
    let (trace, caches) = forward_impl(params, cfg, ids, cond, CaptureFlags::none(), true)?;
    let caches = caches.expect("caches requested");
    let n = trace.logits.rows;
    let d = cfg.d_model;
    let m_mlp = cfg.d_mlp;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0f32 / (hd as f32).sqrt();
    let n_targets = (ids.len() - 1) as f32;

    // dlogits: (softmax - onehot) / n_targets at predictor rows
    let mut total = 0.0f64;
    let mut dlogits = Mat::<f32>::zeros(n, cfg.vocab);
    for j in 1..ids.len() {
        let r = predictor_row(j, cond);
        let row = trace.logits.row(r);
        let target = ids[j] as usize;
        total += ce_f64(row, target);
        let mut max = f32::NEG_INFINITY;
        for &v in row {
            max = max.max(v);
        }
        let mut sum = 0.0f32;
        let drow = dlogits.row_mut(r);
        for (k, &v) in row.iter().enumerate() {
            drow[k] = (v - max).exp();
            sum += drow[k];
        }
        let inv = 1.0 / (sum * n_targets);
        for v in drow.iter_mut() {
            *v *= inv;
        }
        drow[target] -= 1.0 / n_targets;
    }

    // head and final norm
    matmul(1.0, &caches.final_normed, Op::T, &dlogits, Op::N, 1.0, &mut grads.head);
    let mut dnormed = Mat::<f32>::zeros(n, d);
    matmul(1.0, &dlogits, Op::N, &params.head, Op::T, 0.0, &mut dnormed);
    let mut dx = Mat::<f32>::zeros(n, d);
    rmsnorm_backward_acc(
        &caches.x_final,
        &caches.final_inv_rms,
        &params.final_norm,
        &dnormed,
        &mut dx,
        &mut grads.final_norm,
    );

    let freqs: Vec<f32> = (0..hd / 2)
        .map(|i| cfg.rope_base.powf(-2.0 * i as f32 / hd as f32))
        .collect();

    for li in (0..cfg.n_layers).rev() {
        let layer = &params.layers[li];
        let cache = &caches.layers[li];
        let glayer = &mut grads.layers[li];

        // mlp block: x_out = x_mid + act @ w_down
        matmul(1.0, &cache.act, Op::T, &dx, Op::N, 1.0, &mut glayer.w_down);
        let mut dact = Mat::<f32>::zeros(n, m_mlp);
        matmul(1.0, &dx, Op::N, &layer.w_down, Op::T, 0.0, &mut dact);
        let mut dgate = Mat::<f32>::zeros(n, m_mlp);
        let mut dup = Mat::<f32>::zeros(n, m_mlp);
        for i in 0..n * m_mlp {
            let g = cache.gate.data[i];
            let s = sigmoid(g);
            dgate.data[i] = dact.data[i] * cache.up.data[i] * s * (1.0 + g * (1.0 - s));
            dup.data[i] = dact.data[i] * silu(g);
        }
        matmul(1.0, &cache.normed2, Op::T, &dgate, Op::N, 1.0, &mut glayer.w_gate);
        matmul(1.0, &cache.normed2, Op::T, &dup, Op::N, 1.0, &mut glayer.w_up);
        let mut dnormed2 = Mat::<f32>::zeros(n, d);
        matmul(1.0, &dgate, Op::N, &layer.w_gate, Op::T, 0.0, &mut dnormed2);
        matmul(1.0, &dup, Op::N, &layer.w_up, Op::T, 1.0, &mut dnormed2);
        // dx becomes dx_mid: residual passthrough plus the norm path
        rmsnorm_backward_acc(
            &cache.x_mid,
            &cache.inv_rms2,
            &layer.mlp_norm,
            &dnormed2,
            &mut dx,
            &mut glayer.mlp_norm,
        );

        // attention block: x_mid = x_in + ctx @ wo
        matmul(1.0, &cache.ctx, Op::T, &dx, Op::N, 1.0, &mut glayer.wo);
        let mut dctx = Mat::<f32>::zeros(n, d);
        matmul(1.0, &dx, Op::N, &layer.wo, Op::T, 0.0, &mut dctx);

        let mut dq = Mat::<f32>::zeros(n, d);
        let mut dk = Mat::<f32>::zeros(n, d);
        let mut dv = Mat::<f32>::zeros(n, d);
        let mut dprobs = Mat::<f32>::zeros(n, n);
        for h in 0..heads {
            let off = h * hd;
            let probs = &cache.probs[h];
            unsafe {
                // dprobs = dctx_h @ v_h^T
                gemm_block(
                    n, hd, n, 1.0,
                    &dctx.data, off, d as isize, 1,
                    &cache.v.data, off, 1, d as isize,
                    0.0,
                    &mut dprobs.data, 0, n as isize, 1,
                );
                // dv_h = probs^T @ dctx_h
                gemm_block(
                    n, n, hd, 1.0,
                    &probs.data, 0, 1, n as isize,
                    &dctx.data, off, d as isize, 1,
                    1.0,
                    &mut dv.data, off, d as isize, 1,
                );
            }
            // softmax backward, causal rows; dprobs becomes dscores
            for i in 0..n {
                let prow = probs.row(i);
                let drow = dprobs.row_mut(i);
                let mut s = 0.0f32;
                for j in 0..=i {
                    s += drow[j] * prow[j];
                }
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - s);
                }
                for v in drow[i + 1..].iter_mut() {
                    *v = 0.0;
                }
            }
            unsafe {
                // dq_h += scale * dscores @ k_h
                gemm_block(
                    n, n, hd, scale,
                    &dprobs.data, 0, n as isize, 1,
                    &cache.k_rot.data, off, d as isize, 1,
                    1.0,
                    &mut dq.data, off, d as isize, 1,
                );
                // dk_h += scale * dscores^T @ q_h
                gemm_block(
                    n, n, hd, scale,
                    &dprobs.data, 0, 1, n as isize,
                    &cache.q_rot.data, off, d as isize, 1,
                    1.0,
                    &mut dk.data, off, d as isize, 1,
                );
            }
        }

        // undo the rotations (they are orthogonal maps)
        for r in 0..n {
            let pos = r as f32;
            for h in 0..heads {
                let span = h * hd..(h + 1) * hd;
                unrotate(&mut dq.row_mut(r)[span.clone()], pos, &freqs);
                unrotate(&mut dk.row_mut(r)[span], pos, &freqs);
            }
        }

        matmul(1.0, &cache.normed1, Op::T, &dq, Op::N, 1.0, &mut glayer.wq);
        matmul(1.0, &cache.normed1, Op::T, &dk, Op::N, 1.0, &mut glayer.wk);
        matmul(1.0, &cache.normed1, Op::T, &dv, Op::N, 1.0, &mut glayer.wv);
        let mut dnormed1 = Mat::<f32>::zeros(n, d);
        matmul(1.0, &dq, Op::N, &layer.wq, Op::T, 0.0, &mut dnormed1);
        matmul(1.0, &dk, Op::N, &layer.wk, Op::T, 1.0, &mut dnormed1);
        matmul(1.0, &dv, Op::N, &layer.wv, Op::T, 1.0, &mut dnormed1);
        rmsnorm_backward_acc(
            &cache.x_in,
            &cache.inv_rms1,
            &layer.attn_norm,
            &dnormed1,
            &mut dx,
            &mut glayer.attn_norm,
        );
    }

    // embedding scatter
    match cond {
        None => {
            for (r, &id) in ids.iter().enumerate() {
                crate::math::axpy(1.0, dx.row(r), grads.tok_embed.row_mut(id as usize));
            }
        }
        Some(c) => {
            crate::math::axpy(1.0, dx.row(0), grads.tok_embed.row_mut(ids[0] as usize));
            crate::math::axpy(
                1.0,
                dx.row(1),
                grads.cond_embed.as_mut().expect("cond table").row_mut(c),
            );
            for (j, &id) in ids.iter().enumerate().skip(1) {
                crate::math::axpy(1.0, dx.row(j + 1), grads.tok_embed.row_mut(id as usize));
            }
        }
    }

    Ok(total / (ids.len() - 1) as f64)
}

fn unrotate(v: &mut [f32], pos: f32, freqs: &[f32]) {
    for (i, &f) in freqs.iter().enumerate() {
        let angle = pos * f;
        let (sin, cos) = (-angle.sin(), angle.cos());
        let a = v[2 * i];
        let b = v[2 * i + 1];
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}

/// Convenience wrapper returning fresh gradient buffers.
pub fn loss_and_grad(
    params: &Params<f32>,
    cfg: &ModelConfig,
    ids: &[u16],
    cond: Option<usize>,
) -> Result<(f64, Params<f32>)> {
    let mut grads = Params::<f32>::zeros(cfg);
    let l = loss_and_grad_into(params, cfg, ids, cond, &mut grads)?;
    Ok((l, grads))
}
