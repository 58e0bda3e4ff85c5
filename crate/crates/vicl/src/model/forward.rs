//! Forward pass, generic over f32/f64.

use crate::error::{Error, Result};
use crate::math::{matmul, Mat, Op, Scalar};
use crate::model::{ModelConfig, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionCapture {
    #[default]
    None,
    LastLayer,
    All,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CaptureFlags {
    pub last_hidden: bool,
    pub attention: AttentionCapture,
}

impl CaptureFlags {
    pub fn none() -> Self {
        CaptureFlags::default()
    }

    pub fn hidden() -> Self {
        CaptureFlags {
            last_hidden: true,
            attention: AttentionCapture::None,
        }
    }
}

/// Forward outputs. `logits` has one row per position; `last_hidden` is the
/// final-norm output feeding the head; `attention` holds softmax maps for the
/// captured layers (masked entries exactly zero).
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f32> {
    pub logits: Mat<T>,
    pub last_hidden: Option<Mat<T>>,
    /// attention[i][head] is an NxN row-stochastic (over columns <= row) map;
    /// `attention_layers[i]` names the source layer.
    pub attention: Option<Vec<Vec<Mat<T>>>>,
    pub attention_layers: Vec<usize>,
}

/// x / sqrt(mean(x^2) + eps) ⊙ gain, one vector.
pub fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Vec<T> {
    assert!(!x.is_empty(), "rmsnorm input must be nonempty");
    assert_eq!(x.len(), gain.len());
    let ms = x.iter().map(|&v| v * v).sum::<T>() / T::from_f64(x.len() as f64);
    let inv = T::ONE / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

fn rmsnorm_rows<T: Scalar>(x: &Mat<T>, gain: &[T], eps: T, out: &mut Mat<T>, inv_rms: &mut Vec<T>) {
    let d = x.cols;
    inv_rms.clear();
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::from_f64(d as f64);
        let inv = T::ONE / (ms + eps).sqrt();
        inv_rms.push(inv);
        let orow = out.row_mut(r);
        for j in 0..d {
            orow[j] = row[j] * inv * gain[j];
        }
    }
}

fn rope_freqs<T: Scalar>(head_dim: usize, base: T) -> Vec<T> {
    (0..head_dim / 2)
        .map(|i| base.powf(T::from_f64(-2.0 * i as f64 / head_dim as f64)))
        .collect()
}

/// Rotate a query/key vector in place by its position: pairwise 2-D rotations
/// with angle position * base^(-2i/len).
pub fn rope_rotate<T: Scalar>(v: &mut [T], position: usize, base: T) -> Result<()> {
    if v.len() % 2 != 0 {
        return Err(Error::invalid("rotary embedding needs an even dimension"));
    }
    let freqs = rope_freqs(v.len(), base);
    apply_rope(v, T::from_f64(position as f64), &freqs, false);
    Ok(())
}

/// Inverse rotation; used by the backward pass.
pub fn rope_unrotate<T: Scalar>(v: &mut [T], position: usize, base: T) -> Result<()> {
    if v.len() % 2 != 0 {
        return Err(Error::invalid("rotary embedding needs an even dimension"));
    }
    let freqs = rope_freqs(v.len(), base);
    apply_rope(v, T::from_f64(position as f64), &freqs, true);
    Ok(())
}

#[inline]
fn apply_rope<T: Scalar>(v: &mut [T], pos: T, freqs: &[T], inverse: bool) {
    for (i, &f) in freqs.iter().enumerate() {
        let angle = pos * f;
        let (sin, cos) = (angle.sin(), angle.cos());
        let sin = if inverse { -sin } else { sin };
        let a = v[2 * i];
        let b = v[2 * i + 1];
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x.to_f64() >= 0.0 {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Per-layer activations kept for the backward pass.
pub(crate) struct LayerCache<T> {
    pub x_in: Mat<T>,
    pub inv_rms1: Vec<T>,
    pub normed1: Mat<T>,
    pub q_rot: Mat<T>,
    pub k_rot: Mat<T>,
    pub v: Mat<T>,
    pub probs: Vec<Mat<T>>,
    pub ctx: Mat<T>,
    pub x_mid: Mat<T>,
    pub inv_rms2: Vec<T>,
    pub normed2: Mat<T>,
    pub gate: Mat<T>,
    pub up: Mat<T>,
    pub act: Mat<T>,
}

pub(crate) struct Caches<T> {
    pub layers: Vec<LayerCache<T>>,
    pub x_final: Mat<T>,
    pub final_inv_rms: Vec<T>,
    pub final_normed: Mat<T>,
}

/// Number of transformer positions for a token sequence, accounting for the
/// injected conditioning position.
pub(crate) fn seq_positions(ids_len: usize, cond: Option<usize>) -> usize {
    ids_len + usize::from(cond.is_some())
}

/// Row index whose logits predict `ids[j]` (j >= 1).
pub(crate) fn predictor_row(j: usize, cond: Option<usize>) -> usize {
    j - 1 + usize::from(cond.is_some())
}

pub(crate) fn validate_input(
    params: &Params<impl Scalar>,
    cfg: &ModelConfig,
    ids: &[u16],
    cond: Option<usize>,
) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    let n = seq_positions(ids.len(), cond);
    if n > cfg.context_len {
        return Err(Error::invalid(format!(
            "sequence of {n} positions exceeds context_len {}",
            cfg.context_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab) {
        return Err(Error::invalid(format!(
            "token id {bad} out of vocabulary {}",
            cfg.vocab
        )));
    }
    if let Some(c) = cond {
        let classes = cfg
            .cond_classes
            .ok_or_else(|| Error::invalid("model was built without a conditioning slot"))?;
        if c >= classes {
            return Err(Error::invalid(format!("condition id {c} out of range {classes}")));
        }
        if params.cond_embed.is_none() {
            return Err(Error::invalid("parameters lack the conditioning table"));
        }
    }
    Ok(())
}

/// Embedding rows for a sequence: bos and body tokens from the token table,
/// plus the conditioning vector injected after bos when a condition is given.
fn embed_input<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    ids: &[u16],
    cond: Option<usize>,
) -> Mat<T> {
    let n = seq_positions(ids.len(), cond);
    let d = cfg.d_model;
    let mut x = Mat::zeros(n, d);
    match cond {
        None => {
            for (r, &id) in ids.iter().enumerate() {
                x.row_mut(r).copy_from_slice(params.tok_embed.row(id as usize));
            }
        }
        Some(c) => {
            x.row_mut(0).copy_from_slice(params.tok_embed.row(ids[0] as usize));
            x.row_mut(1)
                .copy_from_slice(params.cond_embed.as_ref().expect("cond table").row(c));
            for (j, &id) in ids.iter().enumerate().skip(1) {
                x.row_mut(j + 1)
                    .copy_from_slice(params.tok_embed.row(id as usize));
            }
        }
    }
    x
}

#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) unsafe fn gemm_block<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_off: usize,
    rsa: isize,
    csa: isize,
    b: &[T],
    b_off: usize,
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    c_off: usize,
    rsc: isize,
    csc: isize,
) {
    T::gemm(
        m,
        k,
        n,
        alpha,
        a.as_ptr().add(a_off),
        rsa,
        csa,
        b.as_ptr().add(b_off),
        rsb,
        csb,
        beta,
        c.as_mut_ptr().add(c_off),
        rsc,
        csc,
    );
}

/// In-place causal softmax: row i is normalized over columns 0..=i and
/// exactly zero beyond.
fn softmax_causal<T: Scalar>(scores: &mut Mat<T>) {
    let n = scores.rows;
    for i in 0..n {
        let row = scores.row_mut(i);
        let mut max = row[0];
        for &v in row[..=i].iter() {
            max = max.max_s(v);
        }
        let mut sum = T::ZERO;
        for v in row[..=i].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::ONE / sum;
        for v in row[..=i].iter_mut() {
            *v = *v * inv;
        }
        for v in row[i + 1..].iter_mut() {
            *v = T::ZERO;
        }
    }
}

pub(crate) fn forward_impl<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    ids: &[u16],
    cond: Option<usize>,
    capture: CaptureFlags,
    want_caches: bool,
) -> Result<(ForwardTrace<T>, Option<Caches<T>>)> {
    validate_input(params, cfg, ids, cond)?;
    let n = seq_positions(ids.len(), cond);
    let d = cfg.d_model;
    let m = cfg.d_mlp;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let eps = T::from_f32(cfg.norm_eps);
    let base = T::from_f32(cfg.rope_base);
    let freqs = rope_freqs::<T>(hd, base);
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let mut x = embed_input(params, cfg, ids, cond);
    let mut layer_caches: Vec<LayerCache<T>> = Vec::new();
    let mut captured_attn: Vec<Vec<Mat<T>>> = Vec::new();
    let mut attention_layers: Vec<usize> = Vec::new();

    for (li, layer) in params.layers.iter().enumerate() {
        // attention block
        let mut normed1 = Mat::zeros(n, d);
        let mut inv_rms1 = Vec::with_capacity(n);
        rmsnorm_rows(&x, &layer.attn_norm, eps, &mut normed1, &mut inv_rms1);

        let mut q = Mat::zeros(n, d);
        let mut k = Mat::zeros(n, d);
        let mut v = Mat::zeros(n, d);
        matmul(T::ONE, &normed1, Op::N, &layer.wq, Op::N, T::ZERO, &mut q);
        matmul(T::ONE, &normed1, Op::N, &layer.wk, Op::N, T::ZERO, &mut k);
        matmul(T::ONE, &normed1, Op::N, &layer.wv, Op::N, T::ZERO, &mut v);
        for r in 0..n {
            let pos = T::from_f64(r as f64);
            for h in 0..heads {
                apply_rope(&mut q.row_mut(r)[h * hd..(h + 1) * hd], pos, &freqs, false);
                apply_rope(&mut k.row_mut(r)[h * hd..(h + 1) * hd], pos, &freqs, false);
            }
        }

        let mut probs: Vec<Mat<T>> = Vec::with_capacity(heads);
        let mut ctx = Mat::zeros(n, d);
        for h in 0..heads {
            let mut scores = Mat::zeros(n, n);
            unsafe {
                // scores = scale * q_h @ k_h^T
                gemm_block(
                    n, hd, n, scale,
                    &q.data, h * hd, d as isize, 1,
                    &k.data, h * hd, 1, d as isize,
                    T::ZERO,
                    &mut scores.data, 0, n as isize, 1,
                );
            }
            softmax_causal(&mut scores);
            unsafe {
                // ctx_h = probs @ v_h
                gemm_block(
                    n, n, hd, T::ONE,
                    &scores.data, 0, n as isize, 1,
                    &v.data, h * hd, d as isize, 1,
                    T::ZERO,
                    &mut ctx.data, h * hd, d as isize, 1,
                );
            }
            probs.push(scores);
        }

        let capture_this = match capture.attention {
            AttentionCapture::None => false,
            AttentionCapture::LastLayer => li == cfg.n_layers - 1,
            AttentionCapture::All => true,
        };
        if capture_this {
            captured_attn.push(probs.clone());
            attention_layers.push(li);
        }

        let mut x_mid = x.clone();
        // x_mid += ctx @ wo
        matmul(T::ONE, &ctx, Op::N, &layer.wo, Op::N, T::ONE, &mut x_mid);

        // mlp block
        let mut normed2 = Mat::zeros(n, d);
        let mut inv_rms2 = Vec::with_capacity(n);
        rmsnorm_rows(&x_mid, &layer.mlp_norm, eps, &mut normed2, &mut inv_rms2);
        let mut gate = Mat::zeros(n, m);
        let mut up = Mat::zeros(n, m);
        matmul(T::ONE, &normed2, Op::N, &layer.w_gate, Op::N, T::ZERO, &mut gate);
        matmul(T::ONE, &normed2, Op::N, &layer.w_up, Op::N, T::ZERO, &mut up);
        let mut act = Mat::zeros(n, m);
        for i in 0..n * m {
            act.data[i] = silu(gate.data[i]) * up.data[i];
        }
        let mut x_out = x_mid.clone();
        matmul(T::ONE, &act, Op::N, &layer.w_down, Op::N, T::ONE, &mut x_out);

        if want_caches {
            layer_caches.push(LayerCache {
                x_in: x,
                inv_rms1,
                normed1,
                q_rot: q,
                k_rot: k,
                v,
                probs,
                ctx,
                x_mid,
                inv_rms2,
                normed2,
                gate,
                up,
                act,
            });
        }
        x = x_out;
    }

    let mut final_normed = Mat::zeros(n, d);
    let mut final_inv_rms = Vec::with_capacity(n);
    rmsnorm_rows(&x, &params.final_norm, eps, &mut final_normed, &mut final_inv_rms);
    let mut logits = Mat::zeros(n, cfg.vocab);
    matmul(T::ONE, &final_normed, Op::N, &params.head, Op::N, T::ZERO, &mut logits);

    let trace = ForwardTrace {
        logits,
        last_hidden: capture.last_hidden.then(|| final_normed.clone()),
        attention: (!captured_attn.is_empty()).then_some(captured_attn),
        attention_layers,
    };
    let caches = want_caches.then(|| Caches {
        layers: layer_caches,
        x_final: x,
        final_inv_rms,
        final_normed,
    });
    Ok((trace, caches))
}

/// Run the model over a token sequence. Strictly causal, deterministic;
/// capture flags control whether hiddens and attention maps are materialized.
pub fn forward<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    ids: &[u16],
    cond: Option<usize>,
    capture: CaptureFlags,
) -> Result<ForwardTrace<T>> {
    forward_impl(params, cfg, ids, cond, capture, false).map(|(t, _)| t)
}
