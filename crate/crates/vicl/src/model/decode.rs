//! Incremental decoding with a KV cache.
//!
//! `prefill` processes the whole prompt as one chunk at GEMM efficiency;
//! `step` appends one token at a time. Both produce the same cache layout,
//! so a step at position p sees exactly what a full forward would.

use crate::error::{Error, Result};
use crate::math::{matmul, Mat, Op};
use crate::model::forward::{gemm_block, rmsnorm, silu, validate_input};
use crate::model::{ModelConfig, Params};

pub struct Decoder<'a> {
    params: &'a Params<f32>,
    cfg: &'a ModelConfig,
    k_cache: Vec<Mat<f32>>,
    v_cache: Vec<Mat<f32>>,
    len: usize,
    capture_hidden: bool,
    capture_attention: bool,
    /// Final-norm rows of stepped tokens.
    pub hiddens: Vec<Vec<f32>>,
    /// Last-layer attention rows of stepped tokens, one (heads x positions)
    /// matrix per step.
    pub attn_rows: Vec<Mat<f32>>,
    last_logits: Vec<f32>,
    freqs: Vec<f32>,
}

impl<'a> Decoder<'a> {
    pub fn new(
        params: &'a Params<f32>,
        cfg: &'a ModelConfig,
        capture_hidden: bool,
        capture_attention: bool,
    ) -> Self {
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        Decoder {
            params,
            cfg,
            k_cache: (0..cfg.n_layers).map(|_| Mat::zeros(cfg.context_len, d)).collect(),
            v_cache: (0..cfg.n_layers).map(|_| Mat::zeros(cfg.context_len, d)).collect(),
            len: 0,
            capture_hidden,
            capture_attention,
            hiddens: Vec::new(),
            attn_rows: Vec::new(),
            last_logits: Vec::new(),
            freqs: (0..hd / 2)
                .map(|i| cfg.rope_base.powf(-2.0 * i as f32 / hd as f32))
                .collect(),
        }
    }

    pub fn positions(&self) -> usize {
        self.len
    }

    /// Logits of the most recently processed position.
    pub fn last_logits(&self) -> &[f32] {
        &self.last_logits
    }

    /// Process the prompt. Must be the first call; the conditioning position,
    /// when given, is injected after bos exactly as in training.
    pub fn prefill(&mut self, ids: &[u16], cond: Option<usize>) -> Result<()> {
        if self.len != 0 {
            return Err(Error::invalid("prefill on a non-empty decoder"));
        }
        validate_input(self.params, self.cfg, ids, cond)?;
        let d = self.cfg.d_model;
        let n = ids.len() + usize::from(cond.is_some());
        let mut x = Mat::<f32>::zeros(n, d);
        match cond {
            None => {
                for (r, &id) in ids.iter().enumerate() {
                    x.row_mut(r).copy_from_slice(self.params.tok_embed.row(id as usize));
                }
            }
            Some(c) => {
                x.row_mut(0).copy_from_slice(self.params.tok_embed.row(ids[0] as usize));
                x.row_mut(1)
                    .copy_from_slice(self.params.cond_embed.as_ref().expect("cond table").row(c));
                for (j, &id) in ids.iter().enumerate().skip(1) {
                    x.row_mut(j + 1)
                        .copy_from_slice(self.params.tok_embed.row(id as usize));
                }
            }
        }
        self.advance(x, false)
    }

    /// Append one token and return the logits predicting its successor.
    pub fn step(&mut self, id: u16) -> Result<&[f32]> {
        if self.len == 0 {
            return Err(Error::invalid("step before prefill"));
        }
        if id as usize >= self.cfg.vocab {
            return Err(Error::invalid(format!("token id {id} out of vocabulary")));
        }
        let mut x = Mat::<f32>::zeros(1, self.cfg.d_model);
        x.row_mut(0).copy_from_slice(self.params.tok_embed.row(id as usize));
        self.advance(x, true)?;
        Ok(&self.last_logits)
    }

    fn advance(&mut self, mut x: Mat<f32>, capture: bool) -> Result<()> {
        let cfg = self.cfg;
        let d = cfg.d_model;
        let m = cfg.d_mlp;
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0f32 / (hd as f32).sqrt();
        let c = x.rows;
        let l0 = self.len;
        let total = l0 + c;
        if total > cfg.context_len {
            return Err(Error::invalid(format!(
                "decode length {total} exceeds context_len {}",
                cfg.context_len
            )));
        }

        for (li, layer) in self.params.layers.iter().enumerate() {
            let mut normed = Mat::<f32>::zeros(c, d);
            for r in 0..c {
                normed
                    .row_mut(r)
                    .copy_from_slice(&rmsnorm(x.row(r), &layer.attn_norm, cfg.norm_eps));
            }
            let mut q = Mat::<f32>::zeros(c, d);
            let mut new_k = Mat::<f32>::zeros(c, d);
            let mut new_v = Mat::<f32>::zeros(c, d);
            matmul(1.0, &normed, Op::N, &layer.wq, Op::N, 0.0, &mut q);
            matmul(1.0, &normed, Op::N, &layer.wk, Op::N, 0.0, &mut new_k);
            matmul(1.0, &normed, Op::N, &layer.wv, Op::N, 0.0, &mut new_v);
            for r in 0..c {
                let pos = (l0 + r) as f32;
                for h in 0..heads {
                    rotate(&mut q.row_mut(r)[h * hd..(h + 1) * hd], pos, &self.freqs);
                    rotate(&mut new_k.row_mut(r)[h * hd..(h + 1) * hd], pos, &self.freqs);
                }
            }
            let kc = &mut self.k_cache[li];
            let vc = &mut self.v_cache[li];
            for r in 0..c {
                kc.row_mut(l0 + r).copy_from_slice(new_k.row(r));
                vc.row_mut(l0 + r).copy_from_slice(new_v.row(r));
            }

            let mut ctx = Mat::<f32>::zeros(c, d);
            let mut probs = Mat::<f32>::zeros(c, total);
            for h in 0..heads {
                let off = h * hd;
                unsafe {
                    // probs = scale * q_h @ K_h[0..total]^T
                    gemm_block(
                        c, hd, total, scale,
                        &q.data, off, d as isize, 1,
                        &kc.data, off, 1, d as isize,
                        0.0,
                        &mut probs.data, 0, total as isize, 1,
                    );
                }
                for r in 0..c {
                    let limit = l0 + r;
                    let row = probs.row_mut(r);
                    let mut max = f32::NEG_INFINITY;
                    for &v in row[..=limit].iter() {
                        max = max.max(v);
                    }
                    let mut sum = 0.0f32;
                    for v in row[..=limit].iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    let inv = 1.0 / sum;
                    for v in row[..=limit].iter_mut() {
                        *v *= inv;
                    }
                    for v in row[limit + 1..].iter_mut() {
                        *v = 0.0;
                    }
                }
                unsafe {
                    // ctx_h = probs @ V_h[0..total]
                    gemm_block(
                        c, total, hd, 1.0,
                        &probs.data, 0, total as isize, 1,
                        &vc.data, off, d as isize, 1,
                        0.0,
                        &mut ctx.data, off, d as isize, 1,
                    );
                }
                if capture && self.capture_attention && li == cfg.n_layers - 1 {
                    // stash per-head rows; c == 1 for stepped tokens
                    if h == 0 {
                        self.attn_rows.push(Mat::zeros(heads, total));
                    }
                    let stash = self.attn_rows.last_mut().expect("just pushed");
                    stash.row_mut(h).copy_from_slice(probs.row(c - 1));
                }
            }
            // x += ctx @ wo
            matmul(1.0, &ctx, Op::N, &layer.wo, Op::N, 1.0, &mut x);

            let mut normed2 = Mat::<f32>::zeros(c, d);
            for r in 0..c {
                normed2
                    .row_mut(r)
                    .copy_from_slice(&rmsnorm(x.row(r), &layer.mlp_norm, cfg.norm_eps));
            }
            let mut gate = Mat::<f32>::zeros(c, m);
            let mut up = Mat::<f32>::zeros(c, m);
            matmul(1.0, &normed2, Op::N, &layer.w_gate, Op::N, 0.0, &mut gate);
            matmul(1.0, &normed2, Op::N, &layer.w_up, Op::N, 0.0, &mut up);
            for i in 0..c * m {
                gate.data[i] = silu(gate.data[i]) * up.data[i];
            }
            // x += act @ w_down
            matmul(1.0, &gate, Op::N, &layer.w_down, Op::N, 1.0, &mut x);
        }

        let final_row = rmsnorm(x.row(c - 1), &self.params.final_norm, cfg.norm_eps);
        if capture && self.capture_hidden {
            self.hiddens.push(final_row.clone());
        }
        let h = Mat::from_vec(1, d, final_row);
        let mut logits = Mat::<f32>::zeros(1, cfg.vocab);
        matmul(1.0, &h, Op::N, &self.params.head, Op::N, 0.0, &mut logits);
        self.last_logits = logits.data;
        self.len = total;
        Ok(())
    }
}

fn rotate(v: &mut [f32], pos: f32, freqs: &[f32]) {
    for (i, &f) in freqs.iter().enumerate() {
        let angle = pos * f;
        let (sin, cos) = (angle.sin(), angle.cos());
        let a = v[2 * i];
        let b = v[2 * i + 1];
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}
