//! Causal decoder-only transformer: RMSNorm, rotary position embeddings,
//! gated MLP, untied output head, no biases. Forward is generic over f32/f64
//! (the finite-difference oracle runs entirely in f64); training gradients
//! are exact and hand-derived, verified against central differences.

mod backward;
mod checkpoint;
mod decode;
mod forward;
mod gradcheck;

pub use backward::{loss, loss_and_grad, loss_and_grad_into};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, VITC_MAGIC, VITC_VERSION};
pub use decode::Decoder;
pub use forward::{forward, rmsnorm, rope_rotate, rope_unrotate, AttentionCapture, CaptureFlags, ForwardTrace};
pub use gradcheck::{grad_check, GradCheckReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat, Scalar};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub context_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    /// Number of conditioning classes when the label-conditioning slot is
    /// enabled; None trains an unconditioned model.
    #[serde(default)]
    pub cond_classes: Option<usize>,
}

fn default_rope_base() -> f32 {
    10000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::invalid("n_layers and n_heads must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::invalid(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.vocab < 3 {
            return Err(Error::invalid("vocab must hold at least one code plus specials"));
        }
        if self.context_len < 2 {
            return Err(Error::invalid("context_len must be at least 2"));
        }
        Ok(())
    }

    /// Total parameter count, in closed form.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = d /* attn norm */ + 4 * d * d /* q k v o */
            + d /* mlp norm */ + 3 * d * self.d_mlp;
        self.vocab * d
            + self.n_layers * per_layer
            + d /* final norm */
            + d * self.vocab
            + self.cond_classes.map_or(0, |c| c * d)
    }

    /// The desk-scale config ladder used by the scaling study.
    pub fn ladder(size: ModelSize, vocab: usize, context_len: usize) -> Self {
        let (n_layers, d_model, n_heads, d_mlp) = match size {
            ModelSize::Tiny => (2, 64, 2, 256),
            ModelSize::Small => (4, 128, 4, 512),
            ModelSize::Base => (6, 256, 8, 1024),
        };
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_mlp,
            vocab,
            context_len,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
            cond_classes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Tiny,
    Small,
    Base,
}

impl ModelSize {
    pub fn name(self) -> &'static str {
        match self {
            ModelSize::Tiny => "tiny",
            ModelSize::Small => "small",
            ModelSize::Base => "base",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub attn_norm: Vec<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub mlp_norm: Vec<T>,
    pub w_gate: Mat<T>,
    pub w_up: Mat<T>,
    pub w_down: Mat<T>,
}

/// All model parameters. Weight matrices are stored row-major as
/// (in_features x out_features); activations multiply from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T = f32> {
    pub tok_embed: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub head: Mat<T>,
    pub cond_embed: Option<Mat<T>>,
}

/// Identifies one parameter tensor. The order of [`Params::slots`] is the
/// canonical iteration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    TokEmbed,
    AttnNorm(usize),
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wo(usize),
    MlpNorm(usize),
    WGate(usize),
    WUp(usize),
    WDown(usize),
    FinalNorm,
    Head,
    CondEmbed,
}

impl Slot {
    pub fn name(self) -> String {
        match self {
            Slot::TokEmbed => "embed.tok".into(),
            Slot::AttnNorm(l) => format!("layers.{l}.attn.norm.gain"),
            Slot::Wq(l) => format!("layers.{l}.attn.wq"),
            Slot::Wk(l) => format!("layers.{l}.attn.wk"),
            Slot::Wv(l) => format!("layers.{l}.attn.wv"),
            Slot::Wo(l) => format!("layers.{l}.attn.wo"),
            Slot::MlpNorm(l) => format!("layers.{l}.mlp.norm.gain"),
            Slot::WGate(l) => format!("layers.{l}.mlp.w_gate"),
            Slot::WUp(l) => format!("layers.{l}.mlp.w_up"),
            Slot::WDown(l) => format!("layers.{l}.mlp.w_down"),
            Slot::FinalNorm => "norm.gain".into(),
            Slot::Head => "head.w".into(),
            Slot::CondEmbed => "cond.embed".into(),
        }
    }

    /// True for parameters excluded from weight decay: norm gains and the
    /// token embedding.
    pub fn no_decay(self) -> bool {
        let name = self.name();
        name.ends_with("norm.gain") || name == "embed.tok"
    }
}

impl<T: Scalar> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let m = cfg.d_mlp;
        Params {
            tok_embed: Mat::zeros(cfg.vocab, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    attn_norm: vec![T::ZERO; d],
                    wq: Mat::zeros(d, d),
                    wk: Mat::zeros(d, d),
                    wv: Mat::zeros(d, d),
                    wo: Mat::zeros(d, d),
                    mlp_norm: vec![T::ZERO; d],
                    w_gate: Mat::zeros(d, m),
                    w_up: Mat::zeros(d, m),
                    w_down: Mat::zeros(m, d),
                })
                .collect(),
            final_norm: vec![T::ZERO; d],
            head: Mat::zeros(d, cfg.vocab),
            cond_embed: cfg.cond_classes.map(|c| Mat::zeros(c, d)),
        }
    }

    /// Canonical slot order.
    pub fn slots(cfg: &ModelConfig) -> Vec<Slot> {
        let mut out = vec![Slot::TokEmbed];
        for l in 0..cfg.n_layers {
            out.extend([
                Slot::AttnNorm(l),
                Slot::Wq(l),
                Slot::Wk(l),
                Slot::Wv(l),
                Slot::Wo(l),
                Slot::MlpNorm(l),
                Slot::WGate(l),
                Slot::WUp(l),
                Slot::WDown(l),
            ]);
        }
        out.push(Slot::FinalNorm);
        out.push(Slot::Head);
        if cfg.cond_classes.is_some() {
            out.push(Slot::CondEmbed);
        }
        out
    }

    pub fn get(&self, slot: Slot) -> &[T] {
        match slot {
            Slot::TokEmbed => &self.tok_embed.data,
            Slot::AttnNorm(l) => &self.layers[l].attn_norm,
            Slot::Wq(l) => &self.layers[l].wq.data,
            Slot::Wk(l) => &self.layers[l].wk.data,
            Slot::Wv(l) => &self.layers[l].wv.data,
            Slot::Wo(l) => &self.layers[l].wo.data,
            Slot::MlpNorm(l) => &self.layers[l].mlp_norm,
            Slot::WGate(l) => &self.layers[l].w_gate.data,
            Slot::WUp(l) => &self.layers[l].w_up.data,
            Slot::WDown(l) => &self.layers[l].w_down.data,
            Slot::FinalNorm => &self.final_norm,
            Slot::Head => &self.head.data,
            Slot::CondEmbed => &self.cond_embed.as_ref().expect("cond slot").data,
        }
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [T] {
        match slot {
            Slot::TokEmbed => &mut self.tok_embed.data,
            Slot::AttnNorm(l) => &mut self.layers[l].attn_norm,
            Slot::Wq(l) => &mut self.layers[l].wq.data,
            Slot::Wk(l) => &mut self.layers[l].wk.data,
            Slot::Wv(l) => &mut self.layers[l].wv.data,
            Slot::Wo(l) => &mut self.layers[l].wo.data,
            Slot::MlpNorm(l) => &mut self.layers[l].mlp_norm,
            Slot::WGate(l) => &mut self.layers[l].w_gate.data,
            Slot::WUp(l) => &mut self.layers[l].w_up.data,
            Slot::WDown(l) => &mut self.layers[l].w_down.data,
            Slot::FinalNorm => &mut self.final_norm,
            Slot::Head => &mut self.head.data,
            Slot::CondEmbed => &mut self.cond_embed.as_mut().expect("cond slot").data,
        }
    }

    pub fn shape(cfg: &ModelConfig, slot: Slot) -> Vec<usize> {
        let d = cfg.d_model;
        match slot {
            Slot::TokEmbed => vec![cfg.vocab, d],
            Slot::AttnNorm(_) | Slot::MlpNorm(_) | Slot::FinalNorm => vec![d],
            Slot::Wq(_) | Slot::Wk(_) | Slot::Wv(_) | Slot::Wo(_) => vec![d, d],
            Slot::WGate(_) | Slot::WUp(_) => vec![d, cfg.d_mlp],
            Slot::WDown(_) => vec![cfg.d_mlp, d],
            Slot::Head => vec![d, cfg.vocab],
            Slot::CondEmbed => vec![cfg.cond_classes.expect("cond classes"), d],
        }
    }

    pub fn to_f64(&self) -> Params<f64>
    where
        T: Scalar,
    {
        Params {
            tok_embed: self.tok_embed.map_into(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.iter().map(|&v| v.to_f64()).collect(),
                    wq: l.wq.map_into(),
                    wk: l.wk.map_into(),
                    wv: l.wv.map_into(),
                    wo: l.wo.map_into(),
                    mlp_norm: l.mlp_norm.iter().map(|&v| v.to_f64()).collect(),
                    w_gate: l.w_gate.map_into(),
                    w_up: l.w_up.map_into(),
                    w_down: l.w_down.map_into(),
                })
                .collect(),
            final_norm: self.final_norm.iter().map(|&v| v.to_f64()).collect(),
            head: self.head.map_into(),
            cond_embed: self.cond_embed.as_ref().map(|m| m.map_into()),
        }
    }

    pub fn all_finite(&self, cfg: &ModelConfig) -> bool {
        Params::<T>::slots(cfg)
            .into_iter()
            .all(|s| self.get(s).iter().all(|v| v.is_finite_s()))
    }
}

fn normal(rng: &mut impl Rng) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen::<f32>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

pub const INIT_STD: f32 = 0.02;

/// Seeded initialization: N(0, 0.02) everywhere, output head scaled by
/// 1/sqrt(2 * n_layers), norm gains at 1, no dropout anywhere.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params<f32>> {
    cfg.validate()?;
    let mut rng = seeds::rng_for(seed, "init");
    let mut params = Params::<f32>::zeros(cfg);
    let head_std = INIT_STD / (2.0 * cfg.n_layers as f32).sqrt();
    for slot in Params::<f32>::slots(cfg) {
        let std = match slot {
            Slot::AttnNorm(_) | Slot::MlpNorm(_) | Slot::FinalNorm => {
                params.get_mut(slot).iter_mut().for_each(|v| *v = 1.0);
                continue;
            }
            Slot::Head => head_std,
            _ => INIT_STD,
        };
        for v in params.get_mut(slot) {
            *v = normal(&mut rng) * std;
        }
    }
    Ok(params)
}
