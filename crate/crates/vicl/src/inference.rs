//! Imitation inference: demonstration selection, prompt assembly and
//! autoregressive generation.
//!
//! A prompt is a single bos, then the demonstration frame tokens in clip
//! order, then the query frame tokens; no eos and no separators anywhere.
//! The model continues the query; decoded frames are scored elsewhere.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::model::{Decoder, ModelConfig, Params};
use crate::seeds;
use crate::tokenizer::{decode_tokens, encode_clip, Codebook, TokenSequence};
use crate::worldgen::{write_viml, ActionClass, ClipEntry, Dataset, Frame, OraclePrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemonstrationKind {
    None,
    Random,
    InClass,
    Contrastive,
}

impl DemonstrationKind {
    pub fn name(self) -> &'static str {
        match self {
            DemonstrationKind::None => "none",
            DemonstrationKind::Random => "random",
            DemonstrationKind::InClass => "inclass",
            DemonstrationKind::Contrastive => "contrastive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSpec {
    pub kind: DemonstrationKind,
    /// Number of demonstration clips.
    pub k: usize,
    pub frames_per_demo: usize,
    pub seed: u64,
}

/// Pick demonstration clips from `pool` for a query.
///
/// Selection uses labels and clip ids only, never pixels. A demonstration
/// never shares a clip_id with the query. Multi-clip demonstrations share one
/// label so that demonstration-label scoring stays well defined: Random draws
/// the class uniformly, then k distinct clips from it.
pub fn sample_demonstration(
    spec: &DemonstrationSpec,
    pool: &[ClipEntry],
    query: &ClipEntry,
) -> Result<Vec<ClipEntry>> {
    if spec.kind == DemonstrationKind::None {
        if spec.k != 0 {
            return Err(Error::invalid("kind=None requires k=0"));
        }
        return Ok(Vec::new());
    }
    if spec.k == 0 {
        return Err(Error::invalid("demonstrations require k >= 1"));
    }
    let mut rng = seeds::rng_for(spec.seed, "demos");
    let class_id = match spec.kind {
        DemonstrationKind::InClass => query.class_id,
        DemonstrationKind::Contrastive => query.label().contrast().id(),
        DemonstrationKind::Random => rng.gen_range(0..crate::worldgen::NUM_CLASSES),
        DemonstrationKind::None => unreachable!(),
    };
    let mut eligible: Vec<&ClipEntry> = pool
        .iter()
        .filter(|e| {
            e.class_id == class_id
                && e.clip_id != query.clip_id
                && e.n_frames >= spec.frames_per_demo
        })
        .collect();
    if eligible.len() < spec.k {
        return Err(Error::invalid(format!(
            "need {} eligible demo clips of class {class_id}, found {}",
            spec.k,
            eligible.len()
        )));
    }
    let mut out = Vec::with_capacity(spec.k);
    for _ in 0..spec.k {
        let idx = rng.gen_range(0..eligible.len());
        out.push(eligible.swap_remove(idx).clone());
    }
    Ok(out)
}

/// Assemble bos + demo frame tokens + query frame tokens. No eos, no
/// separators.
pub fn build_prompt(
    demos: &[&[Frame]],
    query: &[Frame],
    cb: &Codebook,
    context_len: usize,
) -> Result<TokenSequence> {
    let total_frames = demos.iter().map(|d| d.len()).sum::<usize>() + query.len();
    if query.is_empty() {
        return Err(Error::invalid("query must have at least one frame"));
    }
    if 1 + total_frames * cb.n_t() > context_len {
        return Err(Error::invalid(format!(
            "prompt of {} frames exceeds context of {context_len} positions",
            total_frames
        )));
    }
    let mut ids = Vec::with_capacity(1 + total_frames * cb.n_t());
    ids.push(cb.bos_id());
    for demo in demos {
        let seq = encode_clip(demo, cb, false)?;
        ids.extend(seq.ids);
    }
    let seq = encode_clip(query, cb, false)?;
    ids.extend(seq.ids);
    let prompt = TokenSequence::new(ids, cb.n_t(), true, false)?;
    debug_assert!(prompt.validate(cb).is_ok());
    Ok(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Sampling {
    /// Deterministic argmax decoding; the evaluation default.
    Greedy,
    /// Top-k sampling at a temperature; seeded.
    TopK { k: usize, temperature: f64, seed: u64 },
}

/// Pick a token from logits. Special ids (>= n_codes) are remapped to the
/// highest-probability code id; the training layout guarantees specials only
/// at sequence ends, but sampling can still propose them mid-frame.
pub fn sample_token(logits: &[f32], n_codes: usize, sampling: &Sampling, rng: &mut impl Rng) -> u16 {
    let id = match sampling {
        Sampling::Greedy => argmax(logits),
        Sampling::TopK { k, temperature, seed: _ } => {
            let k = (*k).max(1).min(logits.len());
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            // stable order: by logit descending, then index ascending
            idx.sort_by(|&a, &b| {
                logits[b]
                    .partial_cmp(&logits[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let top = &idx[..k];
            let max = logits[top[0]] as f64;
            let t = temperature.max(1e-12);
            let weights: Vec<f64> = top
                .iter()
                .map(|&i| ((logits[i] as f64 - max) / t).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = top[k - 1];
            for (i, &w) in weights.iter().enumerate() {
                if target < w {
                    chosen = top[i];
                    break;
                }
                target -= w;
            }
            chosen
        }
    };
    if id >= n_codes {
        argmax(&logits[..n_codes]) as u16
    } else {
        id as u16
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// Sampling in the enum carries its own seed; split it off before the loop.
impl Sampling {
    fn rng(&self) -> rand_chacha::ChaCha8Rng {
        match self {
            Sampling::Greedy => seeds::rng_for(0, "greedy-unused"),
            Sampling::TopK { seed, .. } => seeds::rng_for(*seed, "sampling"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenCapture {
    pub hiddens: bool,
    pub attention: bool,
}

impl GenCapture {
    pub fn none() -> Self {
        GenCapture {
            hiddens: false,
            attention: false,
        }
    }

    pub fn hiddens() -> Self {
        GenCapture {
            hiddens: true,
            attention: false,
        }
    }
}

/// One imitation result: the prompt, the generated continuation, captured
/// hiddens/attention for the generated span, and the labels in play.
#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub prompt: TokenSequence,
    pub generated_ids: Vec<u16>,
    pub generated_frames: Vec<Frame>,
    /// Final-layer hiddens for each generated token, when captured.
    pub last_hidden: Option<Vec<Vec<f32>>>,
    /// Last-layer attention rows (heads x positions) per generated token.
    pub attention: Option<Vec<Mat<f32>>>,
    pub condition: DemonstrationKind,
    pub query_clip_id: u32,
    pub query_label: ActionClass,
    pub demo_labels: Vec<ActionClass>,
    pub oracle_prediction: OraclePrediction,
}

/// Autoregressively emit exactly `gen_frames * n_t` tokens after the prompt
/// and decode them. Greedy mode is deterministic in (model, prompt).
#[allow(clippy::too_many_arguments)]
pub fn generate(
    params: &Params<f32>,
    cfg: &ModelConfig,
    cb: &Codebook,
    prompt: &TokenSequence,
    gen_frames: usize,
    sampling: &Sampling,
    capture: GenCapture,
    cond: Option<usize>,
) -> Result<(Vec<u16>, Vec<Frame>, Option<Vec<Vec<f32>>>, Option<Vec<Mat<f32>>>)> {
    if !prompt.has_bos || prompt.has_eos {
        return Err(Error::invalid("prompt must carry bos and no eos"));
    }
    let n_gen = gen_frames * cb.n_t();
    let total = prompt.ids.len() + n_gen + usize::from(cond.is_some());
    if total > cfg.context_len {
        return Err(Error::invalid(format!(
            "prompt plus {n_gen} generated tokens exceed context_len {}",
            cfg.context_len
        )));
    }
    let mut rng = sampling.rng();
    let mut dec = Decoder::new(params, cfg, capture.hiddens, capture.attention);
    dec.prefill(&prompt.ids, cond)?;
    let mut out = Vec::with_capacity(n_gen);
    for _ in 0..n_gen {
        let tok = sample_token(dec.last_logits(), cb.k, sampling, &mut rng);
        dec.step(tok)?;
        out.push(tok);
    }
    let frames: Result<Vec<Frame>> = out.chunks(cb.n_t()).map(|c| decode_tokens(c, cb)).collect();
    let hiddens = capture.hiddens.then(|| std::mem::take(&mut dec.hiddens));
    let attn = capture.attention.then(|| std::mem::take(&mut dec.attn_rows));
    Ok((out, frames?, hiddens, attn))
}

/// How prompts are composed for evaluation runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptComposition {
    pub frames_per_demo: usize,
    pub query_frames: usize,
    pub gen_frames: usize,
}

impl Default for PromptComposition {
    fn default() -> Self {
        // one 8-frame demo, 4-frame query, 4 generated frames
        PromptComposition {
            frames_per_demo: 8,
            query_frames: 4,
            gen_frames: 4,
        }
    }
}

/// Run one imitation query end to end: sample demos, build the prompt,
/// generate, decode and classify.
#[allow(clippy::too_many_arguments)]
pub fn run_query(
    params: &Params<f32>,
    cfg: &ModelConfig,
    cb: &Codebook,
    dataset: &Dataset,
    query: &ClipEntry,
    demo_pool: &[ClipEntry],
    kind: DemonstrationKind,
    k: usize,
    comp: &PromptComposition,
    sampling: &Sampling,
    capture: GenCapture,
    seed: u64,
    cond: Option<usize>,
) -> Result<GenerationResult> {
    let spec = DemonstrationSpec {
        kind,
        k: if kind == DemonstrationKind::None { 0 } else { k },
        frames_per_demo: comp.frames_per_demo,
        seed,
    };
    let demo_entries = sample_demonstration(&spec, demo_pool, query)?;
    let demo_clips: Vec<Vec<Frame>> = demo_entries
        .iter()
        .map(|e| {
            dataset
                .load_clip(e)
                .map(|c| c.frames[..comp.frames_per_demo].to_vec())
        })
        .collect::<Result<_>>()?;
    let query_clip = dataset.load_clip(query)?;
    if query_clip.frames.len() < comp.query_frames {
        return Err(Error::invalid("query clip shorter than query_frames"));
    }
    let demo_slices: Vec<&[Frame]> = demo_clips.iter().map(|c| c.as_slice()).collect();
    let prompt = build_prompt(
        &demo_slices,
        &query_clip.frames[..comp.query_frames],
        cb,
        cfg.context_len,
    )?;
    let (generated_ids, generated_frames, last_hidden, attention) = generate(
        params,
        cfg,
        cb,
        &prompt,
        comp.gen_frames,
        sampling,
        capture,
        cond,
    )?;
    let oracle_prediction = crate::worldgen::oracle_classify(&generated_frames)?;
    Ok(GenerationResult {
        prompt,
        generated_ids,
        generated_frames,
        last_hidden,
        attention,
        condition: kind,
        query_clip_id: query.clip_id,
        query_label: query.label(),
        demo_labels: demo_entries.iter().map(|e| e.label()).collect(),
        oracle_prediction,
    })
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    query_label: &'a str,
    demo_labels: Vec<&'a str>,
    condition: &'a str,
    oracle_prediction: String,
}

/// Dump a result as a VIML clip plus JSON sidecar.
pub fn dump_result(dir: &Path, stem: &str, result: &GenerationResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_viml(&dir.join(format!("{stem}.viml")), &result.generated_frames)?;
    let sidecar = Sidecar {
        query_label: result.query_label.name(),
        demo_labels: result.demo_labels.iter().map(|l| l.name()).collect(),
        condition: result.condition.name(),
        oracle_prediction: match result.oracle_prediction {
            OraclePrediction::Class(c) => c.name().to_string(),
            OraclePrediction::Unknown => "Unknown".to_string(),
        },
    };
    let json =
        serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(())
}
