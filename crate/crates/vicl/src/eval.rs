//! Semantic-accuracy and visual-quality metrics, plus the four-condition
//! evaluation suite.
//!
//! V-Acc scores generated clips with the analytic motion oracle against
//! either the query label or the demonstration label. P-Acc trains a
//! multinomial logistic probe on mean-pooled last-layer hiddens of generated
//! spans. Visual quality uses PSNR against the ground-truth continuation and
//! a Fréchet distance between Gaussians fit to 8-dim oracle features.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::inference::{
    run_query, DemonstrationKind, GenCapture, GenerationResult, PromptComposition, Sampling,
};
use crate::math::{sym_eigen, Mat};
use crate::model::{ModelConfig, Params};
use crate::seeds;
use crate::tokenizer::Codebook;
use crate::worldgen::{motion_stats, ClipEntry, Dataset, Frame, Split, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Query,
    Demonstration,
}

impl LabelSource {
    pub fn name(self) -> &'static str {
        match self {
            LabelSource::Query => "query",
            LabelSource::Demonstration => "demonstration",
        }
    }
}

/// Fraction of results whose oracle prediction matches the reference label.
/// Unknown counts as wrong. Demonstration scoring uses the shared label of
/// the demo clips.
pub fn v_acc(results: &[GenerationResult], source: LabelSource) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("empty result set"));
    }
    let mut hits = 0usize;
    for r in results {
        let label = match source {
            LabelSource::Query => r.query_label,
            LabelSource::Demonstration => *r
                .demo_labels
                .first()
                .ok_or_else(|| Error::invalid("demonstration scoring needs demos"))?,
        };
        if r.oracle_prediction.matches(label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Per-frame PSNR in dB against MAX = 1.0, averaged over frames. Perfect
/// frames (MSE < 1e-10) cap at 100 dB.
pub fn psnr(gen: &[Frame], reference: &[Frame]) -> Result<f64> {
    if gen.len() != reference.len() || gen.is_empty() {
        return Err(Error::invalid("frame count mismatch"));
    }
    let mut total = 0.0f64;
    for (a, b) in gen.iter().zip(reference) {
        if a.width != b.width || a.height != b.height {
            return Err(Error::invalid("frame shape mismatch"));
        }
        let mut mse = 0.0f64;
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            let d = (*x - *y) as f64;
            mse += d * d;
        }
        mse /= a.pixels.len() as f64;
        total += if mse < 1e-10 {
            100.0
        } else {
            (10.0 * (1.0 / mse).log10()).min(100.0)
        };
    }
    Ok(total / gen.len() as f64)
}

/// 8-dim oracle feature vector of a clip: mean centroid (x,y), total
/// displacement (x,y), relative mass trend, mean mass, per-step displacement
/// variance (x,y). Label-sensitive and cheap; an FID analog, not FID.
pub fn clip_features(frames: &[Frame]) -> Result<Vec<f64>> {
    let s = motion_stats(frames)?;
    let trend = if s.mass_rel.is_finite() {
        s.mass_rel.clamp(-10.0, 10.0)
    } else {
        10.0
    };
    Ok(vec![
        s.mean_x, s.mean_y, s.disp_x, s.disp_y, trend, s.mean_mass, s.step_var_x, s.step_var_y,
    ])
}

fn mean_and_cov(set: &[Vec<f64>]) -> (Vec<f64>, Mat<f64>) {
    let n = set.len();
    let d = set[0].len();
    let mut mean = vec![0.0f64; d];
    for x in set {
        for j in 0..d {
            mean[j] += x[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Mat::<f64>::zeros(d, d);
    for x in set {
        for i in 0..d {
            for j in 0..d {
                cov.data[i * d + j] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    // sample covariance
    for v in cov.data.iter_mut() {
        *v /= (n - 1) as f64;
    }
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// clamp at zero.
fn sqrtm_psd(a: &Mat<f64>) -> Mat<f64> {
    let d = a.rows;
    let (vals, vecs) = sym_eigen(a);
    let mut out = Mat::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += vecs.at(i, k) * vals[k].max(0.0).sqrt() * vecs.at(j, k);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Fréchet distance between Gaussians fit to two feature sets:
/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}).
pub fn feature_frechet(gen_set: &[Vec<f64>], ref_set: &[Vec<f64>]) -> Result<f64> {
    if gen_set.is_empty() || ref_set.is_empty() {
        return Err(Error::invalid("empty feature set"));
    }
    let d = gen_set[0].len();
    if gen_set.len() < 2 * d || ref_set.len() < 2 * d {
        return Err(Error::invalid(format!(
            "need at least {} samples per set, got {} and {}",
            2 * d,
            gen_set.len(),
            ref_set.len()
        )));
    }
    let (m1, s1) = mean_and_cov(gen_set);
    let (m2, s2) = mean_and_cov(ref_set);
    let mut dist = 0.0f64;
    for j in 0..d {
        let diff = m1[j] - m2[j];
        dist += diff * diff;
    }
    // tr(S1 + S2)
    for j in 0..d {
        dist += s1.at(j, j) + s2.at(j, j);
    }
    // tr((S1 S2)^{1/2}) via the symmetric form sqrt(S1) S2 sqrt(S1)
    let r1 = sqrtm_psd(&s1);
    let mut tmp = Mat::<f64>::zeros(d, d);
    crate::math::matmul(1.0, &r1, crate::math::Op::N, &s2, crate::math::Op::N, 0.0, &mut tmp);
    let mut b = Mat::<f64>::zeros(d, d);
    crate::math::matmul(1.0, &tmp, crate::math::Op::N, &r1, crate::math::Op::N, 0.0, &mut b);
    // enforce symmetry before the eigensolve
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (b.at(i, j) + b.at(j, i));
            b.set(i, j, avg);
            b.set(j, i, avg);
        }
    }
    let (vals, _) = sym_eigen(&b);
    let tr_sqrt: f64 = vals.iter().map(|&v| v.max(0.0).sqrt()).sum();
    dist -= 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}

// ---------------------------------------------------------------------------
// Probing classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 500,
            lr: 0.1,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on mean-pooled hiddens. Features are
/// z-scored per dimension (statistics from the training set) and scaled by
/// 1/sqrt(dim), which keeps full-batch gradient descent at lr 0.1 in the
/// monotone regime.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub weights: Mat<f64>,
    pub bias: Vec<f64>,
    pub feat_mean: Vec<f64>,
    pub feat_scale: Vec<f64>,
    pub classes: usize,
    /// Condition tags of the training generations.
    pub trained_on: String,
}

pub const MIN_PROBE_SAMPLES_PER_CLASS: usize = 20;

/// Mean over the generated-span hiddens; the probe's pooling choice.
pub fn mean_pool(hiddens: &[Vec<f32>]) -> Vec<f64> {
    let d = hiddens[0].len();
    let mut out = vec![0.0f64; d];
    for h in hiddens {
        for j in 0..d {
            out[j] += h[j] as f64;
        }
    }
    for v in out.iter_mut() {
        *v /= hiddens.len() as f64;
    }
    out
}

impl ProbeModel {
    fn features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.feat_mean[j]) * self.feat_scale[j])
            .collect()
    }

    fn logits(&self, feats: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                self.bias[c]
                    + self.weights.row(c).iter().zip(feats).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, pooled: &[f64]) -> usize {
        let feats = self.features(pooled);
        let logits = self.logits(&feats);
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Train the probe on (mean-pooled hidden, label) pairs. Every class needs
/// at least [`MIN_PROBE_SAMPLES_PER_CLASS`] examples. Returns the model and
/// the per-step training losses.
pub fn train_probe(
    samples: &[(Vec<f64>, usize)],
    n_classes: usize,
    cfg: &ProbeConfig,
    trained_on: &str,
) -> Result<(ProbeModel, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("no probe training samples"));
    }
    let mut per_class = vec![0usize; n_classes];
    for (_, y) in samples {
        if *y >= n_classes {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        per_class[*y] += 1;
    }
    if let Some(missing) = per_class.iter().position(|&c| c < MIN_PROBE_SAMPLES_PER_CLASS) {
        return Err(Error::invalid(format!(
            "class {missing} has {} probe samples, needs {MIN_PROBE_SAMPLES_PER_CLASS}",
            per_class[missing]
        )));
    }
    let d = samples[0].0.len();
    let n = samples.len();

    // z-score statistics from the training set
    let mut mean = vec![0.0f64; d];
    for (x, _) in samples {
        for j in 0..d {
            mean[j] += x[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for (x, _) in samples {
        for j in 0..d {
            let c = x[j] - mean[j];
            var[j] += c * c;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|&v| 1.0 / ((v / n as f64).sqrt().max(1e-6) * (d as f64).sqrt()))
        .collect();

    let feats: Vec<Vec<f64>> = samples
        .iter()
        .map(|(x, _)| {
            x.iter()
                .enumerate()
                .map(|(j, &v)| (v - mean[j]) * scale[j])
                .collect()
        })
        .collect();

    let mut rng = seeds::rng_for(cfg.seed, "probe-init");
    let mut w = Mat::<f64>::zeros(n_classes, d);
    for v in w.data.iter_mut() {
        *v = (rng.gen::<f64>() - 0.5) * 0.02;
    }
    let mut b = vec![0.0f64; n_classes];
    let mut losses = Vec::with_capacity(cfg.steps);

    let mut probs = vec![0.0f64; n_classes];
    let mut gw = Mat::<f64>::zeros(n_classes, d);
    let mut gb = vec![0.0f64; n_classes];
    for _ in 0..cfg.steps {
        gw.fill(0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
        let mut loss = 0.0f64;
        for (i, (_, y)) in samples.iter().enumerate() {
            let x = &feats[i];
            let mut max = f64::NEG_INFINITY;
            for c in 0..n_classes {
                probs[c] = b[c] + w.row(c).iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>();
                max = max.max(probs[c]);
            }
            let mut z = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            loss -= (probs[*y] / z).ln();
            for c in 0..n_classes {
                let g = probs[c] / z - if c == *y { 1.0 } else { 0.0 };
                gb[c] += g;
                for (gj, xj) in gw.row_mut(c).iter_mut().zip(x) {
                    *gj += g * xj;
                }
            }
        }
        loss /= n as f64;
        // l2 on weights only
        let wnorm: f64 = w.data.iter().map(|v| v * v).sum();
        loss += 0.5 * cfg.l2 * wnorm;
        losses.push(loss);
        for c in 0..n_classes {
            b[c] -= cfg.lr * gb[c] / n as f64;
            for (wv, gv) in w.row_mut(c).iter_mut().zip(gw.row(c)) {
                *wv -= cfg.lr * (gv / n as f64 + cfg.l2 * *wv);
            }
        }
    }
    Ok((
        ProbeModel {
            weights: w,
            bias: b,
            feat_mean: mean,
            feat_scale: scale,
            classes: n_classes,
            trained_on: trained_on.to_string(),
        },
        losses,
    ))
}

/// Accuracy of a trained probe on held-out (pooled hidden, label) pairs.
pub fn p_acc(probe: &ProbeModel, samples: &[(Vec<f64>, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("empty probe evaluation set"));
    }
    let hits = samples
        .iter()
        .filter(|(x, y)| probe.predict(x) == *y)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Condition suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteOptions {
    /// Conditions scored against the query label (ground-truth setting).
    pub query_scored: Vec<DemonstrationKind>,
    /// Conditions scored against the demonstration label.
    pub demo_scored: Vec<DemonstrationKind>,
    pub n_queries: usize,
    /// Disjoint queries generated per condition to train the probes on.
    pub n_probe_queries: usize,
    pub composition: PromptComposition,
    pub demos_k: usize,
    pub seed: u64,
    pub model_hash: String,
}

impl SuiteOptions {
    pub fn standard(n_queries: usize, n_probe_queries: usize, seed: u64, model_hash: String) -> Self {
        SuiteOptions {
            query_scored: vec![
                DemonstrationKind::None,
                DemonstrationKind::Random,
                DemonstrationKind::InClass,
            ],
            demo_scored: vec![
                DemonstrationKind::Random,
                DemonstrationKind::InClass,
                DemonstrationKind::Contrastive,
            ],
            n_queries,
            n_probe_queries,
            composition: PromptComposition::default(),
            demos_k: 1,
            seed,
            model_hash,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub condition: DemonstrationKind,
    pub label_source: LabelSource,
    pub v_acc: f64,
    pub p_acc: f64,
    pub psnr_db: f64,
    pub frechet: f64,
    pub n: usize,
    pub seed: u64,
    pub model_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub seed: u64,
    pub model_hash: String,
}

impl EvalReport {
    /// Fixed columns: condition,label_source,v_acc,p_acc,psnr_db,frechet,n,seed,model_hash
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,label_source,v_acc,p_acc,psnr_db,frechet,n,seed,model_hash\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                r.condition.name(),
                r.label_source.name(),
                r.v_acc,
                r.p_acc,
                r.psnr_db,
                r.frechet,
                r.n,
                r.seed,
                r.model_hash
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn row(&self, condition: DemonstrationKind, source: LabelSource) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.label_source == source)
    }
}

fn demo_label_of(r: &GenerationResult) -> Result<usize> {
    r.demo_labels
        .first()
        .map(|l| l.id())
        .ok_or_else(|| Error::invalid("no demonstration label"))
}

/// Run the evaluation suite: per condition, sample queries from the test
/// split, build prompts with demos drawn from the val split, greedy-decode,
/// and compute all metrics. Probes are trained per run on a disjoint query
/// set; the demo-label probe trains on in-class plus contrastive
/// generations. Deterministic in (options, dataset, model).
pub fn run_condition_suite(
    params: &Params<f32>,
    cfg: &ModelConfig,
    cb: &Codebook,
    dataset: &Dataset,
    opts: &SuiteOptions,
) -> Result<EvalReport> {
    let comp = &opts.composition;
    let needed = comp.query_frames + comp.gen_frames;
    let test_pool: Vec<ClipEntry> = dataset
        .manifest
        .split(Split::Test)
        .filter(|e| e.n_frames >= needed)
        .cloned()
        .collect();
    let demo_pool: Vec<ClipEntry> = dataset
        .manifest
        .split(Split::Val)
        .filter(|e| e.n_frames >= comp.frames_per_demo)
        .cloned()
        .collect();
    if test_pool.len() < 2 {
        return Err(Error::invalid("test split too small"));
    }
    if opts.demo_scored.contains(&DemonstrationKind::None) {
        return Err(Error::invalid("kind=None cannot be demo-label scored"));
    }

    // disjoint clip pools for probe training vs evaluation, stratified so
    // both cover every class
    let mut probe_pool: Vec<ClipEntry> = Vec::new();
    let mut eval_pool: Vec<ClipEntry> = Vec::new();
    let mut rng = seeds::rng_for(opts.seed, "pool-split");
    for class in 0..NUM_CLASSES {
        let mut of_class: Vec<ClipEntry> = test_pool
            .iter()
            .filter(|e| e.class_id == class)
            .cloned()
            .collect();
        if of_class.len() < 2 {
            return Err(Error::invalid(format!(
                "test split needs at least 2 clips of class {class} for disjoint probe/eval pools"
            )));
        }
        for i in (1..of_class.len()).rev() {
            let j = rng.gen_range(0..=i);
            of_class.swap(i, j);
        }
        let cut = (of_class.len() * 2 / 5).max(1);
        probe_pool.extend_from_slice(&of_class[..cut]);
        eval_pool.extend_from_slice(&of_class[cut..]);
    }

    // every condition that needs generations
    let mut conditions: Vec<DemonstrationKind> = Vec::new();
    for c in opts.query_scored.iter().chain(&opts.demo_scored) {
        if !conditions.contains(c) {
            conditions.push(*c);
        }
    }
    if !opts.demo_scored.is_empty() {
        for c in [DemonstrationKind::InClass, DemonstrationKind::Contrastive] {
            if !conditions.contains(&c) {
                conditions.push(c);
            }
        }
    }

    // queries cycle through classes round-robin, clip uniform within class
    let gen_for = |pool: &[ClipEntry],
                   kind: DemonstrationKind,
                   count: usize,
                   stream: &str|
     -> Result<Vec<GenerationResult>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % NUM_CLASSES;
            let of_class: Vec<&ClipEntry> =
                pool.iter().filter(|e| e.class_id == class).collect();
            let mut qrng =
                seeds::rng_for_indexed(opts.seed, &format!("{stream}-{}", kind.name()), i as u64);
            let query = of_class[qrng.gen_range(0..of_class.len())];
            let demo_seed = seeds::indexed_seed(
                opts.seed,
                &format!("{stream}-demos-{}", kind.name()),
                i as u64,
            );
            out.push(run_query(
                params,
                cfg,
                cb,
                dataset,
                query,
                &demo_pool,
                kind,
                opts.demos_k,
                comp,
                &Sampling::Greedy,
                GenCapture::hiddens(),
                demo_seed,
                None,
            )?);
        }
        Ok(out)
    };

    let mut eval_gens: std::collections::HashMap<&'static str, Vec<GenerationResult>> =
        std::collections::HashMap::new();
    let mut probe_gens: std::collections::HashMap<&'static str, Vec<GenerationResult>> =
        std::collections::HashMap::new();
    for &kind in &conditions {
        eval_gens.insert(kind.name(), gen_for(&eval_pool, kind, opts.n_queries, "eval")?);
        probe_gens.insert(
            kind.name(),
            gen_for(&probe_pool, kind, opts.n_probe_queries, "probe")?,
        );
    }

    let pooled = |r: &GenerationResult| -> Vec<f64> {
        mean_pool(r.last_hidden.as_ref().expect("hiddens captured"))
    };

    // demo-label probe: in-class + contrastive probe generations
    let demo_probe = if !opts.demo_scored.is_empty() {
        let mut train: Vec<(Vec<f64>, usize)> = Vec::new();
        for kind in [DemonstrationKind::InClass, DemonstrationKind::Contrastive] {
            for r in &probe_gens[kind.name()] {
                train.push((pooled(r), demo_label_of(r)?));
            }
        }
        let probe_cfg = ProbeConfig {
            seed: seeds::derive_seed(opts.seed, "demo-probe"),
            ..ProbeConfig::default()
        };
        Some(train_probe(&train, NUM_CLASSES, &probe_cfg, "inclass+contrastive")?.0)
    } else {
        None
    };

    let mut rows = Vec::new();

    for (source, kinds) in [
        (LabelSource::Query, &opts.query_scored),
        (LabelSource::Demonstration, &opts.demo_scored),
    ] {
        for &kind in kinds {
            let gens = &eval_gens[kind.name()];
            let va = v_acc(gens, source)?;

            // probe for this row
            let pa = match source {
                LabelSource::Query => {
                    let train: Vec<(Vec<f64>, usize)> = probe_gens[kind.name()]
                        .iter()
                        .map(|r| (pooled(r), r.query_label.id()))
                        .collect();
                    let probe_cfg = ProbeConfig {
                        seed: seeds::derive_seed(opts.seed, &format!("probe-{}", kind.name())),
                        ..ProbeConfig::default()
                    };
                    let (probe, _) = train_probe(&train, NUM_CLASSES, &probe_cfg, kind.name())?;
                    let test: Vec<(Vec<f64>, usize)> =
                        gens.iter().map(|r| (pooled(r), r.query_label.id())).collect();
                    p_acc(&probe, &test)?
                }
                LabelSource::Demonstration => {
                    let probe = demo_probe.as_ref().expect("demo probe");
                    let test: Result<Vec<(Vec<f64>, usize)>> = gens
                        .iter()
                        .map(|r| Ok((pooled(r), demo_label_of(r)?)))
                        .collect();
                    p_acc(probe, &test?)?
                }
            };

            // visual quality against ground-truth continuations
            let mut psnr_total = 0.0f64;
            let mut gen_feats = Vec::with_capacity(gens.len());
            let mut ref_feats = Vec::with_capacity(gens.len());
            for r in gens {
                let gt = ground_truth_continuation(dataset, r, comp)?;
                psnr_total += psnr(&r.generated_frames, &gt)?;
                gen_feats.push(clip_features(&r.generated_frames)?);
                ref_feats.push(clip_features(&gt)?);
            }
            let fr = feature_frechet(&gen_feats, &ref_feats)?;

            rows.push(EvalRow {
                condition: kind,
                label_source: source,
                v_acc: va,
                p_acc: pa,
                psnr_db: psnr_total / gens.len() as f64,
                frechet: fr,
                n: gens.len(),
                seed: opts.seed,
                model_hash: opts.model_hash.clone(),
            });
        }
    }

    Ok(EvalReport {
        rows,
        seed: opts.seed,
        model_hash: opts.model_hash.clone(),
    })
}

/// The query clip's true continuation frames, used as the PSNR/Fréchet
/// reference.
fn ground_truth_continuation(
    dataset: &Dataset,
    r: &GenerationResult,
    comp: &PromptComposition,
) -> Result<Vec<Frame>> {
    let entry = dataset
        .manifest
        .clips
        .iter()
        .find(|e| e.clip_id == r.query_clip_id)
        .ok_or_else(|| Error::NotFound(format!("query clip {}", r.query_clip_id)))?;
    let clip = dataset.load_clip(entry)?;
    if clip.frames.len() < comp.query_frames + comp.gen_frames {
        return Err(Error::invalid("query clip lacks continuation frames"));
    }
    Ok(clip.frames[comp.query_frames..comp.query_frames + comp.gen_frames].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tokenizer::fit_codebook;
    use crate::worldgen::{
        gen_clip, gen_dataset, render_sprite, ActionClass, DatasetSpec, OraclePrediction,
        SpriteShape,
    };

    fn fake_result(pred: OraclePrediction, query: ActionClass, demo: Option<ActionClass>) -> GenerationResult {
        GenerationResult {
            prompt: crate::tokenizer::TokenSequence::new(vec![], 1, false, false).unwrap(),
            generated_ids: vec![],
            generated_frames: vec![],
            last_hidden: None,
            attention: None,
            condition: DemonstrationKind::InClass,
            query_clip_id: 0,
            query_label: query,
            demo_labels: demo.into_iter().collect(),
            oracle_prediction: pred,
        }
    }

    #[test]
    fn v_acc_counts_matches_and_unknowns() {
        let all_match: Vec<GenerationResult> = (0..5)
            .map(|_| {
                fake_result(
                    OraclePrediction::Class(ActionClass::Grow),
                    ActionClass::Grow,
                    Some(ActionClass::Grow),
                )
            })
            .collect();
        assert_eq!(v_acc(&all_match, LabelSource::Query).unwrap(), 1.0);
        let unknowns: Vec<GenerationResult> = (0..4)
            .map(|_| fake_result(OraclePrediction::Unknown, ActionClass::Grow, None))
            .collect();
        assert_eq!(v_acc(&unknowns, LabelSource::Query).unwrap(), 0.0);
        assert!(v_acc(&[], LabelSource::Query).is_err());
        // demo-label scoring against the contrast label
        let contr = vec![fake_result(
            OraclePrediction::Class(ActionClass::Shrink),
            ActionClass::Grow,
            Some(ActionClass::Shrink),
        )];
        assert_eq!(v_acc(&contr, LabelSource::Query).unwrap(), 0.0);
        assert_eq!(v_acc(&contr, LabelSource::Demonstration).unwrap(), 1.0);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = render_sprite(SpriteShape::Square, 10.0, 10.0, 6.0, 0.9);
        let b = render_sprite(SpriteShape::Square, 20.0, 20.0, 6.0, 0.9);
        // identical clips cap at 100 dB
        assert_eq!(psnr(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap(), 100.0);
        // constant difference with MSE 0.01 gives exactly 20 dB
        let zero = Frame::zeros(8, 8);
        let tenth = Frame {
            width: 8,
            height: 8,
            pixels: vec![0.1; 64],
        };
        let v = psnr(&[zero.clone()], &[tenth.clone()]).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "psnr {v}");
        // symmetry
        let p1 = psnr(&[a.clone()], &[b.clone()]).unwrap();
        let p2 = psnr(&[b.clone()], &[a.clone()]).unwrap();
        assert_eq!(p1, p2);
        // scalar recomputation parity
        let mut mse = 0.0f64;
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            mse += ((x - y) as f64) * ((x - y) as f64);
        }
        mse /= a.pixels.len() as f64;
        assert!((p1 - 10.0 * (1.0 / mse).log10()).abs() < 1e-6);
        // shape mismatch
        assert!(psnr(&[a.clone()], &[zero]).is_err());
        assert!(psnr(&[a.clone()], &[]).is_err());
    }

    fn gaussian_samples(
        n: usize,
        mean: &[f64],
        std: &[f64],
        seed: u64,
    ) -> Vec<Vec<f64>> {
        let mut rng = seeds::rng_for(seed, "gauss");
        (0..n)
            .map(|_| {
                mean.iter()
                    .zip(std)
                    .map(|(&m, &s)| {
                        // Box-Muller
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen();
                        m + s * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let set = gaussian_samples(40, &[1.0, -2.0, 0.5], &[1.0, 0.5, 2.0], 3);
        let d = feature_frechet(&set, &set).unwrap();
        assert!(d.abs() < 1e-8, "distance {d}");
    }

    #[test]
    fn frechet_matches_closed_form_on_known_gaussians() {
        // diagonal covariances commute: closed form is
        // ||dmu||^2 + sum_i (s1_i - s2_i)^2
        let m1 = [0.0, 0.0];
        let m2 = [1.5, -0.5];
        let s1 = [1.0, 2.0];
        let s2 = [2.0, 0.5];
        let closed = {
            let dmu: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b) * (a - b)).sum();
            let cov: f64 = s1.iter().zip(&s2).map(|(a, b)| (a - b) * (a - b)).sum();
            dmu + cov
        };
        let a = gaussian_samples(20_000, &m1, &s1, 11);
        let b = gaussian_samples(20_000, &m2, &s2, 12);
        let d = feature_frechet(&a, &b).unwrap();
        assert!(
            (d - closed).abs() < 0.15,
            "sampled {d} vs closed form {closed}"
        );
        // identity covariances, explicit mean offset
        let a = gaussian_samples(20_000, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 13);
        let b = gaussian_samples(20_000, &[2.0, 0.0, -1.0], &[1.0, 1.0, 1.0], 14);
        let d = feature_frechet(&a, &b).unwrap();
        assert!((d - 5.0).abs() < 0.15, "offset case {d}");
    }

    #[test]
    fn frechet_is_symmetric_and_guards_sizes() {
        let a = gaussian_samples(50, &[0.0, 1.0], &[1.0, 1.5], 5);
        let b = gaussian_samples(60, &[0.5, 0.0], &[0.8, 1.0], 6);
        let d1 = feature_frechet(&a, &b).unwrap();
        let d2 = feature_frechet(&b, &a).unwrap();
        assert!((d1 - d2).abs() < 1e-6);
        assert!(d1 >= 0.0);
        let tiny = gaussian_samples(3, &[0.0, 0.0], &[1.0, 1.0], 7);
        assert!(feature_frechet(&tiny, &b).is_err());
    }

    fn separable_samples(per_class: usize, classes: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = seeds::rng_for(seed, "sep");
        let mut out = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                let mut x = vec![0.0f64; classes + 2];
                x[c] = 1.0;
                for v in x.iter_mut() {
                    *v += rng.gen::<f64>() * 0.05;
                }
                out.push((x, c));
            }
        }
        out
    }

    #[test]
    fn probe_reaches_one_on_separable_clusters() {
        let train = separable_samples(25, 6, 1);
        let test = separable_samples(10, 6, 2);
        let (probe, losses) = train_probe(&train, 6, &ProbeConfig::default(), "synthetic").unwrap();
        assert_eq!(p_acc(&probe, &test).unwrap(), 1.0);
        // training loss is monotone non-increasing under the fixed schedule
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn probe_on_permuted_labels_is_chance() {
        let mut accs = Vec::new();
        for seed in 0..5u64 {
            let mut train = separable_samples(25, 6, 100 + seed);
            // permute labels destroying the feature-label link
            let mut rng = seeds::rng_for(seed, "perm");
            for (_, y) in train.iter_mut() {
                *y = rng.gen_range(0..6);
            }
            // rebalance: permutation by reassignment may undershoot a class
            while train.iter().filter(|(_, y)| *y == 0).count() < MIN_PROBE_SAMPLES_PER_CLASS {
                let mut extra = separable_samples(1, 6, 999 + seed);
                extra[0].1 = 0;
                train.push(extra.swap_remove(0));
            }
            let test = {
                let mut t = separable_samples(40, 6, 200 + seed);
                let mut rng = seeds::rng_for(seed + 50, "perm2");
                for (_, y) in t.iter_mut() {
                    *y = rng.gen_range(0..6);
                }
                t
            };
            let cfg = ProbeConfig {
                seed,
                ..ProbeConfig::default()
            };
            let (probe, _) = train_probe(&train, 6, &cfg, "permuted").unwrap();
            accs.push(p_acc(&probe, &test).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(
            (mean - 1.0 / 6.0).abs() < 0.05,
            "permuted-label accuracy {mean} (per-seed {accs:?})"
        );
    }

    #[test]
    fn probe_rejects_missing_class() {
        let mut train = separable_samples(25, 6, 1);
        train.retain(|(_, y)| *y != 3);
        assert!(train_probe(&train, 6, &ProbeConfig::default(), "x").is_err());
    }

    #[test]
    fn condition_suite_structure_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_per_class: 30,
            n_frames: 8,
            seed: 41,
        };
        gen_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let mut frames = Vec::new();
        for e in ds.manifest.split(Split::Train).take(30) {
            frames.extend(ds.load_clip(e).unwrap().frames);
        }
        let cb = fit_codebook(&frames, 64, 4, 3).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_mlp: 32,
            vocab: cb.vocab(),
            context_len: 600,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            cond_classes: None,
        };
        let params = init_params(&cfg, 2).unwrap();
        let mut opts = SuiteOptions::standard(24, 126, 7, "aabbcc".into());
        opts.composition = PromptComposition {
            frames_per_demo: 4,
            query_frames: 2,
            gen_frames: 2,
        };
        let report = run_condition_suite(&params, &cfg, &cb, &ds, &opts).unwrap();
        // one row per (condition, label_source) pair requested
        assert_eq!(report.rows.len(), 6);
        assert!(report
            .row(DemonstrationKind::None, LabelSource::Query)
            .is_some());
        assert!(report
            .row(DemonstrationKind::None, LabelSource::Demonstration)
            .is_none());
        assert!(report
            .row(DemonstrationKind::Contrastive, LabelSource::Demonstration)
            .is_some());
        for r in &report.rows {
            assert!((0.0..=1.0).contains(&r.v_acc));
            assert!((0.0..=1.0).contains(&r.p_acc));
            assert!(r.psnr_db >= 0.0);
            assert!(r.frechet >= 0.0);
            assert_eq!(r.n, 24);
        }
        // in-class rows coincide across label sources (labels identical)
        let q = report.row(DemonstrationKind::InClass, LabelSource::Query).unwrap();
        let d = report
            .row(DemonstrationKind::InClass, LabelSource::Demonstration)
            .unwrap();
        assert_eq!(q.v_acc, d.v_acc);
        // reruns are byte-identical
        let again = run_condition_suite(&params, &cfg, &cb, &ds, &opts).unwrap();
        assert_eq!(report.to_csv(), again.to_csv());
        assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());

        // demo-label scoring of None is rejected
        let mut bad = opts.clone();
        bad.demo_scored = vec![DemonstrationKind::None];
        assert!(run_condition_suite(&params, &cfg, &cb, &ds, &bad).is_err());
    }
}
