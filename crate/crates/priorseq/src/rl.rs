//! MLE warm start and self-critical REINFORCE training: constrained
//! rollouts sampled with a Gumbel sampler, best-of-k retention, a greedy
//! baseline decoded under the same constraint, and learning-rate annealing
//! on stalled validation reward.

use crate::corpus::{CaptionRecord, FeatureGrid, Split, END};
use crate::error::{Error, Result};
use crate::metrics::{
    bad_ending_rate, bleu4_corpus, bleu4_sentence, rouge_l_corpus, BadEndingLexicon, CiderScorer,
    CiderVariant,
};
use crate::neural::{clip_global_norm, AdamState, NamedTensors};
use crate::ngram::MaskVector;
use crate::policy::{DecodeConfig, Mode, PolicyParams, StepMask};
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Gumbel-max sampling from a (masked) probability vector: argmax over
/// on-mask ids of log p_i + G_i with standard Gumbel noise. Off-mask ids are
/// never returned.
pub fn gumbel_sample(
    probs: &[f64],
    mask: Option<&MaskVector>,
    rng: &mut ChaCha8Rng,
) -> Result<u32> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &p) in probs.iter().enumerate() {
        if let Some(m) = mask {
            if !m.allows(k as u32) {
                continue;
            }
        }
        if p <= 0.0 {
            continue;
        }
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let g = -(-u.ln()).ln();
        let score = p.ln() + g;
        match best {
            Some((_, s)) if s >= score => {}
            _ => best = Some((k, score)),
        }
    }
    match best {
        Some((k, _)) => Ok(k as u32),
        None => Err(Error::MaskEmpty),
    }
}

/// Captions joined with their feature grids, ready for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<(CaptionRecord, FeatureGrid)>,
}

impl Dataset {
    pub fn new(records: Vec<CaptionRecord>, grids: Vec<FeatureGrid>) -> Result<Self> {
        let mut by_id: std::collections::HashMap<&str, FeatureGrid> = grids
            .iter()
            .map(|g| (g.item_id.as_str(), g.clone()))
            .collect();
        let mut items = Vec::with_capacity(records.len());
        for r in records {
            let g = by_id
                .remove(r.item_id.as_str())
                .ok_or_else(|| Error::MissingFeature(r.item_id.clone()))?;
            items.push((r, g));
        }
        if items.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Dataset { items })
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, (r, _))| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Training-split references, END-stripped, for reward statistics.
    pub fn train_references(&self) -> Vec<Vec<Vec<u32>>> {
        self.items
            .iter()
            .filter(|(r, _)| r.split == Split::Train)
            .map(|(r, _)| r.references.iter().map(|s| strip_end(s)).collect())
            .collect()
    }
}

/// Drops the trailing END marker if present.
pub fn strip_end(tokens: &[u32]) -> Vec<u32> {
    match tokens.last() {
        Some(&w) if w == END => tokens[..tokens.len() - 1].to_vec(),
        _ => tokens.to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMetric {
    CiderD,
    Cider,
    Bleu4,
}

impl RewardMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cider-d" => Ok(RewardMetric::CiderD),
            "cider" => Ok(RewardMetric::Cider),
            "bleu4" => Ok(RewardMetric::Bleu4),
            other => Err(Error::Config(format!("unknown reward metric `{other}`"))),
        }
    }
}

/// Per-item sequence reward. tf-idf statistics are fixed from the training
/// references so rewards are stable across epochs.
pub struct RewardFn {
    metric: RewardMetric,
    cider: CiderScorer,
}

impl RewardFn {
    pub fn new(metric: RewardMetric, training_references: &[Vec<Vec<u32>>]) -> Self {
        RewardFn {
            metric,
            cider: CiderScorer::from_references(training_references),
        }
    }

    /// `candidate` and `references` must be END-stripped.
    pub fn score(&self, candidate: &[u32], references: &[Vec<u32>]) -> f64 {
        match self.metric {
            RewardMetric::CiderD => self.cider.score(candidate, references, CiderVariant::D),
            RewardMetric::Cider => self.cider.score(candidate, references, CiderVariant::Plain),
            RewardMetric::Bleu4 => bleu4_sentence(candidate, references).unwrap_or(0.0),
        }
    }
}

/// One item's retained rollout and its self-critical advantage.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub tokens: Vec<u32>,
    pub log_probs: Vec<f64>,
    pub reward: f64,
    pub baseline_tokens: Vec<u32>,
    pub baseline_reward: f64,
    pub advantage: f64,
    pub mask_sizes: Vec<usize>,
    pub fallbacks: u32,
}

/// Hyperparameters of the REINFORCE phase.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub reward: RewardMetric,
    /// Samples drawn per item; only the highest-reward one is kept.
    pub k: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub anneal_factor: f64,
    pub anneal_patience: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// When true, every sample contributes its own advantage-weighted
    /// gradient instead of the best one only.
    pub average_all_k: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            reward: RewardMetric::CiderD,
            k: 10,
            batch_size: 20,
            learning_rate: 5e-5,
            anneal_factor: 0.2,
            anneal_patience: 10,
            epochs: 30,
            max_len: 16,
            clip_norm: 5.0,
            seed: 0,
            average_all_k: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.anneal_patience < 1 {
            return Err(Error::Config(
                "need k >= 1 and anneal_patience >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Hyperparameters of the cross-entropy warm start.
#[derive(Debug, Clone, Copy)]
pub struct MleConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            learning_rate: 5e-4,
            batch_size: 20,
            epochs: 20,
            max_len: 16,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// Teacher-forced MLE over the training references. Tracks validation
/// CIDEr-D each epoch and restores the best-scoring parameters at the end.
/// Returns the per-epoch validation scores.
pub fn train_mle(
    policy: &mut PolicyParams,
    dataset: &Dataset,
    config: &MleConfig,
) -> Result<Vec<f64>> {
    let train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let reward = RewardFn::new(RewardMetric::CiderD, &dataset.train_references());
    let val_idx = dataset.indices_of(Split::Val);
    let mut adam = AdamState::new(config.learning_rate);
    let mut shuffle_rng = stream(config.seed, "mle-shuffle");
    let mut decode_rng = stream(config.seed, "mle-eval");
    let mut curve = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, PolicyParams)> = None;
    // (item, reference) pairs; each reference is its own training example.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &i in &train_idx {
        for r in 0..dataset.items[i].0.references.len() {
            pairs.push((i, r));
        }
    }
    for _ in 0..config.epochs {
        pairs.shuffle(&mut shuffle_rng);
        for chunk in pairs.chunks(config.batch_size) {
            let mut grads = policy.zeros_like();
            for &(i, r) in chunk {
                let (record, features) = &dataset.items[i];
                let target = &record.references[r];
                let truncated: Vec<u32> = target.iter().copied().take(config.max_len).collect();
                let (cache, _) = policy.run_teacher(features, &truncated)?;
                let coeffs = vec![1.0; cache.steps.len()];
                policy.backward_seq(features, &cache, &coeffs, &mut grads)?;
            }
            clip_global_norm(&mut grads, config.clip_norm);
            adam.update(policy, &grads)?;
        }
        let val = if val_idx.is_empty() {
            0.0
        } else {
            greedy_eval(policy, dataset, &val_idx, None, config.max_len, &reward, &mut decode_rng)?
        };
        curve.push(val);
        if !val_idx.is_empty() && best.as_ref().map_or(true, |(b, _)| val > *b) {
            best = Some((val, policy.clone()));
        }
    }
    // Without a validation split the final parameters stand as-is.
    if let Some((_, params)) = best {
        *policy = params;
    }
    Ok(curve)
}

/// Mean reward of greedy decodes over the given items.
fn greedy_eval(
    policy: &PolicyParams,
    dataset: &Dataset,
    indices: &[usize],
    prior: Option<&dyn StepMask>,
    max_len: usize,
    reward: &RewardFn,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let config = DecodeConfig {
        max_len,
        mode: Mode::Greedy,
        ..Default::default()
    };
    let mut sum = 0.0;
    for &i in indices {
        let (record, features) = &dataset.items[i];
        let out = policy.decode(features, &config, prior, rng)?;
        let refs: Vec<Vec<u32>> = record.references.iter().map(|r| strip_end(r)).collect();
        sum += reward.score(&strip_end(&out.tokens), &refs);
    }
    Ok(sum / indices.len().max(1) as f64)
}

/// Diagnostics of one REINFORCE batch update.
#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub mean_advantage: f64,
    pub mean_mask_size: f64,
    pub bad_ending_rate: f64,
    pub fallbacks: u32,
    pub grad_norm: f64,
    /// True when the accumulated gradient was exactly zero and the
    /// optimizer was not invoked.
    pub skipped: bool,
}

/// One self-critical REINFORCE update over a batch of items: draw k
/// constrained samples per item, keep the best, subtract the greedy
/// baseline decoded under the same constraint, and apply the clipped,
/// advantage-weighted log-likelihood gradient.
#[allow(clippy::too_many_arguments)]
pub fn self_critical_step(
    policy: &mut PolicyParams,
    dataset: &Dataset,
    batch: &[usize],
    config: &TrainConfig,
    prior: Option<&dyn StepMask>,
    reward: &RewardFn,
    adam: &mut AdamState,
    lexicon: Option<&BadEndingLexicon>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<RolloutRecord>, StepDiagnostics)> {
    config.validate()?;
    let sample_cfg = DecodeConfig {
        max_len: config.max_len,
        mode: Mode::Sample,
        ..Default::default()
    };
    let greedy_cfg = DecodeConfig {
        max_len: config.max_len,
        mode: Mode::Greedy,
        ..Default::default()
    };
    let mut grads = policy.zeros_like();
    let mut records = Vec::with_capacity(batch.len());
    let mut diag = StepDiagnostics::default();
    let mut mask_steps = 0usize;
    let mut mask_sum = 0usize;
    let mut sampled_seqs: Vec<Vec<u32>> = Vec::new();
    for &i in batch {
        let (record, features) = &dataset.items[i];
        let refs: Vec<Vec<u32>> = record.references.iter().map(|r| strip_end(r)).collect();
        let mut rollouts = Vec::with_capacity(config.k);
        for _ in 0..config.k {
            let out = policy.decode(features, &sample_cfg, prior, rng)?;
            let r = reward.score(&strip_end(&out.tokens), &refs);
            rollouts.push((out, r));
        }
        let baseline = policy.decode(features, &greedy_cfg, prior, rng)?;
        let baseline_reward = reward.score(&strip_end(&baseline.tokens), &refs);
        let best_idx = (0..rollouts.len())
            .max_by(|&a, &b| rollouts[a].1.partial_cmp(&rollouts[b].1).unwrap())
            .expect("k >= 1");
        if config.average_all_k {
            for (out, r) in &rollouts {
                let advantage = r - baseline_reward;
                if advantage != 0.0 {
                    let coeffs = vec![advantage / config.k as f64; out.cache.steps.len()];
                    policy.backward_seq(features, &out.cache, &coeffs, &mut grads)?;
                }
            }
        } else {
            let (out, r) = &rollouts[best_idx];
            let advantage = r - baseline_reward;
            if advantage != 0.0 {
                let coeffs = vec![advantage; out.cache.steps.len()];
                policy.backward_seq(features, &out.cache, &coeffs, &mut grads)?;
            }
        }
        let (best_out, best_reward) = rollouts.swap_remove(best_idx);
        diag.mean_reward += best_reward;
        diag.mean_baseline += baseline_reward;
        diag.mean_advantage += best_reward - baseline_reward;
        diag.fallbacks += best_out.fallbacks + baseline.fallbacks;
        mask_steps += best_out.mask_sizes.len();
        mask_sum += best_out.mask_sizes.iter().sum::<usize>();
        sampled_seqs.push(strip_end(&best_out.tokens));
        records.push(RolloutRecord {
            tokens: best_out.tokens.clone(),
            log_probs: best_out.log_probs.clone(),
            reward: best_reward,
            baseline_tokens: baseline.tokens,
            baseline_reward,
            advantage: best_reward - baseline_reward,
            mask_sizes: best_out.mask_sizes,
            fallbacks: best_out.fallbacks,
        });
    }
    let n = batch.len().max(1) as f64;
    diag.mean_reward /= n;
    diag.mean_baseline /= n;
    diag.mean_advantage /= n;
    diag.mean_mask_size = mask_sum as f64 / mask_steps.max(1) as f64;
    if let Some(lex) = lexicon {
        diag.bad_ending_rate = bad_ending_rate(&sampled_seqs, lex).0;
    }
    let norm_sq: f64 = grads
        .tensor_names()
        .iter()
        .map(|name| grads.tensor(name).data().iter().map(|g| g * g).sum::<f64>())
        .sum();
    diag.grad_norm = norm_sq.sqrt();
    if norm_sq == 0.0 {
        // Every advantage was zero: the update is exactly zero, so skip the
        // optimizer entirely (its moment decay would still move parameters).
        diag.skipped = true;
        return Ok((records, diag));
    }
    clip_global_norm(&mut grads, config.clip_norm);
    adam.update(policy, &grads)?;
    Ok((records, diag))
}

/// One learning-curve row per epoch.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub seconds: f64,
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub val_cider: f64,
    pub val_bleu4: f64,
    pub val_rouge_l: f64,
    pub bad_end_rate: f64,
    pub mean_mask_size: f64,
    pub fallbacks: u32,
    pub lr: f64,
}

pub const CURVE_HEADER: &str =
    "epoch,seconds,mean_reward,mean_baseline,val_cider,val_bleu4,val_rougeL,bad_end_rate,mean_mask_size,fallbacks,lr";

pub fn curve_to_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.3},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{},{:.8}",
            r.epoch,
            r.seconds,
            r.mean_reward,
            r.mean_baseline,
            r.val_cider,
            r.val_bleu4,
            r.val_rouge_l,
            r.bad_end_rate,
            r.mean_mask_size,
            r.fallbacks,
            r.lr
        );
    }
    out
}

pub fn write_learning_curve(path: &Path, rows: &[EpochRow]) -> Result<()> {
    std::fs::write(path, curve_to_csv(rows))?;
    Ok(())
}

/// Minimal SVG line chart of mean reward and validation score vs epoch.
pub fn write_curve_svg(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let max_y = rows
        .iter()
        .flat_map(|r| [r.mean_reward, r.val_cider])
        .fold(1e-9f64, f64::max);
    let max_x = rows.iter().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let point = |x: f64, y: f64| {
        (
            pad + x / max_x * (w - 2.0 * pad),
            h - pad - y / max_y * (h - 2.0 * pad),
        )
    };
    let path_for = |f: &dyn Fn(&EpochRow) -> f64| {
        rows.iter()
            .map(|r| {
                let (x, y) = point(r.epoch as f64, f(r));
                format!("{x:.1},{y:.1}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{reward}\"/>",
            "<polyline fill=\"none\" stroke=\"darkorange\" stroke-width=\"2\" points=\"{val}\"/>",
            "<text x=\"{lx}\" y=\"20\" fill=\"steelblue\">mean reward</text>",
            "<text x=\"{lx}\" y=\"36\" fill=\"darkorange\">validation score</text>",
            "</svg>"
        ),
        w = w,
        h = h,
        reward = path_for(&|r| r.mean_reward),
        val = path_for(&|r| r.val_cider),
        lx = pad
    );
    std::fs::write(path, svg)?;
    Ok(())
}

/// Validation-set scores of greedy decodes.
fn validation_scores(
    policy: &PolicyParams,
    dataset: &Dataset,
    val_idx: &[usize],
    prior: Option<&dyn StepMask>,
    max_len: usize,
    reward: &RewardFn,
    lexicon: Option<&BadEndingLexicon>,
    strip_endings: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64, f64)> {
    let config = DecodeConfig {
        max_len,
        mode: Mode::Greedy,
        ..Default::default()
    };
    let mut cands = Vec::with_capacity(val_idx.len());
    let mut refs: Vec<Vec<Vec<u32>>> = Vec::with_capacity(val_idx.len());
    for &i in val_idx {
        let (record, features) = &dataset.items[i];
        let out = policy.decode(features, &config, prior, rng)?;
        let mut cand = strip_end(&out.tokens);
        if strip_endings {
            if let Some(lex) = lexicon {
                cand = crate::metrics::strip_bad_ending(&cand, lex, false);
            }
        }
        cands.push(cand);
        refs.push(record.references.iter().map(|r| strip_end(r)).collect());
    }
    let cider = cands
        .iter()
        .zip(&refs)
        .map(|(c, r)| reward.score(c, r))
        .sum::<f64>()
        / cands.len().max(1) as f64;
    let bleu = bleu4_corpus(&cands, &refs)?;
    let rouge = rouge_l_corpus(&cands, &refs)?;
    let bad = lexicon.map_or(0.0, |lex| bad_ending_rate(&cands, lex).0);
    Ok((cider, bleu, rouge, bad))
}

/// Full REINFORCE phase: epochs of self-critical batches, per-epoch greedy
/// validation, and learning-rate annealing after `anneal_patience` epochs
/// without validation improvement. `strip_endings_for_eval` scores the
/// validation decodes after removing dangling-phrase endings.
#[allow(clippy::too_many_arguments)]
pub fn train_rl(
    policy: &mut PolicyParams,
    dataset: &Dataset,
    config: &TrainConfig,
    prior: Option<&dyn StepMask>,
    lexicon: Option<&BadEndingLexicon>,
    strip_endings_for_eval: bool,
) -> Result<Vec<EpochRow>> {
    config.validate()?;
    let train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let val_idx = dataset.indices_of(Split::Val);
    let reward = RewardFn::new(config.reward, &dataset.train_references());
    let mut adam = AdamState::new(config.learning_rate);
    let mut lr = config.learning_rate;
    let mut shuffle_rng = stream(config.seed, "rl-shuffle");
    let mut rollout_rng = stream(config.seed, "rollout");
    let mut eval_rng = stream(config.seed, "rl-eval");
    let mut rows = Vec::with_capacity(config.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let start = std::time::Instant::now();
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut reward_sum = 0.0;
        let mut baseline_sum = 0.0;
        let mut bad_sum = 0.0;
        let mut mask_sum = 0.0;
        let mut fallbacks = 0u32;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            adam.learning_rate = lr;
            let (_, diag) = self_critical_step(
                policy,
                dataset,
                chunk,
                config,
                prior,
                &reward,
                &mut adam,
                lexicon,
                &mut rollout_rng,
            )?;
            reward_sum += diag.mean_reward;
            baseline_sum += diag.mean_baseline;
            bad_sum += diag.bad_ending_rate;
            mask_sum += diag.mean_mask_size;
            fallbacks += diag.fallbacks;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let (val_cider, val_bleu4, val_rouge_l, val_bad) = if val_idx.is_empty() {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            validation_scores(
                policy,
                dataset,
                &val_idx,
                prior,
                config.max_len,
                &reward,
                lexicon,
                strip_endings_for_eval,
                &mut eval_rng,
            )?
        };
        rows.push(EpochRow {
            epoch,
            seconds: start.elapsed().as_secs_f64(),
            mean_reward: reward_sum / n,
            mean_baseline: baseline_sum / n,
            val_cider,
            val_bleu4,
            val_rouge_l,
            bad_end_rate: if val_idx.is_empty() {
                bad_sum / n
            } else {
                val_bad
            },
            mean_mask_size: mask_sum / n,
            fallbacks,
            lr,
        });
        if val_cider > best_val {
            best_val = val_cider;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.anneal_patience {
                lr *= config.anneal_factor;
                stale = 0;
            }
        }
    }
    Ok(rows)
}
