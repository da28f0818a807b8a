//! LSTM language model over captions, trained by maximum likelihood, and
//! the probability-threshold word mask it induces: a token is allowed at
//! step t when its conditional probability is at least a threshold that
//! starts tiny and doubles every timestep, with a top-1 fallback once the
//! threshold outgrows the whole distribution.

use crate::corpus::{CaptionRecord, Split, START};
use crate::error::{Error, Result};
use crate::neural::checkpoint::{read_checkpoint, string_tensor, tensor_string, write_checkpoint};
use crate::neural::tensor::{matvec, matvec_t_acc, outer_acc};
use crate::neural::{
    clip_global_norm, lstm_backward, lstm_step, softmax, AdamState, LstmCache, LstmParams,
    NamedTensors, Tensor,
};
use crate::ngram::MaskVector;
use crate::policy::StepMask;
use crate::rng::stream;
use rand::seq::SliceRandom;
use std::path::Path;

/// Word-level LSTM LM: embedding, recurrent cell, output projection.
#[derive(Debug, Clone)]
pub struct LanguageModelParams {
    pub vocab_size: usize,
    pub embed_size: usize,
    pub hidden_size: usize,
    pub embedding: Tensor,
    pub lstm: LstmParams,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl LanguageModelParams {
    pub fn init(
        vocab_size: usize,
        embed_size: usize,
        hidden_size: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let scale = 0.08;
        LanguageModelParams {
            vocab_size,
            embed_size,
            hidden_size,
            embedding: Tensor::uniform(&[vocab_size, embed_size], scale, rng),
            lstm: LstmParams::init(embed_size, hidden_size, rng),
            w_out: Tensor::uniform(&[vocab_size, hidden_size], scale, rng),
            b_out: Tensor::zeros(&[vocab_size]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for name in g.tensor_names() {
            g.tensor_mut(&name).fill(0.0);
        }
        g
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arch = string_tensor("lm");
        let mut entries: Vec<(String, &Tensor)> = vec![("meta/arch".into(), &arch)];
        let names = self.tensor_names();
        for name in &names {
            entries.push((name.clone(), self.tensor(name)));
        }
        write_checkpoint(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let lookup = |n: &str| -> Result<Tensor> {
            entries
                .iter()
                .find(|(name, _)| name == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Malformed {
                    line: 0,
                    msg: format!("checkpoint missing tensor `{n}`"),
                })
        };
        let tag = tensor_string(&lookup("meta/arch")?);
        if tag != "lm" {
            return Err(Error::Malformed {
                line: 0,
                msg: format!("expected a language-model checkpoint, found `{tag}`"),
            });
        }
        let embedding = lookup("embedding")?;
        let w_out = lookup("out/w")?;
        let (vocab_size, embed_size) = (embedding.shape()[0], embedding.shape()[1]);
        let hidden_size = w_out.shape()[1];
        Ok(LanguageModelParams {
            vocab_size,
            embed_size,
            hidden_size,
            embedding,
            lstm: LstmParams {
                w_x: lookup("lstm/w_x")?,
                w_h: lookup("lstm/w_h")?,
                b: lookup("lstm/b")?,
                input_size: embed_size,
                hidden_size,
            },
            w_out,
            b_out: lookup("out/b")?,
        })
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        matvec(&self.w_out, h, &mut out);
        for (o, b) in out.iter_mut().zip(self.b_out.data()) {
            *o += b;
        }
        out
    }

    /// Conditional next-token distribution after consuming `history`
    /// (START-prefixed internally; pass the emitted tokens only).
    pub fn conditional(&self, history: &[u32]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden_size];
        let mut c = vec![0.0; self.hidden_size];
        let mut prev = START;
        for &w in history.iter().chain(std::iter::once(&u32::MAX)) {
            let x = self.embedding.row(prev as usize).to_vec();
            let (nh, nc, _) = lstm_step(&self.lstm, &h, &c, &x).expect("consistent dims");
            h = nh;
            c = nc;
            if w == u32::MAX {
                break;
            }
            prev = w;
        }
        softmax(&self.logits(&h))
    }

    /// Teacher-forced forward over one END-terminated sequence. Returns the
    /// summed cross-entropy and the per-step caches needed for backward.
    fn forward(&self, target: &[u32]) -> (f64, Vec<(u32, LstmCache, Vec<f64>)>) {
        let mut h = vec![0.0; self.hidden_size];
        let mut c = vec![0.0; self.hidden_size];
        let mut prev = START;
        let mut loss = 0.0;
        let mut steps = Vec::with_capacity(target.len());
        for &w in target {
            let x = self.embedding.row(prev as usize).to_vec();
            let (nh, nc, cache) = lstm_step(&self.lstm, &h, &c, &x).expect("consistent dims");
            let probs = softmax(&self.logits(&nh));
            loss -= probs[w as usize].max(f64::MIN_POSITIVE).ln();
            steps.push((w, cache, probs));
            h = nh;
            c = nc;
            prev = w;
        }
        (loss, steps)
    }

    /// Accumulates gradients of the summed cross-entropy into `grads`.
    pub fn backward(&self, target: &[u32], grads: &mut LanguageModelParams) -> f64 {
        let (loss, steps) = self.forward(target);
        let mut dh = vec![0.0; self.hidden_size];
        let mut dc = vec![0.0; self.hidden_size];
        for (t, (w, cache, probs)) in steps.iter().enumerate().rev() {
            // h for this step from the cache: h = o * tanh(c).
            let h: Vec<f64> = cache
                .gate_o
                .iter()
                .zip(&cache.tanh_c)
                .map(|(o, tc)| o * tc)
                .collect();
            let mut dlogits = probs.clone();
            dlogits[*w as usize] -= 1.0;
            outer_acc(&mut grads.w_out, &dlogits, &h);
            for (db, dl) in grads.b_out.data_mut().iter_mut().zip(&dlogits) {
                *db += dl;
            }
            matvec_t_acc(&self.w_out, &dlogits, &mut dh);
            let (dx, dh_prev, dc_prev) = lstm_backward(&self.lstm, &mut grads.lstm, cache, &dh, &dc);
            let prev = if t == 0 { START } else { steps[t - 1].0 };
            for (ge, dxe) in grads
                .embedding
                .row_mut(prev as usize)
                .iter_mut()
                .zip(&dx)
            {
                *ge += dxe;
            }
            dh = dh_prev;
            dc = dc_prev;
        }
        loss
    }
}

impl NamedTensors for LanguageModelParams {
    fn tensor_names(&self) -> Vec<String> {
        vec![
            "embedding".to_string(),
            "lstm/w_x".to_string(),
            "lstm/w_h".to_string(),
            "lstm/b".to_string(),
            "out/w".to_string(),
            "out/b".to_string(),
        ]
    }

    fn tensor(&self, name: &str) -> &Tensor {
        match name {
            "embedding" => &self.embedding,
            "lstm/w_x" => &self.lstm.w_x,
            "lstm/w_h" => &self.lstm.w_h,
            "lstm/b" => &self.lstm.b,
            "out/w" => &self.w_out,
            "out/b" => &self.b_out,
            other => panic!("unknown tensor `{other}`"),
        }
    }

    fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        match name {
            "embedding" => &mut self.embedding,
            "lstm/w_x" => &mut self.lstm.w_x,
            "lstm/w_h" => &mut self.lstm.w_h,
            "lstm/b" => &mut self.lstm.b,
            "out/w" => &mut self.w_out,
            "out/b" => &mut self.b_out,
            other => panic!("unknown tensor `{other}`"),
        }
    }
}

/// Hyperparameters for LM training.
#[derive(Debug, Clone, Copy)]
pub struct LmTrainConfig {
    pub embed_size: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            embed_size: 256,
            hidden_size: 256,
            learning_rate: 0.001,
            batch_size: 20,
            epochs: 10,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// Trains the LM on the training-split references; returns the model and
/// the mean per-token cross-entropy per epoch.
pub fn train_lm(
    records: &[CaptionRecord],
    vocab_size: usize,
    config: &LmTrainConfig,
) -> Result<(LanguageModelParams, Vec<f64>)> {
    let sequences: Vec<&Vec<u32>> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .flat_map(|r| r.references.iter())
        .collect();
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut init_rng = stream(config.seed, "init");
    let mut lm = LanguageModelParams::init(
        vocab_size,
        config.embed_size,
        config.hidden_size,
        &mut init_rng,
    );
    let mut adam = AdamState::new(config.learning_rate);
    let mut shuffle_rng = stream(config.seed, "lm-shuffle");
    let mut curve = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut grads = lm.zeros_like();
            for &i in chunk {
                epoch_loss += lm.backward(sequences[i], &mut grads);
                epoch_tokens += sequences[i].len();
            }
            clip_global_norm(&mut grads, config.clip_norm);
            adam.update(&mut lm, &grads)?;
        }
        curve.push(epoch_loss / epoch_tokens.max(1) as f64);
    }
    Ok((lm, curve))
}

/// Probability threshold per decode step: starts at `eta0` and multiplies
/// by `growth` every timestep.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdSchedule {
    pub eta0: f64,
    pub growth: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        ThresholdSchedule {
            eta0: 0.00005,
            growth: 2.0,
        }
    }
}

impl ThresholdSchedule {
    pub fn new(eta0: f64, growth: f64) -> Result<Self> {
        if eta0 <= 0.0 || growth < 1.0 {
            return Err(Error::Config(
                "threshold needs eta0 > 0 and growth >= 1".into(),
            ));
        }
        Ok(ThresholdSchedule { eta0, growth })
    }

    pub fn eta(&self, t: usize) -> f64 {
        self.eta0 * self.growth.powi(t as i32)
    }
}

/// The LM-induced step mask. The mask is computed from the unmasked LM
/// conditional and can never be empty: once the threshold exceeds every
/// probability, the single most probable token stays allowed.
#[derive(Debug, Clone)]
pub struct LmPrior {
    pub lm: LanguageModelParams,
    pub schedule: ThresholdSchedule,
}

impl LmPrior {
    pub fn new(lm: LanguageModelParams, schedule: ThresholdSchedule) -> Self {
        LmPrior { lm, schedule }
    }

    /// Mask of tokens with conditional probability >= eta(t); the bool is
    /// true when the top-1 fallback was needed.
    pub fn mask_at(&self, history: &[u32], t: usize) -> (MaskVector, bool) {
        let probs = self.lm.conditional(history);
        let eta = self.schedule.eta(t);
        let allowed: Vec<usize> = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= eta)
            .map(|(i, _)| i)
            .collect();
        if allowed.is_empty() {
            let top = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            (
                MaskVector::from_allowed(probs.len(), std::iter::once(top)),
                true,
            )
        } else {
            (
                MaskVector::from_allowed(probs.len(), allowed.into_iter()),
                false,
            )
        }
    }
}

impl StepMask for LmPrior {
    fn step_mask(
        &self,
        history: &[u32],
        t: usize,
        _allow_fallback: bool,
    ) -> Result<(MaskVector, u32)> {
        let (mask, capped) = self.mask_at(history, t);
        Ok((mask, capped as u32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::END;
    use crate::neural::finite_diff_check;

    fn toy_records(refs: &[Vec<u32>]) -> Vec<CaptionRecord> {
        vec![CaptionRecord {
            item_id: "toy".into(),
            split: Split::Train,
            references: refs.to_vec(),
        }]
    }

    #[test]
    fn threshold_schedule_doubles_per_step() {
        let s = ThresholdSchedule::default();
        assert!((s.eta(0) - 0.00005).abs() < 1e-15);
        assert!((s.eta(10) - 0.0512).abs() < 1e-12);
        assert!(ThresholdSchedule::new(0.0, 2.0).is_err());
        assert!(ThresholdSchedule::new(0.1, 0.5).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(3, "init");
        let lm = LanguageModelParams::init(7, 5, 6, &mut rng);
        let target = vec![3u32, 4, 5, END];
        let mut grads = lm.zeros_like();
        lm.backward(&target, &mut grads);
        let mut lm = lm;
        let err = finite_diff_check(
            &mut lm,
            &grads,
            &mut |p: &LanguageModelParams| p.forward(&target).0,
            1e-5,
        );
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn repeated_sentence_drives_cross_entropy_to_zero() {
        let sentence = vec![3u32, 4, 5, 6, END];
        let records = toy_records(&vec![sentence.clone(); 8]);
        let config = LmTrainConfig {
            embed_size: 12,
            hidden_size: 16,
            learning_rate: 0.01,
            epochs: 400,
            ..Default::default()
        };
        let (_, curve) = train_lm(&records, 7, &config).unwrap();
        let last = *curve.last().unwrap();
        assert!(last < 0.05, "final per-token cross-entropy {last}");
        // Perplexity ~ 1.
        assert!(last.exp() < 1.06);
    }

    #[test]
    fn trained_lm_beats_unigram_perplexity() {
        // Two-state corpus: "3 4 END" and "5 6 END". Bigram structure is
        // deterministic, so the LM should get far below the unigram bound.
        let refs: Vec<Vec<u32>> = (0..20)
            .map(|i| {
                if i % 2 == 0 {
                    vec![3u32, 4, END]
                } else {
                    vec![5u32, 6, END]
                }
            })
            .collect();
        let config = LmTrainConfig {
            embed_size: 12,
            hidden_size: 16,
            learning_rate: 0.01,
            epochs: 200,
            ..Default::default()
        };
        let (lm, curve) = train_lm(&toy_records(&refs), 7, &config).unwrap();
        // Unigram cross-entropy from token frequencies.
        let mut counts = std::collections::HashMap::new();
        let mut total = 0f64;
        for r in &refs {
            for &w in r {
                *counts.entry(w).or_insert(0f64) += 1.0;
                total += 1.0;
            }
        }
        let unigram_ce: f64 = refs
            .iter()
            .flatten()
            .map(|w| -(counts[w] / total).ln())
            .sum::<f64>()
            / total;
        let lm_ce = *curve.last().unwrap();
        assert!(
            lm_ce < unigram_ce,
            "LM cross-entropy {lm_ce} vs unigram {unigram_ce}"
        );
        // Early epochs should improve (within noise): compare first vs last.
        assert!(curve[0] > lm_ce);
        let _ = lm;
    }

    #[test]
    fn mask_equals_brute_force_thresholding() {
        let mut rng = stream(11, "init");
        let lm = LanguageModelParams::init(9, 6, 8, &mut rng);
        let prior = LmPrior::new(lm, ThresholdSchedule::default());
        let mut hist_rng = stream(12, "histories");
        use rand::Rng;
        for _ in 0..100 {
            let len = hist_rng.gen_range(0..5usize);
            let history: Vec<u32> = (0..len).map(|_| hist_rng.gen_range(3..9u32)).collect();
            let t = hist_rng.gen_range(0..20usize);
            let (mask, capped) = prior.mask_at(&history, t);
            let probs = prior.lm.conditional(&history);
            let eta = prior.schedule.eta(t);
            let brute: Vec<usize> = probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| p >= eta)
                .map(|(i, _)| i)
                .collect();
            if brute.is_empty() {
                assert!(capped);
                assert_eq!(mask.cardinality(), 1);
            } else {
                assert!(!capped);
                assert_eq!(mask.ones().collect::<Vec<_>>(), brute);
            }
            assert!(mask.cardinality() >= 1);
        }
    }

    #[test]
    fn mask_cardinality_shrinks_as_threshold_grows() {
        let mut rng = stream(21, "init");
        let lm = LanguageModelParams::init(12, 6, 8, &mut rng);
        let prior = LmPrior::new(lm, ThresholdSchedule::default());
        let history = vec![4u32, 5];
        let mut last = usize::MAX;
        for t in 0..25 {
            let (mask, _) = prior.mask_at(&history, t);
            assert!(mask.cardinality() <= last);
            last = mask.cardinality();
        }
        // Doubling for 25 steps pushes eta past 1, so only the cap remains.
        assert_eq!(last, 1);
    }

    #[test]
    fn near_uniform_lm_with_tiny_threshold_allows_everything() {
        // Zero weights give exactly uniform output probabilities.
        let lm = LanguageModelParams {
            vocab_size: 10,
            embed_size: 4,
            hidden_size: 4,
            embedding: Tensor::zeros(&[10, 4]),
            lstm: LstmParams::zeros(4, 4),
            w_out: Tensor::zeros(&[10, 4]),
            b_out: Tensor::zeros(&[10]),
        };
        let prior = LmPrior::new(lm, ThresholdSchedule::default());
        let (mask, capped) = prior.mask_at(&[], 0);
        assert!(!capped);
        assert_eq!(mask.cardinality(), 10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = stream(31, "init");
        let lm = LanguageModelParams::init(8, 5, 6, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.bin");
        lm.save(&path).unwrap();
        let loaded = LanguageModelParams::load(&path).unwrap();
        assert_eq!(loaded.vocab_size, 8);
        let a = lm.conditional(&[3, 4]);
        let b = loaded.conditional(&[3, 4]);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }
}
