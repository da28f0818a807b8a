//! Caption scoring and analysis: BLEU-4, ROUGE-L, CIDEr / CIDEr-D, plus
//! bad-ending detection and stripping, novelty against the training set,
//! and action-space (mask cardinality) statistics.

pub mod bleu;
pub mod cider;
pub mod rouge;

pub use bleu::{bleu4_corpus, bleu4_sentence};
pub use cider::{CiderScorer, CiderVariant};
pub use rouge::{rouge_l, rouge_l_corpus, ROUGE_BETA};

use crate::corpus::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, HashSet};

/// Dangling phrases commonly left at the end of free-sampled captions.
pub const DEFAULT_BAD_ENDINGS: &[&str] = &["with a", "on a", "of a", "in a", "and a"];

/// Token-id phrases treated as bad sentence endings.
#[derive(Debug, Clone)]
pub struct BadEndingLexicon {
    /// Phrase text, kept for reporting; parallel to `phrases`.
    pub labels: Vec<String>,
    phrases: Vec<Vec<u32>>,
    max_len: usize,
}

impl BadEndingLexicon {
    /// Encodes phrases with the corpus tokenizer and vocabulary. Phrases
    /// containing out-of-vocabulary words are dropped: they can never match
    /// a decoded candidate.
    pub fn from_phrases(phrases: &[&str], vocab: &Vocabulary) -> Result<Self> {
        let mut labels = Vec::new();
        let mut encoded = Vec::new();
        for p in phrases {
            let toks = tokenize(p);
            if toks.is_empty() {
                continue;
            }
            let ids: Option<Vec<u32>> = toks.iter().map(|w| vocab.id_of(w)).collect();
            if let Some(ids) = ids {
                labels.push(toks.join(" "));
                encoded.push(ids);
            }
        }
        if encoded.is_empty() {
            return Err(Error::Config(
                "bad-ending lexicon is empty after encoding".into(),
            ));
        }
        let max_len = encoded.iter().map(Vec::len).max().unwrap();
        Ok(BadEndingLexicon {
            labels,
            phrases: encoded,
            max_len,
        })
    }

    pub fn default_for(vocab: &Vocabulary) -> Result<Self> {
        Self::from_phrases(DEFAULT_BAD_ENDINGS, vocab)
    }

    /// Builds from already-encoded phrases, for callers that map words to
    /// ids without a model vocabulary.
    pub fn from_token_phrases(phrases: Vec<(String, Vec<u32>)>) -> Result<Self> {
        if phrases.iter().all(|(_, p)| p.is_empty()) {
            return Err(Error::Config(
                "bad-ending lexicon is empty after encoding".into(),
            ));
        }
        let (labels, encoded): (Vec<String>, Vec<Vec<u32>>) =
            phrases.into_iter().filter(|(_, p)| !p.is_empty()).unzip();
        let max_len = encoded.iter().map(Vec::len).max().unwrap();
        Ok(BadEndingLexicon {
            labels,
            phrases: encoded,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Index of the longest lexicon phrase the candidate ends with.
    pub fn terminal_match(&self, candidate: &[u32]) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None; // (phrase_len, index)
        for (i, p) in self.phrases.iter().enumerate() {
            if p.len() <= candidate.len() && candidate.ends_with(p) {
                let better = match best {
                    Some((l, _)) => p.len() > l,
                    None => true,
                };
                if better {
                    best = Some((p.len(), i));
                }
            }
        }
        best.map(|(_, i)| i)
    }

    fn phrase(&self, idx: usize) -> &[u32] {
        &self.phrases[idx]
    }

    pub fn max_phrase_len(&self) -> usize {
        self.max_len
    }
}

/// Fraction of candidates that end with a lexicon phrase, plus a per-phrase
/// count keyed by phrase text (longest match wins).
pub fn bad_ending_rate(
    candidates: &[Vec<u32>],
    lexicon: &BadEndingLexicon,
) -> (f64, BTreeMap<String, u64>) {
    let mut histogram: BTreeMap<String, u64> = BTreeMap::new();
    let mut flagged = 0u64;
    for c in candidates {
        if let Some(idx) = lexicon.terminal_match(c) {
            flagged += 1;
            *histogram.entry(lexicon.labels[idx].clone()).or_insert(0) += 1;
        }
    }
    let rate = if candidates.is_empty() {
        0.0
    } else {
        flagged as f64 / candidates.len() as f64
    };
    (rate, histogram)
}

/// Removes the longest matching terminal phrase; with `single_pass` false
/// this repeats until no phrase matches, so the result is a fixed point.
pub fn strip_bad_ending(
    candidate: &[u32],
    lexicon: &BadEndingLexicon,
    single_pass: bool,
) -> Vec<u32> {
    let mut out = candidate.to_vec();
    while let Some(idx) = lexicon.terminal_match(&out) {
        let keep = out.len() - lexicon.phrase(idx).len();
        out.truncate(keep);
        if single_pass {
            break;
        }
    }
    out
}

/// Fraction of candidates whose exact token sequence appears nowhere among
/// the training references.
pub fn novelty_score(candidates: &[Vec<u32>], training_references: &[Vec<Vec<u32>>]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let seen: HashSet<&[u32]> = training_references
        .iter()
        .flatten()
        .map(Vec::as_slice)
        .collect();
    let novel = candidates
        .iter()
        .filter(|c| !seen.contains(c.as_slice()))
        .count();
    novel as f64 / candidates.len() as f64
}

/// Distribution of per-step action-space sizes observed during decoding.
#[derive(Debug, Clone, Serialize)]
pub struct ActionSpaceStats {
    pub mean: f64,
    pub steps: usize,
    /// Mask cardinality -> number of decode steps with that cardinality.
    pub histogram: BTreeMap<usize, u64>,
}

/// `mask_sizes` holds one cardinality per decode step, concatenated over
/// the whole corpus.
pub fn action_space_stats(mask_sizes: &[usize]) -> ActionSpaceStats {
    let mut histogram: BTreeMap<usize, u64> = BTreeMap::new();
    let mut sum = 0usize;
    for &s in mask_sizes {
        sum += s;
        *histogram.entry(s).or_insert(0) += 1;
    }
    let mean = if mask_sizes.is_empty() {
        0.0
    } else {
        sum as f64 / mask_sizes.len() as f64
    };
    ActionSpaceStats {
        mean,
        steps: mask_sizes.len(),
        histogram,
    }
}

/// Maps words to dense ids for scoring caption files that never touch a
/// model vocabulary; every distinct word gets its own id, so no token is
/// ever collapsed to an unknown marker.
#[derive(Debug, Default)]
pub struct Interner {
    index: HashMap<String, u32>,
}

impl Interner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, word: &str) -> u32 {
        let next = self.index.len() as u32;
        *self.index.entry(word.to_string()).or_insert(next)
    }

    pub fn encode(&mut self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|w| self.intern(w)).collect()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// One scored prediction corpus; serializes to the report JSON.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub num_items: usize,
    pub mean_references: f64,
    pub rouge_beta: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub cider_d: f64,
    pub bad_ending_rate: f64,
    pub bad_ending_histogram: BTreeMap<String, u64>,
    pub novelty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_item_cider_d: Option<Vec<f64>>,
}

impl ScoreReport {
    /// Scores a candidate corpus against its references. `training_refs`
    /// enables the novelty fraction; `per_item` includes the per-item
    /// CIDEr-D column in the report.
    pub fn compute(
        candidates: &[Vec<u32>],
        references: &[Vec<Vec<u32>>],
        lexicon: &BadEndingLexicon,
        training_refs: Option<&[Vec<Vec<u32>>]>,
        per_item: bool,
    ) -> Result<Self> {
        if candidates.len() != references.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} candidates vs {} reference sets",
                candidates.len(),
                references.len()
            )));
        }
        let scorer = CiderScorer::from_references(references);
        let (per_d, cider_d) = scorer.score_corpus(candidates, references, CiderVariant::D);
        let (_, cider_plain) = scorer.score_corpus(candidates, references, CiderVariant::Plain);
        let (rate, histogram) = bad_ending_rate(candidates, lexicon);
        let ref_total: usize = references.iter().map(Vec::len).sum();
        Ok(ScoreReport {
            num_items: candidates.len(),
            mean_references: if references.is_empty() {
                0.0
            } else {
                ref_total as f64 / references.len() as f64
            },
            rouge_beta: ROUGE_BETA,
            bleu4: bleu4_corpus(candidates, references)?,
            rouge_l: rouge_l_corpus(candidates, references)?,
            cider: cider_plain,
            cider_d,
            bad_ending_rate: rate,
            bad_ending_histogram: histogram,
            novelty: training_refs.map(|t| novelty_score(candidates, t)),
            per_item_cider_d: per_item.then_some(per_d),
        })
    }

    /// Plain-text summary with one column per metric.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric         value\n");
        out.push_str("-------------  ------\n");
        let rows = [
            ("BLEU-4", self.bleu4),
            ("ROUGE-L", self.rouge_l),
            ("CIDEr", self.cider),
            ("CIDEr-D", self.cider_d),
            ("bad-end rate", self.bad_ending_rate),
        ];
        for (name, v) in rows {
            out.push_str(&format!("{name:<14} {v:.4}\n"));
        }
        if let Some(n) = self.novelty {
            out.push_str(&format!("{:<14} {n:.4}\n", "novelty"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocabulary {
        let sentences = [
            "a man riding a horse with a hat on a hill",
            "a tall building with a clock tower",
            "a dog in a park and a cat of a kind",
        ];
        let corpus: Vec<Vec<String>> = sentences.iter().map(|s| tokenize(s)).collect();
        Vocabulary::build(&corpus, 1).unwrap()
    }

    fn ids(vocab: &Vocabulary, text: &str) -> Vec<u32> {
        vocab.encode(&tokenize(text))
    }

    #[test]
    fn table_example_is_flagged_with_its_phrase() {
        let v = toy_vocab();
        let lex = BadEndingLexicon::default_for(&v).unwrap();
        let cand = ids(&v, "a tall building with a clock tower with a");
        let idx = lex.terminal_match(&cand).unwrap();
        assert_eq!(lex.labels[idx], "with a");
        let clean = ids(&v, "a man riding a horse");
        assert!(lex.terminal_match(&clean).is_none());
        assert!(lex.terminal_match(&[]).is_none());
    }

    #[test]
    fn rate_and_histogram_count_longest_matches() {
        let v = toy_vocab();
        let lex = BadEndingLexicon::default_for(&v).unwrap();
        let cands = vec![
            ids(&v, "a dog in a"),
            ids(&v, "a cat on a"),
            ids(&v, "a man riding a horse"),
            ids(&v, "a building with a"),
        ];
        let (rate, hist) = bad_ending_rate(&cands, &lex);
        assert!((rate - 0.75).abs() < 1e-12);
        assert_eq!(hist.get("in a"), Some(&1));
        assert_eq!(hist.get("on a"), Some(&1));
        assert_eq!(hist.get("with a"), Some(&1));
    }

    #[test]
    fn stripping_iterates_to_a_fixed_point() {
        let v = toy_vocab();
        let lex = BadEndingLexicon::default_for(&v).unwrap();
        let cand = ids(&v, "a on a on a");
        let stripped = strip_bad_ending(&cand, &lex, false);
        assert_eq!(stripped, ids(&v, "a"));
        // Idempotent afterwards.
        assert_eq!(strip_bad_ending(&stripped, &lex, false), stripped);
        // Single pass removes exactly one phrase.
        let once = strip_bad_ending(&cand, &lex, true);
        assert_eq!(once, ids(&v, "a on a"));
        // Non-flagged input is unchanged.
        let clean = ids(&v, "a man riding a horse");
        assert_eq!(strip_bad_ending(&clean, &lex, false), clean);
    }

    #[test]
    fn novelty_extremes() {
        let train = vec![vec![vec![1u32, 2, 3], vec![4, 5]], vec![vec![6, 7]]];
        let copied = vec![vec![1, 2, 3], vec![6, 7]];
        assert_eq!(novelty_score(&copied, &train), 0.0);
        let fresh = vec![vec![9, 9], vec![8, 8]];
        assert_eq!(novelty_score(&fresh, &train), 1.0);
    }

    #[test]
    fn action_space_mean_and_histogram() {
        let stats = action_space_stats(&[100, 100, 4, 4, 4, 2]);
        assert!((stats.mean - 214.0 / 6.0).abs() < 1e-12);
        assert_eq!(stats.histogram[&4], 3);
        assert_eq!(stats.steps, 6);
        assert_eq!(action_space_stats(&[]).mean, 0.0);
    }

    #[test]
    fn interner_assigns_stable_dense_ids() {
        let mut it = Interner::new();
        let a = it.intern("horse");
        let b = it.intern("hat");
        assert_ne!(a, b);
        assert_eq!(it.intern("horse"), a);
        assert_eq!(it.len(), 2);
    }

    #[test]
    fn report_bounds_and_serialization() {
        let v = toy_vocab();
        let lex = BadEndingLexicon::default_for(&v).unwrap();
        let refs: Vec<Vec<Vec<u32>>> = vec![
            vec![ids(&v, "a man riding a horse")],
            vec![ids(&v, "a tall building with a clock tower")],
        ];
        let cands = vec![
            ids(&v, "a man riding a horse"),
            ids(&v, "a tall building with a"),
        ];
        let report =
            ScoreReport::compute(&cands, &refs, &lex, Some(&refs), true).unwrap();
        assert!(report.bleu4 >= 0.0 && report.bleu4 <= 1.0);
        assert!(report.rouge_l >= 0.0 && report.rouge_l <= 1.0);
        assert!(report.cider >= 0.0 && report.cider_d >= 0.0);
        assert!((report.bad_ending_rate - 0.5).abs() < 1e-12);
        assert_eq!(report.novelty, Some(0.5));
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"bleu4\""));
        let table = report.summary_table();
        assert!(table.contains("CIDEr-D"));
    }
}
