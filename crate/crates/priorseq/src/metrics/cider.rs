//! CIDEr and CIDEr-D: tf-idf weighted n-gram cosine similarity, averaged
//! over orders 1..4 and scaled by 10. Document frequencies come from the
//! reference corpus the scorer is built on.

use std::collections::{BTreeMap, BTreeSet};

const MAX_ORDER: usize = 4;
const LENGTH_SIGMA: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiderVariant {
    Plain,
    D,
}

/// Corpus document-frequency statistics; build once, score many.
#[derive(Debug, Clone)]
pub struct CiderScorer {
    doc_freq: BTreeMap<Vec<u32>, f64>,
    log_num_docs: f64,
    /// True when the corpus had fewer than two items and the idf floor was
    /// applied.
    pub degenerate: bool,
}

impl CiderScorer {
    pub fn from_references(reference_sets: &[Vec<Vec<u32>>]) -> Self {
        let mut doc_freq: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for refs in reference_sets {
            let mut seen: BTreeSet<Vec<u32>> = BTreeSet::new();
            for r in refs {
                for n in 1..=MAX_ORDER {
                    if r.len() >= n {
                        for w in r.windows(n) {
                            seen.insert(w.to_vec());
                        }
                    }
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0.0) += 1.0;
            }
        }
        let degenerate = reference_sets.len() < 2;
        // idf floor: a single-item corpus would make every idf zero.
        let log_num_docs = (reference_sets.len().max(2) as f64).ln();
        CiderScorer {
            doc_freq,
            log_num_docs,
            degenerate,
        }
    }

    fn idf(&self, gram: &[u32]) -> f64 {
        let df = self.doc_freq.get(gram).copied().unwrap_or(0.0).max(1.0);
        self.log_num_docs - df.ln()
    }

    /// tf-idf vector for one order; `normalize_tf` divides counts by the
    /// total n-gram count (plain CIDEr).
    fn vector(&self, tokens: &[u32], n: usize, normalize_tf: bool) -> BTreeMap<Vec<u32>, f64> {
        let mut counts: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        let total: f64 = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| {
                let tf = if normalize_tf && total > 0.0 {
                    c / total
                } else {
                    c
                };
                let idf = self.idf(&g);
                (g, tf * idf)
            })
            .collect()
    }

    pub fn score(&self, candidate: &[u32], references: &[Vec<u32>], variant: CiderVariant) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let normalize = variant == CiderVariant::Plain;
        let mut order_sum = 0.0;
        for n in 1..=MAX_ORDER {
            let vc = self.vector(candidate, n, normalize);
            let norm_c: f64 = vc.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut ref_sum = 0.0;
            for r in references {
                let vr = self.vector(r, n, normalize);
                let norm_r: f64 = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                if norm_c == 0.0 || norm_r == 0.0 {
                    continue;
                }
                let dot: f64 = vc
                    .iter()
                    .filter_map(|(g, &c)| {
                        vr.get(g).map(|&rv| match variant {
                            CiderVariant::Plain => c * rv,
                            // CIDEr-D clips the candidate counts at the
                            // reference counts.
                            CiderVariant::D => c.min(rv) * rv,
                        })
                    })
                    .sum();
                let mut sim = dot / (norm_c * norm_r);
                if variant == CiderVariant::D {
                    let dl = candidate.len() as f64 - r.len() as f64;
                    sim *= (-dl * dl / (2.0 * LENGTH_SIGMA * LENGTH_SIGMA)).exp();
                }
                ref_sum += sim;
            }
            order_sum += ref_sum / references.len() as f64;
        }
        10.0 * order_sum / MAX_ORDER as f64
    }

    pub fn score_corpus(
        &self,
        candidates: &[Vec<u32>],
        references: &[Vec<Vec<u32>>],
        variant: CiderVariant,
    ) -> (Vec<f64>, f64) {
        let per_item: Vec<f64> = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| self.score(c, r, variant))
            .collect();
        let mean = if per_item.is_empty() {
            0.0
        } else {
            per_item.iter().sum::<f64>() / per_item.len() as f64
        };
        (per_item, mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_single_reference_items_score_ten() {
        // Distinct items so idf stays positive.
        let refs: Vec<Vec<Vec<u32>>> = vec![
            vec![vec![1, 2, 3, 4, 5]],
            vec![vec![6, 7, 8, 9, 10]],
            vec![vec![11, 12, 13, 14, 15]],
        ];
        let scorer = CiderScorer::from_references(&refs);
        for (i, r) in refs.iter().enumerate() {
            let s = scorer.score(&r[0], r, CiderVariant::Plain);
            assert!((s - 10.0).abs() < 1e-9, "item {i}: {s}");
            let sd = scorer.score(&r[0], r, CiderVariant::D);
            assert!((sd - 10.0).abs() < 1e-9, "item {i} D: {sd}");
        }
    }

    #[test]
    fn single_item_corpus_is_flagged_degenerate() {
        let refs = vec![vec![vec![1, 2, 3]]];
        let scorer = CiderScorer::from_references(&refs);
        assert!(scorer.degenerate);
        // idf floor keeps the score positive rather than identically zero.
        assert!(scorer.score(&[1, 2, 3], &refs[0], CiderVariant::Plain) > 0.0);
    }

    #[test]
    fn mismatched_candidate_scores_lower() {
        let refs: Vec<Vec<Vec<u32>>> = vec![
            vec![vec![1, 2, 3, 4], vec![1, 2, 3, 5]],
            vec![vec![6, 7, 8, 9]],
        ];
        let scorer = CiderScorer::from_references(&refs);
        let exact = scorer.score(&[1, 2, 3, 4], &refs[0], CiderVariant::D);
        let off = scorer.score(&[1, 2, 9, 4], &refs[0], CiderVariant::D);
        assert!(exact > off);
    }

    #[test]
    fn length_penalty_hits_cider_d_only() {
        let refs: Vec<Vec<Vec<u32>>> = vec![
            vec![vec![1, 2, 3, 4, 5, 6, 7, 8]],
            vec![vec![9, 10, 11, 12]],
        ];
        let scorer = CiderScorer::from_references(&refs);
        let short = vec![1, 2, 3];
        let plain = scorer.score(&short, &refs[0], CiderVariant::Plain);
        let d = scorer.score(&short, &refs[0], CiderVariant::D);
        assert!(d < plain);
    }

    #[test]
    fn permutation_invariance_of_corpus_scores() {
        let refs: Vec<Vec<Vec<u32>>> = vec![
            vec![vec![1, 2, 3]],
            vec![vec![4, 5, 6]],
            vec![vec![7, 8, 9]],
        ];
        let cands = vec![vec![1, 2, 3], vec![4, 5, 9], vec![7, 8, 9]];
        let scorer = CiderScorer::from_references(&refs);
        let (per, mean) = scorer.score_corpus(&cands, &refs, CiderVariant::D);
        let perm = [2usize, 0, 1];
        let cands_p: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let (per_p, mean_p) = scorer.score_corpus(&cands_p, &refs_p, CiderVariant::D);
        assert!((mean - mean_p).abs() < 1e-12);
        for (i, &pi) in perm.iter().enumerate() {
            assert!((per_p[i] - per[pi]).abs() < 1e-12);
        }
    }
}
