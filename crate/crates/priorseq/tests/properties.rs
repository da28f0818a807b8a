//! Randomized invariants: distributions, masks, metric identities, and
//! bad-ending stripping under arbitrary inputs.

use priorseq::corpus::END;
use priorseq::metrics::{
    bleu4_corpus, rouge_l, strip_bad_ending, BadEndingLexicon, CiderScorer, CiderVariant,
};
use priorseq::neural::masked_softmax;
use priorseq::ngram::{MaskVector, NGramTable};
use proptest::prelude::*;

fn token_seq(max_token: u32) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(3..max_token, 1..12)
}

proptest! {
    #[test]
    fn masked_softmax_is_a_distribution_on_the_mask(
        logits in prop::collection::vec(-10.0f64..10.0, 4..16),
        picks in prop::collection::vec(any::<bool>(), 4..16),
    ) {
        let len = logits.len().min(picks.len());
        let logits = &logits[..len];
        let mut picks = picks[..len].to_vec();
        if !picks.iter().any(|&b| b) {
            picks[0] = true;
        }
        let mask = MaskVector::from_allowed(
            len,
            picks.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i),
        );
        let probs = masked_softmax(logits, Some(&mask)).unwrap();
        let sum: f64 = probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for (k, &p) in probs.iter().enumerate() {
            if mask.allows(k as u32) {
                prop_assert!(p > 0.0);
            } else {
                prop_assert_eq!(p, 0.0);
            }
        }
    }

    #[test]
    // At least 4 tokens: shorter candidates have no 4-grams at all, and
    // unsmoothed corpus BLEU-4 is 0 by definition there.
    fn self_match_metrics_equal_one(seq in prop::collection::vec(3u32..40, 4..12)) {
        prop_assert!((rouge_l(&seq, &[seq.clone()]).unwrap() - 1.0).abs() < 1e-12);
        let corpus = vec![seq.clone()];
        let refs = vec![vec![seq.clone()]];
        prop_assert!((bleu4_corpus(&corpus, &refs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cider_permutation_invariance(
        seqs in prop::collection::vec(token_seq(30), 3..8),
        swap in (0usize..7, 0usize..7),
    ) {
        let refs: Vec<Vec<Vec<u32>>> = seqs.iter().map(|s| vec![s.clone()]).collect();
        let cands = seqs.clone();
        let scorer = CiderScorer::from_references(&refs);
        let (per, mean) = scorer.score_corpus(&cands, &refs, CiderVariant::D);
        let (a, b) = (swap.0 % seqs.len(), swap.1 % seqs.len());
        let mut cands_p = cands.clone();
        let mut refs_p = refs.clone();
        cands_p.swap(a, b);
        refs_p.swap(a, b);
        let (per_p, mean_p) = scorer.score_corpus(&cands_p, &refs_p, CiderVariant::D);
        prop_assert!((mean - mean_p).abs() < 1e-9);
        prop_assert!((per[a] - per_p[b]).abs() < 1e-9);
    }

    #[test]
    fn stripping_is_idempotent(seq in prop::collection::vec(0u32..6, 0..14)) {
        // Phrases over a tiny alphabet so matches actually occur.
        let lexicon = BadEndingLexicon::from_token_phrases(vec![
            ("p0".into(), vec![1, 2]),
            ("p1".into(), vec![3]),
            ("p2".into(), vec![4, 1, 2]),
        ])
        .unwrap();
        let once = strip_bad_ending(&seq, &lexicon, false);
        let twice = strip_bad_ending(&once, &lexicon, false);
        prop_assert_eq!(&once, &twice);
        // The fixed point never ends with a lexicon phrase.
        prop_assert!(lexicon.terminal_match(&once).is_none());
    }

    #[test]
    fn raising_min_freq_shrinks_masks(
        refs in prop::collection::vec(token_seq(12), 2..10),
        history in prop::collection::vec(3u32..12, 0..4),
    ) {
        let refs: Vec<Vec<u32>> = refs
            .into_iter()
            .map(|mut r| {
                r.push(END);
                r
            })
            .collect();
        let low = NGramTable::build(&refs, 3, 1, 12).unwrap();
        let high = NGramTable::build(&refs, 3, 2, 12).unwrap();
        let mask_low = low.mask_for(&history);
        let mask_high = high.mask_for(&history);
        for k in 0..12u32 {
            if mask_high.allows(k) {
                prop_assert!(mask_low.allows(k), "token {} allowed only at higher min_freq", k);
            }
        }
    }
}
