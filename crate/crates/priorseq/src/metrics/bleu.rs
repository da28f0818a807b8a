//! BLEU-4: modified n-gram precision with brevity penalty. Corpus-level
//! aggregates counts before combining; sentence-level applies +1 smoothing
//! to all four precisions.

use crate::error::{Error, Result};
use std::collections::HashMap;

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], u64> {
    let mut counts: HashMap<&[u32], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped match count and total candidate n-gram count for one order.
fn clipped(candidate: &[u32], references: &[Vec<u32>], n: usize) -> (u64, u64) {
    let cand = ngram_counts(candidate, n);
    let total: u64 = cand.values().sum();
    let mut max_ref: HashMap<&[u32], u64> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(*max_ref.get(g).unwrap_or(&0)))
        .sum();
    (matched, total)
}

/// Reference length closest to the candidate length, shorter on ties.
fn closest_ref_len(cand_len: usize, references: &[Vec<u32>]) -> usize {
    let mut best = references[0].len();
    for r in &references[1..] {
        let l = r.len();
        let d = |x: usize| (x as i64 - cand_len as i64).abs();
        if d(l) < d(best) || (d(l) == d(best) && l < best) {
            best = l;
        }
    }
    best
}

fn brevity_penalty(cand_len: u64, ref_len: u64) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Sentence-level BLEU-4 with +1 smoothing on the precisions.
pub fn bleu4_sentence(candidate: &[u32], references: &[Vec<u32>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let (matched, total) = clipped(candidate, references, n);
        log_sum += (((matched + 1) as f64) / ((total + 1) as f64)).ln();
    }
    let bp = brevity_penalty(
        candidate.len() as u64,
        closest_ref_len(candidate.len(), references) as u64,
    );
    Ok(bp * (log_sum / MAX_ORDER as f64).exp())
}

/// Corpus-level BLEU-4, unsmoothed: counts are pooled over items before the
/// precisions are combined.
pub fn bleu4_corpus(candidates: &[Vec<u32>], references: &[Vec<Vec<u32>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyReferences);
    }
    let mut matched = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped(c, r, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
        cand_len += c.len() as u64;
        ref_len += closest_ref_len(c.len(), r) as u64;
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        if matched[n] == 0 || totals[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / totals[n] as f64).ln();
    }
    Ok(brevity_penalty(cand_len, ref_len) * (log_sum / MAX_ORDER as f64).exp())
}
