//! ROUGE-L: longest-common-subsequence F-measure with recall-favoring beta;
//! multi-reference scores take the best reference.

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F for one candidate against the best of its references.
pub fn rouge_l(candidate: &[u32], references: &[Vec<u32>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let mut best = 0.0f64;
    for r in references {
        if candidate.is_empty() || r.is_empty() {
            continue;
        }
        let lcs = lcs_len(candidate, r) as f64;
        let prec = lcs / candidate.len() as f64;
        let rec = lcs / r.len() as f64;
        if prec + rec > 0.0 {
            let b2 = ROUGE_BETA * ROUGE_BETA;
            let f = (1.0 + b2) * prec * rec / (rec + b2 * prec);
            best = best.max(f);
        }
    }
    Ok(best)
}

pub fn rouge_l_corpus(candidates: &[Vec<u32>], references: &[Vec<Vec<u32>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge_l(c, r)?;
    }
    Ok(sum / candidates.len() as f64)
}
