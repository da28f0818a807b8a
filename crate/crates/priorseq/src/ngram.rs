//! Frequency-filtered n-gram tables and the per-step indicator masks they
//! induce over the vocabulary, with order-backoff fallback for contexts that
//! left the table.

use crate::corpus::{Vocabulary, END, START, UNK};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Indicator over vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    bits: Vec<bool>,
    cardinality: usize,
}

impl MaskVector {
    pub fn all_ones(len: usize) -> Self {
        MaskVector {
            bits: vec![true; len],
            cardinality: len,
        }
    }

    pub fn from_allowed(len: usize, allowed: impl Iterator<Item = usize>) -> Self {
        let mut bits = vec![false; len];
        let mut cardinality = 0;
        for k in allowed {
            if !bits[k] {
                bits[k] = true;
                cardinality += 1;
            }
        }
        MaskVector { bits, cardinality }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    pub fn allows(&self, k: u32) -> bool {
        self.bits[k as usize]
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }
}

/// The set F of n-grams with corpus frequency >= min_freq, plus the
/// context -> allowed-next-word index derived from it.
#[derive(Debug, Clone)]
pub struct NGramTable {
    pub n: usize,
    pub min_freq: u32,
    vocab_size: usize,
    /// Retained n-grams with their counts, id-lexicographic order.
    counts: BTreeMap<Vec<u32>, u32>,
    context_map: HashMap<Vec<u32>, Vec<u32>>,
}

impl NGramTable {
    /// Count n-grams over START-padded, END-terminated references and keep
    /// those at or above `min_freq`. Windows containing UNK are skipped:
    /// F is defined over known words only.
    pub fn build(
        references: &[Vec<u32>],
        n: usize,
        min_freq: u32,
        vocab_size: usize,
    ) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if !(1..=6).contains(&n) {
            return Err(Error::Config(format!("n-gram order {n} outside 1..=6")));
        }
        if min_freq < 1 {
            return Err(Error::Config("min_freq must be >= 1".into()));
        }
        let mut raw: HashMap<Vec<u32>, u32> = HashMap::new();
        for r in references {
            let mut padded = vec![START; n - 1];
            padded.extend_from_slice(r);
            for window in padded.windows(n) {
                if window.contains(&UNK) {
                    continue;
                }
                // END only as the final element.
                if window[..n - 1].contains(&END) {
                    continue;
                }
                *raw.entry(window.to_vec()).or_insert(0) += 1;
            }
        }
        let counts: BTreeMap<Vec<u32>, u32> = raw
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        let mut context_map: HashMap<Vec<u32>, Vec<u32>> = HashMap::new();
        for gram in counts.keys() {
            context_map
                .entry(gram[..n - 1].to_vec())
                .or_default()
                .push(gram[n - 1]);
        }
        Ok(NGramTable {
            n,
            min_freq,
            vocab_size,
            counts,
            context_map,
        })
    }

    pub fn total_ngrams(&self) -> usize {
        self.counts.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_of(&self, history: &[u32]) -> Vec<u32> {
        let need = self.n - 1;
        let mut ctx = Vec::with_capacity(need);
        if history.len() < need {
            ctx.extend(std::iter::repeat(START).take(need - history.len()));
            ctx.extend_from_slice(history);
        } else {
            ctx.extend_from_slice(&history[history.len() - need..]);
        }
        ctx
    }

    /// The Eq.-8 indicator: allowed[k] iff (last n-1 of the padded history, k)
    /// is in F. Contexts containing UNK and unseen contexts yield the
    /// all-zero mask; callers apply the fallback policy.
    pub fn mask_for(&self, history: &[u32]) -> MaskVector {
        let ctx = self.context_of(history);
        if ctx.contains(&UNK) {
            return MaskVector::from_allowed(self.vocab_size, std::iter::empty());
        }
        match self.context_map.get(&ctx) {
            Some(allowed) => MaskVector::from_allowed(
                self.vocab_size,
                allowed.iter().map(|&k| k as usize),
            ),
            None => MaskVector::from_allowed(self.vocab_size, std::iter::empty()),
        }
    }

    /// Re-scan a generated sequence (ids, END-terminated): true iff every
    /// n-gram of padding+sequence is in F.
    pub fn licenses(&self, sequence: &[u32]) -> bool {
        let mut padded = vec![START; self.n - 1];
        padded.extend_from_slice(sequence);
        padded.windows(self.n).all(|w| self.counts.contains_key(w))
    }

    pub fn contains(&self, gram: &[u32]) -> bool {
        self.counts.contains_key(gram)
    }

    /// Text format: header line, then one line per n-gram with its count,
    /// sorted lexicographically by ids.
    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "#ngram v1 n={} min_freq={}", self.n, self.min_freq)?;
        for (gram, count) in &self.counts {
            let words: Vec<&str> = gram.iter().map(|&id| vocab.lookup(id)).collect();
            writeln!(w, "{}\t{}", words.join(" "), count)?;
        }
        Ok(())
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Malformed {
            line: 1,
            msg: "missing n-gram header".into(),
        })??;
        let (n, min_freq) = parse_header(&header).ok_or(Error::Malformed {
            line: 1,
            msg: format!("bad n-gram header `{header}`"),
        })?;
        let mut counts = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (grams, count) = line.split_once('\t').ok_or(Error::Malformed {
                line: i + 2,
                msg: "missing tab separator".into(),
            })?;
            let ids: Option<Vec<u32>> = grams.split(' ').map(|w| vocab.id_of(w)).collect();
            let ids = ids.ok_or(Error::Malformed {
                line: i + 2,
                msg: format!("unknown word in `{grams}`"),
            })?;
            if ids.len() != n {
                return Err(Error::Malformed {
                    line: i + 2,
                    msg: format!("expected {n}-gram, found {} tokens", ids.len()),
                });
            }
            let count: u32 = count.trim().parse().map_err(|_| Error::Malformed {
                line: i + 2,
                msg: format!("bad count `{count}`"),
            })?;
            counts.insert(ids, count);
        }
        let mut context_map: HashMap<Vec<u32>, Vec<u32>> = HashMap::new();
        for gram in counts.keys() {
            context_map
                .entry(gram[..n - 1].to_vec())
                .or_default()
                .push(gram[n - 1]);
        }
        Ok(NGramTable {
            n,
            min_freq,
            vocab_size: vocab.len(),
            counts,
            context_map,
        })
    }
}

fn parse_header(header: &str) -> Option<(usize, u32)> {
    let rest = header.strip_prefix("#ngram v1 ")?;
    let mut n = None;
    let mut min_freq = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("n=") {
            n = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("min_freq=") {
            min_freq = v.parse().ok();
        }
    }
    Some((n?, min_freq?))
}

/// The full prior: tables of orders n down to 1 built from the same corpus,
/// queried highest order first.
#[derive(Debug, Clone)]
pub struct NGramPrior {
    tables: Vec<NGramTable>,
}

impl NGramPrior {
    pub fn build(
        references: &[Vec<u32>],
        n: usize,
        min_freq: u32,
        vocab_size: usize,
    ) -> Result<Self> {
        let tables = (1..=n)
            .rev()
            .map(|k| NGramTable::build(references, k, min_freq, vocab_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(NGramPrior { tables })
    }

    pub fn from_tables(mut tables: Vec<NGramTable>) -> Result<Self> {
        tables.sort_by(|a, b| b.n.cmp(&a.n));
        if tables.is_empty() || tables.last().unwrap().n != 1 {
            return Err(Error::Config(
                "prior needs tables down to unigram order".into(),
            ));
        }
        Ok(NGramPrior { tables })
    }

    pub fn order(&self) -> usize {
        self.tables[0].n
    }

    pub fn top_table(&self) -> &NGramTable {
        &self.tables[0]
    }

    pub fn tables(&self) -> &[NGramTable] {
        &self.tables
    }

    /// Mask from the top-order table, backing off one order at a time when a
    /// context is unseen (or broken by UNK). Returns the mask and the number
    /// of backoff steps taken (0 = top order answered).
    pub fn mask_with_fallback(&self, history: &[u32]) -> (MaskVector, u32) {
        for (depth, table) in self.tables.iter().enumerate() {
            let mask = table.mask_for(history);
            if mask.cardinality() > 0 {
                return (mask, depth as u32);
            }
        }
        // Unigram table over a non-empty corpus is never empty; reaching
        // here means min_freq filtered everything out at build time.
        let last = self.tables.last().expect("at least the unigram table");
        (last.mask_for(history), self.tables.len() as u32)
    }
}
