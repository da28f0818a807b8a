//! Corpus handling: tokenization, vocabulary, dataset I/O and the synthetic
//! micro-captioning task.

pub mod io;
pub mod synth;
pub mod vocab;

pub use io::{load_dataset, load_features, load_raw_captions, save_features, save_raw_captions};
pub use synth::{generate_synthetic_task, SynthConfig};
pub use vocab::{tokenize, Vocabulary, END, RESERVED, START, UNK};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Captions as they appear on disk, before vocabulary encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawCaptions {
    pub id: String,
    pub split: Split,
    pub refs: Vec<String>,
}

/// One dataset item with encoded references, each ending with END.
#[derive(Debug, Clone)]
pub struct CaptionRecord {
    pub item_id: String,
    pub split: Split,
    pub references: Vec<Vec<u32>>,
}

/// L feature vectors of dimension D for one item. L=1 for the plain
/// encoder-decoder, L>1 for attention.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub item_id: String,
    pub locations: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(item_id: String, locations: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != locations * dim {
            return Err(Error::DimensionMismatch {
                id: item_id,
                expected: locations * dim,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Malformed {
                line: 0,
                msg: format!("non-finite feature value for item `{item_id}`"),
            });
        }
        Ok(FeatureGrid {
            item_id,
            locations,
            dim,
            data,
        })
    }

    pub fn location(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Tokenize and encode raw captions against a vocabulary, appending END to
/// every reference.
pub fn encode_records(raw: &[RawCaptions], vocab: &Vocabulary) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::with_capacity(raw.len());
    for r in raw {
        if r.refs.is_empty() {
            return Err(Error::Malformed {
                line: 0,
                msg: format!("item `{}` has no references", r.id),
            });
        }
        let references = r
            .refs
            .iter()
            .map(|text| {
                let mut ids = vocab.encode(&tokenize(text));
                ids.push(END);
                ids
            })
            .collect();
        out.push(CaptionRecord {
            item_id: r.id.clone(),
            split: r.split,
            references,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_records_appends_end() {
        let raw = vec![RawCaptions {
            id: "x".into(),
            split: Split::Train,
            refs: vec!["a red cat".into()],
        }];
        let corpus = vec![tokenize("a red cat")];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let recs = encode_records(&raw, &vocab).unwrap();
        assert_eq!(recs[0].references[0].last(), Some(&END));
        assert_eq!(recs[0].references[0].len(), 4);
    }

    #[test]
    fn feature_grid_validates_dims() {
        assert!(FeatureGrid::new("a".into(), 2, 3, vec![0.0; 5]).is_err());
        assert!(FeatureGrid::new("a".into(), 2, 3, vec![0.0; 6]).is_ok());
        assert!(FeatureGrid::new("a".into(), 1, 2, vec![f64::NAN, 0.0]).is_err());
    }
}
