//! Tokenization and vocabulary construction.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const START: u32 = 0;
pub const END: u32 = 1;
pub const UNK: u32 = 2;
pub const RESERVED: [&str; 3] = ["<start>", "<end>", "<unk>"];

/// Lowercase, strip punctuation (intra-word apostrophes survive), split on
/// whitespace. Never emits reserved tokens: the angle brackets are stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut cleaned = String::with_capacity(lower.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cleaned.push(c);
        } else if c == '\'' {
            let prev_ok = i > 0 && chars[i - 1].is_alphanumeric();
            let next_ok = i + 1 < chars.len() && chars[i + 1].is_alphanumeric();
            if prev_ok && next_ok {
                cleaned.push(c);
            } else {
                cleaned.push(' ');
            }
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    pub min_count: u32,
}

impl Vocabulary {
    /// Retain exactly the words with corpus frequency >= min_count; reserved
    /// tokens come first in id order.
    pub fn build(corpus: &[Vec<String>], min_count: u32) -> Result<Self> {
        if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut freq: HashMap<&str, u32> = HashMap::new();
        for sent in corpus {
            for w in sent {
                *freq.entry(w.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<&str> = freq
            .iter()
            .filter(|(_, &c)| c >= min_count)
            .map(|(w, _)| *w)
            .collect();
        kept.sort_unstable();
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(kept.iter().map(|s| s.to_string()));
        Ok(Self::from_words(words, min_count))
    }

    fn from_words(words: Vec<String>, min_count: u32) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary {
            words,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn lookup(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn is_reserved(id: u32) -> bool {
        id < RESERVED.len() as u32
    }

    /// Encode tokens, mapping out-of-vocabulary words to UNK. Does not append
    /// END; callers decide sequence framing.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens
            .iter()
            .map(|w| self.id_of(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.lookup(i).to_string()).collect()
    }

    /// One word per line in id order, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.words.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if words.len() < RESERVED.len() {
            return Err(Error::Malformed {
                line: 1,
                msg: "vocabulary file shorter than the reserved token set".into(),
            });
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if words[i] != *r {
                return Err(Error::Malformed {
                    line: i + 1,
                    msg: format!("expected reserved token `{r}`, found `{}`", words[i]),
                });
            }
        }
        Ok(Self::from_words(words, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(
            toks("A man doing a trick on a skateboard"),
            vec!["a", "man", "doing", "a", "trick", "on", "a", "skateboard"]
        );
    }

    #[test]
    fn tokenize_empty_input() {
        assert!(toks("").is_empty());
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(
            toks("A tall building, with a clock!"),
            vec!["a", "tall", "building", "with", "a", "clock"]
        );
    }

    #[test]
    fn tokenize_keeps_intra_word_apostrophe() {
        assert_eq!(toks("the dog's 'bone'"), vec!["the", "dog's", "bone"]);
    }

    #[test]
    fn tokenize_never_emits_reserved() {
        for t in toks("<start> <end> <unk>") {
            assert!(!RESERVED.contains(&t.as_str()), "emitted {t}");
        }
    }

    #[test]
    fn build_filters_by_frequency() {
        let corpus = vec![toks("a cat"), toks("a dog"), toks("a cat")];
        let v = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v.len(), RESERVED.len() + 2);
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("cat").is_some());
        assert!(v.id_of("dog").is_none());
        assert_eq!(v.encode(&toks("a dog")), vec![v.id_of("a").unwrap(), UNK]);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let corpus = vec![toks("a cat"), toks("a dog")];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.len(), RESERVED.len() + 3);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocabulary::build(&[], 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn filtering_is_monotone_in_min_count() {
        let corpus: Vec<Vec<String>> = vec![
            toks("a red car on a road"),
            toks("a red car"),
            toks("a blue boat"),
        ];
        let mut prev = usize::MAX;
        for mc in 1..=4 {
            let v = Vocabulary::build(&corpus, mc).unwrap();
            assert!(v.len() <= prev);
            prev = v.len();
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let corpus = vec![toks("a red car on a mat")];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        let ids = v.encode(&toks("a red car"));
        assert_eq!(v.encode(&v.decode(&ids)), ids);
    }

    #[test]
    fn save_load_round_trip() {
        let corpus = vec![toks("a red car"), toks("a blue car")];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocabulary::load(&path).unwrap();
        assert_eq!(v.words, v2.words);
        assert_eq!(v2.id_of("red"), v.id_of("red"));
    }
}
