//! Agreement between the built-in scorers and an independently written
//! reference implementation, captured once into a checked-in fixture.

use priorseq::metrics::{
    bleu4_corpus, bleu4_sentence, rouge_l_corpus, CiderScorer, CiderVariant, Interner,
};
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    candidates: Vec<Vec<String>>,
    references: Vec<Vec<Vec<String>>>,
    expected: Expected,
    dangling_phrase: Dangling,
}

#[derive(Deserialize)]
struct Expected {
    bleu4_corpus: f64,
    bleu4_sentence_mean: f64,
    rouge_l: f64,
    cider: f64,
    cider_d: f64,
    per_item_cider_d: Vec<f64>,
}

#[derive(Deserialize)]
struct Dangling {
    refsets: Vec<Vec<Vec<String>>>,
    candidate_plain: Vec<String>,
    candidate_dangling: Vec<String>,
    cider_d_plain: f64,
    cider_d_dangling: f64,
}

fn load() -> Fixture {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/metric_scores.json"
    ))
    .expect("fixture file present");
    serde_json::from_str(&text).expect("fixture parses")
}

fn encode(interner: &mut Interner, words: &[String]) -> Vec<u32> {
    words.iter().map(|w| interner.intern(w)).collect()
}

#[test]
fn scores_match_the_reference_implementation() {
    let fx = load();
    let mut it = Interner::new();
    let cands: Vec<Vec<u32>> = fx.candidates.iter().map(|c| encode(&mut it, c)).collect();
    let refs: Vec<Vec<Vec<u32>>> = fx
        .references
        .iter()
        .map(|rs| rs.iter().map(|r| encode(&mut it, r)).collect())
        .collect();

    let bleu = bleu4_corpus(&cands, &refs).unwrap();
    assert!(
        (bleu - fx.expected.bleu4_corpus).abs() < 1e-4,
        "corpus BLEU-4 {bleu} vs {}",
        fx.expected.bleu4_corpus
    );

    let sent_mean = cands
        .iter()
        .zip(&refs)
        .map(|(c, r)| bleu4_sentence(c, r).unwrap())
        .sum::<f64>()
        / cands.len() as f64;
    assert!((sent_mean - fx.expected.bleu4_sentence_mean).abs() < 1e-4);

    let rouge = rouge_l_corpus(&cands, &refs).unwrap();
    assert!((rouge - fx.expected.rouge_l).abs() < 1e-4);

    let scorer = CiderScorer::from_references(&refs);
    let (_, cider) = scorer.score_corpus(&cands, &refs, CiderVariant::Plain);
    assert!((cider - fx.expected.cider).abs() < 1e-3);
    let (per_d, cider_d) = scorer.score_corpus(&cands, &refs, CiderVariant::D);
    assert!((cider_d - fx.expected.cider_d).abs() < 1e-3);
    for (i, (got, want)) in per_d.iter().zip(&fx.expected.per_item_cider_d).enumerate() {
        assert!((got - want).abs() < 1e-3, "item {i}: {got} vs {want}");
    }
}

#[test]
fn appending_a_dangling_phrase_can_raise_the_score() {
    let fx = load();
    let mut it = Interner::new();
    let refs: Vec<Vec<Vec<u32>>> = fx
        .dangling_phrase
        .refsets
        .iter()
        .map(|rs| rs.iter().map(|r| encode(&mut it, r)).collect())
        .collect();
    let plain = encode(&mut it, &fx.dangling_phrase.candidate_plain);
    let dangling = encode(&mut it, &fx.dangling_phrase.candidate_dangling);
    let scorer = CiderScorer::from_references(&refs);
    let before = scorer.score(&plain, &refs[0], CiderVariant::D);
    let after = scorer.score(&dangling, &refs[0], CiderVariant::D);
    assert!((before - fx.dangling_phrase.cider_d_plain).abs() < 1e-3);
    assert!((after - fx.dangling_phrase.cider_d_dangling).abs() < 1e-3);
    // The reward itself prefers the truncated, dangling caption.
    assert!(after > before);
}
