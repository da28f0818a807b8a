//! Pipeline driver: synthetic task generation, vocabulary and n-gram table
//! construction, LM / MLE / RL training, decoding, scoring, and
//! learning-curve analysis. Every command reads a flat key-value config
//! (overridable with --set key=value) and writes a manifest recording the
//! config hash, seed, and input hashes next to its artifacts.

use clap::{Args, Parser, Subcommand};
use priorseq::config::{resolve_threads, KvConfig, Manifest};
use priorseq::corpus::{
    generate_synthetic_task, load_dataset, load_raw_captions, save_features, save_raw_captions,
    tokenize, SynthConfig, Vocabulary,
};
use priorseq::langmodel::{train_lm, LanguageModelParams, LmPrior, LmTrainConfig, ThresholdSchedule};
use priorseq::metrics::{BadEndingLexicon, Interner, ScoreReport, DEFAULT_BAD_ENDINGS};
use priorseq::ngram::{NGramPrior, NGramTable};
use priorseq::policy::{Arch, DecodeConfig, Mode, PolicyParams, StepMask};
use priorseq::rl::{
    strip_end, train_mle, train_rl, write_curve_svg, write_learning_curve, Dataset, MleConfig,
    RewardMetric, TrainConfig, CURVE_HEADER,
};
use priorseq::rng::stream;
use priorseq::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "priorseq", version, about = "Prior-constrained caption policy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Flat key-value config file (`key value` or `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, key=value; flags win over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed; all randomness derives from it via named streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to PRIORSEQ_THREADS, then 1).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic captioning task (captions + features).
    Synth(Common),
    /// Build a vocabulary from a captions file.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        captions: PathBuf,
    },
    /// Build n-gram tables (orders n down to 1) from training captions.
    BuildNgrams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Train the LSTM language model on training captions.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Cross-entropy warm start of the captioning policy.
    TrainMle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Self-critical REINFORCE training from a warm-started policy.
    TrainRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Decode captions for a split and write predictions JSONL.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Score a predictions file against references.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        captions: PathBuf,
    },
    /// Summarize and compare learning-curve CSVs.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// One or two curve files; with two, the first is compared against
        /// the second as the baseline.
        #[arg(long = "curve", required = true)]
        curves: Vec<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn merged_config(common: &Common) -> Result<(KvConfig, u64)> {
    let mut config = match &common.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::new(),
    };
    config.apply_overrides(&common.sets)?;
    if let Some(seed) = common.seed {
        config.set("seed", &seed.to_string());
    }
    let seed = config.u64_or("seed", 0)?;
    let _threads = resolve_threads(common.threads);
    std::fs::create_dir_all(&common.out)?;
    Ok((config, seed))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(common) => cmd_synth(&common),
        Command::BuildVocab { common, captions } => cmd_build_vocab(&common, &captions),
        Command::BuildNgrams {
            common,
            captions,
            vocab,
        } => cmd_build_ngrams(&common, &captions, &vocab),
        Command::TrainLm {
            common,
            captions,
            vocab,
        } => cmd_train_lm(&common, &captions, &vocab),
        Command::TrainMle {
            common,
            captions,
            features,
            vocab,
        } => cmd_train_mle(&common, &captions, &features, &vocab),
        Command::TrainRl {
            common,
            captions,
            features,
            vocab,
            policy,
        } => cmd_train_rl(&common, &captions, &features, &vocab, &policy),
        Command::Decode {
            common,
            captions,
            features,
            vocab,
            policy,
        } => cmd_decode(&common, &captions, &features, &vocab, &policy),
        Command::Score {
            common,
            predictions,
            captions,
        } => cmd_score(&common, &predictions, &captions),
        Command::Analyze { common, curves } => cmd_analyze(&common, &curves),
    }
}

fn cmd_synth(common: &Common) -> Result<()> {
    let (config, seed) = merged_config(common)?;
    let synth = SynthConfig {
        noise_std: config.f64_or("synth.noise_std", 0.05)?,
        locations: config.usize_or("synth.locations", 1)?,
        ..Default::default()
    };
    let n_items = config.usize_or("synth.items", 1000)?;
    let (captions, grids) = generate_synthetic_task(seed, n_items, &synth)?;
    let captions_path = common.out.join("captions.jsonl");
    let features_path = common.out.join("features.bin");
    save_raw_captions(&captions_path, &captions)?;
    save_features(&features_path, &grids)?;
    let mut manifest = Manifest::new("synth", seed, &config);
    manifest.add_output(&captions_path);
    manifest.add_output(&features_path);
    manifest.write(&common.out)?;
    println!(
        "wrote {} items to {}",
        n_items,
        common.out.display()
    );
    Ok(())
}

fn cmd_build_vocab(common: &Common, captions: &Path) -> Result<()> {
    let (config, seed) = merged_config(common)?;
    let raw = load_raw_captions(captions)?;
    let min_count = config.usize_or("vocab.min_count", 5)? as u32;
    let tokenized: Vec<Vec<String>> = raw
        .iter()
        .flat_map(|r| r.refs.iter().map(|s| tokenize(s)))
        .collect();
    let vocab = Vocabulary::build(&tokenized, min_count)?;
    let out_path = common.out.join("vocab.txt");
    vocab.save(&out_path)?;
    let mut manifest = Manifest::new("build-vocab", seed, &config);
    manifest.add_input(captions)?;
    manifest.add_output(&out_path);
    manifest.write(&common.out)?;
    println!("vocabulary of {} words -> {}", vocab.len(), out_path.display());
    Ok(())
}

fn load_train_references(captions: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let raw = load_raw_captions(captions)?;
    let records = priorseq::corpus::encode_records(&raw, vocab)?;
    Ok(records
        .into_iter()
        .filter(|r| r.split == priorseq::corpus::Split::Train)
        .flat_map(|r| r.references)
        .collect())
}

fn cmd_build_ngrams(common: &Common, captions: &Path, vocab_path: &Path) -> Result<()> {
    let (config, seed) = merged_config(common)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let refs = load_train_references(captions, &vocab)?;
    let n = config.usize_or("ngram.n", 4)?;
    let min_freq = config.usize_or("ngram.min_freq", 5)? as u32;
    let prior = NGramPrior::build(&refs, n, min_freq, vocab.len())?;
    let mut manifest = Manifest::new("build-ngrams", seed, &config);
    manifest.add_input(captions)?;
    manifest.add_input(vocab_path)?;
    for table in prior.tables() {
        let path = common.out.join(format!("ngram-{}.txt", table.n));
        table.save(&path, &vocab)?;
        manifest.add_output(&path);
    }
    manifest.write(&common.out)?;
    println!(
        "n-gram tables (orders {}..1) -> {}",
        n,
        common.out.display()
    );
    Ok(())
}

fn load_ngram_prior(dir: &Path, n: usize, vocab: &Vocabulary) -> Result<NGramPrior> {
    let tables = (1..=n)
        .rev()
        .map(|k| NGramTable::load(&dir.join(format!("ngram-{k}.txt")), vocab))
        .collect::<Result<Vec<_>>>()?;
    NGramPrior::from_tables(tables)
}

fn cmd_train_lm(common: &Common, captions: &Path, vocab_path: &Path) -> Result<()> {
    let (config, seed) = merged_config(common)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let raw = load_raw_captions(captions)?;
    let records = priorseq::corpus::encode_records(&raw, &vocab)?;
    let lm_config = LmTrainConfig {
        embed_size: config.usize_or("lm.embed", 256)?,
        hidden_size: config.usize_or("lm.hidden", 256)?,
        learning_rate: config.f64_or("lm.lr", 0.001)?,
        batch_size: config.usize_or("lm.batch", 20)?,
        epochs: config.usize_or("lm.epochs", 10)?,
        clip_norm: config.f64_or("lm.clip_norm", 5.0)?,
        seed,
    };
    let (lm, curve) = train_lm(&records, vocab.len(), &lm_config)?;
    let ckpt = common.out.join("lm.ckpt");
    lm.save(&ckpt)?;
    let curve_path = common.out.join("lm-loss.csv");
    let mut csv = String::from("epoch,train_cross_entropy\n");
    for (i, ce) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{ce:.6}\n"));
    }
    std::fs::write(&curve_path, csv)?;
    let mut manifest = Manifest::new("train-lm", seed, &config);
    manifest.add_input(captions)?;
    manifest.add_input(vocab_path)?;
    manifest.add_output(&ckpt);
    manifest.add_output(&curve_path);
    manifest.write(&common.out)?;
    println!(
        "language model -> {} (final cross-entropy {:.4})",
        ckpt.display(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn policy_from_config(config: &KvConfig, vocab_size: usize, feat_dim: usize, seed: u64) -> Result<PolicyParams> {
    let arch = match config.str_or("model.arch", "plain") {
        "plain" => Arch::Plain,
        "attention" => Arch::Attention,
        other => {
            return Err(Error::Config(format!(
                "model.arch must be plain or attention, found `{other}`"
            )))
        }
    };
    let mut rng = stream(seed, "init");
    Ok(PolicyParams::init(
        arch,
        vocab_size,
        config.usize_or("model.embed", 128)?,
        config.usize_or("model.hidden", 128)?,
        feat_dim,
        config.usize_or("model.att", 64)?,
        &mut rng,
    ))
}

fn cmd_train_mle(
    common: &Common,
    captions: &Path,
    features: &Path,
    vocab_path: &Path,
) -> Result<()> {
    let (config, seed) = merged_config(common)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let (records, grids) = load_dataset(captions, features, &vocab)?;
    let feat_dim = grids.first().map_or(0, |g| g.dim);
    let dataset = Dataset::new(records, grids)?;
    let mut policy = policy_from_config(&config, vocab.len(), feat_dim, seed)?;
    let mle = MleConfig {
        learning_rate: config.f64_or("mle.lr", 5e-4)?,
        batch_size: config.usize_or("mle.batch", 20)?,
        epochs: config.usize_or("mle.epochs", 20)?,
        max_len: config.usize_or("mle.max_len", 16)?,
        clip_norm: config.f64_or("mle.clip_norm", 5.0)?,
        seed,
    };
    let curve = train_mle(&mut policy, &dataset, &mle)?;
    let ckpt = common.out.join("policy-mle.ckpt");
    policy.save(&ckpt)?;
    let curve_path = common.out.join("mle-val.csv");
    let mut csv = String::from("epoch,val_cider\n");
    for (i, v) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{v:.6}\n"));
    }
    std::fs::write(&curve_path, csv)?;
    let mut manifest = Manifest::new("train-mle", seed, &config);
    manifest.add_input(captions)?;
    manifest.add_input(features)?;
    manifest.add_input(vocab_path)?;
    manifest.add_output(&ckpt);
    manifest.add_output(&curve_path);
    manifest.write(&common.out)?;
    println!(
        "warm-started policy -> {} (best val {:.4})",
        ckpt.display(),
        curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
    Ok(())
}

/// The constraint selected by `constraint`: none, ngram, or lm.
fn load_prior(
    config: &KvConfig,
    vocab: &Vocabulary,
) -> Result<Option<Box<dyn StepMask>>> {
    match config.str_or("constraint", "none") {
        "none" => Ok(None),
        "ngram" => {
            let dir = PathBuf::from(config.required("constraint.ngram_dir")?);
            let n = config.usize_or("ngram.n", 4)?;
            Ok(Some(Box::new(load_ngram_prior(&dir, n, vocab)?)))
        }
        "lm" => {
            let ckpt = PathBuf::from(config.required("constraint.lm_ckpt")?);
            let lm = LanguageModelParams::load(&ckpt)?;
            let schedule = ThresholdSchedule::new(
                config.f64_or("constraint.eta0", 0.00005)?,
                config.f64_or("constraint.growth", 2.0)?,
            )?;
            Ok(Some(Box::new(LmPrior::new(lm, schedule))))
        }
        other => Err(Error::Config(format!(
            "constraint must be none, ngram, or lm; found `{other}`"
        ))),
    }
}

fn cmd_train_rl(
    common: &Common,
    captions: &Path,
    features: &Path,
    vocab_path: &Path,
    policy_path: &Path,
) -> Result<()> {
    let (config, seed) = merged_config(common)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let (records, grids) = load_dataset(captions, features, &vocab)?;
    let dataset = Dataset::new(records, grids)?;
    let mut policy = PolicyParams::load(policy_path)?;
    let prior = load_prior(&config, &vocab)?;
    let lexicon = BadEndingLexicon::default_for(&vocab).ok();
    let train_config = TrainConfig {
        reward: RewardMetric::parse(config.str_or("rl.reward", "cider-d"))?,
        k: config.usize_or("rl.k", 10)?,
        batch_size: config.usize_or("rl.batch", 20)?,
        learning_rate: config.f64_or("rl.lr", 5e-5)?,
        anneal_factor: config.f64_or("rl.anneal_factor", 0.2)?,
        anneal_patience: config.usize_or("rl.anneal_patience", 10)?,
        epochs: config.usize_or("rl.epochs", 30)?,
        max_len: config.usize_or("rl.max_len", 16)?,
        clip_norm: config.f64_or("rl.clip_norm", 5.0)?,
        seed,
        average_all_k: config.bool_or("rl.average_all_k", false)?,
    };
    let strip_eval = config.bool_or("rl.strip_endings_eval", false)?;
    let rows = train_rl(
        &mut policy,
        &dataset,
        &train_config,
        prior.as_deref(),
        lexicon.as_ref(),
        strip_eval,
    )?;
    let ckpt = common.out.join("policy-rl.ckpt");
    policy.save(&ckpt)?;
    let curve_path = common.out.join("rl-curve.csv");
    write_learning_curve(&curve_path, &rows)?;
    let svg_path = common.out.join("rl-curve.svg");
    write_curve_svg(&svg_path, &rows)?;
    let mut manifest = Manifest::new("train-rl", seed, &config);
    manifest.add_input(captions)?;
    manifest.add_input(features)?;
    manifest.add_input(vocab_path)?;
    manifest.add_input(policy_path)?;
    manifest.add_output(&ckpt);
    manifest.add_output(&curve_path);
    manifest.add_output(&svg_path);
    manifest.write(&common.out)?;
    if let Some(last) = rows.last() {
        println!(
            "policy -> {} (final val {:.4}, bad-end rate {:.4}, mean mask {:.1})",
            ckpt.display(),
            last.val_cider,
            last.bad_end_rate,
            last.mean_mask_size
        );
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Prediction {
    id: String,
    caption: String,
}

fn cmd_decode(
    common: &Common,
    captions: &Path,
    features: &Path,
    vocab_path: &Path,
    policy_path: &Path,
) -> Result<()> {
    let (config, seed) = merged_config(common)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let (records, grids) = load_dataset(captions, features, &vocab)?;
    let dataset = Dataset::new(records, grids)?;
    let policy = PolicyParams::load(policy_path)?;
    let prior = load_prior(&config, &vocab)?;
    let split = match config.str_or("decode.split", "test") {
        "train" => priorseq::corpus::Split::Train,
        "val" => priorseq::corpus::Split::Val,
        "test" => priorseq::corpus::Split::Test,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let mode = match config.str_or("decode.mode", "greedy") {
        "greedy" => Mode::Greedy,
        "sample" => Mode::Sample,
        other => return Err(Error::Config(format!("unknown decode mode `{other}`"))),
    };
    let decode_config = DecodeConfig {
        max_len: config.usize_or("decode.max_len", 16)?,
        mode,
        temperature: config.f64_or("decode.temperature", 1.0)?,
        allow_fallback: config.bool_or("decode.allow_fallback", true)?,
    };
    let mut rng = stream(seed, "decode");
    let out_path = common.out.join("predictions.jsonl");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
    let mut count = 0usize;
    for &i in &dataset.indices_of(split) {
        let (record, feats) = &dataset.items[i];
        let out = policy.decode(feats, &decode_config, prior.as_deref(), &mut rng)?;
        let words = vocab.decode(&strip_end(&out.tokens));
        let line = serde_json::to_string(&Prediction {
            id: record.item_id.clone(),
            caption: words.join(" "),
        })
        .map_err(Error::from)?;
        writeln!(file, "{line}")?;
        count += 1;
    }
    file.flush()?;
    let mut manifest = Manifest::new("decode", seed, &config);
    manifest.add_input(captions)?;
    manifest.add_input(features)?;
    manifest.add_input(vocab_path)?;
    manifest.add_input(policy_path)?;
    manifest.add_output(&out_path);
    manifest.write(&common.out)?;
    println!("{count} captions -> {}", out_path.display());
    Ok(())
}

fn cmd_score(common: &Common, predictions: &Path, captions: &Path) -> Result<()> {
    let (config, seed) = merged_config(common)?;
    let raw = load_raw_captions(captions)?;
    let file = std::fs::File::open(predictions)?;
    let mut preds: Vec<Prediction> = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        preds.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    let mut interner = Interner::new();
    let mut cands = Vec::with_capacity(preds.len());
    let mut refs = Vec::with_capacity(preds.len());
    for p in &preds {
        let item = raw
            .iter()
            .find(|r| r.id == p.id)
            .ok_or_else(|| Error::MissingFeature(p.id.clone()))?;
        cands.push(interner.encode(&tokenize(&p.caption)));
        refs.push(
            item.refs
                .iter()
                .map(|r| interner.encode(&tokenize(r)))
                .collect::<Vec<_>>(),
        );
    }
    let lexicon = BadEndingLexicon::from_token_phrases(
        DEFAULT_BAD_ENDINGS
            .iter()
            .map(|p| (p.to_string(), interner.encode(&tokenize(p))))
            .collect(),
    )?;
    let per_item = config.bool_or("score.per_item", false)?;
    let report = ScoreReport::compute(&cands, &refs, &lexicon, None, per_item)?;
    let out_path = common.out.join("report.json");
    std::fs::write(
        &out_path,
        serde_json::to_string_pretty(&report).map_err(Error::from)?,
    )?;
    let mut manifest = Manifest::new("score", seed, &config);
    manifest.add_input(predictions)?;
    manifest.add_input(captions)?;
    manifest.add_output(&out_path);
    manifest.write(&common.out)?;
    print!("{}", report.summary_table());
    println!("report -> {}", out_path.display());
    Ok(())
}

#[derive(Serialize)]
struct CurveSummary {
    file: String,
    epochs: usize,
    final_val: f64,
    best_val: f64,
    final_bad_end_rate: f64,
    mean_mask_size: f64,
    epochs_to_threshold: Option<usize>,
}

fn parse_curve(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != CURVE_HEADER {
        return Err(Error::Malformed {
            line: 1,
            msg: format!("unexpected curve header `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Malformed {
                line: i + 2,
                msg: format!("bad number `{v}`"),
            }))
            .collect::<Result<_>>()?;
        rows.push(vals);
    }
    Ok(rows)
}

fn cmd_analyze(common: &Common, curves: &[PathBuf]) -> Result<()> {
    let (config, seed) = merged_config(common)?;
    // Column indices in the learning-curve CSV.
    const VAL: usize = 4;
    const BAD: usize = 7;
    const MASK: usize = 8;
    let parsed: Vec<Vec<Vec<f64>>> = curves.iter().map(|p| parse_curve(p)).collect::<Result<_>>()?;
    // Threshold: 90% of the last curve's final validation score.
    let threshold = parsed
        .last()
        .and_then(|rows| rows.last())
        .map(|r| 0.9 * r[VAL]);
    let mut summaries = Vec::new();
    for (path, rows) in curves.iter().zip(&parsed) {
        let last = rows.last().ok_or(Error::EmptyCorpus)?;
        let best = rows.iter().map(|r| r[VAL]).fold(f64::NEG_INFINITY, f64::max);
        let epochs_to_threshold = threshold.and_then(|th| {
            rows.iter().position(|r| r[VAL] >= th)
        });
        summaries.push(CurveSummary {
            file: path.display().to_string(),
            epochs: rows.len(),
            final_val: last[VAL],
            best_val: best,
            final_bad_end_rate: last[BAD],
            mean_mask_size: rows.iter().map(|r| r[MASK]).sum::<f64>() / rows.len() as f64,
            epochs_to_threshold,
        });
    }
    let json = serde_json::to_string_pretty(&summaries).map_err(Error::from)?;
    let out_path = common.out.join("analysis.json");
    std::fs::write(&out_path, &json)?;
    let mut manifest = Manifest::new("analyze", seed, &config);
    for p in curves {
        manifest.add_input(p)?;
    }
    manifest.add_output(&out_path);
    manifest.write(&common.out)?;
    println!("{json}");
    Ok(())
}
