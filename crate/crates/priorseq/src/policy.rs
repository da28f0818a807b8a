//! The captioning policy: plain encoder-decoder and attention variant, with
//! greedy, free-sampled and prior-constrained decoding plus reverse-mode
//! gradients through time.

use crate::corpus::{FeatureGrid, START};
use crate::error::{Error, Result};
use crate::neural::checkpoint::{read_checkpoint, string_tensor, tensor_string, write_checkpoint};
use crate::neural::tensor::{axpy, matvec, matvec_t_acc, outer_acc};
use crate::neural::{
    lstm_backward, lstm_step, masked_softmax, softmax, LstmCache, LstmParams, NamedTensors, Tensor,
};
use crate::ngram::{MaskVector, NGramPrior};
use crate::rl::gumbel_sample;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Plain,
    Attention,
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::Plain => "plain",
            Arch::Attention => "attention",
        }
    }
}

/// All trainable tensors of the decoder network.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub arch: Arch,
    pub vocab_size: usize,
    pub embed_size: usize,
    pub hidden_size: usize,
    pub feat_dim: usize,
    pub att_size: usize,
    /// Word embeddings, [V, E].
    pub embedding: Tensor,
    pub lstm: LstmParams,
    /// Output projection, [V, H] and [V].
    pub w_out: Tensor,
    pub b_out: Tensor,
    /// Plain variant: image projection [E, D] and [E].
    pub img_w: Tensor,
    pub img_b: Tensor,
    /// Attention variant: f_att = v . tanh(W [a_i; h_prev] + b).
    pub att_w: Tensor,
    pub att_b: Tensor,
    pub att_v: Tensor,
}

impl PolicyParams {
    pub fn init(
        arch: Arch,
        vocab_size: usize,
        embed_size: usize,
        hidden_size: usize,
        feat_dim: usize,
        att_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = 0.08;
        let lstm_input = match arch {
            Arch::Plain => embed_size,
            Arch::Attention => embed_size + feat_dim,
        };
        let (img_w, img_b, att_w, att_b, att_v) = match arch {
            Arch::Plain => (
                Tensor::uniform(&[embed_size, feat_dim], scale, rng),
                Tensor::zeros(&[embed_size]),
                Tensor::zeros(&[0]),
                Tensor::zeros(&[0]),
                Tensor::zeros(&[0]),
            ),
            Arch::Attention => (
                Tensor::zeros(&[0]),
                Tensor::zeros(&[0]),
                Tensor::uniform(&[att_size, feat_dim + hidden_size], scale, rng),
                Tensor::zeros(&[att_size]),
                Tensor::uniform(&[att_size], scale, rng),
            ),
        };
        PolicyParams {
            arch,
            vocab_size,
            embed_size,
            hidden_size,
            feat_dim,
            att_size,
            embedding: Tensor::uniform(&[vocab_size, embed_size], scale, rng),
            lstm: LstmParams::init(lstm_input, hidden_size, rng),
            w_out: Tensor::uniform(&[vocab_size, hidden_size], scale, rng),
            b_out: Tensor::zeros(&[vocab_size]),
            img_w,
            img_b,
            att_w,
            att_b,
            att_v,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for name in g.tensor_names() {
            g.tensor_mut(&name).fill(0.0);
        }
        g
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arch = string_tensor(self.arch.tag());
        let mut entries: Vec<(String, &Tensor)> = vec![("meta/arch".into(), &arch)];
        let names = self.tensor_names();
        for name in &names {
            entries.push((name.clone(), self.tensor(name)));
        }
        write_checkpoint(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let lookup = |n: &str| -> Result<Tensor> {
            entries
                .iter()
                .find(|(name, _)| name == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Malformed {
                    line: 0,
                    msg: format!("checkpoint missing tensor `{n}`"),
                })
        };
        let arch = match tensor_string(&lookup("meta/arch")?).as_str() {
            "plain" => Arch::Plain,
            "attention" => Arch::Attention,
            other => {
                return Err(Error::Malformed {
                    line: 0,
                    msg: format!("unknown architecture tag `{other}`"),
                })
            }
        };
        let embedding = lookup("embedding")?;
        let w_out = lookup("out/w")?;
        let (vocab_size, embed_size) = (embedding.shape()[0], embedding.shape()[1]);
        let hidden_size = w_out.shape()[1];
        let w_x = lookup("lstm/w_x")?;
        let lstm_input = w_x.shape()[1];
        let lstm = LstmParams {
            w_x,
            w_h: lookup("lstm/w_h")?,
            b: lookup("lstm/b")?,
            input_size: lstm_input,
            hidden_size,
        };
        let (feat_dim, att_size, img_w, img_b, att_w, att_b, att_v) = match arch {
            Arch::Plain => {
                let img_w = lookup("img/w")?;
                let d = img_w.shape()[1];
                (
                    d,
                    0,
                    img_w,
                    lookup("img/b")?,
                    Tensor::zeros(&[0]),
                    Tensor::zeros(&[0]),
                    Tensor::zeros(&[0]),
                )
            }
            Arch::Attention => {
                let att_w = lookup("att/w")?;
                let a = att_w.shape()[0];
                let d = att_w.shape()[1] - hidden_size;
                (
                    d,
                    a,
                    Tensor::zeros(&[0]),
                    Tensor::zeros(&[0]),
                    att_w,
                    lookup("att/b")?,
                    lookup("att/v")?,
                )
            }
        };
        Ok(PolicyParams {
            arch,
            vocab_size,
            embed_size,
            hidden_size,
            feat_dim,
            att_size,
            embedding,
            lstm,
            w_out,
            b_out: lookup("out/b")?,
            img_w,
            img_b,
            att_w,
            att_b,
            att_v,
        })
    }
}

impl NamedTensors for PolicyParams {
    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "embedding".to_string(),
            "lstm/w_x".to_string(),
            "lstm/w_h".to_string(),
            "lstm/b".to_string(),
            "out/w".to_string(),
            "out/b".to_string(),
        ];
        match self.arch {
            Arch::Plain => names.extend(["img/w".to_string(), "img/b".to_string()]),
            Arch::Attention => names.extend([
                "att/w".to_string(),
                "att/b".to_string(),
                "att/v".to_string(),
            ]),
        }
        names
    }

    fn tensor(&self, name: &str) -> &Tensor {
        match name {
            "embedding" => &self.embedding,
            "lstm/w_x" => &self.lstm.w_x,
            "lstm/w_h" => &self.lstm.w_h,
            "lstm/b" => &self.lstm.b,
            "out/w" => &self.w_out,
            "out/b" => &self.b_out,
            "img/w" => &self.img_w,
            "img/b" => &self.img_b,
            "att/w" => &self.att_w,
            "att/b" => &self.att_b,
            "att/v" => &self.att_v,
            _ => panic!("unknown tensor `{name}`"),
        }
    }

    fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        match name {
            "embedding" => &mut self.embedding,
            "lstm/w_x" => &mut self.lstm.w_x,
            "lstm/w_h" => &mut self.lstm.w_h,
            "lstm/b" => &mut self.lstm.b,
            "out/w" => &mut self.w_out,
            "out/b" => &mut self.b_out,
            "img/w" => &mut self.img_w,
            "img/b" => &mut self.img_b,
            "att/w" => &mut self.att_w,
            "att/b" => &mut self.att_b,
            "att/v" => &mut self.att_v,
            _ => panic!("unknown tensor `{name}`"),
        }
    }
}

/// Per-step sampling constraint: n-gram tables or an LM threshold rule.
pub trait StepMask {
    /// Mask for the next token after `history` at step `t`. When
    /// `allow_fallback` is false an empty mask is an error; otherwise the
    /// second value counts fallback activations (0 = primary answer).
    fn step_mask(&self, history: &[u32], t: usize, allow_fallback: bool)
        -> Result<(MaskVector, u32)>;
}

impl StepMask for NGramPrior {
    fn step_mask(
        &self,
        history: &[u32],
        _t: usize,
        allow_fallback: bool,
    ) -> Result<(MaskVector, u32)> {
        if allow_fallback {
            let (mask, depth) = self.mask_with_fallback(history);
            Ok((mask, u32::from(depth > 0)))
        } else {
            let mask = self.top_table().mask_for(history);
            if mask.cardinality() == 0 {
                return Err(Error::MaskEmpty);
            }
            Ok((mask, 0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub mode: Mode,
    pub temperature: f64,
    pub allow_fallback: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_len: 16,
            mode: Mode::Greedy,
            temperature: 1.0,
            allow_fallback: true,
        }
    }
}

/// Mutable decoding state.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub t: usize,
    pub history: Vec<u32>,
    /// Last attention weights over the L locations (attention variant).
    pub attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AttCache {
    /// tanh(W [a_i; h_prev] + b) per location.
    tanh_pre: Vec<Vec<f64>>,
    beta: Vec<f64>,
}

/// What flowed into the LSTM at one step, for routing input gradients.
#[derive(Debug, Clone, Copy)]
enum InputKind {
    Image,
    Token(u32),
}

#[derive(Debug, Clone)]
pub struct StepCache {
    lstm: LstmCache,
    input: InputKind,
    att: Option<AttCache>,
    /// The (masked, renormalized) distribution actually used at this step.
    pub probs: Vec<f64>,
    pub mask: Option<MaskVector>,
    /// Token whose log-probability this step contributes.
    pub token: u32,
}

#[derive(Debug, Clone, Default)]
pub struct SeqCache {
    pub steps: Vec<StepCache>,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Emitted tokens, END-terminated unless max_len was hit.
    pub tokens: Vec<u32>,
    /// Log-probability of each emitted token under the distribution sampled
    /// from (masked and renormalized when a constraint is active).
    pub log_probs: Vec<f64>,
    /// Mask cardinality per step; vocabulary size when unconstrained.
    pub mask_sizes: Vec<usize>,
    pub fallbacks: u32,
    pub cache: SeqCache,
}

impl DecodeResult {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

impl PolicyParams {
    pub fn init_state(&self, features: &FeatureGrid) -> Result<DecoderState> {
        self.check_features(features)?;
        Ok(DecoderState {
            h: vec![0.0; self.hidden_size],
            c: vec![0.0; self.hidden_size],
            t: 0,
            history: Vec::new(),
            attention: None,
        })
    }

    fn check_features(&self, features: &FeatureGrid) -> Result<()> {
        if features.dim != self.feat_dim {
            return Err(Error::DimensionMismatch {
                id: features.item_id.clone(),
                expected: self.feat_dim,
                got: features.dim,
            });
        }
        if self.arch == Arch::Plain && features.locations != 1 {
            return Err(Error::ShapeMismatch(format!(
                "plain decoder expects L=1, item `{}` has L={}",
                features.item_id, features.locations
            )));
        }
        Ok(())
    }

    /// The LSTM input vector for one step, plus attention intermediates.
    fn step_input(
        &self,
        features: &FeatureGrid,
        h_prev: &[f64],
        prev: Option<u32>,
    ) -> (Vec<f64>, InputKind, Option<AttCache>) {
        match self.arch {
            Arch::Plain => match prev {
                None => {
                    let mut x = vec![0.0; self.embed_size];
                    matvec(&self.img_w, features.location(0), &mut x);
                    axpy(&mut x, 1.0, self.img_b.data());
                    (x, InputKind::Image, None)
                }
                Some(w) => (
                    self.embedding.row(w as usize).to_vec(),
                    InputKind::Token(w),
                    None,
                ),
            },
            Arch::Attention => {
                let w = prev.unwrap_or(START);
                let l = features.locations;
                let mut scores = vec![0.0; l];
                let mut tanh_pre = Vec::with_capacity(l);
                for i in 0..l {
                    let mut concat = Vec::with_capacity(self.feat_dim + self.hidden_size);
                    concat.extend_from_slice(features.location(i));
                    concat.extend_from_slice(h_prev);
                    let mut u = vec![0.0; self.att_size];
                    matvec(&self.att_w, &concat, &mut u);
                    axpy(&mut u, 1.0, self.att_b.data());
                    for v in u.iter_mut() {
                        *v = v.tanh();
                    }
                    scores[i] = u
                        .iter()
                        .zip(self.att_v.data())
                        .map(|(a, b)| a * b)
                        .sum();
                    tanh_pre.push(u);
                }
                let beta = softmax(&scores);
                let mut z = vec![0.0; self.feat_dim];
                for i in 0..l {
                    axpy(&mut z, beta[i], features.location(i));
                }
                let mut x = Vec::with_capacity(self.embed_size + self.feat_dim);
                x.extend_from_slice(self.embedding.row(w as usize));
                x.extend_from_slice(&z);
                (x, InputKind::Token(w), Some(AttCache { tanh_pre, beta }))
            }
        }
    }

    /// One decoding step: logits over the vocabulary and the advanced state.
    pub fn step(
        &self,
        state: &DecoderState,
        features: &FeatureGrid,
        prev: Option<u32>,
    ) -> Result<(Vec<f64>, DecoderState)> {
        self.check_features(features)?;
        let (x, _, att) = self.step_input(features, &state.h, prev);
        let (h, c, _) = lstm_step(&self.lstm, &state.h, &state.c, &x)?;
        let mut logits = vec![0.0; self.vocab_size];
        matvec(&self.w_out, &h, &mut logits);
        axpy(&mut logits, 1.0, self.b_out.data());
        let mut next = state.clone();
        next.h = h;
        next.c = c;
        next.t += 1;
        next.attention = att.map(|a| a.beta);
        Ok((logits, next))
    }

    /// Forward with caches, shared by decoding and teacher forcing.
    fn step_cached(
        &self,
        features: &FeatureGrid,
        h: &mut Vec<f64>,
        c: &mut Vec<f64>,
        prev: Option<u32>,
    ) -> Result<(Vec<f64>, InputKind, Option<AttCache>, LstmCache)> {
        let (x, kind, att) = self.step_input(features, h, prev);
        let (h_new, c_new, cache) = lstm_step(&self.lstm, h, c, &x)?;
        let mut logits = vec![0.0; self.vocab_size];
        matvec(&self.w_out, &h_new, &mut logits);
        axpy(&mut logits, 1.0, self.b_out.data());
        *h = h_new;
        *c = c_new;
        Ok((logits, kind, att, cache))
    }

    /// Decode a sequence. Terminates at END or `max_len`; greedy ties break
    /// toward the lowest token id; under a constraint every emitted token is
    /// on-mask.
    pub fn decode(
        &self,
        features: &FeatureGrid,
        config: &DecodeConfig,
        prior: Option<&dyn StepMask>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DecodeResult> {
        self.check_features(features)?;
        let mut h = vec![0.0; self.hidden_size];
        let mut c = vec![0.0; self.hidden_size];
        let mut tokens: Vec<u32> = Vec::new();
        let mut log_probs = Vec::new();
        let mut mask_sizes = Vec::new();
        let mut fallbacks = 0;
        let mut cache = SeqCache::default();
        for t in 0..config.max_len {
            let prev = if t == 0 { None } else { Some(tokens[t - 1]) };
            let (mut logits, kind, att, lstm_cache) =
                self.step_cached(features, &mut h, &mut c, prev)?;
            if config.temperature != 1.0 {
                for l in logits.iter_mut() {
                    *l /= config.temperature;
                }
            }
            let mask = match prior {
                None => None,
                Some(p) => {
                    let (m, fb) = p.step_mask(&tokens, t, config.allow_fallback)?;
                    fallbacks += fb;
                    Some(m)
                }
            };
            let probs = masked_softmax(&logits, mask.as_ref())?;
            let token = match config.mode {
                Mode::Greedy => argmax_lowest(&probs),
                Mode::Sample => gumbel_sample(&probs, mask.as_ref(), rng)?,
            };
            mask_sizes.push(mask.as_ref().map_or(self.vocab_size, |m| m.cardinality()));
            log_probs.push(probs[token as usize].ln());
            cache.steps.push(StepCache {
                lstm: lstm_cache,
                input: kind,
                att,
                probs,
                mask,
                token,
            });
            tokens.push(token);
            if token == crate::corpus::END {
                break;
            }
        }
        Ok(DecodeResult {
            tokens,
            log_probs,
            mask_sizes,
            fallbacks,
            cache,
        })
    }

    /// Teacher-forced forward over a target sequence (END-terminated).
    /// Returns the cache and the total log-probability of the target.
    pub fn run_teacher(&self, features: &FeatureGrid, target: &[u32]) -> Result<(SeqCache, f64)> {
        self.check_features(features)?;
        let mut h = vec![0.0; self.hidden_size];
        let mut c = vec![0.0; self.hidden_size];
        let mut cache = SeqCache::default();
        let mut total = 0.0;
        for (t, &tok) in target.iter().enumerate() {
            let prev = if t == 0 { None } else { Some(target[t - 1]) };
            let (logits, kind, att, lstm_cache) =
                self.step_cached(features, &mut h, &mut c, prev)?;
            let probs = softmax(&logits);
            total += probs[tok as usize].ln();
            cache.steps.push(StepCache {
                lstm: lstm_cache,
                input: kind,
                att,
                probs,
                mask: None,
                token: tok,
            });
        }
        Ok((cache, total))
    }

    /// Backward through a cached forward pass. Computes the gradient of
    /// J = -sum_t coeff[t] * log p_t(token_t) and accumulates it into
    /// `grads` (a zeros_like-shaped container).
    pub fn backward_seq(
        &self,
        features: &FeatureGrid,
        cache: &SeqCache,
        coeffs: &[f64],
        grads: &mut PolicyParams,
    ) -> Result<()> {
        if coeffs.len() != cache.steps.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for {} steps",
                coeffs.len(),
                cache.steps.len()
            )));
        }
        let mut dh_next = vec![0.0; self.hidden_size];
        let mut dc_next = vec![0.0; self.hidden_size];
        for t in (0..cache.steps.len()).rev() {
            let step = &cache.steps[t];
            // d/dlogits of -coeff * log softmax(logits)[token], restricted
            // to the mask support.
            let mut dlogits = vec![0.0; self.vocab_size];
            let coeff = coeffs[t];
            if coeff != 0.0 {
                match &step.mask {
                    None => {
                        for k in 0..self.vocab_size {
                            dlogits[k] = coeff * step.probs[k];
                        }
                    }
                    Some(m) => {
                        for k in m.ones() {
                            dlogits[k] = coeff * step.probs[k];
                        }
                    }
                }
                dlogits[step.token as usize] -= coeff;
            }
            // Through the output projection.
            let mut dh = dh_next.clone();
            outer_acc(&mut grads.w_out, &dlogits, &lstm_h(&step.lstm));
            axpy(grads.b_out.data_mut(), 1.0, &dlogits);
            matvec_t_acc(&self.w_out, &dlogits, &mut dh);
            // Through the LSTM cell.
            let (dx, mut dh_prev, dc_prev) =
                lstm_backward(&self.lstm, &mut grads.lstm, &step.lstm, &dh, &dc_next);
            // Route input gradients.
            match (self.arch, step.input) {
                (Arch::Plain, InputKind::Image) => {
                    outer_acc(&mut grads.img_w, &dx, features.location(0));
                    axpy(grads.img_b.data_mut(), 1.0, &dx);
                }
                (Arch::Plain, InputKind::Token(w)) => {
                    axpy(grads.embedding.row_mut(w as usize), 1.0, &dx);
                }
                (Arch::Attention, InputKind::Token(w)) => {
                    let (d_embed, dz) = dx.split_at(self.embed_size);
                    axpy(grads.embedding.row_mut(w as usize), 1.0, d_embed);
                    let att = step.att.as_ref().expect("attention cache present");
                    self.attention_backward(
                        features,
                        &step.lstm.h_prev,
                        att,
                        dz,
                        grads,
                        &mut dh_prev,
                    );
                }
                (Arch::Attention, InputKind::Image) => unreachable!(),
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        features: &FeatureGrid,
        h_prev: &[f64],
        att: &AttCache,
        dz: &[f64],
        grads: &mut PolicyParams,
        dh_prev: &mut [f64],
    ) {
        let l = features.locations;
        let mut dbeta = vec![0.0; l];
        for i in 0..l {
            dbeta[i] = dz
                .iter()
                .zip(features.location(i))
                .map(|(a, b)| a * b)
                .sum();
        }
        let dot: f64 = dbeta.iter().zip(&att.beta).map(|(d, b)| d * b).sum();
        for i in 0..l {
            let de = att.beta[i] * (dbeta[i] - dot);
            if de == 0.0 {
                continue;
            }
            let t_i = &att.tanh_pre[i];
            // dv += de * t_i; du = de * v * (1 - t_i^2)
            let mut du = vec![0.0; self.att_size];
            for j in 0..self.att_size {
                grads.att_v.data_mut()[j] += de * t_i[j];
                du[j] = de * self.att_v.data()[j] * (1.0 - t_i[j] * t_i[j]);
            }
            let mut concat = Vec::with_capacity(self.feat_dim + self.hidden_size);
            concat.extend_from_slice(features.location(i));
            concat.extend_from_slice(h_prev);
            outer_acc(&mut grads.att_w, &du, &concat);
            axpy(grads.att_b.data_mut(), 1.0, &du);
            // dh_prev += W[:, D:]^T du
            let cols = self.feat_dim + self.hidden_size;
            for j in 0..self.att_size {
                let row = &self.att_w.data()[j * cols..(j + 1) * cols];
                for k in 0..self.hidden_size {
                    dh_prev[k] += row[self.feat_dim + k] * du[j];
                }
            }
        }
    }
}

fn lstm_h(cache: &LstmCache) -> Vec<f64> {
    cache
        .gate_o
        .iter()
        .zip(&cache.tanh_c)
        .map(|(o, tc)| o * tc)
        .collect()
}

pub fn argmax_lowest(values: &[f64]) -> u32 {
    let mut best = 0usize;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best as u32
}
