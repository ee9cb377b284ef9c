//! Decoding: greedy, beam and temperature sampling over the (optionally
//! memory-fused) next-token distribution, with structure always enforced and
//! tonal masks or reranking on request.

use std::cmp::Ordering;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::constraints::{
    allowed_chars, compliance_score_with, structure_mask, Policy, ToneLexicon, TonePattern,
};
use crate::corpus::{decode_tokens, Genre, Poem, Token, Vocabulary, BOS};
use crate::error::{Error, Result};
use crate::memory::{fuse_logits, memory_read, query_decoder_step, MemoryBank};
use crate::model::{check_vocab, EncoderOutput, ModelParams, Net};
use crate::numerics::{norm, softmax};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Decode {
    Greedy,
    Beam { width: usize },
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    /// Structure only.
    #[default]
    Off,
    /// Tone and rhyme masks at every character slot.
    Mask,
    /// Structure-only decoding; final beams reordered by compliance.
    Rerank,
}

impl std::str::FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ConstraintMode::Off),
            "mask" => Ok(ConstraintMode::Mask),
            "rerank" => Ok(ConstraintMode::Rerank),
            other => Err(Error::config(format!("unknown constraint mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub genre: Genre,
    pub decode: Decode,
    /// Memory fusion weight; ignored without a bank.
    pub beta: f64,
    pub constraints: ConstraintMode,
    pub pattern: Option<TonePattern>,
    pub policy: Policy,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            genre: Genre::FiveChar,
            decode: Decode::Beam { width: 4 },
            beta: 0.0,
            constraints: ConstraintMode::Off,
            pattern: None,
            policy: Policy::Lenient,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!(
                "β must be finite and non-negative, got {}",
                self.beta
            )));
        }
        match self.decode {
            Decode::Beam { width: 0 } => {
                return Err(Error::config("beam width must be at least 1"))
            }
            Decode::Sample { temperature, .. }
                if !(temperature > 0.0) || !temperature.is_finite() =>
            {
                return Err(Error::config(format!(
                    "temperature must be positive, got {temperature}"
                )))
            }
            _ => {}
        }
        if let Some(p) = &self.pattern {
            if p.genre != self.genre {
                return Err(Error::config(format!(
                    "{} pattern for a {} poem",
                    p.genre, self.genre
                )));
            }
        }
        if self.constraints != ConstraintMode::Off && self.pattern.is_none() {
            return Err(Error::config("constraints need a tone pattern"));
        }
        Ok(())
    }
}

/// Norm and short hash of a state vector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateDigest {
    pub norm: f64,
    pub sha256: String,
}

impl StateDigest {
    fn of(v: &[f64]) -> Self {
        let mut h = Sha256::new();
        v.iter().for_each(|x| h.update(x.to_le_bytes()));
        StateDigest {
            norm: norm(v),
            sha256: h.finalize()[..8]
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: StateDigest,
    pub query: Option<StateDigest>,
    /// Five most probable tokens under the fused distribution, before masking.
    pub top5: Vec<(String, f64)>,
    pub token: Token,
    pub char: String,
    /// `β·|v|`, zero without memory.
    pub memory_norm: f64,
    /// The constraint mask admitted nothing; structure-only mask used instead.
    pub fallback: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GenerationTrace {
    pub steps: Vec<StepRecord>,
}

impl GenerationTrace {
    pub fn fallbacks(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub poem: Poem,
    /// Full sequence, BOS through EOS.
    pub tokens: Vec<Token>,
    /// Sum of log-probabilities of the emitted tokens under the fused distribution.
    pub log_prob: f64,
    pub trace: GenerationTrace,
}

/// Extensions kept by one beam step: `(parent, token, cumulative score)`.
///
/// Candidates are every admitted token of every beam; the best `width` by
/// score survive, ties going to the lower token id and then the lower parent.
pub fn beam_step(
    scores: &[f64],
    log_probs: &[Vec<f64>],
    masks: &[Vec<bool>],
    width: usize,
) -> Vec<(usize, Token, f64)> {
    let mut cand: Vec<(usize, Token, f64)> = Vec::new();
    for (b, (lp, mask)) in log_probs.iter().zip(masks).enumerate() {
        for (tok, (&l, &ok)) in lp.iter().zip(mask).enumerate() {
            if ok {
                cand.push((b, tok, scores[b] + l));
            }
        }
    }
    cand.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.1.cmp(&y.1)).then(x.0.cmp(&y.0)));
    cand.truncate(width);
    cand
}

/// Generation against one checkpoint, with optional memory and tone lexicon.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    params: &'a ModelParams,
    vocab: &'a Vocabulary,
    memory: Option<&'a MemoryBank>,
    lexicon: Option<&'a ToneLexicon>,
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<Token>,
    s: Vec<f64>,
    q: Option<Vec<f64>>,
    score: f64,
    trace: Vec<StepRecord>,
}

struct Expansion {
    s: Vec<f64>,
    q: Option<Vec<f64>>,
    log_probs: Vec<f64>,
    probs: Vec<f64>,
    mask: Vec<bool>,
    fallback: bool,
    memory_norm: f64,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl<'a> Generator<'a> {
    pub fn new(params: &'a ModelParams, vocab: &'a Vocabulary) -> Result<Self> {
        check_vocab(params, vocab)?;
        Ok(Generator {
            params,
            vocab,
            memory: None,
            lexicon: None,
        })
    }

    /// Attaches a bank; config error unless it was built from `params`.
    pub fn with_memory(mut self, bank: &'a MemoryBank) -> Result<Self> {
        bank.check_fingerprint(self.params)?;
        if bank.is_empty() {
            return Err(Error::config("memory bank is empty"));
        }
        self.memory = Some(bank);
        Ok(self)
    }

    pub fn with_lexicon(mut self, lexicon: &'a ToneLexicon) -> Self {
        self.lexicon = Some(lexicon);
        self
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    pub fn generate(&self, topic: &[char], config: &GenerationConfig) -> Result<Generation> {
        config.validate()?;
        if config.constraints != ConstraintMode::Off && self.lexicon.is_none() {
            return Err(Error::config("constraints need a tone lexicon"));
        }
        let net = self.params.net();
        let topic: Vec<Token> = topic.iter().map(|&c| self.vocab.id(c)).collect();
        let enc = net.encode(&topic)?;
        match config.decode {
            Decode::Greedy => self.run_single(&net, &enc, config, None),
            Decode::Sample { temperature, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.run_single(&net, &enc, config, Some((temperature, &mut rng)))
            }
            Decode::Beam { width } => {
                let beams = self.run_beam(&net, &enc, config, width)?;
                let greedy = self.run_single(&net, &enc, config, None)?;
                // Greedy is a width-1 search; never return anything worse.
                let best = beams
                    .into_iter()
                    .chain(std::iter::once(greedy))
                    .map(|g| (self.rank_key(&g, config), g))
                    .reduce(|a, b| if b.0 > a.0 { b } else { a })
                    .expect("at least the greedy result");
                Ok(best.1)
            }
        }
    }

    /// `(compliance, log_prob)` under rerank, plain `log_prob` otherwise.
    fn rank_key(&self, g: &Generation, config: &GenerationConfig) -> (f64, f64) {
        let compliance = match (config.constraints, &config.pattern, self.lexicon) {
            (ConstraintMode::Rerank, Some(p), Some(lex)) => {
                compliance_score_with(&g.poem, p, lex, config.policy).score
            }
            _ => 0.0,
        };
        (compliance, g.log_prob)
    }

    fn start(&self, net: &Net<'_>, enc: &EncoderOutput) -> Hyp {
        Hyp {
            tokens: vec![BOS],
            s: net.initial_state(enc),
            q: self
                .memory
                .map(|_| vec![0.0; self.params.dims().dec_hidden]),
            score: 0.0,
            trace: Vec::new(),
        }
    }

    fn expand(
        &self,
        net: &Net<'_>,
        enc: &EncoderOutput,
        h: &Hyp,
        config: &GenerationConfig,
    ) -> Result<Expansion> {
        let y = *h.tokens.last().expect("starts with BOS");
        let ctx = net.attend(&h.s, enc).context;
        let s = net.decoder_step(y, &h.s, &ctx)?;
        let (q, v) = match (self.memory, &h.q) {
            (Some(bank), Some(q_prev)) => {
                let q = query_decoder_step(net, y, q_prev)?;
                let v = memory_read(&q, bank)?;
                (Some(q), Some(v))
            }
            _ => (None, None),
        };
        let logits = match &v {
            Some(v) => fuse_logits(net, self.params, &s, v, config.beta),
            None => net.project(&s),
        };
        let memory_norm = v.as_ref().map_or(0.0, |v| config.beta * norm(v));
        let step = h.tokens.len();
        let structure = structure_mask(config.genre, step, self.vocab);
        let (mask, fallback) = match (config.constraints, &config.pattern, self.lexicon) {
            (ConstraintMode::Mask, Some(pattern), Some(lex)) => {
                let m = allowed_chars(
                    step,
                    &h.tokens[1..],
                    pattern,
                    lex,
                    self.vocab,
                    config.policy,
                );
                if m.iter().any(|&b| b) {
                    (m, false)
                } else {
                    (structure, true)
                }
            }
            _ => (structure, false),
        };
        Ok(Expansion {
            s,
            q,
            log_probs: log_softmax(&logits),
            probs: softmax(&logits)?,
            mask,
            fallback,
            memory_norm,
        })
    }

    fn record(&self, h: &Hyp, e: &Expansion, token: Token) -> StepRecord {
        let mut order: Vec<usize> = (0..e.probs.len()).collect();
        order.sort_by(|&a, &b| e.probs[b].total_cmp(&e.probs[a]).then(a.cmp(&b)));
        StepRecord {
            step: h.tokens.len(),
            state: StateDigest::of(&e.s),
            query: e.q.as_deref().map(StateDigest::of),
            top5: order
                .into_iter()
                .take(5)
                .map(|t| (self.vocab.token_name(t), e.probs[t]))
                .collect(),
            token,
            char: self.vocab.token_name(token),
            memory_norm: e.memory_norm,
            fallback: e.fallback,
        }
    }

    fn advance(&self, h: &Hyp, e: &Expansion, token: Token, trace: bool) -> Hyp {
        let mut next = Hyp {
            tokens: h.tokens.clone(),
            s: e.s.clone(),
            q: e.q.clone(),
            score: h.score + e.log_probs[token],
            trace: if trace { h.trace.clone() } else { Vec::new() },
        };
        next.trace.push(self.record(h, e, token));
        next.tokens.push(token);
        next
    }

    fn finish(&self, h: Hyp) -> Result<Generation> {
        let poem = decode_tokens(&h.tokens, self.vocab)?;
        Ok(Generation {
            poem,
            tokens: h.tokens,
            log_prob: h.score,
            trace: GenerationTrace { steps: h.trace },
        })
    }

    fn run_single(
        &self,
        net: &Net<'_>,
        enc: &EncoderOutput,
        config: &GenerationConfig,
        mut sampler: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Generation> {
        let mut h = self.start(net, enc);
        for _ in 1..config.genre.encoded_len() {
            let e = self.expand(net, enc, &h, config)?;
            let token = match sampler.as_mut() {
                None => argmax_masked(&e.log_probs, &e.mask),
                Some((temperature, rng)) => {
                    let weights: Vec<f64> = e
                        .log_probs
                        .iter()
                        .zip(&e.mask)
                        .map(|(&l, &ok)| if ok { (l / *temperature).exp() } else { 0.0 })
                        .collect();
                    match WeightedIndex::new(&weights) {
                        Ok(dist) => dist.sample(*rng),
                        // Every admitted weight underflowed.
                        Err(_) => argmax_masked(&e.log_probs, &e.mask),
                    }
                }
            };
            h = self.advance(&h, &e, token, true);
        }
        self.finish(h)
    }

    fn run_beam(
        &self,
        net: &Net<'_>,
        enc: &EncoderOutput,
        config: &GenerationConfig,
        width: usize,
    ) -> Result<Vec<Generation>> {
        let mut beams = vec![self.start(net, enc)];
        for _ in 1..config.genre.encoded_len() {
            let exps = beams
                .iter()
                .map(|h| self.expand(net, enc, h, config))
                .collect::<Result<Vec<_>>>()?;
            let scores: Vec<f64> = beams.iter().map(|h| h.score).collect();
            let lps: Vec<Vec<f64>> = exps.iter().map(|e| e.log_probs.clone()).collect();
            let masks: Vec<Vec<bool>> = exps.iter().map(|e| e.mask.clone()).collect();
            beams = beam_step(&scores, &lps, &masks, width)
                .into_iter()
                .map(|(b, tok, _)| self.advance(&beams[b], &exps[b], tok, true))
                .collect();
        }
        beams.into_iter().map(|h| self.finish(h)).collect()
    }
}

/// Highest admitted log-probability, lowest token id on ties.
fn argmax_masked(log_probs: &[f64], mask: &[bool]) -> Token {
    let mut best: Option<Token> = None;
    for (t, &ok) in mask.iter().enumerate() {
        if ok && best.is_none_or(|b| log_probs[t].total_cmp(&log_probs[b]) == Ordering::Greater) {
            best = Some(t);
        }
    }
    best.expect("masks always admit a token")
}
