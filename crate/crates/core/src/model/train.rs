use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_poem, encode_topic, Poem, Token, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::AdaDelta;

use super::{ModelParams, Net};

/// One-pass (`C1`) or train-to-memorization (`CInfinity`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    C1,
    CInfinity,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c1" | "C1" => Ok(Regime::C1),
            "c-infinity" | "cinf" | "Cinf" | "c-inf" => Ok(Regime::CInfinity),
            other => Err(Error::config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Upper bound on epochs for `CInfinity`; ignored by `C1`.
    pub max_epochs: usize,
    /// `CInfinity` stops once the end-of-epoch training loss falls below this.
    pub stop_loss: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdaDelta,
}

impl TrainConfig {
    pub fn c1(seed: u64) -> Self {
        TrainConfig {
            regime: Regime::C1,
            max_epochs: 1,
            stop_loss: 0.0,
            batch_size: 1,
            seed,
            optimizer: AdaDelta::default(),
        }
    }

    pub fn c_infinity(seed: u64, max_epochs: usize, stop_loss: f64) -> Self {
        TrainConfig {
            regime: Regime::CInfinity,
            max_epochs,
            stop_loss,
            ..Self::c1(seed)
        }
    }

    fn epochs(&self) -> usize {
        match self.regime {
            Regime::C1 => 1,
            Regime::CInfinity => self.max_epochs,
        }
    }
}

/// A training pair: encoded topic and the full encoded poem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub topic: Vec<Token>,
    pub tokens: Vec<Token>,
    pub poem_index: usize,
}

/// Encodes poems with their topics. Without a sidecar, a poem's topic is its first line.
pub fn prepare_examples(
    poems: &[Poem],
    topics: Option<&[Vec<char>]>,
    vocab: &Vocabulary,
) -> Result<Vec<Example>> {
    if let Some(t) = topics {
        if t.len() != poems.len() {
            return Err(Error::config(format!(
                "{} topics for {} poems",
                t.len(),
                poems.len()
            )));
        }
    }
    poems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let topic = match topics {
                Some(t) if !t[i].is_empty() => encode_topic(&t[i], vocab),
                Some(_) => return Err(Error::data(format!("empty topic for poem {i}"))),
                None => encode_topic(p.line(0), vocab),
            };
            Ok(Example {
                topic,
                tokens: encode_poem(p, vocab).tokens,
                poem_index: i,
            })
        })
        .collect()
}

/// Summed teacher-forced NLL and predicted-token count over a set of examples.
pub fn sequence_nll(params: &ModelParams, examples: &[Example]) -> Result<(f64, usize)> {
    let net = params.net();
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let (nll, n) = net.sequence_nll(&ex.topic, &ex.tokens, None)?;
        total += nll;
        count += n;
    }
    Ok((total, count))
}

fn mean_ce(params: &ModelParams, examples: &[Example]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let (nll, n) = sequence_nll(params, examples)?;
    Ok(Some(nll / n as f64))
}

/// `exp` of the mean per-token cross-entropy.
pub fn perplexity(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    match mean_ce(params, examples)? {
        Some(ce) => Ok(ce.exp()),
        None => Err(Error::usage("perplexity of an empty set")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_ce: f64,
    pub valid_ce: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("log holds the initial record")
    }

    pub fn epoch(&self, n: usize) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == n)
    }

    /// `epoch,train_ce,valid_ce`; `valid_ce` is empty without a validation set.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_ce,valid_ce\n");
        for r in &self.records {
            let valid = r.valid_ce.map(|v| format!("{v:.9}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.9},{}", r.epoch, r.train_ce, valid);
        }
        out
    }
}

/// Teacher-forced training with shuffled mini-batches and AdaDelta updates.
pub fn train(
    mut params: ModelParams,
    train_set: &[Example],
    valid_set: &[Example],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    if train_set.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let dims = params.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let evaluate = |params: &ModelParams, epoch: usize| -> Result<EpochRecord> {
        let train_ce = mean_ce(params, train_set)?.expect("non-empty");
        if !train_ce.is_finite() {
            return Err(Error::Diverged(format!(
                "training loss {train_ce} after epoch {epoch}"
            )));
        }
        Ok(EpochRecord {
            epoch,
            train_ce,
            valid_ce: mean_ce(params, valid_set)?,
        })
    };
    log.records.push(evaluate(&params, 0)?);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs() {
        order.shuffle(&mut rng);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let store = params.store_mut();
            store.zero_grads();
            let mut loss = 0.0;
            {
                let (values, grads) = store.split_mut();
                let net = Net::new(dims, values);
                for &i in chunk {
                    let ex = &train_set[i];
                    loss += net.loss_and_grad(&ex.topic, &ex.tokens, None, grads)?;
                }
            }
            if !loss.is_finite() {
                let poems: Vec<usize> = chunk.iter().map(|&i| train_set[i].poem_index).collect();
                return Err(Error::Diverged(format!(
                    "non-finite loss in epoch {epoch}, batch {batch} (poems {poems:?})"
                )));
            }
            if chunk.len() > 1 {
                store.scale_grads(1.0 / chunk.len() as f64);
            }
            config.optimizer.step(store);
        }
        let record = evaluate(&params, epoch)?;
        log.records.push(record);
        if config.regime == Regime::CInfinity && record.train_ce < config.stop_loss {
            break;
        }
    }
    Ok((params, log))
}
