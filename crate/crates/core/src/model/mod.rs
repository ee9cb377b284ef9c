//! Attention encoder-decoder: a bidirectional GRU over topic characters, a GRU
//! decoder with additive attention, and a linear projection onto the vocabulary.

mod checkpoint;
mod net;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Token, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub(crate) use checkpoint::{read_tensors, split_container};
pub use net::{AttentionOutput, EncoderOutput, Net, SequenceObjective};
pub use train::{
    perplexity, prepare_examples, sequence_nll, train, EpochRecord, Example, Regime, TrainConfig,
    TrainLog,
};

/// Uniform init range for weights; biases start at zero.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Vocabulary size V, specials included.
    pub vocab: usize,
    /// Character embedding width d_e.
    pub embed: usize,
    /// Per-direction encoder state width d_h.
    pub enc_hidden: usize,
    /// Decoder state width d_s.
    pub dec_hidden: usize,
    /// Hidden width of the additive attention scorer.
    pub attn: usize,
    /// Longest accepted topic.
    pub max_topic: usize,
}

impl Dims {
    /// Desk-scale defaults: d_e = 16, d_h = d_s = 32.
    pub fn desk(vocab: usize) -> Self {
        Dims {
            vocab,
            embed: 16,
            enc_hidden: 32,
            dec_hidden: 32,
            attn: 32,
            max_topic: 16,
        }
    }

    /// Width of an encoder annotation, d_c = 2·d_h.
    pub fn context(&self) -> usize {
        2 * self.enc_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let Dims {
            vocab,
            embed,
            enc_hidden,
            dec_hidden,
            attn,
            max_topic,
        } = *self;
        if vocab <= crate::corpus::NUM_SPECIALS
            || [embed, enc_hidden, dec_hidden, attn, max_topic].contains(&0)
        {
            return Err(Error::config(format!("invalid model dimensions {self:?}")));
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, usize, usize)> {
        let (v, e, h, s, a, c) = (
            self.vocab,
            self.embed,
            self.enc_hidden,
            self.dec_hidden,
            self.attn,
            self.context(),
        );
        vec![
            ("embed", v, e),
            ("enc_fwd.w", 3 * h, e),
            ("enc_fwd.u", 3 * h, h),
            ("enc_fwd.b", 3 * h, 1),
            ("enc_bwd.w", 3 * h, e),
            ("enc_bwd.u", 3 * h, h),
            ("enc_bwd.b", 3 * h, 1),
            ("bridge.w", s, c),
            ("bridge.b", s, 1),
            ("attn.a", a, s),
            ("attn.b", a, c),
            ("attn.u", a, 1),
            ("dec.w", 3 * s, e + c),
            ("dec.u", 3 * s, s),
            ("dec.b", 3 * s, 1),
            ("proj.w", s, v),
        ]
    }
}

/// Storage indices matching [`Dims::layout`].
pub(crate) mod slot {
    pub const EMBED: usize = 0;
    pub const ENC_FWD: usize = 1;
    pub const ENC_BWD: usize = 4;
    pub const BRIDGE_W: usize = 7;
    pub const BRIDGE_B: usize = 8;
    pub const ATTN_A: usize = 9;
    pub const ATTN_B: usize = 10;
    pub const ATTN_U: usize = 11;
    pub const DEC: usize = 12;
    pub const PROJ: usize = 15;
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b") && name != "attn.b"
}

/// All trainable tensors of the encoder-decoder.
#[derive(Clone, Debug)]
pub struct ModelParams {
    dims: Dims,
    store: ParamStore,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::from_fn(dims, |_, _, _| 0.0)
    }

    /// Weights uniform in (−[`INIT_RANGE`], [`INIT_RANGE`]) from a seeded ChaCha stream, biases zero.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(dims, |name, _, _| {
            if is_bias(name) {
                0.0
            } else {
                rng.gen_range(-INIT_RANGE..INIT_RANGE)
            }
        })
    }

    fn from_fn(dims: Dims, mut f: impl FnMut(&str, usize, usize) -> f64) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        for (name, rows, cols) in dims.layout() {
            let m = Matrix::from_fn(rows, cols, |r, c| f(name, r, c));
            store.insert(name, m)?;
        }
        Ok(ModelParams { dims, store })
    }

    /// Assembles parameters from tensors in layout order, checking every shape.
    pub fn from_tensors(dims: Dims, tensors: Vec<Matrix>) -> Result<Self> {
        dims.validate()?;
        let layout = dims.layout();
        if tensors.len() != layout.len() {
            return Err(Error::data(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut store = ParamStore::new();
        for ((name, rows, cols), m) in layout.into_iter().zip(tensors) {
            if m.shape() != (rows, cols) {
                return Err(Error::data(format!(
                    "tensor {name} has shape {:?}, expected ({rows}, {cols})",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::data(format!("tensor {name} has non-finite values")));
            }
            store.insert(name, m)?;
        }
        Ok(ModelParams { dims, store })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.store.get(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        let i = self.store.index_of(name)?;
        Some(&mut self.store.values_mut()[i])
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.store.values()[slot::EMBED]
    }

    pub fn embedding(&self, id: Token) -> &[f64] {
        self.embeddings().row(id)
    }

    pub fn net(&self) -> Net<'_> {
        Net::new(self.dims, self.store.values())
    }

    /// SHA-256 over tensor names, shapes and little-endian values, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.store.names().iter().zip(self.store.values()) {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// True when every tensor is bit-identical.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.dims == other.dims
            && self
                .store
                .values()
                .iter()
                .zip(other.store.values())
                .all(|(a, b)| {
                    a.shape() == b.shape()
                        && a.as_slice()
                            .iter()
                            .zip(b.as_slice())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Convenience bundle for checking a vocabulary against a model.
pub fn check_vocab(params: &ModelParams, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() != params.dims().vocab {
        return Err(Error::config(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            params.dims().vocab
        )));
    }
    Ok(())
}
