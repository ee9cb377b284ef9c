//! Memory-augmented quatrain generation: corpus handling, an attention
//! encoder-decoder trained with AdaDelta, an external memory of decoder states
//! fused into the output distribution, tonal constraints, and evaluation.

pub mod constraints;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generate;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod toy;

pub use constraints::{ComplianceReport, Policy, Tone, ToneLexicon, TonePattern};
pub use corpus::{Genre, Poem, Token, Vocabulary};
pub use error::{Error, Result};
pub use generate::{
    ConstraintMode, Decode, Generation, GenerationConfig, GenerationTrace, Generator,
};
pub use memory::{MemoryBank, MemoryElement};
pub use model::{Checkpoint, Dims, ModelParams, TrainConfig};
pub use numerics::{Matrix, ParamStore};
