//! Shared fixtures for the benchmarks.

use mempoet::corpus::build_vocab;
use mempoet::memory::{build_memory, MemoryBank};
use mempoet::model::{prepare_examples, Example};
use mempoet::{toy, Dims, ModelParams, Vocabulary};

pub struct Fixture {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
    pub bank: MemoryBank,
}

/// Desk-sized model over the toy corpus with a 20-poem bank (K = 500).
pub fn fixture() -> Fixture {
    let poems = toy::train_corpus();
    let vocab = build_vocab(&poems, 1).expect("toy corpus is non-empty");
    let params = ModelParams::init(Dims::desk(vocab.len()), 1).expect("desk dims are valid");
    let examples = prepare_examples(&poems, None, &vocab).expect("toy corpus encodes");
    let bank = build_memory(&params, &poems, &vocab).expect("bank builds");
    Fixture {
        params,
        vocab,
        examples,
        bank,
    }
}
