//! External memory of (decoder state, character embedding) pairs, harvested by
//! replaying poems through the decoder with the encoder contribution zeroed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_poem, Poem, Token, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Net};
use crate::numerics::{cosine, softmax};

pub const BANK_MAGIC: &[u8; 8] = b"MEMBANK1";

/// Default fusion weights for the one-pass and overfitted regimes.
pub const BETA_C1: f64 = 16.0;
pub const BETA_CINF: f64 = 49.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryElement {
    /// Zero-context decoder state after consuming the previous token.
    pub source: Vec<f64>,
    /// Embedding of the token that followed.
    pub target: Vec<f64>,
    pub token: Token,
    /// Index of the poem in the list the bank was built from.
    pub poem: usize,
    /// 1-based position of `token` in the encoded poem.
    pub step: usize,
}

/// One poem's contiguous run of elements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoemRun {
    pub poem: usize,
    pub start: usize,
    pub len: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    elements: Vec<MemoryElement>,
    source_dim: usize,
    target_dim: usize,
    fingerprint: String,
    runs: Vec<PoemRun>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[MemoryElement] {
        &self.elements
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    /// Fingerprint of the parameters the bank was built with.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn runs(&self) -> &[PoemRun] {
        &self.runs
    }

    /// Config error unless the bank was built from exactly these parameters.
    pub fn check_fingerprint(&self, params: &ModelParams) -> Result<()> {
        let fp = params.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::config(format!(
                "memory bank was built from checkpoint {}, not {}",
                &self.fingerprint[..self.fingerprint.len().min(12)],
                &fp[..12]
            )));
        }
        Ok(())
    }

    /// Builds a bank from raw parts; used by tests and by the file reader.
    pub fn from_elements(
        elements: Vec<MemoryElement>,
        source_dim: usize,
        target_dim: usize,
        fingerprint: String,
        runs: Vec<PoemRun>,
    ) -> Result<Self> {
        for (i, e) in elements.iter().enumerate() {
            if e.source.len() != source_dim || e.target.len() != target_dim {
                return Err(Error::data(format!(
                    "memory element {i} has the wrong width"
                )));
            }
            if !e.source.iter().chain(&e.target).all(|v| v.is_finite()) {
                return Err(Error::data(format!("memory element {i} is not finite")));
            }
        }
        let mut next = 0;
        for r in &runs {
            if r.start != next || r.start + r.len > elements.len() {
                return Err(Error::data("poem runs are not contiguous"));
            }
            if elements[r.start..r.start + r.len]
                .iter()
                .any(|e| e.poem != r.poem)
            {
                return Err(Error::data(format!(
                    "run for poem {} mixes provenance",
                    r.poem
                )));
            }
            next += r.len;
        }
        if next != elements.len() {
            return Err(Error::data("poem runs do not cover the bank"));
        }
        Ok(MemoryBank {
            elements,
            source_dim,
            target_dim,
            fingerprint,
            runs,
        })
    }
}

/// Zero-context decoder step; shares every parameter with the main decoder.
pub fn query_decoder_step(net: &Net<'_>, y_prev: Token, q_prev: &[f64]) -> Result<Vec<f64>> {
    net.zero_context_step(y_prev, q_prev)
}

/// Replays each poem from a zero state; step `j` contributes the state after
/// token `j−1` and the embedding of token `j`. SEP and EOS are stored too.
pub fn build_memory(
    params: &ModelParams,
    poems: &[Poem],
    vocab: &Vocabulary,
) -> Result<MemoryBank> {
    crate::model::check_vocab(params, vocab)?;
    let dims = params.dims();
    let net = params.net();
    let mut elements = Vec::new();
    let mut runs = Vec::with_capacity(poems.len());
    for (k, poem) in poems.iter().enumerate() {
        let tokens = encode_poem(poem, vocab).tokens;
        let start = elements.len();
        let mut q = vec![0.0; dims.dec_hidden];
        for j in 1..tokens.len() {
            q = query_decoder_step(&net, tokens[j - 1], &q)?;
            elements.push(MemoryElement {
                source: q.clone(),
                target: params.embedding(tokens[j]).to_vec(),
                token: tokens[j],
                poem: k,
                step: j,
            });
        }
        runs.push(PoemRun {
            poem: k,
            start,
            len: elements.len() - start,
            text: poem.text("/"),
        });
    }
    MemoryBank::from_elements(
        elements,
        dims.dec_hidden,
        dims.embed,
        params.fingerprint(),
        runs,
    )
}

/// `v = Σ_i cos(q, source_i) · target_i` over the whole bank, unnormalized.
pub fn memory_read(q: &[f64], bank: &MemoryBank) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::usage("read from an empty memory bank"));
    }
    if q.len() != bank.source_dim {
        return Err(Error::usage(format!(
            "query has width {}, bank sources have {}",
            q.len(),
            bank.source_dim
        )));
    }
    let mut v = vec![0.0; bank.target_dim];
    for e in &bank.elements {
        let w = cosine(q, &e.source)?;
        for (acc, t) in v.iter_mut().zip(&e.target) {
            *acc += w * t;
        }
    }
    Ok(v)
}

/// Fused logits `s·W + β·(E·v)`. With β = 0 the model logits are returned untouched.
pub fn fuse_logits(
    net: &Net<'_>,
    params: &ModelParams,
    s: &[f64],
    v: &[f64],
    beta: f64,
) -> Vec<f64> {
    let mut logits = net.project(s);
    if beta != 0.0 {
        let e = params.embeddings();
        for (c, l) in logits.iter_mut().enumerate() {
            *l += beta * e.row(c).iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    logits
}

pub fn fuse_distribution(
    params: &ModelParams,
    s: &[f64],
    v: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    if !(beta >= 0.0) {
        return Err(Error::usage(format!("β must be non-negative, got {beta}")));
    }
    softmax(&fuse_logits(&params.net(), params, s, v, beta))
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    k: usize,
    source_dim: usize,
    target_dim: usize,
    fingerprint: String,
    poems: Vec<PoemRun>,
    /// `(token, poem, step)` per element.
    elements: Vec<(Token, usize, usize)>,
}

/// `MEMBANK1`, u64 manifest length, JSON manifest, then all sources and then
/// all targets as little-endian f64.
pub fn write_bank(bank: &MemoryBank) -> Vec<u8> {
    let manifest = BankManifest {
        k: bank.len(),
        source_dim: bank.source_dim,
        target_dim: bank.target_dim,
        fingerprint: bank.fingerprint.clone(),
        poems: bank.runs.clone(),
        elements: bank
            .elements
            .iter()
            .map(|e| (e.token, e.poem, e.step))
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in &bank.elements {
        e.source
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    for e in &bank.elements {
        e.target
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

pub fn read_bank(bytes: &[u8]) -> Result<MemoryBank> {
    let (json, payload) = crate::model::split_container(bytes, BANK_MAGIC)?;
    let m: BankManifest =
        serde_json::from_slice(json).map_err(|e| Error::data(format!("bank manifest: {e}")))?;
    if m.elements.len() != m.k {
        return Err(Error::data(format!(
            "bank declares K={} but lists {}",
            m.k,
            m.elements.len()
        )));
    }
    let t = crate::model::read_tensors(payload, &[(m.k, m.source_dim), (m.k, m.target_dim)])?;
    let elements = m
        .elements
        .iter()
        .enumerate()
        .map(|(i, &(token, poem, step))| MemoryElement {
            source: t[0].row(i).to_vec(),
            target: t[1].row(i).to_vec(),
            token,
            poem,
            step,
        })
        .collect();
    MemoryBank::from_elements(elements, m.source_dim, m.target_dim, m.fingerprint, m.poems)
}

pub fn save_bank(path: impl AsRef<Path>, bank: &MemoryBank) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_bank(bank)).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    let path = path.as_ref();
    read_bank(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, BOS};
    use crate::model::Dims;
    use crate::numerics::norm;
    use crate::toy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams, Vocabulary, Vec<Poem>) {
        let poems = toy::train_corpus();
        let vocab = build_vocab(&poems, 1).unwrap();
        (
            ModelParams::init(Dims::desk(vocab.len()), 3).unwrap(),
            vocab,
            poems,
        )
    }

    fn one_element_bank(source: Vec<f64>, target: Vec<f64>) -> MemoryBank {
        let (sd, td) = (source.len(), target.len());
        let e = MemoryElement {
            source,
            target,
            token: 5,
            poem: 0,
            step: 1,
        };
        let run = PoemRun {
            poem: 0,
            start: 0,
            len: 1,
            text: String::new(),
        };
        MemoryBank::from_elements(vec![e], sd, td, "x".into(), vec![run]).unwrap()
    }

    fn random_bank(rng: &mut ChaCha8Rng, k: usize, sd: usize, td: usize) -> MemoryBank {
        let elements = (0..k)
            .map(|i| MemoryElement {
                source: (0..sd).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: (0..td).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                token: 4 + i % 7,
                poem: 0,
                step: i + 1,
            })
            .collect();
        let run = PoemRun {
            poem: 0,
            start: 0,
            len: k,
            text: String::new(),
        };
        MemoryBank::from_elements(elements, sd, td, "r".into(), vec![run]).unwrap()
    }

    #[test]
    fn one_poem_gives_l_minus_one_elements() {
        let (p, vocab, poems) = setup();
        let bank = build_memory(&p, &poems[..1], &vocab).unwrap();
        assert_eq!(bank.len(), 25);
        assert!(bank.elements().iter().all(|e| e.token != BOS));
        assert_eq!(bank.elements()[24].token, crate::corpus::EOS);
    }

    #[test]
    fn provenance_runs_are_contiguous() {
        let (p, vocab, poems) = setup();
        let bank = build_memory(&p, &poems[..2], &vocab).unwrap();
        let runs = bank.runs();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[1].start, 25);
        for (i, e) in bank.elements().iter().enumerate() {
            let k = e.poem;
            assert_eq!(i, runs[k].start + e.step - 1);
        }
        let empty = build_memory(&p, &[], &vocab).unwrap();
        assert!(empty.is_empty());
        assert!(matches!(
            memory_read(&[0.0; 32], &empty),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn first_query_state_matches_first_element() {
        let (p, vocab, poems) = setup();
        let bank = build_memory(&p, &poems[3..5], &vocab).unwrap();
        let q1 = query_decoder_step(&p.net(), BOS, &vec![0.0; 32]).unwrap();
        assert_eq!(bank.elements()[0].source, q1);
        assert_eq!(bank.elements()[25].source, q1);
    }

    #[test]
    fn query_rollout_matches_manual_recursion() {
        let (p, vocab, poems) = setup();
        let tokens = encode_poem(&poems[0], &vocab).tokens;
        let net = p.net();
        let mut q = vec![0.0; 32];
        for &y in &tokens[..10] {
            let zero = vec![0.0; p.dims().context()];
            let manual = net.decoder_step(y, &q, &zero).unwrap();
            q = query_decoder_step(&net, y, &q).unwrap();
            assert_eq!(q, manual);
        }
    }

    #[test]
    fn read_single_element_cases() {
        let bank = one_element_bank(vec![2.0, 4.0, 0.0], vec![0.5, -1.5]);
        assert_eq!(
            memory_read(&[1.0, 2.0, 0.0], &bank).unwrap(),
            vec![0.5, -1.5]
        );
        assert_eq!(
            memory_read(&[-2.0, 1.0, 3.0], &bank).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(memory_read(&[1.0, 2.0], &bank).is_err());
    }

    /// Compensated summation, term by term, with cosine computed directly.
    fn kahan_read(q: &[f64], bank: &MemoryBank) -> Vec<f64> {
        let mut sum = vec![0.0; bank.target_dim()];
        let mut comp = vec![0.0; bank.target_dim()];
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        for e in bank.elements() {
            let sn = e.source.iter().map(|x| x * x).sum::<f64>().sqrt();
            let w = q.iter().zip(&e.source).map(|(a, b)| a * b).sum::<f64>() / (qn * sn);
            for d in 0..sum.len() {
                let y = w * e.target[d] - comp[d];
                let t = sum[d] + y;
                comp[d] = (t - sum[d]) - y;
                sum[d] = t;
            }
        }
        sum
    }

    #[test]
    fn read_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let bank = random_bank(&mut rng, 100, 32, 16);
        for _ in 0..10 {
            let q: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = memory_read(&q, &bank).unwrap();
            for (a, b) in got.iter().zip(kahan_read(&q, &bank)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let dims = Dims {
            vocab: 6,
            embed: 2,
            enc_hidden: 2,
            dec_hidden: 2,
            attn: 2,
            max_topic: 4,
        };
        let mut p = ModelParams::zeros(dims).unwrap();
        let w = p.tensor_mut("proj.w").unwrap();
        w.set(0, 4, 1.0);
        let e = p.tensor_mut("embed").unwrap();
        e.set(5, 0, 0.5);
        // Logits over tokens 4 and 5 are s·W = [1, 0] and E·v = [0, 0.5]; others 0 and 0.
        let probs = fuse_distribution(&p, &[1.0, 0.0], &[1.0, 0.0], 2.0).unwrap();
        assert!((probs[4] - probs[5]).abs() < 1e-15);
        let bare = softmax(&p.net().project(&[1.0, 0.0])).unwrap();
        assert_eq!(
            fuse_distribution(&p, &[1.0, 0.0], &[3.0, -7.0], 0.0).unwrap(),
            bare
        );
        assert!(fuse_distribution(&p, &[1.0, 0.0], &[1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn large_beta_selects_the_repeated_character() {
        let (p, vocab, _) = setup();
        let poem = Poem::new(None, &["山山山山山"; 4]).unwrap();
        let bank = build_memory(&p, &[poem], &vocab).unwrap();
        // Keep only the elements whose target is 山.
        let shan = vocab.id('山');
        let elements: Vec<_> = bank
            .elements()
            .iter()
            .filter(|e| e.token == shan)
            .cloned()
            .collect();
        let run = PoemRun {
            poem: 0,
            start: 0,
            len: elements.len(),
            text: String::new(),
        };
        let bank = MemoryBank::from_elements(elements, 32, 16, p.fingerprint(), vec![run]).unwrap();
        let net = p.net();
        for topic in toy::topics(5, 8) {
            let topic: Vec<Token> = topic.iter().map(|&c| vocab.id(c)).collect();
            let enc = net.encode(&topic).unwrap();
            let s0 = net.initial_state(&enc);
            let s1 = net
                .decoder_step(BOS, &s0, &net.attend(&s0, &enc).context)
                .unwrap();
            let q1 = query_decoder_step(&net, BOS, &[0.0; 32]).unwrap();
            let v = memory_read(&q1, &bank).unwrap();
            let argmax = |beta: f64| {
                let probs = fuse_distribution(&p, &s1, &v, beta).unwrap();
                (0..probs.len())
                    .max_by(|&a, &b| probs[a].total_cmp(&probs[b]))
                    .unwrap()
            };
            assert_eq!(argmax(1e4), shan);
            assert_eq!(argmax(1e6), shan);
        }
    }

    #[test]
    fn bank_file_round_trip_and_fingerprint() {
        let (p, vocab, poems) = setup();
        let bank = build_memory(&p, &poems[..3], &vocab).unwrap();
        let bytes = write_bank(&bank);
        assert_eq!(&bytes[..8], b"MEMBANK1");
        let back = read_bank(&bytes).unwrap();
        assert_eq!(back, bank);
        assert_eq!(write_bank(&back), bytes);
        assert!(read_bank(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(build_memory(&p, &poems[..3], &vocab).unwrap(), bank);

        bank.check_fingerprint(&p).unwrap();
        let other = ModelParams::init(p.dims(), 4).unwrap();
        assert!(matches!(
            bank.check_fingerprint(&other),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn read_is_scale_invariant_in_sources(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = random_bank(&mut rng, 20, 8, 4);
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut scaled = bank.elements().to_vec();
            scaled.iter_mut().for_each(|e| e.source.iter_mut().for_each(|v| *v *= scale));
            let scaled = MemoryBank::from_elements(scaled, 8, 4, "r".into(), bank.runs().to_vec()).unwrap();
            let a = memory_read(&q, &bank).unwrap();
            let b = memory_read(&q, &scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + norm(&a)));
            }
        }
    }
}
