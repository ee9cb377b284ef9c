//! Acceptance checks. Each test writes one `criterion N <name>: PASS|FAIL (...)`
//! line straight to stdout, so the verdicts show even when output is captured.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mempoet::constraints::{compliance_score, validate_tonal, Policy, ToneLexicon, TonePattern};
use mempoet::corpus::{build_vocab, decode_tokens, encode_poem, write_corpus, Genre, Poem};
use mempoet::eval::{experiment_run, novelty_score, style_shift, ExperimentSpec};
use mempoet::memory::{
    build_memory, load_bank, memory_read, save_bank, MemoryBank, MemoryElement, PoemRun, BETA_CINF,
};
use mempoet::model::{
    load_checkpoint, prepare_examples, save_checkpoint, train, Checkpoint, Dims, ModelParams,
    SequenceObjective, TrainConfig, TrainLog,
};
use mempoet::numerics::gradient_check;
use mempoet::toy::{self, Style};
use mempoet::{ConstraintMode, Decode, GenerationConfig, Generator, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {n} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

struct Trained {
    vocab: Vocabulary,
    c1: ModelParams,
    c1_log: TrainLog,
    cinf: ModelParams,
    cinf_log: TrainLog,
    cinf_time: Duration,
}

const TRAIN_SEED: u64 = 1;

/// C₁ and C∞ from the same initialisation, trained once and shared.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let poems = toy::train_corpus();
        let vocab = build_vocab(&poems, 1).unwrap();
        let tr = prepare_examples(&poems, None, &vocab).unwrap();
        let va = prepare_examples(&toy::validation_corpus(), None, &vocab).unwrap();
        let init = ModelParams::init(Dims::desk(vocab.len()), TRAIN_SEED).unwrap();
        let (c1, c1_log) = train(init.clone(), &tr, &va, &TrainConfig::c1(TRAIN_SEED)).unwrap();
        let start = Instant::now();
        let (cinf, cinf_log) = train(
            init,
            &tr,
            &va,
            &TrainConfig::c_infinity(TRAIN_SEED, 2000, 0.1),
        )
        .unwrap();
        Trained {
            vocab,
            c1,
            c1_log,
            cinf,
            cinf_log,
            cinf_time: start.elapsed(),
        }
    })
}

#[test]
fn criterion_1_gradient_check() {
    let poems = toy::train_corpus();
    let vocab = build_vocab(&poems, 1).unwrap();
    let ex = &prepare_examples(&poems, None, &vocab).unwrap()[0];
    let dims = Dims::desk(vocab.len());
    let mut params = ModelParams::init(dims, 17).unwrap();
    let obj = SequenceObjective {
        dims,
        topic: ex.topic.clone(),
        tokens: ex.tokens.clone(),
        steps: Some(1),
    };
    let start = Instant::now();
    let rep = gradient_check(&obj, params.store_mut(), 1e-5, 1e-6).unwrap();
    let elapsed = start.elapsed();
    let all_tensors = rep.per_tensor.len() == dims.layout().len();
    let total: usize = dims.layout().iter().map(|(_, r, c)| r * c).sum();
    verdict(
        1,
        "gradient-check",
        rep.max_rel_error < 1e-4
            && all_tensors
            && rep.checked == total
            && elapsed < Duration::from_secs(60),
        format!(
            "max rel err {:.2e} at {:?}, {} scalars in {} tensors, {:.1}s",
            rep.max_rel_error,
            rep.worst,
            rep.checked,
            rep.per_tensor.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_beta_zero_equivalence() {
    let t = trained();
    let mut mismatches = 0;
    let mut runs = 0;
    for params in [&t.c1, &t.cinf] {
        let bare = Generator::new(params, &t.vocab).unwrap();
        let bank = build_memory(params, &toy::train_corpus(), &t.vocab).unwrap();
        let mem = bare.with_memory(&bank).unwrap();
        for topic in toy::topics(20, 2024) {
            for decode in [
                Decode::Greedy,
                Decode::Beam { width: 4 },
                Decode::Sample {
                    temperature: 1.0,
                    seed: 7,
                },
            ] {
                let config = GenerationConfig {
                    decode,
                    beta: 0.0,
                    ..Default::default()
                };
                let a = bare.generate(&topic, &config).unwrap();
                let b = mem.generate(&topic, &config).unwrap();
                runs += 1;
                if a.tokens != b.tokens {
                    mismatches += 1;
                }
            }
        }
    }
    verdict(
        2,
        "beta-zero-equivalence",
        mismatches == 0,
        format!("{mismatches} of {runs} token sequences differ"),
    );
}

/// Brute-force read: direct cosine and Kahan-compensated accumulation.
fn compensated_read(q: &[f64], bank: &MemoryBank) -> Vec<f64> {
    let d = bank.target_dim();
    let (mut sum, mut comp) = (vec![0.0; d], vec![0.0; d]);
    let qq: f64 = q.iter().map(|x| x * x).sum();
    for e in bank.elements() {
        let ss: f64 = e.source.iter().map(|x| x * x).sum();
        let w = if qq.sqrt() < 1e-12 || ss.sqrt() < 1e-12 {
            0.0
        } else {
            q.iter().zip(&e.source).map(|(a, b)| a * b).sum::<f64>() / (qq.sqrt() * ss.sqrt())
        };
        for k in 0..d {
            let y = w * e.target[k] - comp[k];
            let s = sum[k] + y;
            comp[k] = (s - sum[k]) - y;
            sum[k] = s;
        }
    }
    sum
}

#[test]
fn criterion_3_memory_read_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (k, sd, td) = (100, 32, 16);
        let elements: Vec<MemoryElement> = (0..k)
            .map(|i| {
                // A few zero sources and sources parallel to a basis vector.
                let source: Vec<f64> = match i % 25 {
                    0 => vec![0.0; sd],
                    1 => (0..sd).map(|j| if j == 0 { 3.0 } else { 0.0 }).collect(),
                    _ => (0..sd).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                };
                MemoryElement {
                    source,
                    target: (0..td).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    token: 4,
                    poem: 0,
                    step: i + 1,
                }
            })
            .collect();
        let run = PoemRun {
            poem: 0,
            start: 0,
            len: k,
            text: String::new(),
        };
        let bank = MemoryBank::from_elements(elements, sd, td, String::new(), vec![run]).unwrap();
        let q: Vec<f64> = (0..sd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = memory_read(&q, &bank).unwrap();
        for (a, b) in got.iter().zip(compensated_read(&q, &bank)) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        3,
        "memory-read-oracle",
        worst < 1e-10,
        format!("max abs diff {worst:.2e} over 100 banks of K=100"),
    );
}

#[test]
fn criterion_4_memorization_signature() {
    let t = trained();
    let last = t.cinf_log.last();
    let epoch1 = t.cinf_log.epoch(1).unwrap();
    let c1_valid = t.c1_log.last().valid_ce.unwrap();
    let cinf_valid = last.valid_ce.unwrap();
    let pass = last.train_ce < 0.1
        && cinf_valid > epoch1.valid_ce.unwrap()
        && c1_valid < cinf_valid
        && t.cinf_time < Duration::from_secs(600);
    verdict(
        4,
        "memorization-signature",
        pass,
        format!(
            "C-inf: {} epochs, train CE {:.4}, valid CE {:.4} (epoch 1: {:.4}); C1 valid CE {:.4}; {:.1}s",
            last.epoch,
            last.train_ce,
            cinf_valid,
            epoch1.valid_ce.unwrap(),
            c1_valid,
            t.cinf_time.as_secs_f64()
        ),
    );
}

/// 20 topics × 5 sampling seeds with the given bank and β.
fn sample_poems(
    params: &ModelParams,
    vocab: &Vocabulary,
    bank: &MemoryBank,
    beta: f64,
) -> Vec<Poem> {
    let g = Generator::new(params, vocab)
        .unwrap()
        .with_memory(bank)
        .unwrap();
    let topics = toy::topics(20, 99);
    let mut out = Vec::with_capacity(100);
    for seed in 0..5 {
        for topic in &topics {
            let config = GenerationConfig {
                decode: Decode::Sample {
                    temperature: 1.0,
                    seed,
                },
                beta,
                ..Default::default()
            };
            out.push(g.generate(topic, &config).unwrap().poem);
        }
    }
    out
}

#[test]
fn criterion_5_memory_steering() {
    let t = trained();
    let train_poems = toy::train_corpus();
    let style = toy::style_corpus(Style::Pastoral);
    let bank = build_memory(&t.cinf, &style, &t.vocab).unwrap();
    let mut shifts = Vec::new();
    let mut max_match_64 = 0;
    for beta in [0.0, 4.0, 16.0, 64.0] {
        let poems = sample_poems(&t.cinf, &t.vocab, &bank, beta);
        shifts.push(style_shift(&poems, &style, &train_poems).unwrap());
        if beta == 64.0 {
            max_match_64 = poems
                .iter()
                .map(|p| novelty_score(p, &train_poems).unwrap().max_match)
                .max()
                .unwrap();
        }
    }
    verdict(
        5,
        "memory-steering",
        shifts[3] > shifts[0] && max_match_64 < 20,
        format!(
            "pastoral shift at beta 0/4/16/64 = {:.3}/{:.3}/{:.3}/{:.3}; max match at beta 64 = {max_match_64} of 20",
            shifts[0], shifts[1], shifts[2], shifts[3]
        ),
    );
}

#[test]
fn criterion_6_style_bank_separation() {
    let t = trained();
    let train_poems = toy::train_corpus();
    let styles: Vec<Vec<Poem>> = Style::ALL.iter().map(|&s| toy::style_corpus(s)).collect();
    let mut diagonal = 0;
    let mut rows = Vec::new();
    for (i, style) in Style::ALL.iter().enumerate() {
        let bank = build_memory(&t.cinf, &styles[i], &t.vocab).unwrap();
        let poems = sample_poems(&t.cinf, &t.vocab, &bank, BETA_CINF);
        let shifts: Vec<f64> = styles
            .iter()
            .map(|s| style_shift(&poems, s, &train_poems).unwrap())
            .collect();
        let best = (0..3)
            .max_by(|&a, &b| shifts[a].total_cmp(&shifts[b]))
            .unwrap();
        diagonal += (best == i) as usize;
        rows.push(format!(
            "{} bank -> [{:.3}, {:.3}, {:.3}]",
            style.name(),
            shifts[0],
            shifts[1],
            shifts[2]
        ));
    }
    verdict(
        6,
        "style-bank-separation",
        diagonal >= 2,
        format!("{diagonal}/3 on the diagonal; {}", rows.join("; ")),
    );
}

#[test]
fn criterion_7_compliance() {
    let t = trained();
    let lexicon = toy::lexicon();
    let bank = build_memory(&t.cinf, &toy::style_corpus(Style::Romantic), &t.vocab).unwrap();
    let patterns: Vec<TonePattern> = ["five-a", "five-b", "five-c", "five-d"]
        .iter()
        .map(|n| TonePattern::builtin(n).unwrap())
        .collect();
    let topics = toy::topics(25, 7);
    let mut compliant = 0;
    let mut total = 0;
    for (m, params) in [&t.c1, &t.cinf].into_iter().enumerate() {
        let mut g = Generator::new(params, &t.vocab)
            .unwrap()
            .with_lexicon(&lexicon);
        if m == 1 {
            g = g.with_memory(&bank).unwrap();
        }
        for (i, topic) in topics.iter().enumerate() {
            for rep in 0..2 {
                let pattern = &patterns[(i + rep) % 4];
                let config = GenerationConfig {
                    decode: if rep == 0 {
                        Decode::Sample {
                            temperature: 1.0,
                            seed: i as u64,
                        }
                    } else {
                        Decode::Beam { width: 4 }
                    },
                    beta: if m == 1 { BETA_CINF } else { 0.0 },
                    constraints: ConstraintMode::Mask,
                    pattern: Some(pattern.clone()),
                    policy: Policy::Strict,
                    ..Default::default()
                };
                let out = g.generate(topic, &config).unwrap();
                total += 1;
                if compliance_score(&out.poem, pattern, &lexicon).score == 1.0 {
                    compliant += 1;
                }
            }
        }
    }
    let table1 = Poem::new(
        None,
        &["向晚意不适", "驱车登古原", "夕阳无限好", "只是近黄昏"],
    )
    .unwrap();
    let lex1 = ToneLexicon::parse(include_str!("../data/lexicon/table1.tsv")).unwrap();
    let pat1 = TonePattern::builtin("table1").unwrap();
    let violations = validate_tonal(&table1, &pat1, &lex1, Policy::Strict).unwrap();
    let line1: Vec<String> = pat1.lines()[0].iter().map(|s| s.to_string()).collect();
    verdict(
        7,
        "compliance",
        compliant == 100 && total == 100 && violations.is_empty() && line1.join(" ") == "* Z Z P Z",
        format!(
            "{compliant}/{total} masked poems score 1.0; table 1 poem has {} violations against ({})",
            violations.len(),
            line1.join(" ")
        ),
    );
}

#[test]
fn criterion_8_eval_determinism() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    write_corpus(p("train.jsonl"), &toy::train_corpus()).unwrap();
    for s in Style::ALL {
        write_corpus(p(&format!("{}.jsonl", s.name())), &toy::style_corpus(s)).unwrap();
    }
    std::fs::write(p("toy.tsv"), toy::LEXICON_TSV).unwrap();
    for (name, params) in [("c1", &t.c1), ("cinf", &t.cinf)] {
        let ckpt = Checkpoint {
            params: params.clone(),
            vocab: t.vocab.clone(),
            config: None,
        };
        save_checkpoint(p(&format!("{name}.ckpt")), &ckpt).unwrap();
    }
    for s in Style::ALL {
        let bank = build_memory(&t.cinf, &toy::style_corpus(s), &t.vocab).unwrap();
        save_bank(p(&format!("{}.bank", s.name())), &bank).unwrap();
    }
    let topics: Vec<String> = toy::topics(6, 8)
        .iter()
        .map(|t| t.iter().collect())
        .collect();
    let spec = serde_json::json!({
        "seed": 42,
        "reference": "train.jsonl",
        "background": "train.jsonl",
        "styles": {"pastoral": "pastoral.jsonl", "battle": "battle.jsonl", "romantic": "romantic.jsonl"},
        "lexicon": "toy.tsv",
        "pattern": "five-c",
        "checkpoints": {"c1": "c1.ckpt", "cinf": "cinf.ckpt"},
        "banks": {"pastoral": "pastoral.bank", "battle": "battle.bank", "romantic": "romantic.bank"},
        "topics": topics,
        "configs": [
            {"name": "c1-beam", "checkpoint": "c1", "decode": "beam", "beam_width": 4},
            {"name": "cinf-sample", "checkpoint": "cinf", "decode": "sample", "seed": 3, "temperature": 0.9},
            {"name": "cinf-pastoral", "checkpoint": "cinf", "bank": "pastoral", "beta": 49, "decode": "sample", "seed": 5, "constraints": "mask", "policy": "strict"},
            {"name": "cinf-battle", "checkpoint": "cinf", "bank": "battle", "beta": 16, "decode": "beam", "constraints": "rerank"},
            {"name": "cinf-romantic", "checkpoint": "cinf", "bank": "romantic", "beta": 49, "decode": "greedy"}
        ]
    });
    std::fs::write(p("spec.json"), serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    let run = |out: &str| {
        let (spec, base) = ExperimentSpec::load(p("spec.json")).unwrap();
        let report = experiment_run(&spec, &base).unwrap();
        std::fs::write(p(out), report.to_csv()).unwrap();
        std::fs::read(p(out)).unwrap()
    };
    let a = run("a.csv");
    let b = run("b.csv");
    let rows = String::from_utf8_lossy(&a).lines().count() - 1;
    verdict(
        8,
        "eval-determinism",
        a == b && rows == 30,
        format!(
            "{} vs {} bytes, {rows} rows, identical: {}",
            a.len(),
            b.len(),
            a == b
        ),
    );
}

fn random_poem(rng: &mut ChaCha8Rng, alphabet: &[char]) -> Poem {
    let genre = if rng.gen_bool(0.5) {
        Genre::FiveChar
    } else {
        Genre::SevenChar
    };
    let lines: Vec<String> = (0..4)
        .map(|_| {
            (0..genre.line_len())
                .map(|_| *alphabet.choose(rng).unwrap())
                .collect()
        })
        .collect();
    Poem::new(None, &lines).unwrap()
}

#[test]
fn criterion_9_round_trips() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();

    let ckpt = Checkpoint {
        params: t.cinf.clone(),
        vocab: t.vocab.clone(),
        config: Some(TrainConfig::c_infinity(TRAIN_SEED, 2000, 0.1)),
    };
    save_checkpoint(dir.path().join("m.ckpt"), &ckpt).unwrap();
    let back = load_checkpoint(dir.path().join("m.ckpt")).unwrap();
    let ckpt_ok = back.params.bit_eq(&ckpt.params)
        && back.params.fingerprint() == ckpt.params.fingerprint()
        && back.vocab == ckpt.vocab
        && back.config == ckpt.config;

    let bank = build_memory(&t.cinf, &toy::train_corpus(), &t.vocab).unwrap();
    save_bank(dir.path().join("m.bank"), &bank).unwrap();
    let bank_back = load_bank(dir.path().join("m.bank")).unwrap();
    let bits = |b: &MemoryBank| -> Vec<u64> {
        b.elements()
            .iter()
            .flat_map(|e| e.source.iter().chain(&e.target).map(|v| v.to_bits()))
            .collect()
    };
    let bank_ok = bank_back == bank
        && bits(&bank_back) == bits(&bank)
        && bank_back.check_fingerprint(&back.params).is_ok();

    // Random poems over a CJK range plus the toy alphabet.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut alphabet = toy::alphabet();
    alphabet.extend((0x4e00u32..0x4e40).filter_map(char::from_u32));
    let poems: Vec<Poem> = (0..100).map(|_| random_poem(&mut rng, &alphabet)).collect();
    let vocab = build_vocab(&poems, 1).unwrap();
    let identical = poems
        .iter()
        .filter(|p| {
            decode_tokens(&encode_poem(p, &vocab).tokens, &vocab)
                .ok()
                .as_ref()
                == Some(*p)
        })
        .count();
    verdict(
        9,
        "round-trips",
        ckpt_ok && bank_ok && identical == 100,
        format!(
            "checkpoint bit-exact: {ckpt_ok}; bank bit-exact: {bank_ok} (K={}); encode/decode identity {identical}/100",
            bank.len()
        ),
    );
}
