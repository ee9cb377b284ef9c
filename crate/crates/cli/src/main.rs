use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mempoet::constraints::{compliance_score_with, ComplianceReport};
use mempoet::corpus::{
    build_vocab, filter_low_frequency, load_corpus, load_topics, split_train_validation, Poem,
    RareMode,
};
use mempoet::eval::{experiment_run, ExperimentSpec};
use mempoet::memory::{build_memory, load_bank, save_bank, BETA_C1, BETA_CINF};
use mempoet::model::{
    load_checkpoint, prepare_examples, save_checkpoint, train, Checkpoint, Dims, ModelParams,
    Regime, TrainConfig,
};
use mempoet::numerics::AdaDelta;
use mempoet::{
    ConstraintMode, Decode, Error, GenerationConfig, Generator, Genre, Policy, Result, ToneLexicon,
    TonePattern, Vocabulary,
};

#[derive(Parser)]
#[command(
    name = "mempoet",
    version,
    about = "Memory-augmented quatrain generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RareArg {
    AllRare,
    AnyRare,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Greedy,
    Beam,
    Sample,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a JSON-lines corpus.
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        /// Drop poems by rare-character rule before counting.
        #[arg(long)]
        rare_threshold: Option<usize>,
        #[arg(long, value_enum, default_value = "all-rare")]
        rare_mode: RareArg,
        /// Write `<line>\t<reason>` for every rejected record.
        #[arg(long)]
        rejections: Option<PathBuf>,
    },
    /// Train a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation corpus; otherwise split off with --train-count.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        train_count: Option<usize>,
        /// One topic per line, aligned with the corpus; default is each poem's first line.
        #[arg(long)]
        topics: Option<PathBuf>,
        /// Existing vocabulary JSON; otherwise built from the training poems.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "c1")]
        regime: String,
        #[arg(long, default_value_t = 500)]
        max_epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        stop_loss: f64,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.95)]
        rho: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 16)]
        embed: usize,
        #[arg(long, default_value_t = 32)]
        enc_hidden: usize,
        #[arg(long, default_value_t = 32)]
        dec_hidden: usize,
        #[arg(long, default_value_t = 32)]
        attn: usize,
        #[arg(long, default_value_t = 16)]
        max_topic: usize,
        /// CSV `epoch,train_ce,valid_ce`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Build a memory bank from poems with a trained checkpoint.
    BuildMemory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        poems: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one poem for a topic.
    Generate {
        topic: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Defaults to 16 for one-pass and 49 for overfitted checkpoints when a bank is given.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_enum, default_value = "beam")]
        decode: DecodeArg,
        #[arg(long, default_value_t = 4)]
        beam_width: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// off, mask or rerank; defaults to mask when a lexicon is given.
        #[arg(long)]
        constraints: Option<String>,
        /// Builtin pattern name or pattern file.
        #[arg(long)]
        pattern: Option<String>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value = "lenient")]
        policy: String,
        #[arg(long, default_value = "five")]
        genre: String,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Score poems against a tone pattern; prints compliance JSON.
    Validate {
        /// JSON-lines corpus, or plain text with one poem per block of four lines.
        poems: PathBuf,
        #[arg(long)]
        pattern: String,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, default_value = "strict")]
        policy: String,
    },
    /// Run an experiment spec and write the CSV report.
    Eval {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary_out: Option<PathBuf>,
    },
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_poems(path: &Path) -> Result<Vec<Poem>> {
    require(path, "corpus")?;
    let loaded = load_corpus(path)?;
    for r in &loaded.rejections {
        eprintln!("{}: rejected {r}", path.display());
    }
    if loaded.poems.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no valid poems",
            path.display()
        )));
    }
    Ok(loaded.poems)
}

fn cmd_vocab(
    corpus: &Path,
    out: &Path,
    min_count: usize,
    rare: Option<(usize, RareMode)>,
    rejections: Option<&Path>,
) -> Result<()> {
    require(corpus, "corpus")?;
    let loaded = load_corpus(corpus)?;
    if let Some(r) = rejections {
        write(r, loaded.rejection_report())?;
    }
    let poems = match rare {
        Some((t, mode)) => filter_low_frequency(&loaded.poems, t, mode),
        None => loaded.poems,
    };
    let vocab = build_vocab(&poems, min_count).map_err(|e| Error::Data(e.to_string()))?;
    write(out, vocab.to_json())?;
    eprintln!("{} poems, {} tokens", poems.len(), vocab.len());
    Ok(())
}

fn cmd_generate(cli: Command) -> Result<()> {
    let Command::Generate {
        topic,
        checkpoint,
        bank,
        beta,
        decode,
        beam_width,
        temperature,
        seed,
        constraints,
        pattern,
        lexicon,
        policy,
        genre,
        trace_out,
    } = cli
    else {
        unreachable!()
    };
    require(&checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(&checkpoint)?;
    let genre: Genre = genre.parse()?;
    let bank = match &bank {
        Some(b) => {
            require(b, "memory bank")?;
            Some(load_bank(b)?)
        }
        None => None,
    };
    let lexicon = match &lexicon {
        Some(l) => {
            require(l, "lexicon")?;
            Some(ToneLexicon::load(l)?)
        }
        None => None,
    };
    let constraints: ConstraintMode = match constraints {
        Some(c) => c.parse()?,
        None if lexicon.is_some() => ConstraintMode::Mask,
        None => ConstraintMode::Off,
    };
    let pattern = match (pattern, constraints) {
        (Some(p), _) => Some(TonePattern::resolve(&p)?),
        (None, ConstraintMode::Off) => None,
        (None, _) => TonePattern::builtin(match genre {
            Genre::FiveChar => "five-a",
            Genre::SevenChar => "seven-a",
        }),
    };
    let beta = beta.unwrap_or(match (&bank, ckpt.config.as_ref().map(|c| c.regime)) {
        (None, _) => 0.0,
        (Some(_), Some(Regime::CInfinity)) => BETA_CINF,
        (Some(_), _) => BETA_C1,
    });
    let config = GenerationConfig {
        genre,
        decode: match decode {
            DecodeArg::Greedy => Decode::Greedy,
            DecodeArg::Beam => Decode::Beam { width: beam_width },
            DecodeArg::Sample => Decode::Sample { temperature, seed },
        },
        beta,
        constraints,
        pattern,
        policy: policy.parse()?,
    };
    let mut g = Generator::new(&ckpt.params, &ckpt.vocab)?;
    if let Some(b) = &bank {
        g = g.with_memory(b)?;
    }
    if let Some(l) = &lexicon {
        g = g.with_lexicon(l);
    }
    let topic: Vec<char> = topic.chars().filter(|c| !c.is_whitespace()).collect();
    let out = g.generate(&topic, &config)?;
    for i in 0..4 {
        println!("{}", out.poem.line_string(i));
    }
    if let Some(t) = trace_out {
        write(&t, out.trace.to_json())?;
    }
    Ok(())
}

/// JSON-lines if the first non-blank line opens an object, else blocks of four lines.
fn read_validate_input(path: &Path) -> Result<Vec<Poem>> {
    require(path, "poem file")?;
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if text.trim_start().starts_with('{') {
        return read_poems(path);
    }
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() || lines.len() % 4 != 0 {
        return Err(Error::Data(format!(
            "{} has {} non-blank lines; expected a multiple of 4",
            path.display(),
            lines.len()
        )));
    }
    lines.chunks(4).map(|c| Poem::new(None, c)).collect()
}

fn cmd_validate(poems: &Path, pattern: &str, lexicon: &Path, policy: &str) -> Result<()> {
    require(lexicon, "lexicon")?;
    let pattern = TonePattern::resolve(pattern)?;
    let lexicon = ToneLexicon::load(lexicon)?;
    let policy: Policy = policy.parse()?;
    let reports: Vec<ComplianceReport> = read_validate_input(poems)?
        .iter()
        .map(|p| compliance_score_with(p, &pattern, &lexicon, policy))
        .collect();
    let json = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])
    } else {
        serde_json::to_string_pretty(&reports)
    };
    println!("{}", json.expect("reports serialize"));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Vocab {
            corpus,
            out,
            min_count,
            rare_threshold,
            rare_mode,
            rejections,
        } => {
            let mode = match rare_mode {
                RareArg::AllRare => RareMode::AllRare,
                RareArg::AnyRare => RareMode::AnyRare,
            };
            cmd_vocab(
                &corpus,
                &out,
                min_count,
                rare_threshold.map(|t| (t, mode)),
                rejections.as_deref(),
            )
        }
        Command::Train {
            corpus,
            out,
            valid,
            train_count,
            topics,
            vocab,
            regime,
            max_epochs,
            stop_loss,
            batch_size,
            seed,
            rho,
            eps,
            embed,
            enc_hidden,
            dec_hidden,
            attn,
            max_topic,
            log,
        } => {
            let poems = read_poems(&corpus)?;
            let topics = match &topics {
                Some(t) => {
                    require(t, "topics file")?;
                    Some(load_topics(t)?)
                }
                None => None,
            };
            if topics.is_some() && (valid.is_none() && train_count.is_some()) {
                return Err(Error::Config(
                    "--topics cannot be combined with --train-count".into(),
                ));
            }
            let (train_poems, valid_poems) = match (&valid, train_count) {
                (Some(v), None) => (poems, read_poems(v)?),
                (None, Some(n)) => split_train_validation(&poems, n, seed)
                    .map_err(|e| Error::Config(e.to_string()))?,
                (None, None) => (poems, Vec::new()),
                (Some(_), Some(_)) => {
                    return Err(Error::Config("give either --valid or --train-count".into()))
                }
            };
            let vocab = match &vocab {
                Some(v) => {
                    require(v, "vocabulary")?;
                    let text = std::fs::read_to_string(v).map_err(|source| Error::Io {
                        path: v.clone(),
                        source,
                    })?;
                    Vocabulary::from_json(&text)?
                }
                None => build_vocab(&train_poems, 1)?,
            };
            let dims = Dims {
                vocab: vocab.len(),
                embed,
                enc_hidden,
                dec_hidden,
                attn,
                max_topic,
            };
            let regime: Regime = regime.parse()?;
            let config = TrainConfig {
                regime,
                max_epochs,
                stop_loss,
                batch_size,
                seed,
                optimizer: AdaDelta { rho, eps },
            };
            let train_set = prepare_examples(&train_poems, topics.as_deref(), &vocab)?;
            let valid_set = prepare_examples(&valid_poems, None, &vocab)?;
            let params = ModelParams::init(dims, seed)?;
            let (params, train_log) = train(params, &train_set, &valid_set, &config)?;
            if let Some(l) = log {
                write(&l, train_log.to_csv())?;
            }
            let last = train_log.last();
            eprintln!("epoch {} train_ce {:.6}", last.epoch, last.train_ce);
            save_checkpoint(
                &out,
                &Checkpoint {
                    params,
                    vocab,
                    config: Some(config),
                },
            )
        }
        Command::BuildMemory {
            checkpoint,
            poems,
            out,
        } => {
            require(&checkpoint, "checkpoint")?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let poems = read_poems(&poems)?;
            let bank = build_memory(&ckpt.params, &poems, &ckpt.vocab)?;
            eprintln!("{} elements from {} poems", bank.len(), poems.len());
            save_bank(&out, &bank)
        }
        c @ Command::Generate { .. } => cmd_generate(c),
        Command::Validate {
            poems,
            pattern,
            lexicon,
            policy,
        } => cmd_validate(&poems, &pattern, &lexicon, &policy),
        Command::Eval {
            spec,
            out,
            summary_out,
        } => {
            require(&spec, "experiment spec")?;
            let (spec, base) = ExperimentSpec::load(&spec)?;
            let report = experiment_run(&spec, &base)?;
            write(&out, report.to_csv())?;
            let summary = report.summary();
            match summary_out {
                Some(s) => write(&s, summary)?,
                None => eprint!("{summary}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mempoet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
