//! Automatic evaluation proxies (n-gram novelty, unigram style shift) and the
//! spec-driven experiment runner behind `mempoet eval`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::constraints::{compliance_score_with, Policy, ToneLexicon, TonePattern};
use crate::corpus::{load_corpus, Genre, Poem, Token};
use crate::error::{Error, Result};
use crate::generate::{ConstraintMode, Decode, GenerationConfig, Generator};
use crate::memory::{load_bank, MemoryBank};
use crate::model::{load_checkpoint, Checkpoint};

pub const NOVELTY_ORDERS: std::ops::RangeInclusive<usize> = 3..=6;

#[derive(Clone, Debug, PartialEq)]
pub struct Novelty {
    /// Longest run of the poem's characters found verbatim in one reference poem.
    pub max_match: usize,
    /// `(n, fraction of the poem's n-grams absent from every reference poem)`.
    pub novel_fraction: Vec<(usize, f64)>,
}

/// Poem text with line breaks dropped; matches never span two poems.
fn flat(p: &Poem) -> Vec<char> {
    p.chars().collect()
}

fn longest_common_substring(a: &[char], b: &[char]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            if x == y {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

pub fn novelty_score(poem: &Poem, reference: &[Poem]) -> Result<Novelty> {
    if reference.is_empty() {
        return Err(Error::usage("novelty against an empty reference corpus"));
    }
    let text = flat(poem);
    let refs: Vec<Vec<char>> = reference.iter().map(flat).collect();
    let max_match = refs
        .iter()
        .map(|r| longest_common_substring(&text, r))
        .max()
        .unwrap_or(0);
    let novel_fraction = NOVELTY_ORDERS
        .map(|n| {
            let seen: HashSet<&[char]> = refs.iter().flat_map(|r| r.windows(n)).collect();
            let grams: Vec<&[char]> = text.windows(n).collect();
            let novel = grams.iter().filter(|g| !seen.contains(*g)).count();
            (n, novel as f64 / grams.len().max(1) as f64)
        })
        .collect();
    Ok(Novelty {
        max_match,
        novel_fraction,
    })
}

/// Mean over the poems' characters of `ln P_style(c) − ln P_background(c)`,
/// both add-one smoothed unigram models over the union of all characters seen.
pub fn style_shift(poems: &[Poem], style: &[Poem], background: &[Poem]) -> Result<f64> {
    if style.is_empty() || background.is_empty() {
        return Err(Error::usage(
            "style shift needs non-empty style and background corpora",
        ));
    }
    let count = |ps: &[Poem]| {
        let mut m: HashMap<char, usize> = HashMap::new();
        ps.iter()
            .flat_map(Poem::chars)
            .for_each(|c| *m.entry(c).or_default() += 1);
        m
    };
    let (cs, cb) = (count(style), count(background));
    let support: HashSet<char> = cs
        .keys()
        .chain(cb.keys())
        .copied()
        .chain(poems.iter().flat_map(Poem::chars))
        .collect();
    let u = support.len() as f64;
    let (ns, nb) = (
        cs.values().sum::<usize>() as f64,
        cb.values().sum::<usize>() as f64,
    );
    let mut total = 0.0;
    let mut n = 0usize;
    for c in poems.iter().flat_map(Poem::chars) {
        let ps = (*cs.get(&c).unwrap_or(&0) as f64 + 1.0) / (ns + u);
        let pb = (*cb.get(&c).unwrap_or(&0) as f64 + 1.0) / (nb + u);
        total += ps.ln() - pb.ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::usage("style shift of no characters"));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Folded into every sampling seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_genre")]
    pub genre: Genre,
    /// Corpus for novelty.
    pub reference: PathBuf,
    /// Background corpus for style shift.
    pub background: PathBuf,
    /// Style name → corpus; one style-shift column per entry.
    #[serde(default)]
    pub styles: BTreeMap<String, PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// Builtin pattern name or pattern file.
    pub pattern: Option<String>,
    pub checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub banks: BTreeMap<String, PathBuf>,
    pub topics: Vec<String>,
    pub configs: Vec<RunConfig>,
}

fn default_genre() -> Genre {
    Genre::FiveChar
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub checkpoint: String,
    pub bank: Option<String>,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_decode")]
    pub decode: String,
    #[serde(default = "default_width")]
    pub beam_width: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_constraints")]
    pub constraints: String,
    #[serde(default = "default_policy")]
    pub policy: String,
}

fn default_decode() -> String {
    "beam".into()
}
fn default_width() -> usize {
    4
}
fn default_temperature() -> f64 {
    1.0
}
fn default_constraints() -> String {
    "off".into()
}
fn default_policy() -> String {
    "lenient".into()
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ExperimentSpec = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((spec, base))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub topic_index: usize,
    pub topic: String,
    pub config: String,
    pub poem: String,
    pub compliance: Option<f64>,
    pub novelty: Novelty,
    /// One entry per style, ordered by style name.
    pub style_shift: Vec<f64>,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub styles: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// Novelty and style-shift columns are automatic proxies and named as such.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("topic_index,topic,config,poem,compliance,novelty_max_match_proxy");
        for n in NOVELTY_ORDERS {
            let _ = write!(out, ",novel_{n}gram_fraction_proxy");
        }
        for s in &self.styles {
            let _ = write!(out, ",style_shift_{s}_proxy");
        }
        out.push_str(",perplexity\n");
        for r in &self.rows {
            let compliance = r.compliance.map(|c| format!("{c:.6}")).unwrap_or_default();
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.topic_index, r.topic, r.config, r.poem, compliance, r.novelty.max_match
            );
            for (_, f) in &r.novelty.novel_fraction {
                let _ = write!(out, ",{f:.6}");
            }
            for s in &r.style_shift {
                let _ = write!(out, ",{s:.6}");
            }
            let _ = writeln!(out, ",{:.6}", r.perplexity);
        }
        out
    }

    /// Per-config means of every numeric column.
    pub fn summary(&self) -> String {
        let mut configs: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !configs.contains(&r.config.as_str()) {
                configs.push(&r.config);
            }
        }
        let mut out =
            String::from("# means per config; novelty and style shift are automatic proxies\n");
        for c in configs {
            let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.config == c).collect();
            let mean = |f: &dyn Fn(&ReportRow) -> f64| {
                rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
            };
            let _ = write!(
                out,
                "{c}: n={} perplexity={:.6} max_match={:.6}",
                rows.len(),
                mean(&|r| r.perplexity),
                mean(&|r| r.novelty.max_match as f64)
            );
            if rows.iter().all(|r| r.compliance.is_some()) {
                let _ = write!(out, " compliance={:.6}", mean(&|r| r.compliance.unwrap()));
            }
            for (i, s) in self.styles.iter().enumerate() {
                let _ = write!(out, " shift_{s}={:.6}", mean(&|r| r.style_shift[i]));
            }
            out.push('\n');
        }
        out
    }
}

struct Loaded {
    reference: Vec<Poem>,
    background: Vec<Poem>,
    styles: Vec<(String, Vec<Poem>)>,
    lexicon: Option<ToneLexicon>,
    pattern: Option<TonePattern>,
    checkpoints: BTreeMap<String, Checkpoint>,
    banks: BTreeMap<String, MemoryBank>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_poems(base: &Path, p: &Path) -> Result<Vec<Poem>> {
    let loaded = load_corpus(resolve(base, p))?;
    if loaded.poems.is_empty() {
        return Err(Error::data(format!("{} holds no valid poems", p.display())));
    }
    Ok(loaded.poems)
}

fn load_all(spec: &ExperimentSpec, base: &Path) -> Result<Loaded> {
    // Every referenced artifact must exist before anything is generated.
    let mut files: Vec<PathBuf> = vec![spec.reference.clone(), spec.background.clone()];
    files.extend(spec.styles.values().cloned());
    files.extend(spec.lexicon.clone());
    files.extend(spec.checkpoints.values().cloned());
    files.extend(spec.banks.values().cloned());
    for f in &files {
        if !resolve(base, f).is_file() {
            return Err(Error::config(format!("missing artifact {}", f.display())));
        }
    }
    for c in &spec.configs {
        if !spec.checkpoints.contains_key(&c.checkpoint) {
            return Err(Error::config(format!(
                "config {} names unknown checkpoint {}",
                c.name, c.checkpoint
            )));
        }
        if let Some(b) = &c.bank {
            if !spec.banks.contains_key(b) {
                return Err(Error::config(format!(
                    "config {} names unknown bank {b}",
                    c.name
                )));
            }
        }
    }
    let pattern = match &spec.pattern {
        Some(p) => {
            let direct = TonePattern::builtin(p);
            Some(match direct {
                Some(p) => p,
                None => {
                    let path = resolve(base, Path::new(p));
                    if !path.is_file() {
                        return Err(Error::config(format!("missing artifact {p}")));
                    }
                    TonePattern::load(path)?
                }
            })
        }
        None => None,
    };
    Ok(Loaded {
        reference: load_poems(base, &spec.reference)?,
        background: load_poems(base, &spec.background)?,
        styles: spec
            .styles
            .iter()
            .map(|(k, p)| Ok((k.clone(), load_poems(base, p)?)))
            .collect::<Result<_>>()?,
        lexicon: spec
            .lexicon
            .as_ref()
            .map(|p| ToneLexicon::load(resolve(base, p)))
            .transpose()?,
        pattern,
        checkpoints: spec
            .checkpoints
            .iter()
            .map(|(k, p)| Ok((k.clone(), load_checkpoint(resolve(base, p))?)))
            .collect::<Result<_>>()?,
        banks: spec
            .banks
            .iter()
            .map(|(k, p)| Ok((k.clone(), load_bank(resolve(base, p))?)))
            .collect::<Result<_>>()?,
    })
}

fn decode_of(c: &RunConfig, seed: u64) -> Result<Decode> {
    match c.decode.as_str() {
        "greedy" => Ok(Decode::Greedy),
        "beam" => Ok(Decode::Beam {
            width: c.beam_width,
        }),
        "sample" => Ok(Decode::Sample {
            temperature: c.temperature,
            seed,
        }),
        other => Err(Error::config(format!("unknown decode strategy {other:?}"))),
    }
}

/// Runs every topic × config cell (in parallel) and assembles rows ordered by
/// topic, then config.
pub fn experiment_run(spec: &ExperimentSpec, base: &Path) -> Result<Report> {
    if spec.topics.is_empty() || spec.configs.is_empty() {
        return Err(Error::config(
            "experiment needs at least one topic and one config",
        ));
    }
    let bad = |s: &str| s.contains([',', '"', '\n', '\r']);
    if let Some(t) = spec.topics.iter().find(|t| t.is_empty() || bad(t)) {
        return Err(Error::config(format!(
            "topic {t:?} is empty or not CSV-safe"
        )));
    }
    if let Some(c) = spec.configs.iter().find(|c| bad(&c.name)) {
        return Err(Error::config(format!(
            "config name {:?} is not CSV-safe",
            c.name
        )));
    }
    let loaded = load_all(spec, base)?;
    for c in &spec.configs {
        let ckpt = &loaded.checkpoints[&c.checkpoint];
        if let Some(b) = &c.bank {
            loaded.banks[b].check_fingerprint(&ckpt.params)?;
        }
        c.constraints.parse::<ConstraintMode>()?;
        c.policy.parse::<Policy>()?;
        decode_of(c, 0)?;
    }
    let cells: Vec<(usize, usize)> = (0..spec.topics.len())
        .flat_map(|t| (0..spec.configs.len()).map(move |c| (t, c)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(t, ci)| run_cell(spec, &loaded, t, ci))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        styles: loaded.styles.iter().map(|(k, _)| k.clone()).collect(),
        rows,
    })
}

fn run_cell(spec: &ExperimentSpec, loaded: &Loaded, t: usize, ci: usize) -> Result<ReportRow> {
    let c = &spec.configs[ci];
    let topic: Vec<char> = spec.topics[t].chars().collect();
    let ckpt = &loaded.checkpoints[&c.checkpoint];
    let mut generator = Generator::new(&ckpt.params, &ckpt.vocab)?;
    if let Some(b) = &c.bank {
        generator = generator.with_memory(&loaded.banks[b])?;
    }
    if let Some(lex) = &loaded.lexicon {
        generator = generator.with_lexicon(lex);
    }
    let seed = spec
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(c.seed)
        .wrapping_mul(1_000_003)
        .wrapping_add(t as u64);
    let config = GenerationConfig {
        genre: spec.genre,
        decode: decode_of(c, seed)?,
        beta: c.beta,
        constraints: c.constraints.parse()?,
        pattern: loaded.pattern.clone(),
        policy: c.policy.parse()?,
    };
    let out = generator.generate(&topic, &config)?;
    let compliance = match (&loaded.pattern, &loaded.lexicon) {
        (Some(p), Some(lex)) => {
            Some(compliance_score_with(&out.poem, p, lex, Policy::Strict).score)
        }
        _ => None,
    };
    let ids: Vec<Token> = topic.iter().map(|&ch| ckpt.vocab.id(ch)).collect();
    let (nll, n) = ckpt.params.net().sequence_nll(&ids, &out.tokens, None)?;
    Ok(ReportRow {
        topic_index: t,
        topic: spec.topics[t].clone(),
        config: c.name.clone(),
        poem: out.poem.text("/"),
        compliance,
        novelty: novelty_score(&out.poem, &loaded.reference)?,
        style_shift: loaded
            .styles
            .iter()
            .map(|(_, s)| style_shift(std::slice::from_ref(&out.poem), s, &loaded.background))
            .collect::<Result<_>>()?,
        perplexity: (nll / n as f64).exp(),
    })
}
