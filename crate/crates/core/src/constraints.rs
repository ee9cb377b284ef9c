//! Quatrain regulations: tone lexicon, P/Z/* line templates, tonal and rhyme
//! validation, compliance scoring, and per-step character masks for decoding.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Genre, Poem, Token, Vocabulary, EOS, SEP};
use crate::error::{Error, Result};

/// Lexicon tone of a character: level, oblique, or usable as either.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tone {
    P,
    Z,
    B,
}

impl Tone {
    pub fn satisfies(self, required: Template) -> bool {
        match (required, self) {
            (Template::Any, _) | (_, Tone::B) => true,
            (Template::P, Tone::P) | (Template::Z, Tone::Z) => true,
            _ => false,
        }
    }
}

impl FromStr for Tone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(Tone::P),
            "Z" => Ok(Tone::Z),
            "B" => Ok(Tone::B),
            other => Err(Error::data(format!("unknown tone {other:?}"))),
        }
    }
}

/// One template position: required level tone, required oblique tone, or free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Template {
    P,
    Z,
    #[serde(rename = "*")]
    Any,
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(Template::P),
            "Z" => Ok(Template::Z),
            "*" => Ok(Template::Any),
            other => Err(Error::data(format!("unknown template symbol {other:?}"))),
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::P => "P",
            Template::Z => "Z",
            Template::Any => "*",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Characters missing from the lexicon fail every constrained position.
    #[default]
    Strict,
    /// Characters missing from the lexicon pass.
    Lenient,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Policy::Strict),
            "lenient" => Ok(Policy::Lenient),
            other => Err(Error::config(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LexEntry {
    tone: Tone,
    rhyme: Option<String>,
}

/// Per-character tone and optional rhyme group, loaded from
/// `char<TAB>tone(P|Z|B)<TAB>rhyme_group` rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ToneLexicon {
    entries: BTreeMap<char, LexEntry>,
}

impl ToneLexicon {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::data(format!("lexicon line {}: {m}", i + 1));
            let mut fields = line.split('\t');
            let ch = fields.next().unwrap_or_default();
            let mut chars = ch.chars();
            let c = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => return Err(err(format!("expected one character, got {ch:?}"))),
            };
            let tone: Tone = fields
                .next()
                .ok_or_else(|| err("missing tone".into()))?
                .trim()
                .parse()
                .map_err(|e: Error| err(e.to_string()))?;
            let rhyme = fields
                .next()
                .map(str::trim)
                .filter(|g| !g.is_empty())
                .map(String::from);
            if entries.insert(c, LexEntry { tone, rhyme }).is_some() {
                return Err(err(format!("duplicate entry for {c:?}")));
            }
        }
        Ok(ToneLexicon { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn insert(&mut self, c: char, tone: Tone, rhyme: Option<&str>) {
        self.entries.insert(
            c,
            LexEntry {
                tone,
                rhyme: rhyme.map(String::from),
            },
        );
    }

    /// `None` for characters absent from the lexicon.
    pub fn tone_of(&self, c: char) -> Option<Tone> {
        self.entries.get(&c).map(|e| e.tone)
    }

    pub fn rhyme_group(&self, c: char) -> Option<&str> {
        self.entries.get(&c).and_then(|e| e.rhyme.as_deref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.entries.keys().copied()
    }

    fn satisfies(&self, c: char, required: Template, policy: Policy) -> bool {
        match self.tone_of(c) {
            Some(t) => t.satisfies(required),
            None => required == Template::Any || policy == Policy::Lenient,
        }
    }
}

/// Four line templates for one genre.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TonePattern {
    pub name: String,
    pub genre: Genre,
    lines: Vec<Vec<Template>>,
}

const BUILTIN_PATTERNS: &[(&str, &str)] = &[
    ("five-a", include_str!("../data/patterns/five-a.txt")),
    ("five-b", include_str!("../data/patterns/five-b.txt")),
    ("five-c", include_str!("../data/patterns/five-c.txt")),
    ("five-d", include_str!("../data/patterns/five-d.txt")),
    ("seven-a", include_str!("../data/patterns/seven-a.txt")),
    ("seven-b", include_str!("../data/patterns/seven-b.txt")),
    ("seven-c", include_str!("../data/patterns/seven-c.txt")),
    ("seven-d", include_str!("../data/patterns/seven-d.txt")),
    ("table1", include_str!("../data/patterns/table1.txt")),
];

impl TonePattern {
    pub fn new(name: impl Into<String>, genre: Genre, lines: Vec<Vec<Template>>) -> Result<Self> {
        if lines.len() != 4 || lines.iter().any(|l| l.len() != genre.line_len()) {
            return Err(Error::data(format!(
                "a {genre} pattern needs 4 templates of length {}",
                genre.line_len()
            )));
        }
        Ok(TonePattern {
            name: name.into(),
            genre,
            lines,
        })
    }

    /// A genre header line, then four lines of space-separated `P`/`Z`/`*`.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut rows = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = rows
            .next()
            .ok_or_else(|| Error::data("empty pattern file"))?;
        let genre: Genre = header
            .trim_start_matches("genre:")
            .parse()
            .map_err(|_| Error::data(format!("bad pattern header {header:?}")))?;
        let lines = rows
            .map(|l| {
                l.split_whitespace()
                    .map(str::parse)
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, genre, lines)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(
            name,
            &std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        )
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_PATTERNS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, text)| Self::parse(*n, text).expect("builtin patterns parse"))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_PATTERNS.iter().map(|(n, _)| *n)
    }

    /// The builtin `name`, or else a pattern file at that path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Some(p) => Ok(p),
            None if Path::new(name_or_path).exists() => Self::load(name_or_path),
            None => Err(Error::config(format!(
                "{name_or_path:?} is neither a builtin pattern nor a file"
            ))),
        }
    }

    /// A pattern with no constrained positions.
    pub fn unconstrained(genre: Genre) -> Self {
        TonePattern {
            name: "free".into(),
            genre,
            lines: vec![vec![Template::Any; genre.line_len()]; 4],
        }
    }

    pub fn at(&self, line: usize, pos: usize) -> Template {
        self.lines[line][pos]
    }

    pub fn lines(&self) -> &[Vec<Template>] {
        &self.lines
    }

    pub fn constrained_positions(&self) -> usize {
        self.lines
            .iter()
            .flatten()
            .filter(|&&t| t != Template::Any)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// 0-based line and character position.
    pub line: usize,
    pub position: usize,
    pub expected: Template,
    /// `None` when the character is missing from the lexicon.
    pub got: Option<Tone>,
}

pub fn validate_tonal(
    poem: &Poem,
    pattern: &TonePattern,
    lexicon: &ToneLexicon,
    policy: Policy,
) -> Result<Vec<Violation>> {
    if poem.genre() != pattern.genre {
        return Err(Error::usage(format!(
            "{} poem checked against a {} pattern",
            poem.genre(),
            pattern.genre
        )));
    }
    let mut out = Vec::new();
    for (line, chars) in poem.lines().iter().enumerate() {
        for (position, &c) in chars.iter().enumerate() {
            let expected = pattern.at(line, position);
            if !lexicon.satisfies(c, expected, policy) {
                out.push(Violation {
                    line,
                    position,
                    expected,
                    got: lexicon.tone_of(c),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RhymeVerdict {
    Rhymes,
    Differs,
    /// A line-final character has no rhyme group in the lexicon.
    Indeterminate,
}

/// Compares the rhyme groups of the last characters of lines 2 and 4.
pub fn validate_rhyme(poem: &Poem, lexicon: &ToneLexicon) -> RhymeVerdict {
    let last = |i: usize| *poem.line(i).last().expect("lines are non-empty");
    let (a, b) = (last(1), last(3));
    if a == b {
        return RhymeVerdict::Rhymes;
    }
    match (lexicon.rhyme_group(a), lexicon.rhyme_group(b)) {
        (Some(x), Some(y)) if x == y => RhymeVerdict::Rhymes,
        (Some(_), Some(_)) => RhymeVerdict::Differs,
        _ => RhymeVerdict::Indeterminate,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplianceReport {
    pub structure_ok: bool,
    pub tonal_violations: Vec<Violation>,
    pub rhyme: RhymeVerdict,
    pub rhyme_ok: bool,
    pub satisfied: usize,
    pub total: usize,
    /// `satisfied / total`.
    pub score: f64,
}

/// Compliance under the strict policy.
pub fn compliance_score(
    poem: &Poem,
    pattern: &TonePattern,
    lexicon: &ToneLexicon,
) -> ComplianceReport {
    compliance_score_with(poem, pattern, lexicon, Policy::Strict)
}

/// One structure check (genre matches the pattern), one check per constrained
/// template position, and one rhyme check. An indeterminate rhyme only passes
/// under the lenient policy.
pub fn compliance_score_with(
    poem: &Poem,
    pattern: &TonePattern,
    lexicon: &ToneLexicon,
    policy: Policy,
) -> ComplianceReport {
    let constrained = pattern.constrained_positions();
    let total = constrained + 2;
    let rhyme = validate_rhyme(poem, lexicon);
    let rhyme_ok = match rhyme {
        RhymeVerdict::Rhymes => true,
        RhymeVerdict::Differs => false,
        RhymeVerdict::Indeterminate => policy == Policy::Lenient,
    };
    let (structure_ok, tonal_violations, tonal_ok) =
        match validate_tonal(poem, pattern, lexicon, policy) {
            Ok(v) => {
                let ok = constrained - v.len();
                (true, v, ok)
            }
            Err(_) => (false, Vec::new(), 0),
        };
    let satisfied = structure_ok as usize + tonal_ok + rhyme_ok as usize;
    ComplianceReport {
        structure_ok,
        tonal_violations,
        rhyme,
        rhyme_ok,
        satisfied,
        total,
        score: satisfied as f64 / total as f64,
    }
}

/// What the token at a given decode step must be.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// A character at 0-based `(line, pos)`.
    Char {
        line: usize,
        pos: usize,
    },
    Sep,
    Eos,
}

/// Slot of the `step`-th generated token (1-based: step 1 follows BOS).
/// `None` past the end of the poem.
pub fn slot_at(genre: Genre, step: usize) -> Option<SlotKind> {
    let l = genre.line_len();
    let k = step.checked_sub(1)?;
    let (line, pos) = (k / (l + 1), k % (l + 1));
    match line {
        0..=3 if pos == l => Some(SlotKind::Sep),
        0..=3 => Some(SlotKind::Char { line, pos }),
        4 if pos == 0 => Some(SlotKind::Eos),
        _ => None,
    }
}

/// Mask admitting only what the quatrain structure allows at `step`: SEP or EOS at
/// their slots, any non-special character elsewhere.
pub fn structure_mask(genre: Genre, step: usize, vocab: &Vocabulary) -> Vec<bool> {
    let mut mask = vec![false; vocab.len()];
    match slot_at(genre, step) {
        Some(SlotKind::Sep) => mask[SEP] = true,
        Some(SlotKind::Eos) => mask[EOS] = true,
        Some(SlotKind::Char { .. }) => vocab.entries().for_each(|(id, _)| mask[id] = true),
        None => {}
    }
    mask
}

/// Characters allowed at `step` given the tokens generated so far (`partial`,
/// starting after BOS): tone must satisfy the template and, at the last
/// position of line 4, the rhyme group must match line 2's when known.
pub fn allowed_chars(
    step: usize,
    partial: &[Token],
    pattern: &TonePattern,
    lexicon: &ToneLexicon,
    vocab: &Vocabulary,
    policy: Policy,
) -> Vec<bool> {
    let genre = pattern.genre;
    let mut mask = structure_mask(genre, step, vocab);
    let Some(SlotKind::Char { line, pos }) = slot_at(genre, step) else {
        return mask;
    };
    let required = pattern.at(line, pos);
    let l = genre.line_len();
    let rhyme_target = if line == 3 && pos == l - 1 {
        // Line 2 ends at step 2(l+1) − 1, i.e. partial index 2l.
        partial
            .get(2 * l)
            .and_then(|&t| vocab.char_of(t))
            .map(|c| (c, lexicon.rhyme_group(c)))
    } else {
        None
    };
    for (id, c) in vocab.entries() {
        let mut ok = lexicon.satisfies(c, required, policy);
        if let (true, Some((line2_char, group))) = (ok, rhyme_target) {
            // Repeating line 2's final character always rhymes; without group
            // data that is the only safe choice under the strict policy.
            ok = c == line2_char
                || match (group, lexicon.rhyme_group(c)) {
                    (Some(a), Some(b)) => a == b,
                    _ => policy == Policy::Lenient,
                };
        }
        mask[id] = ok;
    }
    mask
}
