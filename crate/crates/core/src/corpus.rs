//! Quatrain corpora: loading, frequency filtering, vocabulary, token encoding
//! and train/validation splits.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = usize;

pub const BOS: Token = 0;
pub const EOS: Token = 1;
pub const SEP: Token = 2;
pub const UNK: Token = 3;
pub const NUM_SPECIALS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Genre {
    #[serde(rename = "five")]
    FiveChar,
    #[serde(rename = "seven")]
    SevenChar,
}

impl Genre {
    pub fn line_len(self) -> usize {
        match self {
            Genre::FiveChar => 5,
            Genre::SevenChar => 7,
        }
    }

    pub fn from_line_len(n: usize) -> Option<Genre> {
        match n {
            5 => Some(Genre::FiveChar),
            7 => Some(Genre::SevenChar),
            _ => None,
        }
    }

    /// Length of an encoded poem: BOS, four lines each closed by SEP, EOS.
    pub fn encoded_len(self) -> usize {
        4 * self.line_len() + 6
    }

    pub fn name(self) -> &'static str {
        match self {
            Genre::FiveChar => "five",
            Genre::SevenChar => "seven",
        }
    }
}

impl std::str::FromStr for Genre {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "five" | "five-char" | "5" => Ok(Genre::FiveChar),
            "seven" | "seven-char" | "7" => Ok(Genre::SevenChar),
            other => Err(Error::config(format!("unknown genre {other:?}"))),
        }
    }
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A quatrain: four lines, all five or all seven characters long.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Poem {
    title: Option<String>,
    lines: Vec<Vec<char>>,
    genre: Genre,
}

impl Poem {
    pub fn new<S: AsRef<str>>(title: Option<String>, lines: &[S]) -> Result<Self> {
        if lines.len() != 4 {
            return Err(Error::data(format!(
                "expected 4 lines, got {}",
                lines.len()
            )));
        }
        let lines: Vec<Vec<char>> = lines.iter().map(|l| l.as_ref().chars().collect()).collect();
        let genre = Genre::from_line_len(lines[0].len()).ok_or_else(|| {
            Error::data(format!(
                "line 1 has {} characters, expected 5 or 7",
                lines[0].len()
            ))
        })?;
        for (i, line) in lines.iter().enumerate() {
            if line.len() != genre.line_len() {
                return Err(Error::data(format!(
                    "line {} has {} characters, expected {}",
                    i + 1,
                    line.len(),
                    genre.line_len()
                )));
            }
            if let Some(c) = line.iter().find(|c| c.is_whitespace() || c.is_control()) {
                return Err(Error::data(format!(
                    "line {} contains non-text character {c:?}",
                    i + 1
                )));
            }
        }
        Ok(Poem {
            title,
            lines,
            genre,
        })
    }

    pub fn title(&self) -> Option<&str> {
        self.title.as_deref()
    }

    pub fn genre(&self) -> Genre {
        self.genre
    }

    pub fn lines(&self) -> &[Vec<char>] {
        &self.lines
    }

    pub fn line(&self, i: usize) -> &[char] {
        &self.lines[i]
    }

    pub fn line_string(&self, i: usize) -> String {
        self.lines[i].iter().collect()
    }

    /// All characters, line by line.
    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.lines.iter().flatten().copied()
    }

    /// The four lines joined with `sep`.
    pub fn text(&self, sep: &str) -> String {
        (0..4)
            .map(|i| self.line_string(i))
            .collect::<Vec<_>>()
            .join(sep)
    }

    fn record(&self) -> CorpusRecord {
        CorpusRecord {
            title: self.title.clone(),
            lines: (0..4).map(|i| self.line_string(i)).collect(),
        }
    }
}

impl fmt::Display for Poem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text("\n"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CorpusRecord {
    #[serde(default)]
    title: Option<String>,
    lines: Vec<String>,
}

/// A record that could not be turned into a [`Poem`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number in the corpus file.
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}", self.line, self.reason)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadedCorpus {
    pub poems: Vec<Poem>,
    pub rejections: Vec<Rejection>,
}

impl LoadedCorpus {
    /// Rejection report: one `<line-number>\t<reason>` line per rejected record.
    pub fn rejection_report(&self) -> String {
        self.rejections.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Parses JSON-lines corpus text. Blank lines are skipped; every other line is
/// either a poem or a rejection.
pub fn parse_corpus(text: &str) -> LoadedCorpus {
    let mut out = LoadedCorpus::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<CorpusRecord>(line)
            .map_err(|e| Error::data(format!("invalid JSON: {e}")))
            .and_then(|rec| Poem::new(rec.title, &rec.lines));
        match parsed {
            Ok(p) => out.poems.push(p),
            Err(e) => out.rejections.push(Rejection {
                line: i + 1,
                reason: match e {
                    Error::Data(m) => m,
                    other => other.to_string(),
                },
            }),
        }
    }
    out
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_corpus(&text))
}

/// Serializes poems in the JSON-lines corpus format.
pub fn corpus_to_jsonl(poems: &[Poem]) -> String {
    let mut out = String::new();
    for p in poems {
        out.push_str(&serde_json::to_string(&p.record()).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, poems: &[Poem]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, corpus_to_jsonl(poems)).map_err(|e| Error::io(path, e))
}

/// Topics sidecar: one topic per line, aligned with corpus records.
pub fn load_topics(path: impl AsRef<Path>) -> Result<Vec<Vec<char>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.chars().filter(|c| !c.is_whitespace()).collect())
        .collect())
}

pub fn char_counts(poems: &[Poem]) -> BTreeMap<char, usize> {
    let mut counts = BTreeMap::new();
    for c in poems.iter().flat_map(Poem::chars) {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RareMode {
    /// Drop a poem only if every one of its characters is rare.
    #[default]
    AllRare,
    /// Drop a poem if any of its characters is rare.
    AnyRare,
}

pub const DEFAULT_RARE_THRESHOLD: usize = 100;

/// Removes poems made of low-frequency characters (count < `threshold` over `poems`).
pub fn filter_low_frequency(poems: &[Poem], threshold: usize, mode: RareMode) -> Vec<Poem> {
    let counts = char_counts(poems);
    let rare = |c: char| counts[&c] < threshold;
    poems
        .iter()
        .filter(|p| match mode {
            RareMode::AllRare => !p.chars().all(rare),
            RareMode::AnyRare => !p.chars().any(rare),
        })
        .cloned()
        .collect()
}

/// Character ↔ id map. Ids 0-3 are BOS, EOS, SEP, UNK; characters follow in
/// descending count order, ties broken by code point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    chars: Vec<char>,
    counts: Vec<usize>,
    #[serde(skip)]
    index: HashMap<char, Token>,
}

impl Vocabulary {
    /// Builds a vocabulary from `(char, count)` pairs already in id order.
    pub fn from_entries(entries: Vec<(char, usize)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, &(c, _)) in entries.iter().enumerate() {
            if index.insert(c, NUM_SPECIALS + i).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry {c:?}")));
            }
        }
        let (chars, counts) = entries.into_iter().unzip();
        Ok(Vocabulary {
            chars,
            counts,
            index,
        })
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, NUM_SPECIALS + i))
            .collect();
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        NUM_SPECIALS + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Token {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn char_of(&self, id: Token) -> Option<char> {
        id.checked_sub(NUM_SPECIALS)
            .and_then(|i| self.chars.get(i))
            .copied()
    }

    pub fn count_of(&self, id: Token) -> Option<usize> {
        id.checked_sub(NUM_SPECIALS)
            .and_then(|i| self.counts.get(i))
            .copied()
    }

    pub fn is_special(id: Token) -> bool {
        id < NUM_SPECIALS
    }

    /// `(id, char)` for every non-special entry.
    pub fn entries(&self) -> impl Iterator<Item = (Token, char)> + '_ {
        self.chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (NUM_SPECIALS + i, c))
    }

    pub fn token_name(&self, id: Token) -> String {
        match id {
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            SEP => "<sep>".into(),
            UNK => "<unk>".into(),
            _ => self
                .char_of(id)
                .map(String::from)
                .unwrap_or_else(|| format!("<{id}>")),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Vocabulary =
            serde_json::from_str(text).map_err(|e| Error::data(format!("vocabulary: {e}")))?;
        if v.chars.len() != v.counts.len() {
            return Err(Error::data("vocabulary chars and counts differ in length"));
        }
        v.rebuild_index();
        if v.index.len() != v.chars.len() {
            return Err(Error::data("vocabulary contains duplicate characters"));
        }
        Ok(v)
    }
}

pub fn build_vocab(poems: &[Poem], min_count: usize) -> Result<Vocabulary> {
    if poems.is_empty() {
        return Err(Error::usage(
            "cannot build a vocabulary from an empty corpus",
        ));
    }
    let mut entries: Vec<(char, usize)> = char_counts(poems)
        .into_iter()
        .filter(|&(_, n)| n >= min_count)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Vocabulary::from_entries(entries)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPoem {
    pub tokens: Vec<Token>,
    pub poem_index: Option<usize>,
}

/// `BOS l1 SEP l2 SEP l3 SEP l4 SEP EOS`: every line is closed by a separator,
/// three of them interior.
pub fn encode_poem(poem: &Poem, vocab: &Vocabulary) -> EncodedPoem {
    let mut tokens = Vec::with_capacity(poem.genre().encoded_len());
    tokens.push(BOS);
    for line in poem.lines() {
        tokens.extend(line.iter().map(|&c| vocab.id(c)));
        tokens.push(SEP);
    }
    tokens.push(EOS);
    EncodedPoem {
        tokens,
        poem_index: None,
    }
}

pub fn encode_topic(topic: &[char], vocab: &Vocabulary) -> Vec<Token> {
    topic.iter().map(|&c| vocab.id(c)).collect()
}

/// Inverse of [`encode_poem`]. The sequence must start with BOS, end with `SEP EOS`
/// and hold four equal-length lines each closed by SEP.
pub fn decode_tokens(ids: &[Token], vocab: &Vocabulary) -> Result<Poem> {
    let structure = |m: String| Error::Structure(m);
    if ids.first() != Some(&BOS) {
        return Err(structure("sequence does not start with BOS".into()));
    }
    if ids.len() < 2 || ids.last() != Some(&EOS) {
        return Err(structure("sequence does not end with EOS".into()));
    }
    let body = &ids[1..ids.len() - 1];
    if body.last() != Some(&SEP) {
        return Err(structure("last line is not closed by SEP".into()));
    }
    let body = &body[..body.len() - 1];
    let mut lines: Vec<String> = vec![String::new()];
    for (pos, &id) in body.iter().enumerate() {
        match id {
            SEP => lines.push(String::new()),
            BOS | EOS => {
                return Err(structure(format!(
                    "{} at position {}",
                    vocab.token_name(id),
                    pos + 1
                )))
            }
            UNK => return Err(structure(format!("unknown token at position {}", pos + 1))),
            _ => {
                let c = vocab
                    .char_of(id)
                    .ok_or_else(|| structure(format!("token id {id} outside vocabulary")))?;
                lines.last_mut().expect("non-empty").push(c);
            }
        }
    }
    if lines.len() != 4 {
        return Err(structure(format!(
            "{} separators, expected 3",
            lines.len() - 1
        )));
    }
    Poem::new(None, &lines).map_err(|e| match e {
        Error::Data(m) => Error::Structure(m),
        other => other,
    })
}

/// Deterministic shuffle-split. Each side keeps the original corpus order.
pub fn split_train_validation(
    poems: &[Poem],
    train_count: usize,
    seed: u64,
) -> Result<(Vec<Poem>, Vec<Poem>)> {
    if train_count > poems.len() {
        return Err(Error::usage(format!(
            "train count {train_count} exceeds corpus size {}",
            poems.len()
        )));
    }
    let mut order: Vec<usize> = (0..poems.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; poems.len()];
    order[..train_count]
        .iter()
        .for_each(|&i| in_train[i] = true);
    let (train, valid): (Vec<_>, Vec<_>) = poems.iter().zip(&in_train).partition(|(_, &t)| t);
    Ok((
        train.into_iter().map(|(p, _)| p.clone()).collect(),
        valid.into_iter().map(|(p, _)| p.clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn poem(lines: [&str; 4]) -> Poem {
        Poem::new(None, &lines).unwrap()
    }

    fn table1() -> Poem {
        poem(["向晚意不适", "驱车登古原", "夕阳无限好", "只是近黄昏"])
    }

    #[test]
    fn parse_single_valid_record() {
        let c = parse_corpus(
            r#"{"title":"乐游原","lines":["向晚意不适","驱车登古原","夕阳无限好","只是近黄昏"]}"#,
        );
        assert_eq!(c.poems.len(), 1);
        assert!(c.rejections.is_empty());
        assert_eq!(c.poems[0].title(), Some("乐游原"));
        assert_eq!(c.poems[0].genre(), Genre::FiveChar);
    }

    #[test]
    fn parse_empty_text() {
        let c = parse_corpus("");
        assert!(c.poems.is_empty() && c.rejections.is_empty());
    }

    #[test]
    fn three_line_record_is_rejected_with_its_line_number() {
        let text = "\n{\"lines\":[\"向晚意不适\",\"驱车登古原\",\"夕阳无限好\"]}\n";
        let c = parse_corpus(text);
        assert!(c.poems.is_empty());
        assert_eq!(c.rejections.len(), 1);
        assert_eq!(c.rejections[0].line, 2);
        assert!(c.rejection_report().starts_with("2\texpected 4 lines"));
    }

    #[test]
    fn mixed_lengths_and_bad_json_are_rejected() {
        let text =
            "{\"lines\":[\"向晚意不适\",\"驱车登古原\",\"夕阳无限\",\"只是近黄昏\"]}\nnot json\n";
        let c = parse_corpus(text);
        assert_eq!(
            c.rejections.iter().map(|r| r.line).collect::<Vec<_>>(),
            vec![1, 2]
        );
    }

    #[test]
    fn load_missing_file_is_io_error() {
        assert!(matches!(
            load_corpus("/nonexistent/corpus.jsonl"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn filter_keeps_frequent_corpus() {
        let p = poem(["aaaaa", "aaaaa", "aaaaa", "aaaaa"]);
        let corpus = vec![p; 5];
        assert_eq!(
            filter_low_frequency(&corpus, 100, RareMode::AllRare),
            corpus
        );
    }

    #[test]
    fn filter_removes_single_poem() {
        assert!(filter_low_frequency(&[table1()], 100, RareMode::AllRare).is_empty());
    }

    #[test]
    fn filter_removes_exactly_the_all_rare_poem() {
        let common = poem(["aaaab", "aaaab", "aaaab", "aaaab"]);
        let mixed = poem(["aaaaz", "aaaay", "aaaax", "aaaaw"]);
        let rare = poem(["qrstu", "vwxyz", "klmno", "fghij"]);
        let corpus = vec![common.clone(), mixed.clone(), rare.clone()];
        let threshold = 3;
        // Recount oracle: keep a poem iff at least one of its chars occurs ≥ threshold times.
        let all: String = corpus.iter().map(|p| p.text("")).collect();
        let keep: Vec<Poem> = corpus
            .iter()
            .filter(|p| {
                p.chars()
                    .any(|c| all.chars().filter(|&d| d == c).count() >= threshold)
            })
            .cloned()
            .collect();
        assert_eq!(keep, vec![common.clone(), mixed.clone()]);
        assert_eq!(
            filter_low_frequency(&corpus, threshold, RareMode::AllRare),
            keep
        );
        assert_eq!(
            filter_low_frequency(&corpus, threshold, RareMode::AnyRare),
            vec![common]
        );
    }

    #[test]
    fn vocab_sizes_and_ordering() {
        let p = poem(["abcde", "fghij", "klmno", "pqrst"]);
        let v = build_vocab(&[p], 1).unwrap();
        assert_eq!(v.len(), 24);
        assert!(build_vocab(&[], 1).is_err());

        let p1 = poem(["ccccc", "bbbbb", "bbbaa", "zzzzz"]);
        let v = build_vocab(&[p1], 1).unwrap();
        let order: String = v.entries().map(|(_, c)| c).collect();
        assert_eq!(order, "bcza");
        assert_eq!(v.id('b'), 4);
        assert_eq!(v.count_of(4), Some(8));
    }

    #[test]
    fn vocab_ranking_matches_independent_count() {
        let corpus = vec![
            table1(),
            poem(["白日依山尽", "黄河入海流", "欲穷千里目", "更上一层楼"]),
            poem(["春眠不觉晓", "处处闻啼鸟", "夜来风雨声", "花落知多少"]),
        ];
        let v = build_vocab(&corpus, 1).unwrap();
        let text: Vec<char> = corpus
            .iter()
            .flat_map(|p| p.chars().collect::<Vec<_>>())
            .collect();
        let mut expected: Vec<(usize, char)> = Vec::new();
        for &c in &text {
            if !expected.iter().any(|&(_, d)| d == c) {
                expected.push((text.iter().filter(|&&d| d == c).count(), c));
            }
        }
        expected.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let got: Vec<(usize, char)> = v
            .entries()
            .map(|(id, c)| (v.count_of(id).unwrap(), c))
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn min_count_sends_rare_chars_to_unk() {
        let corpus = vec![
            table1(),
            table1(),
            poem(["白日依山尽", "黄河入海流", "欲穷千里目", "更上一层楼"]),
        ];
        let v = build_vocab(&corpus, 2).unwrap();
        assert_eq!(v.id('白'), UNK);
        assert_ne!(v.id('向'), UNK);
    }

    #[test]
    fn encoded_lengths() {
        let v = build_vocab(&[table1()], 1).unwrap();
        let e = encode_poem(&table1(), &v);
        assert_eq!(e.tokens.len(), 26);
        let seps: Vec<usize> = (0..26).filter(|&i| e.tokens[i] == SEP).collect();
        assert_eq!(seps, vec![6, 12, 18, 24]);
        assert_eq!(e.tokens[25], EOS);
        let seven = poem([
            "朝辞白帝彩云间",
            "千里江陵一日还",
            "两岸猿声啼不住",
            "轻舟已过万重山",
        ]);
        let v = build_vocab(&[seven.clone()], 1).unwrap();
        assert_eq!(encode_poem(&seven, &v).tokens.len(), 34);
    }

    #[test]
    fn decode_rejects_bad_structure() {
        let v = build_vocab(&[table1()], 1).unwrap();
        let good = encode_poem(&table1(), &v).tokens;
        assert_eq!(
            decode_tokens(&good, &v).unwrap().text("|"),
            table1().text("|")
        );

        let mut moved = good.clone();
        moved.swap(6, 5); // SEP one position early
        assert!(matches!(
            decode_tokens(&moved, &v),
            Err(Error::Structure(_))
        ));
        let mut early_eos = good.clone();
        early_eos[7] = EOS;
        assert!(matches!(
            decode_tokens(&early_eos, &v),
            Err(Error::Structure(_))
        ));
        assert!(decode_tokens(&good[1..], &v).is_err());
        let mut unclosed = good.clone();
        unclosed.remove(24);
        assert!(matches!(
            decode_tokens(&unclosed, &v),
            Err(Error::Structure(_))
        ));
        assert!(decode_tokens(&good[..good.len() - 1], &v).is_err());
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = build_vocab(&[table1()], 1).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id('晚'), v.id('晚'));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let p = table1();
        let corpus = vec![p; 9195];
        let (t, v) = split_train_validation(&corpus, 9000, 1).unwrap();
        assert_eq!((t.len(), v.len()), (9000, 195));
        let (t, v) = split_train_validation(&corpus, 9195, 1).unwrap();
        assert_eq!((t.len(), v.len()), (9195, 0));
        assert!(split_train_validation(&corpus, 9196, 1).is_err());
    }

    fn arb_poem(alphabet: &'static [char]) -> impl Strategy<Value = Poem> {
        prop_oneof![Just(5usize), Just(7usize)].prop_flat_map(move |n| {
            prop::collection::vec(prop::collection::vec(prop::sample::select(alphabet), n), 4)
                .prop_map(|lines| {
                    let lines: Vec<String> =
                        lines.into_iter().map(|l| l.into_iter().collect()).collect();
                    Poem::new(None, &lines).unwrap()
                })
        })
    }

    const ALPHABET: &[char] = &['山', '水', '风', '月', '花', '人', '天', '云', 'a', 'b'];

    proptest! {
        #[test]
        fn encode_decode_identity(poem in arb_poem(ALPHABET)) {
            let v = build_vocab(std::slice::from_ref(&poem), 1).unwrap();
            let enc = encode_poem(&poem, &v);
            prop_assert_eq!(enc.tokens.len(), 4 * poem.genre().line_len() + 6);
            prop_assert_eq!(enc.tokens[0], BOS);
            prop_assert_eq!(*enc.tokens.last().unwrap(), EOS);
            let n = enc.tokens.len();
            prop_assert_eq!(enc.tokens[1..n - 2].iter().filter(|&&t| t == SEP).count(), 3);
            prop_assert_eq!(enc.tokens.iter().filter(|&&t| t == BOS || t == EOS).count(), 2);
            prop_assert_eq!(decode_tokens(&enc.tokens, &v).unwrap(), poem);
        }

        #[test]
        fn all_rare_filter_is_idempotent(
            corpus in prop::collection::vec(arb_poem(ALPHABET), 0..12),
            threshold in 1usize..30,
        ) {
            let once = filter_low_frequency(&corpus, threshold, RareMode::AllRare);
            prop_assert_eq!(filter_low_frequency(&once, threshold, RareMode::AllRare), once);
        }

        #[test]
        fn vocab_is_permutation_invariant(
            corpus in prop::collection::vec(arb_poem(ALPHABET), 1..8),
            seed in any::<u64>(),
        ) {
            let mut shuffled = corpus.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(build_vocab(&corpus, 1).unwrap(), build_vocab(&shuffled, 1).unwrap());
        }

        #[test]
        fn split_is_disjoint_and_exhaustive(n in 0usize..40, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let corpus: Vec<Poem> = (0..n)
                .map(|i| {
                    let c = char::from_u32(0x4e00 + i as u32).unwrap();
                    let line: String = std::iter::repeat(c).take(5).collect();
                    Poem::new(None, &[&line, &line, &line, &line]).unwrap()
                })
                .collect();
            let k = ((n as f64) * frac) as usize;
            let (t, v) = split_train_validation(&corpus, k, seed).unwrap();
            prop_assert_eq!(t.len(), k);
            let mut all: Vec<Poem> = t.iter().chain(&v).cloned().collect();
            all.sort_by_key(|p| p.line(0)[0]);
            prop_assert_eq!(all, corpus.clone());
            prop_assert_eq!(split_train_validation(&corpus, k, seed).unwrap().0, t);
        }
    }
}
