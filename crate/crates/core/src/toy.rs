//! Seeded synthetic toy corpus: 20 five-char training quatrains over a
//! 56-character alphabet, three style sub-corpora of 5 poems each, a held-out
//! validation set, and a fully toned lexicon covering every character.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::ToneLexicon;
use crate::corpus::Poem;

pub const LEXICON_TSV: &str = include_str!("../data/lexicon/toy.tsv");

const COMMON: &str = "风云日夜人天归来不无长高一江秋白青千行远";
const PASTORAL: &str = "山水田园村溪柳桑麦牛樵渔";
const BATTLE: &str = "战马剑旗鼓兵戈关塞胡沙甲";
const ROMANTIC: &str = "花月情香罗裙泪梦红思春楼";

/// Share of characters drawn from a poem's own style alphabet.
const STYLE_SHARE: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    Pastoral,
    Battle,
    Romantic,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Pastoral, Style::Battle, Style::Romantic];

    pub fn name(self) -> &'static str {
        match self {
            Style::Pastoral => "pastoral",
            Style::Battle => "battle",
            Style::Romantic => "romantic",
        }
    }

    /// Characters exclusive to this style.
    pub fn alphabet(self) -> Vec<char> {
        match self {
            Style::Pastoral => PASTORAL,
            Style::Battle => BATTLE,
            Style::Romantic => ROMANTIC,
        }
        .chars()
        .collect()
    }

    /// Indices of this style's poems in [`train_corpus`].
    pub fn train_indices(self) -> std::ops::Range<usize> {
        let k = Style::ALL.iter().position(|&s| s == self).unwrap() * 5;
        k..k + 5
    }
}

pub fn alphabet() -> Vec<char> {
    [COMMON, PASTORAL, BATTLE, ROMANTIC]
        .concat()
        .chars()
        .collect()
}

fn styled_poem(rng: &mut ChaCha8Rng, style: Option<Style>) -> Poem {
    let common: Vec<char> = COMMON.chars().collect();
    let all = alphabet();
    let own = style.map(Style::alphabet);
    let lines: Vec<String> = (0..4)
        .map(|_| {
            (0..5)
                .map(|_| match &own {
                    Some(own) if rng.gen_bool(STYLE_SHARE) => *own.choose(rng).unwrap(),
                    Some(_) => *common.choose(rng).unwrap(),
                    None => *all.choose(rng).unwrap(),
                })
                .collect()
        })
        .collect();
    Poem::new(None, &lines).expect("toy poems are well formed")
}

/// Five general poems whose 100 slots start with a shuffled copy of the full
/// alphabet, so every character occurs in training.
fn general_poems(rng: &mut ChaCha8Rng) -> Vec<Poem> {
    let all = alphabet();
    let mut slots = all.clone();
    slots.shuffle(rng);
    while slots.len() < 100 {
        slots.push(*all.choose(rng).unwrap());
    }
    slots[56..].shuffle(rng);
    slots
        .chunks(20)
        .map(|c| {
            let lines: Vec<String> = c.chunks(5).map(|l| l.iter().collect()).collect();
            Poem::new(None, &lines).expect("toy poems are well formed")
        })
        .collect()
}

/// Poems 0-4 pastoral, 5-9 battle, 10-14 romantic, 15-19 general.
pub fn train_corpus() -> Vec<Poem> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70e7);
    let mut out = Vec::with_capacity(20);
    for style in Style::ALL {
        out.extend((0..5).map(|_| styled_poem(&mut rng, Some(style))));
    }
    out.extend(general_poems(&mut rng));
    out
}

/// Ten held-out poems from the same generator: two per style, four general.
pub fn validation_corpus() -> Vec<Poem> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a11d);
    let mut out = Vec::with_capacity(10);
    for style in Style::ALL {
        out.extend((0..2).map(|_| styled_poem(&mut rng, Some(style))));
    }
    out.extend((0..4).map(|_| styled_poem(&mut rng, None)));
    out
}

pub fn style_corpus(style: Style) -> Vec<Poem> {
    train_corpus()[style.train_indices()].to_vec()
}

/// `n` topics of two to four characters, drawn from the common alphabet so no
/// style is favoured.
pub fn topics(n: usize, seed: u64) -> Vec<Vec<char>> {
    let common: Vec<char> = COMMON.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..=4);
            (0..len)
                .map(|_| *common.choose(&mut rng).unwrap())
                .collect()
        })
        .collect()
}

pub fn lexicon() -> ToneLexicon {
    ToneLexicon::parse(LEXICON_TSV).expect("toy lexicon parses")
}
