//! Byte-pair-encoding tokenizer over lowercased, whitespace-collapsed text.
//!
//! Words are split into characters with an end-of-word marker glued to the
//! last one (`"low"` -> `l o w</w>`), then merged greedily by rule rank.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "[START]";
pub const END_TOKEN: &str = "[END]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";
const END_OF_WORD: &str = "</w>";
const FILE_HEADER: &str = "#copytrans-vocab v1";

/// Ids of the reserved tokens. They occupy the lowest ids of every vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub start: u32,
    pub end: u32,
    pub mask: u32,
    pub unk: u32,
}

impl SpecialIds {
    pub const RESERVED: SpecialIds = SpecialIds {
        start: 0,
        end: 1,
        mask: 2,
        unk: 3,
    };
    pub const COUNT: u32 = 4;

    pub fn is_special(&self, id: u32) -> bool {
        id < Self::COUNT
    }
}

/// What `encode` does with a character outside the trained alphabet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnkPolicy {
    /// Emit the `[UNK]` id for the whole word containing the character.
    #[default]
    Replace,
    /// Drop the offending word.
    Skip,
    /// Fail with a contract error.
    Error,
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut out: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
    if let Some(last) = out.last_mut() {
        last.push_str(END_OF_WORD);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    unk_policy: UnkPolicy,
}

impl Vocabulary {
    /// Symbols a corpus starts from before any merge: every character seen,
    /// both word-internal and word-final.
    pub fn base_symbols(corpus: &[String]) -> BTreeSet<String> {
        corpus
            .iter()
            .flat_map(|t| {
                normalize(t)
                    .chars()
                    .filter(|c| !c.is_whitespace())
                    .collect::<Vec<_>>()
            })
            .flat_map(|c| [c.to_string(), format!("{c}{END_OF_WORD}")])
            .collect()
    }

    /// Learns merges until the vocabulary reaches `target_size` or no pair
    /// occurs any more. Frequency ties go to the lexicographically smallest pair.
    pub fn train(corpus: &[String], target_size: usize) -> Result<Self> {
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in normalize(text).split(' ').filter(|w| !w.is_empty()) {
                *word_freq.entry(w.to_owned()).or_default() += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(Error::Config(
                "cannot train a vocabulary on an empty corpus".into(),
            ));
        }
        let base = Self::base_symbols(corpus);
        let minimum = base.len() + SpecialIds::COUNT as usize;
        if target_size <= minimum {
            return Err(Error::Config(format!(
                "target vocabulary size {target_size} must exceed {} base symbols + {} special tokens",
                base.len(),
                SpecialIds::COUNT
            )));
        }

        let mut tokens: Vec<String> = [START_TOKEN, END_TOKEN, MASK_TOKEN, UNK_TOKEN]
            .map(String::from)
            .to_vec();
        tokens.extend(base.iter().cloned());
        let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

        let mut words: Vec<(Vec<String>, usize)> = word_freq
            .iter()
            .map(|(w, &f)| (word_symbols(w), f))
            .collect();
        let mut merges = Vec::new();
        while tokens.len() < target_size {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (symbols, freq) in &words {
                for pair in symbols.windows(2) {
                    *counts
                        .entry((pair[0].as_str(), pair[1].as_str()))
                        .or_default() += freq;
                }
            }
            // BTreeMap iterates in lexicographic order, so keeping the first
            // maximum gives the tie-break for free.
            let mut best: Option<((&str, &str), usize)> = None;
            for (&pair, &count) in &counts {
                if best.is_none_or(|(_, c)| count > c) {
                    best = Some((pair, count));
                }
            }
            let Some(((left, right), _)) = best else {
                break;
            };
            let (left, right) = (left.to_owned(), right.to_owned());
            let merged = format!("{left}{right}");
            for (symbols, _) in &mut words {
                merge_in_place(symbols, &left, &right, &merged);
            }
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
            merges.push((left, right));
        }
        Ok(Self::from_parts(tokens, merges, UnkPolicy::default()))
    }

    fn from_parts(
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        unk_policy: UnkPolicy,
    ) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            merges,
            merge_rank,
            unk_policy,
        }
    }

    pub fn with_unk_policy(mut self, policy: UnkPolicy) -> Self {
        self.unk_policy = policy;
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds::RESERVED
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn encode_word(&self, word: &str) -> Option<Vec<u32>> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.merge_rank
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            let merged = format!("{left}{right}");
            merge_in_place(&mut symbols, left, right, &merged);
        }
        symbols.iter().map(|s| self.index.get(s).copied()).collect()
    }

    /// Encodes normalized `text`. Never yields START/END/MASK.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            match (self.encode_word(word), self.unk_policy) {
                (Some(w), _) => ids.extend(w),
                (None, UnkPolicy::Replace) => ids.push(SpecialIds::RESERVED.unk),
                (None, UnkPolicy::Skip) => {}
                (None, UnkPolicy::Error) => {
                    return Err(Error::Contract(format!(
                        "word {word:?} has characters outside the vocabulary"
                    )))
                }
            }
        }
        Ok(ids)
    }

    /// Decodes ids back to text. START/END/MASK render as nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id).ok_or_else(|| {
                Error::Contract(format!("id {id} outside vocabulary of {}", self.len()))
            })?;
            let specials = self.specials();
            if id == specials.unk {
                out.push_str("<unk> ");
            } else if !specials.is_special(id) {
                match token.strip_suffix(END_OF_WORD) {
                    Some(stem) => {
                        out.push_str(stem);
                        out.push(' ');
                    }
                    None => out.push_str(token),
                }
            }
        }
        Ok(out.trim_end().to_owned())
    }

    /// Plain-text form: header, `[tokens]` one per line in id order, `[merges]`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{FILE_HEADER}").unwrap();
        writeln!(s, "[tokens]").unwrap();
        for t in &self.tokens {
            writeln!(s, "{t}").unwrap();
        }
        writeln!(s, "[merges]").unwrap();
        for (a, b) in &self.merges {
            writeln!(s, "{a} {b}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("vocabulary file: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(FILE_HEADER) {
            return Err(bad("missing header"));
        }
        if lines.next() != Some("[tokens]") {
            return Err(bad("missing [tokens] section"));
        }
        let mut tokens = Vec::new();
        let mut in_merges = false;
        let mut merges = Vec::new();
        for line in lines {
            if !in_merges && line == "[merges]" {
                in_merges = true;
            } else if in_merges {
                let (a, b) = line
                    .split_once(' ')
                    .ok_or_else(|| bad(&format!("bad merge line {line:?}")))?;
                merges.push((a.to_owned(), b.to_owned()));
            } else {
                tokens.push(line.to_owned());
            }
        }
        let reserved = [START_TOKEN, END_TOKEN, MASK_TOKEN, UNK_TOKEN];
        if tokens.len() < reserved.len() || tokens.iter().zip(reserved).any(|(t, r)| t != r) {
            return Err(bad("special tokens must occupy the first ids"));
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(bad("duplicate token"));
        }
        Ok(Self::from_parts(tokens, merges, UnkPolicy::default()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            symbols[i] = merged.to_owned();
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn corpus() -> Vec<String> {
        [
            "A 23-month-old toddler who was reportedly abducted in Pennsylvania has been found dead",
            "Missing Pennsylvania toddler found dead",
            "Elizabeth was taken to the hospital",
            "Elizabeth was hospitalized",
        ]
        .map(String::from)
        .to_vec()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let base = Vocabulary::base_symbols(&["aaab aab".into()]).len();
        let vocab = Vocabulary::train(&["aaab aab".into()], base + 4 + 1).unwrap();
        assert_eq!(vocab.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        // "ab" and "cd" both occur once; ("a","b") sorts first.
        let corpus = vec!["cd ab".to_string()];
        let base = Vocabulary::base_symbols(&corpus).len();
        let vocab = Vocabulary::train(&corpus, base + 5).unwrap();
        assert_eq!(vocab.merges()[0], ("a".to_string(), "b</w>".to_string()));
    }

    #[test]
    fn empty_corpus_and_small_target_are_config_errors() {
        assert!(matches!(Vocabulary::train(&[], 100), Err(Error::Config(_))));
        assert!(matches!(
            Vocabulary::train(&["  ".into()], 100),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Vocabulary::train(&corpus(), 10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let a = Vocabulary::train(&corpus(), 120).unwrap();
        let b = Vocabulary::train(&corpus(), 120).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn round_trip_normalizes_case() {
        let vocab = Vocabulary::train(&corpus(), 120).unwrap();
        let ids = vocab.encode("Missing Pennsylvania toddler").unwrap();
        assert_eq!(vocab.decode(&ids).unwrap(), "missing pennsylvania toddler");
        assert!(vocab.encode("").unwrap().is_empty());
        assert!(ids.iter().all(|&id| !vocab.specials().is_special(id)));
    }

    #[test]
    fn unknown_characters_follow_policy() {
        let vocab = Vocabulary::train(&corpus(), 120).unwrap();
        let unk = vocab.specials().unk;
        assert_eq!(vocab.encode("toddler %%").unwrap().last(), Some(&unk));
        let skip = vocab.clone().with_unk_policy(UnkPolicy::Skip);
        assert_eq!(
            skip.decode(&skip.encode("toddler %%").unwrap()).unwrap(),
            "toddler"
        );
        let strict = vocab.with_unk_policy(UnkPolicy::Error);
        assert!(strict.encode("%%").is_err());
    }

    #[test]
    fn decode_rejects_unknown_ids() {
        let vocab = Vocabulary::train(&corpus(), 120).unwrap();
        assert!(matches!(
            vocab.decode(&[vocab.len() as u32]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn file_round_trip_reproduces_bijection() {
        let vocab = Vocabulary::train(&corpus(), 150).unwrap();
        let loaded = Vocabulary::from_text(&vocab.to_text()).unwrap();
        assert_eq!(loaded, vocab);
        assert!(Vocabulary::from_text("junk").is_err());
    }

    #[test]
    fn merges_never_produce_special_tokens() {
        let vocab = Vocabulary::train(&corpus(), 150).unwrap();
        for (i, t) in [START_TOKEN, END_TOKEN, MASK_TOKEN, UNK_TOKEN]
            .iter()
            .enumerate()
        {
            assert_eq!(vocab.id(t), Some(i as u32));
        }
        for (a, b) in vocab.merges() {
            assert!(vocab.id(&format!("{a}{b}")).unwrap() >= SpecialIds::COUNT);
        }
    }

    proptest! {
        #[test]
        fn round_trip_on_random_text(words in proptest::collection::vec("[a-hA-H]{1,7}", 0..12)) {
            let train: Vec<String> = vec![
                "abc defg hab cafe bead gag fed".into(),
                "ABCDEFGH hgfedcba".into(),
            ];
            let vocab = Vocabulary::train(&train, 60).unwrap();
            let text = words.join("   ");
            let ids = vocab.encode(&text).unwrap();
            prop_assert_eq!(vocab.decode(&ids).unwrap(), normalize(&text));
            prop_assert_eq!(vocab.encode(&text).unwrap(), ids);
        }
    }
}
