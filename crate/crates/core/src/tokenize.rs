//! Word splitting, WordPiece-style sub-word segmentation, and the two
//! surface-derived labelers (word shape, sub-word position).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "##";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, BOS, EOS, MASK];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl SubwordVocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;
    pub const MASK_ID: usize = 4;

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Invalid(format!("vocabulary entry {i} is empty")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("vocabulary entry `{t}` appears twice")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if index.get(*s) != Some(&i) {
                return Err(Error::Invalid(format!("special token {s} must have id {i}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Vocab file text: `# ` header lines, then one token per line (line = id).
    pub fn render(&self) -> String {
        let mut out = format!("# specials: {}\n# continuation: {CONTINUATION}\n", SPECIALS.join(" "));
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split_terminator('\n').peekable();
        while lines.peek().is_some_and(|l| l.starts_with("# ")) {
            lines.next();
        }
        Self::from_tokens(lines.map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Smallest vocabulary that covers `words`' alphabet in both piece forms.
pub fn minimum_vocab_size<'a>(words: impl IntoIterator<Item = &'a str>) -> usize {
    let alphabet: BTreeSet<char> = words.into_iter().flat_map(str::chars).collect();
    SPECIALS.len() + 2 * alphabet.len()
}

/// Trains a vocabulary by repeatedly merging the most frequent adjacent
/// piece pair (ties: lexicographically smallest pair) until `target_size`
/// entries exist or no pair is left.
pub fn train_subword_vocab<'a>(words: impl IntoIterator<Item = &'a str>, target_size: usize) -> Result<SubwordVocab> {
    let mut order: Vec<&str> = Vec::new();
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for w in words {
        if w.is_empty() {
            continue;
        }
        let c = freq.entry(w).or_insert(0);
        if *c == 0 {
            order.push(w);
        }
        *c += 1;
    }
    if order.is_empty() {
        return Err(Error::Invalid("cannot train a vocabulary on an empty corpus".into()));
    }
    let alphabet: BTreeSet<char> = order.iter().flat_map(|w| w.chars()).collect();
    let minimum = SPECIALS.len() + 2 * alphabet.len();
    if target_size < minimum {
        return Err(Error::Invalid(format!(
            "target vocabulary size {target_size} is below the minimum feasible size {minimum} \
             ({} specials + 2 x {} characters)",
            SPECIALS.len(),
            alphabet.len()
        )));
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    tokens.extend(alphabet.iter().map(|c| format!("{CONTINUATION}{c}")));
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    let mut segmented: Vec<(Vec<String>, u64)> = order
        .iter()
        .map(|w| {
            let pieces = w
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                .collect();
            (pieces, freq[w])
        })
        .collect();

    while tokens.len() < target_size {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (pieces, f) in &segmented {
            for w in pieces.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += f;
            }
        }
        let Some(((left, right), _)) = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(&right));
        for (pieces, _) in &mut segmented {
            let mut i = 0;
            while i + 1 < pieces.len() {
                if pieces[i] == left && pieces[i + 1] == right {
                    pieces[i] = merged.clone();
                    pieces.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    SubwordVocab::from_tokens(tokens)
}

/// Splits on whitespace and detaches every non-alphanumeric character as
/// its own token.
pub fn word_tokenize(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in sentence.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Surface pattern: uppercase → `X`, other letters → `x`, digits → `d`,
/// everything else kept.
pub fn word_shape(token: &str) -> String {
    token
        .chars()
        .map(|c| {
            if c.is_uppercase() {
                'X'
            } else if c.is_alphabetic() {
                'x'
            } else if c.is_numeric() {
                'd'
            } else {
                c
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubwordPosition {
    Begin,
    Inside,
    Single,
}

impl SubwordPosition {
    pub const ALL: [SubwordPosition; 3] = [SubwordPosition::Begin, SubwordPosition::Inside, SubwordPosition::Single];

    pub fn as_str(self) -> &'static str {
        match self {
            SubwordPosition::Begin => "Begin",
            SubwordPosition::Inside => "Inside",
            SubwordPosition::Single => "Single",
        }
    }
}

impl fmt::Display for SubwordPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Position labels for the pieces of a single word.
pub fn subword_position_labels<T>(pieces: &[T]) -> Result<Vec<SubwordPosition>> {
    match pieces.len() {
        0 => Err(Error::Invalid("a word has at least one sub-word piece".into())),
        1 => Ok(vec![SubwordPosition::Single]),
        n => {
            let mut v = vec![SubwordPosition::Inside; n];
            v[0] = SubwordPosition::Begin;
            Ok(v)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subword {
    pub surface: String,
    pub id: usize,
    pub is_continuation: bool,
    pub word_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SubwordSequence {
    pub tokens: Vec<Subword>,
    pub swp: Vec<SubwordPosition>,
    pub shapes: Vec<String>,
}

impl SubwordSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn surfaces(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.surface.clone()).collect()
    }

    /// Index of the first piece of every word.
    pub fn word_starts(&self) -> Vec<usize> {
        let mut starts = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i == 0 || t.word_index != self.tokens[i - 1].word_index {
                starts.push(i);
            }
        }
        starts
    }

    /// Rebuilds a sequence (labels included) from raw vocabulary ids, e.g.
    /// decoder output. Word boundaries follow the continuation prefix.
    pub fn from_ids(ids: &[usize], vocab: &SubwordVocab) -> Self {
        let mut tokens = Vec::with_capacity(ids.len());
        let mut word = 0usize;
        for (i, &id) in ids.iter().enumerate() {
            let surface = vocab.token(id).to_string();
            let is_continuation = surface.starts_with(CONTINUATION);
            if i > 0 && !is_continuation {
                word += 1;
            }
            tokens.push(Subword { surface, id, is_continuation, word_index: word });
        }
        let mut seq = Self { tokens, swp: Vec::new(), shapes: Vec::new() };
        seq.relabel();
        seq
    }

    fn relabel(&mut self) {
        self.shapes = self.tokens.iter().map(|t| word_shape(&t.surface)).collect();
        self.swp.clear();
        let starts = self.word_starts();
        for (k, &s) in starts.iter().enumerate() {
            let end = starts.get(k + 1).copied().unwrap_or(self.tokens.len());
            self.swp.extend(subword_position_labels(&self.tokens[s..end]).expect("non-empty word"));
        }
    }
}

fn segment_word(word: &str, vocab: &SubwordVocab) -> Option<Vec<(String, usize)>> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            let body: String = chars[start..end].iter().collect();
            let piece = if start == 0 { body } else { format!("{CONTINUATION}{body}") };
            if let Some(id) = vocab.id(&piece) {
                found = Some((piece, id, end));
                break;
            }
        }
        let (piece, id, end) = found?;
        pieces.push((piece, id));
        start = end;
    }
    Some(pieces)
}

/// Greedy longest-prefix segmentation; a word with any uncovered character
/// becomes a single `[UNK]`.
pub fn subword_tokenize<S: AsRef<str>>(words: &[S], vocab: &SubwordVocab) -> SubwordSequence {
    let mut tokens = Vec::new();
    for (wi, w) in words.iter().enumerate() {
        match segment_word(w.as_ref(), vocab) {
            Some(pieces) if !pieces.is_empty() => {
                for (k, (surface, id)) in pieces.into_iter().enumerate() {
                    tokens.push(Subword { surface, id, is_continuation: k > 0, word_index: wi });
                }
            }
            _ => tokens.push(Subword {
                surface: UNK.to_string(),
                id: SubwordVocab::UNK_ID,
                is_continuation: false,
                word_index: wi,
            }),
        }
    }
    let mut seq = SubwordSequence { tokens, swp: Vec::new(), shapes: Vec::new() };
    seq.relabel();
    seq
}

/// Words recovered by merging continuation pieces into their head.
pub fn merge_pieces<S: AsRef<str>>(pieces: &[S]) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for p in pieces {
        let p = p.as_ref();
        match p.strip_prefix(CONTINUATION) {
            Some(rest) if !words.is_empty() => words.last_mut().unwrap().push_str(rest),
            Some(rest) => words.push(rest.to_string()),
            None => words.push(p.to_string()),
        }
    }
    words
}

pub fn detokenize(seq: &SubwordSequence) -> String {
    merge_pieces(&seq.surfaces()).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_run_merge_procedure() {
        // words: aa ×2, ab ×1; pairs (a,##a)=2 then (a,##b)=1.
        let v = train_subword_vocab("aa aa ab".split(' '), 100).unwrap();
        for t in ["a", "b", "##a", "##b", "aa", "ab"] {
            assert!(v.id(t).is_some(), "missing {t}");
        }
        assert_eq!(v.id("aa"), Some(9));
        assert_eq!(v.id("ab"), Some(10));
        assert_eq!(v.len(), 11);
    }

    #[test]
    fn minimum_size_is_character_only() {
        let v = train_subword_vocab("aa aa ab".split(' '), 9).unwrap();
        assert_eq!(v.len(), 9);
        assert!(v.id("aa").is_none());
        let err = train_subword_vocab("aa aa ab".split(' '), 8).unwrap_err().to_string();
        assert!(err.contains("minimum feasible size 9"), "{err}");
    }

    #[test]
    fn vocab_training_and_file_are_deterministic() {
        let text = "der hund sieht die katze und die katze sieht den hund";
        let a = train_subword_vocab(text.split(' '), 60).unwrap();
        let b = train_subword_vocab(text.split(' '), 60).unwrap();
        assert_eq!(a.render(), b.render());
        assert_eq!(SubwordVocab::parse(&a.render()).unwrap(), a);
    }

    #[test]
    fn word_tokenize_cases() {
        assert_eq!(word_tokenize("Hello, world!"), vec!["Hello", ",", "world", "!"]);
        assert!(word_tokenize("").is_empty());
        assert_eq!(word_tokenize("a  b"), vec!["a", "b"]);
    }

    #[test]
    fn shapes() {
        assert_eq!(word_shape("##arxiv."), "##xxxxx.");
        assert_eq!(word_shape("Ab3-"), "Xxd-");
        assert_eq!(word_shape(""), "");
        assert_eq!(word_shape("Größe"), "Xxxxx");
    }

    #[test]
    fn position_labels() {
        use SubwordPosition::*;
        assert_eq!(subword_position_labels(&[1]).unwrap(), vec![Single]);
        assert_eq!(subword_position_labels(&[1, 2]).unwrap(), vec![Begin, Inside]);
        assert_eq!(subword_position_labels(&[1, 2, 3]).unwrap(), vec![Begin, Inside, Inside]);
        assert!(subword_position_labels::<u8>(&[]).is_err());
    }

    fn vocab_with(extra: &[&str]) -> SubwordVocab {
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend(extra.iter().map(|s| s.to_string()));
        SubwordVocab::from_tokens(t).unwrap()
    }

    #[test]
    fn greedy_segmentation_and_unk() {
        use SubwordPosition::*;
        let v = vocab_with(&["play", "##ing", "p", "##l", "cat"]);
        let s = subword_tokenize(&["playing", "cat", "dog"], &v);
        assert_eq!(s.surfaces(), vec!["play", "##ing", "cat", UNK]);
        assert_eq!(s.swp, vec![Begin, Inside, Single, Single]);
        assert_eq!(s.tokens[3].id, SubwordVocab::UNK_ID);
        assert_eq!(s.shapes[1], "##xxx");
    }

    #[test]
    fn detokenize_cases() {
        let v = vocab_with(&["play", "##ing", "a", "##b", "c"]);
        assert_eq!(detokenize(&SubwordSequence::from_ids(&[5, 6], &v)), "playing");
        assert_eq!(detokenize(&SubwordSequence::from_ids(&[7, 8, 9], &v)), "ab c");
        assert_eq!(merge_pieces(&["##ab", "c"]), vec!["ab", "c"]);
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(sentence in "[a-cA-C1 ,.]{0,40}") {
            let words = word_tokenize(&sentence);
            let v = train_subword_vocab(
                "abc ABC aAbBcC 1 11 , .".split(' ').chain(words.iter().map(String::as_str)),
                40,
            ).unwrap();
            let seq = subword_tokenize(&words, &v);
            prop_assert_eq!(detokenize(&seq), words.join(" "));
            prop_assert_eq!(word_tokenize(&words.join(" ")), words.clone());
            for (t, lab) in seq.tokens.iter().zip(&seq.swp) {
                prop_assert_eq!(t.is_continuation, t.surface.starts_with(CONTINUATION));
                prop_assert_eq!(t.is_continuation, *lab == SubwordPosition::Inside);
            }
        }

        #[test]
        fn shape_alphabet_and_length(token in "\\PC{0,20}") {
            let s = word_shape(&token);
            prop_assert_eq!(s.chars().count(), token.chars().count());
            for (a, b) in token.chars().zip(s.chars()) {
                prop_assert!(matches!(b, 'x' | 'X' | 'd') || (!a.is_alphanumeric() && a == b));
            }
        }
    }
}
