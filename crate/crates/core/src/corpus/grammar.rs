//! Weighted context-free grammar with a tagged bilingual lexicon.
//!
//! Sources are derived top-down from the start symbol; terminals are POS tags
//! (fine or coarse) realized by a uniformly chosen lexeme. Targets are built by
//! applying the first matching coarse-tag reordering pattern left to right and
//! then substituting each source word by its target phrase.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParallelPair, TagSchema, TaggedSentence, MAX_SOURCE_WORDS};
use crate::error::{Error, Result};
use crate::sections::Document;

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: String,
    pub rhs: Vec<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexeme {
    pub surface: String,
    pub cpos: String,
    pub fpos: String,
}

/// Coarse-tag pattern and the order (0-based) in which the matched words
/// appear on the target side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reorder {
    pub pattern: Vec<String>,
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarSpec {
    pub start: String,
    pub schema: TagSchema,
    pub rules: Vec<Rule>,
    pub lexicon: Vec<Lexeme>,
    /// Source surface → alternative target phrases.
    pub target_lexicon: BTreeMap<String, Vec<Vec<String>>>,
    pub reorder: Vec<Reorder>,
    /// Probability that the first word of both sides is capitalized.
    pub capitalize_rate: f64,
    /// Probability that a word of `digit_cpos` is realized as a digit string.
    pub digit_rate: f64,
    pub digit_cpos: String,
    pub max_words: usize,
}

/// How often each rule fired while generating a corpus, indexed like `rules`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RuleUsage {
    pub counts: Vec<u64>,
}

const DESK_GRAMMAR: &str = include_str!("../../data/desk.grammar");

impl GrammarSpec {
    /// The bundled German-like → English-like grammar used by the desk experiments.
    pub fn desk() -> Self {
        Self::parse("desk.grammar", DESK_GRAMMAR).expect("bundled grammar is valid")
    }

    pub fn parse(file: &str, text: &str) -> Result<Self> {
        let doc = Document::parse(file, text)?;
        let known = ["settings", "tags", "rules", "lexicon", "target_lexicon", "reorder"];
        for s in &doc.sections {
            if !known.contains(&s.name.as_str()) {
                return Err(Error::parse(file, s.line, format!("unknown section [{}]", s.name)));
            }
        }
        let need = |name: &str| {
            doc.section(name).ok_or_else(|| Error::parse(file, 0, format!("missing section [{name}]")))
        };

        let mut start = "S".to_string();
        let mut capitalize_rate = 0.0;
        let mut digit_rate = 0.0;
        let mut digit_cpos = "NUM".to_string();
        let mut max_words = MAX_SOURCE_WORDS;
        if let Some(settings) = doc.section("settings") {
            for e in &settings.entries {
                let (k, v) = e.key_value(file)?;
                let num = || v.parse::<f64>().map_err(|_| Error::parse(file, e.line, format!("`{k}` expects a number")));
                match k {
                    "start" => start = v.to_string(),
                    "capitalize_rate" => capitalize_rate = num()?,
                    "digit_rate" => digit_rate = num()?,
                    "digit_cpos" => digit_cpos = v.to_string(),
                    "max_words" => max_words = num()? as usize,
                    other => return Err(Error::parse(file, e.line, format!("unknown setting `{other}`"))),
                }
            }
        }

        let mut mapping = Vec::new();
        for e in &need("tags")?.entries {
            let (c, f) = e.key_value(file)?;
            mapping.push((c.to_string(), f.split_whitespace().map(str::to_string).collect()));
        }
        let schema = TagSchema::new(&mapping)?;

        let mut rules = Vec::new();
        for e in &need("rules")?.entries {
            let (lhs, rest) = e
                .text
                .split_once("->")
                .ok_or_else(|| Error::parse(file, e.line, "rule must look like `LHS -> A B : weight`"))?;
            let (rhs, weight) = match rest.rsplit_once(':') {
                Some((r, w)) => (
                    r,
                    w.trim().parse::<f64>().map_err(|_| Error::parse(file, e.line, "rule weight is not a number"))?,
                ),
                None => (rest, 1.0),
            };
            let rhs: Vec<String> = rhs.split_whitespace().map(str::to_string).collect();
            if rhs.is_empty() || weight <= 0.0 || !weight.is_finite() {
                return Err(Error::parse(file, e.line, "rule needs a non-empty right side and a positive weight"));
            }
            rules.push(Rule { lhs: lhs.trim().to_string(), rhs, weight });
        }

        let mut lexicon = Vec::new();
        for e in &need("lexicon")?.entries {
            let cols: Vec<&str> = e.text.split_whitespace().collect();
            let [surface, cpos, fpos] = cols.as_slice() else {
                return Err(Error::parse(file, e.line, "lexicon entry must be `surface CPOS FPOS`"));
            };
            match schema.coarse_of(fpos) {
                Some(c) if c == *cpos => {}
                Some(c) => {
                    return Err(Error::parse(file, e.line, format!("FPOS `{fpos}` refines `{c}`, not `{cpos}`")))
                }
                None => return Err(Error::parse(file, e.line, format!("unknown FPOS tag `{fpos}`"))),
            }
            lexicon.push(Lexeme { surface: surface.to_string(), cpos: cpos.to_string(), fpos: fpos.to_string() });
        }

        let mut target_lexicon: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for e in &need("target_lexicon")?.entries {
            let (src, tgt) = e.key_value(file)?;
            let alts: Vec<Vec<String>> = tgt
                .split('|')
                .map(|a| a.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .collect();
            if alts.iter().any(Vec::is_empty) {
                return Err(Error::parse(file, e.line, "empty target phrase"));
            }
            target_lexicon.entry(src.to_string()).or_default().extend(alts);
        }

        let mut reorder = Vec::new();
        if let Some(sec) = doc.section("reorder") {
            for e in &sec.entries {
                let (pat, ord) = e.key_value(file)?;
                let pattern: Vec<String> = pat.split_whitespace().map(str::to_string).collect();
                let order: Vec<usize> = ord
                    .split_whitespace()
                    .map(|t| t.parse::<usize>().ok().filter(|&i| i >= 1).map(|i| i - 1))
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::parse(file, e.line, "reorder positions are 1-based integers"))?;
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..pattern.len()).collect::<Vec<_>>() {
                    return Err(Error::parse(file, e.line, "reorder must be a permutation of the pattern positions"));
                }
                for p in &pattern {
                    if schema.cpos.index_of(p).is_none() {
                        return Err(Error::parse(file, e.line, format!("reorder pattern uses unknown CPOS `{p}`")));
                    }
                }
                reorder.push(Reorder { pattern, order });
            }
        }

        let spec = Self {
            start,
            schema,
            rules,
            lexicon,
            target_lexicon,
            reorder,
            capitalize_rate,
            digit_rate,
            digit_cpos,
            max_words,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn nonterminals(&self) -> BTreeSet<&str> {
        self.rules.iter().map(|r| r.lhs.as_str()).collect()
    }

    fn lexemes_for(&self, symbol: &str) -> Vec<usize> {
        self.lexicon
            .iter()
            .enumerate()
            .filter(|(_, l)| l.fpos == symbol || l.cpos == symbol)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks well-formedness: reachable start, non-empty lexicon, every
    /// symbol resolvable, every lexeme translatable.
    pub fn validate(&self) -> Result<()> {
        if self.lexicon.is_empty() {
            return Err(Error::Invalid("grammar has an empty lexicon".into()));
        }
        let nts = self.nonterminals();
        if !nts.contains(self.start.as_str()) {
            return Err(Error::Invalid(format!("start symbol `{}` has no rules", self.start)));
        }
        for r in &self.rules {
            for s in &r.rhs {
                if !nts.contains(s.as_str()) && self.lexemes_for(s).is_empty() {
                    return Err(Error::Invalid(format!("symbol `{s}` in rule for `{}` has no rules and no lexemes", r.lhs)));
                }
            }
        }
        for l in &self.lexicon {
            if !self.target_lexicon.contains_key(&l.surface) {
                return Err(Error::Invalid(format!("lexeme `{}` has no target mapping", l.surface)));
            }
        }
        for p in [self.capitalize_rate, self.digit_rate] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid("noise rates must lie in [0, 1]".into()));
            }
        }
        if self.max_words == 0 || self.max_words > MAX_SOURCE_WORDS {
            return Err(Error::Invalid(format!("max_words must be in 1..={MAX_SOURCE_WORDS}")));
        }
        Ok(())
    }

    fn expand(&self, symbol: &str, depth: usize, rng: &mut ChaCha8Rng, usage: &mut Vec<u64>, out: &mut Vec<usize>) -> bool {
        if depth > 64 || out.len() > self.max_words {
            return false;
        }
        let candidates: Vec<usize> = (0..self.rules.len()).filter(|&i| self.rules[i].lhs == symbol).collect();
        if candidates.is_empty() {
            let lex = self.lexemes_for(symbol);
            out.push(lex[rng.gen_range(0..lex.len())]);
            return true;
        }
        let total: f64 = candidates.iter().map(|&i| self.rules[i].weight).sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = *candidates.last().unwrap();
        for &i in &candidates {
            if pick < self.rules[i].weight {
                chosen = i;
                break;
            }
            pick -= self.rules[i].weight;
        }
        usage[chosen] += 1;
        for s in &self.rules[chosen].rhs {
            if !self.expand(s, depth + 1, rng, usage, out) {
                return false;
            }
        }
        true
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, usage: &mut [u64]) -> ParallelPair {
        loop {
            let mut local = vec![0u64; self.rules.len()];
            let mut lex = Vec::new();
            if !self.expand(&self.start, 0, rng, &mut local, &mut lex) || lex.len() > self.max_words {
                continue;
            }
            for (u, l) in usage.iter_mut().zip(local) {
                *u += l;
            }
            return self.realize(&lex, rng);
        }
    }

    fn realize(&self, lex: &[usize], rng: &mut ChaCha8Rng) -> ParallelPair {
        let mut words = Vec::with_capacity(lex.len());
        let mut phrases: Vec<Vec<String>> = Vec::with_capacity(lex.len());
        for &i in lex {
            let l = &self.lexicon[i];
            if l.cpos == self.digit_cpos && rng.gen::<f64>() < self.digit_rate {
                let n: u32 = rng.gen_range(2..10000);
                words.push(n.to_string());
                phrases.push(vec![n.to_string()]);
                continue;
            }
            let alts = &self.target_lexicon[&l.surface];
            let phrase = if alts.len() == 1 { alts[0].clone() } else { alts[rng.gen_range(0..alts.len())].clone() };
            words.push(l.surface.clone());
            phrases.push(phrase);
        }
        let cpos: Vec<String> = lex.iter().map(|&i| self.lexicon[i].cpos.clone()).collect();
        let fpos: Vec<String> = lex.iter().map(|&i| self.lexicon[i].fpos.clone()).collect();
        let order = self.target_order(&cpos);
        let mut target: Vec<String> = order.iter().flat_map(|&i| phrases[i].iter().cloned()).collect();
        if rng.gen::<f64>() < self.capitalize_rate {
            capitalize(&mut words[0]);
            capitalize(&mut target[0]);
        }
        ParallelPair { source: TaggedSentence { words, cpos, fpos }, target }
    }

    /// Source word order of the target side after applying reorder patterns.
    pub fn target_order(&self, cpos: &[String]) -> Vec<usize> {
        let mut order = Vec::with_capacity(cpos.len());
        let mut i = 0;
        'outer: while i < cpos.len() {
            for r in &self.reorder {
                let k = r.pattern.len();
                if i + k <= cpos.len() && cpos[i..i + k] == r.pattern[..] {
                    order.extend(r.order.iter().map(|&o| i + o));
                    i += k;
                    continue 'outer;
                }
            }
            order.push(i);
            i += 1;
        }
        order
    }
}

fn capitalize(word: &mut String) {
    let mut chars = word.chars();
    if let Some(first) = chars.next() {
        *word = first.to_uppercase().chain(chars).collect();
    }
}

/// Deterministic corpus of `count` pairs from `(grammar, seed)`.
pub fn generate_corpus(grammar: &GrammarSpec, count: usize, seed: u64) -> Result<Vec<ParallelPair>> {
    generate_corpus_traced(grammar, count, seed).map(|(p, _)| p)
}

/// Like [`generate_corpus`], also reporting how often each rule fired.
pub fn generate_corpus_traced(grammar: &GrammarSpec, count: usize, seed: u64) -> Result<(Vec<ParallelPair>, RuleUsage)> {
    if count == 0 {
        return Err(Error::Invalid("count must be positive".into()));
    }
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; grammar.rules.len()];
    let pairs = (0..count).map(|_| grammar.sentence(&mut rng, &mut counts)).collect();
    Ok((pairs, RuleUsage { counts }))
}
