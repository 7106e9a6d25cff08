//! Gold-tagged parallel corpora: domain types, canonical file formats, and
//! the synthetic grammar generator in [`grammar`].

pub mod grammar;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use grammar::{generate_corpus, generate_corpus_traced, GrammarSpec, RuleUsage};

/// Longest source sentence (in words) any pair may have.
pub const MAX_SOURCE_WORDS: usize = 100;

/// One aspect and its ordered tag inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AspectSpec {
    pub name: String,
    pub tags: Vec<String>,
}

impl AspectSpec {
    pub fn new(name: impl Into<String>, tags: Vec<String>) -> Result<Self> {
        let name = name.into();
        if tags.is_empty() {
            return Err(Error::Invalid(format!("aspect {name} has an empty tag set")));
        }
        let mut seen = HashSet::new();
        for t in &tags {
            if !seen.insert(t) {
                return Err(Error::Invalid(format!("aspect {name} repeats tag {t}")));
            }
        }
        Ok(Self { name, tags })
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Coarse and fine part-of-speech inventories plus the fine→coarse map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSchema {
    pub cpos: AspectSpec,
    pub fpos: AspectSpec,
    fine_to_coarse: BTreeMap<String, String>,
}

impl TagSchema {
    /// `mapping` lists each coarse tag with the fine tags refining it.
    pub fn new(mapping: &[(String, Vec<String>)]) -> Result<Self> {
        let mut fine_to_coarse = BTreeMap::new();
        let mut fine = Vec::new();
        for (coarse, fines) in mapping {
            if fines.is_empty() {
                return Err(Error::Invalid(format!("coarse tag {coarse} has no fine tags")));
            }
            for f in fines {
                if fine_to_coarse.insert(f.clone(), coarse.clone()).is_some() {
                    return Err(Error::Invalid(format!("fine tag {f} maps to more than one coarse tag")));
                }
                fine.push(f.clone());
            }
        }
        Ok(Self {
            cpos: AspectSpec::new("CPOS", mapping.iter().map(|(c, _)| c.clone()).collect())?,
            fpos: AspectSpec::new("FPOS", fine)?,
            fine_to_coarse,
        })
    }

    pub fn coarse_of(&self, fine: &str) -> Option<&str> {
        self.fine_to_coarse.get(fine).map(String::as_str)
    }

    /// Canonical one-line-per-coarse-tag rendering, `CPOS = FPOS FPOS ...`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.cpos.tags {
            let fines: Vec<&str> = self
                .fpos
                .tags
                .iter()
                .filter(|f| self.fine_to_coarse[*f] == *c)
                .map(String::as_str)
                .collect();
            let _ = writeln!(out, "{c} = {}", fines.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut mapping = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (c, f) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("bad tag schema line `{line}`")))?;
            mapping.push((c.trim().to_string(), f.split_whitespace().map(str::to_string).collect()));
        }
        Self::new(&mapping)
    }
}

/// Source sentence with per-word coarse and fine POS tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub cpos: Vec<String>,
    pub fpos: Vec<String>,
}

impl TaggedSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn validate(&self, schema: &TagSchema) -> Result<()> {
        if self.cpos.len() != self.words.len() || self.fpos.len() != self.words.len() {
            return Err(Error::Invalid("tag lists must have one tag per word".into()));
        }
        for ((w, c), f) in self.words.iter().zip(&self.cpos).zip(&self.fpos) {
            check_tags(schema, w, c, f).map_err(Error::Invalid)?;
        }
        Ok(())
    }
}

fn check_tags(schema: &TagSchema, word: &str, cpos: &str, fpos: &str) -> std::result::Result<(), String> {
    if schema.cpos.index_of(cpos).is_none() {
        return Err(format!("unknown CPOS tag `{cpos}` on token `{word}`"));
    }
    match schema.coarse_of(fpos) {
        None => Err(format!("unknown FPOS tag `{fpos}` on token `{word}`")),
        Some(c) if c != cpos => Err(format!("FPOS tag `{fpos}` refines `{c}`, not `{cpos}` (token `{word}`)")),
        Some(_) => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: TaggedSentence,
    pub target: Vec<String>,
}

impl ParallelPair {
    pub fn validate(&self, schema: &TagSchema) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::Invalid("both sides of a pair must be non-empty".into()));
        }
        if self.source.len() > MAX_SOURCE_WORDS {
            return Err(Error::Invalid(format!("source exceeds {MAX_SOURCE_WORDS} words")));
        }
        self.source.validate(schema)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Plain,
    TaggedTsv,
    Parallel,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Format::Plain),
            "tagged-tsv" => Ok(Format::TaggedTsv),
            "parallel" => Ok(Format::Parallel),
            other => Err(Error::Invalid(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// An in-memory corpus in one of the three file formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Corpus {
    Plain(Vec<Vec<String>>),
    Tagged(Vec<TaggedSentence>),
    Parallel(Vec<(Vec<String>, Vec<String>)>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Plain(s) => s.len(),
            Corpus::Tagged(s) => s.len(),
            Corpus::Parallel(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn format(&self) -> Format {
        match self {
            Corpus::Plain(_) => Format::Plain,
            Corpus::Tagged(_) => Format::TaggedTsv,
            Corpus::Parallel(_) => Format::Parallel,
        }
    }

    pub fn from_pairs_tagged(pairs: &[ParallelPair]) -> Self {
        Corpus::Tagged(pairs.iter().map(|p| p.source.clone()).collect())
    }

    pub fn from_pairs_parallel(pairs: &[ParallelPair]) -> Self {
        Corpus::Parallel(pairs.iter().map(|p| (p.source.words.clone(), p.target.clone())).collect())
    }
}

/// The `.src` and `.tgt` paths of a parallel corpus stem.
pub fn parallel_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".src"), with(".tgt"))
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| {
        let line = 1 + e.as_bytes()[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count();
        Error::parse(path.display().to_string(), line, "invalid UTF-8")
    })
}

fn parse_plain(name: &str, text: &str) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for (i, line) in text.split_terminator('\n').enumerate() {
        if line.contains('\r') {
            return Err(Error::parse(name, i + 1, "CR characters are not allowed (LF line endings only)"));
        }
        out.push(line.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect());
    }
    Ok(out)
}

fn parse_tagged(name: &str, text: &str, schema: &TagSchema) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    let mut cur = TaggedSentence { words: vec![], cpos: vec![], fpos: vec![] };
    for (i, line) in text.split_terminator('\n').enumerate() {
        let ln = i + 1;
        if line.is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::replace(&mut cur, TaggedSentence { words: vec![], cpos: vec![], fpos: vec![] }));
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(name, ln, format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        if cols[0].is_empty() || cols[0].contains(char::is_whitespace) {
            return Err(Error::parse(name, ln, "token must be non-empty and contain no whitespace"));
        }
        check_tags(schema, cols[0], cols[1], cols[2]).map_err(|m| Error::parse(name, ln, m))?;
        cur.words.push(cols[0].to_string());
        cur.cpos.push(cols[1].to_string());
        cur.fpos.push(cols[2].to_string());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

/// Reads a corpus; tagged files are validated against `schema`.
/// For [`Format::Parallel`] `path` is the stem of the `.src`/`.tgt` pair.
pub fn load_corpus(path: &Path, format: Format, schema: &TagSchema) -> Result<Corpus> {
    let name = path.display().to_string();
    match format {
        Format::Plain => Ok(Corpus::Plain(parse_plain(&name, &read_text(path)?)?)),
        Format::TaggedTsv => Ok(Corpus::Tagged(parse_tagged(&name, &read_text(path)?, schema)?)),
        Format::Parallel => {
            let (src, tgt) = parallel_paths(path);
            let s = parse_plain(&src.display().to_string(), &read_text(&src)?)?;
            let t = parse_plain(&tgt.display().to_string(), &read_text(&tgt)?)?;
            if s.len() != t.len() {
                return Err(Error::Invalid(format!(
                    "parallel files differ in line count: {} has {}, {} has {}",
                    src.display(),
                    s.len(),
                    tgt.display(),
                    t.len()
                )));
            }
            Ok(Corpus::Parallel(s.into_iter().zip(t).collect()))
        }
    }
}

pub fn render_plain(sentences: &[Vec<String>]) -> String {
    sentences.iter().map(|s| format!("{}\n", s.join(" "))).collect()
}

pub fn render_tagged(sentences: &[TaggedSentence]) -> String {
    let blocks: Vec<String> = sentences
        .iter()
        .map(|s| {
            let mut b = String::new();
            for ((w, c), f) in s.words.iter().zip(&s.cpos).zip(&s.fpos) {
                let _ = writeln!(b, "{w}\t{c}\t{f}");
            }
            b
        })
        .collect();
    blocks.join("\n")
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the canonical serialization of `corpus`.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    match corpus {
        Corpus::Plain(s) => write(path, &render_plain(s)),
        Corpus::Tagged(s) => write(path, &render_tagged(s)),
        Corpus::Parallel(pairs) => {
            let (src, tgt) = parallel_paths(path);
            let (s, t): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            write(&src, &render_plain(&s))?;
            write(&tgt, &render_plain(&t))
        }
    }
}
