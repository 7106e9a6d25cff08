//! Browser bindings: sub-word tokenization with position and shape labels,
//! word/sub-word alignment, and BLEU scoring.

use aspectnmt::align::monotonic_align;
use aspectnmt::corpus::grammar::{generate_corpus, GrammarSpec};
use aspectnmt::error::{Error, Result};
use aspectnmt::eval::{corpus_bleu, sentence_bleu};
use aspectnmt::tokenize::{subword_tokenize, train_subword_vocab, word_tokenize, SubwordVocab};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A vocabulary trained in the page on sentences from the bundled grammar.
#[wasm_bindgen]
pub struct Demo {
    vocab: SubwordVocab,
    grammar: GrammarSpec,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(vocab_size: usize, sentences: usize) -> Result<Demo, JsError> {
        Demo::build(vocab_size, sentences).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// One generated source sentence with its reference translation, tab-separated.
    pub fn sample(&self, seed: u64) -> Result<String, JsError> {
        self.sample_pair(seed).map_err(js)
    }

    /// One line per sub-word: `piece<TAB>position<TAB>shape<TAB>word index`.
    pub fn tokenize(&self, sentence: &str) -> String {
        tokenize_table(&self.vocab, sentence)
    }

    /// Sub-words of `sentence`, space-separated, for feeding `align`.
    pub fn pieces(&self, sentence: &str) -> String {
        subword_tokenize(&word_tokenize(sentence), &self.vocab).surfaces().join(" ")
    }
}

impl Demo {
    pub fn build(vocab_size: usize, sentences: usize) -> Result<Demo> {
        let grammar = GrammarSpec::desk();
        let corpus = generate_corpus(&grammar, sentences, 11)?;
        let words = corpus.iter().flat_map(|p| p.source.words.iter().chain(&p.target)).map(String::as_str);
        let vocab = train_subword_vocab(words, vocab_size)?;
        Ok(Demo { vocab, grammar })
    }

    pub fn vocab(&self) -> &SubwordVocab {
        &self.vocab
    }

    pub fn sample_pair(&self, seed: u64) -> Result<String> {
        let pair = generate_corpus(&self.grammar, 1, seed)?.remove(0);
        Ok(format!("{}\t{}", pair.source.words.join(" "), pair.target.join(" ")))
    }
}

pub fn tokenize_table(vocab: &SubwordVocab, sentence: &str) -> String {
    let seq = subword_tokenize(&word_tokenize(sentence), vocab);
    let mut out = String::new();
    for (i, t) in seq.tokens.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", t.surface, seq.swp[i], seq.shapes[i], t.word_index));
    }
    out
}

/// Pharaoh pairs followed by one `words => sub-words` line per block.
#[wasm_bindgen]
pub fn align(words: &str, subwords: &str) -> String {
    let a: Vec<&str> = words.split_whitespace().collect();
    let b: Vec<&str> = subwords.split_whitespace().collect();
    let al = monotonic_align(&a, &b);
    let mut out = format!("{al}\n");
    for blk in &al.blocks {
        out.push_str(&format!("{} => {}\n", a[blk.a_span.clone()].join(" "), b[blk.b_span.clone()].join(" ")));
    }
    out
}

/// Corpus BLEU of line-aligned hypotheses and references, plus sentence scores.
#[wasm_bindgen]
pub fn bleu(hypotheses: &str, references: &str) -> Result<String, JsError> {
    bleu_text(hypotheses, references).map_err(js)
}

pub fn bleu_text(hypotheses: &str, references: &str) -> Result<String> {
    let hyps: Vec<&str> = hypotheses.lines().collect();
    let refs: Vec<&str> = references.lines().collect();
    let report = corpus_bleu(&hyps, &refs)?;
    let mut out = format!("{report}\n");
    for (k, (h, r)) in hyps.iter().zip(&refs).enumerate() {
        out.push_str(&format!("sentence {}: {:.2}\n", k + 1, sentence_bleu(h, r)));
    }
    Ok(out)
}
