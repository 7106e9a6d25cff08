//! BLEU-4 scoring and per-seed summaries.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tokenize::word_tokenize;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len\n");
        out.push_str(&format!("{:.2}", self.score));
        for p in self.precisions {
            out.push_str(&format!("\t{:.4}", p * 100.0));
        }
        out.push_str(&format!("\t{:.4}\t{}\t{}\n", self.brevity_penalty, self.hyp_len, self.ref_len));
        out
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BLEU       {:>8.2}", self.score)?;
        for (n, p) in self.precisions.iter().enumerate() {
            writeln!(f, "p{}         {:>8.2}", n + 1, p * 100.0)?;
        }
        writeln!(f, "BP         {:>8.4}", self.brevity_penalty)?;
        writeln!(f, "hyp_len    {:>8}", self.hyp_len)?;
        write!(f, "ref_len    {:>8}", self.ref_len)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    matched: [u64; MAX_ORDER],
    total: [u64; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn accumulate(hyp: &[String], reference: &[String], c: &mut Counts) {
    c.hyp_len += hyp.len();
    c.ref_len += reference.len();
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        for (g, k) in &h {
            c.matched[n - 1] += (*k).min(r.get(g).copied().unwrap_or(0));
        }
        c.total[n - 1] += hyp.len().saturating_sub(n - 1) as u64;
    }
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

fn report(c: &Counts, smooth: bool) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if smooth {
            (c.matched[n] + 1) as f64 / (c.total[n] + 1) as f64
        } else if c.total[n] == 0 {
            0.0
        } else {
            c.matched[n] as f64 / c.total[n] as f64
        };
    }
    let bp = brevity_penalty(c.hyp_len, c.ref_len);
    let score = if precisions.iter().any(|&p| p == 0.0) || bp == 0.0 {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (100.0 * bp * mean_log.exp()).min(100.0)
    };
    BleuReport { score, precisions, brevity_penalty: bp, hyp_len: c.hyp_len, ref_len: c.ref_len }
}

/// Corpus BLEU-4 over pre-tokenized sentences.
pub fn corpus_bleu_tokens<H: AsRef<[String]>, R: AsRef<[String]>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Shape(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if refs.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one reference".into()));
    }
    let mut c = Counts::default();
    for (h, r) in hyps.iter().zip(refs) {
        accumulate(h.as_ref(), r.as_ref(), &mut c);
    }
    Ok(report(&c, false))
}

/// Corpus BLEU-4; sentences are split with [`word_tokenize`].
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    let h: Vec<Vec<String>> = hyps.iter().map(|s| word_tokenize(s.as_ref())).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| word_tokenize(s.as_ref())).collect();
    corpus_bleu_tokens(&h, &r)
}

/// Sentence BLEU-4 with add-one smoothing of every n-gram precision.
pub fn sentence_bleu_tokens(hyp: &[String], reference: &[String]) -> BleuReport {
    let mut c = Counts::default();
    accumulate(hyp, reference, &mut c);
    report(&c, true)
}

pub fn sentence_bleu(hyp: &str, reference: &str) -> f64 {
    sentence_bleu_tokens(&word_tokenize(hyp), &word_tokenize(reference)).score
}

/// Scores of one run, keyed by test set in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunScores {
    pub run: String,
    pub scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub runs: Vec<String>,
    pub metrics: Vec<MetricSummary>,
}

impl RunSummary {
    /// One row per run followed by mean/min/max rows; one column per metric.
    pub fn to_tsv(&self, label: &str) -> String {
        let mut out = String::from("system\trun");
        for m in &self.metrics {
            out.push('\t');
            out.push_str(&m.name);
        }
        out.push('\n');
        for (i, run) in self.runs.iter().enumerate() {
            out.push_str(&format!("{label}\t{run}"));
            for m in &self.metrics {
                out.push_str(&format!("\t{:.2}", m.values[i]));
            }
            out.push('\n');
        }
        for (row, pick) in [("mean", 0), ("min", 1), ("max", 2)] {
            out.push_str(&format!("{label}\t{row}"));
            for m in &self.metrics {
                let v = [m.mean, m.min, m.max][pick];
                out.push_str(&format!("\t{v:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn summarize_runs(logs: &[RunScores]) -> Result<RunSummary> {
    let first = logs.first().ok_or_else(|| Error::Invalid("no runs to summarize".into()))?;
    let keys: Vec<&str> = first.scores.iter().map(|(k, _)| k.as_str()).collect();
    for log in logs {
        let these: Vec<&str> = log.scores.iter().map(|(k, _)| k.as_str()).collect();
        if these != keys {
            return Err(Error::Invalid(format!(
                "run `{}` reports metrics [{}] but run `{}` reports [{}]",
                log.run,
                these.join(", "),
                first.run,
                keys.join(", ")
            )));
        }
    }
    let metrics = keys
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let values: Vec<f64> = logs.iter().map(|l| l.scores[k].1).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            MetricSummary { name: name.to_string(), values, mean, min, max }
        })
        .collect();
    Ok(RunSummary { runs: logs.iter().map(|l| l.run.clone()).collect(), metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_brevity_example() {
        let r = corpus_bleu(&["a b c d"], &["a b c d"]).unwrap();
        assert_eq!(r.score, 100.0);
        let r = corpus_bleu(&["a b c d"], &["a b c d e"]).unwrap();
        assert_eq!(r.precisions, [1.0; 4]);
        assert!((r.brevity_penalty - (-0.25f64).exp()).abs() < 1e-12);
        assert!((r.score - 77.88).abs() < 0.005);
    }

    #[test]
    fn empty_hypothesis_and_mismatch() {
        assert_eq!(corpus_bleu(&[""], &["a b"]).unwrap().score, 0.0);
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
        let none: [&str; 0] = [];
        assert!(corpus_bleu(&none, &none).is_err());
    }

    #[test]
    fn sentence_bleu_is_smoothed() {
        assert_eq!(sentence_bleu("a b c d e", "a b c d e"), 100.0);
        let hyp: Vec<String> = (0..30).map(|i| format!("h{i}")).collect();
        let refs: Vec<String> = (0..30).map(|i| format!("r{i}")).collect();
        let s = sentence_bleu_tokens(&hyp, &refs).score;
        // (1/31 · 1/30 · 1/29 · 1/28)^(1/4)
        let want = 100.0 * (31.0f64 * 30.0 * 29.0 * 28.0).powf(-0.25);
        assert!((s - want).abs() < 1e-9 && s > 0.0 && s < 5.0, "{s}");
    }

    #[test]
    fn summaries() {
        let runs: Vec<RunScores> = [10.0, 20.0, 30.0]
            .iter()
            .enumerate()
            .map(|(i, v)| RunScores { run: format!("s{i}"), scores: vec![("test".into(), *v), ("val".into(), v + 1.0)] })
            .collect();
        let s = summarize_runs(&runs).unwrap();
        assert_eq!(s.metrics[0].mean, 20.0);
        assert_eq!(s.metrics[1].name, "val");
        assert_eq!((s.metrics[0].min, s.metrics[0].max), (10.0, 30.0));
        let one = summarize_runs(&runs[..1]).unwrap();
        assert_eq!(one.metrics[0].mean, 10.0);
        let mut bad = runs.clone();
        bad[2].scores.pop();
        assert!(summarize_runs(&bad).is_err());
        assert!(summarize_runs(&[]).is_err());
    }
}
