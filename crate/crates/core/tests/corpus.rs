use std::collections::BTreeMap;

use aspectnmt::corpus::grammar::{generate_corpus, generate_corpus_traced, GrammarSpec};
use aspectnmt::corpus::{load_corpus, save_corpus, Corpus, Format, ParallelPair, TaggedSentence};
use proptest::prelude::*;

#[test]
fn rule_frequencies_match_weights_within_three_sigma() {
    let g = GrammarSpec::desk();
    let (_, usage) = generate_corpus_traced(&g, 10_000, 99).unwrap();
    let mut by_lhs: BTreeMap<&str, (u64, f64)> = BTreeMap::new();
    for (rule, &c) in g.rules.iter().zip(&usage.counts) {
        let e = by_lhs.entry(rule.lhs.as_str()).or_default();
        e.0 += c;
        e.1 += rule.weight;
    }
    let mut checked = 0;
    for (rule, &c) in g.rules.iter().zip(&usage.counts) {
        let (n, total) = by_lhs[rule.lhs.as_str()];
        let p = rule.weight / total;
        if n == 0 || p == 1.0 {
            continue;
        }
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{} -> {:?}: {c} vs {mean:.1} ± {sigma:.1}", rule.lhs, rule.rhs);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn fine_tags_map_onto_coarse_tags() {
    let g = GrammarSpec::desk();
    for p in generate_corpus(&g, 2000, 5).unwrap() {
        p.validate(&g.schema).unwrap();
        assert!(p.source.len() <= 100 && !p.target.is_empty());
    }
}

#[test]
fn files_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let g = GrammarSpec::desk();
    let mut pairs = generate_corpus(&g, 40, 8).unwrap();
    pairs[0].source.words[0] = "Ärger".into();
    pairs[0].target[0] = "naïve".into();
    for corpus in [Corpus::from_pairs_tagged(&pairs), Corpus::from_pairs_parallel(&pairs)] {
        let path = dir.path().join(format!("c.{:?}", corpus.format()));
        save_corpus(&corpus, &path).unwrap();
        let back = load_corpus(&path, corpus.format(), &g.schema).unwrap();
        assert_eq!(back, corpus);
        let again = dir.path().join("again");
        save_corpus(&back, &again).unwrap();
        if corpus.format() == Format::TaggedTsv {
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        }
    }
    let empty = Corpus::Plain(Vec::new());
    let path = dir.path().join("empty.txt");
    save_corpus(&empty, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"");
    assert!(load_corpus(&path, Format::Plain, &g.schema).unwrap().is_empty());
}

#[test]
fn malformed_files_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let g = GrammarSpec::desk();
    let cpos = &g.schema.cpos.tags[0];
    let path = dir.path().join("bad.tsv");
    std::fs::write(&path, format!("word\t{cpos}\tNOT_A_TAG\n")).unwrap();
    let err = load_corpus(&path, Format::TaggedTsv, &g.schema).unwrap_err().to_string();
    assert!(err.contains("NOT_A_TAG") && err.contains(":1:"), "{err}");
    let stem = dir.path().join("p");
    std::fs::write(stem.with_extension("src"), "a b\nc\n").unwrap();
    std::fs::write(stem.with_extension("tgt"), "a b\n").unwrap();
    let err = load_corpus(&stem, Format::Parallel, &g.schema).unwrap_err().to_string();
    assert!(err.contains('2') && err.contains('1'), "{err}");
}

fn word() -> impl Strategy<Value = String> {
    "[a-zäöüß]{1,6}|[0-9]{1,3}|[A-Z][a-z]{0,4}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn in_memory_corpora_round_trip(sents in prop::collection::vec(prop::collection::vec((word(), 0usize..4, prop::collection::vec(word(), 1..3)), 1..8), 0..6)) {
        let g = GrammarSpec::desk();
        let pairs: Vec<ParallelPair> = sents
            .iter()
            .map(|s| {
                let tags: Vec<(String, String)> = s.iter().map(|(_, k, _)| {
                    let cpos = g.schema.cpos.tags[k % g.schema.cpos.len()].clone();
                    let fpos = g.schema.fpos.tags.iter().find(|f| g.schema.coarse_of(f) == Some(cpos.as_str())).unwrap().clone();
                    (cpos, fpos)
                }).collect();
                ParallelPair {
                    source: TaggedSentence {
                        words: s.iter().map(|(w, _, _)| w.clone()).collect(),
                        cpos: tags.iter().map(|t| t.0.clone()).collect(),
                        fpos: tags.iter().map(|t| t.1.clone()).collect(),
                    },
                    target: s.iter().flat_map(|(_, _, t)| t.clone()).collect(),
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        for corpus in [Corpus::from_pairs_tagged(&pairs), Corpus::from_pairs_parallel(&pairs)] {
            let path = dir.path().join("c");
            save_corpus(&corpus, &path).unwrap();
            prop_assert_eq!(load_corpus(&path, corpus.format(), &g.schema).unwrap(), corpus);
        }
    }
}
