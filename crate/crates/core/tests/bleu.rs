use aspectnmt::eval::{corpus_bleu, sentence_bleu};
use proptest::prelude::*;

#[test]
fn fixture_scores() {
    let text = include_str!("data/bleu_fixture.tsv");
    let mut n = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let hyps: Vec<&str> = cols[0].split(" ||| ").collect();
        let refs: Vec<&str> = cols[1].split(" ||| ").collect();
        let got = corpus_bleu(&hyps, &refs).unwrap().score;
        assert_eq!(format!("{got:.2}"), cols[2].trim(), "{line}");
        n += 1;
    }
    assert_eq!(n, 10);
}

#[test]
fn brevity_penalty_worked_example() {
    let r = corpus_bleu(&["a b c d"], &["a b c d e"]).unwrap();
    assert!((r.brevity_penalty - (-0.25f64).exp()).abs() < 1e-12);
    assert!((r.score - 77.88).abs() < 0.005);
    assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-e]{1,3}", 1..12).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn self_bleu_is_100(c in prop::collection::vec(sentence(), 1..6), short in "[a-e]{1,3}( [a-e]{1,3}){0,2}") {
        // Needs a sentence long enough to hold a 4-gram.
        prop_assume!(c.iter().any(|s| s.split(' ').count() >= 4));
        prop_assert!((sentence_bleu(&short, &short) - 100.0).abs() < 1e-9);
        prop_assert!((corpus_bleu(&c, &c).unwrap().score - 100.0).abs() < 1e-9);
        prop_assert!((sentence_bleu(&c[0], &c[0]) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn permuting_pairs_keeps_the_score(pairs in prop::collection::vec((sentence(), sentence()), 1..8), rot in 0usize..8) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let (mut h2, mut r2) = (h.clone(), r.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        let a = corpus_bleu(&h, &r).unwrap().score;
        let b = corpus_bleu(&h2, &r2).unwrap().score;
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
    }
}
