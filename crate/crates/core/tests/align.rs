mod common;

use aspectnmt::align::{monotonic_align, project_tags};
use common::align_oracle;
use proptest::prelude::*;

fn spans(a: &aspectnmt::align::Alignment) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    a.blocks.iter().map(|b| (b.a_span.clone(), b.b_span.clone())).collect()
}

#[test]
fn oracle_prefers_equal_blocks() {
    let r = align_oracle::solve(&["the", "playing", "cat"], &["the", "play", "##ing", "cat"]).unwrap();
    assert!(r.unique);
    assert_eq!(spans(&r.best), vec![(0..1, 0..1), (1..2, 1..3), (2..3, 3..4)]);
    assert_eq!(monotonic_align(&["the", "playing", "cat"], &["the", "play", "##ing", "cat"]), r.best);
}

#[test]
fn matches_oracle_on_short_sequences() {
    let alpha = ["a", "b", "c"];
    let beta = ["a", "##b", "C"];
    let seqs = |s: [&'static str; 3]| -> Vec<Vec<&'static str>> {
        let mut out = Vec::new();
        for len in 1..=4u32 {
            for code in 0..3usize.pow(len) {
                out.push((0..len).map(|k| s[code / 3usize.pow(k) % 3]).collect());
            }
        }
        out
    };
    let mut unique = 0;
    for a in seqs(alpha) {
        for b in seqs(beta) {
            let r = align_oracle::solve(&a, &b).unwrap();
            if r.unique {
                unique += 1;
                assert_eq!(monotonic_align(&a, &b), r.best, "{a:?} vs {b:?}");
            }
        }
    }
    assert!(unique > 1000);
}

fn tokens() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-d]{1,4}|##[a-d]{1,3}|\\[UNK\\]", 0..30)
}

proptest! {
    #[test]
    fn blocks_partition_both_sides(a in tokens(), b in tokens()) {
        let al = monotonic_align(&a, &b);
        prop_assert!(al.check_partition(a.len(), b.len()).is_ok());
        if !a.is_empty() {
            let tags: Vec<usize> = (0..a.len()).collect();
            let projected = project_tags(&tags, a.len(), &al).unwrap();
            prop_assert_eq!(projected.len(), b.len());
            prop_assert!(projected.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn identical_sequences_align_one_to_one(a in prop::collection::vec("[a-z]{1,5}", 1..20)) {
        let al = monotonic_align(&a, &a);
        prop_assert_eq!(al.blocks.len(), a.len());
        prop_assert!(al.blocks.iter().enumerate().all(|(k, b)| b.a_span == (k..k + 1) && b.b_span == (k..k + 1)));
    }
}
