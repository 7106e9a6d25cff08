//! Monotone many-to-many alignment between a word sequence and its
//! sub-word segmentation, and projection of word tags onto sub-words.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tokenize::CONTINUATION;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentBlock {
    pub a_span: Range<usize>,
    pub b_span: Range<usize>,
}

impl AlignmentBlock {
    pub fn new(a_span: Range<usize>, b_span: Range<usize>) -> Self {
        Self { a_span, b_span }
    }

    pub fn is_one_to_one(&self) -> bool {
        self.a_span.len() == 1 && self.b_span.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    pub blocks: Vec<AlignmentBlock>,
}

impl Alignment {
    /// Checks that the blocks are ordered and partition `[0, a_len)` and
    /// `[0, b_len)`.
    pub fn check_partition(&self, a_len: usize, b_len: usize) -> Result<()> {
        let (mut ea, mut eb) = (0, 0);
        for (i, blk) in self.blocks.iter().enumerate() {
            if blk.a_span.start != ea || blk.b_span.start != eb {
                return Err(Error::Invalid(format!("block {i} is not contiguous with its predecessor")));
            }
            if blk.a_span.end < blk.a_span.start || blk.b_span.end < blk.b_span.start {
                return Err(Error::Invalid(format!("block {i} has a reversed span")));
            }
            let degenerate = blk.a_span.is_empty() || blk.b_span.is_empty();
            if degenerate && (self.blocks.len() != 1 || (a_len > 0 && b_len > 0)) {
                return Err(Error::Invalid(format!("block {i} has an empty side")));
            }
            ea = blk.a_span.end;
            eb = blk.b_span.end;
        }
        if ea != a_len || eb != b_len {
            return Err(Error::Invalid(format!("blocks cover {ea}/{a_len} words and {eb}/{b_len} sub-words")));
        }
        Ok(())
    }

    /// Pharaoh-style `i-j` pairs for every word/sub-word pair in a block.
    pub fn pharaoh(&self) -> String {
        let mut pairs = Vec::new();
        for blk in &self.blocks {
            for i in blk.a_span.clone() {
                for j in blk.b_span.clone() {
                    pairs.push(format!("{i}-{j}"));
                }
            }
        }
        pairs.join(" ")
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pharaoh())
    }
}

pub fn normalize_for_match(token: &str) -> String {
    token.strip_prefix(CONTINUATION).unwrap_or(token).to_lowercase()
}

/// Divide-and-conquer monotone alignment. Segments whose concatenated
/// characters agree are cut at shared character boundaries. Small segments
/// are partitioned exactly (most 1:1 equal-token blocks, then fewest
/// blocks). Larger ones are divided at anchors: tokens occurring equally
/// often on both sides are paired in order and a longest monotone chain of
/// those pairs is kept, the gaps being aligned recursively. A large segment
/// without anchors peels off common prefix/suffix tokens and becomes one
/// many-to-many block.
pub fn monotonic_align<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> Alignment {
    let na: Vec<String> = a.iter().map(|t| normalize_for_match(t.as_ref())).collect();
    let nb: Vec<String> = b.iter().map(|t| normalize_for_match(t.as_ref())).collect();
    if na.is_empty() && nb.is_empty() {
        return Alignment::default();
    }
    if na.is_empty() || nb.is_empty() {
        return Alignment { blocks: vec![AlignmentBlock::new(0..na.len(), 0..nb.len())] };
    }
    let mut raw = Vec::new();
    segment(&na, &nb, 0..na.len(), 0..nb.len(), &mut raw);
    Alignment { blocks: absorb_degenerate(raw) }
}

fn segment(a: &[String], b: &[String], ra: Range<usize>, rb: Range<usize>, out: &mut Vec<AlignmentBlock>) {
    if ra.is_empty() && rb.is_empty() {
        return;
    }
    if ra.is_empty() || rb.is_empty() {
        out.push(AlignmentBlock::new(ra, rb));
        return;
    }
    if ra.len() >= 2 && rb.len() >= 2 && a[ra.clone()].concat() == b[rb.clone()].concat() {
        char_boundary_split(a, b, ra, rb, out);
        return;
    }
    if ra.len() * rb.len() <= GAP_SOLVER_LIMIT {
        solve_gap(a, b, ra, rb, out);
        return;
    }
    let anchors = select_anchors(&a[ra.clone()], &b[rb.clone()]);
    if !anchors.is_empty() {
        let (mut pa, mut pb) = (ra.start, rb.start);
        for (i, j) in anchors {
            let (i, j) = (ra.start + i, rb.start + j);
            segment(a, b, pa..i, pb..j, out);
            out.push(AlignmentBlock::new(i..i + 1, j..j + 1));
            pa = i + 1;
            pb = j + 1;
        }
        segment(a, b, pa..ra.end, pb..rb.end, out);
        return;
    }
    let (mut ra, mut rb) = (ra, rb);
    while ra.len() > 1 && rb.len() > 1 && a[ra.start] == b[rb.start] {
        out.push(AlignmentBlock::new(ra.start..ra.start + 1, rb.start..rb.start + 1));
        ra.start += 1;
        rb.start += 1;
    }
    let mut tail = Vec::new();
    while ra.len() > 1 && rb.len() > 1 && a[ra.end - 1] == b[rb.end - 1] {
        tail.push(AlignmentBlock::new(ra.end - 1..ra.end, rb.end - 1..rb.end));
        ra.end -= 1;
        rb.end -= 1;
    }
    out.push(AlignmentBlock::new(ra, rb));
    out.extend(tail.into_iter().rev());
}

/// Segments up to this many token pairs are solved exactly.
const GAP_SOLVER_LIMIT: usize = 144;

/// Exact partition of a small gap: most 1:1 blocks joining equal tokens,
/// then fewest blocks; ties resolved toward shorter leading blocks.
fn solve_gap(a: &[String], b: &[String], ra: Range<usize>, rb: Range<usize>, out: &mut Vec<AlignmentBlock>) {
    let (n, m) = (ra.len(), rb.len());
    // best[i][j]: score of aligning the suffixes a[i..], b[j..].
    let mut best = vec![vec![None::<(i64, i64)>; m + 1]; n + 1];
    let mut step = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    best[n][m] = Some((0, 0));
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            for i2 in i + 1..=n {
                for j2 in j + 1..=m {
                    let Some(rest) = best[i2][j2] else { continue };
                    let eq = (i2 == i + 1 && j2 == j + 1 && a[ra.start + i] == b[rb.start + j]) as i64;
                    let cand = (rest.0 + eq, rest.1 - 1);
                    if best[i][j].is_none_or(|cur| cand > cur) {
                        best[i][j] = Some(cand);
                        step[i][j] = (i2, j2);
                    }
                }
            }
        }
    }
    let (mut i, mut j) = (0, 0);
    while (i, j) != (n, m) {
        let (i2, j2) = step[i][j];
        out.push(AlignmentBlock::new(ra.start + i..ra.start + i2, rb.start + j..rb.start + j2));
        (i, j) = (i2, j2);
    }
}

/// Pairs the k-th occurrences of every token whose count matches on both
/// sides, then keeps a longest monotone chain whose gaps are empty on both
/// sides or on neither (leftmost on ties).
fn select_anchors(a: &[String], b: &[String]) -> Vec<(usize, usize)> {
    let mut pos_a: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut pos_b: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, t) in a.iter().enumerate() {
        pos_a.entry(t).or_default().push(i);
    }
    for (j, t) in b.iter().enumerate() {
        pos_b.entry(t).or_default().push(j);
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (t, ia) in &pos_a {
        if let Some(jb) = pos_b.get(t) {
            if ia.len() == jb.len() {
                pairs.extend(ia.iter().copied().zip(jb.iter().copied()));
            }
        }
    }
    pairs.sort_unstable();
    longest_chain(&pairs, a.len(), b.len())
}

fn balanced(da: usize, db: usize) -> bool {
    (da == 0) == (db == 0)
}

/// Chain score: (anchors, -(anchors + non-empty gaps)), compared
/// lexicographically; `None` when a gap would have an empty side.
fn longest_chain(pairs: &[(usize, usize)], n: usize, m: usize) -> Vec<(usize, usize)> {
    const NONE: usize = usize::MAX;
    let gap = |da: usize, db: usize| -> Option<i64> { balanced(da, db).then_some((da > 0) as i64) };
    let k = pairs.len();
    let mut best: Vec<Option<(i64, i64)>> = vec![None; k];
    let mut next = vec![NONE; k];
    for i in (0..k).rev() {
        let (pi, pj) = pairs[i];
        if let Some(g) = gap(n - pi - 1, m - pj - 1) {
            best[i] = Some((1, -1 - g));
        }
        for q in i + 1..k {
            let (qi, qj) = pairs[q];
            if qi <= pi || qj <= pj {
                continue;
            }
            let (Some(rest), Some(g)) = (best[q], gap(qi - pi - 1, qj - pj - 1)) else { continue };
            let cand = (rest.0 + 1, rest.1 - 1 - g);
            if best[i].is_none_or(|cur| cand > cur) {
                best[i] = Some(cand);
                next[i] = q;
            }
        }
    }
    let mut start: Option<(usize, (i64, i64))> = None;
    for i in 0..k {
        let (Some(sc), Some(g)) = (best[i], gap(pairs[i].0, pairs[i].1)) else { continue };
        let total = (sc.0, sc.1 - g);
        if start.is_none_or(|(_, cur)| total > cur) {
            start = Some((i, total));
        }
    }
    let mut chain = Vec::new();
    let mut cur = start.map_or(NONE, |(i, _)| i);
    while cur != NONE {
        chain.push(pairs[cur]);
        cur = next[cur];
    }
    chain
}

fn char_boundary_split(a: &[String], b: &[String], ra: Range<usize>, rb: Range<usize>, out: &mut Vec<AlignmentBlock>) {
    let (mut i, mut j) = (ra.start, rb.start);
    let (mut start_i, mut start_j) = (i, j);
    let (mut ca, mut cb) = (0usize, 0usize);
    while i < ra.end || j < rb.end {
        if ca <= cb && i < ra.end {
            ca += a[i].chars().count();
            i += 1;
        } else {
            cb += b[j].chars().count();
            j += 1;
        }
        if ca == cb && i > start_i && j > start_j {
            out.push(AlignmentBlock::new(start_i..i, start_j..j));
            start_i = i;
            start_j = j;
        }
    }
    if start_i < ra.end || start_j < rb.end {
        out.push(AlignmentBlock::new(start_i..ra.end, start_j..rb.end));
    }
}

/// Folds blocks with an empty side into the preceding block (or the
/// following one at the start).
fn absorb_degenerate(raw: Vec<AlignmentBlock>) -> Vec<AlignmentBlock> {
    let mut out: Vec<AlignmentBlock> = Vec::with_capacity(raw.len());
    let mut pending: Option<AlignmentBlock> = None;
    for blk in raw {
        let empty = blk.a_span.is_empty() || blk.b_span.is_empty();
        if empty {
            if let Some(last) = out.last_mut() {
                last.a_span.end = blk.a_span.end;
                last.b_span.end = blk.b_span.end;
            } else {
                let p = pending.get_or_insert(AlignmentBlock::new(blk.a_span.start..blk.a_span.start, blk.b_span.start..blk.b_span.start));
                p.a_span.end = blk.a_span.end;
                p.b_span.end = blk.b_span.end;
            }
            continue;
        }
        let mut blk = blk;
        if let Some(p) = pending.take() {
            blk.a_span.start = p.a_span.start;
            blk.b_span.start = p.b_span.start;
        }
        out.push(blk);
    }
    if let Some(p) = pending {
        out.push(p);
    }
    out
}

/// Every sub-word receives the tag of the first word in its block.
pub fn project_tags<T: Clone>(tags: &[T], a_len: usize, alignment: &Alignment) -> Result<Vec<T>> {
    if tags.len() != a_len {
        return Err(Error::Shape(format!("{} tags for {a_len} words", tags.len())));
    }
    let mut out = Vec::new();
    for blk in &alignment.blocks {
        if blk.b_span.is_empty() {
            continue;
        }
        let tag = tags
            .get(blk.a_span.start)
            .ok_or_else(|| Error::Shape("alignment block has no word to take a tag from".into()))?;
        out.extend(std::iter::repeat_n(tag.clone(), blk.b_span.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(al: &Alignment) -> Vec<(Range<usize>, Range<usize>)> {
        al.blocks.iter().map(|b| (b.a_span.clone(), b.b_span.clone())).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_for_match("##ing"), "ing");
        assert_eq!(normalize_for_match("The"), "the");
        assert_eq!(normalize_for_match("x"), "x");
    }

    #[test]
    fn identity_and_worked_cases() {
        assert_eq!(spans(&monotonic_align(&["a", "b"], &["a", "b"])), vec![(0..1, 0..1), (1..2, 1..2)]);
        assert_eq!(spans(&monotonic_align(&["hadn", "'t"], &["had", "n't"])), vec![(0..2, 0..2)]);
        let al = monotonic_align(&["the", "playing", "cat"], &["the", "play", "##ing", "cat"]);
        assert_eq!(spans(&al), vec![(0..1, 0..1), (1..2, 1..3), (2..3, 3..4)]);
        assert_eq!(al.pharaoh(), "0-0 1-1 1-2 2-3");
    }

    #[test]
    fn empty_sides() {
        let none: [&str; 0] = [];
        assert!(monotonic_align(&none, &none).blocks.is_empty());
        let al = monotonic_align(&["a", "b"], &none);
        assert_eq!(spans(&al), vec![(0..2, 0..0)]);
        al.check_partition(2, 0).unwrap();
    }

    #[test]
    fn character_boundary_split() {
        let al = monotonic_align(&["ab", "cd", "e"], &["a", "##bc", "##d", "e"]);
        al.check_partition(3, 4).unwrap();
        assert_eq!(spans(&al), vec![(0..2, 0..3), (2..3, 3..4)]);
        let al = monotonic_align(&["ab", "cd"], &["ab", "c", "d"]);
        assert_eq!(spans(&al), vec![(0..1, 0..1), (1..2, 1..3)]);
    }

    #[test]
    fn projection() {
        let al = monotonic_align(&["a", "b"], &["a", "b"]);
        assert_eq!(project_tags(&["X", "Y"], 2, &al).unwrap(), vec!["X", "Y"]);
        let al = Alignment { blocks: vec![AlignmentBlock::new(0..1, 0..2)] };
        assert_eq!(project_tags(&["NOUN"], 1, &al).unwrap(), vec!["NOUN", "NOUN"]);
        let al = Alignment { blocks: vec![AlignmentBlock::new(0..2, 0..2)] };
        assert_eq!(project_tags(&["VERB", "PART"], 2, &al).unwrap(), vec!["VERB", "VERB"]);
        assert!(project_tags(&["VERB"], 2, &al).is_err());
    }

    #[test]
    fn long_sentences_divide_at_anchors() {
        let words: Vec<String> = "der kleine hund sieht die rote katze im garten und die alte frau liest ein buch heute"
            .split(' ')
            .map(String::from)
            .collect();
        let mut pieces = Vec::new();
        for w in &words {
            if w.len() > 4 {
                pieces.push(w[..3].to_string());
                pieces.push(format!("##{}", &w[3..]));
            } else {
                pieces.push(w.clone());
            }
        }
        assert!(words.len() * pieces.len() > GAP_SOLVER_LIMIT);
        let al = monotonic_align(&words, &pieces);
        al.check_partition(words.len(), pieces.len()).unwrap();
        assert_eq!(al.blocks.len(), words.len());
        for (k, blk) in al.blocks.iter().enumerate() {
            assert_eq!(blk.a_span, k..k + 1);
        }
        // An unknown piece breaks the character match; anchors take over.
        let unk = pieces.iter().position(|p| p == "rote").unwrap();
        pieces[unk] = "[UNK]".into();
        let al = monotonic_align(&words, &pieces);
        al.check_partition(words.len(), pieces.len()).unwrap();
        let rote = al.blocks.iter().find(|b| b.a_span.contains(&5)).unwrap();
        assert!(rote.b_span.contains(&unk) && rote.a_span.len() <= 2);
        assert_eq!(al.blocks.len(), words.len() - rote.a_span.len() + 1);
    }
}
