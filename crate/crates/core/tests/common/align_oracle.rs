//! Exhaustive alignment reference: over all monotone partitions into blocks
//! with non-empty sides, maximize the number of 1:1 blocks joining equal
//! tokens, then minimize the number of blocks.

use aspectnmt::align::{normalize_for_match, Alignment, AlignmentBlock};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleResult {
    pub best: Alignment,
    pub unique: bool,
    pub equal_blocks: usize,
    pub block_count: usize,
}

pub fn solve<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> Option<OracleResult> {
    let na: Vec<String> = a.iter().map(|t| normalize_for_match(t.as_ref())).collect();
    let nb: Vec<String> = b.iter().map(|t| normalize_for_match(t.as_ref())).collect();
    if na.is_empty() || nb.is_empty() {
        return None;
    }
    let mut search = Search { a: &na, b: &nb, stack: Vec::new(), best: None, ties: 0 };
    search.walk(0, 0, 0);
    let (score, blocks) = search.best?;
    Some(OracleResult {
        best: Alignment { blocks },
        unique: search.ties == 1,
        equal_blocks: score.0,
        block_count: score.1,
    })
}

struct Search<'s> {
    a: &'s [String],
    b: &'s [String],
    stack: Vec<AlignmentBlock>,
    best: Option<((usize, usize), Vec<AlignmentBlock>)>,
    ties: usize,
}

impl Search<'_> {
    /// Enumerates every monotone partition with non-empty block sides.
    fn walk(&mut self, i: usize, j: usize, equal: usize) {
        let (n, m) = (self.a.len(), self.b.len());
        if i == n && j == m {
            let score = (equal, self.stack.len());
            let better = match &self.best {
                None => true,
                Some((s, _)) => score.0 > s.0 || (score.0 == s.0 && score.1 < s.1),
            };
            if better {
                self.best = Some((score, self.stack.clone()));
                self.ties = 1;
            } else if self.best.as_ref().is_some_and(|(s, _)| *s == score) {
                self.ties += 1;
            }
            return;
        }
        if i == n || j == m {
            return;
        }
        for i2 in i + 1..=n {
            for j2 in j + 1..=m {
                let eq = i2 == i + 1 && j2 == j + 1 && self.a[i] == self.b[j];
                self.stack.push(AlignmentBlock::new(i..i2, j..j2));
                self.walk(i2, j2, equal + eq as usize);
                self.stack.pop();
            }
        }
    }
}

/// Score of an arbitrary alignment under the oracle objective.
pub fn score<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T], al: &Alignment) -> (usize, usize) {
    let eq = al
        .blocks
        .iter()
        .filter(|blk| {
            blk.is_one_to_one()
                && normalize_for_match(a[blk.a_span.start].as_ref()) == normalize_for_match(b[blk.b_span.start].as_ref())
        })
        .count();
    (eq, al.blocks.len())
}
