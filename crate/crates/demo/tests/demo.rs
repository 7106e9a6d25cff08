use aspectnmt_demo::{align, bleu_text, tokenize_table, Demo};

#[test]
fn tokenize_table_labels_every_piece() {
    let demo = Demo::build(300, 300).unwrap();
    let pair = demo.sample_pair(4).unwrap();
    let (src, _) = pair.split_once('\t').unwrap();
    let table = tokenize_table(demo.vocab(), src);
    assert_eq!(table.lines().count(), demo.pieces(src).split(' ').count());
    assert!(table.lines().all(|l| l.split('\t').count() == 4));
    assert_eq!(demo.sample_pair(4).unwrap(), pair);
}

#[test]
fn align_lists_blocks() {
    let out = align("the playing cat", "the play ##ing cat");
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("0-0 1-1 1-2 2-3"));
    assert_eq!(lines.nth(1), Some("playing => play ##ing"));
}

#[test]
fn bleu_reports_corpus_and_sentences() {
    let out = bleu_text("a b c d\nthe cat", "a b c d e\nthe cat").unwrap();
    assert!(out.starts_with("BLEU"));
    assert_eq!(out.lines().filter(|l| l.starts_with("sentence")).count(), 2);
    assert!(bleu_text("a", "a\nb").is_err());
}
