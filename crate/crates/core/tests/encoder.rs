use aspectnmt::encoder::{masked_lm_accuracy, pretrain_masked_lm, EncoderConfig, PretrainHyper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn alternating(count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(4..12);
            let first = rng.gen_range(0..2);
            (0..len).map(|i| 5 + (i + first) % 2).collect()
        })
        .collect()
}

fn config() -> EncoderConfig {
    EncoderConfig { layers: 2, model_dim: 32, heads: 2, ff_dim: 64, max_positions: 64, mask_rate: 0.15, dropout: 0.0 }
}

#[test]
fn alternating_pattern_is_learned() {
    let train = alternating(600, 1);
    let held = alternating(300, 2);
    let hyper = PretrainHyper { epochs: 25, batch_sentences: 16, lr: 2e-3, warmup_steps: 50, max_steps: None };
    let (enc, report) = pretrain_masked_lm(&train, 7, &config(), &hyper, 5).unwrap();
    let acc = masked_lm_accuracy(&enc, &held, 9).unwrap();
    assert!(acc >= 0.99, "held-out masked accuracy {acc}, epoch losses {:?}", report.epoch_losses);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let train = alternating(64, 3);
    let hyper = PretrainHyper { epochs: 1, batch_sentences: 16, ..Default::default() };
    let (a, ra) = pretrain_masked_lm(&train, 7, &config(), &hyper, 4).unwrap();
    let (b, rb) = pretrain_masked_lm(&train, 7, &config(), &hyper, 4).unwrap();
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    assert_eq!(ra, rb);
}
