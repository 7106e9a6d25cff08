//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Criterion 5 is expected to fail: the extractor's training objective does
//! not penalize one aspect slice for carrying another aspect's information,
//! so counterfactual probes recover CPOS from the shape vector almost as well
//! as from the CPOS vector. The line still prints FAIL with the measured
//! numbers; only unexpected failures make the process exit non-zero.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use aspectnmt::align::{monotonic_align, project_tags};
use aspectnmt::aspects::*;
use aspectnmt::autograd::{gradcheck, Graph, ParamSet, Var};
use aspectnmt::config::ExperimentConfig;
use aspectnmt::corpus::AspectSpec;
use aspectnmt::encoder::{Encoder, ScalarMix};
use aspectnmt::eval::corpus_bleu;
use aspectnmt::nn::Dropout;
use aspectnmt::pipeline::{self, Corpora, SystemRun, Vocabularies};
use aspectnmt::tensor::Tensor;
use aspectnmt::translate::{training_log_tsv, FrozenAspects, Integration, NmtModel, TransformerConfig};
use common::align_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXPECTED_FAILURES: &[usize] = &[5];

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b}"))
}

fn within(limit: Duration, took: Duration) -> Result<(), String> {
    ensure(took <= limit, || format!("took {took:.1?}, limit {limit:?}"))
}

fn spec(name: &str, n: usize) -> AspectSpec {
    AspectSpec::new(name, (0..n).map(|i| format!("t{i}")).collect()).unwrap()
}

fn zero_params(set: &mut ParamSet) {
    let ids: Vec<_> = set.ids().collect();
    for id in ids {
        set.get_mut(id).data_mut().fill(0.0);
    }
}

// ---------------------------------------------------------------- criterion 1

fn loss_identities() -> Outcome {
    let t = Instant::now();
    let aspects = vec![spec(CPOS, 4), spec(FPOS, 6), spec(WSH, 3), spec(SWP, 3)];
    let mut ext = AspectExtractor::new(ExtractorConfig::default(), aspects, 8, 3, 1).map_err(|e| e.to_string())?;
    let av = extract_aspects(&[0.7; 8], &ext).map_err(|e| e.to_string())?;
    ensure(av.vectors.len() == 5 && av.vectors.iter().all(|v| v.len() == 200), || "split is not 5 x 200".into())?;
    zero_params(&mut ext.params);
    let zero = extract_aspects(&[0.0; 8], &ext).map_err(|e| e.to_string())?;
    ensure(zero.vectors.iter().flatten().all(|&x| x == 0.0), || "zero input gave non-zero aspects".into())?;
    let uniform = classify_aspect(&[0.3; 200], 1, &ext).map_err(|e| e.to_string())?;
    ensure(uniform.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-12), || format!("zero classifier gave {uniform:?}"))?;
    let r = reconstruct(&zero, &ext).map_err(|e| e.to_string())?;
    ensure(r.len() == 8 && r.iter().all(|&x| x == 0.0), || "zero vectors reconstructed to non-zero".into())?;

    // aspect loss
    let onehot = Tensor::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    close(loss_aspect(&[onehot], &[vec![0, 2]], None).unwrap(), 0.0, 0.0, "perfect predictions")?;
    let quarter = Tensor::from_vec(3, 4, vec![0.25; 12]);
    close(loss_aspect(&[quarter], &[vec![0, 1, 3]], None).unwrap(), 4f64.ln(), 1e-12, "uniform over 4 tags")?;
    let with_ce = |ce: f64| {
        let p = (-ce).exp();
        Tensor::from_vec(1, 2, vec![p, 1.0 - p])
    };
    let mean = loss_aspect(&[with_ce(0.2), with_ce(0.6)], &[vec![0], vec![0]], None).unwrap();
    close(mean, 0.4, 1e-12, "mean of 0.2 and 0.6")?;

    // reconstruction loss
    let e = Tensor::from_vec(1, 4, vec![0.5, -1.0, 2.0, 3.0]);
    close(loss_reconstruction(&e, &e).unwrap(), 0.0, 0.0, "R = E")?;
    let shifted = Tensor::from_vec(1, 4, vec![1.5, 1.0, 2.0, 3.0]);
    close(loss_reconstruction(&shifted, &e).unwrap(), 5.0, 1e-12, "R - E = (1,2)")?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let a = Tensor::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let b = Tensor::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect());
        ensure(loss_reconstruction(&a, &b).unwrap() >= 0.0, || "negative reconstruction loss".into())?;
    }

    // similarity loss
    let vecs = |v: &[&[f64]]| AspectVectors { vectors: v.iter().map(|x| x.to_vec()).collect() };
    close(loss_similarity(&vecs(&[&[1.0, 2.0], &[1.0, 2.0], &[9.0, 9.0]]), false), 1.0, 0.0, "identical vectors")?;
    close(loss_similarity(&vecs(&[&[0.0, 0.0], &[1.0, 0.0], &[9.0, 9.0]]), false), 0.0, 1e-15, "unit distance")?;
    let base = [[0.3, -1.0, 2.0], [1.5, 0.5, -0.5], [-2.0, 1.0, 0.0], [0.0, 0.0, 4.0]];
    let s = loss_similarity(&vecs(&[&base[0], &base[1], &base[2], &base[3], &[0.0; 3]]), false);
    let permuted = loss_similarity(&vecs(&[&base[2], &base[0], &base[3], &base[1], &[0.0; 3]]), false);
    close(s, permuted, 1e-12, "permuted vectors")?;
    let moved: Vec<Vec<f64>> = base.iter().map(|v| v.iter().zip([4.0, -3.0, 0.5]).map(|(x, c)| x + c).collect()).collect();
    let moved = loss_similarity(&vecs(&[&moved[0], &moved[1], &moved[2], &moved[3], &[0.0; 3]]), false);
    close(s, moved, 1e-12, "translated vectors")?;

    // total loss
    let b = total_loss(0.0, 0.0, 1.0);
    close(b.l_fe, 1.0, 0.0, "(0,0,1)")?;
    let b = total_loss(4f64.ln(), 5.0, 0.0);
    close(b.l_fe, 4f64.ln() + 5.0, 0.0, "(ln4,5,0)")?;
    let b = total_loss(0.37, 1.91, -0.42);
    ensure(b.l_fe - (b.l_a + b.l_r + b.l_s) == 0.0, || "l_fe is not the exact sum".into())?;

    let took = t.elapsed();
    within(Duration::from_secs(1), took)?;
    Ok(format!("zero/identity/permutation/translation cases in {took:.1?}"))
}

// ---------------------------------------------------------------- criterion 2

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut report = Vec::new();
    let layers: Vec<Tensor> = (0..3).map(|_| Tensor::from_vec(3, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
    let gold = vec![vec![0, 2, 1], vec![1, 0, 1]];
    for unit in [true, false] {
        let cfg = ExtractorConfig { hidden: 12, split: 4, unit_similarity: unit, ..Default::default() };
        let mut ext = AspectExtractor::new(cfg, vec![spec("A", 3), spec("B", 2)], 5, 3, 4).map_err(|e| e.to_string())?;
        ext.class_weights = vec![vec![0.5, 1.25, 1.25], vec![0.8, 1.2]];
        let model = ext.clone();
        let pick: [(&str, fn(&LossVars) -> Var); 4] =
            [("l_a", |l| l.l_a), ("l_r", |l| l.l_r), ("l_s", |l| l.l_s), ("l_fe", |l| l.l_fe)];
        for (name, which) in pick {
            let gc = gradcheck(&mut ext.params, 1e-6, 1e-8, |set| {
                let mut g = Graph::new();
                let vars: Vec<Var> = layers.iter().map(|l| g.constant(l.clone())).collect();
                let (_, loss) = model.loss_graph(&mut g, set, &vars, &gold).unwrap();
                let v = which(&loss);
                (g, v)
            });
            let label = if unit { name.to_string() } else { format!("{name}(raw)") };
            ensure(gc.max_rel_err <= 1e-4 && gc.checked > 0, || format!("{label}: {gc:?}"))?;
            report.push(format!("{label} {:.1e}", gc.max_rel_err));
        }
    }

    let mut set = ParamSet::new("mix");
    let mix = ScalarMix::new(&mut set, "mix", 3, true);
    set.get_mut(mix.logits).data_mut().copy_from_slice(&[0.4, -0.9, 1.3]);
    let weights = Tensor::from_vec(3, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let gc = gradcheck(&mut set, 1e-6, 1e-8, |s| {
        let mut g = Graph::new();
        let vars: Vec<Var> = layers.iter().map(|l| g.constant(l.clone())).collect();
        let e = mix.forward(&mut g, s, &vars).unwrap();
        let w = g.constant(weights.clone());
        let m = g.mul(e, w);
        let m = g.mul(m, e);
        let loss = g.sum_all(m);
        (g, loss)
    });
    ensure(gc.max_rel_err <= 1e-4, || format!("scalar_mix: {gc:?}"))?;
    report.push(format!("scalar_mix {:.1e}", gc.max_rel_err));

    let config = TransformerConfig {
        layers: 1,
        model_dim: 8,
        ff_dim: 12,
        heads: 2,
        integration: Integration::Aspects,
        ..TransformerConfig::desk()
    };
    let mut nmt = NmtModel::new(config, 12, 12, Some(6), 3).map_err(|e| e.to_string())?;
    ensure(nmt.params.iter().all(|(_, name, _)| !name.starts_with("classifier") && name != "shared"), || {
        "translation model owns extractor parameters".into()
    })?;
    let ling = Tensor::from_vec(3, 6, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (src, tgt): ([usize; 3], [usize; 2]) = ([5, 6, 7], [8, 9]);
    let model = nmt.clone();
    let gc = gradcheck(&mut nmt.params, 1e-5, 1e-6, |set| {
        let mut probe = model.clone();
        probe.params = set.clone();
        let mut g = Graph::new();
        let (loss, _) = probe.loss_graph(&mut g, &[&src], &[&tgt], Some(&[&ling]), &mut Dropout::eval());
        (g, loss)
    });
    ensure(gc.max_rel_err <= 1e-4 && gc.checked > 0, || format!("integration path: {gc:?}"))?;
    report.push(format!("integration {:.1e}", gc.max_rel_err));

    let took = t.elapsed();
    within(Duration::from_secs(30), took)?;
    Ok(format!("{} in {took:.1?}", report.join(", ")))
}

// ---------------------------------------------------------------- criterion 3

fn all_sequences(alphabet: [&'static str; 3], max_len: u32) -> Vec<Vec<&'static str>> {
    let mut out = Vec::new();
    for len in 1..=max_len {
        for code in 0..3usize.pow(len) {
            let mut c = code;
            out.push(
                (0..len)
                    .map(|_| {
                        let s = alphabet[c % 3];
                        c /= 3;
                        s
                    })
                    .collect(),
            );
        }
    }
    out
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..7);
    (0..len).map(|_| (b'a' + rng.gen_range(0..4u8)) as char).collect()
}

fn fuzz_pair(rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let words: Vec<String> = (0..rng.gen_range(0..25)).map(|_| random_word(rng)).collect();
    if rng.gen_bool(0.3) {
        let other = (0..rng.gen_range(0..25)).map(|_| random_word(rng)).collect();
        return (words, other);
    }
    let mut pieces = Vec::new();
    for w in &words {
        let mut rest = w.as_str();
        let mut first = true;
        while !rest.is_empty() {
            let cut = rng.gen_range(1..=rest.len());
            let piece = if first { rest[..cut].to_string() } else { format!("##{}", &rest[..cut]) };
            pieces.push(if rng.gen_bool(0.05) { "[UNK]".to_string() } else { piece });
            rest = &rest[cut..];
            first = false;
        }
    }
    (words, pieces)
}

fn alignment_oracle() -> Outcome {
    let t = Instant::now();
    let a_side = all_sequences(["a", "b", "c"], 6);
    let b_side = all_sequences(["a", "##b", "C"], 6);
    let (mut unique, mut total) = (0u64, 0u64);
    for a in &a_side {
        for b in &b_side {
            total += 1;
            let want = align_oracle::solve(a, b).expect("non-empty sides");
            if !want.unique {
                continue;
            }
            unique += 1;
            let got = monotonic_align(a, b);
            ensure(got == want.best, || {
                format!("{a:?} vs {b:?}: got {}, oracle {}", got.pharaoh(), want.best.pharaoh())
            })?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let (a, b) = fuzz_pair(&mut rng);
        let al = monotonic_align(&a, &b);
        al.check_partition(a.len(), b.len()).map_err(|e| format!("{a:?} vs {b:?}: {e}"))?;
        if a.is_empty() {
            continue;
        }
        let tags: Vec<usize> = (0..a.len()).collect();
        let projected = project_tags(&tags, a.len(), &al).map_err(|e| e.to_string())?;
        ensure(projected.len() == b.len() && projected.windows(2).all(|w| w[0] <= w[1]), || {
            format!("{a:?} vs {b:?}: projection is not monotone")
        })?;
    }
    let took = t.elapsed();
    within(Duration::from_secs(120), took)?;
    Ok(format!("{unique} unique-optimum pairs of {total} agree; 10000 fuzzed pairs partition; {took:.1?}"))
}

// ---------------------------------------------------------------- criteria 4-6

struct AspectStage {
    corpora: Corpora,
    vocabs: Vocabularies,
    encoder: Encoder,
    extractor: AspectExtractor,
    data: pipeline::AspectData,
    f1: F1Report,
    train_time: Duration,
}

impl AspectStage {
    fn run(cfg: &ExperimentConfig) -> Result<Self, String> {
        let t = Instant::now();
        let corpora = Corpora::generate(cfg).map_err(|e| e.to_string())?;
        let vocabs = pipeline::train_vocabularies(cfg, &corpora).map_err(|e| e.to_string())?;
        let (encoder, _) = pipeline::pretrain_encoder(cfg, &corpora, &vocabs.source).map_err(|e| e.to_string())?;
        let data = pipeline::aspect_data(cfg, &corpora, &vocabs.source).map_err(|e| e.to_string())?;
        let (extractor, _) = pipeline::train_extractor(cfg, &data, &encoder).map_err(|e| e.to_string())?;
        let f1 = pipeline::f1_report(&extractor, &encoder, &data).map_err(|e| e.to_string())?;
        Ok(Self { corpora, vocabs, encoder, extractor, data, f1, train_time: t.elapsed() })
    }

    /// Every byte the stage writes to disk in an experiment.
    fn artifacts(&self) -> Vec<(String, Vec<u8>)> {
        vec![
            ("encoder".into(), self.encoder.checkpoint().to_bytes()),
            ("extractor".into(), self.extractor.checkpoint().to_bytes()),
            ("f1_report".into(), self.f1.to_tsv().into_bytes()),
        ]
    }
}

/// Micro and macro F1 recomputed from scratch.
fn reference_f1(gold: &[usize], pred: &[usize]) -> (f64, f64) {
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    let mut counts: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
    for (&g, &p) in gold.iter().zip(pred) {
        counts.entry(g).or_default();
        counts.entry(p).or_default();
        if g == p {
            counts.get_mut(&g).unwrap().0 += 1.0;
        } else {
            counts.get_mut(&p).unwrap().1 += 1.0;
            counts.get_mut(&g).unwrap().2 += 1.0;
        }
    }
    let per_class: f64 = counts.values().map(|&(tp, fp, fn_)| if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 }).sum();
    (100.0 * correct as f64 / gold.len() as f64, 100.0 * per_class / counts.len() as f64)
}

fn extractor_adequacy(stage: &AspectStage) -> Outcome {
    let sentences = stage.corpora.heldout_sources();
    let mut lines = Vec::new();
    for (a, score) in stage.f1.aspects.iter().enumerate() {
        let floor = if score.name == WSH || score.name == SWP { 95.0 } else { 90.0 };
        ensure(score.subword.micro >= floor, || format!("{} sub-word micro-F1 {:.2} < {floor}", score.name, score.subword.micro))?;
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for (k, p) in stage.f1.predictions.iter().enumerate() {
            let per_word = if score.name == CPOS || score.name == FPOS {
                let tags = if score.name == CPOS { &sentences[k].cpos } else { &sentences[k].fpos };
                let spec = &stage.extractor.aspects[a];
                tags.iter().map(|t| spec.tags.iter().position(|x| x == t).unwrap()).collect()
            } else {
                p.word_starts.iter().map(|&i| p.gold[a][i]).collect::<Vec<_>>()
            };
            ensure(per_word == p.word_gold[a], || format!("{}: word gold of sentence {k} differs from the corpus", score.name))?;
            gold.extend(per_word);
            pred.extend(p.word_starts.iter().map(|&i| p.predicted[a][i]));
        }
        let (micro, macro_f1) = reference_f1(&gold, &pred);
        ensure(gold.len() == score.word_tokens, || format!("{}: {} words vs {}", score.name, gold.len(), score.word_tokens))?;
        close(micro, score.word.micro, 1e-9, &format!("{} word micro", score.name))?;
        close(macro_f1, score.word.macro_f1, 1e-9, &format!("{} word macro", score.name))?;
        ensure(format!("{micro:.2}/{macro_f1:.2}") == format!("{:.2}/{:.2}", score.word.micro, score.word.macro_f1), || {
            format!("{} word F1 differs at two decimals", score.name)
        })?;
        lines.push(format!("{} {:.2}", score.name, score.subword.micro));
    }
    within(Duration::from_secs(600), stage.train_time)?;
    Ok(format!("sub-word micro-F1 {}; word level recomputed exactly; {:.1?}", lines.join(", "), stage.train_time))
}

fn uniqueness(cfg: &ExperimentConfig, stage: &AspectStage) -> Outcome {
    let t = Instant::now();
    let probes = pipeline::probe_report(cfg, &stage.extractor, &stage.encoder, &stage.data).map_err(|e| e.to_string())?;
    let find = |s: &str, a: &str| probes.iter().find(|p| p.source == s && p.target == a).map(|p| p.f1.micro);
    let in_aspect = |a: &str| stage.f1.score(a).map(|s| s.subword.micro).unwrap();
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for (src, tgt) in [(WSH, CPOS), (CPOS, WSH)] {
        let f = find(src, tgt).ok_or("missing probe")?;
        let gap = in_aspect(tgt) - f;
        summary.push(format!("{src}->{tgt} {f:.2} vs {:.2}", in_aspect(tgt)));
        if gap < 30.0 {
            failures.push(format!("{src}->{tgt} gap {gap:.2} < 30"));
        }
    }
    for a in [CPOS, WSH] {
        let f = find(a, a).ok_or("missing control probe")?;
        summary.push(format!("{a}->{a} {f:.2}"));
        if (f - in_aspect(a)).abs() > 2.0 {
            failures.push(format!("{a} control off by {:.2}", (f - in_aspect(a)).abs()));
        }
    }
    let took = t.elapsed();
    if took > Duration::from_secs(600) {
        failures.push(format!("took {took:.1?}"));
    }
    let detail = format!("{}; {took:.1?}", summary.join(", "));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join(", ")))
    }
}

fn reconstruction(stage: &AspectStage) -> Outcome {
    let t = Instant::now();
    let r = pipeline::recon_report(&stage.extractor, &stage.encoder, &stage.corpora, &stage.vocabs.source).map_err(|e| e.to_string())?;
    let took = t.elapsed();
    ensure(r.mean <= 0.35, || format!("mean distance {:.4} > 0.35", r.mean))?;
    within(Duration::from_secs(60), took)?;
    Ok(format!("mean unit distance {:.4} over {} tokens; {took:.1?}", r.mean, r.tokens))
}

// ---------------------------------------------------------------- criterion 7

struct TranslationStage {
    vanilla: Vec<SystemRun>,
    augmented: Vec<SystemRun>,
    extractor_intact: bool,
    took: Duration,
}

impl TranslationStage {
    fn run(cfg: &ExperimentConfig, stage: &AspectStage) -> Result<Self, String> {
        let t = Instant::now();
        let before = (stage.encoder.checkpoint().to_bytes(), stage.extractor.checkpoint().to_bytes());
        let task = pipeline::translation_task(&stage.corpora, stage.vocabs.pair()).map_err(|e| e.to_string())?;
        let frozen = FrozenAspects { encoder: &stage.encoder, extractor: &stage.extractor };
        let seeds: Vec<u64> = (0..cfg.eval.seeds as u64).map(|k| cfg.eval.seed_base + k).collect();
        let pair = stage.vocabs.pair();
        let vanilla = pipeline::run_seeds(cfg, &task, pair, None, Integration::Off, &seeds, 1).map_err(|e| e.to_string())?;
        let augmented =
            pipeline::run_seeds(cfg, &task, pair, Some(&frozen), Integration::Aspects, &seeds, 1).map_err(|e| e.to_string())?;
        let after = (stage.encoder.checkpoint().to_bytes(), stage.extractor.checkpoint().to_bytes());
        Ok(Self { vanilla, augmented, extractor_intact: before == after, took: t.elapsed() })
    }

    fn artifacts(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for r in self.vanilla.iter().chain(&self.augmented) {
            out.push((format!("{} model", r.label()), r.run.model.checkpoint().to_bytes()));
            out.push((format!("{} log", r.label()), training_log_tsv(&r.run.log).into_bytes()));
            out.push((format!("{} test", r.label()), r.test.to_tsv().into_bytes()));
        }
        let summary = pipeline::bleu_summary_tsv(&[("vanilla", &self.vanilla), ("aspects", &self.augmented)]).unwrap_or_default();
        out.push(("bleu_summary".into(), summary.into_bytes()));
        out
    }
}

fn translation(cfg: &ExperimentConfig, stage: &TranslationStage) -> Outcome {
    let each = |runs: &[SystemRun]| runs.iter().map(|r| format!("{:.2}", r.test.score)).collect::<Vec<_>>().join("/");
    let scores = format!("vanilla {}, aspects {}", each(&stage.vanilla), each(&stage.augmented));
    let check = || -> Outcome {
        ensure(cfg.nmt.epochs <= 20, || format!("{} epochs configured", cfg.nmt.epochs))?;
        for r in stage.vanilla.iter().chain(&stage.augmented) {
            ensure(r.test.score >= 85.0, || format!("{} test BLEU {:.2} < 85", r.label(), r.test.score))?;
            ensure(r.run.frozen_intact, || format!("{}: frozen parts changed", r.label()))?;
        }
        ensure(stage.extractor_intact, || "encoder or extractor bytes changed during translation training".into())?;
        let (v, a) = (pipeline::mean_test_bleu(&stage.vanilla), pipeline::mean_test_bleu(&stage.augmented));
        ensure(a >= v - 1.0, || format!("aspect mean {a:.2} below vanilla mean {v:.2} - 1"))?;
        within(Duration::from_secs(1800), stage.took)?;
        Ok(format!("means {v:.2} / {a:.2}; extractor bytes unchanged"))
    };
    check().map(|m| format!("{scores}; {m}; {:.1?}", stage.took)).map_err(|e| format!("{e}; {scores}; {:.1?}", stage.took))
}

// ---------------------------------------------------------------- criterion 8

fn bleu_fixture() -> Outcome {
    let t = Instant::now();
    let text = include_str!("data/bleu_fixture.tsv");
    let mut cases = 0;
    let (mut saw_bp, mut saw_self) = (false, false);
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        ensure(cols.len() == 3, || format!("malformed fixture line `{line}`"))?;
        let hyps: Vec<&str> = cols[0].split(" ||| ").collect();
        let refs: Vec<&str> = cols[1].split(" ||| ").collect();
        let want: f64 = cols[2].trim().parse().map_err(|_| format!("bad score in `{line}`"))?;
        let got = corpus_bleu(&hyps, &refs).map_err(|e| e.to_string())?.score;
        ensure(format!("{got:.2}") == format!("{want:.2}"), || format!("`{}`: {got:.4} vs {want:.2}", cols[0]))?;
        saw_bp |= format!("{want:.2}") == "77.88";
        saw_self |= hyps == refs && want == 100.0;
        cases += 1;
    }
    ensure(cases == 10, || format!("{cases} fixture cases"))?;
    ensure(saw_bp && saw_self, || "fixture lacks the brevity-penalty or self-BLEU case".into())?;
    let took = t.elapsed();
    within(Duration::from_secs(1), took)?;
    Ok(format!("{cases} cases match to 2 decimals; {took:.1?}"))
}

// ---------------------------------------------------------------- criterion 9

fn compare(first: &[(String, Vec<u8>)], second: &[(String, Vec<u8>)]) -> Result<usize, String> {
    ensure(first.len() == second.len(), || "artifact lists differ in length".into())?;
    for ((name, a), (_, b)) in first.iter().zip(second) {
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(first.len())
}

fn determinism(cfg: &ExperimentConfig, aspects: &AspectStage, nmt: &TranslationStage) -> Outcome {
    let t = Instant::now();
    let again = AspectStage::run(cfg)?;
    let n4 = compare(&aspects.artifacts(), &again.artifacts())?;
    let nmt_again = TranslationStage::run(cfg, &again)?;
    let n7 = compare(&nmt.artifacts(), &nmt_again.artifacts())?;
    Ok(format!("{n4} extractor-stage and {n7} translation-stage artifacts byte-identical; {:.1?}", t.elapsed()))
}

// ---------------------------------------------------------------- driver

fn report(results: &mut Vec<(usize, bool)>, number: usize, title: &str, outcome: Outcome) {
    let (pass, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("{} criterion {number} ({title}): {detail}", if pass { "PASS" } else { "FAIL" });
    results.push((number, pass));
}

fn main() {
    let started = Instant::now();
    let cfg = ExperimentConfig::desk();
    let mut results = Vec::new();
    report(&mut results, 1, "loss identities", loss_identities());
    report(&mut results, 2, "gradient checks", gradient_checks());
    report(&mut results, 3, "alignment oracle", alignment_oracle());
    report(&mut results, 8, "BLEU fixture", bleu_fixture());

    match AspectStage::run(&cfg) {
        Ok(stage) => {
            report(&mut results, 4, "extractor adequacy", extractor_adequacy(&stage));
            report(&mut results, 5, "aspect uniqueness", uniqueness(&cfg, &stage));
            report(&mut results, 6, "reconstruction distance", reconstruction(&stage));
            match TranslationStage::run(&cfg, &stage) {
                Ok(nmt) => {
                    report(&mut results, 7, "translation quality", translation(&cfg, &nmt));
                    report(&mut results, 9, "determinism", determinism(&cfg, &stage, &nmt));
                }
                Err(e) => {
                    report(&mut results, 7, "translation quality", Err(e.clone()));
                    report(&mut results, 9, "determinism", Err(format!("no first run: {e}")));
                }
            }
        }
        Err(e) => {
            for (n, title) in [(4, "extractor adequacy"), (5, "aspect uniqueness"), (6, "reconstruction distance"), (7, "translation quality"), (9, "determinism")] {
                report(&mut results, n, title, Err(format!("extractor stage failed: {e}")));
            }
        }
    }

    results.sort();
    let passed = results.iter().filter(|r| r.1).count();
    let unexpected: Vec<usize> = results.iter().filter(|r| !r.1 && !EXPECTED_FAILURES.contains(&r.0)).map(|r| r.0).collect();
    println!("{passed}/{} criteria passed in {:.1?}", results.len(), started.elapsed());
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
