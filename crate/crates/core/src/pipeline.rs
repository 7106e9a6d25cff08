//! End-to-end experiment stages shared by the command-line tool and the
//! acceptance harness.

use std::path::Path;

use log::info;

use crate::aspects::{
    evaluate_f1, hidden_features, prepare_examples, probe_from_features, probe_tsv, reconstruction_distance,
    standard_aspects, train_aspect_extractor, AspectExample, AspectExtractor, ExtractorReport, F1Report,
    ProbeResult, ReconstructionDistance,
};
use crate::config::ExperimentConfig;
use crate::corpus::grammar::generate_corpus;
use crate::corpus::{AspectSpec, ParallelPair, TaggedSentence};
use crate::encoder::{pretrain_masked_lm, Encoder, PretrainReport};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, summarize_runs, BleuReport, RunScores};
use crate::tokenize::{subword_tokenize, train_subword_vocab, SubwordVocab};
use crate::translate::{decode_all, train_nmt, training_log_tsv, FrozenAspects, Integration, NmtData, NmtRun, VocabPair};

/// Every corpus an experiment reads, generated from the configured grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub extractor: Vec<ParallelPair>,
    pub heldout: Vec<ParallelPair>,
    pub nmt_train: Vec<ParallelPair>,
    pub nmt_val: Vec<ParallelPair>,
    pub nmt_test: Vec<ParallelPair>,
}

impl Corpora {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let g = cfg.grammar()?;
        let c = &cfg.corpus;
        let extractor = generate_corpus(&g, c.extractor_sentences, c.extractor_seed)?;
        let heldout = generate_corpus(&g, c.heldout_sentences, c.heldout_seed)?;
        let mut nmt = generate_corpus(&g, c.nmt_train + c.nmt_val + c.nmt_test, c.nmt_seed)?;
        let nmt_test = nmt.split_off(c.nmt_train + c.nmt_val);
        let nmt_val = nmt.split_off(c.nmt_train);
        Ok(Self { extractor, heldout, nmt_train: nmt, nmt_val, nmt_test })
    }

    pub fn extractor_sources(&self) -> Vec<TaggedSentence> {
        self.extractor.iter().map(|p| p.source.clone()).collect()
    }

    pub fn heldout_sources(&self) -> Vec<TaggedSentence> {
        self.heldout.iter().map(|p| p.source.clone()).collect()
    }
}

/// The source vocabulary, plus a target one when vocabularies are separate.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabularies {
    pub source: SubwordVocab,
    pub target: Option<SubwordVocab>,
}

impl Vocabularies {
    pub fn pair(&self) -> VocabPair<'_> {
        VocabPair { source: &self.source, target: self.target.as_ref().unwrap_or(&self.source) }
    }
}

/// Trains on both sides of the extractor corpus (shared) or on each side
/// separately.
pub fn train_vocabularies(cfg: &ExperimentConfig, corpora: &Corpora) -> Result<Vocabularies> {
    let size = cfg.tokenizer.vocab_size;
    let src = corpora.extractor.iter().flat_map(|p| p.source.words.iter().map(String::as_str));
    let tgt = corpora.extractor.iter().flat_map(|p| p.target.iter().map(String::as_str));
    if cfg.tokenizer.shared_vocab {
        Ok(Vocabularies { source: train_subword_vocab(src.chain(tgt), size)?, target: None })
    } else {
        Ok(Vocabularies { source: train_subword_vocab(src, size)?, target: Some(train_subword_vocab(tgt, size)?) })
    }
}

pub fn subword_ids(sentences: &[TaggedSentence], vocab: &SubwordVocab) -> Vec<Vec<usize>> {
    sentences.iter().map(|s| subword_tokenize(&s.words, vocab).ids()).collect()
}

pub fn pretrain_encoder(cfg: &ExperimentConfig, corpora: &Corpora, vocab: &SubwordVocab) -> Result<(Encoder, PretrainReport)> {
    let ids = subword_ids(&corpora.extractor_sources(), vocab);
    info!("pretraining the contextual encoder on {} sentences", ids.len());
    pretrain_masked_lm(&ids, vocab.len(), &cfg.encoder.model, &cfg.encoder.hyper, cfg.encoder.seed)
}

/// Gold-tagged extractor training and held-out examples.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectData {
    pub aspects: Vec<AspectSpec>,
    pub train: Vec<AspectExample>,
    pub heldout: Vec<AspectExample>,
}

pub fn aspect_data(cfg: &ExperimentConfig, corpora: &Corpora, vocab: &SubwordVocab) -> Result<AspectData> {
    let schema = cfg.grammar()?.schema;
    let train_src = corpora.extractor_sources();
    let aspects = standard_aspects(&schema, &train_src, vocab)?;
    let train = prepare_examples(&train_src, vocab, &aspects)?;
    let heldout = prepare_examples(&corpora.heldout_sources(), vocab, &aspects)?;
    Ok(AspectData { aspects, train, heldout })
}

pub fn train_extractor(cfg: &ExperimentConfig, data: &AspectData, encoder: &Encoder) -> Result<(AspectExtractor, ExtractorReport)> {
    info!("training the aspect extractor on {} sentences", data.train.len());
    train_aspect_extractor(encoder, &data.train, data.aspects.clone(), cfg.aspects.model.clone(), &cfg.aspects.hyper, cfg.aspects.seed)
}

pub fn f1_report(extractor: &AspectExtractor, encoder: &Encoder, data: &AspectData) -> Result<F1Report> {
    evaluate_f1(extractor, encoder, &data.heldout)
}

/// Probes every configured `source:target` pair; features are computed once.
pub fn probe_report(cfg: &ExperimentConfig, extractor: &AspectExtractor, encoder: &Encoder, data: &AspectData) -> Result<Vec<ProbeResult>> {
    let index = |name: &str| {
        extractor.aspect_index(name).ok_or_else(|| Error::Config(format!("probe names unknown aspect `{name}`")))
    };
    let pairs: Vec<(usize, usize)> = cfg.eval.probes.iter().map(|(s, t)| Ok((index(s)?, index(t)?))).collect::<Result<_>>()?;
    let train_h = hidden_features(extractor, encoder, &data.train)?;
    let eval_h = hidden_features(extractor, encoder, &data.heldout)?;
    let mut out = Vec::with_capacity(pairs.len());
    for (source, target) in pairs {
        let r = probe_from_features(
            extractor,
            (&train_h, &data.train),
            (&eval_h, &data.heldout),
            source,
            target,
            &cfg.aspects.hyper,
            cfg.aspects.probe_seed,
        )?;
        info!("probe {} -> {}: {:.2}", r.source, r.target, r.f1.micro);
        out.push(r);
    }
    Ok(out)
}

pub fn recon_report(extractor: &AspectExtractor, encoder: &Encoder, corpora: &Corpora, vocab: &SubwordVocab) -> Result<ReconstructionDistance> {
    reconstruction_distance(extractor, encoder, &subword_ids(&corpora.heldout_sources(), vocab))
}

pub fn recon_text(r: &ReconstructionDistance) -> String {
    format!("mean_unit_distance\t{:.6}\ntokens\t{}\nskipped_zero_norm\t{}\n", r.mean, r.tokens, r.skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationTask {
    pub train: NmtData,
    pub val: NmtData,
    pub test: NmtData,
}

pub fn translation_task(corpora: &Corpora, vocabs: VocabPair) -> Result<TranslationTask> {
    Ok(TranslationTask {
        train: NmtData::from_pairs(&corpora.nmt_train, vocabs)?,
        val: NmtData::from_pairs(&corpora.nmt_val, vocabs)?,
        test: NmtData::from_pairs(&corpora.nmt_test, vocabs)?,
    })
}

/// One trained translation system and its test score.
#[derive(Debug, Clone)]
pub struct SystemRun {
    pub system: String,
    pub seed: u64,
    pub run: NmtRun,
    pub test: BleuReport,
    pub hypotheses: Vec<String>,
}

impl SystemRun {
    pub fn label(&self) -> String {
        format!("{}_seed{}", self.system, self.seed)
    }
}

pub fn system_name(mode: Integration) -> &'static str {
    match mode {
        Integration::Off => "vanilla",
        Integration::Aspects => "aspects",
        Integration::AspectsLeftover => "aspects_leftover",
    }
}

pub fn run_system(
    cfg: &ExperimentConfig,
    task: &TranslationTask,
    vocabs: VocabPair,
    aspects: Option<&FrozenAspects>,
    mode: Integration,
    seed: u64,
) -> Result<SystemRun> {
    let config = crate::translate::TransformerConfig { integration: mode, ..cfg.nmt.clone() };
    info!("training {} translation model, seed {seed}", system_name(mode));
    let run = train_nmt(&task.train, &task.val, vocabs, &config, aspects, seed)?;
    let ling = match (mode.is_on(), aspects) {
        (true, Some(a)) => Some(a.rows(&task.test.src, mode)?),
        _ => None,
    };
    let hypotheses = decode_all(&run.model, vocabs.target, &task.test.src, ling.as_deref(), config.beam_size, config.length_norm_alpha)?;
    let test = corpus_bleu(&hypotheses, &task.test.references)?;
    info!("{} seed {seed}: test BLEU {:.2}", system_name(mode), test.score);
    Ok(SystemRun { system: system_name(mode).to_string(), seed, run, test, hypotheses })
}

/// Worker threads allowed by `ASPECTNMT_THREADS`, else the available cores.
pub fn thread_cap() -> usize {
    std::env::var("ASPECTNMT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs one system per seed, `threads` at a time; results keep seed order.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    task: &TranslationTask,
    vocabs: VocabPair,
    aspects: Option<&FrozenAspects>,
    mode: Integration,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SystemRun>> {
    let mut out = Vec::with_capacity(seeds.len());
    for group in seeds.chunks(threads.max(1)) {
        if group.len() == 1 {
            out.push(run_system(cfg, task, vocabs, aspects, mode, group[0])?);
            continue;
        }
        let results: Vec<Result<SystemRun>> = std::thread::scope(|s| {
            let handles: Vec<_> =
                group.iter().map(|&seed| s.spawn(move || run_system(cfg, task, vocabs, aspects, mode, seed))).collect();
            handles.into_iter().map(|h| h.join().expect("translation worker panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn scores(runs: &[SystemRun]) -> Vec<RunScores> {
    runs.iter()
        .map(|r| RunScores {
            run: format!("seed{}", r.seed),
            scores: vec![("test_bleu".into(), r.test.score), ("best_val_sentence_bleu".into(), r.run.best_val_bleu)],
        })
        .collect()
}

/// Per-seed and mean/min/max BLEU of each system, one table.
pub fn bleu_summary_tsv(systems: &[(&str, &[SystemRun])]) -> Result<String> {
    let mut out = String::new();
    for (k, (name, runs)) in systems.iter().enumerate() {
        let table = summarize_runs(&scores(runs))?.to_tsv(name);
        let body = if k == 0 { table.as_str() } else { table.split_once('\n').map_or("", |(_, rest)| rest) };
        out.push_str(body);
    }
    Ok(out)
}

pub fn mean_test_bleu(runs: &[SystemRun]) -> f64 {
    runs.iter().map(|r| r.test.score).sum::<f64>() / runs.len().max(1) as f64
}

/// Everything `run_experiment` produced, also written under the output dir.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub f1: F1Report,
    pub probes: Vec<ProbeResult>,
    pub recon: ReconstructionDistance,
    pub vanilla: Vec<SystemRun>,
    pub augmented: Vec<SystemRun>,
    pub frozen_intact: bool,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Encoder → extractor → reports → vanilla and aspect-augmented translation
/// over every seed → BLEU summary.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out.join("training_logs")).map_err(|e| Error::io(out, e))?;
    std::fs::create_dir_all(out.join("models")).map_err(|e| Error::io(out, e))?;
    write(&out.join("experiment.cfg"), &cfg.render())?;

    let corpora = Corpora::generate(cfg)?;
    let vocabs = train_vocabularies(cfg, &corpora)?;
    vocabs.source.save(&out.join("vocab.txt"))?;
    if let Some(t) = &vocabs.target {
        t.save(&out.join("target_vocab.txt"))?;
    }
    let (encoder, _) = pretrain_encoder(cfg, &corpora, &vocabs.source)?;
    encoder.save(&out.join("models/encoder.ckpt"))?;
    let data = aspect_data(cfg, &corpora, &vocabs.source)?;
    let (extractor, _) = train_extractor(cfg, &data, &encoder)?;
    extractor.save(&out.join("models/extractor.ckpt"))?;

    let f1 = f1_report(&extractor, &encoder, &data)?;
    write(&out.join("f1_report.tsv"), &f1.to_tsv())?;
    let probes = probe_report(cfg, &extractor, &encoder, &data)?;
    write(&out.join("probe_report.tsv"), &probe_tsv(&probes))?;
    let recon = recon_report(&extractor, &encoder, &corpora, &vocabs.source)?;
    write(&out.join("recon.txt"), &recon_text(&recon))?;

    let task = translation_task(&corpora, vocabs.pair())?;
    let frozen = FrozenAspects { encoder: &encoder, extractor: &extractor };
    let seeds: Vec<u64> = (0..cfg.eval.seeds as u64).map(|k| cfg.eval.seed_base + k).collect();
    let mode = if cfg.nmt.integration.is_on() { cfg.nmt.integration } else { Integration::Aspects };
    let vanilla = run_seeds(cfg, &task, vocabs.pair(), None, Integration::Off, &seeds, threads)?;
    let augmented = run_seeds(cfg, &task, vocabs.pair(), Some(&frozen), mode, &seeds, threads)?;
    for r in vanilla.iter().chain(&augmented) {
        write(&out.join(format!("training_logs/{}.tsv", r.label())), &training_log_tsv(&r.run.log))?;
        r.run.model.save(&out.join(format!("models/{}.ckpt", r.label())))?;
    }
    let summary = bleu_summary_tsv(&[("vanilla", &vanilla), (system_name(mode), &augmented)])?;
    write(&out.join("bleu_summary.tsv"), &summary)?;
    let frozen_intact = augmented.iter().all(|r| r.run.frozen_intact);
    Ok(ExperimentOutcome { f1, probes, recon, vanilla, augmented, frozen_intact })
}
