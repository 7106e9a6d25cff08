use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aspectnmt::align::monotonic_align;
use aspectnmt::aspects::{probe_tsv, AspectExtractor};
use aspectnmt::config::ExperimentConfig;
use aspectnmt::corpus::grammar::generate_corpus;
use aspectnmt::corpus::{load_corpus, save_corpus, Corpus, Format, TaggedSentence};
use aspectnmt::encoder::Encoder;
use aspectnmt::error::{Error, Result};
use aspectnmt::eval::{corpus_bleu, sentence_bleu};
use aspectnmt::pipeline::{self, AspectData};
use aspectnmt::tokenize::{subword_tokenize, train_subword_vocab, word_tokenize, SubwordVocab};
use aspectnmt::translate::{decode_all, train_nmt, training_log_tsv, FrozenAspects, NmtData, NmtModel, VocabPair};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aspectnmt", version, about = "Aspect vectors from contextual encoders and aspect-augmented translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a tagged parallel corpus from a grammar.
    GenCorpus(GenCorpus),
    /// Train a sub-word vocabulary on plain-text files.
    TrainVocab(TrainVocab),
    /// Split plain-text sentences into sub-words.
    Tokenize(Tokenize),
    /// Align words to their sub-words and print Pharaoh pairs.
    Align(Align),
    /// Pretrain the masked-LM contextual encoder.
    PretrainEncoder(PretrainEncoder),
    /// Train the aspect extractor on a tagged corpus.
    TrainAspects(TrainAspects),
    /// Per-aspect sub-word and word F1 of an extractor.
    F1Report(F1Report),
    /// Counterfactual probes between aspect vectors.
    ProbeReport(ProbeReport),
    /// Mean unit-normalized reconstruction distance.
    ReconDistance(ReconDistance),
    /// Train a translation model.
    TrainNmt(TrainNmt),
    /// Translate sentences with a trained model.
    Translate(Translate),
    /// Score hypotheses against references with BLEU.
    Evaluate(Evaluate),
    /// Run the full protocol: encoder, extractor, reports, translation runs.
    Experiment(Experiment),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config file; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Sub-word vocabulary file.
    #[arg(long)]
    vocab: PathBuf,
    /// Encoder checkpoint.
    #[arg(long)]
    encoder: PathBuf,
    /// Aspect extractor checkpoint.
    #[arg(long)]
    extractor: PathBuf,
}

#[derive(Args)]
struct GenCorpus {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// plain, tagged-tsv, or parallel (writes <out>.src and <out>.tgt).
    #[arg(long, default_value = "parallel")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainVocab {
    #[command(flatten)]
    config: ConfigArg,
    /// Plain-text training files.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Target vocabulary size; the config value when omitted.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Tokenize {
    #[arg(long)]
    vocab: PathBuf,
    /// Plain-text input; standard input when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Print ids instead of sub-word strings.
    #[arg(long)]
    ids: bool,
    /// Append position and shape labels to every piece.
    #[arg(long)]
    labels: bool,
}

#[derive(Args)]
struct Align {
    /// Plain-text word sequences.
    #[arg(long)]
    input: PathBuf,
    /// Pre-split sub-word lines, one per input line.
    #[arg(long, conflicts_with = "vocab", required_unless_present = "vocab")]
    subwords: Option<PathBuf>,
    /// Tokenize the input with this vocabulary instead.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainEncoder {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    vocab: PathBuf,
    /// Plain-text training sentences.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainAspects {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    /// Tagged-tsv training corpus.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct F1Report {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    models: ModelArgs,
    /// Tagged-tsv evaluation corpus.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeReport {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    models: ModelArgs,
    /// Tagged-tsv corpus the probes train on.
    #[arg(long)]
    train: PathBuf,
    /// Tagged-tsv corpus the probes are scored on.
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated source:target pairs; the config list when omitted.
    #[arg(long)]
    probes: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconDistance {
    #[command(flatten)]
    models: ModelArgs,
    /// Plain-text sentences.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainNmt {
    #[command(flatten)]
    config: ConfigArg,
    /// Shared (or source) sub-word vocabulary.
    #[arg(long)]
    vocab: PathBuf,
    /// Target vocabulary when source and target are not shared.
    #[arg(long)]
    target_vocab: Option<PathBuf>,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    val_src: PathBuf,
    #[arg(long)]
    val_ref: PathBuf,
    /// off, aspects, or aspects+leftover; the config value when omitted.
    #[arg(long)]
    integration: Option<String>,
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Translate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    target_vocab: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Source sentences, one per line; standard input when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Also print one sentence BLEU per line.
    #[arg(long)]
    sentence_level: bool,
    /// Write the report as TSV to this file.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct Experiment {
    #[command(flatten)]
    config: ConfigArg,
    /// First translation seed; the config value when omitted.
    #[arg(long)]
    seed_base: Option<u64>,
    /// Train the seeds of each system concurrently.
    #[arg(long)]
    parallel_seeds: bool,
    #[arg(long, default_value = "experiment_out")]
    out: PathBuf,
}

fn exit_code(category: &str) -> u8 {
    match category {
        "usage" => 2,
        "missing-file" => 3,
        "io" => 4,
        "parse" => 5,
        "config" => 6,
        "checkpoint" => 7,
        "shape" => 8,
        _ => 9,
    }
}

fn config(arg: &ConfigArg) -> Result<ExperimentConfig> {
    match &arg.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::desk()),
    }
}

fn read_text(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e)),
        None => {
            let mut s = String::new();
            for line in io::stdin().lock().lines() {
                s.push_str(&line.map_err(|e| Error::io("<stdin>", e))?);
                s.push('\n');
            }
            Ok(s)
        }
    }
}

fn plain(path: &Path) -> Result<Vec<Vec<String>>> {
    match load_corpus(path, Format::Plain, &ExperimentConfig::default().grammar()?.schema)? {
        Corpus::Plain(s) => Ok(s),
        _ => unreachable!("plain load returns plain sentences"),
    }
}

fn tagged(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<TaggedSentence>> {
    match load_corpus(path, Format::TaggedTsv, &cfg.grammar()?.schema)? {
        Corpus::Tagged(s) => Ok(s),
        _ => unreachable!("tagged load returns tagged sentences"),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn vocab_pair(source: &Path, target: Option<&Path>) -> Result<(SubwordVocab, Option<SubwordVocab>)> {
    Ok((SubwordVocab::load(source)?, target.map(SubwordVocab::load).transpose()?))
}

fn frozen_models(encoder: Option<&Path>, extractor: Option<&Path>) -> Result<Option<(Encoder, AspectExtractor)>> {
    match (encoder, extractor) {
        (Some(e), Some(x)) => Ok(Some((Encoder::load(e)?, AspectExtractor::load(x)?))),
        (None, None) => Ok(None),
        _ => Err(Error::Config("--encoder and --extractor must be given together".into())),
    }
}

fn examples(cfg: &ExperimentConfig, vocab: &SubwordVocab, train: &[TaggedSentence], eval: &[TaggedSentence]) -> Result<AspectData> {
    let aspects = aspectnmt::aspects::standard_aspects(&cfg.grammar()?.schema, train, vocab)?;
    Ok(AspectData {
        train: aspectnmt::aspects::prepare_examples(train, vocab, &aspects)?,
        heldout: aspectnmt::aspects::prepare_examples(eval, vocab, &aspects)?,
        aspects,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => {
            let cfg = config(&a.config)?;
            let pairs = generate_corpus(&cfg.grammar()?, a.count, a.seed)?;
            let corpus = match a.format.parse::<Format>()? {
                Format::Plain => Corpus::Plain(pairs.iter().map(|p| p.source.words.clone()).collect()),
                Format::TaggedTsv => Corpus::from_pairs_tagged(&pairs),
                Format::Parallel => Corpus::from_pairs_parallel(&pairs),
            };
            save_corpus(&corpus, &a.out)
        }
        Command::TrainVocab(a) => {
            let cfg = config(&a.config)?;
            let mut words = Vec::new();
            for p in &a.input {
                words.extend(plain(p)?.into_iter().flatten());
            }
            let size = a.size.unwrap_or(cfg.tokenizer.vocab_size);
            train_subword_vocab(words.iter().map(String::as_str), size)?.save(&a.out)
        }
        Command::Tokenize(a) => {
            let vocab = SubwordVocab::load(&a.vocab)?;
            let mut out = String::new();
            for line in read_text(a.input.as_deref())?.lines() {
                let seq = subword_tokenize(&word_tokenize(line), &vocab);
                let cells: Vec<String> = (0..seq.len())
                    .map(|i| {
                        let t = &seq.tokens[i];
                        let head = if a.ids { t.id.to_string() } else { t.surface.clone() };
                        if a.labels {
                            format!("{head}/{}/{}", seq.swp[i], seq.shapes[i])
                        } else {
                            head
                        }
                    })
                    .collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
            emit(None, &out)
        }
        Command::Align(a) => {
            let words = plain(&a.input)?;
            let pieces = match (&a.subwords, &a.vocab) {
                (Some(p), _) => plain(p)?,
                (None, Some(v)) => {
                    let vocab = SubwordVocab::load(v)?;
                    words.iter().map(|w| subword_tokenize(w, &vocab).surfaces()).collect()
                }
                (None, None) => unreachable!("clap requires one of --subwords and --vocab"),
            };
            if pieces.len() != words.len() {
                return Err(Error::Invalid(format!("{} word lines for {} sub-word lines", words.len(), pieces.len())));
            }
            let out: String = words.iter().zip(&pieces).map(|(w, p)| format!("{}\n", monotonic_align(w, p))).collect();
            emit(None, &out)
        }
        Command::PretrainEncoder(a) => {
            let cfg = config(&a.config)?;
            let vocab = SubwordVocab::load(&a.vocab)?;
            let ids: Vec<Vec<usize>> = plain(&a.input)?.iter().map(|w| subword_tokenize(w, &vocab).ids()).collect();
            let seed = a.seed.unwrap_or(cfg.encoder.seed);
            let (enc, report) = aspectnmt::encoder::pretrain_masked_lm(&ids, vocab.len(), &cfg.encoder.model, &cfg.encoder.hyper, seed)?;
            enc.save(&a.out)?;
            let mut text = String::from("epoch\tmlm_loss\n");
            for (k, l) in report.epoch_losses.iter().enumerate() {
                text.push_str(&format!("{}\t{l:.6}\n", k + 1));
            }
            emit(None, &text)
        }
        Command::TrainAspects(a) => {
            let mut cfg = config(&a.config)?;
            if let Some(s) = a.seed {
                cfg.aspects.seed = s;
            }
            let vocab = SubwordVocab::load(&a.vocab)?;
            let encoder = Encoder::load(&a.encoder)?;
            let train = tagged(&cfg, &a.input)?;
            let data = examples(&cfg, &vocab, &train, &[])?;
            let (ext, report) = pipeline::train_extractor(&cfg, &data, &encoder)?;
            ext.save(&a.out)?;
            let mut text = String::from("epoch\tl_a\tl_r\tl_s\tl_fe\n");
            for (k, l) in report.epochs.iter().enumerate() {
                text.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n", k + 1, l.l_a, l.l_r, l.l_s, l.l_fe));
            }
            emit(None, &text)
        }
        Command::F1Report(a) => {
            let cfg = config(&a.config)?;
            let vocab = SubwordVocab::load(&a.models.vocab)?;
            let encoder = Encoder::load(&a.models.encoder)?;
            let ext = AspectExtractor::load(&a.models.extractor)?;
            let eval = tagged(&cfg, &a.input)?;
            let heldout = aspectnmt::aspects::prepare_examples(&eval, &vocab, &ext.aspects)?;
            let data = AspectData { aspects: ext.aspects.clone(), train: Vec::new(), heldout };
            emit(a.out.as_deref(), &pipeline::f1_report(&ext, &encoder, &data)?.to_tsv())
        }
        Command::ProbeReport(a) => {
            let mut cfg = config(&a.config)?;
            if let Some(spec) = &a.probes {
                cfg.eval.probes = spec
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .split_once(':')
                            .map(|(s, t)| (s.to_string(), t.to_string()))
                            .ok_or_else(|| Error::Invalid(format!("probe `{p}` is not source:target")))
                    })
                    .collect::<Result<_>>()?;
            }
            let vocab = SubwordVocab::load(&a.models.vocab)?;
            let encoder = Encoder::load(&a.models.encoder)?;
            let ext = AspectExtractor::load(&a.models.extractor)?;
            let train = aspectnmt::aspects::prepare_examples(&tagged(&cfg, &a.train)?, &vocab, &ext.aspects)?;
            let heldout = aspectnmt::aspects::prepare_examples(&tagged(&cfg, &a.input)?, &vocab, &ext.aspects)?;
            let data = AspectData { aspects: ext.aspects.clone(), train, heldout };
            emit(a.out.as_deref(), &probe_tsv(&pipeline::probe_report(&cfg, &ext, &encoder, &data)?))
        }
        Command::ReconDistance(a) => {
            let vocab = SubwordVocab::load(&a.models.vocab)?;
            let encoder = Encoder::load(&a.models.encoder)?;
            let ext = AspectExtractor::load(&a.models.extractor)?;
            let ids: Vec<Vec<usize>> = plain(&a.input)?.iter().map(|w| subword_tokenize(w, &vocab).ids()).collect();
            let r = aspectnmt::aspects::reconstruction_distance(&ext, &encoder, &ids)?;
            emit(a.out.as_deref(), &pipeline::recon_text(&r))
        }
        Command::TrainNmt(a) => {
            let cfg = config(&a.config)?;
            let mut nmt = cfg.nmt.clone();
            if let Some(mode) = &a.integration {
                nmt.integration = mode.parse()?;
            }
            let (src_vocab, tgt_vocab) = vocab_pair(&a.vocab, a.target_vocab.as_deref())?;
            let vocabs = VocabPair { source: &src_vocab, target: tgt_vocab.as_ref().unwrap_or(&src_vocab) };
            let models = frozen_models(a.encoder.as_deref(), a.extractor.as_deref())?;
            let frozen = models.as_ref().map(|(e, x)| FrozenAspects { encoder: e, extractor: x });
            if nmt.integration.is_on() && frozen.is_none() {
                return Err(Error::Config(format!("integration `{}` needs --encoder and --extractor", nmt.integration)));
            }
            let train = NmtData::from_words(&plain(&a.src)?, &plain(&a.tgt)?, vocabs)?;
            let val = NmtData::from_words(&plain(&a.val_src)?, &plain(&a.val_ref)?, vocabs)?;
            let frozen = if nmt.integration.is_on() { frozen } else { None };
            let run = train_nmt(&train, &val, vocabs, &nmt, frozen.as_ref(), a.seed)?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            run.model.save(&a.out.join("model.ckpt"))?;
            emit(Some(&a.out.join("training_log.tsv")), &training_log_tsv(&run.log))?;
            emit(None, &format!("best_val_sentence_bleu\t{:.4}\n", run.best_val_bleu))
        }
        Command::Translate(a) => {
            let model = NmtModel::load(&a.model)?;
            let (src_vocab, tgt_vocab) = vocab_pair(&a.vocab, a.target_vocab.as_deref())?;
            let vocabs = VocabPair { source: &src_vocab, target: tgt_vocab.as_ref().unwrap_or(&src_vocab) };
            model.check_vocabs(vocabs)?;
            let models = frozen_models(a.encoder.as_deref(), a.extractor.as_deref())?;
            let frozen = models.as_ref().map(|(e, x)| FrozenAspects { encoder: e, extractor: x });
            model.check_aspects(frozen.as_ref())?;
            let text = read_text(a.input.as_deref())?;
            let lines: Vec<Vec<usize>> = text.lines().map(|l| subword_tokenize(&word_tokenize(l), vocabs.source).ids()).collect();
            let kept: Vec<usize> = (0..lines.len()).filter(|&i| !lines[i].is_empty()).collect();
            let src: Vec<Vec<usize>> = kept.iter().map(|&i| lines[i].clone()).collect();
            let ling = match &frozen {
                Some(f) if model.integration.is_some() => Some(f.rows(&src, model.config.integration)?),
                _ => None,
            };
            let beam = a.beam.unwrap_or(model.config.beam_size);
            let alpha = a.alpha.unwrap_or(model.config.length_norm_alpha);
            let hyps = decode_all(&model, vocabs.target, &src, ling.as_deref(), beam, alpha)?;
            let mut out = vec![String::new(); lines.len()];
            for (i, h) in kept.into_iter().zip(hyps) {
                out[i] = h;
            }
            let body: String = out.iter().map(|l| format!("{l}\n")).collect();
            emit(a.out.as_deref(), &body)
        }
        Command::Evaluate(a) => {
            let hyps: Vec<String> = read_text(Some(&a.hyp))?.lines().map(String::from).collect();
            let refs: Vec<String> = read_text(Some(&a.reference))?.lines().map(String::from).collect();
            let report = corpus_bleu(&hyps, &refs)?;
            let mut text = format!("{report}\n");
            if a.sentence_level {
                for (k, (h, r)) in hyps.iter().zip(&refs).enumerate() {
                    text.push_str(&format!("{}\t{:.2}\n", k + 1, sentence_bleu(h, r)));
                }
            }
            if let Some(p) = &a.tsv {
                emit(Some(p), &report.to_tsv())?;
            }
            emit(None, &text)
        }
        Command::Experiment(a) => {
            let mut cfg = config(&a.config)?;
            if let Some(s) = a.seed_base {
                cfg.eval.seed_base = s;
            }
            let threads = if a.parallel_seeds { pipeline::thread_cap().min(cfg.eval.seeds) } else { 1 };
            let outcome = pipeline::run_experiment(&cfg, &a.out, threads)?;
            let summary = read_text(Some(&a.out.join("bleu_summary.tsv")))?;
            emit(None, &format!("{}\n{summary}frozen_intact\t{}\n", outcome.f1, outcome.frozen_intact))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(exit_code("usage"));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{category}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(category))
        }
    }
}
