//! Experiment configuration: one INI-like file with `[corpus]`,
//! `[tokenizer]`, `[encoder]`, `[aspects]`, `[nmt]` and `[eval]` sections.
//! Every key is optional and falls back to the desk-scale default.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aspects::{ExtractorConfig, ExtractorHyper};
use crate::corpus::grammar::GrammarSpec;
use crate::encoder::{EncoderConfig, PretrainHyper};
use crate::error::{Error, Result};
use crate::sections::Document;
use crate::translate::TransformerConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSettings {
    /// Grammar file; `None` uses the bundled desk grammar.
    pub grammar: Option<PathBuf>,
    /// Tagged sentences for the encoder and the extractor.
    pub extractor_sentences: usize,
    pub extractor_seed: u64,
    /// Held-out tagged sentences for F1, probes and reconstruction.
    pub heldout_sentences: usize,
    pub heldout_seed: u64,
    pub nmt_train: usize,
    pub nmt_val: usize,
    pub nmt_test: usize,
    pub nmt_seed: u64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            grammar: None,
            extractor_sentences: 5000,
            extractor_seed: 11,
            heldout_sentences: 500,
            heldout_seed: 12,
            nmt_train: 2000,
            nmt_val: 200,
            nmt_test: 200,
            nmt_seed: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
    /// One vocabulary over both languages; otherwise the target side gets
    /// its own vocabulary of the same size.
    pub shared_vocab: bool,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self { vocab_size: 600, shared_vocab: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSettings {
    pub model: EncoderConfig,
    pub hyper: PretrainHyper,
    pub seed: u64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            model: EncoderConfig::default(),
            hyper: PretrainHyper { epochs: 10, lr: 2e-3, ..PretrainHyper::default() },
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspectSettings {
    pub model: ExtractorConfig,
    pub hyper: ExtractorHyper,
    pub seed: u64,
    pub probe_seed: u64,
}

impl Default for AspectSettings {
    fn default() -> Self {
        Self {
            model: ExtractorConfig::default(),
            hyper: ExtractorHyper { epochs: 10, ..ExtractorHyper::default() },
            seed: 5,
            probe_seed: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    /// Translation runs per system; seeds are `seed_base, seed_base + 1, …`.
    pub seeds: usize,
    pub seed_base: u64,
    /// `source:target` aspect pairs for the probe report.
    pub probes: Vec<(String, String)>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let probes = [("WSH", "CPOS"), ("CPOS", "WSH"), ("CPOS", "CPOS"), ("WSH", "WSH")];
        Self { seeds: 3, seed_base: 1, probes: probes.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSettings,
    pub tokenizer: TokenizerSettings,
    pub encoder: EncoderSettings,
    pub aspects: AspectSettings,
    pub nmt: TransformerConfig,
    pub eval: EvalSettings,
}

fn value<T: FromStr>(file: &str, line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::parse(file, line, format!("bad value `{raw}` for `{key}`")))
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// Parses `text`; relative grammar paths resolve against `base`.
    pub fn parse(file: &str, text: &str, base: Option<&Path>) -> Result<Self> {
        let doc = Document::parse(file, text)?;
        let mut cfg = Self::default();
        if let Some(nmt) = doc.section("nmt") {
            for e in &nmt.entries {
                let (k, v) = e.key_value(file)?;
                if k == "preset" {
                    cfg.nmt = TransformerConfig::preset(v).map_err(|err| Error::parse(file, e.line, err.to_string()))?;
                }
            }
        }
        for section in &doc.sections {
            for e in &section.entries {
                let (k, v) = e.key_value(file)?;
                let l = e.line;
                let known = match section.name.as_str() {
                    "corpus" => cfg.set_corpus(file, l, k, v, base)?,
                    "tokenizer" => cfg.set_tokenizer(file, l, k, v)?,
                    "encoder" => cfg.set_encoder(file, l, k, v)?,
                    "aspects" => cfg.set_aspects(file, l, k, v)?,
                    "nmt" => k == "preset" || cfg.set_nmt(file, l, k, v)?,
                    "eval" => cfg.set_eval(file, l, k, v)?,
                    other => return Err(Error::parse(file, section.line, format!("unknown section [{other}]"))),
                };
                if !known {
                    return Err(Error::parse(file, l, format!("unknown key `{k}` in [{}]", section.name)));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text, path.parent())
    }

    fn set_corpus(&mut self, f: &str, l: usize, k: &str, v: &str, base: Option<&Path>) -> Result<bool> {
        let c = &mut self.corpus;
        match k {
            "grammar" => {
                c.grammar = if v == "desk" {
                    None
                } else {
                    let p = PathBuf::from(v);
                    Some(match base {
                        Some(b) if p.is_relative() => b.join(p),
                        _ => p,
                    })
                }
            }
            "extractor_sentences" => c.extractor_sentences = value(f, l, k, v)?,
            "extractor_seed" => c.extractor_seed = value(f, l, k, v)?,
            "heldout_sentences" => c.heldout_sentences = value(f, l, k, v)?,
            "heldout_seed" => c.heldout_seed = value(f, l, k, v)?,
            "nmt_train" => c.nmt_train = value(f, l, k, v)?,
            "nmt_val" => c.nmt_val = value(f, l, k, v)?,
            "nmt_test" => c.nmt_test = value(f, l, k, v)?,
            "nmt_seed" => c.nmt_seed = value(f, l, k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_tokenizer(&mut self, f: &str, l: usize, k: &str, v: &str) -> Result<bool> {
        match k {
            "vocab_size" => self.tokenizer.vocab_size = value(f, l, k, v)?,
            "shared_vocab" => self.tokenizer.shared_vocab = value(f, l, k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_encoder(&mut self, f: &str, l: usize, k: &str, v: &str) -> Result<bool> {
        let (m, h) = (&mut self.encoder.model, &mut self.encoder.hyper);
        match k {
            "layers" => m.layers = value(f, l, k, v)?,
            "model_dim" => m.model_dim = value(f, l, k, v)?,
            "heads" => m.heads = value(f, l, k, v)?,
            "ff_dim" => m.ff_dim = value(f, l, k, v)?,
            "max_positions" => m.max_positions = value(f, l, k, v)?,
            "mask_rate" => m.mask_rate = value(f, l, k, v)?,
            "dropout" => m.dropout = value(f, l, k, v)?,
            "epochs" => h.epochs = value(f, l, k, v)?,
            "batch_sentences" => h.batch_sentences = value(f, l, k, v)?,
            "lr" => h.lr = value(f, l, k, v)?,
            "warmup_steps" => h.warmup_steps = value(f, l, k, v)?,
            "seed" => self.encoder.seed = value(f, l, k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_aspects(&mut self, f: &str, l: usize, k: &str, v: &str) -> Result<bool> {
        let (m, h) = (&mut self.aspects.model, &mut self.aspects.hyper);
        match k {
            "hidden" => m.hidden = value(f, l, k, v)?,
            "split" => m.split = value(f, l, k, v)?,
            "include_leftover_in_similarity" => m.include_leftover_in_similarity = value(f, l, k, v)?,
            "unit_similarity" => m.unit_similarity = value(f, l, k, v)?,
            "normalize_mix" => m.normalize_mix = value(f, l, k, v)?,
            "epochs" => h.epochs = value(f, l, k, v)?,
            "batch_sentences" => h.batch_sentences = value(f, l, k, v)?,
            "lr" => h.lr = value(f, l, k, v)?,
            "momentum" => h.momentum = value(f, l, k, v)?,
            "clip_norm" => h.clip_norm = value(f, l, k, v)?,
            "decay" => h.decay = value(f, l, k, v)?,
            "patience" => h.patience = value(f, l, k, v)?,
            "class_weighting" => h.class_weighting = value(f, l, k, v)?,
            "seed" => self.aspects.seed = value(f, l, k, v)?,
            "probe_seed" => self.aspects.probe_seed = value(f, l, k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_nmt(&mut self, f: &str, l: usize, k: &str, v: &str) -> Result<bool> {
        let n = &mut self.nmt;
        match k {
            "layers" => n.layers = value(f, l, k, v)?,
            "model_dim" => n.model_dim = value(f, l, k, v)?,
            "ff_dim" => n.ff_dim = value(f, l, k, v)?,
            "heads" => n.heads = value(f, l, k, v)?,
            "dropout" => n.dropout = value(f, l, k, v)?,
            "label_smoothing" => n.label_smoothing = value(f, l, k, v)?,
            "opt_factor" => n.opt_factor = value(f, l, k, v)?,
            "opt_warmup" => n.opt_warmup = value(f, l, k, v)?,
            "grad_accumulation" => n.grad_accumulation = value(f, l, k, v)?,
            "batch_tokens" => n.batch_tokens = value(f, l, k, v)?,
            "epochs" => n.epochs = value(f, l, k, v)?,
            "max_positions" => n.max_positions = value(f, l, k, v)?,
            "beam_size" => n.beam_size = value(f, l, k, v)?,
            "length_norm_alpha" => n.length_norm_alpha = value(f, l, k, v)?,
            "integration" => n.integration = v.parse().map_err(|e: Error| Error::parse(f, l, e.to_string()))?,
            "validations_per_epoch" => n.validations_per_epoch = value(f, l, k, v)?,
            "shared_embeddings" => n.shared_embeddings = value(f, l, k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_eval(&mut self, f: &str, l: usize, k: &str, v: &str) -> Result<bool> {
        match k {
            "seeds" => self.eval.seeds = value(f, l, k, v)?,
            "seed_base" => self.eval.seed_base = value(f, l, k, v)?,
            "probes" => {
                self.eval.probes = v
                    .split_whitespace()
                    .map(|p| {
                        p.split_once(':')
                            .map(|(a, b)| (a.to_string(), b.to_string()))
                            .ok_or_else(|| Error::parse(f, l, format!("probe `{p}` is not `source:target`")))
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if let Some(g) = &c.grammar {
            if !g.exists() {
                return Err(Error::io(g, std::io::Error::new(std::io::ErrorKind::NotFound, "grammar file not found")));
            }
        }
        if c.extractor_sentences == 0 || c.heldout_sentences == 0 || c.nmt_train == 0 || c.nmt_val == 0 || c.nmt_test == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        if self.tokenizer.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        self.encoder.model.validate()?;
        if self.encoder.hyper.batch_sentences == 0 || self.aspects.hyper.batch_sentences == 0 {
            return Err(Error::Config("batch_sentences must be positive".into()));
        }
        if self.aspects.model.split == 0 {
            return Err(Error::Config("aspect split must be positive".into()));
        }
        self.nmt.validate()?;
        if !self.tokenizer.shared_vocab && self.nmt.shared_embeddings {
            return Err(Error::Config("separate vocabularies need shared_embeddings = false".into()));
        }
        if self.eval.seeds == 0 {
            return Err(Error::Config("eval seeds must be positive".into()));
        }
        Ok(())
    }

    pub fn grammar(&self) -> Result<GrammarSpec> {
        match &self.corpus.grammar {
            None => Ok(GrammarSpec::desk()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                GrammarSpec::parse(&p.display().to_string(), &text)
            }
        }
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn render(&self) -> String {
        let c = &self.corpus;
        let (em, eh) = (&self.encoder.model, &self.encoder.hyper);
        let (am, ah) = (&self.aspects.model, &self.aspects.hyper);
        let n = &self.nmt;
        let grammar = c.grammar.as_ref().map_or_else(|| "desk".to_string(), |p| p.display().to_string());
        let probes: Vec<String> = self.eval.probes.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        let mut out = String::new();
        let mut section = |name: &str, items: Vec<(&str, String)>| {
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in items {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        };
        section(
            "corpus",
            vec![
                ("grammar", grammar),
                ("extractor_sentences", c.extractor_sentences.to_string()),
                ("extractor_seed", c.extractor_seed.to_string()),
                ("heldout_sentences", c.heldout_sentences.to_string()),
                ("heldout_seed", c.heldout_seed.to_string()),
                ("nmt_train", c.nmt_train.to_string()),
                ("nmt_val", c.nmt_val.to_string()),
                ("nmt_test", c.nmt_test.to_string()),
                ("nmt_seed", c.nmt_seed.to_string()),
            ],
        );
        section(
            "tokenizer",
            vec![("vocab_size", self.tokenizer.vocab_size.to_string()), ("shared_vocab", self.tokenizer.shared_vocab.to_string())],
        );
        section(
            "encoder",
            vec![
                ("layers", em.layers.to_string()),
                ("model_dim", em.model_dim.to_string()),
                ("heads", em.heads.to_string()),
                ("ff_dim", em.ff_dim.to_string()),
                ("max_positions", em.max_positions.to_string()),
                ("mask_rate", em.mask_rate.to_string()),
                ("dropout", em.dropout.to_string()),
                ("epochs", eh.epochs.to_string()),
                ("batch_sentences", eh.batch_sentences.to_string()),
                ("lr", eh.lr.to_string()),
                ("warmup_steps", eh.warmup_steps.to_string()),
                ("seed", self.encoder.seed.to_string()),
            ],
        );
        section(
            "aspects",
            vec![
                ("hidden", am.hidden.to_string()),
                ("split", am.split.to_string()),
                ("include_leftover_in_similarity", am.include_leftover_in_similarity.to_string()),
                ("unit_similarity", am.unit_similarity.to_string()),
                ("normalize_mix", am.normalize_mix.to_string()),
                ("epochs", ah.epochs.to_string()),
                ("batch_sentences", ah.batch_sentences.to_string()),
                ("lr", ah.lr.to_string()),
                ("momentum", ah.momentum.to_string()),
                ("clip_norm", ah.clip_norm.to_string()),
                ("decay", ah.decay.to_string()),
                ("patience", ah.patience.to_string()),
                ("class_weighting", ah.class_weighting.to_string()),
                ("seed", self.aspects.seed.to_string()),
                ("probe_seed", self.aspects.probe_seed.to_string()),
            ],
        );
        section(
            "nmt",
            vec![
                ("layers", n.layers.to_string()),
                ("model_dim", n.model_dim.to_string()),
                ("ff_dim", n.ff_dim.to_string()),
                ("heads", n.heads.to_string()),
                ("dropout", n.dropout.to_string()),
                ("label_smoothing", n.label_smoothing.to_string()),
                ("opt_factor", n.opt_factor.to_string()),
                ("opt_warmup", n.opt_warmup.to_string()),
                ("grad_accumulation", n.grad_accumulation.to_string()),
                ("batch_tokens", n.batch_tokens.to_string()),
                ("epochs", n.epochs.to_string()),
                ("max_positions", n.max_positions.to_string()),
                ("beam_size", n.beam_size.to_string()),
                ("length_norm_alpha", n.length_norm_alpha.to_string()),
                ("integration", n.integration.to_string()),
                ("validations_per_epoch", n.validations_per_epoch.to_string()),
                ("shared_embeddings", n.shared_embeddings.to_string()),
            ],
        );
        section(
            "eval",
            vec![
                ("seeds", self.eval.seeds.to_string()),
                ("seed_base", self.eval.seed_base.to_string()),
                ("probes", probes.join(" ")),
            ],
        );
        out.pop();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let cfg = ExperimentConfig::desk();
        let back = ExperimentConfig::parse("desk.cfg", &cfg.render(), None).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(ExperimentConfig::parse("empty", "", None).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_presets() {
        let text = "# tweak\n[nmt]\nepochs = 3\npreset = multi30k\n[eval]\nprobes = SWP:CPOS\n";
        let cfg = ExperimentConfig::parse("t", text, None).unwrap();
        assert_eq!(cfg.nmt.model_dim, 256);
        assert_eq!(cfg.nmt.epochs, 3);
        assert_eq!(cfg.eval.probes, vec![("SWP".to_string(), "CPOS".to_string())]);
    }

    #[test]
    fn rejects_unknown_and_invalid_entries() {
        for bad in ["[nmt]\nlayerz = 2\n", "[extra]\nx = 1\n", "[nmt]\nheads = 5\n", "[encoder]\nlr = fast\n", "[corpus]\ngrammar = /no/such/file\n"] {
            assert!(ExperimentConfig::parse("t", bad, None).is_err(), "{bad}");
        }
        let err = ExperimentConfig::parse("t", "[corpus]\ngrammar = /no/such/file\n", None).unwrap_err();
        assert_eq!(err.category(), "missing-file");
    }
}
