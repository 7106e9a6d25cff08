//! Aspect extraction: a shared layer over mixed encoder embeddings, split into
//! one vector per aspect plus a leftover slot, trained with per-aspect
//! classifiers, a reconstructor and a pairwise distance term.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::rc::Rc;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{monotonic_align, project_tags};
use crate::autograd::{Graph, ParamSet, Var};
use crate::checkpoint::{Checkpoint, ConfigEcho};
use crate::corpus::{AspectSpec, TagSchema, TaggedSentence};
use crate::encoder::{Encoder, LayerStack, ScalarMix};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::{PlateauDecay, Sgd};
use crate::tensor::{self, Tensor};
use crate::tokenize::{subword_tokenize, SubwordVocab};

pub const EXTRACTOR_OWNER: &str = "extractor";
pub const PROBE_OWNER: &str = "probe";
pub const LEFTOVER: &str = "leftover";
/// Word-shape tag for shapes never seen while building the tag set.
pub const OTHER_SHAPE: &str = "<other>";

pub const CPOS: &str = "CPOS";
pub const FPOS: &str = "FPOS";
pub const WSH: &str = "WSH";
pub const SWP: &str = "SWP";

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub hidden: usize,
    pub split: usize,
    pub include_leftover_in_similarity: bool,
    /// Measure the pairwise distance term between unit-normalized vectors.
    /// With raw ReLU outputs the term has no lower bound.
    pub unit_similarity: bool,
    pub normalize_mix: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { hidden: 1000, split: 200, include_leftover_in_similarity: false, unit_similarity: true, normalize_mix: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorHyper {
    pub epochs: usize,
    pub batch_sentences: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub decay: f64,
    pub patience: usize,
    pub class_weighting: bool,
}

impl Default for ExtractorHyper {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_sentences: 32,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 5.0,
            decay: 0.9,
            patience: 200,
            class_weighting: true,
        }
    }
}

/// The n aspect vectors followed by the leftover vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectVectors {
    pub vectors: Vec<Vec<f64>>,
}

impl AspectVectors {
    pub fn concat(&self) -> Vec<f64> {
        self.vectors.concat()
    }

    /// Concatenated aspect vectors, leftover appended only on request.
    pub fn linguistic_embedding(&self, include_leftover: bool) -> Vec<f64> {
        let n = if include_leftover { self.vectors.len() } else { self.vectors.len().saturating_sub(1) };
        self.vectors[..n].concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_r: f64,
    pub l_s: f64,
    pub l_fe: f64,
}

pub fn total_loss(l_a: f64, l_r: f64, l_s: f64) -> LossBreakdown {
    LossBreakdown { l_a, l_r, l_s, l_fe: l_a + l_r + l_s }
}

/// Mean over aspects of the token-averaged cross-entropy. `predictions[a]`
/// holds one probability row per token.
pub fn loss_aspect(predictions: &[Tensor], gold: &[Vec<usize>], class_weights: Option<&[Vec<f64>]>) -> Result<f64> {
    if predictions.len() != gold.len() || predictions.is_empty() {
        return Err(Error::Shape(format!("{} prediction sets for {} gold sets", predictions.len(), gold.len())));
    }
    let mut total = 0.0;
    for (a, (p, g)) in predictions.iter().zip(gold).enumerate() {
        if p.rows() != g.len() {
            return Err(Error::Shape(format!("aspect {a}: {} predictions for {} gold tags", p.rows(), g.len())));
        }
        let weights = class_weights.map(|w| &w[a]);
        if let Some(w) = weights {
            if w.len() != p.cols() {
                return Err(Error::Shape(format!("aspect {a}: {} class weights for {} tags", w.len(), p.cols())));
            }
        }
        let mut ce = 0.0;
        for (t, &y) in g.iter().enumerate() {
            if y >= p.cols() {
                return Err(Error::Invalid(format!("aspect {a}: gold tag {y} outside a tag set of {}", p.cols())));
            }
            let w = weights.map_or(1.0, |w| w[y]);
            ce -= w * p.get(t, y).ln();
        }
        if !g.is_empty() {
            total += ce / g.len() as f64;
        }
    }
    Ok(total / predictions.len() as f64)
}

/// Mean over rows of `‖R − E‖²`.
pub fn loss_reconstruction(r: &Tensor, e: &Tensor) -> Result<f64> {
    if r.shape() != e.shape() {
        return Err(Error::Shape(format!("reconstruction {:?} against embedding {:?}", r.shape(), e.shape())));
    }
    if r.rows() == 0 {
        return Ok(0.0);
    }
    let sq: f64 = r.data().iter().zip(e.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / r.rows() as f64)
}

/// `1 − (1/(n(n−1))) Σ_{i≠j} ‖v_i − v_j‖²`; zero for fewer than two vectors.
pub fn pairwise_similarity(vectors: &[&[f64]]) -> f64 {
    let n = vectors.len();
    if n < 2 {
        warn!("similarity term needs two aspect vectors, got {n}; using 0");
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += vectors[i].iter().zip(vectors[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
    }
    1.0 - sum / (n * (n - 1)) as f64
}

pub fn loss_similarity(av: &AspectVectors, include_leftover: bool) -> f64 {
    let n = if include_leftover { av.vectors.len() } else { av.vectors.len().saturating_sub(1) };
    let refs: Vec<&[f64]> = av.vectors[..n].iter().map(Vec::as_slice).collect();
    pairwise_similarity(&refs)
}

/// Graph nodes of one extractor pass over packed token rows.
#[derive(Debug, Clone)]
pub struct ExtractorForward {
    pub embedding: Var,
    pub hidden: Var,
    pub aspects: Vec<Var>,
    pub logits: Vec<Var>,
    pub reconstruction: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_a: Var,
    pub l_r: Var,
    pub l_s: Var,
    pub l_fe: Var,
}

#[derive(Debug, Clone)]
pub struct AspectExtractor {
    pub config: ExtractorConfig,
    pub aspects: Vec<AspectSpec>,
    pub model_dim: usize,
    pub params: ParamSet,
    pub mix: ScalarMix,
    pub shared: Linear,
    pub classifiers: Vec<Linear>,
    pub reconstructor: Linear,
    /// Per-aspect loss weights indexed by tag; all ones when unweighted.
    pub class_weights: Vec<Vec<f64>>,
}

impl AspectExtractor {
    /// `layers` is the encoder stack depth including the embedding layer.
    pub fn new(config: ExtractorConfig, aspects: Vec<AspectSpec>, model_dim: usize, layers: usize, seed: u64) -> Result<Self> {
        if aspects.is_empty() {
            return Err(Error::Config("extractor needs at least one aspect".into()));
        }
        if config.split == 0 || config.hidden != (aspects.len() + 1) * config.split {
            return Err(Error::Config(format!(
                "hidden size {} must equal (aspects + 1) x split = {} x {}",
                config.hidden,
                aspects.len() + 1,
                config.split
            )));
        }
        if model_dim == 0 || layers == 0 {
            return Err(Error::Config("extractor needs a positive model_dim and layer count".into()));
        }
        let mut names = BTreeSet::new();
        for a in &aspects {
            if a.name == LEFTOVER || !names.insert(a.name.clone()) {
                return Err(Error::Config(format!("aspect name `{}` is reserved or repeated", a.name)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new(EXTRACTOR_OWNER);
        let mix = ScalarMix::new(&mut params, "mix", layers, config.normalize_mix);
        let shared = Linear::new(&mut params, "shared", model_dim, config.hidden, true, &mut rng);
        let classifiers = aspects
            .iter()
            .map(|a| Linear::new(&mut params, &format!("classifier.{}", a.name), config.split, a.len(), true, &mut rng))
            .collect();
        let reconstructor = Linear::new(&mut params, "reconstructor", config.hidden, model_dim, true, &mut rng);
        let class_weights = aspects.iter().map(|a| vec![1.0; a.len()]).collect();
        Ok(Self { config, aspects, model_dim, params, mix, shared, classifiers, reconstructor, class_weights })
    }

    pub fn aspect_count(&self) -> usize {
        self.aspects.len()
    }

    pub fn aspect_index(&self, name: &str) -> Option<usize> {
        if name == LEFTOVER {
            return Some(self.aspects.len());
        }
        self.aspects.iter().position(|a| a.name == name)
    }

    pub fn aspect_name(&self, index: usize) -> &str {
        self.aspects.get(index).map_or(LEFTOVER, |a| a.name.as_str())
    }

    /// Width of the linguistic embedding handed to downstream models.
    pub fn linguistic_width(&self, include_leftover: bool) -> usize {
        self.config.split * (self.aspects.len() + usize::from(include_leftover))
    }

    fn hidden_rows(&self, e: &Tensor) -> Tensor {
        self.shared.apply(&self.params, e).map(|x| x.max(0.0))
    }

    pub fn forward(&self, g: &mut Graph, set: &ParamSet, layers: &[Var]) -> Result<ExtractorForward> {
        let embedding = self.mix.forward(g, set, layers)?;
        let pre = self.shared.forward(g, set, embedding);
        let hidden = g.relu(pre);
        let d = self.config.split;
        let aspects: Vec<Var> = (0..=self.aspects.len()).map(|k| g.slice_cols(hidden, k * d, (k + 1) * d)).collect();
        let logits = self.classifiers.iter().zip(&aspects).map(|(c, &v)| c.forward(g, set, v)).collect();
        let reconstruction = self.reconstructor.forward(g, set, hidden);
        Ok(ExtractorForward { embedding, hidden, aspects, logits, reconstruction })
    }

    /// Builds all four losses over `tokens` packed rows with gold tags per aspect.
    pub fn loss_graph(&self, g: &mut Graph, set: &ParamSet, layers: &[Var], gold: &[Vec<usize>]) -> Result<(ExtractorForward, LossVars)> {
        let fwd = self.forward(g, set, layers)?;
        let tokens = g.value(fwd.embedding).rows();
        if gold.len() != self.aspects.len() {
            return Err(Error::Shape(format!("{} gold tag lists for {} aspects", gold.len(), self.aspects.len())));
        }
        if tokens == 0 {
            return Err(Error::Invalid("extractor loss over an empty batch".into()));
        }
        let mut l_a = None;
        for (a, ((spec, &logits), tags)) in self.aspects.iter().zip(&fwd.logits).zip(gold).enumerate() {
            if tags.len() != tokens {
                return Err(Error::Shape(format!("aspect {}: {} tags for {tokens} tokens", spec.name, tags.len())));
            }
            let mut onehot = Tensor::zeros(tokens, spec.len());
            let mut weights = Vec::with_capacity(tokens);
            for (t, &y) in tags.iter().enumerate() {
                if y >= spec.len() {
                    return Err(Error::Invalid(format!("aspect {}: gold tag {y} outside its tag set", spec.name)));
                }
                onehot.set(t, y, 1.0);
                weights.push(self.class_weights[a][y]);
            }
            let ce = g.cross_entropy(logits, Rc::new(onehot), weights, tokens as f64);
            l_a = Some(match l_a {
                None => ce,
                Some(acc) => g.add(acc, ce),
            });
        }
        let l_a = g.scale(l_a.expect("at least one aspect"), 1.0 / self.aspects.len() as f64);

        let diff = g.sub(fwd.reconstruction, fwd.embedding);
        let sq = g.mul(diff, diff);
        let sum = g.sum_all(sq);
        let l_r = g.scale(sum, 1.0 / tokens as f64);

        let included = if self.config.include_leftover_in_similarity { fwd.aspects.len() } else { self.aspects.len() };
        let l_s = if included < 2 {
            warn!("similarity term needs two aspect vectors, got {included}; using 0");
            g.constant(Tensor::scalar(0.0))
        } else {
            let vs: Vec<Var> = if self.config.unit_similarity {
                fwd.aspects[..included].iter().map(|&v| g.normalize_rows(v, UNIT_EPS)).collect()
            } else {
                fwd.aspects[..included].to_vec()
            };
            let mut acc = None;
            for i in 0..included {
                for j in i + 1..included {
                    let d = g.sub(vs[i], vs[j]);
                    let d2 = g.mul(d, d);
                    let s = g.sum_all(d2);
                    acc = Some(match acc {
                        None => s,
                        Some(a) => g.add(a, s),
                    });
                }
            }
            let pairs = (included * (included - 1)) as f64;
            let scaled = g.scale(acc.expect("at least one pair"), -2.0 / (pairs * tokens as f64));
            g.add_scalar(scaled, 1.0)
        };
        let partial = g.add(l_a, l_r);
        let l_fe = g.add(partial, l_s);
        Ok((fwd, LossVars { l_a, l_r, l_s, l_fe }))
    }

    /// Mixed embeddings `E`, one row per token.
    pub fn embed(&self, stack: &LayerStack) -> Result<Tensor> {
        self.mix.apply(&self.params, stack)
    }

    /// Shared-layer output (all n+1 vectors side by side) per token.
    pub fn hidden_for(&self, stack: &LayerStack) -> Result<Tensor> {
        Ok(self.hidden_rows(&self.embed(stack)?))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut echo = ConfigEcho::new()
            .set("kind", "aspect_extractor")
            .set("model_dim", self.model_dim)
            .set("layers", self.mix.arity)
            .set("hidden", self.config.hidden)
            .set("split", self.config.split)
            .set("include_leftover_in_similarity", self.config.include_leftover_in_similarity)
            .set("unit_similarity", self.config.unit_similarity)
            .set("normalize_mix", self.config.normalize_mix)
            .set("aspects", self.aspects.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(" "));
        for (a, w) in self.aspects.iter().zip(&self.class_weights) {
            echo = echo.set(&format!("tags.{}", a.name), a.tags.join(" "));
            echo = echo.set(&format!("weights.{}", a.name), w.iter().map(f64::to_string).collect::<Vec<_>>().join(" "));
        }
        Checkpoint::from_params(echo.render(), &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pairs = ConfigEcho::parse(&ck.config);
        let get = |k: &str| ConfigEcho::lookup(&pairs, k);
        let bad = |k: &str| Error::Checkpoint(format!("bad `{k}` in config echo"));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
        let flag = |k: &str| -> Result<bool> { get(k)?.parse().map_err(|_| bad(k)) };
        if get("kind")? != "aspect_extractor" {
            return Err(Error::Checkpoint("checkpoint does not hold an aspect extractor".into()));
        }
        let mut aspects = Vec::new();
        let mut weights = Vec::new();
        for name in get("aspects")?.split_whitespace() {
            let tags = get(&format!("tags.{name}"))?.split_whitespace().map(str::to_string).collect();
            aspects.push(AspectSpec::new(name, tags).map_err(|e| Error::Checkpoint(e.to_string()))?);
            let key = format!("weights.{name}");
            let w: Vec<f64> = get(&key)?
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad(&key)))
                .collect::<Result<_>>()?;
            weights.push(w);
        }
        let config = ExtractorConfig {
            hidden: num("hidden")?,
            split: num("split")?,
            include_leftover_in_similarity: flag("include_leftover_in_similarity")?,
            unit_similarity: flag("unit_similarity")?,
            normalize_mix: flag("normalize_mix")?,
        };
        let mut ext = Self::new(config, aspects, num("model_dim")?, num("layers")?, 0)?;
        for (a, w) in weights.iter().enumerate() {
            if w.len() != ext.aspects[a].len() {
                return Err(bad(&format!("weights.{}", ext.aspects[a].name)));
            }
        }
        ext.class_weights = weights;
        ck.load_into(&mut ext.params)?;
        Ok(ext)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn extract_aspects(e_row: &[f64], extractor: &AspectExtractor) -> Result<AspectVectors> {
    if e_row.len() != extractor.model_dim {
        return Err(Error::Shape(format!("embedding width {} but the extractor expects {}", e_row.len(), extractor.model_dim)));
    }
    let h = extractor.hidden_rows(&Tensor::row_vector(e_row.to_vec()));
    let d = extractor.config.split;
    Ok(AspectVectors { vectors: h.data().chunks(d).map(<[f64]>::to_vec).collect() })
}

pub fn classify_aspect(e_a: &[f64], index: usize, extractor: &AspectExtractor) -> Result<Vec<f64>> {
    if index == extractor.aspects.len() {
        return Err(Error::Invalid("leftover has no classifier".into()));
    }
    let c = extractor
        .classifiers
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("aspect index {index} out of range")))?;
    if e_a.len() != extractor.config.split {
        return Err(Error::Shape(format!("aspect vector width {} but split is {}", e_a.len(), extractor.config.split)));
    }
    let mut logits = c.apply(&extractor.params, &Tensor::row_vector(e_a.to_vec())).into_data();
    tensor::softmax_in_place(&mut logits);
    Ok(logits)
}

pub fn reconstruct(av: &AspectVectors, extractor: &AspectExtractor) -> Result<Vec<f64>> {
    let slots = extractor.aspects.len() + 1;
    if av.vectors.len() != slots || av.vectors.iter().any(|v| v.len() != extractor.config.split) {
        return Err(Error::Shape(format!(
            "reconstructor expects {slots} vectors of width {}",
            extractor.config.split
        )));
    }
    Ok(extractor.reconstructor.apply(&extractor.params, &Tensor::row_vector(av.concat())).into_data())
}

/// Gold labels for one sentence, indexed `[aspect][sub-word]` and
/// `[aspect][word]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectExample {
    pub ids: Vec<usize>,
    pub word_starts: Vec<usize>,
    pub gold: Vec<Vec<usize>>,
    pub word_gold: Vec<Vec<usize>>,
}

/// CPOS, FPOS, WSH (shapes observed in `sentences`, plus [`OTHER_SHAPE`]) and SWP.
pub fn standard_aspects(schema: &TagSchema, sentences: &[TaggedSentence], vocab: &SubwordVocab) -> Result<Vec<AspectSpec>> {
    let mut shapes = BTreeSet::new();
    for s in sentences {
        shapes.extend(subword_tokenize(&s.words, vocab).shapes);
    }
    let mut shapes: Vec<String> = shapes.into_iter().collect();
    shapes.push(OTHER_SHAPE.into());
    Ok(vec![
        schema.cpos.clone(),
        schema.fpos.clone(),
        AspectSpec::new(WSH, shapes)?,
        AspectSpec::new(SWP, crate::tokenize::SubwordPosition::ALL.iter().map(|p| p.as_str().to_string()).collect())?,
    ])
}

fn tag_index(spec: &AspectSpec, tag: &str) -> Result<usize> {
    spec.index_of(tag)
        .or_else(|| if spec.name == WSH { spec.index_of(OTHER_SHAPE) } else { None })
        .ok_or_else(|| Error::Invalid(format!("tag `{tag}` is not in the {} tag set", spec.name)))
}

/// Tokenizes sentences, projects word tags onto sub-words through the
/// alignment and indexes every label.
pub fn prepare_examples(sentences: &[TaggedSentence], vocab: &SubwordVocab, aspects: &[AspectSpec]) -> Result<Vec<AspectExample>> {
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        if s.cpos.len() != s.len() || s.fpos.len() != s.len() {
            return Err(Error::Invalid("tag lists must have one tag per word".into()));
        }
        let seq = subword_tokenize(&s.words, vocab);
        let alignment = monotonic_align(&s.words, &seq.surfaces());
        let word_starts = seq.word_starts();
        let mut gold = Vec::with_capacity(aspects.len());
        let mut word_gold = Vec::with_capacity(aspects.len());
        for spec in aspects {
            let (sub, words): (Vec<String>, Vec<String>) = match spec.name.as_str() {
                CPOS | FPOS => {
                    let tags = if spec.name == CPOS { &s.cpos } else { &s.fpos };
                    (project_tags(tags, s.len(), &alignment)?, tags.clone())
                }
                WSH => {
                    let words = word_starts.iter().map(|&i| seq.shapes[i].clone()).collect();
                    (seq.shapes.clone(), words)
                }
                SWP => {
                    let sub: Vec<String> = seq.swp.iter().map(|p| p.as_str().to_string()).collect();
                    let words = word_starts.iter().map(|&i| sub[i].clone()).collect();
                    (sub, words)
                }
                other => return Err(Error::Invalid(format!("the tagged corpus provides no labels for aspect `{other}`"))),
            };
            gold.push(sub.iter().map(|t| tag_index(spec, t)).collect::<Result<Vec<_>>>()?);
            word_gold.push(words.iter().map(|t| tag_index(spec, t)).collect::<Result<Vec<_>>>()?);
        }
        out.push(AspectExample { ids: seq.ids(), word_starts, gold, word_gold });
    }
    Ok(out)
}

/// `w_c ∝ 1/count_c`, scaled so the average weight over training tokens is 1.
/// Tags that never occur get weight 1.
pub fn inverse_frequency_weights(examples: &[AspectExample], aspects: &[AspectSpec]) -> Vec<Vec<f64>> {
    aspects
        .iter()
        .enumerate()
        .map(|(a, spec)| {
            let mut counts = vec![0u64; spec.len()];
            for ex in examples {
                for &y in &ex.gold[a] {
                    counts[y] += 1;
                }
            }
            let total: u64 = counts.iter().sum();
            let seen = counts.iter().filter(|&&c| c > 0).count() as f64;
            counts.iter().map(|&c| if c == 0 { 1.0 } else { total as f64 / (seen * c as f64) }).collect()
        })
        .collect()
}

const UNIT_EPS: f64 = 1e-12;

/// Copy of `av` with every vector scaled as the training loss sees it.
pub fn unit_vectors(av: &AspectVectors) -> AspectVectors {
    AspectVectors {
        vectors: av
            .vectors
            .iter()
            .map(|v| {
                let k = 1.0 / (v.iter().map(|x| x * x).sum::<f64>() + UNIT_EPS).sqrt();
                v.iter().map(|x| x * k).collect()
            })
            .collect(),
    }
}

pub const ENCODE_CHUNK: usize = 64;

/// Runs the frozen encoder once over every example.
pub fn encode_examples(encoder: &Encoder, examples: &[AspectExample]) -> Result<Vec<LayerStack>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(ENCODE_CHUNK) {
        let batch: Vec<&[usize]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
        out.extend(encoder.encode_batch(&batch)?);
    }
    Ok(out)
}

fn pack_layers(stacks: &[&LayerStack]) -> Vec<Tensor> {
    let depth = stacks[0].depth();
    (0..depth).map(|j| Tensor::concat_rows(&stacks.iter().map(|s| &s.layers[j]).collect::<Vec<_>>())).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtractorReport {
    pub epochs: Vec<LossBreakdown>,
    pub batches: usize,
    pub final_lr: f64,
}

fn check_examples(examples: &[AspectExample], n: usize) -> Result<()> {
    for ex in examples {
        if ex.gold.len() != n || ex.word_gold.len() != n {
            return Err(Error::Invalid(format!("example carries {} aspects, extractor has {n}", ex.gold.len())));
        }
        if ex.gold.iter().any(|g| g.len() != ex.ids.len()) {
            return Err(Error::Shape("gold tags must cover every sub-word".into()));
        }
    }
    Ok(())
}

/// Trains a fresh extractor over the frozen `encoder`. The examples' aspect
/// order must match `aspects`.
pub fn train_aspect_extractor(
    encoder: &Encoder,
    examples: &[AspectExample],
    aspects: Vec<AspectSpec>,
    config: ExtractorConfig,
    hyper: &ExtractorHyper,
    seed: u64,
) -> Result<(AspectExtractor, ExtractorReport)> {
    let mut ext = AspectExtractor::new(config, aspects, encoder.config.model_dim, encoder.depth(), seed)?;
    check_examples(examples, ext.aspect_count())?;
    if hyper.class_weighting {
        ext.class_weights = inverse_frequency_weights(examples, &ext.aspects);
    }
    let mut report = ExtractorReport { final_lr: hyper.lr, ..Default::default() };
    if hyper.epochs == 0 {
        return Ok((ext, report));
    }
    let usable: Vec<usize> = (0..examples.len()).filter(|&i| !examples[i].ids.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Invalid("no non-empty sentences to train the extractor on".into()));
    }
    let stacks = encode_examples(encoder, examples)?;
    let mut sgd = Sgd::new(&ext.params, hyper.lr, hyper.momentum, Some(hyper.clip_norm));
    let mut plateau = PlateauDecay::new(hyper.decay, hyper.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a5ec);
    let n = ext.aspect_count();
    for epoch in 0..hyper.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for batch in order.chunks(hyper.batch_sentences.max(1)) {
            let group: Vec<&LayerStack> = batch.iter().map(|&i| &stacks[i]).collect();
            let gold: Vec<Vec<usize>> =
                (0..n).map(|a| batch.iter().flat_map(|&i| examples[i].gold[a].iter().copied()).collect()).collect();
            let mut g = Graph::new();
            let layers: Vec<Var> = pack_layers(&group).into_iter().map(|t| g.constant(t)).collect();
            let (_, loss) = ext.loss_graph(&mut g, &ext.params, &layers, &gold)?;
            let parts = total_loss(g.value(loss.l_a).item(), g.value(loss.l_r).item(), g.value(loss.l_s).item());
            if !parts.l_fe.is_finite() {
                return Err(Error::Invalid(format!("extractor loss diverged at epoch {epoch}")));
            }
            let grads = g.backward(loss.l_fe);
            sgd.step(&mut ext.params, &grads);
            sgd.lr *= plateau.observe(parts.l_fe);
            for (s, v) in sums.iter_mut().zip([parts.l_a, parts.l_r, parts.l_s, parts.l_fe]) {
                *s += v;
            }
            batches += 1;
            report.batches += 1;
            debug!("extractor batch {} l_fe {:.5}", report.batches, parts.l_fe);
        }
        let k = batches as f64;
        let mean = total_loss(sums[0] / k, sums[1] / k, sums[2] / k);
        info!(
            "extractor epoch {} l_a {:.4} l_r {:.4} l_s {:.4} l_fe {:.4} lr {:.4}",
            epoch + 1,
            mean.l_a,
            mean.l_r,
            mean.l_s,
            mean.l_fe,
            sgd.lr
        );
        report.epochs.push(mean);
    }
    report.final_lr = sgd.lr;
    ext.params.round_to_f32();
    Ok((ext, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1 {
    pub micro: f64,
    pub macro_f1: f64,
}

/// Single-label scores in percent. Micro F1 equals accuracy; macro averages
/// per-class F1 over classes present in gold or predictions.
pub fn f1_scores(gold: &[usize], pred: &[usize]) -> F1 {
    assert_eq!(gold.len(), pred.len(), "one prediction per gold label");
    if gold.is_empty() {
        return F1 { micro: 0.0, macro_f1: 0.0 };
    }
    let classes: BTreeSet<usize> = gold.iter().chain(pred).copied().collect();
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    let mut macro_sum = 0.0;
    for &c in &classes {
        let tp = gold.iter().zip(pred).filter(|&(&g, &p)| g == c && p == c).count() as f64;
        let fp = gold.iter().zip(pred).filter(|&(&g, &p)| g != c && p == c).count() as f64;
        let fn_ = gold.iter().zip(pred).filter(|&(&g, &p)| g == c && p != c).count() as f64;
        if tp > 0.0 {
            let prec = tp / (tp + fp);
            let rec = tp / (tp + fn_);
            macro_sum += 2.0 * prec * rec / (prec + rec);
        }
    }
    F1 { micro: 100.0 * correct as f64 / gold.len() as f64, macro_f1: 100.0 * macro_sum / classes.len() as f64 }
}

/// Stored sub-word predictions of one sentence, `[aspect][sub-word]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePredictions {
    pub word_starts: Vec<usize>,
    pub predicted: Vec<Vec<usize>>,
    pub gold: Vec<Vec<usize>>,
    pub word_gold: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspectScore {
    pub name: String,
    pub subword: F1,
    pub subword_tokens: usize,
    pub word: F1,
    pub word_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub aspects: Vec<AspectScore>,
    pub predictions: Vec<SentencePredictions>,
}

impl F1Report {
    pub fn score(&self, name: &str) -> Option<&AspectScore> {
        self.aspects.iter().find(|a| a.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "aspect\tsubword_micro_f1\tsubword_macro_f1\tsubword_tokens\tword_micro_f1\tword_macro_f1\tword_tokens\n",
        );
        for a in &self.aspects {
            out.push_str(&format!(
                "{}\t{:.2}\t{:.2}\t{}\t{:.2}\t{:.2}\t{}\n",
                a.name, a.subword.micro, a.subword.macro_f1, a.subword_tokens, a.word.micro, a.word.macro_f1, a.word_tokens
            ));
        }
        out
    }
}

impl fmt::Display for F1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>10}{:>10}{:>9}{:>10}{:>10}{:>9}", "aspect", "sw-micro", "sw-macro", "#tok", "w-micro", "w-macro", "#tok")?;
        for a in &self.aspects {
            writeln!(
                f,
                "{:<8}{:>10.2}{:>10.2}{:>9}{:>10.2}{:>10.2}{:>9}",
                a.name, a.subword.micro, a.subword.macro_f1, a.subword_tokens, a.word.micro, a.word.macro_f1, a.word_tokens
            )?;
        }
        Ok(())
    }
}

/// Word-level scores: every word takes the prediction of its first sub-word.
pub fn word_level_scores(predictions: &[SentencePredictions], aspects: usize) -> Vec<(F1, usize)> {
    (0..aspects)
        .map(|a| {
            let mut gold = Vec::new();
            let mut pred = Vec::new();
            for p in predictions {
                gold.extend_from_slice(&p.word_gold[a]);
                pred.extend(p.word_starts.iter().map(|&i| p.predicted[a][i]));
            }
            (f1_scores(&gold, &pred), gold.len())
        })
        .collect()
}

pub fn evaluate_f1(extractor: &AspectExtractor, encoder: &Encoder, examples: &[AspectExample]) -> Result<F1Report> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot score an empty corpus".into()));
    }
    let n = extractor.aspect_count();
    check_examples(examples, n)?;
    let stacks = encode_examples(encoder, examples)?;
    let d = extractor.config.split;
    let mut predictions = Vec::with_capacity(examples.len());
    for (ex, stack) in examples.iter().zip(&stacks) {
        let predicted = if ex.ids.is_empty() {
            vec![Vec::new(); n]
        } else {
            let h = extractor.hidden_for(stack)?;
            extractor
                .classifiers
                .iter()
                .enumerate()
                .map(|(a, c)| {
                    let logits = c.apply(&extractor.params, &h.slice_cols(a * d, (a + 1) * d));
                    (0..logits.rows()).map(|r| logits.argmax_row(r)).collect()
                })
                .collect()
        };
        predictions.push(SentencePredictions {
            word_starts: ex.word_starts.clone(),
            predicted,
            gold: ex.gold.clone(),
            word_gold: ex.word_gold.clone(),
        });
    }
    let words = word_level_scores(&predictions, n);
    let aspects = extractor
        .aspects
        .iter()
        .enumerate()
        .zip(words)
        .map(|((a, spec), (word, word_tokens))| {
            let gold: Vec<usize> = predictions.iter().flat_map(|p| p.gold[a].iter().copied()).collect();
            let pred: Vec<usize> = predictions.iter().flat_map(|p| p.predicted[a].iter().copied()).collect();
            AspectScore { name: spec.name.clone(), subword: f1_scores(&gold, &pred), subword_tokens: gold.len(), word, word_tokens }
        })
        .collect();
    Ok(F1Report { aspects, predictions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub source: String,
    pub target: String,
    pub f1: F1,
    pub mfc_class: String,
    pub mfc_pct: f64,
    pub n_tokens: usize,
}

pub fn probe_tsv(results: &[ProbeResult]) -> String {
    let mut out = String::from("source_aspect\ttarget_aspect\tf1_avg\tmfc_class\tmfc_pct\tn_tokens\n");
    for r in results {
        out.push_str(&format!(
            "{}\t{}\t{:.2}\t{}\t{:.2}\t{}\n",
            r.source, r.target, r.f1.micro, r.mfc_class, r.mfc_pct, r.n_tokens
        ));
    }
    out
}

/// Frozen features with their gold tags, one entry per sentence.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub features: Vec<Tensor>,
    pub gold: Vec<Vec<usize>>,
}

/// Fits an affine softmax classifier on `train` with the extractor's SGD
/// settings and predicts the argmax tag for every row of `eval`.
pub fn train_probe(train: &ProbeData, eval: &ProbeData, classes: usize, hyper: &ExtractorHyper, seed: u64) -> Result<Vec<usize>> {
    let width = train.features.first().map_or(0, Tensor::cols);
    if width == 0 || classes == 0 {
        return Err(Error::Invalid("probe needs features and at least one class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new(PROBE_OWNER);
    let layer = Linear::new(&mut set, "probe", width, classes, true, &mut rng);
    let mut sgd = Sgd::new(&set, hyper.lr, hyper.momentum, Some(hyper.clip_norm));
    let mut plateau = PlateauDecay::new(hyper.decay, hyper.patience);
    let usable: Vec<usize> = (0..train.features.len()).filter(|&i| train.features[i].rows() > 0).collect();
    for _ in 0..hyper.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_sentences.max(1)) {
            let x = Tensor::concat_rows(&batch.iter().map(|&i| &train.features[i]).collect::<Vec<_>>());
            let mut onehot = Tensor::zeros(x.rows(), classes);
            let mut r = 0;
            for &i in batch {
                for &y in &train.gold[i] {
                    if y >= classes {
                        return Err(Error::Invalid(format!("probe gold tag {y} outside {classes} classes")));
                    }
                    onehot.set(r, y, 1.0);
                    r += 1;
                }
            }
            let rows = x.rows();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let logits = layer.forward(&mut g, &set, xv);
            let loss = g.cross_entropy(logits, Rc::new(onehot), vec![1.0; rows], rows as f64);
            let value = g.value(loss).item();
            let grads = g.backward(loss);
            sgd.step(&mut set, &grads);
            sgd.lr *= plateau.observe(value);
        }
    }
    let mut pred = Vec::new();
    for x in &eval.features {
        let logits = layer.apply(&set, x);
        pred.extend((0..logits.rows()).map(|r| logits.argmax_row(r)));
    }
    Ok(pred)
}

/// Per-sentence shared-layer outputs for a set of examples.
pub fn hidden_features(extractor: &AspectExtractor, encoder: &Encoder, examples: &[AspectExample]) -> Result<Vec<Tensor>> {
    encode_examples(encoder, examples)?
        .iter()
        .map(|s| if s.is_empty() { Ok(Tensor::zeros(0, extractor.config.hidden)) } else { extractor.hidden_for(s) })
        .collect()
}

/// Probe over precomputed [`hidden_features`].
pub fn probe_from_features(
    extractor: &AspectExtractor,
    train: (&[Tensor], &[AspectExample]),
    eval: (&[Tensor], &[AspectExample]),
    source: usize,
    target: usize,
    hyper: &ExtractorHyper,
    seed: u64,
) -> Result<ProbeResult> {
    let n = extractor.aspect_count();
    if source >= n {
        return Err(Error::Invalid("the leftover vector cannot be probed".into()));
    }
    if target >= n {
        return Err(Error::Invalid(format!("target aspect index {target} out of range")));
    }
    let d = extractor.config.split;
    let slice = |(feats, exs): (&[Tensor], &[AspectExample])| ProbeData {
        features: feats.iter().map(|h| h.slice_cols(source * d, (source + 1) * d)).collect(),
        gold: exs.iter().map(|e| e.gold[target].clone()).collect(),
    };
    let train = slice(train);
    let eval = slice(eval);
    let classes = extractor.aspects[target].len();
    let pred = train_probe(&train, &eval, classes, hyper, seed)?;
    let gold: Vec<usize> = eval.gold.concat();
    if gold.is_empty() {
        return Err(Error::Invalid("probe evaluation set is empty".into()));
    }
    let mut counts = vec![0usize; classes];
    for &y in &gold {
        counts[y] += 1;
    }
    let mfc = tensor::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    Ok(ProbeResult {
        source: extractor.aspect_name(source).to_string(),
        target: extractor.aspect_name(target).to_string(),
        f1: f1_scores(&gold, &pred),
        mfc_class: extractor.aspects[target].tags[mfc].clone(),
        mfc_pct: 100.0 * counts[mfc] as f64 / gold.len() as f64,
        n_tokens: gold.len(),
    })
}

/// Trains a fresh classifier from frozen `e_{source}` vectors to the tags of
/// `target` on `train` and scores it on `eval`.
pub fn counterfactual_probe(
    extractor: &AspectExtractor,
    encoder: &Encoder,
    train: &[AspectExample],
    eval: &[AspectExample],
    source: usize,
    target: usize,
    hyper: &ExtractorHyper,
    seed: u64,
) -> Result<ProbeResult> {
    check_examples(train, extractor.aspect_count())?;
    check_examples(eval, extractor.aspect_count())?;
    let train_h = hidden_features(extractor, encoder, train)?;
    let eval_h = hidden_features(extractor, encoder, eval)?;
    probe_from_features(extractor, (&train_h, train), (&eval_h, eval), source, target, hyper, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionDistance {
    pub mean: f64,
    pub tokens: usize,
    pub skipped: usize,
}

/// `‖R/|R| − E/|E|‖` for one token, `None` if either vector is zero.
pub fn unit_distance(r: &[f64], e: &[f64]) -> Option<f64> {
    let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ne = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nr == 0.0 || ne == 0.0 {
        return None;
    }
    Some(r.iter().zip(e).map(|(a, b)| (a / nr - b / ne).powi(2)).sum::<f64>().sqrt())
}

pub fn reconstruction_distance(extractor: &AspectExtractor, encoder: &Encoder, sentences: &[Vec<usize>]) -> Result<ReconstructionDistance> {
    let mut total = 0.0;
    let mut tokens = 0;
    let mut skipped = 0;
    for chunk in sentences.chunks(ENCODE_CHUNK) {
        let batch: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        for stack in encoder.encode_batch(&batch)? {
            if stack.is_empty() {
                continue;
            }
            let e = extractor.embed(&stack)?;
            let h = extractor.hidden_rows(&e);
            let r = extractor.reconstructor.apply(&extractor.params, &h);
            for t in 0..e.rows() {
                match unit_distance(r.row(t), e.row(t)) {
                    Some(d) => {
                        total += d;
                        tokens += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
    }
    if tokens == 0 {
        return Err(Error::Invalid("no tokens with non-zero vectors to measure".into()));
    }
    if skipped > 0 {
        warn!("{skipped} tokens with zero-norm vectors skipped");
    }
    Ok(ReconstructionDistance { mean: total / tokens as f64, tokens, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, n: usize) -> AspectSpec {
        AspectSpec::new(name, (0..n).map(|i| format!("t{i}")).collect()).unwrap()
    }

    fn small(seed: u64) -> AspectExtractor {
        let cfg = ExtractorConfig { hidden: 12, split: 4, ..Default::default() };
        AspectExtractor::new(cfg, vec![spec("A", 3), spec("B", 2)], 5, 2, seed).unwrap()
    }

    #[test]
    fn default_split_shape() {
        let aspects = vec![spec(CPOS, 4), spec(FPOS, 6), spec(WSH, 3), spec(SWP, 3)];
        let ext = AspectExtractor::new(ExtractorConfig::default(), aspects, 8, 3, 1).unwrap();
        let av = extract_aspects(&[0.3; 8], &ext).unwrap();
        assert_eq!(av.vectors.len(), 5);
        assert!(av.vectors.iter().all(|v| v.len() == 200));
        let h = ext.hidden_rows(&Tensor::row_vector(vec![0.3; 8]));
        assert_eq!(av.concat(), h.data());
        assert_eq!(ext.classifiers.len(), 4);
        assert_eq!(ext.reconstructor.input, 1000);
        let bad = ExtractorConfig { hidden: 999, ..Default::default() };
        assert!(AspectExtractor::new(bad, vec![spec("A", 2)], 8, 3, 1).is_err());
        assert!(extract_aspects(&[0.0; 7], &ext).is_err());
    }

    #[test]
    fn leftover_has_no_classifier() {
        let ext = small(2);
        let err = classify_aspect(&[0.0; 4], 2, &ext).unwrap_err();
        assert!(err.to_string().contains("leftover has no classifier"));
        let p = classify_aspect(&[0.4, -1.0, 2.0, 0.0], 0, &ext).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f1_confusion_example() {
        let gold = [vec![0; 9], vec![1]].concat();
        let f = f1_scores(&gold, &[0; 10]);
        assert!((f.micro - 90.0).abs() < 1e-9);
        assert!((f.macro_f1 - 47.368_421).abs() < 1e-5);
        let all = f1_scores(&[0, 1, 2], &[0, 1, 2]);
        assert_eq!((all.micro, all.macro_f1), (100.0, 100.0));
    }

    #[test]
    fn weights_average_one_over_training_tokens() {
        let ex = AspectExample { ids: vec![5; 4], word_starts: vec![0], gold: vec![vec![0, 0, 0, 1]], word_gold: vec![vec![0]] };
        let w = inverse_frequency_weights(&[ex], &[spec("A", 3)]);
        assert!((w[0][0] - 2.0 / 3.0).abs() < 1e-12 && (w[0][1] - 2.0).abs() < 1e-12);
        assert!((3.0 * w[0][0] + w[0][1] - 4.0).abs() < 1e-12);
        assert_eq!(w[0][2], 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut ext = small(3);
        ext.class_weights[1] = vec![0.25, 1.75];
        ext.params.round_to_f32();
        let back = AspectExtractor::from_checkpoint(&Checkpoint::from_bytes(&ext.checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.aspects, ext.aspects);
        assert_eq!(back.class_weights, ext.class_weights);
        assert_eq!(back.checkpoint().to_bytes(), ext.checkpoint().to_bytes());
    }

    #[test]
    fn graph_losses_match_plain_functions() {
        let ext = small(4);
        let layers = vec![
            Tensor::from_vec(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()),
            Tensor::from_vec(3, 5, (0..15).map(|i| (i as f64 * 0.11).cos()).collect()),
        ];
        let gold = vec![vec![0, 2, 1], vec![1, 1, 0]];
        let mut g = Graph::new();
        let vars: Vec<Var> = layers.iter().map(|t| g.constant(t.clone())).collect();
        let (fwd, loss) = ext.loss_graph(&mut g, &ext.params, &vars, &gold).unwrap();
        let stack = LayerStack { layers };
        let e = ext.embed(&stack).unwrap();
        let mut probs = vec![Tensor::zeros(3, 3), Tensor::zeros(3, 2)];
        let mut recon = Tensor::zeros(3, 5);
        let mut sim = 0.0;
        for t in 0..3 {
            let av = extract_aspects(e.row(t), &ext).unwrap();
            for (a, p) in probs.iter_mut().enumerate() {
                p.row_mut(t).copy_from_slice(&classify_aspect(&av.vectors[a], a, &ext).unwrap());
            }
            recon.row_mut(t).copy_from_slice(&reconstruct(&av, &ext).unwrap());
            sim += loss_similarity(&unit_vectors(&av), false) / 3.0;
        }
        let la = loss_aspect(&probs, &gold, Some(&ext.class_weights)).unwrap();
        let lr = loss_reconstruction(&recon, &e).unwrap();
        assert!((g.value(loss.l_a).item() - la).abs() < 1e-12);
        assert!((g.value(loss.l_r).item() - lr).abs() < 1e-12);
        assert!((g.value(loss.l_s).item() - sim).abs() < 1e-12);
        assert_eq!(g.value(fwd.reconstruction).shape(), (3, 5));
    }
}
