//! Transformer encoder-decoder translation with an optional input path that
//! feeds frozen aspect vectors into the source embedding.

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aspects::{AspectExtractor, AspectVectors, ENCODE_CHUNK};
use crate::autograd::{AttnLayout, AttnSegment, Graph, ParamId, ParamSet, Var};
use crate::checkpoint::{Checkpoint, ConfigEcho};
use crate::corpus::ParallelPair;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::sentence_bleu;
use crate::nn::{xavier_uniform, Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::optim::{noam_rate, Adam};
use crate::tensor::{self, Tensor};
use crate::tokenize::{detokenize, subword_tokenize, word_tokenize, SubwordSequence, SubwordVocab, SPECIALS};

pub const NMT_OWNER: &str = "nmt";

/// How aspect vectors enter the source embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integration {
    Off,
    Aspects,
    AspectsLeftover,
}

impl Integration {
    pub fn as_str(self) -> &'static str {
        match self {
            Integration::Off => "off",
            Integration::Aspects => "aspects",
            Integration::AspectsLeftover => "aspects+leftover",
        }
    }

    pub fn is_on(self) -> bool {
        self != Integration::Off
    }

    pub fn includes_leftover(self) -> bool {
        self == Integration::AspectsLeftover
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Integration::Off),
            "aspects" => Ok(Integration::Aspects),
            "aspects+leftover" => Ok(Integration::AspectsLeftover),
            other => Err(Error::Config(format!("unknown integration mode `{other}` (off, aspects, aspects+leftover)"))),
        }
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub opt_factor: f64,
    pub opt_warmup: u64,
    pub grad_accumulation: usize,
    pub batch_tokens: usize,
    pub epochs: usize,
    pub max_positions: usize,
    pub beam_size: usize,
    pub length_norm_alpha: f64,
    pub integration: Integration,
    /// Validation decodes per epoch, evenly spaced over its batches.
    pub validations_per_epoch: usize,
    /// One table for source, target and output projection.
    pub shared_embeddings: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TransformerConfig {
    /// Small model that trains on one CPU in minutes.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            ff_dim: 128,
            heads: 4,
            dropout: 0.1,
            label_smoothing: 0.1,
            opt_factor: 1.0,
            opt_warmup: 400,
            grad_accumulation: 1,
            batch_tokens: 512,
            epochs: 20,
            max_positions: 4096,
            beam_size: 4,
            length_norm_alpha: 0.6,
            integration: Integration::Off,
            validations_per_epoch: 10,
            shared_embeddings: true,
        }
    }

    pub fn multi30k() -> Self {
        Self { layers: 4, model_dim: 256, ff_dim: 512, heads: 4, opt_warmup: 2000, batch_tokens: 2560, ..Self::desk() }
    }

    pub fn iwslt() -> Self {
        Self {
            layers: 6,
            model_dim: 256,
            ff_dim: 512,
            heads: 4,
            opt_factor: 2.0,
            opt_warmup: 8000,
            grad_accumulation: 2,
            batch_tokens: 4096,
            ..Self::desk()
        }
    }

    pub fn wmt() -> Self {
        Self {
            layers: 6,
            model_dim: 512,
            ff_dim: 2048,
            heads: 8,
            opt_warmup: 4000,
            grad_accumulation: 8,
            batch_tokens: 4096,
            epochs: 7,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "multi30k" | "m30k" => Ok(Self::multi30k()),
            "iwslt" => Ok(Self::iwslt()),
            "wmt" => Ok(Self::wmt()),
            other => Err(Error::Config(format!("unknown transformer preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("heads", self.heads),
            ("grad_accumulation", self.grad_accumulation),
            ("batch_tokens", self.batch_tokens),
            ("epochs", self.epochs),
            ("max_positions", self.max_positions),
            ("beam_size", self.beam_size),
            ("validations_per_epoch", self.validations_per_epoch),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("nmt {name} must be positive")));
        }
        if self.opt_warmup == 0 || self.opt_factor <= 0.0 {
            return Err(Error::Config("nmt opt_factor and opt_warmup must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!("nmt model_dim {} is not divisible by heads {}", self.model_dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("nmt dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} must lie in [0, 1)", self.label_smoothing)));
        }
        if self.length_norm_alpha < 0.0 {
            return Err(Error::Config("length_norm_alpha must be non-negative".into()));
        }
        Ok(())
    }

    fn echo(&self) -> ConfigEcho {
        ConfigEcho::new()
            .set("layers", self.layers)
            .set("model_dim", self.model_dim)
            .set("ff_dim", self.ff_dim)
            .set("heads", self.heads)
            .set("dropout", self.dropout)
            .set("label_smoothing", self.label_smoothing)
            .set("opt_factor", self.opt_factor)
            .set("opt_warmup", self.opt_warmup)
            .set("grad_accumulation", self.grad_accumulation)
            .set("batch_tokens", self.batch_tokens)
            .set("epochs", self.epochs)
            .set("max_positions", self.max_positions)
            .set("beam_size", self.beam_size)
            .set("length_norm_alpha", self.length_norm_alpha)
            .set("integration", self.integration)
            .set("validations_per_epoch", self.validations_per_epoch)
            .set("shared_embeddings", self.shared_embeddings)
    }

    fn from_echo(pairs: &[(String, String)]) -> Result<Self> {
        fn field<T: FromStr>(pairs: &[(String, String)], k: &str) -> Result<T> {
            ConfigEcho::lookup(pairs, k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}` in config echo")))
        }
        Ok(Self {
            layers: field(pairs, "layers")?,
            model_dim: field(pairs, "model_dim")?,
            ff_dim: field(pairs, "ff_dim")?,
            heads: field(pairs, "heads")?,
            dropout: field(pairs, "dropout")?,
            label_smoothing: field(pairs, "label_smoothing")?,
            opt_factor: field(pairs, "opt_factor")?,
            opt_warmup: field(pairs, "opt_warmup")?,
            grad_accumulation: field(pairs, "grad_accumulation")?,
            batch_tokens: field(pairs, "batch_tokens")?,
            epochs: field(pairs, "epochs")?,
            max_positions: field(pairs, "max_positions")?,
            beam_size: field(pairs, "beam_size")?,
            length_norm_alpha: field(pairs, "length_norm_alpha")?,
            integration: ConfigEcho::lookup(pairs, "integration")?.parse()?,
            validations_per_epoch: field(pairs, "validations_per_epoch")?,
            shared_embeddings: field(pairs, "shared_embeddings")?,
        })
    }
}

/// Concatenated aspect vectors in extractor order; the leftover vector is
/// appended only in `aspects+leftover` mode.
pub fn linguistic_embedding(av: &AspectVectors, mode: Integration) -> Result<Vec<f64>> {
    if !mode.is_on() {
        return Err(Error::Config("integration is off; there is no linguistic embedding".into()));
    }
    if av.vectors.len() < 2 {
        return Err(Error::Shape(format!("expected aspect vectors plus a leftover vector, got {} vectors", av.vectors.len())));
    }
    let width = av.vectors[0].len();
    if av.vectors.iter().any(|v| v.len() != width) {
        return Err(Error::Shape("aspect vectors differ in width".into()));
    }
    Ok(av.linguistic_embedding(mode.includes_leftover()))
}

/// `m = relu(W₁·ling + b₁)`, then `W₂·[token ∥ m] + b₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationModule {
    pub ling_map: Linear,
    pub projection: Linear,
    pub ling_width: usize,
    pub model_dim: usize,
}

impl IntegrationModule {
    pub fn new(set: &mut ParamSet, ling_width: usize, model_dim: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            ling_map: Linear::new(set, "integration.ling_map", ling_width, model_dim, true, rng),
            projection: Linear::new(set, "integration.projection", 2 * model_dim, model_dim, true, rng),
            ling_width,
            model_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, set: &ParamSet, tokens: Var, ling: Var) -> Var {
        let m = self.ling_map.forward(g, set, ling);
        let m = g.relu(m);
        let joint = g.concat_cols(&[tokens, m]);
        self.projection.forward(g, set, joint)
    }
}

pub fn integrate(token_emb: &[f64], ling_emb: &[f64], im: &IntegrationModule, set: &ParamSet) -> Result<Vec<f64>> {
    if token_emb.len() != im.model_dim || ling_emb.len() != im.ling_width {
        return Err(Error::Shape(format!(
            "integration expects token width {} and linguistic width {}, got {} and {}",
            im.model_dim,
            im.ling_width,
            token_emb.len(),
            ling_emb.len()
        )));
    }
    let m = im.ling_map.apply(set, &Tensor::row_vector(ling_emb.to_vec())).map(|x| x.max(0.0));
    let joint = Tensor::concat_cols(&[&Tensor::row_vector(token_emb.to_vec()), &m]);
    Ok(im.projection.apply(set, &joint).into_data())
}

/// Source and target vocabularies; both point at one table when shared.
#[derive(Debug, Clone, Copy)]
pub struct VocabPair<'a> {
    pub source: &'a SubwordVocab,
    pub target: &'a SubwordVocab,
}

impl<'a> VocabPair<'a> {
    pub fn shared(vocab: &'a SubwordVocab) -> Self {
        Self { source: vocab, target: vocab }
    }
}

/// Read-only contextual encoder and extractor supplying aspect vectors.
#[derive(Debug, Clone, Copy)]
pub struct FrozenAspects<'a> {
    pub encoder: &'a Encoder,
    pub extractor: &'a AspectExtractor,
}

impl FrozenAspects<'_> {
    pub fn width(&self, mode: Integration) -> usize {
        self.extractor.linguistic_width(mode.includes_leftover())
    }

    /// Linguistic embedding of every sub-word of every sentence.
    pub fn rows(&self, sentences: &[Vec<usize>], mode: Integration) -> Result<Vec<Tensor>> {
        let width = self.width(mode);
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(ENCODE_CHUNK) {
            let batch: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            for stack in self.encoder.encode_batch(&batch)? {
                if stack.layers[0].rows() == 0 {
                    out.push(Tensor::zeros(0, width));
                } else {
                    out.push(self.extractor.hidden_for(&stack)?.slice_cols(0, width));
                }
            }
        }
        Ok(out)
    }

    /// Serialized parameters of both components.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut bytes = self.encoder.checkpoint().to_bytes();
        bytes.extend(self.extractor.checkpoint().to_bytes());
        bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EncoderBlock {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DecoderBlock {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm Transformer over a shared sub-word vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NmtModel {
    pub config: TransformerConfig,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub params: ParamSet,
    src_embedding: ParamId,
    tgt_embedding: ParamId,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderBlock>,
    decoder_norm: LayerNorm,
    output_bias: ParamId,
    pub integration: Option<IntegrationModule>,
    /// Names of the extractor aspects the integration path was built for.
    pub aspect_names: Vec<String>,
}

impl NmtModel {
    /// `ling_width` is required (and only allowed) when integration is on.
    pub fn new(config: TransformerConfig, src_vocab_size: usize, tgt_vocab_size: usize, ling_width: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        for size in [src_vocab_size, tgt_vocab_size] {
            if size <= SPECIALS.len() {
                return Err(Error::Config(format!("vocabulary of {size} entries has no ordinary tokens")));
            }
        }
        if config.shared_embeddings && src_vocab_size != tgt_vocab_size {
            return Err(Error::Config(format!(
                "shared embeddings need one vocabulary, got {src_vocab_size} source and {tgt_vocab_size} target entries"
            )));
        }
        match (config.integration.is_on(), ling_width) {
            (true, None) | (true, Some(0)) => {
                return Err(Error::Config("integration is on but no linguistic width was given".into()))
            }
            (false, Some(_)) => return Err(Error::Config("a linguistic width was given with integration off".into())),
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let mut params = ParamSet::new(NMT_OWNER);
        let src_embedding = params.add("embedding", xavier_uniform(src_vocab_size, d, &mut rng));
        let tgt_embedding = if config.shared_embeddings {
            src_embedding
        } else {
            params.add("target_embedding", xavier_uniform(tgt_vocab_size, d, &mut rng))
        };
        let encoder = (0..config.layers)
            .map(|l| EncoderBlock {
                attn_norm: LayerNorm::new(&mut params, &format!("encoder{l}.attn_norm"), d),
                attn: MultiHeadAttention::new(&mut params, &format!("encoder{l}.attn"), d, &mut rng),
                ff_norm: LayerNorm::new(&mut params, &format!("encoder{l}.ff_norm"), d),
                ff: FeedForward::new(&mut params, &format!("encoder{l}.ff"), d, config.ff_dim, &mut rng),
            })
            .collect();
        let encoder_norm = LayerNorm::new(&mut params, "encoder.norm", d);
        let decoder = (0..config.layers)
            .map(|l| DecoderBlock {
                self_norm: LayerNorm::new(&mut params, &format!("decoder{l}.self_norm"), d),
                self_attn: MultiHeadAttention::new(&mut params, &format!("decoder{l}.self_attn"), d, &mut rng),
                cross_norm: LayerNorm::new(&mut params, &format!("decoder{l}.cross_norm"), d),
                cross_attn: MultiHeadAttention::new(&mut params, &format!("decoder{l}.cross_attn"), d, &mut rng),
                ff_norm: LayerNorm::new(&mut params, &format!("decoder{l}.ff_norm"), d),
                ff: FeedForward::new(&mut params, &format!("decoder{l}.ff"), d, config.ff_dim, &mut rng),
            })
            .collect();
        let decoder_norm = LayerNorm::new(&mut params, "decoder.norm", d);
        let output_bias = params.add("output_bias", Tensor::zeros(1, tgt_vocab_size));
        // Created last so that every other parameter matches a baseline run with the same seed.
        let integration = ling_width.map(|w| IntegrationModule::new(&mut params, w, d, &mut rng));
        Ok(Self {
            config,
            src_vocab_size,
            tgt_vocab_size,
            params,
            src_embedding,
            tgt_embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output_bias,
            integration,
            aspect_names: Vec::new(),
        })
    }

    /// Builds a model whose integration width matches `aspects`.
    pub fn for_aspects(config: TransformerConfig, vocabs: VocabPair, aspects: Option<&FrozenAspects>, seed: u64) -> Result<Self> {
        let width = match (config.integration.is_on(), aspects) {
            (true, Some(a)) => {
                check_aspect_vocab(a, vocabs.source.len())?;
                Some(a.width(config.integration))
            }
            (true, None) => return Err(Error::Config("integration is on but no extractor was supplied".into())),
            (false, _) => None,
        };
        let mut model = Self::new(config, vocabs.source.len(), vocabs.target.len(), width, seed)?;
        if let (true, Some(a)) = (model.config.integration.is_on(), aspects) {
            model.aspect_names = a.extractor.aspects.iter().map(|s| s.name.clone()).collect();
        }
        Ok(model)
    }

    pub fn ling_width(&self) -> Option<usize> {
        self.integration.map(|im| im.ling_width)
    }

    fn check_ids(&self, ids: &[usize], side: &str) -> Result<()> {
        let size = if side == "source" { self.src_vocab_size } else { self.tgt_vocab_size };
        if let Some(&bad) = ids.iter().find(|&&t| t >= size) {
            return Err(Error::Invalid(format!("{side} token id {bad} is outside the vocabulary of {size}")));
        }
        Ok(())
    }

    fn check_ling(&self, src: &[&[usize]], ling: Option<&[&Tensor]>) -> Result<()> {
        match (self.integration, ling) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::Config("model has no integration path but linguistic rows were supplied".into())),
            (Some(_), None) => Err(Error::Config("model needs linguistic rows for its integration path".into())),
            (Some(im), Some(rows)) => {
                for (s, r) in src.iter().zip(rows) {
                    if r.rows() != s.len() || r.cols() != im.ling_width {
                        return Err(Error::Shape(format!(
                            "linguistic rows are {}x{}, expected {}x{}",
                            r.rows(),
                            r.cols(),
                            s.len(),
                            im.ling_width
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    fn positions(&self, g: &mut Graph, lengths: &[usize]) -> Var {
        let longest = lengths.iter().copied().max().unwrap_or(1).max(1);
        let table = tensor::sinusoidal_positions(longest, self.config.model_dim);
        let rows: Vec<usize> = lengths.iter().flat_map(|&n| 0..n).collect();
        g.constant(table.gather_rows(&rows))
    }

    /// Packed encoder memory, one row per source sub-word.
    fn encode(&self, g: &mut Graph, src: &[&[usize]], ling: Option<&[&Tensor]>, dropout: &mut Dropout<'_>) -> Var {
        let d = self.config.model_dim;
        let set = &self.params;
        let ids: Vec<usize> = src.iter().flat_map(|s| s.iter().copied()).collect();
        let lengths: Vec<usize> = src.iter().map(|s| s.len()).collect();
        let table = g.param(set, self.src_embedding);
        let x = g.gather(table, &ids);
        let mut x = g.scale(x, (d as f64).sqrt());
        // Integrate at the scale the positions are added at, so neither input swamps the other.
        if let (Some(im), Some(rows)) = (&self.integration, ling) {
            let packed = g.constant(Tensor::concat_rows(rows));
            x = im.forward(g, set, x, packed);
        }
        let pe = self.positions(g, &lengths);
        let x = g.add(x, pe);
        let mut x = dropout.apply(g, x);
        let layout = Rc::new(AttnLayout::self_attention(&lengths, self.config.heads, false));
        for b in &self.encoder {
            let h = b.attn_norm.forward(g, set, x);
            let a = b.attn.forward(g, set, h, h, layout.clone());
            let a = dropout.apply(g, a);
            x = g.add(x, a);
            let h = b.ff_norm.forward(g, set, x);
            let f = b.ff.forward(g, set, h, dropout);
            let f = dropout.apply(g, f);
            x = g.add(x, f);
        }
        self.encoder_norm.forward(g, set, x)
    }

    /// Final decoder states for packed target prefixes; `cross` maps each
    /// prefix to its rows of `memory`.
    fn decode(&self, g: &mut Graph, memory: Var, cross: &[(usize, usize)], tgt: &[&[usize]], dropout: &mut Dropout<'_>) -> Var {
        let d = self.config.model_dim;
        let set = &self.params;
        let ids: Vec<usize> = tgt.iter().flat_map(|s| s.iter().copied()).collect();
        let lengths: Vec<usize> = tgt.iter().map(|s| s.len()).collect();
        let table = g.param(set, self.tgt_embedding);
        let x = g.gather(table, &ids);
        let x = g.scale(x, (d as f64).sqrt());
        let pe = self.positions(g, &lengths);
        let x = g.add(x, pe);
        let mut x = dropout.apply(g, x);
        let causal = Rc::new(AttnLayout::self_attention(&lengths, self.config.heads, true));
        let mut segments = Vec::with_capacity(tgt.len());
        let mut q = 0;
        for (&len, &(k_start, k_len)) in lengths.iter().zip(cross) {
            segments.push(AttnSegment { q_start: q, q_len: len, k_start, k_len });
            q += len;
        }
        let cross = Rc::new(AttnLayout { segments, heads: self.config.heads, causal: false });
        for b in &self.decoder {
            let h = b.self_norm.forward(g, set, x);
            let a = b.self_attn.forward(g, set, h, h, causal.clone());
            let a = dropout.apply(g, a);
            x = g.add(x, a);
            let h = b.cross_norm.forward(g, set, x);
            let c = b.cross_attn.forward(g, set, h, memory, cross.clone());
            let c = dropout.apply(g, c);
            x = g.add(x, c);
            let h = b.ff_norm.forward(g, set, x);
            let f = b.ff.forward(g, set, h, dropout);
            let f = dropout.apply(g, f);
            x = g.add(x, f);
        }
        self.decoder_norm.forward(g, set, x)
    }

    fn logits(&self, g: &mut Graph, states: Var) -> Var {
        let table = g.param(&self.params, self.tgt_embedding);
        let logits = g.matmul_nt(states, table);
        let bias = g.param(&self.params, self.output_bias);
        g.add_row(logits, bias)
    }

    /// Label-smoothed cross-entropy per target token (EOS included) over a
    /// batch; returns the loss variable and the token count.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        src: &[&[usize]],
        tgt: &[&[usize]],
        ling: Option<&[&Tensor]>,
        dropout: &mut Dropout<'_>,
    ) -> (Var, usize) {
        let memory = self.encode(g, src, ling, dropout);
        let mut cross = Vec::with_capacity(src.len());
        let mut start = 0;
        for s in src {
            cross.push((start, s.len()));
            start += s.len();
        }
        let inputs: Vec<Vec<usize>> = tgt.iter().map(|t| std::iter::once(SubwordVocab::BOS_ID).chain(t.iter().copied()).collect()).collect();
        let input_refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let states = self.decode(g, memory, &cross, &input_refs, dropout);
        let logits = self.logits(g, states);
        let gold: Vec<usize> = tgt.iter().flat_map(|t| t.iter().copied().chain(std::iter::once(SubwordVocab::EOS_ID))).collect();
        let targets = smoothed_targets(&gold, self.tgt_vocab_size, self.config.label_smoothing);
        let n = gold.len();
        (g.cross_entropy(logits, Rc::new(targets), vec![1.0; n], n as f64), n)
    }

    /// Next-token distributions at every position of `prefix` (which starts
    /// with BOS) for one source sentence.
    pub fn next_token_probs(&self, src: &[usize], ling: Option<&Tensor>, prefix: &[usize]) -> Result<Tensor> {
        self.check_ids(src, "source")?;
        self.check_ids(prefix, "target")?;
        let ling_refs: Option<Vec<&Tensor>> = ling.map(|t| vec![t]);
        self.check_ling(&[src], ling_refs.as_deref())?;
        if src.is_empty() || prefix.is_empty() {
            return Err(Error::Invalid("source and prefix must be non-empty".into()));
        }
        let mut g = Graph::new();
        let memory = self.encode(&mut g, &[src], ling_refs.as_deref(), &mut Dropout::eval());
        let states = self.decode(&mut g, memory, &[(0, src.len())], &[prefix], &mut Dropout::eval());
        let logits = self.logits(&mut g, states);
        Ok(tensor::softmax_rows(g.value(logits)))
    }

    /// Packed encoder memory of several sentences.
    fn memory(&self, src: &[&[usize]], ling: Option<&[&Tensor]>) -> Result<Tensor> {
        for s in src {
            self.check_ids(s, "source")?;
        }
        self.check_ling(src, ling)?;
        let mut g = Graph::new();
        let memory = self.encode(&mut g, src, ling, &mut Dropout::eval());
        Ok(g.value(memory).clone())
    }

    /// Per-layer cross-attention keys and values of packed memory rows.
    fn cross_cache(&self, memory: &Tensor) -> Vec<(Tensor, Tensor)> {
        self.decoder
            .iter()
            .map(|b| (b.cross_attn.key.apply(&self.params, memory), b.cross_attn.value.apply(&self.params, memory)))
            .collect()
    }

    /// One incremental decoder step for a batch of hypotheses: feeds
    /// `tokens[i]` at `positions[i]`, appends to each self-attention cache
    /// and returns next-token log-probabilities.
    fn decode_step(
        &self,
        cross: &[(Tensor, Tensor)],
        rows: &[(usize, usize)],
        tokens: &[usize],
        positions: &Tensor,
        caches: &mut [&mut DecoderCache],
    ) -> Tensor {
        let set = &self.params;
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let mut x = set.get(self.tgt_embedding).gather_rows(tokens);
        x.scale_assign((d as f64).sqrt());
        x.add_assign(positions);
        for (l, b) in self.decoder.iter().enumerate() {
            let h = b.self_norm.apply(set, &x);
            let q = b.self_attn.query.apply(set, &h);
            let k = b.self_attn.key.apply(set, &h);
            let v = b.self_attn.value.apply(set, &h);
            let mut ctx = Tensor::zeros(x.rows(), d);
            for (i, cache) in caches.iter_mut().enumerate() {
                cache.keys[l].extend_from_slice(k.row(i));
                cache.values[l].extend_from_slice(v.row(i));
                attend(q.row(i), &cache.keys[l], &cache.values[l], heads, ctx.row_mut(i));
            }
            x.add_assign(&b.self_attn.output.apply(set, &ctx));
            let h = b.cross_norm.apply(set, &x);
            let q = b.cross_attn.query.apply(set, &h);
            let (ck, cv) = &cross[l];
            let mut ctx = Tensor::zeros(x.rows(), d);
            for (i, &(start, len)) in rows.iter().enumerate() {
                let keys = &ck.data()[start * d..(start + len) * d];
                let values = &cv.data()[start * d..(start + len) * d];
                attend(q.row(i), keys, values, heads, ctx.row_mut(i));
            }
            x.add_assign(&b.cross_attn.output.apply(set, &ctx));
            let h = b.ff_norm.apply(set, &x);
            let f = b.ff.inner.apply(set, &h).map(|v| v.max(0.0));
            x.add_assign(&b.ff.outer.apply(set, &f));
        }
        let h = self.decoder_norm.apply(set, &x);
        let mut logits = tensor::matmul_nt(&h, set.get(self.tgt_embedding));
        let bias = set.get(self.output_bias).data();
        for r in 0..logits.rows() {
            for (o, b) in logits.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        tensor::log_softmax_rows(&logits)
    }

    fn max_output_len(&self, src_len: usize) -> usize {
        (2 * src_len + 10).min(self.config.max_positions.saturating_sub(1)).max(1)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let echo = self
            .config
            .echo()
            .set("kind", "nmt")
            .set("src_vocab_size", self.src_vocab_size)
            .set("tgt_vocab_size", self.tgt_vocab_size)
            .set("ling_width", self.ling_width().unwrap_or(0))
            .set("aspects", self.aspect_names.join(" "));
        Checkpoint::from_params(echo.render(), &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pairs = ConfigEcho::parse(&ck.config);
        if ConfigEcho::lookup(&pairs, "kind")? != "nmt" {
            return Err(Error::Checkpoint("checkpoint does not hold a translation model".into()));
        }
        let config = TransformerConfig::from_echo(&pairs)?;
        let num = |k: &str| -> Result<usize> {
            ConfigEcho::lookup(&pairs, k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}` in config echo")))
        };
        let width = num("ling_width")?;
        let mut model = Self::new(config, num("src_vocab_size")?, num("tgt_vocab_size")?, (width > 0).then_some(width), 0)?;
        model.aspect_names = ConfigEcho::lookup(&pairs, "aspects").unwrap_or("").split_whitespace().map(str::to_string).collect();
        ck.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn check_vocabs(&self, vocabs: VocabPair) -> Result<()> {
        if vocabs.source.len() != self.src_vocab_size || vocabs.target.len() != self.tgt_vocab_size {
            return Err(Error::Config(format!(
                "vocabularies have {}/{} entries, model expects {}/{}",
                vocabs.source.len(),
                vocabs.target.len(),
                self.src_vocab_size,
                self.tgt_vocab_size
            )));
        }
        Ok(())
    }

    /// Checks that `aspects` can feed this model's integration path.
    pub fn check_aspects(&self, aspects: Option<&FrozenAspects>) -> Result<()> {
        match (self.integration, aspects) {
            (None, _) => Ok(()),
            (Some(_), None) => Err(Error::Config("model was trained with aspects; supply the encoder and extractor".into())),
            (Some(im), Some(a)) => {
                check_aspect_vocab(a, self.src_vocab_size)?;
                let names: Vec<String> = a.extractor.aspects.iter().map(|s| s.name.clone()).collect();
                if !self.aspect_names.is_empty() && names != self.aspect_names {
                    return Err(Error::Config(format!(
                        "model expects aspects [{}], extractor provides [{}]",
                        self.aspect_names.join(", "),
                        names.join(", ")
                    )));
                }
                if a.width(self.config.integration) != im.ling_width {
                    return Err(Error::Shape(format!(
                        "extractor yields {}-wide linguistic embeddings, model expects {}",
                        a.width(self.config.integration),
                        im.ling_width
                    )));
                }
                Ok(())
            }
        }
    }
}

fn check_aspect_vocab(a: &FrozenAspects, vocab_size: usize) -> Result<()> {
    if a.encoder.vocab_size != vocab_size {
        return Err(Error::Config(format!(
            "contextual encoder vocabulary has {} entries, source vocabulary has {vocab_size}",
            a.encoder.vocab_size
        )));
    }
    if a.extractor.model_dim != a.encoder.config.model_dim {
        return Err(Error::Config("extractor and contextual encoder widths differ".into()));
    }
    Ok(())
}

/// `1 − ε` on the gold token and `ε / (V − 1)` on every other token.
pub fn smoothed_targets(gold: &[usize], vocab_size: usize, epsilon: f64) -> Tensor {
    let off = if vocab_size > 1 { epsilon / (vocab_size - 1) as f64 } else { 0.0 };
    let mut t = Tensor::filled(gold.len(), vocab_size, off);
    for (r, &y) in gold.iter().enumerate() {
        t.set(r, y, 1.0 - epsilon);
    }
    t
}

/// `((5 + |Y|) / 6)^α`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

pub fn hypothesis_score(logp: f64, len: usize, alpha: f64) -> f64 {
    logp / length_penalty(len, alpha)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    logp: f64,
    cache: DecoderCache,
}

/// Self-attention keys and values of every position fed so far, per layer.
#[derive(Debug, Clone)]
struct DecoderCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl DecoderCache {
    fn new(layers: usize) -> Self {
        Self { keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers] }
    }
}

/// Multi-head scaled dot-product attention of one query over flat key and
/// value rows.
fn attend(q: &[f64], keys: &[f64], values: &[f64], heads: usize, out: &mut [f64]) {
    let d = q.len();
    let dk = d / heads;
    let n = keys.len() / d;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut p = vec![0.0; n];
    for h in 0..heads {
        let c = h * dk..(h + 1) * dk;
        for (j, pj) in p.iter_mut().enumerate() {
            let k = &keys[j * d..(j + 1) * d];
            *pj = q[c.clone()].iter().zip(&k[c.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        tensor::softmax_in_place(&mut p);
        let o = &mut out[c.clone()];
        for (j, &pj) in p.iter().enumerate() {
            let v = &values[j * d + h * dk..j * d + (h + 1) * dk];
            for (oo, vv) in o.iter_mut().zip(v) {
                *oo += pj * vv;
            }
        }
    }
}

/// Search state of one source sentence.
#[derive(Debug)]
struct Beam {
    rows: (usize, usize),
    max_len: usize,
    alive: Vec<Hypothesis>,
    /// (tokens without BOS/EOS, log-probability, |Y|)
    finished: Vec<(Vec<usize>, f64, usize)>,
}

impl Beam {
    fn advance(&mut self, lp: &Tensor, first_row: usize, beam_size: usize, step: usize) {
        let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(self.alive.len() * beam_size);
        for (i, h) in self.alive.iter().enumerate() {
            let row = lp.row(first_row + i);
            for v in top_k(row, beam_size) {
                cand.push((h.logp + row[v], i, v));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cand.truncate(beam_size - self.finished.len().min(beam_size - 1));
        let mut next = Vec::with_capacity(cand.len());
        for (logp, i, v) in cand {
            if v == SubwordVocab::EOS_ID {
                self.finished.push((self.alive[i].tokens[1..].to_vec(), logp, step));
            } else {
                let mut tokens = self.alive[i].tokens.clone();
                tokens.push(v);
                next.push(Hypothesis { tokens, logp, cache: self.alive[i].cache.clone() });
            }
        }
        self.alive = next;
        if self.finished.len() >= beam_size || step >= self.max_len {
            for h in self.alive.drain(..) {
                let len = h.tokens.len() - 1;
                self.finished.push((h.tokens[1..].to_vec(), h.logp, len));
            }
        }
    }

    fn best(self, alpha: f64) -> Vec<usize> {
        self.finished
            .into_iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| hypothesis_score(a.1, a.2, alpha).total_cmp(&hypothesis_score(b.1, b.2, alpha)).then(ib.cmp(ia)))
            .map(|(_, h)| h.0)
            .unwrap_or_default()
    }
}

/// Sentences decoded together per batch.
const DECODE_CHUNK: usize = 64;

/// Beam search over sub-word ids; the result excludes BOS and EOS. `|Y|`
/// counts generated tokens including EOS.
pub fn translate_ids(model: &NmtModel, src: &[usize], ling: Option<&Tensor>, beam_size: usize, alpha: f64) -> Result<Vec<usize>> {
    let ling = ling.map(|t| vec![t]);
    Ok(translate_batch(model, &[src], ling.as_deref(), beam_size, alpha)?.remove(0))
}

/// Beam search for many sentences at once; each result equals the one
/// [`translate_ids`] gives for that sentence alone.
pub fn translate_batch(
    model: &NmtModel,
    src: &[&[usize]],
    ling: Option<&[&Tensor]>,
    beam_size: usize,
    alpha: f64,
) -> Result<Vec<Vec<usize>>> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be positive".into()));
    }
    if let Some(l) = ling {
        if l.len() != src.len() {
            return Err(Error::Shape(format!("{} linguistic row sets for {} sentences", l.len(), src.len())));
        }
    }
    let mut out = vec![Vec::new(); src.len()];
    let todo: Vec<usize> = (0..src.len()).filter(|&i| !src[i].is_empty()).collect();
    for chunk in todo.chunks(DECODE_CHUNK) {
        let batch: Vec<&[usize]> = chunk.iter().map(|&i| src[i]).collect();
        let batch_ling: Option<Vec<&Tensor>> = ling.map(|l| chunk.iter().map(|&i| l[i]).collect());
        let memory = model.memory(&batch, batch_ling.as_deref())?;
        let cross = model.cross_cache(&memory);
        let table = tensor::sinusoidal_positions(batch.iter().map(|s| model.max_output_len(s.len())).max().unwrap_or(1), model.config.model_dim);
        let layers = model.config.layers;
        let mut beams = Vec::with_capacity(batch.len());
        let mut start = 0;
        for s in &batch {
            beams.push(Beam {
                rows: (start, s.len()),
                max_len: model.max_output_len(s.len()),
                alive: vec![Hypothesis { tokens: vec![SubwordVocab::BOS_ID], logp: 0.0, cache: DecoderCache::new(layers) }],
                finished: Vec::new(),
            });
            start += s.len();
        }
        let mut step = 0;
        while beams.iter().any(|b| !b.alive.is_empty()) {
            step += 1;
            let mut tokens = Vec::new();
            let mut rows = Vec::new();
            let mut caches: Vec<&mut DecoderCache> = Vec::new();
            for b in beams.iter_mut() {
                for h in b.alive.iter_mut() {
                    tokens.push(*h.tokens.last().expect("hypotheses start with BOS"));
                    rows.push(b.rows);
                    caches.push(&mut h.cache);
                }
            }
            let positions = table.gather_rows(&vec![step - 1; tokens.len()]);
            let lp = model.decode_step(&cross, &rows, &tokens, &positions, &mut caches);
            let mut row = 0;
            for b in beams.iter_mut() {
                let n = b.alive.len();
                if n > 0 {
                    b.advance(&lp, row, beam_size, step);
                    row += n;
                }
            }
        }
        for (&i, b) in chunk.iter().zip(beams) {
            out[i] = b.best(alpha);
        }
    }
    Ok(out)
}

/// Largest `k` entries, ties broken by lower index.
fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let k = k.min(idx.len());
    idx.select_nth_unstable_by(k.saturating_sub(1), |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Stepwise argmax decoding.
pub fn greedy_decode(model: &NmtModel, src: &[usize], ling: Option<&Tensor>) -> Result<Vec<usize>> {
    if src.is_empty() {
        return Ok(Vec::new());
    }
    let ling = ling.map(|t| vec![t]);
    let memory = model.memory(&[src], ling.as_deref())?;
    let cross = model.cross_cache(&memory);
    let max_len = model.max_output_len(src.len());
    let table = tensor::sinusoidal_positions(max_len, model.config.model_dim);
    let mut cache = DecoderCache::new(model.config.layers);
    let mut tokens = vec![SubwordVocab::BOS_ID];
    for step in 0..max_len {
        let lp = model.decode_step(&cross, &[(0, src.len())], &tokens[step..], &table.slice_rows(step, step + 1), &mut [&mut cache]);
        let next = tensor::argmax(lp.row(0));
        if next == SubwordVocab::EOS_ID {
            break;
        }
        tokens.push(next);
    }
    Ok(tokens[1..].to_vec())
}

/// Tokenizes, decodes with beam search and detokenizes one sentence.
pub fn translate(
    model: &NmtModel,
    vocabs: VocabPair,
    aspects: Option<&FrozenAspects>,
    sentence: &str,
    beam_size: usize,
    length_norm_alpha: f64,
) -> Result<String> {
    model.check_vocabs(vocabs)?;
    model.check_aspects(aspects)?;
    let words = word_tokenize(sentence);
    if words.is_empty() {
        return Ok(String::new());
    }
    let ids = subword_tokenize(&words, vocabs.source).ids();
    check_length(&ids, model.config.max_positions, "source sentence")?;
    let ling = match (model.integration, aspects) {
        (Some(_), Some(a)) => Some(a.rows(&[ids.clone()], model.config.integration)?.remove(0)),
        _ => None,
    };
    let out = translate_ids(model, &ids, ling.as_ref(), beam_size, length_norm_alpha)?;
    Ok(detokenize(&SubwordSequence::from_ids(&out, vocabs.target)))
}

fn check_length(ids: &[usize], max: usize, what: &str) -> Result<()> {
    if ids.len() > max {
        return Err(Error::Invalid(format!("{what} has {} sub-words, above the limit of {max} positions", ids.len())));
    }
    Ok(())
}

/// Sub-word ids of a parallel corpus plus the word-level references.
#[derive(Debug, Clone, PartialEq)]
pub struct NmtData {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub references: Vec<String>,
}

impl NmtData {
    pub fn from_words(src: &[Vec<String>], tgt: &[Vec<String>], vocabs: VocabPair) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Invalid(format!("{} source sentences for {} targets", src.len(), tgt.len())));
        }
        Ok(Self {
            src: src.iter().map(|w| subword_tokenize(w, vocabs.source).ids()).collect(),
            tgt: tgt.iter().map(|w| subword_tokenize(w, vocabs.target).ids()).collect(),
            references: tgt.iter().map(|w| w.join(" ")).collect(),
        })
    }

    pub fn from_pairs(pairs: &[ParallelPair], vocabs: VocabPair) -> Result<Self> {
        let src: Vec<Vec<String>> = pairs.iter().map(|p| p.source.words.clone()).collect();
        let tgt: Vec<Vec<String>> = pairs.iter().map(|p| p.target.clone()).collect();
        Self::from_words(&src, &tgt, vocabs)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch_fraction: f64,
    pub step: u64,
    pub train_loss: f64,
    pub val_bleu: f64,
    pub selected: bool,
}

pub fn training_log_tsv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("epoch_fraction\tstep\ttrain_loss\tval_bleu\tselected\n");
    for r in rows {
        out.push_str(&format!(
            "{:.2}\t{}\t{:.6}\t{:.4}\t{}\n",
            r.epoch_fraction,
            r.step,
            r.train_loss,
            r.val_bleu,
            u8::from(r.selected)
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct NmtRun {
    /// Parameters of the best validation point, rounded to `f32`.
    pub model: NmtModel,
    pub log: Vec<TrainLogRow>,
    pub best_val_bleu: f64,
    /// Encoder and extractor bytes were unchanged by training (always true
    /// without integration).
    pub frozen_intact: bool,
}

/// Groups `order` into consecutive batches with `max(src, tgt+1) · n ≤ cap`;
/// an oversize pair gets a batch of its own.
fn pack_batches(order: &[usize], data: &NmtData, cap: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for &i in order {
        let len = data.src[i].len().max(data.tgt[i].len() + 1);
        let grown = longest.max(len);
        if !cur.is_empty() && grown * (cur.len() + 1) > cap {
            batches.push(std::mem::take(&mut cur));
            longest = 0;
        }
        longest = longest.max(len);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn check_data(data: &NmtData, vocabs: VocabPair, max_positions: usize, what: &str) -> Result<()> {
    for (i, (s, t)) in data.src.iter().zip(&data.tgt).enumerate() {
        if s.is_empty() || t.is_empty() {
            return Err(Error::Invalid(format!("{what} pair {i} has an empty side")));
        }
        if s.len() > max_positions || t.len() + 1 > max_positions {
            return Err(Error::Invalid(format!("{what} pair {i} is longer than {max_positions} positions")));
        }
        if s.iter().any(|&id| id >= vocabs.source.len()) || t.iter().any(|&id| id >= vocabs.target.len()) {
            return Err(Error::Config(format!("{what} pair {i} uses ids outside the vocabulary")));
        }
    }
    Ok(())
}

/// Mean sentence BLEU of beam-search output against the references.
pub fn mean_sentence_bleu(
    model: &NmtModel,
    vocab: &SubwordVocab,
    data: &NmtData,
    ling: Option<&[Tensor]>,
    beam_size: usize,
    alpha: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hyps = decode_all(model, vocab, &data.src, ling, beam_size, alpha)?;
    Ok(hyps.iter().zip(&data.references).map(|(h, r)| sentence_bleu(h, r)).sum::<f64>() / data.len() as f64)
}

/// Beam-search translations of pre-tokenized sources, detokenized.
pub fn decode_all(
    model: &NmtModel,
    vocab: &SubwordVocab,
    src: &[Vec<usize>],
    ling: Option<&[Tensor]>,
    beam_size: usize,
    alpha: f64,
) -> Result<Vec<String>> {
    let refs: Vec<&[usize]> = src.iter().map(Vec::as_slice).collect();
    let ling: Option<Vec<&Tensor>> = ling.map(|l| l.iter().collect());
    let out = translate_batch(model, &refs, ling.as_deref(), beam_size, alpha)?;
    Ok(out.iter().map(|ids| detokenize(&SubwordSequence::from_ids(ids, vocab))).collect())
}

/// Trains with Noam-scheduled Adam, validating `validations_per_epoch`
/// times per epoch and keeping the best-scoring parameters.
pub fn train_nmt(
    train: &NmtData,
    val: &NmtData,
    vocabs: VocabPair,
    config: &TransformerConfig,
    aspects: Option<&FrozenAspects>,
    seed: u64,
) -> Result<NmtRun> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    if val.is_empty() {
        return Err(Error::Invalid("empty validation corpus".into()));
    }
    check_data(train, vocabs, config.max_positions, "training")?;
    check_data(val, vocabs, config.max_positions, "validation")?;
    let mut model = NmtModel::for_aspects(config.clone(), vocabs, aspects, seed)?;
    let before = aspects.filter(|_| config.integration.is_on()).map(|a| a.fingerprint());
    let (train_ling, val_ling) = match (config.integration.is_on(), aspects) {
        (true, Some(a)) => (Some(a.rows(&train.src, config.integration)?), Some(a.rows(&val.src, config.integration)?)),
        _ => (None, None),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6d_7472);
    let mut adam = Adam::new(&model.params, 0.9, 0.98, 1e-9);
    let mut accum: Vec<Tensor> = model.params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
    let mut pending = 0usize;
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut window = (0.0, 0usize);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let batches = pack_batches(&order, train, config.batch_tokens);
        let checkpoints: Vec<usize> = (1..=config.validations_per_epoch)
            .map(|k| (k * batches.len()).div_ceil(config.validations_per_epoch))
            .collect();
        for (b, batch) in batches.iter().enumerate() {
            let src: Vec<&[usize]> = batch.iter().map(|&i| train.src[i].as_slice()).collect();
            let tgt: Vec<&[usize]> = batch.iter().map(|&i| train.tgt[i].as_slice()).collect();
            let ling: Option<Vec<&Tensor>> = train_ling.as_ref().map(|l| batch.iter().map(|&i| &l[i]).collect());
            let mut g = Graph::new();
            let (loss, _) = {
                let mut dropout = Dropout::train(config.dropout, &mut rng);
                model.loss_graph(&mut g, &src, &tgt, ling.as_deref(), &mut dropout)
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Invalid(format!("training diverged at epoch {} (loss {value})", epoch + 1)));
            }
            window.0 += value;
            window.1 += 1;
            let grads = g.backward(loss).dense_for(&model.params);
            for (a, gr) in accum.iter_mut().zip(&grads) {
                a.add_assign(gr);
            }
            pending += 1;
            if pending == config.grad_accumulation {
                apply_update(&mut adam, &mut model.params, &mut accum, pending, config);
                pending = 0;
            }

            if let Some(k) = checkpoints.iter().position(|&c| c == b + 1) {
                if pending > 0 {
                    apply_update(&mut adam, &mut model.params, &mut accum, pending, config);
                    pending = 0;
                }
                let bleu = mean_sentence_bleu(&model, vocabs.target, val, val_ling.as_deref(), config.beam_size, config.length_norm_alpha)?;
                let selected = best.as_ref().is_none_or(|(b, _)| bleu > *b);
                if selected {
                    best = Some((bleu, model.params.clone()));
                }
                let loss = if window.1 > 0 { window.0 / window.1 as f64 } else { 0.0 };
                log::info!("epoch {} ({}/{}) step {} loss {loss:.4} val BLEU {bleu:.2}", epoch + 1, k + 1, checkpoints.len(), adam.steps_taken());
                log.push(TrainLogRow {
                    epoch_fraction: epoch as f64 + (k + 1) as f64 / config.validations_per_epoch as f64,
                    step: adam.steps_taken(),
                    train_loss: loss,
                    val_bleu: bleu,
                    selected,
                });
                window = (0.0, 0);
            }
        }
    }

    let (best_val_bleu, params) = best.expect("at least one validation point");
    model.params = params;
    model.params.round_to_f32();
    let frozen_intact = match (before, aspects) {
        (Some(b), Some(a)) => b == a.fingerprint(),
        _ => true,
    };
    if !frozen_intact {
        return Err(Error::Invalid("encoder or extractor parameters changed during translation training".into()));
    }
    Ok(NmtRun { model, log, best_val_bleu, frozen_intact })
}

fn apply_update(adam: &mut Adam, params: &mut ParamSet, accum: &mut [Tensor], batches: usize, config: &TransformerConfig) {
    if batches > 1 {
        for a in accum.iter_mut() {
            a.scale_assign(1.0 / batches as f64);
        }
    }
    let lr = noam_rate(adam.steps_taken() + 1, config.model_dim, config.opt_factor, config.opt_warmup);
    adam.step_dense(params, accum, lr);
    for a in accum.iter_mut() {
        a.data_mut().fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;

    fn tiny(integration: Integration, seed: u64) -> NmtModel {
        let config = TransformerConfig {
            layers: 1,
            model_dim: 8,
            ff_dim: 12,
            heads: 2,
            integration,
            ..TransformerConfig::desk()
        };
        let width = integration.is_on().then_some(6);
        NmtModel::new(config, 12, 12, width, seed).unwrap()
    }

    #[test]
    fn presets_validate() {
        for name in ["desk", "multi30k", "iwslt", "wmt"] {
            TransformerConfig::preset(name).unwrap().validate().unwrap();
        }
        let bad = TransformerConfig { heads: 3, ..TransformerConfig::desk() };
        assert!(bad.validate().is_err());
        assert!(TransformerConfig { dropout: 1.0, ..TransformerConfig::desk() }.validate().is_err());
        assert!("both".parse::<Integration>().is_err());
    }

    #[test]
    fn separate_vocabularies_need_separate_tables() {
        let shared = TransformerConfig { layers: 1, model_dim: 8, ff_dim: 8, heads: 2, ..TransformerConfig::desk() };
        assert!(NmtModel::new(shared.clone(), 12, 15, None, 0).is_err());
        let split = TransformerConfig { shared_embeddings: false, ..shared };
        let m = NmtModel::new(split, 12, 15, None, 0).unwrap();
        let p = m.next_token_probs(&[11, 5], None, &[SubwordVocab::BOS_ID, 14]).unwrap();
        assert_eq!(p.cols(), 15);
        assert!(m.next_token_probs(&[12], None, &[SubwordVocab::BOS_ID]).is_err());
    }

    #[test]
    fn embedding_widths() {
        let av = AspectVectors { vectors: (0..5).map(|k| vec![k as f64; 200]).collect() };
        let ling = linguistic_embedding(&av, Integration::Aspects).unwrap();
        assert_eq!(ling.len(), 800);
        assert_eq!(linguistic_embedding(&av, Integration::AspectsLeftover).unwrap().len(), 1000);
        for k in 0..4 {
            assert!(ling[k * 200..(k + 1) * 200].iter().all(|&x| x == k as f64));
        }
        assert!(linguistic_embedding(&av, Integration::Off).is_err());
        let ragged = AspectVectors { vectors: vec![vec![0.0; 3], vec![0.0; 2]] };
        assert!(linguistic_embedding(&ragged, Integration::Aspects).is_err());
    }

    #[test]
    fn integrate_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = ParamSet::new(NMT_OWNER);
        let im = IntegrationModule::new(&mut set, 5, 256, &mut rng);
        let b1 = im.ling_map.bias.unwrap();
        set.get_mut(b1).data_mut().fill(0.0);
        let tok: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin()).collect();
        let out = integrate(&tok, &[0.0; 5], &im, &set).unwrap();
        assert_eq!(out.len(), 256);
        let mut joint = tok.clone();
        joint.extend(vec![0.0; 256]);
        let want = im.projection.apply(&set, &Tensor::row_vector(joint));
        assert_eq!(out, want.into_data());
        assert!(integrate(&tok, &[0.0; 4], &im, &set).is_err());
        assert!(integrate(&tok[..10], &[0.0; 5], &im, &set).is_err());
    }

    #[test]
    fn output_rows_are_distributions() {
        let m = tiny(Integration::Off, 1);
        let p = m.next_token_probs(&[5, 6, 7], None, &[SubwordVocab::BOS_ID, 8, 9]).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny(Integration::Off, 2);
        let src = [5, 6, 7, 8];
        let a = m.next_token_probs(&src, None, &[2, 9, 10, 11, 5]).unwrap();
        let b = m.next_token_probs(&src, None, &[2, 9, 7, 6, 6]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..4 {
            let m = tiny(Integration::Off, seed);
            let src = [5, 6, 7, 8, 9];
            assert_eq!(translate_ids(&m, &src, None, 1, 0.6).unwrap(), greedy_decode(&m, &src, None).unwrap());
        }
        let m = tiny(Integration::Off, 9);
        assert!(translate_ids(&m, &[], None, 4, 0.6).unwrap().is_empty());
    }

    #[test]
    fn incremental_steps_match_full_decoder() {
        let m = tiny(Integration::Aspects, 6);
        let src = [5, 6, 7];
        let ling = Tensor::from_vec(3, 6, (0..18).map(|i| (i as f64 * 0.3).cos()).collect());
        let prefix = [SubwordVocab::BOS_ID, 8, 9, 10];
        let full = m.next_token_probs(&src, Some(&ling), &prefix).unwrap();
        let memory = m.memory(&[&src], Some(&[&ling])).unwrap();
        let cross = m.cross_cache(&memory);
        let table = tensor::sinusoidal_positions(prefix.len(), 8);
        let mut cache = DecoderCache::new(1);
        for (t, &tok) in prefix.iter().enumerate() {
            let lp = m.decode_step(&cross, &[(0, 3)], &[tok], &table.slice_rows(t, t + 1), &mut [&mut cache]);
            for (a, b) in lp.row(0).iter().zip(full.row(t)) {
                assert!((a.exp() - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_search_matches_single() {
        let m = tiny(Integration::Off, 11);
        let srcs: Vec<Vec<usize>> = vec![vec![5, 6], vec![], vec![7, 8, 9, 10, 11], vec![6]];
        let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
        let batch = translate_batch(&m, &refs, None, 3, 0.6).unwrap();
        for (s, b) in srcs.iter().zip(&batch) {
            assert_eq!(&translate_ids(&m, s, None, 3, 0.6).unwrap(), b);
        }
    }

    #[test]
    fn alpha_zero_ranks_by_log_probability() {
        assert_eq!(length_penalty(7, 0.0), 1.0);
        assert!(hypothesis_score(-1.0, 2, 0.0) > hypothesis_score(-1.2, 5, 0.0));
        // Length normalization can reverse the order.
        assert!(hypothesis_score(-1.0, 2, 2.0) < hypothesis_score(-1.2, 5, 2.0));
        assert!((length_penalty(1, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smoothing_spreads_epsilon() {
        let t = smoothed_targets(&[2, 0], 5, 0.1);
        assert!((t.get(0, 2) - 0.9).abs() < 1e-15);
        assert!((t.get(0, 1) - 0.025).abs() < 1e-15);
        for r in 0..2 {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_and_augmented_differ_only_in_integration() {
        let off = tiny(Integration::Off, 7);
        let on = tiny(Integration::Aspects, 7);
        let extra: Vec<&str> = on.params.iter().map(|(_, n, _)| n).filter(|n| off.params.find(n).is_none()).collect();
        assert!(!extra.is_empty() && extra.iter().all(|n| n.starts_with("integration.")));
        for (_, name, t) in off.params.iter() {
            assert_eq!(on.params.get(on.params.find(name).unwrap()), t, "{name}");
        }
    }

    #[test]
    fn integration_path_gradients() {
        let mut m = tiny(Integration::Aspects, 3);
        let ling = Tensor::from_vec(3, 6, (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.2).collect());
        let src: [usize; 3] = [5, 6, 7];
        let tgt: [usize; 2] = [8, 9];
        let model = m.clone();
        let report = gradcheck(&mut m.params, 1e-5, 1e-6, |set| {
            let mut probe = model.clone();
            probe.params = set.clone();
            let mut g = Graph::new();
            let (loss, _) = probe.loss_graph(&mut g, &[&src], &[&tgt], Some(&[&ling]), &mut Dropout::eval());
            (g, loss)
        });
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
        assert!(report.checked > 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = tiny(Integration::AspectsLeftover, 5);
        m.aspect_names = vec!["CPOS".into()];
        m.params.round_to_f32();
        let back = NmtModel::from_checkpoint(&Checkpoint::from_bytes(&m.checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
