//! Small post-norm Transformer encoder pretrained as a masked language model.
//! Every layer output is exposed so a learned scalar mix can weight them.

use std::path::Path;
use std::rc::Rc;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttnLayout, Graph, ParamId, ParamSet, Var};
use crate::checkpoint::{Checkpoint, ConfigEcho};
use crate::error::{Error, Result};
use crate::nn::{xavier_uniform, Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::optim::Adam;
use crate::tensor::{self, Tensor};
use crate::tokenize::{SubwordSequence, SubwordVocab, SPECIALS};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub mask_rate: f64,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 4, model_dim: 64, heads: 4, ff_dim: 128, max_positions: 512, mask_rate: 0.15, dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ff_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("encoder ff_dim and max_positions must be positive".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} must lie in (0, 1)", self.mask_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn echo(&self, vocab_size: usize) -> ConfigEcho {
        ConfigEcho::new()
            .set("kind", "encoder")
            .set("layers", self.layers)
            .set("model_dim", self.model_dim)
            .set("heads", self.heads)
            .set("ff_dim", self.ff_dim)
            .set("max_positions", self.max_positions)
            .set("mask_rate", self.mask_rate)
            .set("dropout", self.dropout)
            .set("vocab_size", vocab_size)
            .set("mix_includes_embedding_layer", true)
    }

    fn from_echo(pairs: &[(String, String)]) -> Result<(Self, usize)> {
        let num = |k: &str| -> Result<usize> {
            ConfigEcho::lookup(pairs, k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}` in config echo")))
        };
        let real = |k: &str| -> Result<f64> {
            ConfigEcho::lookup(pairs, k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}` in config echo")))
        };
        if ConfigEcho::lookup(pairs, "kind")? != "encoder" {
            return Err(Error::Checkpoint("checkpoint does not hold an encoder".into()));
        }
        let cfg = Self {
            layers: num("layers")?,
            model_dim: num("model_dim")?,
            heads: num("heads")?,
            ff_dim: num("ff_dim")?,
            max_positions: num("max_positions")?,
            mask_rate: real("mask_rate")?,
            dropout: real("dropout")?,
        };
        Ok((cfg, num("vocab_size")?))
    }
}

/// Outputs of every layer for one sequence; index 0 is the embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<Tensor>,
}

impl LayerStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    attn: MultiHeadAttention,
    attn_norm: LayerNorm,
    ff: FeedForward,
    ff_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
    embedding: ParamId,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    head: Linear,
    head_norm: LayerNorm,
    output_bias: ParamId,
}

pub const ENCODER_OWNER: &str = "encoder";

impl Encoder {
    pub fn new(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size <= SPECIALS.len() {
            return Err(Error::Config(format!("vocabulary of {vocab_size} entries has no ordinary tokens")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let mut params = ParamSet::new(ENCODER_OWNER);
        let embedding = params.add("embedding", xavier_uniform(vocab_size, d, &mut rng));
        let embed_norm = LayerNorm::new(&mut params, "embed_norm", d);
        let blocks = (0..config.layers)
            .map(|l| Block {
                attn: MultiHeadAttention::new(&mut params, &format!("layer{l}.attn"), d, &mut rng),
                attn_norm: LayerNorm::new(&mut params, &format!("layer{l}.attn_norm"), d),
                ff: FeedForward::new(&mut params, &format!("layer{l}.ff"), d, config.ff_dim, &mut rng),
                ff_norm: LayerNorm::new(&mut params, &format!("layer{l}.ff_norm"), d),
            })
            .collect();
        let head = Linear::new(&mut params, "mlm.transform", d, d, true, &mut rng);
        let head_norm = LayerNorm::new(&mut params, "mlm.norm", d);
        let output_bias = params.add("mlm.output_bias", Tensor::zeros(1, vocab_size));
        Ok(Self { config, vocab_size, params, embedding, embed_norm, blocks, head, head_norm, output_bias })
    }

    pub fn depth(&self) -> usize {
        self.config.layers + 1
    }

    /// Raw embedding rows for `ids`, before scaling and positions.
    pub fn token_rows(&self, ids: &[usize]) -> Tensor {
        self.params.get(self.embedding).gather_rows(ids)
    }

    fn check_lengths(&self, batch: &[&[usize]]) -> Result<()> {
        for s in batch {
            if s.len() > self.config.max_positions {
                return Err(Error::Invalid(format!(
                    "sequence of {} sub-words exceeds the encoder limit of {} positions",
                    s.len(),
                    self.config.max_positions
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::Invalid(format!("token id {bad} is outside the encoder vocabulary")));
            }
        }
        Ok(())
    }

    /// Packs `batch` row-wise and returns the ℓ+1 layer outputs.
    pub fn forward_layers(&self, g: &mut Graph, batch: &[&[usize]], dropout: &mut Dropout<'_>) -> Vec<Var> {
        let d = self.config.model_dim;
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let longest = lengths.iter().copied().max().unwrap_or(0);
        let table = tensor::sinusoidal_positions(longest.max(1), d);
        let rows: Vec<usize> = lengths.iter().flat_map(|&n| 0..n).collect();
        let positions = g.constant(table.gather_rows(&rows));

        let emb = g.param(&self.params, self.embedding);
        let x = g.gather(emb, &ids);
        let x = g.scale(x, (d as f64).sqrt());
        let x = g.add(x, positions);
        let mut x = self.embed_norm.forward(g, &self.params, x);
        let mut outs = vec![x];
        x = dropout.apply(g, x);
        let layout = Rc::new(AttnLayout::self_attention(&lengths, self.config.heads, false));
        for b in &self.blocks {
            let a = b.attn.forward(g, &self.params, x, x, layout.clone());
            let a = dropout.apply(g, a);
            let h = g.add(x, a);
            let h = b.attn_norm.forward(g, &self.params, h);
            let f = b.ff.forward(g, &self.params, h, dropout);
            let f = dropout.apply(g, f);
            let h2 = g.add(h, f);
            x = b.ff_norm.forward(g, &self.params, h2);
            outs.push(x);
        }
        outs
    }

    fn mlm_logits(&self, g: &mut Graph, hidden: Var) -> Var {
        let h = self.head.forward(g, &self.params, hidden);
        let h = g.relu(h);
        let h = self.head_norm.forward(g, &self.params, h);
        let emb = g.param(&self.params, self.embedding);
        let logits = g.matmul_nt(h, emb);
        let bias = g.param(&self.params, self.output_bias);
        g.add_row(logits, bias)
    }

    /// Inference over a batch of id sequences (dropout off).
    pub fn encode_batch(&self, batch: &[&[usize]]) -> Result<Vec<LayerStack>> {
        self.check_lengths(batch)?;
        if batch.iter().all(|s| s.is_empty()) {
            return Ok(batch.iter().map(|_| LayerStack { layers: vec![Tensor::zeros(0, self.config.model_dim); self.depth()] }).collect());
        }
        let mut g = Graph::new();
        let outs = self.forward_layers(&mut g, batch, &mut Dropout::eval());
        let mut stacks = Vec::with_capacity(batch.len());
        let mut start = 0;
        for s in batch {
            let end = start + s.len();
            stacks.push(LayerStack { layers: outs.iter().map(|&v| g.value(v).slice_rows(start, end)).collect() });
            start = end;
        }
        Ok(stacks)
    }

    pub fn encode_ids(&self, ids: &[usize]) -> Result<LayerStack> {
        Ok(self.encode_batch(&[ids])?.remove(0))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.config.echo(self.vocab_size).render(), &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (config, vocab_size) = EncoderConfig::from_echo(&ConfigEcho::parse(&ck.config))?;
        let mut enc = Self::new(config, vocab_size, 0)?;
        ck.load_into(&mut enc.params)?;
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn encode_layers(subwords: &SubwordSequence, encoder: &Encoder) -> Result<LayerStack> {
    encoder.encode_ids(&subwords.ids())
}

/// Learned combination `E = Σ_j α_j · layer_j`. With `normalize` the weights
/// are `softmax(logits)`, otherwise the raw logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMix {
    pub logits: ParamId,
    pub arity: usize,
    pub normalize: bool,
}

impl ScalarMix {
    pub fn new(set: &mut ParamSet, name: &str, arity: usize, normalize: bool) -> Self {
        let init = if normalize { 0.0 } else { 1.0 / arity as f64 };
        let logits = set.add(format!("{name}.logits"), Tensor::filled(1, arity, init));
        Self { logits, arity, normalize }
    }

    pub fn weights(&self, set: &ParamSet) -> Vec<f64> {
        let mut w = set.get(self.logits).data().to_vec();
        if self.normalize {
            tensor::softmax_in_place(&mut w);
        }
        w
    }

    pub fn forward(&self, g: &mut Graph, set: &ParamSet, layers: &[Var]) -> Result<Var> {
        if layers.len() != self.arity {
            return Err(Error::Shape(format!("scalar mix over {} layers given {}", self.arity, layers.len())));
        }
        let logits = g.param(set, self.logits);
        let w = if self.normalize { g.softmax_rows(logits) } else { logits };
        Ok(g.weighted_sum(w, layers))
    }

    pub fn apply(&self, set: &ParamSet, stack: &LayerStack) -> Result<Tensor> {
        if stack.depth() != self.arity {
            return Err(Error::Shape(format!("scalar mix over {} layers given {}", self.arity, stack.depth())));
        }
        let w = self.weights(set);
        let mut out = Tensor::zeros(stack.len(), stack.layers[0].cols());
        for (wj, layer) in w.iter().zip(&stack.layers) {
            for (o, x) in out.data_mut().iter_mut().zip(layer.data()) {
                *o += wj * x;
            }
        }
        Ok(out)
    }
}

pub fn scalar_mix(stack: &LayerStack, mix: &ScalarMix, set: &ParamSet) -> Result<Tensor> {
    mix.apply(set, stack)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainHyper {
    pub epochs: usize,
    pub batch_sentences: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Stop after this many optimizer steps when set (0 = no steps at all).
    pub max_steps: Option<u64>,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        Self { epochs: 4, batch_sentences: 32, lr: 1e-3, warmup_steps: 100, max_steps: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Masks `rate` of the positions (at least one per sentence): 80% become
/// `[MASK]`, 10% a random ordinary token, 10% stay. Returns the corrupted
/// ids and the masked positions.
pub fn mask_sentence(ids: &[usize], rate: f64, vocab_size: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut positions: Vec<usize> = (0..ids.len()).filter(|_| rng.gen::<f64>() < rate).collect();
    if positions.is_empty() && !ids.is_empty() {
        positions.push(rng.gen_range(0..ids.len()));
    }
    let mut out = ids.to_vec();
    for &p in &positions {
        let r: f64 = rng.gen();
        if r < 0.8 {
            out[p] = SubwordVocab::MASK_ID;
        } else if r < 0.9 {
            out[p] = rng.gen_range(SPECIALS.len()..vocab_size);
        }
    }
    (out, positions)
}

pub fn pretrain_masked_lm(
    corpus: &[Vec<usize>],
    vocab_size: usize,
    config: &EncoderConfig,
    hyper: &PretrainHyper,
    seed: u64,
) -> Result<(Encoder, PretrainReport)> {
    let mut encoder = Encoder::new(config.clone(), vocab_size, seed)?;
    let usable: Vec<&[usize]> = corpus.iter().filter(|s| !s.is_empty()).map(Vec::as_slice).collect();
    if usable.len() < hyper.batch_sentences.max(1) {
        return Err(Error::Invalid(format!(
            "masked-LM corpus has {} sentences, fewer than one batch of {}",
            usable.len(),
            hyper.batch_sentences
        )));
    }
    encoder.check_lengths(&usable)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c_6d00);
    let mut adam = Adam::new(&encoder.params, 0.9, 0.999, 1e-8);
    let mut report = PretrainReport::default();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    'outer: for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_sentences) {
            if hyper.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::new();
            let mut rows = Vec::new();
            let mut offset = 0;
            for &i in chunk {
                let (masked, pos) = mask_sentence(usable[i], config.mask_rate, vocab_size, &mut rng);
                for p in pos {
                    rows.push(offset + p);
                    targets.push(usable[i][p]);
                }
                offset += masked.len();
                inputs.push(masked);
            }
            let batch: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
            let mut g = Graph::new();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut dropout = Dropout::train(config.dropout, &mut drop_rng);
            let layers = encoder.forward_layers(&mut g, &batch, &mut dropout);
            let top = *layers.last().unwrap();
            let picked = g.gather(top, &rows);
            let logits = encoder.mlm_logits(&mut g, picked);
            let mut t = Tensor::zeros(rows.len(), vocab_size);
            for (r, &tok) in targets.iter().enumerate() {
                t.set(r, tok, 1.0);
            }
            let loss = g.cross_entropy(logits, Rc::new(t), vec![1.0; rows.len()], rows.len() as f64);
            let lv = g.value(loss).item();
            let grads = g.backward(loss).dense_for(&encoder.params);
            step += 1;
            let w = hyper.warmup_steps.max(1) as f64;
            let lr = hyper.lr * (step as f64 / w).min((w / step as f64).sqrt());
            adam.step_dense(&mut encoder.params, &grads, lr);
            report.step_losses.push(lv);
            epoch_sum += lv;
            batches += 1;
        }
        let mean = epoch_sum / batches.max(1) as f64;
        info!("masked-LM epoch {} mean loss {mean:.4}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    // Stored precision is binary32; keep the in-memory model identical to
    // what a checkpoint reload yields.
    encoder.params.round_to_f32();
    Ok((encoder, report))
}

/// Share of masked positions (each replaced by `[MASK]`) whose original
/// token is the top prediction.
pub fn masked_lm_accuracy(encoder: &Encoder, corpus: &[Vec<usize>], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in corpus.chunks(64) {
        let mut inputs = Vec::new();
        let mut rows = Vec::new();
        let mut gold = Vec::new();
        let mut offset = 0;
        for s in chunk.iter().filter(|s| !s.is_empty()) {
            let p = rng.gen_range(0..s.len());
            let mut m = s.clone();
            m[p] = SubwordVocab::MASK_ID;
            rows.push(offset + p);
            gold.push(s[p]);
            offset += s.len();
            inputs.push(m);
        }
        if inputs.is_empty() {
            continue;
        }
        let batch: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        encoder.check_lengths(&batch)?;
        let mut g = Graph::new();
        let layers = encoder.forward_layers(&mut g, &batch, &mut Dropout::eval());
        let picked = g.gather(*layers.last().unwrap(), &rows);
        let logits = encoder.mlm_logits(&mut g, picked);
        let lv = g.value(logits);
        for (r, &want) in gold.iter().enumerate() {
            hit += (lv.argmax_row(r) == want) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no sentences to evaluate".into()));
    }
    Ok(hit as f64 / total as f64)
}
