//! Pre-norm encoder-decoder transformer shared by the lightweight
//! translation head and the pretrained backend stand-in.
//!
//! The encoder consumes dense input embeddings (positional encoding is
//! added inside), so callers can either look up native token embeddings
//! or feed adapter outputs. The decoder owns the target word-embedding
//! table and the language-modeling head.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::Dropout;
use crate::nn::attention::AttentionCache;
use crate::nn::linear::MlpCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::{join, log_softmax_rows, Ctx, Embedding, LayerNorm, Linear, Mlp, Module, MultiHeadAttention, Param, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(
                "hidden",
                format!("{} is not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if self.ffn == 0 {
            return Err(Error::config("ffn", "must be positive"));
        }
        if self.vocab_size < 5 {
            return Err(Error::config("vocab_size", "must be at least 5"));
        }
        if self.max_positions == 0 {
            return Err(Error::config("max_positions", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Sinusoidal encoding: component `2k` is `sin(pos / 10000^(2k/dim))`,
/// component `2k+1` the matching cosine.
pub fn positional_encoding(position: usize, dim: usize, max_positions: usize) -> Result<Vec<f64>> {
    if position >= max_positions {
        return Err(Error::InvalidInput(format!(
            "position {position} out of range (max_positions {max_positions})"
        )));
    }
    Ok(pe_row(position, dim))
}

fn pe_row(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let k2 = (c / 2 * 2) as f64;
            let angle = position as f64 / 10000f64.powf(k2 / dim as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn positional_table<S: Real>(max_positions: usize, dim: usize) -> Array2<S> {
    let mut t = Array2::zeros((max_positions, dim));
    for p in 0..max_positions {
        for (c, v) in pe_row(p, dim).into_iter().enumerate() {
            t[[p, c]] = S::lit(v);
        }
    }
    t
}

/// A padded batch of sequences stored as `(batch * max_len, dim)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded<S> {
    pub data: Array2<S>,
    pub max_len: usize,
    pub lens: Vec<usize>,
}

impl<S: Real> Padded<S> {
    pub fn new(data: Array2<S>, max_len: usize, lens: Vec<usize>) -> Result<Self> {
        if data.nrows() != max_len * lens.len() {
            return Err(Error::shape("padded rows", max_len * lens.len(), data.nrows()));
        }
        if lens.iter().any(|&l| l > max_len) {
            return Err(Error::InvalidInput("sequence length exceeds padded length".into()));
        }
        Ok(Padded { data, max_len, lens })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Pads packed rows (`sum(lens)` of them) with zeros.
    pub fn from_packed(packed: &ArrayView2<S>, lens: &[usize]) -> Self {
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let mut data = Array2::zeros((lens.len() * max_len, packed.ncols()));
        let mut offset = 0;
        for (b, &l) in lens.iter().enumerate() {
            data.slice_mut(s![b * max_len..b * max_len + l, ..])
                .assign(&packed.slice(s![offset..offset + l, ..]));
            offset += l;
        }
        Padded {
            data,
            max_len,
            lens: lens.to_vec(),
        }
    }

    pub fn to_packed(&self) -> Array2<S> {
        let total: usize = self.lens.iter().sum();
        let mut out = Array2::zeros((total, self.dim()));
        let mut offset = 0;
        for (b, &l) in self.lens.iter().enumerate() {
            out.slice_mut(s![offset..offset + l, ..])
                .assign(&self.data.slice(s![b * self.max_len..b * self.max_len + l, ..]));
            offset += l;
        }
        out
    }

    pub fn zero_padding(&mut self) {
        for (b, &l) in self.lens.iter().enumerate() {
            self.data.slice_mut(s![b * self.max_len + l..(b + 1) * self.max_len, ..]).fill(S::zero());
        }
    }

    /// Rows of one sequence, excluding padding.
    pub fn item(&self, b: usize) -> ArrayView2<'_, S> {
        self.data.slice(s![b * self.max_len..b * self.max_len + self.lens[b], ..])
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<S> {
    pub ln1: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub ln2: LayerNorm<S>,
    pub ffn: Mlp<S>,
}

struct EncoderLayerCache<S> {
    ln1: LayerNormCache<S>,
    attn: AttentionCache<S>,
    drop1: Option<Array2<S>>,
    ln2: LayerNormCache<S>,
    ffn: MlpCache<S>,
    drop2: Option<Array2<S>>,
}

impl<S: Real> EncoderLayer<S> {
    fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &TransformerConfig) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(cfg.hidden),
            attn: MultiHeadAttention::new(rng, cfg.hidden, cfg.heads),
            ln2: LayerNorm::new(cfg.hidden),
            ffn: Mlp::new(rng, cfg.hidden, cfg.ffn, cfg.hidden),
        }
    }

    fn forward(
        &self,
        x: &Array2<S>,
        len: usize,
        lens: &[usize],
        drop: Dropout,
        ctx: &mut Ctx,
    ) -> Result<(Array2<S>, EncoderLayerCache<S>)> {
        let (a_in, ln1) = self.ln1.forward(&x.view());
        let (mut a, attn) = self.attn.forward(&a_in.view(), len, &a_in.view(), len, lens, false)?;
        let drop1 = drop.forward(&mut a, ctx);
        let x1 = x + &a;
        let (f_in, ln2) = self.ln2.forward(&x1.view());
        let (mut f, ffn) = self.ffn.forward(&f_in.view())?;
        let drop2 = drop.forward(&mut f, ctx);
        let y = x1 + &f;
        Ok((
            y,
            EncoderLayerCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            },
        ))
    }

    fn backward(&mut self, cache: EncoderLayerCache<S>, dy: Array2<S>) -> Array2<S> {
        let mut df = dy.clone();
        Dropout::backward(&cache.drop2, &mut df);
        let df_in = self.ffn.backward(cache.ffn, &df.view(), true).unwrap();
        let mut dx1 = dy;
        dx1 += &self.ln2.backward(cache.ln2, &df_in.view());
        let mut da = dx1.clone();
        Dropout::backward(&cache.drop1, &mut da);
        let (dq, dkv) = self.attn.backward(cache.attn, &da.view());
        let da_in = dq + dkv;
        let mut dx = dx1;
        dx += &self.ln1.backward(cache.ln1, &da_in.view());
        dx
    }
}

impl<S: Real> Module<S> for EncoderLayer<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "self_attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "self_attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer<S> {
    pub ln1: LayerNorm<S>,
    pub self_attn: MultiHeadAttention<S>,
    pub ln2: LayerNorm<S>,
    pub cross_attn: MultiHeadAttention<S>,
    pub ln3: LayerNorm<S>,
    pub ffn: Mlp<S>,
}

struct DecoderLayerCache<S> {
    ln1: LayerNormCache<S>,
    self_attn: AttentionCache<S>,
    drop1: Option<Array2<S>>,
    ln2: LayerNormCache<S>,
    cross_attn: AttentionCache<S>,
    drop2: Option<Array2<S>>,
    ln3: LayerNormCache<S>,
    ffn: MlpCache<S>,
    drop3: Option<Array2<S>>,
}

impl<S: Real> DecoderLayer<S> {
    fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &TransformerConfig) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(cfg.hidden),
            self_attn: MultiHeadAttention::new(rng, cfg.hidden, cfg.heads),
            ln2: LayerNorm::new(cfg.hidden),
            cross_attn: MultiHeadAttention::new(rng, cfg.hidden, cfg.heads),
            ln3: LayerNorm::new(cfg.hidden),
            ffn: Mlp::new(rng, cfg.hidden, cfg.ffn, cfg.hidden),
        }
    }

    fn forward(
        &self,
        x: &Array2<S>,
        len: usize,
        memory: &Padded<S>,
        drop: Dropout,
        ctx: &mut Ctx,
    ) -> Result<(Array2<S>, DecoderLayerCache<S>)> {
        let batch = memory.batch();
        let full = vec![len; batch];
        let (a_in, ln1) = self.ln1.forward(&x.view());
        let (mut a, self_attn) = self.self_attn.forward(&a_in.view(), len, &a_in.view(), len, &full, true)?;
        let drop1 = drop.forward(&mut a, ctx);
        let x1 = x + &a;
        let (c_in, ln2) = self.ln2.forward(&x1.view());
        let (mut c, cross_attn) =
            self.cross_attn
                .forward(&c_in.view(), len, &memory.data.view(), memory.max_len, &memory.lens, false)?;
        let drop2 = drop.forward(&mut c, ctx);
        let x2 = x1 + &c;
        let (f_in, ln3) = self.ln3.forward(&x2.view());
        let (mut f, ffn) = self.ffn.forward(&f_in.view())?;
        let drop3 = drop.forward(&mut f, ctx);
        let y = x2 + &f;
        Ok((
            y,
            DecoderLayerCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross_attn,
                drop2,
                ln3,
                ffn,
                drop3,
            },
        ))
    }

    /// Returns `(dx, dmemory)`.
    fn backward(&mut self, cache: DecoderLayerCache<S>, dy: Array2<S>) -> (Array2<S>, Array2<S>) {
        let mut df = dy.clone();
        Dropout::backward(&cache.drop3, &mut df);
        let df_in = self.ffn.backward(cache.ffn, &df.view(), true).unwrap();
        let mut dx2 = dy;
        dx2 += &self.ln3.backward(cache.ln3, &df_in.view());

        let mut dc = dx2.clone();
        Dropout::backward(&cache.drop2, &mut dc);
        let (dc_in, dmem) = self.cross_attn.backward(cache.cross_attn, &dc.view());
        let mut dx1 = dx2;
        dx1 += &self.ln2.backward(cache.ln2, &dc_in.view());

        let mut da = dx1.clone();
        Dropout::backward(&cache.drop1, &mut da);
        let (dq, dkv) = self.self_attn.backward(cache.self_attn, &da.view());
        let da_in = dq + dkv;
        let mut dx = dx1;
        dx += &self.ln1.backward(cache.ln1, &da_in.view());
        (dx, dmem)
    }
}

impl<S: Real> Module<S> for DecoderLayer<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.ln3.visit(&join(prefix, "ln3"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.ln3.visit_mut(&join(prefix, "ln3"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

pub struct EncoderCache<S> {
    drop: Option<Array2<S>>,
    layers: Vec<EncoderLayerCache<S>>,
    norm: LayerNormCache<S>,
    max_len: usize,
    lens: Vec<usize>,
}

pub struct DecoderCache<S> {
    ids: Vec<u32>,
    drop: Option<Array2<S>>,
    layers: Vec<DecoderLayerCache<S>>,
    norm: LayerNormCache<S>,
    normed: Array2<S>,
    memory_rows: usize,
}

/// Padded target token ids, `(batch, max_len)` flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub max_len: usize,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<u32>], pad: u32) -> Self {
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![pad; seqs.len() * max_len];
        for (b, seq) in seqs.iter().enumerate() {
            ids[b * max_len..b * max_len + seq.len()].copy_from_slice(seq);
        }
        TokenBatch {
            ids,
            max_len,
            lens: seqs.iter().map(|s| s.len()).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.max_len..b * self.max_len + self.lens[b]]
    }
}

/// Decoder input `bos o_1 .. o_L`, next-token targets `o_1 .. o_L eos`
/// and their validity mask, from full `bos .. eos` sequences.
pub fn teacher_forcing(seqs: &[Vec<u32>]) -> (TokenBatch, Vec<u32>, Vec<bool>) {
    let inputs: Vec<Vec<u32>> = seqs.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
    let batch = TokenBatch::from_sequences(&inputs, 0);
    let mut next = vec![0u32; batch.ids.len()];
    let mut mask = vec![false; batch.ids.len()];
    for (b, s) in seqs.iter().enumerate() {
        for (i, &t) in s[1..].iter().enumerate() {
            next[b * batch.max_len + i] = t;
            mask[b * batch.max_len + i] = true;
        }
    }
    (batch, next, mask)
}

#[derive(Clone, Debug)]
pub struct Seq2SeqTransformer<S> {
    pub config: TransformerConfig,
    pub embed: Embedding<S>,
    pub encoder: Vec<EncoderLayer<S>>,
    pub encoder_norm: LayerNorm<S>,
    pub decoder: Vec<DecoderLayer<S>>,
    pub decoder_norm: LayerNorm<S>,
    pub lm_head: Linear<S>,
    pe: Array2<S>,
}

impl<S: Real> Seq2SeqTransformer<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let embed = Embedding::new(rng, config.vocab_size, config.hidden);
        let encoder = (0..config.encoder_layers).map(|_| EncoderLayer::new(rng, &config)).collect();
        let decoder = (0..config.decoder_layers).map(|_| DecoderLayer::new(rng, &config)).collect();
        let lm_head = Linear::new(rng, config.hidden, config.vocab_size);
        let pe = positional_table(config.max_positions, config.hidden);
        Ok(Seq2SeqTransformer {
            encoder_norm: LayerNorm::new(config.hidden),
            decoder_norm: LayerNorm::new(config.hidden),
            config,
            embed,
            encoder,
            decoder,
            lm_head,
            pe,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn dropout(&self) -> Dropout {
        Dropout::new(self.config.dropout)
    }

    fn add_positions(&self, x: &mut Array2<S>, max_len: usize, batch: usize) -> Result<()> {
        if max_len > self.config.max_positions {
            return Err(Error::InvalidInput(format!(
                "sequence length {max_len} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let pe = self.pe.slice(s![0..max_len, ..]);
        for b in 0..batch {
            let mut block = x.slice_mut(s![b * max_len..(b + 1) * max_len, ..]);
            block += &pe;
        }
        Ok(())
    }

    /// Word embedding plus positional encoding for padded token ids.
    pub fn embed_targets(&self, tokens: &TokenBatch) -> Result<Array2<S>> {
        let mut z = self.embed.forward(&tokens.ids)?;
        self.add_positions(&mut z, tokens.max_len, tokens.batch())?;
        Ok(z)
    }

    /// Runs the encoder over dense input embeddings (positions added
    /// here). Rows beyond each length are zero in the output.
    pub fn encode(&self, input: &Padded<S>, ctx: &mut Ctx) -> Result<(Padded<S>, EncoderCache<S>)> {
        if input.dim() != self.hidden() {
            return Err(Error::shape("encoder input width", self.hidden(), input.dim()));
        }
        if input.lens.iter().any(|&l| l == 0) {
            return Err(Error::InvalidInput("encoder input contains an empty sequence".into()));
        }
        let mut x = input.data.clone();
        self.add_positions(&mut x, input.max_len, input.batch())?;
        let drop = self.dropout().forward(&mut x, ctx);
        let mut layers = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (y, c) = layer.forward(&x, input.max_len, &input.lens, self.dropout(), ctx)?;
            layers.push(c);
            x = y;
        }
        let (y, norm) = self.encoder_norm.forward(&x.view());
        let mut out = Padded {
            data: y,
            max_len: input.max_len,
            lens: input.lens.clone(),
        };
        out.zero_padding();
        Ok((
            out,
            EncoderCache {
                drop,
                layers,
                norm,
                max_len: input.max_len,
                lens: input.lens.clone(),
            },
        ))
    }

    /// Gradient of the encoder output back to its dense input.
    pub fn backward_encode(&mut self, cache: EncoderCache<S>, dout: &Padded<S>) -> Padded<S> {
        let mut d = dout.clone();
        d.zero_padding();
        let mut dx = self.encoder_norm.backward(cache.norm, &d.data.view());
        for (layer, c) in self.encoder.iter_mut().zip(cache.layers).rev() {
            dx = layer.backward(c, dx);
        }
        Dropout::backward(&cache.drop, &mut dx);
        Padded {
            data: dx,
            max_len: cache.max_len,
            lens: cache.lens,
        }
    }

    /// Native text path: looks up the shared word embeddings for source
    /// tokens.
    pub fn embed_source(&self, tokens: &TokenBatch) -> Result<Padded<S>> {
        let data = self.embed.forward(&tokens.ids)?;
        Padded::new(data, tokens.max_len, tokens.lens.clone())
    }

    pub fn backward_embed_source(&mut self, tokens: &TokenBatch, demb: &Padded<S>) {
        let mut d = demb.clone();
        d.zero_padding();
        self.embed.backward(&tokens.ids, &d.data);
    }

    /// Teacher-forced decoder pass producing logits `(batch * len, vocab)`.
    pub fn decode(&self, targets: &TokenBatch, memory: &Padded<S>, ctx: &mut Ctx) -> Result<(Array2<S>, DecoderCache<S>)> {
        if memory.dim() != self.hidden() {
            return Err(Error::shape("decoder memory width", self.hidden(), memory.dim()));
        }
        if memory.batch() != targets.batch() {
            return Err(Error::shape("decoder batch", memory.batch(), targets.batch()));
        }
        if memory.lens.iter().any(|&l| l == 0) {
            return Err(Error::InvalidInput("decoder memory is empty".into()));
        }
        let mut x = self.embed_targets(targets)?;
        let drop = self.dropout().forward(&mut x, ctx);
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (y, c) = layer.forward(&x, targets.max_len, memory, self.dropout(), ctx)?;
            layers.push(c);
            x = y;
        }
        let (normed, norm) = self.decoder_norm.forward(&x.view());
        let logits = self.lm_head.forward(&normed.view());
        Ok((
            logits,
            DecoderCache {
                ids: targets.ids.clone(),
                drop,
                layers,
                norm,
                normed,
                memory_rows: memory.data.nrows(),
            },
        ))
    }

    /// Accumulates decoder gradients and returns the gradient with respect
    /// to the encoder memory rows.
    pub fn backward_decode(&mut self, cache: DecoderCache<S>, dlogits: &Array2<S>) -> Array2<S> {
        let dnormed = self.lm_head.backward(&cache.normed.view(), &dlogits.view(), true).unwrap();
        let mut dx = self.decoder_norm.backward(cache.norm, &dnormed.view());
        let mut dmem = Array2::<S>::zeros((cache.memory_rows, self.hidden()));
        for (layer, c) in self.decoder.iter_mut().zip(cache.layers).rev() {
            let (d, dm) = layer.backward(c, dx);
            dmem += &dm;
            dx = d;
        }
        Dropout::backward(&cache.drop, &mut dx);
        self.embed.backward(&cache.ids, &dx);
        dmem
    }

    /// Next-token log-probabilities for several equal-length prefixes that
    /// share one encoded memory (a single sample).
    pub fn next_token_logprobs(&self, memory: &ArrayView2<S>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let len = prefixes[0].len();
        if len == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::InvalidInput("prefixes must be non-empty and of equal length".into()));
        }
        let n = prefixes.len();
        let mlen = memory.nrows();
        let mut mem = Array2::zeros((n * mlen, memory.ncols()));
        for b in 0..n {
            mem.slice_mut(s![b * mlen..(b + 1) * mlen, ..]).assign(memory);
        }
        let memory = Padded::new(mem, mlen, vec![mlen; n])?;
        let targets = TokenBatch::from_sequences(prefixes, 0);
        let mut ctx = Ctx::eval();
        let (logits, _) = self.decode(&targets, &memory, &mut ctx)?;
        let last: Array2<S> = ndarray::stack(
            ndarray::Axis(0),
            &(0..n).map(|b| logits.row(b * len + len - 1)).collect::<Vec<_>>(),
        )
        .unwrap();
        let lp = log_softmax_rows(&last.view());
        Ok(lp.rows().into_iter().map(|r| r.iter().map(|v| v.f64()).collect()).collect())
    }

    /// Prefix of the final decoder block, the group watched by the
    /// dominance diagnostics.
    pub fn last_decoder_block(&self) -> String {
        format!("decoder.layers.{}", self.decoder.len() - 1)
    }

    /// Prefix of the final encoder block.
    pub fn last_encoder_block(&self) -> String {
        format!("encoder.layers.{}", self.encoder.len() - 1)
    }
}

impl<S: Real> Module<S> for Seq2SeqTransformer<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("encoder.layers.{i}")), f);
        }
        self.encoder_norm.visit(&join(prefix, "encoder.norm"), f);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("decoder.layers.{i}")), f);
        }
        self.decoder_norm.visit(&join(prefix, "decoder.norm"), f);
        self.lm_head.visit(&join(prefix, "lm_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("encoder.layers.{i}")), f);
        }
        self.encoder_norm.visit_mut(&join(prefix, "encoder.norm"), f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("decoder.layers.{i}")), f);
        }
        self.decoder_norm.visit_mut(&join(prefix, "decoder.norm"), f);
        self.lm_head.visit_mut(&join(prefix, "lm_head"), f);
    }
}
