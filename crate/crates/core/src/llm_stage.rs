//! The language-model stage: a pluggable pretrained encoder-decoder whose
//! encoder word embeddings are replaced by an adapter over frozen visual
//! features, plus the desk-scale denoising pretraining of the stand-in
//! backend.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS, UNK};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{log_softmax_rows, smoothed_ce_with_logits, Ctx, Module, Real};
use crate::trainer::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::trainer::schedule::cosine_lr;
use crate::transformer::{teacher_forcing, DecoderCache, EncoderCache, Padded, Seq2SeqTransformer, TokenBatch, TransformerConfig};
use crate::visual::{Adapter, FeatureSequence, Tap, VisualEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    FrameWise,
    #[default]
    SignWise,
    HiddenStates,
}

impl FeatureTap {
    pub const ALL: [FeatureTap; 3] = [FeatureTap::FrameWise, FeatureTap::SignWise, FeatureTap::HiddenStates];

    pub fn name(self) -> &'static str {
        match self {
            FeatureTap::FrameWise => "frame_wise",
            FeatureTap::SignWise => "sign_wise",
            FeatureTap::HiddenStates => "hidden_states",
        }
    }

    /// Feature-sequence tag the adapter expects for this tap.
    pub fn feature_tag(self) -> Tap {
        match self {
            FeatureTap::FrameWise => Tap::FrameWise,
            FeatureTap::SignWise => Tap::SignWise,
            FeatureTap::HiddenStates => Tap::Hidden,
        }
    }
}

impl std::str::FromStr for FeatureTap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureTap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("tap", format!("unknown tap `{s}` (expected frame_wise, sign_wise or hidden_states)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub backbone_frozen: bool,
    pub temporal_frozen: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        FreezePolicy {
            backbone_frozen: true,
            temporal_frozen: true,
        }
    }
}

impl FreezePolicy {
    pub const NONE: FreezePolicy = FreezePolicy {
        backbone_frozen: false,
        temporal_frozen: false,
    };

    pub fn name(self) -> &'static str {
        match (self.backbone_frozen, self.temporal_frozen) {
            (true, true) => "vb+tm",
            (true, false) => "vb",
            (false, true) => "tm",
            (false, false) => "none",
        }
    }
}

impl std::str::FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (b, t) = match s {
            "vb+tm" | "both" => (true, true),
            "vb" | "backbone" => (true, false),
            "tm" | "temporal" => (false, true),
            "none" => (false, false),
            other => {
                return Err(Error::config(
                    "freeze",
                    format!("unknown freeze policy `{other}` (expected vb+tm, vb, tm or none)"),
                ))
            }
        };
        Ok(FreezePolicy {
            backbone_frozen: b,
            temporal_frozen: t,
        })
    }
}

/// Freezes the selected visual-encoder parts: no gradient buffers, no
/// optimizer updates, and batch norms switched to their running statistics.
pub fn apply_freeze<S: Real>(visual: &mut VisualEncoder<S>, policy: FreezePolicy) {
    visual.set_freeze(policy.backbone_frozen, policy.temporal_frozen);
}

/// A pretrained encoder-decoder that accepts dense encoder inputs in place
/// of its own source word embeddings.
pub trait Seq2SeqBackend<S: Real>: Module<S> {
    type EncoderCache;
    type DecoderCache;

    fn embed_dim(&self) -> usize;

    fn vocab_size(&self) -> usize;

    fn encode_embeddings(&self, x: &Padded<S>, ctx: &mut Ctx) -> Result<(Padded<S>, Self::EncoderCache)>;

    fn backward_encode_embeddings(&mut self, cache: Self::EncoderCache, dout: &Padded<S>) -> Padded<S>;

    /// The backend's own source word embeddings for `tokens`.
    fn native_source_embeddings(&self, tokens: &TokenBatch) -> Result<Padded<S>>;

    fn decode(&self, targets: &TokenBatch, memory: &Padded<S>, ctx: &mut Ctx) -> Result<(Array2<S>, Self::DecoderCache)>;

    fn backward_decode(&mut self, cache: Self::DecoderCache, dlogits: &Array2<S>) -> Array2<S>;

    fn next_token_logprobs(&self, memory: &ArrayView2<S>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;

    /// Native text-to-text forward (inference mode), returning logits.
    fn forward_text(&self, source: &TokenBatch, targets: &TokenBatch) -> Result<Array2<S>> {
        let mut ctx = Ctx::eval();
        let emb = self.native_source_embeddings(source)?;
        let (mem, _) = self.encode_embeddings(&emb, &mut ctx)?;
        Ok(self.decode(targets, &mem, &mut ctx)?.0)
    }
}

impl<S: Real> Seq2SeqBackend<S> for Seq2SeqTransformer<S> {
    type EncoderCache = EncoderCache<S>;
    type DecoderCache = DecoderCache<S>;

    fn embed_dim(&self) -> usize {
        self.hidden()
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn encode_embeddings(&self, x: &Padded<S>, ctx: &mut Ctx) -> Result<(Padded<S>, EncoderCache<S>)> {
        self.encode(x, ctx)
    }

    fn backward_encode_embeddings(&mut self, cache: EncoderCache<S>, dout: &Padded<S>) -> Padded<S> {
        self.backward_encode(cache, dout)
    }

    fn native_source_embeddings(&self, tokens: &TokenBatch) -> Result<Padded<S>> {
        self.embed_source(tokens)
    }

    fn decode(&self, targets: &TokenBatch, memory: &Padded<S>, ctx: &mut Ctx) -> Result<(Array2<S>, DecoderCache<S>)> {
        Seq2SeqTransformer::decode(self, targets, memory, ctx)
    }

    fn backward_decode(&mut self, cache: DecoderCache<S>, dlogits: &Array2<S>) -> Array2<S> {
        Seq2SeqTransformer::backward_decode(self, cache, dlogits)
    }

    fn next_token_logprobs(&self, memory: &ArrayView2<S>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Seq2SeqTransformer::next_token_logprobs(self, memory, prefixes)
    }
}

/// Shape of the desk-scale backend stand-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub dropout: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 4,
            hidden: 256,
            ffn: 1024,
            dropout: 0.1,
        }
    }
}

impl BackendConfig {
    pub fn to_transformer(&self, vocab_size: usize, max_positions: usize) -> TransformerConfig {
        TransformerConfig {
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            hidden: self.hidden,
            ffn: self.ffn,
            vocab_size,
            max_positions,
            dropout: self.dropout,
        }
    }
}

/// Applies the LLM-Adapter to features of the configured tap.
pub fn llm_adapter<S: Real>(adapter: &Adapter<S>, features: &FeatureSequence<S>, tap: FeatureTap) -> Result<FeatureSequence<S>> {
    if features.tap != tap.feature_tag() {
        return Err(Error::InvalidInput(format!(
            "LLM-Adapter configured for {} features, got {:?}",
            tap.name(),
            features.tap
        )));
    }
    let mut e = adapter.infer(&features.values.view())?;
    for mut r in e.rows_mut().into_iter().skip(features.length) {
        r.fill(S::zero());
    }
    FeatureSequence::new(e, features.length, Tap::Textual)
}

/// Re-indexes a transformer's vocabulary-sized tensors (shared word
/// embeddings and LM head) from `from` to `to`. Tokens unknown to `from`
/// take the `<unk>` row.
pub fn retarget_vocabulary<S: Real>(model: &mut Seq2SeqTransformer<S>, from: &Vocabulary, to: &Vocabulary) -> Result<()> {
    if model.config.vocab_size != from.len() {
        return Err(Error::shape("backend vocabulary", from.len(), model.config.vocab_size));
    }
    let rows: Vec<usize> = to
        .tokens()
        .iter()
        .map(|t| from.id(t).unwrap_or(UNK) as usize)
        .collect();
    let table = model.embed.table.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().select(Axis(0), &rows);
    let w = model.lm_head.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().select(Axis(1), &rows);
    let b = model.lm_head.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().select(Axis(0), &rows);
    model.embed.table.value = table.into_dyn();
    model.lm_head.weight.value = w.into_dyn();
    model.lm_head.bias.value = b.into_dyn();
    model.embed.table.grad = None;
    model.lm_head.weight.grad = None;
    model.lm_head.bias.grad = None;
    model.config.vocab_size = to.len();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub delete_prob: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            mask_prob: 0.15,
            delete_prob: 0.1,
            validation_fraction: 0.05,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
}

/// Random masking (to `<unk>`) and deletion; never returns an empty
/// sequence.
pub fn corrupt<R: Rng + ?Sized>(ids: &[u32], rng: &mut R, mask_prob: f64, delete_prob: f64) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let u: f64 = rng.random();
        if u < delete_prob {
            continue;
        }
        if u < delete_prob + mask_prob {
            out.push(UNK);
        } else {
            out.push(id);
        }
    }
    if out.is_empty() {
        out.push(ids.first().copied().unwrap_or(UNK));
    }
    out
}

fn wrap(ids: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len() + 2);
    v.push(BOS);
    v.extend_from_slice(ids);
    v.push(EOS);
    v
}

fn denoise_loss<S: Real>(
    model: &mut Seq2SeqTransformer<S>,
    sources: &[Vec<u32>],
    targets: &[Vec<u32>],
    ctx: &mut Ctx,
    backward: bool,
) -> Result<f64> {
    let src = TokenBatch::from_sequences(sources, 0);
    let emb = model.embed_source(&src)?;
    let (mem, ec) = model.encode(&emb, ctx)?;
    let (dec_in, next, mask) = teacher_forcing(targets);
    let (logits, dc) = model.decode(&dec_in, &mem, ctx)?;
    let (loss, dlogits) = smoothed_ce_with_logits(&logits.view(), &next, &mask, 0.0)?;
    if backward {
        let dmem = model.backward_decode(dc, &dlogits);
        let dmem = Padded::new(dmem, mem.max_len, mem.lens.clone())?;
        let demb = model.backward_encode(ec, &dmem);
        model.backward_embed_source(&src, &demb);
    }
    Ok(loss)
}

fn validation_loss<S: Real>(model: &mut Seq2SeqTransformer<S>, val: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for chunk in val.chunks(64) {
        let src: Vec<Vec<u32>> = chunk.iter().map(|p| p.0.clone()).collect();
        let tgt: Vec<Vec<u32>> = chunk.iter().map(|p| p.1.clone()).collect();
        total += denoise_loss(model, &src, &tgt, &mut Ctx::eval(), false)? * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Denoising pretraining: reconstruct each sentence from a masked and
/// token-deleted copy. `sentences` are raw token ids without bos/eos.
/// Zero steps leave the model untouched.
pub fn pretrain_tiny_backend<S: Real>(
    model: &mut Seq2SeqTransformer<S>,
    sentences: &[Vec<u32>],
    cfg: &DenoiseConfig,
) -> Result<PretrainReport> {
    if sentences.is_empty() {
        return Err(Error::InvalidInput("pretraining needs at least one sentence".into()));
    }
    if cfg.steps == 0 {
        return Ok(PretrainReport {
            steps: 0,
            initial_validation_loss: f64::NAN,
            final_validation_loss: f64::NAN,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_val = ((sentences.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, sentences.len());
    let (val_raw, train) = sentences.split_at(n_val.min(sentences.len().saturating_sub(1)).max(if sentences.len() == 1 { 0 } else { 1 }));
    let train = if train.is_empty() { val_raw } else { train };
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let val: Vec<(Vec<u32>, Vec<u32>)> = val_raw
        .iter()
        .map(|s| (wrap(&corrupt(s, &mut val_rng, cfg.mask_prob, cfg.delete_prob)), wrap(s)))
        .collect();
    let initial = validation_loss(model, &val)?;
    let mut opt = Optimizer::<S>::new(OptimizerKind::adam());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut ctx = Ctx::train(ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)));
    for step in 0..cfg.steps {
        let mut src = Vec::with_capacity(cfg.batch_size);
        let mut tgt = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &train[order[cursor]];
            cursor += 1;
            src.push(wrap(&corrupt(s, &mut rng, cfg.mask_prob, cfg.delete_prob)));
            tgt.push(wrap(s));
        }
        model.zero_grad();
        let loss = denoise_loss(model, &src, &tgt, &mut ctx, true)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: step as u64, epoch: 0 });
        }
        clip_grad_norm(model, 5.0);
        let lr = cosine_lr(step as u64, cfg.steps as u64, cfg.lr, 0.0);
        opt.step(model, &|_| lr);
    }
    model.zero_grad();
    let final_loss = validation_loss(model, &val)?;
    Ok(PretrainReport {
        steps: cfg.steps,
        initial_validation_loss: initial,
        final_validation_loss: final_loss,
    })
}

/// Teacher-forced per-token accuracy when reconstructing uncorrupted
/// sentences (targets include the closing eos).
pub fn reconstruction_accuracy<S: Real>(model: &Seq2SeqTransformer<S>, sentences: &[Vec<u32>]) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for chunk in sentences.chunks(64) {
        let seqs: Vec<Vec<u32>> = chunk.iter().map(|s| wrap(s)).collect();
        let src = TokenBatch::from_sequences(&seqs, 0);
        let (dec_in, next, mask) = teacher_forcing(&seqs);
        let logits = model.forward_text(&src, &dec_in)?;
        let lp = log_softmax_rows(&logits.view());
        for ((row, &t), &m) in lp.rows().into_iter().zip(&next).zip(&mask) {
            if !m {
                continue;
            }
            let arg = row
                .iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
                .0;
            hit += (arg as u32 == t) as usize;
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}
