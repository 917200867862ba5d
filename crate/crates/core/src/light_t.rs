//! The lightweight translation head trained jointly with the visual
//! encoder in the first stage.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_rows, Ctx, Real};
use crate::transformer::{DecoderCache, EncoderCache, Padded, Seq2SeqTransformer, TokenBatch, TransformerConfig};

pub use crate::transformer::positional_encoding;

pub type LightT<S> = Seq2SeqTransformer<S>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightTPreset {
    Tiny,
    Small,
    Base,
    Large,
}

impl LightTPreset {
    pub const ALL: [LightTPreset; 4] = [LightTPreset::Tiny, LightTPreset::Small, LightTPreset::Base, LightTPreset::Large];

    pub fn name(self) -> &'static str {
        match self {
            LightTPreset::Tiny => "tiny",
            LightTPreset::Small => "small",
            LightTPreset::Base => "base",
            LightTPreset::Large => "large",
        }
    }
}

impl std::str::FromStr for LightTPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(LightTPreset::Tiny),
            "small" => Ok(LightTPreset::Small),
            "base" => Ok(LightTPreset::Base),
            "large" => Ok(LightTPreset::Large),
            other => Err(Error::config(
                "light_t.preset",
                format!("unknown preset `{other}` (expected tiny, small, base or large)"),
            )),
        }
    }
}

/// `(layers, heads, hidden, ffn)` plus vocabulary-dependent fields. The
/// same layer count is used for the encoder and the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightTConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl LightTConfig {
    pub fn to_transformer(&self) -> TransformerConfig {
        TransformerConfig {
            encoder_layers: self.layers,
            decoder_layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            ffn: self.ffn,
            vocab_size: self.vocab_size,
            max_positions: self.max_positions,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.to_transformer().validate()
    }
}

pub fn build_light_t(preset: LightTPreset, vocab_size: usize, max_positions: usize) -> LightTConfig {
    let (layers, heads, hidden, ffn) = match preset {
        LightTPreset::Tiny => (1, 4, 256, 1024),
        LightTPreset::Small => (2, 4, 512, 2048),
        LightTPreset::Base => (3, 8, 512, 2048),
        LightTPreset::Large => (4, 8, 1024, 4096),
    };
    LightTConfig {
        layers,
        heads,
        hidden,
        ffn,
        vocab_size,
        max_positions,
        dropout: 0.1,
    }
}

/// Parses a preset name; unknown names are an error.
pub fn build_light_t_named(preset: &str, vocab_size: usize, max_positions: usize) -> Result<LightTConfig> {
    Ok(build_light_t(preset.parse()?, vocab_size, max_positions))
}

/// Trainable parameter count of a transformer with the given shape,
/// computed from the layer formulas without allocating it.
pub fn parameter_count(cfg: &TransformerConfig) -> usize {
    let d = cfg.hidden;
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let ffn = d * cfg.ffn + cfg.ffn + cfg.ffn * d + d;
    let enc_layer = 2 * ln + attn + ffn;
    let dec_layer = 3 * ln + 2 * attn + ffn;
    cfg.vocab_size * d + cfg.encoder_layers * enc_layer + ln + cfg.decoder_layers * dec_layer + ln + d * cfg.vocab_size + cfg.vocab_size
}

/// Text encoder over positional-encoded textual features.
pub fn text_encoder<S: Real>(model: &LightT<S>, g: &Padded<S>, ctx: &mut Ctx) -> Result<(Padded<S>, EncoderCache<S>)> {
    model.encode(g, ctx)
}

/// `WEL(o_i) + PE(i)` for padded token ids.
pub fn embed_targets<S: Real>(model: &LightT<S>, tokens: &TokenBatch) -> Result<Array2<S>> {
    model.embed_targets(tokens)
}

/// Causal decoder over target prefixes and encoder memory; returns logits.
pub fn text_decoder<S: Real>(
    model: &LightT<S>,
    tokens: &TokenBatch,
    memory: &Padded<S>,
    ctx: &mut Ctx,
) -> Result<(Array2<S>, DecoderCache<S>)> {
    model.decode(tokens, memory, ctx)
}

/// Log-probabilities of the language-modeling head for decoder outputs.
pub fn lm_head_logprobs<S: Real>(model: &LightT<S>, y: &ArrayView2<S>) -> Result<Array2<S>> {
    model.lm_head.check_input(y, "lm head input width")?;
    Ok(log_softmax_rows(&model.lm_head.forward(y).view()))
}
