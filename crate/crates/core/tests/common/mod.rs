#![allow(dead_code)]

use fla_slt::config::{ExperimentConfig, LightTSpec};
use fla_slt::corpus::SyntheticSpec;
use fla_slt::llm_stage::BackendConfig;
use fla_slt::visual::VisualEncoderConfig;

/// A few-second configuration for exercising the stage plumbing.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.corpus.synthetic = SyntheticSpec {
        glyph_vocab_size: 6,
        sentence_length_range: (1, 3),
        frames_per_glyph: 2,
        jitter: 1,
        image_size: (12, 12),
        counts: (16, 8, 8),
        seed: 3,
    };
    c.visual = VisualEncoderConfig {
        backbone_channels: vec![4, 8],
        feature_dim: 16,
        temporal_kernel: 3,
        downsample_rate: 0.5,
    };
    c.light_t = LightTSpec::Custom {
        layers: 1,
        heads: 2,
        hidden: 16,
        ffn: 32,
    };
    c.max_positions = 64;
    c.backend.shape = BackendConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        hidden: 16,
        ffn: 32,
        dropout: 0.1,
    };
    c.backend.sentences = 200;
    c.backend.pretrain.steps = 20;
    c.backend.pretrain.batch_size = 16;
    for s in [&mut c.stage1, &mut c.stage2, &mut c.e2e] {
        s.epochs = 2;
        s.batch_size = 8;
    }
    c.eval.max_len = 8;
    c
}
