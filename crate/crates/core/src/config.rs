//! Experiment configuration: one JSON document covering data, model
//! shapes, every training stage, decoding and ablation sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};
use crate::evalkit::BeamConfig;
use crate::light_t::{build_light_t, LightTConfig, LightTPreset};
use crate::llm_stage::{BackendConfig, DenoiseConfig, FeatureTap, FreezePolicy};
use crate::trainer::{CosineSchedule, OptimizerKind};
use crate::visual::VisualEncoderConfig;

/// Learning-rate group names; every parameter belongs to exactly one.
pub const GROUPS: [&str; 4] = ["visual_encoder", "adapter", "light_t", "backend"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub optimizer: OptimizerKind,
    /// Peak learning rate per group.
    pub lr_groups: BTreeMap<String, f64>,
    pub schedule: CosineSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; the schedule spans this many steps when set.
    pub max_steps: Option<u64>,
    pub label_smoothing: f64,
    pub clip_norm: Option<f64>,
    /// Pick the epoch with the best dev BLEU-4 (greedy decoding).
    pub select_by_dev_bleu: bool,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage1()
    }
}

impl StageConfig {
    pub fn stage1() -> Self {
        StageConfig {
            optimizer: OptimizerKind::sgd(0.9),
            lr_groups: [("visual_encoder", 1e-2), ("adapter", 1e-2), ("light_t", 1e-2)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            schedule: CosineSchedule::default(),
            batch_size: 8,
            epochs: 30,
            max_steps: None,
            label_smoothing: 0.2,
            clip_norm: Some(5.0),
            select_by_dev_bleu: true,
            seed: 0,
        }
    }

    pub fn stage2() -> Self {
        StageConfig {
            optimizer: OptimizerKind::adam(),
            lr_groups: [("visual_encoder", 1e-3), ("adapter", 1e-3), ("backend", 1e-5)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            batch_size: 16,
            epochs: 20,
            ..StageConfig::stage1()
        }
    }

    /// Joint training reuses the second-stage recipe with the visual
    /// encoder trained at the adapter rate.
    pub fn e2e() -> Self {
        StageConfig::stage2()
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::config(format!("{section}.epochs"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{section}.batch_size"), "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!("{section}.label_smoothing"), "must be in [0, 1)"));
        }
        for (k, &v) in &self.lr_groups {
            if !GROUPS.contains(&k.as_str()) {
                return Err(Error::config(
                    format!("{section}.lr_groups.{k}"),
                    format!("unknown group (expected one of {})", GROUPS.join(", ")),
                ));
            }
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{section}.lr_groups.{k}"), "learning rates must be positive"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!("{section}.clip_norm"), "must be positive"));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::config(format!("{section}.max_steps"), "must be at least 1"));
        }
        Ok(())
    }

    /// Peak rate of `group`, or an error naming the missing entry.
    pub fn peak(&self, section: &str, group: &str) -> Result<f64> {
        self.lr_groups
            .get(group)
            .copied()
            .ok_or_else(|| Error::config(format!("{section}.lr_groups.{group}"), "missing learning rate for trainable group"))
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size) as u64
    }

    /// Total optimizer steps for a training split of `n_train` samples.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        let planned = self.steps_per_epoch(n_train) * self.epochs as u64;
        self.max_steps.map_or(planned, |m| m.min(planned))
    }
}

/// Fields present in a stage section override that stage's own recipe
/// (not the struct-level default).
fn merge_stage<'de, D: serde::Deserializer<'de>>(d: D, base: StageConfig) -> std::result::Result<StageConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Value::deserialize(d)?;
    let serde_json::Value::Object(given) = given else {
        return Err(D::Error::custom("stage section must be an object"));
    };
    let mut v = serde_json::to_value(base).map_err(D::Error::custom)?;
    if let Some(o) = v.as_object_mut() {
        for (k, val) in given {
            o.insert(k, val);
        }
    }
    serde_json::from_value(v).map_err(D::Error::custom)
}

fn stage1_section<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    merge_stage(d, StageConfig::stage1())
}

fn stage2_section<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    merge_stage(d, StageConfig::stage2())
}

fn e2e_section<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    merge_stage(d, StageConfig::e2e())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LightTSpec {
    Preset(LightTPreset),
    Custom { layers: usize, heads: usize, hidden: usize, ffn: usize },
}

impl LightTSpec {
    pub fn resolve(&self, vocab_size: usize, max_positions: usize, dropout: f64) -> LightTConfig {
        match *self {
            LightTSpec::Preset(p) => LightTConfig {
                dropout,
                ..build_light_t(p, vocab_size, max_positions)
            },
            LightTSpec::Custom { layers, heads, hidden, ffn } => LightTConfig {
                layers,
                heads,
                hidden,
                ffn,
                vocab_size,
                max_positions,
                dropout,
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            LightTSpec::Preset(p) => p.name().to_string(),
            LightTSpec::Custom { layers, heads, hidden, ffn } => format!("custom({layers},{heads},{hidden},{ffn})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub shape: BackendConfig,
    pub pretrain: DenoiseConfig,
    /// Run the denoising pretext before use; a random backend otherwise.
    pub pretrained: bool,
    /// Monolingual sentences generated for pretraining (synthetic corpora).
    pub sentences: usize,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            shape: BackendConfig::default(),
            pretrain: DenoiseConfig::default(),
            pretrained: true,
            sentences: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSource {
    /// Existing on-disk corpus; the synthetic spec is used when absent.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource {
            path: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationValues {
    pub downsample_rate: Vec<f64>,
    pub light_t_scale: Vec<LightTPreset>,
    pub feature_tap: Vec<FeatureTap>,
    pub freeze_policy: Vec<String>,
    pub backend_pretraining: Vec<bool>,
    pub init_epochs: Vec<usize>,
}

impl Default for AblationValues {
    fn default() -> Self {
        AblationValues {
            downsample_rate: vec![1.0, 0.5, 0.25, 0.125],
            light_t_scale: LightTPreset::ALL.to_vec(),
            feature_tap: FeatureTap::ALL.to_vec(),
            freeze_policy: ["vb+tm", "vb", "tm", "none"].iter().map(|s| s.to_string()).collect(),
            backend_pretraining: vec![true, false],
            init_epochs: vec![5, 10, 20, 30],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSource,
    pub visual: VisualEncoderConfig,
    pub light_t: LightTSpec,
    pub light_t_dropout: f64,
    pub max_positions: usize,
    pub backend: BackendSpec,
    #[serde(deserialize_with = "stage1_section")]
    pub stage1: StageConfig,
    #[serde(deserialize_with = "stage2_section")]
    pub stage2: StageConfig,
    #[serde(deserialize_with = "e2e_section")]
    pub e2e: StageConfig,
    /// Give the joint baseline the combined step budget of both stages.
    pub e2e_matched_budget: bool,
    pub tap: FeatureTap,
    pub freeze: FreezePolicy,
    pub eval: BeamConfig,
    pub ablate: AblationValues,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusSource::default(),
            visual: VisualEncoderConfig::default(),
            light_t: LightTSpec::Preset(LightTPreset::Tiny),
            light_t_dropout: 0.1,
            max_positions: 256,
            backend: BackendSpec::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            e2e: StageConfig::e2e(),
            e2e_matched_budget: true,
            tap: FeatureTap::SignWise,
            freeze: FreezePolicy::default(),
            eval: BeamConfig::default(),
            ablate: AblationValues::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.path.is_none() {
            self.corpus.synthetic.validate()?;
        }
        self.visual.validate()?;
        self.light_t.resolve(5, self.max_positions, self.light_t_dropout).validate()?;
        if !(0.0..1.0).contains(&self.light_t_dropout) {
            return Err(Error::config("light_t_dropout", "must be in [0, 1)"));
        }
        self.backend.shape.to_transformer(5, self.max_positions).validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.e2e.validate("e2e")?;
        self.eval.validate()?;
        for f in &self.ablate.freeze_policy {
            f.parse::<FreezePolicy>()?;
        }
        for &r in &self.ablate.downsample_rate {
            crate::visual::check_rate(r)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form, with the
    /// output directory excluded so that moving a run keeps its hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("out_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
