//! The shared training loop and the three entry points built on it: the
//! visual initialing stage, the backend fine-tuning stage, and the joint
//! end-to-end baseline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{StageConfig, GROUPS};
use crate::corpus::{Corpus, SignVideo};
use crate::diagnostics::{watch, NormTrace, Watch};
use crate::error::{Error, Result};
use crate::evalkit::{corpus_bleu, greedy_decode_batch};
use crate::light_t::{LightT, LightTConfig};
use crate::llm_stage::{apply_freeze, FeatureTap, FreezePolicy};
use crate::model::{FeatureCache, Retained, SltModel, TranslatorKind};
use crate::nn::{Ctx, Module, Real};
use crate::trainer::checkpoint::{component_of, load_checkpoint, save_checkpoint, Checkpoint, TrainState};
use crate::trainer::optim::{clip_grad_norm, global_grad_norm, Optimizer};
use crate::trainer::schedule::cosine_lr;
use crate::transformer::Seq2SeqTransformer;
use crate::visual::{build_adapter, VisualEncoder, VisualEncoderConfig};

/// Seeds of independent generator streams derived from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_VISUAL: u64 = 1;
const STREAM_LIGHT_T: u64 = 2;
const STREAM_LLM_ADAPTER: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Where checkpoints and `metrics.csv` go; `None` keeps everything in
    /// memory.
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
    /// Continue from the newest epoch checkpoint in `out_dir`.
    pub resume: bool,
    /// Accept a resume checkpoint written under a different config hash.
    pub force: bool,
    /// Parameter-group selectors to trace; `None` uses the stage default.
    pub watch: Option<Vec<String>>,
    /// Return after this many completed epochs (the run stays resumable).
    pub stop_after_epochs: Option<usize>,
    /// Length cap for dev-set greedy decoding.
    pub decode_max_len: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            out_dir: None,
            config_hash: String::new(),
            resume: false,
            force: false,
            watch: None,
            stop_after_epochs: None,
            decode_max_len: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    /// Learning rate per active group, in [`StageRun::groups`] order.
    pub lrs: Vec<f64>,
    pub bleu4: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StageRun<S> {
    /// Selected model: best dev BLEU-4 when selection is on, else the last.
    pub model: SltModel<S>,
    pub last: SltModel<S>,
    pub optimizer: Optimizer<S>,
    pub state: TrainState,
    pub groups: Vec<String>,
    /// Rows produced by this invocation (a resumed run starts after the
    /// checkpoint).
    pub metrics: Vec<MetricRow>,
    pub trace: Option<NormTrace>,
    pub total_steps: u64,
}

impl<S> StageRun<S> {
    pub fn train_losses(&self) -> Vec<f64> {
        self.metrics.iter().filter(|r| r.split == "train").map(|r| r.loss).collect()
    }

    pub fn dev_rows(&self) -> Vec<&MetricRow> {
        self.metrics.iter().filter(|r| r.split == "dev").collect()
    }
}

/// Visual encoder and adapter freshly initialized from `seed`, in front of
/// the given translator.
pub fn init_model<S: Real>(
    seed: u64,
    visual: &VisualEncoderConfig,
    translator: Seq2SeqTransformer<S>,
    kind: TranslatorKind,
    vocab: crate::corpus::Vocabulary,
) -> Result<SltModel<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_VISUAL));
    let visual = VisualEncoder::new(&mut rng, visual.clone())?;
    let h = translator.hidden();
    let adapter = build_adapter(&mut rng, visual.feature_dim(), h, h);
    SltModel::new(visual, adapter, translator, kind, None, FeatureTap::SignWise, vocab)
}

pub fn init_light_t<S: Real>(seed: u64, cfg: &LightTConfig) -> Result<LightT<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_LIGHT_T));
    Seq2SeqTransformer::new(&mut rng, cfg.to_transformer())
}

fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join("checkpoints").join(format!("epoch-{epoch:03}"))
}

/// Newest per-epoch checkpoint under a run directory.
pub fn latest_checkpoint(root: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(root.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n: usize = name.strip_prefix("epoch-")?.parse().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

/// Groups with trainable parameters, in canonical order.
fn active_groups<S: Real>(model: &SltModel<S>) -> Result<Vec<String>> {
    let mut found = std::collections::BTreeSet::new();
    let mut orphan = None;
    model.visit("", &mut |name, p| {
        if !p.trainable() {
            return;
        }
        match component_of(model.kind, name) {
            Some(g) => {
                found.insert(g);
            }
            None => {
                orphan.get_or_insert(name.to_string());
            }
        }
    });
    if let Some(n) = orphan {
        return Err(Error::InvalidInput(format!("trainable parameter `{n}` belongs to no learning-rate group")));
    }
    Ok(GROUPS.iter().filter(|g| found.contains(*g)).map(|g| g.to_string()).collect())
}

struct MetricsLog {
    file: Option<std::io::BufWriter<std::fs::File>>,
    path: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    fn open(dir: Option<&Path>, groups: &[String], keep_through: Option<u64>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(MetricsLog {
                file: None,
                path: PathBuf::new(),
            });
        };
        let path = dir.join("metrics.csv");
        let header = format!(
            "step,split,loss,{},bleu4",
            groups.iter().map(|g| format!("lr_{g}")).collect::<Vec<_>>().join(",")
        );
        let mut kept = String::new();
        if let (Some(limit), Ok(old)) = (keep_through, std::fs::read_to_string(&path)) {
            for line in old.lines().skip(1) {
                let mut f = line.split(',');
                let step: Option<u64> = f.next().and_then(|s| s.parse().ok());
                // train rows carry the step they started; dev rows the step count after the epoch
                let keep = match f.next() {
                    Some("train") => step.is_some_and(|s| s < limit),
                    _ => step.is_some_and(|s| s <= limit),
                };
                if keep {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{header}").and_then(|_| f.write_all(kept.as_bytes())).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsLog {
            file: Some(std::io::BufWriter::new(f)),
            path,
        })
    }

    fn write(&mut self, r: &MetricRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            let lrs: Vec<String> = r.lrs.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{},{},{},{}", r.step, r.split, r.loss, lrs.join(","), fmt_opt(r.bleu4))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Mean per-batch loss over a split in inference mode.
pub fn split_loss<S: Real>(
    model: &mut SltModel<S>,
    samples: &[SignVideo],
    label_smoothing: f64,
    cache: Option<&FeatureCache<S>>,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let refs: Vec<&SignVideo> = chunk.iter().collect();
        total += model.loss(&refs, label_smoothing, cache)? * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Corpus BLEU-4 of batched greedy decoding.
pub fn greedy_bleu4<S: Real>(
    model: &mut SltModel<S>,
    samples: &[SignVideo],
    max_len: usize,
    cache: Option<&FeatureCache<S>>,
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let r: Vec<&SignVideo> = chunk.iter().collect();
        let mem = model.memories(&r, cache)?;
        for (s, ids) in chunk.iter().zip(greedy_decode_batch(&model.translator, &mem, max_len)?) {
            hyps.push(model.vocab.detokenize(&ids));
            refs.push(s.transcript.split_whitespace().collect::<Vec<_>>().join(" "));
        }
    }
    Ok(corpus_bleu(&hyps, &refs, 4)?[3])
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: u64,
    epoch: usize,
    loss: f64,
    grad_norm: f64,
    sample_ids: Vec<&'a str>,
    recent_losses: Vec<f64>,
}

/// Trains `model` on `corpus.train` under `cfg`, evaluating on dev after
/// every epoch.
pub fn train_stage<S: Real>(
    mut model: SltModel<S>,
    corpus: &Corpus,
    cfg: &StageConfig,
    section: &str,
    opts: &RunOptions,
    cache: Option<&FeatureCache<S>>,
    default_watch: &[String],
) -> Result<StageRun<S>> {
    cfg.validate(section)?;
    if corpus.train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let out = opts.out_dir.as_deref();
    let mut optimizer = Optimizer::<S>::new(cfg.optimizer);
    let mut state = TrainState::new(derive_seed(cfg.seed, STREAM_DROPOUT));
    let mut best: Option<SltModel<S>> = None;
    let mut resumed_at = None;
    if opts.resume {
        let root = out.ok_or_else(|| Error::config("resume", "resuming needs an output directory"))?;
        if let Some(dir) = latest_checkpoint(root) {
            let ck: Checkpoint<S> = load_checkpoint(&dir, Some(&opts.config_hash), opts.force)?;
            model = ck.model()?;
            optimizer = ck.optimizer().unwrap_or(optimizer);
            state = ck.state()?;
            resumed_at = Some(state.step);
            let best_dir = root.join("best");
            if best_dir.exists() {
                best = Some(load_checkpoint::<S>(&best_dir, Some(&opts.config_hash), opts.force)?.model()?);
            }
        }
    }
    let groups = active_groups(&model)?;
    let peaks: Vec<f64> = groups.iter().map(|g| cfg.peak(section, g)).collect::<Result<_>>()?;
    let peak_of: BTreeMap<&str, f64> = groups.iter().map(|g| g.as_str()).zip(peaks.iter().copied()).collect();
    let total_steps = cfg.total_steps(corpus.train.len());
    let t_max = cfg.schedule.t_max.unwrap_or(total_steps);
    let lr_min = cfg.schedule.lr_min;
    let lrs_at = |step: u64| -> Vec<f64> { peaks.iter().map(|&p| cosine_lr(step, t_max, p, lr_min)).collect() };

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = MetricsLog::open(out, &groups, resumed_at)?;
    let selectors: Vec<String> = opts.watch.clone().unwrap_or_else(|| default_watch.to_vec());
    let mut watcher: Option<Watch> = if selectors.is_empty() {
        None
    } else {
        let refs: Vec<&str> = selectors.iter().map(|s| s.as_str()).collect();
        Some(watch(&model, &refs)?)
    };
    let mut metrics = Vec::new();
    let mut ctx = Ctx::train(state.rng.clone());
    let kind = model.kind;

    while state.epoch < cfg.epochs && state.step < total_steps {
        if opts.stop_after_epochs.is_some_and(|k| state.epoch >= k) {
            break;
        }
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, STREAM_SHUFFLE), state.epoch as u64));
        order.shuffle(&mut shuffle);
        let mut recent = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if state.step >= total_steps {
                break;
            }
            let batch: Vec<&SignVideo> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            model.zero_grad();
            let loss = model.train_step(&batch, cfg.label_smoothing, &mut ctx, cache)?;
            recent.push(loss);
            if !loss.is_finite() {
                let dump = DivergenceDump {
                    step: state.step,
                    epoch: state.epoch,
                    loss,
                    grad_norm: global_grad_norm(&model),
                    sample_ids: batch.iter().map(|s| s.sample_id.as_str()).collect(),
                    recent_losses: recent.iter().rev().take(20).rev().copied().collect(),
                };
                if let Some(dir) = out {
                    let p = dir.join("divergence.json");
                    std::fs::write(&p, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&p, e))?;
                }
                log.flush()?;
                return Err(Error::Divergence {
                    step: state.step,
                    epoch: state.epoch,
                });
            }
            if let Some(w) = &mut watcher {
                w.record_step(&model, state.step)?;
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut model, c);
            }
            let step = state.step;
            optimizer.step(&mut model, &|name| {
                let g = component_of(kind, name).unwrap_or("");
                peak_of.get(g).map_or(0.0, |&p| cosine_lr(step, t_max, p, lr_min))
            });
            let row = MetricRow {
                step,
                split: "train".into(),
                loss,
                lrs: lrs_at(step),
                bleu4: None,
            };
            log.write(&row)?;
            metrics.push(row);
            state.step += 1;
        }
        model.zero_grad();
        state.epoch += 1;
        let dev_loss = split_loss(&mut model, &corpus.dev, cfg.label_smoothing, cache)?;
        let bleu = if cfg.select_by_dev_bleu && !corpus.dev.is_empty() {
            Some(greedy_bleu4(&mut model, &corpus.dev, opts.decode_max_len, cache)?)
        } else {
            None
        };
        let row = MetricRow {
            step: state.step,
            split: "dev".into(),
            loss: dev_loss,
            lrs: lrs_at(state.step),
            bleu4: bleu,
        };
        log.write(&row)?;
        metrics.push(row);
        if let Some(b) = bleu {
            if state.best_dev_bleu.is_none_or(|prev| b > prev) {
                state.best_dev_bleu = Some(b);
                state.best_epoch = Some(state.epoch);
                best = Some(model.clone());
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("best"), &model, None, &state, &opts.config_hash)?;
                }
            }
        }
        state.rng = ctx.rng.clone();
        if let Some(dir) = out {
            save_checkpoint(&epoch_dir(dir, state.epoch), &model, Some(&optimizer), &state, &opts.config_hash)?;
        }
        log.flush()?;
    }
    state.rng = ctx.rng.clone();
    if let Some(w) = &mut watcher {
        w.detach();
    }
    let selected = match best {
        Some(b) if cfg.select_by_dev_bleu => b,
        _ => model.clone(),
    };
    Ok(StageRun {
        model: selected,
        last: model,
        optimizer,
        state,
        groups,
        metrics,
        trace: watcher.map(|w| w.trace),
        total_steps,
    })
}

/// Visual encoder, VL-Adapter and Light-T trained jointly from scratch.
pub fn run_stage1<S: Real>(
    corpus: &Corpus,
    vocab: crate::corpus::Vocabulary,
    visual: &VisualEncoderConfig,
    light_t: &LightTConfig,
    cfg: &StageConfig,
    opts: &RunOptions,
) -> Result<StageRun<S>> {
    let mut lcfg = light_t.clone();
    lcfg.vocab_size = vocab.len();
    let translator = init_light_t(cfg.seed, &lcfg)?;
    let model = init_model(cfg.seed, visual, translator, TranslatorKind::LightT, vocab)?;
    train_stage(model, corpus, cfg, "stage1", opts, None, &[])
}

/// Stage-2 model: the stage-1 visual encoder under `freeze`, a fresh
/// LLM-Adapter for `tap`, and `backend`. The stage-1 adapter and Light-T
/// are kept (frozen) only for the hidden-state tap.
pub fn stage2_model<S: Real>(
    stage1: &SltModel<S>,
    backend: Seq2SeqTransformer<S>,
    freeze: FreezePolicy,
    tap: FeatureTap,
    seed: u64,
) -> Result<SltModel<S>> {
    if backend.vocab_size() != stage1.vocab.len() {
        return Err(Error::shape("backend vocabulary", stage1.vocab.len(), backend.vocab_size()));
    }
    if stage1.kind != TranslatorKind::LightT {
        return Err(Error::InvalidInput("stage 2 starts from a stage-1 (Light-T) model".into()));
    }
    let s1 = stage1.clone();
    let mut visual = s1.visual;
    apply_freeze(&mut visual, freeze);
    let retained = (tap == FeatureTap::HiddenStates).then(|| Retained::new(s1.adapter, s1.translator));
    let width = match tap {
        FeatureTap::FrameWise => visual.frame_dim(),
        FeatureTap::SignWise => visual.feature_dim(),
        FeatureTap::HiddenStates => retained.as_ref().map_or(0, |r| r.light_t.hidden()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_LLM_ADAPTER));
    let h = backend.hidden();
    let adapter = build_adapter(&mut rng, width, h, h);
    SltModel::new(visual, adapter, backend, TranslatorKind::Backend, retained, tap, stage1.vocab.clone())
}

/// Fine-tunes the adapter and backend on top of a stage-1 checkpoint.
/// Features of a fully frozen visual path are computed once and cached.
pub fn run_stage2<S: Real>(
    stage1: &SltModel<S>,
    corpus: &Corpus,
    backend: Seq2SeqTransformer<S>,
    cfg: &StageConfig,
    freeze: FreezePolicy,
    tap: FeatureTap,
    opts: &RunOptions,
) -> Result<StageRun<S>> {
    let mut model = stage2_model(stage1, backend, freeze, tap, cfg.seed)?;
    let cache = if model.visual_trainable() {
        None
    } else {
        Some(FeatureCache::build(&mut model, corpus.train.iter().chain(&corpus.dev), 32)?)
    };
    train_stage(model, corpus, cfg, "stage2", opts, cache.as_ref(), &[])
}

/// Default dominance watch: the temporal convolution of the visual
/// encoder and the final decoder block of the translator.
pub fn dominance_layers<S: Real>(model: &SltModel<S>) -> [String; 2] {
    [
        "visual.temporal.conv".to_string(),
        format!("translator.{}", model.translator.last_decoder_block()),
    ]
}

/// Visual encoder and translator trained together from their
/// initializations, with the dominance watch attached.
pub fn run_joint_e2e<S: Real>(
    corpus: &Corpus,
    vocab: crate::corpus::Vocabulary,
    visual: &VisualEncoderConfig,
    translator: Seq2SeqTransformer<S>,
    kind: TranslatorKind,
    cfg: &StageConfig,
    opts: &RunOptions,
) -> Result<StageRun<S>> {
    let model = init_model(cfg.seed, visual, translator, kind, vocab)?;
    let layers = dominance_layers(&model);
    train_stage(model, corpus, cfg, "e2e", opts, None, &layers)
}
