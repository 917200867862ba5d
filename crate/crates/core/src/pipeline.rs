//! Glue from an [`ExperimentConfig`] to corpora, vocabularies, backends and
//! the stage runners.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, StageConfig};
use crate::corpus::{generate_synthetic_corpus, glyph_name, load_corpus, synthetic_sentences, Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::light_t::LightTConfig;
use crate::llm_stage::{pretrain_tiny_backend, retarget_vocabulary, PretrainReport};
use crate::nn::{Module, Real};
use crate::trainer::checkpoint::{decode_blob, encode_blob};
use crate::transformer::Seq2SeqTransformer;

pub fn load_or_generate_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.corpus.path {
        Some(p) => load_corpus(p),
        None => generate_synthetic_corpus(&cfg.corpus.synthetic),
    }
}

/// Vocabulary the backend is pretrained on: every glyph name for a
/// synthetic corpus, every token seen in any split otherwise.
pub fn base_vocabulary(cfg: &ExperimentConfig, corpus: &Corpus) -> Vocabulary {
    match cfg.corpus.path {
        Some(_) => corpus.full_vocabulary(),
        None => Vocabulary::from_tokens((0..cfg.corpus.synthetic.glyph_vocab_size).map(glyph_name)),
    }
}

/// Base vocabulary trimmed to the training transcripts.
pub fn task_vocabulary(cfg: &ExperimentConfig, corpus: &Corpus) -> Vocabulary {
    corpus.trimmed_vocabulary(&base_vocabulary(cfg, corpus))
}

pub fn light_t_config(cfg: &ExperimentConfig, vocab: &Vocabulary) -> LightTConfig {
    cfg.light_t.resolve(vocab.len(), cfg.max_positions, cfg.light_t_dropout)
}

/// Text-only pretraining data as raw ids over `base`.
pub fn pretraining_sentences(cfg: &ExperimentConfig, corpus: &Corpus, base: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let text: Vec<String> = match cfg.corpus.path {
        Some(_) => corpus.train.iter().map(|s| s.transcript.clone()).collect(),
        None => synthetic_sentences(&cfg.corpus.synthetic, cfg.backend.sentences, cfg.backend.pretrain.seed)?,
    };
    text.iter()
        .map(|t| {
            let ids = base.tokenize(t)?.ids;
            Ok(ids[1..ids.len() - 1].to_vec())
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackendMeta {
    pub key: String,
    pub pretrained: bool,
    pub report: Option<PretrainReport>,
}

fn backend_key(cfg: &ExperimentConfig, base: &Vocabulary, pretrained: bool) -> String {
    let v = serde_json::json!({
        "backend": cfg.backend,
        "corpus": cfg.corpus,
        "max_positions": cfg.max_positions,
        "base": base.tokens(),
        "pretrained": pretrained,
    });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Backend over the base vocabulary, denoising-pretrained when
/// `pretrained`. Initialization depends only on the backend section, so
/// runs with different seeds share one backend.
pub fn base_backend<S: Real>(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    pretrained: bool,
) -> Result<(Seq2SeqTransformer<S>, Option<PretrainReport>)> {
    let base = base_vocabulary(cfg, corpus);
    let tcfg = cfg.backend.shape.to_transformer(base.len(), cfg.max_positions);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.backend.pretrain.seed);
    let mut model = Seq2SeqTransformer::new(&mut rng, tcfg)?;
    let report = if pretrained {
        let sentences = pretraining_sentences(cfg, corpus, &base)?;
        Some(pretrain_tiny_backend(&mut model, &sentences, &cfg.backend.pretrain)?)
    } else {
        None
    };
    Ok((model, report))
}

/// [`base_backend`] retargeted to the task vocabulary. With `cache_dir`,
/// the base weights are stored there and reused while the backend
/// section, corpus and pretraining flag are unchanged.
pub fn task_backend<S: Real>(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    vocab: &Vocabulary,
    pretrained: bool,
    cache_dir: Option<&Path>,
) -> Result<(Seq2SeqTransformer<S>, Option<PretrainReport>)> {
    let base = base_vocabulary(cfg, corpus);
    let key = backend_key(cfg, &base, pretrained);
    let cached = cache_dir.and_then(|d| read_cached::<S>(cfg, &base, d, &key).transpose());
    let (mut model, report) = match cached {
        Some(hit) => hit?,
        None => {
            let (m, r) = base_backend::<S>(cfg, corpus, pretrained)?;
            if let Some(d) = cache_dir {
                write_cached(d, &m, &BackendMeta { key, pretrained, report: r.clone() })?;
            }
            (m, r)
        }
    };
    retarget_vocabulary(&mut model, &base, vocab)?;
    Ok((model, report))
}

fn read_cached<S: Real>(
    cfg: &ExperimentConfig,
    base: &Vocabulary,
    dir: &Path,
    key: &str,
) -> Result<Option<(Seq2SeqTransformer<S>, Option<PretrainReport>)>> {
    let meta_path = dir.join("backend.json");
    let Ok(text) = std::fs::read_to_string(&meta_path) else { return Ok(None) };
    let Ok(meta) = serde_json::from_str::<BackendMeta>(&text) else { return Ok(None) };
    if meta.key != key {
        return Ok(None);
    }
    let wpath = dir.join("backend.bin");
    let bytes = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let tensors = decode_blob::<S>(&bytes, &wpath)?;
    let tcfg = cfg.backend.shape.to_transformer(base.len(), cfg.max_positions);
    let mut model = Seq2SeqTransformer::new(&mut ChaCha8Rng::seed_from_u64(0), tcfg)?;
    let mut by_name: std::collections::HashMap<String, ndarray::ArrayD<S>> = tensors.into_iter().collect();
    let mut bad = None;
    model.visit_mut("", &mut |name, p| match by_name.remove(name) {
        Some(t) if t.shape() == p.value.shape() => p.value = t,
        _ => {
            bad.get_or_insert(name.to_string());
        }
    });
    if let Some(n) = bad {
        return Err(Error::Checkpoint {
            path: wpath,
            reason: format!("cached backend lacks `{n}`"),
        });
    }
    Ok(Some((model, meta.report)))
}

fn write_cached<S: Real>(dir: &Path, model: &Seq2SeqTransformer<S>, meta: &BackendMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut owned = Vec::new();
    model.visit("", &mut |name, p| owned.push((name.to_string(), p.value.clone())));
    let refs: Vec<(String, &ndarray::ArrayD<S>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    let wpath = dir.join("backend.bin");
    std::fs::write(&wpath, encode_blob(&refs)).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join("backend.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&mpath, e))
}

/// Joint-baseline stage config. Under the matched budget the run is
/// capped at the combined step count of both factorized stages.
pub fn e2e_stage_config(cfg: &ExperimentConfig, n_train: usize) -> StageConfig {
    let mut e = cfg.e2e.clone();
    if cfg.e2e_matched_budget {
        let budget = cfg.stage1.total_steps(n_train) + cfg.stage2.total_steps(n_train);
        let per_epoch = e.steps_per_epoch(n_train).max(1);
        e.epochs = budget.div_ceil(per_epoch).max(1) as usize;
        e.max_steps = Some(budget);
    }
    e
}

/// Applies a run seed to every stage section.
pub fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.stage1.seed = seed;
    c.stage2.seed = seed;
    c.e2e.seed = seed;
    c
}

/// Environment variable capping worker threads; `0` selects strict
/// single-threaded execution.
pub const THREADS_ENV: &str = "FLA_SLT_THREADS";

/// Parsed value of [`THREADS_ENV`], `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(THREADS_ENV, format!("`{v}` is not a thread count"))),
    }
}

/// Worker pool for parallel decoding and corpus I/O. `Some(0)` and
/// `Some(1)` both give a single worker; `None` uses one per core.
pub fn worker_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = threads.map_or(0, |t| t.max(1));
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}
