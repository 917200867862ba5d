//! Checkpoint directories: `manifest.json`, `vocab.txt`, and one binary
//! blob per parameter group (plus optimizer slots).
//!
//! Blob layout: magic `FLASLT\0` + format byte, byte-order byte (`<`), a
//! little-endian `u32` tensor count, then per tensor a `u32` name length,
//! the UTF-8 name, a dtype code, the rank, `u64` dims and the raw
//! little-endian values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::llm_stage::FeatureTap;
use crate::model::{Retained, SltModel, TranslatorKind};
use crate::nn::{DType, Module, Mlp, Real};
use crate::trainer::optim::{Optimizer, OptimizerKind, Slots};
use crate::transformer::{Seq2SeqTransformer, TransformerConfig};
use crate::visual::{VisualEncoder, VisualEncoderConfig};

const MAGIC: &[u8; 8] = b"FLASLT\0\x01";
const FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

impl MlpShape {
    pub fn of<S: Real>(m: &Mlp<S>) -> Self {
        MlpShape {
            d_in: m.d_in(),
            hidden: m.fc1.d_out(),
            d_out: m.d_out(),
        }
    }

    fn build<S: Real>(&self, rng: &mut ChaCha8Rng) -> Mlp<S> {
        Mlp::new(rng, self.d_in, self.hidden, self.d_out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedSpec {
    pub adapter: MlpShape,
    pub light_t: TransformerConfig,
}

/// Everything needed to rebuild the skeleton of an [`SltModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub visual: VisualEncoderConfig,
    pub adapter: MlpShape,
    pub translator: TransformerConfig,
    pub kind: TranslatorKind,
    pub retained: Option<RetainedSpec>,
    pub tap: FeatureTap,
    pub visual_frozen: (bool, bool),
}

impl ModelSpec {
    pub fn of<S: Real>(m: &SltModel<S>) -> Self {
        ModelSpec {
            visual: m.visual.config.clone(),
            adapter: MlpShape::of(&m.adapter),
            translator: m.translator.config.clone(),
            kind: m.kind,
            retained: m.retained.as_ref().map(|r| RetainedSpec {
                adapter: MlpShape::of(&r.adapter),
                light_t: r.light_t.config.clone(),
            }),
            tap: m.tap,
            visual_frozen: m.visual.frozen(),
        }
    }

    /// Freshly initialized model of this shape (weights are expected to be
    /// overwritten by a checkpoint).
    pub fn build<S: Real>(&self, vocab: Vocabulary) -> Result<SltModel<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut visual = VisualEncoder::new(&mut rng, self.visual.clone())?;
        visual.set_freeze(self.visual_frozen.0, self.visual_frozen.1);
        let adapter = self.adapter.build(&mut rng);
        let translator = Seq2SeqTransformer::new(&mut rng, self.translator.clone())?;
        let retained = match &self.retained {
            Some(r) => Some(Retained::new(
                r.adapter.build(&mut rng),
                Seq2SeqTransformer::new(&mut rng, r.light_t.clone())?,
            )),
            None => None,
        };
        SltModel::new(visual, adapter, translator, self.kind, retained, self.tap, vocab)
    }
}

/// Training progress saved with every checkpoint.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_dev_bleu: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Generator driving dropout masks.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            best_dev_bleu: None,
            best_epoch: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl PartialEq for TrainState {
    fn eq(&self, o: &Self) -> bool {
        self.step == o.step
            && self.epoch == o.epoch
            && self.best_dev_bleu.map(f64::to_bits) == o.best_dev_bleu.map(f64::to_bits)
            && self.best_epoch == o.best_epoch
            && RngState::of(&self.rng) == RngState::of(&o.rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |r: &str| Error::Checkpoint {
            path: PathBuf::new(),
            reason: format!("invalid generator state: {r}"),
        };
        let bytes = hex::decode(&self.seed).map_err(|e| bad(&e.to_string()))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|e| bad(&e.to_string()))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    /// Parameter-name prefix inside the model.
    pub name: String,
    /// One of visual_encoder, adapter, light_t, backend.
    pub component: String,
    pub file: String,
    pub sha256: String,
    pub tensors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub kind: OptimizerKind,
    pub file: String,
    pub sha256: String,
    pub steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config_hash: String,
    pub dtype: String,
    pub step: u64,
    pub epoch: usize,
    pub best_dev_bleu: Option<f64>,
    pub best_epoch: Option<usize>,
    pub rng: RngState,
    pub model: ModelSpec,
    pub groups: Vec<GroupEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub vocab_sha256: String,
    /// SHA-256 of this manifest serialized with an empty digest.
    pub digest: String,
}

impl Manifest {
    fn compute_digest(&self) -> String {
        let mut m = self.clone();
        m.digest.clear();
        hex::encode(Sha256::digest(serde_json::to_vec(&m).expect("manifest serializes")))
    }
}

fn dtype_name<S: Real>() -> &'static str {
    match S::DTYPE {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_blob<S: Real>(tensors: &[(String, &ArrayD<S>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(b'<');
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE.code());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode_blob<S: Real>(bytes: &[u8], path: &Path) -> Result<Vec<(String, ArrayD<S>)>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| ckpt_err(path, "truncated blob"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(ckpt_err(path, "bad magic"));
    }
    if take(1)? != b"<" {
        return Err(ckpt_err(path, "unsupported byte order"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(n)?.to_vec()).map_err(|_| ckpt_err(path, "tensor name is not UTF-8"))?;
        let code = take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| ckpt_err(path, format!("unknown dtype code {code}")))?;
        if dtype != S::DTYPE {
            return Err(ckpt_err(path, format!("tensor `{name}` has dtype {dtype:?}, expected {:?}", S::DTYPE)));
        }
        let ndim = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let size = dtype.size();
        let raw = take(len * size)?;
        let values: Vec<S> = raw.chunks_exact(size).map(S::read_le).collect();
        let t = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| ckpt_err(path, e.to_string()))?;
        out.push((name, t));
    }
    if pos != bytes.len() {
        return Err(ckpt_err(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over every tensor name and value of a module, running
/// statistics included.
pub fn checksum<S: Real, M: Module<S> + ?Sized>(module: &M) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    module.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        h.update([0u8]);
        buf.clear();
        for v in p.value.iter() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    });
    hex::encode(h.finalize())
}

/// Top-level parameter groups of a model with their component names.
pub fn model_groups<S: Real>(model: &SltModel<S>) -> Vec<(&'static str, &'static str)> {
    let mut g = vec![
        ("visual", "visual_encoder"),
        ("adapter", "adapter"),
        ("translator", model.kind.component()),
    ];
    if model.retained.is_some() {
        g.push(("retained", "light_t"));
    }
    g
}

/// Component name of a full parameter name (`None` for retained parts).
pub fn component_of(kind: TranslatorKind, param: &str) -> Option<&'static str> {
    let head = param.split('.').next().unwrap_or("");
    match head {
        "visual" => Some("visual_encoder"),
        "adapter" => Some("adapter"),
        "translator" => Some(kind.component()),
        _ => None,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint directory, replacing any previous one atomically
/// at the directory level.
pub fn save_checkpoint<S: Real>(
    dir: &Path,
    model: &SltModel<S>,
    optimizer: Option<&Optimizer<S>>,
    state: &TrainState,
    config_hash: &str,
) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut groups = Vec::new();
    for (prefix, component) in model_groups(model) {
        let mut owned: Vec<(String, ArrayD<S>)> = Vec::new();
        let lead = format!("{prefix}.");
        model.visit("", &mut |name, p| {
            if let Some(rel) = name.strip_prefix(&lead) {
                owned.push((rel.to_string(), p.value.clone()));
            }
        });
        let tensors: Vec<(String, &ArrayD<S>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        let bytes = encode_blob(&tensors);
        let file = format!("{prefix}.bin");
        write_file(&tmp.join(&file), &bytes)?;
        groups.push(GroupEntry {
            name: prefix.to_string(),
            component: component.to_string(),
            file,
            sha256: sha(&bytes),
            tensors: tensors.len(),
        });
    }
    let optimizer = match optimizer {
        Some(opt) => {
            let mut tensors: Vec<(String, &ArrayD<S>)> = Vec::new();
            let mut steps = BTreeMap::new();
            for (name, slot) in &opt.slots {
                tensors.push((format!("{name}#first"), &slot.first));
                if let Some(s) = &slot.second {
                    tensors.push((format!("{name}#second"), s));
                }
                steps.insert(name.clone(), slot.steps);
            }
            let bytes = encode_blob(&tensors);
            write_file(&tmp.join("optimizer.bin"), &bytes)?;
            Some(OptimizerEntry {
                kind: opt.kind,
                file: "optimizer.bin".into(),
                sha256: sha(&bytes),
                steps,
            })
        }
        None => None,
    };
    let vocab_path = tmp.join("vocab.txt");
    model.vocab.save(&vocab_path)?;
    let vocab_bytes = std::fs::read(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let mut manifest = Manifest {
        format: FORMAT,
        config_hash: config_hash.to_string(),
        dtype: dtype_name::<S>().to_string(),
        step: state.step,
        epoch: state.epoch,
        best_dev_bleu: state.best_dev_bleu,
        best_epoch: state.best_epoch,
        rng: RngState::of(&state.rng),
        model: ModelSpec::of(model),
        groups,
        optimizer,
        vocab_sha256: sha(&vocab_bytes),
        digest: String::new(),
    };
    manifest.digest = manifest.compute_digest();
    write_file(&tmp.join("manifest.json"), (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// A verified checkpoint held in memory.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub groups: BTreeMap<String, Vec<(String, ArrayD<S>)>>,
    optimizer: Option<Vec<(String, ArrayD<S>)>>,
}

/// Reads and verifies a checkpoint: manifest digest, blob and vocabulary
/// hashes, dtype, and (unless `force`) the expected config hash.
pub fn load_checkpoint<S: Real>(dir: &Path, expected_hash: Option<&str>, force: bool) -> Result<Checkpoint<S>> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(&mpath, format!("malformed manifest: {e}")))?;
    if manifest.digest != manifest.compute_digest() {
        return Err(ckpt_err(&mpath, "manifest digest mismatch (file was modified)"));
    }
    if manifest.format != FORMAT {
        return Err(ckpt_err(&mpath, format!("unsupported format {}", manifest.format)));
    }
    if manifest.dtype != dtype_name::<S>() {
        return Err(ckpt_err(&mpath, format!("checkpoint dtype {} does not match {}", manifest.dtype, dtype_name::<S>())));
    }
    if let Some(h) = expected_hash {
        if h != manifest.config_hash && !force {
            return Err(Error::ConfigHashMismatch {
                expected: h.to_string(),
                found: manifest.config_hash.clone(),
            });
        }
    }
    let read = |file: &str, want: &str| -> Result<Vec<u8>> {
        let p = dir.join(file);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if sha(&bytes) != want {
            return Err(ckpt_err(&p, "content hash mismatch"));
        }
        Ok(bytes)
    };
    read("vocab.txt", &manifest.vocab_sha256)?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let mut groups = BTreeMap::new();
    for g in &manifest.groups {
        let bytes = read(&g.file, &g.sha256)?;
        let tensors = decode_blob::<S>(&bytes, &dir.join(&g.file))?;
        if tensors.len() != g.tensors {
            return Err(ckpt_err(&dir.join(&g.file), "tensor count differs from manifest"));
        }
        groups.insert(g.name.clone(), tensors);
    }
    let optimizer = match &manifest.optimizer {
        Some(o) => Some(decode_blob::<S>(&read(&o.file, &o.sha256)?, &dir.join(&o.file))?),
        None => None,
    };
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        manifest,
        vocab,
        groups,
        optimizer,
    })
}

impl<S: Real> Checkpoint<S> {
    pub fn state(&self) -> Result<TrainState> {
        Ok(TrainState {
            step: self.manifest.step,
            epoch: self.manifest.epoch,
            best_dev_bleu: self.manifest.best_dev_bleu,
            best_epoch: self.manifest.best_epoch,
            rng: self.manifest.rng.restore()?,
        })
    }

    /// Rebuilds the saved model with every group loaded.
    pub fn model(&self) -> Result<SltModel<S>> {
        let mut m = self.manifest.model.build::<S>(self.vocab.clone())?;
        for g in &self.manifest.groups {
            self.load_group_into(&g.name, &mut m, &g.name)?;
        }
        Ok(m)
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    /// Copies the saved group `group` onto the parameters of `model` under
    /// `target_prefix`; names and shapes must match exactly.
    pub fn load_group_into<M: Module<S> + ?Sized>(&self, group: &str, model: &mut M, target_prefix: &str) -> Result<()> {
        let tensors = self
            .groups
            .get(group)
            .ok_or_else(|| ckpt_err(&self.dir, format!("no parameter group `{group}`")))?;
        let mut by_name: BTreeMap<&str, &ArrayD<S>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let lead = format!("{target_prefix}.");
        let mut problem: Option<String> = None;
        model.visit_mut("", &mut |name, p| {
            let Some(rel) = name.strip_prefix(&lead) else { return };
            match by_name.remove(rel) {
                Some(t) if t.shape() == p.value.shape() => {
                    p.value.assign(t);
                    p.grad = None;
                }
                Some(t) => {
                    problem.get_or_insert(format!("`{rel}` has shape {:?}, model expects {:?}", t.shape(), p.value.shape()));
                }
                None => {
                    problem.get_or_insert(format!("`{rel}` missing from group `{group}`"));
                }
            }
        });
        if let Some(p) = problem {
            return Err(ckpt_err(&self.dir, p));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ckpt_err(&self.dir, format!("group `{group}` has tensor `{extra}` unknown to the model")));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Option<Optimizer<S>> {
        let entry = self.manifest.optimizer.as_ref()?;
        let tensors = self.optimizer.as_ref()?;
        let mut slots: BTreeMap<String, Slots<S>> = BTreeMap::new();
        for (key, t) in tensors {
            let (name, which) = key.rsplit_once('#')?;
            let slot = slots.entry(name.to_string()).or_insert_with(|| Slots {
                first: ArrayD::zeros(t.raw_dim()),
                second: None,
                steps: entry.steps.get(name).copied().unwrap_or(0),
            });
            match which {
                "first" => slot.first = t.clone(),
                "second" => slot.second = Some(t.clone()),
                _ => return None,
            }
        }
        Some(Optimizer {
            kind: entry.kind,
            slots,
        })
    }
}
