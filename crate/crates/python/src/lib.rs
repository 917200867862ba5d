//! Python bindings: configuration, corpus generation, both training
//! stages, the joint baseline, evaluation, metrics and beam search.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fla_slt::config::ExperimentConfig;
use fla_slt::corpus::{save_corpus, Corpus, Split, Vocabulary};
use fla_slt::diagnostics::{dominance_report, export_trace, import_trace, NormTrace};
use fla_slt::evalkit::{self, BeamConfig, EvalReport};
use fla_slt::model::{SltModel, TranslatorKind};
use fla_slt::pipeline::{e2e_stage_config, light_t_config, load_or_generate_corpus, task_backend, task_vocabulary, with_seed};
use fla_slt::trainer::{checksum, load_checkpoint, run_joint_e2e, run_stage1, run_stage2, RunOptions, StageRun};

fn err(e: fla_slt::Error) -> PyErr {
    use fla_slt::Error as E;
    match e {
        E::InvalidConfig { .. } | E::ConfigHashMismatch { .. } | E::Shape { .. } | E::InvalidInput(_) | E::Sample { .. } => {
            PyValueError::new_err(e.to_string())
        }
        E::Io { .. } | E::Checkpoint { .. } | E::Json(_) | E::Image(_) => PyIOError::new_err(e.to_string()),
        E::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for fla_slt::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Experiment configuration; built-in defaults when created without JSON.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ExperimentConfig::default(),
        };
        inner.validate().py()?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = ExperimentConfig::load(&path).py()?;
        inner.validate().py()?;
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Copy with the run seed applied to every stage.
    fn with_seed(&self, seed: u64) -> Self {
        PyConfig {
            inner: with_seed(&self.inner, seed),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: Corpus,
    vocab: Vocabulary,
}

fn split_of(name: &str) -> PyResult<Split> {
    name.parse().py()
}

#[pymethods]
impl PyCorpus {
    /// Corpus named by the config: the on-disk one or the synthetic one.
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let inner = load_or_generate_corpus(&config.inner).py()?;
        let vocab = task_vocabulary(&config.inner, &inner);
        Ok(PyCorpus { inner, vocab })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn split_size(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.split(split_of(split)?).len())
    }

    fn transcripts(&self, split: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.split(split_of(split)?).iter().map(|s| s.transcript.clone()).collect())
    }

    /// Task vocabulary tokens, specials first.
    fn vocabulary(&self) -> Vec<String> {
        self.vocab.tokens().to_vec()
    }

    fn tokenize(&self, transcript: &str) -> PyResult<Vec<u32>> {
        Ok(self.vocab.tokenize(transcript).py()?.ids)
    }

    fn detokenize(&self, ids: Vec<u32>) -> String {
        self.vocab.detokenize(&ids)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_corpus(&self.inner, &path).py()
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("bleu1", r.bleu1)?;
    d.set_item("bleu2", r.bleu2)?;
    d.set_item("bleu3", r.bleu3)?;
    d.set_item("bleu4", r.bleu4)?;
    d.set_item("rouge_l", r.rouge_l)?;
    d.set_item("n_samples", r.n_samples)?;
    d.set_item("checkpoint_hash", r.checkpoint_hash.clone())?;
    let hyps: Vec<(String, String, String)> = r
        .hypotheses
        .iter()
        .map(|h| (h.sample_id.clone(), h.hypothesis.clone(), h.reference.clone()))
        .collect();
    d.set_item("hypotheses", hyps)?;
    Ok(d)
}

/// A trained translation model (stage 1, stage 2 or joint).
#[pyclass(name = "Model")]
struct PyModel {
    inner: SltModel<f32>,
    train_losses: Vec<f64>,
    trace: Option<NormTrace>,
}

impl PyModel {
    fn from_run(run: StageRun<f32>) -> Self {
        PyModel {
            train_losses: run.train_losses(),
            trace: run.trace,
            inner: run.model,
        }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (path, config_hash = None, force = false))]
    fn load(path: PathBuf, config_hash: Option<String>, force: bool) -> PyResult<Self> {
        let ck = load_checkpoint::<f32>(&path, config_hash.as_deref(), force).py()?;
        Ok(PyModel {
            inner: ck.model().py()?,
            train_losses: Vec::new(),
            trace: None,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind {
            TranslatorKind::LightT => "light_t",
            TranslatorKind::Backend => "backend",
        }
    }

    #[getter]
    fn train_losses(&self) -> Vec<f64> {
        self.train_losses.clone()
    }

    fn num_params(&self) -> usize {
        use fla_slt::nn::Module;
        self.inner.num_params()
    }

    /// SHA-256 over every tensor of the visual encoder.
    fn visual_checksum(&self) -> String {
        checksum(&self.inner.visual)
    }

    /// Decodes `split` with beam search and returns the metric report.
    #[pyo3(signature = (corpus, split = "test", beam = 5, max_len = 32))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: &PyCorpus,
        split: &str,
        beam: usize,
        max_len: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let split = split_of(split)?;
        let cfg = BeamConfig {
            beam,
            max_len,
            length_normalize: true,
        };
        let mut m = self.inner.clone();
        let samples = corpus.inner.split(split);
        let report = py.detach(|| evalkit::evaluate_model(&mut m, samples, &cfg, None, None, false)).py()?;
        report_dict(py, &report)
    }

    /// Gradient-norm trace of a joint run as `(step, layer, grad_norm, param_norm)`.
    fn trace(&self) -> Vec<(u64, String, f64, f64)> {
        self.trace
            .iter()
            .flat_map(|t| t.records.iter())
            .map(|r| (r.step, r.layer_id.clone(), r.grad_norm, r.param_norm))
            .collect()
    }

    fn export_trace(&self, path: PathBuf) -> PyResult<()> {
        match &self.trace {
            Some(t) => export_trace(t, &path).py(),
            None => Err(PyValueError::new_err("model was not trained with a trace")),
        }
    }
}

fn opts(out_dir: Option<PathBuf>, cfg: &ExperimentConfig) -> RunOptions {
    RunOptions {
        out_dir,
        config_hash: cfg.hash(),
        decode_max_len: cfg.eval.max_len,
        ..RunOptions::default()
    }
}

/// Visual encoder, VL-Adapter and Light-T trained jointly.
#[pyfunction]
#[pyo3(signature = (config, corpus, out_dir = None))]
fn train_stage1(py: Python<'_>, config: &PyConfig, corpus: &PyCorpus, out_dir: Option<PathBuf>) -> PyResult<PyModel> {
    let cfg = &config.inner;
    let lt = light_t_config(cfg, &corpus.vocab);
    let o = opts(out_dir, cfg);
    let run = py
        .detach(|| run_stage1::<f32>(&corpus.inner, corpus.vocab.clone(), &cfg.visual, &lt, &cfg.stage1, &o))
        .py()?;
    Ok(PyModel::from_run(run))
}

/// Backend fine-tuning on top of a stage-1 model's visual encoder.
#[pyfunction]
#[pyo3(signature = (config, corpus, stage1, out_dir = None, backend_cache = None))]
fn train_stage2(
    py: Python<'_>,
    config: &PyConfig,
    corpus: &PyCorpus,
    stage1: &PyModel,
    out_dir: Option<PathBuf>,
    backend_cache: Option<PathBuf>,
) -> PyResult<PyModel> {
    let cfg = &config.inner;
    let o = opts(out_dir, cfg);
    let run = py
        .detach(|| {
            let (backend, _) = task_backend(cfg, &corpus.inner, &stage1.inner.vocab, cfg.backend.pretrained, backend_cache.as_deref())?;
            run_stage2(&stage1.inner, &corpus.inner, backend, &cfg.stage2, cfg.freeze, cfg.tap, &o)
        })
        .py()?;
    Ok(PyModel::from_run(run))
}

/// Joint end-to-end baseline; the returned model carries its trace.
#[pyfunction]
#[pyo3(signature = (config, corpus, out_dir = None, backend_cache = None))]
fn train_e2e(
    py: Python<'_>,
    config: &PyConfig,
    corpus: &PyCorpus,
    out_dir: Option<PathBuf>,
    backend_cache: Option<PathBuf>,
) -> PyResult<PyModel> {
    let cfg = &config.inner;
    let o = opts(out_dir, cfg);
    let run = py
        .detach(|| {
            let (backend, _) = task_backend(cfg, &corpus.inner, &corpus.vocab, cfg.backend.pretrained, backend_cache.as_deref())?;
            let ecfg = e2e_stage_config(cfg, corpus.inner.train.len());
            run_joint_e2e(&corpus.inner, corpus.vocab.clone(), &cfg.visual, backend, TranslatorKind::Backend, &ecfg, &o)
        })
        .py()?;
    Ok(PyModel::from_run(run))
}

/// Dominance summary of a trace CSV.
#[pyfunction]
#[pyo3(signature = (trace_csv, encoder_layer = None, backend_layer = None))]
fn dominance<'py>(
    py: Python<'py>,
    trace_csv: PathBuf,
    encoder_layer: Option<String>,
    backend_layer: Option<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let trace = import_trace(&trace_csv).py()?;
    let first = trace.watched_layers.first().cloned().unwrap_or_default();
    let last = trace.watched_layers.last().cloned().unwrap_or_default();
    let rep = dominance_report(&trace, &encoder_layer.unwrap_or(first), &backend_layer.unwrap_or(last)).py()?;
    let d = PyDict::new(py);
    d.set_item("encoder_layer", rep.encoder_layer)?;
    d.set_item("backend_layer", rep.backend_layer)?;
    d.set_item("steps", rep.steps)?;
    d.set_item("fraction_backend_exceeds", rep.fraction_backend_exceeds)?;
    d.set_item("mean_norm_ratio", rep.mean_norm_ratio)?;
    Ok(d)
}

/// Corpus BLEU-1..4 as a list.
#[pyfunction]
fn bleu(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<Vec<f64>> {
    Ok(evalkit::bleu(&hypotheses, &references).py()?.as_array().to_vec())
}

#[pyfunction]
fn rouge_l(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    evalkit::rouge_l(&hypotheses, &references).py()
}

/// Beam search over a Python scoring callable that maps a list of
/// prefixes to one log-probability list per prefix.
#[pyfunction]
#[pyo3(signature = (score_fn, bos, eos, beam = 5, max_len = 32, length_normalize = true))]
fn beam_search(
    score_fn: &Bound<'_, PyAny>,
    bos: u32,
    eos: u32,
    beam: usize,
    max_len: usize,
    length_normalize: bool,
) -> PyResult<(Vec<u32>, f64)> {
    let mut py_err: Option<PyErr> = None;
    let f = |prefixes: &[Vec<u32>]| -> fla_slt::Result<Vec<Vec<f64>>> {
        match score_fn.call1((prefixes.to_vec(),)).and_then(|r| r.extract::<Vec<Vec<f64>>>()) {
            Ok(v) => Ok(v),
            Err(e) => {
                py_err = Some(e);
                Err(fla_slt::Error::InvalidInput("score function raised".into()))
            }
        }
    };
    let cfg = BeamConfig {
        beam,
        max_len,
        length_normalize,
    };
    let result = evalkit::beam_search(f, bos, eos, &cfg);
    if let Some(e) = py_err {
        return Err(e);
    }
    let h = result.py()?;
    Ok((h.ids, h.score))
}

#[pymodule]
fn flaslt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_stage1, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage2, m)?)?;
    m.add_function(wrap_pyfunction!(train_e2e, m)?)?;
    m.add_function(wrap_pyfunction!(dominance, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(beam_search, m)?)?;
    Ok(())
}
