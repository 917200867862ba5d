//! Command-line surface over the `fla_slt` pipeline.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use fla_slt::config::{ExperimentConfig, LightTSpec};
use fla_slt::corpus::{save_corpus, Corpus, Split, Vocabulary};
use fla_slt::diagnostics::{dominance_report, export_trace, import_trace, plot_trace, NormTrace};
use fla_slt::evalkit::{evaluate_model, EvalReport};
use fla_slt::llm_stage::FreezePolicy;
use fla_slt::model::{SltModel, TranslatorKind};
use fla_slt::pipeline::{
    e2e_stage_config, light_t_config, load_or_generate_corpus, task_backend, task_vocabulary, threads_from_env, with_seed,
    worker_pool,
};
use fla_slt::trainer::{load_checkpoint, run_joint_e2e, run_stage1, run_stage2, RunOptions, StageRun};
use fla_slt::transformer::Seq2SeqTransformer;

pub const AXES: [&str; 6] = [
    "downsample_rate",
    "light_t_scale",
    "feature_tap",
    "freeze_policy",
    "backend_pretraining",
    "init_epochs",
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fla_slt::Error),
    #[error("{0} already exists; pass --force to overwrite or --resume to continue")]
    Exists(PathBuf),
    #[error("{what} not found at {path}")]
    Missing { what: String, path: PathBuf },
    #[error("unknown ablation axis `{0}`; valid axes: {axes}", axes = AXES.join(", "))]
    UnknownAxis(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for divergence, 4 for I/O and
    /// checkpoint problems, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use fla_slt::Error as E;
        match self {
            CliError::UnknownAxis(_) => 2,
            CliError::Exists(_) | CliError::Missing { .. } => 4,
            CliError::Core(e) => match e {
                E::InvalidConfig { .. } | E::ConfigHashMismatch { .. } => 2,
                E::Divergence { .. } => 3,
                E::Io { .. } | E::Checkpoint { .. } | E::Json(_) | E::Image(_) => 4,
                _ => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fla-slt", version, about = "Factorized two-stage sign language translation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed of every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs and accept config-hash mismatches.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the corpus (manifest plus PNG frames) to OUT/corpus.
    GenData,
    /// Visual encoder, VL-Adapter and Light-T trained jointly.
    Stage1 {
        #[arg(long)]
        resume: bool,
    },
    /// Frozen visual encoder, LLM-Adapter and pretrained backend.
    Stage2 {
        /// Stage-1 checkpoint directory (default OUT/stage1/best).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Joint end-to-end baseline with gradient-norm tracing.
    E2e {
        #[arg(long)]
        resume: bool,
    },
    /// Decode a split and write report.json and hypotheses.tsv.
    Eval {
        /// Checkpoint directory (default OUT/stage2/best).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report directory (default OUT/eval/SPLIT).
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Dominance report and plot from a gradient-norm trace.
    Diagnose {
        /// Trace CSV (default OUT/e2e/trace.csv).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Encoder layer (default: first watched layer).
        #[arg(long)]
        encoder_layer: Option<String>,
        /// Backend layer (default: last watched layer).
        #[arg(long)]
        backend_layer: Option<String>,
        /// Exponential smoothing factor for the plot, in [0, 1).
        #[arg(long, default_value_t = 0.0)]
        smoothing: f64,
    },
    /// Sweep one axis of the configured ablation values.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Run settings in parallel.
        #[arg(long)]
        parallel: bool,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolved configuration: flag over file over default.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = with_seed(&cfg, seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Ablate { axis, .. } = &cli.command {
        if !AXES.contains(&axis.as_str()) {
            return Err(CliError::UnknownAxis(axis.clone()));
        }
    }
    let cfg = resolve_config(&cli.common)?;
    let pool = worker_pool(threads_from_env()?)?;
    let force = cli.common.force;
    pool.install(|| match cli.command {
        Command::GenData => gen_data(&cfg, force),
        Command::Stage1 { resume } => stage1(&cfg, force, resume),
        Command::Stage2 { init, resume } => stage2(&cfg, init, force, resume),
        Command::E2e { resume } => e2e(&cfg, force, resume),
        Command::Eval {
            checkpoint,
            split,
            report_dir,
        } => eval(&cfg, checkpoint, &split, report_dir, force),
        Command::Diagnose {
            trace,
            encoder_layer,
            backend_layer,
            smoothing,
        } => diagnose(&cfg, trace, encoder_layer, backend_layer, smoothing),
        Command::Ablate { axis, parallel } => ablate(&cfg, &axis, parallel, force),
    })
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| fla_slt::Error::io(path, e).into())
}

fn non_empty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, clearing it under `force`; an existing non-empty
/// directory is an error unless the run resumes.
fn prepare_dir(dir: &Path, force: bool, resume: bool) -> Result<()> {
    if non_empty(dir) && !resume {
        if !force {
            return Err(CliError::Exists(dir.to_path_buf()));
        }
        io(dir, std::fs::remove_dir_all(dir))?;
    }
    io(dir, std::fs::create_dir_all(dir))
}

/// Stamps an output directory with the resolved config and its hash.
fn stamp(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let p = dir.join("config.json");
    io(&p, std::fs::write(&p, cfg.to_json()? + "\n"))?;
    let run = serde_json::json!({
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    });
    let p = dir.join("run.json");
    io(&p, std::fs::write(&p, serde_json::to_string_pretty(&run).expect("json") + "\n"))
}

fn stage_opts(cfg: &ExperimentConfig, dir: &Path, force: bool, resume: bool) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        config_hash: cfg.hash(),
        resume,
        force,
        decode_max_len: cfg.eval.max_len,
        ..RunOptions::default()
    }
}

fn backend_cache(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("backend")
}

fn summarize<S>(name: &str, run: &StageRun<S>, dir: &Path) {
    let best = run
        .state
        .best_dev_bleu
        .map_or("n/a".to_string(), |b| format!("{b:.4} (epoch {})", run.state.best_epoch.unwrap_or(0)));
    let last = run.train_losses().last().copied().unwrap_or(f64::NAN);
    println!(
        "{name}: {} steps, last train loss {last:.4}, best dev BLEU-4 {best}, outputs in {}",
        run.state.step,
        dir.display()
    );
}

fn gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let dir = cfg.out_dir.join("corpus");
    let corpus = load_or_generate_corpus(cfg)?;
    prepare_dir(&dir, force, false)?;
    save_corpus(&corpus, &dir)?;
    stamp(&dir, cfg, "gen-data")?;
    println!(
        "corpus: {} train / {} dev / {} test samples in {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        dir.display()
    );
    Ok(())
}

fn stage1(cfg: &ExperimentConfig, force: bool, resume: bool) -> Result<()> {
    let dir = cfg.out_dir.join("stage1");
    let corpus = load_or_generate_corpus(cfg)?;
    let vocab = task_vocabulary(cfg, &corpus);
    let lt = light_t_config(cfg, &vocab);
    prepare_dir(&dir, force, resume)?;
    stamp(&dir, cfg, "stage1")?;
    let run = run_stage1::<f32>(&corpus, vocab, &cfg.visual, &lt, &cfg.stage1, &stage_opts(cfg, &dir, force, resume))?;
    summarize("stage1", &run, &dir);
    Ok(())
}

fn load_model(dir: &Path, what: &str, cfg: &ExperimentConfig, force: bool) -> Result<(SltModel<f32>, String)> {
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Missing {
            what: what.to_string(),
            path: dir.to_path_buf(),
        });
    }
    let ck = load_checkpoint::<f32>(dir, Some(&cfg.hash()), force)?;
    Ok((ck.model()?, ck.manifest.config_hash.clone()))
}

fn backend_for(cfg: &ExperimentConfig, corpus: &Corpus, vocab: &Vocabulary) -> Result<Seq2SeqTransformer<f32>> {
    let (backend, report) = task_backend(cfg, corpus, vocab, cfg.backend.pretrained, Some(&backend_cache(cfg)))?;
    if let Some(r) = report {
        eprintln!(
            "backend: pretrained {} steps, validation loss {:.4} -> {:.4}",
            r.steps, r.initial_validation_loss, r.final_validation_loss
        );
    }
    Ok(backend)
}

fn stage2(cfg: &ExperimentConfig, init: Option<PathBuf>, force: bool, resume: bool) -> Result<()> {
    let init = init.unwrap_or_else(|| cfg.out_dir.join("stage1").join("best"));
    let (m1, _) = load_model(&init, "stage-1 checkpoint", cfg, force)?;
    let dir = cfg.out_dir.join("stage2");
    let corpus = load_or_generate_corpus(cfg)?;
    let backend = backend_for(cfg, &corpus, &m1.vocab)?;
    prepare_dir(&dir, force, resume)?;
    stamp(&dir, cfg, "stage2")?;
    let opts = stage_opts(cfg, &dir, force, resume);
    let run = run_stage2(&m1, &corpus, backend, &cfg.stage2, cfg.freeze, cfg.tap, &opts)?;
    summarize("stage2", &run, &dir);
    Ok(())
}

fn e2e(cfg: &ExperimentConfig, force: bool, resume: bool) -> Result<()> {
    let dir = cfg.out_dir.join("e2e");
    let corpus = load_or_generate_corpus(cfg)?;
    let vocab = task_vocabulary(cfg, &corpus);
    let backend = backend_for(cfg, &corpus, &vocab)?;
    let ecfg = e2e_stage_config(cfg, corpus.train.len());
    prepare_dir(&dir, force, resume)?;
    stamp(&dir, cfg, "e2e")?;
    let opts = stage_opts(cfg, &dir, force, resume);
    let run = run_joint_e2e(&corpus, vocab, &cfg.visual, backend, TranslatorKind::Backend, &ecfg, &opts)?;
    if let Some(trace) = &run.trace {
        export_trace(trace, &dir.join("trace.csv"))?;
        write_dominance(trace, None, None, &dir)?;
    }
    summarize("e2e", &run, &dir);
    Ok(())
}

fn write_dominance(trace: &NormTrace, encoder: Option<String>, backend: Option<String>, dir: &Path) -> Result<()> {
    let first = trace.watched_layers.first().cloned();
    let last = trace.watched_layers.last().cloned();
    let (Some(enc), Some(dec)) = (encoder.or(first), backend.or(last)) else {
        return Err(fla_slt::Error::InvalidInput("trace watches no layers".into()).into());
    };
    let rep = dominance_report(trace, &enc, &dec)?;
    let p = dir.join("dominance.json");
    io(&p, std::fs::write(&p, serde_json::to_string_pretty(&rep).expect("json") + "\n"))?;
    println!(
        "dominance: backend layer `{dec}` exceeds encoder layer `{enc}` in {:.1}% of {} steps, mean norm ratio {:.3}",
        100.0 * rep.fraction_backend_exceeds,
        rep.steps,
        rep.mean_norm_ratio
    );
    Ok(())
}

fn eval(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>, split: &str, report_dir: Option<PathBuf>, force: bool) -> Result<()> {
    let split: Split = split.parse()?;
    let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join("stage2").join("best"));
    let (mut model, hash) = load_model(&ckpt, "checkpoint", cfg, force)?;
    let corpus = load_or_generate_corpus(cfg)?;
    let report = evaluate_model(&mut model, corpus.split(split), &cfg.eval, None, Some(hash), false)?;
    let dir = report_dir.unwrap_or_else(|| cfg.out_dir.join("eval").join(split.name()));
    report.write(&dir)?;
    println!(
        "{}: BLEU-1..4 {:.4} {:.4} {:.4} {:.4}, ROUGE-L {:.4} over {} samples; report in {}",
        split.name(),
        report.bleu1,
        report.bleu2,
        report.bleu3,
        report.bleu4,
        report.rouge_l,
        report.n_samples,
        dir.display()
    );
    Ok(())
}

fn diagnose(
    cfg: &ExperimentConfig,
    trace: Option<PathBuf>,
    encoder: Option<String>,
    backend: Option<String>,
    smoothing: f64,
) -> Result<()> {
    let path = trace.unwrap_or_else(|| cfg.out_dir.join("e2e").join("trace.csv"));
    if !path.exists() {
        return Err(CliError::Missing {
            what: "trace".into(),
            path,
        });
    }
    let trace = import_trace(&path)?;
    let dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    write_dominance(&trace, encoder, backend, &dir)?;
    let png = dir.join("trace.png");
    plot_trace(&trace, &png, smoothing)?;
    println!("plot: {}", png.display());
    Ok(())
}

/// One configuration per value of `axis`, labelled by that value.
pub fn ablation_settings(cfg: &ExperimentConfig, axis: &str) -> Result<Vec<(String, ExperimentConfig)>> {
    let a = &cfg.ablate;
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    let settings = match axis {
        "downsample_rate" => a
            .downsample_rate
            .iter()
            .map(|&r| (r.to_string(), with(&|c| c.visual.downsample_rate = r)))
            .collect(),
        "light_t_scale" => a
            .light_t_scale
            .iter()
            .map(|&p| (p.name().to_string(), with(&|c| c.light_t = LightTSpec::Preset(p))))
            .collect(),
        "feature_tap" => a.feature_tap.iter().map(|&t| (t.name().to_string(), with(&|c| c.tap = t))).collect(),
        "freeze_policy" => a
            .freeze_policy
            .iter()
            .map(|s| {
                let p: FreezePolicy = s.parse()?;
                Ok((p.name().to_string(), with(&|c| c.freeze = p)))
            })
            .collect::<fla_slt::Result<_>>()?,
        "backend_pretraining" => a
            .backend_pretraining
            .iter()
            .map(|&b| (if b { "pretrained" } else { "random" }.to_string(), with(&|c| c.backend.pretrained = b)))
            .collect(),
        "init_epochs" => a
            .init_epochs
            .iter()
            .map(|&e| (e.to_string(), with(&|c| c.stage1.epochs = e)))
            .collect(),
        other => return Err(CliError::UnknownAxis(other.to_string())),
    };
    Ok(settings)
}

pub const ABLATION_HEADER: &str = "axis,value,dev_bleu1,dev_bleu2,dev_bleu3,dev_bleu4,dev_rouge_l,\
test_bleu1,test_bleu2,test_bleu3,test_bleu4,test_rouge_l,wall_seconds";

fn stage1_key(c: &ExperimentConfig) -> String {
    serde_json::json!([c.corpus, c.visual, c.light_t, c.light_t_dropout, c.max_positions, c.stage1]).to_string()
}

fn report_cells(r: &EvalReport) -> String {
    format!("{},{},{},{},{}", r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l)
}

fn ablate(cfg: &ExperimentConfig, axis: &str, parallel: bool, force: bool) -> Result<()> {
    let settings = ablation_settings(cfg, axis)?;
    for (_, c) in &settings {
        c.validate()?;
    }
    let root = cfg.out_dir.join("ablate").join(axis);
    prepare_dir(&root, force, false)?;
    stamp(&root, cfg, &format!("ablate {axis}"))?;
    let corpus = load_or_generate_corpus(cfg)?;
    let vocab = task_vocabulary(cfg, &corpus);
    for pretrained in settings.iter().map(|(_, c)| c.backend.pretrained).collect::<std::collections::BTreeSet<_>>() {
        task_backend::<f32>(cfg, &corpus, &vocab, pretrained, Some(&backend_cache(cfg)))?;
    }
    let stage1_models: Mutex<HashMap<String, SltModel<f32>>> = Mutex::new(HashMap::new());
    let run_one = |(label, c): &(String, ExperimentConfig)| -> Result<String> {
        let start = Instant::now();
        let key = stage1_key(c);
        let cached = stage1_models.lock().expect("stage-1 cache").get(&key).cloned();
        let m1 = match cached {
            Some(m) => m,
            None => {
                let lt = light_t_config(c, &vocab);
                let m = run_stage1::<f32>(&corpus, vocab.clone(), &c.visual, &lt, &c.stage1, &RunOptions::default())?.model;
                stage1_models.lock().expect("stage-1 cache").insert(key, m.clone());
                m
            }
        };
        let (backend, _) = task_backend(c, &corpus, &vocab, c.backend.pretrained, Some(&backend_cache(cfg)))?;
        let s2 = run_stage2(&m1, &corpus, backend, &c.stage2, c.freeze, c.tap, &RunOptions::default())?;
        let dir = root.join(label);
        let mut cells = Vec::new();
        for split in [Split::Dev, Split::Test] {
            let mut m = s2.model.clone();
            let rep = evaluate_model(&mut m, corpus.split(split), &c.eval, None, Some(c.hash()), false)?;
            rep.write(&dir.join(split.name()))?;
            cells.push(report_cells(&rep));
        }
        let secs = start.elapsed().as_secs_f64();
        eprintln!("ablate {axis}={label}: done in {secs:.1}s");
        Ok(format!("{axis},{label},{},{},{secs:.3}", cells[0], cells[1]))
    };
    let rows: Vec<String> = if parallel {
        settings.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        settings.iter().map(run_one).collect::<Result<_>>()?
    };
    let mut body = String::from(ABLATION_HEADER);
    body.push('\n');
    for r in rows {
        body.push_str(&r);
        body.push('\n');
    }
    let csv = root.join(format!("{axis}.csv"));
    io(&csv, std::fs::write(&csv, &body))?;
    print!("{body}");
    Ok(())
}
