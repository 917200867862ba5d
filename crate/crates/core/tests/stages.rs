mod common;

use fla_slt::corpus::Corpus;
use fla_slt::error::Error;
use fla_slt::evalkit::evaluate_model;
use fla_slt::llm_stage::{FeatureTap, FreezePolicy};
use fla_slt::model::{SltModel, TranslatorKind};
use fla_slt::nn::Module;
use fla_slt::pipeline::{light_t_config, load_or_generate_corpus, task_backend, task_vocabulary, with_seed};
use fla_slt::trainer::checkpoint::{checksum, load_checkpoint};
use fla_slt::trainer::stages::latest_checkpoint;
use fla_slt::trainer::{init_light_t, run_joint_e2e, run_stage1, run_stage2, train_stage, RunOptions, StageRun};

use common::tiny_config;

fn stage1(cfg: &fla_slt::config::ExperimentConfig, corpus: &Corpus, opts: &RunOptions) -> StageRun<f32> {
    let vocab = task_vocabulary(cfg, corpus);
    let lt = light_t_config(cfg, &vocab);
    run_stage1(corpus, vocab, &cfg.visual, &lt, &cfg.stage1, opts).unwrap()
}

fn epoch_means(run: &StageRun<f32>, per_epoch: usize) -> Vec<f64> {
    run.train_losses()
        .chunks(per_epoch)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[test]
fn one_epoch_writes_a_loadable_checkpoint() {
    let mut cfg = tiny_config();
    cfg.stage1.epochs = 1;
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(tmp.path().to_path_buf()),
        config_hash: cfg.hash(),
        ..RunOptions::default()
    };
    let run = stage1(&cfg, &corpus, &opts);
    assert_eq!(run.state.epoch, 1);
    assert_eq!(run.state.step, 2);
    let dir = latest_checkpoint(tmp.path()).unwrap();
    let ck = load_checkpoint::<f32>(&dir, Some(&cfg.hash()), false).unwrap();
    assert_eq!(checksum(&ck.model().unwrap()), checksum(&run.last));
    assert!(tmp.path().join("best").join("manifest.json").exists());
    let csv = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,split,loss,lr_visual_encoder,lr_adapter,lr_light_t,bleu4");
    assert_eq!(lines.filter(|l| l.contains(",dev,")).count(), 1);
}

#[test]
fn training_loss_descends_over_five_epochs() {
    let mut drops = Vec::new();
    for seed in 0..3 {
        let mut cfg = with_seed(&tiny_config(), seed);
        cfg.stage1.epochs = 5;
        cfg.stage1.select_by_dev_bleu = false;
        let corpus = load_or_generate_corpus(&cfg).unwrap();
        let run = stage1(&cfg, &corpus, &RunOptions::default());
        let m = epoch_means(&run, 2);
        drops.push(m[0] - m[4]);
    }
    drops.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn resume_reproduces_the_uninterrupted_trajectory() {
    let mut cfg = tiny_config();
    cfg.stage1.epochs = 3;
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let full = stage1(&cfg, &corpus, &RunOptions::default());

    let tmp = tempfile::tempdir().unwrap();
    let base = RunOptions {
        out_dir: Some(tmp.path().to_path_buf()),
        config_hash: cfg.hash(),
        ..RunOptions::default()
    };
    let first = stage1(
        &cfg,
        &corpus,
        &RunOptions {
            stop_after_epochs: Some(1),
            ..base.clone()
        },
    );
    assert_eq!(first.state.epoch, 1);
    let rest = stage1(
        &cfg,
        &corpus,
        &RunOptions {
            resume: true,
            ..base.clone()
        },
    );
    let mut joined = first.train_losses();
    joined.extend(rest.train_losses());
    let a: Vec<u64> = full.train_losses().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = joined.iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    assert_eq!(checksum(&full.last), checksum(&rest.last));
    assert_eq!(checksum(&full.model), checksum(&rest.model));
    let csv = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",train,")).count(), 6);

    let other = RunOptions {
        resume: true,
        config_hash: "different".into(),
        ..base.clone()
    };
    let vocab = task_vocabulary(&cfg, &corpus);
    let lt = light_t_config(&cfg, &vocab);
    let err = run_stage1::<f32>(&corpus, vocab.clone(), &cfg.visual, &lt, &cfg.stage1, &other).unwrap_err();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }));
    let forced = RunOptions { force: true, ..other };
    run_stage1::<f32>(&corpus, vocab, &cfg.visual, &lt, &cfg.stage1, &forced).unwrap();
}

#[test]
fn stage2_keeps_frozen_parts_bit_stable_and_logs_peak_rates() {
    let cfg = tiny_config();
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let s1 = stage1(&cfg, &corpus, &RunOptions::default());
    let vocab = task_vocabulary(&cfg, &corpus);
    let before = checksum(&s1.model.visual);
    for tap in FeatureTap::ALL {
        let (backend, report) = task_backend::<f32>(&cfg, &corpus, &vocab, true, None).unwrap();
        assert_eq!(report.unwrap().steps, 20);
        let tmp = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out_dir: Some(tmp.path().to_path_buf()),
            ..RunOptions::default()
        };
        let run = run_stage2(&s1.model, &corpus, backend, &cfg.stage2, FreezePolicy::default(), tap, &opts).unwrap();
        assert_eq!(checksum(&run.last.visual), before, "{tap:?}");
        if let Some(r) = &run.last.retained {
            assert_eq!(checksum(&r.light_t), checksum(&s1.model.translator));
        }
        assert_eq!(run.groups, vec!["adapter".to_string(), "backend".to_string()]);
        let csv = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,split,loss,lr_adapter,lr_backend,bleu4");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[3].parse::<f64>().unwrap(), cfg.stage2.lr_groups["adapter"]);
        assert_eq!(first[4].parse::<f64>().unwrap(), cfg.stage2.lr_groups["backend"]);
    }
}

#[test]
fn partial_freezing_trains_only_the_unfrozen_part() {
    let cfg = tiny_config();
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let s1 = stage1(&cfg, &corpus, &RunOptions::default());
    let vocab = task_vocabulary(&cfg, &corpus);
    let (backend, _) = task_backend::<f32>(&cfg, &corpus, &vocab, false, None).unwrap();
    let policy: FreezePolicy = "vb".parse().unwrap();
    let run = run_stage2(&s1.model, &corpus, backend, &cfg.stage2, policy, FeatureTap::SignWise, &RunOptions::default()).unwrap();
    assert_eq!(checksum(&run.last.visual.backbone), checksum(&s1.model.visual.backbone));
    assert_ne!(checksum(&run.last.visual.temporal), checksum(&s1.model.visual.temporal));
    assert_eq!(run.groups, vec!["visual_encoder", "adapter", "backend"]);
}

#[test]
fn e2e_with_light_t_matches_stage1_losses() {
    let mut cfg = tiny_config();
    cfg.stage1.select_by_dev_bleu = false;
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let s1 = stage1(&cfg, &corpus, &RunOptions::default());
    let vocab = task_vocabulary(&cfg, &corpus);
    let lt = light_t_config(&cfg, &vocab);
    let translator = init_light_t::<f32>(cfg.stage1.seed, &lt).unwrap();
    let e2e = run_joint_e2e(&corpus, vocab, &cfg.visual, translator, TranslatorKind::LightT, &cfg.stage1, &RunOptions::default()).unwrap();
    let a: Vec<u64> = s1.train_losses().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = e2e.train_losses().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    let trace = e2e.trace.unwrap();
    assert_eq!(trace.records.len(), 2 * a.len());
    assert_eq!(trace.watched_layers[1], "translator.decoder.layers.0");
}

#[test]
fn watching_does_not_change_training() {
    let cfg = tiny_config();
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let vocab = task_vocabulary(&cfg, &corpus);
    let run = |watch: Option<Vec<String>>| {
        let (backend, _) = task_backend::<f32>(&cfg, &corpus, &vocab, false, None).unwrap();
        let opts = RunOptions {
            watch,
            ..RunOptions::default()
        };
        run_joint_e2e(&corpus, vocab.clone(), &cfg.visual, backend, TranslatorKind::Backend, &cfg.e2e, &opts).unwrap()
    };
    let watched = run(None);
    let plain = run(Some(Vec::new()));
    assert!(plain.trace.is_none());
    assert_eq!(watched.trace.as_ref().unwrap().records.len(), 2 * watched.train_losses().len());
    assert_eq!(
        watched.train_losses().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        plain.train_losses().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(checksum(&watched.last), checksum(&plain.last));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let cfg = tiny_config();
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let vocab = task_vocabulary(&cfg, &corpus);
    let lt = light_t_config(&cfg, &vocab);
    let translator = init_light_t::<f32>(0, &lt).unwrap();
    let mut model = fla_slt::trainer::init_model(0, &cfg.visual, translator, TranslatorKind::LightT, vocab).unwrap();
    model.adapter.fc1.weight.value.fill(f32::NAN);
    let tmp = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(tmp.path().to_path_buf()),
        ..RunOptions::default()
    };
    let err = train_stage(model, &corpus, &cfg.stage1, "stage1", &opts, None, &[]).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0, epoch: 0 }));
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("divergence.json")).unwrap()).unwrap();
    assert_eq!(dump["step"], 0);
    assert_eq!(dump["sample_ids"].as_array().unwrap().len(), 8);
}

#[test]
fn missing_learning_rate_for_a_trainable_group_is_a_config_error() {
    let mut cfg = tiny_config();
    cfg.stage1.lr_groups.remove("adapter");
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let vocab = task_vocabulary(&cfg, &corpus);
    let lt = light_t_config(&cfg, &vocab);
    let err = run_stage1::<f32>(&corpus, vocab, &cfg.visual, &lt, &cfg.stage1, &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("stage1.lr_groups.adapter"), "{err}");
}

fn untrained(cfg: &fla_slt::config::ExperimentConfig, corpus: &Corpus) -> SltModel<f32> {
    let vocab = task_vocabulary(cfg, corpus);
    let lt = light_t_config(cfg, &vocab);
    let translator = init_light_t::<f32>(0, &lt).unwrap();
    fla_slt::trainer::init_model(0, &cfg.visual, translator, TranslatorKind::LightT, vocab).unwrap()
}

#[test]
fn untrained_model_scores_near_zero_and_evaluation_is_deterministic() {
    let mut cfg = tiny_config();
    cfg.corpus.synthetic.sentence_length_range = (4, 6);
    cfg.eval.max_len = 10;
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let mut m = untrained(&cfg, &corpus);
    let a = evaluate_model(&mut m, &corpus.test, &cfg.eval, None, None, false).unwrap();
    let b = evaluate_model(&mut m, &corpus.test, &cfg.eval, None, None, false).unwrap();
    assert!(a.bleu4 < 0.05, "{}", a.bleu4);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.hypotheses, b.hypotheses);
    assert_eq!(m.num_params(), untrained(&cfg, &corpus).num_params());
}
