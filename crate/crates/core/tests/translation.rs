use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fla_slt::light_t::{build_light_t, LightTPreset};
use fla_slt::nn::{randn, smoothed_ce_with_logits, smoothed_target_entropy, Ctx, Module};
use fla_slt::trainer::{Optimizer, OptimizerKind};
use fla_slt::transformer::{teacher_forcing, Padded, Seq2SeqTransformer};

const BOS: u32 = 1;
const EOS: u32 = 2;

#[test]
fn base_light_t_fits_eight_fixed_pairs() {
    let vocab = 20;
    let eps = 0.1;
    let mut cfg = build_light_t(LightTPreset::Base, vocab, 32);
    cfg.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = Seq2SeqTransformer::<f32>::new(&mut rng, cfg.to_transformer()).unwrap();

    let mem_lens: Vec<usize> = (0..8).map(|_| rng.random_range(3..=6)).collect();
    let rows: usize = mem_lens.iter().sum();
    let packed = randn::<f32, _>(&mut rng, &[rows, cfg.hidden], 1.0).into_dimensionality().unwrap();
    let memory = Padded::from_packed(&packed.view(), &mem_lens);
    let targets: Vec<Vec<u32>> = (0..8)
        .map(|_| {
            let n = rng.random_range(2..=5);
            let mut t = vec![BOS];
            t.extend((0..n).map(|_| rng.random_range(4..vocab as u32)));
            t.push(EOS);
            t
        })
        .collect();
    let (dec_in, next, mask) = teacher_forcing(&targets);

    let floor = smoothed_target_entropy(vocab, eps) + 0.05;
    let mut opt = Optimizer::<f32>::new(OptimizerKind::adam());
    let mut ctx = Ctx::eval();
    let mut reached = None;
    let mut loss = f64::INFINITY;
    for step in 0..500 {
        model.zero_grad();
        let (enc, ec) = model.encode(&memory, &mut ctx).unwrap();
        let (logits, dc) = model.decode(&dec_in, &enc, &mut ctx).unwrap();
        let (l, dl) = smoothed_ce_with_logits(&logits.view(), &next, &mask, eps).unwrap();
        loss = l;
        if l < floor {
            reached = Some(step);
            break;
        }
        let dmem = model.backward_decode(dc, &dl);
        let dmem = Padded::new(dmem, enc.max_len, enc.lens.clone()).unwrap();
        model.backward_encode(ec, &dmem);
        opt.step(&mut model, &|_| 3e-4);
    }
    assert!(reached.is_some(), "loss {loss} still above {floor} after 500 steps");
}

mod backend {
    use std::collections::HashSet;

    use fla_slt::config::ExperimentConfig;
    use fla_slt::corpus::synthetic_sentences;
    use fla_slt::llm_stage::{reconstruction_accuracy, retarget_vocabulary};
    use fla_slt::pipeline::{base_backend, base_vocabulary, light_t_config, load_or_generate_corpus, task_vocabulary, with_seed};
    use fla_slt::trainer::{run_stage1, run_stage2, RunOptions, StageRun};

    fn config() -> ExperimentConfig {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/configs/factorized.json");
        let mut cfg = ExperimentConfig::load(&path).unwrap();
        cfg.corpus.synthetic.counts = (300, 60, 60);
        cfg.stage1.epochs = 8;
        cfg.stage2.epochs = 8;
        cfg
    }

    /// First epoch (1-based) whose dev loss is at or below `target`.
    fn epochs_to(run: &StageRun<f32>, target: f64) -> usize {
        run.dev_rows().iter().position(|r| r.loss <= target).map_or(usize::MAX, |i| i + 1)
    }

    fn best(run: &StageRun<f32>) -> f64 {
        run.dev_rows().iter().map(|r| r.loss).fold(f64::INFINITY, f64::min)
    }

    fn median(mut v: Vec<usize>) -> usize {
        v.sort_unstable();
        v[v.len() / 2]
    }

    #[test]
    fn pretraining_reconstructs_and_speeds_up_stage_two() {
        let cfg = config();
        let corpus = load_or_generate_corpus(&cfg).unwrap();
        let base = base_vocabulary(&cfg, &corpus);
        let vocab = task_vocabulary(&cfg, &corpus);
        let (pretrained, report) = base_backend::<f32>(&cfg, &corpus, true).unwrap();
        let report = report.unwrap();
        assert!(report.final_validation_loss < report.initial_validation_loss);

        let seen: HashSet<String> =
            synthetic_sentences(&cfg.corpus.synthetic, cfg.backend.sentences, cfg.backend.pretrain.seed).unwrap().into_iter().collect();
        let held_out: Vec<Vec<u32>> = synthetic_sentences(&cfg.corpus.synthetic, 400, cfg.backend.pretrain.seed + 1000)
            .unwrap()
            .into_iter()
            .filter(|s| !seen.contains(s))
            .map(|s| {
                let ids = base.tokenize(&s).unwrap().ids;
                ids[1..ids.len() - 1].to_vec()
            })
            .collect();
        assert!(held_out.len() >= 100, "{} held-out sentences", held_out.len());
        let accuracy = reconstruction_accuracy(&pretrained, &held_out).unwrap();
        assert!(accuracy > 0.9, "reconstruction accuracy {accuracy}");

        let (random, _) = base_backend::<f32>(&cfg, &corpus, false).unwrap();
        let task = |m: &fla_slt::transformer::Seq2SeqTransformer<f32>| {
            let mut m = m.clone();
            retarget_vocabulary(&mut m, &base, &vocab).unwrap();
            m
        };
        let opts = RunOptions::default();
        let (mut with_pre, mut without) = (Vec::new(), Vec::new());
        for seed in [0, 1, 2] {
            let cfg = with_seed(&cfg, seed);
            let lt = light_t_config(&cfg, &vocab);
            let s1 = run_stage1::<f32>(&corpus, vocab.clone(), &cfg.visual, &lt, &cfg.stage1, &opts).unwrap();
            let p = run_stage2(&s1.model, &corpus, task(&pretrained), &cfg.stage2, cfg.freeze, cfg.tap, &opts).unwrap();
            let r = run_stage2(&s1.model, &corpus, task(&random), &cfg.stage2, cfg.freeze, cfg.tap, &opts).unwrap();
            let target = best(&p).max(best(&r));
            with_pre.push(epochs_to(&p, target));
            without.push(epochs_to(&r, target));
        }
        println!("reconstruction accuracy {accuracy:.4}; epochs to shared dev loss: pretrained {with_pre:?}, random {without:?}");
        assert!(
            median(with_pre.clone()) < median(without.clone()),
            "epochs to the shared dev loss: pretrained {with_pre:?}, random {without:?}"
        );
    }
}
