//! Acceptance gate. Each test prints one PASS/FAIL line to stdout.

mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dashu_float::FBig;
use ndarray::{Array2, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fla_slt::config::ExperimentConfig;
use fla_slt::corpus::{Corpus, Vocabulary};
use fla_slt::diagnostics::dominance_report;
use fla_slt::evalkit::{beam_search, corpus_bleu, evaluate_model, rouge_l, BeamConfig, EvalReport};
use fla_slt::model::TranslatorKind;
use fla_slt::nn::gradcheck::check_module_grads;
use fla_slt::nn::{join, randn, smoothed_ce_with_logits, Ctx, Module, Param, Real};
use fla_slt::nn::conv::ImageShape;
use fla_slt::pipeline::{
    e2e_stage_config, light_t_config, load_or_generate_corpus, task_backend, task_vocabulary, with_seed, worker_pool,
};
use fla_slt::trainer::checkpoint::checksum;
use fla_slt::trainer::{init_light_t, init_model, run_joint_e2e, run_stage1, run_stage2, Optimizer, OptimizerKind, RunOptions};
use fla_slt::transformer::{Padded, Seq2SeqTransformer, TokenBatch, TransformerConfig};
use fla_slt::visual::{build_adapter, ConvBlock, TemporalModule};

const SEEDS: [u64; 3] = [0, 1, 2];
const BOS: u32 = 1;
const EOS: u32 = 2;

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {n} {title}: {} | {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- oracles

/// Pseudo-random next-token distribution over `v` tokens keyed by the
/// whole prefix.
fn rigged(seed: u64, v: usize) -> impl Fn(&[u32]) -> Vec<f64> {
    move |prefix| {
        let mut h = DefaultHasher::new();
        (seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-2.5..2.5)).collect();
        let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - z).collect()
    }
}

fn batched(f: impl Fn(&[u32]) -> Vec<f64>) -> impl FnMut(&[Vec<u32>]) -> fla_slt::Result<Vec<Vec<f64>>> {
    move |ps| Ok(ps.iter().map(|p| f(p)).collect())
}

/// Best complete hypothesis by length-normalized score over every sequence
/// the decoder can emit.
fn exhaustive(f: &dyn Fn(&[u32]) -> Vec<f64>, v: usize, max_len: usize) -> (Vec<u32>, f64) {
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut stack = vec![(vec![BOS], 0.0f64)];
    while let Some((prefix, score)) = stack.pop() {
        let d = f(&prefix);
        for t in 0..v as u32 {
            let mut ids = prefix.clone();
            ids.push(t);
            let s = score + d[t as usize];
            if t == EOS || ids.len() == max_len {
                let norm = s / (ids.len() - 1) as f64;
                if best.as_ref().is_none_or(|(b, bs)| norm > bs / (b.len() - 1) as f64) {
                    best = Some((ids, s));
                }
            } else {
                stack.push((ids, s));
            }
        }
    }
    best.unwrap()
}

fn argmax_decode(f: &dyn Fn(&[u32]) -> Vec<f64>, max_len: usize) -> Vec<u32> {
    let mut ids = vec![BOS];
    loop {
        let d = f(&ids);
        let mut t = 0;
        for k in 1..d.len() {
            if d[k] > d[t] {
                t = k;
            }
        }
        ids.push(t as u32);
        if t as u32 == EOS || ids.len() == max_len {
            return ids;
        }
    }
}

fn count(seq: &[String], gram: &[String]) -> usize {
    if seq.len() < gram.len() {
        return 0;
    }
    (0..=seq.len() - gram.len()).filter(|&i| &seq[i..i + gram.len()] == gram).count()
}

fn brute_bleu(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> f64 {
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut num, mut den) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            if h.len() < k {
                continue;
            }
            den += h.len() - k + 1;
            let mut seen: Vec<&[String]> = Vec::new();
            for i in 0..=h.len() - k {
                let g = &h[i..i + k];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                num += count(h, g).min(count(rf, g));
            }
        }
        if num == 0 {
            return 0.0;
        }
        log_p += (num as f64 / den as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_p / n as f64).exp()
}

fn memo_lcs(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(v) = memo[i][j] {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + memo_lcs(a, b, i + 1, j + 1, memo)
    } else {
        memo_lcs(a, b, i + 1, j, memo).max(memo_lcs(a, b, i, j + 1, memo))
    };
    memo[i][j] = Some(v);
    v
}

fn oracle_rouge(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let mut memo = vec![vec![None; r.len()]; h.len()];
        let l = memo_lcs(h, r, 0, 0, &mut memo) as f64;
        if l > 0.0 {
            let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
            total += 2.0 * p * rc / (p + rc);
        }
    }
    total / hyps.len() as f64
}

fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let words = ["a", "b", "c", "d"];
    let n = rng.random_range(1..=6);
    let mut sent = |lo: usize| -> Vec<String> {
        let len = rng.random_range(lo..=7);
        (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..n {
        hyps.push(sent(0));
        refs.push(sent(1));
    }
    (hyps, refs)
}

fn joined(v: &[Vec<String>]) -> Vec<String> {
    v.iter().map(|s| s.join(" ")).collect()
}

fn big(x: f64) -> FBig {
    FBig::try_from(x).unwrap().with_precision(256).value()
}

/// Smoothed cross-entropy and smoothed-target entropy at 256-bit precision.
fn precise_ce(logits: &Array2<f64>, targets: &[u32], mask: &[bool], eps: f64) -> (f64, f64) {
    let v = logits.ncols();
    let off = big(eps) / big(v as f64);
    let on = big(1.0) - big(eps) + off.clone();
    let entropy = -(on.clone() * on.ln()) - big((v - 1) as f64) * off.clone() * off.ln();
    let mut total = big(0.0);
    let mut rows = 0;
    for (b, row) in logits.rows().into_iter().enumerate() {
        if !mask[b] {
            continue;
        }
        rows += 1;
        let mut z = big(0.0);
        for &l in row.iter() {
            z += big(l).exp();
        }
        let lse = z.ln();
        for (k, &l) in row.iter().enumerate() {
            let q = if k == targets[b] as usize { on.clone() } else { off.clone() };
            total -= q * (big(l) - lse.clone());
        }
    }
    ((total / big(rows as f64)).to_f64().value(), entropy.to_f64().value())
}

/// `0.5 * (a x^2 + b y^2)`.
struct Quadratic {
    x: Param<f64>,
    y: Param<f64>,
}

impl Module<f64> for Quadratic {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        f(&join(prefix, "x"), &self.x);
        f(&join(prefix, "y"), &self.y);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        f(&join(prefix, "x"), &mut self.x);
        f(&join(prefix, "y"), &mut self.y);
    }
}

const QA: f64 = 2.5;
const QB: f64 = 0.4;

impl Quadratic {
    fn new(x: f64, y: f64) -> Self {
        Quadratic {
            x: Param::filled(&[1], x),
            y: Param::filled(&[1], y),
        }
    }

    fn point(&self) -> [f64; 2] {
        [self.x.value[[0]], self.y.value[[0]]]
    }

    fn backward(&mut self) {
        let [x, y] = self.point();
        self.zero_grad();
        self.x.accumulate(ndarray::arr1(&[QA * x]).view());
        self.y.accumulate(ndarray::arr1(&[QB * y]).view());
    }
}

#[test]
fn criterion_1_oracle_suite() {
    let start = Instant::now();
    let mut failures: Vec<String> = Vec::new();

    let mut beam_cases = 0;
    for seed in 0..30 {
        for v in 3..=6usize {
            for max_len in 2..=4usize {
                let f = rigged(seed, v);
                let (ids, score) = exhaustive(&f, v, max_len);
                let cfg = BeamConfig {
                    beam: v.pow(max_len as u32),
                    max_len,
                    length_normalize: true,
                };
                let h = beam_search(batched(rigged(seed, v)), BOS, EOS, &cfg).unwrap();
                if h.ids != ids || (h.score - score).abs() > 1e-12 {
                    failures.push(format!("beam vs enumeration seed {seed} v {v} len {max_len}"));
                }
                beam_cases += 1;
            }
        }
    }
    for seed in 0..100 {
        let f = rigged(1000 + seed, 8);
        let cfg = BeamConfig {
            beam: 1,
            max_len: 10,
            length_normalize: true,
        };
        let h = beam_search(batched(rigged(1000 + seed, 8)), BOS, EOS, &cfg).unwrap();
        if h.ids != argmax_decode(&f, 10) {
            failures.push(format!("width-1 beam vs argmax seed {seed}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bleu_err = 0f64;
    let mut rouge_err = 0f64;
    for _ in 0..50 {
        let (h, r) = random_corpus(&mut rng);
        let got = corpus_bleu(&joined(&h), &joined(&r), 4).unwrap();
        for n in 1..=4 {
            bleu_err = bleu_err.max((got[n - 1] - brute_bleu(&h, &r, n)).abs());
        }
        rouge_err = rouge_err.max((rouge_l(&joined(&h), &joined(&r)).unwrap() - oracle_rouge(&h, &r)).abs());
    }
    if bleu_err > 1e-9 {
        failures.push(format!("bleu error {bleu_err:e}"));
    }
    if rouge_err > 1e-9 {
        failures.push(format!("rouge error {rouge_err:e}"));
    }
    let hand = corpus_bleu(&["a b c d".to_string()], &["a b c d e".to_string()], 4).unwrap()[3];
    if (hand - (-0.25f64).exp()).abs() > 1e-12 || (hand - 0.7788).abs() > 1e-4 {
        failures.push(format!("hand-derived bleu {hand}"));
    }

    let mut ce_err = 0f64;
    let mut below_entropy = 0;
    for _ in 0..50 {
        let rows = rng.random_range(1..=5);
        let v = rng.random_range(2..=8);
        let logits = Array2::from_shape_fn((rows, v), |_| rng.random_range(-4.0..4.0));
        let targets: Vec<u32> = (0..rows).map(|_| rng.random_range(0..v as u32)).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        let (loss, _) = smoothed_ce_with_logits(&logits.view(), &targets, &mask, 0.2).unwrap();
        let (exact, entropy) = precise_ce(&logits, &targets, &mask, 0.2);
        ce_err = ce_err.max((loss - exact).abs());
        if loss < entropy {
            below_entropy += 1;
        }
    }
    if ce_err > 1e-9 {
        failures.push(format!("smoothed ce error {ce_err:e}"));
    }
    if below_entropy > 0 {
        failures.push(format!("{below_entropy} batches below the target entropy"));
    }

    let (lr, mu) = (0.1, 0.9);
    let mut q = Quadratic::new(1.5, -2.0);
    let mut sgd = Optimizer::new(OptimizerKind::Sgd { momentum: mu });
    let mut expect = [1.5, -2.0];
    let mut vel = [0.0, 0.0];
    for _ in 0..3 {
        q.backward();
        let g = [QA * expect[0], QB * expect[1]];
        sgd.step(&mut q, &|_| lr);
        for i in 0..2 {
            vel[i] = mu * vel[i] + g[i];
            expect[i] -= lr * vel[i];
        }
    }
    let sgd_err = (0..2).map(|i| (q.point()[i] - expect[i]).abs()).fold(0.0, f64::max);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut q = Quadratic::new(1.5, -2.0);
    let mut adam = Optimizer::new(OptimizerKind::Adam { beta1: b1, beta2: b2, eps });
    let mut expect = [1.5, -2.0];
    let (mut m, mut s) = ([0.0; 2], [0.0; 2]);
    for t in 1..=3 {
        q.backward();
        let g = [QA * expect[0], QB * expect[1]];
        adam.step(&mut q, &|_| 0.05);
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            s[i] = b2 * s[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let sh = s[i] / (1.0 - b2.powi(t));
            expect[i] -= 0.05 * mh / (sh.sqrt() + eps);
        }
    }
    let adam_err = (0..2).map(|i| (q.point()[i] - expect[i]).abs()).fold(0.0, f64::max);
    if sgd_err > 1e-9 || adam_err > 1e-9 {
        failures.push(format!("optimizer error sgd {sgd_err:e} adam {adam_err:e}"));
    }

    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(120) {
        failures.push(format!("runtime {}", secs(elapsed)));
    }
    let detail = format!(
        "{beam_cases} enumeration cases, bleu err {bleu_err:.1e}, rouge err {rouge_err:.1e}, ce err {ce_err:.1e}, \
         sgd err {sgd_err:.1e}, adam err {adam_err:.1e}, {}{}",
        secs(elapsed),
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    verdict(1, "oracle suite", failures.is_empty(), &detail);
}

// ---------------------------------------------------------------- gradients

fn matrix<S: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<S> {
    randn::<S, _>(rng, &[rows, cols], 1.0).into_dimensionality::<Ix2>().unwrap()
}

fn conv_block_error<S: Real>(h: f64, train: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut block = ConvBlock::<S>::new(&mut rng, 3, 4);
    let shape = ImageShape { n: 2, h: 6, w: 6 };
    let x = matrix::<S>(&mut rng, 72, 3);
    let probe = matrix::<S>(&mut rng, 18, 4);
    check_module_grads(&mut block, h, |b, bw| {
        let (y, _, c) = b.forward(&x.view(), shape, train);
        if bw {
            b.backward(c, &probe.view(), false);
        }
        (&y * &probe).sum()
    })
}

fn temporal_error<S: Real>(h: f64, train: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut m = TemporalModule::<S>::new(&mut rng, 5, 6, 3);
    let x = matrix::<S>(&mut rng, 9, 5);
    let probe = matrix::<S>(&mut rng, 9, 6);
    check_module_grads(&mut m, h, |m, bw| {
        let (y, c) = m.forward(&x.view(), &[4, 5], train).unwrap();
        if bw {
            m.backward(c, &probe.view(), false);
        }
        (&y * &probe).sum()
    })
}

fn adapter_error<S: Real>(h: f64, d_in: usize, hidden: usize, d_out: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(23 + d_out as u64);
    let mut ad = build_adapter::<S, _>(&mut rng, d_in, hidden, d_out);
    let x = matrix::<S>(&mut rng, 5, d_in);
    let probe = matrix::<S>(&mut rng, 5, d_out);
    check_module_grads(&mut ad, h, |m, bw| {
        let (y, c) = m.forward(&x.view()).unwrap();
        if bw {
            m.backward(c, &probe.view(), false);
        }
        (&y * &probe).sum()
    })
}

fn translator_config() -> TransformerConfig {
    TransformerConfig {
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        hidden: 8,
        ffn: 12,
        vocab_size: 9,
        max_positions: 16,
        dropout: 0.0,
    }
}

fn translator_error<S: Real>(h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut model = Seq2SeqTransformer::<S>::new(&mut rng, translator_config()).unwrap();
    let mem = Padded::from_packed(&matrix::<S>(&mut rng, 6, 8).view(), &[4, 2]);
    let tgt = TokenBatch::from_sequences(&[vec![1, 4, 5, 7], vec![1, 6]], 0);
    let next = [4, 5, 7, 2, 6, 2, 0, 0];
    let mask = [true, true, true, true, true, true, false, false];
    check_module_grads(&mut model, h, |m, bw| {
        let mut ctx = Ctx::eval();
        let (enc, ec) = m.encode(&mem, &mut ctx).unwrap();
        let (logits, dc) = m.decode(&tgt, &enc, &mut ctx).unwrap();
        let (loss, dl) = smoothed_ce_with_logits(&logits.view(), &next, &mask, 0.2).unwrap();
        if bw {
            let dmem = m.backward_decode(dc, &dl);
            let dmem = Padded::new(dmem, enc.max_len, enc.lens.clone()).unwrap();
            m.backward_encode(ec, &dmem);
        }
        S::lit(loss)
    })
}

fn max_abs_diff(a: ndarray::ArrayView2<f64>, b: ndarray::ArrayView2<f64>) -> f64 {
    (&a - &b).iter().fold(0.0, |m, d| m.max(d.abs()))
}

#[test]
fn criterion_2_numerical_suite() {
    let start = Instant::now();
    let mut checks: Vec<(&str, f64, f64)> = vec![
        ("backbone block f64 train", conv_block_error::<f64>(1e-6, true), 1e-5),
        ("backbone block f64 eval", conv_block_error::<f64>(1e-6, false), 1e-5),
        ("backbone block f32 eval", conv_block_error::<f32>(1e-3, false), 1e-3),
        ("temporal module f64 train", temporal_error::<f64>(1e-6, true), 1e-5),
        ("temporal module f64 eval", temporal_error::<f64>(1e-6, false), 1e-5),
        ("temporal module f32 eval", temporal_error::<f32>(1e-2, false), 1e-3),
        ("vl adapter f64", adapter_error::<f64>(1e-6, 6, 8, 8), 1e-5),
        ("vl adapter f32", adapter_error::<f32>(1e-2, 6, 8, 8), 1e-3),
        ("llm adapter f64", adapter_error::<f64>(1e-6, 6, 12, 12), 1e-5),
        ("llm adapter f32", adapter_error::<f32>(1e-2, 6, 12, 12), 1e-3),
        ("translator blocks and lm head f64", translator_error::<f64>(1e-5), 1e-5),
        ("translator blocks and lm head f32", translator_error::<f32>(1e-2), 1e-3),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let model = Seq2SeqTransformer::<f64>::new(&mut rng, translator_config()).unwrap();
    let mem = Padded::from_packed(&matrix::<f64>(&mut rng, 3, 8).view(), &[3]);
    let a = TokenBatch::from_sequences(&[vec![1, 4, 5, 6, 7]], 0);
    let b = TokenBatch::from_sequences(&[vec![1, 4, 5, 8, 3]], 0);
    let (la, _) = model.decode(&a, &mem, &mut Ctx::eval()).unwrap();
    let (lb, _) = model.decode(&b, &mem, &mut Ctx::eval()).unwrap();
    let causal = max_abs_diff(la.slice(ndarray::s![0..3, ..]), lb.slice(ndarray::s![0..3, ..]));
    checks.push(("decoder causality", causal, 1e-6));

    let packed = matrix::<f64>(&mut rng, 7, 8);
    let g = Padded::from_packed(&packed.view(), &[5, 2]);
    let (h0, _) = model.encode(&g, &mut Ctx::eval()).unwrap();
    let mut g1 = g.clone();
    for r in 7..10 {
        g1.data.row_mut(r).fill(4.2);
    }
    let (h1, _) = model.encode(&g1, &mut Ctx::eval()).unwrap();
    let leak = (0..2).map(|i| max_abs_diff(h0.item(i), h1.item(i))).fold(0.0, f64::max);
    checks.push(("encoder padding isolation", leak, 1e-6));

    let elapsed = start.elapsed();
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, e, tol)| !(e < tol))
        .map(|(n, e, tol)| format!("{n} {e:.2e} >= {tol:.0e}"))
        .collect();
    let worst = checks.iter().map(|c| c.1 / c.2).fold(0.0, f64::max);
    let pass = bad.is_empty() && elapsed < Duration::from_secs(300);
    let detail = format!(
        "{} checks, worst error/tolerance {worst:.3}, {}{}",
        checks.len(),
        secs(elapsed),
        if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }
    );
    verdict(2, "numerical suite", pass, &detail);
}

// ---------------------------------------------------------------- trends

struct Workspace {
    cfg: ExperimentConfig,
    corpus: Corpus,
    vocab: Vocabulary,
    backends: tempfile::TempDir,
}

impl Workspace {
    fn new(name: &str) -> Self {
        let cfg = config(name);
        let corpus = load_or_generate_corpus(&cfg).unwrap();
        let vocab = task_vocabulary(&cfg, &corpus);
        Workspace {
            cfg,
            corpus,
            vocab,
            backends: tempfile::tempdir().unwrap(),
        }
    }

    fn backend(&self, pretrained: bool) -> Seq2SeqTransformer<f32> {
        task_backend(&self.cfg, &self.corpus, &self.vocab, pretrained, Some(self.backends.path()))
            .unwrap()
            .0
    }
}

fn test_bleu(model: &fla_slt::model::SltModel<f32>, corpus: &Corpus, eval: &BeamConfig) -> f64 {
    let mut m = model.clone();
    evaluate_model(&mut m, &corpus.test, eval, None, None, false).unwrap().bleu4
}

struct SeedOutcome {
    factorized: f64,
    e2e: f64,
    skip_init: f64,
    random_backend: f64,
    frozen_intact: bool,
}

struct Trends {
    outcomes: Vec<SeedOutcome>,
    elapsed: Duration,
}

fn trends() -> &'static Trends {
    static CELL: OnceLock<Trends> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let ws = Workspace::new("factorized.json");
        let opts = RunOptions::default();
        let outcomes = SEEDS
            .iter()
            .map(|&seed| {
                let cfg = with_seed(&ws.cfg, seed);
                let (c, vocab) = (&ws.corpus, ws.vocab.clone());
                let lt = light_t_config(&cfg, &vocab);
                let s1 = run_stage1::<f32>(c, vocab.clone(), &cfg.visual, &lt, &cfg.stage1, &opts).unwrap();
                let before = checksum(&s1.model.visual);
                let s2 = run_stage2(&s1.model, c, ws.backend(true), &cfg.stage2, cfg.freeze, cfg.tap, &opts).unwrap();
                let frozen_intact = checksum(&s2.model.visual) == before && checksum(&s2.last.visual) == before;
                let factorized = test_bleu(&s2.model, c, &cfg.eval);

                let rand_s2 = run_stage2(&s1.model, c, ws.backend(false), &cfg.stage2, cfg.freeze, cfg.tap, &opts).unwrap();
                let random_backend = test_bleu(&rand_s2.model, c, &cfg.eval);

                let fresh = init_model(seed, &cfg.visual, init_light_t(seed, &lt).unwrap(), TranslatorKind::LightT, vocab.clone()).unwrap();
                let skip = run_stage2(&fresh, c, ws.backend(true), &cfg.stage2, cfg.freeze, cfg.tap, &opts).unwrap();
                let skip_init = test_bleu(&skip.model, c, &cfg.eval);

                let ecfg = e2e_stage_config(&cfg, c.train.len());
                let e = run_joint_e2e(c, vocab, &cfg.visual, ws.backend(cfg.backend.pretrained), TranslatorKind::Backend, &ecfg, &opts)
                    .unwrap();
                let e2e = test_bleu(&e.model, c, &cfg.eval);
                SeedOutcome {
                    factorized,
                    e2e,
                    skip_init,
                    random_backend,
                    frozen_intact,
                }
            })
            .collect();
        Trends {
            outcomes,
            elapsed: start.elapsed(),
        }
    })
}

fn listed(v: impl Iterator<Item = f64>) -> String {
    v.map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

#[test]
fn criterion_3_freeze_invariance() {
    let t = trends();
    let intact = t.outcomes.iter().filter(|o| o.frozen_intact).count();
    let detail = format!("frozen visual checksum unchanged in {intact}/{} stage-2 runs", t.outcomes.len());
    verdict(3, "freeze invariance", intact == t.outcomes.len(), &detail);
}

#[test]
fn criterion_4_dominance() {
    let start = Instant::now();
    let ws = Workspace::new("dominance.json");
    let mut fractions = Vec::new();
    let mut ratios = Vec::new();
    for seed in SEEDS {
        let cfg = with_seed(&ws.cfg, seed);
        let ecfg = e2e_stage_config(&cfg, ws.corpus.train.len());
        let run = run_joint_e2e::<f32>(
            &ws.corpus,
            ws.vocab.clone(),
            &cfg.visual,
            ws.backend(cfg.backend.pretrained),
            TranslatorKind::Backend,
            &ecfg,
            &RunOptions::default(),
        )
        .unwrap();
        let trace = run.trace.as_ref().unwrap();
        let rep = dominance_report(trace, &trace.watched_layers[0], &trace.watched_layers[1]).unwrap();
        fractions.push(rep.fraction_backend_exceeds);
        ratios.push(rep.mean_norm_ratio);
    }
    let elapsed = start.elapsed();
    let m = median(fractions.clone());
    let pass = m >= 0.7 && elapsed < Duration::from_secs(900);
    let detail = format!(
        "median fraction {m:.3} (seeds {}), mean norm ratio {}, {}",
        listed(fractions.into_iter()),
        listed(ratios.into_iter()),
        secs(elapsed)
    );
    verdict(4, "dominance reproduction", pass, &detail);
}

#[test]
fn criterion_5_factorized_beats_joint() {
    let t = trends();
    let f = median(t.outcomes.iter().map(|o| o.factorized).collect());
    let e = median(t.outcomes.iter().map(|o| o.e2e).collect());
    let pass = f >= 0.80 && f - e >= 0.10 && t.elapsed < Duration::from_secs(1800);
    let detail = format!(
        "factorized median {f:.3} (seeds {}), e2e median {e:.3} (seeds {}), gap {:.3}, {}",
        listed(t.outcomes.iter().map(|o| o.factorized)),
        listed(t.outcomes.iter().map(|o| o.e2e)),
        f - e,
        secs(t.elapsed)
    );
    verdict(5, "factorized vs joint", pass, &detail);
}

#[test]
fn criterion_6_visual_initialization_matters() {
    let t = trends();
    let full = median(t.outcomes.iter().map(|o| o.factorized).collect());
    let skip = median(t.outcomes.iter().map(|o| o.skip_init).collect());
    let detail = format!(
        "full median {full:.3}, without stage 1 median {skip:.3} (seeds {})",
        listed(t.outcomes.iter().map(|o| o.skip_init))
    );
    verdict(6, "stage contribution", skip < full, &detail);
}

#[test]
fn criterion_7_backend_pretraining_matters() {
    let t = trends();
    let pre = median(t.outcomes.iter().map(|o| o.factorized).collect());
    let rand = median(t.outcomes.iter().map(|o| o.random_backend).collect());
    let detail = format!(
        "pretrained median {pre:.3}, random median {rand:.3} (seeds {})",
        listed(t.outcomes.iter().map(|o| o.random_backend))
    );
    verdict(7, "backend pretraining", pre > rand, &detail);
}

struct DeterminismRun {
    losses: Vec<u64>,
    report: EvalReport,
}

fn determinism_run() -> DeterminismRun {
    let cfg = common::tiny_config();
    let corpus = load_or_generate_corpus(&cfg).unwrap();
    let vocab = task_vocabulary(&cfg, &corpus);
    let lt = light_t_config(&cfg, &vocab);
    let opts = RunOptions::default();
    let s1 = run_stage1::<f32>(&corpus, vocab.clone(), &cfg.visual, &lt, &cfg.stage1, &opts).unwrap();
    let backend = task_backend(&cfg, &corpus, &vocab, true, None).unwrap().0;
    let s2 = run_stage2(&s1.model, &corpus, backend, &cfg.stage2, cfg.freeze, cfg.tap, &opts).unwrap();
    let mut losses: Vec<u64> = s1.metrics.iter().chain(&s2.metrics).map(|r| r.loss.to_bits()).collect();
    losses.push(s2.total_steps);
    let mut m = s2.model.clone();
    let hash = checksum(&m);
    let report = evaluate_model(&mut m, &corpus.test, &cfg.eval, None, Some(hash), false).unwrap();
    DeterminismRun { losses, report }
}

#[test]
fn criterion_8_determinism() {
    let pool = worker_pool(Some(0)).unwrap();
    let a = pool.install(determinism_run);
    let b = pool.install(determinism_run);
    let same_losses = a.losses == b.losses;
    let same_report = a.report == b.report
        && serde_json::to_string(&a.report).unwrap() == serde_json::to_string(&b.report).unwrap();
    let detail = format!(
        "{} loss values {}, eval report {}",
        a.losses.len(),
        if same_losses { "identical" } else { "differ" },
        if same_report { "identical" } else { "differs" }
    );
    verdict(8, "determinism", same_losses && same_report, &detail);
}
