use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
}

impl BleuScores {
    pub fn as_array(&self) -> [f64; 4] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4]
    }
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram totals for `n = 1..=max_n`.
fn clipped_stats(hyp: &[&str], reference: &[&str], max_n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for n in 1..=max_n {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        for (g, &c) in &h {
            matches[n - 1] += c.min(r.get(g).copied().unwrap_or(0));
        }
        totals[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    (matches, totals)
}

fn check_pair(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::InvalidInput("metrics need at least one sample".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::shape("hypothesis/reference count", refs.len(), hyps.len()));
    }
    Ok(())
}

/// Corpus BLEU-1..`max_n` with clipped counts, a uniform geometric mean over
/// orders, brevity penalty `exp(min(0, 1 - r/c))`, and no smoothing.
pub fn corpus_bleu(hyps: &[String], refs: &[String], max_n: usize) -> Result<Vec<f64>> {
    check_pair(hyps, refs)?;
    if max_n == 0 {
        return Err(Error::config("max_n", "must be at least 1"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let (ht, rt) = (tokens(h), tokens(rf));
        c += ht.len();
        r += rt.len();
        let (m, t) = clipped_stats(&ht, &rt, max_n);
        for n in 0..max_n {
            matches[n] += m[n];
            totals[n] += t[n];
        }
    }
    if c == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matches[n] == 0 || totals[n] == 0 {
            zero = true;
        } else {
            log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(out)
}

pub fn bleu(hyps: &[String], refs: &[String]) -> Result<BleuScores> {
    let b = corpus_bleu(hyps, refs, 4)?;
    Ok(BleuScores {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
    })
}

/// Sentence-level BLEU-`max_n` with add-one smoothing on every precision;
/// a debugging aid, not a reported metric.
pub fn sentence_bleu(hyp: &str, reference: &str, max_n: usize) -> f64 {
    let (ht, rt) = (tokens(hyp), tokens(reference));
    if ht.is_empty() || max_n == 0 {
        return 0.0;
    }
    let (m, t) = clipped_stats(&ht, &rt, max_n);
    let log_p: f64 = (0..max_n)
        .map(|n| ((m[n] + 1) as f64 / (t[n] + 1) as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = (1.0 - rt.len() as f64 / ht.len() as f64).min(0.0).exp();
    bp * log_p.exp()
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over samples of the LCS-based F1.
pub fn rouge_l(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_pair(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let (ht, rt) = (tokens(h), tokens(r));
            let l = lcs_len(&ht, &rt) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / ht.len() as f64;
            let rc = l / rt.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .sum();
    Ok(total / hyps.len() as f64)
}
