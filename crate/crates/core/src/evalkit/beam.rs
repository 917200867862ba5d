use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationHypothesis {
    /// `bos ..`, ending in `eos` unless the length limit was hit.
    pub ids: Vec<u32>,
    /// Accumulated log-probability.
    pub score: f64,
    pub finished: bool,
}

impl TranslationHypothesis {
    /// Number of generated tokens (everything after `bos`).
    pub fn generated(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }

    pub fn normalized_score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.score / self.generated().max(1) as f64
        } else {
            self.score
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum hypothesis length in tokens, counting `bos` and `eos`.
    pub max_len: usize,
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 5,
            max_len: 32,
            length_normalize: true,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::config("beam", "must be at least 1"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len", format!("{} < 2", self.max_len)));
        }
        Ok(())
    }
}

/// Beam search over `score_fn`, which maps a set of equal-length prefixes to
/// one next-token log-probability vector each.
///
/// Every step expands all live hypotheses and keeps the best `beam`
/// candidates; candidates that emit `eos` or reach `max_len` move to the
/// finished pool. Ties keep the earlier (lower-index) candidate.
pub fn beam_search<F>(mut score_fn: F, bos: u32, eos: u32, cfg: &BeamConfig) -> Result<TranslationHypothesis>
where
    F: FnMut(&[Vec<u32>]) -> Result<Vec<Vec<f64>>>,
{
    cfg.validate()?;
    let mut live = vec![(vec![bos], 0.0f64)];
    let mut pool: Vec<TranslationHypothesis> = Vec::new();
    while !live.is_empty() {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(p, _)| p.clone()).collect();
        let dists = score_fn(&prefixes)?;
        if dists.len() != live.len() {
            return Err(Error::shape("score_fn rows", live.len(), dists.len()));
        }
        let mut cands: Vec<(usize, u32, f64)> = Vec::new();
        for (b, d) in dists.iter().enumerate() {
            for (t, &lp) in d.iter().enumerate() {
                if lp.is_finite() {
                    cands.push((b, t as u32, live[b].1 + lp));
                }
            }
        }
        cands.sort_by(|x, y| y.2.total_cmp(&x.2));
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for (b, t, score) in cands {
            let mut ids = live[b].0.clone();
            ids.push(t);
            if t == eos || ids.len() >= cfg.max_len {
                pool.push(TranslationHypothesis {
                    ids,
                    score,
                    finished: true,
                });
            } else {
                next.push((ids, score));
            }
        }
        live = next;
    }
    pool.into_iter()
        .reduce(|best, h| {
            if h.normalized_score(cfg.length_normalize) > best.normalized_score(cfg.length_normalize) {
                h
            } else {
                best
            }
        })
        .ok_or_else(|| Error::InvalidInput("score function produced no finite candidates".into()))
}

/// Argmax decoding; reference implementation for width-1 beams.
pub fn greedy<F>(mut score_fn: F, bos: u32, eos: u32, max_len: usize) -> Result<TranslationHypothesis>
where
    F: FnMut(&[Vec<u32>]) -> Result<Vec<Vec<f64>>>,
{
    if max_len < 2 {
        return Err(Error::config("max_len", format!("{max_len} < 2")));
    }
    let mut ids = vec![bos];
    let mut score = 0.0;
    loop {
        let d = score_fn(std::slice::from_ref(&ids))?.remove(0);
        let (t, lp) = d
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        ids.push(t as u32);
        score += lp;
        if t as u32 == eos || ids.len() >= max_len {
            return Ok(TranslationHypothesis {
                ids,
                score,
                finished: true,
            });
        }
    }
}
