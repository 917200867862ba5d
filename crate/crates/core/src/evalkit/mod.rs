//! Decoding and translation metrics.

mod beam;
mod metrics;

pub use beam::{beam_search, greedy, BeamConfig, TranslationHypothesis};
pub use metrics::{bleu, corpus_bleu, lcs_len, rouge_l, sentence_bleu, BleuScores};

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS, PAD};
use crate::corpus::SignVideo;
use crate::error::{Error, Result};
use crate::model::{FeatureCache, SltModel};
use crate::nn::{log_softmax_rows, Ctx, Real};
use crate::transformer::{Padded, Seq2SeqTransformer, TokenBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRow {
    pub sample_id: String,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub n_samples: usize,
    pub checkpoint_hash: Option<String>,
    #[serde(skip)]
    pub hypotheses: Vec<HypothesisRow>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<HypothesisRow>, checkpoint_hash: Option<String>) -> Result<Self> {
        let hyps: Vec<String> = rows.iter().map(|r| r.hypothesis.clone()).collect();
        let refs: Vec<String> = rows.iter().map(|r| r.reference.clone()).collect();
        let b = bleu(&hyps, &refs)?;
        Ok(EvalReport {
            bleu1: b.bleu1,
            bleu2: b.bleu2,
            bleu3: b.bleu3,
            bleu4: b.bleu4,
            rouge_l: rouge_l(&hyps, &refs)?,
            n_samples: rows.len(),
            checkpoint_hash,
            hypotheses: rows,
        })
    }

    /// Writes `report.json` and `hypotheses.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = dir.join("report.json");
        std::fs::write(&report, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&report, e))?;
        let tsv = dir.join("hypotheses.tsv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tsv).map_err(|e| Error::io(&tsv, e))?);
        let mut body = String::from("sample_id\thypothesis\treference\n");
        for r in &self.hypotheses {
            body.push_str(&format!("{}\t{}\t{}\n", r.sample_id, r.hypothesis, r.reference));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&tsv, e))?;
        f.flush().map_err(|e| Error::io(&tsv, e))
    }
}

/// Beam-search translation of one encoded memory.
pub fn translate_memory<S: Real>(
    translator: &Seq2SeqTransformer<S>,
    memory: &Array2<S>,
    cfg: &BeamConfig,
) -> Result<TranslationHypothesis> {
    beam_search(|p| translator.next_token_logprobs(&memory.view(), p), BOS, EOS, cfg)
}

/// Greedy decoding of a whole batch at once; finished rows keep decoding
/// but their output is cut at the first `eos`.
pub fn greedy_decode_batch<S: Real>(
    translator: &Seq2SeqTransformer<S>,
    memories: &[Array2<S>],
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    if memories.is_empty() {
        return Ok(Vec::new());
    }
    let lens: Vec<usize> = memories.iter().map(|m| m.nrows()).collect();
    let views: Vec<_> = memories.iter().map(|m| m.view()).collect();
    let packed = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mem = Padded::from_packed(&packed.view(), &lens);
    let b = memories.len();
    let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; b];
    let mut done = vec![false; b];
    while seqs[0].len() < max_len && done.iter().any(|d| !d) {
        let tokens = TokenBatch::from_sequences(&seqs, PAD);
        let (logits, _) = translator.decode(&tokens, &mem, &mut Ctx::eval())?;
        let len = tokens.max_len;
        let last: Vec<_> = (0..b).map(|i| logits.row(i * len + len - 1)).collect();
        let last = ndarray::stack(ndarray::Axis(0), &last).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let lp = log_softmax_rows(&last.view());
        for (i, row) in lp.rows().into_iter().enumerate() {
            let t = row
                .iter()
                .enumerate()
                .fold((0usize, S::neg_infinity()), |a, (k, &v)| if v > a.1 { (k, v) } else { a })
                .0 as u32;
            seqs[i].push(if done[i] { PAD } else { t });
            done[i] |= t == EOS;
        }
    }
    Ok(seqs)
}

fn reference(s: &SignVideo) -> String {
    s.transcript.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Decodes every sample and scores the detokenized output. With
/// `cfg.beam == 1` and `batched_greedy`, samples are decoded greedily in
/// batches instead of one beam search each.
pub fn evaluate_model<S: Real>(
    model: &mut SltModel<S>,
    samples: &[SignVideo],
    cfg: &BeamConfig,
    cache: Option<&FeatureCache<S>>,
    checkpoint_hash: Option<String>,
    batched_greedy: bool,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&SignVideo> = chunk.iter().collect();
        let memories = model.memories(&refs, cache)?;
        let ids: Vec<Vec<u32>> = if cfg.beam == 1 && batched_greedy {
            greedy_decode_batch(&model.translator, &memories, cfg.max_len)?
        } else {
            let translator = &model.translator;
            memories
                .par_iter()
                .map(|m| translate_memory(translator, m, cfg).map(|h| h.ids))
                .collect::<Result<_>>()?
        };
        for (s, h) in chunk.iter().zip(ids) {
            rows.push(HypothesisRow {
                sample_id: s.sample_id.clone(),
                hypothesis: model.vocab.detokenize(&h),
                reference: reference(s),
            });
        }
    }
    EvalReport::from_rows(rows, checkpoint_hash)
}
