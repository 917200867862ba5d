use ndarray::{s, Array2, Array4, Array5};

use super::vocab::{Vocabulary, PAD};
use super::SignVideo;
use crate::error::{Error, Result};

/// Padded videos `(B, T_max, H, W, 3)` and padded token ids `(B, L_max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sample_ids: Vec<String>,
    pub videos: Array5<f32>,
    pub frame_lens: Vec<usize>,
    pub frame_mask: Array2<bool>,
    pub targets: Array2<u32>,
    pub target_lens: Vec<usize>,
    pub target_mask: Array2<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.frame_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_lens.is_empty()
    }

    /// Valid frames of sample `b`.
    pub fn video(&self, b: usize) -> Array4<f32> {
        self.videos.slice(s![b, ..self.frame_lens[b], .., .., ..]).to_owned()
    }

    /// Valid token ids of sample `b` (`bos .. eos`).
    pub fn target(&self, b: usize) -> Vec<u32> {
        self.targets.row(b).iter().take(self.target_lens[b]).copied().collect()
    }

    pub fn targets_vec(&self) -> Vec<Vec<u32>> {
        (0..self.len()).map(|b| self.target(b)).collect()
    }
}

pub fn collate(samples: &[&SignVideo], vocab: &Vocabulary) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot collate an empty sample list".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut seqs = Vec::with_capacity(samples.len());
    for v in samples {
        v.validate()?;
        if v.height() != h || v.width() != w {
            return Err(Error::Sample {
                sample_id: v.sample_id.clone(),
                reason: format!("frame size {}x{} differs from batch size {h}x{w}", v.height(), v.width()),
            });
        }
        seqs.push(vocab.tokenize(&v.transcript)?.ids);
    }
    let b = samples.len();
    let t_max = samples.iter().map(|v| v.num_frames()).max().unwrap();
    let l_max = seqs.iter().map(Vec::len).max().unwrap();
    let mut videos = Array5::<f32>::zeros((b, t_max, h, w, 3));
    let mut frame_mask = Array2::from_elem((b, t_max), false);
    let mut targets = Array2::from_elem((b, l_max), PAD);
    let mut target_mask = Array2::from_elem((b, l_max), false);
    for (i, (v, seq)) in samples.iter().zip(&seqs).enumerate() {
        let t = v.num_frames();
        videos
            .slice_mut(s![i, ..t, .., .., ..])
            .assign(&v.frames.mapv(|p| p as f32 / 255.0));
        frame_mask.slice_mut(s![i, ..t]).fill(true);
        for (j, &id) in seq.iter().enumerate() {
            targets[[i, j]] = id;
            target_mask[[i, j]] = true;
        }
    }
    Ok(Batch {
        sample_ids: samples.iter().map(|v| v.sample_id.clone()).collect(),
        frame_lens: samples.iter().map(|v| v.num_frames()).collect(),
        target_lens: seqs.iter().map(Vec::len).collect(),
        videos,
        frame_mask,
        targets,
        target_mask,
    })
}
