use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::Array4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Corpus, SignVideo, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: Split,
    pub transcript: String,
    pub frame_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub samples: Vec<ManifestEntry>,
}

fn frame_path(root: &Path, sample_id: &str, index: usize) -> std::path::PathBuf {
    root.join("frames").join(sample_id).join(format!("{index:05}.png"))
}

fn write_sample(root: &Path, v: &SignVideo) -> Result<()> {
    let dir = root.join("frames").join(&v.sample_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (h, w) = (v.height(), v.width());
    for t in 0..v.num_frames() {
        let frame = v.frame(t);
        let raw: Vec<u8> = frame.iter().copied().collect();
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w as u32, h as u32, raw).expect("frame buffer matches its dimensions");
        let path = frame_path(root, &v.sample_id, t);
        img.save(&path).map_err(|e| Error::Sample {
            sample_id: v.sample_id.clone(),
            reason: format!("writing {}: {e}", path.display()),
        })?;
    }
    Ok(())
}

/// Writes `manifest.json` and one 8-bit PNG per frame.
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let samples: Vec<ManifestEntry> = corpus
        .iter()
        .map(|(split, v)| ManifestEntry {
            sample_id: v.sample_id.clone(),
            split,
            transcript: v.transcript.clone(),
            frame_count: v.num_frames(),
        })
        .collect();
    let all: Vec<&SignVideo> = corpus.iter().map(|(_, v)| v).collect();
    all.par_iter().try_for_each(|v| write_sample(root, v))?;
    let manifest = CorpusManifest { samples };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_sample(root: &Path, entry: &ManifestEntry) -> Result<SignVideo> {
    let fail = |reason: String| Error::Sample {
        sample_id: entry.sample_id.clone(),
        reason,
    };
    if entry.frame_count == 0 {
        return Err(fail("manifest lists zero frames".into()));
    }
    let mut frames: Option<Array4<u8>> = None;
    for t in 0..entry.frame_count {
        let path = frame_path(root, &entry.sample_id, t);
        if !path.exists() {
            return Err(fail(format!("missing frame file {}", path.display())));
        }
        let img = image::open(&path)
            .map_err(|e| fail(format!("decoding {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let buf = frames.get_or_insert_with(|| Array4::zeros((entry.frame_count, h, w, 3)));
        if buf.shape()[1] != h || buf.shape()[2] != w {
            return Err(fail(format!("frame {t} is {w}x{h}, earlier frames differ")));
        }
        let view = ndarray::ArrayView3::from_shape((h, w, 3), img.as_raw()).expect("rgb8 layout");
        buf.index_axis_mut(ndarray::Axis(0), t).assign(&view);
    }
    let v = SignVideo {
        sample_id: entry.sample_id.clone(),
        transcript: entry.transcript.clone(),
        frames: frames.expect("at least one frame"),
    };
    v.validate()?;
    Ok(v)
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    let loaded: Vec<(Split, SignVideo)> = manifest
        .samples
        .par_iter()
        .map(|e| read_sample(root, e).map(|v| (e.split, v)))
        .collect::<Result<_>>()?;
    let mut corpus = Corpus::default();
    for (split, v) in loaded {
        corpus.split_mut(split).push(v);
    }
    Ok(corpus)
}
