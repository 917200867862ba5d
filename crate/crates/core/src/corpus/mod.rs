//! Sign-video corpora: the deterministic synthetic generator, on-disk
//! ingestion, tokenization and batching.

mod batch;
mod io;
mod synthetic;
pub mod vocab;

use ndarray::{Array4, ArrayView3};
use serde::{Deserialize, Serialize};

pub use batch::{collate, Batch};
pub use io::{load_corpus, save_corpus, CorpusManifest, ManifestEntry};
pub use synthetic::{generate_synthetic_corpus, glyph_name, glyph_pattern, synthetic_sentences, SyntheticSpec};
pub use vocab::{trim_vocabulary, TokenSequence, Vocabulary};

use crate::error::{Error, Result};

/// Frames are stored 8-bit (`value / 255` in `[0, 1]`), matching the
/// on-disk PNG format, with layout `(T, H, W, 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignVideo {
    pub sample_id: String,
    pub transcript: String,
    pub frames: Array4<u8>,
}

impl SignVideo {
    pub fn new(sample_id: impl Into<String>, transcript: impl Into<String>, frames: Array4<u8>) -> Result<Self> {
        let v = SignVideo {
            sample_id: sample_id.into(),
            transcript: transcript.into(),
            frames,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Sample {
            sample_id: self.sample_id.clone(),
            reason,
        };
        let s = self.frames.shape();
        if s[0] == 0 {
            return Err(fail("video has no frames".into()));
        }
        if s[3] != 3 {
            return Err(fail(format!("expected 3 channels, found {}", s[3])));
        }
        if s[1] == 0 || s[2] == 0 {
            return Err(fail("frames have zero spatial size".into()));
        }
        if self.transcript.trim().is_empty() {
            return Err(fail("empty transcript".into()));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, u8> {
        self.frames.index_axis(ndarray::Axis(0), t)
    }

    /// Frames decoded to `[0, 1]`.
    pub fn frames_f32(&self) -> Array4<f32> {
        self.frames.mapv(|v| v as f32 / 255.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}` (expected train, dev or test)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<SignVideo>,
    pub dev: Vec<SignVideo>,
    pub test: Vec<SignVideo>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[SignVideo] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<SignVideo> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &SignVideo)> {
        Split::ALL.into_iter().flat_map(move |s| self.split(s).iter().map(move |v| (s, v)))
    }

    /// Trimmed vocabulary of the train split over `base`.
    pub fn trimmed_vocabulary(&self, base: &Vocabulary) -> Vocabulary {
        trim_vocabulary(base, self.train.iter().map(|v| v.transcript.as_str()))
    }

    /// Vocabulary of every whitespace token seen in any split, in
    /// first-occurrence order; the base for trimming when no external
    /// tokenizer vocabulary is given.
    pub fn full_vocabulary(&self) -> Vocabulary {
        let mut seen = std::collections::HashSet::new();
        let mut tokens = Vec::new();
        for (_, v) in self.iter() {
            for w in v.transcript.split_whitespace() {
                if seen.insert(w) {
                    tokens.push(w.to_string());
                }
            }
        }
        Vocabulary::specials_plus(tokens)
    }
}
