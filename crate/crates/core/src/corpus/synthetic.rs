use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Corpus, SignVideo, Split};
use crate::error::{Error, Result};

/// Bits per side of a glyph pattern.
const GRID: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub glyph_vocab_size: usize,
    pub sentence_length_range: (usize, usize),
    pub frames_per_glyph: usize,
    pub jitter: usize,
    pub image_size: (usize, usize),
    pub counts: (usize, usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            glyph_vocab_size: 30,
            sentence_length_range: (3, 8),
            frames_per_glyph: 4,
            jitter: 2,
            image_size: (32, 32),
            counts: (2000, 200, 200),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.glyph_vocab_size == 0 {
            return Err(Error::config("glyph_vocab_size", "must be at least 1"));
        }
        if self.glyph_vocab_size > 1 << 20 {
            return Err(Error::config("glyph_vocab_size", "too many glyphs for distinct patterns"));
        }
        let (lo, hi) = self.sentence_length_range;
        if lo == 0 {
            return Err(Error::config("sentence_length_range", "minimum length must be at least 1"));
        }
        if lo > hi {
            return Err(Error::config("sentence_length_range", format!("min {lo} exceeds max {hi}")));
        }
        if self.frames_per_glyph == 0 {
            return Err(Error::config("frames_per_glyph", "must be at least 1"));
        }
        let (h, w) = self.image_size;
        if h < GRID || w < GRID {
            return Err(Error::config("image_size", format!("must be at least {GRID}x{GRID}")));
        }
        let (tr, dv, te) = self.counts;
        if tr == 0 || dv == 0 || te == 0 {
            return Err(Error::config("counts", "every split needs at least one sample"));
        }
        if self.jitter >= h.min(w) {
            return Err(Error::config("jitter", "must be smaller than the image size"));
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.counts.0,
            Split::Dev => self.counts.1,
            Split::Test => self.counts.2,
        }
    }
}

pub fn glyph_name(index: usize) -> String {
    format!("g{index:02}")
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derived_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(seed) ^ stream) ^ index)
}

/// Distinct non-empty `GRID x GRID` bit patterns, one per glyph.
fn glyph_bank(spec: &SyntheticSpec) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(spec.seed, 0xA11CE, 0));
    let mut seen = std::collections::HashSet::new();
    let mut bank = Vec::with_capacity(spec.glyph_vocab_size);
    while bank.len() < spec.glyph_vocab_size {
        let bits: Vec<bool> = (0..GRID * GRID).map(|_| rng.random_bool(0.5)).collect();
        let ones = bits.iter().filter(|&&b| b).count();
        if ones < GRID || ones > GRID * GRID - GRID {
            continue;
        }
        if seen.insert(bits.clone()) {
            bank.push(bits);
        }
    }
    bank
}

/// Pattern of glyph `index` under `spec`'s seed, row-major `GRID x GRID`.
pub fn glyph_pattern(spec: &SyntheticSpec, index: usize) -> Vec<bool> {
    glyph_bank(spec).swap_remove(index)
}

fn render(frames: &mut Array4<u8>, t: usize, pattern: &[bool], dy: isize, dx: isize) {
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    let block = (h.min(w) * 3 / 4 / GRID).max(1);
    let oy = (h - block * GRID) as isize / 2 + dy;
    let ox = (w - block * GRID) as isize / 2 + dx;
    for gy in 0..GRID {
        for gx in 0..GRID {
            if !pattern[gy * GRID + gx] {
                continue;
            }
            for by in 0..block {
                for bx in 0..block {
                    let y = oy + (gy * block + by) as isize;
                    let x = ox + (gx * block + bx) as isize;
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    for c in 0..3 {
                        frames[[t, y as usize, x as usize, c]] = 255;
                    }
                }
            }
        }
    }
}

fn make_sample(spec: &SyntheticSpec, bank: &[Vec<bool>], split: Split, index: usize) -> SignVideo {
    let stream = 1 + split as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(spec.seed, stream, index as u64));
    let (lo, hi) = spec.sentence_length_range;
    let len = rng.random_range(lo..=hi);
    let glyphs: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.glyph_vocab_size)).collect();
    let (h, w) = spec.image_size;
    let t_total = len * spec.frames_per_glyph;
    let mut frames = Array4::<u8>::zeros((t_total, h, w, 3));
    let j = spec.jitter as i64;
    for (k, &g) in glyphs.iter().enumerate() {
        for f in 0..spec.frames_per_glyph {
            let dy = rng.random_range(-j..=j) as isize;
            let dx = rng.random_range(-j..=j) as isize;
            render(&mut frames, k * spec.frames_per_glyph + f, &bank[g], dy, dx);
        }
    }
    let transcript = glyphs.iter().map(|&g| glyph_name(g)).collect::<Vec<_>>().join(" ");
    SignVideo {
        sample_id: format!("{}-{index:05}", split.name()),
        transcript,
        frames,
    }
}

/// Identical specs yield bit-identical corpora regardless of thread
/// count: each sample draws from its own derived generator.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let bank = glyph_bank(spec);
    let mut corpus = Corpus::default();
    for split in Split::ALL {
        let samples: Vec<SignVideo> = (0..spec.count(split))
            .into_par_iter()
            .map(|i| make_sample(spec, &bank, split, i))
            .collect();
        *corpus.split_mut(split) = samples;
    }
    Ok(corpus)
}

/// Text-only sentences drawn from the same length and glyph
/// distributions as the corpus transcripts, on an independent stream.
pub fn synthetic_sentences(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Vec<String>> {
    spec.validate()?;
    let (lo, hi) = spec.sentence_length_range;
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, 0x7E47, i as u64));
            let len = rng.random_range(lo..=hi);
            (0..len)
                .map(|_| glyph_name(rng.random_range(0..spec.glyph_vocab_size)))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect())
}
