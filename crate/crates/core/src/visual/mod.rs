//! Visual encoder: frame downsampling, a per-frame convolutional
//! backbone, a local temporal module, and the position-wise adapter that
//! projects sign-wise features into a text model's embedding space.

mod backbone;
mod downsample;
mod temporal;

use ndarray::{Array2, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneCache, ConvBlock};
pub use downsample::{check_rate, downsample_indices, downsample_video, downsampled_len};
pub use temporal::{TemporalCache, TemporalModule};

use crate::error::{Error, Result};
use crate::nn::conv::ImageShape;
use crate::nn::{join, Ctx, Mlp, Module, Param, Real};

/// Position-wise two-layer perceptron used for both the VL-Adapter and
/// the LLM-Adapter.
pub type Adapter<S> = Mlp<S>;

pub fn build_adapter<S: Real, R: Rng + ?Sized>(rng: &mut R, d_in: usize, hidden: usize, d_out: usize) -> Adapter<S> {
    Mlp::new(rng, d_in, hidden, d_out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    FrameWise,
    SignWise,
    Textual,
    Hidden,
}

/// Length-tagged feature matrix; rows at or beyond `length` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<S = f32> {
    pub values: Array2<S>,
    pub length: usize,
    pub tap: Tap,
}

impl<S: Real> FeatureSequence<S> {
    pub fn new(values: Array2<S>, length: usize, tap: Tap) -> Result<Self> {
        if length > values.nrows() {
            return Err(Error::shape("feature sequence length", format!("<= {}", values.nrows()), length));
        }
        if values.rows().into_iter().skip(length).any(|r| r.iter().any(|v| *v != S::zero())) {
            return Err(Error::InvalidInput("feature rows beyond the valid length must be zero".into()));
        }
        Ok(FeatureSequence { values, length, tap })
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisualEncoderConfig {
    pub backbone_channels: Vec<usize>,
    pub feature_dim: usize,
    pub temporal_kernel: usize,
    pub downsample_rate: f64,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig {
            backbone_channels: vec![16, 32, 64, 128],
            feature_dim: 128,
            temporal_kernel: 5,
            downsample_rate: 0.25,
        }
    }
}

impl VisualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::config("visual.backbone_channels", "need at least one block, all widths positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("visual.feature_dim", "must be positive"));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::config("visual.temporal_kernel", format!("{} is not odd", self.temporal_kernel)));
        }
        check_rate(self.downsample_rate).map_err(|_| {
            Error::config("visual.downsample_rate", format!("{} is not in (0, 1]", self.downsample_rate))
        })
    }

    pub fn frame_dim(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&3)
    }
}

/// Output of a visual forward pass over a batch: packed frame-wise and
/// sign-wise features (equal lengths, since the temporal module preserves
/// length).
#[derive(Clone, Debug)]
pub struct VisualOutput<S> {
    pub frame_wise: Array2<S>,
    pub sign_wise: Array2<S>,
    pub lens: Vec<usize>,
}

pub struct VisualCache<S> {
    backbone: Option<BackboneCache<S>>,
    temporal: Option<TemporalCache<S>>,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder<S> {
    pub config: VisualEncoderConfig,
    pub backbone: Backbone<S>,
    pub temporal: TemporalModule<S>,
    backbone_frozen: bool,
    temporal_frozen: bool,
}

impl<S: Real> VisualEncoder<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: VisualEncoderConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(rng, &config.backbone_channels);
        let temporal = TemporalModule::new(rng, backbone.out_dim(), config.feature_dim, config.temporal_kernel);
        Ok(VisualEncoder {
            config,
            backbone,
            temporal,
            backbone_frozen: false,
            temporal_frozen: false,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn frame_dim(&self) -> usize {
        self.backbone.out_dim()
    }

    /// Freezing a part stops its gradients and switches its batch norms to
    /// running statistics, which then stay fixed.
    pub fn set_freeze(&mut self, backbone: bool, temporal: bool) {
        self.backbone_frozen = backbone;
        self.temporal_frozen = temporal;
        self.backbone.set_frozen(backbone);
        self.temporal.set_frozen(temporal);
    }

    pub fn frozen(&self) -> (bool, bool) {
        (self.backbone_frozen, self.temporal_frozen)
    }

    pub fn fully_frozen(&self) -> bool {
        self.backbone_frozen && self.temporal_frozen
    }

    /// Downsamples each video and packs all kept frames into backbone
    /// input rows.
    pub fn prepare(&self, videos: &[ArrayView4<f32>]) -> Result<(Array2<S>, ImageShape, Vec<usize>)> {
        let first = videos
            .first()
            .ok_or_else(|| Error::InvalidInput("visual encoder needs at least one video".into()))?;
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let mut lens = Vec::with_capacity(videos.len());
        let mut kept = Vec::new();
        for v in videos {
            if v.shape()[1] != h || v.shape()[2] != w || v.shape()[3] != 3 {
                return Err(Error::shape("video frame size", format!("{h}x{w}x3"), format!("{:?}", &v.shape()[1..])));
            }
            let idx = downsample_indices(v.shape()[0], self.config.downsample_rate)?;
            lens.push(idx.len());
            kept.push((v, idx));
        }
        let n: usize = lens.iter().sum();
        let mut rows = Array2::<S>::zeros((n * h * w, 3));
        let dst = rows.as_slice_mut().unwrap();
        let per = h * w * 3;
        let mut k = 0;
        for (v, idx) in kept {
            for &t in &idx {
                let frame = v.index_axis(ndarray::Axis(0), t);
                for (d, &s) in dst[k * per..(k + 1) * per].iter_mut().zip(frame.iter()) {
                    *d = S::lit(s as f64);
                }
                k += 1;
            }
        }
        Ok((rows, ImageShape { n, h, w }, lens))
    }

    /// Per-frame backbone features, one row per input frame.
    pub fn encode_frames(&mut self, frames: &Array2<S>, shape: ImageShape, ctx: &Ctx) -> Result<(Array2<S>, BackboneCache<S>)> {
        self.backbone.forward(&frames.view(), shape, ctx.train && !self.backbone_frozen)
    }

    pub fn forward(&mut self, videos: &[ArrayView4<f32>], ctx: &Ctx) -> Result<(VisualOutput<S>, VisualCache<S>)> {
        let (frames, shape, lens) = self.prepare(videos)?;
        let (frame_wise, bcache) = self.encode_frames(&frames, shape, ctx)?;
        let (sign_wise, tcache) = self
            .temporal
            .forward(&frame_wise.view(), &lens, ctx.train && !self.temporal_frozen)?;
        let backbone = (!self.backbone_frozen).then_some(bcache);
        let temporal = (!self.fully_frozen()).then_some(tcache);
        Ok((VisualOutput { frame_wise, sign_wise, lens }, VisualCache { backbone, temporal }))
    }

    /// Accumulates gradients into the unfrozen parts from gradients on the
    /// sign-wise and/or frame-wise outputs.
    pub fn backward(&mut self, cache: VisualCache<S>, d_sign: Option<&Array2<S>>, d_frame: Option<&Array2<S>>) {
        let mut d_fw = d_frame.cloned();
        if let (Some(tc), Some(ds)) = (cache.temporal, d_sign) {
            let need_dx = !self.backbone_frozen;
            if let Some(dx) = self.temporal.backward(tc, &ds.view(), need_dx) {
                d_fw = Some(match d_fw {
                    Some(d) => d + &dx,
                    None => dx,
                });
            }
        }
        if let (Some(bc), Some(d)) = (cache.backbone, d_fw) {
            self.backbone.backward(bc, &d.view(), false);
        }
    }
}

impl<S: Real> Module<S> for VisualEncoder<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.temporal.visit(&join(prefix, "temporal"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.temporal.visit_mut(&join(prefix, "temporal"), f);
    }
}

/// Inference-mode sign-wise features of a single `(T, H, W, 3)` video.
pub fn visual_forward<S: Real>(encoder: &mut VisualEncoder<S>, video: &ArrayView4<f32>) -> Result<FeatureSequence<S>> {
    let (out, _) = encoder.forward(std::slice::from_ref(video), &Ctx::eval())?;
    let n = out.lens[0];
    FeatureSequence::new(out.sign_wise, n, Tap::SignWise)
}

/// Applies the VL-Adapter to sign-wise features.
pub fn vl_adapter<S: Real>(adapter: &Adapter<S>, f: &FeatureSequence<S>) -> Result<FeatureSequence<S>> {
    if f.tap != Tap::SignWise {
        return Err(Error::InvalidInput(format!("VL-Adapter expects sign-wise features, got {:?}", f.tap)));
    }
    let mut g = adapter.infer(&f.values.view())?;
    for mut r in g.rows_mut().into_iter().skip(f.length) {
        r.fill(S::zero());
    }
    FeatureSequence::new(g, f.length, Tap::Textual)
}
