//! The composed translation model shared by both stages and the joint
//! baseline: visual encoder, an adapter into textual space, and an
//! encoder-decoder translator (Light-T or the pretrained backend).

use std::collections::HashMap;

use ndarray::{Array2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{SignVideo, Vocabulary};
use crate::error::{Error, Result};
use crate::llm_stage::FeatureTap;
use crate::nn::{join, smoothed_ce_with_logits, Ctx, MlpCache, Module, Param, Real};
use crate::transformer::{teacher_forcing, EncoderCache, Padded, Seq2SeqTransformer};
use crate::visual::{Adapter, VisualCache, VisualEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorKind {
    LightT,
    Backend,
}

impl TranslatorKind {
    /// Checkpoint component name of the translator group.
    pub fn component(self) -> &'static str {
        match self {
            TranslatorKind::LightT => "light_t",
            TranslatorKind::Backend => "backend",
        }
    }
}

/// Stage-1 VL-Adapter and Light-T carried into stage 2, frozen, to
/// produce hidden-state features.
#[derive(Clone, Debug)]
pub struct Retained<S> {
    pub adapter: Adapter<S>,
    pub light_t: Seq2SeqTransformer<S>,
}

impl<S: Real> Retained<S> {
    pub fn new(mut adapter: Adapter<S>, mut light_t: Seq2SeqTransformer<S>) -> Self {
        adapter.set_frozen(true);
        light_t.set_frozen(true);
        Retained { adapter, light_t }
    }
}

impl<S: Real> Module<S> for Retained<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.adapter.visit(&join(prefix, "adapter"), f);
        self.light_t.visit(&join(prefix, "light_t"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
        self.light_t.visit_mut(&join(prefix, "light_t"), f);
    }
}

#[derive(Clone, Debug)]
pub struct SltModel<S> {
    pub visual: VisualEncoder<S>,
    pub adapter: Adapter<S>,
    pub translator: Seq2SeqTransformer<S>,
    pub kind: TranslatorKind,
    pub retained: Option<Retained<S>>,
    pub tap: FeatureTap,
    pub vocab: Vocabulary,
}

pub struct ExtractCache<S> {
    visual: VisualCache<S>,
    lens: Vec<usize>,
    retained: Option<(MlpCache<S>, EncoderCache<S>, usize)>,
}

impl<S: Real> SltModel<S> {
    pub fn new(
        visual: VisualEncoder<S>,
        adapter: Adapter<S>,
        translator: Seq2SeqTransformer<S>,
        kind: TranslatorKind,
        retained: Option<Retained<S>>,
        tap: FeatureTap,
        vocab: Vocabulary,
    ) -> Result<Self> {
        let m = SltModel {
            visual,
            adapter,
            translator,
            kind,
            retained,
            tap,
            vocab,
        };
        m.validate()?;
        Ok(m)
    }

    /// Width of the features the adapter consumes under the current tap.
    pub fn tap_width(&self) -> Result<usize> {
        Ok(match self.tap {
            FeatureTap::FrameWise => self.visual.frame_dim(),
            FeatureTap::SignWise => self.visual.feature_dim(),
            FeatureTap::HiddenStates => self
                .retained
                .as_ref()
                .ok_or_else(|| Error::config("tap", "hidden_states requires a retained stage-1 Light-T encoder"))?
                .light_t
                .hidden(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.tap_width()?;
        if self.adapter.d_in() != w {
            return Err(Error::shape("adapter input width", w, self.adapter.d_in()));
        }
        if self.adapter.d_out() != self.translator.hidden() {
            return Err(Error::shape("adapter output width", self.translator.hidden(), self.adapter.d_out()));
        }
        if self.translator.vocab_size() != self.vocab.len() {
            return Err(Error::shape("translator vocabulary", self.vocab.len(), self.translator.vocab_size()));
        }
        if let Some(r) = &self.retained {
            if r.adapter.d_in() != self.visual.feature_dim() || r.adapter.d_out() != r.light_t.hidden() {
                return Err(Error::config("retained", "stage-1 adapter does not fit the visual encoder / Light-T"));
            }
        }
        Ok(())
    }

    /// Whether gradients need to reach the visual encoder.
    pub fn visual_trainable(&self) -> bool {
        !self.visual.fully_frozen()
    }

    /// Tokenized `bos .. eos` targets of the samples.
    pub fn targets(&self, samples: &[&SignVideo]) -> Result<Vec<Vec<u32>>> {
        samples
            .iter()
            .map(|s| self.vocab.tokenize(&s.transcript).map(|t| t.ids))
            .collect()
    }

    /// Packed tap features for a batch of videos.
    pub fn extract(&mut self, videos: &[ArrayView4<f32>], ctx: &Ctx) -> Result<(Array2<S>, ExtractCache<S>)> {
        let (out, vc) = self.visual.forward(videos, ctx)?;
        let lens = out.lens;
        let (feats, retained) = match self.tap {
            FeatureTap::FrameWise => (out.frame_wise, None),
            FeatureTap::SignWise => (out.sign_wise, None),
            FeatureTap::HiddenStates => {
                let r = self
                    .retained
                    .as_ref()
                    .ok_or_else(|| Error::config("tap", "hidden_states requires a retained stage-1 Light-T encoder"))?;
                let (g, gc) = r.adapter.forward(&out.sign_wise.view())?;
                let g = Padded::from_packed(&g.view(), &lens);
                let (h, ec) = r.light_t.encode(&g, &mut Ctx::eval())?;
                (h.to_packed(), Some((gc, ec, g.max_len)))
            }
        };
        Ok((
            feats,
            ExtractCache {
                visual: vc,
                lens,
                retained,
            },
        ))
    }

    pub fn backward_extract(&mut self, cache: ExtractCache<S>, dfeats: &Array2<S>) {
        if !self.visual_trainable() {
            return;
        }
        match (self.tap, cache.retained) {
            (FeatureTap::FrameWise, _) => self.visual.backward(cache.visual, None, Some(dfeats)),
            (FeatureTap::HiddenStates, Some((gc, ec, max_len))) => {
                let r = self.retained.as_mut().expect("retained parts present");
                let dh = Padded::from_packed(&dfeats.view(), &cache.lens);
                debug_assert_eq!(dh.max_len, max_len);
                let dg = r.light_t.backward_encode(ec, &dh).to_packed();
                let ds = r.adapter.backward(gc, &dg.view(), true).expect("input gradient");
                self.visual.backward(cache.visual, Some(&ds), None);
            }
            _ => self.visual.backward(cache.visual, Some(dfeats), None),
        }
    }

    /// Teacher-forced label-smoothed loss from packed features. With
    /// `backward`, accumulates parameter gradients and returns the
    /// gradient on the features when `need_dfeats`.
    #[allow(clippy::too_many_arguments)]
    pub fn head(
        &mut self,
        feats: &Array2<S>,
        lens: &[usize],
        targets: &[Vec<u32>],
        label_smoothing: f64,
        ctx: &mut Ctx,
        backward: bool,
        need_dfeats: bool,
    ) -> Result<(f64, Option<Array2<S>>)> {
        if lens.len() != targets.len() {
            return Err(Error::shape("targets per batch", lens.len(), targets.len()));
        }
        let (e, ac) = self.adapter.forward(&feats.view())?;
        let e = Padded::from_packed(&e.view(), lens);
        let (mem, ec) = self.translator.encode(&e, ctx)?;
        let (dec_in, next, mask) = teacher_forcing(targets);
        let (logits, dc) = self.translator.decode(&dec_in, &mem, ctx)?;
        let (loss, dlogits) = smoothed_ce_with_logits(&logits.view(), &next, &mask, label_smoothing)?;
        if !backward {
            return Ok((loss, None));
        }
        let dmem = self.translator.backward_decode(dc, &dlogits);
        let dmem = Padded::new(dmem, mem.max_len, mem.lens.clone())?;
        let de = self.translator.backward_encode(ec, &dmem).to_packed();
        let df = self.adapter.backward(ac, &de.view(), need_dfeats);
        Ok((loss, df))
    }

    /// One forward/backward pass on a batch; gradients accumulate into the
    /// trainable parameters. Cached features are used when the visual
    /// encoder is frozen and `cache` covers the batch.
    pub fn train_step(
        &mut self,
        samples: &[&SignVideo],
        label_smoothing: f64,
        ctx: &mut Ctx,
        cache: Option<&FeatureCache<S>>,
    ) -> Result<f64> {
        let targets = self.targets(samples)?;
        if !self.visual_trainable() {
            if let Some((feats, lens)) = cache.and_then(|c| c.gather(samples)) {
                return Ok(self.head(&feats, &lens, &targets, label_smoothing, ctx, true, false)?.0);
            }
        }
        let frames: Vec<_> = samples.iter().map(|s| s.frames_f32()).collect();
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let (feats, xc) = self.extract(&views, ctx)?;
        let lens = xc.lens.clone();
        let need = self.visual_trainable();
        let (loss, df) = self.head(&feats, &lens, &targets, label_smoothing, ctx, true, need)?;
        if let Some(df) = df {
            self.backward_extract(xc, &df);
        }
        Ok(loss)
    }

    /// Inference-mode loss on a batch (no gradients).
    pub fn loss(&mut self, samples: &[&SignVideo], label_smoothing: f64, cache: Option<&FeatureCache<S>>) -> Result<f64> {
        let targets = self.targets(samples)?;
        let (feats, lens) = self.features(samples, cache)?;
        Ok(self
            .head(&feats, &lens, &targets, label_smoothing, &mut Ctx::eval(), false, false)?
            .0)
    }

    /// Inference-mode packed tap features and lengths.
    pub fn features(&mut self, samples: &[&SignVideo], cache: Option<&FeatureCache<S>>) -> Result<(Array2<S>, Vec<usize>)> {
        if let Some(hit) = cache.and_then(|c| c.gather(samples)) {
            return Ok(hit);
        }
        let frames: Vec<_> = samples.iter().map(|s| s.frames_f32()).collect();
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let (feats, xc) = self.extract(&views, &Ctx::eval())?;
        Ok((feats, xc.lens))
    }

    /// Encoder memories (one `(N, D)` matrix per sample) for decoding.
    pub fn memories(&mut self, samples: &[&SignVideo], cache: Option<&FeatureCache<S>>) -> Result<Vec<Array2<S>>> {
        let (feats, lens) = self.features(samples, cache)?;
        let e = self.adapter.infer(&feats.view())?;
        let e = Padded::from_packed(&e.view(), &lens);
        let (mem, _) = self.translator.encode(&e, &mut Ctx::eval())?;
        Ok((0..mem.batch()).map(|b| mem.item(b).to_owned()).collect())
    }
}

impl<S: Real> Module<S> for SltModel<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.visual.visit(&join(prefix, "visual"), f);
        self.adapter.visit(&join(prefix, "adapter"), f);
        self.translator.visit(&join(prefix, "translator"), f);
        if let Some(r) = &self.retained {
            r.visit(&join(prefix, "retained"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.visual.visit_mut(&join(prefix, "visual"), f);
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
        self.translator.visit_mut(&join(prefix, "translator"), f);
        if let Some(r) = &mut self.retained {
            r.visit_mut(&join(prefix, "retained"), f);
        }
    }
}

/// Tap features of a frozen visual path, keyed by sample id.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache<S> {
    map: HashMap<String, Array2<S>>,
}

impl<S: Real> FeatureCache<S> {
    pub fn build<'a>(
        model: &mut SltModel<S>,
        samples: impl IntoIterator<Item = &'a SignVideo>,
        chunk: usize,
    ) -> Result<Self> {
        if model.visual_trainable() {
            return Err(Error::InvalidInput("feature caching requires a fully frozen visual encoder".into()));
        }
        let all: Vec<&SignVideo> = samples.into_iter().collect();
        let mut map = HashMap::with_capacity(all.len());
        for part in all.chunks(chunk.max(1)) {
            let (feats, lens) = model.features(part, None)?;
            let mut off = 0;
            for (s, &n) in part.iter().zip(&lens) {
                map.insert(s.sample_id.clone(), feats.slice(ndarray::s![off..off + n, ..]).to_owned());
                off += n;
            }
        }
        Ok(FeatureCache { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Packed features and lengths, or `None` if any sample is missing.
    pub fn gather(&self, samples: &[&SignVideo]) -> Option<(Array2<S>, Vec<usize>)> {
        let parts: Option<Vec<&Array2<S>>> = samples.iter().map(|s| self.map.get(&s.sample_id)).collect();
        let parts = parts?;
        let lens = parts.iter().map(|p| p.nrows()).collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Some((ndarray::concatenate(Axis(0), &views).ok()?, lens))
    }
}
