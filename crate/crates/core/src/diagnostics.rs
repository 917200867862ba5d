//! Per-layer gradient and parameter norm tracing, and the dominance report
//! comparing the backend's last block with the visual encoder's.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub step: u64,
    pub layer_id: String,
    pub grad_norm: f64,
    pub param_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    pub watched_layers: Vec<String>,
    pub records: Vec<NormRecord>,
}

/// Handle returned by [`watch`]; records norms of its selectors until
/// detached.
#[derive(Clone, Debug)]
pub struct Watch {
    attached: bool,
    pub trace: NormTrace,
}

fn selects(selector: &str, name: &str) -> bool {
    name == selector || name.strip_prefix(selector).is_some_and(|r| r.starts_with('.'))
}

/// Watches parameter groups named by dotted prefixes, e.g.
/// `visual.temporal.conv` or `translator.decoder.layers.3`.
pub fn watch<S: Real, M: Module<S> + ?Sized>(model: &M, selectors: &[&str]) -> Result<Watch> {
    for sel in selectors {
        let mut found = false;
        model.visit("", &mut |name, _| found |= selects(sel, name));
        if !found {
            return Err(Error::InvalidInput(format!("selector `{sel}` matches no parameter")));
        }
    }
    Ok(Watch {
        attached: true,
        trace: NormTrace {
            watched_layers: selectors.iter().map(|s| s.to_string()).collect(),
            records: Vec::new(),
        },
    })
}

/// L2 norms of the gradient and value over all tensors under `selector`;
/// the gradient norm is `None` when no tensor has a gradient buffer.
pub fn group_norms<S: Real, M: Module<S> + ?Sized>(model: &M, selector: &str) -> (Option<f64>, f64) {
    let (mut g2, mut p2, mut any) = (0.0, 0.0, false);
    model.visit("", &mut |name, p| {
        if !selects(selector, name) || p.buffer {
            return;
        }
        p2 += p.value.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        if let Some(g) = &p.grad {
            any = true;
            g2 += g.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        }
    });
    (any.then(|| g2.sqrt()), p2.sqrt())
}

impl Watch {
    pub fn detach(&mut self) {
        self.attached = false;
    }

    pub fn is_attached(&self) -> bool {
        self.attached
    }

    /// Appends one record per watched layer; a no-op once detached.
    pub fn record_step<S: Real, M: Module<S> + ?Sized>(&mut self, model: &M, step: u64) -> Result<()> {
        if !self.attached {
            return Ok(());
        }
        let mut rows = Vec::with_capacity(self.trace.watched_layers.len());
        for layer in &self.trace.watched_layers {
            let (g, p) = group_norms(model, layer);
            let g = g.ok_or_else(|| {
                Error::InvalidInput(format!("no gradients for `{layer}` at step {step}; record after the backward pass"))
            })?;
            rows.push(NormRecord {
                step,
                layer_id: layer.clone(),
                grad_norm: g,
                param_norm: p,
            });
        }
        self.trace.records.extend(rows);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub encoder_layer: String,
    pub backend_layer: String,
    pub steps: usize,
    /// Share of steps where the backend gradient norm strictly exceeds the
    /// encoder's.
    pub fraction_backend_exceeds: f64,
    /// Mean of backend / encoder gradient norm over steps with a nonzero
    /// encoder norm.
    pub mean_norm_ratio: f64,
    /// Parameter-norm change since the first record, per layer and step.
    pub drift: BTreeMap<String, Vec<(u64, f64)>>,
}

fn series<'a>(trace: &'a NormTrace, layer: &str) -> BTreeMap<u64, &'a NormRecord> {
    trace.records.iter().filter(|r| r.layer_id == layer).map(|r| (r.step, r)).collect()
}

pub fn dominance_report(trace: &NormTrace, encoder_layer: &str, backend_layer: &str) -> Result<DominanceReport> {
    if trace.records.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let enc = series(trace, encoder_layer);
    let dec = series(trace, backend_layer);
    for (name, s) in [(encoder_layer, &enc), (backend_layer, &dec)] {
        if s.is_empty() {
            return Err(Error::InvalidInput(format!("layer `{name}` not present in trace")));
        }
    }
    let mut steps = 0usize;
    let mut exceed = 0usize;
    let (mut ratio_sum, mut ratio_n) = (0.0, 0usize);
    for (step, e) in &enc {
        let Some(d) = dec.get(step) else { continue };
        steps += 1;
        if d.grad_norm > e.grad_norm {
            exceed += 1;
        }
        if e.grad_norm > 0.0 {
            ratio_sum += d.grad_norm / e.grad_norm;
            ratio_n += 1;
        }
    }
    if steps == 0 {
        return Err(Error::InvalidInput("the two layers share no recorded step".into()));
    }
    let mut drift = BTreeMap::new();
    for (name, s) in [(encoder_layer, &enc), (backend_layer, &dec)] {
        let p0 = s.values().next().map(|r| r.param_norm).unwrap_or(0.0);
        drift.insert(name.to_string(), s.values().map(|r| (r.step, r.param_norm - p0)).collect());
    }
    Ok(DominanceReport {
        encoder_layer: encoder_layer.to_string(),
        backend_layer: backend_layer.to_string(),
        steps,
        fraction_backend_exceeds: exceed as f64 / steps as f64,
        mean_norm_ratio: if ratio_n == 0 { f64::NAN } else { ratio_sum / ratio_n as f64 },
        drift,
    })
}

pub const TRACE_HEADER: &str = "step,layer_id,grad_norm,param_norm";

/// Writes `step,layer_id,grad_norm,param_norm` rows; floats use the
/// shortest representation that parses back to the same value.
pub fn export_trace(trace: &NormTrace, path: &Path) -> Result<()> {
    let mut s = String::with_capacity(32 * trace.records.len() + 40);
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in &trace.records {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.layer_id, r.grad_norm, r.param_norm));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn import_trace(path: &Path) -> Result<NormTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::InvalidInput(format!("{}: expected header `{TRACE_HEADER}`", path.display())));
    }
    let mut trace = NormTrace::default();
    for (i, line) in lines.enumerate() {
        let bad = || Error::InvalidInput(format!("{}: malformed row {}", path.display(), i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let rec = NormRecord {
            step: f[0].parse().map_err(|_| bad())?,
            layer_id: f[1].to_string(),
            grad_norm: f[2].parse().map_err(|_| bad())?,
            param_norm: f[3].parse().map_err(|_| bad())?,
        };
        if !trace.watched_layers.contains(&rec.layer_id) {
            trace.watched_layers.push(rec.layer_id.clone());
        }
        trace.records.push(rec);
    }
    Ok(trace)
}

const COLORS: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

fn draw_line(img: &mut image::RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Two stacked panels (gradient norm on top, parameter norm below) with one
/// colored polyline per layer. `smoothing` in `[0, 1)` applies an
/// exponential moving average before plotting.
pub fn plot_trace(trace: &NormTrace, path: &Path, smoothing: f64) -> Result<()> {
    let (w, panel, pad) = (800u32, 300u32, 20u32);
    let mut img = image::RgbImage::from_pixel(w, 2 * panel, image::Rgb([255, 255, 255]));
    let steps: Vec<u64> = trace.records.iter().map(|r| r.step).collect();
    let (smin, smax) = (
        steps.iter().copied().min().unwrap_or(0) as f64,
        steps.iter().copied().max().unwrap_or(1) as f64,
    );
    for (p, pick) in [(0u32, 0usize), (1, 1)] {
        let top = p * panel;
        for x in pad..w - pad {
            img.put_pixel(x, top + panel - pad, image::Rgb([0, 0, 0]));
        }
        for y in top + pad..top + panel - pad {
            img.put_pixel(pad, y, image::Rgb([0, 0, 0]));
        }
        let mut lines: Vec<Vec<(f64, f64)>> = Vec::new();
        for layer in &trace.watched_layers {
            let mut ema: Option<f64> = None;
            let pts = trace
                .records
                .iter()
                .filter(|r| &r.layer_id == layer)
                .map(|r| {
                    let v = if pick == 0 { r.grad_norm } else { r.param_norm };
                    let s = ema.map_or(v, |e| smoothing * e + (1.0 - smoothing) * v);
                    ema = Some(s);
                    (r.step as f64, s)
                })
                .collect();
            lines.push(pts);
        }
        let vmax = lines.iter().flatten().map(|p| p.1).fold(0.0f64, f64::max).max(1e-12);
        let sx = |s: f64| pad as f64 + (s - smin) / (smax - smin).max(1.0) * (w - 2 * pad) as f64;
        let sy = |v: f64| (top + panel - pad) as f64 - v / vmax * (panel - 2 * pad) as f64;
        for (i, pts) in lines.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            for seg in pts.windows(2) {
                draw_line(
                    &mut img,
                    (sx(seg[0].0) as i64, sy(seg[0].1) as i64),
                    (sx(seg[1].0) as i64, sy(seg[1].1) as i64),
                    c,
                );
            }
            if pts.len() == 1 {
                let (x, y) = (sx(pts[0].0) as i64, sy(pts[0].1) as i64);
                draw_line(&mut img, (x, y), (x, y), c);
            }
        }
    }
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}
