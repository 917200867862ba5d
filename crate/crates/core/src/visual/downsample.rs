use ndarray::{Array4, ArrayView4, Axis};

use crate::error::{Error, Result};

pub fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config("downsample_rate", format!("{rate} is not in (0, 1]")));
    }
    Ok(())
}

/// `ceil(rate * t)`, guarded against float noise such as `0.1 * 30`.
pub fn downsampled_len(t: usize, rate: f64) -> usize {
    let x = rate * t as f64;
    let r = x.round();
    let n = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (n as usize).max(1)
}

/// Kept frame indices `round(i / rate)` clamped to `t - 1`.
///
/// For rates that are not reciprocals of integers the last two indices can
/// round onto the same frame; index `i` is therefore also capped at
/// `t - n + i`, which never binds for reciprocal-integer rates.
pub fn downsample_indices(t: usize, rate: f64) -> Result<Vec<usize>> {
    check_rate(rate)?;
    if t == 0 {
        return Err(Error::InvalidInput("cannot downsample an empty video".into()));
    }
    let n = downsampled_len(t, rate);
    Ok((0..n)
        .map(|i| ((i as f64 / rate).round() as usize).min(t - n + i))
        .collect())
}

/// Uniform-stride frame selection over the leading axis.
pub fn downsample_video<T: Clone>(frames: &ArrayView4<T>, rate: f64) -> Result<Array4<T>> {
    let idx = downsample_indices(frames.shape()[0], rate)?;
    Ok(frames.select(Axis(0), &idx))
}
