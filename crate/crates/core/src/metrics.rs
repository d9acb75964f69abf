//! Reconstruction quality metrics.

use crate::error::{Error, Result};
use crate::image::Image;

/// Amplitude-ratio SNR in decibels: `20 log10(|gt| / |rec - gt|)`.
///
/// Returns `f64::INFINITY` as the documented sentinel when `rec == gt`
/// exactly. Rejects an all-zero ground truth.
pub fn snr_db(rec: &Image, gt: &Image) -> Result<f64> {
    if !rec.same_dims(gt) {
        return Err(Error::DimensionMismatch(format!(
            "snr: {}x{} vs {}x{}",
            rec.width(),
            rec.height(),
            gt.width(),
            gt.height()
        )));
    }
    snr_db_slices(rec.values(), gt.values())
}

/// Slice form of [`snr_db`], usable on sinogram data as well.
pub fn snr_db_slices(rec: &[f64], gt: &[f64]) -> Result<f64> {
    if rec.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!("snr: {} vs {} values", rec.len(), gt.len())));
    }
    let signal: f64 = gt.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(Error::InvalidInput("snr: ground truth is all zero".into()));
    }
    let err: f64 = rec.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / err).log10())
}
