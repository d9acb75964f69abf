//! Steepest descent on the normal equations: the conventional baseline, and
//! the update rule behind the residual back projection connection.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::snr_db;
use crate::projection::{back_project, forward_project, normal_op, ParallelGeometry, Sinogram};
use crate::recon::{IterRecord, ReconRun};

pub const DEFAULT_MAX_ITERS: usize = 5000;
pub const DEFAULT_STOP_TOL: f64 = 1e-6;

/// Solver state: the invariant is that `r` is exactly the normal-equation
/// residual `A^T g - A^T A c` of the stored estimate.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub c: Image,
    pub r: Image,
    pub iteration: usize,
}

/// Outcome of the exact line search for the normal equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Step(f64),
    /// `r = 0`: the estimate already reproduces the measurement.
    Converged,
    /// `<r, A^T A r> = 0` with `r != 0`: the residual lies in the null space
    /// of A and no descent step exists along it.
    NullSpace,
}

/// `r = A^T g - A^T A c`, with `A^T g` precomputed by the caller. Written as
/// a single elementwise pass so every solver produces bit-identical residuals.
pub fn normal_residual(atg: &Image, c: &Image, geom: &ParallelGeometry) -> Result<Image> {
    let mut q = normal_op(c, geom)?;
    for (qi, bi) in q.values_mut().iter_mut().zip(atg.values()) {
        *qi = *bi - *qi;
    }
    Ok(q)
}

/// Exact line-search step `alpha = <r,r> / <r, A^T A r>` against an arbitrary
/// normal operator. The projector-backed version is [`sd_step_size`].
pub fn sd_step_size_with(
    r: &Image,
    normal: impl FnOnce(&Image) -> Result<Image>,
) -> Result<StepSize> {
    let num = r.dot(r);
    if num == 0.0 {
        return Ok(StepSize::Converged);
    }
    let den = r.dot(&normal(r)?);
    if den == 0.0 {
        return Ok(StepSize::NullSpace);
    }
    Ok(StepSize::Step(num / den))
}

/// Exact line-search step for the parallel-beam normal equations.
pub fn sd_step_size(r: &Image, geom: &ParallelGeometry) -> Result<StepSize> {
    sd_step_size_with(r, |x| normal_op(x, geom))
}

/// Plain steepest-descent reconstruction from zero init.
///
/// Stops at `max_iters` or when `|r| / |A^T g| <= stop_tol`. The returned
/// history logs the residual norm and step size per iteration.
pub fn mbir_reconstruct(
    sino: &Sinogram,
    geom: &ParallelGeometry,
    max_iters: usize,
    stop_tol: f64,
) -> Result<(Image, ReconRun)> {
    mbir_reconstruct_tracked(sino, geom, max_iters, stop_tol, None)
}

/// [`mbir_reconstruct`] with optional per-iteration SNR logging against a
/// ground truth. The ground truth never influences the iterates.
pub fn mbir_reconstruct_tracked(
    sino: &Sinogram,
    geom: &ParallelGeometry,
    max_iters: usize,
    stop_tol: f64,
    ground_truth: Option<&Image>,
) -> Result<(Image, ReconRun)> {
    if sino.values().is_empty() {
        return Err(Error::InvalidInput("empty sinogram".into()));
    }
    if sino.geometry() != geom {
        return Err(Error::DimensionMismatch("sinogram geometry differs from solver geometry".into()));
    }
    if max_iters < 1 {
        return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
    }
    if !(stop_tol >= 0.0) {
        return Err(Error::InvalidConfig("stop_tol must be >= 0".into()));
    }

    let atg = back_project(sino);
    let atg_norm = atg.norm_l2();
    let mut state = SolverState {
        c: Image::zeros(geom.image_width(), geom.image_height()),
        r: atg.clone(),
        iteration: 0,
    };
    // Logged loss is the data-fidelity residual |g - A c|: exact line search
    // decreases it monotonically. The normal-equation residual norm |r| (the
    // gradient norm) drives the stopping rule but is not monotone.
    let mut data_norm = sino.norm_l2();
    let mut records = Vec::new();

    for k in 0..max_iters {
        let r_norm = state.r.norm_l2();
        let mut record = IterRecord::new(k, data_norm);
        record.snr_db = ground_truth.map(|gt| snr_db(&state.c, gt).unwrap_or(f64::INFINITY));

        let rel = if atg_norm > 0.0 { r_norm / atg_norm } else { 0.0 };
        if rel <= stop_tol {
            records.push(record);
            break;
        }
        match sd_step_size(&state.r, geom)? {
            StepSize::Converged => {
                records.push(record);
                break;
            }
            StepSize::NullSpace => {
                record.null_space = true;
                records.push(record);
                break;
            }
            StepSize::Step(alpha) => {
                record.alpha = Some(alpha);
                records.push(record);
                state.c.axpy(alpha, &state.r);
                // r = A^T g - A^T A c, computed via the same composition the
                // network loop's residual op uses (bit-identical residuals).
                let ac = forward_project(&state.c, geom)?;
                data_norm = ac
                    .values()
                    .iter()
                    .zip(sino.values())
                    .map(|(p, g)| (g - p) * (g - p))
                    .sum::<f64>()
                    .sqrt();
                let mut r = back_project(&ac);
                for (ri, bi) in r.values_mut().iter_mut().zip(atg.values()) {
                    *ri = *bi - *ri;
                }
                state.r = r;
                state.iteration = k + 1;
            }
        }
    }

    let run = ReconRun { records, snapshots: Vec::new(), final_image: state.c.clone() };
    Ok((state.c, run))
}
