//! Matrix-free parallel-beam projector, its exact adjoint, and spectral
//! diagnostics.
//!
//! The forward operator is a ray-driven line integral with linear
//! interpolation across the axis perpendicular to the driving axis
//! (Joseph-style). The adjoint scatters the *same* interpolation weights,
//! so the pair is an exact matrix transpose: the steepest-descent step
//! size used by the solvers is only exact for a matched pair.
//!
//! Conventions:
//! - pixel `(col, row)` has center `(col - (W-1)/2, row - (H-1)/2)`;
//! - a projection angle `theta in [0, pi)` measures ray *normal* direction
//!   `(cos t, sin t)`; rays run along `(-sin t, cos t)`;
//! - detector bin `k` sits at offset `(k - (d-1)/2) * spacing` along the
//!   normal, so the detector array is centered on the image center.

use crate::error::{Error, Result};
use crate::image::Image;
use num_complex::Complex64;

/// Angle set and detector layout that together define the system matrix A.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelGeometry {
    angles: Vec<f64>,
    detector_count: usize,
    detector_spacing: f64,
    image_width: usize,
    image_height: usize,
}

impl ParallelGeometry {
    pub fn new(
        angles: Vec<f64>,
        detector_count: usize,
        detector_spacing: f64,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::InvalidConfig("geometry needs at least one angle".into()));
        }
        for pair in angles.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidConfig("angles must be strictly increasing".into()));
            }
        }
        if angles[0] < 0.0 || *angles.last().unwrap() >= std::f64::consts::PI {
            return Err(Error::InvalidConfig("angles must lie in [0, pi)".into()));
        }
        if detector_count == 0 {
            return Err(Error::InvalidConfig("detector_count must be positive".into()));
        }
        if !(detector_spacing > 0.0) {
            return Err(Error::InvalidConfig("detector_spacing must be > 0".into()));
        }
        if image_width == 0 || image_height == 0 {
            return Err(Error::InvalidConfig("image dimensions must be positive".into()));
        }
        Ok(Self { angles, detector_count, detector_spacing, image_width, image_height })
    }

    /// `views` angles uniformly spaced over `[0, span_deg)` degrees, with the
    /// default detector layout. `span_deg = 180` gives the classic half-open
    /// full-view set; smaller spans give limited-angle geometries.
    pub fn uniform(views: usize, span_deg: f64, width: usize, height: usize) -> Result<Self> {
        if views == 0 {
            return Err(Error::InvalidConfig("views must be >= 1".into()));
        }
        if !(span_deg > 0.0 && span_deg <= 180.0) {
            return Err(Error::InvalidConfig("span_deg must be in (0, 180]".into()));
        }
        let step = span_deg.to_radians() / views as f64;
        let angles = (0..views).map(|k| k as f64 * step).collect();
        Self::new(angles, Self::default_detector_count(width, height), 1.0, width, height)
    }

    /// [`ParallelGeometry::uniform`] with an explicit detector spacing; the
    /// detector count scales to keep the same field of view. Spacing below 1
    /// pixel oversamples the interpolated rays, which conditions the normal
    /// equations much better than the unit default.
    pub fn uniform_spaced(
        views: usize,
        span_deg: f64,
        width: usize,
        height: usize,
        spacing: f64,
    ) -> Result<Self> {
        if views == 0 {
            return Err(Error::InvalidConfig("views must be >= 1".into()));
        }
        if !(span_deg > 0.0 && span_deg <= 180.0) {
            return Err(Error::InvalidConfig("span_deg must be in (0, 180]".into()));
        }
        if !(spacing > 0.0) {
            return Err(Error::InvalidConfig("detector_spacing must be > 0".into()));
        }
        let step = span_deg.to_radians() / views as f64;
        let angles = (0..views).map(|k| k as f64 * step).collect();
        let count =
            (std::f64::consts::SQRT_2 * width.max(height) as f64 / spacing).ceil() as usize;
        Self::new(angles, count, spacing, width, height)
    }

    /// Smallest detector count that covers the whole image at every angle:
    /// `ceil(sqrt(2) * max(W, H))`.
    pub fn default_detector_count(width: usize, height: usize) -> usize {
        (std::f64::consts::SQRT_2 * width.max(height) as f64).ceil() as usize
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn detector_count(&self) -> usize {
        self.detector_count
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    /// Signed offset of detector bin `k` from the rotation center.
    #[inline]
    pub fn detector_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.detector_count as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    pub fn sinogram_len(&self) -> usize {
        self.angles.len() * self.detector_count
    }

    pub fn matches_image(&self, image: &Image) -> bool {
        image.width() == self.image_width && image.height() == self.image_height
    }
}

/// One row of line-integral measurements per projection angle.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    geometry: ParallelGeometry,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(geometry: ParallelGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.sinogram_len() {
            return Err(Error::DimensionMismatch(format!(
                "sinogram has {} values, geometry expects {} angles x {} detectors = {}",
                values.len(),
                geometry.n_angles(),
                geometry.detector_count(),
                geometry.sinogram_len()
            )));
        }
        Ok(Self { geometry, values })
    }

    pub fn zeros(geometry: ParallelGeometry) -> Self {
        let len = geometry.sinogram_len();
        Self { geometry, values: vec![0.0; len] }
    }

    pub fn geometry(&self) -> &ParallelGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, angle_idx: usize, detector_idx: usize) -> f64 {
        self.values[angle_idx * self.geometry.detector_count() + detector_idx]
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// One driving slab of one projection angle: the detector coordinate is
/// affine in the detector index, `u(k) = base + k * du`, where `u` is the
/// continuous pixel coordinate along the interpolation axis. Both the
/// forward gather and the adjoint scatter enumerate taps through this one
/// struct, which is what makes the pair an exact transpose.
struct Slab {
    base: f64,
    du: f64,
    /// Detector indices whose `u` allows both interpolation taps.
    k_full: std::ops::Range<usize>,
    /// Detector indices with any in-bounds tap (superset of `k_full`).
    k_any: std::ops::Range<usize>,
    /// Flat index of pixel 0 of this slab.
    pix_base: usize,
    /// Flat stride between adjacent pixels along the interpolation axis.
    pix_stride: usize,
    /// Pixels along the interpolation axis (W when row-driven, else H).
    extent: usize,
    /// Path length through one slab of the driving axis.
    step_len: f64,
}

/// Per-angle state for slab enumeration.
struct AngleDrive {
    sin: f64,
    cos: f64,
    row_driven: bool,
    step_len: f64,
    inv: f64,
    /// Offset of detector 0.
    t0: f64,
}

impl AngleDrive {
    fn new(geom: &ParallelGeometry, theta: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        let row_driven = cos.abs() >= sin.abs();
        let inv = 1.0 / if row_driven { cos } else { sin };
        let step_len = inv.abs();
        let t0 = -(geom.detector_count as f64 - 1.0) / 2.0 * geom.detector_spacing;
        Self { sin, cos, row_driven, step_len, inv, t0 }
    }

    /// Slab `m` is image row `m` when row-driven, else image column `m`.
    fn slab_count(&self, geom: &ParallelGeometry) -> usize {
        if self.row_driven {
            geom.image_height
        } else {
            geom.image_width
        }
    }

    fn slab(&self, geom: &ParallelGeometry, m: usize) -> Slab {
        let w = geom.image_width;
        let h = geom.image_height;
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let (base, extent, pix_base, pix_stride) = if self.row_driven {
            // x = (t - y sin) / cos  ->  u = base + k * du
            let y = m as f64 - cy;
            ((self.t0 - y * self.sin) * self.inv + cx, w, m * w, 1)
        } else {
            let x = m as f64 - cx;
            ((self.t0 - x * self.cos) * self.inv + cy, h, m, w)
        };
        let du = geom.detector_spacing * self.inv;
        let d = geom.detector_count;

        // Solve u in (-1, extent) for k, then nudge for rounding.
        let limit = (extent - 1) as f64;
        let (mut lo, mut hi) = {
            let a = (-1.0 - base) / du;
            let b = (extent as f64 - base) / du;
            (a.min(b), a.max(b))
        };
        lo = lo.max(0.0);
        hi = hi.min(d as f64);
        let mut k_any = (lo.floor().max(0.0) as usize).min(d)..(hi.ceil().max(0.0) as usize).min(d);
        let u_at = |k: usize| base + k as f64 * du;
        while k_any.start < k_any.end && u_at(k_any.start) <= -1.0 {
            k_any.start += 1;
        }
        while k_any.end > k_any.start && u_at(k_any.end - 1) <= -1.0 {
            k_any.end -= 1;
        }
        while k_any.start < k_any.end && u_at(k_any.start) >= extent as f64 {
            k_any.start += 1;
        }
        while k_any.end > k_any.start && u_at(k_any.end - 1) >= extent as f64 {
            k_any.end -= 1;
        }
        // Shrink to the both-taps-in-bounds core: u in [0, extent-1).
        let mut k_full = k_any.clone();
        while k_full.start < k_full.end {
            let u = u_at(k_full.start);
            if u >= 0.0 && u < limit {
                break;
            }
            k_full.start += 1;
        }
        while k_full.end > k_full.start {
            let u = u_at(k_full.end - 1);
            if u >= 0.0 && u < limit {
                break;
            }
            k_full.end -= 1;
        }
        Slab { base, du, k_full, k_any, pix_base, pix_stride, extent, step_len: self.step_len }
    }
}

/// g = A c: discretized line integral for every (angle, detector) pair.
pub fn forward_project(image: &Image, geom: &ParallelGeometry) -> Result<Sinogram> {
    if !geom.matches_image(image) {
        return Err(Error::DimensionMismatch(format!(
            "image is {}x{}, geometry expects {}x{}",
            image.width(),
            image.height(),
            geom.image_width,
            geom.image_height
        )));
    }
    let pixels = image.values();
    let mut values = vec![0.0; geom.sinogram_len()];
    for (a, &theta) in geom.angles.iter().enumerate() {
        let drive = AngleDrive::new(geom, theta);
        let sino_row = &mut values[a * geom.detector_count..(a + 1) * geom.detector_count];
        for m in 0..drive.slab_count(geom) {
            let s = drive.slab(geom, m);
            // Edge detectors with one tap out of bounds.
            for k in s.k_any.start..s.k_full.start {
                sino_row[k] += edge_gather(pixels, &s, k);
            }
            for k in s.k_full.end..s.k_any.end {
                sino_row[k] += edge_gather(pixels, &s, k);
            }
            for k in s.k_full.clone() {
                let u = s.base + k as f64 * s.du;
                let i = u as usize;
                let frac = u - i as f64;
                let p = s.pix_base + i * s.pix_stride;
                sino_row[k] +=
                    ((1.0 - frac) * pixels[p] + frac * pixels[p + s.pix_stride]) * s.step_len;
            }
        }
    }
    Sinogram::new(geom.clone(), values)
}

/// A^T g: scatter of the forward interpolation weights. Exact transpose of
/// [`forward_project`] by construction.
pub fn back_project(sino: &Sinogram) -> Image {
    let geom = &sino.geometry;
    let mut out = Image::zeros(geom.image_width, geom.image_height);
    let pixels = out.values_mut();
    for (a, &theta) in geom.angles.iter().enumerate() {
        let drive = AngleDrive::new(geom, theta);
        let sino_row = &sino.values[a * geom.detector_count..(a + 1) * geom.detector_count];
        for m in 0..drive.slab_count(geom) {
            let s = drive.slab(geom, m);
            for k in s.k_any.start..s.k_full.start {
                edge_scatter(pixels, &s, k, sino_row[k]);
            }
            for k in s.k_full.end..s.k_any.end {
                edge_scatter(pixels, &s, k, sino_row[k]);
            }
            for k in s.k_full.clone() {
                let u = s.base + k as f64 * s.du;
                let i = u as usize;
                let frac = u - i as f64;
                let p = s.pix_base + i * s.pix_stride;
                let v = sino_row[k];
                pixels[p] += (1.0 - frac) * s.step_len * v;
                pixels[p + s.pix_stride] += frac * s.step_len * v;
            }
        }
    }
    out
}

/// Taps for detectors whose interpolation pair straddles the slab edge;
/// same weight formula as the core loop, with per-tap bounds checks.
#[inline]
fn edge_taps(s: &Slab, k: usize) -> [(usize, f64); 2] {
    let u = s.base + k as f64 * s.du;
    let i0 = u.floor();
    let frac = u - i0;
    let i0 = i0 as isize;
    let mut taps = [(usize::MAX, 0.0); 2];
    if i0 >= 0 && (i0 as usize) < s.extent {
        taps[0] = (s.pix_base + i0 as usize * s.pix_stride, (1.0 - frac) * s.step_len);
    }
    let i1 = i0 + 1;
    if i1 >= 0 && (i1 as usize) < s.extent {
        taps[1] = (s.pix_base + i1 as usize * s.pix_stride, frac * s.step_len);
    }
    taps
}

#[inline]
fn edge_gather(pixels: &[f64], s: &Slab, k: usize) -> f64 {
    let mut acc = 0.0;
    for (idx, w) in edge_taps(s, k) {
        if idx != usize::MAX {
            acc += w * pixels[idx];
        }
    }
    acc
}

#[inline]
fn edge_scatter(pixels: &mut [f64], s: &Slab, k: usize, v: f64) {
    for (idx, w) in edge_taps(s, k) {
        if idx != usize::MAX {
            pixels[idx] += w * v;
        }
    }
}

/// A^T (A c): literally the composition of the two operators.
pub fn normal_op(image: &Image, geom: &ParallelGeometry) -> Result<Image> {
    Ok(back_project(&forward_project(image, geom)?))
}

/// Relative dot-product discrepancy `|<Ax,y> - <x,A^T y>| / max(|<Ax,y>|, eps)`
/// for seeded random `x`, `y`. Deterministic per `(geom, seed)`.
pub fn adjoint_check(geom: &ParallelGeometry, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x = Image::from_vec(
        geom.image_width,
        geom.image_height,
        (0..geom.image_width * geom.image_height).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("length matches by construction");
    let y = Sinogram::new(
        geom.clone(),
        (0..geom.sinogram_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("length matches by construction");
    let ax = forward_project(&x, geom).expect("dims match by construction");
    let aty = back_project(&y);
    let lhs = ax.dot(&y);
    let rhs = x.dot(&aty);
    (lhs - rhs).abs() / lhs.abs().max(1e-30)
}

/// Split the image's non-DC Fourier energy into the part whose frequency
/// angle lies within `tolerance_band_deg` of a measured projection angle
/// (the central slices the geometry can update) and the rest.
///
/// Returns `(measured_energy, unmeasured_energy)`.
pub fn wedge_energy(
    image: &Image,
    geom: &ParallelGeometry,
    tolerance_band_deg: f64,
) -> Result<(f64, f64)> {
    if image.width() != image.height() {
        return Err(Error::InvalidInput(format!(
            "wedge_energy needs a square image, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    if tolerance_band_deg < 0.0 {
        return Err(Error::InvalidInput("tolerance band must be >= 0".into()));
    }
    let n = image.width();
    let spectrum = fft2d(image);
    let band = tolerance_band_deg.to_radians();
    let half_pi_wrap = std::f64::consts::PI;

    let mut measured = 0.0;
    let mut unmeasured = 0.0;
    for ky in 0..n {
        // Centered integer frequency: 0..n/2 stays, the rest wraps negative.
        let fy = if ky <= n / 2 { ky as f64 } else { ky as f64 - n as f64 };
        for kx in 0..n {
            if kx == 0 && ky == 0 {
                continue; // DC excluded
            }
            let fx = if kx <= n / 2 { kx as f64 } else { kx as f64 - n as f64 };
            let mut phi = fy.atan2(fx);
            if phi < 0.0 {
                phi += half_pi_wrap;
            }
            if phi >= half_pi_wrap {
                phi -= half_pi_wrap;
            }
            let energy = spectrum[ky * n + kx].norm_sqr();
            let within = geom.angles.iter().any(|&theta| {
                let mut d = (phi - theta).abs() % half_pi_wrap;
                if d > half_pi_wrap / 2.0 {
                    d = half_pi_wrap - d;
                }
                d <= band
            });
            if within {
                measured += energy;
            } else {
                unmeasured += energy;
            }
        }
    }
    Ok((measured, unmeasured))
}

fn fft2d(image: &Image) -> Vec<Complex64> {
    let n = image.width();
    let mut planner = rustfft::FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut data: Vec<Complex64> =
        image.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); n];
    for col in 0..n {
        for row in 0..n {
            column[row] = data[row * n + col];
        }
        fft.process(&mut column);
        for row in 0..n {
            data[row * n + col] = column[row];
        }
    }
    data
}
