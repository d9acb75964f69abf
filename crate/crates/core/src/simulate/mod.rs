//! Phantoms, perturbations, sinogram synthesis, and the photon-counting
//! noise model.

pub mod io;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::projection::{forward_project, ParallelGeometry, Sinogram};
use rand::SeedableRng;
use rand_distr::Distribution;

/// One phantom ellipse: additive intensity, semi-axes, center, rotation.
struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

/// The modified (high-contrast) Shepp-Logan ellipse table, in the usual
/// y-up unit square.
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { value: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, phi_deg: 0.0 },
    Ellipse { value: -0.8, a: 0.6624, b: 0.874, x0: 0.0, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { value: -0.2, a: 0.11, b: 0.31, x0: 0.22, y0: 0.0, phi_deg: -18.0 },
    Ellipse { value: -0.2, a: 0.16, b: 0.41, x0: -0.22, y0: 0.0, phi_deg: 18.0 },
    Ellipse { value: 0.1, a: 0.21, b: 0.25, x0: 0.0, y0: 0.35, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: 0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: -0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.023, x0: -0.08, y0: -0.605, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.023, b: 0.023, x0: 0.0, y0: -0.606, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.023, b: 0.046, x0: 0.06, y0: -0.605, phi_deg: 0.0 },
];

/// Point evaluation of the phantom at unit-square coordinates (y up): the
/// signed sum of the intensities of every ellipse containing the point.
fn shepp_logan_at(x: f64, y: f64) -> f64 {
    let mut v = 0.0;
    for e in &SHEPP_LOGAN {
        let phi = e.phi_deg.to_radians();
        let (sin, cos) = phi.sin_cos();
        let dx = x - e.x0;
        let dy = y - e.y0;
        let u = dx * cos + dy * sin;
        let w = -dx * sin + dy * cos;
        if (u / e.a) * (u / e.a) + (w / e.b) * (w / e.b) <= 1.0 {
            v += e.value;
        }
    }
    v
}

/// Render the 10-ellipse modified Shepp-Logan phantom, clipped to `[0, 1]`.
///
/// Pixel `(col, row)` samples the unit square at its center, with row 0 at
/// the top (y up in phantom coordinates).
pub fn shepp_logan(width: usize, height: usize) -> Result<Image> {
    if width < 16 || height < 16 {
        return Err(Error::InvalidInput(format!(
            "phantom dims must be >= 16, got {width}x{height}"
        )));
    }
    let mut img = Image::zeros(width, height);
    for row in 0..height {
        let y = 1.0 - (row as f64 + 0.5) * 2.0 / height as f64;
        for col in 0..width {
            let x = (col as f64 + 0.5) * 2.0 / width as f64 - 1.0;
            img.set(col, row, shepp_logan_at(x, y).clamp(0.0, 1.0));
        }
    }
    Ok(img)
}

/// Bilinear rotation about the image center; samples outside the grid are
/// zero.
pub fn rotate_image(image: &Image, degrees: f64) -> Image {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (w, h) = (image.width(), image.height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    Image::from_fn(w, h, |x, y| {
        // Source position: rotate backwards.
        let sx = cos * x + sin * y + cx;
        let sy = -sin * x + cos * y + cy;
        let i0 = sx.floor();
        let j0 = sy.floor();
        let fu = sx - i0;
        let fv = sy - j0;
        let mut acc = 0.0;
        for (dj, wv) in [(0isize, 1.0 - fv), (1, fv)] {
            for (di, wu) in [(0isize, 1.0 - fu), (1, fu)] {
                let i = i0 as isize + di;
                let j = j0 as isize + dj;
                if i >= 0 && (i as usize) < w && j >= 0 && (j as usize) < h {
                    acc += wu * wv * image.get(i as usize, j as usize);
                }
            }
        }
        acc
    })
}

/// Photon-count noise parameters: `i0` is the blank (air) expected count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub i0: f64,
    pub seed: u64,
}

/// Expected photon count for one line integral, Beer-Lambert attenuation:
/// `E = I0 * exp(-g)`. A blank ray (`g = 0`) yields exactly `I0`.
fn expected_count(i0: f64, g: f64) -> f64 {
    i0 * (-g).exp()
}

/// Poisson photon-count noise: draws `N_i ~ Poisson(I0 e^{-g_i})` and
/// returns the re-log-transformed sinogram `-ln(max(N_i, 1) / I0)`.
///
/// Each entry uses its own seeded RNG stream, so the result is independent
/// of evaluation order. Sinogram values should be scaled so the largest
/// line integral stays around 6 or below, otherwise low `i0` settings
/// starve the detector (the zero-count clamp takes over).
pub fn poisson_noise(sino: &Sinogram, spec: &NoiseSpec) -> Result<Sinogram> {
    if !(spec.i0 > 0.0) {
        return Err(Error::InvalidInput(format!("i0 must be > 0, got {}", spec.i0)));
    }
    let mut values = Vec::with_capacity(sino.values().len());
    for (i, &g) in sino.values().iter().enumerate() {
        let lambda = expected_count(spec.i0, g).max(f64::MIN_POSITIVE);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let n: f64 = rand_distr::Poisson::new(lambda)
            .map_err(|e| Error::InvalidInput(format!("poisson({lambda}): {e}")))?
            .sample(&mut rng);
        values.push(-(n.max(1.0) / spec.i0).ln());
    }
    Sinogram::new(sino.geometry().clone(), values)
}

/// A synthesized measurement plus the noise provenance it was made with.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSinogram {
    pub sinogram: Sinogram,
    pub noise: Option<NoiseSpec>,
}

/// Forward-project and optionally apply photon noise, keeping the noise
/// parameters alongside the data for provenance.
pub fn make_sinogram(
    image: &Image,
    geom: &ParallelGeometry,
    noise: Option<NoiseSpec>,
) -> Result<SimulatedSinogram> {
    let clean = forward_project(image, geom)?;
    let sinogram = match &noise {
        Some(spec) => poisson_noise(&clean, spec)?,
        None => clean,
    };
    Ok(SimulatedSinogram { sinogram, noise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::snr_db_slices;
    use rand::Rng;

    #[test]
    fn phantom_is_zero_outside_outer_ellipse() {
        let img = shepp_logan(64, 64).unwrap();
        // Corners are well outside the skull ellipse.
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(63, 0), 0.0);
        assert_eq!(img.get(0, 63), 0.0);
        assert_eq!(img.get(63, 63), 0.0);
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = shepp_logan(48, 48).unwrap();
        let b = shepp_logan(48, 48).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phantom_rejects_tiny_dims() {
        assert!(shepp_logan(8, 64).is_err());
    }

    /// Independent copy of the ellipse table; evaluation must agree exactly
    /// (same membership formula, no interpolation anywhere).
    #[test]
    fn phantom_matches_analytic_ellipse_sum_at_random_points() {
        let table: [(f64, f64, f64, f64, f64, f64); 10] = [
            (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
            (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
            (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
            (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
            (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
            (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
            (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
            (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
            (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
            (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
        ];
        let n = 96;
        let img = shepp_logan(n, n).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        for _ in 0..100 {
            let col = rng.random_range(0..n);
            let row = rng.random_range(0..n);
            let x = (col as f64 + 0.5) * 2.0 / n as f64 - 1.0;
            let y = 1.0 - (row as f64 + 0.5) * 2.0 / n as f64;
            let mut expect = 0.0;
            for (value, a, b, x0, y0, phi_deg) in &table {
                let phi = phi_deg.to_radians();
                let (sin, cos) = phi.sin_cos();
                let dx = x - x0;
                let dy = y - y0;
                let u = dx * cos + dy * sin;
                let w = -dx * sin + dy * cos;
                if (u / a) * (u / a) + (w / b) * (w / b) <= 1.0 {
                    expect += value;
                }
            }
            assert_eq!(img.get(col, row), expect.clamp(0.0, 1.0), "at ({col},{row})");
        }
    }

    #[test]
    fn center_value_is_skull_minus_brain() {
        // The image center lies inside exactly the two outermost ellipses.
        let n = 64;
        let img = shepp_logan(n, n).unwrap();
        let v = img.get(n / 2, n / 2);
        assert!((v - 0.2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rotate_zero_degrees_is_identity() {
        let img = shepp_logan(32, 32).unwrap();
        assert_eq!(rotate_image(&img, 0.0), img);
    }

    #[test]
    fn rotate_full_turn_matches_original() {
        let img = shepp_logan(32, 32).unwrap();
        let back = rotate_image(&img, 360.0);
        for (a, b) in back.values().iter().zip(img.values()) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn rotate_preserves_mass_of_interior_disk() {
        let n = 64;
        let img = Image::from_fn(n, n, |x, y| if x * x + y * y <= 18.0 * 18.0 { 1.0 } else { 0.0 });
        let rot = rotate_image(&img, 30.0);
        let rel = (rot.sum() - img.sum()).abs() / img.sum();
        assert!(rel <= 0.005, "mass drift {rel}");
    }

    #[test]
    fn blank_ray_expects_exactly_i0() {
        assert_eq!(expected_count(1234.5, 0.0), 1234.5);
    }

    #[test]
    fn poisson_noise_is_deterministic_per_seed() {
        let geom = ParallelGeometry::uniform(5, 180.0, 16, 16).unwrap();
        let img = shepp_logan(16, 16).unwrap();
        let sino = forward_project(&img, &geom).unwrap();
        let spec = NoiseSpec { i0: 1e4, seed: 9 };
        let a = poisson_noise(&sino, &spec).unwrap();
        let b = poisson_noise(&sino, &spec).unwrap();
        assert_eq!(a.values(), b.values());
        let c = poisson_noise(&sino, &NoiseSpec { i0: 1e4, seed: 10 }).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn huge_i0_is_effectively_noise_free() {
        let geom = ParallelGeometry::uniform(8, 180.0, 24, 24).unwrap();
        let img = shepp_logan(24, 24).unwrap();
        let clean = forward_project(&img, &geom).unwrap();
        // Scale to keep line integrals small (values in pixel-length units).
        let scaled =
            Sinogram::new(geom.clone(), clean.values().iter().map(|v| v * 0.2).collect()).unwrap();
        let noisy = poisson_noise(&scaled, &NoiseSpec { i0: 1e12, seed: 1 }).unwrap();
        let rms: f64 = (noisy
            .values()
            .iter()
            .zip(scaled.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / scaled.values().len() as f64)
            .sqrt();
        let scale: f64 =
            (scaled.values().iter().map(|v| v * v).sum::<f64>() / scaled.values().len() as f64).sqrt();
        assert!(rms <= 1e-3 * scale.max(1.0), "rms {rms} vs scale {scale}");
    }

    #[test]
    fn snr_grows_ten_db_per_decade_of_dose() {
        let geom = ParallelGeometry::uniform(30, 180.0, 32, 32).unwrap();
        let img = shepp_logan(32, 32).unwrap();
        let clean = forward_project(&img, &geom).unwrap();
        let max = clean.values().iter().fold(0.0f64, |m, v| m.max(*v));
        let scaled = Sinogram::new(
            geom.clone(),
            clean.values().iter().map(|v| v * 3.0 / max).collect(),
        )
        .unwrap();
        let mut snrs = Vec::new();
        for exp in 2..=8 {
            let noisy =
                poisson_noise(&scaled, &NoiseSpec { i0: 10f64.powi(exp), seed: 4 }).unwrap();
            snrs.push(snr_db_slices(noisy.values(), scaled.values()).unwrap());
        }
        for pair in snrs.windows(2) {
            let gain = pair[1] - pair[0];
            assert!((gain - 10.0).abs() <= 1.0, "gain per decade {gain}, series {snrs:?}");
        }
    }

    #[test]
    fn unbiased_at_high_dose() {
        // Mean over many draws converges to the clean value within 3 standard
        // errors per entry (fixed seed, so this is deterministic).
        let geom = ParallelGeometry::uniform(3, 180.0, 16, 16).unwrap();
        let img = shepp_logan(16, 16).unwrap();
        let clean = forward_project(&img, &geom).unwrap();
        let max = clean.values().iter().fold(0.0f64, |m, v| m.max(*v));
        let scaled = Sinogram::new(
            geom.clone(),
            clean.values().iter().map(|v| v * 3.0 / max).collect(),
        )
        .unwrap();
        let i0 = 1e6;
        let draws = 1000;
        let mut mean = vec![0.0; scaled.values().len()];
        for d in 0..draws {
            let noisy = poisson_noise(&scaled, &NoiseSpec { i0, seed: 1000 + d }).unwrap();
            for (m, v) in mean.iter_mut().zip(noisy.values()) {
                *m += v / draws as f64;
            }
        }
        for (i, (m, g)) in mean.iter().zip(scaled.values()).enumerate() {
            let count = expected_count(i0, *g);
            let stderr = (1.0 / count).sqrt() / (draws as f64).sqrt();
            assert!(
                (m - g).abs() <= 3.0 * stderr + 1.0 / count,
                "entry {i}: mean {m} vs {g} (3se = {})",
                3.0 * stderr
            );
        }
    }

    #[test]
    fn make_sinogram_without_noise_is_forward_projection() {
        let geom = ParallelGeometry::uniform(6, 180.0, 16, 16).unwrap();
        let img = shepp_logan(16, 16).unwrap();
        let sim = make_sinogram(&img, &geom, None).unwrap();
        assert_eq!(sim.sinogram, forward_project(&img, &geom).unwrap());
        assert_eq!(sim.noise, None);
    }

    #[test]
    fn noise_degrades_reconstruction() {
        use crate::mbir::mbir_reconstruct;
        use crate::metrics::snr_db;
        let n = 32;
        let img = shepp_logan(n, n).unwrap();
        let geom = ParallelGeometry::uniform(60, 180.0, n, n).unwrap();
        let clean = forward_project(&img, &geom).unwrap();
        let max = clean.values().iter().fold(0.0f64, |m, v| m.max(*v));
        let scale = 3.0 / max;
        let gt = img.scaled(scale);
        let scaled_sino = forward_project(&gt, &geom).unwrap();
        let noisy = poisson_noise(&scaled_sino, &NoiseSpec { i0: 1e4, seed: 2 }).unwrap();

        let (rec_clean, _) = mbir_reconstruct(&scaled_sino, &geom, 300, 0.0).unwrap();
        let (rec_noisy, _) = mbir_reconstruct(&noisy, &geom, 300, 0.0).unwrap();
        let snr_clean = snr_db(&rec_clean, &gt).unwrap();
        let snr_noisy = snr_db(&rec_noisy, &gt).unwrap();
        assert!(
            snr_noisy < snr_clean,
            "noisy {snr_noisy} dB should be below clean {snr_clean} dB"
        );
    }
}
