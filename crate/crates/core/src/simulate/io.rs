//! File formats: PGM (binary P5, 8/16-bit), grayscale PNG, a little-endian
//! sinogram container, and a lossless f64 image container.
//!
//! Pixel values map linearly between `[0, 1]` and the integer range of the
//! quantized formats; the f64 containers are exact.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::projection::{ParallelGeometry, Sinogram};
use crate::simulate::{NoiseSpec, SimulatedSinogram};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), detail: detail.into() }
}

/// Write a binary (P5) PGM. Values are clamped to `[0, 1]` and quantized to
/// the requested depth; 16-bit samples are big-endian per the PGM spec.
pub fn save_pgm(image: &Image, path: impl AsRef<Path>, depth: PgmDepth) -> Result<()> {
    let path = path.as_ref();
    let maxval: u32 = match depth {
        PgmDepth::Eight => 255,
        PgmDepth::Sixteen => 65535,
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P5\n{} {}\n{}\n", image.width(), image.height(), maxval)?;
    for &v in image.values() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        match depth {
            PgmDepth::Eight => out.write_all(&[q as u8])?,
            PgmDepth::Sixteen => out.write_all(&(q as u16).to_be_bytes())?,
        }
    }
    out.flush()?;
    Ok(())
}

fn parse_pgm(path: &Path, data: &[u8]) -> Result<Image> {
    // Header: "P5", width, height, maxval as whitespace-separated tokens,
    // with '#' comments, followed by a single whitespace byte and raster.
    let mut pos = 0usize;
    let mut token = |data: &[u8]| -> Result<String> {
        while pos < data.len() {
            let b = data[pos];
            if b == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() && data[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };

    if token(data)? != "P5" {
        return Err(format_err(path, "not a binary PGM (P5)"));
    }
    let width: usize =
        token(data)?.parse().map_err(|e| format_err(path, format!("bad width: {e}")))?;
    let height: usize =
        token(data)?.parse().map_err(|e| format_err(path, format!("bad height: {e}")))?;
    let maxval: u32 =
        token(data)?.parse().map_err(|e| format_err(path, format!("bad maxval: {e}")))?;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace separates header and raster.
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing raster separator"));
    }
    pos += 1;
    let raster = &data[pos..];
    let n = width * height;
    let values: Vec<f64> = if maxval <= 255 {
        if raster.len() < n {
            return Err(format_err(path, "raster shorter than header promises"));
        }
        raster[..n].iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(format_err(path, "raster shorter than header promises"));
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    };
    Image::from_vec(width, height, values)
}

/// Load a grayscale image: binary PGM (8/16-bit) or grayscale PNG, chosen by
/// extension. Values are mapped linearly to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => {
            let data = fs::read(path)?;
            parse_pgm(path, &data)
        }
        Some("png") => load_png(path),
        other => Err(format_err(
            path,
            format!("unsupported image extension {other:?} (use .pgm or .png)"),
        )),
    }
}

fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let values: Vec<f64> = match dynimg {
        image::DynamicImage::ImageLuma8(buf) => {
            buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect()
        }
        image::DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect()
        }
        other => {
            let buf = other.into_luma16();
            buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect()
        }
    };
    Image::from_vec(w, h, values)
}

/// Save as 16-bit grayscale by extension: `.pgm` or `.png`.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => save_pgm(image, path, PgmDepth::Sixteen),
        Some("png") => {
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
                image.width() as u32,
                image.height() as u32,
            );
            for (i, p) in buf.pixels_mut().enumerate() {
                p.0[0] = (image.values()[i].clamp(0.0, 1.0) * 65535.0).round() as u16;
            }
            buf.save(path).map_err(|e| format_err(path, e.to_string()))
        }
        other => Err(format_err(
            path,
            format!("unsupported image extension {other:?} (use .pgm or .png)"),
        )),
    }
}

/// Save the exact f64 pixel data. Layout (little-endian): magic `IMG1`,
/// version u32, width u32, height u32, then `width*height` f64 values.
pub fn save_image_raw(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path.as_ref())?);
    out.write_all(b"IMG1")?;
    out.write_all(&1u32.to_le_bytes())?;
    out.write_all(&(image.width() as u32).to_le_bytes())?;
    out.write_all(&(image.height() as u32).to_le_bytes())?;
    for v in image.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_image_raw(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut input = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != b"IMG1" {
        return Err(format_err(path, "bad magic"));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != 1 {
        return Err(format_err(path, "unsupported version"));
    }
    input.read_exact(&mut b4)?;
    let w = u32::from_le_bytes(b4) as usize;
    input.read_exact(&mut b4)?;
    let h = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    let mut values = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        input.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    Image::from_vec(w, h, values)
}

/// Save a sinogram with its geometry and noise provenance.
///
/// Layout (little-endian):
///
/// | bytes | field |
/// |-------|-------|
/// | 4     | magic `SIN1` |
/// | 4     | version, u32 = 1 |
/// | 4     | angle count m, u32 |
/// | 4     | detector count d, u32 |
/// | 8     | detector spacing, f64 |
/// | 4     | image width, u32 |
/// | 4     | image height, u32 |
/// | 8 * m | angles in radians, f64 |
/// | 1     | noise flag, u8 |
/// | 8     | i0, f64 (0 if no noise) |
/// | 8     | noise seed, u64 (0 if no noise) |
/// | 8*m*d | values, f64, row-major by angle |
pub fn save_sinogram(sim: &SimulatedSinogram, path: impl AsRef<Path>) -> Result<()> {
    let sino = &sim.sinogram;
    let geom = sino.geometry();
    let mut out = BufWriter::new(fs::File::create(path.as_ref())?);
    out.write_all(b"SIN1")?;
    out.write_all(&1u32.to_le_bytes())?;
    out.write_all(&(geom.n_angles() as u32).to_le_bytes())?;
    out.write_all(&(geom.detector_count() as u32).to_le_bytes())?;
    out.write_all(&geom.detector_spacing().to_le_bytes())?;
    out.write_all(&(geom.image_width() as u32).to_le_bytes())?;
    out.write_all(&(geom.image_height() as u32).to_le_bytes())?;
    for a in geom.angles() {
        out.write_all(&a.to_le_bytes())?;
    }
    match &sim.noise {
        Some(spec) => {
            out.write_all(&[1u8])?;
            out.write_all(&spec.i0.to_le_bytes())?;
            out.write_all(&spec.seed.to_le_bytes())?;
        }
        None => {
            out.write_all(&[0u8])?;
            out.write_all(&0f64.to_le_bytes())?;
            out.write_all(&0u64.to_le_bytes())?;
        }
    }
    for v in sino.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_sinogram(path: impl AsRef<Path>) -> Result<SimulatedSinogram> {
    let path = path.as_ref();
    let mut input = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != b"SIN1" {
        return Err(format_err(path, "bad magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let read_u32 = |input: &mut fs::File, b4: &mut [u8; 4]| -> Result<u32> {
        input.read_exact(b4)?;
        Ok(u32::from_le_bytes(*b4))
    };
    if read_u32(&mut input, &mut b4)? != 1 {
        return Err(format_err(path, "unsupported version"));
    }
    let m = read_u32(&mut input, &mut b4)? as usize;
    let d = read_u32(&mut input, &mut b4)? as usize;
    input.read_exact(&mut b8)?;
    let spacing = f64::from_le_bytes(b8);
    let w = read_u32(&mut input, &mut b4)? as usize;
    let h = read_u32(&mut input, &mut b4)? as usize;
    let mut angles = Vec::with_capacity(m);
    for _ in 0..m {
        input.read_exact(&mut b8)?;
        angles.push(f64::from_le_bytes(b8));
    }
    let mut flag = [0u8; 1];
    input.read_exact(&mut flag)?;
    input.read_exact(&mut b8)?;
    let i0 = f64::from_le_bytes(b8);
    input.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    let noise = (flag[0] == 1).then_some(NoiseSpec { i0, seed });
    let geom = ParallelGeometry::new(angles, d, spacing, w, h)?;
    let mut values = Vec::with_capacity(m * d);
    for _ in 0..m * d {
        input.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    Ok(SimulatedSinogram { sinogram: Sinogram::new(geom, values)?, noise })
}

/// CSV export: one row per (angle, detector) sample.
pub fn sinogram_to_csv(sino: &Sinogram, mut out: impl Write) -> Result<()> {
    writeln!(out, "# rbpdip-sinogram v1")?;
    writeln!(out, "angle_index,angle_rad,detector_index,value")?;
    for (a, &theta) in sino.geometry().angles().iter().enumerate() {
        for k in 0..sino.geometry().detector_count() {
            writeln!(out, "{a},{theta},{k},{}", sino.get(a, k))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::shepp_logan;

    #[test]
    fn pgm16_roundtrip_stays_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = shepp_logan(32, 32).unwrap();
        save_pgm(&img, &path, PgmDepth::Sixteen).unwrap();
        let back = load_image(&path).unwrap();
        let bound = 0.5 / 65535.0;
        for (a, b) in back.values().iter().zip(img.values()) {
            assert!((a - b).abs() <= bound, "{a} vs {b}");
        }
    }

    #[test]
    fn black_image_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.pgm");
        let img = Image::zeros(16, 16);
        save_pgm(&img, &path, PgmDepth::Sixteen).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_ramp_roundtrip_preserves_monotone_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.pgm");
        let n = 64;
        let img = Image::from_fn(n, n, |x, _| (x + (n as f64 - 1.0) / 2.0) / (n as f64 - 1.0));
        save_pgm(&img, &path, PgmDepth::Sixteen).unwrap();
        let back = load_image(&path).unwrap();
        for row in 0..n {
            for col in 1..n {
                assert!(back.get(col, row) >= back.get(col - 1, row));
            }
        }
    }

    #[test]
    fn eight_bit_pgm_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x8.pgm");
        let img = shepp_logan(24, 24).unwrap();
        save_pgm(&img, &path, PgmDepth::Eight).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in back.values().iter().zip(img.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
    }

    #[test]
    fn corrupt_header_is_a_descriptive_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P6\n4 4\n255\n").unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("P5"), "{err}");
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = shepp_logan(32, 32).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in back.values().iter().zip(img.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
    }

    #[test]
    fn raw_image_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.img");
        let img = shepp_logan(20, 20).unwrap();
        save_image_raw(&img, &path).unwrap();
        let back = load_image_raw(&path).unwrap();
        assert_eq!(
            img.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sinogram_container_roundtrip() {
        use crate::projection::forward_project;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sino");
        let geom = ParallelGeometry::uniform(9, 120.0, 16, 16).unwrap();
        let img = shepp_logan(16, 16).unwrap();
        let sim = SimulatedSinogram {
            sinogram: forward_project(&img, &geom).unwrap(),
            noise: Some(NoiseSpec { i0: 1e5, seed: 77 }),
        };
        save_sinogram(&sim, &path).unwrap();
        let back = load_sinogram(&path).unwrap();
        assert_eq!(back, sim);
    }
}
