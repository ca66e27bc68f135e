//! On-disk formats. Every data file is raw little-endian numbers plus a JSON
//! sidecar (same path with `.json` appended) carrying the shape, a `kind`
//! discriminator, and a format version.
//!
//! Complex stacks and kernels are interleaved `(re, im)` 32-bit float pairs.
//! Stacks are written frame by frame, depth-fastest within a frame, which is
//! exactly the column-major layout of the Casorati matrix. Power Doppler
//! images are 64-bit float dB values, row-major, and additionally rendered to
//! an 8-bit grayscale PNG over the display range.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::casorati::{CasoratiMatrix, StackMeta};
use crate::error::{Error, Result};
use crate::linops::Psf;
use crate::metrics::{power_doppler, PowerDopplerImage};

pub const FORMAT_VERSION: u32 = 1;

const DTYPE_COMPLEX: &str = "c64le_f32_pairs";
const DTYPE_REAL: &str = "f64le";

pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn png_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".png");
    PathBuf::from(name)
}

#[derive(Serialize, Deserialize)]
struct StackSidecar {
    format_version: u32,
    kind: String,
    dtype: String,
    nz: usize,
    nx: usize,
    nt: usize,
    meta: StackMeta,
}

#[derive(Serialize, Deserialize)]
struct PsfSidecar {
    format_version: u32,
    kind: String,
    dtype: String,
    kh: usize,
    kw: usize,
    center: (usize, usize),
    normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct PdSidecar {
    format_version: u32,
    kind: String,
    dtype: String,
    nz: usize,
    nx: usize,
    dynamic_range: f64,
}

fn write_sidecar<T: Serialize>(data_path: &Path, sidecar: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar)?;
    fs::write(sidecar_path(data_path), text)?;
    Ok(())
}

fn read_sidecar_value(data_path: &Path) -> Result<serde_json::Value> {
    let path = sidecar_path(data_path);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("cannot read sidecar {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_header(value: &serde_json::Value, kind: &str, dtype: &str, path: &Path) -> Result<()> {
    let got_version = value.get("format_version").and_then(|v| v.as_u64());
    if got_version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Format(format!(
            "{}: unsupported format version {got_version:?}",
            path.display()
        )));
    }
    let got_kind = value.get("kind").and_then(|v| v.as_str());
    if got_kind != Some(kind) {
        return Err(Error::Format(format!(
            "{}: expected kind {kind:?}, found {got_kind:?}",
            path.display()
        )));
    }
    let got_dtype = value.get("dtype").and_then(|v| v.as_str());
    if got_dtype != Some(dtype) {
        return Err(Error::Format(format!(
            "{}: expected dtype {dtype:?}, found {got_dtype:?}",
            path.display()
        )));
    }
    Ok(())
}

/// The `kind` recorded in a data file's sidecar.
pub fn sniff_kind(data_path: &Path) -> Result<String> {
    let value = read_sidecar_value(data_path)?;
    value
        .get("kind")
        .and_then(|v| v.as_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Format(format!("{}: sidecar lacks a kind", data_path.display())))
}

fn write_complex_raw(path: &Path, values: impl Iterator<Item = Complex64>, count: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(count * 8);
    for v in values {
        bytes.extend_from_slice(&(v.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_complex_raw(path: &Path, count: usize) -> Result<Vec<Complex64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != count * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {count} complex samples, found {}",
            path.display(),
            count * 8,
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for pair in bytes.chunks_exact(8) {
        let re = f32::from_le_bytes(pair[0..4].try_into().unwrap());
        let im = f32::from_le_bytes(pair[4..8].try_into().unwrap());
        out.push(Complex64::new(re as f64, im as f64));
    }
    Ok(out)
}

pub fn write_stack(path: &Path, stack: &CasoratiMatrix) -> Result<()> {
    let (rows, nt) = stack.data().dim();
    // Column-major emission: frame by frame, depth-fastest.
    let values = (0..nt).flat_map(|t| (0..rows).map(move |r| stack.data()[[r, t]]));
    write_complex_raw(path, values, rows * nt)?;
    write_sidecar(
        path,
        &StackSidecar {
            format_version: FORMAT_VERSION,
            kind: "complex_stack".into(),
            dtype: DTYPE_COMPLEX.into(),
            nz: stack.nz(),
            nx: stack.nx(),
            nt: stack.nt(),
            meta: stack.meta.clone(),
        },
    )
}

pub fn read_stack(path: &Path) -> Result<CasoratiMatrix> {
    let value = read_sidecar_value(path)?;
    check_header(&value, "complex_stack", DTYPE_COMPLEX, path)?;
    let sc: StackSidecar = serde_json::from_value(value)?;
    if sc.nz == 0 || sc.nx == 0 || sc.nt == 0 {
        return Err(Error::Format(format!("{}: zero dimension in sidecar", path.display())));
    }
    let rows = sc.nz * sc.nx;
    let flat = read_complex_raw(path, rows * sc.nt)?;
    let data = Array2::from_shape_fn((rows, sc.nt), |(r, t)| flat[t * rows + r]);
    CasoratiMatrix::new(data, sc.nz, sc.nx, sc.meta)
}

pub fn write_psf(path: &Path, psf: &Psf) -> Result<()> {
    let (kh, kw) = psf.kernel().dim();
    write_complex_raw(path, psf.kernel().iter().copied(), kh * kw)?;
    write_sidecar(
        path,
        &PsfSidecar {
            format_version: FORMAT_VERSION,
            kind: "psf_kernel".into(),
            dtype: DTYPE_COMPLEX.into(),
            kh,
            kw,
            center: psf.center(),
            normalized: psf.is_normalized(),
        },
    )
}

pub fn read_psf(path: &Path) -> Result<Psf> {
    let value = read_sidecar_value(path)?;
    check_header(&value, "psf_kernel", DTYPE_COMPLEX, path)?;
    let sc: PsfSidecar = serde_json::from_value(value)?;
    if sc.kh == 0 || sc.kw == 0 {
        return Err(Error::Format(format!("{}: zero kernel dimension", path.display())));
    }
    let flat = read_complex_raw(path, sc.kh * sc.kw)?;
    let kernel = Array2::from_shape_fn((sc.kh, sc.kw), |(i, j)| flat[i * sc.kw + j]);
    let psf = Psf::new(kernel, sc.center)?;
    if sc.normalized {
        // Restore exact unit energy lost to 32-bit quantization.
        psf.normalize_energy()
    } else {
        Ok(psf)
    }
}

pub fn write_power_doppler(path: &Path, img: &PowerDopplerImage) -> Result<()> {
    let (nz, nx) = img.dims();
    let mut bytes = Vec::with_capacity(nz * nx * 8);
    for v in img.db().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    write_sidecar(
        path,
        &PdSidecar {
            format_version: FORMAT_VERSION,
            kind: "power_doppler".into(),
            dtype: DTYPE_REAL.into(),
            nz,
            nx,
            dynamic_range: img.dynamic_range(),
        },
    )?;

    let disp = img.display_db();
    let floor = img.display_floor();
    let span = img.dynamic_range();
    let png = image::GrayImage::from_fn(nx as u32, nz as u32, |x, y| {
        let v = (disp[[y as usize, x as usize]] - floor) / span;
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    png.save(png_path(path))
        .map_err(|e| Error::Format(format!("PNG render failed: {e}")))?;
    Ok(())
}

pub fn read_power_doppler(path: &Path) -> Result<PowerDopplerImage> {
    let value = read_sidecar_value(path)?;
    check_header(&value, "power_doppler", DTYPE_REAL, path)?;
    let sc: PdSidecar = serde_json::from_value(value)?;
    let count = sc.nz * sc.nx;
    let bytes = fs::read(path)?;
    if bytes.len() != count * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            count * 8,
            bytes.len()
        )));
    }
    let mut flat = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(8) {
        flat.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let db = Array2::from_shape_fn((sc.nz, sc.nx), |(i, j)| flat[i * sc.nx + j]);
    PowerDopplerImage::new(db, sc.dynamic_range)
}

/// Reads either a stored power Doppler image or a complex stack (rendered on
/// the fly), dispatching on the sidecar `kind`.
pub fn load_power_doppler_like(path: &Path) -> Result<PowerDopplerImage> {
    match sniff_kind(path)?.as_str() {
        "power_doppler" => read_power_doppler(path),
        "complex_stack" => power_doppler(&read_stack(path)?),
        other => Err(Error::Format(format!(
            "{}: kind {other:?} cannot be rendered as power Doppler",
            path.display()
        ))),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
