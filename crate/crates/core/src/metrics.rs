//! Power Doppler rendering and the quantitative comparison metrics.
//!
//! Stored images are dB maps clamped at a fixed numeric floor so every entry
//! stays finite; the declared dynamic range drives a separate display floor
//! used for rendering and contrast computations only.

use ndarray::Array2;

use crate::casorati::CasoratiMatrix;
use crate::error::{Error, Result};

/// Clamp applied to stored dB values; keeps log of zero power finite.
pub const DB_NUMERIC_FLOOR: f64 = -300.0;

/// Display range in dB below the image maximum.
pub const DEFAULT_DYNAMIC_RANGE: f64 = 35.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PowerDopplerImage {
    db: Array2<f64>,
    dynamic_range: f64,
}

impl PowerDopplerImage {
    /// Accepts dB values; `-inf` and anything below the numeric floor clamp
    /// to the floor, NaN and `+inf` are rejected.
    pub fn new(db: Array2<f64>, dynamic_range: f64) -> Result<Self> {
        if db.is_empty() {
            return Err(Error::InvalidParameter("empty power Doppler image".into()));
        }
        if db.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite("power Doppler dB values".into()));
        }
        if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dynamic range must be positive and finite, got {dynamic_range}"
            )));
        }
        Ok(Self {
            db: db.mapv(|v| v.max(DB_NUMERIC_FLOOR)),
            dynamic_range,
        })
    }

    pub fn db(&self) -> &Array2<f64> {
        &self.db
    }

    pub fn dynamic_range(&self) -> f64 {
        self.dynamic_range
    }

    pub fn dims(&self) -> (usize, usize) {
        self.db.dim()
    }

    pub fn with_dynamic_range(self, dynamic_range: f64) -> Result<Self> {
        Self::new(self.db, dynamic_range)
    }

    /// Lowest dB level shown: image maximum minus the dynamic range.
    pub fn display_floor(&self) -> f64 {
        let max = self.db.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        max - self.dynamic_range
    }

    /// Stored dB values clamped at the display floor.
    pub fn display_db(&self) -> Array2<f64> {
        let floor = self.display_floor();
        self.db.mapv(|v| v.max(floor))
    }
}

/// Per-pixel `10*log10` of the temporal mean of `|B|^2`.
pub fn power_doppler(b: &CasoratiMatrix) -> Result<PowerDopplerImage> {
    let (nz, nx, nt) = (b.nz(), b.nx(), b.nt());
    let data = b.data();
    let mut db = Array2::zeros((nz, nx));
    for col in 0..nx {
        for z in 0..nz {
            let r = z + nz * col;
            let mut acc = 0.0;
            for t in 0..nt {
                acc += data[[r, t]].norm_sqr();
            }
            db[[z, col]] = 10.0 * (acc / nt as f64).log10();
        }
    }
    if db.iter().any(|v| *v == f64::INFINITY) {
        return Err(Error::NonFinite("power Doppler accumulation overflowed".into()));
    }
    PowerDopplerImage::new(db, DEFAULT_DYNAMIC_RANGE)
}

fn check_same_dims(a: &PowerDopplerImage, b: &PowerDopplerImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "power Doppler images {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `sqrt(|ref - est|_F^2 / |ref|_F^2)` on the stored dB images.
pub fn nrmse(reference: &PowerDopplerImage, estimate: &PowerDopplerImage) -> Result<f64> {
    check_same_dims(reference, estimate)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, e) in reference.db.iter().zip(estimate.db.iter()) {
        num += (r - e) * (r - e);
        den += r * r;
    }
    if den == 0.0 {
        return Err(Error::InvalidParameter(
            "NRMSE is undefined for an identically zero reference".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// `10*log10(d_max^2 / MSE)` on the stored dB images; `+inf` when they match
/// exactly.
pub fn psnr(reference: &PowerDopplerImage, estimate: &PowerDopplerImage, d_max: f64) -> Result<f64> {
    check_same_dims(reference, estimate)?;
    if !(d_max > 0.0 && d_max.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "peak value must be positive and finite, got {d_max}"
        )));
    }
    let (nz, nx) = reference.dims();
    let mut mse = 0.0;
    for (r, e) in reference.db.iter().zip(estimate.db.iter()) {
        mse += (r - e) * (r - e);
    }
    mse /= (nz * nx) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (d_max * d_max / mse).log10())
}

/// Axis-aligned pixel rectangle, used both for contrast patches and for the
/// simulated flow regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchRect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn fits(&self, nz: usize, nx: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParameter("patch must have nonzero size".into()));
        }
        if self.top + self.height > nz || self.left + self.width > nx {
            return Err(Error::InvalidParameter(format!(
                "patch {}x{} at ({}, {}) leaves a {nz}x{nx} image",
                self.height, self.width, self.top, self.left
            )));
        }
        Ok(())
    }
}

/// Mean linear power over a patch of the display-floored image.
fn patch_mean_linear(display_db: &Array2<f64>, r: &PatchRect) -> f64 {
    let mut acc = 0.0;
    for i in r.top..r.top + r.height {
        for j in r.left..r.left + r.width {
            acc += 10f64.powf(display_db[[i, j]] / 10.0);
        }
    }
    acc / (r.height * r.width) as f64
}

/// `20*log10(mu_R2 / mu_R1)` where the means are linear-scale power over the
/// display-floored image. Larger is better; `r1` is the background reference.
pub fn contrast_ratio(img: &PowerDopplerImage, r1: &PatchRect, r2: &PatchRect) -> Result<f64> {
    let (nz, nx) = img.dims();
    r1.fits(nz, nx)?;
    r2.fits(nz, nx)?;
    let disp = img.display_db();
    let mu1 = patch_mean_linear(&disp, r1);
    let mu2 = patch_mean_linear(&disp, r2);
    if mu1 == 0.0 {
        return Err(Error::InvalidParameter("zero background mean in contrast ratio".into()));
    }
    Ok(20.0 * (mu2 / mu1).log10())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CrSweep {
    pub values: Vec<f64>,
    pub median: f64,
    /// Lower quartile, median, upper quartile.
    pub quartiles: (f64, f64, f64),
}

/// Contrast of every non-overlapping `patch_h x patch_w` tile (row-major)
/// against the fixed reference patch.
pub fn cr_sweep(
    img: &PowerDopplerImage,
    r1: &PatchRect,
    patch_h: usize,
    patch_w: usize,
) -> Result<CrSweep> {
    let (nz, nx) = img.dims();
    r1.fits(nz, nx)?;
    if patch_h == 0 || patch_w == 0 {
        return Err(Error::InvalidParameter("patch size must be nonzero".into()));
    }
    let (rows, cols) = (nz / patch_h, nx / patch_w);
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter(format!(
            "no {patch_h}x{patch_w} patch fits a {nz}x{nx} image"
        )));
    }
    let disp = img.display_db();
    let mu1 = patch_mean_linear(&disp, r1);
    if mu1 == 0.0 {
        return Err(Error::InvalidParameter("zero background mean in contrast sweep".into()));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let tile = PatchRect::new(pr * patch_h, pc * patch_w, patch_h, patch_w);
            values.push(20.0 * (patch_mean_linear(&disp, &tile) / mu1).log10());
        }
    }
    let q = quartiles(&values)?;
    Ok(CrSweep {
        values,
        median: q.1,
        quartiles: q,
    })
}

/// Quartiles with linear interpolation between order statistics (the common
/// spreadsheet convention): position `(n-1)*p` for p in {0.25, 0.5, 0.75}.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("quartiles of an empty list".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quartile inputs".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |p: f64| {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Ok((at(0.25), at(0.5), at(0.75)))
}
