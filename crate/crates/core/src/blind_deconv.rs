//! Blind deconvolution of a single complex frame.
//!
//! Three stages, usable separately or via [`blind_deconvolve`]:
//! a cepstral estimate of the kernel's magnitude spectrum, a Huber-regularized
//! reflectivity solve, and a phase fit constrained to that magnitude. The
//! working kernel inside the alternation is a full-frame field registered at
//! the grid origin; it is cropped to a compact support only on the way out.

use ndarray::{Array2, Zip};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::linops::{embed_psf, FrequencyOperator, Psf};
use crate::prox::{huber_gradient, huber_value, HuberParams};

/// Non-negative target for the modulus of the kernel's transfer function.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrum {
    mag: Array2<f64>,
}

impl MagnitudeSpectrum {
    pub fn new(mag: Array2<f64>) -> Result<Self> {
        if mag.is_empty() {
            return Err(Error::InvalidParameter("empty magnitude spectrum".into()));
        }
        if !mag.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::NonFinite("magnitude spectrum entries".into()));
        }
        Ok(Self { mag })
    }

    pub fn mag(&self) -> &Array2<f64> {
        &self.mag
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mag.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BdParams {
    pub huber: HuberParams,
    /// Radius, in quefrency samples, of the Gaussian lifter isolating the
    /// smooth spectral envelope.
    pub cepstral_cutoff: f64,
    /// Spatial extent of the kernel returned after cropping.
    pub psf_support: (usize, usize),
    /// Relative objective-change tolerance of the reflectivity solve.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl BdParams {
    /// Defaults scaled to a frame: cutoff at 5% of the short axis, kernel
    /// support 15x15 shrunk (odd) to fit small frames.
    pub fn for_dims(nz: usize, nx: usize) -> Self {
        let odd_fit = |d: usize| {
            let s = d.min(15);
            if s % 2 == 0 {
                s - 1
            } else {
                s
            }
        };
        Self {
            huber: HuberParams::default(),
            cepstral_cutoff: 0.05 * nz.min(nx) as f64,
            psf_support: (odd_fit(nz), odd_fit(nx)),
            inner_tol: 1e-8,
            inner_max_iter: 500,
        }
    }

    pub fn validate_against(&self, nz: usize, nx: usize) -> Result<()> {
        HuberParams::new(self.huber.gamma, self.huber.a)?;
        let short = nz.min(nx) as f64;
        if !(self.cepstral_cutoff > 0.0 && self.cepstral_cutoff <= short) {
            return Err(Error::InvalidParameter(format!(
                "cepstral cutoff {} outside (0, {short}]",
                self.cepstral_cutoff
            )));
        }
        let (kh, kw) = self.psf_support;
        if kh == 0 || kw == 0 || kh > nz || kw > nx {
            return Err(Error::InvalidParameter(format!(
                "psf support {kh}x{kw} does not fit a {nz}x{nx} frame"
            )));
        }
        if !(self.inner_tol > 0.0 && self.inner_tol.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "inner tolerance must be positive, got {}",
                self.inner_tol
            )));
        }
        if self.inner_max_iter == 0 {
            return Err(Error::InvalidParameter("inner_max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_finite_image(g: &Array2<Complex64>) -> Result<()> {
    if g.is_empty() {
        return Err(Error::InvalidParameter("empty image".into()));
    }
    if !g.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return Err(Error::NonFinite("image samples".into()));
    }
    Ok(())
}

/// Circular quefrency distance from the origin along one axis.
fn circular_dist(q: usize, n: usize) -> f64 {
    q.min(n - q) as f64
}

/// Cepstral envelope of `|F(g)|`: the log magnitude spectrum is low-pass
/// filtered in the quefrency domain by a Gaussian lifter, exponentiated, and
/// scaled to a unit maximum. The image phase never enters.
pub fn estimate_psf_magnitude(g: &Array2<Complex64>, p: &BdParams) -> Result<MagnitudeSpectrum> {
    let (nz, nx) = g.dim();
    check_finite_image(g)?;
    p.validate_against(nz, nx)?;
    let fft = Fft2::new(nz, nx);
    let ghat = fft.forward(g);
    let gmax = ghat.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if gmax == 0.0 {
        return Err(Error::InvalidParameter(
            "magnitude estimation needs a nonzero image".into(),
        ));
    }
    // Relative floor keeps the log finite at exact spectral zeros.
    let floor = 1e-15 * gmax;
    let logmag = ghat.mapv(|v| Complex64::new(v.norm().max(floor).ln(), 0.0));
    let mut cepstrum = fft.inverse(&logmag);
    let c2 = 2.0 * p.cepstral_cutoff * p.cepstral_cutoff;
    Zip::indexed(&mut cepstrum).for_each(|(qz, qx), v| {
        let dz = circular_dist(qz, nz);
        let dx = circular_dist(qx, nx);
        *v *= (-(dz * dz + dx * dx) / c2).exp();
    });
    // The lifter is even-symmetric and the log spectrum real, so the smoothed
    // spectrum is real up to rounding; the imaginary part is dropped.
    let smoothed = fft.forward(&cepstrum);
    let mag = smoothed.mapv(|v| v.re.exp());
    let peak = mag.iter().fold(0.0f64, |a, &b| a.max(b));
    MagnitudeSpectrum::new(mag.mapv(|v| v / peak))
}

/// Objective `0.5*|conv(f) - g|_F^2 + huber(f)` and its gradient packed as
/// d/dRe + i*d/dIm.
pub(crate) fn trf_objective_gradient(
    g: &Array2<Complex64>,
    op: &FrequencyOperator,
    huber: &HuberParams,
    f: &Array2<Complex64>,
) -> Result<(f64, Array2<Complex64>)> {
    let mut resid = op.conv2_circ(f)?;
    resid -= g;
    let data = 0.5 * resid.iter().map(|v| v.norm_sqr()).sum::<f64>();
    let mut grad = op.conv2_circ_adjoint(&resid)?;
    grad += &huber_gradient(f, huber);
    Ok((data + huber_value(f, huber), grad))
}

fn trf_objective(
    g: &Array2<Complex64>,
    op: &FrequencyOperator,
    huber: &HuberParams,
    f: &Array2<Complex64>,
) -> Result<f64> {
    let resid = op.conv2_circ(f)?;
    let mut data = 0.0;
    Zip::from(&resid).and(g).for_each(|&r, &gv| data += (r - gv).norm_sqr());
    Ok(0.5 * data + huber_value(f, huber))
}

/// One backtracked descent step from `point`: halves the step until the
/// sufficient-decrease bound holds or the halving budget runs out.
fn backtracked_step(
    g: &Array2<Complex64>,
    op: &FrequencyOperator,
    huber: &HuberParams,
    point: &Array2<Complex64>,
    j_point: f64,
    grad: &Array2<Complex64>,
    step: &mut f64,
) -> Result<(Array2<Complex64>, f64)> {
    let grad_sq = grad.iter().map(|v| v.norm_sqr()).sum::<f64>();
    let mut cand;
    let mut jc;
    let mut halvings = 0;
    loop {
        cand = Zip::from(point)
            .and(grad)
            .map_collect(|&p, &d| p - *step * d);
        jc = trf_objective(g, op, huber, &cand)?;
        if jc <= j_point - 0.5 * *step * grad_sq || halvings >= 80 {
            break;
        }
        *step *= 0.5;
        halvings += 1;
    }
    Ok((cand, jc))
}

/// Accelerated descent on the reflectivity objective with a monotone
/// safeguard: a momentum step that fails to improve falls back to a plain
/// gradient step, and ten consecutive non-improving iterations abort.
pub(crate) fn trf_descent(
    g: &Array2<Complex64>,
    op: &FrequencyOperator,
    p: &BdParams,
    init: Array2<Complex64>,
) -> Result<(Array2<Complex64>, Vec<f64>)> {
    let hmax_sq = op
        .transfer()
        .iter()
        .map(|v| v.norm_sqr())
        .fold(0.0, f64::max);
    let lipschitz = hmax_sq + 2.0 * p.huber.gamma;
    let mut step = 1.0 / lipschitz;

    let mut f = init;
    let mut jf = trf_objective(g, op, &p.huber, &f)?;
    if !jf.is_finite() {
        return Err(Error::NonFinite("reflectivity objective at initialization".into()));
    }
    let mut trace = vec![jf];
    let mut y = f.clone();
    let mut theta = 1.0f64;
    let mut fails = 0;

    for k in 1..=p.inner_max_iter {
        let (jy, grad_y) = trf_objective_gradient(g, op, &p.huber, &y)?;
        let (mut cand, mut jc) = backtracked_step(g, op, &p.huber, &y, jy, &grad_y, &mut step)?;

        let mut restarted = false;
        if !(jc.is_finite() && jc <= jf) {
            // Momentum overshoot: retry as a plain step from the last accepted point.
            let (_, grad_f) = trf_objective_gradient(g, op, &p.huber, &f)?;
            let plain = backtracked_step(g, op, &p.huber, &f, jf, &grad_f, &mut step)?;
            cand = plain.0;
            jc = plain.1;
            restarted = true;
        }
        if !(jc.is_finite() && jc <= jf) {
            fails += 1;
            if fails >= 10 {
                return Err(Error::Linalg(format!(
                    "reflectivity solve made no progress for {fails} consecutive iterations (iteration {k})"
                )));
            }
            y = f.clone();
            theta = 1.0;
            continue;
        }
        fails = 0;

        let improvement = (jf - jc) / jf.abs().max(1e-12);
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        if restarted {
            y = cand.clone();
            theta = 1.0;
        } else {
            let w = (theta - 1.0) / theta_next;
            y = Zip::from(&cand).and(&f).map_collect(|&c, &prev| c + w * (c - prev));
            theta = theta_next;
        }
        f = cand;
        jf = jc;
        trace.push(jf);
        if improvement < p.inner_tol {
            break;
        }
    }
    Ok((f, trace))
}

/// Minimizes the blur-model misfit plus the smooth sparsity penalty over the
/// reflectivity, starting from the observation itself. The returned estimate
/// never scores worse than that starting point.
pub fn estimate_trf(g: &Array2<Complex64>, psf: &Psf, p: &BdParams) -> Result<Array2<Complex64>> {
    let (nz, nx) = g.dim();
    check_finite_image(g)?;
    p.validate_against(nz, nx)?;
    let op = embed_psf(psf, nz, nx)?;
    Ok(trf_descent(g, &op, p, g.clone())?.0)
}

/// Full-frame kernel field whose transfer modulus equals `mag` exactly and
/// whose phase minimizes `|F(g) - H F(f)|^2` bin by bin: the phase of
/// `F(g) * conj(F(f))`, taken as zero where that product vanishes. The field
/// is registered at the grid origin like an embedded kernel.
pub fn fit_constrained_field(
    g: &Array2<Complex64>,
    f: &Array2<Complex64>,
    mag: &MagnitudeSpectrum,
) -> Result<Array2<Complex64>> {
    if g.dim() != f.dim() || g.dim() != mag.dims() {
        return Err(Error::DimensionMismatch(format!(
            "image {:?}, reflectivity {:?}, magnitude {:?}",
            g.dim(),
            f.dim(),
            mag.dims()
        )));
    }
    check_finite_image(g)?;
    check_finite_image(f)?;
    let (nz, nx) = g.dim();
    let fft = Fft2::new(nz, nx);
    let ghat = fft.forward(g);
    let fhat = fft.forward(f);
    let mut hhat = Array2::zeros((nz, nx));
    Zip::from(&mut hhat)
        .and(&ghat)
        .and(&fhat)
        .and(mag.mag())
        .for_each(|h, &gv, &fv, &m| {
            let prod = gv * fv.conj();
            let norm = prod.norm();
            *h = if norm == 0.0 {
                Complex64::new(m, 0.0)
            } else {
                prod * (m / norm)
            };
        });
    Ok(fft.inverse(&hhat))
}

/// Crops a full-frame origin-registered kernel field to a compact support
/// window around its energy centroid and energy-normalizes it. The window is
/// kept over the origin tap so the crop preserves registration.
fn crop_field(field: &Array2<Complex64>, support: (usize, usize)) -> Result<Psf> {
    let (nz, nx) = field.dim();
    let (kh, kw) = support;
    if kh > nz || kw > nx || kh == 0 || kw == 0 {
        return Err(Error::InvalidParameter(format!(
            "crop support {kh}x{kw} does not fit a {nz}x{nx} field"
        )));
    }
    let (sz, sx) = (nz / 2, nx / 2);
    // Work on the center-shifted field so the window never wraps.
    let shifted = Array2::from_shape_fn((nz, nx), |(i, j)| {
        field[[(i + nz - sz) % nz, (j + nx - sx) % nx]]
    });
    let mut total = 0.0;
    let mut mz = 0.0;
    let mut mx = 0.0;
    Zip::indexed(&shifted).for_each(|(i, j), v| {
        let e = v.norm_sqr();
        total += e;
        mz += e * i as f64;
        mx += e * j as f64;
    });
    if total == 0.0 {
        return Err(Error::InvalidParameter("cannot crop an all-zero kernel field".into()));
    }
    let cz = (mz / total).round() as isize;
    let cx = (mx / total).round() as isize;
    let clamp_window = |centroid: isize, extent: usize, dim: usize, origin: usize| -> usize {
        let free = (centroid - (extent / 2) as isize).clamp(0, (dim - extent) as isize) as usize;
        // Keep the origin tap inside the window.
        free.clamp(origin.saturating_sub(extent - 1), origin.min(dim - extent))
    };
    let top = clamp_window(cz, kh, nz, sz);
    let left = clamp_window(cx, kw, nx, sx);
    let kernel = Array2::from_shape_fn((kh, kw), |(i, j)| shifted[[top + i, left + j]]);
    Psf::new(kernel, (sz - top, sx - left))?.normalize_energy()
}

/// [`fit_constrained_field`] followed by the compact crop. The magnitude
/// constraint holds exactly on the field; cropping trades a little of it for
/// compact support.
pub fn fit_constrained_psf(
    g: &Array2<Complex64>,
    f: &Array2<Complex64>,
    mag: &MagnitudeSpectrum,
    p: &BdParams,
) -> Result<Psf> {
    let field = fit_constrained_field(g, f, mag)?;
    crop_field(&field, p.psf_support)
}

/// Output of the alternating estimation.
#[derive(Clone, Debug)]
pub struct BlindDeconvResult {
    pub psf: Psf,
    pub trf: Array2<Complex64>,
    pub magnitude: MagnitudeSpectrum,
    /// Blur-model misfit `0.5*|g - conv(trf)|_F^2` after each outer iteration.
    pub data_fit: Vec<f64>,
    /// Misfit plus the sparsity penalty after each outer iteration.
    pub objective: Vec<f64>,
}

/// Alternates the reflectivity solve and the constrained phase fit, starting
/// from the zero-phase kernel (inverse transform of the magnitude estimate).
/// The reflectivity warm-starts across outer iterations, so the composite
/// objective never increases.
pub fn blind_deconvolve(
    g: &Array2<Complex64>,
    p: &BdParams,
    n_outer: usize,
) -> Result<BlindDeconvResult> {
    let (nz, nx) = g.dim();
    check_finite_image(g)?;
    p.validate_against(nz, nx)?;
    if n_outer == 0 {
        return Err(Error::InvalidParameter("n_outer must be at least 1".into()));
    }
    let fft = Fft2::new(nz, nx);
    let mag = estimate_psf_magnitude(g, p)?;
    let zero_phase = mag.mag().mapv(|m| Complex64::new(m, 0.0));
    let mut field = fft.inverse(&zero_phase);
    let mut trf = g.clone();
    let mut data_fit = Vec::with_capacity(n_outer);
    let mut objective = Vec::with_capacity(n_outer);

    for _ in 0..n_outer {
        let kernel = Psf::new(field, (0, 0))?;
        let op = embed_psf(&kernel, nz, nx)?;
        trf = trf_descent(g, &op, p, trf)?.0;
        field = fit_constrained_field(g, &trf, &mag)?;

        let new_op = {
            let k = Psf::new(field.clone(), (0, 0))?;
            embed_psf(&k, nz, nx)?
        };
        let resid = new_op.conv2_circ(&trf)?;
        let mut misfit = 0.0;
        Zip::from(&resid).and(g).for_each(|&r, &gv| misfit += (r - gv).norm_sqr());
        let fit = 0.5 * misfit;
        data_fit.push(fit);
        objective.push(fit + huber_value(&trf, &p.huber));
    }

    let psf = crop_field(&field, p.psf_support)?;
    Ok(BlindDeconvResult {
        psf,
        trf,
        magnitude: mag,
        data_fit,
        objective,
    })
}

/// Peak-aligned normalized cross-correlation of two kernels: the kernels are
/// overlaid at their modulus peaks and the normalized inner product over the
/// overlap is returned (1 means identical up to scale and a global phase).
pub fn kernel_ncc(a: &Psf, b: &Psf) -> f64 {
    fn peak(k: &Array2<Complex64>) -> (usize, usize) {
        let mut best = (0, 0);
        let mut val = -1.0;
        for (idx, v) in k.indexed_iter() {
            if v.norm() > val {
                val = v.norm();
                best = idx;
            }
        }
        best
    }
    let (ka, kb) = (a.kernel(), b.kernel());
    let (pa, qa) = peak(ka);
    let (pb, qb) = peak(kb);
    let mut inner = Complex64::new(0.0, 0.0);
    for ((i, j), va) in ka.indexed_iter() {
        let bi = i as isize - pa as isize + pb as isize;
        let bj = j as isize - qa as isize + qb as isize;
        if bi >= 0 && bj >= 0 && (bi as usize) < kb.nrows() && (bj as usize) < kb.ncols() {
            inner += va.conj() * kb[[bi as usize, bj as usize]];
        }
    }
    let ea: f64 = ka.iter().map(|v| v.norm_sqr()).sum();
    let eb: f64 = kb.iter().map(|v| v.norm_sqr()).sum();
    if ea == 0.0 || eb == 0.0 {
        return 0.0;
    }
    inner.norm() / (ea * eb).sqrt()
}
