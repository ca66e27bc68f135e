//! Synthetic flow phantom: static speckle tissue, two rectangles of moving
//! blood scatterers blurred by a known kernel, and calibrated additive noise.

use ndarray::Array2;
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::casorati::{CasoratiMatrix, StackMeta};
use crate::error::{Error, Result};
use crate::linops::{embed_psf, Psf};
use crate::metrics::{power_doppler, PatchRect, PowerDopplerImage};

/// Geometry of the reference phantom the defaults are scaled from.
const REF_NZ: usize = 451;
const REF_NX: usize = 161;
const REF_RECT1: (usize, usize) = (12, 70);
const REF_RECT2: (usize, usize) = (10, 35);

#[derive(Clone, Debug)]
pub struct PhantomConfig {
    pub nz: usize,
    pub nx: usize,
    pub nt: usize,
    pub rect1: PatchRect,
    pub rect2: PatchRect,
    pub seed: u64,
    /// Scale of the blood scatterer amplitudes relative to unit tissue speckle.
    pub blood_amplitude: f64,
    /// Largest per-frame circular shift of a rectangle interior, per axis.
    pub shift_max: usize,
    pub psf: Psf,
    pub meta: StackMeta,
}

impl PhantomConfig {
    /// Defaults scaled from the reference geometry: rectangle sizes shrink
    /// proportionally (never below one pixel), anchors sit at 30% and 60%
    /// depth horizontally centered, and the blood amplitude keeps the
    /// blood-to-tissue energy ratio near -20 dB.
    pub fn for_dims(nz: usize, nx: usize, nt: usize, seed: u64) -> Result<Self> {
        if nz == 0 || nx == 0 || nt == 0 {
            return Err(Error::InvalidParameter(format!(
                "phantom dims must be nonzero, got {nz}x{nx}x{nt}"
            )));
        }
        let scale_z = |h: usize| ((h * nz) as f64 / REF_NZ as f64).round().max(1.0) as usize;
        let scale_x = |w: usize| ((w * nx) as f64 / REF_NX as f64).round().max(1.0) as usize;
        let place = |frac: f64, extent: usize, dim: usize| -> usize {
            ((dim as f64 * frac).round() as usize).min(dim.saturating_sub(extent))
        };
        let (h1, w1) = (scale_z(REF_RECT1.0), scale_x(REF_RECT1.1));
        let (h2, w2) = (scale_z(REF_RECT2.0), scale_x(REF_RECT2.1));
        if h1 > nz || w1 > nx || h2 > nz || w2 > nx {
            return Err(Error::InvalidParameter(format!(
                "frame {nz}x{nx} cannot hold the scaled flow rectangles"
            )));
        }
        let rect1 = PatchRect::new(place(0.30, h1, nz), (nx - w1) / 2, h1, w1);
        let rect2 = PatchRect::new(place(0.60, h2, nz), (nx - w2) / 2, h2, w2);
        let area = (h1 * w1 + h2 * w2) as f64;
        let odd_fit = |d: usize| {
            let s = d.min(15);
            if s % 2 == 0 {
                s - 1
            } else {
                s
            }
        };
        let psf = synth_psf(0.25, 2.0, 3.0, (odd_fit(nz), odd_fit(nx)))?;
        let cfg = Self {
            nz,
            nx,
            nt,
            rect1,
            rect2,
            seed,
            blood_amplitude: (0.01 * (nz * nx) as f64 / area).sqrt(),
            shift_max: 3,
            psf,
            meta: StackMeta {
                dz_cm: Some(0.0086),
                dx_cm: Some(0.0333),
                frame_rate_hz: Some(12_800.0),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nz == 0 || self.nx == 0 || self.nt == 0 {
            return Err(Error::InvalidParameter("phantom dims must be nonzero".into()));
        }
        self.rect1.fits(self.nz, self.nx)?;
        self.rect2.fits(self.nz, self.nx)?;
        if !(self.blood_amplitude >= 0.0 && self.blood_amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "blood amplitude must be finite and non-negative, got {}",
                self.blood_amplitude
            )));
        }
        let (kh, kw) = self.psf.kernel().dim();
        if kh > self.nz || kw > self.nx {
            return Err(Error::InvalidParameter(format!(
                "blur kernel {kh}x{kw} exceeds the {}x{} frame",
                self.nz, self.nx
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PhantomTruth {
    pub s_observed: CasoratiMatrix,
    /// Pre-blur blood scatterers.
    pub x_true: CasoratiMatrix,
    pub t_true: CasoratiMatrix,
    pub psf_true: Psf,
    pub pd_true: PowerDopplerImage,
}

/// Axially modulated Gaussian kernel:
/// `cos(2*pi*fc*z) * exp(-z^2/(2*sz^2) - x^2/(2*sx^2))`, energy-normalized.
pub fn synth_psf(fc_fraction: f64, sigma_z: f64, sigma_x: f64, support: (usize, usize)) -> Result<Psf> {
    let (kh, kw) = support;
    if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
        return Err(Error::InvalidParameter(format!(
            "kernel support must be odd in both dims, got {kh}x{kw}"
        )));
    }
    if !(sigma_z > 0.0 && sigma_z.is_finite() && sigma_x > 0.0 && sigma_x.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "kernel widths must be positive, got ({sigma_z}, {sigma_x})"
        )));
    }
    if !fc_fraction.is_finite() {
        return Err(Error::InvalidParameter("modulation frequency must be finite".into()));
    }
    let (cz, cx) = (kh / 2, kw / 2);
    let kernel = Array2::from_shape_fn((kh, kw), |(i, j)| {
        let z = i as f64 - cz as f64;
        let x = j as f64 - cx as f64;
        let env = (-z * z / (2.0 * sigma_z * sigma_z) - x * x / (2.0 * sigma_x * sigma_x)).exp();
        Complex64::new((std::f64::consts::TAU * fc_fraction * z).cos() * env, 0.0)
    });
    Psf::new(kernel, (cz, cx))?.normalize_energy()
}

fn gaussian_patch(rng: &mut ChaCha12Rng, h: usize, w: usize, amp: f64) -> Array2<Complex64> {
    Array2::from_shape_fn((h, w), |_| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * amp
    })
}

/// Adds the rectangle's base content into the frame, circularly shifted
/// within the rectangle by `(dz, dx)`.
fn add_shifted_rect(
    frame: &mut Array2<Complex64>,
    rect: &PatchRect,
    base: &Array2<Complex64>,
    dz: i64,
    dx: i64,
) {
    let (h, w) = (rect.height as i64, rect.width as i64);
    for i in 0..rect.height {
        let src_i = (i as i64 - dz).rem_euclid(h) as usize;
        for j in 0..rect.width {
            let src_j = (j as i64 - dx).rem_euclid(w) as usize;
            frame[[rect.top + i, rect.left + j]] += base[[src_i, src_j]];
        }
    }
}

/// Builds the phantom: one speckle frame repeated as tissue, per-frame
/// shifted rectangle interiors as blood, observation = blurred blood plus
/// tissue. The draw order (tissue frame, both base rectangles, then one
/// offset pair per rectangle per frame) is fixed, so a seed pins every value.
pub fn simulate(config: &PhantomConfig) -> Result<PhantomTruth> {
    config.validate()?;
    let (nz, nx, nt) = (config.nz, config.nx, config.nt);
    let rows = nz * nx;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    let tissue_frame = gaussian_patch(&mut rng, nz, nx, 1.0);
    let base1 = gaussian_patch(&mut rng, config.rect1.height, config.rect1.width, config.blood_amplitude);
    let base2 = gaussian_patch(&mut rng, config.rect2.height, config.rect2.width, config.blood_amplitude);

    let mut t_data = Array2::zeros((rows, nt));
    let mut x_data = Array2::zeros((rows, nt));
    let shift = config.shift_max as i64;
    for t in 0..nt {
        let (dz1, dx1, dz2, dx2) = (
            rng.random_range(-shift..=shift),
            rng.random_range(-shift..=shift),
            rng.random_range(-shift..=shift),
            rng.random_range(-shift..=shift),
        );
        let mut frame = Array2::zeros((nz, nx));
        add_shifted_rect(&mut frame, &config.rect1, &base1, dz1, dx1);
        add_shifted_rect(&mut frame, &config.rect2, &base2, dz2, dx2);
        for col in 0..nx {
            for z in 0..nz {
                let r = z + nz * col;
                x_data[[r, t]] = frame[[z, col]];
                t_data[[r, t]] = tissue_frame[[z, col]];
            }
        }
    }

    let meta = config.meta.clone();
    let x_true = CasoratiMatrix::new(x_data, nz, nx, meta.clone())?;
    let t_true = CasoratiMatrix::new(t_data, nz, nx, meta)?;
    let psf_true = config.psf.clone().normalize_energy()?;
    let blurred = embed_psf(&psf_true, nz, nx)?.apply_to_casorati(&x_true)?;
    let s_observed = x_true.with_data(blurred.data() + t_true.data())?;
    let pd_true = power_doppler(&x_true)?;
    Ok(PhantomTruth {
        s_observed,
        x_true,
        t_true,
        psf_true,
        pd_true,
    })
}

/// Replaces the observation with a noisy copy whose blurred-signal-to-noise
/// ratio is `bsnr_db`: the noise variance solves
/// `bsnr = 10*log10(|HX - E(HX)|_F^2 / (N * var))` with `N` the total sample
/// count. `+inf` is the no-noise sentinel and returns the truth unchanged.
pub fn add_noise_bsnr(truth: &PhantomTruth, bsnr_db: f64, seed: u64) -> Result<PhantomTruth> {
    if bsnr_db.is_nan() || bsnr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidParameter(format!("BSNR of {bsnr_db} dB is not usable")));
    }
    if bsnr_db == f64::INFINITY {
        return Ok(truth.clone());
    }
    let x = &truth.x_true;
    let hx = embed_psf(&truth.psf_true, x.nz(), x.nx())?.apply_to_casorati(x)?;
    let n = (x.nz() * x.nx() * x.nt()) as f64;
    let mean = hx.data().iter().sum::<Complex64>() / n;
    let power: f64 = hx.data().iter().map(|v| (v - mean).norm_sqr()).sum();
    let variance = power / (n * 10f64.powf(bsnr_db / 10.0));
    let sigma = (variance / 2.0).sqrt();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let noisy = Array2::from_shape_fn(truth.s_observed.data().dim(), |idx| {
        let g = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        truth.s_observed.data()[idx] + g * sigma
    });
    let mut out = truth.clone();
    out.s_observed = truth.s_observed.with_data(noisy)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::to_faer;
    use crate::metrics::DB_NUMERIC_FLOOR;

    fn desk_config(seed: u64) -> PhantomConfig {
        PhantomConfig::for_dims(48, 40, 12, seed).unwrap()
    }

    fn bits(c: &CasoratiMatrix) -> Vec<(u64, u64)> {
        c.data().iter().map(|v| (v.re.to_bits(), v.im.to_bits())).collect()
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = desk_config(7);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(bits(&a.s_observed), bits(&b.s_observed));
        assert_eq!(bits(&a.x_true), bits(&b.x_true));
        assert_eq!(bits(&a.t_true), bits(&b.t_true));
        assert_eq!(a.pd_true.db(), b.pd_true.db());
        let c = simulate(&desk_config(8)).unwrap();
        assert_ne!(bits(&a.s_observed), bits(&c.s_observed));
    }

    #[test]
    fn tissue_is_numerically_rank_one() {
        let truth = simulate(&desk_config(3)).unwrap();
        let svd = to_faer(truth.t_true.data()).thin_svd().unwrap();
        let s = svd.S();
        assert!(s[1].re <= 1e-12 * s[0].re, "sigma2/sigma1 = {}", s[1].re / s[0].re);
        for t in 1..truth.t_true.nt() {
            assert_eq!(
                truth.t_true.frame(t).mapv(|v| (v.re.to_bits(), v.im.to_bits())),
                truth.t_true.frame(0).mapv(|v| (v.re.to_bits(), v.im.to_bits()))
            );
        }
    }

    #[test]
    fn observation_is_blur_plus_tissue() {
        let truth = simulate(&desk_config(5)).unwrap();
        let op = embed_psf(&truth.psf_true, 48, 40).unwrap();
        let hx = op.apply_to_casorati(&truth.x_true).unwrap();
        let expected = hx.data() + truth.t_true.data();
        let num: f64 = (truth.s_observed.data() - &expected)
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den: f64 = truth.s_observed.data().iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(num <= 1e-9 * den, "consistency residual {}", num / den);
        assert!((truth.psf_true.energy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_blood_amplitude_collapses_to_tissue() {
        let mut cfg = desk_config(2);
        cfg.blood_amplitude = 0.0;
        let truth = simulate(&cfg).unwrap();
        assert_eq!(bits(&truth.s_observed), bits(&truth.t_true));
        assert!(truth.pd_true.db().iter().all(|&v| v == DB_NUMERIC_FLOOR));
    }

    #[test]
    fn blood_moves_between_frames() {
        let truth = simulate(&desk_config(1)).unwrap();
        let mut any_motion = false;
        for t in 1..truth.x_true.nt() {
            if truth.x_true.frame(t) != truth.x_true.frame(t - 1) {
                any_motion = true;
            }
        }
        assert!(any_motion, "blood never moved");
        // Interior energy is conserved by the circular shift.
        let e0: f64 = truth.x_true.frame(0).iter().map(|v| v.norm_sqr()).sum();
        for t in 1..truth.x_true.nt() {
            let e: f64 = truth.x_true.frame(t).iter().map(|v| v.norm_sqr()).sum();
            assert!((e - e0).abs() <= 1e-9 * e0);
        }
    }

    #[test]
    fn default_geometry_scales_from_reference() {
        let cfg = PhantomConfig::for_dims(451, 161, 4, 0).unwrap();
        assert_eq!((cfg.rect1.height, cfg.rect1.width), (12, 70));
        assert_eq!((cfg.rect2.height, cfg.rect2.width), (10, 35));
        assert_eq!(cfg.psf.kernel().dim(), (15, 15));
        // Blood-to-tissue energy ratio -20 dB by construction.
        let area = (12 * 70 + 10 * 35) as f64;
        let expected = (0.01 * (451.0 * 161.0) / area).sqrt();
        assert!((cfg.blood_amplitude - expected).abs() < 1e-12);

        let small = PhantomConfig::for_dims(128, 64, 10, 0).unwrap();
        assert!(small.rect1.width >= 1 && small.rect1.height >= 1);
        small.rect1.fits(128, 64).unwrap();
        small.rect2.fits(128, 64).unwrap();
    }

    #[test]
    fn synth_kernel_properties() {
        let flat = synth_psf(0.0, 100.0, 100.0, (5, 5)).unwrap();
        let vals: Vec<f64> = flat.kernel().iter().map(|v| v.norm()).collect();
        let (mx, mn) = vals.iter().fold((0.0f64, f64::INFINITY), |(a, b), &v| (a.max(v), b.min(v)));
        assert!(mx / mn < 1.1, "flat limit ratio {}", mx / mn);

        let k = synth_psf(0.25, 2.0, 3.0, (15, 15)).unwrap();
        assert!((k.energy() - 1.0).abs() <= 1e-12);
        let mut raw_energy = 0.0;
        for i in 0..15 {
            for j in 0..15 {
                let z = i as f64 - 7.0;
                let x = j as f64 - 7.0;
                let v = (std::f64::consts::TAU * 0.25 * z).cos()
                    * (-z * z / 8.0 - x * x / 18.0).exp();
                raw_energy += v * v;
            }
        }
        let expected_center = 1.0 / raw_energy.sqrt();
        assert!((k.kernel()[[7, 7]].re - expected_center).abs() < 1e-12);
        assert_eq!(k.center(), (7, 7));

        assert!(synth_psf(0.25, 2.0, 3.0, (4, 5)).is_err());
        assert!(synth_psf(0.25, 0.0, 3.0, (5, 5)).is_err());
        assert!(synth_psf(0.25, 2.0, -1.0, (5, 5)).is_err());
    }

    #[test]
    fn realized_bsnr_matches_request() {
        let cfg = PhantomConfig::for_dims(64, 64, 50, 21).unwrap();
        let truth = simulate(&cfg).unwrap();
        let hx = embed_psf(&truth.psf_true, 64, 64)
            .unwrap()
            .apply_to_casorati(&truth.x_true)
            .unwrap();
        let n = (64 * 64 * 50) as f64;
        let mean = hx.data().iter().sum::<Complex64>() / n;
        let power: f64 = hx.data().iter().map(|v| (v - mean).norm_sqr()).sum();

        for (trial, bsnr) in [(1u64, 15.0), (2, 30.0), (3, 5.0)] {
            let noisy = add_noise_bsnr(&truth, bsnr, 1000 + trial).unwrap();
            let noise = noisy.s_observed.data() - truth.s_observed.data();
            let var = noise.iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
            let realized = 10.0 * (power / (n * var)).log10();
            assert!(
                (realized - bsnr).abs() <= 0.1,
                "requested {bsnr} dB, realized {realized} dB"
            );
        }
    }

    #[test]
    fn infinite_bsnr_is_noiseless_sentinel() {
        let truth = simulate(&desk_config(4)).unwrap();
        let same = add_noise_bsnr(&truth, f64::INFINITY, 99).unwrap();
        assert_eq!(bits(&truth.s_observed), bits(&same.s_observed));
        assert!(add_noise_bsnr(&truth, f64::NAN, 0).is_err());
        assert!(add_noise_bsnr(&truth, f64::NEG_INFINITY, 0).is_err());
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = desk_config(0);
        cfg.rect1 = PatchRect::new(45, 0, 12, 10);
        assert!(simulate(&cfg).is_err());

        let mut cfg = desk_config(0);
        cfg.blood_amplitude = -1.0;
        assert!(simulate(&cfg).is_err());

        let mut cfg = desk_config(0);
        cfg.psf = synth_psf(0.2, 1.0, 1.0, (49, 49)).unwrap();
        assert!(simulate(&cfg).is_err());

        assert!(PhantomConfig::for_dims(0, 10, 10, 0).is_err());
    }
}
