//! Proximal operators and the smooth sparsity penalty shared by the solvers.

use faer::Mat;
use ndarray::Array2;
use num_complex::Complex64;

use crate::dense::{from_faer, to_faer};
use crate::error::{Error, Result};

/// Complex soft thresholding: `z * max(1 - tau/|z|, 0)` per entry.
pub fn soft_threshold(z: &Array2<Complex64>, tau: f64) -> Result<Array2<Complex64>> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "soft threshold requires tau >= 0, got {tau}"
        )));
    }
    Ok(z.mapv(|v| {
        let n = v.norm();
        if n <= tau {
            Complex64::new(0.0, 0.0)
        } else {
            v * (1.0 - tau / n)
        }
    }))
}

/// Singular value thresholding through an economy SVD:
/// `U * max(S - tau, 0) * V^H`.
pub fn svt(z: &Array2<Complex64>, tau: f64) -> Result<Array2<Complex64>> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "singular value threshold requires tau >= 0, got {tau}"
        )));
    }
    Ok(svt_thin(z, tau)?.0)
}

/// SVT plus the nuclear norm of the result, choosing a Gram-matrix route for
/// tall inputs. Same fixed math as `svt`; the routes are cross-checked in tests.
pub(crate) fn svt_with_nuclear(
    z: &Array2<Complex64>,
    tau: f64,
) -> Result<(Array2<Complex64>, f64, usize)> {
    if z.nrows() >= 4 * z.ncols() {
        svt_gram(z, tau)
    } else {
        svt_thin(z, tau)
    }
}

fn svt_thin(z: &Array2<Complex64>, tau: f64) -> Result<(Array2<Complex64>, f64, usize)> {
    let (m, n) = z.dim();
    let svd = to_faer(z)
        .thin_svd()
        .map_err(|e| Error::Linalg(format!("SVD failed: {e:?}")))?;
    let k = m.min(n);
    let s = svd.S();
    let kept: Vec<usize> = (0..k).filter(|&i| s[i].re > tau).collect();
    if kept.is_empty() {
        return Ok((Array2::zeros((m, n)), 0.0, 0));
    }
    let r = kept.len();
    let u = svd.U();
    let v = svd.V();
    let us = Mat::from_fn(m, r, |i, j| u[(i, kept[j])] * (s[kept[j]].re - tau));
    let vr = Mat::from_fn(n, r, |i, j| v[(i, kept[j])]);
    let out = &us * vr.adjoint();
    let nuclear = kept.iter().map(|&i| s[i].re - tau).sum();
    Ok((from_faer(&out), nuclear, r))
}

// Right singular subspace from the nt x nt Gram matrix; avoids factoring the
// tall side. Accuracy of sigma = sqrt(eig) is ample for thresholded values.
fn svt_gram(z: &Array2<Complex64>, tau: f64) -> Result<(Array2<Complex64>, f64, usize)> {
    let (m, n) = z.dim();
    let a = to_faer(z);
    let gram = a.adjoint() * &a;
    let eig = gram
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Linalg(format!("eigendecomposition failed: {e:?}")))?;
    let lam = eig.S();
    let evecs = eig.U();
    let mut kept: Vec<(usize, f64)> = (0..n)
        .filter_map(|i| {
            let sigma = lam[i].re.max(0.0).sqrt();
            (sigma > tau).then_some((i, sigma))
        })
        .collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1));
    if kept.is_empty() {
        return Ok((Array2::zeros((m, n)), 0.0, 0));
    }
    let r = kept.len();
    let vr = Mat::from_fn(n, r, |i, j| evecs[(i, kept[j].0)]);
    let w = &a * &vr;
    // scale column j by (sigma_j - tau)/sigma_j, turning A*V_r into U_r*(S_r - tau)
    let ws = Mat::from_fn(m, r, |i, j| {
        let sigma = kept[j].1;
        w[(i, j)] * ((sigma - tau) / sigma)
    });
    let out = &ws * vr.adjoint();
    let nuclear = kept.iter().map(|(_, s)| s - tau).sum();
    Ok((from_faer(&out), nuclear, r))
}

/// Parameters of the smooth approximate-l1 penalty.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HuberParams {
    pub gamma: f64,
    pub a: f64,
}

impl HuberParams {
    pub fn new(gamma: f64, a: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "huber gamma must be positive, got {gamma}"
            )));
        }
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "huber transition point must be positive, got {a}"
            )));
        }
        Ok(Self { gamma, a })
    }
}

impl Default for HuberParams {
    fn default() -> Self {
        Self {
            gamma: 0.002,
            a: 0.05,
        }
    }
}

/// `gamma * sum(|f|^2 if |f| <= a else 2a|f| - a^2)`, quadratic near zero and
/// linear in the modulus past the transition point.
pub fn huber_value(f: &Array2<Complex64>, p: &HuberParams) -> f64 {
    let mut acc = 0.0;
    for v in f.iter() {
        let m = v.norm();
        acc += if m <= p.a { m * m } else { 2.0 * p.a * m - p.a * p.a };
    }
    p.gamma * acc
}

/// Gradient of `huber_value` packed as d/dRe + i*d/dIm per entry.
/// Lipschitz constant 2*gamma.
pub fn huber_gradient(f: &Array2<Complex64>, p: &HuberParams) -> Array2<Complex64> {
    f.mapv(|v| {
        let m = v.norm();
        if m <= p.a {
            v * (2.0 * p.gamma)
        } else {
            v * (2.0 * p.gamma * p.a / m)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rand_mat(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Array2<Complex64> {
        Array2::from_shape_fn((rows, cols), |_| {
            Complex64::new(
                (rng.random::<f64>() * 2.0 - 1.0) * scale,
                (rng.random::<f64>() * 2.0 - 1.0) * scale,
            )
        })
    }

    fn frob(a: &Array2<Complex64>) -> f64 {
        a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    fn rel_err(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        let d: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        d / frob(b).max(1e-300)
    }

    fn singular_values(a: &Array2<Complex64>) -> Vec<f64> {
        let svd = crate::dense::to_faer(a).thin_svd().unwrap();
        let k = a.nrows().min(a.ncols());
        (0..k).map(|i| svd.S()[i].re).collect()
    }

    // prox of tau*|.| along the modulus: locate the radial minimizer by grid
    // search (step 1e-4) then refine by ternary search.
    fn radial_prox_oracle(modulus: f64, tau: f64) -> f64 {
        let obj = |b: f64| tau * b + 0.5 * (b - modulus) * (b - modulus);
        let hi = modulus + 1.0;
        let steps = (hi / 1e-4).ceil() as usize;
        let mut best = (obj(0.0), 0.0);
        for k in 0..=steps {
            let b = hi * k as f64 / steps as f64;
            let v = obj(b);
            if v < best.0 {
                best = (v, b);
            }
        }
        let (mut lo, mut hi) = ((best.1 - 2e-4).max(0.0), best.1 + 2e-4);
        for _ in 0..80 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if obj(m1) < obj(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn soft_threshold_matches_radial_grid_search() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..30 {
            let z = Complex64::new(rng.random::<f64>() * 3.0 - 1.5, rng.random::<f64>() * 3.0 - 1.5);
            let tau = rng.random::<f64>() * 1.5;
            let input = Array2::from_elem((1, 1), z);
            let out = soft_threshold(&input, tau).unwrap()[[0, 0]];
            let want = radial_prox_oracle(z.norm(), tau);
            assert!(
                (out.norm() - want).abs() < 1e-6,
                "|out| {} vs oracle {}",
                out.norm(),
                want
            );
            if out.norm() > 0.0 {
                // phase preserved
                let ph = out / z;
                assert!((ph.im).abs() < 1e-12 && ph.re > 0.0);
            }
        }
    }

    #[test]
    fn soft_threshold_hand_case() {
        let z = Array2::from_elem((1, 1), Complex64::new(3.0, -4.0));
        let out = soft_threshold(&z, 2.0).unwrap()[[0, 0]];
        assert!((out - Complex64::new(1.8, -2.4)).norm() < 1e-12);
    }

    #[test]
    fn soft_threshold_kills_small_entries() {
        let z = Array2::from_elem((2, 2), Complex64::new(0.3, 0.4));
        let out = soft_threshold(&z, 0.5).unwrap();
        assert!(out.iter().all(|v| v.norm() == 0.0));
        let out2 = soft_threshold(&z, 0.5 - 1e-9).unwrap();
        assert!(out2.iter().all(|v| v.norm() > 0.0));
    }

    #[test]
    fn soft_threshold_zero_tau_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let z = rand_mat(&mut rng, 4, 3, 1.0);
        let out = soft_threshold(&z, 0.0).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn soft_threshold_rejects_negative_tau() {
        let z = Array2::zeros((1, 1));
        assert!(matches!(
            soft_threshold(&z, -0.1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            soft_threshold(&z, f64::NAN),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn soft_threshold_is_non_expansive() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..20 {
            let x = rand_mat(&mut rng, 5, 4, 2.0);
            let y = rand_mat(&mut rng, 5, 4, 2.0);
            let tau = rng.random::<f64>();
            let dx = soft_threshold(&x, tau).unwrap() - soft_threshold(&y, tau).unwrap();
            assert!(frob(&dx) <= frob(&(x - y)) + 1e-12);
        }
    }

    #[test]
    fn svt_diagonal_hand_case() {
        let mut z = Array2::zeros((2, 2));
        z[[0, 0]] = Complex64::new(5.0, 0.0);
        z[[1, 1]] = Complex64::new(1.0, 0.0);
        let out = svt(&z, 2.0).unwrap();
        assert!((out[[0, 0]] - Complex64::new(3.0, 0.0)).norm() < 1e-10);
        for &(i, j) in &[(0usize, 1usize), (1, 0), (1, 1)] {
            assert!(out[[i, j]].norm() < 1e-10);
        }
    }

    #[test]
    fn svt_rank_one_hand_case() {
        // 3 * u v^H thresholded by 1 must give 2 * u v^H
        let u = [
            Complex64::new(0.6, 0.0),
            Complex64::new(0.0, 0.8),
        ];
        let v = [
            Complex64::new(1.0 / 2.0f64.sqrt(), 0.0),
            Complex64::new(0.5, 0.5),
        ];
        let z = Array2::from_shape_fn((2, 2), |(i, j)| u[i] * v[j].conj() * 3.0);
        let want = z.mapv(|x| x * (2.0 / 3.0));
        let out = svt(&z, 1.0).unwrap();
        assert!(rel_err(&out, &want) < 1e-10);
    }

    #[test]
    fn svt_shrinks_every_singular_value() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let z = rand_mat(&mut rng, 8, 6, 1.0);
        let tau = 0.7;
        let sin = singular_values(&z);
        let sout = singular_values(&svt(&z, tau).unwrap());
        for (si, so) in sin.iter().zip(sout.iter()) {
            assert!((so - (si - tau).max(0.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn svt_zero_matrix_stays_zero() {
        let out = svt(&Array2::zeros((4, 7)), 0.3).unwrap();
        assert!(out.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn svt_stays_within_tau_in_spectral_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        for _ in 0..10 {
            let z = rand_mat(&mut rng, 7, 5, 1.0);
            let tau = rng.random::<f64>() * 2.0;
            let diff = svt(&z, tau).unwrap() - &z;
            let top = singular_values(&diff)[0];
            assert!(top <= tau + 1e-10, "spectral distance {top} vs tau {tau}");
        }
    }

    #[test]
    fn svt_gram_route_matches_thin_route() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        for _ in 0..10 {
            let z = rand_mat(&mut rng, 80, 6, 1.0);
            let tau = rng.random::<f64>() * 4.0;
            let (fast, fast_nuc, fast_rank) = svt_with_nuclear(&z, tau).unwrap();
            let (slow, slow_nuc, slow_rank) = svt_thin(&z, tau).unwrap();
            assert_eq!(fast_rank, slow_rank);
            if fast_rank > 0 {
                assert!(rel_err(&fast, &slow) < 1e-9);
                assert!((fast_nuc - slow_nuc).abs() / slow_nuc.max(1e-300) < 1e-9);
            } else {
                assert!(frob(&fast) == 0.0 && frob(&slow) == 0.0);
            }
        }
    }

    #[test]
    fn huber_value_hand_cases() {
        let p = HuberParams::new(2.0, 1.0).unwrap();
        // below transition: gamma * |f|^2
        let f = Array2::from_elem((1, 1), Complex64::new(0.3, 0.4));
        assert!((huber_value(&f, &p) - 2.0 * 0.25).abs() < 1e-12);
        // above transition: gamma * (2a|f| - a^2)
        let g = Array2::from_elem((1, 1), Complex64::new(3.0, 4.0));
        assert!((huber_value(&g, &p) - 2.0 * (2.0 * 5.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn huber_value_is_continuous_at_transition() {
        let p = HuberParams::new(0.7, 0.05).unwrap();
        let lo = Array2::from_elem((1, 1), Complex64::new(0.05 - 1e-9, 0.0));
        let hi = Array2::from_elem((1, 1), Complex64::new(0.05 + 1e-9, 0.0));
        assert!((huber_value(&lo, &p) - huber_value(&hi, &p)).abs() < 1e-9);
    }

    #[test]
    fn huber_gradient_matches_finite_differences() {
        let p = HuberParams::new(0.002, 0.05).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let h = 1e-6;
        for k in 0..20 {
            // half the points inside the quadratic branch, half outside
            let scale = if k % 2 == 0 { 0.03 } else { 0.4 };
            let z = Complex64::new(
                (rng.random::<f64>() * 2.0 - 1.0) * scale,
                (rng.random::<f64>() * 2.0 - 1.0) * scale,
            );
            let at = |v: Complex64| huber_value(&Array2::from_elem((1, 1), v), &p);
            let g = huber_gradient(&Array2::from_elem((1, 1), z), &p)[[0, 0]];
            let fd_re = (at(z + Complex64::new(h, 0.0)) - at(z - Complex64::new(h, 0.0))) / (2.0 * h);
            let fd_im = (at(z + Complex64::new(0.0, h)) - at(z - Complex64::new(0.0, h))) / (2.0 * h);
            let scale_ref = g.norm().max(1e-9);
            assert!(
                (g.re - fd_re).abs() / scale_ref < 1e-5,
                "re: {} vs {}",
                g.re,
                fd_re
            );
            assert!(
                (g.im - fd_im).abs() / scale_ref < 1e-5,
                "im: {} vs {}",
                g.im,
                fd_im
            );
        }
    }

    #[test]
    fn huber_gradient_is_lipschitz_with_2gamma() {
        let p = HuberParams::new(0.31, 0.2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        for _ in 0..20 {
            let x = rand_mat(&mut rng, 3, 3, 0.5);
            let y = rand_mat(&mut rng, 3, 3, 0.5);
            let dg = huber_gradient(&x, &p) - huber_gradient(&y, &p);
            assert!(frob(&dg) <= 2.0 * p.gamma * frob(&(x - y)) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn huber_is_convex_at_midpoints() {
        let p = HuberParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        for _ in 0..20 {
            let x = rand_mat(&mut rng, 4, 2, 0.3);
            let y = rand_mat(&mut rng, 4, 2, 0.3);
            let mid = (&x + &y).mapv(|v| v * 0.5);
            let lhs = huber_value(&mid, &p);
            let rhs = 0.5 * (huber_value(&x, &p) + huber_value(&y, &p));
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn huber_params_reject_nonpositive() {
        assert!(HuberParams::new(0.0, 1.0).is_err());
        assert!(HuberParams::new(1.0, 0.0).is_err());
        assert!(HuberParams::new(-1.0, 1.0).is_err());
        assert!(HuberParams::new(1.0, f64::NAN).is_err());
    }
}
