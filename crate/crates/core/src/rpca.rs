//! Low-rank plus sparse separation of a Casorati matrix by ADMM.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::casorati::CasoratiMatrix;
use crate::error::{Error, Result};
use crate::linops::Psf;
use crate::prox::{soft_threshold, svt_with_nuclear};

/// Multiplier applied to the reference lambda to get the default penalty
/// when the sparse term is matched directly against the data.
pub const RPCA_MU_MULTIPLIER: f64 = 10.0;
/// Same, for the deconvolving solvers where the sparse term sits behind a blur.
pub const DECONV_MU_MULTIPLIER: f64 = 2.0;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;

/// `lambda_ref = 1/sqrt(max(nz*nx, nt))` and `mu_ref = mu0 * lambda_ref`.
/// Callers pass dims >= 1 and mu0 > 0.
pub fn reference_hyperparams(nz: usize, nx: usize, nt: usize, mu0: f64) -> (f64, f64) {
    let lambda = 1.0 / ((nz * nx).max(nt) as f64).sqrt();
    (lambda, mu0 * lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmParams {
    /// Sparsity weight on the blood term.
    pub lambda: f64,
    /// Nuclear-norm weight on the tissue term.
    pub rho: f64,
    /// Augmented Lagrangian penalty, fixed across iterations.
    pub mu: f64,
    /// Relative-change stopping tolerance on the blood iterate.
    pub tol: f64,
    pub max_iter: usize,
}

impl AdmmParams {
    pub fn new(lambda: f64, rho: f64, mu: f64) -> Result<Self> {
        let p = Self {
            lambda,
            rho,
            mu,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        };
        p.validate()?;
        Ok(p)
    }

    /// Dimension-derived defaults: lambda from the reference formula,
    /// mu = mu0 * lambda, rho = 1.
    pub fn from_reference(nz: usize, nx: usize, nt: usize, mu0: f64) -> Result<Self> {
        if nz == 0 || nx == 0 || nt == 0 {
            return Err(Error::InvalidParameter(format!(
                "reference hyperparameters need nonzero dims, got {nz}x{nx}x{nt}"
            )));
        }
        if !(mu0 > 0.0 && mu0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mu multiplier must be positive, got {mu0}"
            )));
        }
        let (lambda, mu) = reference_hyperparams(nz, nx, nt, mu0);
        Self::new(lambda, 1.0, mu)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("rho", self.rho),
            ("mu", self.mu),
            ("tol", self.tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration convergence diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Frobenius norm of the coupling-constraint residual.
    pub primal_residual: f64,
    /// Composite objective: data term plus weighted l1 and nuclear norms.
    pub objective: f64,
}

/// Output of any of the separation solvers.
#[derive(Clone, Debug)]
pub struct SeparationResult {
    pub blood: CasoratiMatrix,
    pub tissue: CasoratiMatrix,
    /// Present when the method estimated or was handed a kernel.
    pub psf: Option<Psf>,
    pub trace: Vec<IterationRecord>,
    pub iterations: usize,
}

pub(crate) fn frob(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub(crate) fn l1(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|v| v.norm()).sum()
}

/// Relative-change floor: keeps the stopping rule meaningful at a zero iterate.
pub(crate) const REL_CHANGE_FLOOR: f64 = 1e-12;

/// Separates `s` into sparse blood and low-rank tissue:
/// minimizes the l1/nuclear trade-off subject to `s = blood + tissue` via
/// alternating prox steps and a dual ascent on the constraint.
pub fn rpca(s: &CasoratiMatrix, p: &AdmmParams) -> Result<SeparationResult> {
    p.validate()?;
    let dims = s.data().raw_dim();
    let mut b: Array2<Complex64> = Array2::zeros(dims);
    let mut t: Array2<Complex64> = Array2::zeros(dims);
    let mut nu: Array2<Complex64> = Array2::zeros(dims);
    let mut work: Array2<Complex64> = Array2::zeros(dims);
    let mut trace = Vec::new();

    for k in 1..=p.max_iter {
        Zip::from(&mut work)
            .and(s.data())
            .and(&t)
            .and(&nu)
            .for_each(|w, &sv, &tv, &nv| *w = sv - tv + nv / p.mu);
        let b_new = soft_threshold(&work, p.lambda / p.mu)?;

        Zip::from(&mut work)
            .and(s.data())
            .and(&b_new)
            .and(&nu)
            .for_each(|w, &sv, &bv, &nv| *w = sv - bv + nv / p.mu);
        let (t_new, nuclear, _) = svt_with_nuclear(&work, p.rho / p.mu)?;

        let mut primal_sq = 0.0;
        Zip::from(&mut nu)
            .and(s.data())
            .and(&b_new)
            .and(&t_new)
            .for_each(|nv, &sv, &bv, &tv| {
                let r = sv - bv - tv;
                primal_sq += r.norm_sqr();
                *nv += p.mu * r;
            });
        let primal = primal_sq.sqrt();
        let objective = primal_sq + p.lambda * l1(&b_new) + p.rho * nuclear;

        let mut diff_sq = 0.0;
        Zip::from(&b_new).and(&b).for_each(|&x, &y| diff_sq += (x - y).norm_sqr());
        let rel = diff_sq.sqrt() / frob(&b).max(REL_CHANGE_FLOOR);

        if !(primal.is_finite() && objective.is_finite() && rel.is_finite()) {
            return Err(Error::NonFinite(format!("solver state at iteration {k}")));
        }

        b = b_new;
        t = t_new;
        trace.push(IterationRecord {
            primal_residual: primal,
            objective,
        });
        if rel < p.tol {
            break;
        }
    }

    let iterations = trace.len();
    Ok(SeparationResult {
        blood: s.with_data(b)?,
        tissue: s.with_data(t)?,
        psf: None,
        trace,
        iterations,
    })
}
