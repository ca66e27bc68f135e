//! Separation with a jointly estimated kernel: alternates blind kernel
//! recovery on the tissue-suppressed temporal mean with the
//! deconvolution-aware decomposition, warm-starting each pass from the last.

use crate::blind_deconv::{blind_deconvolve, BdParams};
use crate::casorati::CasoratiMatrix;
use crate::drpca::drpca_with_init;
use crate::error::{Error, Result};
use crate::linops::Psf;
use crate::rpca::{
    frob, rpca, AdmmParams, SeparationResult, DECONV_MU_MULTIPLIER, RPCA_MU_MULTIPLIER,
};

#[derive(Clone, Debug)]
pub struct BdRpcaOptions {
    /// Plain decomposition used once to bootstrap the kernel estimate.
    pub init_rpca: AdmmParams,
    /// Inner deconvolution-aware solves.
    pub drpca: AdmmParams,
    pub bd: BdParams,
    /// Alternations inside each blind kernel estimation.
    pub bd_outer_iters: usize,
    /// Absolute Frobenius change in the blood estimate that stops the outer loop.
    pub outer_tol: f64,
    pub outer_max: usize,
    /// Skips kernel estimation entirely and runs the inner solver once.
    pub psf_override: Option<Psf>,
}

impl BdRpcaOptions {
    pub fn from_reference(nz: usize, nx: usize, nt: usize) -> Result<Self> {
        Ok(Self {
            init_rpca: AdmmParams::from_reference(nz, nx, nt, RPCA_MU_MULTIPLIER)?,
            drpca: AdmmParams::from_reference(nz, nx, nt, DECONV_MU_MULTIPLIER)?,
            bd: BdParams::for_dims(nz, nx),
            bd_outer_iters: 3,
            outer_tol: 1e-6,
            outer_max: 10,
            psf_override: None,
        })
    }

    pub fn validate(&self, nz: usize, nx: usize) -> Result<()> {
        self.init_rpca.validate()?;
        self.drpca.validate()?;
        self.bd.validate_against(nz, nx)?;
        if self.bd_outer_iters == 0 {
            return Err(Error::InvalidParameter("bd_outer_iters must be at least 1".into()));
        }
        if self.outer_max == 0 {
            return Err(Error::InvalidParameter("outer_max must be at least 1".into()));
        }
        if !(self.outer_tol >= 0.0 && self.outer_tol.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "outer tolerance must be finite and non-negative, got {}",
                self.outer_tol
            )));
        }
        Ok(())
    }
}

/// Blind-kernel separation. With `psf_override` set this is exactly the
/// known-kernel solver; otherwise the kernel is re-estimated each outer pass
/// from the temporal mean of the tissue-suppressed sequence, and the
/// decomposition re-solved from the previous iterates. The returned trace
/// concatenates the inner solver traces across outer passes.
pub fn bdrpca(s: &CasoratiMatrix, opts: &BdRpcaOptions) -> Result<SeparationResult> {
    opts.validate(s.nz(), s.nx())?;
    if let Some(psf) = &opts.psf_override {
        return crate::drpca::drpca(s, psf, &opts.drpca);
    }

    let init = rpca(s, &opts.init_rpca).map_err(|e| e.with_context("bootstrap decomposition"))?;
    let mut blood = init.blood;
    let mut tissue = init.tissue;
    let mut trace = Vec::new();
    let mut psf: Option<Psf> = None;

    for outer in 1..=opts.outer_max {
        let residual = s.with_data(s.data() - tissue.data())?;
        let mean = residual.temporal_mean();
        if frob(&mean) == 0.0 {
            // Nothing left to estimate a kernel from; keep the current split.
            break;
        }
        let bd = blind_deconvolve(&mean, &opts.bd, opts.bd_outer_iters)
            .map_err(|e| e.with_context(&format!("kernel estimation, outer iteration {outer}")))?;
        let pass = drpca_with_init(
            s,
            &bd.psf,
            &opts.drpca,
            Some((blood.data(), tissue.data())),
        )
        .map_err(|e| e.with_context(&format!("outer iteration {outer}")))?;

        let change = frob(&(pass.blood.data() - blood.data()));
        blood = pass.blood;
        tissue = pass.tissue;
        psf = pass.psf;
        trace.extend(pass.trace);
        if change <= opts.outer_tol {
            break;
        }
    }

    let iterations = trace.len();
    Ok(SeparationResult {
        blood,
        tissue,
        psf,
        trace,
        iterations,
    })
}
