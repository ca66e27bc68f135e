//! C ABI over the separation library. All functions return a status code;
//! outputs come back through opaque handles the caller must free with the
//! matching `_free` function. On any failure `dopsep_last_error` describes
//! the most recent error on the calling thread.
//!
//! Complex buffers cross the boundary as interleaved double pairs
//! `re0, im0, re1, im1, ...`. Stack samples are ordered depth-fastest within
//! a frame, frame by frame: the pair for (z, x, t) sits at index
//! `t * (nz * nx) + x * nz + z`. Kernel samples are row-major.

use std::cell::RefCell;
use std::ffi::CString;
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use ndarray::Array2;
use num_complex::Complex64;

use dopsep::casorati::{CasoratiMatrix, StackMeta};
use dopsep::cli::{run_method, MethodParams};
use dopsep::error::Error;
use dopsep::linops::Psf;
use dopsep::rpca::{reference_hyperparams, AdmmParams, SeparationResult};
use dopsep::svd_filter::RankBand;

/// Opaque complex stack handle (Casorati-ordered samples plus geometry).
pub struct DopsepStack {
    inner: CasoratiMatrix,
}

/// Opaque convolution kernel handle.
pub struct DopsepPsf {
    inner: Psf,
}

/// Opaque separation result: blood, tissue, optional kernel, solver trace.
pub struct DopsepResult {
    inner: SeparationResult,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DopsepStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    Linalg = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(e: &Error) -> DopsepStatus {
    set_last_error(&e.to_string());
    match e {
        Error::DimensionMismatch(_) => DopsepStatus::DimensionMismatch,
        Error::InvalidParameter(_) => DopsepStatus::InvalidArgument,
        Error::NonFinite(_) => DopsepStatus::NonFinite,
        Error::Linalg(_) => DopsepStatus::Linalg,
        Error::Io(_) => DopsepStatus::Io,
        Error::Json(_) | Error::Format(_) => DopsepStatus::Format,
    }
}

fn null_arg(name: &str) -> DopsepStatus {
    set_last_error(&format!("{name} must not be null"));
    DopsepStatus::NullArgument
}

fn guard(f: impl FnOnce() -> DopsepStatus) -> DopsepStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            DopsepStatus::Panic
        }
    }
}

fn pairs_to_complex(data: &[f64]) -> Vec<Complex64> {
    data.chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dopsep_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Builds a stack from `2 * nz * nx * nt` doubles laid out as described in
/// the module header. The buffer is copied.
///
/// # Safety
/// `data` must point to at least `2 * nz * nx * nt` readable doubles and
/// `out` must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn dopsep_stack_create(
    nz: usize,
    nx: usize,
    nt: usize,
    data: *const f64,
    out: *mut *mut DopsepStack,
) -> DopsepStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if data.is_null() {
            return null_arg("data");
        }
        let total = nz
            .checked_mul(nx)
            .and_then(|v| v.checked_mul(nt))
            .and_then(|v| v.checked_mul(2));
        let Some(total) = total else {
            set_last_error("stack dimensions overflow");
            return DopsepStatus::InvalidArgument;
        };
        if total == 0 {
            set_last_error("stack dimensions must be nonzero");
            return DopsepStatus::InvalidArgument;
        }
        let raw = std::slice::from_raw_parts(data, total);
        let values = pairs_to_complex(raw);
        let rows = nz * nx;
        let matrix = Array2::from_shape_fn((rows, nt), |(r, t)| values[t * rows + r]);
        match CasoratiMatrix::new(matrix, nz, nx, StackMeta::default()) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DopsepStack { inner }));
                DopsepStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `stack` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_stack_dims(
    stack: *const DopsepStack,
    nz: *mut usize,
    nx: *mut usize,
    nt: *mut usize,
) -> DopsepStatus {
    guard(|| {
        if stack.is_null() {
            return null_arg("stack");
        }
        let s = &(*stack).inner;
        if !nz.is_null() {
            *nz = s.nz();
        }
        if !nx.is_null() {
            *nx = s.nx();
        }
        if !nt.is_null() {
            *nt = s.nt();
        }
        DopsepStatus::Ok
    })
}

/// Copies the stack back out in creation order. `out` must hold
/// `2 * nz * nx * nt` doubles.
///
/// # Safety
/// `stack` must be a live handle and `out` writable at that size.
#[no_mangle]
pub unsafe extern "C" fn dopsep_stack_copy_data(
    stack: *const DopsepStack,
    out: *mut f64,
) -> DopsepStatus {
    guard(|| {
        if stack.is_null() {
            return null_arg("stack");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let s = &(*stack).inner;
        let rows = s.nz() * s.nx();
        let dest = std::slice::from_raw_parts_mut(out, 2 * rows * s.nt());
        let data = s.data();
        for t in 0..s.nt() {
            for r in 0..rows {
                let v = data[(r, t)];
                dest[2 * (t * rows + r)] = v.re;
                dest[2 * (t * rows + r) + 1] = v.im;
            }
        }
        DopsepStatus::Ok
    })
}

/// # Safety
/// `stack` must come from this library and not have been freed already.
/// Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn dopsep_stack_free(stack: *mut DopsepStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// Builds an energy-normalized kernel from `2 * rows * cols` doubles
/// (row-major pairs). `center_z`, `center_x` locate the kernel origin tap.
///
/// # Safety
/// `data` must point to `2 * rows * cols` readable doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_psf_create(
    rows: usize,
    cols: usize,
    center_z: usize,
    center_x: usize,
    data: *const f64,
    out: *mut *mut DopsepPsf,
) -> DopsepStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if data.is_null() {
            return null_arg("data");
        }
        let total = rows.checked_mul(cols).and_then(|v| v.checked_mul(2));
        let Some(total) = total else {
            set_last_error("kernel dimensions overflow");
            return DopsepStatus::InvalidArgument;
        };
        if total == 0 {
            set_last_error("kernel dimensions must be nonzero");
            return DopsepStatus::InvalidArgument;
        }
        let raw = std::slice::from_raw_parts(data, total);
        let values = pairs_to_complex(raw);
        let kernel = Array2::from_shape_fn((rows, cols), |(i, j)| values[i * cols + j]);
        let built = Psf::new(kernel, (center_z, center_x)).and_then(|p| p.normalize_energy());
        match built {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DopsepPsf { inner }));
                DopsepStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `psf` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_psf_dims(
    psf: *const DopsepPsf,
    rows: *mut usize,
    cols: *mut usize,
    center_z: *mut usize,
    center_x: *mut usize,
) -> DopsepStatus {
    guard(|| {
        if psf.is_null() {
            return null_arg("psf");
        }
        let p = &(*psf).inner;
        let (kr, kc) = p.kernel().dim();
        if !rows.is_null() {
            *rows = kr;
        }
        if !cols.is_null() {
            *cols = kc;
        }
        if !center_z.is_null() {
            *center_z = p.center().0;
        }
        if !center_x.is_null() {
            *center_x = p.center().1;
        }
        DopsepStatus::Ok
    })
}

/// Copies the kernel out as row-major pairs; `out` must hold
/// `2 * rows * cols` doubles.
///
/// # Safety
/// `psf` must be a live handle and `out` writable at that size.
#[no_mangle]
pub unsafe extern "C" fn dopsep_psf_copy_data(
    psf: *const DopsepPsf,
    out: *mut f64,
) -> DopsepStatus {
    guard(|| {
        if psf.is_null() {
            return null_arg("psf");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let k = (*psf).inner.kernel();
        let (rows, cols) = k.dim();
        let dest = std::slice::from_raw_parts_mut(out, 2 * rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = k[(i, j)];
                dest[2 * (i * cols + j)] = v.re;
                dest[2 * (i * cols + j) + 1] = v.im;
            }
        }
        DopsepStatus::Ok
    })
}

/// # Safety
/// `psf` must come from this library and not have been freed already.
/// Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn dopsep_psf_free(psf: *mut DopsepPsf) {
    if !psf.is_null() {
        drop(Box::from_raw(psf));
    }
}

/// Reference sparsity weight and penalty for a stack of the given size.
/// `mu_multiplier` is 10 for the plain decomposition, 2 for the
/// deconvolution-aware one.
///
/// # Safety
/// Non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_reference_params(
    nz: usize,
    nx: usize,
    nt: usize,
    mu_multiplier: f64,
    lambda: *mut f64,
    mu: *mut f64,
) -> DopsepStatus {
    guard(|| {
        if nz == 0 || nx == 0 || nt == 0 {
            set_last_error("dimensions must be nonzero");
            return DopsepStatus::InvalidArgument;
        }
        let (l, m) = reference_hyperparams(nz, nx, nt, mu_multiplier);
        if !lambda.is_null() {
            *lambda = l;
        }
        if !mu.is_null() {
            *mu = m;
        }
        DopsepStatus::Ok
    })
}

unsafe fn run_into(
    stack: *const DopsepStack,
    params: MethodParams,
    psf: Option<&Psf>,
    out: *mut *mut DopsepResult,
) -> DopsepStatus {
    if out.is_null() {
        return null_arg("out");
    }
    if stack.is_null() {
        return null_arg("stack");
    }
    match run_method(&(*stack).inner, &params, psf) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(DopsepResult { inner }));
            DopsepStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Rank-band filter: blood keeps singular components `tc..=tb` (1-based),
/// tissue keeps `1..tc`.
///
/// # Safety
/// `stack` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_svd_filter(
    stack: *const DopsepStack,
    tc: usize,
    tb: usize,
    out: *mut *mut DopsepResult,
) -> DopsepStatus {
    guard(|| {
        let band = match RankBand::new(tc, tb) {
            Ok(b) => b,
            Err(e) => return fail(&e),
        };
        run_into(stack, MethodParams::Svd { band }, None, out)
    })
}

fn admm(lambda: f64, rho: f64, mu: f64, tol: f64, max_iter: usize) -> Result<AdmmParams, Error> {
    let p = AdmmParams {
        lambda,
        rho,
        mu,
        tol,
        max_iter,
    };
    p.validate()?;
    Ok(p)
}

/// Sparse-plus-low-rank decomposition.
///
/// # Safety
/// `stack` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_rpca(
    stack: *const DopsepStack,
    lambda: f64,
    rho: f64,
    mu: f64,
    tol: f64,
    max_iter: usize,
    out: *mut *mut DopsepResult,
) -> DopsepStatus {
    guard(|| {
        let params = match admm(lambda, rho, mu, tol, max_iter) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        run_into(stack, MethodParams::Rpca { admm: params }, None, out)
    })
}

/// Deconvolution-aware decomposition with a known blur kernel.
///
/// # Safety
/// `stack` and `psf` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_drpca(
    stack: *const DopsepStack,
    psf: *const DopsepPsf,
    lambda: f64,
    rho: f64,
    mu: f64,
    tol: f64,
    max_iter: usize,
    out: *mut *mut DopsepResult,
) -> DopsepStatus {
    guard(|| {
        if psf.is_null() {
            return null_arg("psf");
        }
        let params = match admm(lambda, rho, mu, tol, max_iter) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        run_into(
            stack,
            MethodParams::Drpca { admm: params },
            Some(&(*psf).inner),
            out,
        )
    })
}

/// Blind variant with reference defaults for the stack's size. `psf` may be
/// null; a non-null kernel skips blind estimation and is used directly.
///
/// # Safety
/// `stack` must be a live handle, `psf` null or live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_bdrpca(
    stack: *const DopsepStack,
    psf: *const DopsepPsf,
    out: *mut *mut DopsepResult,
) -> DopsepStatus {
    guard(|| {
        if stack.is_null() {
            return null_arg("stack");
        }
        let s = &(*stack).inner;
        let opts = match dopsep::bdrpca::BdRpcaOptions::from_reference(s.nz(), s.nx(), s.nt()) {
            Ok(o) => o,
            Err(e) => return fail(&e),
        };
        let params = MethodParams::Bdrpca {
            init: opts.init_rpca,
            admm: opts.drpca,
            bd: opts.bd,
            bd_outer_iters: opts.bd_outer_iters,
            outer_tol: opts.outer_tol,
            outer_max: opts.outer_max,
        };
        let kernel = if psf.is_null() {
            None
        } else {
            Some(&(*psf).inner)
        };
        run_into(stack, params, kernel, out)
    })
}

unsafe fn component(
    result: *const DopsepResult,
    out: *mut *mut DopsepStack,
    pick: impl Fn(&SeparationResult) -> &CasoratiMatrix,
) -> DopsepStatus {
    if result.is_null() {
        return null_arg("result");
    }
    if out.is_null() {
        return null_arg("out");
    }
    let inner = pick(&(*result).inner).clone();
    *out = Box::into_raw(Box::new(DopsepStack { inner }));
    DopsepStatus::Ok
}

/// Returns a new stack handle holding the blood estimate.
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_result_blood(
    result: *const DopsepResult,
    out: *mut *mut DopsepStack,
) -> DopsepStatus {
    guard(|| component(result, out, |r| &r.blood))
}

/// Returns a new stack handle holding the tissue estimate.
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_result_tissue(
    result: *const DopsepResult,
    out: *mut *mut DopsepStack,
) -> DopsepStatus {
    guard(|| component(result, out, |r| &r.tissue))
}

/// Returns the kernel attached to the result, or sets `*out` to null when
/// the method produced none.
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_result_psf(
    result: *const DopsepResult,
    out: *mut *mut DopsepPsf,
) -> DopsepStatus {
    guard(|| {
        if result.is_null() {
            return null_arg("result");
        }
        if out.is_null() {
            return null_arg("out");
        }
        *out = match &(*result).inner.psf {
            Some(p) => Box::into_raw(Box::new(DopsepPsf { inner: p.clone() })),
            None => std::ptr::null_mut(),
        };
        DopsepStatus::Ok
    })
}

/// # Safety
/// `result` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_result_iterations(
    result: *const DopsepResult,
    out: *mut usize,
) -> DopsepStatus {
    guard(|| {
        if result.is_null() {
            return null_arg("result");
        }
        if !out.is_null() {
            *out = (*result).inner.iterations;
        }
        DopsepStatus::Ok
    })
}

/// # Safety
/// `result` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_result_trace_len(
    result: *const DopsepResult,
    out: *mut usize,
) -> DopsepStatus {
    guard(|| {
        if result.is_null() {
            return null_arg("result");
        }
        if !out.is_null() {
            *out = (*result).inner.trace.len();
        }
        DopsepStatus::Ok
    })
}

/// Reads one trace entry: the constraint residual and composite objective
/// after iteration `index`.
///
/// # Safety
/// `result` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dopsep_result_trace_at(
    result: *const DopsepResult,
    index: usize,
    primal_residual: *mut f64,
    objective: *mut f64,
) -> DopsepStatus {
    guard(|| {
        if result.is_null() {
            return null_arg("result");
        }
        let trace = &(*result).inner.trace;
        let Some(rec) = trace.get(index) else {
            set_last_error(&format!(
                "trace index {index} out of range ({} entries)",
                trace.len()
            ));
            return DopsepStatus::InvalidArgument;
        };
        if !primal_residual.is_null() {
            *primal_residual = rec.primal_residual;
        }
        if !objective.is_null() {
            *objective = rec.objective;
        }
        DopsepStatus::Ok
    })
}

/// # Safety
/// `result` must come from this library and not have been freed already.
/// Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn dopsep_result_free(result: *mut DopsepResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
