//! Command-line surface: simulate / estimate / evaluate / evaluate-sweep /
//! psf-export, their flag-over-config-over-default parameter resolution, and
//! the run manifests that make every command reproducible from its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bdrpca::{bdrpca, BdRpcaOptions};
use crate::blind_deconv::BdParams;
use crate::casorati::{CasoratiMatrix, StackMeta};
use crate::drpca::drpca;
use crate::error::{Error, Result};
use crate::io;
use crate::linops::{embed_psf, Psf};
use crate::metrics::{cr_sweep, nrmse, power_doppler, psnr, PatchRect, DEFAULT_DYNAMIC_RANGE};
use crate::phantom::{add_noise_bsnr, simulate, synth_psf, PhantomConfig, PhantomTruth};
use crate::rpca::{
    rpca, AdmmParams, IterationRecord, SeparationResult, DECONV_MU_MULTIPLIER, RPCA_MU_MULTIPLIER,
};
use crate::svd_filter::{svd_filter, RankBand};

/// Thread-count override; unset means single-threaded (deterministic) runs.
pub const THREADS_ENV: &str = "DOPSEP_THREADS";

pub const OBSERVED_FILE: &str = "observed.bin";
pub const BLOOD_TRUE_FILE: &str = "blood_true.bin";
pub const TISSUE_TRUE_FILE: &str = "tissue_true.bin";
pub const PSF_TRUE_FILE: &str = "psf_true.bin";
pub const PD_TRUE_FILE: &str = "pd_true.bin";
pub const SIMULATE_MANIFEST: &str = "simulate_manifest.json";

pub const BLOOD_EST_FILE: &str = "blood_est.bin";
pub const TISSUE_EST_FILE: &str = "tissue_est.bin";
pub const PD_EST_FILE: &str = "pd_est.bin";
pub const PSF_EST_FILE: &str = "psf_est.bin";
pub const TRACE_FILE: &str = "trace.json";
pub const ESTIMATE_MANIFEST: &str = "estimate_manifest.json";

pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";
pub const SWEEP_MANIFEST: &str = "sweep_manifest.json";
pub const PSF_EXPORT_MANIFEST: &str = "psf_export_manifest.json";

#[derive(Parser)]
#[command(
    name = "dopsep",
    version,
    about = "Separate ultrafast Doppler IQ sequences into tissue, blood, and noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic flow phantom (observation, ground truth, kernel).
    Simulate {
        #[arg(long)]
        out_dir: PathBuf,
        /// Manifest of a previous simulate run; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Blurred-signal-to-noise ratio in dB; omit for a noiseless phantom.
        #[arg(long)]
        bsnr: Option<f64>,
        #[arg(long)]
        noise_seed: Option<u64>,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Separate a stack into blood and tissue estimates.
    Estimate {
        /// Observed complex stack.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Manifest of a previous estimate run; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Kernel file: required for drpca, optional oracle for bdrpca.
        #[arg(long)]
        psf: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Score an estimate against ground truth and write a JSON report.
    Evaluate {
        /// Power Doppler file or complex stack rendered on the fly.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Background reference patch as top,left,height,width.
        #[arg(long, value_parser = parse_rect)]
        r1: Option<PatchRect>,
        #[arg(long, default_value_t = 13)]
        patch_h: usize,
        #[arg(long, default_value_t = 12)]
        patch_w: usize,
        #[arg(long, default_value_t = 35.0)]
        d_max: f64,
        #[arg(long, default_value_t = DEFAULT_DYNAMIC_RANGE)]
        dynamic_range: f64,
    },
    /// Simulate once, then sweep additive noise over a BSNR grid, estimating
    /// and scoring at each level.
    EvaluateSweep {
        #[arg(long)]
        out_dir: PathBuf,
        /// Grid as start:step:stop (inclusive) or a single value, in dB.
        #[arg(long)]
        bsnr: String,
        /// Base noise seed; grid entry i uses base + i.
        #[arg(long)]
        noise_seed: Option<u64>,
        #[command(flatten)]
        sim: SimFlags,
        #[command(flatten)]
        solver: SolverFlags,
        #[arg(long, value_parser = parse_rect)]
        r1: Option<PatchRect>,
        #[arg(long, default_value_t = 13)]
        patch_h: usize,
        #[arg(long, default_value_t = 12)]
        patch_w: usize,
        #[arg(long, default_value_t = 35.0)]
        d_max: f64,
    },
    /// Write a synthetic modulated-Gaussian kernel file.
    PsfExport {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        fc: f64,
        #[arg(long, default_value_t = 2.0)]
        sigma_z: f64,
        #[arg(long, default_value_t = 3.0)]
        sigma_x: f64,
        #[arg(long, default_value_t = 15)]
        support_z: usize,
        #[arg(long, default_value_t = 15)]
        support_x: usize,
    },
}

#[derive(Args, Clone, Default)]
pub struct SimFlags {
    #[arg(long)]
    pub nz: Option<usize>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub nt: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub blood_amplitude: Option<f64>,
    #[arg(long)]
    pub shift_max: Option<usize>,
    #[arg(long)]
    pub psf_fc: Option<f64>,
    #[arg(long)]
    pub psf_sigma_z: Option<f64>,
    #[arg(long)]
    pub psf_sigma_x: Option<f64>,
    #[arg(long)]
    pub psf_support_z: Option<usize>,
    #[arg(long)]
    pub psf_support_x: Option<usize>,
    /// Flow rectangle as top,left,height,width.
    #[arg(long, value_parser = parse_rect)]
    pub rect1: Option<PatchRect>,
    #[arg(long, value_parser = parse_rect)]
    pub rect2: Option<PatchRect>,
}

#[derive(Args, Clone, Default)]
pub struct SolverFlags {
    /// One of svd, rpca, drpca, bdrpca.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Bootstrap-stage overrides (bdrpca only).
    #[arg(long)]
    pub init_lambda: Option<f64>,
    #[arg(long)]
    pub init_mu: Option<f64>,
    /// Rank band (svd only).
    #[arg(long)]
    pub tc: Option<usize>,
    #[arg(long)]
    pub tb: Option<usize>,
    #[arg(long)]
    pub huber_gamma: Option<f64>,
    #[arg(long)]
    pub huber_a: Option<f64>,
    #[arg(long)]
    pub cepstral_cutoff: Option<f64>,
    #[arg(long)]
    pub bd_support_z: Option<usize>,
    #[arg(long)]
    pub bd_support_x: Option<usize>,
    #[arg(long)]
    pub inner_tol: Option<f64>,
    #[arg(long)]
    pub inner_max_iter: Option<usize>,
    #[arg(long)]
    pub bd_outer_iters: Option<usize>,
    #[arg(long)]
    pub outer_tol: Option<f64>,
    #[arg(long)]
    pub outer_max: Option<usize>,
}

fn parse_rect(s: &str) -> std::result::Result<PatchRect, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err("expected top,left,height,width".into());
    }
    let mut vals = [0usize; 4];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("bad rectangle component {part:?}"))?;
    }
    Ok(PatchRect::new(vals[0], vals[1], vals[2], vals[3]))
}

/// `start:step:stop` (inclusive, positive step) or a single value.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| -> Result<f64> {
        p.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidParameter(format!("bad grid component {p:?}")))
    };
    match parts.len() {
        1 => Ok(vec![num(parts[0])?]),
        3 => {
            let (start, step, stop) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if !(step > 0.0 && step.is_finite() && start.is_finite() && stop >= start) {
                return Err(Error::InvalidParameter(format!(
                    "grid {s:?} must satisfy start <= stop with positive step"
                )));
            }
            let mut vals = Vec::new();
            let mut k = 0u64;
            loop {
                let v = start + step * k as f64;
                if v > stop + 1e-9 * step {
                    break;
                }
                vals.push(v);
                k += 1;
            }
            Ok(vals)
        }
        _ => Err(Error::InvalidParameter(format!(
            "grid {s:?} must be a value or start:step:stop"
        ))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthPsfSpec {
    pub fc: f64,
    pub sigma_z: f64,
    pub sigma_x: f64,
    pub support: (usize, usize),
}

/// Fully resolved simulation parameters; enough to regenerate every output
/// byte for byte.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimParams {
    pub nz: usize,
    pub nx: usize,
    pub nt: usize,
    pub seed: u64,
    pub rect1: PatchRect,
    pub rect2: PatchRect,
    pub blood_amplitude: f64,
    pub shift_max: usize,
    pub psf: SynthPsfSpec,
    pub bsnr_db: Option<f64>,
    pub noise_seed: u64,
    pub meta: StackMeta,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RealizedNoise {
    pub sigma_n: Option<f64>,
    pub empirical_bsnr_db: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct SimulateManifest {
    pub format_version: u32,
    pub command: String,
    pub params: SimParams,
    #[serde(default)]
    pub realized: RealizedNoise,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub outputs: Vec<OutputRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum MethodParams {
    Svd {
        band: RankBand,
    },
    Rpca {
        admm: AdmmParams,
    },
    Drpca {
        admm: AdmmParams,
    },
    Bdrpca {
        init: AdmmParams,
        admm: AdmmParams,
        bd: BdParams,
        bd_outer_iters: usize,
        outer_tol: f64,
        outer_max: usize,
    },
}

impl MethodParams {
    pub fn name(&self) -> &'static str {
        match self {
            MethodParams::Svd { .. } => "svd",
            MethodParams::Rpca { .. } => "rpca",
            MethodParams::Drpca { .. } => "drpca",
            MethodParams::Bdrpca { .. } => "bdrpca",
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct EstimateManifest {
    pub format_version: u32,
    pub command: String,
    pub params: MethodParams,
    pub input: OutputRecord,
    pub psf_input: Option<OutputRecord>,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub wall_time_s: f64,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub outputs: Vec<OutputRecord>,
}

#[derive(Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub format_version: u32,
    pub kind: String,
    pub iterations: usize,
    pub records: Vec<IterationRecord>,
}

#[derive(Serialize, Deserialize)]
pub struct EvalInputs {
    pub truth: OutputRecord,
    pub estimate: OutputRecord,
}

#[derive(Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub kind: String,
    pub nrmse: f64,
    /// Null when the images match exactly (PSNR has no finite value).
    pub psnr_db: Option<f64>,
    pub psnr_infinite: bool,
    pub d_max: f64,
    pub dynamic_range: f64,
    pub r1: PatchRect,
    pub patch_h: usize,
    pub patch_w: usize,
    pub cr_patch_count: usize,
    pub cr_median: f64,
    pub cr_quartiles: (f64, f64, f64),
    pub inputs: EvalInputs,
}

#[derive(Serialize, Deserialize)]
pub struct SweepEntry {
    pub bsnr_db: f64,
    pub nrmse: f64,
    pub psnr_db: Option<f64>,
    pub psnr_infinite: bool,
    pub cr_median: f64,
    pub wall_time_s: f64,
    pub iterations: usize,
}

#[derive(Serialize, Deserialize)]
pub struct SweepReport {
    pub format_version: u32,
    pub kind: String,
    pub sim: SimParams,
    pub params: MethodParams,
    pub noise_seed_base: u64,
    pub d_max: f64,
    pub r1: PatchRect,
    pub patch_h: usize,
    pub patch_w: usize,
    pub entries: Vec<SweepEntry>,
}

#[derive(Serialize, Deserialize)]
pub struct SweepManifest {
    pub format_version: u32,
    pub command: String,
    pub sim: SimParams,
    pub params: MethodParams,
    pub bsnr_grid: Vec<f64>,
    pub noise_seed_base: u64,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub outputs: Vec<OutputRecord>,
}

#[derive(Serialize, Deserialize)]
pub struct PsfExportManifest {
    pub format_version: u32,
    pub command: String,
    pub spec: SynthPsfSpec,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub outputs: Vec<OutputRecord>,
}

/// Applies the thread-count override and returns the effective count.
/// Unset or 1 pins all linear algebra to sequential execution, which keeps
/// reruns bit-identical.
pub fn configure_threads() -> usize {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);
    if n == 1 {
        faer::set_global_parallelism(faer::Par::Seq);
    } else {
        faer::set_global_parallelism(faer::Par::rayon(n));
    }
    n
}

fn default_odd_support(d: usize) -> usize {
    let s = d.min(15);
    if s % 2 == 0 {
        s - 1
    } else {
        s
    }
}

fn load_manifest_json<T: serde::de::DeserializeOwned>(path: &Path, command: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let got = value.get("command").and_then(|v| v.as_str());
    if got != Some(command) {
        return Err(Error::Format(format!(
            "{}: expected a {command} manifest, found command {got:?}",
            path.display()
        )));
    }
    Ok(serde_json::from_value(value)?)
}

/// Flag > config > scaled defaults.
pub fn resolve_sim_params(
    flags: &SimFlags,
    bsnr: Option<f64>,
    noise_seed: Option<u64>,
    config: Option<&SimParams>,
) -> Result<SimParams> {
    let nz = flags.nz.or(config.map(|c| c.nz)).unwrap_or(451);
    let nx = flags.nx.or(config.map(|c| c.nx)).unwrap_or(161);
    let nt = flags.nt.or(config.map(|c| c.nt)).unwrap_or(400);
    let seed = flags.seed.or(config.map(|c| c.seed)).unwrap_or(0);
    let base = PhantomConfig::for_dims(nz, nx, nt, seed)?;

    let psf = SynthPsfSpec {
        fc: flags.psf_fc.or(config.map(|c| c.psf.fc)).unwrap_or(0.25),
        sigma_z: flags
            .psf_sigma_z
            .or(config.map(|c| c.psf.sigma_z))
            .unwrap_or(2.0),
        sigma_x: flags
            .psf_sigma_x
            .or(config.map(|c| c.psf.sigma_x))
            .unwrap_or(3.0),
        support: (
            flags
                .psf_support_z
                .or(config.map(|c| c.psf.support.0))
                .unwrap_or_else(|| default_odd_support(nz)),
            flags
                .psf_support_x
                .or(config.map(|c| c.psf.support.1))
                .unwrap_or_else(|| default_odd_support(nx)),
        ),
    };
    let params = SimParams {
        nz,
        nx,
        nt,
        seed,
        rect1: flags.rect1.or(config.map(|c| c.rect1)).unwrap_or(base.rect1),
        rect2: flags.rect2.or(config.map(|c| c.rect2)).unwrap_or(base.rect2),
        blood_amplitude: flags
            .blood_amplitude
            .or(config.map(|c| c.blood_amplitude))
            .unwrap_or(base.blood_amplitude),
        shift_max: flags
            .shift_max
            .or(config.map(|c| c.shift_max))
            .unwrap_or(base.shift_max),
        psf,
        bsnr_db: bsnr.or(config.and_then(|c| c.bsnr_db)),
        noise_seed: noise_seed
            .or(config.map(|c| c.noise_seed))
            .unwrap_or(seed.wrapping_add(1)),
        meta: base.meta,
    };
    // Reject inconsistent geometry now rather than mid-simulation.
    phantom_config_from(&params)?;
    Ok(params)
}

pub fn phantom_config_from(params: &SimParams) -> Result<PhantomConfig> {
    let cfg = PhantomConfig {
        nz: params.nz,
        nx: params.nx,
        nt: params.nt,
        rect1: params.rect1,
        rect2: params.rect2,
        seed: params.seed,
        blood_amplitude: params.blood_amplitude,
        shift_max: params.shift_max,
        psf: synth_psf(
            params.psf.fc,
            params.psf.sigma_z,
            params.psf.sigma_x,
            params.psf.support,
        )?,
        meta: params.meta.clone(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Flag > config > reference defaults for the stack's dimensions.
pub fn resolve_method_params(
    flags: &SolverFlags,
    config: Option<&MethodParams>,
    nz: usize,
    nx: usize,
    nt: usize,
) -> Result<MethodParams> {
    let name = flags
        .method
        .clone()
        .or_else(|| config.map(|c| c.name().to_string()))
        .ok_or_else(|| Error::InvalidParameter("--method is required (svd, rpca, drpca, or bdrpca)".into()))?;

    let config = config.filter(|c| c.name() == name);
    let apply_admm = |mut a: AdmmParams| -> AdmmParams {
        if let Some(v) = flags.lambda {
            a.lambda = v;
        }
        if let Some(v) = flags.rho {
            a.rho = v;
        }
        if let Some(v) = flags.mu {
            a.mu = v;
        }
        if let Some(v) = flags.tol {
            a.tol = v;
        }
        if let Some(v) = flags.max_iter {
            a.max_iter = v;
        }
        a
    };
    let apply_bd = |mut b: BdParams| -> BdParams {
        if let Some(v) = flags.huber_gamma {
            b.huber.gamma = v;
        }
        if let Some(v) = flags.huber_a {
            b.huber.a = v;
        }
        if let Some(v) = flags.cepstral_cutoff {
            b.cepstral_cutoff = v;
        }
        if let Some(v) = flags.bd_support_z {
            b.psf_support.0 = v;
        }
        if let Some(v) = flags.bd_support_x {
            b.psf_support.1 = v;
        }
        if let Some(v) = flags.inner_tol {
            b.inner_tol = v;
        }
        if let Some(v) = flags.inner_max_iter {
            b.inner_max_iter = v;
        }
        b
    };

    let params = match name.as_str() {
        "svd" => {
            let mut band = match config {
                Some(MethodParams::Svd { band }) => *band,
                _ => RankBand::default(),
            };
            if let Some(v) = flags.tc {
                band.tc = v;
            }
            if let Some(v) = flags.tb {
                band.tb = v;
            }
            let band = RankBand::new(band.tc, band.tb)?;
            MethodParams::Svd { band }
        }
        "rpca" => {
            let base = match config {
                Some(MethodParams::Rpca { admm }) => *admm,
                _ => AdmmParams::from_reference(nz, nx, nt, RPCA_MU_MULTIPLIER)?,
            };
            let admm = apply_admm(base);
            admm.validate()?;
            MethodParams::Rpca { admm }
        }
        "drpca" => {
            let base = match config {
                Some(MethodParams::Drpca { admm }) => *admm,
                _ => AdmmParams::from_reference(nz, nx, nt, DECONV_MU_MULTIPLIER)?,
            };
            let admm = apply_admm(base);
            admm.validate()?;
            MethodParams::Drpca { admm }
        }
        "bdrpca" => {
            let defaults = BdRpcaOptions::from_reference(nz, nx, nt)?;
            let (mut init, base_admm, base_bd, mut bo, mut ot, mut om) = match config {
                Some(MethodParams::Bdrpca {
                    init,
                    admm,
                    bd,
                    bd_outer_iters,
                    outer_tol,
                    outer_max,
                }) => (*init, *admm, *bd, *bd_outer_iters, *outer_tol, *outer_max),
                _ => (
                    defaults.init_rpca,
                    defaults.drpca,
                    defaults.bd,
                    defaults.bd_outer_iters,
                    defaults.outer_tol,
                    defaults.outer_max,
                ),
            };
            if let Some(v) = flags.lambda {
                init.lambda = v;
            }
            if let Some(v) = flags.init_lambda {
                init.lambda = v;
            }
            if let Some(v) = flags.init_mu {
                init.mu = v;
            }
            if let Some(v) = flags.rho {
                init.rho = v;
            }
            if let Some(v) = flags.tol {
                init.tol = v;
            }
            if let Some(v) = flags.max_iter {
                init.max_iter = v;
            }
            let admm = apply_admm(base_admm);
            let bd = apply_bd(base_bd);
            if let Some(v) = flags.bd_outer_iters {
                bo = v;
            }
            if let Some(v) = flags.outer_tol {
                ot = v;
            }
            if let Some(v) = flags.outer_max {
                om = v;
            }
            init.validate()?;
            admm.validate()?;
            bd.validate_against(nz, nx)?;
            MethodParams::Bdrpca {
                init,
                admm,
                bd,
                bd_outer_iters: bo,
                outer_tol: ot,
                outer_max: om,
            }
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown method {other:?}; expected svd, rpca, drpca, or bdrpca"
            )))
        }
    };
    Ok(params)
}

fn zero_like(s: &CasoratiMatrix) -> Result<CasoratiMatrix> {
    s.with_data(Array2::zeros(s.data().dim()))
}

/// Dispatches one separation. `psf` is the kernel for drpca (required) or the
/// bdrpca oracle override (optional).
pub fn run_method(
    s: &CasoratiMatrix,
    params: &MethodParams,
    psf: Option<&Psf>,
) -> Result<SeparationResult> {
    match params {
        MethodParams::Svd { band } => {
            let blood = svd_filter(s, *band)?;
            let tissue = if band.tc >= 2 {
                svd_filter(s, RankBand::new(1, band.tc - 1)?)?
            } else {
                zero_like(s)?
            };
            Ok(SeparationResult {
                blood,
                tissue,
                psf: None,
                trace: Vec::new(),
                iterations: 0,
            })
        }
        MethodParams::Rpca { admm } => rpca(s, admm),
        MethodParams::Drpca { admm } => {
            let psf = psf.ok_or_else(|| {
                Error::InvalidParameter(
                    "method drpca requires --psf <kernel file> (the known blur kernel)".into(),
                )
            })?;
            drpca(s, psf, admm)
        }
        MethodParams::Bdrpca {
            init,
            admm,
            bd,
            bd_outer_iters,
            outer_tol,
            outer_max,
        } => {
            let opts = BdRpcaOptions {
                init_rpca: *init,
                drpca: *admm,
                bd: *bd,
                bd_outer_iters: *bd_outer_iters,
                outer_tol: *outer_tol,
                outer_max: *outer_max,
                psf_override: psf.cloned(),
            };
            bdrpca(s, &opts)
        }
    }
}

fn record_output(dir: &Path, name: &str) -> Result<OutputRecord> {
    Ok(OutputRecord {
        path: name.to_string(),
        sha256: io::sha256_file(&dir.join(name))?,
    })
}

fn record_input(path: &Path) -> Result<OutputRecord> {
    Ok(OutputRecord {
        path: path.display().to_string(),
        sha256: io::sha256_file(path)?,
    })
}

fn write_manifest<T: Serialize>(path: &Path, manifest: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Blurred-signal statistics the noise calibration is defined against.
fn blurred_signal_power(truth: &PhantomTruth) -> Result<f64> {
    let x = &truth.x_true;
    let hx = embed_psf(&truth.psf_true, x.nz(), x.nx())?.apply_to_casorati(x)?;
    let n = (x.nz() * x.nx() * x.nt()) as f64;
    let mean = hx.data().iter().sum::<Complex64>() / n;
    Ok(hx.data().iter().map(|v| (v - mean).norm_sqr()).sum())
}

pub fn cmd_simulate(out_dir: &Path, params: &SimParams, threads: usize) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let cfg = phantom_config_from(params)?;
    let truth = simulate(&cfg)?;

    let (final_truth, realized) = match params.bsnr_db {
        None => (truth, RealizedNoise::default()),
        Some(bsnr) => {
            let noisy = add_noise_bsnr(&truth, bsnr, params.noise_seed)?;
            let n = (params.nz * params.nx * params.nt) as f64;
            let power = blurred_signal_power(&truth)?;
            let var = (noisy.s_observed.data() - truth.s_observed.data())
                .iter()
                .map(|v| v.norm_sqr())
                .sum::<f64>()
                / n;
            let realized = if power > 0.0 && var > 0.0 {
                RealizedNoise {
                    sigma_n: Some(var.sqrt()),
                    empirical_bsnr_db: Some(10.0 * (power / (n * var)).log10()),
                }
            } else {
                RealizedNoise::default()
            };
            (noisy, realized)
        }
    };

    io::write_stack(&out_dir.join(OBSERVED_FILE), &final_truth.s_observed)?;
    io::write_stack(&out_dir.join(BLOOD_TRUE_FILE), &final_truth.x_true)?;
    io::write_stack(&out_dir.join(TISSUE_TRUE_FILE), &final_truth.t_true)?;
    io::write_psf(&out_dir.join(PSF_TRUE_FILE), &final_truth.psf_true)?;
    io::write_power_doppler(&out_dir.join(PD_TRUE_FILE), &final_truth.pd_true)?;

    let mut outputs = Vec::new();
    for name in [
        OBSERVED_FILE,
        BLOOD_TRUE_FILE,
        TISSUE_TRUE_FILE,
        PSF_TRUE_FILE,
        PD_TRUE_FILE,
    ] {
        outputs.push(record_output(out_dir, name)?);
    }
    outputs.push(record_output(
        out_dir,
        &format!("{PD_TRUE_FILE}.png"),
    )?);

    write_manifest(
        &out_dir.join(SIMULATE_MANIFEST),
        &SimulateManifest {
            format_version: io::FORMAT_VERSION,
            command: "simulate".into(),
            params: params.clone(),
            realized,
            threads,
            outputs,
        },
    )
}

pub fn cmd_estimate(
    input: &Path,
    out_dir: &Path,
    params: &MethodParams,
    psf_path: Option<&Path>,
    threads: usize,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let s = io::read_stack(input)?;
    let psf = psf_path.map(io::read_psf).transpose()?;

    let started = Instant::now();
    let result = run_method(&s, params, psf.as_ref())?;
    let wall_time_s = started.elapsed().as_secs_f64();

    io::write_stack(&out_dir.join(BLOOD_EST_FILE), &result.blood)?;
    io::write_stack(&out_dir.join(TISSUE_EST_FILE), &result.tissue)?;
    io::write_power_doppler(&out_dir.join(PD_EST_FILE), &power_doppler(&result.blood)?)?;
    if let Some(k) = &result.psf {
        io::write_psf(&out_dir.join(PSF_EST_FILE), k)?;
    }
    fs::write(
        out_dir.join(TRACE_FILE),
        serde_json::to_string_pretty(&ConvergenceTrace {
            format_version: io::FORMAT_VERSION,
            kind: "convergence_trace".into(),
            iterations: result.iterations,
            records: result.trace.clone(),
        })?,
    )?;

    let mut outputs = Vec::new();
    for name in [BLOOD_EST_FILE, TISSUE_EST_FILE, PD_EST_FILE] {
        outputs.push(record_output(out_dir, name)?);
    }
    outputs.push(record_output(out_dir, &format!("{PD_EST_FILE}.png"))?);
    if result.psf.is_some() {
        outputs.push(record_output(out_dir, PSF_EST_FILE)?);
    }
    outputs.push(record_output(out_dir, TRACE_FILE)?);

    write_manifest(
        &out_dir.join(ESTIMATE_MANIFEST),
        &EstimateManifest {
            format_version: io::FORMAT_VERSION,
            command: "estimate".into(),
            params: params.clone(),
            input: record_input(input)?,
            psf_input: psf_path.map(record_input).transpose()?,
            threads,
            wall_time_s,
            iterations: result.iterations,
            outputs,
        },
    )
}

/// Builds the JSON comparison report between a truth image and an estimate.
pub fn evaluate_images(
    truth: &crate::metrics::PowerDopplerImage,
    estimate: &crate::metrics::PowerDopplerImage,
    r1: &PatchRect,
    patch_h: usize,
    patch_w: usize,
    d_max: f64,
) -> Result<(f64, Option<f64>, bool, crate::metrics::CrSweep)> {
    let err = nrmse(truth, estimate)?;
    let p = psnr(truth, estimate, d_max)?;
    let (psnr_db, psnr_infinite) = if p.is_finite() { (Some(p), false) } else { (None, true) };
    let sweep = cr_sweep(estimate, r1, patch_h, patch_w)?;
    Ok((err, psnr_db, psnr_infinite, sweep))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    truth_path: &Path,
    estimate_path: &Path,
    report_path: &Path,
    r1: Option<PatchRect>,
    patch_h: usize,
    patch_w: usize,
    d_max: f64,
    dynamic_range: f64,
) -> Result<()> {
    let truth = io::load_power_doppler_like(truth_path)?.with_dynamic_range(dynamic_range)?;
    let estimate = io::load_power_doppler_like(estimate_path)?.with_dynamic_range(dynamic_range)?;
    let r1 = r1.unwrap_or(PatchRect::new(0, 0, patch_h, patch_w));
    let (err, psnr_db, psnr_infinite, sweep) =
        evaluate_images(&truth, &estimate, &r1, patch_h, patch_w, d_max)?;

    let report = EvaluationReport {
        format_version: io::FORMAT_VERSION,
        kind: "evaluation_report".into(),
        nrmse: err,
        psnr_db,
        psnr_infinite,
        d_max,
        dynamic_range,
        r1,
        patch_h,
        patch_w,
        cr_patch_count: sweep.values.len(),
        cr_median: sweep.median,
        cr_quartiles: sweep.quartiles,
        inputs: EvalInputs {
            truth: record_input(truth_path)?,
            estimate: record_input(estimate_path)?,
        },
    };
    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    out_dir: &Path,
    sim: &SimParams,
    params: &MethodParams,
    grid: &[f64],
    noise_seed_base: u64,
    r1: Option<PatchRect>,
    patch_h: usize,
    patch_w: usize,
    d_max: f64,
    threads: usize,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let cfg = phantom_config_from(sim)?;
    let truth = simulate(&cfg)?;
    let r1 = r1.unwrap_or(PatchRect::new(0, 0, patch_h, patch_w));

    let mut entries = Vec::with_capacity(grid.len());
    for (i, &bsnr) in grid.iter().enumerate() {
        let noisy = add_noise_bsnr(&truth, bsnr, noise_seed_base.wrapping_add(i as u64))?;
        let started = Instant::now();
        // drpca (and an overridden bdrpca) would need a kernel file on the
        // estimate path; the sweep hands them the true kernel instead.
        let oracle = match params {
            MethodParams::Drpca { .. } => Some(&truth.psf_true),
            _ => None,
        };
        let result = run_method(&noisy.s_observed, params, oracle)?;
        let wall_time_s = started.elapsed().as_secs_f64();
        let pd_est = power_doppler(&result.blood)?;
        let (err, psnr_db, psnr_infinite, sweep) =
            evaluate_images(&truth.pd_true, &pd_est, &r1, patch_h, patch_w, d_max)?;
        entries.push(SweepEntry {
            bsnr_db: bsnr,
            nrmse: err,
            psnr_db,
            psnr_infinite,
            cr_median: sweep.median,
            wall_time_s,
            iterations: result.iterations,
        });
    }

    let report = SweepReport {
        format_version: io::FORMAT_VERSION,
        kind: "evaluation_sweep".into(),
        sim: sim.clone(),
        params: params.clone(),
        noise_seed_base,
        d_max,
        r1,
        patch_h,
        patch_w,
        entries,
    };
    fs::write(
        out_dir.join(SWEEP_REPORT_FILE),
        serde_json::to_string_pretty(&report)?,
    )?;
    let outputs = vec![record_output(out_dir, SWEEP_REPORT_FILE)?];
    write_manifest(
        &out_dir.join(SWEEP_MANIFEST),
        &SweepManifest {
            format_version: io::FORMAT_VERSION,
            command: "evaluate-sweep".into(),
            sim: sim.clone(),
            params: params.clone(),
            bsnr_grid: grid.to_vec(),
            noise_seed_base,
            threads,
            outputs,
        },
    )
}

pub fn cmd_psf_export(out: &Path, spec: &SynthPsfSpec, threads: usize) -> Result<()> {
    let psf = synth_psf(spec.fc, spec.sigma_z, spec.sigma_x, spec.support)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    io::write_psf(out, &psf)?;
    let manifest_path = out.with_file_name(PSF_EXPORT_MANIFEST);
    let outputs = vec![OutputRecord {
        path: out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: io::sha256_file(out)?,
    }];
    write_manifest(
        &manifest_path,
        &PsfExportManifest {
            format_version: io::FORMAT_VERSION,
            command: "psf-export".into(),
            spec: spec.clone(),
            threads,
            outputs,
        },
    )
}

pub fn run(cli: Cli, threads: usize) -> Result<()> {
    match cli.command {
        Command::Simulate {
            out_dir,
            config,
            bsnr,
            noise_seed,
            sim,
        } => {
            let loaded: Option<SimulateManifest> = config
                .as_deref()
                .map(|p| load_manifest_json(p, "simulate"))
                .transpose()?;
            let params =
                resolve_sim_params(&sim, bsnr, noise_seed, loaded.as_ref().map(|m| &m.params))?;
            cmd_simulate(&out_dir, &params, threads)
        }
        Command::Estimate {
            input,
            out_dir,
            config,
            psf,
            solver,
        } => {
            let loaded: Option<EstimateManifest> = config
                .as_deref()
                .map(|p| load_manifest_json(p, "estimate"))
                .transpose()?;
            let input = input
                .or_else(|| loaded.as_ref().map(|m| PathBuf::from(&m.input.path)))
                .ok_or_else(|| Error::InvalidParameter("--input is required".into()))?;
            let stack = io::read_stack(&input)?;
            let params = resolve_method_params(
                &solver,
                loaded.as_ref().map(|m| &m.params),
                stack.nz(),
                stack.nx(),
                stack.nt(),
            )?;
            drop(stack);
            let psf_path = psf.or_else(|| {
                loaded
                    .as_ref()
                    .and_then(|m| m.psf_input.as_ref())
                    .map(|r| PathBuf::from(&r.path))
            });
            cmd_estimate(&input, &out_dir, &params, psf_path.as_deref(), threads)
        }
        Command::Evaluate {
            truth,
            estimate,
            report,
            r1,
            patch_h,
            patch_w,
            d_max,
            dynamic_range,
        } => cmd_evaluate(
            &truth,
            &estimate,
            &report,
            r1,
            patch_h,
            patch_w,
            d_max,
            dynamic_range,
        ),
        Command::EvaluateSweep {
            out_dir,
            bsnr,
            noise_seed,
            sim,
            solver,
            r1,
            patch_h,
            patch_w,
            d_max,
        } => {
            let grid = parse_grid(&bsnr)?;
            let params = resolve_sim_params(&sim, None, noise_seed, None)?;
            let method = resolve_method_params(&solver, None, params.nz, params.nx, params.nt)?;
            let base = params.noise_seed;
            cmd_sweep(
                &out_dir, &params, &method, &grid, base, r1, patch_h, patch_w, d_max, threads,
            )
        }
        Command::PsfExport {
            out,
            fc,
            sigma_z,
            sigma_x,
            support_z,
            support_x,
        } => cmd_psf_export(
            &out,
            &SynthPsfSpec {
                fc,
                sigma_z,
                sigma_x,
                support: (support_z, support_x),
            },
            threads,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("15").unwrap(), vec![15.0]);
        let g = parse_grid("0:5:60").unwrap();
        assert_eq!(g.len(), 13);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[12], 60.0);
        let tight = parse_grid("0:0.25:1").unwrap();
        assert_eq!(tight.len(), 5);
        assert!(parse_grid("5:0:10").is_err());
        assert!(parse_grid("10:5:0").is_err());
        assert!(parse_grid("1:2").is_err());
        assert!(parse_grid("abc").is_err());
    }

    #[test]
    fn rect_parsing() {
        assert_eq!(
            parse_rect("1,2,3,4").unwrap(),
            PatchRect::new(1, 2, 3, 4)
        );
        assert!(parse_rect("1,2,3").is_err());
        assert!(parse_rect("a,b,c,d").is_err());
    }

    #[test]
    fn sim_resolution_precedence() {
        let mut flags = SimFlags::default();
        flags.nz = Some(64);
        flags.nx = Some(48);
        flags.nt = Some(10);
        let config = resolve_sim_params(&flags, Some(20.0), None, None).unwrap();
        assert_eq!(config.nz, 64);
        assert_eq!(config.bsnr_db, Some(20.0));
        assert_eq!(config.noise_seed, 1);

        // Config supplies values; a flag overrides one of them.
        let mut override_flags = SimFlags::default();
        override_flags.seed = Some(9);
        let re = resolve_sim_params(&override_flags, None, None, Some(&config)).unwrap();
        assert_eq!(re.nz, 64);
        assert_eq!(re.seed, 9);
        assert_eq!(re.bsnr_db, Some(20.0), "config noise setting survives");
        assert_eq!(re.rect1, config.rect1);
    }

    #[test]
    fn default_sim_dims_are_full_scale() {
        let params = resolve_sim_params(&SimFlags::default(), None, None, None).unwrap();
        assert_eq!((params.nz, params.nx, params.nt), (451, 161, 400));
        assert_eq!((params.rect1.height, params.rect1.width), (12, 70));
        assert_eq!((params.rect2.height, params.rect2.width), (10, 35));
        assert_eq!(params.psf.support, (15, 15));
    }

    #[test]
    fn method_resolution_uses_reference_defaults() {
        let flags = SolverFlags {
            method: Some("rpca".into()),
            ..Default::default()
        };
        let p = resolve_method_params(&flags, None, 100, 1, 400).unwrap();
        match p {
            MethodParams::Rpca { admm } => {
                assert!((admm.lambda - 0.05).abs() < 1e-15);
                assert!((admm.mu - 0.5).abs() < 1e-15);
                assert_eq!(admm.rho, 1.0);
            }
            _ => panic!("wrong method"),
        }

        let flags = SolverFlags {
            method: Some("drpca".into()),
            lambda: Some(0.2),
            ..Default::default()
        };
        let p = resolve_method_params(&flags, None, 100, 1, 400).unwrap();
        match p {
            MethodParams::Drpca { admm } => {
                assert_eq!(admm.lambda, 0.2, "flag wins");
                assert!((admm.mu - 0.1).abs() < 1e-15, "reference mu with multiplier 2");
            }
            _ => panic!("wrong method"),
        }
    }

    #[test]
    fn method_resolution_flag_beats_config() {
        let config = MethodParams::Rpca {
            admm: AdmmParams::new(0.11, 2.0, 0.7).unwrap(),
        };
        let flags = SolverFlags {
            mu: Some(0.9),
            ..Default::default()
        };
        let p = resolve_method_params(&flags, Some(&config), 64, 64, 50).unwrap();
        match p {
            MethodParams::Rpca { admm } => {
                assert_eq!(admm.lambda, 0.11, "config value survives");
                assert_eq!(admm.mu, 0.9, "flag overrides config");
                assert_eq!(admm.rho, 2.0);
            }
            _ => panic!("wrong method"),
        }
        assert!(resolve_method_params(&SolverFlags::default(), None, 8, 8, 8).is_err());
        let bad = SolverFlags {
            method: Some("pca".into()),
            ..Default::default()
        };
        assert!(resolve_method_params(&bad, None, 8, 8, 8).is_err());
    }

    #[test]
    fn bdrpca_resolution_keeps_stage_multipliers_apart() {
        let flags = SolverFlags {
            method: Some("bdrpca".into()),
            ..Default::default()
        };
        let p = resolve_method_params(&flags, None, 100, 1, 400).unwrap();
        match p {
            MethodParams::Bdrpca { init, admm, .. } => {
                assert!((init.mu - 0.5).abs() < 1e-15, "bootstrap multiplier 10");
                assert!((admm.mu - 0.1).abs() < 1e-15, "inner multiplier 2");
            }
            _ => panic!("wrong method"),
        }
    }
}
