//! Circular 2D convolution as a frequency-domain diagonal operator.
//!
//! A compact kernel is embedded into the frame grid with its center at (0,0)
//! and wraparound, so applying the operator is elementwise multiplication by
//! the kernel's transfer function in the 2D DFT domain. One operator serves a
//! whole ensemble because the blur is assumed identical across frames.

use ndarray::Array2;
use num_complex::Complex64;

use crate::casorati::CasoratiMatrix;
use crate::error::{Error, Result};
use crate::fft::Fft2;

/// Point spread function: compact complex kernel plus the index of its center tap.
#[derive(Clone, Debug)]
pub struct Psf {
    kernel: Array2<Complex64>,
    center: (usize, usize),
    normalized: bool,
}

impl Psf {
    pub fn new(kernel: Array2<Complex64>, center: (usize, usize)) -> Result<Self> {
        let (kh, kw) = kernel.dim();
        if kh == 0 || kw == 0 {
            return Err(Error::InvalidParameter("empty PSF kernel".into()));
        }
        if center.0 >= kh || center.1 >= kw {
            return Err(Error::InvalidParameter(format!(
                "PSF center {:?} outside {}x{} kernel",
                center, kh, kw
            )));
        }
        if !kernel.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::NonFinite("PSF kernel".into()));
        }
        Ok(Self {
            kernel,
            center,
            normalized: false,
        })
    }

    /// Kernel with the default center convention (floor of half extent).
    pub fn centered(kernel: Array2<Complex64>) -> Result<Self> {
        let (kh, kw) = kernel.dim();
        Self::new(kernel, (kh / 2, kw / 2))
    }

    /// Identity kernel.
    pub fn delta() -> Self {
        Self {
            kernel: Array2::from_elem((1, 1), Complex64::new(1.0, 0.0)),
            center: (0, 0),
            normalized: true,
        }
    }

    pub fn kernel(&self) -> &Array2<Complex64> {
        &self.kernel
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn energy(&self) -> f64 {
        self.kernel.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Scales the kernel to unit energy (sum of squared moduli = 1).
    pub fn normalize_energy(mut self) -> Result<Self> {
        let e = self.energy();
        if e <= 0.0 {
            return Err(Error::InvalidParameter(
                "cannot normalize an all-zero PSF".into(),
            ));
        }
        let s = 1.0 / e.sqrt();
        self.kernel.mapv_inplace(|v| v * s);
        self.normalized = true;
        Ok(self)
    }
}

/// Diagonal representation of circular convolution on an `nz x nx` grid.
#[derive(Clone)]
pub struct FrequencyOperator {
    transfer: Array2<Complex64>,
    fft: Fft2,
}

impl std::fmt::Debug for FrequencyOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrequencyOperator")
            .field("dims", &self.transfer.dim())
            .finish()
    }
}

/// Registers the kernel center at grid position (0,0) with wraparound and
/// returns the unnormalized forward DFT of the embedding.
pub fn embed_psf(psf: &Psf, nz: usize, nx: usize) -> Result<FrequencyOperator> {
    let (kh, kw) = psf.kernel().dim();
    if nz == 0 || nx == 0 {
        return Err(Error::InvalidParameter("empty frame grid".into()));
    }
    if kh > nz || kw > nx {
        return Err(Error::InvalidParameter(format!(
            "PSF kernel {}x{} larger than frame {}x{}",
            kh, kw, nz, nx
        )));
    }
    let (cr, cc) = psf.center();
    let mut embedded = Array2::zeros((nz, nx));
    for i in 0..kh {
        for j in 0..kw {
            let r = (i + nz - cr) % nz;
            let c = (j + nx - cc) % nx;
            embedded[[r, c]] = psf.kernel()[[i, j]];
        }
    }
    let fft = Fft2::new(nz, nx);
    let transfer = fft.forward(&embedded);
    Ok(FrequencyOperator { transfer, fft })
}

impl FrequencyOperator {
    pub fn nz(&self) -> usize {
        self.transfer.dim().0
    }

    pub fn nx(&self) -> usize {
        self.transfer.dim().1
    }

    pub fn transfer(&self) -> &Array2<Complex64> {
        &self.transfer
    }

    pub(crate) fn fft(&self) -> &Fft2 {
        &self.fft
    }

    fn check_dims(&self, img: &Array2<Complex64>) -> Result<()> {
        if img.dim() != self.transfer.dim() {
            return Err(Error::DimensionMismatch(format!(
                "image {:?} vs operator {:?}",
                img.dim(),
                self.transfer.dim()
            )));
        }
        Ok(())
    }

    /// Circular convolution of one frame.
    pub fn conv2_circ(&self, img: &Array2<Complex64>) -> Result<Array2<Complex64>> {
        self.check_dims(img)?;
        let mut spec = self.fft.forward(img);
        spec.zip_mut_with(&self.transfer, |s, h| *s *= h);
        Ok(self.fft.inverse(&spec))
    }

    /// Adjoint of `conv2_circ`: multiplication by the conjugate transfer.
    pub fn conv2_circ_adjoint(&self, img: &Array2<Complex64>) -> Result<Array2<Complex64>> {
        self.check_dims(img)?;
        let mut spec = self.fft.forward(img);
        spec.zip_mut_with(&self.transfer, |s, h| *s *= h.conj());
        Ok(self.fft.inverse(&spec))
    }

    /// Applies the frame blur to every column of a Casorati matrix.
    pub fn apply_to_casorati(&self, m: &CasoratiMatrix) -> Result<CasoratiMatrix> {
        if m.nz() != self.nz() || m.nx() != self.nx() {
            return Err(Error::DimensionMismatch(format!(
                "Casorati frames {}x{} vs operator {}x{}",
                m.nz(),
                m.nx(),
                self.nz(),
                self.nx()
            )));
        }
        let mut out = m.clone();
        for t in 0..m.nt() {
            let blurred = self.conv2_circ(&m.frame(t))?;
            out.set_frame(t, &blurred);
        }
        Ok(out)
    }
}
