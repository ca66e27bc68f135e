//! Casorati reshaping of IQ ensembles.
//!
//! A stack of `nt` frames of size `nz x nx` maps to an `(nz*nx) x nt` matrix
//! whose column `t` is frame `t` flattened depth-fastest: row `r = z + nz*x`.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acquisition metadata carried alongside sample data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    pub dz_cm: Option<f64>,
    pub dx_cm: Option<f64>,
    pub frame_rate_hz: Option<f64>,
}

/// Complex IQ ensemble of shape `(nz, nx, nt)`. Entries are finite by construction.
#[derive(Clone, Debug)]
pub struct IQStack {
    data: Array3<Complex64>,
    pub meta: StackMeta,
}

impl IQStack {
    pub fn new(data: Array3<Complex64>, meta: StackMeta) -> Result<Self> {
        let (nz, nx, nt) = data.dim();
        if nz == 0 || nx == 0 || nt == 0 {
            return Err(Error::InvalidParameter(format!(
                "stack dimensions must be nonzero, got {nz}x{nx}x{nt}"
            )));
        }
        if !data.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::NonFinite("IQ stack samples".into()));
        }
        Ok(Self { data, meta })
    }

    pub fn nz(&self) -> usize {
        self.data.dim().0
    }

    pub fn nx(&self) -> usize {
        self.data.dim().1
    }

    pub fn nt(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn to_casorati(&self) -> Result<CasoratiMatrix> {
        let (nz, nx, nt) = self.data.dim();
        let rows = nz
            .checked_mul(nx)
            .ok_or_else(|| Error::InvalidParameter(format!("nz*nx overflows: {nz}*{nx}")))?;
        let mut m = Array2::zeros((rows, nt));
        for t in 0..nt {
            for x in 0..nx {
                for z in 0..nz {
                    m[[z + nz * x, t]] = self.data[[z, x, t]];
                }
            }
        }
        CasoratiMatrix::new(m, nz, nx, self.meta.clone())
    }
}

/// Casorati matrix `(nz*nx) x nt` with the frame geometry it was built from.
#[derive(Clone, Debug)]
pub struct CasoratiMatrix {
    data: Array2<Complex64>,
    nz: usize,
    nx: usize,
    pub meta: StackMeta,
}

impl CasoratiMatrix {
    /// Rejects data whose row count is not `nz * nx`.
    pub fn new(data: Array2<Complex64>, nz: usize, nx: usize, meta: StackMeta) -> Result<Self> {
        if nz == 0 || nx == 0 || data.ncols() == 0 {
            return Err(Error::InvalidParameter(
                "Casorati dimensions must be nonzero".into(),
            ));
        }
        let rows = nz
            .checked_mul(nx)
            .ok_or_else(|| Error::InvalidParameter(format!("nz*nx overflows: {nz}*{nx}")))?;
        if data.nrows() != rows {
            return Err(Error::DimensionMismatch(format!(
                "Casorati rows {} != nz*nx = {}*{}",
                data.nrows(),
                nz,
                nx
            )));
        }
        Ok(Self { data, nz, nx, meta })
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nt(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    /// Inverse of `IQStack::to_casorati`; bit-exact round trip.
    pub fn to_stack(&self) -> IQStack {
        let (nz, nx, nt) = (self.nz, self.nx, self.nt());
        let mut data = Array3::zeros((nz, nx, nt));
        for t in 0..nt {
            for x in 0..nx {
                for z in 0..nz {
                    data[[z, x, t]] = self.data[[z + nz * x, t]];
                }
            }
        }
        IQStack {
            data,
            meta: self.meta.clone(),
        }
    }

    /// Column `t` unflattened to an `nz x nx` image.
    pub fn frame(&self, t: usize) -> Array2<Complex64> {
        let mut img = Array2::zeros((self.nz, self.nx));
        for x in 0..self.nx {
            for z in 0..self.nz {
                img[[z, x]] = self.data[[z + self.nz * x, t]];
            }
        }
        img
    }

    pub(crate) fn set_frame(&mut self, t: usize, img: &Array2<Complex64>) {
        for x in 0..self.nx {
            for z in 0..self.nz {
                self.data[[z + self.nz * x, t]] = img[[z, x]];
            }
        }
    }

    /// Per-pixel mean over frames, returned as an `nz x nx` image.
    pub fn temporal_mean(&self) -> Array2<Complex64> {
        let nt = self.nt() as f64;
        let mut img = Array2::zeros((self.nz, self.nx));
        for x in 0..self.nx {
            for z in 0..self.nz {
                let r = z + self.nz * x;
                let mut acc = Complex64::new(0.0, 0.0);
                for t in 0..self.nt() {
                    acc += self.data[[r, t]];
                }
                img[[z, x]] = acc / nt;
            }
        }
        img
    }

    /// Same geometry and metadata around replacement sample data.
    pub(crate) fn with_data(&self, data: Array2<Complex64>) -> Result<Self> {
        Self::new(data, self.nz, self.nx, self.meta.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn tag(z: usize, x: usize, t: usize) -> Complex64 {
        Complex64::new(z as f64 + 10.0 * x as f64, 100.0 * t as f64)
    }

    fn tagged_stack(nz: usize, nx: usize, nt: usize) -> IQStack {
        let data = Array3::from_shape_fn((nz, nx, nt), |(z, x, t)| tag(z, x, t));
        IQStack::new(data, StackMeta::default()).unwrap()
    }

    #[test]
    fn mapping_matches_enumeration_3x2x1() {
        // all 6 elements checked against the r = z + nz*x rule by hand
        let s = tagged_stack(3, 2, 1);
        let m = s.to_casorati().unwrap();
        assert_eq!(m.data().dim(), (6, 1));
        let expected = [
            (0usize, tag(0, 0, 0)),
            (1, tag(1, 0, 0)),
            (2, tag(2, 0, 0)),
            (3, tag(0, 1, 0)),
            (4, tag(1, 1, 0)),
            (5, tag(2, 1, 0)),
        ];
        for (r, v) in expected {
            assert_eq!(m.data()[[r, 0]], v);
        }
    }

    #[test]
    fn mapping_matches_enumeration_3x2x2() {
        let s = tagged_stack(3, 2, 2);
        let m = s.to_casorati().unwrap();
        for t in 0..2 {
            for x in 0..2 {
                for z in 0..3 {
                    assert_eq!(m.data()[[z + 3 * x, t]], tag(z, x, t));
                }
            }
        }
    }

    #[test]
    fn single_pixel_stack_is_a_row() {
        let s = tagged_stack(1, 1, 3);
        let m = s.to_casorati().unwrap();
        assert_eq!(m.data().dim(), (1, 3));
        for t in 0..3 {
            assert_eq!(m.data()[[0, t]], tag(0, 0, t));
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let data = Array3::from_shape_fn((5, 4, 3), |(z, x, t)| {
            Complex64::new(
                (z * 31 + x * 7 + t) as f64 * 0.37 - 1.4,
                (z + x * 13 + t * 29) as f64 * -0.21 + 0.6,
            )
        });
        let s = IQStack::new(
            data,
            StackMeta {
                dz_cm: Some(0.0086),
                dx_cm: Some(0.0333),
                frame_rate_hz: Some(12_800.0),
            },
        )
        .unwrap();
        let back = s.to_casorati().unwrap().to_stack();
        assert_eq!(s.data(), back.data());
        assert_eq!(s.meta, back.meta);
    }

    #[test]
    fn full_scale_shape() {
        let s = IQStack::new(Array3::zeros((451, 161, 400)), StackMeta::default()).unwrap();
        let m = s.to_casorati().unwrap();
        assert_eq!(m.data().dim(), (72_611, 400));
    }

    #[test]
    fn temporal_mean_of_two_frames() {
        let mut data = Array3::zeros((2, 1, 2));
        data[[0, 0, 0]] = Complex64::new(1.0, 2.0);
        data[[0, 0, 1]] = Complex64::new(3.0, -2.0);
        data[[1, 0, 0]] = Complex64::new(-1.0, 0.0);
        data[[1, 0, 1]] = Complex64::new(1.0, 4.0);
        let m = IQStack::new(data, StackMeta::default())
            .unwrap()
            .to_casorati()
            .unwrap();
        let mean = m.temporal_mean();
        assert_eq!(mean[[0, 0]], Complex64::new(2.0, 0.0));
        assert_eq!(mean[[1, 0]], Complex64::new(0.0, 2.0));
    }

    #[test]
    fn constant_stack_has_constant_mean() {
        let c = Complex64::new(0.5, -0.25);
        let s = IQStack::new(Array3::from_elem((4, 3, 7), c), StackMeta::default()).unwrap();
        let mean = s.to_casorati().unwrap().temporal_mean();
        assert!(mean.iter().all(|v| (v - c).norm() < 1e-15));
    }

    #[test]
    fn frame_extraction_matches_source() {
        let s = tagged_stack(4, 3, 2);
        let m = s.to_casorati().unwrap();
        let f1 = m.frame(1);
        for x in 0..3 {
            for z in 0..4 {
                assert_eq!(f1[[z, x]], tag(z, x, 1));
            }
        }
    }

    #[test]
    fn rejects_zero_dims() {
        let r = IQStack::new(Array3::zeros((0, 2, 2)), StackMeta::default());
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let mut data = Array3::zeros((2, 2, 2));
        data[[1, 1, 1]] = Complex64::new(f64::NAN, 0.0);
        let r = IQStack::new(data, StackMeta::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_row_count_mismatch() {
        let r = CasoratiMatrix::new(Array2::zeros((5, 3)), 2, 2, StackMeta::default());
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    proptest! {
        #[test]
        fn prop_round_trip(nz in 1usize..5, nx in 1usize..5, nt in 1usize..5, seed in 0u64..1000) {
            let mut v = seed as f64;
            let data = Array3::from_shape_fn((nz, nx, nt), |_| {
                v = (v * 9301.0 + 49_297.0) % 233_280.0;
                Complex64::new(v / 233_280.0 - 0.5, (v * 0.5) / 233_280.0)
            });
            let s = IQStack::new(data, StackMeta::default()).unwrap();
            let back = s.to_casorati().unwrap().to_stack();
            prop_assert_eq!(s.data(), back.data());
        }
    }
}
