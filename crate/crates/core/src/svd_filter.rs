//! Rank-band clutter filter: keep a contiguous slice of the singular spectrum.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::casorati::CasoratiMatrix;
use crate::dense::{from_faer, to_faer};
use crate::error::{Error, Result};

/// Inclusive band of 1-based singular-value indices, values sorted descending.
/// Indices below `tc` are treated as clutter, above `tb` as noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBand {
    pub tc: usize,
    pub tb: usize,
}

impl RankBand {
    pub fn new(tc: usize, tb: usize) -> Result<Self> {
        if tc < 1 || tb < tc {
            return Err(Error::InvalidParameter(format!(
                "rank band needs 1 <= tc <= tb, got tc={tc} tb={tb}"
            )));
        }
        Ok(Self { tc, tb })
    }

    pub(crate) fn check_against(&self, rows: usize, cols: usize) -> Result<()> {
        let r = rows.min(cols);
        if self.tc < 1 || self.tb < self.tc || self.tb > r {
            return Err(Error::InvalidParameter(format!(
                "rank band [{}, {}] out of range for a {rows}x{cols} matrix (valid up to {r})",
                self.tc, self.tb
            )));
        }
        Ok(())
    }
}

impl Default for RankBand {
    fn default() -> Self {
        Self { tc: 2, tb: 15 }
    }
}

/// `sum_{k=tc..=tb} u_k s_k v_k^H` from one economy SVD of the input.
/// Ties between singular values leave the selected subspace implementation-
/// defined but the output is still a valid rank-(tb-tc+1) truncation.
pub fn svd_filter(s: &CasoratiMatrix, band: RankBand) -> Result<CasoratiMatrix> {
    band.check_against(s.data().nrows(), s.data().ncols())?;
    let a = to_faer(s.data());
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Linalg(format!("SVD failed: {e:?}")))?;
    let u = svd.U();
    let v = svd.V();
    let sv = svd.S();
    let lo = band.tc - 1;
    let k = band.tb - lo;
    let us = Mat::from_fn(u.nrows(), k, |i, j| u[(i, lo + j)] * sv[lo + j].re);
    let vb = Mat::from_fn(v.nrows(), k, |i, j| v[(i, lo + j)]);
    let out = &us * vb.adjoint();
    s.with_data(from_faer(&out))
}
