//! Internal 2D FFT plumbing on `Array2<Complex64>`.
//!
//! Convention used throughout the crate: the forward transform is
//! unnormalized, the inverse carries the full `1/(rows*cols)` factor.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

#[derive(Clone)]
pub(crate) struct Fft2 {
    rows: usize,
    cols: usize,
    fwd_row: Arc<dyn Fft<f64>>,
    fwd_col: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            fwd_row: planner.plan_fft_forward(cols),
            fwd_col: planner.plan_fft_forward(rows),
            inv_row: planner.plan_fft_inverse(cols),
            inv_col: planner.plan_fft_inverse(rows),
        }
    }

    fn apply(
        &self,
        a: &Array2<Complex64>,
        row_plan: &Arc<dyn Fft<f64>>,
        col_plan: &Arc<dyn Fft<f64>>,
    ) -> Array2<Complex64> {
        debug_assert_eq!(a.dim(), (self.rows, self.cols));
        // assign() into freshly allocated arrays guarantees C-order rows,
        // which process() needs as contiguous slices
        let mut b = Array2::zeros((self.rows, self.cols));
        b.assign(a);
        for mut row in b.rows_mut() {
            row_plan.process(row.as_slice_mut().expect("row-major layout"));
        }
        let mut bt = Array2::zeros((self.cols, self.rows));
        bt.assign(&b.t());
        for mut row in bt.rows_mut() {
            col_plan.process(row.as_slice_mut().expect("row-major layout"));
        }
        let mut out = Array2::zeros((self.rows, self.cols));
        out.assign(&bt.t());
        out
    }

    /// Unnormalized forward 2D DFT.
    pub fn forward(&self, a: &Array2<Complex64>) -> Array2<Complex64> {
        self.apply(a, &self.fwd_row, &self.fwd_col)
    }

    /// Inverse 2D DFT scaled by `1/(rows*cols)`, so `inverse(forward(a)) == a`.
    pub fn inverse(&self, a: &Array2<Complex64>) -> Array2<Complex64> {
        let mut out = self.apply(a, &self.inv_row, &self.inv_col);
        let scale = 1.0 / (self.rows * self.cols) as f64;
        out.mapv_inplace(|v| v * scale);
        out
    }
}
