//! Conversions between ndarray storage and faer matrices.

use faer::Mat;
use ndarray::Array2;
use num_complex::Complex64;

pub(crate) fn to_faer(a: &Array2<Complex64>) -> Mat<Complex64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_faer(m: &Mat<Complex64>) -> Array2<Complex64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}
