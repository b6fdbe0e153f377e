//! Separable bicubic resampling (Catmull-Rom family, a = -0.5).
//!
//! Downsampling stretches the kernel by the scale ratio (antialiasing).
//! Taps that fall outside the image are dropped and the remaining weights
//! renormalized, so every output row of the operator sums to one. The
//! operator is linear, which gives an exact adjoint for backpropagation.

use ndarray::{Array2, Array3, Axis};

pub const CUBIC_A: f64 = -0.5;

pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * CUBIC_A
    } else {
        0.0
    }
}

/// Dense `out_len x in_len` interpolation matrix for one axis.
pub fn axis_weights(in_len: usize, out_len: usize) -> Array2<f64> {
    let ratio = in_len as f64 / out_len as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    let mut m = Array2::zeros((out_len, in_len));
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * ratio - 0.5;
        let lo = ((center - support).floor() as isize).max(0) as usize;
        let hi = ((center + support).ceil() as isize).min(in_len as isize - 1);
        if hi < 0 {
            continue;
        }
        let mut total = 0.0;
        for j in lo..=hi as usize {
            let w = cubic_kernel((j as f64 - center) / stretch);
            m[[i, j]] = w;
            total += w;
        }
        if total != 0.0 {
            m.row_mut(i).mapv_inplace(|w| w / total);
        }
    }
    m
}

/// A fixed-size separable resampling operator.
#[derive(Clone, Debug)]
pub struct Resampler {
    rows: Array2<f64>,
    cols: Array2<f64>,
}

impl Resampler {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Resampler { rows: axis_weights(in_hw.0, out_hw.0), cols: axis_weights(in_hw.1, out_hw.1) }
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.rows.ncols(), self.cols.ncols())
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.rows.nrows(), self.cols.nrows())
    }

    pub fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        separable(&self.rows, &self.cols, x)
    }

    /// Adjoint operator: maps an output-shaped gradient back to input shape.
    pub fn apply_transpose(&self, g: &Array3<f64>) -> Array3<f64> {
        separable(&self.rows.t().to_owned(), &self.cols.t().to_owned(), g)
    }
}

fn separable(rows: &Array2<f64>, cols: &Array2<f64>, x: &Array3<f64>) -> Array3<f64> {
    let (_, _, c) = x.dim();
    let mut out = Array3::zeros((rows.nrows(), cols.nrows(), c));
    for ch in 0..c {
        let plane = x.index_axis(Axis(2), ch);
        let r = rows.dot(&plane).dot(&cols.t());
        out.index_axis_mut(Axis(2), ch).assign(&r);
    }
    out
}

/// Resizes an array to `out_hw` with the bicubic operator.
pub fn resize(x: &Array3<f64>, out_hw: (usize, usize)) -> Array3<f64> {
    let (h, w, _) = x.dim();
    Resampler::new((h, w), out_hw).apply(x)
}
