//! Two-dimensional complex FFT on row-major square or rectangular grids.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    column: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(cols);
        let row_inv = planner.plan_fft_inverse(cols);
        let col_fwd = planner.plan_fft_forward(rows);
        let col_inv = planner.plan_fft_inverse(rows);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            rows,
            cols,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch: vec![Complex64::default(); scratch_len],
            column: vec![Complex64::default(); rows],
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn run(&mut self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.len(), "fft buffer size");
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process_with_scratch(data, &mut self.scratch);
        for j in 0..self.cols {
            for i in 0..self.rows {
                self.column[i] = data[i * self.cols + j];
            }
            col.process_with_scratch(&mut self.column, &mut self.scratch);
            for i in 0..self.rows {
                data[i * self.cols + j] = self.column[i];
            }
        }
    }

    /// Unnormalised forward transform, in place.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// Inverse transform scaled by `1/N`, in place.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.run(data, true);
        let s = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|z| *z *= s);
    }

    pub fn forward_real(&mut self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&mut self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut spec);
        spec.into_iter().map(|z| z.re).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_dc() {
        let (r, c) = (6, 4);
        let x: Vec<f64> = (0..r * c).map(|k| ((k * 7) % 5) as f64 - 1.5).collect();
        let mut f = Fft2::new(r, c);
        let spec = f.forward_real(&x);
        assert!((spec[0].re - x.iter().sum::<f64>()).abs() < 1e-12);
        let back = f.inverse_real(spec);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let (r, c) = (3, 5);
        let x: Vec<f64> = (0..r * c).map(|k| (k as f64 * 0.37).sin()).collect();
        let spec = Fft2::new(r, c).forward_real(&x);
        for k in 0..r {
            for l in 0..c {
                let mut acc = Complex64::default();
                for i in 0..r {
                    for j in 0..c {
                        let ph = -2.0
                            * std::f64::consts::PI
                            * ((k * i) as f64 / r as f64 + (l * j) as f64 / c as f64);
                        acc += Complex64::from_polar(x[i * c + j], ph);
                    }
                }
                assert!((acc - spec[k * c + l]).norm() < 1e-12);
            }
        }
    }
}
