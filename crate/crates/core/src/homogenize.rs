//! Effective heat conduction of a periodic two-phase image.
//!
//! Matrix conductivity is 1 and inclusion conductivity `1/R`. Each pixel is a
//! finite volume; fluxes across pixel faces use the harmonic mean of the two
//! adjacent conductivities. For a prescribed unit average gradient along x or
//! y, the periodic temperature fluctuation solves a symmetric positive
//! semi-definite system, handled by conjugate gradients preconditioned with
//! the FFT-diagonal operator of a homogeneous reference medium.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config, CoreError, Result};
use crate::fft::Fft2;
use crate::grid::RveImage;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 5000;

/// Normalised effective conductivity in Mandel form `[k11, k22, sqrt(2)*k12]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConductivityTensor {
    pub kappa: [f64; 3],
}

impl ConductivityTensor {
    pub fn from_components(k11: f64, k22: f64, k12: f64) -> Self {
        Self {
            kappa: [k11, k22, std::f64::consts::SQRT_2 * k12],
        }
    }

    pub fn from_mandel(kappa: [f64; 3]) -> Self {
        Self { kappa }
    }

    pub fn k11(&self) -> f64 {
        self.kappa[0]
    }

    pub fn k22(&self) -> f64 {
        self.kappa[1]
    }

    /// Plain off-diagonal entry.
    pub fn k12(&self) -> f64 {
        self.kappa[2] / std::f64::consts::SQRT_2
    }

    /// Eigenvalues, ascending.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let (a, d, b) = (self.k11(), self.k22(), self.k12());
        let m = 0.5 * (a + d);
        let r = (0.25 * (a - d).powi(2) + b * b).sqrt();
        (m - r, m + r)
    }

    pub fn is_spd(&self) -> bool {
        self.k11() > 0.0 && self.k22() > 0.0 && self.k11() * self.k22() - self.k12().powi(2) > 0.0
    }

    /// Tensor of the quarter-turned image: diagonal swapped, off-diagonal negated.
    pub fn rotated90(&self) -> Self {
        Self {
            kappa: [self.kappa[1], self.kappa[0], -self.kappa[2]],
        }
    }
}

/// Reuss (lower) and Voigt (upper) bounds for inclusion fraction `f` at contrast `r`.
pub fn voigt_reuss_bounds(f: f64, r: f64) -> (f64, f64) {
    let lower = 1.0 / ((1.0 - f) + f * r);
    let upper = (1.0 - f) + f / r;
    (lower, upper)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative residual `|r| / |b|` at which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub tensor: ConductivityTensor,
    /// Iterations used for the x and y load cases.
    pub iterations: [usize; 2],
    pub residuals: [f64; 2],
    /// Raw (unsymmetrised) 2x2 flux response, column `j` for load `j`.
    pub raw: [[f64; 2]; 2],
}

/// Reusable solver for one resolution; holds FFT plans and work buffers.
pub struct Homogenizer {
    n: usize,
    config: SolverConfig,
    fft: Fft2,
    laplace_symbol: Vec<f64>,
    work: Vec<Complex64>,
}

pub fn validate_contrast(r: f64) -> Result<()> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(config(format!("phase contrast must be a finite value >= 1, got {r}")));
    }
    Ok(())
}

impl Homogenizer {
    pub fn new(n: usize, config: SolverConfig) -> Self {
        let mut laplace_symbol = vec![0.0; n * n];
        let nf = n as f64;
        for k in 0..n {
            let sk = (std::f64::consts::PI * k as f64 / nf).sin();
            for l in 0..n {
                let sl = (std::f64::consts::PI * l as f64 / nf).sin();
                laplace_symbol[k * n + l] = 4.0 * (sk * sk + sl * sl);
            }
        }
        Self {
            n,
            config,
            fft: Fft2::new(n, n),
            laplace_symbol,
            work: vec![Complex64::default(); n * n],
        }
    }

    pub fn config(&self) -> SolverConfig {
        self.config
    }

    pub fn solve(&mut self, rve: &RveImage, r: f64) -> Result<SolveReport> {
        validate_contrast(r)?;
        if !(self.config.tol > 0.0) {
            return Err(config("solver tolerance must be positive"));
        }
        if rve.n() != self.n {
            return Err(config(format!(
                "solver built for {0}x{0} images, got {1}x{1}",
                self.n,
                rve.n()
            )));
        }
        let n = self.n;
        let kappa: Vec<f64> = rve.pixels().iter().map(|&p| if p == 1 { 1.0 / r } else { 1.0 }).collect();
        let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);
        // Conductivity on the east face of (i, j) and on its south face.
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                kx[p] = harmonic(kappa[p], kappa[i * n + (j + 1) % n]);
                ky[p] = harmonic(kappa[p], kappa[((i + 1) % n) * n + j]);
            }
        }
        let k_ref = 0.5 * (1.0 + 1.0 / r);
        let mut raw = [[0.0; 2]; 2];
        let mut iterations = [0; 2];
        let mut residuals = [0.0; 2];
        for load in 0..2 {
            let (ex, ey) = if load == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
            let b: Vec<f64> = (0..n * n)
                .map(|p| {
                    let (i, j) = (p / n, p % n);
                    let west = i * n + (j + n - 1) % n;
                    let north = ((i + n - 1) % n) * n + j;
                    ex * (kx[p] - kx[west]) + ey * (ky[p] - ky[north])
                })
                .collect();
            let (phi, iters, res) = self.pcg(&kx, &ky, &b, k_ref)?;
            iterations[load] = iters;
            residuals[load] = res;
            let (mut qx, mut qy) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let p = i * n + j;
                    qx += kx[p] * (ex + phi[i * n + (j + 1) % n] - phi[p]);
                    qy += ky[p] * (ey + phi[((i + 1) % n) * n + j] - phi[p]);
                }
            }
            let cells = (n * n) as f64;
            raw[0][load] = qx / cells;
            raw[1][load] = qy / cells;
        }
        let k12 = 0.5 * (raw[0][1] + raw[1][0]);
        Ok(SolveReport {
            tensor: ConductivityTensor::from_components(raw[0][0], raw[1][1], k12),
            iterations,
            residuals,
            raw,
        })
    }

    fn apply(&self, kx: &[f64], ky: &[f64], x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let up = (i + n - 1) % n;
            let down = (i + 1) % n;
            for j in 0..n {
                let p = i * n + j;
                let left = i * n + (j + n - 1) % n;
                let right = i * n + (j + 1) % n;
                let xp = x[p];
                out[p] = kx[p] * (xp - x[right])
                    + kx[left] * (xp - x[left])
                    + ky[p] * (xp - x[down * n + j])
                    + ky[up * n + j] * (xp - x[up * n + j]);
            }
        }
    }

    fn precondition(&mut self, r: &[f64], k_ref: f64, out: &mut [f64]) {
        for (w, &v) in self.work.iter_mut().zip(r) {
            *w = Complex64::new(v, 0.0);
        }
        self.fft.forward(&mut self.work);
        for (w, &s) in self.work.iter_mut().zip(&self.laplace_symbol) {
            *w = if s > 0.0 { *w / (k_ref * s) } else { Complex64::default() };
        }
        self.fft.inverse(&mut self.work);
        for (o, w) in out.iter_mut().zip(&self.work) {
            *o = w.re;
        }
    }

    fn pcg(&mut self, kx: &[f64], ky: &[f64], b: &[f64], k_ref: f64) -> Result<(Vec<f64>, usize, f64)> {
        let m = b.len();
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
        let b_norm = dot(b, b).sqrt();
        let mut x = vec![0.0; m];
        if b_norm == 0.0 {
            return Ok((x, 0, 0.0));
        }
        let mut r = b.to_vec();
        let mut z = vec![0.0; m];
        self.precondition(&r, k_ref, &mut z);
        let mut p = z.clone();
        let mut ap = vec![0.0; m];
        let mut rz = dot(&r, &z);
        let mut history = Vec::new();
        for it in 1..=self.config.max_iter {
            self.apply(kx, ky, &p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for k in 0..m {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            let rel = dot(&r, &r).sqrt() / b_norm;
            history.push(rel);
            if !rel.is_finite() {
                return Err(CoreError::NonConvergence {
                    iterations: it,
                    last: rel,
                    history,
                });
            }
            if rel < self.config.tol {
                return Ok((x, it, rel));
            }
            self.precondition(&r, k_ref, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..m {
                p[k] = z[k] + beta * p[k];
            }
        }
        Err(CoreError::NonConvergence {
            iterations: self.config.max_iter,
            last: *history.last().unwrap_or(&f64::NAN),
            history,
        })
    }
}

/// One-off solve at the given tolerance.
pub fn solve_effective_conductivity(rve: &RveImage, r: f64, tol: f64) -> Result<ConductivityTensor> {
    let cfg = SolverConfig {
        tol,
        ..Default::default()
    };
    Ok(Homogenizer::new(rve.n(), cfg).solve(rve, r)?.tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate_rve, rotate90, translate_periodic, volume_fraction, InclusionSpec};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solve(rve: &RveImage, r: f64) -> ConductivityTensor {
        solve_effective_conductivity(rve, r, 1e-10).unwrap()
    }

    #[test]
    fn homogeneous_media() {
        for r in [1.0, 5.0, 100.0] {
            let t = solve(&RveImage::zeros(16), r);
            assert_eq!(t.kappa, [1.0, 1.0, 0.0]);
        }
        let t = solve(&RveImage::ones(16), 5.0);
        for (a, b) in t.kappa.iter().zip([0.2, 0.2, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn laminates_are_exact() {
        // Layers normal to x: phase varies along columns.
        let lam = RveImage::from_fn(32, |_, j| j < 16);
        let t = solve(&lam, 5.0);
        assert!((t.k11() - 1.0 / 3.0).abs() < 1e-9, "{t:?}");
        assert!((t.k22() - 0.6).abs() < 1e-9);
        assert!(t.k12().abs() < 1e-9);
        let t = solve(&rotate90(&lam), 5.0);
        assert!((t.k22() - 1.0 / 3.0).abs() < 1e-9);
        assert!((t.k11() - 0.6).abs() < 1e-9);
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(voigt_reuss_bounds(0.0, 7.0), (1.0, 1.0));
        let (l, u) = voigt_reuss_bounds(1.0, 5.0);
        assert!((l - 0.2).abs() < 1e-15 && (u - 0.2).abs() < 1e-15);
        let (l, u) = voigt_reuss_bounds(0.5, 5.0);
        assert!((l - 1.0 / 3.0).abs() < 1e-15 && (u - 0.6).abs() < 1e-15);
    }

    #[test]
    fn invalid_contrast_is_rejected() {
        assert!(matches!(
            solve_effective_conductivity(&RveImage::zeros(4), 0.5, 1e-8),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn iteration_cap_reports_residual_history() {
        let rve = generate_rve(&InclusionSpec::training(32), 4).unwrap();
        let mut h = Homogenizer::new(32, SolverConfig { tol: 1e-12, max_iter: 2 });
        match h.solve(&rve, 50.0) {
            Err(CoreError::NonConvergence { history, iterations, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(history.len(), 2);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    /// Dense reference: the same finite-volume system solved directly, with the
    /// fluctuation pinned to zero mean by an extra Lagrange row.
    fn dense_reference(rve: &RveImage, r: f64) -> [[f64; 2]; 2] {
        let n = rve.n();
        let m = n * n;
        let kap = |p: usize| if rve.pixels()[p] == 1 { 1.0 / r } else { 1.0 };
        let h = |a: f64, b: f64| 2.0 * a * b / (a + b);
        let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut faces = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                let e = i * n + (j + 1) % n;
                let s = ((i + 1) % n) * n + j;
                faces.push((p, e, h(kap(p), kap(e)), 0));
                faces.push((p, s, h(kap(p), kap(s)), 1));
            }
        }
        for &(p, q, k, _) in &faces {
            a[(p, p)] += k;
            a[(q, q)] += k;
            a[(p, q)] -= k;
            a[(q, p)] -= k;
        }
        for p in 0..m {
            a[(m, p)] = 1.0;
            a[(p, m)] = 1.0;
        }
        let lu = a.lu();
        let mut out = [[0.0; 2]; 2];
        for load in 0..2 {
            let mut b = DVector::<f64>::zeros(m + 1);
            for &(p, q, k, dir) in &faces {
                if dir == load {
                    // Flux k*(E + phi_q - phi_p) leaves p and enters q.
                    b[p] += k;
                    b[q] -= k;
                }
            }
            let phi = lu.solve(&b).unwrap();
            for &(p, q, k, dir) in &faces {
                let e = if dir == load { 1.0 } else { 0.0 };
                out[dir][load] += k * (e + phi[q] - phi[p]) / m as f64;
            }
        }
        out
    }

    #[test]
    fn matches_dense_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let img = RveImage::from_fn(8, |_, _| rng.gen_bool(0.45));
            let r = rng.gen_range(1.5..60.0);
            let rep = Homogenizer::new(8, SolverConfig { tol: 1e-12, max_iter: 1000 })
                .solve(&img, r)
                .unwrap();
            let want = dense_reference(&img, r);
            for a in 0..2 {
                for b in 0..2 {
                    assert!((rep.raw[a][b] - want[a][b]).abs() < 1e-10, "{a}{b}: {:?} vs {want:?}", rep.raw);
                }
            }
            // The discrete response is symmetric once converged.
            assert!((rep.raw[0][1] - rep.raw[1][0]).abs() < 1e-10);
        }
    }

    #[test]
    fn physics_on_random_images() {
        let spec = InclusionSpec::training(32);
        let tol = 1e-8;
        let mut h = Homogenizer::new(32, SolverConfig { tol, max_iter: 5000 });
        for seed in 0..6 {
            let rve = generate_rve(&spec, seed).unwrap();
            let t = h.solve(&rve, 5.0).unwrap().tensor;
            assert!(t.is_spd());
            let (lo, hi) = voigt_reuss_bounds(volume_fraction(&rve), 5.0);
            let (e0, e1) = t.eigenvalues();
            assert!(e0 >= lo - tol && e1 <= hi + tol, "{e0} {e1} not in [{lo}, {hi}]");
            let tr = h.solve(&translate_periodic(&rve, 7, -3), 5.0).unwrap().tensor;
            let rot = h.solve(&rotate90(&rve), 5.0).unwrap().tensor;
            let want = t.rotated90();
            for c in 0..3 {
                assert!((tr.kappa[c] - t.kappa[c]).abs() < 10.0 * tol);
                assert!((rot.kappa[c] - want.kappa[c]).abs() < 10.0 * tol);
            }
        }
    }

    #[test]
    fn diagonal_decreases_with_contrast() {
        let rve = generate_rve(&InclusionSpec::training(32), 8).unwrap();
        let mut h = Homogenizer::new(32, SolverConfig::default());
        let mut prev = [f64::INFINITY; 2];
        for r in [2.0, 5.0, 10.0, 20.0, 50.0, 100.0] {
            let t = h.solve(&rve, r).unwrap().tensor;
            assert!(t.k11() <= prev[0] && t.k22() <= prev[1]);
            prev = [t.k11(), t.k22()];
        }
    }
}
