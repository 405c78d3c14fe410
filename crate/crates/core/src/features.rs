//! Handcrafted image descriptors.
//!
//! The full vector has 51 entries in this order:
//!
//! | range | content |
//! |-------|---------|
//! | 0 | volume fraction |
//! | 1..14 | principal scores of the two-point correlation map |
//! | 14..22 | band maxima over the inclusion phase, angles `k*pi/8` |
//! | 22..30 | band maxima over the matrix phase |
//! | 30..32 | directional hit fractions (collapsing rows, then columns) |
//! | 32..39 | local volume fraction: std, skew, five bin fractions |
//! | 39..51 | edge maps of four kernels: mean, std, skew each |
//!
//! Convolutions are circular and evaluated with FFTs.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config, data, Result};
use crate::fft::Fft2;
use crate::grid::{volume_fraction, RveImage};

pub const N_FEATURES: usize = 51;
pub const PCA_COMPONENTS: usize = 13;
pub const BAND_WIDTH: f64 = 4.0;
pub const N_ANGLES: usize = 8;
const SUPERSAMPLE: usize = 8;
/// Below this standard deviation a distribution counts as degenerate and its skewness is 0.
const DEGENERATE_STD: f64 = 1e-9;

/// The four edge kernels: horizontal difference, two diagonals, vertical difference.
pub fn edge_kernels() -> [Array2<f64>; 4] {
    [
        Array2::from_shape_vec((1, 3), vec![-1.0, 0.0, 1.0]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![0.0, -0.5, -1.0, 0.5, 0.0, -0.5, 1.0, 0.5, 0.0]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![-1.0, -0.5, 0.0, -0.5, 0.0, 0.5, 0.0, 0.5, 1.0]).unwrap(),
        Array2::from_shape_vec((3, 1), vec![-1.0, 0.0, 1.0]).unwrap(),
    ]
}

fn image_array(rve: &RveImage) -> Array2<f64> {
    Array2::from_shape_vec((rve.n(), rve.n()), rve.to_f64()).unwrap()
}

/// Zero-padded kernel of an `rows x cols` grid, with entry `(cu, cv) = (kh/2, kw/2)`
/// moved to the origin.
fn embed_kernel(kernel: &Array2<f64>, rows: usize, cols: usize) -> Result<Vec<Complex64>> {
    let (kh, kw) = kernel.dim();
    if kh > rows || kw > cols {
        return Err(config(format!(
            "kernel {kh}x{kw} is larger than the {rows}x{cols} image"
        )));
    }
    let (cu, cv) = (kh / 2, kw / 2);
    let mut buf = vec![Complex64::default(); rows * cols];
    for ((u, v), &k) in kernel.indexed_iter() {
        let i = (u + rows - cu) % rows;
        let j = (v + cols - cv) % cols;
        buf[i * cols + j].re += k;
    }
    Ok(buf)
}

/// Circular convolution `out(i, j) = sum k(u, v) * img(i - u + cu, j - v + cv)`.
pub fn conv_periodic(image: &Array2<f64>, kernel: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = image.dim();
    let mut fft = Fft2::new(rows, cols);
    let mut ks = embed_kernel(kernel, rows, cols)?;
    fft.forward(&mut ks);
    let img: Vec<f64> = image.iter().copied().collect();
    let mut spec = fft.forward_real(&img);
    spec.iter_mut().zip(&ks).for_each(|(a, b)| *a *= b);
    Ok(Array2::from_shape_vec((rows, cols), fft.inverse_real(spec)).unwrap())
}

/// Normalised band detector of width `width` along angle `theta` (0 is along x,
/// pi/2 along y), as an `n x n` kernel whose geometric centre is the corner
/// `(n/2, n/2)`. Pixel weights are the supersampled band coverage. Without a
/// `length` the band spans the whole kernel.
pub fn band_kernel(n: usize, theta: f64, width: f64, length: Option<f64>) -> Result<Array2<f64>> {
    if !(width > 0.0) {
        return Err(config("band width must be positive"));
    }
    if let Some(l) = length {
        if !(l > 0.0) || l > n as f64 * std::f64::consts::SQRT_2 {
            return Err(config(format!("band length {l} exceeds the image diagonal")));
        }
    }
    let (s, c) = theta.sin_cos();
    let half_w = 0.5 * width;
    let half_l = length.map(|l| 0.5 * l);
    let centre = n as f64 / 2.0;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut k = Array2::zeros((n, n));
    for ((u, v), w) in k.indexed_iter_mut() {
        let mut hits = 0usize;
        for a in 0..SUPERSAMPLE {
            let y = u as f64 + (a as f64 + 0.5) * step - centre;
            for b in 0..SUPERSAMPLE {
                let x = v as f64 + (b as f64 + 0.5) * step - centre;
                let across = -x * s + y * c;
                let along = x * c + y * s;
                if across.abs() <= half_w && half_l.map_or(true, |h| along.abs() <= h) {
                    hits += 1;
                }
            }
        }
        *w = hits as f64;
    }
    let total = k.sum();
    if total == 0.0 {
        return Err(config("band detector is empty"));
    }
    Ok(k / total)
}

pub fn band_angles(n_angles: usize) -> Vec<f64> {
    (0..n_angles)
        .map(|k| k as f64 * std::f64::consts::PI / n_angles as f64)
        .collect()
}

/// Population mean, standard deviation and skewness. The skewness of a
/// (numerically) constant sample is 0.
pub fn moments(values: &[f64]) -> (f64, f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / m;
    let std = m2.sqrt();
    let skew = if std <= DEGENERATE_STD { 0.0 } else { m3 / m2.powf(1.5) };
    (mean, std, skew)
}

/// Non-overlapping block means.
pub fn average_pool(map: &Array2<f64>, window: usize) -> Result<Array2<f64>> {
    let (rows, cols) = map.dim();
    if window == 0 || rows % window != 0 || cols % window != 0 {
        return Err(config(format!("pooling window {window} does not divide {rows}x{cols}")));
    }
    let (r, c) = (rows / window, cols / window);
    let mut out = Array2::zeros((r, c));
    for ((i, j), &v) in map.indexed_iter() {
        out[[i / window, j / window]] += v;
    }
    let area = (window * window) as f64;
    out.mapv_inplace(|v| v / area);
    Ok(out)
}

/// Fraction of columns (axis 0) and of rows (axis 1) holding at least one inclusion pixel.
pub fn global_directional_mean(rve: &RveImage) -> [f64; 2] {
    let n = rve.n();
    let mut cols = vec![false; n];
    let mut rows = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if rve.get(i, j) == 1 {
                cols[j] = true;
                rows[i] = true;
            }
        }
    }
    let frac = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / n as f64;
    [frac(&cols), frac(&rows)]
}

/// Bin fractions of cell volume fractions, split at `eps`, `1/3 - eps`, `2/3 - eps`, `1 - eps`.
pub fn count_bins(cells: &[f64], eps: f64) -> [f64; 5] {
    let mut counts = [0usize; 5];
    for &f in cells {
        let b = if f < eps {
            0
        } else if f < 1.0 / 3.0 - eps {
            1
        } else if f < 2.0 / 3.0 - eps {
            2
        } else if f < 1.0 - eps {
            3
        } else {
            4
        };
        counts[b] += 1;
    }
    let m = cells.len() as f64;
    counts.map(|c| c as f64 / m)
}

pub fn default_window(n: usize) -> usize {
    (n / 8).max(1)
}

/// `[std, skew, five bin fractions]` of the block-mean volume fraction.
pub fn local_volume_distribution(rve: &RveImage, window: usize) -> Result<[f64; 7]> {
    let n = rve.n();
    let cells = average_pool(&image_array(rve), window)?;
    let flat: Vec<f64> = cells.iter().copied().collect();
    let (_, std, skew) = moments(&flat);
    let eps = 1.0 / (2.0 * (n * n) as f64);
    let bins = count_bins(&flat, eps);
    Ok([std, skew, bins[0], bins[1], bins[2], bins[3], bins[4]])
}

fn edge_stats(edge: &Array2<f64>, window: usize) -> Result<[f64; 3]> {
    let pooled = average_pool(&edge.mapv(f64::abs), window)?;
    let flat: Vec<f64> = pooled.iter().copied().collect();
    let (m, s, k) = moments(&flat);
    Ok([m, s, k])
}

/// Mean, std and skewness of the pooled absolute response of each edge kernel.
pub fn edge_distributions(rve: &RveImage, window: usize) -> Result<[f64; 12]> {
    let img = image_array(rve);
    let mut out = [0.0; 12];
    for (e, k) in edge_kernels().iter().enumerate() {
        let st = edge_stats(&conv_periodic(&img, k)?, window)?;
        out[3 * e..3 * e + 3].copy_from_slice(&st);
    }
    Ok(out)
}

/// Inclusion-phase maxima for each angle followed by matrix-phase maxima.
pub fn band_features(rve: &RveImage, width_px: f64, n_angles: usize) -> Result<Vec<f64>> {
    if n_angles == 0 {
        return Err(config("at least one band direction is required"));
    }
    let mut ex = FeatureExtractor::new(
        rve.n(),
        FeatureConfig {
            band_width: width_px,
            n_angles,
            ..FeatureConfig::default()
        },
    )?;
    Ok(ex.bands(rve))
}

/// Periodic autocorrelation of the indicator divided by the pixel count.
pub fn two_pcf(rve: &RveImage) -> Array2<f64> {
    let n = rve.n();
    two_pcf_with(&mut Fft2::new(n, n), rve)
}

fn two_pcf_with(fft: &mut Fft2, rve: &RveImage) -> Array2<f64> {
    let n = rve.n();
    let mut spec = fft.forward_real(&rve.to_f64());
    spec.iter_mut().for_each(|z| *z = Complex64::new(z.norm_sqr(), 0.0));
    let scale = 1.0 / (n * n) as f64;
    let map: Vec<f64> = fft.inverse_real(spec).into_iter().map(|v| v * scale).collect();
    Array2::from_shape_vec((n, n), map).unwrap()
}

/// Principal basis of flattened correlation maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub resolution: usize,
    pub mean: Vec<f64>,
    /// `k` orthonormal component maps, each flattened row-major.
    pub components: Vec<Vec<f64>>,
    /// Squared singular values of the centred snapshot matrix, descending.
    pub singular_values_sq: Vec<f64>,
    pub fitted_on: usize,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, map: &[f64]) -> Result<Vec<f64>> {
        if map.len() != self.mean.len() {
            return Err(data(format!(
                "map of {} values does not match a basis fitted on {} values",
                map.len(),
                self.mean.len()
            )));
        }
        let centred: Vec<f64> = map.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(&centred).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &s) in self.components.iter().zip(scores) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += s * v);
        }
        out
    }
}

/// Snapshot PCA: eigen-decomposition of the centred Gram matrix.
pub fn fit_pca(maps: &[Vec<f64>], k: usize, resolution: usize) -> Result<PcaBasis> {
    let m = maps.len();
    if m == 0 || k > m {
        return Err(config(format!("cannot fit {k} components on {m} maps")));
    }
    let d = maps[0].len();
    if maps.iter().any(|x| x.len() != d) {
        return Err(data("correlation maps differ in size"));
    }
    let mut mean = vec![0.0; d];
    for x in maps {
        mean.iter_mut().zip(x).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut xc = Array2::<f64>::zeros((m, d));
    for (i, x) in maps.iter().enumerate() {
        for (j, v) in x.iter().enumerate() {
            xc[[i, j]] = v - mean[j];
        }
    }
    let gram = xc.dot(&xc.t());
    let g = nalgebra::DMatrix::from_fn(m, m, |i, j| gram[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = 1e-12 * top.max(1e-300);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut svals = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let lam = eig.eigenvalues[idx];
        if lam <= floor {
            break;
        }
        let v = eig.eigenvectors.column(idx);
        let mut u = vec![0.0; d];
        for i in 0..m {
            let w = v[i];
            u.iter_mut().zip(xc.row(i)).for_each(|(a, b)| *a += w * b);
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        u.iter_mut().for_each(|a| *a /= norm);
        components.push(u);
        svals.push(lam);
    }
    // Rank-deficient data: complete with unit vectors orthogonal to the rest.
    let mut e = 0;
    while components.len() < k && e < d {
        let mut u = vec![0.0; d];
        u[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for c in &components {
                let p: f64 = c.iter().zip(&u).map(|(a, b)| a * b).sum();
                u.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            u.iter_mut().for_each(|a| *a /= norm);
            components.push(u);
            svals.push(0.0);
        }
    }
    if components.len() < k {
        return Err(config(format!("{k} components exceed the map dimension {d}")));
    }
    Ok(PcaBasis {
        resolution,
        mean,
        components,
        singular_values_sq: svals,
        fitted_on: m,
    })
}

/// Per-feature mean and sample standard deviation (`n - 1` normalisation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StandardizationStats {
    pub fn fit(rows: &Array2<f64>) -> Result<Self> {
        let (m, d) = rows.dim();
        if m < 2 {
            return Err(data("standardisation needs at least two samples"));
        }
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for j in 0..d {
            let col = rows.column(j);
            let mu = col.sum() / m as f64;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1) as f64;
            let sd = var.sqrt();
            mean[j] = mu;
            scale[j] = if sd > 1e-12 {
                sd
            } else {
                log::warn!("feature {j} has zero variance; scale clamped to 1");
                1.0
            };
        }
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn apply_rows(&self, rows: &Array2<f64>) -> Array2<f64> {
        let mut out = rows.clone();
        for mut r in out.rows_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub band_width: f64,
    pub n_angles: usize,
    pub band_length: Option<f64>,
    /// Pooling window; `None` uses `n / 8`.
    pub window: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            band_width: BAND_WIDTH,
            n_angles: N_ANGLES,
            band_length: None,
            window: None,
        }
    }
}

/// Feature names in vector order, for `k` principal scores and `n_angles` band directions.
pub fn feature_names(k: usize, n_angles: usize) -> Vec<String> {
    let mut names = vec!["volume_fraction".to_string()];
    names.extend((0..k).map(|i| format!("pcf_score_{i}")));
    names.extend((0..n_angles).map(|i| format!("band_inclusion_{i}")));
    names.extend((0..n_angles).map(|i| format!("band_matrix_{i}")));
    names.push("hit_fraction_axis0".into());
    names.push("hit_fraction_axis1".into());
    names.push("local_vf_std".into());
    names.push("local_vf_skew".into());
    names.extend((0..5).map(|i| format!("local_vf_bin_{i}")));
    for e in 1..=4 {
        for s in ["mean", "std", "skew"] {
            names.push(format!("edge{e}_{s}"));
        }
    }
    names
}

/// Precomputed kernel spectra for one resolution.
#[derive(Clone)]
pub struct FeatureExtractor {
    n: usize,
    window: usize,
    config: FeatureConfig,
    fft: Fft2,
    band_spectra: Vec<Vec<Complex64>>,
    edge_spectra: Vec<Vec<Complex64>>,
}

impl FeatureExtractor {
    pub fn new(n: usize, config: FeatureConfig) -> Result<Self> {
        let window = config.window.unwrap_or_else(|| default_window(n));
        if window == 0 || n % window != 0 {
            return Err(config_err_window(window, n));
        }
        let mut fft = Fft2::new(n, n);
        let mut band_spectra = Vec::new();
        for theta in band_angles(config.n_angles) {
            let k = band_kernel(n, theta, config.band_width, config.band_length)?;
            let mut s = embed_kernel(&k, n, n)?;
            fft.forward(&mut s);
            band_spectra.push(s);
        }
        let mut edge_spectra = Vec::new();
        for k in edge_kernels() {
            let mut s = embed_kernel(&k, n, n)?;
            fft.forward(&mut s);
            edge_spectra.push(s);
        }
        Ok(Self {
            n,
            window,
            config,
            fft,
            band_spectra,
            edge_spectra,
        })
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn len(&self, k: usize) -> usize {
        1 + k + 2 * self.config.n_angles + 2 + 7 + 12
    }

    fn filtered(&mut self, spec: &[Complex64], kernel: usize, edge: bool) -> Vec<f64> {
        let ks = if edge {
            &self.edge_spectra[kernel]
        } else {
            &self.band_spectra[kernel]
        };
        let prod: Vec<Complex64> = spec.iter().zip(ks).map(|(a, b)| a * b).collect();
        self.fft.inverse_real(prod)
    }

    fn bands(&mut self, rve: &RveImage) -> Vec<f64> {
        let na = self.config.n_angles;
        let inc = self.fft.forward_real(&rve.to_f64());
        let inverted: Vec<f64> = rve.pixels().iter().map(|&p| 1.0 - p as f64).collect();
        let mat = self.fft.forward_real(&inverted);
        let mut out = vec![0.0; 2 * na];
        for d in 0..na {
            let mx = |v: Vec<f64>| v.into_iter().fold(f64::NEG_INFINITY, f64::max).clamp(0.0, 1.0);
            out[d] = mx(self.filtered(&inc, d, false));
            out[na + d] = mx(self.filtered(&mat, d, false));
        }
        out
    }

    fn edges(&mut self, rve: &RveImage) -> Result<Vec<f64>> {
        let spec = self.fft.forward_real(&rve.to_f64());
        let mut out = Vec::with_capacity(12);
        for e in 0..4 {
            let map = Array2::from_shape_vec((self.n, self.n), self.filtered(&spec, e, true)).unwrap();
            out.extend_from_slice(&edge_stats(&map, self.window)?);
        }
        Ok(out)
    }

    pub fn pcf(&mut self, rve: &RveImage) -> Result<Vec<f64>> {
        self.check(rve)?;
        Ok(two_pcf_with(&mut self.fft, rve).into_raw_vec())
    }

    fn check(&self, rve: &RveImage) -> Result<()> {
        if rve.n() != self.n {
            return Err(data(format!(
                "extractor built for {0}x{0} images, got {1}x{1}",
                self.n,
                rve.n()
            )));
        }
        Ok(())
    }

    /// Every descriptor except the principal scores, in vector order (volume
    /// fraction first).
    pub fn descriptors(&mut self, rve: &RveImage) -> Result<Vec<f64>> {
        self.check(rve)?;
        let mut v = vec![volume_fraction(rve)];
        v.extend(self.bands(rve));
        v.extend_from_slice(&global_directional_mean(rve));
        v.extend_from_slice(&local_volume_distribution(rve, self.window)?);
        v.extend(self.edges(rve)?);
        Ok(v)
    }

    /// Full feature vector using a fitted correlation basis.
    pub fn assemble(&mut self, rve: &RveImage, basis: &PcaBasis) -> Result<Vec<f64>> {
        if basis.resolution != self.n {
            return Err(data(format!(
                "correlation basis fitted at {} px, image is {} px",
                basis.resolution, self.n
            )));
        }
        let scores = basis.project(&self.pcf(rve)?)?;
        Ok(splice_scores(&self.descriptors(rve)?, &scores))
    }
}

/// Inserts principal scores after the leading volume fraction.
pub fn splice_scores(descriptors: &[f64], scores: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(descriptors.len() + scores.len());
    v.push(descriptors[0]);
    v.extend_from_slice(scores);
    v.extend_from_slice(&descriptors[1..]);
    v
}

fn config_err_window(window: usize, n: usize) -> crate::error::CoreError {
    config(format!("pooling window {window} does not divide resolution {n}"))
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Direct spatial evaluations used as references.
    use super::*;

    pub fn conv_direct(image: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
        let (rows, cols) = image.dim();
        let (kh, kw) = kernel.dim();
        let (cu, cv) = ((kh / 2) as i64, (kw / 2) as i64);
        let mut out = Array2::zeros((rows, cols));
        for i in 0..rows as i64 {
            for j in 0..cols as i64 {
                let mut acc = 0.0;
                for u in 0..kh as i64 {
                    for v in 0..kw as i64 {
                        let a = (i - u + cu).rem_euclid(rows as i64) as usize;
                        let b = (j - v + cv).rem_euclid(cols as i64) as usize;
                        acc += kernel[[u as usize, v as usize]] * image[[a, b]];
                    }
                }
                out[[i as usize, j as usize]] = acc;
            }
        }
        out
    }

    pub fn two_pcf_direct(rve: &RveImage) -> Array2<f64> {
        let n = rve.n() as i64;
        let mut out = Array2::zeros((n as usize, n as usize));
        for r in 0..n {
            for s in 0..n {
                let mut acc = 0usize;
                for i in 0..n {
                    for j in 0..n {
                        acc += (rve.at(i, j) & rve.at(i + r, j + s)) as usize;
                    }
                }
                out[[r as usize, s as usize]] = acc as f64 / (n * n) as f64;
            }
        }
        out
    }

    /// Maximum overlap of the band mask with the phase `phase` over all placements.
    pub fn band_max_direct(rve: &RveImage, theta: f64, phase: u8) -> f64 {
        let n = rve.n();
        let k = band_kernel(n, theta, BAND_WIDTH, None).unwrap();
        let img = Array2::from_shape_fn((n, n), |(i, j)| (rve.get(i, j) == phase) as u8 as f64);
        conv_direct(&img, &k).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn local_volume_direct(rve: &RveImage, window: usize) -> [f64; 7] {
        let n = rve.n();
        let nb = n / window;
        let mut cells = Vec::new();
        for bi in 0..nb {
            for bj in 0..nb {
                let mut c = 0usize;
                for i in 0..window {
                    for j in 0..window {
                        c += rve.get(bi * window + i, bj * window + j) as usize;
                    }
                }
                cells.push(c as f64 / (window * window) as f64);
            }
        }
        let (_, s, k) = moments(&cells);
        let eps = 1.0 / (2.0 * (n * n) as f64);
        let mut bins = [0.0; 5];
        for &f in &cells {
            let idx = if f < eps {
                0
            } else if f < 1.0 / 3.0 - eps {
                1
            } else if f < 2.0 / 3.0 - eps {
                2
            } else if f < 1.0 - eps {
                3
            } else {
                4
            };
            bins[idx] += 1.0 / cells.len() as f64;
        }
        [s, k, bins[0], bins[1], bins[2], bins[3], bins[4]]
    }

    pub fn edges_direct(rve: &RveImage, window: usize) -> [f64; 12] {
        let n = rve.n();
        let img = Array2::from_shape_fn((n, n), |(i, j)| rve.get(i, j) as f64);
        let mut out = [0.0; 12];
        for (e, k) in edge_kernels().iter().enumerate() {
            let map = conv_direct(&img, k).mapv(f64::abs);
            let nb = n / window;
            let mut cells = Vec::new();
            for bi in 0..nb {
                for bj in 0..nb {
                    let mut acc = 0.0;
                    for i in 0..window {
                        for j in 0..window {
                            acc += map[[bi * window + i, bj * window + j]];
                        }
                    }
                    cells.push(acc / (window * window) as f64);
                }
            }
            let (m, s, sk) = moments(&cells);
            out[3 * e..3 * e + 3].copy_from_slice(&[m, s, sk]);
        }
        out
    }
}
