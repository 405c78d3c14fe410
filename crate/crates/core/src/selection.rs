//! Feature ranking and the subset-size sweep.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{data, CoreError, Result};

pub const ANOVA_BINS: usize = 8;
pub const REPEATS: usize = 5;

pub fn default_sizes(n_features: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (6..n_features).step_by(3).collect();
    if v.last() != Some(&n_features) {
        v.push(n_features);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub method: String,
    /// Feature indices, best first.
    pub order: Vec<usize>,
    /// Score per feature index (not per rank).
    pub scores: Vec<f64>,
}

impl RankingResult {
    fn from_scores(method: &str, scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self {
            method: method.to_string(),
            order,
            scores,
        }
    }

    pub fn top(&self, k: usize) -> Vec<usize> {
        self.order.iter().take(k).copied().collect()
    }
}

fn abs_corr(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 1e-24 * n || sbb <= 1e-24 * n {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).abs().min(1.0))
}

fn check_rows(features: &Array2<f64>, targets: &Array2<f64>, min: usize) -> Result<()> {
    if features.nrows() != targets.nrows() {
        return Err(data(format!(
            "{} feature rows but {} target rows",
            features.nrows(),
            targets.nrows()
        )));
    }
    if features.nrows() < min {
        return Err(data(format!("need at least {min} samples, got {}", features.nrows())));
    }
    Ok(())
}

/// Absolute Pearson correlations among the feature and target columns. Columns
/// without variance correlate 0 with everything else.
pub fn pearson_matrix(features: &Array2<f64>, targets: &Array2<f64>) -> Result<Array2<f64>> {
    check_rows(features, targets, 3)?;
    let joined = ndarray::concatenate(Axis(1), &[features.view(), targets.view()]).expect("row counts checked");
    let p = joined.ncols();
    let mut out = Array2::eye(p);
    for a in 0..p {
        for b in a + 1..p {
            let r = abs_corr(joined.column(a), joined.column(b)).unwrap_or(0.0);
            out[[a, b]] = r;
            out[[b, a]] = r;
        }
    }
    for c in 0..p {
        if abs_corr(joined.column(c), joined.column(c)).is_none() {
            log::warn!("column {c} is constant; its correlations are set to 0");
        }
    }
    Ok(out)
}

/// Ranking by mean absolute correlation with the target components.
pub fn pearson_rank(features: &Array2<f64>, targets: &Array2<f64>) -> Result<RankingResult> {
    let m = pearson_matrix(features, targets)?;
    let p = features.ncols();
    let t = targets.ncols();
    let scores = (0..p)
        .map(|j| (p..p + t).map(|c| m[[j, c]]).sum::<f64>() / t as f64)
        .collect();
    Ok(RankingResult::from_scores("pearson", scores))
}

/// Group label per sample: equal-count bins of the target's rank order.
pub fn rank_bins(target: ArrayView1<f64>, bins: usize) -> Vec<usize> {
    let n = target.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| target[a].total_cmp(&target[b]).then(a.cmp(&b)));
    let mut label = vec![0; n];
    for (rank, &i) in idx.iter().enumerate() {
        label[i] = rank * bins / n;
    }
    label
}

/// One-way F statistic of `x` across the groups in `label`.
pub fn f_statistic(x: ArrayView1<f64>, label: &[usize], groups: usize) -> f64 {
    let n = x.len();
    let mut sum = vec![0.0; groups];
    let mut cnt = vec![0usize; groups];
    for (v, &g) in x.iter().zip(label) {
        sum[g] += v;
        cnt[g] += 1;
    }
    let grand = x.sum() / n as f64;
    let mut ssb = 0.0;
    for g in 0..groups {
        if cnt[g] > 0 {
            let m = sum[g] / cnt[g] as f64;
            ssb += cnt[g] as f64 * (m - grand).powi(2);
        }
    }
    let ssw: f64 = x
        .iter()
        .zip(label)
        .map(|(v, &g)| (v - sum[g] / cnt[g] as f64).powi(2))
        .sum();
    let scale = x.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    if ssb <= 1e-24 * scale.max(1e-300) || scale == 0.0 {
        return 0.0;
    }
    let (dfb, dfw) = ((groups - 1) as f64, (n - groups) as f64);
    if ssw <= 1e-15 * scale {
        return f64::MAX.sqrt();
    }
    (ssb / dfb) / (ssw / dfw)
}

/// F score per feature, each target component binned into `bins` equal-count
/// groups, averaged over components.
pub fn anova_f(features: &Array2<f64>, targets: &Array2<f64>, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(CoreError::Config(format!("anova needs at least 2 bins, got {bins}")));
    }
    check_rows(features, targets, 2 * bins)?;
    let mut scores = vec![0.0; features.ncols()];
    for c in 0..targets.ncols() {
        let label = rank_bins(targets.column(c), bins);
        for (j, s) in scores.iter_mut().enumerate() {
            *s += f_statistic(features.column(j), &label, bins) / targets.ncols() as f64;
        }
    }
    Ok(scores)
}

pub fn anova_rank(features: &Array2<f64>, targets: &Array2<f64>) -> Result<RankingResult> {
    Ok(RankingResult::from_scores("anova", anova_f(features, targets, ANOVA_BINS)?))
}

fn standardize_columns(a: &Array2<f64>) -> DMatrix<f64> {
    let (n, p) = a.dim();
    DMatrix::from_fn(n, p, |i, j| {
        let col = a.column(j);
        let m = col.sum() / n as f64;
        let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        if s > 0.0 {
            (a[[i, j]] - m) / s
        } else {
            0.0
        }
    })
}

/// Multi-output ridge fit on the given columns. Returns coefficients (rows =
/// active features) and the ridge strength actually used.
fn ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, active: &[usize], lambda0: f64) -> (DMatrix<f64>, f64) {
    let xa = x.select_columns(active);
    let gram = xa.transpose() * &xa;
    let rhs = xa.transpose() * y;
    let scale = (gram.trace() / active.len() as f64).max(1e-12);
    let mut lambda = lambda0;
    loop {
        let mut g = gram.clone();
        for d in 0..active.len() {
            g[(d, d)] += lambda * scale;
        }
        if let Some(ch) = g.cholesky() {
            return (ch.solve(&rhs), lambda);
        }
        lambda = if lambda == 0.0 { 1e-12 } else { lambda * 10.0 };
    }
}

pub const RIDGE: f64 = 1e-6;

/// Recursive elimination with a linear ridge surrogate on standardised data:
/// drop the feature with the smallest summed absolute coefficient until none
/// remain. The last feature standing ranks first.
pub fn rfe_rank(features: &Array2<f64>, targets: &Array2<f64>) -> Result<RankingResult> {
    check_rows(features, targets, 3)?;
    let p = features.ncols();
    let x = standardize_columns(features);
    let y = standardize_columns(targets);
    let mut active: Vec<usize> = (0..p).collect();
    let mut eliminated = Vec::with_capacity(p);
    let mut scores = vec![0.0; p];
    let mut lambda = RIDGE;
    while !active.is_empty() {
        let (beta, used) = ridge(&x, &y, &active, lambda);
        if used > lambda {
            log::warn!("ridge strength raised to {used:e} during elimination");
            lambda = used;
        }
        let imp: Vec<f64> = (0..active.len()).map(|r| beta.row(r).iter().map(|v| v.abs()).sum()).collect();
        let worst = (0..active.len())
            .min_by(|&a, &b| imp[a].total_cmp(&imp[b]).then(active[a].cmp(&active[b])))
            .expect("non-empty");
        let f = active.remove(worst);
        scores[f] = eliminated.len() as f64;
        eliminated.push(f);
    }
    eliminated.reverse();
    Ok(RankingResult {
        method: "rfe".into(),
        order: eliminated,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: String,
    pub size: usize,
    pub losses: Vec<f64>,
    pub best: f64,
}

/// Validation loss of one training run on the given feature columns.
pub type TrainFn<'a> = dyn Fn(&[usize], u64) -> Result<f64> + Sync + 'a;

/// Trains `repeats` models on the top-`size` features of every ranking and keeps
/// the best validation loss per (method, size). Runs in parallel; the output
/// order follows the input order.
pub fn subset_sweep(
    rankings: &[RankingResult],
    sizes: &[usize],
    repeats: usize,
    seed: u64,
    train: &TrainFn<'_>,
) -> Result<Vec<SweepPoint>> {
    let jobs: Vec<(usize, usize, usize)> = (0..rankings.len())
        .flat_map(|m| sizes.iter().flat_map(move |&s| (0..repeats).map(move |r| (m, s, r))))
        .collect();
    let losses: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(m, s, r)| train(&rankings[m].top(s), seed.wrapping_add(r as u64)))
        .collect();
    let mut it = losses.into_iter();
    let mut out = Vec::new();
    for rk in rankings {
        for &s in sizes {
            let runs = (0..repeats).map(|_| it.next().expect("one result per job")).collect::<Result<Vec<f64>>>()?;
            let best = runs.iter().copied().fold(f64::INFINITY, f64::min);
            out.push(SweepPoint {
                method: rk.method.clone(),
                size: s,
                losses: runs,
                best,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal))
    }

    fn is_perm(v: &[usize], n: usize) -> bool {
        let mut s = v.to_vec();
        s.sort();
        s == (0..n).collect::<Vec<_>>()
    }

    #[test]
    fn default_sizes_cover_all() {
        let s = default_sizes(51);
        assert_eq!(s.first(), Some(&6));
        assert_eq!(s.last(), Some(&51));
        assert_eq!(s.len(), 16);
    }

    #[test]
    fn pearson_examples() {
        let mut f = noise(10_000, 3, 1);
        let x = f.column(0).to_owned();
        f.column_mut(1).assign(&x.mapv(|v| 2.0 * v + 1.0));
        let t = noise(10_000, 1, 2);
        let m = pearson_matrix(&f, &t).unwrap();
        assert!((m[[0, 1]] - 1.0).abs() < 1e-12);
        assert!(m[[0, 2]] < 0.05 && m[[2, 3]] < 0.05);
        for i in 0..4 {
            assert_eq!(m[[i, i]], 1.0);
            for j in 0..4 {
                assert_eq!(m[[i, j]], m[[j, i]]);
            }
        }
    }

    #[test]
    fn constant_column_correlates_zero() {
        let mut f = noise(50, 2, 3);
        f.column_mut(1).fill(4.0);
        let m = pearson_matrix(&f, &noise(50, 1, 4)).unwrap();
        assert_eq!(m[[1, 0]], 0.0);
        assert_eq!(m[[1, 1]], 1.0);
    }

    #[test]
    fn anova_examples() {
        let n = 200;
        let mut f = noise(n, 2, 5);
        f.column_mut(0).fill(1.0);
        let t = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        // Disjoint supports between the lower and upper half.
        for i in 0..n {
            f[[i, 1]] = if i < n / 2 { 0.1 * f[[i, 1]] } else { 10.0 + 0.1 * f[[i, 1]] };
        }
        let s = anova_f(&f, &t, 2).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(s[1] > 100.0);
        assert!(anova_f(&f.slice(ndarray::s![..10, ..]).to_owned(), &t.slice(ndarray::s![..10, ..]).to_owned(), 8).is_err());
    }

    #[test]
    fn anova_two_group_closed_form() {
        // Groups {0,1,2} and {3,4,5}: between = 13.5, within = 4, F = 13.5 / (4/4).
        let x = ndarray::arr1(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let f = f_statistic(x.view(), &[0, 0, 0, 1, 1, 1], 2);
        assert!((f - 13.5).abs() < 1e-12);
    }

    #[test]
    fn anova_permuted_labels_look_null() {
        // Under the null, F has mean dfw/(dfw-2) ~ 1; average over several features.
        let n = 400;
        let f = noise(n, 40, 6);
        let t = noise(n, 1, 7);
        let s = anova_f(&f, &t, 8).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!(mean > 0.6 && mean < 1.5, "mean F {mean}");
    }

    #[test]
    fn perfect_predictor_tops_pearson_and_rfe() {
        let n = 300;
        let mut f = noise(n, 12, 8);
        let t = noise(n, 3, 9);
        f.column_mut(7).assign(&t.column(1));
        let p = pearson_rank(&f, &t).unwrap();
        let r = rfe_rank(&f, &t).unwrap();
        assert_eq!(p.order[0], 7);
        assert_eq!(r.order[0], 7);
        assert!(is_perm(&r.order, 12) && is_perm(&p.order, 12));
    }

    #[test]
    fn rfe_keeps_signal_and_survives_collinearity() {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut f = noise(n, 51, 11);
        // Duplicate columns force a singular Gram matrix.
        let c0 = f.column(0).to_owned();
        f.column_mut(50).assign(&c0);
        let t = Array2::from_shape_fn((n, 3), |(i, c)| {
            (0..6).map(|j| (j + c + 1) as f64 * f[[i, j]]).sum::<f64>() + 0.01 * rng.sample::<f64, _>(StandardNormal)
        });
        let r = rfe_rank(&f, &t).unwrap();
        assert!(is_perm(&r.order, 51));
        let pos = |k: usize| r.order.iter().position(|&v| v == k).unwrap();
        for j in 1..6 {
            assert!(pos(j) < 6, "informative feature {j} at rank {}", pos(j));
        }
    }

    #[test]
    fn rfe_eliminates_planted_noise_in_first_half() {
        let n = 400;
        let f = noise(n, 51, 12);
        let t = Array2::from_shape_fn((n, 3), |(i, c)| {
            (0..51)
                .filter(|&j| j != 20)
                .map(|j| (1.0 + 0.05 * ((j + c) % 17) as f64) * f[[i, j]])
                .sum::<f64>()
        });
        let r = rfe_rank(&f, &t).unwrap();
        let pos = r.order.iter().position(|&v| v == 20).unwrap();
        assert!(pos >= 25, "noise feature ranked {pos}");
    }

    #[test]
    fn sweep_is_best_of_repeats_and_ordered() {
        let r = RankingResult::from_scores("x", (0..12).map(|v| v as f64).collect());
        let train = |cols: &[usize], seed: u64| -> Result<f64> { Ok(1.0 / cols.len() as f64 + seed as f64 * 0.01) };
        let out = subset_sweep(&[r.clone(), r], &[6, 9, 12], 5, 0, &train).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out[2].size, 12);
        for p in &out {
            assert!(p.losses.iter().all(|&l| p.best <= l));
            assert!((p.best - 1.0 / p.size as f64).abs() < 1e-12);
        }
    }
}
