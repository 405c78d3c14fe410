//! Error measures and physical-consistency reports.
//!
//! Targets and predictions are Mandel triples `[k11, k22, sqrt(2)*k12]`. The
//! relative root-mean-square error always includes both diagonal entries and
//! includes the off-diagonal entry only where its target magnitude exceeds
//! [`THRESHOLD`]; small off-diagonal targets are reported as absolute errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{data, Result};
use crate::grid::{rotate90, translate_periodic, RveImage};
use crate::homogenize::ConductivityTensor;

pub const THRESHOLD: f64 = 0.2;

pub type Triple = [f64; 3];

fn check(targets: &[Triple], preds: &[Triple]) -> Result<()> {
    if targets.len() != preds.len() {
        return Err(data(format!(
            "{} targets but {} predictions",
            targets.len(),
            preds.len()
        )));
    }
    if targets.is_empty() {
        return Err(data("no samples to evaluate"));
    }
    Ok(())
}

/// Relative root-mean-square error in percent.
pub fn rel_rmse(targets: &[Triple], preds: &[Triple]) -> Result<f64> {
    check(targets, preds)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for (y, p) in targets.iter().zip(preds) {
        for c in 0..3 {
            if c == 2 && y[c].abs() <= THRESHOLD {
                continue;
            }
            if y[c] == 0.0 {
                return Err(data(format!("zero target in component {c}")));
            }
            acc += ((y[c] - p[c]) / y[c]).powi(2);
            count += 1;
        }
    }
    Ok(100.0 * (acc / count as f64).sqrt())
}

/// Single-component variant, used for hand-checked examples.
pub fn rel_rmse_scalar(targets: &[f64], preds: &[f64]) -> Result<f64> {
    if targets.len() != preds.len() || targets.is_empty() {
        return Err(data("mismatched or empty inputs"));
    }
    let mut acc = 0.0;
    for (y, p) in targets.iter().zip(preds) {
        if *y == 0.0 {
            return Err(data("zero target"));
        }
        acc += ((y - p) / y).powi(2);
    }
    Ok(100.0 * (acc / targets.len() as f64).sqrt())
}

pub fn mse(targets: &[Triple], preds: &[Triple]) -> Result<f64> {
    check(targets, preds)?;
    let s: f64 = targets
        .iter()
        .zip(preds)
        .flat_map(|(y, p)| (0..3).map(move |c| (y[c] - p[c]).powi(2)))
        .sum();
    Ok(s / (3 * targets.len()) as f64)
}

/// Mean relative error where `|y| > threshold`, mean absolute error otherwise.
/// `None` marks an empty partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdedComponent {
    pub mean_relative: Option<f64>,
    pub mean_absolute: Option<f64>,
    pub n_relative: usize,
    pub n_absolute: usize,
}

pub fn thresholded_errors(targets: &[Triple], preds: &[Triple], threshold: f64) -> Result<[ThresholdedComponent; 3]> {
    check(targets, preds)?;
    let mut out = [ThresholdedComponent {
        mean_relative: None,
        mean_absolute: None,
        n_relative: 0,
        n_absolute: 0,
    }; 3];
    for (c, comp) in out.iter_mut().enumerate() {
        let (mut rel, mut abs) = (0.0, 0.0);
        for (y, p) in targets.iter().zip(preds) {
            let e = (y[c] - p[c]).abs();
            if y[c].abs() > threshold {
                rel += e / y[c].abs();
                comp.n_relative += 1;
            } else {
                abs += e;
                comp.n_absolute += 1;
            }
        }
        comp.mean_relative = (comp.n_relative > 0).then(|| rel / comp.n_relative as f64);
        comp.mean_absolute = (comp.n_absolute > 0).then(|| abs / comp.n_absolute as f64);
    }
    Ok(out)
}

pub fn r2(targets: &[f64], preds: &[f64]) -> f64 {
    let m = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|y| (y - m).powi(2)).sum();
    let ss_res: f64 = targets.iter().zip(preds).map(|(y, p)| (y - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub rel_rmse: f64,
    pub mse: f64,
    /// Mean and median relative error of the two diagonal entries.
    pub mean_rel_error: [f64; 2],
    pub median_rel_error: [f64; 2],
    pub r2: [f64; 3],
    pub n_samples: usize,
    pub thresholded: [ThresholdedComponent; 3],
}

pub fn evaluate(targets: &[Triple], preds: &[Triple]) -> Result<EvalReport> {
    let rel = rel_rmse(targets, preds)?;
    let mut mean_rel = [0.0; 2];
    let mut med_rel = [0.0; 2];
    for c in 0..2 {
        let errs: Vec<f64> = targets
            .iter()
            .zip(preds)
            .map(|(y, p)| ((y[c] - p[c]) / y[c]).abs())
            .collect();
        mean_rel[c] = errs.iter().sum::<f64>() / errs.len() as f64;
        med_rel[c] = median(errs);
    }
    let mut r2s = [0.0; 3];
    for (c, r) in r2s.iter_mut().enumerate() {
        let y: Vec<f64> = targets.iter().map(|t| t[c]).collect();
        let p: Vec<f64> = preds.iter().map(|t| t[c]).collect();
        *r = r2(&y, &p);
    }
    Ok(EvalReport {
        rel_rmse: rel,
        mse: mse(targets, preds)?,
        mean_rel_error: mean_rel,
        median_rel_error: med_rel,
        r2: r2s,
        n_samples: targets.len(),
        thresholded: thresholded_errors(targets, preds, THRESHOLD)?,
    })
}

/// Batch predictor: images in, Mandel triples out.
pub type Predictor<'a> = dyn FnMut(&[RveImage]) -> Result<Vec<Triple>> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub mean: Triple,
    pub std: Triple,
    /// Spread relative to the mean: `std / |mean|` for the diagonal entries,
    /// `std / |mean tensor|` for the off-diagonal entry (whose mean may vanish).
    pub cov: Triple,
    pub n_shifts: usize,
}

pub fn spread(preds: &[Triple]) -> RobustnessReport {
    let m = preds.len() as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = preds.iter().map(|p| p[c]).sum::<f64>() / m;
        std[c] = (preds.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / m).sqrt();
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ratio = |s: f64, d: f64| if s == 0.0 { 0.0 } else { s / d };
    RobustnessReport {
        mean,
        std,
        cov: [
            ratio(std[0], mean[0].abs()),
            ratio(std[1], mean[1].abs()),
            ratio(std[2], norm),
        ],
        n_shifts: preds.len(),
    }
}

/// Predictions over `n_shifts` random periodic translations of `rve`.
pub fn translation_robustness(predict: &mut Predictor, rve: &RveImage, n_shifts: usize, seed: u64) -> Result<RobustnessReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rve.n() as i64;
    let shifted: Vec<RveImage> = (0..n_shifts)
        .map(|_| translate_periodic(rve, rng.gen_range(0..n), rng.gen_range(0..n)))
        .collect();
    let preds = predict(&shifted)?;
    Ok(spread(&preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub original: EvalReport,
    pub rotated: EvalReport,
}

pub fn rotate_target(t: &Triple) -> Triple {
    ConductivityTensor::from_mandel(*t).rotated90().kappa
}

/// Errors on the original images and on quarter-turned images, whose targets
/// have swapped diagonal entries and a negated off-diagonal entry.
pub fn rotation_consistency(predict: &mut Predictor, rves: &[RveImage], targets: &[Triple]) -> Result<RotationReport> {
    let original = evaluate(targets, &predict(rves)?)?;
    let rotated_imgs: Vec<RveImage> = rves.iter().map(rotate90).collect();
    let rotated_targets: Vec<Triple> = targets.iter().map(rotate_target).collect();
    let rotated = evaluate(&rotated_targets, &predict(&rotated_imgs)?)?;
    Ok(RotationReport { original, rotated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate_rve, InclusionSpec};
    use crate::homogenize::{Homogenizer, SolverConfig};

    #[test]
    fn rel_rmse_examples() {
        let t = [[1.0, 0.5, 0.01], [0.7, 0.6, -0.3]];
        assert_eq!(rel_rmse(&t, &t).unwrap(), 0.0);
        assert!((rel_rmse_scalar(&[1.0], &[0.99]).unwrap() - 1.0).abs() < 1e-12);
        let v = rel_rmse_scalar(&[1.0, 0.5], &[0.9, 0.55]).unwrap();
        assert!((v - 10.0).abs() < 1e-12);
        assert!(rel_rmse(&[[0.0, 1.0, 0.0]], &[[0.1, 1.0, 0.0]]).is_err());
    }

    #[test]
    fn small_off_diagonal_is_excluded() {
        // Off-diagonal error is ignored when |y| <= 0.2 and counted otherwise.
        let a = rel_rmse(&[[1.0, 1.0, 0.1]], &[[1.0, 1.0, 0.5]]).unwrap();
        assert_eq!(a, 0.0);
        let b = rel_rmse(&[[1.0, 1.0, 0.5]], &[[1.0, 1.0, 0.55]]).unwrap();
        assert!((b - 100.0 * (0.01f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_sample_matches_relative_norm_when_diagonal() {
        let y = [0.8, 0.6, 0.0];
        let p = [0.88, 0.6, 0.0];
        // One included component pair: sqrt(mean((0.1)^2, 0)) = 0.1/sqrt(2).
        let v = rel_rmse(&[y], &[p]).unwrap();
        assert!((v - 100.0 * 0.1 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn thresholded_partitions() {
        let t = [[1.0, 0.5, 0.05], [0.5, 0.4, -0.1], [0.3, 0.25, 0.3]];
        let p = [[1.1, 0.5, 0.0], [0.45, 0.4, -0.2], [0.3, 0.25, 0.33]];
        let r = thresholded_errors(&t, &p, 0.2).unwrap();
        assert_eq!(r[0].mean_absolute, None);
        assert!((r[0].mean_relative.unwrap() - (0.1 + 0.1 + 0.0) / 3.0).abs() < 1e-12);
        assert_eq!((r[2].n_relative, r[2].n_absolute), (1, 2));
        assert!((r[2].mean_absolute.unwrap() - 0.075).abs() < 1e-12);
        assert!((r[2].mean_relative.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn r2_of_mean_predictor_is_zero() {
        let y = [1.0, 2.0, 4.0];
        assert_eq!(r2(&y, &[7.0 / 3.0; 3]), 0.0);
        assert_eq!(r2(&y, &y), 1.0);
        let t = [[1.0, 0.5, 0.3], [0.7, 0.6, -0.3]];
        let rep = evaluate(&t, &t).unwrap();
        assert_eq!(rep.r2, [1.0; 3]);
        assert_eq!(rep.n_samples, 2);
    }

    #[test]
    fn constant_model_has_no_spread() {
        let mut constant = |imgs: &[RveImage]| -> Result<Vec<Triple>> { Ok(vec![[0.5, 0.5, 0.0]; imgs.len()]) };
        let rve = generate_rve(&InclusionSpec::training(16), 1).unwrap();
        let rep = translation_robustness(&mut constant, &rve, 20, 0).unwrap();
        assert_eq!(rep.std, [0.0; 3]);
        assert_eq!(rep.cov, [0.0; 3]);
    }

    #[test]
    fn solver_as_model_is_rotation_consistent() {
        let spec = InclusionSpec::training(16);
        let rves: Vec<RveImage> = (0..4).map(|s| generate_rve(&spec, s).unwrap()).collect();
        let mut h = Homogenizer::new(16, SolverConfig { tol: 1e-11, max_iter: 5000 });
        let mut oracle = |imgs: &[RveImage]| -> Result<Vec<Triple>> {
            imgs.iter().map(|r| Ok(h.solve(r, 5.0)?.tensor.kappa)).collect()
        };
        let targets = oracle(&rves).unwrap();
        let rep = rotation_consistency(&mut oracle, &rves, &targets).unwrap();
        assert!(rep.original.rel_rmse < 1e-6);
        assert!(rep.rotated.rel_rmse < 1e-6);
        let mut constant = |imgs: &[RveImage]| -> Result<Vec<Triple>> { Ok(vec![[0.6, 0.6, 0.0]; imgs.len()]) };
        let rep = rotation_consistency(&mut constant, &rves, &targets).unwrap();
        assert!(rep.rotated.rel_rmse > 0.0);
    }
}
