//! Surfacing samples that the current feature set cannot explain: high
//! prediction error together with high predicted aleatoric spread.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio;
use crate::error::{data, Result};
use crate::grid::RveImage;

pub const DEFAULT_QUANTILE: f64 = 0.9;

/// `|target - prediction|_2 / |target|_2`.
pub fn relative_error(target: &[f64; 3], pred: &[f64; 3]) -> Result<f64> {
    let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(data("relative error of a zero target"));
    }
    let diff = target.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRecord {
    pub id: usize,
    pub rel_error: f64,
    pub mean_sigma: f64,
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
    pub iteration: u32,
}

impl MiningRecord {
    pub fn new(id: usize, target: &[f64; 3], mu: [f64; 3], sigma: [f64; 3], iteration: u32) -> Result<Self> {
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(data(format!("sample {id}: non-positive predicted spread")));
        }
        Ok(Self {
            id,
            rel_error: relative_error(target, &mu)?,
            mean_sigma: sigma.iter().sum::<f64>() / 3.0,
            mu,
            sigma,
            iteration,
        })
    }
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Indices into `records` lying strictly above both quantile thresholds, ordered
/// by the product of error and spread (each divided by its maximum), largest first.
pub fn select(records: &[MiningRecord], error_quantile: f64, sigma_quantile: f64) -> Vec<usize> {
    if records.is_empty() {
        return Vec::new();
    }
    let errs: Vec<f64> = records.iter().map(|r| r.rel_error).collect();
    let sigs: Vec<f64> = records.iter().map(|r| r.mean_sigma).collect();
    let te = quantile(&errs, error_quantile);
    let ts = quantile(&sigs, sigma_quantile);
    let max_e = errs.iter().copied().fold(0.0, f64::max);
    let max_s = sigs.iter().copied().fold(0.0, f64::max);
    let mut picked: Vec<(usize, f64)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.rel_error > te && r.mean_sigma > ts)
        .map(|(i, r)| {
            let score = (r.rel_error / max_e) * (r.mean_sigma / max_s);
            (i, score)
        })
        .collect();
    picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(records[a.0].id.cmp(&records[b.0].id)));
    picked.into_iter().map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gallery {
    /// Sample ids in rank order.
    pub selected: Vec<usize>,
    pub csv: PathBuf,
    pub image: Option<PathBuf>,
}

/// Writes the ranked records as CSV and the top `k` images as a PGM tile sheet.
/// `image_of` maps a sample id to its image.
pub fn rank_and_export(
    records: &[MiningRecord],
    image_of: &dyn Fn(usize) -> Option<RveImage>,
    error_quantile: f64,
    sigma_quantile: f64,
    k: usize,
    out_dir: &Path,
) -> Result<Gallery> {
    std::fs::create_dir_all(out_dir)?;
    let order = select(records, error_quantile, sigma_quantile);
    let csv = out_dir.join("mining_records.csv");
    let header = [
        "rank", "id", "rel_error", "mean_sigma", "mu_11", "mu_22", "mu_12", "sigma_11", "sigma_22", "sigma_12",
        "iteration",
    ];
    let rows: Vec<Vec<String>> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let r = &records[i];
            let mut row = vec![rank.to_string(), r.id.to_string()];
            row.push(format!("{:.8e}", r.rel_error));
            row.push(format!("{:.8e}", r.mean_sigma));
            row.extend(r.mu.iter().chain(&r.sigma).map(|v| format!("{v:.8e}")));
            row.push(r.iteration.to_string());
            row
        })
        .collect();
    dataio::write_csv(&csv, &header, &rows)?;
    let selected: Vec<usize> = order.iter().map(|&i| records[i].id).collect();
    let mut image = None;
    let tiles: Vec<RveImage> = selected.iter().take(k).filter_map(|&id| image_of(id)).collect();
    if k > 0 && !tiles.is_empty() {
        let path = out_dir.join("mining_gallery.pgm");
        dataio::write_pgm_tiles(&path, &tiles, 4)?;
        image = Some(path);
    }
    Ok(Gallery { selected, csv, image })
}
