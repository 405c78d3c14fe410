use std::path::Path;

use ndarray::Array2;
use rvekit_core::dataio::{
    build_dataset, compute_features, fit_basis, write_csv, write_matrix_csv, write_pgm, write_pgm_tiles, Dataset,
    DatasetSpec, Plot, PlotKind,
};
use rvekit_core::features::{feature_names, FeatureConfig, N_ANGLES};
use rvekit_core::grid::{generate_rve, InclusionSpec, RveImage};
use rvekit_core::homogenize::{Homogenizer, SolverConfig, DEFAULT_MAX_ITER};
use rvekit_core::metrics::{self, Triple};
use rvekit_core::mining::{rank_and_export, MiningRecord};
use rvekit_core::models::{samples_for, train_on_dataset, HybridNet, ImageInputs, ModelKind, TrainPlan};
use rvekit_core::selection::{self, default_sizes, subset_sweep, RankingResult};
use rvekit_core::{CoreError, Result};
use rvekit_nn::{AdamConfig, Checkpoint, LossKind, TrainConfig};
use serde_json::{json, Value};

use crate::args::*;

/// Per-invocation state shared with `main`.
pub struct Ctx<'a> {
    pub out: &'a Path,
    pub seed: u64,
    pub data_hash: Option<String>,
}

fn cfg_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

fn with_path(path: &Path) -> impl Fn(CoreError) -> CoreError + '_ {
    move |e| match e {
        CoreError::Io(io) => CoreError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    }
}

fn load(ctx: &mut Ctx, manifest: &Path) -> Result<Dataset> {
    let ds = Dataset::load(manifest).map_err(with_path(manifest))?;
    ctx.data_hash = Some(ds.manifest.hash());
    Ok(ds)
}

fn load_model(path: &Path, kind: Option<&str>) -> Result<HybridNet> {
    let c = Checkpoint::load(path).map_err(|e| with_path(path)(e.into()))?;
    if let Some(k) = kind {
        ModelKind::parse(k)?;
        c.expect_kind(k)?;
    }
    HybridNet::from_checkpoint(&c)
}

fn f(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn generate(a: &GenerateArgs, ctx: &mut Ctx) -> Result<Value> {
    let sizes: [usize; 4] = a
        .sizes
        .as_slice()
        .try_into()
        .map_err(|_| cfg_err("--sizes needs four values: train,val,test,benchmark"))?;
    let mut spec = DatasetSpec::new(a.resolution, sizes, a.contrasts.clone(), ctx.seed);
    spec.features = !a.no_features;
    spec.solver.tol = a.tol;
    let m = build_dataset(&spec, ctx.out)?;
    let hash = m.hash();
    ctx.data_hash = Some(hash.clone());
    Ok(json!({
        "manifest_hash": hash,
        "n_samples": m.n_samples,
        "resolution": m.resolution,
        "contrasts": m.contrasts,
        "incidents": m.incidents.len(),
    }))
}

pub fn solve(a: &SolveArgs, ctx: &mut Ctx) -> Result<Value> {
    let rve: RveImage = match &a.manifest {
        Some(m) => {
            let ds = load(ctx, m)?;
            let i = a.index.unwrap();
            ds.images.get(i).cloned().ok_or_else(|| cfg_err(format!("index {i} out of range")))?
        }
        None => generate_rve(&InclusionSpec::training(a.resolution), ctx.seed)?,
    };
    let cfg = SolverConfig {
        tol: a.tol,
        max_iter: DEFAULT_MAX_ITER,
    };
    let start = std::time::Instant::now();
    let rep = Homogenizer::new(rve.n(), cfg).solve(&rve, a.contrast)?;
    let secs = start.elapsed().as_secs_f64();
    write_pgm(&ctx.out.join("rve.pgm"), &rve)?;
    let t = rep.tensor;
    let (lo, hi) = t.eigenvalues();
    Ok(json!({
        "kappa_mandel": t.kappa,
        "k11": t.k11(), "k22": t.k22(), "k12": t.k12(),
        "eigenvalues": [lo, hi],
        "volume_fraction": rvekit_core::grid::volume_fraction(&rve),
        "iterations": rep.iterations,
        "residuals": rep.residuals,
        "seconds": secs,
    }))
}

pub fn features(a: &ManifestOut, ctx: &mut Ctx) -> Result<Value> {
    let ds = load(ctx, &a.manifest)?;
    let basis = ds.pca_basis()?;
    let feats = compute_features(&ds.images, &basis, FeatureConfig::default())?;
    let names = feature_names(basis.k(), N_ANGLES);
    write_matrix_csv(&ctx.out.join("features.csv"), &names, &feats)?;
    let max_diff = ds
        .features
        .as_ref()
        .map(|stored| (stored - &feats).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    Ok(json!({
        "rows": feats.nrows(),
        "columns": feats.ncols(),
        "max_abs_diff_to_stored": max_diff,
    }))
}

pub fn fit_pca(a: &FitPcaArgs, ctx: &mut Ctx) -> Result<Value> {
    let ds = load(ctx, &a.io.manifest)?;
    let imgs = ds.images_of(ds.split("train")?);
    let basis = fit_basis(&imgs, a.components)?;
    std::fs::write(ctx.out.join("pca_basis.json"), serde_json::to_vec(&basis)?)?;
    let total: f64 = basis.singular_values_sq.iter().sum();
    let mut acc = 0.0;
    let mut rows = Vec::new();
    let mut pts = Vec::new();
    for (i, s) in basis.singular_values_sq.iter().enumerate() {
        acc += s;
        rows.push(vec![(i + 1).to_string(), f(*s), f(acc / total)]);
        pts.push(((i + 1) as f64, *s));
    }
    write_csv(&ctx.out.join("pca_spectrum.csv"), &["component", "singular_value_sq", "cumulative_share"], &rows)?;
    let mut plot = Plot::new(PlotKind::Line, "2PCF spectrum", "component", "squared singular value").with_series("train", pts);
    plot.log_y = true;
    plot.write(&ctx.out.join("pca_spectrum.svg"))?;
    Ok(json!({ "components": basis.k(), "fitted_on": basis.fitted_on, "singular_values_sq": basis.singular_values_sq }))
}

fn train_config(a: &TrainArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        adam: AdamConfig {
            learning_rate: a.learning_rate,
            weight_decay: a.weight_decay,
            ..AdamConfig::default()
        },
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        patience: a.patience,
        seed,
        loss: LossKind::Mse,
    }
}

pub fn train(a: &TrainArgs, ctx: &mut Ctx) -> Result<Value> {
    let ds = load(ctx, &a.io.manifest)?;
    let kind = ModelKind::parse(&a.model)?;
    let mut plan = TrainPlan::new(kind, train_config(a, ctx.seed));
    plan.augment = a.augment;
    plan.stage2_epochs = a.stage2_epochs;
    plan.contrast = a.contrast;
    plan.contrasts = a.contrasts.clone();
    plan.columns = a.columns.clone();
    plan.image_branch = !a.no_image_branch;
    let (mut net, out) = train_on_dataset(&ds, &plan)?;
    let ckpt = net.to_checkpoint()?;
    let ckpt_path = ctx.out.join("model.ckpt");
    let sha = rvekit_core::dataio::save_checkpoint(&ckpt_path, &ckpt)?;

    let mut rows = Vec::new();
    let mut plot = Plot::new(PlotKind::Line, &format!("{} training", kind.name()), "epoch", "loss");
    plot.log_y = true;
    let mut offset = 0;
    let histories: Vec<(String, &rvekit_core::models::FitHistory)> = match &out.history {
        Some(h) => vec![("fit".into(), h)],
        None => out.stages.iter().map(|s| (format!("stage {}", s.stage), &s.history)).collect(),
    };
    for (label, h) in &histories {
        let mut tr = Vec::new();
        let mut va = Vec::new();
        for (e, v) in h.val_loss.iter().enumerate() {
            let t = if e == 0 { None } else { h.train_loss.get(e - 1).copied() };
            rows.push(vec![label.clone(), e.to_string(), t.map(f).unwrap_or_default(), f(*v)]);
            if let Some(t) = t.filter(|t| *t > 0.0) {
                tr.push(((offset + e) as f64, t));
            }
            if *v > 0.0 {
                va.push(((offset + e) as f64, *v));
            }
        }
        offset += h.val_loss.len();
        plot = plot
            .with_series(&format!("{label} train"), tr)
            .with_series(&format!("{label} val"), va);
    }
    write_csv(&ctx.out.join("history.csv"), &["phase", "epoch", "train_loss", "val_loss"], &rows)?;
    plot.write(&ctx.out.join("history.svg"))?;
    let contrasts = rvekit_core::models::pipeline::contrasts_for(&ds, &plan)?;
    let val = samples_for(&ds, ds.split("val")?, &net, &contrasts)?;
    let preds = net.predict_mu(&val)?;
    let report = metrics::evaluate(&val.targets, &preds)?;
    Ok(json!({
        "model": kind.name(),
        "checkpoint": "model.ckpt",
        "checkpoint_sha256": sha,
        "parameters": net.param_count(),
        "val_loss": out.val_loss,
        "val_rel_rmse": report.rel_rmse,
        "train_rows": out.train_rows,
        "history": out.history,
        "stages": out.stages,
    }))
}

fn parity_plot(path: &Path, title: &str, targets: &[Triple], preds: &[Triple]) -> Result<()> {
    let mut plot = Plot::new(PlotKind::Scatter, title, "target", "prediction");
    for (c, name) in ["k11", "k22", "sqrt2 k12"].iter().enumerate() {
        plot = plot.with_series(name, targets.iter().zip(preds).map(|(t, p)| (t[c], p[c])).collect());
    }
    plot.diagonal = true;
    plot.write(path)
}

pub fn eval(a: &EvalArgs, ctx: &mut Ctx) -> Result<Value> {
    let ds = load(ctx, &a.io.manifest)?;
    let mut net = load_model(&a.checkpoint, a.model.as_deref())?;
    let idx = ds.split(&a.split)?.to_vec();
    let contrasts = match &a.contrasts {
        Some(c) => c.clone(),
        None if net.config.contrast_input => ds.manifest.contrasts.clone(),
        None => vec![rvekit_core::models::pipeline::DEFAULT_CONTRAST],
    };
    if !net.config.contrast_input && contrasts.len() > 1 {
        return Err(cfg_err("a fixed-contrast model is evaluated at one contrast"));
    }
    let mut per = Vec::new();
    let mut rows = Vec::new();
    let (mut all_t, mut all_p) = (Vec::new(), Vec::new());
    for &r in &contrasts {
        let s = samples_for(&ds, &idx, &net, &[r])?;
        let preds = net.predict(&s)?;
        let mu: Vec<Triple> = preds.iter().map(|p| p.mu).collect();
        let rep = metrics::evaluate(&s.targets, &mu)?;
        for (k, (t, p)) in s.targets.iter().zip(&preds).enumerate() {
            let mut row = vec![idx[k].to_string(), r.to_string()];
            row.extend(t.iter().chain(&p.mu).map(|v| f(*v)));
            row.extend(p.sigma.unwrap_or([f64::NAN; 3]).iter().map(|v| f(*v)));
            rows.push(row);
        }
        per.push(json!({ "contrast": r, "report": rep }));
        all_t.extend(s.targets);
        all_p.extend(mu);
    }
    write_csv(
        &ctx.out.join("predictions.csv"),
        &["id", "contrast", "t11", "t22", "t12", "p11", "p22", "p12", "s11", "s22", "s12"],
        &rows,
    )?;
    parity_plot(&ctx.out.join("parity.svg"), &format!("{} on {}", net.kind().name(), a.split), &all_t, &all_p)?;
    let overall = metrics::evaluate(&all_t, &all_p)?;
    Ok(json!({
        "model": net.kind().name(),
        "split": a.split,
        "rel_rmse": overall.rel_rmse,
        "overall": overall,
        "per_contrast": per,
    }))
}

pub fn mine(a: &MineArgs, ctx: &mut Ctx) -> Result<Value> {
    let ds = load(ctx, &a.io.manifest)?;
    let mut net = load_model(&a.checkpoint, None)?;
    if !matches!(net.config.loss, LossKind::Bayesian { .. }) {
        return Err(cfg_err("mining needs a model with a Bayesian output head"));
    }
    let idx = ds.split(&a.split)?.to_vec();
    let s = samples_for(&ds, &idx, &net, &[a.contrast])?;
    let preds = net.predict(&s)?;
    let records = idx
        .iter()
        .zip(&s.targets)
        .zip(&preds)
        .map(|((&id, t), p)| MiningRecord::new(id, t, p.mu, p.sigma.unwrap(), a.iteration))
        .collect::<Result<Vec<_>>>()?;
    let gallery = rank_and_export(
        &records,
        &|id| ds.images.get(id).cloned(),
        a.error_quantile,
        a.sigma_quantile,
        a.top,
        ctx.out,
    )?;
    let pts = records.iter().map(|r| (r.mean_sigma, r.rel_error)).collect();
    let chosen = gallery.selected.iter().filter_map(|id| records.iter().find(|r| r.id == *id)).map(|r| (r.mean_sigma, r.rel_error)).collect();
    Plot::new(PlotKind::Scatter, "error against predicted spread", "mean sigma", "relative error")
        .with_series("all", pts)
        .with_series("selected", chosen)
        .write(&ctx.out.join("mining.svg"))?;
    Ok(json!({
        "split": a.split,
        "records": records.len(),
        "selected": gallery.selected,
        "gallery": gallery.image.is_some(),
    }))
}

pub fn select(a: &SelectArgs, ctx: &mut Ctx) -> Result<Value> {
    let ds = load(ctx, &a.io.manifest)?;
    let train = ds.split("train")?;
    let feats = ds.features_of(train)?;
    let targets = ds.targets_at(train, a.contrast)?;
    let tm = Array2::from_shape_fn((targets.len(), 3), |(i, j)| targets[i][j]);
    let rankings: Vec<RankingResult> = vec![
        selection::pearson_rank(&feats, &tm)?,
        selection::anova_rank(&feats, &tm)?,
        selection::rfe_rank(&feats, &tm)?,
    ];
    let names = &ds.manifest.feature_names;
    let mut header = names.clone();
    header.extend(["k11", "k22", "k12"].map(String::from));
    write_matrix_csv(&ctx.out.join("pearson.csv"), &header, &selection::pearson_matrix(&feats, &tm)?)?;
    let mut rows = Vec::new();
    for r in &rankings {
        for (pos, &j) in r.order.iter().enumerate() {
            let name = names.get(j).cloned().unwrap_or_else(|| j.to_string());
            rows.push(vec![r.method.clone(), pos.to_string(), j.to_string(), name, f(r.scores[j])]);
        }
    }
    write_csv(&ctx.out.join("rankings.csv"), &["method", "rank", "column", "name", "score"], &rows)?;
    let mut sweep_json = Value::Null;
    if !a.rank_only {
        let sizes = a.sizes.clone().unwrap_or_else(|| default_sizes(feats.ncols()));
        let tc = TrainConfig {
            max_epochs: a.epochs,
            patience: a.patience,
            ..Default::default()
        };
        let contrast = a.contrast;
        let ds_ref = &ds;
        let train_fn = move |cols: &[usize], seed: u64| -> Result<f64> {
            let mut plan = TrainPlan::new(ModelKind::Bnn, TrainConfig { seed, ..tc.clone() });
            plan.columns = Some(cols.to_vec());
            plan.contrast = contrast;
            Ok(train_on_dataset(ds_ref, &plan)?.1.val_loss)
        };
        let sweep = subset_sweep(&rankings, &sizes, a.repeats, ctx.seed, &train_fn)?;
        let mut plot = Plot::new(PlotKind::Line, "feature subset sweep", "features", "best validation loss");
        let mut rows = Vec::new();
        for r in &rankings {
            let pts = sweep.iter().filter(|p| p.method == r.method).map(|p| (p.size as f64, p.best)).collect();
            plot = plot.with_series(&r.method, pts);
        }
        for p in &sweep {
            rows.push(vec![p.method.clone(), p.size.to_string(), f(p.best)]);
        }
        write_csv(&ctx.out.join("sweep.csv"), &["method", "size", "best_val_loss"], &rows)?;
        plot.write(&ctx.out.join("sweep.svg"))?;
        sweep_json = serde_json::to_value(&sweep)?;
    }
    Ok(json!({
        "rankings": rankings.iter().map(|r| json!({ "method": r.method, "top10": r.top(10) })).collect::<Vec<_>>(),
        "sweep": sweep_json,
    }))
}

pub fn physics_check(a: &PhysicsArgs, ctx: &mut Ctx) -> Result<Value> {
    let ds = load(ctx, &a.io.manifest)?;
    let mut net = load_model(&a.checkpoint, None)?;
    let basis = if net.has(rvekit_core::models::Branch::Features) { Some(ds.pca_basis()?) } else { None };
    let mut inputs = ImageInputs::new(&net, basis)?;
    let idx: Vec<usize> = ds.split(&a.split)?.iter().copied().take(a.samples).collect();
    if idx.is_empty() {
        return Err(cfg_err(format!("split {} is empty", a.split)));
    }
    let r = a.contrast;
    let mut predict = |imgs: &[RveImage]| inputs.predict(&mut net, imgs, r);
    let mut covs: Vec<[f64; 3]> = Vec::new();
    let mut rows = Vec::new();
    for (k, &i) in idx.iter().enumerate() {
        let rep = metrics::translation_robustness(&mut predict, &ds.images[i], a.shifts, ctx.seed.wrapping_add(k as u64))?;
        rows.push([vec![i.to_string()], rep.cov.iter().map(|v| f(*v)).collect()].concat());
        covs.push(rep.cov);
    }
    write_csv(&ctx.out.join("translation_cov.csv"), &["id", "cov11", "cov22", "cov12"], &rows)?;
    let median = [0, 1, 2].map(|c| rvekit_core::mining::quantile(&covs.iter().map(|v| v[c]).collect::<Vec<_>>(), 0.5));
    let imgs = ds.images_of(&idx);
    let targets = ds.targets_at(&idx, r)?;
    let rot = metrics::rotation_consistency(&mut predict, &imgs, &targets)?;
    Ok(json!({
        "samples": idx.len(),
        "shifts": a.shifts,
        "median_cov": median,
        "rotation": rot,
    }))
}

pub fn report(a: &ReportArgs, ctx: &mut Ctx) -> Result<Value> {
    let mut runs = Vec::new();
    let mut md = String::from("| run | command | model | rel_rmse (%) |\n|---|---|---|---|\n");
    let mut tiles = Vec::new();
    for dir in &a.runs {
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)?;
        let res = &v["results"];
        let rel = res["rel_rmse"].as_f64().or(res["val_rel_rmse"].as_f64());
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            dir.display(),
            v["command"].as_str().unwrap_or("?"),
            res["model"].as_str().unwrap_or("-"),
            rel.map_or("-".into(), |r| format!("{r:.3}")),
        ));
        if let Some(r) = rel {
            tiles.push(((tiles.len() + 1) as f64, r));
        }
        runs.push(v);
    }
    std::fs::write(ctx.out.join("report.md"), md)?;
    std::fs::write(ctx.out.join("report.json"), serde_json::to_vec_pretty(&runs)?)?;
    if !tiles.is_empty() {
        Plot::new(PlotKind::Scatter, "relative root mean squared error by run", "run", "percent")
            .with_series("runs", tiles)
            .write(&ctx.out.join("report.svg"))?;
    }
    Ok(json!({ "runs": runs.len() }))
}

/// Writes the first images of a dataset as a contact sheet (used by `generate`).
pub fn preview(ds_dir: &Path, count: usize) -> Result<()> {
    let ds = Dataset::load(&ds_dir.join("manifest.json"))?;
    let n = count.min(ds.images.len());
    write_pgm_tiles(&ds_dir.join("preview.pgm"), &ds.images[..n], 8)
}
