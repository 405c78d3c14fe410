//! Dataset-level glue: building sample tables, training any model kind and
//! predicting straight from images.

use ndarray::Array2;
use rvekit_nn::{LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use super::net::{scale_contrast, Branch, HybridNet, ModelConfig, ModelKind, OutputMap, Samples};
use super::train::{fit, multistage_train, FitHistory, FitOptions, MultistageConfig, StageRecord, STAGE2_EPOCHS};
use crate::dataio::Dataset;
use crate::error::{config, data, Result};
use crate::features::{FeatureConfig, FeatureExtractor, PcaBasis, StandardizationStats};
use crate::grid::{volume_fraction, RveImage};

pub const DEFAULT_CONTRAST: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub kind: ModelKind,
    pub train: TrainConfig,
    pub augment: bool,
    pub stage2_epochs: usize,
    /// Contrast for fixed-contrast models.
    pub contrast: f64,
    /// Training contrasts for the variable-contrast model; all stored ones when `None`.
    pub contrasts: Option<Vec<f64>>,
    pub columns: Option<Vec<usize>>,
    /// Keep the image branch of the variable-contrast model.
    pub image_branch: bool,
    pub init_seed: u64,
}

impl TrainPlan {
    pub fn new(kind: ModelKind, train: TrainConfig) -> Self {
        Self {
            kind,
            init_seed: train.seed,
            train,
            augment: false,
            stage2_epochs: STAGE2_EPOCHS,
            contrast: DEFAULT_CONTRAST,
            contrasts: None,
            columns: None,
            image_branch: true,
        }
    }

    /// Staged training applies to models with a bypass and a second branch.
    pub fn staged(&self) -> bool {
        matches!(self.kind, ModelKind::Hybrid | ModelKind::HybridVariable)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub stages: Vec<StageRecord>,
    pub history: Option<FitHistory>,
    pub val_loss: f64,
    pub train_rows: usize,
}

/// Contrasts a model is trained or evaluated at.
pub fn contrasts_for(ds: &Dataset, plan: &TrainPlan) -> Result<Vec<f64>> {
    if plan.kind == ModelKind::HybridVariable {
        let c = plan.contrasts.clone().unwrap_or_else(|| ds.manifest.contrasts.clone());
        for &r in &c {
            ds.manifest.contrast_index(r)?;
        }
        Ok(c)
    } else {
        ds.manifest.contrast_index(plan.contrast)?;
        Ok(vec![plan.contrast])
    }
}

/// Rows for `indices` at every contrast in `contrasts`, contrast-major.
pub fn samples_for(ds: &Dataset, indices: &[usize], net: &HybridNet, contrasts: &[f64]) -> Result<Samples> {
    let cfg = &net.config;
    let images = ds.images_of(indices);
    let vol: Vec<f64> = images.iter().map(volume_fraction).collect();
    let feats = if cfg.has(Branch::Features) {
        let raw = ds.features_of(indices)?;
        let raw = select_columns(&raw, cfg.columns.as_deref());
        let stats = net
            .feature_stats
            .as_ref()
            .ok_or_else(|| config("feature model has no standardization statistics"))?;
        stats.apply_rows(&raw)
    } else {
        Array2::zeros((indices.len(), 0))
    };
    let mut out = Samples {
        features: Array2::zeros((0, feats.ncols())),
        ..Default::default()
    };
    for &r in contrasts {
        let t = ds.targets_at(indices, r)?;
        out.targets.extend(t);
        out.vol.extend(&vol);
        if cfg.contrast_input {
            out.contrast.extend(std::iter::repeat(scale_contrast(r)).take(indices.len()));
        }
        if cfg.has(Branch::Image) {
            out.images.extend(images.iter().cloned());
        }
        out.features
            .append(ndarray::Axis(0), feats.view())
            .map_err(|e| data(format!("feature rows: {e}")))?;
    }
    Ok(out)
}

fn select_columns(raw: &Array2<f64>, columns: Option<&[usize]>) -> Array2<f64> {
    match columns {
        Some(c) => raw.select(ndarray::Axis(1), c),
        None => raw.clone(),
    }
}

/// A fresh, untrained model sized for `ds`.
pub fn init_model(ds: &Dataset, plan: &TrainPlan) -> Result<HybridNet> {
    let n_features = ds.features.as_ref().map_or(0, |f| f.ncols());
    let mut cfg = ModelConfig::new(plan.kind, ds.manifest.resolution, n_features)?;
    if plan.kind == ModelKind::HybridVariable && !plan.image_branch {
        cfg = cfg.without_image();
    }
    if cfg.has(Branch::Features) && n_features == 0 {
        return Err(data("model needs features but the dataset was built without them"));
    }
    if let Some(c) = &plan.columns {
        cfg = cfg.with_columns(c.clone())?;
    }
    let contrasts = contrasts_for(ds, plan)?;
    let mut train_targets = Vec::new();
    for &r in &contrasts {
        train_targets.extend(ds.targets_at(ds.split("train")?, r)?);
    }
    cfg.output_map = Some(OutputMap::from_targets(&train_targets, cfg.output_width())?);
    let mut net = HybridNet::new(cfg, plan.init_seed)?;
    if net.has(Branch::Features) {
        let raw = ds.features_of(ds.split("train")?)?;
        net.feature_stats = Some(StandardizationStats::fit(&select_columns(&raw, net.config.columns.as_deref()))?);
    }
    Ok(net)
}

/// Builds and trains the model described by `plan` on the train split,
/// selecting epochs on the validation split.
pub fn train_on_dataset(ds: &Dataset, plan: &TrainPlan) -> Result<(HybridNet, TrainOutcome)> {
    let mut net = init_model(ds, plan)?;
    let contrasts = contrasts_for(ds, plan)?;
    let train = samples_for(ds, ds.split("train")?, &net, &contrasts)?;
    let val = samples_for(ds, ds.split("val")?, &net, &contrasts)?;
    let mut tc = plan.train.clone();
    tc.loss = net.config.loss;
    let (stages, history) = if plan.staged() {
        let mut mc = MultistageConfig::new(tc);
        mc.augment = plan.augment;
        mc.stage2_epochs = plan.stage2_epochs;
        (multistage_train(&mut net, &train, &val, &mc)?, None)
    } else {
        let mut opts = FitOptions::new(tc);
        opts.augment = plan.augment;
        opts.tag = plan.kind.name().into();
        if matches!(net.config.loss, LossKind::Bayesian { .. }) {
            // Means first: started cold, the bounded loss parks hard samples
            // under a large sigma and stops moving their means.
            let mut warm = opts.clone();
            warm.mean_only = true;
            warm.tag = format!("{} warm-up", opts.tag);
            fit(&mut net, &train, &val, &warm)?;
            // Start the spread at the warm model's residual scale, so the
            // first Bayesian steps do not pull the shared layers around.
            let mu = net.predict_mu(&train)?;
            let mut rms = [0.0; 3];
            for (p, t) in mu.iter().zip(&train.targets) {
                for c in 0..3 {
                    rms[c] += (p[c] - t[c]).powi(2) / mu.len() as f64;
                }
            }
            if let Some(m) = net.config.output_map.as_mut() {
                m.set_sigma(rms.map(f64::sqrt));
            }
        }
        (Vec::new(), Some(fit(&mut net, &train, &val, &opts)?))
    };
    let val_loss = net.evaluate_loss(&val)?;
    Ok((
        net,
        TrainOutcome {
            stages,
            history,
            val_loss,
            train_rows: train.len(),
        },
    ))
}

/// Computes every input a model needs from raw images.
pub struct ImageInputs {
    extractor: Option<(FeatureExtractor, PcaBasis)>,
}

impl ImageInputs {
    pub fn new(net: &HybridNet, basis: Option<PcaBasis>) -> Result<Self> {
        let extractor = if net.has(Branch::Features) {
            let basis = basis.ok_or_else(|| config("feature model needs the dataset PCA basis"))?;
            Some((FeatureExtractor::new(net.config.resolution, FeatureConfig::default())?, basis))
        } else {
            None
        };
        Ok(Self { extractor })
    }

    pub fn samples(&mut self, net: &HybridNet, images: &[RveImage], contrast: f64) -> Result<Samples> {
        let cfg = &net.config;
        let features = match &mut self.extractor {
            Some((ex, basis)) => {
                let mut rows = Vec::with_capacity(images.len() * cfg.n_features);
                for im in images {
                    let f = ex.assemble(im, basis)?;
                    match &cfg.columns {
                        Some(c) => rows.extend(c.iter().map(|&j| f[j])),
                        None => rows.extend(f),
                    }
                }
                let raw = Array2::from_shape_vec((images.len(), cfg.n_features), rows)
                    .map_err(|e| data(format!("feature rows: {e}")))?;
                net.feature_stats
                    .as_ref()
                    .ok_or_else(|| config("feature model has no standardization statistics"))?
                    .apply_rows(&raw)
            }
            None => Array2::zeros((images.len(), 0)),
        };
        Ok(Samples {
            images: if cfg.has(Branch::Image) { images.to_vec() } else { Vec::new() },
            features,
            vol: images.iter().map(volume_fraction).collect(),
            contrast: if cfg.contrast_input {
                vec![scale_contrast(contrast); images.len()]
            } else {
                Vec::new()
            },
            targets: vec![[0.0; 3]; images.len()],
        })
    }

    /// Point predictions for `images` at contrast `r`.
    pub fn predict(&mut self, net: &mut HybridNet, images: &[RveImage], r: f64) -> Result<Vec<[f64; 3]>> {
        let s = self.samples(net, images, r)?;
        net.predict_mu(&s)
    }
}
