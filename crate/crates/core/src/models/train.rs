//! Mini-batch training with best-epoch restore, translation augmentation and
//! the staged schedule for hybrid models.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvekit_nn::{early_stop, AdamW, Mode, Parameterized, TrainConfig};
use serde::{Deserialize, Serialize};

use super::net::{Branch, HybridNet, Samples, BRANCHES};
use crate::error::{config, CoreError, Result};
use crate::grid::{translate_periodic, RveImage};

pub const AUGMENT_FRACTION: f64 = 0.5;
pub const AUGMENT_EVERY: usize = 10;
pub const STAGE2_EPOCHS: usize = 20;

/// At epochs that are positive multiples of `every`, returns the batch with a
/// random `fraction` of its images shifted by uniform periodic offsets.
/// Otherwise the batch comes back unchanged.
pub fn augment_translate<R: Rng>(
    batch: &[RveImage],
    fraction: f64,
    every: usize,
    epoch: usize,
    rng: &mut R,
) -> Vec<RveImage> {
    let mut out = batch.to_vec();
    if every == 0 || epoch == 0 || epoch % every != 0 || batch.is_empty() {
        return out;
    }
    let k = ((fraction.clamp(0.0, 1.0) * batch.len() as f64).round() as usize).min(batch.len());
    for i in index::sample(rng, batch.len(), k) {
        let n = out[i].n() as i64;
        let (dx, dy) = (rng.gen_range(0..n), rng.gen_range(0..n));
        out[i] = translate_periodic(&out[i], dx, dy);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub train: TrainConfig,
    pub augment: bool,
    /// Restore the weights of the best validation epoch at the end.
    pub restore_best: bool,
    /// Label used in error messages.
    pub tag: String,
    /// Fit only the mean columns of a Bayesian head, by MSE.
    pub mean_only: bool,
}

impl FitOptions {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            augment: false,
            restore_best: true,
            tag: "fit".into(),
            mean_only: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    pub train_loss: Vec<f64>,
    /// Entry 0 is the loss before the first update.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs: usize,
    pub augment_events: usize,
    pub seconds: f64,
}

/// Trains the model's trainable branches on `train`, monitoring `val`.
pub fn fit(model: &mut HybridNet, train: &Samples, val: &Samples, opts: &FitOptions) -> Result<FitHistory> {
    let tc = &opts.train;
    tc.validate().map_err(config)?;
    train.check(&model.config)?;
    val.check(&model.config)?;
    if train.is_empty() || val.is_empty() {
        return Err(config(format!("{}: empty training or validation set", opts.tag)));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(tc.adam);
    let mut work = train.clone();
    // Frozen branches are fixed maps here, so their outputs are computed once.
    let mut train_cache = model.frozen_parts(&work)?;
    let val_cache = model.frozen_parts(val)?;
    let mut h = FitHistory {
        val_loss: vec![model.evaluate_loss_cached(val, opts.mean_only, Some(&val_cache))?],
        ..Default::default()
    };
    h.best_val = h.val_loss[0];
    let mut best = opts.restore_best.then(|| model.snapshot());
    let mut order: Vec<usize> = (0..work.len()).collect();
    for epoch in 1..=tc.max_epochs {
        if opts.augment && !work.images.is_empty() && (epoch - 1) > 0 && (epoch - 1) % AUGMENT_EVERY == 0 {
            work.images = augment_translate(&work.images, AUGMENT_FRACTION, AUGMENT_EVERY, epoch - 1, &mut rng);
            h.augment_events += 1;
            if train_cache.0[Branch::Image as usize].is_some() {
                train_cache = model.frozen_parts(&work)?;
            }
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let y = model.forward_cached(&work, batch, Mode::Train, Some(&train_cache))?;
            let (loss, grad) = model.loss(&y, &work.target_matrix(batch), opts.mean_only);
            if !loss.is_finite() {
                return Err(CoreError::Numeric(format!("{}: non-finite training loss at epoch {epoch}", opts.tag)));
            }
            model.zero_grad();
            model.backward(&grad);
            opt.step(model);
            total += loss * batch.len() as f64;
        }
        h.train_loss.push(total / work.len() as f64);
        let v = model.evaluate_loss_cached(val, opts.mean_only, Some(&val_cache))?;
        if !v.is_finite() {
            return Err(CoreError::Numeric(format!("{}: non-finite validation loss at epoch {epoch}", opts.tag)));
        }
        h.val_loss.push(v);
        h.epochs = epoch;
        if v < h.best_val {
            h.best_val = v;
            h.best_epoch = epoch;
            if let Some(b) = best.as_mut() {
                *b = model.snapshot();
            }
        }
        log::debug!("{} epoch {epoch}: train {:.5e} val {v:.5e}", opts.tag, h.train_loss[epoch - 1]);
        if early_stop(&h.val_loss, tc.patience) {
            break;
        }
    }
    if let Some(b) = best {
        model.restore(&b)?;
    } else {
        h.best_val = *h.val_loss.last().unwrap();
        h.best_epoch = h.epochs;
    }
    h.seconds = start.elapsed().as_secs_f64();
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub contributing: [bool; 3],
    pub trainable: [bool; 3],
    pub history: FitHistory,
    /// Branch weight hashes after the stage.
    pub hashes: [Option<String>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistageConfig {
    pub train: TrainConfig,
    pub stage2_epochs: usize,
    pub augment: bool,
}

impl MultistageConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            stage2_epochs: STAGE2_EPOCHS,
            augment: false,
        }
    }
}

const I: [bool; 3] = [true, false, false];
const ALL: [bool; 3] = [true, true, true];

/// Five stages: the volume bypass alone, a short joint warm-up of the other
/// two branches, each of them separately, then both together. From stage 2 on
/// the bypass stays frozen and every branch contributes.
pub fn multistage_train(
    model: &mut HybridNet,
    train: &Samples,
    val: &Samples,
    cfg: &MultistageConfig,
) -> Result<Vec<StageRecord>> {
    if !model.has(Branch::Vol) {
        return Err(config("staged training needs a volume bypass branch"));
    }
    let plan: [(u8, [bool; 3], [bool; 3]); 5] = [
        (1, I, I),
        (2, ALL, [false, true, true]),
        (3, [true, true, false], [false, true, false]),
        (4, ALL, [false, false, true]),
        (5, ALL, [false, true, true]),
    ];
    let mut records = Vec::new();
    let mut frozen_vol: Option<String> = None;
    for (stage, contributing, trainable) in plan {
        model.set_stage(contributing, trainable);
        if stage > 1 && !model.trainable.iter().any(|&t| t) {
            continue;
        }
        if stage == 4 && model.has(Branch::Image) {
            // rejoin from the stage-3 prediction, keeping the stage-2 trunk
            model.silence_image_output()?;
        }
        let before = model.branch_hashes();
        let mut tc = cfg.train.clone();
        tc.seed = cfg.train.seed.wrapping_add(stage as u64);
        let mut opts = FitOptions::new(tc);
        opts.tag = format!("stage {stage}");
        opts.augment = cfg.augment;
        if stage == 2 {
            opts.train.max_epochs = cfg.stage2_epochs;
            opts.train.patience = usize::MAX;
            opts.restore_best = false;
        }
        let history = fit(model, train, val, &opts)?;
        let hashes = model.branch_hashes();
        for b in BRANCHES {
            let i = b as usize;
            if !model.trainable[i] && before[i] != hashes[i] {
                return Err(CoreError::Numeric(format!("stage {stage}: frozen branch {b:?} changed")));
            }
        }
        match (&frozen_vol, stage) {
            (None, 1) => frozen_vol = hashes[0].clone(),
            (Some(h), _) if hashes[0].as_ref() != Some(h) => {
                return Err(CoreError::Numeric(format!("stage {stage}: volume bypass changed after stage 1")));
            }
            _ => {}
        }
        log::info!(
            "stage {stage}: {} epochs, best val {:.5e} at {}",
            history.epochs,
            history.best_val,
            history.best_epoch
        );
        records.push(StageRecord {
            stage,
            contributing: model.contributing,
            trainable: model.trainable,
            history,
            hashes,
        });
    }
    model.all_branches();
    Ok(records)
}
