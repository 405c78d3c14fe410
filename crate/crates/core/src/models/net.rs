//! The branch-summing network behind every model kind.

use ndarray::{s, Array2, Array4, ArrayD, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rvekit_nn::loss::{sigma_from_raw, SIGMA_FLOOR};
use rvekit_nn::{Checkpoint, LayerSpec, LossKind, Mode, Parameterized, Sequential};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch;
use crate::error::{config, data, CoreError, Result};
use crate::features::StandardizationStats;
use crate::grid::RveImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Vol,
    Bnn,
    Conv,
    Inception,
    Hybrid,
    HybridVariable,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Vol,
        ModelKind::Bnn,
        ModelKind::Conv,
        ModelKind::Inception,
        ModelKind::Hybrid,
        ModelKind::HybridVariable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vol => "vol",
            ModelKind::Bnn => "bnn",
            ModelKind::Conv => "conv",
            ModelKind::Inception => "inception",
            ModelKind::Hybrid => "hybrid",
            ModelKind::HybridVariable => "hybrid-variable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config(format!("unknown model kind '{s}'")))
    }
}

/// Branch index: volume bypass, feature regressor, image network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Vol = 0,
    Features = 1,
    Image = 2,
}

pub const BRANCHES: [Branch; 3] = [Branch::Vol, Branch::Features, Branch::Image];

/// Point prediction plus, for Bayesian heads, the predicted spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AleatoricPrediction {
    pub mu: [f64; 3],
    pub sigma: Option<[f64; 3]>,
}

/// Maps a phase contrast onto the extra input neuron: 2 -> 0, 100 -> 1.
pub fn scale_contrast(r: f64) -> f64 {
    (r - 2.0) / 98.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub resolution: usize,
    pub n_features: usize,
    pub contrast_input: bool,
    pub loss: LossKind,
    pub vol: Option<Vec<LayerSpec>>,
    pub features: Option<Vec<LayerSpec>>,
    pub trunk: Option<Vec<LayerSpec>>,
    pub head: Option<Vec<LayerSpec>>,
    /// Dataset feature columns fed to the feature branch, all when `None`.
    #[serde(default)]
    pub columns: Option<Vec<usize>>,
    /// Fixed affine map applied to the summed branch outputs.
    #[serde(default)]
    pub output_map: Option<OutputMap>,
}

/// Per-branch outputs for every row of one sample table, indexed by [`Branch`].
#[derive(Debug, Clone, Default)]
pub struct FrozenParts(pub [Option<Array2<f64>>; 3]);

/// `out = offset + scale * raw`, per output column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMap {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl OutputMap {
    /// Target mean and standard deviation per component. Spread columns of a
    /// Bayesian head keep unit scale and start at sigma = target std.
    pub fn from_targets(targets: &[[f64; 3]], width: usize) -> Result<Self> {
        if targets.len() < 2 {
            return Err(data("output scaling needs at least two targets"));
        }
        let m = targets.len() as f64;
        let mut offset = vec![0.0; width];
        let mut scale = vec![1.0; width];
        for c in 0..3 {
            let mean = targets.iter().map(|t| t[c]).sum::<f64>() / m;
            let var = targets.iter().map(|t| (t[c] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            offset[c] = mean;
            scale[c] = var.sqrt().max(1e-6);
        }
        let mut map = Self { offset, scale };
        if width == 6 {
            let std = [map.scale[0], map.scale[1], map.scale[2]];
            map.set_sigma(std);
        }
        Ok(map)
    }

    /// Shifts the spread columns so a zero raw output means `sigma`.
    pub fn set_sigma(&mut self, sigma: [f64; 3]) {
        for (c, s) in sigma.iter().enumerate() {
            let y = (s - SIGMA_FLOOR).max(1e-6);
            // inverse softplus
            self.offset[3 + c] = if y > 30.0 { y } else { y.exp_m1().ln() };
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind, resolution: usize, n_features: usize) -> Result<Self> {
        let contrast = kind == ModelKind::HybridVariable;
        let extra = contrast as usize;
        let loss = match kind {
            ModelKind::Bnn => LossKind::bayesian(),
            ModelKind::HybridVariable => LossKind::rel_mse(),
            _ => LossKind::Mse,
        };
        let w = loss.output_width(3);
        let vol = matches!(
            kind,
            ModelKind::Vol | ModelKind::Inception | ModelKind::Hybrid | ModelKind::HybridVariable
        )
        .then(|| arch::build_vol(1 + extra, w));
        let features = matches!(kind, ModelKind::Bnn | ModelKind::Hybrid | ModelKind::HybridVariable)
            .then(|| arch::build_bnn(n_features + extra, w));
        let (trunk, head) = match kind {
            ModelKind::Conv => {
                let (t, width) = arch::build_generic_convnet_trunk(resolution)?;
                (Some(t), Some(arch::build_generic_convnet_head(width, w)))
            }
            ModelKind::Inception | ModelKind::Hybrid | ModelKind::HybridVariable => {
                let (t, width) = arch::build_inception_trunk(resolution)?;
                (Some(t), Some(arch::build_image_head(width + extra, w)))
            }
            _ => (None, None),
        };
        Ok(Self {
            kind,
            resolution,
            n_features,
            contrast_input: contrast,
            loss,
            vol,
            features,
            trunk,
            head,
            columns: None,
            output_map: None,
        })
    }

    /// Restricts the feature branch to a subset of dataset columns.
    pub fn with_columns(mut self, columns: Vec<usize>) -> Result<Self> {
        if columns.is_empty() || columns.iter().any(|&c| c >= self.n_features) {
            return Err(config(format!("feature columns must be in 0..{}", self.n_features)));
        }
        if self.features.is_some() {
            let extra = self.contrast_input as usize;
            self.features = Some(arch::build_bnn(columns.len() + extra, self.output_width()));
        }
        self.n_features = columns.len();
        self.columns = Some(columns);
        Ok(self)
    }

    /// Drops the image branch (a cheaper variable-contrast variant).
    pub fn without_image(mut self) -> Self {
        self.trunk = None;
        self.head = None;
        self
    }

    pub fn has(&self, b: Branch) -> bool {
        match b {
            Branch::Vol => self.vol.is_some(),
            Branch::Features => self.features.is_some(),
            Branch::Image => self.trunk.is_some(),
        }
    }

    pub fn output_width(&self) -> usize {
        self.loss.output_width(3)
    }
}

/// Inputs and targets, one row per (sample, contrast) pair.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    /// One per row; empty when no image branch is used.
    pub images: Vec<RveImage>,
    /// Standardized feature rows; zero columns when unused.
    pub features: Array2<f64>,
    pub vol: Vec<f64>,
    /// Scaled contrast per row; empty for fixed-contrast models.
    pub contrast: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        Samples {
            images: if self.images.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.images[i].clone()).collect()
            },
            features: self.features.select(Axis(0), idx),
            vol: idx.iter().map(|&i| self.vol[i]).collect(),
            contrast: if self.contrast.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.contrast[i]).collect()
            },
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    pub fn target_matrix(&self, idx: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((idx.len(), 3), |(r, c)| self.targets[idx[r]][c])
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.len();
        if self.vol.len() != n {
            return Err(data("volume fractions do not match row count"));
        }
        if cfg.contrast_input && self.contrast.len() != n {
            return Err(config("variable-contrast model needs a contrast for every row"));
        }
        if cfg.has(Branch::Features) && (self.features.nrows() != n || self.features.ncols() != cfg.n_features) {
            return Err(data(format!(
                "feature matrix is {:?}, model expects ({n}, {})",
                self.features.dim(),
                cfg.n_features
            )));
        }
        if cfg.has(Branch::Image) {
            if self.images.len() != n {
                return Err(data("image branch needs one image per row"));
            }
            if self.images.iter().any(|im| im.n() != cfg.resolution) {
                return Err(data(format!("images must be {0}x{0}", cfg.resolution)));
            }
        }
        Ok(())
    }
}

fn append_column(x: Array2<f64>, col: Option<Vec<f64>>) -> Array2<f64> {
    match col {
        None => x,
        Some(c) => {
            let (b, p) = x.dim();
            let mut out = Array2::zeros((b, p + 1));
            out.slice_mut(s![.., ..p]).assign(&x);
            for (r, v) in c.into_iter().enumerate() {
                out[[r, p]] = v;
            }
            out
        }
    }
}

/// `(B, n, n, 1)` tensor with inclusion pixels at +1 and matrix at -1.
pub fn image_tensor(images: &[&RveImage]) -> ArrayD<f64> {
    let n = images.first().map_or(0, |i| i.n());
    let mut t = Array4::zeros((images.len(), n, n, 1));
    for (b, img) in images.iter().enumerate() {
        for (k, &p) in img.pixels().iter().enumerate() {
            t[[b, k / n, k % n, 0]] = 2.0 * p as f64 - 1.0;
        }
    }
    t.into_dyn()
}

fn to2(x: ArrayD<f64>) -> Result<Array2<f64>> {
    x.into_dimensionality::<Ix2>()
        .map_err(|e| CoreError::Numeric(format!("branch output is not a matrix: {e}")))
}

#[derive(Debug, Clone)]
pub struct HybridNet {
    pub config: ModelConfig,
    /// Feature standardization fitted on the training rows.
    pub feature_stats: Option<StandardizationStats>,
    pub vol: Option<Sequential>,
    pub features: Option<Sequential>,
    pub trunk: Option<Sequential>,
    pub head: Option<Sequential>,
    pub trainable: [bool; 3],
    pub contributing: [bool; 3],
    trunk_width: usize,
}

impl HybridNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut build = |s: &Option<Vec<LayerSpec>>| -> Result<Option<Sequential>> {
            s.as_ref().map(|s| Sequential::from_specs(s, &mut rng)).transpose().map_err(Into::into)
        };
        let vol = build(&config.vol)?;
        let features = build(&config.features)?;
        let trunk = build(&config.trunk)?;
        let head = build(&config.head)?;
        let present = [vol.is_some(), features.is_some(), trunk.is_some()];
        let trunk_width = match &config.trunk {
            Some(t) => rvekit_nn::chain_shape(t, &[config.resolution, config.resolution, 1])?[0],
            None => 0,
        };
        Ok(Self {
            config,
            feature_stats: None,
            vol,
            features,
            trunk,
            head,
            trainable: present,
            contributing: present,
            trunk_width,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn has(&self, b: Branch) -> bool {
        self.config.has(b)
    }

    /// Sets which branches add to the output and which receive updates.
    pub fn set_stage(&mut self, contributing: [bool; 3], trainable: [bool; 3]) {
        for b in BRANCHES {
            let i = b as usize;
            self.contributing[i] = contributing[i] && self.has(b);
            self.trainable[i] = trainable[i] && self.contributing[i];
        }
    }

    pub fn all_branches(&mut self) {
        self.set_stage([true; 3], [true; 3]);
    }

    fn nets(&self, b: Branch) -> Vec<&Sequential> {
        match b {
            Branch::Vol => self.vol.iter().collect(),
            Branch::Features => self.features.iter().collect(),
            Branch::Image => self.trunk.iter().chain(self.head.iter()).collect(),
        }
    }

    fn nets_mut(&mut self, b: Branch) -> Vec<&mut Sequential> {
        match b {
            Branch::Vol => self.vol.iter_mut().collect(),
            Branch::Features => self.features.iter_mut().collect(),
            Branch::Image => self.trunk.iter_mut().chain(self.head.iter_mut()).collect(),
        }
    }

    /// SHA-256 of a branch's weights and running statistics.
    pub fn branch_hash(&self, b: Branch) -> Option<String> {
        let nets = self.nets(b);
        if nets.is_empty() {
            return None;
        }
        let mut h = Sha256::new();
        for net in nets {
            net.visit_state(&mut |s| s.iter().for_each(|v| h.update(v.to_le_bytes())));
        }
        Some(hex::encode(h.finalize()))
    }

    pub fn branch_hashes(&self) -> [Option<String>; 3] {
        BRANCHES.map(|b| self.branch_hash(b))
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        BRANCHES
            .iter()
            .flat_map(|&b| self.nets(b))
            .map(Sequential::state)
            .collect()
    }

    pub fn restore(&mut self, snap: &[Vec<f64>]) -> Result<()> {
        let mut it = snap.iter();
        for b in BRANCHES {
            for net in self.nets_mut(b) {
                let s = it.next().ok_or_else(|| data("snapshot has too few parts"))?;
                net.load_state(s)?;
            }
        }
        Ok(())
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        for b in BRANCHES {
            for net in self.nets_mut(b) {
                n += Parameterized::param_count(net);
            }
        }
        n
    }

    fn contrast_col(&self, s: &Samples, idx: &[usize]) -> Option<Vec<f64>> {
        self.config.contrast_input.then(|| idx.iter().map(|&i| s.contrast[i]).collect())
    }

    /// Zeroes the last dense layer of the image head, so the branch adds
    /// nothing until trained further. Earlier layers are kept.
    pub fn silence_image_output(&mut self) -> Result<()> {
        let head = self.head.as_mut().ok_or_else(|| config("model has no image branch"))?;
        let last = head.layers.iter_mut().rev().find_map(|l| match l {
            rvekit_nn::Layer::Dense(d) => Some(d),
            _ => None,
        });
        let d = last.ok_or_else(|| config("image head has no dense layer"))?;
        d.weight.fill(0.0);
        d.bias.fill(0.0);
        Ok(())
    }

    /// Inference-mode outputs of the frozen, contributing branches for every
    /// row of `s`. Valid until the weights, the stage or the images change.
    pub fn frozen_parts(&mut self, s: &Samples) -> Result<FrozenParts> {
        let mut out = FrozenParts::default();
        let stage = (self.contributing, self.trainable);
        let all: Vec<usize> = (0..s.len()).collect();
        for b in BRANCHES {
            let i = b as usize;
            if !stage.0[i] || stage.1[i] {
                continue;
            }
            self.contributing = [false; 3];
            self.contributing[i] = true;
            self.trainable = [false; 3];
            let mut chunks = Vec::new();
            for chunk in all.chunks(128) {
                match self.forward_parts(s, chunk, Mode::Eval, None) {
                    Ok(mut p) => chunks.push(p.remove(0).1),
                    Err(e) => {
                        (self.contributing, self.trainable) = stage;
                        return Err(e);
                    }
                }
            }
            let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
            out.0[i] = Some(ndarray::concatenate(Axis(0), &views).map_err(|e| data(format!("frozen outputs: {e}")))?);
        }
        (self.contributing, self.trainable) = stage;
        Ok(out)
    }

    /// Output of every contributing branch for the rows `idx`, taking frozen
    /// branches from `cache` when given.
    pub fn forward_parts(
        &mut self,
        s: &Samples,
        idx: &[usize],
        mode: Mode,
        cache: Option<&FrozenParts>,
    ) -> Result<Vec<(Branch, Array2<f64>)>> {
        let mut parts = Vec::new();
        let modes = BRANCHES.map(|b| if self.trainable[b as usize] { mode } else { Mode::Eval });
        let c = self.contrast_col(s, idx);
        let mut contributing = self.contributing;
        if let Some(cache) = cache {
            for b in BRANCHES {
                if let (true, Some(y)) = (contributing[b as usize], &cache.0[b as usize]) {
                    parts.push((b, y.select(Axis(0), idx)));
                    contributing[b as usize] = false;
                }
            }
        }
        if contributing[0] {
            let x = Array2::from_shape_fn((idx.len(), 1), |(r, _)| s.vol[idx[r]]);
            let x = append_column(x, c.clone());
            let y = self.vol.as_mut().unwrap().forward(&x.into_dyn(), modes[0])?;
            parts.push((Branch::Vol, to2(y)?));
        }
        if contributing[1] {
            let x = append_column(s.features.select(Axis(0), idx), c.clone());
            let y = self.features.as_mut().unwrap().forward(&x.into_dyn(), modes[1])?;
            parts.push((Branch::Features, to2(y)?));
        }
        if contributing[2] {
            let imgs: Vec<&RveImage> = idx.iter().map(|&i| &s.images[i]).collect();
            let t = self.trunk.as_mut().unwrap().forward(&image_tensor(&imgs), modes[2])?;
            let x = append_column(to2(t)?, c);
            let y = self.head.as_mut().unwrap().forward(&x.into_dyn(), modes[2])?;
            parts.push((Branch::Image, to2(y)?));
        }
        if parts.is_empty() {
            return Err(config("no branch contributes to the prediction"));
        }
        parts.sort_by_key(|p| p.0 as usize);
        Ok(parts)
    }

    /// Sum of the contributing branches, passed through the output map.
    pub fn forward(&mut self, s: &Samples, idx: &[usize], mode: Mode) -> Result<Array2<f64>> {
        self.forward_cached(s, idx, mode, None)
    }

    pub fn forward_cached(
        &mut self,
        s: &Samples,
        idx: &[usize],
        mode: Mode,
        cache: Option<&FrozenParts>,
    ) -> Result<Array2<f64>> {
        let parts = self.forward_parts(s, idx, mode, cache)?;
        let mut out = Array2::zeros(parts[0].1.dim());
        for (_, p) in parts {
            out += &p;
        }
        if let Some(m) = &self.config.output_map {
            for mut row in out.rows_mut() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = m.offset[c] + m.scale[c] * *v;
                }
            }
        }
        Ok(out)
    }

    /// Backpropagates into the trainable, contributing branches.
    pub fn backward(&mut self, grad: &Array2<f64>) {
        let mut g = grad.clone();
        if let Some(m) = &self.config.output_map {
            for mut row in g.rows_mut() {
                row.iter_mut().zip(&m.scale).for_each(|(v, s)| *v *= s);
            }
        }
        let g = g.into_dyn();
        if self.trainable[0] {
            self.vol.as_mut().unwrap().backward(&g, false);
        }
        if self.trainable[1] {
            self.features.as_mut().unwrap().backward(&g, false);
        }
        if self.trainable[2] {
            let dx = self.head.as_mut().unwrap().backward(&g, true).expect("input gradient requested");
            let dx = to2(dx).expect("head input is a matrix");
            let dt = dx.slice(s![.., ..self.trunk_width]).to_owned().into_dyn();
            self.trunk.as_mut().unwrap().backward(&dt, false);
        }
    }

    /// Predictions in inference mode, in chunks.
    pub fn predict(&mut self, s: &Samples) -> Result<Vec<AleatoricPrediction>> {
        s.check(&self.config)?;
        let bayes = matches!(self.config.loss, LossKind::Bayesian { .. });
        let mut out = Vec::with_capacity(s.len());
        let all: Vec<usize> = (0..s.len()).collect();
        for chunk in all.chunks(128) {
            let y = self.forward(s, chunk, Mode::Eval)?;
            for r in 0..y.nrows() {
                let mu = [y[[r, 0]], y[[r, 1]], y[[r, 2]]];
                let sigma = bayes.then(|| [3, 4, 5].map(|c| sigma_from_raw(y[[r, c]])));
                out.push(AleatoricPrediction { mu, sigma });
            }
        }
        Ok(out)
    }

    pub fn predict_mu(&mut self, s: &Samples) -> Result<Vec<[f64; 3]>> {
        Ok(self.predict(s)?.into_iter().map(|p| p.mu).collect())
    }

    /// Mean loss over all rows, inference mode.
    pub fn evaluate_loss(&mut self, s: &Samples) -> Result<f64> {
        self.evaluate_loss_with(s, false)
    }

    /// Batch loss and gradient. With `mean_only` the mean columns are scored by
    /// MSE and spread columns get no gradient.
    pub fn loss(&self, y: &Array2<f64>, t: &Array2<f64>, mean_only: bool) -> (f64, Array2<f64>) {
        if !mean_only || y.ncols() == t.ncols() {
            return self.config.loss.evaluate(y, t);
        }
        let m = t.ncols();
        let (l, g) = LossKind::Mse.evaluate(&y.slice(ndarray::s![.., ..m]).to_owned(), t);
        let mut grad = Array2::zeros(y.dim());
        grad.slice_mut(ndarray::s![.., ..m]).assign(&g);
        (l, grad)
    }

    pub fn evaluate_loss_with(&mut self, s: &Samples, mean_only: bool) -> Result<f64> {
        self.evaluate_loss_cached(s, mean_only, None)
    }

    pub fn evaluate_loss_cached(&mut self, s: &Samples, mean_only: bool, cache: Option<&FrozenParts>) -> Result<f64> {
        let all: Vec<usize> = (0..s.len()).collect();
        let mut total = 0.0;
        for chunk in all.chunks(128) {
            let y = self.forward_cached(s, chunk, Mode::Eval, cache)?;
            let (l, _) = self.loss(&y, &s.target_matrix(chunk), mean_only);
            total += l * chunk.len() as f64;
        }
        Ok(total / s.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "config": self.config,
            "feature_stats": self.feature_stats,
        });
        let mut c = Checkpoint::new(self.config.kind.name(), meta);
        for (name, net) in [
            ("vol", &self.vol),
            ("features", &self.features),
            ("trunk", &self.trunk),
            ("head", &self.head),
        ] {
            if let Some(n) = net {
                c.push(name, n);
            }
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())?;
        let kind = ModelKind::parse(&c.kind)?;
        if config.kind != kind {
            return Err(data(format!("checkpoint kind {} disagrees with its config", c.kind)));
        }
        let mut net = HybridNet::new(config.clone(), 0)?;
        net.feature_stats = serde_json::from_value(c.meta["feature_stats"].clone())?;
        let restore = |name: &str, spec: &Option<Vec<LayerSpec>>| -> Result<Option<Sequential>> {
            spec.as_ref().map(|s| c.restore(name, s)).transpose().map_err(Into::into)
        };
        net.vol = restore("vol", &config.vol)?;
        net.features = restore("features", &config.features)?;
        net.trunk = restore("trunk", &config.trunk)?;
        net.head = restore("head", &config.head)?;
        Ok(net)
    }
}

impl Parameterized for HybridNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for b in BRANCHES {
            if self.trainable[b as usize] {
                for net in self.nets_mut(b) {
                    net.visit_params(f);
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grid::{generate_rve, volume_fraction, InclusionSpec};
    use rand::Rng;

    pub(crate) fn toy_samples(cfg: &ModelConfig, rows: usize, seed: u64) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = InclusionSpec::training(cfg.resolution);
        let images: Vec<RveImage> = (0..rows).map(|i| generate_rve(&spec, seed * 1000 + i as u64).unwrap()).collect();
        let vol: Vec<f64> = images.iter().map(volume_fraction).collect();
        Samples {
            features: Array2::from_shape_fn((rows, cfg.n_features), |_| rng.gen_range(-1.0..1.0)),
            contrast: if cfg.contrast_input {
                (0..rows).map(|_| rng.gen()).collect()
            } else {
                Vec::new()
            },
            targets: vol.iter().map(|v| [1.0 - 0.5 * v, 1.0 - 0.6 * v, 0.01]).collect(),
            images: if cfg.has(Branch::Image) { images } else { Vec::new() },
            vol,
        }
    }

    #[test]
    fn kinds_round_trip_names() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.name()).unwrap(), k);
        }
        assert!(ModelKind::parse("tree").is_err());
        assert_eq!(scale_contrast(2.0), 0.0);
        assert_eq!(scale_contrast(100.0), 1.0);
    }

    #[test]
    fn decomposition_sums_to_total() {
        let cfg = ModelConfig::new(ModelKind::HybridVariable, 32, 5).unwrap();
        let mut net = HybridNet::new(cfg.clone(), 3).unwrap();
        let s = toy_samples(&cfg, 6, 1);
        let idx: Vec<usize> = (0..6).collect();
        let parts = net.forward_parts(&s, &idx, Mode::Eval, None).unwrap();
        assert_eq!(parts.len(), 3);
        let mut net_mapped = net.clone();
        net_mapped.config.output_map = Some(OutputMap {
            offset: vec![1.0, 2.0, 3.0],
            scale: vec![2.0, 0.5, 1.0],
        });
        let mapped = net_mapped.forward(&s, &idx, Mode::Eval).unwrap();
        let total = net.forward(&s, &idx, Mode::Eval).unwrap();
        for (r, row) in mapped.rows().into_iter().enumerate() {
            assert!((row[0] - (1.0 + 2.0 * total[[r, 0]])).abs() < 1e-12);
            assert!((row[1] - (2.0 + 0.5 * total[[r, 1]])).abs() < 1e-12);
        }
        let mut resid = total.clone();
        for (_, p) in &parts {
            resid -= p;
        }
        assert!(resid.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cached_frozen_outputs_match_recomputation() {
        let cfg = ModelConfig::new(ModelKind::Hybrid, 32, 4).unwrap();
        let mut net = HybridNet::new(cfg.clone(), 9).unwrap();
        let s = toy_samples(&cfg, 7, 4);
        net.set_stage([true; 3], [false, true, false]);
        let cache = net.frozen_parts(&s).unwrap();
        assert!(cache.0[0].is_some() && cache.0[1].is_none() && cache.0[2].is_some());
        let idx = [5, 0, 3];
        let mut twin = net.clone();
        let a = net.forward(&s, &idx, Mode::Eval).unwrap();
        let b = twin.forward_cached(&s, &idx, Mode::Eval, Some(&cache)).unwrap();
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(net.contributing, [true; 3]);
        assert_eq!(net.trainable, [false, true, false]);
    }

    #[test]
    fn frozen_branches_get_no_gradient() {
        let cfg = ModelConfig::new(ModelKind::Hybrid, 32, 4).unwrap();
        let mut net = HybridNet::new(cfg.clone(), 5).unwrap();
        let s = toy_samples(&cfg, 4, 2);
        net.set_stage([true; 3], [false, true, false]);
        let idx: Vec<usize> = (0..4).collect();
        let y = net.forward(&s, &idx, Mode::Train).unwrap();
        let (_, g) = cfg.loss.evaluate(&y, &s.target_matrix(&idx));
        for b in BRANCHES {
            for n in net.nets_mut(b) {
                n.zero_grad();
            }
        }
        net.backward(&g);
        let grad_norm = |net: &mut HybridNet, b: Branch| {
            let mut acc = 0.0;
            for n in net.nets_mut(b) {
                n.visit_params(&mut |_, g| acc += g.iter().map(|v| v * v).sum::<f64>());
            }
            acc
        };
        assert_eq!(grad_norm(&mut net, Branch::Vol), 0.0);
        assert_eq!(grad_norm(&mut net, Branch::Image), 0.0);
        assert!(grad_norm(&mut net, Branch::Features) > 0.0);
        let h = net.branch_hash(Branch::Vol);
        net.forward(&s, &idx, Mode::Train).unwrap();
        assert_eq!(net.branch_hash(Branch::Vol), h, "frozen batch norm statistics moved");
    }

    #[test]
    fn bnn_sigma_positive_and_checkpoint_round_trip() {
        let cfg = ModelConfig::new(ModelKind::Bnn, 16, 51).unwrap();
        assert_eq!(cfg.output_width(), 6);
        let mut net = HybridNet::new(cfg.clone(), 9).unwrap();
        assert_eq!(net.param_count(), 4997);
        let s = toy_samples(&cfg, 7, 3);
        let p = net.predict(&s).unwrap();
        assert!(p.iter().all(|q| q.sigma.unwrap().iter().all(|&v| v > 0.0)));
        let bytes = net.to_checkpoint().unwrap().to_bytes().unwrap();
        let mut back = HybridNet::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.predict(&s).unwrap(), p);
    }

    #[test]
    fn cross_kind_checkpoint_is_rejected() {
        let net = HybridNet::new(ModelConfig::new(ModelKind::Vol, 16, 51).unwrap(), 0).unwrap();
        let mut c = net.to_checkpoint().unwrap();
        c.kind = "bnn".into();
        assert!(HybridNet::from_checkpoint(&c).is_err());
    }

    #[test]
    fn missing_contrast_is_an_error() {
        let cfg = ModelConfig::new(ModelKind::HybridVariable, 16, 3).unwrap().without_image();
        let mut net = HybridNet::new(cfg.clone(), 0).unwrap();
        let mut s = toy_samples(&cfg, 3, 4);
        s.contrast.clear();
        assert!(net.predict(&s).is_err());
    }

    #[test]
    fn vol_only_parameter_count() {
        let mut net = HybridNet::new(ModelConfig::new(ModelKind::Vol, 16, 51).unwrap(), 0).unwrap();
        assert_eq!(net.param_count(), 241);
    }
}
