use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::error::{NnError, Result};
use crate::Mode;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-3;

/// Batch normalisation over the last axis (features, or channels for NHWC maps).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    grad_gamma: Array1<f64>,
    grad_beta: Array1<f64>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    shape: Vec<usize>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(features: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum,
            eps,
            grad_gamma: Array1::zeros(features),
            grad_beta: Array1::zeros(features),
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode) -> Result<ArrayD<f64>> {
        let shape = x.shape().to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c != self.features() {
            return Err(NnError::shape(
                "",
                format!("batch norm expects {} features on the last axis, got {c}", self.features()),
            ));
        }
        let m = x.len() / c;
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape((m, c))
            .expect("batch norm reshape");
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x2.mean_axis(Axis(0)).expect("non-empty batch");
                let var = x2.var_axis(Axis(0), 0.0);
                self.running_mean = &self.running_mean * self.momentum + &mean * (1.0 - self.momentum);
                self.running_var = &self.running_var * self.momentum + &var * (1.0 - self.momentum);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (x2 - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        self.cache = Some(BnCache {
            shape: shape.clone(),
            xhat,
            inv_std,
            mode,
        });
        Ok(y.into_shape(shape).expect("batch norm output").into_dyn())
    }

    pub fn backward(&mut self, dy: &ArrayD<f64>) -> ArrayD<f64> {
        let cache = self.cache.as_ref().expect("batch norm backward called before forward");
        let c = self.features();
        let m = dy.len() / c;
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape((m, c))
            .expect("batch norm gradient reshape");
        self.grad_gamma += &(&dy2 * &cache.xhat).sum_axis(Axis(0));
        self.grad_beta += &dy2.sum_axis(Axis(0));
        let dxhat = &dy2 * &self.gamma;
        let dx = match cache.mode {
            Mode::Eval => dxhat * &cache.inv_std,
            Mode::Train => {
                let mf = m as f64;
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let centred = dxhat * mf - &sum_d - &(&cache.xhat * &sum_dx);
                centred * &(&cache.inv_std / mf)
            }
        };
        dx.into_shape(cache.shape.clone()).expect("batch norm input gradient").into_dyn()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(
            self.gamma.as_slice_mut().unwrap(),
            self.grad_gamma.as_slice_mut().unwrap(),
        );
        f(
            self.beta.as_slice_mut().unwrap(),
            self.grad_beta.as_slice_mut().unwrap(),
        );
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.gamma.as_slice().unwrap());
        f(self.beta.as_slice().unwrap());
        f(self.running_mean.as_slice().unwrap());
        f(self.running_var.as_slice().unwrap());
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.gamma.as_slice_mut().unwrap());
        f(self.beta.as_slice_mut().unwrap());
        f(self.running_mean.as_slice_mut().unwrap());
        f(self.running_var.as_slice_mut().unwrap());
    }
}
