use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

/// Scale of the self-normalizing exponential linear unit.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Negative-branch saturation of SELU.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Selu,
    Identity,
}

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

#[inline]
pub fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActivationKind,
    input: Option<ArrayD<f64>>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, input: None }
    }

    pub fn forward(&mut self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let y = match self.kind {
            ActivationKind::Selu => x.mapv(selu),
            ActivationKind::Identity => x.clone(),
        };
        if self.kind == ActivationKind::Selu {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &ArrayD<f64>) -> ArrayD<f64> {
        match self.kind {
            ActivationKind::Identity => dy.clone(),
            ActivationKind::Selu => {
                let x = self
                    .input
                    .as_ref()
                    .expect("activation backward called before forward");
                let mut dx = dy.clone();
                Zip::from(&mut dx).and(x).for_each(|d, &x| *d *= selu_grad(x));
                dx
            }
        }
    }
}
