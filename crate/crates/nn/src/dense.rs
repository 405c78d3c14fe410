use ndarray::{Array1, Array2, ArrayD, Axis, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{NnError, Result};

/// Fully connected layer `y = x W + b` on `(batch, inputs)` arrays.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
    input: Option<Array2<f64>>,
}

impl Dense {
    /// LeCun-normal initialisation, matching SELU's self-normalising assumption.
    pub fn new<R: Rng>(inputs: usize, units: usize, rng: &mut R) -> Self {
        let scale = (1.0 / inputs.max(1) as f64).sqrt();
        let weight = Array2::from_shape_fn((inputs, units), |_| scale * rng.sample::<f64, _>(StandardNormal));
        Self::from_parts(weight, Array1::zeros(units))
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        let (i, o) = weight.dim();
        Self {
            weight,
            bias,
            grad_weight: Array2::zeros((i, o)),
            grad_bias: Array1::zeros(o),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn units(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&mut self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let x = x
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| NnError::shape("", format!("dense expects (batch, features), got {:?}", x.shape())))?;
        if x.ncols() != self.inputs() {
            return Err(NnError::shape(
                "",
                format!("dense expects {} inputs, got {}", self.inputs(), x.ncols()),
            ));
        }
        let y = x.dot(&self.weight) + &self.bias;
        self.input = Some(x.to_owned());
        Ok(y.into_dyn())
    }

    pub fn backward(&mut self, dy: &ArrayD<f64>, need_dx: bool) -> Option<ArrayD<f64>> {
        let dy = dy.view().into_dimensionality::<Ix2>().expect("dense gradient rank");
        let x = self.input.as_ref().expect("dense backward called before forward");
        self.grad_weight += &x.t().dot(&dy);
        self.grad_bias += &dy.sum_axis(Axis(0));
        need_dx.then(|| dy.dot(&self.weight.t()).into_dyn())
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice_mut().unwrap(),
        );
        f(
            self.bias.as_slice_mut().unwrap(),
            self.grad_bias.as_slice_mut().unwrap(),
        );
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.weight.as_slice().unwrap());
        f(self.bias.as_slice().unwrap());
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weight.as_slice_mut().unwrap());
        f(self.bias.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut d = Dense::from_parts(Array2::eye(3), Array1::zeros(3));
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]].into_dyn();
        let y = d.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let mut d = Dense::from_parts(Array2::eye(3), Array1::zeros(3));
        let x = array![[1.0, 2.0]].into_dyn();
        assert!(matches!(d.forward(&x), Err(NnError::Shape { .. })));
    }
}
