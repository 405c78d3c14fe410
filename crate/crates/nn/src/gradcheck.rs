//! Central-difference verification of backpropagated gradients.

use ndarray::{Array2, ArrayD, Ix2};

use crate::loss::LossKind;
use crate::network::Sequential;
use crate::{Mode, Parameterized};

/// Result of a gradient check: relative error `‖a − n‖ / (‖a‖ + ‖n‖)`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.relative_error < tol
    }
}

fn relative(a: &[f64], n: &[f64]) -> GradCheck {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let an = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = an + nn;
    GradCheck {
        relative_error: if denom == 0.0 { 0.0 } else { diff / denom },
        analytic_norm: an,
        numeric_norm: nn,
    }
}

fn loss_of(net: &mut Sequential, x: &ArrayD<f64>, y: &Array2<f64>, loss: LossKind, mode: Mode) -> f64 {
    let out = net.forward(x, mode).expect("gradient check forward");
    let out = out.into_dimensionality::<Ix2>().expect("network output must be 2-D");
    loss.evaluate(&out, y).0
}

/// Compares backpropagated parameter gradients with central differences.
///
/// Batch norm layers should be checked in `Mode::Eval` or with a momentum of 1, since
/// train-mode forwards update the running statistics.
pub fn check_params(
    net: &mut Sequential,
    x: &ArrayD<f64>,
    y: &Array2<f64>,
    loss: LossKind,
    mode: Mode,
    h: f64,
) -> GradCheck {
    net.zero_grad();
    let out = net.forward(x, mode).expect("gradient check forward");
    let out = out.into_dimensionality::<Ix2>().expect("network output must be 2-D");
    let (_, g) = loss.evaluate(&out, y);
    net.backward(&g.into_dyn(), false);
    let mut analytic = Vec::new();
    net.visit_params(&mut |_, g| analytic.extend_from_slice(g));

    let total = analytic.len();
    let mut numeric = Vec::with_capacity(total);
    for k in 0..total {
        let orig = nudge(net, k, None);
        nudge(net, k, Some(orig + h));
        let lp = loss_of(net, x, y, loss, mode);
        nudge(net, k, Some(orig - h));
        let lm = loss_of(net, x, y, loss, mode);
        nudge(net, k, Some(orig));
        numeric.push((lp - lm) / (2.0 * h));
    }
    relative(&analytic, &numeric)
}

/// Compares the input gradient with central differences.
pub fn check_input(
    net: &mut Sequential,
    x: &ArrayD<f64>,
    y: &Array2<f64>,
    loss: LossKind,
    mode: Mode,
    h: f64,
) -> GradCheck {
    net.zero_grad();
    let out = net.forward(x, mode).expect("gradient check forward");
    let out = out.into_dimensionality::<Ix2>().expect("network output must be 2-D");
    let (_, g) = loss.evaluate(&out, y);
    let dx = net.backward(&g.into_dyn(), true).expect("input gradient");
    let analytic: Vec<f64> = dx.iter().copied().collect();
    let mut xv = x.as_standard_layout().into_owned();
    let mut numeric = Vec::with_capacity(xv.len());
    for k in 0..xv.len() {
        let orig = xv.as_slice().unwrap()[k];
        xv.as_slice_mut().unwrap()[k] = orig + h;
        let lp = loss_of(net, &xv, y, loss, mode);
        xv.as_slice_mut().unwrap()[k] = orig - h;
        let lm = loss_of(net, &xv, y, loss, mode);
        xv.as_slice_mut().unwrap()[k] = orig;
        numeric.push((lp - lm) / (2.0 * h));
    }
    relative(&analytic, &numeric)
}

/// Reads (and optionally overwrites) the `k`-th trainable scalar in visit order.
fn nudge(net: &mut Sequential, k: usize, value: Option<f64>) -> f64 {
    let mut off = 0;
    let mut found = f64::NAN;
    net.visit_params(&mut |p, _| {
        if k >= off && k < off + p.len() {
            found = p[k - off];
            if let Some(v) = value {
                p[k - off] = v;
            }
        }
        off += p.len();
    });
    found
}
