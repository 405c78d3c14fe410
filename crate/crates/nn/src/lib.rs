//! Small f64 neural-network engine: dense, periodic convolution, pooling, batch
//! norm and SELU layers with hand-written backpropagation, AdamW, and a
//! hashed checkpoint format.
//!
//! Image tensors use NHWC layout.

pub mod activation;
pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod pool;
pub mod network;

pub use activation::ActivationKind;
pub use checkpoint::{Checkpoint, CheckpointPart};
pub use error::{NnError, Result};
pub use loss::LossKind;
pub use network::{chain_shape, Layer, LayerSpec, Sequential};
pub use optim::{early_stop, AdamConfig, AdamW, TrainConfig};

/// Batch norm behaviour: batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything exposing trainable tensors together with their gradient buffers.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }
}
