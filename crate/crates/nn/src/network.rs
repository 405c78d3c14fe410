//! Layer topology, sequential networks and channel concatenation.

use ndarray::{ArrayD, Axis, Slice};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{Activation, ActivationKind};
use crate::conv::Conv2d;
use crate::dense::Dense;
use crate::error::{NnError, Result};
use crate::norm::BatchNorm;
use crate::pool::{Pool, PoolKind};
use crate::{Mode, Parameterized};

/// Weight-free description of a layer; the checkpoint topology header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        units: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        size: usize,
        stride: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    BatchNorm {
        features: usize,
        momentum: f64,
        eps: f64,
    },
    Activation {
        function: ActivationKind,
    },
    /// Parallel branches on a shared input, concatenated along the last axis.
    Concat {
        branches: Vec<Vec<LayerSpec>>,
    },
}

impl LayerSpec {
    pub fn dense(inputs: usize, units: usize) -> Self {
        LayerSpec::Dense { inputs, units }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn batch_norm(features: usize) -> Self {
        LayerSpec::BatchNorm {
            features,
            momentum: crate::norm::DEFAULT_MOMENTUM,
            eps: crate::norm::DEFAULT_EPS,
        }
    }

    pub fn selu() -> Self {
        LayerSpec::Activation {
            function: ActivationKind::Selu,
        }
    }

    /// Output shape (without the batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |stride: usize| -> Result<Vec<usize>> {
            match input {
                [h, w, c] => {
                    if h % stride != 0 || w % stride != 0 {
                        Err(NnError::shape(
                            "",
                            format!("stride {stride} does not divide spatial extent {h}x{w}"),
                        ))
                    } else {
                        Ok(vec![h / stride, w / stride, *c])
                    }
                }
                _ => Err(NnError::shape("", format!("expected (h, w, c) input, got {input:?}"))),
            }
        };
        match *self {
            LayerSpec::Dense { inputs, units } => match input {
                [n] if *n == inputs => Ok(vec![units]),
                _ => Err(NnError::shape(
                    "",
                    format!("dense expects ({inputs},) input, got {input:?}"),
                )),
            },
            LayerSpec::Conv {
                in_channels,
                out_channels,
                stride,
                ..
            } => {
                if input.len() != 3 || input[2] != in_channels {
                    return Err(NnError::shape(
                        "",
                        format!("conv expects (h, w, {in_channels}) input, got {input:?}"),
                    ));
                }
                let mut s = spatial(stride)?;
                s[2] = out_channels;
                Ok(s)
            }
            LayerSpec::AvgPool { stride, .. } | LayerSpec::MaxPool { stride, .. } => spatial(stride),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::BatchNorm { features, .. } => {
                if input.last() != Some(&features) {
                    return Err(NnError::shape(
                        "",
                        format!("batch norm expects {features} features, got {input:?}"),
                    ));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::Concat { ref branches } => {
                let mut out: Option<Vec<usize>> = None;
                for (b, branch) in branches.iter().enumerate() {
                    let s = chain_shape(branch, input).map_err(|e| e.nest(format!("branch{b}")))?;
                    out = Some(match out {
                        None => s,
                        Some(mut acc) => {
                            if acc.len() != s.len() || acc[..acc.len() - 1] != s[..s.len() - 1] {
                                return Err(NnError::shape(
                                    "",
                                    format!("branch{b} output {s:?} cannot be concatenated with {acc:?}"),
                                ));
                            }
                            *acc.last_mut().unwrap() += s.last().unwrap();
                            acc
                        }
                    });
                }
                out.ok_or_else(|| NnError::Config("concat without branches".into()))
            }
        }
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, units } => inputs * units + units,
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => kernel * kernel * in_channels * out_channels + out_channels,
            LayerSpec::BatchNorm { features, .. } => 2 * features,
            LayerSpec::Concat { ref branches } => branches
                .iter()
                .flat_map(|b| b.iter())
                .map(LayerSpec::param_count)
                .sum(),
            _ => 0,
        }
    }
}

/// Shape propagation through a chain of layers, with layer-indexed diagnostics.
pub fn chain_shape(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, s) in specs.iter().enumerate() {
        shape = s.output_shape(&shape).map_err(|e| e.nest(i))?;
    }
    Ok(shape)
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    Pool(Pool),
    Flatten(Option<Vec<usize>>),
    BatchNorm(BatchNorm),
    Activation(Activation),
    Concat(Vec<Sequential>, Vec<usize>),
}

impl Layer {
    pub fn from_spec<R: Rng>(spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        Ok(match *spec {
            LayerSpec::Dense { inputs, units } => Layer::Dense(Dense::new(inputs, units, rng)),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => Layer::Conv(Conv2d::new(in_channels, out_channels, kernel, stride, rng)?),
            LayerSpec::AvgPool { size, stride } => Layer::Pool(Pool::new(PoolKind::Avg, size, stride)?),
            LayerSpec::MaxPool { size, stride } => Layer::Pool(Pool::new(PoolKind::Max, size, stride)?),
            LayerSpec::Flatten => Layer::Flatten(None),
            LayerSpec::BatchNorm {
                features,
                momentum,
                eps,
            } => Layer::BatchNorm(BatchNorm::new(features, momentum, eps)),
            LayerSpec::Activation { function } => Layer::Activation(Activation::new(function)),
            LayerSpec::Concat { ref branches } => {
                if branches.is_empty() {
                    return Err(NnError::Config("concat without branches".into()));
                }
                let bs = branches
                    .iter()
                    .map(|b| Sequential::from_specs(b, rng))
                    .collect::<Result<Vec<_>>>()?;
                Layer::Concat(bs, Vec::new())
            }
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::dense(d.inputs(), d.units()),
            Layer::Conv(c) => LayerSpec::conv(c.in_channels, c.out_channels, c.kernel, c.stride),
            Layer::Pool(p) => match p.kind {
                PoolKind::Avg => LayerSpec::AvgPool {
                    size: p.size,
                    stride: p.stride,
                },
                PoolKind::Max => LayerSpec::MaxPool {
                    size: p.size,
                    stride: p.stride,
                },
            },
            Layer::Flatten(_) => LayerSpec::Flatten,
            Layer::BatchNorm(b) => LayerSpec::BatchNorm {
                features: b.features(),
                momentum: b.momentum,
                eps: b.eps,
            },
            Layer::Activation(a) => LayerSpec::Activation { function: a.kind },
            Layer::Concat(bs, _) => LayerSpec::Concat {
                branches: bs.iter().map(Sequential::specs).collect(),
            },
        }
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode) -> Result<ArrayD<f64>> {
        match self {
            Layer::Dense(d) => d.forward(x),
            Layer::Conv(c) => c.forward(x),
            Layer::Pool(p) => p.forward(x),
            Layer::Flatten(shape) => {
                let s = x.shape();
                if s.is_empty() {
                    return Err(NnError::shape("", "flatten of a scalar"));
                }
                *shape = Some(s.to_vec());
                let b = s[0];
                let rest = s[1..].iter().product::<usize>();
                Ok(x.as_standard_layout()
                    .into_owned()
                    .into_shape(vec![b, rest])
                    .expect("flatten reshape"))
            }
            Layer::BatchNorm(b) => b.forward(x, mode),
            Layer::Activation(a) => Ok(a.forward(x)),
            Layer::Concat(branches, widths) => {
                let outs = branches
                    .iter_mut()
                    .enumerate()
                    .map(|(i, b)| b.forward(x, mode).map_err(|e| e.nest(format!("branch{i}"))))
                    .collect::<Result<Vec<_>>>()?;
                let last = outs[0].ndim() - 1;
                for (i, o) in outs.iter().enumerate() {
                    if o.ndim() != last + 1 || o.shape()[..last] != outs[0].shape()[..last] {
                        return Err(NnError::shape(
                            "",
                            format!(
                                "branch{i} output {:?} cannot be concatenated with {:?}",
                                o.shape(),
                                outs[0].shape()
                            ),
                        ));
                    }
                }
                *widths = outs.iter().map(|o| o.shape()[last]).collect();
                let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
                Ok(ndarray::concatenate(Axis(last), &views).expect("concat shapes checked"))
            }
        }
    }

    pub fn backward(&mut self, dy: &ArrayD<f64>, need_dx: bool) -> Option<ArrayD<f64>> {
        match self {
            Layer::Dense(d) => d.backward(dy, need_dx),
            Layer::Conv(c) => c.backward(dy, need_dx),
            Layer::Pool(p) => Some(p.backward(dy)),
            Layer::Flatten(shape) => Some(
                dy.as_standard_layout()
                    .into_owned()
                    .into_shape(shape.clone().expect("flatten backward before forward"))
                    .expect("flatten gradient"),
            ),
            Layer::BatchNorm(b) => Some(b.backward(dy)),
            Layer::Activation(a) => Some(a.backward(dy)),
            Layer::Concat(branches, widths) => {
                let last = dy.ndim() - 1;
                let mut start = 0;
                let mut acc: Option<ArrayD<f64>> = None;
                for (b, &w) in branches.iter_mut().zip(widths.iter()) {
                    let part = dy
                        .slice_axis(Axis(last), Slice::from(start..start + w))
                        .to_owned();
                    start += w;
                    if let Some(dx) = b.backward(&part, need_dx) {
                        acc = Some(match acc {
                            None => dx,
                            Some(a) => a + dx,
                        });
                    }
                }
                acc
            }
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        match self {
            Layer::Dense(d) => d.visit_params(f),
            Layer::Conv(c) => c.visit_params(f),
            Layer::BatchNorm(b) => b.visit_params(f),
            Layer::Concat(bs, _) => bs.iter_mut().for_each(|b| b.visit_params(f)),
            _ => {}
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            Layer::Dense(d) => d.visit_state(f),
            Layer::Conv(c) => c.visit_state(f),
            Layer::BatchNorm(b) => b.visit_state(f),
            Layer::Concat(bs, _) => bs.iter().for_each(|b| b.visit_state(f)),
            _ => {}
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            Layer::Dense(d) => d.visit_state_mut(f),
            Layer::Conv(c) => c.visit_state_mut(f),
            Layer::BatchNorm(b) => b.visit_state_mut(f),
            Layer::Concat(bs, _) => bs.iter_mut().for_each(|b| b.visit_state_mut(f)),
            _ => {}
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Layer::Conv(c) => c.clear_cache(),
            Layer::Concat(bs, _) => bs.iter_mut().for_each(Sequential::clear_cache),
            _ => {}
        }
    }
}

/// A chain of layers evaluated in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn from_specs<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| Layer::from_spec(s, rng).map_err(|e| e.nest(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode) -> Result<ArrayD<f64>> {
        let mut cur: Option<ArrayD<f64>> = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let input = cur.as_ref().unwrap_or(x);
            cur = Some(layer.forward(input, mode).map_err(|e| e.nest(i))?);
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward(&mut self, dy: &ArrayD<f64>, need_dx: bool) -> Option<ArrayD<f64>> {
        let mut grad = dy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            grad = layer.backward(&grad, i > 0 || need_dx)?;
        }
        need_dx.then_some(grad)
    }

    pub fn state_len(&self) -> usize {
        let mut n = 0;
        self.visit_state(&mut |s| n += s.len());
        n
    }

    pub fn state(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.state_len());
        self.visit_state(&mut |s| v.extend_from_slice(s));
        v
    }

    pub fn load_state(&mut self, state: &[f64]) -> Result<()> {
        let expected = self.state_len();
        if expected != state.len() {
            return Err(NnError::Topology(format!(
                "expected {expected} stored values, got {}",
                state.len()
            )));
        }
        let mut off = 0;
        self.visit_state_mut(&mut |s| {
            s.copy_from_slice(&state[off..off + s.len()]);
            off += s.len();
        });
        Ok(())
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit_state(f));
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_state_mut(f));
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }
}

impl Parameterized for Sequential {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_params(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn shape_chain_reports_layer_index() {
        let specs = vec![LayerSpec::dense(4, 3), LayerSpec::selu(), LayerSpec::dense(5, 2)];
        let err = chain_shape(&specs, &[4]).unwrap_err();
        match err {
            NnError::Shape { layer, .. } => assert_eq!(layer, "2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn forward_error_names_nested_layer() {
        let specs = vec![LayerSpec::Concat {
            branches: vec![vec![LayerSpec::conv(1, 2, 3, 1)], vec![LayerSpec::conv(1, 2, 3, 3)]],
        }];
        let mut net = Sequential::from_specs(&specs, &mut rng()).unwrap();
        let x = Array4::<f64>::zeros((1, 8, 8, 1)).into_dyn();
        match net.forward(&x, Mode::Eval).unwrap_err() {
            NnError::Shape { layer, .. } => assert!(layer.starts_with("0/branch1/0"), "{layer}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concat_stacks_channels() {
        let specs = vec![LayerSpec::Concat {
            branches: vec![
                vec![LayerSpec::conv(1, 2, 3, 2)],
                vec![LayerSpec::AvgPool { size: 2, stride: 2 }, LayerSpec::conv(1, 3, 1, 1)],
            ],
        }];
        assert_eq!(chain_shape(&specs, &[8, 8, 1]).unwrap(), vec![4, 4, 5]);
        let mut net = Sequential::from_specs(&specs, &mut rng()).unwrap();
        let y = net
            .forward(&Array4::<f64>::ones((2, 8, 8, 1)).into_dyn(), Mode::Train)
            .unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 5]);
    }

    #[test]
    fn state_round_trip() {
        let specs = vec![LayerSpec::dense(3, 4), LayerSpec::batch_norm(4), LayerSpec::dense(4, 1)];
        let mut a = Sequential::from_specs(&specs, &mut rng()).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i + 2 * j) as f64).into_dyn();
        a.forward(&x, Mode::Train).unwrap();
        let mut b = Sequential::from_specs(&specs, &mut rand_chacha::ChaCha8Rng::seed_from_u64(99)).unwrap();
        b.load_state(&a.state()).unwrap();
        assert_eq!(a.forward(&x, Mode::Eval).unwrap(), b.forward(&x, Mode::Eval).unwrap());
        assert!(b.load_state(&[0.0; 3]).is_err());
    }

    #[test]
    fn param_count_matches_visit() {
        let specs = vec![
            LayerSpec::conv(1, 4, 3, 1),
            LayerSpec::Flatten,
            LayerSpec::dense(64, 3),
            LayerSpec::batch_norm(3),
        ];
        let mut net = Sequential::from_specs(&specs, &mut rng()).unwrap();
        let mut n = 0;
        net.visit_params(&mut |p, _| n += p.len());
        assert_eq!(n, specs.iter().map(LayerSpec::param_count).sum::<usize>());
    }
}
