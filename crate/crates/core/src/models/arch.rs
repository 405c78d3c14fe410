//! Layer recipes for the four model families and receptive-field bookkeeping.

use rvekit_nn::{chain_shape, LayerSpec};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

fn dense_selu_bn(inputs: usize, units: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::dense(inputs, units),
        LayerSpec::selu(),
        LayerSpec::batch_norm(units),
    ]
}

/// Dense stack: SELU + batch norm after every hidden layer, identity output.
pub fn regressor(inputs: usize, hidden: &[usize], outputs: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut width = inputs;
    for &h in hidden {
        specs.extend(dense_selu_bn(width, h));
        width = h;
    }
    specs.push(LayerSpec::dense(width, outputs));
    specs
}

pub const VOL_HIDDEN: [usize; 3] = [12, 8, 5];
pub const FEATURE_HIDDEN: [usize; 3] = [45, 32, 25];
pub const IMAGE_HIDDEN: [usize; 4] = [32, 32, 16, 16];

/// Volume-fraction bypass; 241 trainable parameters for one input and three outputs.
pub fn build_vol(inputs: usize, outputs: usize) -> Vec<LayerSpec> {
    regressor(inputs, &VOL_HIDDEN, outputs)
}

/// Feature regressor; with a six-wide output this is the Bayesian network.
pub fn build_bnn(inputs: usize, outputs: usize) -> Vec<LayerSpec> {
    regressor(inputs, &FEATURE_HIDDEN, outputs)
}

pub fn param_count(specs: &[LayerSpec]) -> usize {
    specs.iter().map(LayerSpec::param_count).sum()
}

/// Receptive field after one layer: `(size, jump)` in input pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub layer: String,
    pub output: Vec<usize>,
    pub jump: usize,
    pub field: usize,
}

fn window(spec: &LayerSpec) -> Option<(usize, usize)> {
    match *spec {
        LayerSpec::Conv { kernel, stride, .. } => Some((kernel, stride)),
        LayerSpec::AvgPool { size, stride } | LayerSpec::MaxPool { size, stride } => Some((size, stride)),
        _ => None,
    }
}

fn label(spec: &LayerSpec) -> String {
    match *spec {
        LayerSpec::Conv {
            kernel,
            stride,
            out_channels,
            ..
        } => format!("conv {kernel}/{stride}x{out_channels}"),
        LayerSpec::AvgPool { size, stride } => format!("avgpool {size}/{stride}"),
        LayerSpec::MaxPool { size, stride } => format!("maxpool {size}/{stride}"),
        LayerSpec::Dense { units, .. } => format!("dense {units}"),
        LayerSpec::Flatten => "flatten".into(),
        LayerSpec::BatchNorm { .. } => "batch norm".into(),
        LayerSpec::Activation { function } => format!("{function:?}").to_lowercase(),
        LayerSpec::Concat { ref branches } => format!("concat {}", branches.len()),
    }
}

/// Per-layer receptive field of a chain on an `n x n x c` input:
/// `field += (k - 1) * jump`, `jump *= stride`.
pub fn receptive_fields(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<FieldRow>> {
    let mut rows = Vec::new();
    let mut shape = input.to_vec();
    let (mut field, mut jump) = (1usize, 1usize);
    for s in specs {
        shape = s.output_shape(&shape).map_err(|e| config(e.to_string()))?;
        if let Some((k, st)) = window(s) {
            field += (k - 1) * jump;
            jump *= st;
        }
        rows.push(FieldRow {
            layer: label(s),
            output: shape.clone(),
            jump,
            field,
        });
    }
    Ok(rows)
}

/// Cumulative stride of a chain.
pub fn downsampling(specs: &[LayerSpec]) -> usize {
    specs.iter().filter_map(window).map(|(_, s)| s).product()
}

/// Receptive field of the first convolution in a branch, in input pixels.
pub fn first_conv_field(specs: &[LayerSpec]) -> Option<usize> {
    let (mut field, mut jump) = (1usize, 1usize);
    for s in specs {
        if let Some((k, st)) = window(s) {
            field += (k - 1) * jump;
            jump *= st;
            if matches!(s, LayerSpec::Conv { .. }) {
                return Some(field);
            }
        }
    }
    None
}

/// Parallel branches on one input, concatenated along channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepInceptionSpec {
    pub branches: Vec<Vec<LayerSpec>>,
}

impl DeepInceptionSpec {
    pub fn factor(&self) -> Option<usize> {
        self.branches.first().map(|b| downsampling(b))
    }

    pub fn out_channels(&self, channels_in: usize) -> usize {
        self.branches
            .iter()
            .map(|b| {
                b.iter().fold(channels_in, |c, s| match *s {
                    LayerSpec::Conv { out_channels, .. } => out_channels,
                    _ => c,
                })
            })
            .sum()
    }
}

/// Checks equal downsampling across branches and returns the module as one layer.
pub fn build_deep_inception(spec: &DeepInceptionSpec, input: &[usize]) -> Result<LayerSpec> {
    if spec.branches.is_empty() {
        return Err(config("inception module without branches"));
    }
    let factors: Vec<usize> = spec.branches.iter().map(|b| downsampling(b)).collect();
    if factors.iter().any(|&f| f != factors[0]) {
        return Err(config(format!(
            "inception branches downsample by {factors:?}; all must match"
        )));
    }
    let layer = LayerSpec::Concat {
        branches: spec.branches.clone(),
    };
    layer.output_shape(input).map_err(|e| config(e.to_string()))?;
    Ok(layer)
}

fn conv(cin: usize, cout: usize, k: usize, s: usize) -> [LayerSpec; 2] {
    [LayerSpec::conv(cin, cout, k, s), LayerSpec::selu()]
}

fn chain<const N: usize>(parts: Vec<[LayerSpec; N]>) -> Vec<LayerSpec> {
    parts.into_iter().flatten().collect()
}

/// Desk modules: both downsample by 16. The first module pairs a raw-image
/// branch (first conv sees 5 px) with a coarse-grained one (25 px); the
/// second works at intermediate scales.
pub fn desk_inception_modules(width: usize) -> [DeepInceptionSpec; 2] {
    let w = width;
    let a_fine = chain(vec![conv(1, w, 5, 4), conv(w, w, 3, 2)])
        .into_iter()
        .chain([LayerSpec::MaxPool { size: 2, stride: 2 }])
        .collect();
    let a_coarse = [LayerSpec::AvgPool { size: 9, stride: 4 }]
        .into_iter()
        .chain(chain(vec![conv(1, w, 5, 2), conv(w, w, 3, 2)]))
        .collect();
    let b_mid = [LayerSpec::AvgPool { size: 2, stride: 2 }]
        .into_iter()
        .chain(chain(vec![conv(1, w, 5, 2), conv(w, w, 3, 4)]))
        .collect();
    let b_wide = [LayerSpec::AvgPool { size: 4, stride: 4 }]
        .into_iter()
        .chain(conv(1, w, 3, 2))
        .chain([LayerSpec::MaxPool { size: 2, stride: 2 }])
        .collect();
    [
        DeepInceptionSpec {
            branches: vec![a_fine, a_coarse],
        },
        DeepInceptionSpec {
            branches: vec![b_mid, b_wide],
        },
    ]
}

pub const INCEPTION_WIDTH: usize = 8;

/// Image trunk: the two modules side by side on the input, then flattened.
/// Returns the trunk and its flattened width.
pub fn build_inception_trunk(resolution: usize) -> Result<(Vec<LayerSpec>, usize)> {
    let input = [resolution, resolution, 1];
    let modules = desk_inception_modules(INCEPTION_WIDTH);
    let layers = modules
        .iter()
        .map(|m| build_deep_inception(m, &input).map(|l| vec![l]))
        .collect::<Result<Vec<_>>>()?;
    let trunk = vec![LayerSpec::Concat { branches: layers }, LayerSpec::Flatten];
    let out = chain_shape(&trunk, &input).map_err(|e| config(e.to_string()))?;
    Ok((trunk, out[0]))
}

/// Regressor following an image trunk.
pub fn build_image_head(inputs: usize, outputs: usize) -> Vec<LayerSpec> {
    regressor(inputs, &IMAGE_HIDDEN, outputs)
}

/// Plain Conv Net rescaled to the desk: strides that would not divide the
/// extent become 2 or 1 and one pooling stage less is needed per halving.
/// Requires a resolution divisible by 128.
pub fn build_generic_convnet_trunk(resolution: usize) -> Result<(Vec<LayerSpec>, usize)> {
    if resolution == 0 || resolution % 128 != 0 {
        return Err(config(format!(
            "generic conv net needs a resolution divisible by 128, got {resolution}"
        )));
    }
    let mp = || LayerSpec::MaxPool { size: 2, stride: 2 };
    let mut t = vec![LayerSpec::AvgPool { size: 2, stride: 2 }];
    t.extend(conv(1, 32, 11, 2));
    t.push(mp());
    t.extend(conv(32, 32, 7, 1));
    t.push(mp());
    t.extend(conv(32, 64, 5, 1));
    t.push(mp());
    t.extend(conv(64, 64, 3, 1));
    t.push(mp());
    t.extend(conv(64, 96, 3, 1));
    t.push(mp());
    t.push(LayerSpec::Flatten);
    let out = chain_shape(&t, &[resolution, resolution, 1]).map_err(|e| config(e.to_string()))?;
    Ok((t, out[0]))
}

pub fn build_generic_convnet_head(inputs: usize, outputs: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut width = inputs;
    for h in [100, 70, 50] {
        specs.extend(dense_selu_bn(width, h));
        width = h;
    }
    specs.push(LayerSpec::dense(width, 30));
    specs.push(LayerSpec::selu());
    specs.push(LayerSpec::dense(30, outputs));
    specs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_by_hand() {
        // 1*12+12 + 24 + 12*8+8 + 16 + 8*5+5 + 10 + 5*3+3
        assert_eq!(param_count(&build_vol(1, 3)), 241);
        // 51*45+45 + 90 + 45*32+32 + 64 + 32*25+25 + 50 + 25*6+6
        assert_eq!(param_count(&build_bnn(51, 6)), 4997);
        assert_eq!(chain_shape(&build_bnn(51, 6), &[51]).unwrap(), vec![6]);
    }

    #[test]
    fn inception_factor_check() {
        let ok = DeepInceptionSpec {
            branches: vec![
                vec![LayerSpec::conv(1, 2, 3, 4)],
                vec![LayerSpec::AvgPool { size: 2, stride: 2 }, LayerSpec::conv(1, 2, 3, 2)],
            ],
        };
        assert_eq!(build_deep_inception(&ok, &[16, 16, 1]).unwrap().output_shape(&[16, 16, 1]).unwrap(), vec![4, 4, 4]);
        let bad = DeepInceptionSpec {
            branches: vec![vec![LayerSpec::conv(1, 2, 3, 4)], vec![LayerSpec::conv(1, 2, 3, 2)]],
        };
        assert!(build_deep_inception(&bad, &[16, 16, 1]).is_err());
    }

    #[test]
    fn desk_modules_reach_8x8_with_expected_fields() {
        let modules = desk_inception_modules(INCEPTION_WIDTH);
        for m in &modules {
            assert_eq!(m.factor(), Some(16));
            let layer = build_deep_inception(m, &[128, 128, 1]).unwrap();
            assert_eq!(layer.output_shape(&[128, 128, 1]).unwrap(), vec![8, 8, 16]);
        }
        let fields: Vec<usize> = modules[0].branches.iter().map(|b| first_conv_field(b).unwrap()).collect();
        assert_eq!(fields, vec![5, 25]);
        // Whole-branch fields by the composition rule.
        let rf = |b: &[LayerSpec]| receptive_fields(b, &[128, 128, 1]).unwrap().last().unwrap().field;
        assert_eq!(rf(&modules[0].branches[0]), 5 + 2 * 4 + 8);
        assert_eq!(rf(&modules[0].branches[1]), 25 + 2 * 8);
        let (_, width) = build_inception_trunk(128).unwrap();
        assert_eq!(width, 8 * 8 * 32);
    }

    #[test]
    fn generic_convnet_shapes() {
        let (trunk, width) = build_generic_convnet_trunk(128).unwrap();
        assert_eq!(width, 96);
        let rows = receptive_fields(&trunk, &[128, 128, 1]).unwrap();
        assert_eq!(rows.len(), trunk.len());
        assert_eq!(rows.last().unwrap().jump, 128);
        // avgpool 2/2 then conv 11/2: 2 + 10 * 2.
        assert_eq!(rows[1].field, 22);
        let head = build_generic_convnet_head(width, 3);
        assert_eq!(chain_shape(&head, &[width]).unwrap(), vec![3]);
        assert!(build_generic_convnet_trunk(100).is_err());
    }
}
