//! Strided 2-D convolution with periodic padding on NHWC tensors.
//!
//! Output pixel `(oi, oj)` is centred on input pixel `(oi*stride, oj*stride)`
//! and the kernel offset `u` reads row `oi*stride + u - k/2` modulo the image
//! height (same for columns). A stride-1 convolution therefore preserves the
//! spatial size, and every stride must divide the spatial extent.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{NnError, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `(kernel*kernel*in_channels, out_channels)`, rows ordered `(u, v, c)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f64>,
    input_dim: (usize, usize, usize, usize),
}

/// Wrapped source indices: `table[o * k + u]` is the input row read by output `o` at offset `u`.
fn wrap_table(extent: usize, out: usize, kernel: usize, stride: usize) -> Vec<usize> {
    let half = (kernel / 2) as isize;
    let n = extent as isize;
    let mut table = Vec::with_capacity(out * kernel);
    for o in 0..out {
        for u in 0..kernel {
            let idx = (o * stride) as isize + u as isize - half;
            table.push(idx.rem_euclid(n) as usize);
        }
    }
    table
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_channels;
        let scale = (1.0 / fan_in.max(1) as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_in, out_channels), |_| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self::from_parts(in_channels, kernel, stride, weight, Array1::zeros(out_channels))
    }

    pub fn from_parts(
        in_channels: usize,
        kernel: usize,
        stride: usize,
        weight: Array2<f64>,
        bias: Array1<f64>,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_channels == 0 {
            return Err(NnError::Config(format!(
                "conv requires kernel, stride and channels >= 1 (kernel {kernel}, stride {stride}, channels {in_channels})"
            )));
        }
        if weight.nrows() != kernel * kernel * in_channels || weight.ncols() != bias.len() {
            return Err(NnError::Config("conv weight shape does not match kernel/channels".into()));
        }
        let out_channels = weight.ncols();
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            grad_weight: Array2::zeros(weight.raw_dim()),
            grad_bias: Array1::zeros(out_channels),
            weight,
            bias,
            cache: None,
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(NnError::shape(
                "",
                format!("stride {} does not divide spatial extent {h}x{w}", self.stride),
            ));
        }
        Ok((h / self.stride, w / self.stride))
    }

    pub fn forward(&mut self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let x4 = x
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| NnError::shape("", format!("conv expects NHWC input, got {:?}", x.shape())))?;
        let (b, h, w, c) = x4.dim();
        if c != self.in_channels {
            return Err(NnError::shape(
                "",
                format!("conv expects {} channels, got {c}", self.in_channels),
            ));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let k = self.kernel;
        let rows = wrap_table(h, ho, k, self.stride);
        let colsi = wrap_table(w, wo, k, self.stride);
        let kk = k * k * c;
        let xs = x4.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut cols = Array2::<f64>::zeros((b * ho * wo, kk));
        {
            let cs = cols.as_slice_mut().unwrap();
            let mut r = 0;
            for bi in 0..b {
                let base = bi * h * w * c;
                for oi in 0..ho {
                    let rt = &rows[oi * k..(oi + 1) * k];
                    for oj in 0..wo {
                        let ct = &colsi[oj * k..(oj + 1) * k];
                        let dst = &mut cs[r * kk..(r + 1) * kk];
                        let mut p = 0;
                        for &ii in rt {
                            let rowbase = base + ii * w * c;
                            for &jj in ct {
                                let src = rowbase + jj * c;
                                dst[p..p + c].copy_from_slice(&xs[src..src + c]);
                                p += c;
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
        let y = cols.dot(&self.weight) + &self.bias;
        self.cache = Some(ConvCache {
            cols,
            input_dim: (b, h, w, c),
        });
        Ok(y.into_shape((b, ho, wo, self.out_channels))
            .expect("contiguous conv output")
            .into_dyn())
    }

    pub fn backward(&mut self, dy: &ArrayD<f64>, need_dx: bool) -> Option<ArrayD<f64>> {
        let cache = self.cache.as_ref().expect("conv backward called before forward");
        let (b, h, w, c) = cache.input_dim;
        let dy = dy.as_standard_layout();
        let m = dy.len() / self.out_channels;
        let dy2 = dy
            .view()
            .into_shape((m, self.out_channels))
            .expect("conv gradient shape");
        self.grad_weight += &cache.cols.t().dot(&dy2);
        self.grad_bias += &dy2.sum_axis(Axis(0));
        if !need_dx {
            return None;
        }
        // A single output channel can make `dot` return column-major storage.
        let dcols = dy2.dot(&self.weight.t()).as_standard_layout().into_owned();
        let (ho, wo) = (h / self.stride, w / self.stride);
        let k = self.kernel;
        let rows = wrap_table(h, ho, k, self.stride);
        let colsi = wrap_table(w, wo, k, self.stride);
        let kk = k * k * c;
        let mut dx = vec![0.0; b * h * w * c];
        let ds = dcols.as_slice().unwrap();
        let mut r = 0;
        for bi in 0..b {
            let base = bi * h * w * c;
            for oi in 0..ho {
                let rt = &rows[oi * k..(oi + 1) * k];
                for oj in 0..wo {
                    let ct = &colsi[oj * k..(oj + 1) * k];
                    let src = &ds[r * kk..(r + 1) * kk];
                    let mut p = 0;
                    for &ii in rt {
                        let rowbase = base + ii * w * c;
                        for &jj in ct {
                            let dst = rowbase + jj * c;
                            for (d, s) in dx[dst..dst + c].iter_mut().zip(&src[p..p + c]) {
                                *d += s;
                            }
                            p += c;
                        }
                    }
                    r += 1;
                }
            }
        }
        Some(
            ArrayD::from_shape_vec(vec![b, h, w, c], dx).expect("conv input gradient shape"),
        )
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

    /// Drops the im2col buffer kept for backpropagation.
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
