//! Average and max pooling on NHWC tensors with periodic windows.
//!
//! Window `o` along an axis covers input indices
//! `o*stride - (size-stride)/2 .. + size`, wrapped modulo the extent. When
//! `size == stride` this is the usual exact tiling.

use ndarray::{ArrayD, Ix4};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone)]
pub struct Pool {
    pub kind: PoolKind,
    pub size: usize,
    pub stride: usize,
    input_dim: Option<(usize, usize, usize, usize)>,
    /// Flat input index selected by every output element (max pooling only).
    argmax: Vec<usize>,
}

fn window_table(extent: usize, out: usize, size: usize, stride: usize) -> Vec<usize> {
    let off = (size as isize - stride as isize).div_euclid(2);
    let n = extent as isize;
    let mut t = Vec::with_capacity(out * size);
    for o in 0..out {
        for u in 0..size {
            t.push(((o * stride) as isize - off + u as isize).rem_euclid(n) as usize);
        }
    }
    t
}

impl Pool {
    pub fn new(kind: PoolKind, size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(NnError::Config(format!(
                "pooling requires size and stride >= 1 (size {size}, stride {stride})"
            )));
        }
        Ok(Self {
            kind,
            size,
            stride,
            input_dim: None,
            argmax: Vec::new(),
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(NnError::shape(
                "",
                format!(
                    "pooling stride {} does not tile spatial extent {h}x{w}",
                    self.stride
                ),
            ));
        }
        Ok((h / self.stride, w / self.stride))
    }

    pub fn forward(&mut self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let x4 = x
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| NnError::shape("", format!("pooling expects NHWC input, got {:?}", x.shape())))?;
        let (b, h, w, c) = x4.dim();
        let (ho, wo) = self.output_hw(h, w)?;
        let p = self.size;
        let rows = window_table(h, ho, p, self.stride);
        let colsi = window_table(w, wo, p, self.stride);
        let xs = x4.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut out = vec![0.0; b * ho * wo * c];
        let track = self.kind == PoolKind::Max;
        self.argmax.clear();
        if track {
            self.argmax.resize(out.len(), 0);
        }
        let inv = 1.0 / (p * p) as f64;
        for bi in 0..b {
            let base = bi * h * w * c;
            for oi in 0..ho {
                for oj in 0..wo {
                    let obase = ((bi * ho + oi) * wo + oj) * c;
                    for ch in 0..c {
                        match self.kind {
                            PoolKind::Avg => {
                                let mut acc = 0.0;
                                for &ii in &rows[oi * p..(oi + 1) * p] {
                                    for &jj in &colsi[oj * p..(oj + 1) * p] {
                                        acc += xs[base + (ii * w + jj) * c + ch];
                                    }
                                }
                                out[obase + ch] = acc * inv;
                            }
                            PoolKind::Max => {
                                let mut best = f64::NEG_INFINITY;
                                let mut arg = usize::MAX;
                                for &ii in &rows[oi * p..(oi + 1) * p] {
                                    for &jj in &colsi[oj * p..(oj + 1) * p] {
                                        let idx = base + (ii * w + jj) * c + ch;
                                        let v = xs[idx];
                                        // Ties keep the first (lowest) index scanned.
                                        if v > best || (v == best && idx < arg) {
                                            best = v;
                                            arg = idx;
                                        }
                                    }
                                }
                                out[obase + ch] = best;
                                self.argmax[obase + ch] = arg;
                            }
                        }
                    }
                }
            }
        }
        self.input_dim = Some((b, h, w, c));
        Ok(ArrayD::from_shape_vec(vec![b, ho, wo, c], out).expect("pool output shape"))
    }

    pub fn backward(&mut self, dy: &ArrayD<f64>) -> ArrayD<f64> {
        let (b, h, w, c) = self.input_dim.expect("pool backward called before forward");
        let dy = dy.as_standard_layout();
        let ds = dy.as_slice().unwrap();
        let mut dx = vec![0.0; b * h * w * c];
        match self.kind {
            PoolKind::Max => {
                for (g, &arg) in ds.iter().zip(&self.argmax) {
                    dx[arg] += g;
                }
            }
            PoolKind::Avg => {
                let (ho, wo) = (h / self.stride, w / self.stride);
                let p = self.size;
                let rows = window_table(h, ho, p, self.stride);
                let colsi = window_table(w, wo, p, self.stride);
                let inv = 1.0 / (p * p) as f64;
                for bi in 0..b {
                    let base = bi * h * w * c;
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let obase = ((bi * ho + oi) * wo + oj) * c;
                            for &ii in &rows[oi * p..(oi + 1) * p] {
                                for &jj in &colsi[oj * p..(oj + 1) * p] {
                                    let ib = base + (ii * w + jj) * c;
                                    for ch in 0..c {
                                        dx[ib + ch] += ds[obase + ch] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(vec![b, h, w, c], dx).expect("pool input gradient shape")
    }
}
