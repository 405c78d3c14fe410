//! Files: NPY arrays, CSV tables, SVG plots, PGM galleries, dataset manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use rvekit_nn::Checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, data, CoreError, Result};
use crate::features::{feature_names, fit_pca, FeatureConfig, FeatureExtractor, PcaBasis, PCA_COMPONENTS};
use crate::grid::{generate_rve_with_inclusions, shape_signature, InclusionSpec, RveImage, ShapeKind};
use crate::homogenize::{Homogenizer, SolverConfig};

// ---------------------------------------------------------------- NPY

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NpyData {
    fn descr(&self) -> &'static str {
        match self {
            NpyData::U8(_) => "|u1",
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
        }
    }

    fn len(&self) -> usize {
        match self {
            NpyData::U8(v) => v.len(),
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: NpyData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(data_err(format!("shape {shape:?} does not match {} elements", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            NpyData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::F64(v) => v.clone(),
        }
    }
}

fn data_err(msg: String) -> CoreError {
    data(msg)
}

pub fn encode_npy(arr: &NpyArray) -> Vec<u8> {
    let shape = match arr.shape.len() {
        1 => format!("({},)", arr.shape[0]),
        _ => format!(
            "({})",
            arr.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        arr.data.descr(),
        shape
    );
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + arr.data.len() * 8);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match &arr.data {
        NpyData::U8(v) => out.extend_from_slice(v),
        NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| data(format!("npy header lacks '{key}'")))?
        + pat.len();
    Ok(header[start..].trim_start())
}

/// Parses a version 1.0 NPY byte stream.
pub fn decode_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(data("not an NPY file (bad magic)"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(data(format!("unsupported NPY version {}.{}", bytes[6], bytes[7])));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let body = 10 + hlen;
    if bytes.len() < body {
        return Err(data("truncated NPY header"));
    }
    let header = std::str::from_utf8(&bytes[10..body]).map_err(|_| data("NPY header is not text"))?;

    let descr_raw = dict_value(header, "descr")?;
    let descr = descr_raw
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| data("malformed NPY descr"))?;
    let fortran = dict_value(header, "fortran_order")?;
    if fortran.starts_with("True") {
        return Err(data("fortran-ordered NPY arrays are not supported"));
    }
    if !fortran.starts_with("False") {
        return Err(data("malformed NPY fortran_order"));
    }
    let shape_raw = dict_value(header, "shape")?;
    let inner = shape_raw
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| data("malformed NPY shape"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| data(format!("bad NPY dimension '{s}'"))))
        .collect::<Result<Vec<usize>>>()?;
    let count: usize = shape.iter().product();
    let payload = &bytes[body..];
    let need = |width: usize| -> Result<()> {
        if payload.len() < count * width {
            Err(data(format!(
                "truncated NPY payload: {} bytes for {count} elements of width {width}",
                payload.len()
            )))
        } else {
            Ok(())
        }
    };
    let arr = match descr {
        "|u1" | "<u1" | "u1" => {
            need(1)?;
            NpyData::U8(payload[..count].to_vec())
        }
        "<f4" => {
            need(4)?;
            NpyData::F32(
                payload[..count * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        "<f8" => {
            need(8)?;
            NpyData::F64(
                payload[..count * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        d if d.starts_with('>') => return Err(data(format!("big-endian NPY dtype {d} is not supported"))),
        d => return Err(data(format!("unsupported NPY dtype {d}"))),
    };
    Ok(NpyArray { shape, data: arr })
}

pub fn write_npy(path: &Path, arr: &NpyArray) -> Result<()> {
    fs::write(path, encode_npy(arr))?;
    Ok(())
}

pub fn read_npy(path: &Path) -> Result<NpyArray> {
    decode_npy(&fs::read(path)?)
}

// ---------------------------------------------------------------- hashing

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

// ---------------------------------------------------------------- CSV

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    let line = |cells: Vec<String>| cells.join(",") + "\n";
    out.push_str(&line(header.iter().map(|h| csv_field(h.as_ref())).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(|c| csv_field(c)).collect()));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_matrix_csv(path: &Path, header: &[String], m: &Array2<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(data(format!("{} column names for {} columns", header.len(), m.ncols())));
    }
    let rows: Vec<Vec<String>> = m
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| format!("{v:.17e}")).collect())
        .collect();
    write_csv(path, header, &rows)
}

// ---------------------------------------------------------------- PGM

pub fn write_pgm(path: &Path, rve: &RveImage) -> Result<()> {
    write_pgm_tiles(path, std::slice::from_ref(rve), 1)
}

/// Tiles images left to right, `cols` per row, separated by a grey gutter.
/// Inclusion pixels are white.
pub fn write_pgm_tiles(path: &Path, tiles: &[RveImage], cols: usize) -> Result<()> {
    if tiles.is_empty() || cols == 0 {
        return Err(data("nothing to draw"));
    }
    let n = tiles[0].n();
    if tiles.iter().any(|t| t.n() != n) {
        return Err(data("gallery tiles differ in size"));
    }
    let cols = cols.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let gap = 2;
    let w = cols * n + (cols - 1) * gap;
    let h = rows * n + (rows - 1) * gap;
    let mut px = vec![128u8; w * h];
    for (t, img) in tiles.iter().enumerate() {
        let (r0, c0) = ((t / cols) * (n + gap), (t % cols) * (n + gap));
        for i in 0..n {
            for j in 0..n {
                px[(r0 + i) * w + c0 + j] = img.get(i, j) * 255;
            }
        }
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&px)?;
    Ok(())
}

// ---------------------------------------------------------------- SVG

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlotKind {
    Line,
    Scatter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plot {
    pub kind: PlotKind,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Draws `y = x` (for prediction-vs-target plots).
    pub diagonal: bool,
    pub log_y: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

impl Plot {
    pub fn new(kind: PlotKind, title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            kind,
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            diagonal: false,
            log_y: false,
        }
    }

    pub fn with_series(mut self, name: &str, points: Vec<(f64, f64)>) -> Self {
        self.series.push(Series {
            name: name.into(),
            points,
        });
        self
    }

    pub fn to_svg(&self) -> String {
        let (w, h, m) = (640.0, 420.0, 60.0);
        let ty = |y: f64| if self.log_y { y.max(1e-300).log10() } else { y };
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|&(x, y)| (x, ty(y))))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        let span = |v: Vec<f64>| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            match (lo.is_finite(), hi > lo) {
                (true, true) => (lo, hi),
                (true, false) => (lo - 0.5, lo + 0.5),
                _ => (0.0, 1.0),
            }
        };
        let (mut x0, mut x1) = span(pts.iter().map(|p| p.0).collect());
        let (mut y0, mut y1) = span(pts.iter().map(|p| p.1).collect());
        if self.diagonal {
            x0 = x0.min(y0);
            y0 = x0;
            x1 = x1.max(y1);
            y1 = x1;
        }
        let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
        let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(&self.title));
        let _ = writeln!(
            s,
            r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            w - 2.0 * m,
            h - 2.0 * m
        );
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let ylab = if self.log_y { format!("1e{fy:.1}") } else { format!("{fy:.3}") };
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.3}</text>"#, px(fx), h - m + 16.0);
            let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{ylab}</text>"#, m - 4.0, py(fy) + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 16.0, esc(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            h / 2.0,
            h / 2.0,
            esc(&self.y_label)
        );
        if self.diagonal {
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#888" stroke-dasharray="4"/>"##,
                px(x0),
                py(y0),
                px(x1),
                py(y1)
            );
        }
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let coords: Vec<(f64, f64)> = series
                .points
                .iter()
                .map(|&(x, y)| (x, ty(y)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(x, y)| (px(x), py(y)))
                .collect();
            match self.kind {
                PlotKind::Line => {
                    let path: Vec<String> = coords.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                    let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
                }
                PlotKind::Scatter => {
                    for (x, y) in coords {
                        let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="2" fill="{color}" fill-opacity="0.6"/>"#);
                    }
                }
            }
            let ly = m + 14.0 + 16.0 * k as f64;
            let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, w - m - 120.0, ly - 9.0);
            let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, w - m - 105.0, esc(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_svg())?;
        Ok(())
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------- checkpoints

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    ckpt.save(path)?;
    sha256_file(path)
}

pub fn load_checkpoint(path: &Path, expected_kind: &str) -> Result<Checkpoint> {
    let c = Checkpoint::load(path)?;
    c.expect_kind(expected_kind)?;
    Ok(c)
}

// ---------------------------------------------------------------- datasets

pub const MANIFEST_VERSION: u32 = 1;
pub const MAX_SAMPLE_RETRIES: usize = 8;
pub const SPLIT_NAMES: [&str; 4] = ["train", "val", "test", "benchmark"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub benchmark: Vec<usize>,
}

impl Splits {
    pub fn contiguous(sizes: [usize; 4]) -> Self {
        let mut start = 0;
        let mut take = |k: usize| {
            let r: Vec<usize> = (start..start + k).collect();
            start += k;
            r
        };
        Self {
            train: take(sizes[0]),
            val: take(sizes[1]),
            test: take(sizes[2]),
            benchmark: take(sizes[3]),
        }
    }

    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            "benchmark" => Ok(&self.benchmark),
            _ => Err(config(format!("unknown split '{name}'"))),
        }
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len() + self.benchmark.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub resolution: usize,
    pub n_samples: usize,
    /// Paths are relative to the manifest's directory.
    pub images: String,
    pub targets: String,
    pub features: Option<String>,
    pub features_csv: Option<String>,
    pub pca_basis: Option<String>,
    pub feature_names: Vec<String>,
    pub contrasts: Vec<f64>,
    pub splits: Splits,
    pub seed: u64,
    pub sample_seeds: Vec<u64>,
    pub solver_tol: f64,
    pub training_spec: InclusionSpec,
    pub benchmark_specs: Vec<InclusionSpec>,
    pub shape_signatures: Vec<Vec<ShapeKind>>,
    pub incidents: Vec<String>,
    pub file_hashes: BTreeMap<String, String>,
}

impl DatasetManifest {
    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(data(format!("manifest version {} is not supported", self.version)));
        }
        if self.contrasts.is_empty() || self.contrasts.iter().any(|&r| !(r >= 1.0)) {
            return Err(data("contrast list must be non-empty with values >= 1"));
        }
        if self.splits.total() != self.n_samples {
            return Err(data(format!(
                "splits hold {} samples, manifest declares {}",
                self.splits.total(),
                self.n_samples
            )));
        }
        let mut seen = vec![false; self.n_samples];
        for name in SPLIT_NAMES {
            for &i in self.splits.get(name)? {
                if i >= self.n_samples || std::mem::replace(&mut seen[i], true) {
                    return Err(data(format!("sample {i} is out of range or in more than one split")));
                }
            }
        }
        if self.sample_seeds.len() != self.n_samples || self.shape_signatures.len() != self.n_samples {
            return Err(data("per-sample metadata length differs from sample count"));
        }
        let train_sigs: Vec<&Vec<ShapeKind>> = self.splits.train.iter().map(|&i| &self.shape_signatures[i]).collect();
        for &i in &self.splits.benchmark {
            if train_sigs.contains(&&self.shape_signatures[i]) {
                return Err(data(format!("benchmark sample {i} repeats a training shape signature")));
            }
        }
        Ok(())
    }

    pub fn contrast_index(&self, r: f64) -> Result<usize> {
        self.contrasts
            .iter()
            .position(|&c| (c - r).abs() < 1e-12)
            .ok_or_else(|| config(format!("contrast {r} not in dataset {:?}", self.contrasts)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub resolution: usize,
    /// Train, validation, test, benchmark.
    pub sizes: [usize; 4],
    pub contrasts: Vec<f64>,
    pub seed: u64,
    pub solver: SolverConfig,
    pub features: bool,
}

impl DatasetSpec {
    pub fn new(resolution: usize, sizes: [usize; 4], contrasts: Vec<f64>, seed: u64) -> Self {
        Self {
            resolution,
            sizes,
            contrasts,
            seed,
            solver: SolverConfig::default(),
            features: true,
        }
    }
}

/// Decorrelated per-sample seed.
pub fn sample_seed(seed: u64, index: usize, attempt: usize) -> u64 {
    let mut z = seed
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((attempt as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Sample {
    image: RveImage,
    targets: Vec<[f64; 3]>,
    seed: u64,
    signature: Vec<ShapeKind>,
    incidents: Vec<String>,
}

fn make_sample(
    index: usize,
    spec: &InclusionSpec,
    forbidden: &[Vec<ShapeKind>],
    ds: &DatasetSpec,
    solver: &mut Homogenizer,
) -> Result<Sample> {
    let mut incidents = Vec::new();
    for attempt in 0..MAX_SAMPLE_RETRIES {
        let seed = sample_seed(ds.seed, index, attempt);
        let (image, incl) = generate_rve_with_inclusions(spec, seed)?;
        let signature = shape_signature(&incl);
        if forbidden.contains(&signature) {
            continue;
        }
        let solved: Result<Vec<[f64; 3]>> = ds
            .contrasts
            .iter()
            .map(|&r| solver.solve(&image, r).map(|s| s.tensor.kappa))
            .collect();
        match solved {
            Ok(targets) => {
                return Ok(Sample {
                    image,
                    targets,
                    seed,
                    signature,
                    incidents,
                })
            }
            Err(e @ CoreError::NonConvergence { .. }) => {
                let msg = format!("sample {index} attempt {attempt}: {e}; regenerated");
                log::warn!("{msg}");
                incidents.push(msg);
            }
            Err(e) => return Err(e),
        }
    }
    Err(CoreError::Numeric(format!(
        "sample {index}: no usable microstructure after {MAX_SAMPLE_RETRIES} attempts"
    )))
}

/// Generates, solves and writes a dataset under `out_dir`, returning the
/// manifest (also written as `manifest.json`).
pub fn build_dataset(ds: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let n = ds.resolution;
    if ds.contrasts.is_empty() {
        return Err(config("at least one contrast is required"));
    }
    for &r in &ds.contrasts {
        crate::homogenize::validate_contrast(r)?;
    }
    fs::create_dir_all(out_dir)?;
    let training = InclusionSpec::training(n);
    let benchmark = vec![InclusionSpec::benchmark_mixed(n), InclusionSpec::benchmark_ellipses(n)];
    training.validate()?;
    let splits = Splits::contiguous(ds.sizes);
    let n_samples = splits.total();
    // Benchmark images must show shape combinations never seen in training.
    let single_kinds: Vec<Vec<ShapeKind>> = training.shapes.iter().map(|&k| vec![k]).collect();
    let bench_start = n_samples - ds.sizes[3];

    let samples: Vec<Result<Sample>> = (0..n_samples)
        .into_par_iter()
        .map_init(
            || Homogenizer::new(n, ds.solver),
            |solver, i| {
                if i >= bench_start {
                    let spec = &benchmark[(i - bench_start) % benchmark.len()];
                    make_sample(i, spec, &single_kinds, ds, solver)
                } else {
                    make_sample(i, &training, &[], ds, solver)
                }
            },
        )
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<Sample>>>()?;

    let mut pixels = Vec::with_capacity(n_samples * n * n);
    let mut targets = Vec::with_capacity(n_samples * ds.contrasts.len() * 3);
    for s in &samples {
        pixels.extend_from_slice(s.image.pixels());
        for t in &s.targets {
            targets.extend_from_slice(t);
        }
    }
    let mut hashes = BTreeMap::new();
    let put = |hashes: &mut BTreeMap<String, String>, name: &str, arr: NpyArray| -> Result<String> {
        let bytes = encode_npy(&arr);
        hashes.insert(name.to_string(), sha256_hex(&bytes));
        fs::write(out_dir.join(name), bytes)?;
        Ok(name.to_string())
    };
    let images = put(&mut hashes, "images.npy", NpyArray::new(vec![n_samples, n, n], NpyData::U8(pixels))?)?;
    let targets_file = put(
        &mut hashes,
        "targets.npy",
        NpyArray::new(vec![n_samples, ds.contrasts.len(), 3], NpyData::F64(targets))?,
    )?;

    let (mut features, mut features_csv, mut pca_basis, mut names) = (None, None, None, Vec::new());
    if ds.features {
        let imgs: Vec<RveImage> = samples.iter().map(|s| s.image.clone()).collect();
        let train_imgs: Vec<RveImage> = splits.train.iter().map(|&i| imgs[i].clone()).collect();
        let basis = fit_basis(&train_imgs, PCA_COMPONENTS)?;
        let matrix = compute_features(&imgs, &basis, FeatureConfig::default())?;
        names = feature_names(basis.k(), FeatureConfig::default().n_angles);
        let basis_json = serde_json::to_vec(&basis)?;
        hashes.insert("pca_basis.json".into(), sha256_hex(&basis_json));
        fs::write(out_dir.join("pca_basis.json"), basis_json)?;
        pca_basis = Some("pca_basis.json".to_string());
        write_matrix_csv(&out_dir.join("features.csv"), &names, &matrix)?;
        hashes.insert("features.csv".into(), sha256_file(&out_dir.join("features.csv"))?);
        features_csv = Some("features.csv".to_string());
        let (rows, cols) = matrix.dim();
        features = Some(put(
            &mut hashes,
            "features.npy",
            NpyArray::new(vec![rows, cols], NpyData::F64(matrix.into_raw_vec()))?,
        )?);
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        resolution: n,
        n_samples,
        images,
        targets: targets_file,
        features,
        features_csv,
        pca_basis,
        feature_names: names,
        contrasts: ds.contrasts.clone(),
        splits,
        seed: ds.seed,
        sample_seeds: samples.iter().map(|s| s.seed).collect(),
        solver_tol: ds.solver.tol,
        training_spec: training,
        benchmark_specs: benchmark,
        shape_signatures: samples.iter().map(|s| s.signature.clone()).collect(),
        incidents: samples.iter().flat_map(|s| s.incidents.clone()).collect(),
        file_hashes: hashes,
    };
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Correlation basis from the two-point maps of `images`.
pub fn fit_basis(images: &[RveImage], k: usize) -> Result<PcaBasis> {
    let n = images.first().ok_or_else(|| data("no images to fit a basis on"))?.n();
    let ext = FeatureExtractor::new(n, FeatureConfig::default())?;
    let maps: Vec<Result<Vec<f64>>> = images
        .par_iter()
        .map_init(|| ext.clone(), |e, img| e.pcf(img))
        .collect();
    let maps = maps.into_iter().collect::<Result<Vec<_>>>()?;
    fit_pca(&maps, k, n)
}

/// Feature matrix, one row per image.
pub fn compute_features(images: &[RveImage], basis: &PcaBasis, cfg: FeatureConfig) -> Result<Array2<f64>> {
    let n = images.first().ok_or_else(|| data("no images"))?.n();
    let ext = FeatureExtractor::new(n, cfg)?;
    let rows: Vec<Result<Vec<f64>>> = images
        .par_iter()
        .map_init(|| ext.clone(), |e, img| e.assemble(img, basis))
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let p = rows[0].len();
    Ok(Array2::from_shape_vec((rows.len(), p), rows.concat()).expect("uniform rows"))
}

/// A dataset with its arrays in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub images: Vec<RveImage>,
    /// samples x contrasts x 3
    pub targets: Array3<f64>,
    pub features: Option<Array2<f64>>,
}

impl Dataset {
    /// Loads and cross-checks shapes and file hashes.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let read_checked = |name: &str| -> Result<NpyArray> {
            let bytes = fs::read(root.join(name))?;
            if let Some(h) = manifest.file_hashes.get(name) {
                if *h != sha256_hex(&bytes) {
                    return Err(data(format!("{name}: content hash does not match manifest")));
                }
            }
            decode_npy(&bytes)
        };
        let (n, s, c) = (manifest.resolution, manifest.n_samples, manifest.contrasts.len());
        let img = read_checked(&manifest.images)?;
        if img.shape != [s, n, n] {
            return Err(data(format!("images have shape {:?}, expected [{s}, {n}, {n}]", img.shape)));
        }
        let NpyData::U8(pixels) = img.data else {
            return Err(data("images must be uint8"));
        };
        let images = pixels
            .chunks_exact(n * n)
            .map(|p| RveImage::from_pixels(n, p.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let t = read_checked(&manifest.targets)?;
        if t.shape != [s, c, 3] {
            return Err(data(format!("targets have shape {:?}, expected [{s}, {c}, 3]", t.shape)));
        }
        let targets = Array3::from_shape_vec((s, c, 3), t.to_f64()).expect("shape checked");
        let features = match &manifest.features {
            Some(f) => {
                let a = read_checked(f)?;
                if a.shape.len() != 2 || a.shape[0] != s {
                    return Err(data(format!("features have shape {:?}, expected [{s}, _]", a.shape)));
                }
                Some(Array2::from_shape_vec((a.shape[0], a.shape[1]), a.to_f64()).expect("shape checked"))
            }
            None => None,
        };
        Ok(Self {
            manifest,
            root,
            images,
            targets,
            features,
        })
    }

    pub fn pca_basis(&self) -> Result<PcaBasis> {
        let name = self
            .manifest
            .pca_basis
            .as_ref()
            .ok_or_else(|| data("dataset carries no correlation basis"))?;
        Ok(serde_json::from_slice(&fs::read(self.root.join(name))?)?)
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.manifest.splits.get(name)
    }

    /// Mandel targets at one contrast for the given sample indices.
    pub fn targets_at(&self, indices: &[usize], contrast: f64) -> Result<Vec<[f64; 3]>> {
        let c = self.manifest.contrast_index(contrast)?;
        Ok(indices
            .iter()
            .map(|&i| [self.targets[[i, c, 0]], self.targets[[i, c, 1]], self.targets[[i, c, 2]]])
            .collect())
    }

    pub fn images_of(&self, indices: &[usize]) -> Vec<RveImage> {
        indices.iter().map(|&i| self.images[i].clone()).collect()
    }

    pub fn features_of(&self, indices: &[usize]) -> Result<Array2<f64>> {
        let f = self.features.as_ref().ok_or_else(|| data("dataset has no feature matrix"))?;
        Ok(f.select(ndarray::Axis(0), indices))
    }
}
