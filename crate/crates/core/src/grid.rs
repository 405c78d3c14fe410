//! Periodic binary microstructure images: synthesis, rasterisation and
//! geometric transforms.
//!
//! Pixel `(i, j)` is row `i`, column `j`; the x axis runs along columns and the
//! y axis along rows. Pixel centres sit at `(j + 0.5, i + 0.5)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{config, data, CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RveImage {
    n: usize,
    pixels: Vec<u8>,
}

impl RveImage {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            pixels: vec![0; n * n],
        }
    }

    pub fn ones(n: usize) -> Self {
        Self {
            n,
            pixels: vec![1; n * n],
        }
    }

    pub fn from_pixels(n: usize, pixels: Vec<u8>) -> Result<Self> {
        if n == 0 {
            return Err(data("image resolution must be positive"));
        }
        if pixels.len() != n * n {
            return Err(data(format!("expected {} pixels for a {n}x{n} image, got {}", n * n, pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|&&p| p > 1) {
            return Err(data(format!("pixel value {bad} is not a phase indicator")));
        }
        Ok(Self { n, pixels })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                pixels.push(f(i, j) as u8);
            }
        }
        Self { n, pixels }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.pixels[i * self.n + j]
    }

    /// Periodic lookup.
    #[inline]
    pub fn at(&self, i: i64, j: i64) -> u8 {
        let n = self.n as i64;
        self.pixels[(i.rem_euclid(n) * n + j.rem_euclid(n)) as usize]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.pixels[i * self.n + j] = v as u8;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }
}

pub fn volume_fraction(rve: &RveImage) -> f64 {
    rve.count() as f64 / rve.pixels.len() as f64
}

/// Output pixel `(i, j)` equals input `((i - dy) mod n, (j - dx) mod n)`.
pub fn translate_periodic(rve: &RveImage, dx: i64, dy: i64) -> RveImage {
    RveImage::from_fn(rve.n, |i, j| rve.at(i as i64 - dy, j as i64 - dx) == 1)
}

/// Quarter turn counter-clockwise: `out[i][j] = in[j][n - 1 - i]`.
pub fn rotate90(rve: &RveImage) -> RveImage {
    let n = rve.n;
    RveImage::from_fn(n, |i, j| rve.get(j, n - 1 - i) == 1)
}

pub fn phase_invert(rve: &RveImage) -> RveImage {
    RveImage {
        n: rve.n,
        pixels: rve.pixels.iter().map(|&p| 1 - p).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Ellipse,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
        }
    }
}

/// One placed inclusion. `a` and `b` are half-extents along the rotated axes
/// (for circles only `a` is used).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Inclusion {
    pub fn circle(cx: f64, cy: f64, r: f64) -> Self {
        Self {
            kind: ShapeKind::Circle,
            cx,
            cy,
            a: r,
            b: r,
            theta: 0.0,
        }
    }

    fn reach(&self) -> f64 {
        match self.kind {
            ShapeKind::Circle => self.a,
            ShapeKind::Ellipse => self.a.max(self.b),
            ShapeKind::Rectangle => self.a.hypot(self.b),
        }
    }

    /// Whether the point offset `(dx, dy)` from the centre lies inside.
    pub fn contains(&self, dx: f64, dy: f64) -> bool {
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.a * self.a,
            _ => {
                let (s, c) = self.theta.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if self.kind == ShapeKind::Rectangle {
                    u.abs() <= self.a && v.abs() <= self.b
                } else {
                    (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
                }
            }
        }
    }

    /// Calls `f(i, j)` for every pixel whose centre is inside, with periodic wrap.
    pub fn for_each_pixel(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        let r = self.reach();
        let ni = n as i64;
        let (x0, x1) = ((self.cx - r - 0.5).floor() as i64, (self.cx + r).ceil() as i64);
        let (y0, y1) = ((self.cy - r - 0.5).floor() as i64, (self.cy + r).ceil() as i64);
        for y in y0..=y1 {
            let dy = y as f64 + 0.5 - self.cy;
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - self.cx;
                if self.contains(dx, dy) {
                    f(y.rem_euclid(ni) as usize, x.rem_euclid(ni) as usize);
                }
            }
        }
    }
}

/// Union of the given inclusions on an `n x n` periodic grid.
pub fn rasterize(n: usize, inclusions: &[Inclusion]) -> RveImage {
    let mut img = RveImage::zeros(n);
    for inc in inclusions {
        inc.for_each_pixel(n, |i, j| img.set(i, j, true));
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionSpec {
    pub resolution: usize,
    /// Shapes to draw from.
    pub shapes: Vec<ShapeKind>,
    /// `false`: one kind per image; `true`: the kind is drawn per inclusion.
    pub mix_shapes: bool,
    pub count: (usize, usize),
    /// Half-extent (radius) range in pixels.
    pub size: (f64, f64),
    /// Ratio of the minor to the major half-extent, for non-circular shapes.
    pub aspect: (f64, f64),
    pub orientation: (f64, f64),
    pub volume_fraction: (f64, f64),
    pub overlap: bool,
    /// Draw a size, aspect and preferred orientation per image and scatter
    /// the inclusions around them, instead of drawing every inclusion from the
    /// full ranges.
    #[serde(default)]
    pub textured: bool,
}

/// Per-image centers that textured inclusions scatter around.
#[derive(Debug, Clone, Copy)]
struct Texture {
    size: f64,
    aspect: f64,
    theta: f64,
    spread: f64,
}

const MAX_ATTEMPTS: usize = 50;
const MAX_PLACEMENT_TRIES: usize = 200;

impl InclusionSpec {
    /// Single-kind images of circles or rectangles.
    pub fn training(n: usize) -> Self {
        Self {
            resolution: n,
            shapes: vec![ShapeKind::Circle, ShapeKind::Rectangle],
            mix_shapes: false,
            count: (1, 600),
            size: (n as f64 / 32.0, n as f64 / 4.0),
            aspect: (0.05, 1.0),
            orientation: (0.0, PI),
            volume_fraction: (0.2, 0.8),
            overlap: true,
            textured: true,
        }
    }

    /// Circles and rectangles mixed inside one image.
    pub fn benchmark_mixed(n: usize) -> Self {
        Self {
            mix_shapes: true,
            ..Self::training(n)
        }
    }

    pub fn benchmark_ellipses(n: usize) -> Self {
        Self {
            shapes: vec![ShapeKind::Ellipse],
            ..Self::training(n)
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            count: (0, 0),
            volume_fraction: (0.0, 1.0),
            ..Self::training(n)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(config("resolution must be positive"));
        }
        if self.count.0 > self.count.1 {
            return Err(config("inclusion count range is reversed"));
        }
        if self.count.1 > 0 && self.shapes.is_empty() {
            return Err(config("no inclusion shapes given"));
        }
        if !(self.size.0 > 0.0 && self.size.0 <= self.size.1) {
            return Err(config("size range must be positive and ordered"));
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1 && self.aspect.1 <= 1.0) {
            return Err(config("aspect range must lie in (0, 1]"));
        }
        let (lo, hi) = self.volume_fraction;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(config("volume fraction interval must be ordered within [0, 1]"));
        }
        if self.orientation.0 > self.orientation.1 {
            return Err(config("orientation range is reversed"));
        }
        Ok(())
    }

    fn texture(&self, rng: &mut ChaCha8Rng) -> Option<Texture> {
        self.textured.then(|| Texture {
            size: uniform(rng, self.size),
            aspect: uniform(rng, self.aspect),
            theta: uniform(rng, self.orientation),
            // squared draw favours aligned images
            spread: (self.orientation.1 - self.orientation.0) * uniform(rng, (0.0, 1.0)).powi(2),
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng, kind: ShapeKind, tex: Option<Texture>) -> Inclusion {
        let n = self.resolution as f64;
        let (a, ratio, theta) = match tex {
            Some(t) => (
                (t.size * uniform(rng, (0.75, 1.25))).clamp(self.size.0, self.size.1),
                (t.aspect * uniform(rng, (0.85, 1.15))).clamp(self.aspect.0, self.aspect.1),
                t.theta + t.spread * uniform(rng, (-0.5, 0.5)),
            ),
            None => (uniform(rng, self.size), uniform(rng, self.aspect), uniform(rng, self.orientation)),
        };
        let b = match kind {
            ShapeKind::Circle => a,
            _ => a * ratio,
        };
        Inclusion {
            kind,
            cx: rng.gen_range(0.0..n),
            cy: rng.gen_range(0.0..n),
            a,
            b,
            theta,
        }
    }

    fn max_area_fraction(&self) -> f64 {
        let r = self.size.1;
        let area = if self.shapes.contains(&ShapeKind::Rectangle) {
            4.0 * r * r
        } else {
            PI * r * r
        };
        (area / (self.resolution * self.resolution) as f64).min(1.0)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Deterministic random microstructure for `(spec, seed)`.
pub fn generate_rve(spec: &InclusionSpec, seed: u64) -> Result<RveImage> {
    Ok(generate_rve_with_inclusions(spec, seed)?.0)
}

/// As [`generate_rve`], also returning the placed inclusions.
pub fn generate_rve_with_inclusions(spec: &InclusionSpec, seed: u64) -> Result<(RveImage, Vec<Inclusion>)> {
    spec.validate()?;
    let n = spec.resolution;
    if spec.count.1 == 0 {
        return Ok((RveImage::zeros(n), Vec::new()));
    }
    let total = (n * n) as f64;
    let slack = spec.max_area_fraction();
    let (lo, hi) = spec.volume_fraction;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reason = String::new();
    for _ in 0..MAX_ATTEMPTS {
        let target = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let image_kind = spec.shapes[rng.gen_range(0..spec.shapes.len())];
        let tex = spec.texture(&mut rng);
        let mut img = RveImage::zeros(n);
        let mut set = 0usize;
        let mut placed = Vec::new();
        let mut stuck = false;
        while placed.len() < spec.count.1 && (set as f64 / total < target || placed.len() < spec.count.0) {
            let mut accepted = None;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let kind = if spec.mix_shapes {
                    spec.shapes[rng.gen_range(0..spec.shapes.len())]
                } else {
                    image_kind
                };
                let inc = spec.draw(&mut rng, kind, tex);
                let mut cells = Vec::new();
                let mut clash = false;
                inc.for_each_pixel(n, |i, j| {
                    clash |= img.get(i, j) == 1;
                    cells.push((i, j));
                });
                if cells.is_empty() || (clash && !spec.overlap) {
                    continue;
                }
                accepted = Some((inc, cells));
                break;
            }
            let Some((inc, cells)) = accepted else {
                stuck = true;
                break;
            };
            for (i, j) in cells {
                if img.get(i, j) == 0 {
                    img.set(i, j, true);
                    set += 1;
                }
            }
            placed.push(inc);
        }
        let vf = set as f64 / total;
        if stuck {
            reason = "no admissible non-overlapping placement".into();
            continue;
        }
        if vf + 1e-12 >= lo - slack && vf <= hi + slack + 1e-12 {
            return Ok((img, placed));
        }
        reason = format!("reached volume fraction {vf:.3}, outside [{lo}, {hi}]");
    }
    Err(CoreError::Unsatisfiable {
        attempts: MAX_ATTEMPTS,
        reason,
    })
}

/// Shape kinds actually present among `inclusions`, sorted.
pub fn shape_signature(inclusions: &[Inclusion]) -> Vec<ShapeKind> {
    let mut kinds: Vec<ShapeKind> = inclusions.iter().map(|i| i.kind).collect();
    kinds.sort();
    kinds.dedup();
    kinds
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn random_image(n: usize, seed: u64) -> RveImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RveImage::from_fn(n, |_, _| rng.gen_bool(0.4))
    }

    #[test]
    fn empty_spec_gives_empty_image() {
        let img = generate_rve(&InclusionSpec::empty(16), 3).unwrap();
        assert_eq!(volume_fraction(&img), 0.0);
    }

    #[test]
    fn centred_disk_matches_pixel_count() {
        let n = 64;
        let r = n as f64 / 2.0;
        let img = rasterize(n, &[Inclusion::circle(r, r, r)]);
        let mut expected = 0;
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (j as f64 + 0.5 - r, i as f64 + 0.5 - r);
                expected += (x * x + y * y <= r * r) as usize;
            }
        }
        assert_eq!(img.count(), expected);
        assert!((volume_fraction(&img) - PI / 4.0).abs() <= 2.0 / n as f64);
    }

    #[test]
    fn inclusions_wrap_around_edges() {
        let img = rasterize(16, &[Inclusion::circle(0.0, 0.0, 2.0)]);
        assert_eq!(img.get(0, 0), 1);
        assert_eq!(img.get(15, 15), 1);
        assert_eq!(img.get(0, 15), 1);
        assert_eq!(img.get(8, 8), 0);
        let shifted = rasterize(16, &[Inclusion::circle(8.0, 8.0, 2.0)]);
        assert_eq!(translate_periodic(&shifted, 8, 8), img);
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        for spec in [
            InclusionSpec::training(64),
            InclusionSpec::benchmark_mixed(64),
            InclusionSpec::benchmark_ellipses(64),
        ] {
            for seed in 0..5 {
                let a = generate_rve(&spec, seed).unwrap();
                assert_eq!(a, generate_rve(&spec, seed).unwrap());
                let vf = volume_fraction(&a);
                let slack = spec.max_area_fraction();
                assert!(vf >= 0.2 - slack && vf <= 0.8 + slack, "vf {vf}");
            }
        }
        assert_ne!(
            generate_rve(&InclusionSpec::training(32), 1).unwrap(),
            generate_rve(&InclusionSpec::training(32), 2).unwrap()
        );
    }

    #[test]
    fn training_images_hold_a_single_kind() {
        let spec = InclusionSpec::training(64);
        for seed in 0..10 {
            let (_, incs) = generate_rve_with_inclusions(&spec, seed).unwrap();
            assert_eq!(shape_signature(&incs).len(), 1);
        }
        let (_, incs) = generate_rve_with_inclusions(&InclusionSpec::benchmark_mixed(64), 4).unwrap();
        assert_eq!(shape_signature(&incs), vec![ShapeKind::Circle, ShapeKind::Rectangle]);
    }

    #[test]
    fn impossible_spec_is_reported() {
        let spec = InclusionSpec {
            count: (1, 1),
            size: (1.0, 1.0),
            volume_fraction: (0.9, 0.95),
            ..InclusionSpec::training(32)
        };
        assert!(matches!(generate_rve(&spec, 0), Err(CoreError::Unsatisfiable { .. })));
        let spec = InclusionSpec {
            overlap: false,
            count: (50, 50),
            size: (10.0, 10.0),
            ..InclusionSpec::training(32)
        };
        assert!(matches!(generate_rve(&spec, 0), Err(CoreError::Unsatisfiable { .. })));
    }

    #[test]
    fn non_overlapping_placement_is_disjoint() {
        let spec = InclusionSpec {
            overlap: false,
            shapes: vec![ShapeKind::Circle],
            volume_fraction: (0.2, 0.3),
            ..InclusionSpec::training(64)
        };
        let (img, incs) = generate_rve_with_inclusions(&spec, 9).unwrap();
        let total: usize = incs
            .iter()
            .map(|inc| {
                let mut k = 0;
                inc.for_each_pixel(64, |_, _| k += 1);
                k
            })
            .sum();
        assert_eq!(total, img.count());
    }

    #[test]
    fn basic_transforms() {
        let z = RveImage::zeros(8);
        assert_eq!(volume_fraction(&z), 0.0);
        assert_eq!(volume_fraction(&RveImage::ones(8)), 1.0);
        let half = RveImage::from_fn(8, |i, _| i < 4);
        assert_eq!(volume_fraction(&half), 0.5);
        assert_eq!(rotate90(&z), z);
        assert_eq!(phase_invert(&z), RveImage::ones(8));
        let img = random_image(8, 2);
        assert_eq!(translate_periodic(&img, 0, 0), img);
        assert_eq!(translate_periodic(&img, 8, 8), img);
        assert_eq!(translate_periodic(&img, 8, -16), img);
    }

    #[test]
    fn rotation_index_map() {
        let mut img = RveImage::zeros(4);
        img.set(0, 0, true);
        // A quarter turn counter-clockwise sends the top-left corner to the bottom-left.
        let r = rotate90(&img);
        assert_eq!(r.get(3, 0), 1);
        assert_eq!(r.count(), 1);
        assert_eq!(rotate90(&r).get(3, 3), 1);
        let mut row = RveImage::zeros(4);
        row.set(1, 2, true);
        let r = rotate90(&row);
        assert_eq!(r.get(4 - 1 - 2, 1), 1);
    }

    #[test]
    fn pixel_validation() {
        assert!(RveImage::from_pixels(2, vec![0, 1, 1, 0]).is_ok());
        assert!(RveImage::from_pixels(2, vec![0, 1, 2, 0]).is_err());
        assert!(RveImage::from_pixels(2, vec![0, 1, 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn four_rotations_are_identity(seed in any::<u64>(), n in 1usize..20) {
            let img = random_image(n, seed);
            let r = rotate90(&rotate90(&rotate90(&rotate90(&img))));
            prop_assert_eq!(r, img);
        }

        #[test]
        fn translation_preserves_fraction_and_inverts(seed in any::<u64>(), dx in -50i64..50, dy in -50i64..50) {
            let img = random_image(12, seed);
            let t = translate_periodic(&img, dx, dy);
            prop_assert_eq!(t.count(), img.count());
            prop_assert_eq!(translate_periodic(&t, -dx, -dy), img.clone());
            prop_assert_eq!(t.get(0, 0), img.at(-dy, -dx));
        }

        #[test]
        fn inversion_is_an_involution(seed in any::<u64>()) {
            let img = random_image(10, seed);
            let inv = phase_invert(&img);
            prop_assert!((volume_fraction(&inv) - (1.0 - volume_fraction(&img))).abs() < 1e-15);
            prop_assert_eq!(phase_invert(&inv), img);
        }
    }
}
