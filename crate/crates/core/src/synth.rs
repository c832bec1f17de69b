//! Synthetic detection scenes and the fixed backbone surrogate.
//!
//! Scenes hold filled rectangles (class 0, solid), ellipses (class 1,
//! horizontal stripes) and triangles (class 2, checkerboard) on a dim
//! background with additive Gaussian noise. The featurizer summarizes each
//! patch with eight statistics and lifts them to `c` channels through a fixed
//! seeded projection followed by `tanh`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::evalmap::iou;
use crate::geom::{BBox, PatchGrid};
use crate::graph::FeatureMap;
use crate::linalg::{rand_matrix_with, Matrix};
use crate::rng::SplitMix64;

pub const NOISE_SIGMA: f64 = 0.02;
pub const PLACEMENT_ATTEMPTS: usize = 100;
/// Largest IoU allowed between two overlapping objects.
pub const MAX_OVERLAP_IOU: f64 = 0.5;
pub const PATCH_STATS: usize = 8;
const PROJECTION_SCALE: f64 = 1.5;
const BIAS_SCALE: f64 = 0.5;
/// Channels flatter than this over an image are treated as constant.
const STD_FLOOR: f64 = 1e-6;

/// Square grayscale image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(config_err(format!(
                "image of side {side} needs {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        Ok(Self { side, pixels })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self {
            side,
            pixels: vec![value; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.side + x] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub h_in: usize,
    /// Patch grid side; boxes are at least two patches wide.
    pub h: usize,
    pub classes: u32,
    pub max_objects: usize,
    pub overlap_allowed: bool,
    /// Largest box side as a fraction of the image.
    pub max_side_frac: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            h_in: 64,
            h: 8,
            classes: 3,
            max_objects: 2,
            overlap_allowed: true,
            max_side_frac: 0.625,
        }
    }
}

impl SynthSpec {
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.h_in, self.h)
    }

    fn side_range(&self) -> Result<(usize, usize)> {
        let grid = self.grid()?;
        let lo = 2 * grid.patch_size();
        let hi = ((self.max_side_frac * self.h_in as f64) as usize).min(self.h_in);
        if lo > hi {
            return Err(config_err(format!(
                "minimum box side {lo} exceeds maximum {hi}"
            )));
        }
        Ok((lo, hi))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.classes) {
            return Err(config_err(format!(
                "classes must be 1..=3, got {}",
                self.classes
            )));
        }
        if self.max_objects == 0 {
            return Err(config_err("max_objects must be at least 1"));
        }
        self.side_range().map(|_| ())
    }
}

#[derive(Clone, Copy)]
enum Texture {
    Solid,
    Stripes,
    Checker,
}

fn texture_value(tex: Texture, level: f64, x: usize, y: usize) -> f64 {
    let dim = 0.35 * level;
    match tex {
        Texture::Solid => level,
        Texture::Stripes => {
            if (y / 2).is_multiple_of(2) {
                level
            } else {
                dim
            }
        }
        Texture::Checker => {
            if ((x / 2) + (y / 2)).is_multiple_of(2) {
                level
            } else {
                dim
            }
        }
    }
}

fn covers(class: u32, b: &BBox, px: f64, py: f64) -> bool {
    match class % 3 {
        0 => true,
        1 => {
            let (cx, cy) = b.center();
            let (rx, ry) = (0.5 * b.width(), 0.5 * b.height());
            let (u, v) = ((px - cx) / rx, (py - cy) / ry);
            u * u + v * v <= 1.0
        }
        _ => {
            // Apex at top middle, base along the bottom edge.
            let t = (py - b.y1) / b.height();
            let half = 0.5 * t * b.width();
            let cx = 0.5 * (b.x1 + b.x2);
            (px - cx).abs() <= half
        }
    }
}

fn paint(image: &mut Image, b: &BBox, level: f64) {
    let tex = match b.class_id % 3 {
        0 => Texture::Solid,
        1 => Texture::Stripes,
        _ => Texture::Checker,
    };
    for y in b.y1 as usize..b.y2 as usize {
        for x in b.x1 as usize..b.x2 as usize {
            if covers(b.class_id, b, x as f64 + 0.5, y as f64 + 0.5) {
                image.set(x, y, texture_value(tex, level, x, y));
            }
        }
    }
}

fn placement_ok(candidate: &BBox, placed: &[BBox], overlap_allowed: bool) -> bool {
    let mut overlapping_pairs = 0usize;
    for (i, a) in placed.iter().enumerate() {
        for b in &placed[i + 1..] {
            if iou(a, b) > 0.0 {
                overlapping_pairs += 1;
            }
        }
    }
    for p in placed {
        let o = iou(candidate, p);
        if o == 0.0 {
            continue;
        }
        if !overlap_allowed || o > MAX_OVERLAP_IOU || overlapping_pairs >= 1 {
            return false;
        }
        overlapping_pairs += 1;
    }
    true
}

fn gen_scene(rng: &mut SplitMix64, spec: &SynthSpec) -> Result<Scene> {
    let (lo, hi) = spec.side_range()?;
    let side = spec.h_in;
    let background = rng.uniform(0.0, 0.2);
    let target = 1 + rng.below(spec.max_objects as u64) as usize;

    let mut boxes: Vec<BBox> = Vec::with_capacity(target);
    let mut levels = Vec::with_capacity(target);
    for _ in 0..target {
        let class_id = rng.below(spec.classes as u64) as u32;
        let level = rng.uniform(0.55, 0.95);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = lo + rng.below((hi - lo + 1) as u64) as usize;
            let h = lo + rng.below((hi - lo + 1) as u64) as usize;
            let x1 = rng.below((side - w + 1) as u64) as usize;
            let y1 = rng.below((side - h + 1) as u64) as usize;
            let b = BBox::new(
                x1 as f64,
                y1 as f64,
                (x1 + w) as f64,
                (y1 + h) as f64,
                class_id,
            )?;
            if placement_ok(&b, &boxes, spec.overlap_allowed) {
                boxes.push(b);
                levels.push(level);
                break;
            }
        }
    }

    let mut image = Image::filled(side, background);
    // Larger objects first so a smaller overlapping one stays visible.
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].area().total_cmp(&boxes[a].area()).then(a.cmp(&b)));
    for i in order {
        paint(&mut image, &boxes[i], levels[i]);
    }
    for v in image.pixels.iter_mut() {
        *v = (*v + NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0);
    }
    Ok(Scene { image, boxes })
}

/// Generates `count` scenes; each scene draws from its own forked stream.
pub fn gen_dataset(seed: u64, count: usize, spec: &SynthSpec) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(config_err("dataset count must be at least 1"));
    }
    spec.validate()?;
    let mut root = SplitMix64::new(seed);
    (0..count)
        .map(|_| {
            let mut rng = root.fork();
            gen_scene(&mut rng, spec)
        })
        .collect()
}

/// Eight statistics of one patch: mean, std, min, max, mean absolute
/// horizontal and vertical differences, top-minus-bottom and
/// left-minus-right quadrant contrasts.
pub fn patch_stats(image: &Image, grid: &PatchGrid, node: usize) -> [f64; PATCH_STATS] {
    let p = grid.patch_size();
    let (x0, y0) = ((node % grid.h()) * p, (node / grid.h()) * p);
    let n = (p * p) as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut quad = [0.0f64; 4];
    for y in 0..p {
        for x in 0..p {
            let v = image.get(x0 + x, y0 + y);
            sum += v;
            sq += v * v;
            lo = lo.min(v);
            hi = hi.max(v);
            let q = (if y < p / 2 { 0 } else { 2 }) + (if x < p / 2 { 0 } else { 1 });
            quad[q] += v;
        }
    }
    let mean = sum / n;
    let std = libm::sqrt((sq / n - mean * mean).max(0.0));

    let mut gx = 0.0;
    let mut gy = 0.0;
    if p > 1 {
        for y in 0..p {
            for x in 0..p - 1 {
                gx += (image.get(x0 + x + 1, y0 + y) - image.get(x0 + x, y0 + y)).abs();
            }
        }
        for y in 0..p - 1 {
            for x in 0..p {
                gy += (image.get(x0 + x, y0 + y + 1) - image.get(x0 + x, y0 + y)).abs();
            }
        }
        let pairs = (p * (p - 1)) as f64;
        gx /= pairs;
        gy /= pairs;
    }
    let qn = n / 4.0;
    let q = quad.map(|s| s / qn);
    let top_bottom = 0.5 * ((q[0] + q[1]) - (q[2] + q[3]));
    let left_right = 0.5 * ((q[0] + q[2]) - (q[1] + q[3]));
    [mean, std, lo, hi, gx, gy, top_bottom, left_right]
}

/// Fixed random lift from patch statistics to `c` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    projection: Matrix,
    bias: Vec<f64>,
    gain: f64,
}

impl Featurizer {
    pub fn new(c: usize, seed: u64) -> Result<Self> {
        Self::with_gain(c, seed, 1.0)
    }

    /// Output is `tanh(stats · P + b)`, standardized per channel to zero mean
    /// and standard deviation `gain` over the image.
    pub fn with_gain(c: usize, seed: u64, gain: f64) -> Result<Self> {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(config_err(format!(
                "feature gain must be positive, got {gain}"
            )));
        }
        if c < PATCH_STATS {
            return Err(config_err(format!(
                "feature channels must be at least {PATCH_STATS}, got {c}"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let projection = rand_matrix_with(PATCH_STATS, c, &mut rng, PROJECTION_SCALE);
        let bias = (0..c)
            .map(|_| rng.uniform(-BIAS_SCALE, BIAS_SCALE))
            .collect();
        Ok(Self {
            projection,
            bias,
            gain,
        })
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, image: &Image, grid: &PatchGrid) -> Result<FeatureMap> {
        let mut data = self.lift_nodes(image, grid)?;
        standardize_channels(&mut data, self.channels(), self.gain);
        FeatureMap::new(grid.h(), self.channels(), data)
    }

    /// `tanh(stats · P + b)` per patch; node `i` depends on patch `i` alone.
    pub fn lift(&self, image: &Image, grid: &PatchGrid) -> Result<FeatureMap> {
        FeatureMap::new(grid.h(), self.channels(), self.lift_nodes(image, grid)?)
    }

    fn lift_nodes(&self, image: &Image, grid: &PatchGrid) -> Result<Vec<f64>> {
        if image.side() != grid.h_in() {
            return Err(config_err(format!(
                "image side {} does not match grid input side {}",
                image.side(),
                grid.h_in()
            )));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(grid.nodes() * c);
        for node in 0..grid.nodes() {
            let stats = patch_stats(image, grid, node);
            for (k, b) in self.bias.iter().enumerate() {
                let z: f64 = stats
                    .iter()
                    .enumerate()
                    .map(|(s, v)| v * self.projection[(s, k)])
                    .sum();
                data.push(libm::tanh(z + b));
            }
        }
        Ok(data)
    }
}

/// Gives every channel zero mean and standard deviation `gain` over the
/// nodes of one image. Constant channels become zero.
fn standardize_channels(data: &mut [f64], c: usize, gain: f64) {
    let n = data.len() / c;
    for k in 0..c {
        let mean = (0..n).map(|i| data[i * c + k]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (data[i * c + k] - mean) * (data[i * c + k] - mean))
            .sum::<f64>()
            / n as f64;
        let sd = libm::sqrt(var);
        let k_scale = if sd > STD_FLOOR { gain / sd } else { 0.0 };
        for i in 0..n {
            data[i * c + k] = (data[i * c + k] - mean) * k_scale;
        }
    }
}

/// The local lift alone, without the per-image standardization that
/// [`Featurizer::apply`] adds for training.
pub fn featurize(image: &Image, grid: &PatchGrid, c: usize, seed: u64) -> Result<FeatureMap> {
    Featurizer::new(c, seed)?.lift(image, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::to_graph;

    #[test]
    fn dataset_is_deterministic() {
        let spec = SynthSpec::default();
        assert_eq!(
            gen_dataset(5, 10, &spec).unwrap(),
            gen_dataset(5, 10, &spec).unwrap()
        );
        assert_ne!(
            gen_dataset(5, 10, &spec).unwrap(),
            gen_dataset(6, 10, &spec).unwrap()
        );
    }

    #[test]
    fn single_object_scenes() {
        let spec = SynthSpec {
            max_objects: 1,
            ..Default::default()
        };
        for s in gen_dataset(1, 50, &spec).unwrap() {
            assert_eq!(s.boxes.len(), 1);
        }
    }

    #[test]
    fn boxes_are_valid_and_large_enough() {
        let spec = SynthSpec::default();
        for scene in gen_dataset(2, 200, &spec).unwrap() {
            assert!(!scene.boxes.is_empty() && scene.boxes.len() <= spec.max_objects);
            for b in &scene.boxes {
                b.check_within(64.0).unwrap();
                assert!(b.width() >= 16.0 && b.height() >= 16.0);
                assert!(b.area() > 0.0);
            }
            for (i, a) in scene.boxes.iter().enumerate() {
                for b in &scene.boxes[i + 1..] {
                    assert!(iou(a, b) <= MAX_OVERLAP_IOU);
                }
            }
            assert!(scene.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn no_overlap_when_disallowed() {
        let spec = SynthSpec {
            overlap_allowed: false,
            max_objects: 3,
            ..Default::default()
        };
        for scene in gen_dataset(3, 100, &spec).unwrap() {
            for (i, a) in scene.boxes.iter().enumerate() {
                for b in &scene.boxes[i + 1..] {
                    assert_eq!(iou(a, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let spec = SynthSpec::default();
        let mut counts = [0usize; 3];
        for scene in gen_dataset(4, 1000, &spec).unwrap() {
            for b in &scene.boxes {
                counts[b.class_id as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let p = 1.0 / 3.0;
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - total as f64 * p).abs() <= 3.0 * sd,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(gen_dataset(0, 0, &SynthSpec::default()).is_err());
        let bad = SynthSpec {
            classes: 0,
            ..Default::default()
        };
        assert!(gen_dataset(0, 1, &bad).is_err());
    }

    #[test]
    fn constant_image_gives_uniform_features() {
        let grid = PatchGrid::new(64, 8).unwrap();
        for level in [0.0, 0.4] {
            let img = Image::filled(64, level);
            let fm = featurize(&img, &grid, 16, 3).unwrap();
            let first = &fm.data()[..16];
            assert!(fm.data().chunks(16).all(|v| v == first));
            let g = to_graph(&fm).unwrap();
            assert!(g.a.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

            let std = Featurizer::new(16, 3).unwrap().apply(&img, &grid).unwrap();
            assert!(std.data().iter().all(|&v| v == 0.0));
            let g = to_graph(&std).unwrap();
            assert!(g.a.data().iter().all(|&v| v == 0.0));
            assert_eq!(g.a_norm, Matrix::identity(64));
        }
    }

    #[test]
    fn channels_are_standardized() {
        let grid = PatchGrid::new(64, 8).unwrap();
        let scene = &gen_dataset(4, 1, &SynthSpec::default()).unwrap()[0];
        let f = Featurizer::with_gain(32, 2, 0.25).unwrap();
        let fm = f.apply(&scene.image, &grid).unwrap();
        for k in 0..32 {
            let col: Vec<f64> = (0..64).map(|i| fm.data()[i * 32 + k]).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            assert!(var == 0.0 || (var.sqrt() - 0.25).abs() < 1e-12);
        }
        assert!(Featurizer::with_gain(32, 2, 0.0).is_err());
    }

    #[test]
    fn featurizer_is_local() {
        let grid = PatchGrid::new(64, 8).unwrap();
        let scene = &gen_dataset(9, 1, &SynthSpec::default()).unwrap()[0];
        let base = featurize(&scene.image, &grid, 32, 1).unwrap();
        let base = base.data();
        for node in [0usize, 13, 63] {
            let mut img = scene.image.clone();
            let (x0, y0) = ((node % 8) * 8, (node / 8) * 8);
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    img.set(x, y, 1.0 - img.get(x, y));
                }
            }
            let lifted = featurize(&img, &grid, 32, 1).unwrap();
            let lifted = lifted.data();
            for i in 0..64 {
                let (a, b) = (&lifted[i * 32..(i + 1) * 32], &base[i * 32..(i + 1) * 32]);
                if i == node {
                    assert_ne!(a, b);
                } else {
                    assert_eq!(a, b);
                }
            }
        }
        assert_eq!(featurize(&scene.image, &grid, 32, 1).unwrap().data(), base);
    }

    #[test]
    fn featurizer_validates_inputs() {
        let grid = PatchGrid::new(64, 8).unwrap();
        assert!(featurize(&Image::filled(64, 0.0), &grid, 7, 0).is_err());
        assert!(featurize(&Image::filled(32, 0.0), &grid, 8, 0).is_err());
    }
}
