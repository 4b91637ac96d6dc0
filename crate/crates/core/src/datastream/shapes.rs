//! Synthetic shapes benchmark with analytic saliency.
//!
//! Each class is a (shape, color) pair drawn on a textured background with a
//! few small distractor patches. The target saliency of an image is an
//! isotropic Gaussian centered at the centroid of the rendered shape.

use rand::Rng;

use super::{BBox, ImageSize, LabeledCollection, Sample, ShapeMeta};
use crate::error::{Result, SamError};
use crate::nn::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Saltire,
    Bar,
}

const SHAPES: [ShapeKind; 8] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Diamond,
    ShapeKind::Saltire,
    ShapeKind::Bar,
];

const COLORS: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.15],
    [0.85, 0.20, 0.85],
    [0.15, 0.85, 0.90],
    [0.98, 0.55, 0.10],
    [0.97, 0.97, 0.97],
];

/// Number of distinct (shape, color) classes the generator can produce.
pub const MAX_SHAPE_CLASSES: usize = SHAPES.len() * COLORS.len();

/// Maps a class id onto a (shape, color) pair; a bijection on `0..64`.
///
/// Consecutive ids vary both shape and color so any prefix of the id range
/// is a mix of both factors.
fn class_style(class: usize) -> (ShapeKind, [f32; 3]) {
    let s = class % SHAPES.len();
    let c = (class / SHAPES.len() + 3 * s) % COLORS.len();
    (SHAPES[s], COLORS[c])
}

impl ShapeKind {
    /// Whether offset `(dy, dx)` from the center lies inside a shape of radius `r`.
    fn covers(self, dy: f32, dx: f32, r: f32) -> bool {
        let (ay, ax) = (dy.abs(), dx.abs());
        match self {
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => ay <= 0.8 * r && ax <= 0.8 * r,
            ShapeKind::Triangle => dy >= -r && dy <= 0.8 * r && ax <= 0.55 * (dy + r),
            ShapeKind::Cross => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            ShapeKind::Diamond => ay + ax <= r,
            ShapeKind::Saltire => (ay - ax).abs() <= 0.3 * r && ay <= r && ax <= r,
            ShapeKind::Bar => ay <= 0.35 * r && ax <= r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub size: ImageSize,
    pub samples_per_class: usize,
    /// Fraction of each class held out for testing (at least one sample).
    pub test_fraction: f32,
    pub distractors: usize,
    /// Gaussian std of the analytic saliency, in pixels.
    pub sigma: f32,
    pub seed: u64,
}

impl ShapesConfig {
    pub fn new(size: ImageSize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            size,
            samples_per_class,
            test_fraction: 0.2,
            distractors: 3,
            sigma: default_sigma(size),
            seed,
        }
    }
}

/// Default saliency spread: one eighth of the shorter image side.
pub fn default_sigma(size: ImageSize) -> f32 {
    size.height.min(size.width) as f32 / 8.0
}

/// Gaussian saliency centered at `centroid`, sampled at pixel centers and
/// truncated at the borders. Returned row-major, H×W.
pub fn analytic_saliency(size: ImageSize, centroid: (f32, f32), sigma: f32) -> Vec<f32> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut map = Vec::with_capacity(size.pixels());
    for r in 0..size.height {
        for c in 0..size.width {
            let dy = r as f32 - centroid.0;
            let dx = c as f32 - centroid.1;
            map.push((-(dy * dy + dx * dx) * inv).exp());
        }
    }
    map
}

/// Paints a shape of radius `radius` centered at `center` (row, col) into a
/// channel-major image and returns its centroid and bounding box.
pub fn render_shape(
    image: &mut [f32],
    size: ImageSize,
    kind: ShapeKind,
    color: [f32; 3],
    center: (f32, f32),
    radius: f32,
) -> Option<ShapeMeta> {
    let plane = size.pixels();
    let (mut sy, mut sx, mut n) = (0f64, 0f64, 0usize);
    let mut bbox = BBox {
        top: usize::MAX,
        left: usize::MAX,
        bottom: 0,
        right: 0,
    };
    for r in 0..size.height {
        for c in 0..size.width {
            if kind.covers(r as f32 - center.0, c as f32 - center.1, radius) {
                for (ch, v) in color.iter().enumerate() {
                    image[ch * plane + r * size.width + c] = *v;
                }
                sy += r as f64;
                sx += c as f64;
                n += 1;
                bbox.top = bbox.top.min(r);
                bbox.left = bbox.left.min(c);
                bbox.bottom = bbox.bottom.max(r);
                bbox.right = bbox.right.max(c);
            }
        }
    }
    (n > 0).then(|| ShapeMeta {
        centroid: ((sy / n as f64) as f32, (sx / n as f64) as f32),
        bbox,
    })
}

fn background(rng: &mut impl Rng, size: ImageSize) -> Vec<f32> {
    let plane = size.pixels();
    let base = rng.random_range(0.25f32..0.5);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05f32..0.05));
    // Two low-frequency plane waves plus pixel noise.
    let waves: Vec<(f32, f32, f32, f32)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.1f32..0.5),
                rng.random_range(0.1f32..0.5),
                rng.random_range(0.0f32..std::f32::consts::TAU),
                rng.random_range(0.03f32..0.08),
            )
        })
        .collect();
    let mut img = vec![0f32; 3 * plane];
    for r in 0..size.height {
        for c in 0..size.width {
            let mut v = base;
            for &(fy, fx, phase, amp) in &waves {
                v += amp * (fy * r as f32 + fx * c as f32 + phase).sin();
            }
            for (ch, t) in tint.iter().enumerate() {
                let noise = rng.random_range(-0.04f32..0.04);
                img[ch * plane + r * size.width + c] = (v + t + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn render_sample(
    rng: &mut impl Rng,
    cfg: &ShapesConfig,
    class: usize,
) -> (Vec<f32>, ShapeMeta) {
    let size = cfg.size;
    let plane = size.pixels();
    let short = size.height.min(size.width) as f32;
    let (kind, color) = class_style(class);
    loop {
        let mut img = background(rng, size);
        let radius = rng.random_range(0.16 * short..0.24 * short);
        let margin = radius + 1.0;
        let cy = rng.random_range(margin..size.height as f32 - margin);
        let cx = rng.random_range(margin..size.width as f32 - margin);

        for _ in 0..cfg.distractors {
            let side = ((0.08 * short).round() as usize).max(2);
            let r0 = rng.random_range(0..=size.height - side);
            let c0 = rng.random_range(0..=size.width - side);
            let col = COLORS[rng.random_range(0..COLORS.len())];
            for r in r0..r0 + side {
                for c in c0..c0 + side {
                    for (ch, v) in col.iter().enumerate() {
                        img[ch * plane + r * size.width + c] = 0.6 * v + 0.2;
                    }
                }
            }
        }

        let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.04f32..0.04));
        let color = std::array::from_fn(|i| (color[i] + jitter[i]).clamp(0.0, 1.0));
        if let Some(meta) = render_shape(&mut img, size, kind, color, (cy, cx), radius) {
            return (img, meta);
        }
    }
}

/// Renders `cfg.samples_per_class` images for each class id in `classes`.
/// Labels equal the class ids.
pub fn generate_shapes_classes(classes: &[usize], cfg: &ShapesConfig) -> Result<LabeledCollection> {
    if classes.len() < 2 {
        return Err(SamError::config("shapes dataset needs at least 2 classes"));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= MAX_SHAPE_CLASSES) {
        return Err(SamError::config(format!(
            "class {c} exceeds the {MAX_SHAPE_CLASSES} available shape×color combinations"
        )));
    }
    if cfg.size.height < 16 || cfg.size.width < 16 {
        return Err(SamError::config("shapes images must be at least 16×16"));
    }
    if cfg.samples_per_class < 2 {
        return Err(SamError::config("samples_per_class must be ≥ 2"));
    }
    let n_test = ((cfg.samples_per_class as f32 * cfg.test_fraction).round() as usize)
        .clamp(1, cfg.samples_per_class - 1);

    let mut rng = rng_for(cfg.seed, "shapes");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &class in classes {
        for k in 0..cfg.samples_per_class {
            let (image, meta) = render_sample(&mut rng, cfg, class);
            let sample = Sample {
                id: format!("shapes_s{}_c{class}_{k:04}", cfg.seed),
                image,
                label: class,
                saliency: Some(analytic_saliency(cfg.size, meta.centroid, cfg.sigma)),
                task_id: 0,
                meta: Some(meta),
            };
            if k < n_test {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    Ok(LabeledCollection {
        size: cfg.size,
        train,
        test,
    })
}

/// Shapes dataset over class ids `0..num_classes` with default rendering settings.
pub fn generate_shapes_dataset(
    num_classes: usize,
    samples_per_class: usize,
    image_size: ImageSize,
    seed: u64,
) -> Result<LabeledCollection> {
    if num_classes > MAX_SHAPE_CLASSES {
        return Err(SamError::config(format!(
            "requested {num_classes} classes but only {MAX_SHAPE_CLASSES} shape×color combinations exist"
        )));
    }
    let classes: Vec<usize> = (0..num_classes).collect();
    generate_shapes_classes(&classes, &ShapesConfig::new(image_size, samples_per_class, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn argmax(v: &[f32]) -> usize {
        v.iter()
            .enumerate()
            .fold((0, f32::MIN), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0
    }

    #[test]
    fn centered_shape_peaks_at_center() {
        let size = ImageSize::new(32, 32);
        let mut img = vec![0.3; 3 * size.pixels()];
        let meta =
            render_shape(&mut img, size, ShapeKind::Circle, [1.0, 0.0, 0.0], (16.0, 16.0), 6.0)
                .unwrap();
        assert_eq!(meta.centroid, (16.0, 16.0));
        let map = analytic_saliency(size, meta.centroid, default_sigma(size));
        assert_eq!(argmax(&map), 16 * 32 + 16);
    }

    #[test]
    fn generation_is_deterministic() {
        let size = ImageSize::new(16, 16);
        let a = generate_shapes_dataset(3, 4, size, 11).unwrap();
        let b = generate_shapes_dataset(3, 4, size, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_shapes_dataset(3, 4, size, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_histogram_is_uniform() {
        let ds = generate_shapes_dataset(10, 60, ImageSize::new(16, 16), 0).unwrap();
        assert_eq!(ds.len(), 600);
        let mut hist = BTreeMap::new();
        for s in ds.train.iter().chain(&ds.test) {
            *hist.entry(s.label).or_insert(0) += 1;
        }
        assert_eq!(hist.len(), 10);
        assert!(hist.values().all(|&n| n == 60));
    }

    #[test]
    fn too_many_classes_is_a_config_error() {
        let err = generate_shapes_dataset(65, 2, ImageSize::new(16, 16), 0).unwrap_err();
        assert!(matches!(err, SamError::Config(_)));
    }

    #[test]
    fn class_styles_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for c in 0..MAX_SHAPE_CLASSES {
            let (k, col) = class_style(c);
            assert!(seen.insert((k as usize, col.map(f32::to_bits))));
        }
    }

    #[test]
    fn saliency_argmax_inside_shape_box() {
        let ds = generate_shapes_dataset(8, 6, ImageSize::new(32, 32), 5).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            let meta = s.meta.unwrap();
            let idx = argmax(s.saliency.as_ref().unwrap());
            assert!(meta.bbox.contains(idx / 32, idx % 32), "{}", s.id);
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
