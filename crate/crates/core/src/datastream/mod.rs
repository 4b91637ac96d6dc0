//! Task streams for online continual learning.
//!
//! A [`TaskStream`] is an ordered list of tasks with pairwise-disjoint class
//! sets. Streams are built from a [`LabeledCollection`] (either the synthetic
//! shapes generator or a manifest on disk) and carry a target saliency map per
//! sample once [`attach_saliency`] has run.

mod io;
mod oracle;
mod shapes;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SamError};
use crate::nn::rng_for;

pub use io::{
    load_manifest, read_image, read_map, read_manifest, write_manifest, write_pgm, write_png,
    write_raw_f32, ManifestEntry,
};
pub use oracle::{attach_saliency, SaliencyOracle};
pub use shapes::{
    analytic_saliency, default_sigma, generate_shapes_classes, generate_shapes_dataset,
    render_shape, ShapeKind, ShapesConfig, MAX_SHAPE_CLASSES,
};

/// Spatial size of images and saliency maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Axis-aligned box in pixel indices, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row <= self.bottom && col >= self.left && col <= self.right
    }
}

/// Ground truth recorded by the shapes generator for one rendered object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeMeta {
    /// (row, col) centroid of the rendered shape mask.
    pub centroid: (f32, f32),
    pub bbox: BBox,
}

/// One stream element: image, label, target saliency and owning task.
///
/// Images are stored channel-major (3×H×W), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Vec<f32>,
    pub label: usize,
    pub saliency: Option<Vec<f32>>,
    pub task_id: usize,
    pub meta: Option<ShapeMeta>,
}

impl Sample {
    pub fn check(&self, size: ImageSize) -> Result<()> {
        if self.image.len() != 3 * size.pixels() {
            return Err(SamError::shape(format!(
                "sample `{}`: image has {} values, expected 3×{}×{}",
                self.id,
                self.image.len(),
                size.height,
                size.width
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SamError::data(format!("sample `{}`: pixel outside [0,1]", self.id)));
        }
        if let Some(map) = &self.saliency {
            if map.len() != size.pixels() {
                return Err(SamError::shape(format!(
                    "sample `{}`: saliency has {} cells, expected {}",
                    self.id,
                    map.len(),
                    size.pixels()
                )));
            }
            if map.iter().any(|v| *v < 0.0 || !v.is_finite()) || !map.iter().any(|v| *v > 0.0) {
                return Err(SamError::data(format!(
                    "sample `{}`: saliency must be non-negative with positive mass",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// A labeled image collection with a per-class train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCollection {
    pub size: ImageSize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl LabeledCollection {
    pub fn classes(&self) -> BTreeSet<usize> {
        self.train.iter().chain(&self.test).map(|s| s.label).collect()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub size: ImageSize,
    pub classes_per_task: usize,
    /// Number of logits the classifier head must expose (max label + 1).
    pub num_classes: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn class_partition(&self) -> Vec<Vec<usize>> {
        self.tasks.iter().map(|t| t.classes.clone()).collect()
    }

    pub fn all_classes(&self) -> BTreeSet<usize> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    pub fn train_len(&self) -> usize {
        self.tasks.iter().map(|t| t.train.len()).sum()
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &Sample> {
        self.tasks.iter().flat_map(|t| t.test.iter())
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> {
        self.tasks.iter().flat_map(|t| t.train.iter())
    }

    /// Checks disjointness of task class sets and label membership.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for task in &self.tasks {
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(SamError::data(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
            for s in task.train.iter().chain(&task.test) {
                if s.task_id != task.id || !task.classes.contains(&s.label) {
                    return Err(SamError::data(format!(
                        "sample `{}` (label {}) does not belong to task {}",
                        s.id, s.label, task.id
                    )));
                }
                if !ids.insert(s.id.as_str()) {
                    return Err(SamError::data(format!("sample `{}` appears twice", s.id)));
                }
                s.check(self.size)?;
            }
        }
        Ok(())
    }
}

/// Splits a collection's classes into `num_tasks` disjoint groups.
///
/// Class ids are shuffled with `seed` and chunked consecutively. Only the
/// first `num_tasks * classes_per_task` shuffled classes enter the benchmark.
pub fn build_split_benchmark(
    dataset: &LabeledCollection,
    num_tasks: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(SamError::config("num_tasks must be ≥ 1"));
    }
    if classes_per_task < 2 {
        return Err(SamError::config("classes_per_task must be ≥ 2"));
    }
    let available = dataset.classes();
    let needed = num_tasks * classes_per_task;
    if available.len() < needed {
        return Err(SamError::config(format!(
            "benchmark needs {needed} classes ({num_tasks} tasks × {classes_per_task}) \
             but the dataset has {} (short by {})",
            available.len(),
            needed - available.len()
        )));
    }

    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for s in &dataset.train {
        per_class.entry(s.label).or_default().0 += 1;
    }
    for s in &dataset.test {
        per_class.entry(s.label).or_default().1 += 1;
    }

    let mut order: Vec<usize> = available.into_iter().collect();
    order.shuffle(&mut rng_for(seed, "class-partition"));
    order.truncate(needed);

    for c in &order {
        let (tr, te) = per_class[c];
        if tr == 0 || te == 0 {
            return Err(SamError::config(format!(
                "class {c} needs at least one train and one test sample (has {tr} train, {te} test)"
            )));
        }
    }

    let mut tasks = Vec::with_capacity(num_tasks);
    for (id, chunk) in order.chunks(classes_per_task).enumerate() {
        let mut classes = chunk.to_vec();
        classes.sort_unstable();
        let pick = |samples: &[Sample]| -> Vec<Sample> {
            samples
                .iter()
                .filter(|s| classes.contains(&s.label))
                .map(|s| Sample {
                    task_id: id,
                    ..s.clone()
                })
                .collect()
        };
        let train = pick(&dataset.train);
        let test = pick(&dataset.test);
        tasks.push(Task {
            id,
            classes,
            train,
            test,
        });
    }

    let num_classes = tasks
        .iter()
        .flat_map(|t| t.classes.iter())
        .max()
        .map_or(0, |m| m + 1);
    Ok(TaskStream {
        size: dataset.size,
        classes_per_task,
        num_classes,
        tasks,
    })
}

/// Adds a class-dependent brightness offset of `brightness_scale·(c+1)/255`
/// to every training pixel, saturating at 1. Test partitions are untouched.
pub fn inject_spurious_features(stream: &TaskStream, brightness_scale: f32) -> TaskStream {
    let mut out = stream.clone();
    if brightness_scale == 0.0 {
        return out;
    }
    for task in &mut out.tasks {
        for s in &mut task.train {
            let offset = brightness_scale * (s.label as f32 + 1.0) / 255.0;
            for v in &mut s.image {
                *v = (*v + offset).min(1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_collection(classes: usize, per_class: usize) -> LabeledCollection {
        let size = ImageSize::new(2, 2);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..classes {
            for k in 0..per_class {
                let s = Sample {
                    id: format!("c{c}_{k}"),
                    image: vec![0.9; 12],
                    label: c,
                    saliency: Some(vec![1.0; 4]),
                    task_id: 0,
                    meta: None,
                };
                if k == 0 {
                    test.push(s);
                } else {
                    train.push(s);
                }
            }
        }
        LabeledCollection { size, train, test }
    }

    #[test]
    fn twenty_five_way_tasks_from_hundred_classes() {
        let ds = toy_collection(100, 2);
        let stream = build_split_benchmark(&ds, 20, 5, 0).unwrap();
        assert_eq!(stream.num_tasks(), 20);
        assert!(stream.tasks.iter().all(|t| t.classes.len() == 5));
        assert_eq!(stream.all_classes().len(), 100);
        stream.validate().unwrap();
    }

    #[test]
    fn single_task_is_the_whole_dataset() {
        let ds = toy_collection(10, 3);
        let stream = build_split_benchmark(&ds, 1, 10, 3).unwrap();
        assert_eq!(stream.num_tasks(), 1);
        assert_eq!(stream.tasks[0].train.len(), ds.train.len());
        assert_eq!(stream.tasks[0].test.len(), ds.test.len());
    }

    #[test]
    fn seeds_change_the_partition_but_keep_it_valid() {
        let ds = toy_collection(10, 2);
        let a = build_split_benchmark(&ds, 5, 2, 0).unwrap();
        let b = build_split_benchmark(&ds, 5, 2, 1).unwrap();
        assert_ne!(a.class_partition(), b.class_partition());
        for s in [&a, &b] {
            let mut all: Vec<usize> = s.class_partition().concat();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
            s.validate().unwrap();
        }
    }

    #[test]
    fn insufficient_classes_names_the_deficit() {
        let ds = toy_collection(6, 2);
        let err = build_split_benchmark(&ds, 5, 2, 0).unwrap_err().to_string();
        assert!(err.contains("short by 4"), "{err}");
    }

    #[test]
    fn spurious_offset_follows_class_label() {
        let ds = toy_collection(10, 2);
        let stream = build_split_benchmark(&ds, 5, 2, 0).unwrap();
        let biased = inject_spurious_features(&stream, 5.0);
        for (t0, t1) in stream.tasks.iter().zip(&biased.tasks) {
            assert_eq!(t0.test, t1.test);
            for (a, b) in t0.train.iter().zip(&t1.train) {
                let expected = (0.9 + 5.0 * (a.label as f32 + 1.0) / 255.0).min(1.0);
                assert!(b.image.iter().all(|v| (*v - expected).abs() < 1e-7));
            }
        }
        let c9 = biased
            .train_samples()
            .find(|s| s.label == 9)
            .expect("class 9 present");
        assert_eq!(c9.image[0], 1.0);
        let c0 = biased.train_samples().find(|s| s.label == 0).unwrap();
        assert!((c0.image[0] - (0.9 + 5.0 / 255.0)).abs() < 1e-7);
    }

    #[test]
    fn zero_scale_is_identity() {
        let ds = toy_collection(4, 2);
        let stream = build_split_benchmark(&ds, 2, 2, 0).unwrap();
        assert_eq!(inject_spurious_features(&stream, 0.0), stream);
    }
}
