#![allow(dead_code)]

use sam_core::harness::ExperimentConfig;

/// 4 classes in 2 tasks, 8 training images per class at 16×16, width-4
/// backbone, no pre-training: a stream of 2 × 16 images.
pub fn tiny(extra: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.apply_kv_str(
        "benchmark.classes = 4
         benchmark.tasks = 2
         benchmark.classes_per_task = 2
         benchmark.samples_per_class = 10
         benchmark.height = 16
         benchmark.width = 16
         benchmark.distractors = 1
         model.width = 4
         model.init = scratch
         pretrain.epochs = 0
         train.seeds = 0",
    )
    .unwrap();
    c.apply_kv_str(&extra.replace(';', "\n")).unwrap();
    c.validate().unwrap();
    c
}

pub fn flat(t: &candle_core::Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}
