#![allow(dead_code)]

use csicl_core::data::{generate, Dataset, SynthConfig};
use csicl_core::distill::DistillConfig;
use csicl_core::trainer::{Learner, SessionOptions, TrainConfig};

pub fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        distill: DistillConfig {
            epochs: 2,
            ..DistillConfig::default()
        },
        seed: 3,
        ..TrainConfig::default()
    }
}

/// Six synthetic classes, ten samples each.
pub fn corpus() -> Dataset {
    generate(&SynthConfig {
        classes: 6,
        per_class: 10,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn task(data: &Dataset, k: usize) -> Dataset {
    data.filter_classes(&[2 * k, 2 * k + 1])
}

/// A learner that has seen `tasks` two-class tasks.
pub fn learner(tasks: usize) -> Learner {
    let data = corpus();
    let mut l = Learner::new(data.n, data.d, &quick_config(), SessionOptions::default()).unwrap();
    for k in 0..tasks {
        l.learn(&task(&data, k), &mut Vec::new()).unwrap();
    }
    l
}
