#![allow(dead_code)]

use taskdist::search_space::{Skeleton, Stage};
use taskdist::tasks::{
    derive_task, generate_synthetic_family, standard_family, DatasetSplit, LabelMap, SyntheticFamilySpec, Task,
};

pub const SHAPE: [usize; 3] = [1, 6, 6];

/// Ten Gaussian blobs on 1x6x6 inputs.
pub fn base_split(samples_per_class: usize, noise: f64, seed: u64) -> DatasetSplit {
    let spec = SyntheticFamilySpec::with_random_centers(SHAPE.to_vec(), 10, 1.0, noise, samples_per_class, seed);
    generate_synthetic_family(&spec).unwrap()
}

pub fn family(samples_per_class: usize, noise: f64, seed: u64) -> Vec<Task> {
    standard_family(&base_split(samples_per_class, noise, seed)).unwrap()
}

/// A two-class task that a small conv network separates easily.
pub fn separable_task(samples_per_class: usize, seed: u64) -> Task {
    let spec = SyntheticFamilySpec::with_random_centers(SHAPE.to_vec(), 2, 1.0, 0.6, samples_per_class, seed);
    let split = generate_synthetic_family(&spec).unwrap();
    derive_task(&split, LabelMap::Identity, 2, "separable").unwrap()
}

pub fn small_skeleton() -> Skeleton {
    Skeleton {
        stem_channels: 4,
        stages: vec![Stage::Cell, Stage::Reduce],
        ..Skeleton::default()
    }
}
