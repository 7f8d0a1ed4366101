//! Datasets, derived-label tasks, balanced subsampling and synthetic
//! Gaussian-blob task families.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs with one label per sample along the leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.batch_size() != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.inputs.sample_shape()
    }

    pub fn select(&self, indices: &[usize]) -> Samples {
        Samples {
            inputs: self.inputs.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-class sample counts for classes `0..num_classes`.
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                h[l] += 1;
            }
        }
        h
    }

    /// Splits off the trailing `fraction` of every class (order preserved
    /// inside both parts). Each class keeps at least one sample on the left.
    pub fn split_per_class(&self, fraction: f64, num_classes: usize) -> (Samples, Samples) {
        let hist = self.class_histogram(num_classes);
        let keep: Vec<usize> = hist
            .iter()
            .map(|&n| n - ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1)))
            .collect();
        let mut seen = vec![0usize; num_classes];
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] < keep[l] {
                left.push(i);
            } else {
                right.push(i);
            }
            seen[l] += 1;
        }
        (self.select(&left), self.select(&right))
    }
}

/// Disjoint train/test samples sharing one input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Samples,
    pub test: Samples,
    pub num_classes: usize,
}

impl DatasetSplit {
    pub fn new(train: Samples, test: Samples, num_classes: usize) -> Result<Self> {
        if !test.is_empty() && train.sample_shape() != test.sample_shape() {
            return Err(Error::shape(format!(
                "train inputs {:?} vs test inputs {:?}",
                train.sample_shape(),
                test.sample_shape()
            )));
        }
        if let Some(&l) = train.labels.iter().chain(&test.labels).find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            train,
            test,
            num_classes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        self.train.sample_shape()
    }
}

/// Exactly `per_class` training samples of every class, drawn without
/// replacement; the test split is returned unchanged.
pub fn balanced_subsample(split: &DatasetSplit, per_class: usize, seed: u64) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_class * split.num_classes);
    for class in 0..split.num_classes {
        let mut members: Vec<usize> = split
            .train
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < per_class {
            return Err(Error::InsufficientSamples {
                class,
                available: members.len(),
                requested: per_class,
            });
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.sort_unstable();
    Ok(DatasetSplit {
        train: split.train.select(&chosen),
        test: split.test.clone(),
        num_classes: split.num_classes,
    })
}

/// Raw label → task label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelMap {
    Identity,
    /// Raw labels in the set map to 1, everything else to 0.
    Detect(BTreeSet<usize>),
    /// `keep[i]` maps to `i`; any other raw label maps to `keep.len()`.
    KeepOrElse(Vec<usize>),
}

impl LabelMap {
    pub fn detect(labels: &[usize]) -> Self {
        LabelMap::Detect(labels.iter().copied().collect())
    }

    pub fn apply(&self, raw: usize) -> usize {
        match self {
            LabelMap::Identity => raw,
            LabelMap::Detect(set) => usize::from(set.contains(&raw)),
            LabelMap::KeepOrElse(keep) => keep.iter().position(|&k| k == raw).unwrap_or(keep.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub num_classes: usize,
    pub label_map: LabelMap,
    pub data: DatasetSplit,
}

impl Task {
    /// Balances the training split of this task (test split untouched).
    pub fn balanced(&self, per_class: usize, seed: u64) -> Result<Task> {
        Ok(Task {
            data: balanced_subsample(&self.data, per_class, seed)?,
            ..self.clone()
        })
    }

    /// Smallest per-class training count, the largest feasible balanced size.
    pub fn min_class_count(&self) -> usize {
        self.data
            .train
            .class_histogram(self.num_classes)
            .into_iter()
            .min()
            .unwrap_or(0)
    }

    pub fn input_shape(&self) -> &[usize] {
        self.data.input_shape()
    }
}

/// Relabels `base` through `label_map` without reordering samples.
pub fn derive_task(base: &DatasetSplit, label_map: LabelMap, num_classes: usize, name: &str) -> Result<Task> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("task {name} needs at least 2 classes")));
    }
    let remap = |s: &Samples| -> Result<Samples> {
        let labels = s
            .labels
            .iter()
            .map(|&raw| {
                let l = label_map.apply(raw);
                if l >= num_classes {
                    Err(Error::invalid(format!(
                        "task {name}: raw label {raw} maps to {l}, outside {num_classes} classes"
                    )))
                } else {
                    Ok(l)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Samples {
            inputs: s.inputs.clone(),
            labels,
        })
    };
    let data = DatasetSplit::new(remap(&base.train)?, remap(&base.test)?, num_classes)?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::EmptyData(format!("task {name} has an empty split")));
    }
    Ok(Task {
        name: name.to_string(),
        num_classes,
        label_map,
        data,
    })
}

/// The four-task family: detect raw class 0, detect raw class 6, the
/// {0,1,2,3,else} five-way task, and full classification.
pub fn standard_family(base: &DatasetSplit) -> Result<Vec<Task>> {
    Ok(vec![
        derive_task(base, LabelMap::detect(&[0]), 2, "task0")?,
        derive_task(base, LabelMap::detect(&[6]), 2, "task1")?,
        derive_task(base, LabelMap::KeepOrElse(vec![0, 1, 2, 3]), 5, "task2")?,
        derive_task(base, LabelMap::Identity, base.num_classes, "task3")?,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamilySpec {
    /// Per-sample input shape; the input dimension is its product.
    pub input_shape: Vec<usize>,
    pub class_centers: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticFamilySpec {
    /// Centers drawn i.i.d. from N(0, center_scale²) under `seed`.
    pub fn with_random_centers(
        input_shape: Vec<usize>,
        num_classes: usize,
        center_scale: f64,
        noise_scale: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Self {
        let dim: usize = input_shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c3a7);
        let class_centers = (0..num_classes)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        center_scale * z
                    })
                    .collect()
            })
            .collect();
        Self {
            input_shape,
            class_centers,
            noise_scale,
            samples_per_class,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Gaussian blobs around the class centers with a per-class 80/20
/// train/test split. Samples are interleaved by class.
pub fn generate_synthetic_family(spec: &SyntheticFamilySpec) -> Result<DatasetSplit> {
    let k = spec.class_centers.len();
    let dim = spec.input_dim();
    if k < 2 {
        return Err(Error::invalid("synthetic family needs at least 2 classes"));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::invalid("samples_per_class must be at least 1"));
    }
    if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
        return Err(Error::invalid(format!(
            "noise_scale {} must be finite and >= 0",
            spec.noise_scale
        )));
    }
    if let Some(c) = spec.class_centers.iter().position(|c| c.len() != dim) {
        return Err(Error::shape(format!("center {c} is not {dim}-dimensional")));
    }
    if spec.noise_scale == 0.0 {
        for a in 0..k {
            for b in a + 1..k {
                if spec.class_centers[a] == spec.class_centers[b] {
                    return Err(Error::invalid(format!(
                        "classes {a} and {b} share a center with zero noise"
                    )));
                }
            }
        }
    }

    let n_test = spec.samples_per_class / 5;
    let n_train = spec.samples_per_class - n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for i in 0..spec.samples_per_class {
        for (class, center) in spec.class_centers.iter().enumerate() {
            let dest = if i < n_train { &mut train } else { &mut test };
            dest.0.extend(center.iter().map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + spec.noise_scale * z
            }));
            dest.1.push(class);
        }
    }
    let build = |(data, labels): (Vec<f64>, Vec<usize>)| -> Result<Samples> {
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(&spec.input_shape);
        Samples::new(Tensor::new(shape, data)?, labels)
    };
    DatasetSplit::new(build(train)?, build(test)?, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split_from_labels(train: &[usize], test: &[usize], k: usize) -> DatasetSplit {
        let mk = |labels: &[usize]| {
            let data = (0..labels.len()).map(|i| i as f64).collect();
            Samples::new(Tensor::new(vec![labels.len(), 1], data).unwrap(), labels.to_vec()).unwrap()
        };
        DatasetSplit::new(mk(train), mk(test), k).unwrap()
    }

    #[test]
    fn balanced_subsample_forced_counts() {
        let split = split_from_labels(&[0, 0, 0, 1, 1], &[1], 2);
        let out = balanced_subsample(&split, 1, 9).unwrap();
        assert_eq!(out.train.class_histogram(2), vec![1, 1]);
        assert_eq!(out.test, split.test);
    }

    #[test]
    fn balanced_subsample_names_short_class() {
        let split = split_from_labels(&[0, 1], &[0], 2);
        match balanced_subsample(&split, 2, 0) {
            Err(Error::InsufficientSamples {
                class,
                available,
                requested,
            }) => {
                assert_eq!((class, available, requested), (0, 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn balanced_subsample_is_seeded() {
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let split = split_from_labels(&labels, &[0], 3);
        let a = balanced_subsample(&split, 5, 42).unwrap();
        let b = balanced_subsample(&split, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.class_histogram(3), vec![5, 5, 5]);
    }

    #[test]
    fn derive_detect_and_else_maps() {
        let split = split_from_labels(&[0, 3, 0], &[7], 10);
        let t = derive_task(&split, LabelMap::detect(&[0]), 2, "d0").unwrap();
        assert_eq!(t.data.train.labels, vec![1, 0, 1]);
        assert_eq!(t.data.train.inputs, split.train.inputs);
        let t = derive_task(&split, LabelMap::KeepOrElse(vec![0, 1, 2, 3]), 5, "five").unwrap();
        assert_eq!(t.data.test.labels, vec![4]);
        let t = derive_task(&split, LabelMap::Identity, 10, "all").unwrap();
        assert_eq!(t.data.train.labels, split.train.labels);
    }

    #[test]
    fn derive_rejects_out_of_range_map() {
        let split = split_from_labels(&[0, 9], &[1], 10);
        assert!(derive_task(&split, LabelMap::Identity, 5, "bad").is_err());
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticFamilySpec::with_random_centers(vec![4], 3, 1.0, 0.5, 10, 7);
        let a = generate_synthetic_family(&spec).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (24, 6));
        let b = generate_synthetic_family(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_rejects_degenerate_centers() {
        let spec = SyntheticFamilySpec {
            input_shape: vec![2],
            class_centers: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            noise_scale: 0.0,
            samples_per_class: 3,
            seed: 0,
        };
        assert!(generate_synthetic_family(&spec).is_err());
    }

    #[test]
    fn split_per_class_keeps_every_class() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let s = split_from_labels(&labels, &[0], 2).train;
        let (a, b) = s.split_per_class(0.2, 2);
        assert_eq!(a.class_histogram(2), vec![8, 8]);
        assert_eq!(b.class_histogram(2), vec![2, 2]);
    }
}
