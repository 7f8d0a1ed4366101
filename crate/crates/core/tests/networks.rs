mod common;

use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskdist::idx::load_mnist_split;
use taskdist::networks::{
    self, accuracy, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, NetworkSpec, Optimizer,
    TrainConfig,
};
use taskdist::search_space::{instantiate, sample_cell, OperationKind};
use taskdist::tasks::{derive_task, generate_synthetic_family, standard_family, LabelMap, SyntheticFamilySpec};
use taskdist::tensor::total_len;
use taskdist::Error;

fn cfg(optimizer: Optimizer, epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        optimizer,
        epochs,
        batch_size,
        seed: 4,
        batch_order_seed: 5,
    }
}

#[test]
fn linear_model_separates_noise_free_blobs() {
    let spec = SyntheticFamilySpec::with_random_centers(vec![1, 4, 4], 3, 1.0, 0.0, 20, 8);
    let split = generate_synthetic_family(&spec).unwrap();
    let task = derive_task(&split, LabelMap::Identity, 3, "blobs").unwrap();
    let linear = NetworkSpec::from_name("mlp-0x1", &[1, 4, 4], 3).unwrap();
    let net = networks::train(&linear, &task, &cfg(Optimizer::adam(0.05), 50, 8)).unwrap();
    assert_eq!(net.log.len(), 50);
    assert_eq!(net.log.last().unwrap().accuracy, 1.0);
    assert_eq!(networks::performance(&net, &task).unwrap(), 1.0);
}

#[test]
fn full_batch_descent_on_a_linear_model_never_increases_loss() {
    let task = common::separable_task(20, 3);
    let linear = NetworkSpec::from_name("mlp-0x1", &common::SHAPE, 2).unwrap();
    let n = task.data.train.len();
    let net = networks::train(&linear, &task, &cfg(Optimizer::sgd(0.05), 40, n)).unwrap();
    for w in net.log.windows(2) {
        assert!(w[1].loss <= w[0].loss + 1e-12, "{} -> {}", w[0].loss, w[1].loss);
    }
}

#[test]
fn same_spec_gives_structurally_similar_networks() {
    let skeleton = common::small_skeleton();
    let cell = sample_cell(3, &OperationKind::ALL, 7).unwrap();
    for spec in [
        NetworkSpec::from_name("mlp-2x8", &common::SHAPE, 5).unwrap(),
        NetworkSpec::from_name("conv-2x4", &common::SHAPE, 5).unwrap(),
        instantiate(&skeleton, &cell, &common::SHAPE, 5).unwrap(),
    ] {
        let a = spec.build_graph(1).unwrap();
        let b = spec.build_graph(2).unwrap();
        let shapes = |g: &taskdist::ComputeGraph| -> Vec<(String, Vec<usize>)> {
            g.params()
                .iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect()
        };
        assert_eq!(shapes(&a), shapes(&b), "{spec}");
        assert_ne!(a.params(), b.params(), "{spec}: seeds should differ");
        assert_eq!(spec.parameter_count().unwrap(), total_len(a.params()));
        assert_eq!(a.output_shape(), &[5]);
    }
}

#[test]
fn performance_stays_in_unit_interval_and_chance_is_half() {
    let family = common::family(20, 1.0, 6);
    let spec = NetworkSpec::from_name("mlp-1x8", &common::SHAPE, 10).unwrap();
    for task in &family {
        let net = networks::train(&spec, task, &cfg(Optimizer::adam(5e-3), 2, 16)).unwrap();
        let p = networks::performance(&net, task).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    // A uniform random guesser on a balanced two-class test set.
    let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let mut mean = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let guesses: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        mean += accuracy(&guesses, &labels) / 20.0;
    }
    assert!((mean - 0.5).abs() < 0.1, "{mean}");
    assert_eq!(accuracy(&labels, &labels), 1.0);
    let wrong: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
    assert_eq!(accuracy(&wrong, &labels), 0.0);
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    let task = &common::family(20, 1.0, 2)[2];
    let spec = NetworkSpec::from_name("conv-1x4", &common::SHAPE, 10).unwrap();
    let net = networks::train(&spec, task, &cfg(Optimizer::adam(5e-3), 2, 16)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path, &spec).unwrap();
    assert_eq!(back, net);
    for (a, b) in net.params.values().zip(back.params.values()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(
        networks::performance(&back, task).unwrap(),
        networks::performance(&net, task).unwrap()
    );

    let bytes = fs::read(&path).unwrap();
    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut], &spec).is_err(), "cut at {cut}");
    }
    let mut bumped = bytes.clone();
    bumped[8] = bumped[8].wrapping_add(1);
    assert!(matches!(decode_checkpoint(&bumped, &spec), Err(Error::Checkpoint(m)) if m.contains("version")));
    let other = NetworkSpec::from_name("conv-1x5", &common::SHAPE, 10).unwrap();
    assert!(matches!(decode_checkpoint(&bytes, &other), Err(Error::SpecMismatch(_))));
    let mut extra = encode_checkpoint(&net);
    extra.push(0);
    assert!(decode_checkpoint(&extra, &spec).is_err());
}

#[test]
fn derived_tasks_keep_sample_order() {
    let base = common::base_split(10, 1.0, 1);
    let family = standard_family(&base).unwrap();
    assert_eq!(
        family.iter().map(|t| t.num_classes).collect::<Vec<_>>(),
        vec![2, 2, 5, 10]
    );
    for task in &family {
        assert_eq!(task.data.train.inputs, base.train.inputs);
        assert_eq!(task.data.test.inputs, base.test.inputs);
        for (raw, mapped) in base.train.labels.iter().zip(&task.data.train.labels) {
            assert_eq!(*mapped, task.label_map.apply(*raw));
        }
    }
    assert_eq!(family[2].label_map.apply(7), 4);
    assert_eq!(family[0].label_map.apply(0), 1);
    assert_eq!(family[1].label_map.apply(0), 0);
}

#[test]
fn balanced_tasks_have_uniform_histograms() {
    let family = common::family(30, 1.0, 2);
    for (i, task) in family.iter().enumerate() {
        let per_class = task.min_class_count();
        let balanced = task.balanced(per_class, i as u64).unwrap();
        let hist = balanced.data.train.class_histogram(task.num_classes);
        assert!(hist.iter().all(|&h| h == per_class), "{}: {hist:?}", task.name);
        assert_eq!(balanced.data.test, task.data.test);
        assert_eq!(task.balanced(per_class, i as u64).unwrap(), balanced);
        assert!(task.balanced(per_class + 1, 0).is_err());
    }
}

fn idx_images(count: u32, rows: u32, cols: u32, seed: u8) -> Vec<u8> {
    let mut out = 0x0000_0803u32.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend((0..count * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)));
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = 0x0000_0801u32.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[test]
fn mnist_style_files_load_into_a_split() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("train-images"), idx_images(10, 3, 2, 0)).unwrap();
    fs::write(p("train-labels"), idx_labels(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9])).unwrap();
    fs::write(p("test-images"), idx_images(4, 3, 2, 9)).unwrap();
    fs::write(p("test-labels"), idx_labels(&[9, 0, 6, 3])).unwrap();
    let split = load_mnist_split(
        &p("train-images"),
        &p("train-labels"),
        &p("test-images"),
        &p("test-labels"),
    )
    .unwrap();
    assert_eq!(split.train.inputs.shape(), &[10, 1, 3, 2]);
    assert_eq!(split.test.inputs.shape(), &[4, 1, 3, 2]);
    assert_eq!(split.test.labels, vec![9, 0, 6, 3]);
    assert_eq!(split.train.inputs.data()[1], 31.0 / 255.0);
    assert!(split.train.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let family = standard_family(&split).unwrap();
    assert_eq!(family[1].data.test.labels, vec![0, 0, 1, 0]);

    fs::write(p("short-labels"), idx_labels(&[1, 2])).unwrap();
    assert!(load_mnist_split(
        &p("train-images"),
        &p("short-labels"),
        &p("test-images"),
        &p("test-labels")
    )
    .is_err());
    assert!(load_mnist_split(
        &p("train-labels"),
        &p("train-labels"),
        &p("test-images"),
        &p("test-labels")
    )
    .is_err());
}
