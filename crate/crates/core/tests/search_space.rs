mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use proptest::prelude::*;
use taskdist::fuse::parse_compact;
use taskdist::networks::build_skeleton_graph;
use taskdist::search_space::{
    count_cells, instantiate, parse_cell, sample_cell, search_space_for, BaselineDictionary, BaselineEntry, CellCount,
    CellSampler, CellSpec, OperationKind, Skeleton, Stage, MAX_NODES, MIN_NODES,
};
use taskdist::tensor::one_hot;
use taskdist::{Error, Tensor};

fn random_inputs(batch: usize, seed: u64) -> Tensor {
    let split = common::base_split(batch.div_ceil(10).max(1) * 5, 1.0, seed);
    split.train.inputs.slice_batch(0, batch)
}

/// Every assignment of `ops` to the edges of an `n`-node cell.
fn enumerate(n: usize, ops: &[OperationKind]) -> Vec<CellSpec> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let total = ops.len().pow(pairs.len() as u32);
    (0..total)
        .map(|mut code| {
            let mut edges = BTreeMap::new();
            for &p in &pairs {
                edges.insert(p, ops[code % ops.len()]);
                code /= ops.len();
            }
            CellSpec::new(n, edges).unwrap()
        })
        .collect()
}

#[test]
fn count_matches_brute_force_enumeration() {
    for n in 2..=3 {
        for m in 1..=3 {
            let ops = &OperationKind::ALL[..m];
            let distinct: BTreeSet<String> = enumerate(n, ops).iter().map(CellSpec::serialize).collect();
            assert_eq!(
                count_cells(n, m).unwrap(),
                CellCount::Exact(distinct.len() as u64),
                "n={n} m={m}"
            );
        }
    }
    assert_eq!(count_cells(4, 10).unwrap(), CellCount::Exact(1_000_000));
    // 10^15 still fits; 10^21 (n = 7 is outside the sampler, but counting is fine) does not.
    assert_eq!(count_cells(6, 10).unwrap(), CellCount::Exact(10u64.pow(15)));
    assert_eq!(
        count_cells(7, 10).unwrap(),
        CellCount::Big(format!("1{}", "0".repeat(21)))
    );
}

#[test]
fn sampling_is_uniform_over_a_small_space() {
    let ops = [OperationKind::Identity, OperationKind::Conv3x3];
    let sampler = CellSampler::new(3, &ops).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(17);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for _ in 0..10_000 {
        *counts.entry(sampler.sample_with(&mut rng).serialize()).or_default() += 1;
    }
    assert_eq!(counts.len(), 8);
    for (cell, c) in &counts {
        assert!((1100..=1400).contains(c), "{c} draws of\n{cell}");
    }
    let chi2: f64 = counts.values().map(|&c| (c as f64 - 1250.0).powi(2) / 1250.0).sum();
    // 99.9th percentile of chi-square with 7 degrees of freedom.
    assert!(chi2 < 24.32, "chi2 = {chi2}");
}

#[test]
fn every_sampled_cell_validates_and_runs() {
    let skeleton = Skeleton {
        stem_channels: 3,
        stages: vec![Stage::Cell, Stage::Reduce, Stage::Cell],
        ..Skeleton::default()
    };
    let x = random_inputs(4, 1);
    let y = one_hot(&[0, 1, 2, 3], 5).unwrap();
    for n in MIN_NODES..=MAX_NODES {
        let sampler = CellSampler::full(n).unwrap();
        for seed in 0..100 {
            let cell = sampler.sample(seed);
            assert_eq!(cell.num_edges(), n * (n - 1) / 2);
            CellSpec::new(n, cell.edges().clone()).unwrap();
            let spec = instantiate(&skeleton, &cell, &common::SHAPE, 5).unwrap();
            let mut graph = spec.build_graph(seed).unwrap();
            let loss = graph
                .forward(&x, &y)
                .unwrap_or_else(|e| panic!("n={n} seed={seed}: {e}"));
            assert!(loss.is_finite());
            let grads = graph.backward().unwrap();
            assert!(grads.values().all(|g| g.is_finite()));
        }
    }
}

#[test]
fn all_identity_cell_matches_the_bare_skeleton() {
    let skeleton = Skeleton::default();
    let x = random_inputs(6, 2);
    for n in MIN_NODES..=MAX_NODES {
        let cell = CellSpec::uniform(n, OperationKind::Identity).unwrap();
        let bare = build_skeleton_graph(&skeleton.without_cells(), &common::SHAPE, 10, 9).unwrap();
        let mut with_cells = instantiate(&skeleton, &cell, &common::SHAPE, 10)
            .unwrap()
            .build_graph(0)
            .unwrap();
        with_cells.set_params(bare.params().clone()).unwrap();
        let a = bare.predict(&x).unwrap();
        let b = with_cells.predict(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-9, "n={n}: {u} vs {v}");
        }
    }
}

#[test]
fn all_zero_cell_makes_logits_input_independent() {
    let skeleton = common::small_skeleton();
    let cell = CellSpec::uniform(3, OperationKind::Zero).unwrap();
    let graph = instantiate(&skeleton, &cell, &common::SHAPE, 4)
        .unwrap()
        .build_graph(5)
        .unwrap();
    let out = graph.predict(&random_inputs(5, 3)).unwrap();
    let first = &out.data()[..4];
    for row in out.data().chunks(4) {
        assert_eq!(row, first);
    }
}

#[test]
fn instantiate_rejects_inputs_too_small_for_reductions() {
    let skeleton = Skeleton {
        stages: vec![Stage::Cell, Stage::Reduce, Stage::Reduce, Stage::Reduce],
        ..Skeleton::default()
    };
    let cell = sample_cell(3, &OperationKind::ALL, 0).unwrap();
    assert!(instantiate(&skeleton, &cell, &[1, 4, 4], 10).is_err());
    assert!(instantiate(&skeleton, &cell, &[1, 8, 8], 10).is_ok());
}

#[test]
fn restricted_space_samples_only_stored_operations() {
    let ops = vec![OperationKind::Conv3x3, OperationKind::Identity];
    let cell = CellSpec::uniform(4, OperationKind::Identity).unwrap();
    let mut dict = BaselineDictionary::default();
    dict.insert(
        "task3",
        BaselineEntry {
            cell,
            ops: ops.clone(),
            skeleton: Skeleton::default(),
        },
    );

    let sampler = search_space_for(&dict, "task3", false).unwrap();
    assert_eq!(sampler.space_size(), CellCount::Exact(64));
    for seed in 0..200 {
        assert!(sampler.sample(seed).operations().iter().all(|o| ops.contains(o)));
    }
    assert!(matches!(
        search_space_for(&dict, "task9", false),
        Err(Error::UnknownTask(_))
    ));
    assert_eq!(search_space_for(&dict, "task3", true).unwrap().ops().len(), 10);
}

#[test]
fn empty_operation_set_is_rejected() {
    assert!(sample_cell(3, &[], 0).is_err());
    assert!(CellSampler::new(1, &OperationKind::ALL).is_err());
    assert!(CellSampler::new(MAX_NODES + 1, &OperationKind::ALL).is_err());
}

proptest! {
    #[test]
    fn cell_serialization_round_trips(n in MIN_NODES..=MAX_NODES, seed in any::<u64>(), m in 1usize..=10) {
        let cell = sample_cell(n, &OperationKind::ALL[..m], seed).unwrap();
        prop_assert_eq!(&parse_cell(&cell.serialize()).unwrap(), &cell);
        prop_assert_eq!(&parse_compact(&cell.compact()).unwrap(), &cell);
        prop_assert_eq!(sample_cell(n, &OperationKind::ALL[..m], seed).unwrap(), cell);
    }

    #[test]
    fn dictionary_round_trips(seeds in prop::collection::vec((MIN_NODES..=MAX_NODES, any::<u64>()), 1..5), stem in 1usize..16) {
        let mut dict = BaselineDictionary::default();
        let skeleton = Skeleton { stem_channels: stem, ..Skeleton::default() };
        for (i, (n, seed)) in seeds.iter().enumerate() {
            let cell = sample_cell(*n, &OperationKind::ALL, *seed).unwrap();
            dict.insert(&format!("task{i}"), BaselineEntry { ops: cell.operations(), cell, skeleton: skeleton.clone() });
        }
        prop_assert_eq!(BaselineDictionary::parse(&dict.serialize()).unwrap(), dict);
    }
}
