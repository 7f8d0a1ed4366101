mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskdist::fuse::{
    compare_reports, fuse, fuse_split, random_search, random_search_by, search_rounds, softmax, split_validation,
    Candidate, FuseConfig, RandomSearchConfig, SearchReport,
};
use taskdist::networks::{train_graph, Optimizer, TrainConfig};
use taskdist::search_space::{CellSampler, CellSpec, OperationKind};

use common::{separable_task, small_skeleton, SHAPE};

fn quick_cfg(seed: u64) -> FuseConfig {
    FuseConfig {
        num_candidates: 2,
        inner_steps: 10,
        alpha_tol: 1e-3,
        max_iters: 120,
        weight_optimizer: Optimizer::adam(1e-2),
        alpha_lr: 2.0,
        outer_budget: 2,
        val_fraction: 0.2,
        batch_size: 16,
        seed,
    }
}

fn conv_cell() -> CellSpec {
    CellSpec::uniform(3, OperationKind::Conv3x3).unwrap()
}

fn zero_cell() -> CellSpec {
    CellSpec::uniform(3, OperationKind::Zero).unwrap()
}

#[test]
fn single_candidate_matches_plain_training() {
    let task = separable_task(40, 1);
    let (train, val) = split_validation(&task.data.train, 2, 0.2).unwrap();
    let sk = small_skeleton();
    let epochs = 2;
    let bs = 16;
    let steps = epochs * train.len().div_ceil(bs);
    let cfg = FuseConfig {
        inner_steps: steps,
        max_iters: 10 * steps,
        batch_size: bs,
        ..quick_cfg(7)
    };
    let out = fuse_split(
        vec![Candidate::cell(&sk, &conv_cell(), &SHAPE, 2, 3).unwrap()],
        &train,
        &val,
        &cfg,
    )
    .unwrap();
    assert_eq!(out.winner, 0);
    assert!(out.converged);
    assert_eq!(out.iterations, steps);
    assert_eq!(out.weights(), vec![1.0]);

    let spec = out.candidates[0].spec.clone();
    let mut g = spec.build_graph(3).unwrap();
    let tc = TrainConfig {
        optimizer: cfg.weight_optimizer,
        epochs,
        batch_size: bs,
        seed: 3,
        batch_order_seed: 7,
    };
    train_graph(&mut g, &train, &tc).unwrap();
    assert_eq!(g.params(), out.candidates[0].params());
}

#[test]
fn mixture_weights_stay_a_distribution() {
    let task = separable_task(30, 2);
    let sk = small_skeleton();
    let cands = vec![
        Candidate::cell(&sk, &conv_cell(), &SHAPE, 2, 1).unwrap(),
        Candidate::cell(&sk, &zero_cell(), &SHAPE, 2, 2).unwrap(),
        Candidate::cell(
            &sk,
            &CellSpec::uniform(3, OperationKind::AvgPool3x3).unwrap(),
            &SHAPE,
            2,
            3,
        )
        .unwrap(),
    ];
    let out = fuse(cands, &task, &quick_cfg(1)).unwrap();
    assert!((out.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(out.alpha.len(), 3);
    assert_eq!(out.train_losses.len(), out.iterations);
    assert_eq!(out.val_losses.len(), out.iterations);
}

#[test]
fn trained_conv_cell_beats_all_zero_cell() {
    let sk = small_skeleton();
    let mut conv_wins = 0;
    for seed in 0..10u64 {
        let task = separable_task(40, 100 + seed);
        let cands = vec![
            Candidate::cell(&sk, &zero_cell(), &SHAPE, 2, seed).unwrap(),
            Candidate::cell(&sk, &conv_cell(), &SHAPE, 2, seed + 50).unwrap(),
        ];
        let out = fuse(cands, &task, &quick_cfg(seed)).unwrap();
        if out.winner == 1 {
            conv_wins += 1;
        }
    }
    assert!(conv_wins >= 9, "conv cell won {conv_wins}/10");
}

#[test]
fn duplicate_candidates_tie_to_lower_index() {
    let task = separable_task(30, 5);
    let sk = small_skeleton();
    let c = Candidate::cell(&sk, &conv_cell(), &SHAPE, 2, 9).unwrap();
    let out = fuse(vec![c.clone(), c], &task, &quick_cfg(2)).unwrap();
    assert_eq!(out.alpha[0], out.alpha[1]);
    assert_eq!(out.winner, 0);
}

fn warm_incumbent(train: &taskdist::tasks::Samples, val: &taskdist::tasks::Samples, cfg: &FuseConfig) -> Candidate {
    let c = Candidate::cell(&small_skeleton(), &conv_cell(), &SHAPE, 2, 1).unwrap();
    let warm = fuse_split(
        vec![c],
        train,
        val,
        &FuseConfig {
            inner_steps: 60,
            ..cfg.clone()
        },
    )
    .unwrap();
    warm.candidates.into_iter().next().unwrap()
}

#[test]
fn incumbent_survives_all_zero_round() {
    let task = separable_task(40, 8);
    let (train, val) = split_validation(&task.data.train, 2, 0.2).unwrap();
    let cfg = quick_cfg(4);
    let incumbent = warm_incumbent(&train, &val, &cfg);
    let zeros = CellSampler::new(3, &[OperationKind::Zero]).unwrap();
    let out = search_rounds(
        &zeros,
        &small_skeleton(),
        &train,
        &val,
        2,
        Some(incumbent),
        &FuseConfig { outer_budget: 1, ..cfg },
    )
    .unwrap();
    assert!(out.rounds[0].incumbent_kept());
    assert_eq!(out.incumbent.cell_spec(), Some(&conv_cell()));
}

#[test]
fn outer_loop_stops_once_incumbent_is_stable() {
    let task = separable_task(40, 9);
    let (train, val) = split_validation(&task.data.train, 2, 0.2).unwrap();
    let cfg = FuseConfig {
        outer_budget: 10,
        ..quick_cfg(3)
    };
    let incumbent = warm_incumbent(&train, &val, &cfg);
    let zeros = CellSampler::new(3, &[OperationKind::Zero]).unwrap();
    let out = search_rounds(&zeros, &small_skeleton(), &train, &val, 2, Some(incumbent), &cfg).unwrap();
    assert_eq!(out.rounds.len(), taskdist::fuse::INCUMBENT_PATIENCE);
    assert!(out.rounds.iter().all(|r| r.incumbent_kept()));
    assert_eq!(out.evaluations, out.rounds.len() * cfg.num_candidates);
}

#[test]
fn fuse_is_deterministic() {
    let task = separable_task(30, 11);
    let sk = small_skeleton();
    let sampler = CellSampler::new(
        3,
        &[OperationKind::Conv3x3, OperationKind::Identity, OperationKind::Zero],
    )
    .unwrap();
    let (train, val) = split_validation(&task.data.train, 2, 0.2).unwrap();
    let a = search_rounds(&sampler, &sk, &train, &val, 2, None, &quick_cfg(5)).unwrap();
    let b = search_rounds(&sampler, &sk, &train, &val, 2, None, &quick_cfg(5)).unwrap();
    assert_eq!(a.rounds, b.rounds);
    assert_eq!(a.incumbent.params(), b.incumbent.params());
}

#[test]
fn zero_budget_and_empty_candidates_are_rejected() {
    let task = separable_task(10, 1);
    assert!(fuse(vec![], &task, &quick_cfg(0)).is_err());
    let sampler = CellSampler::full(3).unwrap();
    let rs = RandomSearchConfig {
        train: TrainConfig::default(),
        val_fraction: 0.2,
        seed: 0,
    };
    assert!(random_search(&sampler, &small_skeleton(), &task, 0, &rs).is_err());
}

fn rs_cfg(seed: u64) -> RandomSearchConfig {
    RandomSearchConfig {
        train: TrainConfig {
            optimizer: Optimizer::adam(1e-2),
            epochs: 2,
            batch_size: 16,
            seed: 1,
            batch_order_seed: 2,
        },
        val_fraction: 0.2,
        seed,
    }
}

#[test]
fn random_search_budget_one_and_determinism() {
    let task = separable_task(20, 3);
    let sampler = CellSampler::new(
        3,
        &[
            OperationKind::Conv3x3,
            OperationKind::Identity,
            OperationKind::MaxPool3x3,
        ],
    )
    .unwrap();
    let one = random_search(&sampler, &small_skeleton(), &task, 1, &rs_cfg(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(one.best_cell, sampler.sample_with(&mut rng));
    let a = random_search(&sampler, &small_skeleton(), &task, 3, &rs_cfg(6)).unwrap();
    let b = random_search(&sampler, &small_skeleton(), &task, 3, &rs_cfg(6)).unwrap();
    assert_eq!(a.candidates_csv(), b.candidates_csv());
    assert_eq!(a.best_cell, b.best_cell);
}

#[test]
fn random_search_hit_rate_matches_uniform_sampling() {
    // Two nodes, one edge, eight operations: |S| = 8.
    let ops = &OperationKind::ALL[..8];
    let sampler = CellSampler::new(2, ops).unwrap();
    let superior = CellSpec::uniform(2, ops[5]).unwrap();
    let runs = 4000;
    for budget in [1usize, 4, 8] {
        let mut hits = 0;
        let mut seeds = ChaCha8Rng::seed_from_u64(budget as u64);
        for _ in 0..runs {
            let r = random_search_by(&sampler, budget, seeds.random(), |c| {
                Ok((if *c == superior { 1.0 } else { 0.5 }, 0.0, 0))
            })
            .unwrap();
            if r.best_cell == superior {
                hits += 1;
            }
        }
        let p = 1.0 - (7.0f64 / 8.0).powi(budget as i32);
        let rate = hits as f64 / runs as f64;
        let se = (p * (1.0 - p) / runs as f64).sqrt();
        assert!((rate - p).abs() < 4.0 * se, "budget {budget}: {rate} vs {p}");
    }
}

#[test]
fn report_round_trip_and_comparison() {
    let task = separable_task(20, 3);
    let sampler = CellSampler::new(3, &[OperationKind::Conv3x3, OperationKind::Identity]).unwrap();
    let r = random_search(&sampler, &small_skeleton(), &task, 2, &rs_cfg(1)).unwrap();
    let parsed = SearchReport::parse(&r.to_text()).unwrap();
    assert_eq!(parsed.best_cell, r.best_cell);
    assert_eq!(parsed.budget, 2);
    assert_eq!(parsed.target, "separable");
    let same = compare_reports(&parsed, &parsed).unwrap();
    assert_eq!(same.deltas, (0.0, 0.0, 0, 0.0));
    let other = SearchReport {
        budget: 3,
        ..parsed.clone()
    };
    assert!(compare_reports(&parsed, &other).is_err());
    // Parameter count equals the summed tensor sizes of the instantiated network.
    let spec = taskdist::search_space::instantiate(&small_skeleton(), &r.best_cell, &SHAPE, 2).unwrap();
    let g = spec.build_graph(0).unwrap();
    let summed: usize = g.params().values().map(|t| t.len()).sum();
    assert_eq!(r.parameter_count, summed);
}

#[test]
fn softmax_sums_to_one_for_extreme_logits() {
    for a in [vec![1e3, -1e3, 0.0], vec![0.0; 5], vec![-700.0, -701.0]] {
        assert!((softmax(&a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
