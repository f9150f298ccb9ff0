use lmnet_core::dataio::{Dataset, Split};
use lmnet_core::graph::{build_graph, ArchRow, HeadSpec, NormActFlags, Operator};
use lmnet_core::kernels::{KernelPath, Mode};
use lmnet_core::training::{
    battery, fit, grad_check, lr_at_epoch, nag_step, nag_update, softmax_xent, GradCheckConfig,
    OptimConfig, OptimState, TrainLog,
};
use lmnet_core::{ModelGraph, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_kind_passes_gradcheck_over_fifty_seeds() {
    let mut worst = (0.0f64, String::new());
    for seed in 100..150u64 {
        for mut case in battery(seed).unwrap() {
            let cfg = GradCheckConfig {
                samples_per_kind: 25,
                seed,
                ..GradCheckConfig::default()
            };
            let r = grad_check(&mut case.graph, &case.input, &case.labels, &cfg).unwrap();
            if r.max_rel_err > worst.0 {
                worst = (
                    r.max_rel_err,
                    format!("{} seed {seed}: {:?}", case.name, r.worst()),
                );
            }
        }
    }
    assert!(worst.0 < 1e-4, "{worst:?}");
}

#[test]
fn impossible_tolerance_fails() {
    let mut case = battery(0)
        .unwrap()
        .into_iter()
        .find(|c| c.name == "conv")
        .unwrap();
    let cfg = GradCheckConfig {
        tolerance: 1e-12,
        ..GradCheckConfig::default()
    };
    assert!(
        !grad_check(&mut case.graph, &case.input, &case.labels, &cfg)
            .unwrap()
            .passed
    );
}

proptest! {
    #[test]
    fn plain_momentumless_step_is_sgd(
        theta in prop::collection::vec(-2.0f64..2.0, 1..40), lr in 1e-4f64..1.0, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grad: Vec<f64> = theta.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = theta.clone();
        let mut v = vec![0.0; theta.len()];
        nag_update(&mut t, &grad, &mut v, lr, 0.0, 0.0);
        for ((a, b), g) in t.iter().zip(&theta).zip(&grad) {
            prop_assert_eq!(*a, b - lr * g);
        }
    }

    #[test]
    fn nesterov_matches_two_step_recurrence(
        theta in -2.0f64..2.0, g1 in -1.0f64..1.0, g2 in -1.0f64..1.0, mu in 0.0f64..0.99, wd in 0.0f64..1e-2,
    ) {
        let lr = 0.05;
        let (mut t, mut v) = ([theta], [0.0]);
        nag_update(&mut t, &[g1], &mut v, lr, mu, wd);
        let gp = g1 + wd * theta;
        let v1 = gp;
        let t1 = theta - lr * (gp + mu * v1);
        prop_assert!((t[0] - t1).abs() < 1e-12 && (v[0] - v1).abs() < 1e-12);
        nag_update(&mut t, &[g2], &mut v, lr, mu, wd);
        let gp = g2 + wd * t1;
        let v2 = mu * v1 + gp;
        prop_assert!((t[0] - (t1 - lr * (gp + mu * v2))).abs() < 1e-12);
    }
}

#[test]
fn schedule_is_a_three_level_staircase() {
    let cfg = OptimConfig::default();
    let lrs: Vec<f64> = (0..cfg.total_epochs)
        .map(|e| lr_at_epoch(e, &cfg).unwrap())
        .collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    let mut distinct = lrs.clone();
    distinct.dedup();
    assert_eq!(distinct, vec![0.1, 0.1 / 10.0, 0.1 / 100.0]);
    assert!(lr_at_epoch(cfg.total_epochs, &cfg).is_err());
}

fn toy_graph(seed: u64) -> ModelGraph {
    let rows = [
        ArchRow::new(Operator::Conv3x3, 1, 6, 1, 2),
        ArchRow::new(Operator::Lmb, 4, 6, 1, 1),
    ];
    let head = HeadSpec {
        classes: 3,
        norm: true,
        relu: true,
    };
    let mut g = build_graph(
        "toy",
        Shape::new(1, 3, 8, 8),
        &rows,
        &head,
        &NormActFlags::default(),
    )
    .unwrap();
    g.initialize(seed);
    g
}

#[test]
fn small_step_reduces_single_sample_loss() {
    for seed in 0..5 {
        let g = toy_graph(seed);
        let mut g = g.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(Shape::new(1, 3, 8, 8), |_, _, _, _| {
            rng.gen_range(-1.0..1.0)
        });
        let label = [seed as usize % 3];
        let cfg = OptimConfig {
            lr0: 1e-4,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        // A single sample has no batch variance, so measure in inference mode.
        let (logits, trace) = g
            .forward_with_trace(&x, Mode::Inference, KernelPath::Naive)
            .unwrap();
        let (before, dlogits) = softmax_xent(&logits, &label).unwrap();
        let grads = g.backward(&trace, &dlogits, KernelPath::Naive).unwrap();
        let mut state = OptimState::new(&g);
        nag_step(&mut g, &grads, &mut state, &cfg, cfg.lr0).unwrap();
        let after = softmax_xent(&g.infer(&x, KernelPath::Naive).unwrap(), &label)
            .unwrap()
            .0;
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

fn toy_data() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let images = Tensor::from_fn(Shape::new(30, 3, 8, 8), |n, c, h, w| {
        let signal = match labels[n] {
            0 => (h % 2) as f32,
            1 => (w % 2) as f32,
            _ => ((h + w) % 2) as f32,
        };
        signal + 0.1 * c as f32 + rng.gen_range(-0.2..0.2)
    });
    Dataset::new(images, labels, 3, Split::Train).unwrap()
}

fn strip(log: &TrainLog) -> Vec<(usize, u64, u64, u64)> {
    log.records
        .iter()
        .map(|r| {
            (
                r.epoch,
                r.lr.to_bits(),
                r.train_loss.to_bits(),
                r.train_acc.to_bits(),
            )
        })
        .collect()
}

#[test]
fn fit_is_deterministic_per_seed() {
    let data = toy_data();
    let cfg = OptimConfig {
        batch_size: 8,
        lr0: 0.05,
        ..OptimConfig::default()
    };
    for path in [KernelPath::Naive, KernelPath::Gemm] {
        let (mut a, mut b, mut c) = (toy_graph(1), toy_graph(1), toy_graph(1));
        let la = fit(&mut a, &data, &cfg, 4, 7, path).unwrap();
        let lb = fit(&mut b, &data, &cfg, 4, 7, path).unwrap();
        let lc = fit(&mut c, &data, &cfg, 4, 8, path).unwrap();
        assert_eq!(strip(&la), strip(&lb));
        assert_eq!(a, b);
        assert_ne!(strip(&la), strip(&lc));
    }
}

#[test]
fn fit_learns_a_separable_toy_task() {
    let data = toy_data();
    let mut g = toy_graph(3);
    let cfg = OptimConfig {
        batch_size: 10,
        lr0: 0.05,
        ..OptimConfig::default()
    };
    let log = fit(&mut g, &data, &cfg, 30, 0, KernelPath::Gemm).unwrap();
    let first = log.records[0].train_loss;
    let last = log.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}
