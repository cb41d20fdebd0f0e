mod common;

use common::rng;
use resfuse::graph::{build_reference, Arch, ModelGraph, ParamId, ParamSlot};
use resfuse::surgery::convert_to_resconv;
use resfuse::tensor::Tensor;
use resfuse::train::gradcheck::check_gradients;
use resfuse::train::{
    gather, history_csv, l1_penalty, make_toy_dataset, penalty_grad, retrain, sparse_loss, train, train_accuracy, Sgd, ToyDataset,
    TrainConfig, TrainError, TrainMode,
};

const GRAD_TOL: f64 = 1e-3;

fn toy_resconv(depth: usize, width: usize, seed: u64) -> ModelGraph {
    convert_to_resconv(&build_reference(Arch::Toy { depth, width }, seed).unwrap()).unwrap()
}

fn small_data() -> ToyDataset {
    make_toy_dataset(4, 64, 8, 1)
}

#[test]
fn sgd_matches_reference_update() {
    let (lr, mu, wd) = (0.1f64, 0.9f64, 0.01f64);
    for slot in [ParamSlot::ConvWeight, ParamSlot::M] {
        let id = ParamId { node: 0, slot };
        let decay = if slot == ParamSlot::M { 0.0 } else { wd };
        let mut sgd = Sgd::new(mu as f32, wd as f32);
        let mut p = vec![1.0f32, -2.0];
        let (mut q, mut v) = (vec![1.0f64, -2.0], vec![0.0f64; 2]);
        let grads = [[0.5f32, 0.5], [-1.0, 0.25], [0.0, 2.0]];
        for (step, g) in grads.iter().enumerate() {
            sgd.step(id, &mut p, g, lr as f32);
            for i in 0..2 {
                let d = g[i] as f64 + decay * q[i];
                v[i] = if step == 0 { d } else { mu * v[i] + d };
                q[i] -= lr * v[i];
            }
        }
        for i in 0..2 {
            assert!((p[i] as f64 - q[i]).abs() <= 1e-6, "{slot:?}: {} vs {}", p[i], q[i]);
        }
    }
    // Momentum is tracked per parameter.
    let mut sgd = Sgd::new(0.9, 0.0);
    let (mut a, mut b) = (vec![0.0f32], vec![0.0f32]);
    sgd.step(ParamId { node: 0, slot: ParamSlot::M }, &mut a, &[1.0], 1.0);
    sgd.step(ParamId { node: 1, slot: ParamSlot::M }, &mut b, &[1.0], 1.0);
    assert_eq!((a[0], b[0]), (-1.0, -1.0));
}

#[test]
fn sparse_objective_examples() {
    assert_eq!(l1_penalty(&[0.5, -1.5, 0.0], 0.1), 0.2);
    assert_eq!(penalty_grad(&[0.5, -1.5, 0.0], 0.1), vec![0.1, -0.1, 0.0]);
    let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let loss = sparse_loss(&logits, &[1], &[1.0, -1.0], 0.5).unwrap();
    assert!((loss - (2f32.ln() + 1.0)).abs() <= 1e-6);
}

#[test]
fn learning_rate_drops_at_thirds() {
    let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
    let lrs: Vec<f32> = [0, 9, 10, 19, 20, 29].iter().map(|&e| cfg.lr_at(e)).collect();
    let want = [0.1, 0.1, 0.01, 0.01, 0.001, 0.001];
    for (a, b) in lrs.iter().zip(want) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn configuration_is_validated() {
    let g = toy_resconv(2, 4, 0);
    let data = small_data();
    let bad = [
        TrainConfig { lambda: -1.0, mode: TrainMode::Sparse, ..TrainConfig::default() },
        TrainConfig { lambda: 0.1, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        TrainConfig { checkpoint_every: Some(0), ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(train(&g, &data, &cfg), Err(TrainError::Config(_))), "{cfg:?}");
    }
    assert!("sparse".parse::<TrainMode>().is_ok());
    assert!("dense".parse::<TrainMode>().is_err());
    let counting = build_reference(Arch::MobilenetCifar, 0).unwrap();
    assert!(train(&counting, &data, &TrainConfig::default()).is_err());
}

#[test]
fn dataset_is_balanced_and_seeded() {
    let a = make_toy_dataset(4, 16, 8, 7);
    let b = make_toy_dataset(4, 16, 8, 7);
    let c = make_toy_dataset(4, 16, 8, 8);
    assert_eq!(a.train_x.shape(), &[64, 1, 8, 8]);
    assert_eq!(a.train_x.data(), b.train_x.data());
    assert_ne!(a.train_x.data(), c.train_x.data());
    for k in 0..4 {
        assert_eq!(a.train_y.iter().filter(|&&y| y == k).count(), 16);
        assert_eq!(a.test_y.iter().filter(|&&y| y == k).count(), 16);
    }
    let rows = gather(&a.train_x, &[3, 0]);
    assert_eq!(rows.shape(), &[2, 1, 8, 8]);
    assert_eq!(&rows.data()[64..], &a.train_x.data()[..64]);
}

#[test]
fn training_is_deterministic() {
    let g = toy_resconv(3, 6, 2);
    let data = small_data();
    let cfg = TrainConfig { epochs: 3, seed: 5, ..TrainConfig::sparse(1e-3) };
    let a = train(&g, &data, &cfg).unwrap();
    let b = train(&g, &data, &cfg).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(a.graph, b.graph);
    assert_eq!(a.history.len(), 3);
    assert!(history_csv(&a.history).starts_with("epoch,loss,acc,sum_abs_m\n1,"));
}

#[test]
fn toy_model_learns_the_training_set() {
    let g = toy_resconv(6, 16, 0);
    let data = make_toy_dataset(4, 128, 8, 1);
    let out = train(&g, &data, &TrainConfig::default()).unwrap();
    let acc = train_accuracy(&out.graph, &data).unwrap();
    assert!(acc >= 95.0, "final train accuracy {acc}");
    let first = out.history.first().unwrap().loss;
    let last = out.history.last().unwrap().loss;
    assert!(last < first);
}

#[test]
fn stronger_penalty_shrinks_factors() {
    let g = toy_resconv(4, 8, 0);
    let data = small_data();
    let run = |lambda| {
        let cfg = TrainConfig { epochs: 10, ..TrainConfig::sparse(lambda) };
        train(&g, &data, &cfg).unwrap().graph.sum_abs_m()
    };
    let (strong, weak) = (run(0.1), run(1e-4));
    assert!(strong < weak, "sum |m|: {strong} vs {weak}");
}

#[test]
fn retraining_an_unpruned_graph_equals_training() {
    let g = toy_resconv(3, 4, 1);
    let data = small_data();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let a = train(&g, &data, &cfg).unwrap();
    let b = retrain(&g, &data, &cfg).unwrap();
    assert_eq!(a.graph, b.graph);
    assert_eq!(a.history, b.history);
    let none = retrain(&g, &data, &TrainConfig { epochs: 0, ..cfg }).unwrap();
    assert_eq!(none.graph, g);
    assert!(none.history.is_empty());
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..3 {
        let r = &mut rng(seed);
        let g = common::gradcheck_net(r);
        let x = common::uniform(&[3, 2, 4, 4], -1.0, 1.0, r);
        let check = check_gradients(&g, &x, &[0, 1, 2], 1e-3).unwrap();
        let names: Vec<&str> = check.slots.iter().map(|s| s.slot.as_str()).collect();
        for want in ["ConvWeight", "ConvBias", "BnGamma", "BnBeta", "M", "G", "ProjWeight", "ProjBias", "LinearWeight", "LinearBias"] {
            assert!(names.contains(&want), "missing {want} in {names:?}");
        }
        for s in &check.slots {
            assert!(s.checked > 0, "seed {seed}: {} had no checked entries", s.slot);
        }
        assert!(check.max_rel_err <= GRAD_TOL, "seed {seed}: {:?}", check.slots);
    }
}

#[test]
fn checkpoints_are_written() {
    let g = toy_resconv(2, 4, 0);
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        checkpoint_every: Some(2),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..TrainConfig::default()
    };
    let out = train(&g, &data, &cfg).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["epoch-0002", "epoch-0004"]);
    let last = resfuse::graph::format::load(&dir.path().join("epoch-0004")).unwrap();
    assert_eq!(last, out.graph);
}

#[test]
fn divergence_is_reported() {
    let g = toy_resconv(3, 8, 0);
    let data = small_data();
    let cfg = TrainConfig { lr: 1e6, epochs: 3, ..TrainConfig::default() };
    match train(&g, &data, &cfg) {
        Err(TrainError::Diverged { last_good, .. }) => last_good.validate().unwrap(),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}
