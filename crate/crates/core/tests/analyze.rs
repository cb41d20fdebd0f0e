mod common;

use common::{equal_cost_pair, random_chain, rng};
use resfuse::analyze::{activation_traffic, bench, cost_report, count_flops, count_params, factor_histogram, factor_histogram_upto};
use resfuse::graph::{build_reference, Arch, ModelGraph, Node};
use resfuse::surgery::{convert_to_resconv, fuse_all, prune};
use resfuse::tensor::{ConvParams, Tensor};
use resfuse::train::{make_toy_dataset, train, TrainConfig};

const GOLDEN_TOL: f64 = 0.01;

fn within(actual: u64, want: f64) -> bool {
    ((actual as f64 - want) / want).abs() <= GOLDEN_TOL
}

#[test]
fn reference_architectures_match_published_counts() {
    let cases = [
        (Arch::Vgg16Cifar, 314.29e6, 14.99e6),
        (Arch::Resnet56Cifar, 126.55e6, 0.85e6),
        (Arch::Resnet110Cifar, 254.99e6, 1.73e6),
        (Arch::MobilenetCifar, 47.18e6, 3.22e6),
        (Arch::Resnet50Imagenet, 4.11e9, 25.56e6),
        (Arch::MobilenetImagenet, 578.83e6, 4.23e6),
    ];
    for (arch, flops, params) in cases {
        let r = cost_report(&build_reference(arch, 0).unwrap()).unwrap();
        assert!(within(r.flops, flops), "{arch:?} flops {}", r.flops);
        assert!(within(r.params, params), "{arch:?} params {}", r.params);
    }
}

#[test]
fn trivial_counts() {
    let one = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 1.0), None, 1, 0).unwrap();
    let g = ModelGraph::new("one", vec![1, 1, 1], vec![Node::Conv(one)]);
    assert_eq!(count_flops(&g).unwrap(), 1);
    let c = ConvParams::new(Tensor::zeros(&[2, 2, 3, 3]), None, 1, 1).unwrap();
    let g = ModelGraph::new("two", vec![2, 4, 4], vec![Node::Conv(c)]);
    assert_eq!(count_params(&g).unwrap(), 36);
}

#[test]
fn totals_are_sums_of_nodes() {
    for seed in 0..20 {
        let g = random_chain(&mut rng(seed), false);
        let r = cost_report(&g).unwrap();
        assert_eq!(r.flops, r.nodes.iter().map(|n| n.flops.total()).sum::<u64>());
        assert_eq!(r.params, r.nodes.iter().map(|n| n.params.total()).sum::<u64>());
        assert_eq!(r.nodes.len(), g.nodes.len());
    }
}

#[test]
fn fusion_never_adds_flops() {
    for seed in 0..20 {
        let g = random_chain(&mut rng(100 + seed), false);
        let (before, after) = (cost_report(&g).unwrap(), cost_report(&fuse_all(&g).unwrap()).unwrap());
        assert!(after.flops <= before.flops, "seed {seed}");
        let branch: u64 = before.nodes.iter().filter(|n| n.kind == "resconv").map(|n| n.flops.main).sum();
        let plain: u64 = before.nodes.iter().filter(|n| n.kind == "conv" || n.kind == "linear").map(|n| n.flops.main).sum();
        assert_eq!(after.main_flops(), branch + plain, "seed {seed}");
    }
}

#[test]
fn reductions_recompute_from_raw_counts() {
    let mut g = convert_to_resconv(&build_reference(Arch::Toy { depth: 6, width: 8 }, 0).unwrap()).unwrap();
    for (i, n) in g.nodes.iter_mut().enumerate() {
        if let Node::ResConv(b) = n {
            b.m = if i % 2 == 0 { 1e-3 } else { 1.0 };
        }
    }
    let (p, report) = prune(&g, 0.01).unwrap();
    let (a, b) = (cost_report(&g).unwrap(), cost_report(&p).unwrap());
    let red = b.reduction_from(&a);
    assert!((red.flops_pct - (1.0 - b.flops as f64 / a.flops as f64) * 100.0).abs() <= 0.2);
    assert!((red.flops_pct - report.flops_reduction_pct).abs() <= 0.2);
    assert!((red.params_pct - report.params_reduction_pct).abs() <= 0.2);
    assert!(red.flops_pct > 0.0);
}

#[test]
fn histogram_counts_every_block() {
    for seed in 0..20 {
        let g = random_chain(&mut rng(200 + seed), false);
        let h = factor_histogram(&g.m_values(), 10);
        assert_eq!(h.total(), g.resconv_indices().len());
        assert_eq!(h.edges.len(), 11);
        assert_eq!(h.edges[0], 0.0);
    }
    let h = factor_histogram(&build_reference(Arch::Toy { depth: 2, width: 4 }, 0).unwrap().m_values(), 10);
    assert_eq!(h.total(), 0);
    assert!(h.warning.is_some());
}

#[test]
fn stronger_penalty_piles_factors_into_the_lowest_bin() {
    let g = convert_to_resconv(&build_reference(Arch::Toy { depth: 6, width: 8 }, 0).unwrap()).unwrap();
    let data = make_toy_dataset(4, 64, 8, 1);
    let factors = |lambda| {
        let cfg = TrainConfig { epochs: 15, ..TrainConfig::sparse(lambda) };
        train(&g, &data, &cfg).unwrap().graph.m_values()
    };
    let (strong, weak) = (factors(0.1), factors(1e-4));
    // Paired runs share one set of bins.
    let upper = strong.iter().chain(&weak).map(|v| v.abs() as f64).fold(0.0, f64::max);
    let (hs, hw) = (factor_histogram_upto(&strong, 10, upper), factor_histogram_upto(&weak, 10, upper));
    assert!(hs.counts[0] > hw.counts[0], "lowest bin: {:?} vs {:?}", hs.counts, hw.counts);
}

#[test]
fn fewer_layers_move_fewer_bytes_at_equal_cost() {
    let (shallow, deep) = equal_cost_pair(&mut rng(1));
    let (s, d) = (cost_report(&shallow).unwrap(), cost_report(&deep).unwrap());
    assert_eq!((s.flops, s.params), (d.flops, d.params));
    let (ts, td) = (activation_traffic(&shallow, 64).unwrap(), activation_traffic(&deep, 64).unwrap());
    assert!(ts.bytes_moved < td.bytes_moved, "{} vs {}", ts.bytes_moved, td.bytes_moved);
    // Floats in plus out per node: two convs and relus, then pool, flatten, linear.
    let per_sample = 768 + 1024 + 768 + 512 + (256 + 4) + (4 + 4) + (4 + 2);
    assert_eq!(ts.bytes_moved, 64 * 4 * per_sample);
}

#[test]
fn bench_reports_each_repetition() {
    let (shallow, _) = equal_cost_pair(&mut rng(2));
    let r = bench(&shallow, 4, 1, 0).unwrap();
    assert_eq!(r.samples_ns.len(), 1);
    assert_eq!(r.median_ns, r.samples_ns[0]);
    assert_eq!(r.traffic, activation_traffic(&shallow, 4).unwrap());
    let r = bench(&shallow, 4, 5, 0).unwrap();
    assert_eq!(r.samples_ns.len(), 5);
}
