#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resfuse::graph::{BatchNormParams, LinearParams, ModelGraph, Node, PoolParams, ResConvBlock, Shortcut, ShortcutKind};
use resfuse::tensor::{ConvParams, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_bn(c: usize, rng: &mut ChaCha8Rng) -> BatchNormParams {
    BatchNormParams {
        gamma: uniform(&[c], 0.5, 1.5, rng),
        beta: uniform(&[c], -0.5, 0.5, rng),
        running_mean: uniform(&[c], -0.5, 0.5, rng),
        running_var: uniform(&[c], 0.5, 2.0, rng),
        eps: resfuse::graph::BN_EPS,
    }
}

/// He-scaled weights so activations stay around unit size.
pub fn random_conv(t: usize, u: usize, k: usize, stride: usize, bias: bool, rng: &mut ChaCha8Rng) -> ConvParams {
    let a = (6.0 / (u * k * k) as f32).sqrt();
    ConvParams {
        weight: uniform(&[t, u, k, k], -a, a, rng),
        bias: bias.then(|| uniform(&[t], -0.3, 0.3, rng)),
        stride,
        padding: k / 2,
        groups: 1,
    }
}

/// A random block of the given shortcut kind and a matching input shape.
pub fn random_block(kind: ShortcutKind, rng: &mut ChaCha8Rng) -> (ResConvBlock, Vec<usize>) {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let u = rng.random_range(1..5);
    let (t, stride) = match kind {
        ShortcutKind::Identity => (u, 1),
        ShortcutKind::Proj1x1 => {
            let t = loop {
                let t = rng.random_range(1..6);
                if t != u {
                    break t;
                }
            };
            (t, rng.random_range(1..3))
        }
        ShortcutKind::AvgPool => (u, rng.random_range(2..4)),
    };
    let k = if kind == ShortcutKind::AvgPool && k == 1 { 3 } else { k };
    let conv = random_conv(t, u, k, stride, rng.random_bool(0.5), rng);
    let shortcut = match kind {
        ShortcutKind::Identity => Shortcut::Identity,
        ShortcutKind::Proj1x1 => Shortcut::Proj1x1(random_conv(t, u, 1, stride, rng.random_bool(0.5), rng)),
        ShortcutKind::AvgPool => Shortcut::AvgPool(PoolParams::new(k, stride, k / 2)),
    };
    let block = ResConvBlock {
        conv,
        bn: random_bn(t, rng),
        m: rng.random_range(-2.0..2.0),
        g: rng.random_range(-2.0..2.0),
        shortcut,
    };
    let h = rng.random_range(k.max(2)..k + 7);
    let w = rng.random_range(k.max(2)..k + 7);
    (block, vec![u, h, w])
}

/// Random trainable-style chain: ResConv blocks of every kind mixed with
/// plain Conv-BN-ReLU layers, ending in a pooled linear head. Roughly one
/// block in three gets a tiny `m`.
pub fn random_chain(rng: &mut ChaCha8Rng, positive_gates: bool) -> ModelGraph {
    let mut c = rng.random_range(1..4);
    let mut size = rng.random_range(8..13);
    let input = vec![c, size, size];
    let mut nodes = Vec::new();
    let layers = rng.random_range(2..7);
    for _ in 0..layers {
        let choice = rng.random_range(0..5);
        if choice == 0 {
            let t = rng.random_range(1..5);
            nodes.push(Node::Conv(random_conv(t, c, 3, 1, rng.random_bool(0.3), rng)));
            nodes.push(Node::BatchNorm(random_bn(t, rng)));
            nodes.push(Node::Relu);
            c = t;
            continue;
        }
        let kind = match choice {
            1 | 2 => ShortcutKind::Identity,
            3 => ShortcutKind::Proj1x1,
            _ if size >= 6 => ShortcutKind::AvgPool,
            _ => ShortcutKind::Identity,
        };
        let (t, stride) = match kind {
            ShortcutKind::Identity => (c, 1),
            ShortcutKind::Proj1x1 => (c + rng.random_range(1..3), rng.random_range(1..3)),
            ShortcutKind::AvgPool => (c, 2),
        };
        let conv = random_conv(t, c, 3, stride, rng.random_bool(0.3), rng);
        let shortcut = match kind {
            ShortcutKind::Identity => Shortcut::Identity,
            ShortcutKind::Proj1x1 => Shortcut::Proj1x1(random_conv(t, c, 1, stride, rng.random_bool(0.5), rng)),
            ShortcutKind::AvgPool => Shortcut::AvgPool(PoolParams::new(3, 2, 1)),
        };
        let m = if rng.random_bool(0.35) {
            rng.random_range(-1e-3..1e-3)
        } else {
            rng.random_range(0.3..1.5) * if rng.random_bool(0.2) { -1.0 } else { 1.0 }
        };
        let g = if positive_gates {
            rng.random_range(0.2..1.5)
        } else {
            rng.random_range(-1.0..1.5)
        };
        nodes.push(Node::ResConv(ResConvBlock {
            conv,
            bn: random_bn(t, rng),
            m,
            g,
            shortcut,
        }));
        c = t;
        size = (size + 2 - 3) / stride + 1;
    }
    nodes.push(Node::AvgPool(PoolParams::new(size, size, 0)));
    nodes.push(Node::Flatten);
    let classes = 3;
    nodes.push(Node::Linear(LinearParams {
        weight: uniform(&[classes, c], -1.0, 1.0, rng),
        bias: Some(uniform(&[classes], -0.1, 0.1, rng)),
    }));
    let g = ModelGraph::new("random-chain", input, nodes);
    g.validate().expect("generated chain is shape-consistent");
    g
}

pub fn batch_for(g: &ModelGraph, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut shape = vec![n];
    shape.extend(&g.input_shape);
    uniform(&shape, -1.0, 1.0, rng)
}

/// `g` with every ResConv `|m| < threshold` replaced by zero.
pub fn zero_small_m(g: &ModelGraph, threshold: f32) -> ModelGraph {
    let mut z = g.clone();
    for n in &mut z.nodes {
        if let Node::ResConv(b) = n {
            if b.m.abs() < threshold {
                b.m = 0.0;
            }
        }
    }
    z
}

/// Direct nested-loop convolution in `f64`.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, u, h, wi] = x.shape()[..] else { panic!("rank 4") };
    let [t, _, k, _] = w.shape()[..] else { panic!("rank 4") };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wi + 2 * pad - k) / stride + 1;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0f64; n * t * ho * wo];
    for ni in 0..n {
        for ti in 0..t {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.map_or(0.0, |b| b.data()[ti] as f64);
                    for ui in 0..u {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                let xv = xd[((ni * u + ui) * h + iy as usize) * wi + ix as usize] as f64;
                                let wv = wd[((ti * u + ui) * k + ky) * k + kx] as f64;
                                s += xv * wv;
                            }
                        }
                    }
                    out[((ni * t + ti) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    (vec![n, t, ho, wo], out)
}

pub fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&p, &q)| (p as f64 - q).abs()).fold(0.0, f64::max)
}

pub fn max_diff_t(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).expect("same shape")
}

/// Small random network of three ResConv blocks, one per shortcut kind, with
/// conv biases and a linear head. Sized so few ReLU decisions sit near a kink.
pub fn gradcheck_net(rng: &mut ChaCha8Rng) -> ModelGraph {
    let block = |u: usize, t: usize, stride: usize, shortcut: Shortcut, rng: &mut ChaCha8Rng| {
        Node::ResConv(ResConvBlock {
            conv: random_conv(t, u, 3, stride, true, rng),
            bn: random_bn(t, rng),
            m: rng.random_range(0.5..1.5),
            g: rng.random_range(0.5..1.5),
            shortcut,
        })
    };
    let proj = random_conv(3, 2, 1, 1, true, rng);
    let nodes = vec![
        block(2, 3, 1, Shortcut::Proj1x1(proj), rng),
        block(3, 3, 1, Shortcut::Identity, rng),
        block(3, 3, 2, Shortcut::AvgPool(PoolParams::new(3, 2, 1)), rng),
        Node::AvgPool(PoolParams::new(2, 2, 0)),
        Node::Flatten,
        Node::Linear(LinearParams {
            weight: uniform(&[3, 3], -1.0, 1.0, rng),
            bias: Some(uniform(&[3], -0.1, 0.1, rng)),
        }),
    ];
    let g = ModelGraph::new("gradcheck", vec![2, 4, 4], nodes);
    g.validate().expect("gradcheck net is shape-consistent");
    g
}

/// Two bias-free conv stacks at one resolution with equal FLOPs and params:
/// 4 -> 8 -> 4 channels (two layers) and 4 -> 4 -> 4 -> 4 -> 4 (four layers),
/// both 576 conv weights, sharing a pooled linear head.
pub fn equal_cost_pair(rng: &mut ChaCha8Rng) -> (ModelGraph, ModelGraph) {
    let stack = |widths: &[usize], rng: &mut ChaCha8Rng| {
        let mut nodes = Vec::new();
        for w in widths.windows(2) {
            nodes.push(Node::Conv(random_conv(w[1], w[0], 3, 1, false, rng)));
            nodes.push(Node::Relu);
        }
        nodes.push(Node::AvgPool(PoolParams::new(8, 8, 0)));
        nodes.push(Node::Flatten);
        nodes.push(Node::Linear(LinearParams {
            weight: uniform(&[2, 4], -1.0, 1.0, rng),
            bias: None,
        }));
        ModelGraph::new(format!("stack{}", widths.len() - 1), vec![4, 8, 8], nodes)
    };
    (stack(&[4, 8, 4], rng), stack(&[4, 4, 4, 4, 4], rng))
}

/// Every file under `root` keyed by its relative path, with its bytes.
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}
