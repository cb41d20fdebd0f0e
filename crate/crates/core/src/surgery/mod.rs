//! Graph rewrites: conversion to ResConv blocks, fusion back into plain
//! convolutions, and layer pruning.

mod prune;

pub use prune::{prune, prune_to_rate, PruneEntry, PruneReport};

use thiserror::Error;

use crate::graph::{GraphError, ModelGraph, Node, ResConvBlock, Shortcut, ShortcutKind};
use crate::tensor::{ConvParams, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{kind} shortcut cannot be expressed as a {t}x{u}x{k}x{k} kernel: {reason}")]
    Shortcut {
        kind: ShortcutKind,
        t: usize,
        u: usize,
        k: usize,
        reason: String,
    },
    #[error("node {index}: {source}")]
    Node {
        index: usize,
        #[source]
        source: Box<SurgeryError>,
    },
    #[error("pruning would remove every convolution and linear layer")]
    AllPruned,
    #[error("threshold must be a non-negative finite number, got {0}")]
    Threshold(f32),
    #[error("rate must lie in [0, 1), got {0}")]
    Rate(f64),
    #[error("no threshold reaches a {requested:.1}% FLOPs reduction; the most achievable is {achievable:.1}%")]
    RateUnreachable { requested: f64, achievable: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn at(index: usize) -> impl FnOnce(SurgeryError) -> SurgeryError {
    move |e| SurgeryError::Node {
        index,
        source: Box::new(e),
    }
}

/// Shortcut expressed as a convolution with the block's kernel geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionKernelPieces {
    /// `(t, u, k, k)`.
    pub ws: Tensor,
    /// Length `t`.
    pub bs: Tensor,
}

/// Replaces each `Conv -> BatchNorm -> Relu` triple with a ResConv block
/// (`m = g = 1`). The shortcut follows the shapes: identity when channels and
/// resolution are kept, average pooling when only the resolution drops, and a
/// zero-initialised 1x1 projection whenever the channel count changes.
///
/// Grouped or even-sized convolutions and triples whose shortcut would not
/// line up are left as they are.
pub fn convert_to_resconv(g: &ModelGraph) -> Result<ModelGraph, SurgeryError> {
    let shapes = g.shapes()?;
    let mut nodes = Vec::with_capacity(g.nodes.len());
    let mut i = 0;
    while i < g.nodes.len() {
        if let (Node::Conv(c), Some(Node::BatchNorm(bn)), Some(Node::Relu)) =
            (&g.nodes[i], g.nodes.get(i + 1), g.nodes.get(i + 2))
        {
            if let Some(block) = resconv_for(c, bn, &shapes[i]) {
                nodes.push(Node::ResConv(block));
                i += 3;
                continue;
            }
        }
        nodes.push(g.nodes[i].clone());
        i += 1;
    }
    let out = ModelGraph {
        nodes,
        ..g.clone()
    };
    out.validate()?;
    Ok(out)
}

fn resconv_for(c: &ConvParams, bn: &crate::graph::BatchNormParams, input: &[usize]) -> Option<ResConvBlock> {
    let k = c.kernel();
    if c.groups != 1 || k % 2 == 0 {
        return None;
    }
    let (t, u) = (c.out_channels(), c.in_channels());
    let shortcut = if t == u && c.stride == 1 {
        Shortcut::Identity
    } else if t == u {
        Shortcut::AvgPool(crate::graph::PoolParams::new(k, c.stride, c.padding))
    } else {
        let proj = ConvParams::new(Tensor::zeros(&[t, u, 1, 1]), Some(Tensor::zeros(&[t])), c.stride, 0).ok()?;
        Shortcut::Proj1x1(proj)
    };
    let block = ResConvBlock {
        conv: c.clone(),
        bn: bn.clone(),
        m: 1.0,
        g: 1.0,
        shortcut,
    };
    // Identity and projection shortcuts need the conv's window centred on
    // the sampled pixel; fusion relies on it as well.
    let centred = c.padding == k / 2;
    let fits = block.output_shape(input).is_ok();
    let needs_centre = !matches!(block.shortcut, Shortcut::AvgPool(_));
    (fits && (centred || !needs_centre)).then_some(block)
}

/// One convolution computing `m * BN(conv(x))` with running statistics:
/// per output channel `W_n = m * gamma * W / s`, `b_n = m * (beta - gamma * (mu - b) / s)`
/// where `s = sqrt(var + eps)`.
pub fn fold_bn_and_m(block: &ResConvBlock) -> Result<ConvParams, SurgeryError> {
    let c = &block.conv;
    let t = c.out_channels();
    let bn = &block.bn;
    if bn.channels() != t {
        return Err(GraphError::Input(crate::tensor::shape_err(
            "fold_bn",
            format!("batch norm over {t} channels"),
            &[bn.channels()],
        ))
        .into());
    }
    let per_out = c.weight.len() / t;
    let m = block.m as f64;
    let mut w = c.weight.data().to_vec();
    let mut b = vec![0f32; t];
    for j in 0..t {
        let s = (bn.running_var.data()[j] as f64 + bn.eps as f64).sqrt();
        let gamma = bn.gamma.data()[j] as f64;
        let scale = m * gamma / s;
        for v in &mut w[j * per_out..(j + 1) * per_out] {
            *v = (*v as f64 * scale) as f32;
        }
        let bp = c.bias.as_ref().map_or(0.0, |bias| bias.data()[j] as f64);
        let mu = bn.running_mean.data()[j] as f64;
        b[j] = (m * (bn.beta.data()[j] as f64 - gamma * (mu - bp) / s)) as f32;
    }
    Ok(ConvParams {
        weight: Tensor::new(c.weight.shape().to_vec(), w)?,
        bias: Some(Tensor::from_vec(b)),
        stride: c.stride,
        padding: c.padding,
        groups: c.groups,
    })
}

/// The shortcut as a `(t, u, k, k)` kernel: a centred one on the channel
/// diagonal for identity, the projection embedded at the kernel centre, or a
/// uniform `1 / k^2` diagonal for average pooling.
pub fn shortcut_to_kernel(shortcut: &Shortcut, t: usize, u: usize, k: usize) -> Result<FusionKernelPieces, SurgeryError> {
    let err = |reason: String| SurgeryError::Shortcut {
        kind: shortcut.kind(),
        t,
        u,
        k,
        reason,
    };
    if k == 0 || k.is_multiple_of(2) {
        return Err(err("kernel size must be odd".into()));
    }
    let mut ws = vec![0f32; t * u * k * k];
    let mut bs = vec![0f32; t];
    let centre = (k / 2) * k + k / 2;
    let idx = |j: usize, q: usize, pos: usize| (j * u + q) * k * k + pos;
    match shortcut {
        Shortcut::Identity | Shortcut::AvgPool(_) if t != u => {
            return Err(err(format!("needs equal channel counts, got {t} and {u}")))
        }
        Shortcut::Identity => {
            for j in 0..t {
                ws[idx(j, j, centre)] = 1.0;
            }
        }
        Shortcut::AvgPool(p) => {
            if p.kernel != k {
                return Err(err(format!("pool window {} differs from kernel {k}", p.kernel)));
            }
            let v = 1.0 / (k * k) as f32;
            for j in 0..t {
                ws[idx(j, j, 0)..idx(j, j, 0) + k * k].fill(v);
            }
        }
        Shortcut::Proj1x1(p) => {
            if p.weight.shape() != [t, u, 1, 1] {
                return Err(err(format!("projection weight has shape {:?}", p.weight.shape())));
            }
            for j in 0..t {
                for q in 0..u {
                    ws[idx(j, q, centre)] = p.weight.data()[j * u + q];
                }
            }
            if let Some(b) = &p.bias {
                bs.copy_from_slice(b.data());
            }
        }
    }
    Ok(FusionKernelPieces {
        ws: Tensor::new(vec![t, u, k, k], ws)?,
        bs: Tensor::from_vec(bs),
    })
}

/// Single convolution equal to the block before its final ReLU:
/// `W_f = W_n + g * W_s`, `b_f = b_n + g * b_s`.
pub fn fuse_resconv(block: &ResConvBlock) -> Result<ConvParams, SurgeryError> {
    let c = &block.conv;
    let (t, u, k) = (c.out_channels(), c.in_channels(), c.kernel());
    let geometry = |reason: String| SurgeryError::Shortcut {
        kind: block.shortcut.kind(),
        t,
        u,
        k,
        reason,
    };
    if c.groups != 1 {
        return Err(geometry("grouped convolutions are not fused".into()));
    }
    match &block.shortcut {
        Shortcut::Identity if c.stride != 1 || c.padding != k / 2 => {
            return Err(geometry(format!("conv stride {} / padding {} do not preserve the input grid", c.stride, c.padding)))
        }
        Shortcut::Proj1x1(p) if p.stride != c.stride || p.padding != 0 || c.padding != k / 2 => {
            return Err(geometry("projection is not aligned with the conv window centre".into()))
        }
        Shortcut::AvgPool(p) if (p.kernel, p.stride, p.padding) != (k, c.stride, c.padding) => {
            return Err(geometry("pool window differs from the conv window".into()))
        }
        _ => {}
    }
    let folded = fold_bn_and_m(block)?;
    let pieces = shortcut_to_kernel(&block.shortcut, t, u, k)?;
    let g = block.g;
    let w = folded
        .weight
        .data()
        .iter()
        .zip(pieces.ws.data())
        .map(|(&a, &s)| a + g * s)
        .collect();
    let b = folded
        .bias
        .as_ref()
        .expect("folded conv has a bias")
        .data()
        .iter()
        .zip(pieces.bs.data())
        .map(|(&a, &s)| a + g * s)
        .collect();
    Ok(ConvParams {
        weight: Tensor::new(vec![t, u, k, k], w)?,
        bias: Some(Tensor::from_vec(b)),
        ..folded
    })
}

/// Replaces every ResConv node with its fused convolution and a ReLU.
pub fn fuse_all(g: &ModelGraph) -> Result<ModelGraph, SurgeryError> {
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for (i, n) in g.nodes.iter().enumerate() {
        match n {
            Node::ResConv(b) => {
                nodes.push(Node::Conv(fuse_resconv(b).map_err(at(i))?));
                nodes.push(Node::Relu);
            }
            other => nodes.push(other.clone()),
        }
    }
    Ok(ModelGraph {
        nodes,
        ..g.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BatchNormParams, PoolParams};

    fn conv(cin: usize, cout: usize, k: usize, s: usize) -> ConvParams {
        ConvParams::new(Tensor::full(&[cout, cin, k, k], 0.5), None, s, k / 2).unwrap()
    }

    fn triple(cin: usize, cout: usize, s: usize) -> Vec<Node> {
        vec![
            Node::Conv(conv(cin, cout, 3, s)),
            Node::BatchNorm(BatchNormParams::identity(cout)),
            Node::Relu,
        ]
    }

    fn converted_kind(cin: usize, cout: usize, s: usize) -> Shortcut {
        let g = ModelGraph::new("c", vec![cin, 8, 8], triple(cin, cout, s));
        let out = convert_to_resconv(&g).unwrap();
        match &out.nodes[..] {
            [Node::ResConv(b)] => {
                assert_eq!((b.m, b.g), (1.0, 1.0));
                b.shortcut.clone()
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shortcut_choice_follows_shapes() {
        assert_eq!(converted_kind(16, 16, 1), Shortcut::Identity);
        match converted_kind(16, 32, 1) {
            Shortcut::Proj1x1(p) => {
                assert_eq!((p.kernel(), p.stride, p.padding), (1, 1, 0));
                assert_eq!(p.weight.max_abs(), 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(converted_kind(16, 16, 2), Shortcut::AvgPool(PoolParams::new(3, 2, 1)));
        match converted_kind(16, 32, 2) {
            Shortcut::Proj1x1(p) => assert_eq!(p.stride, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn even_kernels_and_classifier_stay() {
        let even = ConvParams::new(Tensor::zeros(&[4, 4, 2, 2]), None, 1, 0).unwrap();
        let g = ModelGraph::new(
            "e",
            vec![4, 6, 6],
            vec![Node::Conv(even), Node::BatchNorm(BatchNormParams::identity(4)), Node::Relu],
        );
        assert_eq!(convert_to_resconv(&g).unwrap(), g);
    }

    #[test]
    fn identity_kernel_and_uniform_pool_kernel() {
        let id = shortcut_to_kernel(&Shortcut::Identity, 1, 1, 3).unwrap();
        assert_eq!(id.ws.data(), &[0., 0., 0., 0., 1., 0., 0., 0., 0.]);
        let avg = shortcut_to_kernel(&Shortcut::AvgPool(PoolParams::new(3, 1, 1)), 1, 1, 3).unwrap();
        assert!(avg.ws.data().iter().all(|&v| v == 1.0 / 9.0));
        assert!(shortcut_to_kernel(&Shortcut::Identity, 2, 3, 3).is_err());
    }

    #[test]
    fn trivial_fold_is_unchanged() {
        let block = ResConvBlock {
            conv: conv(2, 2, 3, 1),
            bn: BatchNormParams {
                eps: 0.0,
                ..BatchNormParams::identity(2)
            },
            m: 1.0,
            g: 0.0,
            shortcut: Shortcut::Identity,
        };
        let f = fold_bn_and_m(&block).unwrap();
        assert_eq!(f.weight, block.conv.weight);
        assert_eq!(f.bias.unwrap().max_abs(), 0.0);
        let zero = fold_bn_and_m(&ResConvBlock { m: 0.0, ..block.clone() }).unwrap();
        assert_eq!(zero.weight.max_abs(), 0.0);
        assert_eq!(fuse_resconv(&block).unwrap(), fold_bn_and_m(&block).unwrap());
    }
}
