//! Cost accounting, scaling-factor histograms and an activation-traffic bench.
//!
//! FLOPs are multiply-accumulates of convolutions and linear layers. Batch
//! norm adds two operations per output element (scale and shift); ReLU,
//! pooling, flatten and scalar scaling are free.

mod bench;
mod hist;

pub use bench::{activation_traffic, bench, BenchReport, Traffic};
pub use hist::{factor_histogram, factor_histogram_upto, Histogram};

use serde::Serialize;

use crate::graph::{BatchNormParams, GraphError, ModelGraph, Node, Shortcut};
use crate::tensor::ConvParams;

/// Cost split of one node. `main` is convolution/linear work, `norm` batch
/// norm work, `shortcut` a projection shortcut's work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Split {
    pub main: u64,
    pub norm: u64,
    pub shortcut: u64,
}

impl Split {
    pub fn total(&self) -> u64 {
        self.main + self.norm + self.shortcut
    }

    fn add(&mut self, o: Split) {
        self.main += o.main;
        self.norm += o.norm;
        self.shortcut += o.shortcut;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeCost {
    pub index: usize,
    pub kind: &'static str,
    pub flops: Split,
    pub params: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub nodes: Vec<NodeCost>,
    pub flops: u64,
    pub params: u64,
}

/// Percentage reductions `(1 - pruned / original) * 100`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Reduction {
    pub flops_pct: f64,
    pub params_pct: f64,
}

impl CostReport {
    pub fn reduction_from(&self, original: &CostReport) -> Reduction {
        Reduction {
            flops_pct: pct_reduction(original.flops, self.flops),
            params_pct: pct_reduction(original.params, self.params),
        }
    }

    /// FLOPs of convolution and linear work only.
    pub fn main_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops.main).sum()
    }
}

pub fn pct_reduction(original: u64, pruned: u64) -> f64 {
    if original == 0 {
        return 0.0;
    }
    (1.0 - pruned as f64 / original as f64) * 100.0
}

fn conv_cost(p: &ConvParams, out: &[usize]) -> (u64, u64) {
    let s = p.weight.shape();
    let weights = p.weight.len() as u64;
    let bias = p.bias.as_ref().map_or(0, |b| b.len() as u64);
    let macs = (s[0] * s[1] * s[2] * s[3]) as u64 * (out[1] * out[2]) as u64;
    (macs, weights + bias)
}

fn bn_cost(bn: &BatchNormParams, out: &[usize]) -> (u64, u64) {
    let elems: usize = out.iter().product();
    (2 * elems as u64, 2 * bn.channels() as u64)
}

fn node_cost(node: &Node, input: &[usize], out: &[usize]) -> Result<(Split, Split), GraphError> {
    let mut f = Split::default();
    let mut p = Split::default();
    match node {
        Node::Conv(c) => (f.main, p.main) = conv_cost(c, out),
        Node::BatchNorm(bn) => (f.norm, p.norm) = bn_cost(bn, out),
        Node::Linear(l) => {
            f.main = l.weight.len() as u64;
            p.main = (l.weight.len() + l.bias.as_ref().map_or(0, |b| b.len())) as u64;
        }
        Node::ScalarScale(_) => p.main = 1,
        Node::Relu | Node::AvgPool(_) | Node::MaxPool(_) | Node::Flatten => {}
        Node::ResConv(b) => {
            (f.main, p.main) = conv_cost(&b.conv, out);
            (f.norm, p.norm) = bn_cost(&b.bn, out);
            p.shortcut = 2;
            if let Shortcut::Proj1x1(proj) = &b.shortcut {
                let (sf, sp) = conv_cost(proj, out);
                f.shortcut = sf;
                p.shortcut += sp;
            }
        }
        Node::Residual(r) => {
            for chain in [&r.body, &r.shortcut] {
                let mut shape = input.to_vec();
                for n in chain.iter() {
                    let next = n.output_shape(&shape).map_err(GraphError::Input)?;
                    let (nf, np) = node_cost(n, &shape, &next)?;
                    f.add(nf);
                    p.add(np);
                    shape = next;
                }
            }
        }
    }
    Ok((f, p))
}

/// Per-node and total FLOPs and parameters at the graph's declared input.
pub fn cost_report(g: &ModelGraph) -> Result<CostReport, GraphError> {
    let shapes = g.shapes()?;
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for (index, n) in g.nodes.iter().enumerate() {
        let (flops, params) = node_cost(n, &shapes[index], &shapes[index + 1])?;
        nodes.push(NodeCost {
            index,
            kind: n.kind_name(),
            flops,
            params,
        });
    }
    Ok(CostReport {
        flops: nodes.iter().map(|n| n.flops.total()).sum(),
        params: nodes.iter().map(|n| n.params.total()).sum(),
        nodes,
    })
}

pub fn count_flops(g: &ModelGraph) -> Result<u64, GraphError> {
    Ok(cost_report(g)?.flops)
}

pub fn count_params(g: &ModelGraph) -> Result<u64, GraphError> {
    Ok(cost_report(g)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_pixel_conv_is_one_mac() {
        let c = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 1.0), None, 1, 0).unwrap();
        let g = ModelGraph::new("one", vec![1, 1, 1], vec![Node::Conv(c)]);
        assert_eq!(count_flops(&g).unwrap(), 1);
    }

    #[test]
    fn bias_free_3x3_two_channels_has_36_params() {
        let c = ConvParams::new(Tensor::zeros(&[2, 2, 3, 3]), None, 1, 1).unwrap();
        let g = ModelGraph::new("p", vec![2, 4, 4], vec![Node::Conv(c)]);
        assert_eq!(count_params(&g).unwrap(), 36);
    }

    #[test]
    fn reduction_percentages() {
        assert_eq!(pct_reduction(200, 50), 75.0);
        assert_eq!(pct_reduction(0, 0), 0.0);
    }
}
