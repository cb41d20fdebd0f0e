use serde::Serialize;

use crate::analyze::{cost_report, pct_reduction};
use crate::graph::{ModelGraph, Node, Shortcut, ShortcutKind};
use crate::tensor::ConvParams;

use super::SurgeryError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneEntry {
    /// Node index in the unpruned graph.
    pub index: usize,
    pub kind: ShortcutKind,
    pub m: f32,
    pub g: f32,
    pub pruned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneReport {
    pub threshold: f32,
    pub nodes: Vec<PruneEntry>,
    pub pruned: Vec<usize>,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_reduction_pct: f64,
    pub params_reduction_pct: f64,
    pub warnings: Vec<String>,
}

/// Pruning walk state. `pending` is a positive factor owed to the current
/// activation: the true activation equals `pending` times the output of the
/// nodes emitted so far.
struct Walk {
    out: Vec<Node>,
    pending: f32,
    /// Whether the emitted chain's output is known to be non-negative.
    nonneg: bool,
}

impl Walk {
    fn flush(&mut self) {
        if self.pending != 1.0 {
            self.out.push(Node::ScalarScale(self.pending));
            self.pending = 1.0;
        }
    }

    fn relu(&mut self) {
        if !self.nonneg {
            self.out.push(Node::Relu);
        }
        self.nonneg = true;
    }

    fn scale_conv(&mut self, c: &mut ConvParams) {
        if self.pending != 1.0 {
            let p = self.pending;
            c.weight = c.weight.map(|w| w * p);
            self.pending = 1.0;
        }
    }

    fn keep(&mut self, node: &Node) {
        let mut n = node.clone();
        match &mut n {
            Node::Conv(c) => {
                self.scale_conv(c);
                self.nonneg = false;
            }
            Node::Linear(l) => {
                if self.pending != 1.0 {
                    let p = self.pending;
                    l.weight = l.weight.map(|w| w * p);
                    self.pending = 1.0;
                }
                self.nonneg = false;
            }
            Node::ResConv(b) => {
                if self.pending != 1.0 {
                    let p = self.pending;
                    b.conv.weight = b.conv.weight.map(|w| w * p);
                    match &mut b.shortcut {
                        Shortcut::Identity | Shortcut::AvgPool(_) => b.g *= p,
                        Shortcut::Proj1x1(proj) => proj.weight = proj.weight.map(|w| w * p),
                    }
                    self.pending = 1.0;
                }
                self.nonneg = true;
            }
            Node::ScalarScale(c) => {
                *c *= self.pending;
                self.pending = 1.0;
                self.nonneg = self.nonneg && *c >= 0.0;
            }
            Node::BatchNorm(_) => {
                self.flush();
                self.nonneg = false;
            }
            Node::Residual(_) => {
                self.flush();
                self.nonneg = true;
            }
            Node::Relu => self.nonneg = true,
            Node::AvgPool(_) | Node::MaxPool(_) | Node::Flatten => {}
        }
        self.out.push(n);
    }
}

/// Removes the convolution branch of every ResConv block with `|m| < threshold`.
///
/// An identity block disappears and its gate moves into the next layer with
/// weights; a projection block becomes a 1x1 convolution; an average-pool
/// block keeps its pooling. A non-positive gate cannot pass through ReLU, so
/// it stays behind as an explicit scale and the report carries a warning.
pub fn prune(g: &ModelGraph, threshold: f32) -> Result<(ModelGraph, PruneReport), SurgeryError> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(SurgeryError::Threshold(threshold));
    }
    let before = cost_report(g)?;
    let mut walk = Walk {
        out: Vec::with_capacity(g.nodes.len()),
        pending: 1.0,
        nonneg: false,
    };
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (index, node) in g.nodes.iter().enumerate() {
        let Node::ResConv(b) = node else {
            walk.keep(node);
            continue;
        };
        let pruned = b.m.abs() < threshold;
        entries.push(PruneEntry {
            index,
            kind: b.shortcut.kind(),
            m: b.m,
            g: b.g,
            pruned,
        });
        if !pruned {
            walk.keep(node);
            continue;
        }
        match &b.shortcut {
            Shortcut::Identity if b.g > 0.0 => {
                walk.relu();
                walk.pending *= b.g;
            }
            Shortcut::Proj1x1(p) => {
                let s = b.g * walk.pending;
                let conv = ConvParams {
                    weight: p.weight.map(|w| w * s),
                    bias: p.bias.as_ref().map(|bias| bias.map(|v| v * b.g)),
                    ..p.clone()
                };
                walk.pending = 1.0;
                walk.out.push(Node::Conv(conv));
                walk.out.push(Node::Relu);
                walk.nonneg = true;
            }
            Shortcut::AvgPool(p) if b.g > 0.0 => {
                walk.out.push(Node::AvgPool(*p));
                walk.relu();
                walk.pending *= b.g;
            }
            other => {
                if let Shortcut::AvgPool(p) = other {
                    walk.out.push(Node::AvgPool(*p));
                }
                warnings.push(format!(
                    "node {index}: gate g = {} is not positive; kept as an explicit scale",
                    b.g
                ));
                walk.out.push(Node::ScalarScale(b.g * walk.pending));
                walk.out.push(Node::Relu);
                walk.pending = 1.0;
                walk.nonneg = true;
            }
        }
    }
    walk.flush();
    if !walk.out.iter().any(Node::is_parameterized) {
        return Err(SurgeryError::AllPruned);
    }
    let pruned_graph = ModelGraph {
        nodes: walk.out,
        ..g.clone()
    };
    let after = cost_report(&pruned_graph)?;
    let report = PruneReport {
        threshold,
        pruned: entries.iter().filter(|e| e.pruned).map(|e| e.index).collect(),
        nodes: entries,
        flops_before: before.flops,
        flops_after: after.flops,
        params_before: before.params,
        params_after: after.params,
        flops_reduction_pct: pct_reduction(before.flops, after.flops),
        params_reduction_pct: pct_reduction(before.params, after.params),
        warnings,
    };
    Ok((pruned_graph, report))
}

/// Prunes with the smallest threshold whose FLOPs reduction reaches `rate`
/// (a fraction in `[0, 1)`). Candidate thresholds sit just above each
/// distinct `|m|`, so every candidate prunes a prefix of the sorted factors.
pub fn prune_to_rate(g: &ModelGraph, rate: f64) -> Result<(ModelGraph, PruneReport), SurgeryError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(SurgeryError::Rate(rate));
    }
    let mut cuts: Vec<f32> = g.m_values().iter().map(|m| m.abs()).collect();
    cuts.sort_by(f32::total_cmp);
    cuts.dedup();
    let mut candidates = vec![0.0f32];
    candidates.extend(cuts.iter().map(|&m| m.next_up()));
    let requested = rate * 100.0;
    let reaches = |t: f32| -> Result<Option<(ModelGraph, PruneReport)>, SurgeryError> {
        match prune(g, t) {
            Ok((pg, r)) if r.flops_reduction_pct >= requested => Ok(Some((pg, r))),
            Ok(_) | Err(SurgeryError::AllPruned) => Ok(None),
            Err(e) => Err(e),
        }
    };
    // FLOPs fall monotonically as the threshold rises, so bisect for the
    // first candidate that reaches the target.
    let (mut lo, mut hi) = (0, candidates.len());
    let mut best = None;
    while lo < hi {
        let mid = (lo + hi) / 2;
        match reaches(candidates[mid])? {
            Some(found) => {
                best = Some(found);
                hi = mid;
            }
            None => lo = mid + 1,
        }
    }
    match best {
        Some(found) => Ok(found),
        None => {
            let achievable = candidates
                .iter()
                .rev()
                .find_map(|&t| prune(g, t).ok())
                .map_or(0.0, |(_, r)| r.flops_reduction_pct);
            Err(SurgeryError::RateUnreachable { requested, achievable })
        }
    }
}
