//! Executing a graph: a direct path for inference and a taped path for training.

use crate::tensor::ops::{self, BatchStats};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

use super::{GraphError, Mode, ModelGraph, Node, ParamId, ParamSlot, ResConvBlock, Shortcut, BN_MOMENTUM};

fn node_err(index: usize, node: &Node) -> impl FnOnce(TensorError) -> GraphError {
    let kind = node.kind_name();
    move |source| GraphError::Node { index, kind, source }
}

fn flatten<T: Scalar>(x: Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let n = x.shape()[0];
    let rest = x.len().checked_div(n).unwrap_or(0);
    x.reshape(&[n, rest])
}

fn batchnorm_forward(
    bn: &super::BatchNormParams,
    x: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Option<BatchStats<f32>>), TensorError> {
    match mode {
        Mode::Infer => Ok((bn.forward(x)?, None)),
        Mode::Train => {
            let (y, stats) = ops::batchnorm_train(x, &bn.gamma, &bn.beta, bn.eps)?;
            Ok((y, Some(stats)))
        }
    }
}

fn resconv_forward(b: &ResConvBlock, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<BatchStats<f32>>), TensorError> {
    let z = b.conv.forward(x)?;
    let (z, stats) = batchnorm_forward(&b.bn, &z, mode)?;
    let owned;
    let sc: &Tensor = match &b.shortcut {
        Shortcut::Identity => x,
        Shortcut::Proj1x1(p) => {
            owned = p.forward(x)?;
            &owned
        }
        Shortcut::AvgPool(pp) => {
            owned = ops::avgpool2d(x, pp.kernel, pp.stride, pp.padding)?;
            &owned
        }
    };
    if sc.shape() != z.shape() {
        return Err(crate::tensor::shape_err("resconv", format!("shortcut shaped {:?}", z.shape()), sc.shape()));
    }
    let data = z
        .data()
        .iter()
        .zip(sc.data())
        .map(|(&a, &s)| {
            let v = b.m * a + b.g * s;
            if v > 0.0 {
                v
            } else {
                0.0
            }
        })
        .collect();
    Ok((Tensor::new(z.shape().to_vec(), data)?, stats))
}

fn run_chain(nodes: &[Node], mut x: Tensor, mode: Mode) -> Result<Tensor, TensorError> {
    for n in nodes {
        x = node_forward(n, x, mode)?.0;
    }
    Ok(x)
}

/// One node on the direct path. Returns batch statistics of training-mode
/// batch norms so the caller can update running values.
pub(crate) fn node_forward(node: &Node, x: Tensor, mode: Mode) -> Result<(Tensor, Option<BatchStats<f32>>), TensorError> {
    Ok(match node {
        Node::Conv(p) => (p.forward(&x)?, None),
        Node::BatchNorm(bn) => batchnorm_forward(bn, &x, mode)?,
        Node::Relu => (ops::relu(&x), None),
        Node::AvgPool(p) => (ops::avgpool2d(&x, p.kernel, p.stride, p.padding)?, None),
        Node::MaxPool(p) => (ops::maxpool2d(&x, p.kernel, p.stride, p.padding)?.0, None),
        Node::Linear(l) => (ops::linear(&x, &l.weight, l.bias.as_ref())?, None),
        Node::Flatten => (flatten(x)?, None),
        Node::ScalarScale(c) => (x.map(|v| c * v), None),
        Node::ResConv(b) => resconv_forward(b, &x, mode)?,
        Node::Residual(r) => {
            let body = run_chain(&r.body, x.clone(), mode)?;
            let sc = run_chain(&r.shortcut, x, mode)?;
            if body.shape() != sc.shape() {
                return Err(crate::tensor::shape_err("residual", format!("shortcut shaped {:?}", body.shape()), sc.shape()));
            }
            let data = body
                .data()
                .iter()
                .zip(sc.data())
                .map(|(&a, &s)| (a + s).max(0.0))
                .collect();
            (Tensor::new(body.shape().to_vec(), data)?, None)
        }
    })
}

impl ModelGraph {
    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<(), GraphError> {
        let s = x.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(GraphError::Input(crate::tensor::shape_err(
                "forward",
                format!("(batch, {})", dims(&self.input_shape)),
                s,
            )));
        }
        Ok(())
    }

    /// Applies every node in order. In [`Mode::Train`] batch norms use batch
    /// statistics but running statistics are left untouched; see
    /// [`ModelGraph::forward_train`].
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor, GraphError> {
        self.check_input(x)?;
        let mut y = x.clone();
        for (i, n) in self.nodes.iter().enumerate() {
            y = node_forward(n, y, mode).map_err(node_err(i, n))?.0;
        }
        Ok(y)
    }

    /// Training-mode forward that also blends batch statistics into every
    /// batch norm's running mean and variance.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, GraphError> {
        self.check_input(x)?;
        let mut y = x.clone();
        let mut updates = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let (out, stats) = node_forward(n, y, Mode::Train).map_err(node_err(i, n))?;
            if let Some(s) = stats {
                updates.push((i, s));
            }
            y = out;
        }
        self.apply_batch_stats(&updates);
        Ok(y)
    }

    /// Exponential moving average with momentum [`BN_MOMENTUM`]; variance uses
    /// the unbiased batch estimate.
    pub fn apply_batch_stats(&mut self, updates: &[(usize, BatchStats<f32>)]) {
        for (i, stats) in updates {
            let Some(bn) = self.batchnorm_mut(*i) else { continue };
            let var = stats.unbiased_var();
            for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(stats.mean.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in bn.running_var.data_mut().iter_mut().zip(var.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

fn dims(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
}

/// Result of recording a graph's forward pass on a tape.
pub struct Recorded<T: Scalar> {
    pub output: Var,
    /// Tape leaf of every trainable parameter, in [`ModelGraph::param_ids`] order.
    pub params: Vec<(ParamId, Var)>,
    /// Batch statistics per top-level batch-norm site (training mode only).
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

struct Recorder<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    params: Vec<(ParamId, Var)>,
    batch_stats: Vec<(usize, BatchStats<T>)>,
    mode: Mode,
}

impl<T: Scalar> Recorder<'_, T> {
    fn param(&mut self, node: usize, slot: ParamSlot, t: &Tensor) -> Var {
        let v = self.tape.param(t.cast());
        self.params.push((ParamId { node, slot }, v));
        v
    }

    fn scalar_param(&mut self, node: usize, slot: ParamSlot, value: f32) -> Var {
        let v = self.tape.param(Tensor::scalar(T::from_f32(value)));
        self.params.push((ParamId { node, slot }, v));
        v
    }

    fn batchnorm(&mut self, index: usize, bn: &super::BatchNormParams, x: Var) -> Result<Var, TensorError> {
        let gamma = self.param(index, ParamSlot::BnGamma, &bn.gamma);
        let beta = self.param(index, ParamSlot::BnBeta, &bn.beta);
        let eps = T::from_f32(bn.eps);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm_train(x, gamma, beta, eps)?;
                self.batch_stats.push((index, stats));
                Ok(y)
            }
            Mode::Infer => self
                .tape
                .batchnorm_infer(x, gamma, beta, &bn.running_mean.cast(), &bn.running_var.cast(), eps),
        }
    }

    fn node(&mut self, index: usize, node: &Node, x: Var) -> Result<Var, GraphError> {
        let err = node_err(index, node);
        let out = match node {
            Node::Conv(p) => {
                if p.groups != 1 {
                    return Err(GraphError::NotTrainable {
                        index,
                        kind: node.kind_name(),
                    });
                }
                let w = self.param(index, ParamSlot::ConvWeight, &p.weight);
                let b = p.bias.as_ref().map(|b| self.param(index, ParamSlot::ConvBias, b));
                self.tape.conv2d(x, w, b, p.stride, p.padding)
            }
            Node::BatchNorm(bn) => self.batchnorm(index, bn, x),
            Node::Relu => Ok(self.tape.relu(x)),
            Node::AvgPool(p) => self.tape.avgpool2d(x, p.kernel, p.stride, p.padding),
            Node::MaxPool(p) => self.tape.maxpool2d(x, p.kernel, p.stride, p.padding),
            Node::Linear(l) => {
                let w = self.param(index, ParamSlot::LinearWeight, &l.weight);
                let b = l.bias.as_ref().map(|b| self.param(index, ParamSlot::LinearBias, b));
                self.tape.linear(x, w, b)
            }
            Node::Flatten => self.tape.flatten(x),
            Node::ScalarScale(c) => {
                let s = self.tape.constant(Tensor::scalar(T::from_f32(*c)));
                self.tape.scale(x, s)
            }
            Node::ResConv(b) => {
                if b.conv.groups != 1 {
                    return Err(GraphError::NotTrainable {
                        index,
                        kind: node.kind_name(),
                    });
                }
                self.resconv(index, b, x)
            }
            Node::Residual(_) => {
                return Err(GraphError::NotTrainable {
                    index,
                    kind: node.kind_name(),
                })
            }
        };
        out.map_err(err)
    }

    fn resconv(&mut self, index: usize, b: &ResConvBlock, x: Var) -> Result<Var, TensorError> {
        let w = self.param(index, ParamSlot::ConvWeight, &b.conv.weight);
        let bias = b.conv.bias.as_ref().map(|t| self.param(index, ParamSlot::ConvBias, t));
        let z = self.tape.conv2d(x, w, bias, b.conv.stride, b.conv.padding)?;
        let z = self.batchnorm(index, &b.bn, z)?;
        let m = self.scalar_param(index, ParamSlot::M, b.m);
        let g = self.scalar_param(index, ParamSlot::G, b.g);
        let sc = match &b.shortcut {
            Shortcut::Identity => x,
            Shortcut::Proj1x1(p) => {
                let pw = self.param(index, ParamSlot::ProjWeight, &p.weight);
                let pb = p.bias.as_ref().map(|t| self.param(index, ParamSlot::ProjBias, t));
                self.tape.conv2d(x, pw, pb, p.stride, p.padding)?
            }
            Shortcut::AvgPool(pp) => self.tape.avgpool2d(x, pp.kernel, pp.stride, pp.padding)?,
        };
        let main = self.tape.scale(z, m)?;
        let gated = self.tape.scale(sc, g)?;
        let sum = self.tape.add(main, gated)?;
        Ok(self.tape.relu(sum))
    }
}

/// Records the forward pass of `graph` on `tape`, with every trainable
/// parameter as a fresh leaf. Parameter order matches [`ModelGraph::param_ids`].
pub fn record<T: Scalar>(graph: &ModelGraph, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Recorded<T>, GraphError> {
    graph.check_input(tape.value(x))?;
    let mut rec = Recorder {
        tape,
        params: Vec::new(),
        batch_stats: Vec::new(),
        mode,
    };
    let mut y = x;
    for (i, n) in graph.nodes.iter().enumerate() {
        y = rec.node(i, n, y)?;
    }
    Ok(Recorded {
        output: y,
        params: rec.params,
        batch_stats: rec.batch_stats,
    })
}
