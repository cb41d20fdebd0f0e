//! Model representation: an ordered chain of typed nodes.
//!
//! All residual structure used for training lives inside [`Node::ResConv`];
//! [`Node::Residual`] exists so counting-only reference architectures keep
//! their projection shortcuts.

pub mod build;
pub mod exec;
pub mod format;

use thiserror::Error;

use crate::tensor::{ops, shape_err, ConvParams, Tensor, TensorError};

pub use build::{build_reference, build_with, Arch, BuildOptions};
pub use exec::{record, Recorded};

pub const FORMAT_VERSION: &str = "resfuse-v1";
/// Added to the variance wherever a normalisation scale is formed.
pub const BN_EPS: f32 = 1e-5;
/// Weight of the current batch in running-statistic updates.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node {index} ({kind}): {source}")]
    Node {
        index: usize,
        kind: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("input does not match the declared shape: {0}")]
    Input(#[source] TensorError),
    #[error("node {index} ({kind}) is counting-only and cannot be trained")]
    NotTrainable { index: usize, kind: &'static str },
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
}

impl GraphError {
    /// True when evaluation failed on an overflowed or NaN value.
    pub fn is_non_finite(&self) -> bool {
        matches!(self, GraphError::Node { source: TensorError::NonFinite { .. }, .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolParams {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

impl BatchNormParams {
    /// `gamma = 1`, `beta = 0`, `mean = 0`, `var = 1`.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `sqrt(running_var + eps)` per channel.
    pub fn sigma(&self) -> Vec<f32> {
        self.running_var.data().iter().map(|&v| (v + self.eps).sqrt()).collect()
    }

    fn validate(&self) -> Result<(), TensorError> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(shape_err("batchnorm", format!("{name} of length {c}"), t.shape()));
            }
        }
        if self.gamma.shape() != [c] {
            return Err(shape_err("batchnorm", "1-D gamma", self.gamma.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        ops::batchnorm(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var, self.eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    /// `(out, in)`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutKind {
    Identity,
    Proj1x1,
    AvgPool,
}

impl std::fmt::Display for ShortcutKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShortcutKind::Identity => "identity",
            ShortcutKind::Proj1x1 => "proj1x1",
            ShortcutKind::AvgPool => "avgpool",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    Identity,
    /// 1×1 convolution; its stride follows the block's convolution.
    Proj1x1(ConvParams),
    /// Same kernel, stride and padding as the block's convolution.
    AvgPool(PoolParams),
}

impl Shortcut {
    pub fn kind(&self) -> ShortcutKind {
        match self {
            Shortcut::Identity => ShortcutKind::Identity,
            Shortcut::Proj1x1(_) => ShortcutKind::Proj1x1,
            Shortcut::AvgPool(_) => ShortcutKind::AvgPool,
        }
    }
}

/// One convolution with batch norm, a layer scaling factor `m` and a gated
/// shortcut: `y = relu(m * BN(conv(x)) + g * f(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResConvBlock {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
    pub m: f32,
    pub g: f32,
    pub shortcut: Shortcut,
}

impl ResConvBlock {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, TensorError> {
        let out = conv_shape(&self.conv, input)?;
        self.bn.validate()?;
        if self.bn.channels() != out[0] {
            return Err(shape_err(
                "resconv",
                format!("batch norm over {} channels", out[0]),
                &[self.bn.channels()],
            ));
        }
        let sc = match &self.shortcut {
            Shortcut::Identity => input.to_vec(),
            Shortcut::Proj1x1(p) => {
                if p.kernel() != 1 || p.padding != 0 {
                    return Err(shape_err("resconv", "a 1x1 projection without padding", p.weight.shape()));
                }
                if p.stride != self.conv.stride {
                    return Err(TensorError::Invalid {
                        op: "resconv",
                        msg: format!("projection stride {} differs from conv stride {}", p.stride, self.conv.stride),
                    });
                }
                conv_shape(p, input)?
            }
            Shortcut::AvgPool(pp) => {
                if (pp.kernel, pp.stride, pp.padding) != (self.conv.kernel(), self.conv.stride, self.conv.padding) {
                    return Err(TensorError::Invalid {
                        op: "resconv",
                        msg: format!(
                            "avgpool shortcut ({}, {}, {}) must match conv kernel/stride/padding ({}, {}, {})",
                            pp.kernel,
                            pp.stride,
                            pp.padding,
                            self.conv.kernel(),
                            self.conv.stride,
                            self.conv.padding
                        ),
                    });
                }
                pool_shape("avgpool", pp, input)?
            }
        };
        if sc != out {
            return Err(shape_err(
                "resconv",
                format!("shortcut output equal to conv output {out:?}"),
                &sc,
            ));
        }
        Ok(out)
    }
}

/// Plain residual block `relu(body(x) + shortcut(x))`; an empty shortcut is
/// the identity. Only emitted by counting-oriented builders.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub body: Vec<Node>,
    pub shortcut: Vec<Node>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Conv(ConvParams),
    BatchNorm(BatchNormParams),
    Relu,
    AvgPool(PoolParams),
    MaxPool(PoolParams),
    Linear(LinearParams),
    Flatten,
    ScalarScale(f32),
    ResConv(ResConvBlock),
    Residual(ResidualBlock),
}

fn conv_shape(p: &ConvParams, input: &[usize]) -> Result<Vec<usize>, TensorError> {
    p.validate()?;
    match *input {
        [c, h, w] if c == p.in_channels() => match (p.out_extent(h), p.out_extent(w)) {
            (Some(ho), Some(wo)) => Ok(vec![p.out_channels(), ho, wo]),
            _ => Err(shape_err(
                "conv",
                format!("spatial extent >= {} after padding {}", p.kernel(), p.padding),
                input,
            )),
        },
        _ => Err(shape_err("conv", format!("input ({}, h, w)", p.in_channels()), input)),
    }
}

fn pool_shape(op: &'static str, p: &PoolParams, input: &[usize]) -> Result<Vec<usize>, TensorError> {
    if p.kernel == 0 || p.stride == 0 || 2 * p.padding > p.kernel {
        return Err(TensorError::Invalid {
            op,
            msg: format!("kernel {}, stride {}, padding {} is not a valid window", p.kernel, p.stride, p.padding),
        });
    }
    match *input {
        [c, h, w] => match (
            ops::out_extent(h, p.kernel, p.stride, p.padding),
            ops::out_extent(w, p.kernel, p.stride, p.padding),
        ) {
            (Some(ho), Some(wo)) => Ok(vec![c, ho, wo]),
            _ => Err(shape_err(op, format!("spatial extent >= {}", p.kernel), input)),
        },
        _ => Err(shape_err(op, "input (c, h, w)", input)),
    }
}

fn chain_shape(nodes: &[Node], input: &[usize]) -> Result<Vec<usize>, TensorError> {
    nodes.iter().try_fold(input.to_vec(), |s, n| n.output_shape(&s))
}

impl Node {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Node::Conv(_) => "conv",
            Node::BatchNorm(_) => "batch_norm",
            Node::Relu => "relu",
            Node::AvgPool(_) => "avg_pool",
            Node::MaxPool(_) => "max_pool",
            Node::Linear(_) => "linear",
            Node::Flatten => "flatten",
            Node::ScalarScale(_) => "scalar_scale",
            Node::ResConv(_) => "resconv",
            Node::Residual(_) => "residual",
        }
    }

    /// Per-sample output shape (no batch dimension).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, TensorError> {
        match self {
            Node::Conv(p) => conv_shape(p, input),
            Node::BatchNorm(bn) => {
                bn.validate()?;
                if input.first() != Some(&bn.channels()) {
                    return Err(shape_err("batchnorm", format!("{} channels", bn.channels()), input));
                }
                Ok(input.to_vec())
            }
            Node::Relu | Node::ScalarScale(_) => Ok(input.to_vec()),
            Node::AvgPool(p) => pool_shape("avgpool", p, input),
            Node::MaxPool(p) => pool_shape("maxpool", p, input),
            Node::Linear(l) => {
                if l.weight.rank() != 2 {
                    return Err(shape_err("linear", "weight (out, in)", l.weight.shape()));
                }
                if let Some(b) = &l.bias {
                    if b.shape() != [l.out_features()] {
                        return Err(shape_err("linear", format!("bias of length {}", l.out_features()), b.shape()));
                    }
                }
                if input != [l.in_features()] {
                    return Err(shape_err("linear", format!("input ({})", l.in_features()), input));
                }
                Ok(vec![l.out_features()])
            }
            Node::Flatten => Ok(vec![input.iter().product()]),
            Node::ResConv(b) => b.output_shape(input),
            Node::Residual(r) => {
                let body = chain_shape(&r.body, input)?;
                let sc = chain_shape(&r.shortcut, input)?;
                if body != sc {
                    return Err(shape_err("residual", format!("shortcut output equal to body output {body:?}"), &sc));
                }
                Ok(body)
            }
        }
    }

    /// Nodes holding convolution or linear weights.
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Node::Conv(_) | Node::Linear(_) | Node::ResConv(_) | Node::Residual(_))
    }
}

/// Which tensor of a node a trainable parameter refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
    /// Layer scaling factor of a ResConv block.
    M,
    /// Shortcut gate of a ResConv block.
    G,
    ProjWeight,
    ProjBias,
}

impl ParamSlot {
    /// Scalar block factors, excluded from weight decay.
    pub fn is_block_scalar(self) -> bool {
        matches!(self, ParamSlot::M | ParamSlot::G)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub node: usize,
    pub slot: ParamSlot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub version: String,
    /// Per-sample input shape, `(c, h, w)`.
    pub input_shape: Vec<usize>,
    pub nodes: Vec<Node>,
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, nodes: Vec<Node>) -> Self {
        Self {
            name: name.into(),
            version: FORMAT_VERSION.to_string(),
            input_shape,
            nodes,
        }
    }

    /// Input shape followed by every node's output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, GraphError> {
        let mut shapes = vec![self.input_shape.clone()];
        for (index, node) in self.nodes.iter().enumerate() {
            let s = node
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|source| GraphError::Node {
                    index,
                    kind: node.kind_name(),
                    source,
                })?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        self.shapes().map(|_| ())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, GraphError> {
        Ok(self.shapes()?.pop().expect("non-empty"))
    }

    pub fn resconv_indices(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| matches!(n, Node::ResConv(_)).then_some(i))
            .collect()
    }

    pub fn resconv_blocks(&self) -> impl Iterator<Item = (usize, &ResConvBlock)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n {
            Node::ResConv(b) => Some((i, b)),
            _ => None,
        })
    }

    /// Layer scaling factors of all ResConv nodes, in order.
    pub fn m_values(&self) -> Vec<f32> {
        self.resconv_blocks().map(|(_, b)| b.m).collect()
    }

    pub fn g_values(&self) -> Vec<f32> {
        self.resconv_blocks().map(|(_, b)| b.g).collect()
    }

    pub fn sum_abs_m(&self) -> f32 {
        self.resconv_blocks().map(|(_, b)| b.m.abs()).sum()
    }

    /// Trainable parameters in node order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (node, n) in self.nodes.iter().enumerate() {
            let mut push = |slot| ids.push(ParamId { node, slot });
            match n {
                Node::Conv(c) => {
                    push(ParamSlot::ConvWeight);
                    if c.bias.is_some() {
                        push(ParamSlot::ConvBias);
                    }
                }
                Node::BatchNorm(_) => {
                    push(ParamSlot::BnGamma);
                    push(ParamSlot::BnBeta);
                }
                Node::Linear(l) => {
                    push(ParamSlot::LinearWeight);
                    if l.bias.is_some() {
                        push(ParamSlot::LinearBias);
                    }
                }
                Node::ResConv(b) => {
                    push(ParamSlot::ConvWeight);
                    if b.conv.bias.is_some() {
                        push(ParamSlot::ConvBias);
                    }
                    push(ParamSlot::BnGamma);
                    push(ParamSlot::BnBeta);
                    push(ParamSlot::M);
                    push(ParamSlot::G);
                    if let Shortcut::Proj1x1(p) = &b.shortcut {
                        push(ParamSlot::ProjWeight);
                        if p.bias.is_some() {
                            push(ParamSlot::ProjBias);
                        }
                    }
                }
                _ => {}
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        use ParamSlot::*;
        Some(match (self.nodes.get(id.node)?, id.slot) {
            (Node::Conv(c), ConvWeight) => c.weight.data(),
            (Node::Conv(c), ConvBias) => c.bias.as_ref()?.data(),
            (Node::BatchNorm(bn), BnGamma) => bn.gamma.data(),
            (Node::BatchNorm(bn), BnBeta) => bn.beta.data(),
            (Node::Linear(l), LinearWeight) => l.weight.data(),
            (Node::Linear(l), LinearBias) => l.bias.as_ref()?.data(),
            (Node::ResConv(b), ConvWeight) => b.conv.weight.data(),
            (Node::ResConv(b), ConvBias) => b.conv.bias.as_ref()?.data(),
            (Node::ResConv(b), BnGamma) => b.bn.gamma.data(),
            (Node::ResConv(b), BnBeta) => b.bn.beta.data(),
            (Node::ResConv(b), M) => std::slice::from_ref(&b.m),
            (Node::ResConv(b), G) => std::slice::from_ref(&b.g),
            (Node::ResConv(b), ProjWeight) => match &b.shortcut {
                Shortcut::Proj1x1(p) => p.weight.data(),
                _ => return None,
            },
            (Node::ResConv(b), ProjBias) => match &b.shortcut {
                Shortcut::Proj1x1(p) => p.bias.as_ref()?.data(),
                _ => return None,
            },
            _ => return None,
        })
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut [f32]> {
        use ParamSlot::*;
        Some(match (self.nodes.get_mut(id.node)?, id.slot) {
            (Node::Conv(c), ConvWeight) => c.weight.data_mut(),
            (Node::Conv(c), ConvBias) => c.bias.as_mut()?.data_mut(),
            (Node::BatchNorm(bn), BnGamma) => bn.gamma.data_mut(),
            (Node::BatchNorm(bn), BnBeta) => bn.beta.data_mut(),
            (Node::Linear(l), LinearWeight) => l.weight.data_mut(),
            (Node::Linear(l), LinearBias) => l.bias.as_mut()?.data_mut(),
            (Node::ResConv(b), ConvWeight) => b.conv.weight.data_mut(),
            (Node::ResConv(b), ConvBias) => b.conv.bias.as_mut()?.data_mut(),
            (Node::ResConv(b), BnGamma) => b.bn.gamma.data_mut(),
            (Node::ResConv(b), BnBeta) => b.bn.beta.data_mut(),
            (Node::ResConv(b), M) => std::slice::from_mut(&mut b.m),
            (Node::ResConv(b), G) => std::slice::from_mut(&mut b.g),
            (Node::ResConv(b), ProjWeight) => match &mut b.shortcut {
                Shortcut::Proj1x1(p) => p.weight.data_mut(),
                _ => return None,
            },
            (Node::ResConv(b), ProjBias) => match &mut b.shortcut {
                Shortcut::Proj1x1(p) => p.bias.as_mut()?.data_mut(),
                _ => return None,
            },
            _ => return None,
        })
    }

    /// Batch-norm parameters owned by top-level node `index`, if any.
    pub fn batchnorm_mut(&mut self, index: usize) -> Option<&mut BatchNormParams> {
        match self.nodes.get_mut(index)? {
            Node::BatchNorm(bn) => Some(bn),
            Node::ResConv(b) => Some(&mut b.bn),
            _ => None,
        }
    }

    /// True when every parameter and batch-norm running statistic is finite.
    pub fn is_finite(&self) -> bool {
        let params = self.param_ids().iter().all(|&id| self.param(id).is_some_and(|p| p.iter().all(|v| v.is_finite())));
        let stats = self.nodes.iter().all(|n| match n {
            Node::BatchNorm(bn) | Node::ResConv(ResConvBlock { bn, .. }) => bn.running_mean.is_finite() && bn.running_var.is_finite(),
            _ => true,
        });
        params && stats
    }

    /// Fails with the first node that training cannot handle.
    pub fn check_trainable(&self) -> Result<(), GraphError> {
        for (index, n) in self.nodes.iter().enumerate() {
            let grouped = match n {
                Node::Conv(c) => c.groups != 1,
                Node::ResConv(b) => b.conv.groups != 1,
                Node::Residual(_) => true,
                _ => false,
            };
            if grouped {
                return Err(GraphError::NotTrainable {
                    index,
                    kind: n.kind_name(),
                });
            }
        }
        Ok(())
    }
}
