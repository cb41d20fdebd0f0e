//! Reference architectures as chain graphs.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvParams, Tensor};

use super::{BatchNormParams, GraphError, LinearParams, ModelGraph, Node, PoolParams, ResidualBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Vgg16Cifar,
    /// Chain of 55 conv layers plus classifier, block shortcuts dropped.
    Resnet56Cifar,
    Resnet110Cifar,
    MobilenetCifar,
    Resnet50Imagenet,
    MobilenetImagenet,
    /// `depth` weight layers without shortcuts: `depth - 1` convs and a classifier.
    Plain { depth: usize },
    /// `depth` 3x3 convs of `width` channels, global pooling and a classifier.
    Toy { depth: usize, width: usize },
}

impl Arch {
    /// Architectures built only for cost accounting (grouped convs or
    /// residual nodes that training does not support).
    pub fn is_counting_only(self) -> bool {
        matches!(self, Arch::MobilenetCifar | Arch::Resnet50Imagenet | Arch::MobilenetImagenet)
    }

    fn default_input(self) -> (Vec<usize>, usize) {
        match self {
            Arch::Vgg16Cifar | Arch::Resnet56Cifar | Arch::Resnet110Cifar | Arch::MobilenetCifar => (vec![3, 32, 32], 10),
            Arch::Resnet50Imagenet | Arch::MobilenetImagenet => (vec![3, 224, 224], 1000),
            Arch::Plain { .. } | Arch::Toy { .. } => (vec![1, 8, 8], 4),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Vgg16Cifar => f.write_str("vgg16-cifar"),
            Arch::Resnet56Cifar => f.write_str("resnet56-cifar"),
            Arch::Resnet110Cifar => f.write_str("resnet110-cifar"),
            Arch::MobilenetCifar => f.write_str("mobilenet-cifar"),
            Arch::Resnet50Imagenet => f.write_str("resnet50-imagenet"),
            Arch::MobilenetImagenet => f.write_str("mobilenet-imagenet"),
            Arch::Plain { depth } => write!(f, "plain({depth})"),
            Arch::Toy { depth, width } => write!(f, "toy({depth},{width})"),
        }
    }
}

/// Parses `name(a,b)` or `name-a-b` into the name and its integer arguments.
fn split_args(s: &str) -> Option<(&str, Vec<usize>)> {
    if let Some(open) = s.find('(') {
        let inner = s[open + 1..].strip_suffix(')')?;
        let args = inner.split(',').map(|a| a.trim().parse().ok()).collect::<Option<Vec<_>>>()?;
        return Some((&s[..open], args));
    }
    let mut parts = s.split('-');
    let name = parts.next()?;
    let args = parts.map(|a| a.parse().ok()).collect::<Option<Vec<_>>>()?;
    Some((name, args))
}

impl FromStr for Arch {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        let fixed = match t.as_str() {
            "vgg16-cifar" => Some(Arch::Vgg16Cifar),
            "resnet56-cifar" => Some(Arch::Resnet56Cifar),
            "resnet110-cifar" => Some(Arch::Resnet110Cifar),
            "mobilenet-cifar" => Some(Arch::MobilenetCifar),
            "resnet50-imagenet" => Some(Arch::Resnet50Imagenet),
            "mobilenet-imagenet" => Some(Arch::MobilenetImagenet),
            _ => None,
        };
        if let Some(a) = fixed {
            return Ok(a);
        }
        let parsed = match split_args(&t) {
            Some(("plain", args)) if args.len() == 1 && args[0] >= 2 => Some(Arch::Plain { depth: args[0] }),
            Some(("toy", args)) if args.len() == 2 && args[0] >= 1 && args[1] >= 1 => Some(Arch::Toy {
                depth: args[0],
                width: args[1],
            }),
            _ => None,
        };
        parsed.ok_or_else(|| GraphError::UnknownArch(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuildOptions {
    pub seed: u64,
    /// Overrides the architecture's usual `(c, h, w)` input.
    pub input_shape: Option<Vec<usize>>,
    pub classes: Option<usize>,
}

impl BuildOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            input_shape: None,
            classes: None,
        }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    channels: usize,
}

impl Builder {
    fn conv(&mut self, out: usize, k: usize, stride: usize, groups: usize) -> ConvParams {
        let per_group = self.channels / groups;
        let std = (2.0 / (per_group * k * k) as f64).sqrt();
        let weight = Tensor::randn(&[out, per_group, k, k], std, &mut self.rng);
        self.channels = out;
        ConvParams {
            weight,
            bias: None,
            stride,
            padding: k / 2,
            groups,
        }
    }

    fn conv_bn(&mut self, out: usize, k: usize, stride: usize, groups: usize) -> [Node; 2] {
        let c = self.conv(out, k, stride, groups);
        [Node::Conv(c), Node::BatchNorm(BatchNormParams::identity(out))]
    }

    fn conv_bn_relu(&mut self, out: usize, k: usize, stride: usize) {
        self.grouped_conv_bn_relu(out, k, stride, 1);
    }

    fn grouped_conv_bn_relu(&mut self, out: usize, k: usize, stride: usize, groups: usize) {
        let [c, bn] = self.conv_bn(out, k, stride, groups);
        self.nodes.extend([c, bn, Node::Relu]);
    }

    fn linear(&mut self, out: usize) -> Node {
        let std = (2.0 / self.channels as f64).sqrt();
        let weight = Tensor::randn(&[out, self.channels], std, &mut self.rng);
        self.channels = out;
        Node::Linear(LinearParams {
            weight,
            bias: Some(Tensor::zeros(&[out])),
        })
    }

    fn head(&mut self, pool: usize, classes: usize) {
        self.nodes.push(Node::AvgPool(PoolParams::new(pool, pool, 0)));
        self.nodes.push(Node::Flatten);
        let l = self.linear(classes);
        self.nodes.push(l);
    }
}

pub fn build_reference(arch: Arch, seed: u64) -> Result<ModelGraph, GraphError> {
    build_with(arch, &BuildOptions::seeded(seed))
}

pub fn build_with(arch: Arch, opts: &BuildOptions) -> Result<ModelGraph, GraphError> {
    let (default_input, default_classes) = arch.default_input();
    let input = opts.input_shape.clone().unwrap_or(default_input);
    let classes = opts.classes.unwrap_or(default_classes);
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        nodes: Vec::new(),
        channels: input[0],
    };
    // Spatial extent reaching the global pooling layer.
    let final_extent = |shrink: usize| input.get(1).map_or(1, |h| (h / shrink).max(1));
    match arch {
        Arch::Vgg16Cifar => {
            let cfg: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
            for stage in cfg {
                for &w in stage {
                    b.conv_bn_relu(w, 3, 1);
                }
                b.nodes.push(Node::MaxPool(PoolParams::new(2, 2, 0)));
            }
            b.nodes.push(Node::Flatten);
            b.channels *= final_extent(32).pow(2);
            let l = b.linear(512);
            b.nodes.extend([l, Node::BatchNorm(BatchNormParams::identity(512)), Node::Relu]);
            let l = b.linear(classes);
            b.nodes.push(l);
        }
        Arch::Resnet56Cifar | Arch::Resnet110Cifar => {
            let n = if arch == Arch::Resnet56Cifar { 9 } else { 18 };
            b.conv_bn_relu(16, 3, 1);
            for (s, w) in [16, 32, 64].into_iter().enumerate() {
                for i in 0..2 * n {
                    b.conv_bn_relu(w, 3, if s > 0 && i == 0 { 2 } else { 1 });
                }
            }
            b.head(final_extent(4), classes);
        }
        Arch::MobilenetCifar | Arch::MobilenetImagenet => {
            let imagenet = arch == Arch::MobilenetImagenet;
            b.conv_bn_relu(32, 3, if imagenet { 2 } else { 1 });
            let cfg = [
                (64, 1),
                (128, 2),
                (128, 1),
                (256, 2),
                (256, 1),
                (512, 2),
                (512, 1),
                (512, 1),
                (512, 1),
                (512, 1),
                (512, 1),
                (1024, 2),
                (1024, 1),
            ];
            for (w, s) in cfg {
                let c = b.channels;
                b.grouped_conv_bn_relu(c, 3, s, c);
                b.conv_bn_relu(w, 1, 1);
            }
            b.head(final_extent(if imagenet { 32 } else { 16 }), classes);
        }
        Arch::Resnet50Imagenet => {
            b.conv_bn_relu(64, 7, 2);
            b.nodes.push(Node::MaxPool(PoolParams::new(3, 2, 1)));
            for (stage, (blocks, w)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
                for i in 0..blocks {
                    let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                    let cin = b.channels;
                    let mut body = Vec::new();
                    body.extend(b.conv_bn(w, 1, 1, 1));
                    body.push(Node::Relu);
                    body.extend(b.conv_bn(w, 3, stride, 1));
                    body.push(Node::Relu);
                    body.extend(b.conv_bn(4 * w, 1, 1, 1));
                    let shortcut = if i == 0 {
                        b.channels = cin;
                        b.conv_bn(4 * w, 1, stride, 1).to_vec()
                    } else {
                        Vec::new()
                    };
                    b.nodes.push(Node::Residual(ResidualBlock { body, shortcut }));
                }
            }
            b.head(final_extent(32), classes);
        }
        Arch::Plain { depth } => {
            b.conv_bn_relu(16, 3, 1);
            let convs = depth.saturating_sub(2);
            for (s, w) in [16, 32, 64].into_iter().enumerate() {
                let count = convs / 3 + usize::from(s < convs % 3);
                for i in 0..count {
                    b.conv_bn_relu(w, 3, if s > 0 && i == 0 { 2 } else { 1 });
                }
            }
            let shrink = 1 << (1..3).filter(|&s| convs / 3 + usize::from(s < convs % 3) > 0).count();
            b.head(final_extent(shrink), classes);
        }
        Arch::Toy { depth, width } => {
            for _ in 0..depth {
                b.conv_bn_relu(width, 3, 1);
            }
            b.head(final_extent(1), classes);
        }
    }
    let g = ModelGraph::new(arch.to_string(), input, b.nodes);
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;

    #[test]
    fn tags_round_trip() {
        for a in [
            Arch::Vgg16Cifar,
            Arch::Resnet56Cifar,
            Arch::Resnet110Cifar,
            Arch::MobilenetCifar,
            Arch::Resnet50Imagenet,
            Arch::MobilenetImagenet,
            Arch::Plain { depth: 16 },
            Arch::Toy { depth: 4, width: 8 },
        ] {
            assert_eq!(a.to_string().parse::<Arch>().unwrap(), a);
        }
        assert_eq!("toy-8-16".parse::<Arch>().unwrap(), Arch::Toy { depth: 8, width: 16 });
        assert!(matches!("lenet".parse::<Arch>(), Err(GraphError::UnknownArch(_))));
    }

    #[test]
    fn toy_has_declared_convs_and_output() {
        let g = build_reference(Arch::Toy { depth: 4, width: 8 }, 0).unwrap();
        let convs: Vec<_> = g
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Conv(c) => Some(c.out_channels()),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![8; 4]);
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        assert_eq!(g.forward(&x, Mode::Infer).unwrap().shape(), [2, 4]);
    }

    #[test]
    fn plain_depth_counts_weight_layers() {
        for depth in [2, 5, 16, 20] {
            let g = build_reference(Arch::Plain { depth }, 1).unwrap();
            let layers = g.nodes.iter().filter(|n| n.is_parameterized()).count();
            assert_eq!(layers, depth);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_reference(Arch::Toy { depth: 3, width: 4 }, 9).unwrap();
        let b = build_reference(Arch::Toy { depth: 3, width: 4 }, 9).unwrap();
        let c = build_reference(Arch::Toy { depth: 3, width: 4 }, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
