//! On-disk model format: `model.json` describes the chain, `weights.bin`
//! holds every tensor as little-endian `f32` in declaration order.
//!
//! `weights.bin` layout: magic `RSFW`, `u32` layout version, `u32` top-level
//! node count, the tensor payload, then a CRC32 of everything before it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ConvParams, Tensor, TensorError};

use super::{
    BatchNormParams, GraphError, LinearParams, ModelGraph, Node, PoolParams, ResConvBlock, ResidualBlock, Shortcut,
    FORMAT_VERSION,
};

pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const MAGIC: &[u8; 4] = b"RSFW";
const LAYOUT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model description: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version `{found}` (expected `{FORMAT_VERSION}`)")]
    Version { found: String },
    #[error("weights file does not start with the expected magic bytes")]
    Magic,
    #[error("unsupported weights layout version {0}")]
    LayoutVersion(u32),
    #[error("weights file declares {bin} nodes but the description has {json}")]
    NodeCount { json: usize, bin: usize },
    #[error("weights truncated at tensor {tensor}: needs bytes {start}..{end} but payload holds {available}")]
    Truncated {
        tensor: String,
        start: usize,
        end: usize,
        available: usize,
    },
    #[error("weights payload has {0} bytes not referenced by any tensor")]
    Unreferenced(usize),
    #[error("weights checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("tensor {tensor}: {source}")]
    Tensor {
        tensor: String,
        #[source]
        source: TensorError,
    },
    #[error("decoded graph is inconsistent: {0}")]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TensorRef {
    /// Byte offset into the payload (after the header).
    offset: usize,
    /// Number of `f32` values.
    length: usize,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ConvDesc {
    weight: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<TensorRef>,
    stride: usize,
    padding: usize,
    #[serde(default = "one")]
    groups: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BnDesc {
    gamma: TensorRef,
    beta: TensorRef,
    running_mean: TensorRef,
    running_var: TensorRef,
    eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ShortcutDesc {
    Identity,
    Proj1x1(ConvDesc),
    AvgPool(PoolParamsDesc),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct PoolParamsDesc {
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl From<PoolParams> for PoolParamsDesc {
    fn from(p: PoolParams) -> Self {
        Self {
            kernel: p.kernel,
            stride: p.stride,
            padding: p.padding,
        }
    }
}

impl From<PoolParamsDesc> for PoolParams {
    fn from(p: PoolParamsDesc) -> Self {
        PoolParams::new(p.kernel, p.stride, p.padding)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum NodeDesc {
    Conv(ConvDesc),
    BatchNorm(BnDesc),
    Relu,
    AvgPool(PoolParamsDesc),
    MaxPool(PoolParamsDesc),
    Linear {
        weight: TensorRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<TensorRef>,
    },
    Flatten,
    ScalarScale {
        scale: f64,
    },
    Resconv {
        conv: ConvDesc,
        bn: BnDesc,
        m: f64,
        g: f64,
        shortcut: ShortcutDesc,
    },
    Residual {
        body: Vec<NodeDesc>,
        shortcut: Vec<NodeDesc>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDesc {
    format: String,
    name: String,
    input_shape: Vec<usize>,
    nodes: Vec<NodeDesc>,
}

#[derive(Default)]
struct Writer {
    payload: Vec<u8>,
}

impl Writer {
    fn tensor(&mut self, t: &Tensor) -> TensorRef {
        let offset = self.payload.len();
        for v in t.data() {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        TensorRef {
            offset,
            length: t.len(),
            shape: t.shape().to_vec(),
        }
    }

    fn conv(&mut self, c: &ConvParams) -> ConvDesc {
        ConvDesc {
            weight: self.tensor(&c.weight),
            bias: c.bias.as_ref().map(|b| self.tensor(b)),
            stride: c.stride,
            padding: c.padding,
            groups: c.groups,
        }
    }

    fn bn(&mut self, bn: &BatchNormParams) -> BnDesc {
        BnDesc {
            gamma: self.tensor(&bn.gamma),
            beta: self.tensor(&bn.beta),
            running_mean: self.tensor(&bn.running_mean),
            running_var: self.tensor(&bn.running_var),
            eps: bn.eps as f64,
        }
    }

    fn node(&mut self, n: &Node) -> NodeDesc {
        match n {
            Node::Conv(c) => NodeDesc::Conv(self.conv(c)),
            Node::BatchNorm(bn) => NodeDesc::BatchNorm(self.bn(bn)),
            Node::Relu => NodeDesc::Relu,
            Node::AvgPool(p) => NodeDesc::AvgPool((*p).into()),
            Node::MaxPool(p) => NodeDesc::MaxPool((*p).into()),
            Node::Linear(l) => NodeDesc::Linear {
                weight: self.tensor(&l.weight),
                bias: l.bias.as_ref().map(|b| self.tensor(b)),
            },
            Node::Flatten => NodeDesc::Flatten,
            Node::ScalarScale(c) => NodeDesc::ScalarScale { scale: *c as f64 },
            Node::ResConv(b) => NodeDesc::Resconv {
                conv: self.conv(&b.conv),
                bn: self.bn(&b.bn),
                m: b.m as f64,
                g: b.g as f64,
                shortcut: match &b.shortcut {
                    Shortcut::Identity => ShortcutDesc::Identity,
                    Shortcut::Proj1x1(p) => ShortcutDesc::Proj1x1(self.conv(p)),
                    Shortcut::AvgPool(p) => ShortcutDesc::AvgPool((*p).into()),
                },
            },
            Node::Residual(r) => NodeDesc::Residual {
                body: r.body.iter().map(|n| self.node(n)).collect(),
                shortcut: r.shortcut.iter().map(|n| self.node(n)).collect(),
            },
        }
    }
}

struct Reader<'a> {
    payload: &'a [u8],
    /// Bytes of the payload covered by tensors read so far.
    covered: usize,
}

impl Reader<'_> {
    fn tensor(&mut self, r: &TensorRef, name: &str) -> Result<Tensor, FormatError> {
        let start = r.offset;
        let end = r.length.checked_mul(4).and_then(|l| l.checked_add(start)).unwrap_or(usize::MAX);
        if end > self.payload.len() {
            return Err(FormatError::Truncated {
                tensor: name.to_string(),
                start,
                end,
                available: self.payload.len(),
            });
        }
        self.covered += end - start;
        let data = self.payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(r.shape.clone(), data).map_err(|source| FormatError::Tensor {
            tensor: name.to_string(),
            source,
        })
    }

    fn conv(&mut self, d: &ConvDesc, name: &str) -> Result<ConvParams, FormatError> {
        let weight = self.tensor(&d.weight, &format!("{name}.weight"))?;
        let bias = match &d.bias {
            Some(b) => Some(self.tensor(b, &format!("{name}.bias"))?),
            None => None,
        };
        let p = ConvParams {
            weight,
            bias,
            stride: d.stride,
            padding: d.padding,
            groups: d.groups,
        };
        p.validate().map_err(|source| FormatError::Tensor {
            tensor: format!("{name}.weight"),
            source,
        })?;
        Ok(p)
    }

    fn bn(&mut self, d: &BnDesc, name: &str) -> Result<BatchNormParams, FormatError> {
        Ok(BatchNormParams {
            gamma: self.tensor(&d.gamma, &format!("{name}.gamma"))?,
            beta: self.tensor(&d.beta, &format!("{name}.beta"))?,
            running_mean: self.tensor(&d.running_mean, &format!("{name}.running_mean"))?,
            running_var: self.tensor(&d.running_var, &format!("{name}.running_var"))?,
            eps: d.eps as f32,
        })
    }

    fn node(&mut self, d: &NodeDesc, name: &str) -> Result<Node, FormatError> {
        Ok(match d {
            NodeDesc::Conv(c) => Node::Conv(self.conv(c, &format!("{name}.conv"))?),
            NodeDesc::BatchNorm(bn) => Node::BatchNorm(self.bn(bn, &format!("{name}.batch_norm"))?),
            NodeDesc::Relu => Node::Relu,
            NodeDesc::AvgPool(p) => Node::AvgPool((*p).into()),
            NodeDesc::MaxPool(p) => Node::MaxPool((*p).into()),
            NodeDesc::Linear { weight, bias } => Node::Linear(LinearParams {
                weight: self.tensor(weight, &format!("{name}.linear.weight"))?,
                bias: match bias {
                    Some(b) => Some(self.tensor(b, &format!("{name}.linear.bias"))?),
                    None => None,
                },
            }),
            NodeDesc::Flatten => Node::Flatten,
            NodeDesc::ScalarScale { scale } => Node::ScalarScale(*scale as f32),
            NodeDesc::Resconv { conv, bn, m, g, shortcut } => Node::ResConv(ResConvBlock {
                conv: self.conv(conv, &format!("{name}.resconv.conv"))?,
                bn: self.bn(bn, &format!("{name}.resconv.bn"))?,
                m: *m as f32,
                g: *g as f32,
                shortcut: match shortcut {
                    ShortcutDesc::Identity => Shortcut::Identity,
                    ShortcutDesc::Proj1x1(p) => Shortcut::Proj1x1(self.conv(p, &format!("{name}.resconv.proj"))?),
                    ShortcutDesc::AvgPool(p) => Shortcut::AvgPool((*p).into()),
                },
            }),
            NodeDesc::Residual { body, shortcut } => Node::Residual(ResidualBlock {
                body: body
                    .iter()
                    .enumerate()
                    .map(|(i, d)| self.node(d, &format!("{name}.residual.body[{i}]")))
                    .collect::<Result<_, _>>()?,
                shortcut: shortcut
                    .iter()
                    .enumerate()
                    .map(|(i, d)| self.node(d, &format!("{name}.residual.shortcut[{i}]")))
                    .collect::<Result<_, _>>()?,
            }),
        })
    }
}

/// Encodes a graph into its description text and weights blob.
pub fn encode(g: &ModelGraph) -> Result<(String, Vec<u8>), FormatError> {
    let mut w = Writer::default();
    let nodes = g.nodes.iter().map(|n| w.node(n)).collect();
    let desc = ModelDesc {
        format: g.version.clone(),
        name: g.name.clone(),
        input_shape: g.input_shape.clone(),
        nodes,
    };
    let mut json = serde_json::to_string_pretty(&desc)?;
    json.push('\n');
    let mut bin = Vec::with_capacity(HEADER_LEN + w.payload.len() + 4);
    bin.extend_from_slice(MAGIC);
    bin.extend_from_slice(&LAYOUT_VERSION.to_le_bytes());
    bin.extend_from_slice(&(g.nodes.len() as u32).to_le_bytes());
    bin.extend_from_slice(&w.payload);
    let crc = crc32fast::hash(&bin);
    bin.extend_from_slice(&crc.to_le_bytes());
    Ok((json, bin))
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Inverse of [`encode`].
pub fn decode(json: &str, bin: &[u8]) -> Result<ModelGraph, FormatError> {
    let desc: ModelDesc = serde_json::from_str(json)?;
    if desc.format != FORMAT_VERSION {
        return Err(FormatError::Version { found: desc.format });
    }
    if bin.len() < HEADER_LEN || &bin[..4] != MAGIC {
        return Err(FormatError::Magic);
    }
    let layout = read_u32(bin, 4);
    if layout != LAYOUT_VERSION {
        return Err(FormatError::LayoutVersion(layout));
    }
    let count = read_u32(bin, 8) as usize;
    if count != desc.nodes.len() {
        return Err(FormatError::NodeCount {
            json: desc.nodes.len(),
            bin: count,
        });
    }
    // The last four bytes are the checksum; a short file shows up as a tensor
    // running past the payload before the checksum is ever consulted.
    let body_end = bin.len().saturating_sub(4).max(HEADER_LEN);
    let mut reader = Reader {
        payload: &bin[HEADER_LEN..body_end],
        covered: 0,
    };
    let nodes = desc
        .nodes
        .iter()
        .enumerate()
        .map(|(i, d)| reader.node(d, &format!("nodes[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    if bin.len() < HEADER_LEN + 4 {
        return Err(FormatError::Truncated {
            tensor: "checksum".into(),
            start: bin.len(),
            end: HEADER_LEN + 4,
            available: bin.len(),
        });
    }
    let stored = read_u32(bin, body_end);
    let computed = crc32fast::hash(&bin[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    if reader.covered != reader.payload.len() {
        return Err(FormatError::Unreferenced(reader.payload.len() - reader.covered));
    }
    let g = ModelGraph {
        name: desc.name,
        version: desc.format,
        input_shape: desc.input_shape,
        nodes,
    };
    g.validate()?;
    Ok(g)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let io = |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

/// Saves `model.json` and `weights.bin` into `dir`, creating it if needed.
pub fn save(g: &ModelGraph, dir: &Path) -> Result<(), FormatError> {
    let (json, bin) = encode(g)?;
    fs::create_dir_all(dir).map_err(|source| FormatError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_atomic(&dir.join(WEIGHTS_FILE), &bin)?;
    write_atomic(&dir.join(MODEL_FILE), json.as_bytes())
}

pub fn load(dir: &Path) -> Result<ModelGraph, FormatError> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|source| FormatError::Io { path, source })
    };
    let json = read(MODEL_FILE)?;
    let bin = read(WEIGHTS_FILE)?;
    let json = String::from_utf8(json).map_err(|e| FormatError::Io {
        path: dir.join(MODEL_FILE),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    decode(&json, &bin)
}
