//! Model manifest (JSON) plus little-endian `f32` weight blob.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "name": "nisqa-like",
//!   "seed": 7,
//!   "input_shape": [1, 48, 15],
//!   "layers": [
//!     {"kind": "conv2d", "in_channels": 1, "out_channels": 8,
//!      "kernel": [3, 3], "stride": [1, 1], "padding": [1, 1]},
//!     {"kind": "relu"},
//!     {"kind": "avgpool2d", "window": [2, 2], "stride": [2, 2]},
//!     {"kind": "globalavgpool"}
//!   ],
//!   "head": {"kind": "dense", "in_dim": 20, "out_dim": 1},
//!   "weight_offsets": [
//!     {"name": "layers.0.weight", "shape": [8, 1, 3, 3], "offset": 0},
//!     {"name": "layers.0.bias", "shape": [8], "offset": 288}
//!   ],
//!   "weights_file": "model.weights.bin"
//! }
//! ```
//!
//! Offsets are in bytes and must be contiguous in declaration order: every
//! parametrised layer contributes `weight` then `bias`, the head comes last.

use serde::{Deserialize, Serialize};

use super::{Conv2d, Dense, Layer, Model, Pool2d};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    input_shape: Vec<usize>,
    layers: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<LayerDoc>,
    weight_offsets: Vec<WeightEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights_file: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct LayerDoc {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_dim: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// A model split into its manifest text and weight blob.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub manifest: String,
    pub weights: Vec<u8>,
}

fn field<T>(value: Option<T>, layer: &str, name: &str) -> Result<T> {
    value.ok_or_else(|| Error::Format(format!("{layer}: missing `{name}`")))
}

/// Parameter tensors a layer declares, before any weights are read.
enum Pending {
    Conv {
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Plain(Layer),
}

impl Pending {
    fn from_doc(doc: &LayerDoc, label: &str) -> Result<Self> {
        let pool = || -> Result<Pool2d> {
            let window = field(doc.window, label, "window")?;
            Ok(Pool2d {
                window,
                stride: doc.stride.unwrap_or(window),
            })
        };
        Ok(match doc.kind.as_str() {
            "conv2d" => Pending::Conv {
                cin: field(doc.in_channels, label, "in_channels")?,
                cout: field(doc.out_channels, label, "out_channels")?,
                kernel: field(doc.kernel, label, "kernel")?,
                stride: doc.stride.unwrap_or([1, 1]),
                padding: doc.padding.unwrap_or([0, 0]),
            },
            "dense" => Pending::Dense {
                in_dim: field(doc.in_dim, label, "in_dim")?,
                out_dim: field(doc.out_dim, label, "out_dim")?,
            },
            "relu" => Pending::Plain(Layer::Relu),
            "maxpool2d" => Pending::Plain(Layer::MaxPool2d(pool()?)),
            "avgpool2d" => Pending::Plain(Layer::AvgPool2d(pool()?)),
            "globalavgpool" => Pending::Plain(Layer::GlobalAvgPool),
            "flatten" => Pending::Plain(Layer::Flatten),
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        })
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Pending::Conv {
                cin, cout, kernel, ..
            } => vec![vec![cout, cin, kernel[0], kernel[1]], vec![cout]],
            Pending::Dense { in_dim, out_dim } => vec![vec![out_dim, in_dim], vec![out_dim]],
            Pending::Plain(_) => Vec::new(),
        }
    }

    fn finish(self, mut params: Vec<Tensor>) -> Result<Layer> {
        Ok(match self {
            Pending::Conv {
                cin,
                cout,
                kernel,
                stride,
                padding,
            } => {
                let bias = params.pop().unwrap();
                let weight = params.pop().unwrap();
                Layer::Conv2d(Conv2d::new(cin, cout, kernel, stride, padding, weight, bias)?)
            }
            Pending::Dense { in_dim, out_dim } => {
                let bias = params.pop().unwrap();
                let weight = params.pop().unwrap();
                Layer::Dense(Dense::new(in_dim, out_dim, weight, bias)?)
            }
            Pending::Plain(layer) => layer,
        })
    }
}

/// Parses and fully validates a model from its manifest text and weight blob.
pub fn load_model(manifest: &str, weights: &[u8]) -> Result<Model> {
    let doc: ManifestDoc = serde_json::from_str(manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest format_version {} (expected {FORMAT_VERSION})",
            doc.format_version
        )));
    }

    let mut pending = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.iter().enumerate() {
        pending.push((format!("layers.{i}"), Pending::from_doc(l, &format!("layers.{i}"))?));
    }
    let head = match &doc.head {
        Some(h) => match Pending::from_doc(h, "head")? {
            p @ Pending::Dense { .. } => Some(("head".to_string(), p)),
            _ => return Err(Error::Format(format!("head must be dense, got `{}`", h.kind))),
        },
        None => None,
    };

    let expected: Vec<(String, Vec<usize>)> = pending
        .iter()
        .chain(head.iter())
        .flat_map(|(label, p)| {
            p.param_shapes()
                .into_iter()
                .zip(["weight", "bias"])
                .map(move |(shape, part)| (format!("{label}.{part}"), shape))
        })
        .collect();

    if expected.len() != doc.weight_offsets.len() {
        return Err(Error::WeightCountMismatch(format!(
            "layers declare {} parameter tensors, weight_offsets lists {}",
            expected.len(),
            doc.weight_offsets.len()
        )));
    }
    let mut offset = 0usize;
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&doc.weight_offsets) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::WeightCountMismatch(format!(
                "expected {name} {shape:?}, manifest declares {} {:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(Error::WeightCountMismatch(format!(
                "{name}: offset {} is not contiguous (expected {offset})",
                entry.offset
            )));
        }
        let count: usize = shape.iter().product();
        let end = offset + 4 * count;
        if end > weights.len() {
            return Err(Error::WeightCountMismatch(format!(
                "{name} needs bytes {offset}..{end}, blob has {}",
                weights.len()
            )));
        }
        let data: Vec<f32> = weights[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight(name.clone()));
        }
        tensors.push(Tensor::from_vec(shape, data)?);
        offset = end;
    }
    if offset != weights.len() {
        return Err(Error::WeightCountMismatch(format!(
            "manifest declares {offset} weight bytes, blob has {}",
            weights.len()
        )));
    }

    let mut tensors = tensors.into_iter();
    let mut take = |p: &Pending| -> Vec<Tensor> {
        (0..p.param_shapes().len())
            .map(|_| tensors.next().unwrap())
            .collect()
    };
    let mut layers = Vec::with_capacity(pending.len());
    for (_, p) in pending {
        let params = take(&p);
        layers.push(p.finish(params)?);
    }
    let head = match head {
        Some((_, p)) => {
            let params = take(&p);
            match p.finish(params)? {
                Layer::Dense(d) => Some(d),
                _ => unreachable!("head checked to be dense"),
            }
        }
        None => None,
    };

    let model = Model::new(&doc.input_shape, layers, head)?.with_seed(doc.seed);
    Ok(match doc.name {
        Some(name) => model.with_name(name),
        None => model,
    })
}

fn layer_doc(layer: &Layer) -> LayerDoc {
    let kind = layer.kind().to_string();
    match layer {
        Layer::Conv2d(c) => LayerDoc {
            kind,
            in_channels: Some(c.in_channels),
            out_channels: Some(c.out_channels),
            kernel: Some(c.kernel),
            stride: Some(c.stride),
            padding: Some(c.padding),
            ..Default::default()
        },
        Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => LayerDoc {
            kind,
            window: Some(p.window),
            stride: Some(p.stride),
            ..Default::default()
        },
        Layer::Dense(d) => dense_doc(d),
        Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => LayerDoc {
            kind,
            ..Default::default()
        },
    }
}

fn dense_doc(d: &Dense) -> LayerDoc {
    LayerDoc {
        kind: "dense".into(),
        in_dim: Some(d.in_dim),
        out_dim: Some(d.out_dim),
        ..Default::default()
    }
}

/// Serializes a model; `weights_file` is recorded in the manifest when given.
pub fn save_model(model: &Model, weights_file: Option<&str>) -> SavedModel {
    let mut params: Vec<(String, &Tensor)> = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Conv2d(c) => {
                params.push((format!("layers.{i}.weight"), c.weight()));
                params.push((format!("layers.{i}.bias"), c.bias()));
            }
            Layer::Dense(d) => {
                params.push((format!("layers.{i}.weight"), d.weight()));
                params.push((format!("layers.{i}.bias"), d.bias()));
            }
            _ => {}
        }
    }
    if let Some(h) = model.head() {
        params.push(("head.weight".into(), h.weight()));
        params.push(("head.bias".into(), h.bias()));
    }

    let mut weights = Vec::new();
    let mut offsets = Vec::with_capacity(params.len());
    for (name, t) in params {
        offsets.push(WeightEntry {
            name,
            shape: t.shape().to_vec(),
            offset: weights.len(),
        });
        for v in t.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    let doc = ManifestDoc {
        format_version: FORMAT_VERSION,
        name: Some(model.name().to_string()),
        seed: model.seed(),
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().iter().map(layer_doc).collect(),
        head: model.head().map(dense_doc),
        weight_offsets: offsets,
        weights_file: weights_file.map(str::to_string),
    };
    let mut manifest = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    manifest.push('\n');
    SavedModel { manifest, weights }
}

/// The `weights_file` a manifest points at, if any.
pub fn weights_file(manifest: &str) -> Result<Option<String>> {
    let doc: ManifestDoc = serde_json::from_str(manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    Ok(doc.weights_file)
}
