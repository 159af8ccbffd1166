//! Frozen backbones loaded from ONNX files: named intermediate feature maps
//! for style, and a globally average-pooled embedding for engagement.

mod cache;
mod extract;

pub use cache::FeatureCache;
pub use extract::{FeatureExtractor, PhotoFeatures, Want};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use prost::Message;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tract_onnx::pb;
use tract_onnx::prelude::*;

use crate::corpus::{ImageTensor, PreprocessSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTap {
    pub layer: String,
    pub depth: u32,
}

/// Describes an ONNX backbone: where it lives, how to feed it, and which
/// output tensors to read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneManifest {
    pub model_path: PathBuf,
    pub preprocess: PreprocessSpec,
    pub style_taps: Vec<StyleTap>,
    pub embedding_tap: String,
    pub embedding_dim: usize,
    /// Default-domain opset the model must declare, if pinned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opset: Option<i64>,
}

impl BackboneManifest {
    /// Reads a manifest; a relative `model_path` resolves against the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: BackboneManifest = serde_json::from_str(&text).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if manifest.model_path.is_relative() {
            if let Some(dir) = path.parent() {
                manifest.model_path = dir.join(&manifest.model_path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        if self.style_taps.is_empty() {
            return Err(Error::Invalid("backbone manifest lists no style taps".into()));
        }
        if self.style_taps.windows(2).any(|w| w[0].depth >= w[1].depth) {
            return Err(Error::Invalid("style tap depths must be strictly increasing".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Invalid("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn style_tap(&self, layer: &str) -> Option<&StyleTap> {
        self.style_taps.iter().find(|t| t.layer == layer)
    }
}

/// Activations of one layer: `channels` rows of `positions` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer: String,
    pub depth: u32,
    pub channels: usize,
    pub positions: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        layer: impl Into<String>,
        depth: u32,
        channels: usize,
        positions: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != channels * positions {
            return Err(Error::DimMismatch(format!(
                "feature map has {} values, expected {channels}x{positions}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap {
            layer: layer.into(),
            depth,
            channels,
            positions,
            data,
        })
    }

    /// Row `j`: filter `j` at every position.
    pub fn channel(&self, j: usize) -> &[f32] {
        &self.data[j * self.positions..(j + 1) * self.positions]
    }

    /// Global average pooling: the per-channel mean over positions.
    pub fn global_average(&self) -> Embedding {
        let values = (0..self.channels)
            .map(|j| {
                let sum: f64 = self.channel(j).iter().map(|&v| v as f64).sum();
                (sum / self.positions as f64) as f32
            })
            .collect();
        Embedding { values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        Embedding { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A loaded, optimized backbone. Immutable and shareable across threads.
pub struct Backbone {
    manifest: BackboneManifest,
    plan: Arc<TypedRunnableModel>,
    /// Output tensor names, in plan output order.
    outputs: Vec<String>,
    input_shape: [usize; 3],
    fingerprint: String,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("model_path", &self.manifest.model_path)
            .field("outputs", &self.outputs)
            .field("input_shape", &self.input_shape)
            .finish()
    }
}

fn model_err(context: &str) -> impl Fn(TractError) -> Error + '_ {
    move |e| Error::Model(format!("{context}: {e:#}"))
}

impl Backbone {
    pub fn load(manifest: BackboneManifest) -> Result<Self> {
        manifest.validate()?;
        let bytes = fs::read(&manifest.model_path).map_err(|e| Error::io(&manifest.model_path, e))?;
        let proto = pb::ModelProto::decode(bytes.as_slice())
            .map_err(|e| Error::Model(format!("cannot decode ONNX model: {e}")))?;
        let graph = proto
            .graph
            .as_ref()
            .ok_or_else(|| Error::Model("ONNX model has no graph".into()))?;

        if let Some(pinned) = manifest.opset {
            let declared = proto
                .opset_import
                .iter()
                .find(|o| o.domain.is_empty() || o.domain == "ai.onnx")
                .map(|o| o.version);
            if declared != Some(pinned) {
                return Err(Error::Model(format!(
                    "manifest pins opset {pinned}, model declares {declared:?}"
                )));
            }
        }

        let mut available: Vec<String> = graph
            .node
            .iter()
            .flat_map(|n| n.output.iter().cloned())
            .filter(|n| !n.is_empty())
            .collect();
        available.sort();
        available.dedup();

        let mut outputs: Vec<String> = manifest.style_taps.iter().map(|t| t.layer.clone()).collect();
        if !outputs.contains(&manifest.embedding_tap) {
            outputs.push(manifest.embedding_tap.clone());
        }
        for name in &outputs {
            if available.binary_search(name).is_err() {
                return Err(Error::UnknownLayer {
                    name: name.clone(),
                    available,
                });
            }
        }

        let input_shape = input_shape(graph, &manifest.preprocess)?;
        let mut model = tract_onnx::onnx()
            .model_for_proto_model(&proto)
            .map_err(model_err("cannot translate ONNX graph"))?;
        let [c, h, w] = input_shape;
        model
            .set_input_fact(0, f32::fact([1, c, h, w]).into())
            .map_err(model_err("cannot fix input shape"))?;
        let outlets = outputs
            .iter()
            .map(|name| {
                model
                    .find_outlet_label(name)
                    .ok_or_else(|| Error::Model(format!("output {name} not found in graph")))
            })
            .collect::<Result<Vec<_>>>()?;
        model
            .select_output_outlets(&outlets)
            .map_err(model_err("cannot select outputs"))?;
        let plan = model
            .into_optimized()
            .map_err(model_err("cannot optimize model"))?
            .into_runnable()
            .map_err(model_err("cannot build execution plan"))?;

        let fingerprint = fingerprint(&manifest, &bytes);
        Ok(Backbone {
            manifest,
            plan,
            outputs,
            input_shape,
            fingerprint,
        })
    }

    pub fn from_manifest_file(path: impl AsRef<Path>) -> Result<Self> {
        Backbone::load(BackboneManifest::load(path)?)
    }

    pub fn manifest(&self) -> &BackboneManifest {
        &self.manifest
    }

    /// Content hash of the model weights and manifest (ignoring where the
    /// model file lives).
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Expected input as `(channels, height, width)`.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Runs the network once, returning every tapped output by name.
    fn run(&self, image: &ImageTensor) -> Result<Vec<(String, Tensor)>> {
        let [c, h, w] = self.input_shape;
        if (image.channels(), image.height(), image.width()) != (c, h, w) {
            return Err(Error::DimMismatch(format!(
                "backbone expects {h}x{w}x{c} input, got {}x{}x{}",
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        let input = tract_ndarray::Array4::from_shape_fn((1, c, h, w), |(_, ch, y, x)| image.at(y, x, ch));
        let results = self
            .plan
            .run(tvec!(input.into_tensor().into()))
            .map_err(model_err("inference failed"))?;
        Ok(self
            .outputs
            .iter()
            .cloned()
            .zip(results.into_iter().map(|v| v.into_tensor()))
            .collect())
    }

    fn to_feature_map(&self, name: &str, depth: u32, tensor: &Tensor) -> Result<FeatureMap> {
        let shape = tensor.shape();
        if shape.len() < 2 || shape[0] != 1 {
            return Err(Error::Model(format!(
                "output {name} has shape {shape:?}, expected [1, channels, ...]"
            )));
        }
        let channels = shape[1];
        let positions = shape[2..].iter().product::<usize>();
        let view = tensor
            .to_plain_array_view::<f32>()
            .map_err(model_err("output is not f32"))?;
        // iter() walks the logical order, which is channel-major for NC...
        let data: Vec<f32> = view.iter().copied().collect();
        FeatureMap::new(name, depth, channels, positions, data)
    }

    /// Feature maps for `taps`, in the order requested. Each tap must be one
    /// of the manifest's style taps.
    pub fn extract_feature_maps(&self, image: &ImageTensor, taps: &[&str]) -> Result<Vec<FeatureMap>> {
        for tap in taps {
            if self.manifest.style_tap(tap).is_none() {
                return Err(Error::UnknownLayer {
                    name: tap.to_string(),
                    available: self.manifest.style_taps.iter().map(|t| t.layer.clone()).collect(),
                });
            }
        }
        let outputs = self.run(image)?;
        taps.iter()
            .map(|tap| {
                let depth = self.manifest.style_tap(tap).map(|t| t.depth).unwrap_or_default();
                let (_, tensor) = outputs.iter().find(|(n, _)| n == tap).expect("tap was selected");
                self.to_feature_map(tap, depth, tensor)
            })
            .collect()
    }

    /// All manifest style taps, in depth order.
    pub fn extract_style_maps(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>> {
        let taps: Vec<&str> = self.manifest.style_taps.iter().map(|t| t.layer.as_str()).collect();
        self.extract_feature_maps(image, &taps)
    }

    pub fn extract_embedding(&self, image: &ImageTensor) -> Result<Embedding> {
        let outputs = self.run(image)?;
        self.embedding_from(&outputs)
    }

    fn embedding_from(&self, outputs: &[(String, Tensor)]) -> Result<Embedding> {
        let name = &self.manifest.embedding_tap;
        let (_, tensor) = outputs.iter().find(|(n, _)| n == name).expect("tap was selected");
        let map = self.to_feature_map(name, 0, tensor)?;
        if map.channels != self.manifest.embedding_dim {
            return Err(Error::DimMismatch(format!(
                "embedding tap {name} has {} channels, manifest says {}",
                map.channels, self.manifest.embedding_dim
            )));
        }
        Ok(map.global_average())
    }

    /// Style maps and embedding from a single forward pass.
    pub fn extract_all(&self, image: &ImageTensor) -> Result<(Vec<FeatureMap>, Embedding)> {
        let outputs = self.run(image)?;
        let maps = self
            .manifest
            .style_taps
            .iter()
            .map(|tap| {
                let (_, tensor) = outputs.iter().find(|(n, _)| *n == tap.layer).expect("tap was selected");
                self.to_feature_map(&tap.layer, tap.depth, tensor)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((maps, self.embedding_from(&outputs)?))
    }
}

fn input_shape(graph: &pb::GraphProto, preprocess: &PreprocessSpec) -> Result<[usize; 3]> {
    use pb::tensor_shape_proto::dimension::Value;
    let initializers: Vec<&str> = graph.initializer.iter().map(|t| t.name.as_str()).collect();
    let input = graph
        .input
        .iter()
        .find(|i| !initializers.contains(&i.name.as_str()))
        .ok_or_else(|| Error::Model("ONNX graph has no input".into()))?;
    let dims: Option<Vec<Option<i64>>> = input.r#type.as_ref().and_then(|t| match &t.value {
        Some(pb::type_proto::Value::TensorType(tt)) => tt.shape.as_ref().map(|s| {
            s.dim
                .iter()
                .map(|d| match d.value {
                    Some(Value::DimValue(v)) if v > 0 => Some(v),
                    _ => None,
                })
                .collect()
        }),
        _ => None,
    });
    let (h, w) = (preprocess.height, preprocess.width);
    let Some(dims) = dims else {
        return Ok([3, h, w]);
    };
    if dims.len() != 4 {
        return Err(Error::Model(format!(
            "backbone input must be NCHW, got rank {}",
            dims.len()
        )));
    }
    let c = dims[1].unwrap_or(3) as usize;
    for (declared, wanted, what) in [(dims[2], h, "height"), (dims[3], w, "width")] {
        if let Some(d) = declared {
            if d as usize != wanted {
                return Err(Error::DimMismatch(format!(
                    "model input {what} is {d}, preprocess target is {wanted}"
                )));
            }
        }
    }
    Ok([c, h, w])
}

fn fingerprint(manifest: &BackboneManifest, model_bytes: &[u8]) -> String {
    let mut portable = manifest.clone();
    portable.model_path = PathBuf::new();
    let mut hasher = Sha256::new();
    hasher.update(Sha256::digest(model_bytes));
    hasher.update(serde_json::to_vec(&portable).expect("manifest serializes"));
    hex::encode(hasher.finalize())
}
