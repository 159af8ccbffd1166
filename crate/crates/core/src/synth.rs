//! Small synthetic fixtures: seeded convolutional backbones written as ONNX
//! files, and procedural texture images with distinct second-order
//! statistics. Used by the test suites and for trying the tool end to end
//! without a pretrained network.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tract_onnx::pb;

use crate::corpus::{ChannelOrder, PreprocessSpec, ValueRange};
use crate::error::{Error, Result};
use crate::features::{BackboneManifest, StyleTap};

const OPSET: i64 = 13;
const FLOAT: i32 = 1;

fn tensor(name: &str, dims: &[usize], data: Vec<f32>) -> pb::TensorProto {
    pb::TensorProto {
        name: name.into(),
        dims: dims.iter().map(|&d| d as i64).collect(),
        data_type: FLOAT,
        float_data: data,
        ..Default::default()
    }
}

fn ints_attr(name: &str, values: &[i64]) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: pb::attribute_proto::AttributeType::Ints as i32,
        ints: values.to_vec(),
        ..Default::default()
    }
}

fn value_info(name: &str, dims: &[usize]) -> pb::ValueInfoProto {
    use pb::tensor_shape_proto::{dimension::Value, Dimension};
    pb::ValueInfoProto {
        name: name.into(),
        r#type: Some(pb::TypeProto {
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: FLOAT,
                shape: Some(pb::TensorShapeProto {
                    dim: dims
                        .iter()
                        .map(|&d| Dimension {
                            value: Some(Value::DimValue(d as i64)),
                            ..Default::default()
                        })
                        .collect(),
                }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn node(name: &str, op: &str, inputs: &[&str], output: &str, attrs: Vec<pb::AttributeProto>) -> pb::NodeProto {
    pb::NodeProto {
        name: name.into(),
        op_type: op.into(),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.into()],
        attribute: attrs,
        ..Default::default()
    }
}

fn encode_model(graph: pb::GraphProto) -> Vec<u8> {
    pb::ModelProto {
        ir_version: 7,
        producer_name: "salienteye-synth".into(),
        opset_import: vec![pb::OperatorSetIdProto {
            domain: String::new(),
            version: OPSET,
        }],
        graph: Some(graph),
        ..Default::default()
    }
    .encode_to_vec()
}

fn write_fixture(dir: &Path, stem: &str, model: &[u8], manifest: &BackboneManifest) -> Result<BackboneManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model_path = dir.join(format!("{stem}.onnx"));
    fs::write(&model_path, model).map_err(|e| Error::io(&model_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let mut resolved = manifest.clone();
    resolved.model_path = model_path;
    Ok(resolved)
}

/// One 3x3 convolution (no padding, no bias) on a 1x4x4 input whose kernel
/// copies the centre pixel. Output `conv` is 1x2x2. Written as
/// `identity.onnx` + `identity.json`.
pub fn write_identity_backbone(dir: &Path) -> Result<BackboneManifest> {
    let mut kernel = vec![0.0f32; 9];
    kernel[4] = 1.0;
    let graph = pb::GraphProto {
        name: "identity".into(),
        node: vec![node(
            "conv_node",
            "Conv",
            &["input", "w"],
            "conv",
            vec![ints_attr("kernel_shape", &[3, 3])],
        )],
        initializer: vec![tensor("w", &[1, 1, 3, 3], kernel)],
        input: vec![value_info("input", &[1, 1, 4, 4])],
        output: vec![value_info("conv", &[1, 1, 2, 2])],
        ..Default::default()
    };
    let manifest = BackboneManifest {
        model_path: "identity.onnx".into(),
        preprocess: PreprocessSpec {
            height: 4,
            width: 4,
            means: [0.0; 3],
            stds: [1.0; 3],
            channel_order: ChannelOrder::Rgb,
            value_range: ValueRange::Unit,
        },
        style_taps: vec![StyleTap {
            layer: "conv".into(),
            depth: 1,
        }],
        embedding_tap: "conv".into(),
        embedding_dim: 1,
        opset: Some(OPSET),
    };
    write_fixture(dir, "identity", &encode_model(graph), &manifest)
}

/// A valid-padding 3x3 convolution followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `[out][in][3][3]`, flattened.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    fn random(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let bound = (6.0 / (in_channels * 9) as f32).sqrt();
        let weights = (0..out_channels * in_channels * 9)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        ConvLayer::with_bias(rng, in_channels, out_channels, stride, weights)
    }

    /// Like [`ConvLayer::random`] but every 3x3 kernel sums to zero, so the
    /// layer responds to edges and not to flat brightness.
    fn random_zero_mean(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let bound = (6.0 / (in_channels * 9) as f32).sqrt();
        let mut weights: Vec<f32> = (0..out_channels * in_channels * 9)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        for kernel in weights.chunks_mut(9) {
            let mean = kernel.iter().sum::<f32>() / 9.0;
            kernel.iter_mut().for_each(|w| *w -= mean);
        }
        ConvLayer::with_bias(rng, in_channels, out_channels, stride, weights)
    }

    fn with_bias(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        weights: Vec<f32>,
    ) -> Self {
        let bias = (0..out_channels).map(|_| rng.random_range(-0.05..0.05)).collect();
        ConvLayer {
            in_channels,
            out_channels,
            stride,
            weights,
            bias,
        }
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input - 3) / self.stride + 1
    }
}

/// Seeded three-layer ReLU network on 3x32x32 inputs, tapped after each
/// ReLU (`relu1`..`relu3`, depths 1..3); the last tap doubles as the
/// embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureBackbone {
    pub layers: Vec<ConvLayer>,
}

pub const TEXTURE_INPUT: usize = 32;

impl TextureBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TextureBackbone {
            layers: vec![
                ConvLayer::random_zero_mean(&mut rng, 3, 8, 1),
                ConvLayer::random(&mut rng, 8, 16, 1),
                ConvLayer::random(&mut rng, 16, 16, 1),
            ],
        }
    }

    pub fn tap_names(&self) -> Vec<String> {
        (1..=self.layers.len()).map(|i| format!("relu{i}")).collect()
    }

    pub fn manifest(&self) -> BackboneManifest {
        let taps = self.tap_names();
        BackboneManifest {
            model_path: "texture.onnx".into(),
            preprocess: PreprocessSpec {
                height: TEXTURE_INPUT,
                width: TEXTURE_INPUT,
                means: [0.5; 3],
                stds: [0.25; 3],
                channel_order: ChannelOrder::Rgb,
                value_range: ValueRange::Unit,
            },
            style_taps: taps
                .iter()
                .enumerate()
                .map(|(i, layer)| StyleTap {
                    layer: layer.clone(),
                    depth: i as u32 + 1,
                })
                .collect(),
            embedding_tap: taps.last().expect("non-empty").clone(),
            embedding_dim: self.layers.last().expect("non-empty").out_channels,
            opset: Some(OPSET),
        }
    }

    pub fn to_onnx(&self) -> Vec<u8> {
        let mut nodes = Vec::new();
        let mut initializers = Vec::new();
        let mut current = "input".to_string();
        let mut size = TEXTURE_INPUT;
        for (i, layer) in self.layers.iter().enumerate() {
            let n = i + 1;
            let (w, b, conv, relu) = (format!("w{n}"), format!("b{n}"), format!("conv{n}"), format!("relu{n}"));
            initializers.push(tensor(
                &w,
                &[layer.out_channels, layer.in_channels, 3, 3],
                layer.weights.clone(),
            ));
            initializers.push(tensor(&b, &[layer.out_channels], layer.bias.clone()));
            nodes.push(node(
                &format!("{conv}_node"),
                "Conv",
                &[&current, &w, &b],
                &conv,
                vec![
                    ints_attr("kernel_shape", &[3, 3]),
                    ints_attr("strides", &[layer.stride as i64, layer.stride as i64]),
                ],
            ));
            nodes.push(node(&format!("{relu}_node"), "Relu", &[&conv], &relu, vec![]));
            current = relu;
            size = layer.output_size(size);
        }
        let out_channels = self.layers.last().expect("non-empty").out_channels;
        let graph = pb::GraphProto {
            name: "texture".into(),
            node: nodes,
            initializer: initializers,
            input: vec![value_info("input", &[1, 3, TEXTURE_INPUT, TEXTURE_INPUT])],
            output: vec![value_info(&current, &[1, out_channels, size, size])],
            ..Default::default()
        };
        encode_model(graph)
    }

    /// Writes `texture.onnx` + `texture.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<BackboneManifest> {
        write_fixture(dir, "texture", &self.to_onnx(), &self.manifest())
    }
}

/// Shorthand for `TextureBackbone::new(seed).write(dir)`.
pub fn write_texture_backbone(dir: &Path, seed: u64) -> Result<BackboneManifest> {
    TextureBackbone::new(seed).write(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextureFamily {
    Stripes,
    Checkerboard,
    Noise,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 3] = [
        TextureFamily::Stripes,
        TextureFamily::Checkerboard,
        TextureFamily::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Stripes => "stripes",
            TextureFamily::Checkerboard => "checkerboard",
            TextureFamily::Noise => "noise",
        }
    }
}

/// A `size`x`size` grayscale texture. The seed picks period, phase,
/// orientation and contrast within the family's range.
pub fn texture_image(family: TextureFamily, seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (family as u64) << 48);
    let lo: u8 = rng.random_range(30..60);
    let hi: u8 = rng.random_range(190..220);
    let gray = |v: u8| Rgb([v, v, v]);
    match family {
        TextureFamily::Stripes => {
            let period = rng.random_range(6..=9u32);
            let phase = rng.random_range(0..period);
            let vertical = rng.random_bool(0.5);
            RgbImage::from_fn(size, size, |x, y| {
                let t = if vertical { x } else { y };
                gray(if (t + phase) % period < period / 2 { lo } else { hi })
            })
        }
        TextureFamily::Checkerboard => {
            let cell = rng.random_range(2..=3u32);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            RgbImage::from_fn(size, size, |x, y| {
                gray(if ((x + ox) / cell + (y + oy) / cell) % 2 == 0 {
                    lo
                } else {
                    hi
                })
            })
        }
        TextureFamily::Noise => {
            let normal = Normal::new(128.0f32, rng.random_range(30.0..50.0)).expect("valid sigma");
            let mut img = RgbImage::new(size, size);
            for px in img.pixels_mut() {
                *px = gray(normal.sample(&mut rng).clamp(0.0, 255.0) as u8);
            }
            img
        }
    }
}

/// Writes `count` texture photos for one account plus its JSONL manifest
/// (`<dir>/<account_id>.jsonl`, images under `<dir>/<account_id>/`).
/// Photo `i` uses `families[i % families.len()]`, is posted `i` days after
/// 2024-01-01 and gets a seeded like count in `0..1000`.
pub fn write_texture_corpus(
    dir: &Path,
    account_id: &str,
    families: &[TextureFamily],
    count: usize,
    seed: u64,
) -> Result<std::path::PathBuf> {
    if families.is_empty() {
        return Err(Error::Invalid("no texture families given".into()));
    }
    let image_dir = dir.join(account_id);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = chrono::DateTime::parse_from_rfc3339("2024-01-01T12:00:00Z").expect("valid timestamp");
    let mut lines = String::new();
    for i in 0..count {
        let family = families[i % families.len()];
        let name = format!("{account_id}_{i:03}.png");
        let path = image_dir.join(&name);
        texture_image(
            family,
            seed.wrapping_mul(1000).wrapping_add(i as u64),
            TEXTURE_INPUT as u32,
        )
        .save(&path)
        .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))?;
        let ts = start + chrono::Duration::days(i as i64);
        let line = serde_json::json!({
            "post_id": format!("{account_id}-{i:03}"),
            "account_id": account_id,
            "image_path": format!("{account_id}/{name}"),
            "timestamp": ts.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            "like_count": rng.random_range(0..1000u64),
            "family": family.name(),
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    let manifest = dir.join(format!("{account_id}.jsonl"));
    fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::preprocess;
    use crate::features::Backbone;

    /// Direct per-element valid convolution + ReLU over a CHW buffer.
    fn conv_relu_oracle(layer: &ConvLayer, input: &[f32], size: usize) -> (Vec<f32>, usize) {
        let out = layer.output_size(size);
        let mut result = vec![0.0f32; layer.out_channels * out * out];
        for o in 0..layer.out_channels {
            for y in 0..out {
                for x in 0..out {
                    let mut acc = layer.bias[o] as f64;
                    for i in 0..layer.in_channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let w = layer.weights[((o * layer.in_channels + i) * 3 + ky) * 3 + kx];
                                let v = input[(i * size + y * layer.stride + ky) * size + x * layer.stride + kx];
                                acc += w as f64 * v as f64;
                            }
                        }
                    }
                    result[(o * out + y) * out + x] = acc.max(0.0) as f32;
                }
            }
        }
        (result, out)
    }

    #[test]
    fn extracted_maps_match_direct_convolution() {
        let dir = tempfile::tempdir().unwrap();
        let net = TextureBackbone::new(17);
        let backbone = Backbone::load(net.write(dir.path()).unwrap()).unwrap();
        let img = texture_image(TextureFamily::Checkerboard, 4, TEXTURE_INPUT as u32);
        let tensor = preprocess(&img, &backbone.manifest().preprocess).unwrap();
        let (maps, embedding) = backbone.extract_all(&tensor).unwrap();

        let mut chw: Vec<f32> = (0..3)
            .flat_map(|c| (0..TEXTURE_INPUT * TEXTURE_INPUT).map(move |p| (c, p)))
            .map(|(c, p)| tensor.at(p / TEXTURE_INPUT, p % TEXTURE_INPUT, c))
            .collect();
        let mut size = TEXTURE_INPUT;
        for (layer, map) in net.layers.iter().zip(&maps) {
            let (expected, out) = conv_relu_oracle(layer, &chw, size);
            assert_eq!((map.channels, map.positions), (layer.out_channels, out * out));
            for (j, (a, b)) in map.data.iter().zip(&expected).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-4 * (1.0 + b.abs()),
                    "{} entry {j}: {a} vs {b}",
                    map.layer
                );
            }
            chw = expected;
            size = out;
        }
        assert_eq!(embedding.dim(), 16);
    }

    #[test]
    fn embedding_scales_linearly_on_linear_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let backbone = Backbone::load(write_identity_backbone(dir.path()).unwrap()).unwrap();
        let base: Vec<f32> = (0..16).map(|v| (v as f32 * 0.37).sin()).collect();
        let image =
            |alpha: f32| crate::corpus::ImageTensor::new(4, 4, 1, base.iter().map(|v| v * alpha).collect()).unwrap();
        let e1 = backbone.extract_embedding(&image(1.0)).unwrap();
        for alpha in [2.0f32, -0.5, 3.25] {
            let ea = backbone.extract_embedding(&image(alpha)).unwrap();
            assert!((ea.values[0] - alpha * e1.values[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn textures_are_seed_deterministic() {
        for family in TextureFamily::ALL {
            assert_eq!(texture_image(family, 3, 24), texture_image(family, 3, 24));
        }
        assert_ne!(
            texture_image(TextureFamily::Noise, 1, 24),
            texture_image(TextureFamily::Noise, 2, 24)
        );
    }
}
