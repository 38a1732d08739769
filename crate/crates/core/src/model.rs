//! The detection network: a small residual convolutional backbone, two
//! linear identity heads producing Z1 and Z2, their concatenation Z, and a
//! linear classifier whose sigmoid output is the bona fide score Y.
//!
//! Each backbone stage is conv(3×3, stride 1, pad 1) → relu followed by
//! conv(3×3, stride 2, pad 1) → relu; the stride-1 conv keeps its channel
//! count so the optional residual add is always shape-valid, and the stride-2
//! conv changes channels and halves resolution. A global average pool
//! collapses the final maps to the feature vector fed to both heads.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{io as weight_io, ParamSet, Tensor};

/// Architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Pixels per side; inputs are square.
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    pub use_residual: bool,
    /// Length d of each identity vector.
    pub embed_dim: usize,
    pub classifier_bias: bool,
    /// Fixed multiplier applied to the pooled features. Average pooling
    /// shrinks activations far below unit scale; amplifying them here keeps
    /// the score sensitive to small weight updates at small learning rates.
    pub feature_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            input_size: 64,
            conv_channels: vec![8, 16, 32],
            use_residual: true,
            embed_dim: 32,
            classifier_bias: false,
            feature_scale: 16.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 1 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::Config("conv_channels must be non-empty".into()));
        }
        if self.input_channels < 1 || self.input_size < 1 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if !self.feature_scale.is_finite() || self.feature_scale <= 0.0 {
            return Err(Error::Config(format!(
                "feature_scale must be positive and finite, got {}",
                self.feature_scale
            )));
        }
        let factor = 1usize << self.conv_channels.len();
        if self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a multiple of {} (each of the {} stages halves resolution)",
                self.input_size,
                factor,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    /// Feature count F after the global average pool.
    pub fn feature_dim(&self) -> usize {
        *self.conv_channels.last().expect("validated non-empty")
    }
}

/// Named weights plus the config they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
}

/// The identity vectors and their concatenation, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct IdentityEmbeddings {
    pub z1: NodeId,
    pub z2: NodeId,
    pub z: NodeId,
}

/// One forward pass: the activated score, its pre-sigmoid logit, and the
/// embeddings, all attached to the graph for backward.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub y: NodeId,
    pub logit: NodeId,
    pub embeddings: IdentityEmbeddings,
}

/// Parameter node ids on a specific graph, in the model's naming scheme.
#[derive(Debug, Clone)]
pub struct BoundParams {
    by_name: HashMap<String, NodeId>,
}

impl BoundParams {
    fn get(&self, name: &str) -> NodeId {
        *self.by_name.get(name).expect("bound parameter name")
    }
}

fn stage_a(i: usize) -> String {
    format!("stage{i}.conv_a")
}

fn stage_b(i: usize) -> String {
    format!("stage{i}.conv_b")
}

pub const HEAD1_WEIGHT: &str = "head1.weight";
pub const HEAD2_WEIGHT: &str = "head2.weight";
pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

/// Fan-in scaled uniform initialization, deterministic in (config, seed).
pub fn init_model<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Tensor<F> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of_f64(rng.gen_range(-bound..bound)))
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    };

    let mut params = ParamSet::new();
    let mut in_ch = config.input_channels;
    for (i, &out_ch) in config.conv_channels.iter().enumerate() {
        params.insert(stage_a(i), uniform(vec![in_ch, in_ch, 3, 3], in_ch * 9))?;
        params.insert(stage_b(i), uniform(vec![out_ch, in_ch, 3, 3], in_ch * 9))?;
        in_ch = out_ch;
    }
    let feat = config.feature_dim();
    let d = config.embed_dim;
    params.insert(HEAD1_WEIGHT, uniform(vec![d, feat], feat))?;
    params.insert(HEAD2_WEIGHT, uniform(vec![d, feat], feat))?;
    // The classifier starts at zero: scores begin exactly at 0.5 and the
    // learned score direction is not masked by random projection noise,
    // which matters at very small learning rates.
    params.insert(CLASSIFIER_WEIGHT, Tensor::zeros(vec![1, 2 * d]))?;
    if config.classifier_bias {
        params.insert(CLASSIFIER_BIAS, Tensor::zeros(vec![1]))?;
    }
    Ok(ModelParams {
        config: config.clone(),
        params,
    })
}

impl<F: Scalar> ModelParams<F> {
    /// Register every weight on `graph`; call once per graph, then run any
    /// number of forward passes against the returned binding.
    pub fn bind(&self, graph: &mut Graph<F>) -> Result<BoundParams> {
        let ids = graph.params(&self.params)?;
        let by_name = self
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .zip(ids)
            .collect();
        Ok(BoundParams { by_name })
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Forward pass for one `[C,H,W]` image.
pub fn forward<F: Scalar>(
    graph: &mut Graph<F>,
    config: &ModelConfig,
    bound: &BoundParams,
    image: &Tensor<F>,
) -> Result<Prediction> {
    let expected = [config.input_channels, config.input_size, config.input_size];
    if image.shape() != expected {
        return Err(Error::Dimension {
            op: "model input",
            lhs: image.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let mut x = graph.input(image)?;
    for i in 0..config.conv_channels.len() {
        let a = graph.conv2d(x, bound.get(&stage_a(i)), 1, 1)?;
        let a = if config.use_residual { graph.add(a, x)? } else { a };
        let a = graph.relu(a)?;
        let b = graph.conv2d(a, bound.get(&stage_b(i)), 2, 1)?;
        x = graph.relu(b)?;
    }
    let pooled = graph.global_avg_pool(x)?;
    let features = graph.scale(pooled, F::of_f64(config.feature_scale))?;
    let z1 = graph.dense(features, bound.get(HEAD1_WEIGHT), None)?;
    let z2 = graph.dense(features, bound.get(HEAD2_WEIGHT), None)?;
    let z = graph.concat(z1, z2)?;
    let bias = if config.classifier_bias {
        Some(bound.get(CLASSIFIER_BIAS))
    } else {
        None
    };
    let logit = graph.dense(z, bound.get(CLASSIFIER_WEIGHT), bias)?;
    let y = graph.sigmoid(logit)?;
    Ok(Prediction {
        y,
        logit,
        embeddings: IdentityEmbeddings { z1, z2, z },
    })
}

/// Convenience: fresh graph, single forward pass, score value.
pub fn predict<F: Scalar>(params: &ModelParams<F>, image: &Tensor<F>) -> Result<F> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph)?;
    let pred = forward(&mut graph, &params.config, &bound, image)?;
    graph.scalar_value(pred.y)
}

fn config_header(config: &ModelConfig) -> String {
    let channels: Vec<String> = config.conv_channels.iter().map(|c| c.to_string()).collect();
    format!(
        "input_channels={}\ninput_size={}\nconv_channels={}\nuse_residual={}\nembed_dim={}\nclassifier_bias={}\nfeature_scale={}\n\n",
        config.input_channels,
        config.input_size,
        channels.join(","),
        config.use_residual,
        config.embed_dim,
        config.classifier_bias,
        config.feature_scale
    )
}

/// Write config header (UTF-8 `key=value` lines, blank-line terminated)
/// followed by the binary weight section.
pub fn save_model<F: Scalar>(params: &ModelParams<F>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(config_header(&params.config).as_bytes())
        .map_err(|e| Error::io(path, e))?;
    weight_io::write_params(&mut w, &params.params, path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_header_line(path: &Path, offset: u64, line: &str) -> Result<(String, String)> {
    line.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("expected key=value header line, got {line:?}"),
        })
}

pub fn load_model<F: Scalar>(path: &Path) -> Result<ModelParams<F>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let fmt = |offset: u64, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };

    let mut fields: HashMap<String, String> = HashMap::new();
    let mut offset: u64 = 0;
    loop {
        let mut line = String::new();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(fmt(offset, "unexpected end of file in config header".into()));
        }
        let start = offset;
        offset += n as u64;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            break;
        }
        let (k, v) = parse_header_line(path, start, trimmed)?;
        fields.insert(k, v);
    }

    let get = |key: &str| -> Result<String> {
        fields
            .get(key)
            .cloned()
            .ok_or_else(|| fmt(0, format!("missing config key {key:?}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| fmt(0, format!("config key {key:?} is not an integer")))
    };
    let parse_bool = |key: &str| -> Result<bool> {
        get(key)?
            .parse()
            .map_err(|_| fmt(0, format!("config key {key:?} is not a boolean")))
    };
    let conv_channels = get("conv_channels")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| fmt(0, format!("bad conv_channels entry {s:?}")))
        })
        .collect::<Result<Vec<usize>>>()?;

    let config = ModelConfig {
        input_channels: parse_usize("input_channels")?,
        input_size: parse_usize("input_size")?,
        conv_channels,
        use_residual: parse_bool("use_residual")?,
        embed_dim: parse_usize("embed_dim")?,
        classifier_bias: parse_bool("classifier_bias")?,
        feature_scale: get("feature_scale")?
            .parse()
            .map_err(|_| fmt(0, "config key \"feature_scale\" is not a number".into()))?,
    };
    config.validate().map_err(|e| fmt(0, e.to_string()))?;

    let params = weight_io::read_params_at(&mut reader, path, offset)?;
    let model = ModelParams { config, params };
    validate_shapes(&model, path)?;
    Ok(model)
}

fn validate_shapes<F: Scalar>(model: &ModelParams<F>, path: &Path) -> Result<()> {
    let expected = init_model::<F>(&model.config, 0)?;
    for (name, tensor) in expected.params.iter() {
        match model.params.get(name) {
            Some(t) if t.shape() == tensor.shape() => {}
            Some(t) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    message: format!(
                        "parameter {name:?} has shape {:?}, expected {:?}",
                        t.shape(),
                        tensor.shape()
                    ),
                })
            }
            None => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    message: format!("missing parameter {name:?}"),
                })
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::tempdir;

    fn test_image(config: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.input_channels * config.input_size * config.input_size;
        Tensor::new(
            vec![config.input_channels, config.input_size, config.input_size],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let config = ModelConfig::default();
        let a = init_model::<f32>(&config, 42).unwrap();
        let b = init_model::<f32>(&config, 42).unwrap();
        assert_eq!(a, b);
        let c = init_model::<f32>(&config, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_config_shapes() {
        let config = ModelConfig::default();
        let model = init_model::<f32>(&config, 0).unwrap();
        assert_eq!(model.params.get(HEAD1_WEIGHT).unwrap().shape(), &[32, 32]);
        assert_eq!(model.params.get(HEAD2_WEIGHT).unwrap().shape(), &[32, 32]);
        assert_eq!(model.params.get(CLASSIFIER_WEIGHT).unwrap().shape(), &[1, 64]);
        assert!(model.params.get(CLASSIFIER_BIAS).is_none());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let config = ModelConfig {
            input_size: 60, // not a multiple of 2^3
            ..ModelConfig::default()
        };
        assert!(matches!(init_model::<f32>(&config, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_produces_expected_shapes_and_range() {
        let config = ModelConfig::default();
        let model = init_model::<f64>(&config, 7).unwrap();
        let image = test_image(&config, 1);
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let pred = forward(&mut g, &config, &bound, &image).unwrap();
        assert_eq!(g.shape(pred.embeddings.z1), &[32]);
        assert_eq!(g.shape(pred.embeddings.z2), &[32]);
        assert_eq!(g.shape(pred.embeddings.z), &[64]);
        let y = g.scalar_value(pred.y).unwrap();
        assert!(y > 0.0 && y < 1.0);
        // Concatenation invariant: z is exactly (z1, z2).
        let z1 = g.value(pred.embeddings.z1).to_vec();
        let z2 = g.value(pred.embeddings.z2).to_vec();
        let z = g.value(pred.embeddings.z);
        assert_eq!(&z[..32], &z1[..]);
        assert_eq!(&z[32..], &z2[..]);
    }

    #[test]
    fn zero_classifier_gives_exactly_half() {
        let config = ModelConfig::default();
        let mut model = init_model::<f64>(&config, 7).unwrap();
        for v in model.params.get_mut(CLASSIFIER_WEIGHT).unwrap().data_mut() {
            *v = 0.0;
        }
        let y = predict(&model, &test_image(&config, 2)).unwrap();
        assert_eq!(y, 0.5);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let config = ModelConfig::default();
        let model = init_model::<f32>(&config, 9).unwrap();
        let image = test_image(&config, 3).cast::<f32>();
        let a = predict(&model, &image).unwrap();
        let b = predict(&model, &image).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn head_swap_symmetry_leaves_score_unchanged() {
        let config = ModelConfig::default();
        let model = init_model::<f64>(&config, 11).unwrap();
        let image = test_image(&config, 4);
        let y = predict(&model, &image).unwrap();

        // Swap head1/head2 and the corresponding halves of W.
        let mut swapped = model.clone();
        let h1 = model.params.get(HEAD1_WEIGHT).unwrap().clone();
        let h2 = model.params.get(HEAD2_WEIGHT).unwrap().clone();
        *swapped.params.get_mut(HEAD1_WEIGHT).unwrap() = h2;
        *swapped.params.get_mut(HEAD2_WEIGHT).unwrap() = h1;
        let w = swapped.params.get_mut(CLASSIFIER_WEIGHT).unwrap();
        let d = config.embed_dim;
        let data = w.data_mut();
        for i in 0..d {
            data.swap(i, d + i);
        }
        let y_swapped = predict(&swapped, &image).unwrap();
        assert!((y - y_swapped).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip_preserves_prediction() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.omad");
        let config = ModelConfig::default();
        let model = init_model::<f32>(&config, 5).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model::<f32>(&path).unwrap();
        assert_eq!(model, loaded);
        let image = test_image(&config, 6).cast::<f32>();
        assert_eq!(
            predict(&model, &image).unwrap().to_bits(),
            predict(&loaded, &image).unwrap().to_bits()
        );
    }

    #[test]
    fn truncated_model_file_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.omad");
        let model = init_model::<f32>(&ModelConfig::default(), 5).unwrap();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.omad");
        let model = init_model::<f32>(&ModelConfig::default(), 5).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let pos = bytes.windows(4).position(|w| w == b"OMAD").unwrap();
        bytes[pos] = b'Q';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_model::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }
}
