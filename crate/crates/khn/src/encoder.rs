//! The encoding network mapping raw inputs to embeddings.
//!
//! Two backbone families: a small MLP over vector inputs (the desk-scale
//! default) and a four-block conv stack over images — each block is a 3x3
//! convolution, batch normalization, ReLU, and 2x2 max-pool, 64 channels
//! per block, flattened at the end. Batch normalization uses the
//! statistics of the batch being encoded, in training and evaluation
//! alike; there are no running averages, so encoding is a pure function of
//! (parameters, batch).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{init_mlp, mlp_forward, LinearLayer};
use crate::autodiff::{Tape, Tensor};
use crate::rng::{seed_rng, stream};
use crate::{Error, Result};

/// Channel width of every conv block.
pub const CONV4_CHANNELS: usize = 64;
/// Number of conv blocks; each halves the spatial extent.
pub const CONV4_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp,
    Conv4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// `[d]` for MLP input, `[c, h, w]` for conv4.
    pub input_shape: Vec<usize>,
    /// Hidden widths of the MLP backbone; ignored by conv4.
    pub mlp_hidden_sizes: Vec<usize>,
    /// Output dimension of the encoder.
    pub embedding_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        match self.kind {
            EncoderKind::Mlp => {
                if self.input_shape.is_empty() || self.input_shape.contains(&0) {
                    return Err(Error::Config(format!(
                        "mlp encoder needs a non-empty input shape, got {:?}",
                        self.input_shape
                    )));
                }
            }
            EncoderKind::Conv4 => {
                let [c, h, w] = self.input_shape[..] else {
                    return Err(Error::Config(format!(
                        "conv4 encoder needs input_shape [c, h, w], got {:?}",
                        self.input_shape
                    )));
                };
                if c == 0 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
                    return Err(Error::Config(format!(
                        "conv4 needs H and W divisible by 16 (four 2x poolings), got {h}x{w}"
                    )));
                }
                let flat = CONV4_CHANNELS * (h / 16) * (w / 16);
                if self.embedding_dim != flat {
                    return Err(Error::Config(format!(
                        "conv4 on {c}x{h}x{w} flattens to {flat}, config says embedding_dim {}",
                        self.embedding_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One conv block's parameters: conv weight/bias plus batch-norm affine.
#[derive(Clone)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
}

#[derive(Clone)]
pub enum EncoderParams {
    Mlp(Vec<LinearLayer>),
    Conv4(Vec<ConvBlock>),
}

impl EncoderParams {
    /// Tensors in enumeration order (layer ascending, weight before bias;
    /// conv blocks additionally carry bn_gamma then bn_beta).
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        match self {
            EncoderParams::Mlp(layers) => layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        (format!("encoder.layer{i}.weight"), l.weight.clone()),
                        (format!("encoder.layer{i}.bias"), l.bias.clone()),
                    ]
                })
                .collect(),
            EncoderParams::Conv4(blocks) => blocks
                .iter()
                .enumerate()
                .flat_map(|(i, b)| {
                    [
                        (format!("encoder.block{i}.weight"), b.weight.clone()),
                        (format!("encoder.block{i}.bias"), b.bias.clone()),
                        (format!("encoder.block{i}.bn_gamma"), b.bn_gamma.clone()),
                        (format!("encoder.block{i}.bn_beta"), b.bn_beta.clone()),
                    ]
                })
                .collect(),
        }
    }
}

fn init_conv_block(in_channels: usize, rng: &mut ChaCha8Rng) -> Result<ConvBlock> {
    use rand::Rng;
    let fan_in = in_channels * 9;
    let bound = (1.0 / fan_in as f64).sqrt();
    let weight: Vec<f64> = (0..CONV4_CHANNELS * in_channels * 9)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Ok(ConvBlock {
        weight: Tensor::parameter(weight, &[CONV4_CHANNELS, in_channels, 3, 3])?,
        bias: Tensor::parameter(vec![0.0; CONV4_CHANNELS], &[CONV4_CHANNELS])?,
        bn_gamma: Tensor::parameter(vec![1.0; CONV4_CHANNELS], &[CONV4_CHANNELS])?,
        bn_beta: Tensor::parameter(vec![0.0; CONV4_CHANNELS], &[CONV4_CHANNELS])?,
    })
}

/// Fresh encoder parameters: weights uniform in +-sqrt(1/fan_in), biases
/// zero, batch-norm affine at identity. Deterministic per seed.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = seed_rng(seed, stream::ENCODER_INIT);
    match config.kind {
        EncoderKind::Mlp => {
            // image-shaped inputs are flattened before the first layer
            let mut dims = vec![config.input_shape.iter().product()];
            dims.extend_from_slice(&config.mlp_hidden_sizes);
            dims.push(config.embedding_dim);
            Ok(EncoderParams::Mlp(init_mlp(&dims, &mut rng)?))
        }
        EncoderKind::Conv4 => {
            let mut blocks = Vec::with_capacity(CONV4_BLOCKS);
            let mut channels = config.input_shape[0];
            for _ in 0..CONV4_BLOCKS {
                blocks.push(init_conv_block(channels, &mut rng)?);
                channels = CONV4_CHANNELS;
            }
            Ok(EncoderParams::Conv4(blocks))
        }
    }
}

/// Differentiable forward pass: `[B, ...input_shape] -> [B, embedding_dim]`.
pub fn encode(
    config: &EncoderConfig,
    params: &EncoderParams,
    tape: &Tape,
    batch: &Tensor,
) -> Result<Tensor> {
    let shape = batch.shape();
    if shape.len() != config.input_shape.len() + 1 || shape[1..] != config.input_shape[..] {
        return Err(Error::Shape(format!(
            "encoder expects [B, {:?}] input, got {shape:?}",
            config.input_shape
        )));
    }
    let b = shape[0];
    if b == 0 {
        return Err(Error::Shape("cannot encode an empty batch".into()));
    }
    match (params, config.kind) {
        (EncoderParams::Mlp(layers), EncoderKind::Mlp) => {
            let flat = if config.input_shape.len() > 1 {
                tape.reshape(batch, &[b, config.input_shape.iter().product()])?
            } else {
                batch.clone()
            };
            mlp_forward(tape, layers, &flat)
        }
        (EncoderParams::Conv4(blocks), EncoderKind::Conv4) => {
            let mut h = batch.clone();
            for block in blocks {
                h = tape.conv3x3(&h, &block.weight, &block.bias)?;
                h = tape.batchnorm2d(&h, &block.bn_gamma, &block.bn_beta)?;
                h = tape.relu(&h)?;
                h = tape.maxpool2(&h)?;
            }
            tape.reshape(&h, &[b, config.embedding_dim])
        }
        _ => Err(Error::Config("encoder params do not match config kind".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_config(hidden: &[usize]) -> EncoderConfig {
        EncoderConfig {
            kind: EncoderKind::Mlp,
            input_shape: vec![4],
            mlp_hidden_sizes: hidden.to_vec(),
            embedding_dim: 3,
        }
    }

    #[test]
    fn zero_hidden_mlp_is_a_single_linear_map() {
        let config = mlp_config(&[]);
        let params = init_encoder(&config, 5).unwrap();
        // zero bias by construction, so a zero input maps to zero
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![0.0; 4], &[1, 4]).unwrap();
        let z = encode(&config, &params, &tape, &x).unwrap();
        assert_eq!(z.shape(), vec![1, 3]);
        assert!(z.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_dimension_is_preserved() {
        let config = mlp_config(&[8]);
        let params = init_encoder(&config, 5).unwrap();
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![0.5; 7 * 4], &[7, 4]).unwrap();
        let z = encode(&config, &params, &tape, &x).unwrap();
        assert_eq!(z.shape(), vec![7, 3]);
    }

    #[test]
    fn conv4_on_32x32_flattens_to_256() {
        // 32 -> 16 -> 8 -> 4 -> 2 through four 2x poolings, 64 channels
        let config = EncoderConfig {
            kind: EncoderKind::Conv4,
            input_shape: vec![1, 32, 32],
            mlp_hidden_sizes: vec![],
            embedding_dim: 256,
        };
        let params = init_encoder(&config, 3).unwrap();
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![0.25; 2 * 1024], &[2, 1, 32, 32]).unwrap();
        let z = encode(&config, &params, &tape, &x).unwrap();
        assert_eq!(z.shape(), vec![2, 256]);
    }

    #[test]
    fn conv4_rejects_indivisible_extents() {
        let config = EncoderConfig {
            kind: EncoderKind::Conv4,
            input_shape: vec![1, 20, 20],
            mlp_hidden_sizes: vec![],
            embedding_dim: 64,
        };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = mlp_config(&[8, 8]);
        let a = init_encoder(&config, 11).unwrap();
        let b = init_encoder(&config, 11).unwrap();
        let c = init_encoder(&config, 12).unwrap();
        let flat = |p: &EncoderParams| -> Vec<f64> {
            p.tensors().iter().flat_map(|(_, t)| t.to_vec()).collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn encode_rejects_wrong_input_shape() {
        let config = mlp_config(&[]);
        let params = init_encoder(&config, 1).unwrap();
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![0.0; 6], &[1, 6]).unwrap();
        assert!(matches!(
            encode(&config, &params, &tape, &x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn encoding_is_deterministic_given_params_and_batch() {
        let config = EncoderConfig {
            kind: EncoderKind::Conv4,
            input_shape: vec![1, 16, 16],
            mlp_hidden_sizes: vec![],
            embedding_dim: 64,
        };
        let params = init_encoder(&config, 9).unwrap();
        let data: Vec<f64> = (0..3 * 256).map(|i| (i % 7) as f64 / 7.0).collect();
        let run = || {
            let tape = Tape::new();
            let x = Tensor::from_vec(data.clone(), &[3, 1, 16, 16]).unwrap();
            encode(&config, &params, &tape, &x).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }
}
