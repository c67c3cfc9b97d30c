//! The hypernetwork and the target classifier it generates.
//!
//! The flattened support kernel matrix passes through a shared neck (zero
//! or more dense layers) and then, for every parameter tensor of the
//! target network, through that tensor's own head — a stack of dense
//! layers with a linear output reshaped to the tensor's shape. The target
//! network itself is a small MLP over query kernel vectors whose weights
//! are the generated tensors, so two episodes with equal kernel matrices
//! get bitwise-equal classifiers.
//!
//! [`Model`] bundles the encoder, hypernetwork, and kernel parameters with
//! their configs; [`episode_forward`] runs the whole pipeline for one
//! episode and returns pre-softmax query logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{init_mlp, mlp_forward, LinearLayer};
use crate::autodiff::{Tape, Tensor};
use crate::encoder::{encode, init_encoder, EncoderConfig, EncoderParams};
use crate::episodes::{batch_inputs, Episode, Example};
use crate::kernel::{
    aggregate, init_kernel, order_support, query_kernel_vectors, support_kernel_matrix,
    AggregationMode, KernelParams, KernelSpec,
};
use crate::rng::{seed_rng, stream};
use crate::{Error, Result};

/// Shape contract of the generated classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetShape {
    /// Kernel-vector length: the aggregated support row count R.
    pub input_dim: usize,
    /// Layer widths; the last one is the episode way N. ReLU between
    /// layers, nothing after the last.
    pub layer_sizes: Vec<usize>,
    pub use_bias: bool,
}

impl TargetShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("target input_dim must be positive".into()));
        }
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "target layer_sizes must be non-empty and positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    /// The way count this target classifies into.
    pub fn way(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    /// Parameter enumeration: layer index ascending, weight before bias.
    /// Head assignment and serialization both follow this order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_dim = self.input_dim;
        for (i, &width) in self.layer_sizes.iter().enumerate() {
            out.push((format!("target.layer{i}.weight"), vec![width, in_dim]));
            if self.use_bias {
                out.push((format!("target.layer{i}.bias"), vec![width]));
            }
            in_dim = width;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetConfig {
    /// Dense layers shared by all heads; zero means heads read the
    /// flattened kernel matrix directly.
    pub neck_depth: usize,
    /// Dense layers per head, at least one.
    pub head_depth: usize,
    /// Width of every hidden layer in neck and heads.
    pub hidden_dim: usize,
    pub target: TargetShape,
}

impl HypernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_depth == 0 {
            return Err(Error::Config("head_depth must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        self.target.validate()
    }

    /// Input length of the hypernetwork: R^2.
    pub fn kernel_flat_dim(&self) -> usize {
        self.target.input_dim * self.target.input_dim
    }

    fn neck_output_dim(&self) -> usize {
        if self.neck_depth == 0 {
            self.kernel_flat_dim()
        } else {
            self.hidden_dim
        }
    }
}

/// Hypernetwork parameters: the shared neck plus one head per target
/// parameter tensor, stored in target enumeration order.
#[derive(Clone)]
pub struct HypernetParams {
    pub neck: Vec<LinearLayer>,
    pub heads: Vec<Vec<LinearLayer>>,
}

impl HypernetParams {
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.neck.iter().enumerate() {
            out.push((format!("hypernet.neck{i}.weight"), l.weight.clone()));
            out.push((format!("hypernet.neck{i}.bias"), l.bias.clone()));
        }
        for (h, head) in self.heads.iter().enumerate() {
            for (i, l) in head.iter().enumerate() {
                out.push((format!("hypernet.head{h}.layer{i}.weight"), l.weight.clone()));
                out.push((format!("hypernet.head{h}.layer{i}.bias"), l.bias.clone()));
            }
        }
        out
    }

    /// Zeroes each head's final layer, making the generated target
    /// parameters identically zero (uniform predictions downstream).
    pub fn zero_head_output_layers(&self) -> Result<()> {
        for head in &self.heads {
            let last = head.last().expect("heads have at least one layer");
            last.weight.set_data(&vec![0.0; last.weight.numel()])?;
            last.bias.set_data(&vec![0.0; last.bias.numel()])?;
        }
        Ok(())
    }
}

/// The generated per-task classifier weights, in target enumeration order.
pub struct TargetParams {
    pub tensors: Vec<Tensor>,
}

/// Fresh hypernetwork parameters, deterministic per seed.
pub fn init_hypernet(config: &HypernetConfig, seed: u64) -> Result<HypernetParams> {
    config.validate()?;
    let mut rng = seed_rng(seed, stream::HYPERNET_INIT);
    let mut neck_dims = vec![config.kernel_flat_dim()];
    neck_dims.extend(std::iter::repeat_n(config.hidden_dim, config.neck_depth));
    let neck = init_mlp(&neck_dims, &mut rng)?;

    let mut heads = Vec::new();
    for (_, shape) in config.target.parameter_shapes() {
        let numel: usize = shape.iter().product();
        let mut dims = vec![config.neck_output_dim()];
        dims.extend(std::iter::repeat_n(config.hidden_dim, config.head_depth - 1));
        dims.push(numel);
        heads.push(init_mlp(&dims, &mut rng)?);
    }
    Ok(HypernetParams { neck, heads })
}

/// Row-major flattening of the square kernel matrix, in support row order.
pub fn flatten_kernel(tape: &Tape, kernel_matrix: &Tensor) -> Result<Tensor> {
    let s = kernel_matrix.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape(format!(
            "flatten_kernel expects a square matrix, got {s:?}"
        )));
    }
    tape.reshape(kernel_matrix, &[s[0] * s[0]])
}

/// Runs the hypernetwork: flattened kernel matrix in, target weights out.
pub fn generate_target_params(
    tape: &Tape,
    config: &HypernetConfig,
    params: &HypernetParams,
    kernel_flat: &Tensor,
) -> Result<TargetParams> {
    let expected = config.kernel_flat_dim();
    if kernel_flat.shape() != [expected] {
        return Err(Error::Shape(format!(
            "hypernetwork expects a kernel vector of length {expected}, got {:?}",
            kernel_flat.shape()
        )));
    }
    let row = tape.reshape(kernel_flat, &[1, expected])?;
    let neck_out = mlp_forward(tape, &params.neck, &row)?;

    let shapes = config.target.parameter_shapes();
    if shapes.len() != params.heads.len() {
        return Err(Error::Shape(format!(
            "target has {} parameter tensors but hypernet has {} heads",
            shapes.len(),
            params.heads.len()
        )));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for ((_, shape), head) in shapes.iter().zip(&params.heads) {
        let flat = mlp_forward(tape, head, &neck_out)?;
        tensors.push(tape.reshape(&flat, shape)?);
    }
    Ok(TargetParams { tensors })
}

/// Target network logits over a batch of kernel vectors: `[M, R] -> [M, N]`.
pub fn target_logits(
    tape: &Tape,
    shape: &TargetShape,
    theta: &TargetParams,
    kernel_vectors: &Tensor,
) -> Result<Tensor> {
    let expected = shape.parameter_shapes();
    if theta.tensors.len() != expected.len() {
        return Err(Error::Shape(format!(
            "target params have {} tensors, shape expects {}",
            theta.tensors.len(),
            expected.len()
        )));
    }
    for (t, (name, s)) in theta.tensors.iter().zip(&expected) {
        if t.shape() != *s {
            return Err(Error::Shape(format!(
                "{name} has shape {:?}, expected {s:?}",
                t.shape()
            )));
        }
    }
    let ks = kernel_vectors.shape();
    if ks.len() != 2 || ks[1] != shape.input_dim {
        return Err(Error::Shape(format!(
            "target expects [M, {}] kernel vectors, got {ks:?}",
            shape.input_dim
        )));
    }

    let per_layer = if shape.use_bias { 2 } else { 1 };
    let mut x = kernel_vectors.clone();
    for layer in 0..shape.layer_sizes.len() {
        if layer > 0 {
            x = tape.relu(&x)?;
        }
        let weight = &theta.tensors[layer * per_layer];
        x = tape.matmul(&x, &tape.transpose(weight)?)?;
        if shape.use_bias {
            x = tape.add(&x, &theta.tensors[layer * per_layer + 1])?;
        }
    }
    Ok(x)
}

/// Probability view of the target network for one kernel vector.
pub fn target_forward(
    tape: &Tape,
    shape: &TargetShape,
    theta: &TargetParams,
    kernel_vector: &Tensor,
) -> Result<Tensor> {
    let s = kernel_vector.shape();
    if s.len() != 1 {
        return Err(Error::Shape(format!(
            "target_forward expects a kernel vector, got {s:?}"
        )));
    }
    let row = tape.reshape(kernel_vector, &[1, s[0]])?;
    let logits = target_logits(tape, shape, theta, &row)?;
    let probs = tape.softmax_rows(&logits)?;
    tape.reshape(&probs, &[shape.way()])
}

/// All trainable state: configs plus the three parameter groups.
#[derive(Clone)]
pub struct Model {
    pub encoder_config: EncoderConfig,
    pub hypernet_config: HypernetConfig,
    pub kernel_spec: KernelSpec,
    pub aggregation: AggregationMode,
    pub encoder: EncoderParams,
    pub hypernet: HypernetParams,
    pub kernel: KernelParams,
}

/// Plain-data copy of all parameters, in enumeration order. Safe to move
/// across threads and to serialize.
pub type ModelSnapshot = Vec<(String, Vec<usize>, Vec<f64>)>;

impl Model {
    /// Initializes all parameter groups from one seed.
    pub fn init(
        encoder_config: EncoderConfig,
        hypernet_config: HypernetConfig,
        kernel_spec: KernelSpec,
        aggregation: AggregationMode,
        seed: u64,
    ) -> Result<Model> {
        encoder_config.validate()?;
        hypernet_config.validate()?;
        kernel_spec.validate()?;
        let encoder = init_encoder(&encoder_config, seed)?;
        let hypernet = init_hypernet(&hypernet_config, seed)?;
        let kernel = init_kernel(&kernel_spec, encoder_config.embedding_dim, seed)?;
        Ok(Model {
            encoder_config,
            hypernet_config,
            kernel_spec,
            aggregation,
            encoder,
            hypernet,
            kernel,
        })
    }

    /// Named parameters in the fixed enumeration order: encoder group,
    /// hypernetwork group, then kernel-transform group.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.tensors();
        out.extend(self.hypernet.tensors());
        out.extend(self.kernel.tensors());
        out
    }

    pub fn parameter_tensors(&self) -> Vec<Tensor> {
        self.parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// (group name, tensors) for the three parameter groups.
    pub fn parameter_groups(&self) -> Vec<(&'static str, Vec<Tensor>)> {
        vec![
            ("encoder", self.encoder.tensors().into_iter().map(|(_, t)| t).collect()),
            ("hypernet", self.hypernet.tensors().into_iter().map(|(_, t)| t).collect()),
            ("kernel", self.kernel.tensors().into_iter().map(|(_, t)| t).collect()),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        self.parameters()
            .into_iter()
            .map(|(name, t)| (name, t.shape(), t.to_vec()))
            .collect()
    }

    /// Loads parameter values from a snapshot taken of an identically
    /// configured model.
    pub fn restore(&self, snapshot: &ModelSnapshot) -> Result<()> {
        let params = self.parameters();
        if params.len() != snapshot.len() {
            return Err(Error::Checkpoint(format!(
                "snapshot has {} tensors, model has {}",
                snapshot.len(),
                params.len()
            )));
        }
        for ((name, tensor), (snap_name, shape, data)) in params.iter().zip(snapshot) {
            if name != snap_name || &tensor.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "snapshot tensor '{snap_name}' {shape:?} does not match model tensor '{name}' {:?}",
                    tensor.shape()
                )));
            }
            tensor.set_data(data)?;
        }
        Ok(())
    }

    /// Deep copy with fresh tensors; the clone trains independently.
    pub fn clone_detached(&self) -> Result<Model> {
        let copy = Model::init(
            self.encoder_config.clone(),
            self.hypernet_config.clone(),
            self.kernel_spec.clone(),
            self.aggregation,
            0,
        )?;
        copy.restore(&self.snapshot())?;
        Ok(copy)
    }

    /// Checks that an episode's geometry matches this model.
    pub fn validate_episode(&self, way: usize, shot: usize) -> Result<()> {
        let rows = self.aggregation.row_count(way, shot);
        let expected = self.hypernet_config.target.input_dim;
        if rows != expected {
            return Err(Error::Shape(format!(
                "model expects {expected} support rows, a {way}-way {shot}-shot episode under {:?} aggregation yields {rows}",
                self.aggregation
            )));
        }
        if self.hypernet_config.target.way() != way {
            return Err(Error::Shape(format!(
                "target classifies {} ways, episode has {way}",
                self.hypernet_config.target.way()
            )));
        }
        Ok(())
    }
}

/// The pipeline for one task given an already-batched query tensor: encode
/// support and queries with the same encoder, order and aggregate the
/// support, build the kernel matrix, generate the target weights, and score
/// every query's kernel vector. Query labels are never involved, so this
/// also serves prediction on unlabeled queries. Returns pre-softmax logits
/// `[M, N]`.
pub fn forward_task(
    tape: &Tape,
    model: &Model,
    support: &[Example],
    query_batch: &Tensor,
) -> Result<Tensor> {
    let way = model.hypernet_config.target.way();
    let shot = if support.len().is_multiple_of(way) && !support.is_empty() {
        support.len() / way
    } else {
        return Err(Error::Data(format!(
            "support of {} examples does not split into {way} classes",
            support.len()
        )));
    };
    model.validate_episode(way, shot)?;

    let support_batch = batch_inputs(support)?;
    let z_support = encode(&model.encoder_config, &model.encoder, tape, &support_batch)?;
    let z_query = encode(&model.encoder_config, &model.encoder, tape, query_batch)?;

    let labels: Vec<usize> = support.iter().map(|e| e.label).collect();
    let ordered = order_support(tape, &z_support, &labels)?;
    let rows = aggregate(tape, &ordered, model.aggregation, way, shot)?;
    let kernel_matrix = support_kernel_matrix(tape, &model.kernel_spec, &model.kernel, &rows)?;
    let flat = flatten_kernel(tape, &kernel_matrix)?;
    let theta = generate_target_params(tape, &model.hypernet_config, &model.hypernet, &flat)?;

    let kernel_vectors = query_kernel_vectors(tape, &model.kernel_spec, &model.kernel, &z_query, &rows)?;
    target_logits(tape, &model.hypernet_config.target, &theta, &kernel_vectors)
}

/// [`forward_task`] over a full labeled episode.
pub fn episode_forward(tape: &Tape, model: &Model, episode: &Episode) -> Result<Tensor> {
    episode.validate().map_err(|e| Error::Data(format!("invalid episode: {e}")))?;
    model.validate_episode(episode.way, episode.shot)?;
    let query_batch = batch_inputs(&episode.query)?;
    forward_task(tape, model, &episode.support, &query_batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderKind;
    use crate::episodes::{sample_episode, EpisodeSource, SyntheticTaskSource};
    use crate::kernel::{KernelKind, TransformKind, DEFAULT_COSINE_EPSILON};

    fn single_layer_target(r: usize, way: usize) -> TargetShape {
        TargetShape {
            input_dim: r,
            layer_sizes: vec![way],
            use_bias: true,
        }
    }

    fn desk_model(way: usize, shot: usize, aggregation: AggregationMode) -> Model {
        let r = aggregation.row_count(way, shot);
        Model::init(
            EncoderConfig {
                kind: EncoderKind::Mlp,
                input_shape: vec![6],
                mlp_hidden_sizes: vec![16],
                embedding_dim: 8,
            },
            HypernetConfig {
                neck_depth: 1,
                head_depth: 2,
                hidden_dim: 16,
                target: single_layer_target(r, way),
            },
            KernelSpec {
                kind: KernelKind::Cosine,
                transform: TransformKind::Identity,
                cosine_epsilon: DEFAULT_COSINE_EPSILON,
            },
            aggregation,
            42,
        )
        .unwrap()
    }

    fn toy_source() -> EpisodeSource {
        EpisodeSource::Synthetic(SyntheticTaskSource {
            input_dim: 6,
            class_pool_size: 15,
            cluster_spread: 0.4,
            center_scale: 6.0,
            seed: 2,
        })
    }

    #[test]
    fn flatten_kernel_trivials() {
        let tape = Tape::new();
        let k = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(flatten_kernel(&tape, &k).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        let k5 = Tensor::from_vec(vec![0.5; 25], &[5, 5]).unwrap();
        assert_eq!(flatten_kernel(&tape, &k5).unwrap().numel(), 25);

        let sym = Tensor::from_vec(vec![1.0, 7.0, 7.0, 2.0], &[2, 2]).unwrap();
        let v = flatten_kernel(&tape, &sym).unwrap().to_vec();
        assert_eq!(v[1], v[2]);

        let rect = Tensor::from_vec(vec![0.0; 6], &[2, 3]).unwrap();
        assert!(flatten_kernel(&tape, &rect).is_err());
    }

    #[test]
    fn single_layer_target_gets_exactly_two_heads() {
        let shapes = single_layer_target(5, 5).parameter_shapes();
        assert_eq!(shapes.len(), 2);
        assert_eq!(shapes[0].1, vec![5, 5]); // weight [N, R]
        assert_eq!(shapes[1].1, vec![5]); // bias [N]
        let config = HypernetConfig {
            neck_depth: 1,
            head_depth: 2,
            hidden_dim: 8,
            target: single_layer_target(5, 5),
        };
        let params = init_hypernet(&config, 0).unwrap();
        assert_eq!(params.heads.len(), 2);
    }

    #[test]
    fn zero_neck_heads_read_the_kernel_directly() {
        let config = HypernetConfig {
            neck_depth: 0,
            head_depth: 1,
            hidden_dim: 8,
            target: single_layer_target(3, 3),
        };
        let params = init_hypernet(&config, 1).unwrap();
        assert!(params.neck.is_empty());
        assert_eq!(params.heads[0][0].in_dim(), 9);

        let tape = Tape::new();
        let flat = Tensor::from_vec((0..9).map(|i| i as f64 / 10.0).collect(), &[9]).unwrap();
        let theta = generate_target_params(&tape, &config, &params, &flat).unwrap();
        assert_eq!(theta.tensors[0].shape(), vec![3, 3]);
    }

    #[test]
    fn zeroed_head_outputs_give_uniform_distribution() {
        let config = HypernetConfig {
            neck_depth: 1,
            head_depth: 2,
            hidden_dim: 8,
            target: single_layer_target(4, 4),
        };
        let params = init_hypernet(&config, 5).unwrap();
        params.zero_head_output_layers().unwrap();
        let tape = Tape::new();
        let flat = Tensor::from_vec(vec![0.3; 16], &[16]).unwrap();
        let theta = generate_target_params(&tape, &config, &params, &flat).unwrap();
        assert!(theta.tensors.iter().all(|t| t.to_vec().iter().all(|&v| v == 0.0)));

        let k = Tensor::from_vec(vec![0.9, -0.1, 0.4, 0.2], &[4]).unwrap();
        let probs = target_forward(&tape, &config.target, &theta, &k).unwrap();
        for p in probs.to_vec() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_like_target_rows_classify_one_hot_kernel_vectors() {
        let shape = single_layer_target(3, 3);
        let theta = TargetParams {
            tensors: vec![
                Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap(),
                Tensor::from_vec(vec![0.0; 3], &[3]).unwrap(),
            ],
        };
        let tape = Tape::new();
        for j in 0..3 {
            let mut k = vec![0.0; 3];
            k[j] = 1.0;
            let probs = target_forward(&tape, &shape, &theta, &Tensor::from_vec(k, &[3]).unwrap()).unwrap();
            let v = probs.to_vec();
            let argmax = (0..3).max_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap()).unwrap();
            assert_eq!(argmax, j);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn episode_forward_has_expected_shapes() {
        let model = desk_model(5, 1, AggregationMode::Averaged);
        let ep = sample_episode(&toy_source(), 5, 1, 16, 3).unwrap();
        let tape = Tape::new();
        let logits = episode_forward(&tape, &model, &ep).unwrap();
        assert_eq!(logits.shape(), vec![80, 5]);
    }

    #[test]
    fn duplicated_query_rows_get_identical_logits() {
        let model = desk_model(3, 1, AggregationMode::Averaged);
        let mut ep = sample_episode(&toy_source(), 3, 1, 2, 9).unwrap();
        // overwrite a same-class slot with a copy of query 0; the episode
        // stays balanced and rows 0 and `slot` must come out identical
        let dup = ep.query[0].clone();
        let slot = ep
            .query
            .iter()
            .position(|e| e.label == dup.label && e.input != dup.input)
            .unwrap();
        ep.query[slot] = dup;

        let tape = Tape::new();
        let logits = episode_forward(&tape, &model, &ep).unwrap();
        let v = logits.to_vec();
        assert_eq!(v[0..3], v[slot * 3..slot * 3 + 3]);
    }

    #[test]
    fn theta_is_a_pure_function_of_the_kernel_matrix() {
        // Two different support sets with equal kernel matrices must yield
        // bitwise-equal classifiers. Cosine with identity transform is
        // invariant to scaling rows by powers of two, and that scaling is
        // exact in floating point, so the two matrices match bitwise.
        use crate::kernel::order_support;
        let model = desk_model(3, 1, AggregationMode::Averaged);
        let spec = &model.kernel_spec;

        let base = vec![0.3, -1.1, 0.8, 0.9, 0.2, -0.7, -0.4, 0.6, 1.3];
        let scaled: Vec<f64> = base.iter().map(|v| 2.0 * v).collect();
        let theta_from = |rows_data: Vec<f64>| {
            let tape = Tape::new();
            let z = Tensor::from_vec(rows_data, &[3, 3]).unwrap();
            let ordered = order_support(&tape, &z, &[0, 1, 2]).unwrap();
            let k = support_kernel_matrix(&tape, spec, &model.kernel, &ordered).unwrap();
            let flat = flatten_kernel(&tape, &k).unwrap();
            let theta =
                generate_target_params(&tape, &model.hypernet_config, &model.hypernet, &flat)
                    .unwrap();
            (k.to_vec(), theta.tensors.iter().flat_map(|t| t.to_vec()).collect::<Vec<f64>>())
        };

        let (k1, t1) = theta_from(base);
        let (k2, t2) = theta_from(scaled);
        for (a, b) in k1.iter().zip(&k2) {
            assert_eq!(a.to_bits(), b.to_bits(), "kernel matrices must match bitwise");
        }
        for (a, b) in t1.iter().zip(&t2) {
            assert_eq!(a.to_bits(), b.to_bits(), "generated classifiers must match bitwise");
        }
    }

    #[test]
    fn conv4_episode_trains_end_to_end() {
        use crate::episodes::Example;
        let model = Model::init(
            EncoderConfig {
                kind: EncoderKind::Conv4,
                input_shape: vec![1, 16, 16],
                mlp_hidden_sizes: vec![],
                embedding_dim: 64,
            },
            HypernetConfig {
                neck_depth: 1,
                head_depth: 2,
                hidden_dim: 8,
                target: single_layer_target(2, 2),
            },
            KernelSpec {
                kind: KernelKind::Cosine,
                transform: TransformKind::Identity,
                cosine_epsilon: DEFAULT_COSINE_EPSILON,
            },
            AggregationMode::Averaged,
            6,
        )
        .unwrap();

        let image = |phase: usize, label: usize| Example {
            input: (0..256).map(|i| ((i * (phase + 3)) % 11) as f64 / 11.0).collect(),
            input_shape: vec![1, 16, 16],
            label,
        };
        let episode = Episode {
            support: vec![image(0, 0), image(1, 1)],
            query: vec![image(2, 0), image(3, 1)],
            way: 2,
            shot: 1,
            queries_per_class: 1,
        };
        let tape = Tape::new();
        let loss = crate::training::episode_loss(&tape, &model, &episode).unwrap();
        assert!(loss.item().unwrap().is_finite());
        crate::autodiff::backward(&loss, &tape).unwrap();
        for (name, t) in model.encoder.tensors() {
            let g = t.grad().unwrap_or_else(|| panic!("{name} has no grad"));
            assert!(g.iter().all(|v| v.is_finite()), "{name} grad non-finite");
            let norm: f64 = g.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{name} grad is identically zero");
        }
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let model = desk_model(5, 1, AggregationMode::Averaged);
        let ep = sample_episode(&toy_source(), 4, 1, 2, 0).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            episode_forward(&tape, &model, &ep),
            Err(Error::Shape(_))
        ));
    }
}
