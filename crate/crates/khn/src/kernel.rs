//! Support ordering, embedding aggregation, and the parametrized kernels.
//!
//! Support embeddings are first sorted by class label (stably, so
//! within-class input order is preserved), then optionally aggregated to
//! per-class means. The kernel is a dot product of transformed vectors —
//! `f` is the identity or a learned MLP — or its cosine normalization. The
//! support kernel matrix and every query's kernel vector share the same row
//! order, which is what lets the generated classifier read kernel vectors
//! positionally.

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{init_mlp, mlp_forward, LinearLayer};
use crate::autodiff::{Tape, Tensor};
use crate::rng::{seed_rng, stream};
use crate::{Error, Result};

pub const DEFAULT_COSINE_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Dot,
    Cosine,
}

/// The transformation `f` inside the kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TransformKind {
    Identity,
    Mlp {
        hidden_sizes: Vec<usize>,
        out_dim: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub transform: TransformKind,
    /// Guard for the cosine denominator: norms are clamped to at least
    /// this value, keeping the kernel differentiable at zero vectors.
    pub cosine_epsilon: f64,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cosine_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "cosine_epsilon must be positive, got {}",
                self.cosine_epsilon
            )));
        }
        if let TransformKind::Mlp { out_dim, .. } = &self.transform {
            if *out_dim == 0 {
                return Err(Error::Config("kernel transform out_dim must be positive".into()));
            }
        }
        Ok(())
    }

    /// Embedding dimension after the transform.
    pub fn transformed_dim(&self, embedding_dim: usize) -> usize {
        match &self.transform {
            TransformKind::Identity => embedding_dim,
            TransformKind::Mlp { out_dim, .. } => *out_dim,
        }
    }
}

/// Parameters of the kernel transform; empty exactly when `f` is the
/// identity.
#[derive(Clone, Default)]
pub struct KernelParams {
    pub transform: Vec<LinearLayer>,
}

impl KernelParams {
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.transform
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("kernel.layer{i}.weight"), l.weight.clone()),
                    (format!("kernel.layer{i}.bias"), l.bias.clone()),
                ]
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.transform.is_empty()
    }
}

/// Fresh transform parameters for a spec; empty for the identity transform.
pub fn init_kernel(spec: &KernelSpec, embedding_dim: usize, seed: u64) -> Result<KernelParams> {
    spec.validate()?;
    match &spec.transform {
        TransformKind::Identity => Ok(KernelParams::default()),
        TransformKind::Mlp {
            hidden_sizes,
            out_dim,
        } => {
            let mut dims = vec![embedding_dim];
            dims.extend_from_slice(hidden_sizes);
            dims.push(*out_dim);
            let mut rng = seed_rng(seed, stream::KERNEL_INIT);
            Ok(KernelParams {
                transform: init_mlp(&dims, &mut rng)?,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Per-class mean embeddings: N rows regardless of shot.
    Averaged,
    /// All individual embeddings: N*K rows.
    FineGrained,
}

impl AggregationMode {
    /// Support row count for a `way`-way `shot`-shot episode.
    pub fn row_count(self, way: usize, shot: usize) -> usize {
        match self {
            AggregationMode::Averaged => way,
            AggregationMode::FineGrained => way * shot,
        }
    }
}

/// Support embeddings sorted by class label.
pub struct OrderedSupport {
    /// `[rows, d]` in sorted order.
    pub embeddings: Tensor,
    /// Non-decreasing class index per row.
    pub row_labels: Vec<usize>,
    /// `pi[r]` is the raw support index stored at sorted row `r`.
    pub pi: Vec<usize>,
}

/// Stably sorts support rows by class label; within a class the original
/// input order is preserved.
pub fn order_support(tape: &Tape, embeddings: &Tensor, labels: &[usize]) -> Result<OrderedSupport> {
    let shape = embeddings.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "order_support expects [L, d] embeddings, got {shape:?}"
        )));
    }
    if labels.len() != shape[0] {
        return Err(Error::Shape(format!(
            "{} labels for {} embedding rows",
            labels.len(),
            shape[0]
        )));
    }
    let mut pi: Vec<usize> = (0..labels.len()).collect();
    pi.sort_by_key(|&i| labels[i]); // stable
    let row_labels: Vec<usize> = pi.iter().map(|&i| labels[i]).collect();
    Ok(OrderedSupport {
        embeddings: tape.gather_rows(embeddings, &pi)?,
        row_labels,
        pi,
    })
}

/// Applies the aggregation mode to ordered support embeddings.
///
/// Averaged mode maps the `way*shot` sorted rows to `way` per-class means
/// (a constant averaging matrix, so gradients flow through unchanged);
/// fine-grained mode passes rows through untouched.
pub fn aggregate(
    tape: &Tape,
    ordered: &OrderedSupport,
    mode: AggregationMode,
    way: usize,
    shot: usize,
) -> Result<OrderedSupport> {
    let rows = ordered.embeddings.shape()[0];
    if rows != way * shot {
        return Err(Error::Shape(format!(
            "aggregate expects {way}x{shot} = {} rows, got {rows}",
            way * shot
        )));
    }
    let expected: Vec<usize> = (0..way).flat_map(|c| std::iter::repeat_n(c, shot)).collect();
    if ordered.row_labels != expected {
        return Err(Error::Shape(format!(
            "aggregate expects {shot} sorted rows per class, got labels {:?}",
            ordered.row_labels
        )));
    }
    match mode {
        AggregationMode::FineGrained => Ok(OrderedSupport {
            embeddings: ordered.embeddings.clone(),
            row_labels: ordered.row_labels.clone(),
            pi: ordered.pi.clone(),
        }),
        AggregationMode::Averaged => {
            let mut avg = vec![0.0; way * rows];
            for c in 0..way {
                for j in 0..shot {
                    avg[c * rows + c * shot + j] = 1.0 / shot as f64;
                }
            }
            let avg = Tensor::from_vec(avg, &[way, rows])?;
            Ok(OrderedSupport {
                embeddings: tape.matmul(&avg, &ordered.embeddings)?,
                row_labels: (0..way).collect(),
                pi: ordered.pi.clone(),
            })
        }
    }
}

/// Applies the transform `f` row-wise.
pub fn apply_transform(
    tape: &Tape,
    spec: &KernelSpec,
    params: &KernelParams,
    x: &Tensor,
) -> Result<Tensor> {
    match &spec.transform {
        TransformKind::Identity => {
            if !params.is_empty() {
                return Err(Error::Config(
                    "identity transform carries no parameters, but some were provided".into(),
                ));
            }
            Ok(x.clone())
        }
        TransformKind::Mlp { .. } => {
            if params.is_empty() {
                return Err(Error::Config("mlp transform has no parameters".into()));
            }
            mlp_forward(tape, &params.transform, x)
        }
    }
}

/// Row norms clamped below by epsilon, shaped `[rows, 1]`.
///
/// Computed as `sqrt(max(sum(f^2), eps^2))`, which equals
/// `max(||f||, eps)` exactly while keeping the backward pass free of
/// division by zero.
fn clamped_row_norms(tape: &Tape, f: &Tensor, epsilon: f64) -> Result<Tensor> {
    let rows = f.shape()[0];
    let sq = tape.mul(f, f)?;
    let sums = tape.sum_axis(&sq, 1)?;
    let clamped = tape.clamp_min(&sums, epsilon * epsilon)?;
    let norms = tape.sqrt(&clamped)?;
    tape.reshape(&norms, &[rows, 1])
}

/// Kernel values between every row of `a` and every row of `b`, both in
/// raw embedding space: `[m, d] x [r, d] -> [m, r]`.
pub fn kernel_cross(
    tape: &Tape,
    spec: &KernelSpec,
    params: &KernelParams,
    a: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    let fa = apply_transform(tape, spec, params, a)?;
    // aliasing keeps the support matrix bitwise symmetric
    let fb = if b.id() == a.id() {
        fa.clone()
    } else {
        apply_transform(tape, spec, params, b)?
    };
    let gram = tape.matmul(&fa, &tape.transpose(&fb)?)?;
    match spec.kind {
        KernelKind::Dot => Ok(gram),
        KernelKind::Cosine => {
            let na = clamped_row_norms(tape, &fa, spec.cosine_epsilon)?;
            let nb = clamped_row_norms(tape, &fb, spec.cosine_epsilon)?;
            let denom = tape.matmul(&na, &tape.transpose(&nb)?)?;
            tape.div(&gram, &denom)
        }
    }
}

/// Kernel value between two vectors of equal dimension.
pub fn kernel_value(
    tape: &Tape,
    spec: &KernelSpec,
    params: &KernelParams,
    z1: &Tensor,
    z2: &Tensor,
) -> Result<Tensor> {
    let (s1, s2) = (z1.shape(), z2.shape());
    if s1.len() != 1 || s2.len() != 1 || s1 != s2 {
        return Err(Error::Shape(format!(
            "kernel_value expects two equal-length vectors, got {s1:?} and {s2:?}"
        )));
    }
    let d = s1[0];
    let a = tape.reshape(z1, &[1, d])?;
    let b = tape.reshape(z2, &[1, d])?;
    let k = kernel_cross(tape, spec, params, &a, &b)?;
    tape.reshape(&k, &[])
}

/// The support kernel matrix over aggregated rows: `[R, R]`, symmetric.
pub fn support_kernel_matrix(
    tape: &Tape,
    spec: &KernelSpec,
    params: &KernelParams,
    rows: &OrderedSupport,
) -> Result<Tensor> {
    kernel_cross(tape, spec, params, &rows.embeddings, &rows.embeddings)
}

/// Kernel values between one query embedding and every support row, in the
/// same order as the kernel matrix rows.
pub fn query_kernel_vector(
    tape: &Tape,
    spec: &KernelSpec,
    params: &KernelParams,
    query_embedding: &Tensor,
    rows: &OrderedSupport,
) -> Result<Tensor> {
    let d = query_embedding.shape();
    if d.len() != 1 {
        return Err(Error::Shape(format!(
            "query_kernel_vector expects a vector, got {d:?}"
        )));
    }
    let q = tape.reshape(query_embedding, &[1, d[0]])?;
    let k = kernel_cross(tape, spec, params, &q, &rows.embeddings)?;
    let r = rows.embeddings.shape()[0];
    tape.reshape(&k, &[r])
}

/// Batched form of [`query_kernel_vector`]: `[M, d] -> [M, R]`.
pub fn query_kernel_vectors(
    tape: &Tape,
    spec: &KernelSpec,
    params: &KernelParams,
    query_embeddings: &Tensor,
    rows: &OrderedSupport,
) -> Result<Tensor> {
    kernel_cross(tape, spec, params, query_embeddings, &rows.embeddings)
}
