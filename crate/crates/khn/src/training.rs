//! Episodic training, prediction with support-set finetuning, and
//! evaluation.
//!
//! Training samples one task set per gradient step, takes the mean query
//! cross-entropy over it, and jointly updates encoder, hypernetwork, and
//! kernel-transform parameters with Adam. Prediction can first tune a
//! clone of the model for a few steps on the tuning task built from the
//! support set alone (support serving as both support and query); the
//! stored model is never mutated. Evaluation aggregates per-episode query
//! accuracies into a mean with a 95% confidence halfwidth.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, backward, AdamState, Tape, Tensor};
use crate::episodes::{batch_inputs, episode_seed, sample_episode, Episode, EpisodeSource, Example};
use crate::hypernet::{episode_forward, forward_task, Model};
use crate::rng::stream;
use crate::{Error, Result};

/// Episode geometry: N-way, K-shot, Q queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskShape {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs x tasks_per_epoch gradient steps are taken in total.
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    /// Tasks averaged into one gradient step.
    pub taskset_size: usize,
    pub seed: u64,
    /// Invoke the evaluation hook every this many gradient steps.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is allowed as a degenerate case: a zero step size must
        // leave parameters bitwise unchanged
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("tasks_per_epoch", self.tasks_per_epoch),
            ("taskset_size", self.taskset_size),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Zero disables finetuning entirely.
    pub steps: usize,
    pub learning_rate: f64,
    pub tune_encoder: bool,
    pub tune_hypernet: bool,
    pub tune_kernel: bool,
}

impl FinetuneConfig {
    pub fn disabled() -> FinetuneConfig {
        FinetuneConfig {
            steps: 0,
            learning_rate: 1e-4,
            tune_encoder: true,
            tune_hypernet: true,
            tune_kernel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "finetune learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One row of the training metrics stream.
#[derive(Clone, Copy, Debug)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Aggregated evaluation outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episode_count: usize,
    pub mean_accuracy: f64,
    /// `1.96 * stddev / sqrt(episode_count)`; zero for a single episode.
    pub ci95_halfwidth: f64,
    pub per_episode_accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_episode_accuracies: Vec<f64>) -> EvalReport {
        let n = per_episode_accuracies.len();
        let mean = per_episode_accuracies.iter().sum::<f64>() / n.max(1) as f64;
        let ci95_halfwidth = if n > 1 {
            let var = per_episode_accuracies
                .iter()
                .map(|a| (a - mean) * (a - mean))
                .sum::<f64>()
                / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        EvalReport {
            episode_count: n,
            mean_accuracy: mean,
            ci95_halfwidth,
            per_episode_accuracies,
        }
    }
}

/// Mean query cross-entropy of one episode (Algorithm 1's per-task loss).
pub fn episode_loss(tape: &Tape, model: &Model, episode: &Episode) -> Result<Tensor> {
    let logits = episode_forward(tape, model, episode)?;
    tape.softmax_cross_entropy(&logits, &episode.query_labels())
}

/// Called every `eval_every` gradient steps with (step, model).
pub type EvalHook<'a> = &'a mut dyn FnMut(usize, &Model) -> Result<()>;

/// The episodic training loop: jointly optimizes encoder, hypernetwork,
/// and kernel parameters with Adam, one task set per gradient step.
/// Returns the loss history. Deterministic given the config seed.
pub fn train(
    model: &Model,
    source: &EpisodeSource,
    shape: TaskShape,
    config: &TrainConfig,
    mut on_iteration: impl FnMut(IterationRecord),
    mut eval_hook: Option<EvalHook<'_>>,
) -> Result<Vec<f64>> {
    config.validate()?;
    model.validate_episode(shape.way, shape.shot)?;
    let params = model.parameter_tensors();
    let mut adam = AdamState::new(&params);
    let total_steps = config.epochs * config.tasks_per_epoch;
    let mut history = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let started = Instant::now();
        let tape = Tape::new();
        let mut losses = Vec::with_capacity(config.taskset_size);
        for t in 0..config.taskset_size {
            let seed = episode_seed(
                config.seed,
                stream::TRAIN_EPISODE,
                (step * config.taskset_size + t) as u64,
            );
            let episode = sample_episode(source, shape.way, shape.shot, shape.queries_per_class, seed)?;
            losses.push(episode_loss(&tape, model, &episode));
        }
        let loss = reduce_mean(&tape, losses)
            .map_err(|e| diverged(step, &e))?;
        let loss_value = loss.item()?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at iteration {step}: loss {loss_value}"
            )));
        }
        backward(&loss, &tape)?;
        adam_step(&params, &mut adam, config.learning_rate)?;
        history.push(loss_value);
        on_iteration(IterationRecord {
            iteration: step,
            loss: loss_value,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(hook) = eval_hook.as_mut() {
            if (step + 1).is_multiple_of(config.eval_every) {
                hook(step + 1, model)?;
            }
        }
    }
    Ok(history)
}

fn reduce_mean(tape: &Tape, losses: Vec<Result<Tensor>>) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    let n = losses.len();
    for loss in losses {
        let loss = loss?;
        acc = Some(match acc {
            None => loss,
            Some(prev) => tape.add(&prev, &loss)?,
        });
    }
    let total = acc.expect("taskset_size >= 1");
    if n == 1 {
        Ok(total)
    } else {
        tape.scale(&total, 1.0 / n as f64)
    }
}

fn diverged(step: usize, e: &Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("training diverged at iteration {step}: {msg}")),
        _ => Error::Numeric(format!("training failed at iteration {step}: {e}")),
    }
}

/// Builds Algorithm 1's tuning task from a labeled support set: the
/// support set serves as both support and query.
pub fn tuning_task(support: &[Example], way: usize) -> Result<Episode> {
    if way == 0 || !support.len().is_multiple_of(way) {
        return Err(Error::Data(format!(
            "support of {} examples does not split into {way} classes",
            support.len()
        )));
    }
    let shot = support.len() / way;
    let episode = Episode {
        support: support.to_vec(),
        query: support.to_vec(),
        way,
        shot,
        queries_per_class: shot,
    };
    episode.validate()?;
    Ok(episode)
}

/// Per-query predictions: argmax labels (lowest index wins ties) plus the
/// full class distributions.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub distributions: Vec<Vec<f64>>,
    /// Tuning-task loss before and after finetuning; `None` when
    /// finetuning is disabled.
    pub tuning_loss: Option<(f64, f64)>,
}

/// Classifies unlabeled queries given a labeled support set.
///
/// With `finetune.steps > 0`, all tunable parameter groups are cloned and
/// the clone is trained for that many Adam steps on the tuning task before
/// classifying; the stored model is never mutated. Query labels, if the
/// caller has them, are never read.
pub fn predict(
    model: &Model,
    support: &[Example],
    queries: &[Example],
    finetune: &FinetuneConfig,
) -> Result<Prediction> {
    finetune.validate()?;
    if queries.is_empty() {
        return Err(Error::Data("predict needs at least one query".into()));
    }
    let way = model.hypernet_config.target.way();

    let tuned_model;
    let mut tuning_loss = None;
    let active: &Model = if finetune.steps > 0 {
        let clone = model.clone_detached()?;
        let task = tuning_task(support, way)?;
        let mut selected = Vec::new();
        if finetune.tune_encoder {
            selected.extend(clone.encoder.tensors().into_iter().map(|(_, t)| t));
        }
        if finetune.tune_hypernet {
            selected.extend(clone.hypernet.tensors().into_iter().map(|(_, t)| t));
        }
        if finetune.tune_kernel {
            selected.extend(clone.kernel.tensors().into_iter().map(|(_, t)| t));
        }
        let all = clone.parameter_tensors();
        let mut adam = AdamState::new(&selected);
        let mut initial = None;
        for _ in 0..finetune.steps {
            let tape = Tape::new();
            let loss = episode_loss(&tape, &clone, &task)?;
            initial.get_or_insert(loss.item()?);
            backward(&loss, &tape)?;
            if !selected.is_empty() {
                adam_step(&selected, &mut adam, finetune.learning_rate)?;
            }
            for p in &all {
                p.zero_grad();
            }
        }
        // loss after the final update, on the same tuning task
        let tape = Tape::new();
        let after = episode_loss(&tape, &clone, &task)?.item()?;
        tuning_loss = Some((initial.unwrap_or(after), after));
        tuned_model = clone;
        &tuned_model
    } else {
        model
    };

    let tape = Tape::new();
    let query_batch = batch_inputs(queries)?;
    let logits = forward_task(&tape, active, support, &query_batch)?;
    let probs = tape.softmax_rows(&logits)?;
    let data = probs.to_vec();
    let mut labels = Vec::with_capacity(queries.len());
    let mut distributions = Vec::with_capacity(queries.len());
    for r in 0..queries.len() {
        let row = &data[r * way..(r + 1) * way];
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        labels.push(best);
        distributions.push(row.to_vec());
    }
    Ok(Prediction {
        labels,
        distributions,
        tuning_loss,
    })
}

/// Samples `episode_count` held-out episodes, classifies each with
/// [`predict`], and aggregates query accuracies.
///
/// Episodes are split across at most `threads` workers; each worker
/// rebuilds the model from a snapshot, so results are identical for any
/// thread count.
pub fn evaluate(
    model: &Model,
    source: &EpisodeSource,
    shape: TaskShape,
    episode_count: usize,
    finetune: &FinetuneConfig,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if episode_count == 0 {
        return Err(Error::Config("episode_count must be at least 1".into()));
    }
    finetune.validate()?;
    model.validate_episode(shape.way, shape.shot)?;

    let workers = threads.clamp(1, episode_count);
    let accuracies = if workers == 1 {
        evaluate_range(model, source, shape, 0, episode_count, finetune, seed)?
    } else {
        // tensors are thread-local; workers rebuild the model from plain
        // config + snapshot data
        let snapshot = model.snapshot();
        let encoder_config = model.encoder_config.clone();
        let hypernet_config = model.hypernet_config.clone();
        let kernel_spec = model.kernel_spec.clone();
        let aggregation = model.aggregation;
        let chunk = episode_count.div_ceil(workers);
        let mut results: Vec<Result<Vec<f64>>> = Vec::new();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let start = w * chunk;
                let end = ((w + 1) * chunk).min(episode_count);
                if start >= end {
                    break;
                }
                let snapshot = &snapshot;
                let encoder_config = &encoder_config;
                let hypernet_config = &hypernet_config;
                let kernel_spec = &kernel_spec;
                handles.push(scope.spawn(move || -> Result<Vec<f64>> {
                    let local = Model::init(
                        encoder_config.clone(),
                        hypernet_config.clone(),
                        kernel_spec.clone(),
                        aggregation,
                        0,
                    )?;
                    local.restore(snapshot)?;
                    evaluate_range(&local, source, shape, start, end, finetune, seed)
                }));
            }
            for h in handles {
                results.push(h.join().unwrap_or_else(|_| {
                    Err(Error::Numeric("evaluation worker panicked".into()))
                }));
            }
        });
        let mut all = Vec::with_capacity(episode_count);
        for r in results {
            all.extend(r?);
        }
        all
    };
    Ok(EvalReport::from_accuracies(accuracies))
}

fn evaluate_range(
    model: &Model,
    source: &EpisodeSource,
    shape: TaskShape,
    start: usize,
    end: usize,
    finetune: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut accuracies = Vec::with_capacity(end - start);
    for i in start..end {
        let ep_seed = episode_seed(seed, stream::EVAL_EPISODE, i as u64);
        let episode = sample_episode(source, shape.way, shape.shot, shape.queries_per_class, ep_seed)?;
        let prediction = predict(model, &episode.support, &episode.query, finetune)?;
        let truth = episode.query_labels();
        let correct = prediction
            .labels
            .iter()
            .zip(&truth)
            .filter(|(a, b)| a == b)
            .count();
        accuracies.push(correct as f64 / truth.len() as f64);
    }
    Ok(accuracies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderKind};
    use crate::episodes::SyntheticTaskSource;
    use crate::hypernet::{HypernetConfig, TargetShape};
    use crate::kernel::{
        AggregationMode, KernelKind, KernelSpec, TransformKind, DEFAULT_COSINE_EPSILON,
    };

    fn synthetic(spread: f64) -> EpisodeSource {
        EpisodeSource::Synthetic(SyntheticTaskSource {
            input_dim: 8,
            class_pool_size: 12,
            cluster_spread: spread,
            center_scale: 10.0,
            seed: 13,
        })
    }

    fn tiny_model(way: usize, shot: usize, mlp_transform: bool, seed: u64) -> Model {
        let aggregation = AggregationMode::Averaged;
        Model::init(
            EncoderConfig {
                kind: EncoderKind::Mlp,
                input_shape: vec![8],
                mlp_hidden_sizes: vec![12],
                embedding_dim: 10,
            },
            HypernetConfig {
                neck_depth: 1,
                head_depth: 2,
                hidden_dim: 12,
                target: TargetShape {
                    input_dim: aggregation.row_count(way, shot),
                    layer_sizes: vec![way],
                    use_bias: true,
                },
            },
            KernelSpec {
                kind: KernelKind::Cosine,
                transform: if mlp_transform {
                    TransformKind::Mlp {
                        hidden_sizes: vec![],
                        out_dim: 10,
                    }
                } else {
                    TransformKind::Identity
                },
                cosine_epsilon: DEFAULT_COSINE_EPSILON,
            },
            aggregation,
            seed,
        )
        .unwrap()
    }

    fn shape5() -> TaskShape {
        TaskShape {
            way: 5,
            shot: 1,
            queries_per_class: 4,
        }
    }

    fn config(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            tasks_per_epoch: 1,
            taskset_size: 1,
            seed: 7,
            eval_every: 1000,
        }
    }

    #[test]
    fn uniform_model_loss_is_ln_way() {
        let model = tiny_model(5, 1, false, 0);
        model.hypernet.zero_head_output_layers().unwrap();
        let ep = sample_episode(&synthetic(0.5), 5, 1, 4, 3).unwrap();
        let tape = Tape::new();
        let loss = episode_loss(&tape, &model, &ep).unwrap();
        assert!((loss.item().unwrap() - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_matches_direct_formula() {
        let model = tiny_model(3, 2, false, 5);
        let ep = sample_episode(&synthetic(0.5), 3, 2, 4, 9).unwrap();
        let tape = Tape::new();
        let logits = crate::hypernet::episode_forward(&tape, &model, &ep).unwrap();
        let loss = tape
            .softmax_cross_entropy(&logits, &ep.query_labels())
            .unwrap()
            .item()
            .unwrap();
        assert!(loss >= 0.0);

        // direct cross-entropy evaluation outside the autodiff graph
        let data = logits.to_vec();
        let labels = ep.query_labels();
        let (rows, cols) = (labels.len(), 3);
        let mut expected = 0.0;
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expected += lse - row[labels[r]];
        }
        expected /= rows as f64;
        let full = episode_loss(&Tape::new(), &model, &ep).unwrap().item().unwrap();
        assert!((full - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let model = tiny_model(5, 1, true, 2);
        let before = model.snapshot();
        let history = train(&model, &synthetic(0.5), shape5(), &config(0.0, 5), |_| {}, None).unwrap();
        assert_eq!(history.len(), 5);
        let after = model.snapshot();
        for ((_, _, a), (_, _, b)) in before.iter().zip(&after) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_loss_history() {
        let run = || {
            let model = tiny_model(5, 1, true, 4);
            train(&model, &synthetic(0.5), shape5(), &config(1e-3, 8), |_| {}, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn plain_descent_hook_moves_exactly_minus_lr_grad() {
        let model = tiny_model(5, 1, false, 6);
        let ep = sample_episode(&synthetic(0.5), 5, 1, 4, 1).unwrap();
        let params = model.parameter_tensors();
        let before: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();

        let tape = Tape::new();
        let loss = episode_loss(&tape, &model, &ep).unwrap();
        backward(&loss, &tape).unwrap();
        let grads: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap()).collect();
        let lr = 0.05;
        crate::autodiff::sgd_step(&params, lr).unwrap();

        for ((p, b), g) in params.iter().zip(&before).zip(&grads) {
            let now = p.to_vec();
            for i in 0..now.len() {
                assert!((now[i] - (b[i] - lr * g[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_step_changes_every_parameter_group() {
        let model = tiny_model(5, 1, true, 8);
        let before = model.snapshot();
        train(&model, &synthetic(0.5), shape5(), &config(1e-3, 1), |_| {}, None).unwrap();
        let after = model.snapshot();
        let mut changed = std::collections::BTreeMap::new();
        for ((name, _, a), (_, _, b)) in before.iter().zip(&after) {
            let group = name.split('.').next().unwrap().to_string();
            let diff = a.iter().zip(b).any(|(x, y)| x != y);
            *changed.entry(group).or_insert(false) |= diff;
        }
        assert_eq!(changed.len(), 3);
        for (group, moved) in changed {
            assert!(moved, "group {group} did not move after a train step");
        }
    }

    #[test]
    fn gradients_reach_every_encoder_tensor_across_seeds() {
        for seed in 0..20 {
            let model = tiny_model(5, 1, true, seed);
            let ep = sample_episode(&synthetic(0.5), 5, 1, 2, seed).unwrap();
            let tape = Tape::new();
            let loss = episode_loss(&tape, &model, &ep).unwrap();
            backward(&loss, &tape).unwrap();
            for (name, t) in model.encoder.tensors() {
                let g = t.grad().expect("encoder grad populated");
                let norm: f64 = g.iter().map(|v| v * v).sum();
                assert!(norm > 0.0, "seed {seed}: {name} has zero gradient");
            }
        }
    }

    #[test]
    fn diverging_training_aborts_with_iteration_context() {
        let model = tiny_model(5, 1, false, 9);
        let err = train(
            &model,
            &synthetic(0.5),
            shape5(),
            &config(1e200, 10),
            |_| {},
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let msg = err.to_string();
        assert!(msg.contains("iteration"), "{msg}");
    }

    #[test]
    fn tuning_task_uses_support_as_query() {
        let ep = sample_episode(&synthetic(0.5), 5, 2, 4, 11).unwrap();
        let task = tuning_task(&ep.support, 5).unwrap();
        assert_eq!(task.query, ep.support);
        assert_eq!(task.support, ep.support);
        assert_eq!(task.queries_per_class, 2);
    }

    #[test]
    fn predict_without_tuning_matches_forward_argmax() {
        let model = tiny_model(5, 1, false, 10);
        let ep = sample_episode(&synthetic(0.5), 5, 1, 4, 13).unwrap();
        let pred = predict(&model, &ep.support, &ep.query, &FinetuneConfig::disabled()).unwrap();
        assert!(pred.tuning_loss.is_none());

        let tape = Tape::new();
        let logits = crate::hypernet::episode_forward(&tape, &model, &ep).unwrap().to_vec();
        for (r, &label) in pred.labels.iter().enumerate() {
            let row = &logits[r * 5..(r + 1) * 5];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            assert_eq!(label, best);
            let dist = &pred.distributions[r];
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_never_mutates_the_stored_model() {
        let model = tiny_model(5, 1, true, 12);
        let ep = sample_episode(&synthetic(0.5), 5, 1, 4, 17).unwrap();
        let before = model.snapshot();
        let finetune = FinetuneConfig {
            steps: 10,
            learning_rate: 1e-4,
            tune_encoder: true,
            tune_hypernet: true,
            tune_kernel: true,
        };
        let pred = predict(&model, &ep.support, &ep.query, &finetune).unwrap();
        let (before_loss, after_loss) = pred.tuning_loss.unwrap();
        assert!(before_loss.is_finite() && after_loss.is_finite());
        let after = model.snapshot();
        for ((_, _, a), (_, _, b)) in before.iter().zip(&after) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn finetuning_respects_group_switches() {
        let model = tiny_model(5, 1, true, 14);
        let ep = sample_episode(&synthetic(0.5), 5, 1, 4, 19).unwrap();
        // encoder frozen, hypernet tuned: check via a probe clone
        let clone = model.clone_detached().unwrap();
        let finetune = FinetuneConfig {
            steps: 3,
            learning_rate: 1e-3,
            tune_encoder: false,
            tune_hypernet: true,
            tune_kernel: false,
        };
        // predict tunes an internal clone; to observe the switches, tune a
        // clone here the same way and diff groups
        let task = tuning_task(&ep.support, 5).unwrap();
        let mut selected = Vec::new();
        selected.extend(clone.hypernet.tensors().into_iter().map(|(_, t)| t));
        let mut adam = AdamState::new(&selected);
        for _ in 0..finetune.steps {
            let tape = Tape::new();
            let loss = episode_loss(&tape, &clone, &task).unwrap();
            backward(&loss, &tape).unwrap();
            adam_step(&selected, &mut adam, finetune.learning_rate).unwrap();
            for p in clone.parameter_tensors() {
                p.zero_grad();
            }
        }
        for ((name, _, a), (_, _, b)) in model.snapshot().iter().zip(&clone.snapshot()) {
            let same = a.iter().zip(b).all(|(x, y)| x == y);
            if name.starts_with("hypernet.") {
                assert!(!same, "{name} should have moved");
            } else {
                assert!(same, "{name} should be frozen");
            }
        }
        let _ = predict(&model, &ep.support, &ep.query, &finetune).unwrap();
    }

    #[test]
    fn evaluate_perfect_predictor_on_degenerate_tasks() {
        // zero spread: every query equals its class's support example, so a
        // hand-built "copy the kernel vector" classifier is perfect
        let model = tiny_model(5, 1, false, 16);
        model.hypernet.zero_head_output_layers().unwrap();
        let weight_head = model.hypernet.heads[0].last().unwrap();
        let mut identity = vec![0.0; 25];
        for i in 0..5 {
            identity[i * 5 + i] = 10.0;
        }
        weight_head.bias.set_data(&identity).unwrap();

        let report = evaluate(
            &model,
            &synthetic(0.0),
            shape5(),
            10,
            &FinetuneConfig::disabled(),
            23,
            1,
        )
        .unwrap();
        assert_eq!(report.mean_accuracy, 1.0);
        assert_eq!(report.ci95_halfwidth, 0.0);
    }

    #[test]
    fn evaluate_uniform_predictor_hits_exactly_chance() {
        // zeroed heads -> uniform logits -> argmax ties broken to class 0,
        // which class balance makes exactly 1/way per episode
        let model = tiny_model(5, 1, false, 18);
        model.hypernet.zero_head_output_layers().unwrap();
        let report = evaluate(
            &model,
            &synthetic(0.5),
            shape5(),
            20,
            &FinetuneConfig::disabled(),
            29,
            2,
        )
        .unwrap();
        assert!((report.mean_accuracy - 0.2).abs() < 1e-12);
        assert!(report.ci95_halfwidth < 1e-12);
    }

    #[test]
    fn random_guesser_matches_the_binomial_oracle() {
        // a uniform random guesser over 200 sampled episodes, aggregated
        // the same way evaluate() aggregates, lands within 3 binomial
        // standard deviations of chance
        use rand::Rng;
        let mut rng = crate::rng::seed_rng(31, 77);
        let source = synthetic(0.5);
        let shape = shape5();
        let mut accuracies = Vec::new();
        for i in 0..200u64 {
            let ep = sample_episode(
                &source,
                shape.way,
                shape.shot,
                shape.queries_per_class,
                episode_seed(31, stream::EVAL_EPISODE, i),
            )
            .unwrap();
            let truth = ep.query_labels();
            let correct = truth
                .iter()
                .filter(|&&label| rng.gen_range(0..shape.way) == label)
                .count();
            accuracies.push(correct as f64 / truth.len() as f64);
        }
        let report = EvalReport::from_accuracies(accuracies);
        let queries = 200.0 * 20.0;
        let sigma = (0.2f64 * 0.8 / queries).sqrt();
        let dev = (report.mean_accuracy - 0.2).abs();
        assert!(
            dev <= 3.0 * sigma,
            "mean {} deviates from chance by {dev} (3 sigma = {})",
            report.mean_accuracy,
            3.0 * sigma
        );
    }

    #[test]
    fn single_episode_report_has_zero_ci() {
        let report = EvalReport::from_accuracies(vec![0.75]);
        assert_eq!(report.episode_count, 1);
        assert_eq!(report.mean_accuracy, 0.75);
        assert_eq!(report.ci95_halfwidth, 0.0);

        let two = EvalReport::from_accuracies(vec![0.5, 1.0]);
        let sd = ((0.25f64 * 0.25 + 0.25 * 0.25) / 1.0).sqrt();
        assert!((two.ci95_halfwidth - 1.96 * sd / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_identical_for_any_thread_count() {
        let model = tiny_model(5, 1, false, 22);
        let run = |threads| {
            evaluate(
                &model,
                &synthetic(0.5),
                shape5(),
                9,
                &FinetuneConfig::disabled(),
                37,
                threads,
            )
            .unwrap()
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.per_episode_accuracies, b.per_episode_accuracies);
    }

    #[test]
    fn averaged_mode_is_invariant_to_any_support_permutation() {
        use rand::seq::SliceRandom;
        let model = tiny_model(5, 2, false, 24);
        let ep = sample_episode(&synthetic(0.5), 5, 2, 3, 41).unwrap();
        let tape = Tape::new();
        let base = crate::hypernet::episode_forward(&tape, &model, &ep).unwrap().to_vec();
        let mut rng = crate::rng::seed_rng(5, 99);
        for _ in 0..10 {
            let mut shuffled = ep.clone();
            shuffled.support.shuffle(&mut rng);
            let tape = Tape::new();
            let logits = crate::hypernet::episode_forward(&tape, &model, &shuffled)
                .unwrap()
                .to_vec();
            for (a, b) in base.iter().zip(&logits) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
