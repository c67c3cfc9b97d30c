//! Command entry points behind the `khn` binary: train, eval, gradcheck,
//! and gen-data. Each returns a `Result`; the binary maps error kinds to
//! exit codes (0 success, 2 config, 3 data, 4 numeric, 5 incompatible
//! checkpoint).

use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{RunConfig, SourceKind};
use super::metrics::{write_eval_summary, EvalSummary, MetricsWriter};
use crate::autodiff::{
    backward, finite_difference_gradient, max_relative_error, Tape, REL_ERROR_FLOOR,
};
use crate::episodes::{episode_seed, sample_episode, Episode};
use crate::hypernet::Model;
use crate::rng::stream;
use crate::training::{episode_loss, evaluate, train, EvalReport, FinetuneConfig};
use crate::{Error, Result};

/// Refusal threshold for gradcheck: central differences cost two forward
/// passes per parameter, so full-scale configs are rejected outright.
pub const GRADCHECK_MAX_PARAMS: usize = 50_000;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Evaluation worker count: `KHN_THREADS` when set, available parallelism
/// otherwise.
pub fn eval_threads() -> Result<usize> {
    match std::env::var("KHN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "KHN_THREADS must be a positive integer, got '{v}'"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
        Err(e) => Err(Error::Config(format!("cannot read KHN_THREADS: {e}"))),
    }
}

/// Runs training per the config and writes checkpoint, metrics, and the
/// resolved config into `out_dir`. Returns the checkpoint path.
pub fn cmd_train(config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<PathBuf> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let source = config.training_source()?;
    let eval_source = config.eval_source()?;
    let model = config.build_model(&source)?;
    let shape = config.task_shape();
    let threads = eval_threads()?;

    // both the iteration callback and the eval hook write to the metrics
    // files; they alternate, never overlapping
    let metrics = std::cell::RefCell::new(MetricsWriter::create(out_dir)?);
    let metrics_err = std::cell::RefCell::new(None::<Error>);
    let finetune_off = FinetuneConfig::disabled();
    let eval_episodes = config.training.eval_episodes;
    let eval_seed = config.seed;
    let mut eval_hook = |iteration: usize, m: &Model| -> Result<()> {
        let report = evaluate(m, &eval_source, shape, eval_episodes, &finetune_off, eval_seed, threads)?;
        println!(
            "iter {iteration}: eval accuracy {:.4} \u{00b1} {:.4} ({} episodes)",
            report.mean_accuracy, report.ci95_halfwidth, report.episode_count
        );
        metrics.borrow_mut().record_eval(iteration, &report)
    };
    let history = train(
        &model,
        &source,
        shape,
        &config.train_config(),
        |rec| {
            let mut err = metrics_err.borrow_mut();
            if err.is_none() {
                if let Err(e) = metrics.borrow_mut().record_iteration(rec) {
                    *err = Some(e);
                }
            }
        },
        Some(&mut eval_hook),
    )?;
    if let Some(e) = metrics_err.into_inner() {
        return Err(e);
    }
    let metrics = metrics.into_inner();

    let checkpoint_path = out_dir.join("checkpoint.khn");
    save_checkpoint(&checkpoint_path, &config, &model.snapshot())?;
    let resolved = out_dir.join("config.toml");
    std::fs::write(&resolved, config.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
    metrics.finish()?;

    println!(
        "trained {} steps, final loss {:.6}, checkpoint at {}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        checkpoint_path.display()
    );
    Ok(checkpoint_path)
}

/// Evaluates a checkpoint on held-out episodes and writes/prints the
/// report as `mean ± ci`.
pub fn cmd_eval(
    checkpoint_path: &Path,
    episodes: usize,
    finetune: bool,
    seed_override: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let (config, snapshot) = load_checkpoint(checkpoint_path)?;
    let source = config.eval_source()?;
    let model = config.build_model(&source)?;
    model.restore(&snapshot)?;

    let finetune_config = if finetune {
        if config.finetune.steps == 0 {
            return Err(Error::Config(
                "--finetune on requested but the checkpoint's finetune.steps is 0".into(),
            ));
        }
        config.finetune.clone()
    } else {
        FinetuneConfig::disabled()
    };
    let seed = seed_override.unwrap_or(config.seed);
    let report = evaluate(
        &model,
        &source,
        config.task_shape(),
        episodes,
        &finetune_config,
        seed,
        eval_threads()?,
    )?;

    let mode = if finetune { "on" } else { "off" };
    println!(
        "accuracy: {:.4} \u{00b1} {:.4} ({} episodes, finetune {mode})",
        report.mean_accuracy, report.ci95_halfwidth, report.episode_count
    );
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| checkpoint_path.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_eval_summary(
        &dir.join(format!("eval_finetune_{mode}.json")),
        &EvalSummary {
            episode_count: report.episode_count,
            mean_accuracy: report.mean_accuracy,
            ci95_halfwidth: report.ci95_halfwidth,
            finetune,
            seed,
            per_episode_accuracies: report.per_episode_accuracies.clone(),
        },
    )?;
    Ok(report)
}

/// One parameter group's gradient-check outcome; `max_rel_error` is `None`
/// for a group with no parameters (identity kernel transform).
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: String,
    pub parameter_count: usize,
    pub max_rel_error: Option<f64>,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.map(|e| e < GRADCHECK_TOLERANCE).unwrap_or(true)
    }
}

/// (analytic, finite-difference) gradient buffers for one tensor.
type GradPair = (Vec<f64>, Vec<f64>);

pub(crate) fn compare_groups(groups: Vec<(String, Vec<GradPair>)>) -> Vec<GroupReport> {
    groups
        .into_iter()
        .map(|(group, pairs)| {
            let parameter_count = pairs.iter().map(|(a, _)| a.len()).sum();
            let max_rel_error = if pairs.is_empty() {
                None
            } else {
                Some(
                    pairs
                        .iter()
                        .map(|(a, fd)| max_relative_error(a, fd, REL_ERROR_FLOOR))
                        .fold(0.0, f64::max),
                )
            };
            GroupReport {
                group,
                parameter_count,
                max_rel_error,
            }
        })
        .collect()
}

/// Compares tape gradients against the finite-difference oracle for every
/// parameter group of the model, on one episode's loss.
pub fn gradcheck_model(model: &Model, episode: &Episode, h: f64) -> Result<Vec<GroupReport>> {
    // one analytic backward pass for all groups
    let tape = Tape::new();
    let loss = episode_loss(&tape, model, episode)?;
    backward(&loss, &tape)?;

    let mut groups = Vec::new();
    for (name, tensors) in model.parameter_groups() {
        let mut pairs = Vec::with_capacity(tensors.len());
        for t in &tensors {
            let analytic = t
                .grad()
                .ok_or_else(|| Error::State(format!("{name} tensor missing gradient")))?;
            let base = t.to_vec();
            let fd = finite_difference_gradient(
                |probe| {
                    t.set_data(&probe.to_vec())?;
                    let tape = Tape::new();
                    episode_loss(&tape, model, episode)?.item()
                },
                t,
                h,
            );
            t.set_data(&base)?; // probes leave the tensor at its last value
            pairs.push((analytic, fd?.to_vec()));
        }
        groups.push((name.to_string(), pairs));
    }
    for p in model.parameter_tensors() {
        p.zero_grad();
    }
    Ok(compare_groups(groups))
}

/// Runs the finite-difference oracle end-to-end on the configured model.
/// Succeeds iff every parameter group's max relative error is below
/// 1e-4; refuses models above the size threshold.
pub fn cmd_gradcheck(config_path: &Path) -> Result<Vec<GroupReport>> {
    let config = RunConfig::load(config_path)?;
    let source = config.training_source()?;
    let model = config.build_model(&source)?;
    let count = model.parameter_count();
    if count > GRADCHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "model has {count} parameters; gradcheck refuses models above {GRADCHECK_MAX_PARAMS}"
        )));
    }

    // a small episode suffices: gradients are checked, not statistics
    let shape = config.task_shape();
    let episode = sample_episode(
        &source,
        shape.way,
        shape.shot,
        shape.queries_per_class.min(2),
        episode_seed(config.seed, stream::TRAIN_EPISODE, 0),
    )?;
    let reports = gradcheck_model(&model, &episode, GRADCHECK_STEP)?;

    for r in &reports {
        match r.max_rel_error {
            Some(err) => println!(
                "gradcheck {}: {} parameters, max relative error {err:.3e} -- {}",
                r.group,
                r.parameter_count,
                if r.passed() { "ok" } else { "FAIL" }
            ),
            None => println!("gradcheck {}: skipped (no parameters)", r.group),
        }
    }
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.group.as_str())
        .collect();
    if failing.is_empty() {
        Ok(reports)
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for group(s): {}",
            failing.join(", ")
        )))
    }
}

/// Materializes the synthetic dataset description so runs are reproducible
/// from disk. Returns the written path.
pub fn cmd_gen_data(config_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let config = RunConfig::load(config_path)?;
    if config.data.source != SourceKind::Synthetic {
        return Err(Error::Config(
            "gen-data applies to synthetic sources only".into(),
        ));
    }
    let spec = config.data.synthetic.as_ref().expect("validated");
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("dataset.toml");
    let text = toml::to_string(spec)
        .map_err(|e| Error::Config(format!("cannot serialize dataset spec: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("dataset description written to {}", path.display());
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::test_support::{desk_config_toml, tiny_config_toml};
    use crate::episodes::SyntheticTaskSource;

    #[test]
    fn comparator_flags_exactly_the_corrupted_group() {
        let fd = vec![0.5, -0.25, 1.0];
        let good = fd.clone();
        let mut corrupted = fd.clone();
        for v in &mut corrupted {
            *v *= 2.0; // a broken backward rule: off by a factor
        }
        let reports = compare_groups(vec![
            ("encoder".into(), vec![(good.clone(), fd.clone())]),
            ("hypernet".into(), vec![(corrupted, fd.clone())]),
            ("kernel".into(), vec![]),
        ]);
        assert!(reports[0].passed());
        assert!(!reports[1].passed());
        assert_eq!(reports[1].group, "hypernet");
        assert!(reports[2].passed());
        assert!(reports[2].max_rel_error.is_none(), "empty group is skipped");
    }

    #[test]
    fn gradcheck_skips_identity_transform_group() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.toml");
        std::fs::write(&path, tiny_config_toml()).unwrap();
        let reports = cmd_gradcheck(&path).unwrap();
        let kernel = reports.iter().find(|r| r.group == "kernel").unwrap();
        assert_eq!(kernel.parameter_count, 0);
        assert!(kernel.max_rel_error.is_none());
    }

    #[test]
    fn gradcheck_refuses_oversize_models() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.toml");
        // hidden_dim 4096 puts the hypernet way over the refusal threshold
        let text = desk_config_toml().replace("hidden_dim = 64", "hidden_dim = 4096");
        std::fs::write(&path, text).unwrap();
        let err = cmd_gradcheck(&path).unwrap_err();
        assert!(err.to_string().contains(&GRADCHECK_MAX_PARAMS.to_string()), "{err}");
    }

    #[test]
    fn gen_data_round_trips_and_rejects_zero_pool() {
        let tmp = tempfile::tempdir().unwrap();
        let config_path = tmp.path().join("run.toml");
        std::fs::write(&config_path, tiny_config_toml()).unwrap();
        let out = tmp.path().join("out");
        let written = cmd_gen_data(&config_path, &out).unwrap();
        let spec: SyntheticTaskSource =
            toml::from_str(&std::fs::read_to_string(&written).unwrap()).unwrap();
        let config = RunConfig::load(&config_path).unwrap();
        assert_eq!(&spec, config.data.synthetic.as_ref().unwrap());

        // identical seeds -> identical files
        let out2 = tmp.path().join("out2");
        let written2 = cmd_gen_data(&config_path, &out2).unwrap();
        assert_eq!(
            std::fs::read(&written).unwrap(),
            std::fs::read(&written2).unwrap()
        );

        let bad = tiny_config_toml().replace("class_pool_size = 12", "class_pool_size = 0");
        std::fs::write(&config_path, bad).unwrap();
        assert!(matches!(
            cmd_gen_data(&config_path, &out),
            Err(Error::Config(_))
        ));
    }
}
