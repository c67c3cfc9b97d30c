//! Metrics sinks: append-only tab-delimited rows for training iterations
//! and during-training evaluations, plus one JSON summary document per
//! standalone evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::training::{EvalReport, IterationRecord};
use crate::{Error, Result};

pub struct MetricsWriter {
    path: PathBuf,
    iterations: BufWriter<File>,
    evals: Option<(PathBuf, BufWriter<File>)>,
    last_iteration: Option<usize>,
}

impl MetricsWriter {
    /// Creates `metrics.tsv` (and lazily `evals.tsv`) in `dir`.
    pub fn create(dir: &Path) -> Result<MetricsWriter> {
        let path = dir.join("metrics.tsv");
        let mut iterations =
            BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        writeln!(iterations, "iteration\tloss\twall_ms").map_err(|e| Error::io(&path, e))?;
        Ok(MetricsWriter {
            path,
            iterations,
            evals: None,
            last_iteration: None,
        })
    }

    pub fn record_iteration(&mut self, rec: IterationRecord) -> Result<()> {
        if let Some(last) = self.last_iteration {
            if rec.iteration <= last {
                return Err(Error::State(format!(
                    "iteration {} recorded after {last}; iterations must strictly increase",
                    rec.iteration
                )));
            }
        }
        self.last_iteration = Some(rec.iteration);
        writeln!(
            self.iterations,
            "{}\t{:.17e}\t{:.3}",
            rec.iteration, rec.loss, rec.wall_ms
        )
        .map_err(|e| Error::io(&self.path, e))
    }

    pub fn record_eval(&mut self, iteration: usize, report: &EvalReport) -> Result<()> {
        if self.evals.is_none() {
            let path = self.path.with_file_name("evals.tsv");
            let mut file = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(file, "iteration\tepisode_count\tmean_accuracy\tci95_halfwidth")
                .map_err(|e| Error::io(&path, e))?;
            self.evals = Some((path, file));
        }
        let (path, file) = self.evals.as_mut().expect("just created");
        writeln!(
            file,
            "{iteration}\t{}\t{:.6}\t{:.6}",
            report.episode_count, report.mean_accuracy, report.ci95_halfwidth
        )
        .map_err(|e| Error::io(&*path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.iterations.flush().map_err(|e| Error::io(&self.path, e))?;
        if let Some((path, mut file)) = self.evals.take() {
            file.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// The machine-readable evaluation summary written next to its printout.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episode_count: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub finetune: bool,
    pub seed: u64,
    pub per_episode_accuracies: Vec<f64>,
}

pub fn write_eval_summary(path: &Path, summary: &EvalSummary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Config(format!("cannot serialize eval summary: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_rows_must_strictly_increase() {
        let tmp = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(tmp.path()).unwrap();
        let rec = |i| IterationRecord {
            iteration: i,
            loss: 1.0,
            wall_ms: 0.1,
        };
        w.record_iteration(rec(0)).unwrap();
        w.record_iteration(rec(1)).unwrap();
        assert!(w.record_iteration(rec(1)).is_err());
        w.finish().unwrap();
        let text = std::fs::read_to_string(tmp.path().join("metrics.tsv")).unwrap();
        assert_eq!(text.lines().count(), 3); // header + two rows
    }

    #[test]
    fn eval_summary_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("eval.json");
        let summary = EvalSummary {
            episode_count: 3,
            mean_accuracy: 0.5,
            ci95_halfwidth: 0.1,
            finetune: true,
            seed: 9,
            per_episode_accuracies: vec![0.4, 0.5, 0.6],
        };
        write_eval_summary(&path, &summary).unwrap();
        let loaded: EvalSummary =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(loaded.mean_accuracy, 0.5);
        assert_eq!(loaded.per_episode_accuracies.len(), 3);
    }
}
