//! The operational shell: run configs, checkpoint persistence, metrics
//! sinks, and the four command entry points (`train`, `eval`, `gradcheck`,
//! `gen-data`).

mod checkpoint;
mod commands;
mod config;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use commands::{
    cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, eval_threads, gradcheck_model, GroupReport,
    GRADCHECK_MAX_PARAMS, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use config::{
    DataSection, EncoderSection, HypernetSection, KernelSection, RunConfig, SourceKind,
    TrainingSection, CONFIG_VERSION,
};
pub use metrics::{write_eval_summary, EvalSummary, MetricsWriter};
