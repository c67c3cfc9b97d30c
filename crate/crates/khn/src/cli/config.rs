//! Run configuration: one strict TOML document covering every module.
//!
//! Unknown keys are errors, every section mirrors a module config, and
//! `parse(serialize(c)) == c` holds for all valid configs. The resolved
//! config embeds into checkpoints so evaluation never depends on an
//! external file drifting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderKind};
use crate::episodes::{
    load_folder_split, EpisodeSource, FolderDataSource, SyntheticTaskSource,
};
use crate::hypernet::{HypernetConfig, Model, TargetShape};
use crate::kernel::{AggregationMode, KernelSpec, TransformKind};
use crate::rng::{derive_seed, stream};
use crate::training::{FinetuneConfig, TaskShape, TrainConfig};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed: parameter init, episode sampling, and evaluation all
    /// derive their streams from it.
    pub seed: u64,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub kernel: KernelSection,
    pub hypernet: HypernetSection,
    pub training: TrainingSection,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub source: SourceKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folder: Option<FolderDataSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    #[serde(default)]
    pub mlp_hidden_sizes: Vec<usize>,
    pub embedding_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub kind: crate::kernel::KernelKind,
    #[serde(default = "default_cosine_epsilon")]
    pub cosine_epsilon: f64,
    pub aggregation: AggregationMode,
    pub transform: TransformKind,
}

fn default_cosine_epsilon() -> f64 {
    crate::kernel::DEFAULT_COSINE_EPSILON
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetSection {
    pub neck_depth: usize,
    pub head_depth: usize,
    pub hidden_dim: usize,
    /// Target network hidden widths; the final way-sized layer is implied.
    #[serde(default)]
    pub target_hidden_sizes: Vec<usize>,
    #[serde(default = "default_true")]
    pub use_bias: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_one")]
    pub tasks_per_epoch: usize,
    #[serde(default = "default_one")]
    pub taskset_size: usize,
    pub eval_every: usize,
    /// Episodes per during-training evaluation.
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
}

fn default_one() -> usize {
    1
}

fn default_eval_episodes() -> usize {
    20
}

impl RunConfig {
    /// Parses a strict TOML document; unknown keys are config errors that
    /// name the offending key.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let d = &self.data;
        if d.way == 0 || d.shot == 0 || d.queries_per_class == 0 {
            return Err(Error::Config(
                "data.way, data.shot, and data.queries_per_class must be positive".into(),
            ));
        }
        match d.source {
            SourceKind::Synthetic => {
                let Some(synthetic) = &d.synthetic else {
                    return Err(Error::Config(
                        "data.source = synthetic requires a [data.synthetic] section".into(),
                    ));
                };
                synthetic.validate()?;
                if synthetic.class_pool_size < d.way {
                    return Err(Error::Config(format!(
                        "class_pool_size {} is smaller than way {}",
                        synthetic.class_pool_size, d.way
                    )));
                }
                if self.encoder.kind == EncoderKind::Conv4 {
                    return Err(Error::Config(
                        "conv4 encoder needs image data; synthetic sources produce vectors".into(),
                    ));
                }
            }
            SourceKind::Folder => {
                if d.folder.is_none() {
                    return Err(Error::Config(
                        "data.source = folder requires a [data.folder] section".into(),
                    ));
                }
            }
        }
        if self.encoder.embedding_dim == 0 {
            return Err(Error::Config("encoder.embedding_dim must be positive".into()));
        }
        self.train_config().validate()?;
        if self.training.eval_episodes == 0 {
            return Err(Error::Config("training.eval_episodes must be at least 1".into()));
        }
        self.finetune.validate()?;
        self.kernel_spec().validate()?;
        Ok(())
    }

    pub fn task_shape(&self) -> TaskShape {
        TaskShape {
            way: self.data.way,
            shot: self.data.shot,
            queries_per_class: self.data.queries_per_class,
        }
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec {
            kind: self.kernel.kind,
            transform: self.kernel.transform.clone(),
            cosine_epsilon: self.kernel.cosine_epsilon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.training.learning_rate,
            epochs: self.training.epochs,
            tasks_per_epoch: self.training.tasks_per_epoch,
            taskset_size: self.training.taskset_size,
            seed: self.seed,
            eval_every: self.training.eval_every,
        }
    }

    pub fn hypernet_config(&self) -> HypernetConfig {
        let mut layer_sizes = self.hypernet.target_hidden_sizes.clone();
        layer_sizes.push(self.data.way);
        HypernetConfig {
            neck_depth: self.hypernet.neck_depth,
            head_depth: self.hypernet.head_depth,
            hidden_dim: self.hypernet.hidden_dim,
            target: TargetShape {
                input_dim: self
                    .kernel
                    .aggregation
                    .row_count(self.data.way, self.data.shot),
                layer_sizes,
                use_bias: self.hypernet.use_bias,
            },
        }
    }

    /// Loads/constructs the training data source.
    pub fn training_source(&self) -> Result<EpisodeSource> {
        match self.data.source {
            SourceKind::Synthetic => Ok(EpisodeSource::Synthetic(
                self.data.synthetic.clone().expect("validated"),
            )),
            SourceKind::Folder => {
                let folder = self.data.folder.clone().expect("validated");
                Ok(EpisodeSource::Folder(load_folder_split(&folder)?))
            }
        }
    }

    /// Held-out evaluation source: a seed-offset sibling for synthetic
    /// data (fresh class centers, hence novel classes), or the val/test
    /// split for folder data.
    pub fn eval_source(&self) -> Result<EpisodeSource> {
        match self.data.source {
            SourceKind::Synthetic => {
                let mut spec = self.data.synthetic.clone().expect("validated");
                spec.seed = derive_seed(spec.seed, stream::EVAL_SOURCE);
                Ok(EpisodeSource::Synthetic(spec))
            }
            SourceKind::Folder => {
                let base = self.data.folder.clone().expect("validated");
                for split in [crate::episodes::Split::Val, crate::episodes::Split::Test] {
                    let candidate = FolderDataSource {
                        split,
                        ..base.clone()
                    };
                    if candidate.root.join(split.dir_name()).is_dir() {
                        return Ok(EpisodeSource::Folder(load_folder_split(&candidate)?));
                    }
                }
                Err(Error::Data(format!(
                    "no val/ or test/ split under {}",
                    base.root.display()
                )))
            }
        }
    }

    /// Encoder config resolved against the actual data shape.
    pub fn encoder_config(&self, source: &EpisodeSource) -> Result<EncoderConfig> {
        let input_shape = match source {
            EpisodeSource::Synthetic(s) => vec![s.input_dim],
            EpisodeSource::Folder(f) => vec![f.channels, f.image_size, f.image_size],
        };
        let config = EncoderConfig {
            kind: self.encoder.kind,
            input_shape,
            mlp_hidden_sizes: self.encoder.mlp_hidden_sizes.clone(),
            embedding_dim: self.encoder.embedding_dim,
        };
        config.validate()?;
        Ok(config)
    }

    /// Initializes a model for the given source under this config's seed.
    pub fn build_model(&self, source: &EpisodeSource) -> Result<Model> {
        Model::init(
            self.encoder_config(source)?,
            self.hypernet_config(),
            self.kernel_spec(),
            self.kernel.aggregation,
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::test_support::desk_config_toml;

    #[test]
    fn parses_and_round_trips() {
        let config = RunConfig::parse(&desk_config_toml()).unwrap();
        let serialized = config.to_toml().unwrap();
        let reparsed = RunConfig::parse(&serialized).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = desk_config_toml().replace("epochs = 100", "epochs = 100\nbogus_knob = 3");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{err}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = desk_config_toml().replace("version = 1", "version = 2");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn missing_synthetic_section_is_caught() {
        let text = desk_config_toml().replace(
            "[data.synthetic]\ninput_dim = 16\nclass_pool_size = 20\ncluster_spread = 1.0\ncenter_scale = 10.0\nseed = 7\n",
            "",
        );
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn pool_smaller_than_way_is_rejected() {
        let text = desk_config_toml().replace("class_pool_size = 20", "class_pool_size = 3");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn hypernet_geometry_follows_aggregation() {
        let config = RunConfig::parse(&desk_config_toml()).unwrap();
        let h = config.hypernet_config();
        assert_eq!(h.target.input_dim, 5); // 5-way 1-shot averaged
        assert_eq!(h.target.layer_sizes, vec![5]);
        assert_eq!(h.kernel_flat_dim(), 25);

        let fine = desk_config_toml()
            .replace("shot = 1", "shot = 5")
            .replace("aggregation = \"averaged\"", "aggregation = \"fine_grained\"");
        let config = RunConfig::parse(&fine).unwrap();
        assert_eq!(config.hypernet_config().target.input_dim, 25);
        assert_eq!(config.hypernet_config().kernel_flat_dim(), 625);
    }

    #[test]
    fn eval_source_differs_from_training_source() {
        let config = RunConfig::parse(&desk_config_toml()).unwrap();
        let train = config.training_source().unwrap();
        let eval = config.eval_source().unwrap();
        let (EpisodeSource::Synthetic(a), EpisodeSource::Synthetic(b)) = (&train, &eval) else {
            panic!("expected synthetic sources");
        };
        assert_ne!(a.seed, b.seed);
        assert_ne!(a.center(0).unwrap(), b.center(0).unwrap());
    }
}
