//! N-way K-shot episode construction.
//!
//! An episode is one few-shot task: a labeled support set with exactly
//! `shot` examples per class and a query set with `queries_per_class` per
//! class, labels renumbered to `0..way` by a fresh random bijection each
//! time a task is sampled. Two sources are provided: a synthetic
//! Gaussian-cluster generator and a PNG image-folder loader.

mod folder;
mod synthetic;

pub use folder::{load_folder_split, FolderDataSource, LoadedFolder, Split};
pub use synthetic::SyntheticTaskSource;

use rand::seq::SliceRandom;

use crate::autodiff::Tensor;
use crate::rng::{derive_seed, seed_rng, stream};
use crate::{Error, Result};

/// One labeled example; `label` is the within-episode class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Flat row-major input values; vectors are `[d]`, images `[c, h, w]`
    /// scaled to [0, 1].
    pub input: Vec<f64>,
    pub input_shape: Vec<usize>,
    pub label: usize,
}

/// One N-way K-shot task.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
}

impl Episode {
    /// Checks the structural invariants: exact class balance in support and
    /// query, and labels covering `0..way`.
    pub fn validate(&self) -> Result<()> {
        if self.support.len() != self.way * self.shot {
            return Err(Error::Data(format!(
                "support has {} examples, expected {}",
                self.support.len(),
                self.way * self.shot
            )));
        }
        if self.query.len() != self.way * self.queries_per_class {
            return Err(Error::Data(format!(
                "query has {} examples, expected {}",
                self.query.len(),
                self.way * self.queries_per_class
            )));
        }
        for c in 0..self.way {
            let s = self.support.iter().filter(|e| e.label == c).count();
            if s != self.shot {
                return Err(Error::Data(format!(
                    "class {c} has {s} support examples, expected {}",
                    self.shot
                )));
            }
            let q = self.query.iter().filter(|e| e.label == c).count();
            if q != self.queries_per_class {
                return Err(Error::Data(format!(
                    "class {c} has {q} query examples, expected {}",
                    self.queries_per_class
                )));
            }
        }
        if let Some(e) = self.support.iter().chain(&self.query).find(|e| e.label >= self.way) {
            return Err(Error::Data(format!(
                "label {} out of range for {}-way episode",
                e.label, self.way
            )));
        }
        Ok(())
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|e| e.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|e| e.label).collect()
    }
}

/// Stacks examples into one `[B, ...]` input tensor.
pub fn batch_inputs(examples: &[Example]) -> Result<Tensor> {
    let Some(first) = examples.first() else {
        return Err(Error::Data("cannot batch zero examples".into()));
    };
    let item_shape = &first.input_shape;
    let mut data = Vec::with_capacity(examples.len() * first.input.len());
    for e in examples {
        if &e.input_shape != item_shape {
            return Err(Error::Shape(format!(
                "mixed input shapes in batch: {:?} vs {item_shape:?}",
                e.input_shape
            )));
        }
        data.extend_from_slice(&e.input);
    }
    let mut shape = vec![examples.len()];
    shape.extend_from_slice(item_shape);
    Tensor::from_vec(data, &shape)
}

/// A dataset episodes can be sampled from.
#[derive(Clone, Debug)]
pub enum EpisodeSource {
    Synthetic(SyntheticTaskSource),
    Folder(LoadedFolder),
}

impl EpisodeSource {
    pub fn class_count(&self) -> usize {
        match self {
            EpisodeSource::Synthetic(s) => s.class_pool_size,
            EpisodeSource::Folder(f) => f.classes.len(),
        }
    }

    fn examples_per_class(&self, class: usize) -> Option<usize> {
        match self {
            EpisodeSource::Synthetic(_) => None, // unbounded
            EpisodeSource::Folder(f) => Some(f.classes[class].1.len()),
        }
    }

    fn draw(&self, class: usize, count: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<(Vec<f64>, Vec<usize>)>> {
        match self {
            EpisodeSource::Synthetic(s) => (0..count)
                .map(|_| Ok((s.sample(class, rng)?, vec![s.input_dim])))
                .collect(),
            EpisodeSource::Folder(f) => {
                let (_, items) = &f.classes[class];
                let mut order: Vec<usize> = (0..items.len()).collect();
                order.shuffle(rng);
                Ok(order[..count]
                    .iter()
                    .map(|&i| (items[i].data.clone(), items[i].shape.clone()))
                    .collect())
            }
        }
    }
}

/// Samples one episode. Pure in `(source, way, shot, queries_per_class,
/// rng_seed)`: the same arguments always yield the same episode.
///
/// Class identities are drawn without replacement and their order becomes
/// the class-to-index bijection, so index assignment is freshly randomized
/// per episode. Support and query lists are shuffled.
pub fn sample_episode(
    source: &EpisodeSource,
    way: usize,
    shot: usize,
    queries_per_class: usize,
    rng_seed: u64,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries_per_class == 0 {
        return Err(Error::Data(format!(
            "way/shot/queries_per_class must be positive, got {way}/{shot}/{queries_per_class}"
        )));
    }
    let pool = source.class_count();
    if pool < way {
        return Err(Error::Data(format!(
            "source has {pool} classes, cannot sample a {way}-way episode"
        )));
    }
    let per_class = shot + queries_per_class;

    let mut rng = seed_rng(rng_seed, stream::EPISODE);
    let mut class_ids: Vec<usize> = (0..pool).collect();
    class_ids.shuffle(&mut rng);
    class_ids.truncate(way);

    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries_per_class);
    for (index, &class) in class_ids.iter().enumerate() {
        if let Some(avail) = source.examples_per_class(class) {
            if avail < per_class {
                return Err(Error::Data(format!(
                    "class {class} has {avail} examples, needs {per_class}"
                )));
            }
        }
        let drawn = source.draw(class, per_class, &mut rng)?;
        for (i, (input, input_shape)) in drawn.into_iter().enumerate() {
            let e = Example {
                input,
                input_shape,
                label: index,
            };
            if i < shot {
                support.push(e);
            } else {
                query.push(e);
            }
        }
    }
    support.shuffle(&mut rng);
    query.shuffle(&mut rng);

    let episode = Episode {
        support,
        query,
        way,
        shot,
        queries_per_class,
    };
    episode.validate()?;
    Ok(episode)
}

/// Seed for the i-th episode of a named stream (training or evaluation).
pub fn episode_seed(base: u64, stream_tag: u64, index: u64) -> u64 {
    derive_seed(derive_seed(base, stream_tag), index)
}
