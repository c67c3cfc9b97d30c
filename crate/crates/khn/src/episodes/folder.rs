//! PNG image-folder datasets laid out as `root/<split>/<class_name>/*.png`,
//! with disjoint class lists per split.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderDataSource {
    pub root: PathBuf,
    /// Target square resolution; images are resized when they differ.
    pub image_size: usize,
    pub split: Split,
}

/// One decoded input: `[c, h, w]`, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A decoded split: class name -> decoded inputs, sorted by class name.
#[derive(Clone, Debug)]
pub struct LoadedFolder {
    pub classes: Vec<(String, Vec<ImageInput>)>,
    pub image_size: usize,
    pub channels: usize,
}

fn list_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn class_names(split_dir: &Path) -> Result<BTreeSet<String>> {
    Ok(list_dirs(split_dir)?
        .into_iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

/// Decodes and indexes one split of a folder dataset.
///
/// Images are decoded (PNG, grayscale or RGB), resized to the configured
/// square resolution, and scaled to [0, 1]. The channel count of the whole
/// split follows its first image (sorted order); remaining images are
/// converted to it. Any unreadable or undecodable file aborts the load.
pub fn load_folder_split(source: &FolderDataSource) -> Result<LoadedFolder> {
    let split_dir = source.root.join(source.split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::Data(format!(
            "split directory {} does not exist",
            split_dir.display()
        )));
    }

    // meta-split discipline: a class identity may appear in one split only
    let mut seen: Vec<(Split, BTreeSet<String>)> = Vec::new();
    for split in Split::ALL {
        let dir = source.root.join(split.dir_name());
        if dir.is_dir() {
            seen.push((split, class_names(&dir)?));
        }
    }
    for i in 0..seen.len() {
        for j in i + 1..seen.len() {
            if let Some(shared) = seen[i].1.intersection(&seen[j].1).next() {
                return Err(Error::Data(format!(
                    "class '{shared}' appears in both '{}' and '{}' splits",
                    seen[i].0, seen[j].0
                )));
            }
        }
    }

    let mut classes = Vec::new();
    let mut channels: Option<usize> = None;
    for class_dir in list_dirs(&split_dir)? {
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)
            .map_err(|e| Error::io(&class_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .map(|e| e.eq_ignore_ascii_case("png"))
                        .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} has no png files",
                class_dir.display()
            )));
        }
        let mut items = Vec::with_capacity(files.len());
        for file in files {
            items.push(decode_png(&file, source.image_size, &mut channels)?);
        }
        classes.push((name, items));
    }
    if classes.is_empty() {
        return Err(Error::Data(format!(
            "split directory {} has no class subdirectories",
            split_dir.display()
        )));
    }
    Ok(LoadedFolder {
        classes,
        image_size: source.image_size,
        channels: channels.unwrap_or(1),
    })
}

fn decode_png(path: &Path, size: usize, channels: &mut Option<usize>) -> Result<ImageInput> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    let want = *channels.get_or_insert(match img.color().channel_count() {
        1 | 2 => 1,
        _ => 3,
    });
    let img = if (img.width() as usize, img.height() as usize) == (size, size) {
        img
    } else {
        img.resize_exact(size as u32, size as u32, FilterType::Triangle)
    };
    let data = match want {
        1 => img.to_luma8().into_raw(),
        _ => img.to_rgb8().into_raw(),
    };
    // interleaved u8 rows -> planar [c, h, w] in [0, 1]
    let mut planar = vec![0.0f64; want * size * size];
    for y in 0..size {
        for x in 0..size {
            for c in 0..want {
                planar[(c * size + y) * size + x] =
                    data[(y * size + x) * want + c] as f64 / 255.0;
            }
        }
    }
    Ok(ImageInput {
        shape: vec![want, size, size],
        data: planar,
    })
}
