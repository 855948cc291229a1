//! Samples on disk: netpbm files, manifests, mini-batches and a synthetic
//! shape dataset.

mod netpbm;
mod synth;

pub use netpbm::{read_pgm, read_ppm, write_atomic, write_pgm, write_ppm};
pub use synth::{synth_dataset, synth_palette, synth_sample, SynthConfig, BACKGROUND_RGB};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::LabelMap;
use crate::image::RgbImage;

/// An image with its ground-truth labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: RgbImage, labels: LabelMap) -> Result<Self> {
        if image.width() != labels.width() || image.height() != labels.height() {
            return Err(Error::shape(
                format!("{}x{} labels", image.height(), image.width()),
                format!("{}x{}", labels.height(), labels.width()),
            ));
        }
        Ok(Sample { image, labels })
    }

    /// Reads and pairs an image and its label map.
    pub fn load(image: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let img = read_ppm(image.as_ref())?;
        let lab = read_pgm(labels.as_ref())?;
        Sample::new(img, lab).map_err(|e| {
            Error::Invalid(format!(
                "{} and {}: {e}",
                image.as_ref().display(),
                labels.as_ref().display()
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Invalid(format!("unknown split {s:?}, expected train or val"))),
        }
    }
}

/// Ordered (image, label) path pairs, stored relative to the manifest's
/// directory as one tab-separated pair per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    root: PathBuf,
    entries: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    /// `entries` are relative to `root`.
    pub fn new(split: Split, root: impl Into<PathBuf>, entries: Vec<(PathBuf, PathBuf)>) -> Self {
        Manifest {
            split,
            root: root.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[(PathBuf, PathBuf)] {
        &self.entries
    }

    /// Absolute (or root-joined) paths of entry `k`.
    pub fn paths(&self, k: usize) -> (PathBuf, PathBuf) {
        let (a, b) = &self.entries[k];
        (self.root.join(a), self.root.join(b))
    }

    /// Parses a manifest; every referenced file must exist.
    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(img), Some(lab), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Invalid(format!(
                    "{} line {}: expected two tab-separated paths",
                    path.display(),
                    n + 1
                )));
            };
            for p in [img, lab] {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(Error::Invalid(format!(
                        "{} line {}: {} is not a readable file",
                        path.display(),
                        n + 1,
                        full.display()
                    )));
                }
            }
            entries.push((PathBuf::from(img), PathBuf::from(lab)));
        }
        Ok(Manifest { split, root, entries })
    }

    /// Writes the manifest; its location must be `root`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::new();
        for (a, b) in &self.entries {
            text.push_str(&format!("{}\t{}\n", a.display(), b.display()));
        }
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load_sample(&self, k: usize) -> Result<Sample> {
        let (a, b) = self.paths(k);
        Sample::load(a, b)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|k| self.load_sample(k)).collect()
    }
}

/// Entry indices grouped into batches after a shuffle keyed by
/// `(seed, epoch)`; the last batch may be short.
pub fn make_batches(
    manifest: &Manifest,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    shuffled_batches(manifest.len(), batch_size, seed, epoch)
}

/// `make_batches` over `count` items.
pub fn shuffled_batches(count: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    if count == 0 {
        return Err(Error::Invalid("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
