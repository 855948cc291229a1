//! Random rectangles and ellipses over a flat background, with Gaussian
//! pixel noise and a void ring along every shape boundary.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_pgm, write_ppm, Manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::fields::{LabelMap, VOID_LABEL};
use crate::image::RgbImage;

pub const BACKGROUND_RGB: [u8; 3] = [100, 100, 100];
/// Distance of every foreground color from the background gray.
const HUE_RADIUS: f64 = 55.0;
/// Minimum share of dataset pixels each label must reach.
const MIN_LABEL_SHARE: f64 = 0.01;
const MAX_ATTEMPTS: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    /// Width and height in pixels.
    pub size: usize,
    pub num_labels: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_labels < 2 || self.num_labels > VOID_LABEL as usize {
            return Err(Error::Invalid(format!(
                "synthetic data needs between 2 and {} labels, got {}",
                VOID_LABEL, self.num_labels
            )));
        }
        if self.size < 4 {
            return Err(Error::Invalid(format!("image size {} is below 4 pixels", self.size)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Invalid(format!("noise sd {} must be finite and >= 0", self.noise_sd)));
        }
        if self.count == 0 {
            return Err(Error::Invalid("sample count must be at least 1".into()));
        }
        if 3 * self.count < self.num_labels - 1 {
            return Err(Error::Invalid(format!(
                "{} samples of at most 3 shapes cannot show all {} foreground labels",
                self.count,
                self.num_labels - 1
            )));
        }
        Ok(())
    }
}

/// Base color per label: gray background, then hues evenly spaced on a
/// circle around it in the plane orthogonal to the gray axis.
pub fn synth_palette(num_labels: usize) -> Vec<[u8; 3]> {
    let e1 = [2.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt()];
    let e2 = [0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
    let mut out = vec![BACKGROUND_RGB];
    let hues = num_labels.saturating_sub(1);
    for l in 0..hues {
        let theta = std::f64::consts::TAU * l as f64 / hues as f64;
        let (s, c) = theta.sin_cos();
        let rgb: [u8; 3] = std::array::from_fn(|k| {
            let v = BACKGROUND_RGB[k] as f64 + HUE_RADIUS * (c * e1[k] + s * e2[k]);
            v.round().clamp(0.0, 255.0) as u8
        });
        out.push(rgb);
    }
    out
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Shape {
        let n = size as f64;
        let (lo, hi) = (n / 8.0, n / 2.5);
        let (cx, cy) = (rng.gen_range(0.15 * n..0.85 * n), rng.gen_range(0.15 * n..0.85 * n));
        let (a, b) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        if rng.gen_bool(0.5) {
            Shape::Rect { x0: cx - a, y0: cy - b, x1: cx + a, y1: cy + b }
        } else {
            Shape::Ellipse { cx, cy, rx: a, ry: b }
        }
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn sample_rng(seed: u64, attempt: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index as u64);
    rng
}

fn generate(cfg: &SynthConfig, attempt: u64, index: usize) -> Sample {
    let mut rng = sample_rng(cfg.seed, attempt, index);
    let n = cfg.size;
    let palette = synth_palette(cfg.num_labels);
    let shapes: Vec<(Shape, u8)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let s = Shape::random(&mut rng, n);
            (s, rng.gen_range(1..cfg.num_labels) as u8)
        })
        .collect();
    // Topmost layer per pixel, 0 for background.
    let mut layer = vec![0usize; n * n];
    let mut clean = vec![0u8; n * n];
    for (k, (shape, label)) in shapes.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                if shape.contains(x, y) {
                    layer[y * n + x] = k + 1;
                    clean[y * n + x] = *label;
                }
            }
        }
    }
    let mut labels = clean.clone();
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let mut nbrs = [None; 4];
            if x > 0 {
                nbrs[0] = Some(i - 1);
            }
            if x + 1 < n {
                nbrs[1] = Some(i + 1);
            }
            if y > 0 {
                nbrs[2] = Some(i - n);
            }
            if y + 1 < n {
                nbrs[3] = Some(i + n);
            }
            let on_edge = nbrs
                .into_iter()
                .flatten()
                .any(|j| clean[j] != clean[i] && layer[j] < layer[i]);
            if on_edge {
                labels[i] = VOID_LABEL;
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");
    let image = RgbImage::from_fn(n, n, |x, y| {
        let base = palette[clean[y * n + x] as usize];
        std::array::from_fn(|k| {
            let v = base[k] as f64 + if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            v.round().clamp(0.0, 255.0) as u8
        })
    });
    Sample {
        image,
        labels: LabelMap::new(n, n, labels).expect("square grid"),
    }
}

fn covers_every_label(samples: &[Sample], num_labels: usize) -> bool {
    let mut hist = vec![0usize; num_labels];
    let mut total = 0usize;
    for s in samples {
        for &l in s.labels.labels() {
            total += 1;
            if l != VOID_LABEL {
                hist[l as usize] += 1;
            }
        }
    }
    hist.iter().all(|&c| c as f64 >= MIN_LABEL_SHARE * total as f64)
}

/// Sample `index` of the dataset described by `cfg`, before any
/// regeneration for label coverage.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    Ok(generate(cfg, 0, index))
}

/// Writes `cfg.count` image/label pairs and `<split>.tsv` into `out_dir`.
///
/// If some label falls below 1% of the dataset's pixels, every sample is
/// regenerated from a derived seed.
pub fn synth_dataset(out_dir: impl AsRef<Path>, split: Split, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    let mut samples = None;
    for attempt in 0..MAX_ATTEMPTS {
        let batch: Vec<Sample> = (0..cfg.count).map(|k| generate(cfg, attempt, k)).collect();
        if covers_every_label(&batch, cfg.num_labels) {
            samples = Some(batch);
            break;
        }
    }
    let samples = samples.ok_or_else(|| {
        Error::Invalid(format!(
            "no arrangement in {MAX_ATTEMPTS} attempts gives every label 1% of the pixels"
        ))
    })?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(cfg.count);
    for (k, s) in samples.iter().enumerate() {
        let img = PathBuf::from(format!("{split}_{k:04}.ppm"));
        let lab = PathBuf::from(format!("{split}_{k:04}.pgm"));
        write_ppm(out.join(&img), &s.image)?;
        write_pgm(out.join(&lab), &s.labels)?;
        entries.push((img, lab));
    }
    let manifest = Manifest::new(split, out, entries);
    manifest.save(out.join(format!("{split}.tsv")))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(noise: f64) -> SynthConfig {
        SynthConfig { count: 6, size: 24, num_labels: 4, noise_sd: noise, seed: 11 }
    }

    #[test]
    fn palette_is_distinct_and_in_range() {
        let p = synth_palette(5);
        assert_eq!(p[0], BACKGROUND_RGB);
        for a in 0..5 {
            for b in a + 1..5 {
                assert_ne!(p[a], p[b]);
            }
        }
    }

    #[test]
    fn noiseless_pixels_match_label_colors() {
        let palette = synth_palette(4);
        for k in 0..6 {
            let s = synth_sample(&cfg(0.0), k).unwrap();
            for y in 0..24 {
                for x in 0..24 {
                    let l = s.labels.get(x, y);
                    if l != VOID_LABEL {
                        assert_eq!(s.image.pixel(x, y), palette[l as usize]);
                    }
                }
            }
        }
    }

    #[test]
    fn void_ring_is_thin() {
        let s = synth_sample(&cfg(0.0), 2).unwrap();
        let labels = s.labels.labels();
        let void = labels.iter().filter(|&&l| l == VOID_LABEL).count();
        assert!(void > 0 && void < labels.len() / 3);
    }

    #[test]
    fn dataset_is_deterministic_and_covers_labels() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_dataset(a.path(), Split::Train, &cfg(20.0)).unwrap();
        synth_dataset(b.path(), Split::Train, &cfg(20.0)).unwrap();
        assert_eq!(ma.len(), 6);
        for (img, lab) in ma.entries() {
            for f in [img, lab] {
                assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
            }
        }
        let loaded = Manifest::load(a.path().join("train.tsv"), Split::Train).unwrap();
        assert!(covers_every_label(&loaded.load_all().unwrap(), 4));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = cfg(1.0);
        c.num_labels = 1;
        assert!(synth_sample(&c, 0).is_err());
        let mut c = cfg(1.0);
        c.noise_sd = -1.0;
        assert!(synth_sample(&c, 0).is_err());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, b"x").unwrap();
        assert!(synth_dataset(file.join("sub"), Split::Val, &cfg(1.0)).is_err());
    }
}
