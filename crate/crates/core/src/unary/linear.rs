//! Per-pixel softmax regression on standardized `(x, y, r, g, b)` features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{assign_params, glorot, UnaryProvider};
use crate::error::{Error, Result};
use crate::fields::{Field, ScoreField};
use crate::image::RgbImage;
use crate::optim::{ParamGroup, ParamTensor};

/// Raw input features per pixel, before the bias.
pub const LINEAR_FEATURES: usize = 5;

const WEIGHT: &str = "linear.weight";
const MEAN: &str = "linear.feature_mean";
const STD: &str = "linear.feature_std";

/// Scores `s_i = W^T [standardize(x, y, r, g, b), 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearUnary {
    labels: usize,
    /// `(LINEAR_FEATURES + 1) x labels`, bias row last.
    weight: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

pub struct LinearCache {
    height: usize,
    width: usize,
    /// `pixels x (LINEAR_FEATURES + 1)`.
    features: Vec<f64>,
}

fn raw_features(x: usize, y: usize, rgb: [u8; 3]) -> [f64; LINEAR_FEATURES] {
    [x as f64, y as f64, rgb[0] as f64, rgb[1] as f64, rgb[2] as f64]
}

impl LinearUnary {
    /// Glorot-initialized weights, zero bias, identity standardization.
    pub fn new(labels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = glorot(&mut rng, (LINEAR_FEATURES + 1) * labels, LINEAR_FEATURES, labels);
        weight[LINEAR_FEATURES * labels..].iter_mut().for_each(|b| *b = 0.0);
        LinearUnary {
            labels,
            weight,
            mean: vec![0.0; LINEAR_FEATURES],
            std: vec![1.0; LINEAR_FEATURES],
        }
    }

    pub fn zeros(labels: usize) -> Self {
        LinearUnary {
            labels,
            weight: vec![0.0; (LINEAR_FEATURES + 1) * labels],
            mean: vec![0.0; LINEAR_FEATURES],
            std: vec![1.0; LINEAR_FEATURES],
        }
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn standardization(&self) -> (&[f64], &[f64]) {
        (&self.mean, &self.std)
    }

    /// Sets per-feature mean and standard deviation from training images;
    /// a constant feature keeps unit scale.
    pub fn fit_standardization<'a>(
        &mut self,
        images: impl IntoIterator<Item = &'a RgbImage>,
    ) -> Result<()> {
        let mut count = 0usize;
        let mut sum = [0.0; LINEAR_FEATURES];
        let mut sq = [0.0; LINEAR_FEATURES];
        for img in images {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let f = raw_features(x, y, img.pixel(x, y));
                    for k in 0..LINEAR_FEATURES {
                        sum[k] += f[k];
                        sq[k] += f[k] * f[k];
                    }
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::Invalid("no pixels to fit feature statistics on".into()));
        }
        let n = count as f64;
        for k in 0..LINEAR_FEATURES {
            let mean = sum[k] / n;
            let var = (sq[k] / n - mean * mean).max(0.0);
            self.mean[k] = mean;
            self.std[k] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    fn features(&self, image: &RgbImage) -> Vec<f64> {
        let d = LINEAR_FEATURES + 1;
        let mut out = Vec::with_capacity(image.num_pixels() * d);
        for y in 0..image.height() {
            for x in 0..image.width() {
                let f = raw_features(x, y, image.pixel(x, y));
                for k in 0..LINEAR_FEATURES {
                    out.push((f[k] - self.mean[k]) / self.std[k]);
                }
                out.push(1.0);
            }
        }
        out
    }
}

impl UnaryProvider for LinearUnary {
    type Cache = LinearCache;

    fn num_labels(&self) -> usize {
        self.labels
    }

    fn forward(&self, image: &RgbImage) -> Result<(ScoreField, LinearCache)> {
        let features = self.features(image);
        let d = LINEAR_FEATURES + 1;
        let l = self.labels;
        let scores = Field::from_fn(image.height(), image.width(), l, |i, label| {
            let f = &features[i * d..(i + 1) * d];
            f.iter()
                .enumerate()
                .map(|(k, v)| v * self.weight[k * l + label])
                .sum()
        });
        Ok((
            scores,
            LinearCache {
                height: image.height(),
                width: image.width(),
                features,
            },
        ))
    }

    fn backward(&self, cache: LinearCache, d_scores: &Field) -> Result<Vec<Vec<f64>>> {
        if d_scores.height() != cache.height
            || d_scores.width() != cache.width
            || d_scores.channels() != self.labels
        {
            return Err(Error::shape(
                format!("{}x{}x{}", cache.height, cache.width, self.labels),
                d_scores.shape_string(),
            ));
        }
        let d = LINEAR_FEATURES + 1;
        let l = self.labels;
        let mut g = vec![0.0; d * l];
        for i in 0..d_scores.num_pixels() {
            let f = &cache.features[i * d..(i + 1) * d];
            let up = d_scores.pixel(i);
            for (k, &fv) in f.iter().enumerate() {
                for (label, &u) in up.iter().enumerate() {
                    g[k * l + label] += fv * u;
                }
            }
        }
        Ok(vec![g, vec![0.0; LINEAR_FEATURES], vec![0.0; LINEAR_FEATURES]])
    }

    fn params(&self) -> Vec<ParamTensor> {
        vec![
            ParamTensor::new(WEIGHT, ParamGroup::Top, self.weight.clone()),
            ParamTensor::new(MEAN, ParamGroup::Buffer, self.mean.clone()),
            ParamTensor::new(STD, ParamGroup::Buffer, self.std.clone()),
        ]
    }

    fn set_params(&mut self, params: &[ParamTensor]) -> Result<()> {
        let mut current = self.params();
        assign_params(&mut current, params)?;
        if current[2].values.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("feature standard deviations must be positive".into()));
        }
        let mut it = current.into_iter().map(|t| t.values);
        self.weight = it.next().expect("weight");
        self.mean = it.next().expect("mean");
        self.std = it.next().expect("std");
        Ok(())
    }
}
