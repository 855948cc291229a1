//! Differentiable unary scorers mapping an image to per-pixel label scores.

mod convnet;
mod linear;
pub mod ops;

pub use convnet::{ConvNetCache, ConvNetUnary};
pub use linear::{LinearCache, LinearUnary, LINEAR_FEATURES};
pub use ops::{
    bilinear_upsample, bilinear_upsample_adjoint, conv2d_backward, conv2d_forward, ConvGrads,
    ConvKernels, Tensor3,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::fields::{Field, ScoreField};
use crate::image::RgbImage;
use crate::optim::ParamTensor;

/// A unary scorer with named, grouped parameters.
///
/// `backward` consumes the cache of exactly one `forward` call and returns
/// one gradient array per entry of `params()`, in the same order.
pub trait UnaryProvider {
    type Cache: Send;

    fn num_labels(&self) -> usize;

    /// Full-resolution scores plus the activations needed by `backward`.
    fn forward(&self, image: &RgbImage) -> Result<(ScoreField, Self::Cache)>;

    fn backward(&self, cache: Self::Cache, d_scores: &Field) -> Result<Vec<Vec<f64>>>;

    fn params(&self) -> Vec<ParamTensor>;

    fn set_params(&mut self, params: &[ParamTensor]) -> Result<()>;

    /// Discrete choices of the forward pass (active ReLUs, pooling winners).
    /// Scores are smooth in the parameters wherever this stays constant;
    /// smooth providers return an empty pattern.
    fn activation_pattern(&self, _image: &RgbImage) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }
}

/// Scores without keeping the cache.
pub fn provider_forward<P: UnaryProvider>(provider: &P, image: &RgbImage) -> Result<ScoreField> {
    Ok(provider.forward(image)?.0)
}

/// Parameter gradients of `<d_scores, forward(image)>`.
pub fn provider_backward<P: UnaryProvider>(
    provider: &P,
    cache: P::Cache,
    d_scores: &Field,
) -> Result<Vec<Vec<f64>>> {
    provider.backward(cache, d_scores)
}

/// Copies `src` into `dst` after checking the name, group and length line up.
pub(crate) fn assign_params(dst: &mut [ParamTensor], src: &[ParamTensor]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::shape(format!("{} parameter arrays", dst.len()), src.len()));
    }
    for (d, s) in dst.iter().zip(src) {
        if d.name != s.name || d.group != s.group || d.values.len() != s.values.len() {
            return Err(Error::Invalid(format!(
                "parameter {} ({}, {} values) does not match {} ({}, {} values)",
                s.name,
                s.group.name(),
                s.values.len(),
                d.name,
                d.group.name(),
                d.values.len()
            )));
        }
        if let Some(v) = s.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("parameter {} holds {v}", s.name)));
        }
    }
    for (d, s) in dst.iter_mut().zip(src) {
        d.values.clone_from(&s.values);
    }
    Ok(())
}

/// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(rng: &mut impl Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

/// Either built-in provider.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyUnary {
    Linear(LinearUnary),
    ConvNet(ConvNetUnary),
}

pub enum AnyCache {
    Linear(LinearCache),
    ConvNet(ConvNetCache),
}

impl UnaryProvider for AnyUnary {
    type Cache = AnyCache;

    fn num_labels(&self) -> usize {
        match self {
            AnyUnary::Linear(u) => u.num_labels(),
            AnyUnary::ConvNet(u) => u.num_labels(),
        }
    }

    fn forward(&self, image: &RgbImage) -> Result<(ScoreField, AnyCache)> {
        match self {
            AnyUnary::Linear(u) => u.forward(image).map(|(s, c)| (s, AnyCache::Linear(c))),
            AnyUnary::ConvNet(u) => u.forward(image).map(|(s, c)| (s, AnyCache::ConvNet(c))),
        }
    }

    fn backward(&self, cache: AnyCache, d_scores: &Field) -> Result<Vec<Vec<f64>>> {
        match (self, cache) {
            (AnyUnary::Linear(u), AnyCache::Linear(c)) => u.backward(c, d_scores),
            (AnyUnary::ConvNet(u), AnyCache::ConvNet(c)) => u.backward(c, d_scores),
            _ => Err(Error::Invalid("cache came from a different provider".into())),
        }
    }

    fn params(&self) -> Vec<ParamTensor> {
        match self {
            AnyUnary::Linear(u) => u.params(),
            AnyUnary::ConvNet(u) => u.params(),
        }
    }

    fn set_params(&mut self, params: &[ParamTensor]) -> Result<()> {
        match self {
            AnyUnary::Linear(u) => u.set_params(params),
            AnyUnary::ConvNet(u) => u.set_params(params),
        }
    }

    fn activation_pattern(&self, image: &RgbImage) -> Result<Vec<usize>> {
        match self {
            AnyUnary::Linear(u) => u.activation_pattern(image),
            AnyUnary::ConvNet(u) => u.activation_pattern(image),
        }
    }
}
