//! Small fully-convolutional scorer with a half-resolution output that is
//! bilinearly upsampled back to the image size.
//!
//! conv3x3(3->16) ReLU, conv3x3(16->16) ReLU, maxpool 2x2/2,
//! conv3x3(16->32) ReLU, conv1x1(32->L).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{
    bilinear_upsample, bilinear_upsample_adjoint, conv2d_backward, conv2d_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, ConvKernels, Tensor3,
};
use super::{assign_params, glorot, UnaryProvider};
use crate::error::{Error, Result};
use crate::fields::{Field, ScoreField};
use crate::image::RgbImage;
use crate::optim::{ParamGroup, ParamTensor};

const LAYERS: [(&str, usize, usize, usize); 4] = [
    ("conv1", 3, 16, 3),
    ("conv2", 16, 16, 3),
    ("conv3", 16, 32, 3),
    ("conv4", 32, 0, 1),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetUnary {
    labels: usize,
    layers: [ConvKernels; 4],
}

pub struct ConvNetCache {
    height: usize,
    width: usize,
    input: Tensor3,
    a1: Tensor3,
    a2: Tensor3,
    pool_arg: Vec<usize>,
    pooled: Tensor3,
    a3: Tensor3,
}

/// Maps 8-bit intensities to `[-1, 1]`.
fn image_tensor(image: &RgbImage) -> Tensor3 {
    let (h, w) = (image.height(), image.width());
    let mut t = Tensor3::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for (c, &v) in image.pixel(x, y).iter().enumerate() {
                t.data[(c * h + y) * w + x] = v as f64 / 127.5 - 1.0;
            }
        }
    }
    t
}

impl ConvNetUnary {
    /// Glorot-uniform weights from `seed`, zero biases.
    pub fn new(labels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = LAYERS.map(|(_, cin, cout, k)| {
            let cout = if cout == 0 { labels } else { cout };
            let w = glorot(&mut rng, cout * cin * k * k, cin * k * k, cout * k * k);
            ConvKernels::new(cout, cin, k, w, vec![0.0; cout]).expect("consistent layer shape")
        });
        ConvNetUnary { labels, layers }
    }

    /// Output grid of the coarse map for an input grid.
    pub fn coarse_shape(height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(2), width.div_ceil(2))
    }

    /// Half-resolution scores and cached activations.
    pub fn forward_coarse(&self, image: &RgbImage) -> Result<(Tensor3, ConvNetCache)> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Invalid("cannot score an empty image".into()));
        }
        let input = image_tensor(image);
        let [c1, c2, c3, c4] = &self.layers;
        let mut a1 = conv2d_forward(&input, c1, 1, 1)?;
        relu_forward(&mut a1);
        let mut a2 = conv2d_forward(&a1, c2, 1, 1)?;
        relu_forward(&mut a2);
        let (pooled, pool_arg) = maxpool2_forward(&a2);
        let mut a3 = conv2d_forward(&pooled, c3, 1, 1)?;
        relu_forward(&mut a3);
        let out = conv2d_forward(&a3, c4, 1, 0)?;
        Ok((
            out,
            ConvNetCache {
                height: image.height(),
                width: image.width(),
                input,
                a1,
                a2,
                pool_arg,
                pooled,
                a3,
            },
        ))
    }
}

impl UnaryProvider for ConvNetUnary {
    type Cache = ConvNetCache;

    fn num_labels(&self) -> usize {
        self.labels
    }

    fn forward(&self, image: &RgbImage) -> Result<(ScoreField, ConvNetCache)> {
        let (coarse, cache) = self.forward_coarse(image)?;
        let scores = bilinear_upsample(&coarse.to_field(), image.height(), image.width())?;
        Ok((scores, cache))
    }

    fn backward(&self, cache: ConvNetCache, d_scores: &Field) -> Result<Vec<Vec<f64>>> {
        if d_scores.height() != cache.height
            || d_scores.width() != cache.width
            || d_scores.channels() != self.labels
        {
            return Err(Error::shape(
                format!("{}x{}x{}", cache.height, cache.width, self.labels),
                d_scores.shape_string(),
            ));
        }
        let [c1, c2, c3, c4] = &self.layers;
        let (ch, cw) = (cache.a3.height, cache.a3.width);
        let d_out = Tensor3::from_field(&bilinear_upsample_adjoint(d_scores, ch, cw)?);
        let g4 = conv2d_backward(&cache.a3, c4, 1, 0, &d_out, true)?;
        let mut d3 = g4.d_input.expect("requested");
        relu_backward(&cache.a3, &mut d3);
        let g3 = conv2d_backward(&cache.pooled, c3, 1, 1, &d3, true)?;
        let a2 = &cache.a2;
        let mut d2 = maxpool2_backward(
            (a2.channels, a2.height, a2.width),
            &cache.pool_arg,
            &g3.d_input.expect("requested"),
        );
        relu_backward(a2, &mut d2);
        let g2 = conv2d_backward(&cache.a1, c2, 1, 1, &d2, true)?;
        let mut d1 = g2.d_input.expect("requested");
        relu_backward(&cache.a1, &mut d1);
        let g1 = conv2d_backward(&cache.input, c1, 1, 1, &d1, false)?;
        Ok(vec![
            g1.d_weight,
            g1.d_bias,
            g2.d_weight,
            g2.d_bias,
            g3.d_weight,
            g3.d_bias,
            g4.d_weight,
            g4.d_bias,
        ])
    }

    fn params(&self) -> Vec<ParamTensor> {
        let mut out = Vec::with_capacity(8);
        for ((name, ..), layer) in LAYERS.iter().zip(&self.layers) {
            let group = if *name == "conv4" {
                ParamGroup::Top
            } else {
                ParamGroup::Body
            };
            out.push(ParamTensor::new(format!("{name}.weight"), group, layer.weight.clone()));
            out.push(ParamTensor::new(format!("{name}.bias"), group, layer.bias.clone()));
        }
        out
    }

    fn set_params(&mut self, params: &[ParamTensor]) -> Result<()> {
        let mut current = self.params();
        assign_params(&mut current, params)?;
        let mut it = current.into_iter().map(|t| t.values);
        for layer in &mut self.layers {
            layer.weight = it.next().expect("weight");
            layer.bias = it.next().expect("bias");
        }
        Ok(())
    }

    fn activation_pattern(&self, image: &RgbImage) -> Result<Vec<usize>> {
        let (_, c) = self.forward_coarse(image)?;
        let mut out: Vec<usize> = [&c.a1, &c.a2, &c.a3]
            .iter()
            .flat_map(|t| t.data.iter().map(|&v| (v > 0.0) as usize))
            .collect();
        out.extend_from_slice(&c.pool_arg);
        Ok(out)
    }
}
