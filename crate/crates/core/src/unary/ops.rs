//! Convolution, ReLU, max-pooling and bilinear upsampling with exact adjoints.

use crate::error::{Error, Result};
use crate::fields::Field;

/// A dense `channels x height x width` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                format!("{channels}x{height}x{width} tensor"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let s = self.height * self.width;
        &self.data[c * s..(c + 1) * s]
    }

    /// Channel-major tensor to a pixel-major field.
    pub fn to_field(&self) -> Field {
        let s = self.height * self.width;
        Field::from_fn(self.height, self.width, self.channels, |i, c| self.data[c * s + i])
    }

    /// Pixel-major field to a channel-major tensor.
    pub fn from_field(f: &Field) -> Self {
        let s = f.num_pixels();
        let c = f.channels();
        let mut data = vec![0.0; s * c];
        for i in 0..s {
            for (ch, &v) in f.pixel(i).iter().enumerate() {
                data[ch * s + i] = v;
            }
        }
        Tensor3 {
            channels: c,
            height: f.height(),
            width: f.width(),
            data,
        }
    }
}

/// Convolution weights `out x in x size x size` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernels {
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernels {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        size: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weight.len() != out_channels * in_channels * size * size || bias.len() != out_channels {
            return Err(Error::shape(
                format!("{out_channels}x{in_channels}x{size}x{size} weights and {out_channels} biases"),
                format!("{} weights and {} biases", weight.len(), bias.len()),
            ));
        }
        Ok(ConvKernels {
            out_channels,
            in_channels,
            size,
            weight,
            bias,
        })
    }

    #[inline]
    fn w(&self, o: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + c) * self.size + ky) * self.size + kx]
    }
}

pub struct ConvGrads {
    pub d_input: Option<Tensor3>,
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Invalid("convolution stride must be positive".into()));
    }
    if n + 2 * pad < k {
        return Err(Error::shape(format!("input of at least {k} after padding"), n + 2 * pad));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Output positions `x` with `0 <= x * stride + k - pad < n`, as a half-open range.
#[inline]
fn valid_range(out: usize, n: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k { (n + pad - k - 1) / stride + 1 } else { 0 };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

/// Zero-padded cross-correlation.
pub fn conv2d_forward(input: &Tensor3, k: &ConvKernels, stride: usize, pad: usize) -> Result<Tensor3> {
    if input.channels != k.in_channels {
        return Err(Error::shape(format!("{} input channels", k.in_channels), input.channels));
    }
    let oh = conv_out_dim(input.height, k.size, stride, pad)?;
    let ow = conv_out_dim(input.width, k.size, stride, pad)?;
    let mut out = Tensor3::zeros(k.out_channels, oh, ow);
    let (ih, iw) = (input.height, input.width);
    for o in 0..k.out_channels {
        let dst = &mut out.data[o * oh * ow..(o + 1) * oh * ow];
        dst.iter_mut().for_each(|v| *v = k.bias[o]);
        for c in 0..k.in_channels {
            let src = input.plane(c);
            for ky in 0..k.size {
                let (y0, y1) = valid_range(oh, ih, ky, stride, pad);
                for kx in 0..k.size {
                    let w = k.w(o, c, ky, kx);
                    let (x0, x1) = valid_range(ow, iw, kx, stride, pad);
                    for y in y0..y1 {
                        let iy = y * stride + ky - pad;
                        let row = &src[iy * iw..(iy + 1) * iw];
                        let drow = &mut dst[y * ow..(y + 1) * ow];
                        for x in x0..x1 {
                            drow[x] += w * row[x * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of `conv2d_forward` at `input`; `d_input` is skipped unless requested.
pub fn conv2d_backward(
    input: &Tensor3,
    k: &ConvKernels,
    stride: usize,
    pad: usize,
    upstream: &Tensor3,
    want_input: bool,
) -> Result<ConvGrads> {
    let oh = conv_out_dim(input.height, k.size, stride, pad)?;
    let ow = conv_out_dim(input.width, k.size, stride, pad)?;
    if upstream.channels != k.out_channels || upstream.height != oh || upstream.width != ow {
        return Err(Error::shape(
            format!("{}x{oh}x{ow} upstream", k.out_channels),
            format!("{}x{}x{}", upstream.channels, upstream.height, upstream.width),
        ));
    }
    let (ih, iw) = (input.height, input.width);
    let mut d_weight = vec![0.0; k.weight.len()];
    let mut d_input = want_input.then(|| Tensor3::zeros(input.channels, ih, iw));
    let d_bias = (0..k.out_channels)
        .map(|o| upstream.plane(o).iter().sum())
        .collect();
    for o in 0..k.out_channels {
        let up = upstream.plane(o);
        for c in 0..k.in_channels {
            let src = input.plane(c);
            for ky in 0..k.size {
                let (y0, y1) = valid_range(oh, ih, ky, stride, pad);
                for kx in 0..k.size {
                    let (x0, x1) = valid_range(ow, iw, kx, stride, pad);
                    let widx = ((o * k.in_channels + c) * k.size + ky) * k.size + kx;
                    let w = k.weight[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y * stride + ky - pad;
                        let urow = &up[y * ow..(y + 1) * ow];
                        let row = &src[iy * iw..(iy + 1) * iw];
                        for x in x0..x1 {
                            acc += urow[x] * row[x * stride + kx - pad];
                        }
                        if let Some(di) = d_input.as_mut() {
                            let drow = &mut di.data[(c * ih + iy) * iw..(c * ih + iy + 1) * iw];
                            for x in x0..x1 {
                                drow[x * stride + kx - pad] += w * urow[x];
                            }
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        d_input,
        d_weight,
        d_bias,
    })
}

pub fn relu_forward(x: &mut Tensor3) {
    for v in &mut x.data {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
}

/// Passes upstream where the forward output is positive; the gradient at 0 is 0.
pub fn relu_backward(output: &Tensor3, upstream: &mut Tensor3) {
    for (u, &a) in upstream.data.iter_mut().zip(&output.data) {
        if !(a > 0.0) {
            *u = 0.0;
        }
    }
}

/// 2x2 stride-2 max-pooling with ceil-sized output and clipped edge windows.
/// Returns the pooled tensor and the flat input index chosen per output.
pub fn maxpool2_forward(input: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor3::zeros(input.channels, oh, ow);
    let mut arg = vec![0usize; out.data.len()];
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = usize::MAX;
                for iy in 2 * y..(2 * y + 2).min(h) {
                    for ix in 2 * x..(2 * x + 2).min(w) {
                        let idx = (c * h + iy) * w + ix;
                        if best == usize::MAX || input.data[idx] > input.data[best] {
                            best = idx;
                        }
                    }
                }
                let o = (c * oh + y) * ow + x;
                out.data[o] = input.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_shape: (usize, usize, usize), arg: &[usize], upstream: &Tensor3) -> Tensor3 {
    let (c, h, w) = input_shape;
    let mut d = Tensor3::zeros(c, h, w);
    for (&a, &u) in arg.iter().zip(&upstream.data) {
        d.data[a] += u;
    }
    d
}

/// Align-corners sampling positions along one axis.
fn interp_axis(coarse: usize, fine: usize) -> Vec<(usize, usize, f64)> {
    (0..fine)
        .map(|t| {
            if fine == 1 || coarse == 1 {
                return (0, 0, 0.0);
            }
            let s = (t * (coarse - 1)) as f64 / (fine - 1) as f64;
            let lo = (s.floor() as usize).min(coarse - 1);
            let hi = (lo + 1).min(coarse - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn check_upsample(ch: usize, cw: usize, h: usize, w: usize) -> Result<()> {
    if h < ch || w < cw {
        return Err(Error::shape(
            format!("target of at least {ch}x{cw}"),
            format!("{h}x{w}"),
        ));
    }
    if ch == 0 || cw == 0 {
        return Err(Error::Invalid("cannot upsample an empty field".into()));
    }
    Ok(())
}

/// Align-corners bilinear interpolation of `coarse` to `height x width`.
pub fn bilinear_upsample(coarse: &Field, height: usize, width: usize) -> Result<Field> {
    let (ch, cw) = (coarse.height(), coarse.width());
    check_upsample(ch, cw, height, width)?;
    let ys = interp_axis(ch, height);
    let xs = interp_axis(cw, width);
    let c = coarse.channels();
    let mut out = Field::zeros(height, width, c);
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let dst = out.pixel_mut(y * width + x);
            let taps = [
                (y0 * cw + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * cw + x1, (1.0 - fy) * fx),
                (y1 * cw + x0, fy * (1.0 - fx)),
                (y1 * cw + x1, fy * fx),
            ];
            for (p, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                for (d, &s) in dst.iter_mut().zip(coarse.pixel(p)) {
                    *d += wgt * s;
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of `bilinear_upsample` onto a `coarse_height x coarse_width` grid.
pub fn bilinear_upsample_adjoint(
    upstream: &Field,
    coarse_height: usize,
    coarse_width: usize,
) -> Result<Field> {
    let (h, w) = (upstream.height(), upstream.width());
    check_upsample(coarse_height, coarse_width, h, w)?;
    let ys = interp_axis(coarse_height, h);
    let xs = interp_axis(coarse_width, w);
    let c = upstream.channels();
    let cw = coarse_width;
    let mut out = Field::zeros(coarse_height, coarse_width, c);
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let src = upstream.pixel(y * w + x);
            let taps = [
                (y0 * cw + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * cw + x1, (1.0 - fy) * fx),
                (y1 * cw + x0, fy * (1.0 - fx)),
                (y1 * cw + x1, fy * fx),
            ];
            for (p, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                for (d, &s) in out.pixel_mut(p).iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
    }
    Ok(out)
}
