use rand::Rng;

use crate::error::{Error, Result};
use crate::init::gaussian;
use crate::tensor::{self, avg_pool, conv2d, Tensor};

/// Channel widths of the four strided convolutions before the stage widths
/// are appended: stride 2 and stride 4.
pub const STEM_WIDTHS: [usize; 2] = [16, 32];

/// Multi-scale features of one (padded) frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub f4: Tensor,
    pub f8: Tensor,
    pub f16: Tensor,
    pub frame_index: usize,
}

/// 3×3 convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub(crate) fn seeded<R: Rng>(rng: &mut R, cin: usize, cout: usize) -> Self {
        let std = (2.0 / (9 * cin) as f32).sqrt();
        Self {
            kernel: gaussian(rng, &[3, 3, cin, cout], std),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub(crate) fn zero(cin: usize, cout: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[3, 3, cin, cout]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn forward(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        conv2d(x, &self.kernel, stride, 1)?.add_row_vector(&self.bias)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Four stride-2 convolutions: /2, /4 (f4), /8 (f8), /16 (f16).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub convs: [Conv; 4],
}

impl EncoderParams {
    pub fn seeded<R: Rng>(rng: &mut R, c8: usize, c16: usize) -> Self {
        let [a, b] = STEM_WIDTHS;
        Self {
            convs: [
                Conv::seeded(rng, 3, a),
                Conv::seeded(rng, a, b),
                Conv::seeded(rng, b, c8),
                Conv::seeded(rng, c8, c16),
            ],
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.convs[i].out_channels())
    }
}

/// Repeats the image channels cyclically up to `width` channels.
pub fn expand_channels(x: &Tensor, width: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    Ok(Tensor::from_fn(&[h, w, width], |i| {
        let px = i / width;
        let ch = i % width;
        x.data()[px * c + ch % c]
    }))
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::dim(format!("expected an RGB frame, got {c} channels")));
    }
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::dim(format!(
            "encoder input {h}×{w} must be padded to multiples of 16"
        )));
    }
    Ok((h, w))
}

/// Learned encoder path.
pub fn encode_frame(image: &Tensor, params: &EncoderParams, frame_index: usize) -> Result<FrameFeatures> {
    check_image(image)?;
    let x2 = relu(&params.convs[0].forward(image, 2)?);
    let f4 = relu(&params.convs[1].forward(&x2, 2)?);
    let f8 = relu(&params.convs[2].forward(&f4, 2)?);
    let f16 = relu(&params.convs[3].forward(&f8, 2)?);
    Ok(FrameFeatures {
        f4,
        f8,
        f16,
        frame_index,
    })
}

/// Template encoder: average-pooled raw pixels, channel-expanded to each
/// stage width.
pub fn encode_frame_template(image: &Tensor, widths: [usize; 3], frame_index: usize) -> Result<FrameFeatures> {
    check_image(image)?;
    let [c4, c8, c16] = widths;
    Ok(FrameFeatures {
        f4: expand_channels(&avg_pool(image, 4)?, c4)?,
        f8: expand_channels(&avg_pool(image, 8)?, c8)?,
        f16: expand_channels(&avg_pool(image, 16)?, c16)?,
        frame_index,
    })
}

/// Flattens `h × w × c` into `(h·w) × c` tokens.
pub(crate) fn tokens(x: &Tensor) -> Result<(Tensor, (usize, usize))> {
    let (h, w, c) = x.dims3()?;
    Ok((x.clone().reshape(&[h * w, c])?, (h, w)))
}

pub(crate) fn untokens(x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    x.clone().reshape(&[grid.0, grid.1, c])
}

/// 2× bilinear upsample of a feature map.
pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (h, w, _) = x.dims3()?;
    tensor::resize_bilinear(x, 2 * h, 2 * w)
}
