#![allow(dead_code)]

pub mod nn;

use msdeaot::harness::io::image_to_tensor;
use msdeaot::harness::pnm::Image8;
use msdeaot::harness::synth::hue_color;
use msdeaot::{LabelMask, Tensor};

/// A 64×64 mask of vertical stripes: columns 0..16 get `left`, 48..64 get
/// `right`, the rest is background.
pub fn stripe_mask(left: u8, right: u8) -> LabelMask {
    LabelMask::from_fn(64, 64, |_, x| match x {
        0..=15 => left,
        48..=63 => right,
        _ => 0,
    })
}

/// Flat-coloured image of a mask, one hue per label.
pub fn paint(mask: &LabelMask) -> Image8 {
    let mut data = Vec::with_capacity(mask.labels().len() * 3);
    for &l in mask.labels() {
        data.extend_from_slice(&hue_color(f64::from(l) * 97.0));
    }
    Image8 {
        height: mask.height(),
        width: mask.width(),
        channels: 3,
        data,
    }
}

pub fn static_frames(mask: &LabelMask, n: usize) -> Vec<Tensor> {
    vec![image_to_tensor(&paint(mask)); n]
}
