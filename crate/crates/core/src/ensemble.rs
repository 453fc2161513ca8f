//! Test-time augmentation and the two ensemble fusions: probability
//! averaging over logits and weighted voting over hard masks.

use crate::error::{Error, Result};
use crate::idmech::LabelMask;
use crate::model::Model;
use crate::tensor::{resize_bilinear, Tensor};

/// One test-time transform: bilinear rescale, then optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TtaVariant {
    pub scale: f32,
    pub flipped: bool,
}

pub const TTA_SCALES: [f32; 3] = [1.2, 1.3, 1.4];

impl TtaVariant {
    pub const IDENTITY: TtaVariant = TtaVariant {
        scale: 1.0,
        flipped: false,
    };

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.scale as f64;
        ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize)
    }
}

/// The six canonical variants, scale ascending, unflipped first.
pub fn tta_variants() -> Vec<TtaVariant> {
    TTA_SCALES
        .iter()
        .flat_map(|&scale| [false, true].map(|flipped| TtaVariant { scale, flipped }))
        .collect()
}

/// The canonical variants preceded by the unscaled pair.
pub fn tta_variants_with_identity() -> Vec<TtaVariant> {
    let mut v = vec![
        TtaVariant::IDENTITY,
        TtaVariant {
            scale: 1.0,
            flipped: true,
        },
    ];
    v.extend(tta_variants());
    v
}

fn check_variant(v: &TtaVariant) -> Result<()> {
    if !(v.scale.is_finite() && v.scale > 0.0) {
        return Err(Error::Range(format!("variant scale must be positive, got {}", v.scale)));
    }
    Ok(())
}

fn resize(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if x.shape()[0] == h && x.shape()[1] == w {
        Ok(x.clone())
    } else {
        resize_bilinear(x, h, w)
    }
}

pub fn apply_variant(frame: &Tensor, v: &TtaVariant) -> Result<Tensor> {
    check_variant(v)?;
    let (h, w, _) = frame.dims3()?;
    let (oh, ow) = v.output_size(h, w);
    let scaled = resize(frame, oh, ow)?;
    if v.flipped {
        scaled.hflip()
    } else {
        Ok(scaled)
    }
}

/// The reference mask under a variant (nearest-neighbour rescale).
pub fn apply_variant_mask(mask: &LabelMask, v: &TtaVariant) -> Result<LabelMask> {
    check_variant(v)?;
    let (h, w) = mask.dims();
    let (oh, ow) = v.output_size(h, w);
    let scaled = if (oh, ow) == (h, w) {
        mask.clone()
    } else {
        mask.resize_nearest(oh, ow)?
    };
    Ok(if v.flipped { scaled.hflip() } else { scaled })
}

/// Undoes a variant on its logits: unflip, then resize to the original size.
pub fn align_logits(logits: &Tensor, v: &TtaVariant, orig_h: usize, orig_w: usize) -> Result<Tensor> {
    check_variant(v)?;
    let unflipped = if v.flipped { logits.hflip()? } else { logits.clone() };
    resize(&unflipped, orig_h, orig_w)
}

fn check_weights(weights: &[f32], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Argument("an ensemble needs at least one member".into()));
    }
    if weights.len() != n {
        return Err(Error::Argument(format!("{} weights for {n} members", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Range("ensemble weights must be finite and non-negative".into()));
    }
    let w: Vec<f64> = weights.iter().map(|&w| w as f64).collect();
    if w.iter().all(|&w| w == 0.0) {
        return Err(Error::Range("ensemble weights must not all be zero".into()));
    }
    Ok(w)
}

/// Sums in ascending order so the result does not depend on input order.
fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Channel softmax of one pixel, in f64.
fn pixel_softmax(logits: &[f32], out: &mut [f64], scratch: &mut [f64]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    for (s, &l) in scratch.iter_mut().zip(logits) {
        *s = (l as f64 - max).exp();
    }
    let total = {
        let mut t = scratch.to_vec();
        sorted_sum(&mut t)
    };
    for (o, s) in out.iter_mut().zip(scratch.iter()) {
        *o = s / total;
    }
}

fn argmax_lowest(scores: &[f64]) -> u8 {
    argmax_within(scores, 0.0)
}

/// Averaged probabilities closer than this are treated as tied. Ties that
/// are exact in real arithmetic can differ by a few ulps after rounding.
pub const PROBABILITY_TIE_TOLERANCE: f64 = 1e-12;

/// Lowest index whose score is within `tolerance` of the maximum.
fn argmax_within(scores: &[f64], tolerance: f64) -> u8 {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().position(|&s| best - s <= tolerance).unwrap_or(0) as u8
}

fn check_same_shape(preds: &[Tensor]) -> Result<(usize, usize, usize)> {
    let (h, w, c) = preds[0].dims3()?;
    for (i, p) in preds.iter().enumerate() {
        if p.shape() != preds[0].shape() {
            return Err(Error::dim(format!(
                "member {i} has shape {:?}, member 0 has {:?}",
                p.shape(),
                preds[0].shape()
            )));
        }
    }
    Ok((h, w, c))
}

/// Weighted mean of per-member channel softmaxes, `h × w × c` in f64.
fn averaged_probabilities(preds: &[Tensor], weights: &[f32]) -> Result<(Vec<f64>, (usize, usize, usize))> {
    let w = check_weights(weights, preds.len())?;
    let (h, wd, c) = check_same_shape(preds)?;
    let total_w = sorted_sum(&mut w.clone());
    let norm: Vec<f64> = w.iter().map(|x| x / total_w).collect();
    let mut out = vec![0.0; h * wd * c];
    let mut probs = vec![vec![0.0; c]; preds.len()];
    let mut scratch = vec![0.0; c];
    let mut terms = vec![0.0; preds.len()];
    for px in 0..h * wd {
        for (m, p) in preds.iter().enumerate() {
            pixel_softmax(&p.data()[px * c..(px + 1) * c], &mut probs[m], &mut scratch);
        }
        for ch in 0..c {
            for m in 0..preds.len() {
                terms[m] = norm[m] * probs[m][ch];
            }
            out[px * c + ch] = sorted_sum(&mut terms);
        }
    }
    Ok((out, (h, wd, c)))
}

/// Per-pixel argmax of the weighted mean probability; ties (up to
/// [`PROBABILITY_TIE_TOLERANCE`]) go to the lowest label.
pub fn average_logits(preds: &[Tensor], weights: &[f32]) -> Result<LabelMask> {
    let (probs, (h, w, c)) = averaged_probabilities(preds, weights)?;
    let labels = probs
        .chunks_exact(c)
        .map(|p| argmax_within(p, PROBABILITY_TIE_TOLERANCE))
        .collect();
    LabelMask::new(h, w, labels)
}

/// The fused prediction as log-probabilities, so it can feed a further
/// logits-averaging round unchanged.
pub fn fuse_logits(preds: &[Tensor], weights: &[f32]) -> Result<Tensor> {
    let (probs, (h, w, c)) = averaged_probabilities(preds, weights)?;
    Tensor::new(
        vec![h, w, c],
        probs.iter().map(|&p| p.max(f64::MIN_POSITIVE).ln() as f32).collect(),
    )
}

/// Per-pixel weighted vote; ties go to the lowest label.
pub fn vote_masks(masks: &[LabelMask], weights: &[f32]) -> Result<LabelMask> {
    let w = check_weights(weights, masks.len())?;
    let (h, wd) = masks[0].dims();
    for (i, m) in masks.iter().enumerate() {
        if m.dims() != (h, wd) {
            return Err(Error::dim(format!(
                "mask {i} is {:?}, mask 0 is {:?}",
                m.dims(),
                (h, wd)
            )));
        }
    }
    let top = masks.iter().map(|m| m.max_label()).max().unwrap_or(0) as usize;
    let mut terms: Vec<Vec<f64>> = vec![Vec::with_capacity(masks.len()); top + 1];
    let mut scores = vec![0.0; top + 1];
    let mut labels = Vec::with_capacity(h * wd);
    for px in 0..h * wd {
        terms.iter_mut().for_each(Vec::clear);
        for (m, &wt) in masks.iter().zip(&w) {
            terms[m.labels()[px] as usize].push(wt);
        }
        for (s, t) in scores.iter_mut().zip(terms.iter_mut()) {
            *s = sorted_sum(t);
        }
        labels.push(argmax_lowest(&scores));
    }
    LabelMask::new(h, wd, labels)
}

/// Runs a sequence under every variant, aligns the logits back and fuses
/// them by equal-weight probability averaging. Returns per-frame masks and
/// fused log-probabilities; frame 0 keeps the reference mask.
pub fn tta_segment(
    model: &Model,
    frames: &[Tensor],
    reference: &LabelMask,
    variants: &[TtaVariant],
) -> Result<Vec<(LabelMask, Tensor)>> {
    if variants.is_empty() {
        return Err(Error::Argument("at least one test-time variant is required".into()));
    }
    let (h, w) = reference.dims();
    let runs: Vec<Result<Vec<Tensor>>> = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|v| {
                s.spawn(move || -> Result<Vec<Tensor>> {
                    let vf = frames.iter().map(|f| apply_variant(f, v)).collect::<Result<Vec<_>>>()?;
                    let vr = apply_variant_mask(reference, v)?;
                    model
                        .propagate_sequence(&vf, &vr)?
                        .into_iter()
                        .map(|(_, logits)| align_logits(&logits, v, h, w))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("variant worker panicked"))
            .collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let weights = vec![1.0; variants.len()];
    let mut out = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let members: Vec<Tensor> = runs.iter().map(|r| r[t].clone()).collect();
        let fused = fuse_logits(&members, &weights)?;
        let mask = if t == 0 {
            reference.clone()
        } else {
            average_logits(&members, &weights)?
        };
        out.push((mask, fused));
    }
    Ok(out)
}
