//! Identity embeddings: one learnable vector per object slot, so several
//! objects can be encoded, matched and decoded in a single pass.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::gaussian;
use crate::tensor::Tensor;

/// Default number of simultaneous objects.
pub const DEFAULT_MAX_OBJECTS: usize = 10;

/// Per-pixel object labels, 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!("mask must be non-empty, got {height}×{width}")));
        }
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}×{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        assert!(height > 0 && width > 0);
        let labels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, labels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Distinct non-zero labels, ascending.
    pub fn object_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn check_capacity(&self, max_objects: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize > max_objects) {
            Some(&l) => Err(Error::Label {
                label: l as u32,
                max: max_objects,
            }),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour resample with half-pixel centres.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!("resize target {out_h}×{out_w} is empty")));
        }
        let ys = nearest_taps(out_h, self.height);
        let xs = nearest_taps(out_w, self.width);
        Ok(Self::from_fn(out_h, out_w, |y, x| self.get(ys[y], xs[x])))
    }

    pub fn relabel(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }

    pub fn hflip(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }
}

fn nearest_taps(out_len: usize, in_len: usize) -> Vec<usize> {
    (0..out_len)
        .map(|d| ((((d as f64) + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1))
        .collect()
}

/// `(M + 1) × C` identity vectors; row 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityBank {
    vectors: Tensor,
}

impl IdentityBank {
    /// Seeded Gaussian rows with standard deviation `1/√C`.
    pub fn seeded(max_objects: usize, width: usize, seed: u64) -> Result<Self> {
        if max_objects == 0 || width == 0 {
            return Err(Error::Config(format!(
                "identity bank needs M ≥ 1 and C ≥ 1, got M={max_objects} C={width}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = gaussian(&mut rng, &[max_objects + 1, width], 1.0 / (width as f32).sqrt());
        Self::from_vectors(vectors)
    }

    pub fn from_vectors(vectors: Tensor) -> Result<Self> {
        let (rows, width) = vectors.dims2()?;
        if rows < 2 {
            return Err(Error::Config("identity bank needs at least two rows".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::Config("identity bank contains non-finite values".into()));
        }
        for a in 0..rows {
            for b in a + 1..rows {
                let dist: f32 = (0..width)
                    .map(|c| {
                        let d = vectors.at2(a, c) - vectors.at2(b, c);
                        d * d
                    })
                    .sum::<f32>()
                    .sqrt();
                if dist <= 1e-6 {
                    return Err(Error::Config(format!("identity rows {a} and {b} coincide")));
                }
            }
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    /// Number of object slots `M` (row 0 excluded).
    pub fn capacity(&self) -> usize {
        self.vectors.shape()[0] - 1
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Bank whose row `k` is this bank's row `perm[k]`, so encoding a mask
    /// with it equals encoding the mask relabeled by `perm` with `self`.
    pub fn permuted(&self, perm: &[u8]) -> Result<Self> {
        let rows = self.capacity() + 1;
        if perm.len() != rows {
            return Err(Error::dim(format!(
                "permutation of length {} for a bank of {rows} rows",
                perm.len()
            )));
        }
        let width = self.width();
        let mut data = vec![0.0; rows * width];
        for (k, &source) in perm.iter().enumerate() {
            let s = source as usize;
            if s >= rows {
                return Err(Error::Label {
                    label: source as u32,
                    max: rows - 1,
                });
            }
            data[k * width..(k + 1) * width].copy_from_slice(self.vectors.row(s));
        }
        Self::from_vectors(Tensor::new(vec![rows, width], data)?)
    }
}

/// Injective map from external object ids to identity slots `1..=M`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SlotAssignment {
    order: Vec<u32>,
    slots: HashMap<u32, u8>,
}

impl SlotAssignment {
    pub fn slot(&self, object_id: u32) -> Option<u8> {
        self.slots.get(&object_id).copied()
    }

    /// Object ids in slot order.
    pub fn objects(&self) -> &[u32] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Assigns slots in first-appearance order.
pub fn assign_identities(object_ids: &[u32], capacity: usize) -> Result<SlotAssignment> {
    if object_ids.len() > capacity {
        return Err(Error::Capacity {
            count: object_ids.len(),
            capacity,
        });
    }
    let mut out = SlotAssignment::default();
    for &id in object_ids {
        if out.slots.contains_key(&id) {
            return Err(Error::Argument(format!("object id {id} listed twice")));
        }
        let slot = u8::try_from(out.order.len() + 1).map_err(|_| Error::Capacity {
            count: object_ids.len(),
            capacity: 255,
        })?;
        out.slots.insert(id, slot);
        out.order.push(id);
    }
    Ok(out)
}

/// Identity embedding of a label mask at `target_h × target_w`.
///
/// Labels are first resampled by nearest neighbour, so every output pixel is
/// exactly one bank row.
pub fn encode_id_embedding(mask: &LabelMask, bank: &IdentityBank, target_h: usize, target_w: usize) -> Result<Tensor> {
    mask.check_capacity(bank.capacity())?;
    let small = mask.resize_nearest(target_h, target_w)?;
    let c = bank.width();
    let mut data = Vec::with_capacity(target_h * target_w * c);
    for &l in small.labels() {
        data.extend_from_slice(bank.vectors().row(l as usize));
    }
    Tensor::new(vec![target_h, target_w, c], data)
}

/// `h × w × (M + 1)` one-hot scores for a mask.
pub fn one_hot_logits(mask: &LabelMask, max_objects: usize) -> Result<Tensor> {
    mask.check_capacity(max_objects)?;
    let ch = max_objects + 1;
    let mut t = Tensor::zeros(&[mask.height(), mask.width(), ch]);
    for (i, &l) in mask.labels().iter().enumerate() {
        t.data_mut()[i * ch + l as usize] = 1.0;
    }
    Ok(t)
}

/// Per-pixel argmax over channels; ties go to the lowest channel.
pub fn decode_labels(logits: &Tensor) -> Result<LabelMask> {
    let (h, w, ch) = logits.dims3()?;
    if ch > 256 {
        return Err(Error::dim(format!("{ch} channels exceed the 256-label mask range")));
    }
    let labels = logits
        .data()
        .chunks_exact(ch)
        .map(|px| {
            let mut best = 0;
            for (k, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, labels)
}
