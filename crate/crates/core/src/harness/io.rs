//! Sequence directories and logits files.

use std::path::{Path, PathBuf};

use super::pnm::{self, Image8};
use super::synth::SyntheticSequence;
use crate::error::{Error, Result};
use crate::idmech::LabelMask;
use crate::tensor::Tensor;

pub const LOGITS_MAGIC: &[u8; 4] = b"MSLG";
pub const LOGITS_VERSION: u32 = 1;

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:04}.ppm"))
}

pub fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("mask_{t:04}.pgm"))
}

pub fn logits_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("logits_{t:04}.mslg"))
}

/// Frames in `[0, 1]` and the masks found next to them.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Tensor>,
    pub masks: Vec<LabelMask>,
}

pub fn image_to_tensor(img: &Image8) -> Tensor {
    Tensor::new(
        vec![img.height, img.width, img.channels],
        img.data.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .expect("image buffer matches its dimensions")
}

pub fn mask_to_image(mask: &LabelMask) -> Image8 {
    Image8 {
        height: mask.height(),
        width: mask.width(),
        channels: 1,
        data: mask.labels().to_vec(),
    }
}

/// Indices `0, 1, ...` for which `path_of(dir, t)` exists, stopping at the
/// first gap.
fn count_files(dir: &Path, path_of: fn(&Path, usize) -> PathBuf) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::format(dir, "not a directory"));
    }
    let mut n = 0;
    while path_of(dir, n).is_file() {
        n += 1;
    }
    Ok(n)
}

pub fn write_masks(dir: &Path, masks: &[LabelMask]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, m) in masks.iter().enumerate() {
        mask_to_image(m).write(&mask_path(dir, t))?;
    }
    Ok(())
}

pub fn write_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in seq.frames.iter().enumerate() {
        f.write(&frame_path(dir, t))?;
    }
    write_masks(dir, &seq.masks)
}

fn read_mask(path: &Path, max_objects: usize) -> Result<LabelMask> {
    let img = pnm::read(path)?;
    if img.channels != 1 {
        return Err(Error::format(path, "masks must be PGM (P5) images"));
    }
    if let Some(&bad) = img.data.iter().find(|&&l| l as usize > max_objects) {
        return Err(Error::Label {
            label: bad as u32,
            max: max_objects,
        });
    }
    LabelMask::new(img.height, img.width, img.data)
}

/// Every `mask_NNNN.pgm` in `dir`; at least one is required.
pub fn load_masks(dir: &Path, max_objects: usize) -> Result<Vec<LabelMask>> {
    let n = count_files(dir, mask_path)?;
    if n == 0 {
        return Err(Error::format(dir, "no mask_0000.pgm found"));
    }
    let masks = (0..n)
        .map(|t| read_mask(&mask_path(dir, t), max_objects))
        .collect::<Result<Vec<_>>>()?;
    check_sizes(dir, masks.iter().map(|m| m.dims()))?;
    Ok(masks)
}

fn check_sizes(dir: &Path, dims: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    let mut first = None;
    for (t, d) in dims.enumerate() {
        match first {
            None => first = Some(d),
            Some(f) if f != d => {
                return Err(Error::format(
                    dir,
                    format!("file {t} is {}×{} but file 0 is {}×{}", d.0, d.1, f.0, f.1),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn load_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let n = count_files(dir, frame_path)?;
    if n == 0 {
        return Err(Error::format(dir, "no frame_0000.ppm found"));
    }
    let frames = (0..n)
        .map(|t| {
            let path = frame_path(dir, t);
            let img = pnm::read(&path)?;
            if img.channels != 3 {
                return Err(Error::format(&path, "frames must be PPM (P6) images"));
            }
            Ok(image_to_tensor(&img))
        })
        .collect::<Result<Vec<_>>>()?;
    check_sizes(dir, frames.iter().map(|f| (f.shape()[0], f.shape()[1])))?;
    Ok(frames)
}

/// Frames plus masks. With `require_all_masks` the mask count must equal the
/// frame count; otherwise only the reference `mask_0000.pgm` is needed.
pub fn load_sequence(dir: &Path, max_objects: usize, require_all_masks: bool) -> Result<Sequence> {
    let frames = load_frames(dir)?;
    let masks = load_masks(dir, max_objects)?;
    if require_all_masks && masks.len() != frames.len() {
        return Err(Error::format(
            dir,
            format!("{} frames but {} masks", frames.len(), masks.len()),
        ));
    }
    let (h, w) = (frames[0].shape()[0], frames[0].shape()[1]);
    if masks[0].dims() != (h, w) {
        return Err(Error::format(
            mask_path(dir, 0),
            format!("mask is {:?} but frames are {h}×{w}", masks[0].dims()),
        ));
    }
    Ok(Sequence { frames, masks })
}

pub fn encode_logits(logits: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = logits.dims3()?;
    if !logits.is_finite() {
        return Err(Error::Range("logits must be finite".into()));
    }
    let mut out = Vec::with_capacity(20 + 4 * logits.numel());
    out.extend_from_slice(LOGITS_MAGIC);
    for v in [LOGITS_VERSION, h as u32, w as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in logits.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_logits(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 20 || &bytes[..4] != LOGITS_MAGIC {
        return Err(Error::format(path, "not a logits file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != LOGITS_VERSION {
        return Err(Error::format(path, format!("unsupported logits version {}", word(0))));
    }
    let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let payload = &bytes[20..];
    if payload.len() != 4 * h * w * c {
        return Err(Error::format(
            path,
            format!(
                "expected {} payload bytes for {h}×{w}×{c}, found {}",
                4 * h * w * c,
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![h, w, c], data)
}

pub fn save_logits(path: &Path, logits: &Tensor) -> Result<()> {
    std::fs::write(path, encode_logits(logits)?).map_err(|e| Error::io(path, e))
}

pub fn load_logits(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_logits(&bytes, path)
}

/// Every `logits_NNNN.mslg` in `dir`.
pub fn load_logits_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let n = count_files(dir, logits_path)?;
    if n == 0 {
        return Err(Error::format(dir, "no logits_0000.mslg found"));
    }
    (0..n).map(|t| load_logits(&logits_path(dir, t))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{render, RandomSceneParams, SyntheticSceneConfig};

    #[test]
    fn logits_round_trip_and_size() {
        let t = Tensor::from_fn(&[3, 5, 4], |i| (i as f32 * 0.37).sin() * 1e3);
        let bytes = encode_logits(&t).unwrap();
        // The header is magic plus four u32 words.
        assert_eq!(bytes.len(), 20 + 4 * 3 * 5 * 4);
        let back = decode_logits(&bytes, Path::new("l")).unwrap();
        assert_eq!(back.shape(), &[3, 5, 4]);
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_logits(&bad, Path::new("l")), Err(Error::Format { .. })));
        assert!(encode_logits(&Tensor::full(&[1, 1, 2], f32::NAN)).is_err());
    }

    #[test]
    fn generated_sequences_load_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticSceneConfig::random(&RandomSceneParams::default(), 4).unwrap();
        let seq = render(&cfg).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let loaded = load_sequence(dir.path(), 10, true).unwrap();
        assert_eq!(loaded.masks, seq.masks);
        for (f, img) in loaded.frames.iter().zip(&seq.frames) {
            let bytes: Vec<u8> = f.data().iter().map(|v| (v * 255.0).round() as u8).collect();
            assert_eq!(bytes, img.data);
        }
    }

    #[test]
    fn empty_and_bad_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_sequence(dir.path(), 10, false),
            Err(Error::Format { .. })
        ));
        let img = Image8 {
            height: 2,
            width: 2,
            channels: 1,
            data: vec![0, 1, 2, 12],
        };
        img.write(&mask_path(dir.path(), 0)).unwrap();
        assert!(matches!(
            load_masks(dir.path(), 10),
            Err(Error::Label { label: 12, .. })
        ));
    }
}
