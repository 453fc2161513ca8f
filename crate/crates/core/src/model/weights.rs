//! Binary weight files.
//!
//! Little-endian layout: magic `MSDW`, version `u32`, then `c16 c8 M
//! layers16 layers8` as `u32`, then named tensors until end of file, each as
//! name length `u32`, name bytes, rank `u32`, dims `u32 × rank`, `f32` payload.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSDW";
pub const VERSION: u32 = 1;

/// Architecture fields stored in a weight file header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightHeader {
    pub c16: usize,
    pub c8: usize,
    pub max_objects: usize,
    pub gpm_layers_16: usize,
    pub gpm_layers_8: usize,
}

impl WeightHeader {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            c16: cfg.c16,
            c8: cfg.c8,
            max_objects: cfg.max_objects,
            gpm_layers_16: cfg.gpm_layers_16,
            gpm_layers_8: cfg.gpm_layers_8,
        }
    }

    /// `base` with the architecture fields replaced by this header's.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            c16: self.c16,
            c8: self.c8,
            max_objects: self.max_objects,
            gpm_layers_16: self.gpm_layers_16,
            gpm_layers_8: self.gpm_layers_8,
            ..base.clone()
        }
    }
}

pub fn to_bytes(cfg: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let h = WeightHeader::of(cfg);
    for v in [
        VERSION as usize,
        h.c16,
        h.c8,
        h.max_objects,
        h.gpm_layers_16,
        h.gpm_layers_8,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (name, t) in params.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses a weight file. `base` supplies the non-architecture settings;
/// `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], base: &ModelConfig, path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "not a weight file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::format(
            path,
            format!("unsupported weight format version {version}"),
        ));
    }
    let header = WeightHeader {
        c16: r.u32("header")?,
        c8: r.u32("header")?,
        max_objects: r.u32("header")?,
        gpm_layers_16: r.u32("header")?,
        gpm_layers_8: r.u32("header")?,
    };
    let cfg = header.apply(base);
    cfg.validate()?;

    let mut tensors = BTreeMap::new();
    while !r.done() {
        let len = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("tensor rank")?;
        let dims = (0..rank).map(|_| r.u32("tensor dims")).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, format!("tensor {name} is too large")))?;
        let data = r
            .take(count, "tensor payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(path, format!("tensor {name} appears twice")));
        }
    }

    let mut params = ModelParams::seeded(&ModelConfig {
        template_mode: false,
        ..cfg.clone()
    })?;
    let expected: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for name in &expected {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        params
            .set_tensor(name, t)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    std::fs::write(path, to_bytes(cfg, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, base: &ModelConfig) -> Result<(ModelConfig, ModelParams)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, base, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            c16: 16,
            c8: 12,
            max_objects: 3,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small();
        let params = ModelParams::seeded(&cfg).unwrap();
        let bytes = to_bytes(&cfg, &params);
        let (cfg2, params2) = from_bytes(&bytes, &ModelConfig::default(), Path::new("w")).unwrap();
        assert_eq!(WeightHeader::of(&cfg2), WeightHeader::of(&cfg));
        for ((n1, t1), (n2, t2)) in params.named_tensors().into_iter().zip(params2.named_tensors()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2, "{n1}");
        }
        assert_eq!(to_bytes(&cfg2, &params2), bytes);
    }

    #[test]
    fn header_layout() {
        let cfg = small();
        let bytes = to_bytes(&cfg, &ModelParams::seeded(&cfg).unwrap());
        assert_eq!(&bytes[..4], b"MSDW");
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!(
            [word(0), word(1), word(2), word(3), word(4), word(5)],
            [1, 16, 12, 3, 2, 1]
        );
        // first tensor record: the identity bank
        assert_eq!(word(6), 4);
        assert_eq!(&bytes[32..36], b"bank");
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let cfg = small();
        let bytes = to_bytes(&cfg, &ModelParams::seeded(&cfg).unwrap());
        let p = Path::new("w.bin");
        let base = ModelConfig::default();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(from_bytes(&bad_magic, &base, p), Err(Error::Format { .. })));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3], &base, p),
            Err(Error::Format { .. })
        ));
        let mut bad_version = bytes.clone();
        bad_version[4] = 7;
        assert!(matches!(from_bytes(&bad_version, &base, p), Err(Error::Format { .. })));
    }
}
