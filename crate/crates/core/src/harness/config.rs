//! Flat `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::synth::RandomSceneParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

const MODEL_KEYS: &[&str] = &[
    "c16",
    "c8",
    "max_objects",
    "gpm_layers_16",
    "gpm_layers_8",
    "memory_interval",
    "window_radius",
    "short_term_16",
    "short_term_8",
    "template_mode",
    "template_sharpness",
    "seed",
];
const SCENE_KEYS: &[&str] = &["height", "width", "frames", "shapes", "max_speed", "block"];
const EVAL_KEYS: &[&str] = &["tolerance"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: BTreeMap<String, String>,
    source: String,
}

impl ConfigFile {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(source, format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_string();
            if ![MODEL_KEYS, SCENE_KEYS, EVAL_KEYS]
                .iter()
                .any(|keys| keys.contains(&key.as_str()))
            {
                return Err(Error::format(source, format!("line {}: unknown key {key}", n + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::format(source, format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self {
            entries,
            source: source.display().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("{}: invalid value {v:?} for {key}", self.source)))
            })
            .transpose()
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn apply_model(&self, cfg: &mut ModelConfig) -> Result<()> {
        self.set("c16", &mut cfg.c16)?;
        self.set("c8", &mut cfg.c8)?;
        self.set("max_objects", &mut cfg.max_objects)?;
        self.set("gpm_layers_16", &mut cfg.gpm_layers_16)?;
        self.set("gpm_layers_8", &mut cfg.gpm_layers_8)?;
        self.set("memory_interval", &mut cfg.memory_interval)?;
        self.set("window_radius", &mut cfg.window_radius)?;
        self.set("short_term_16", &mut cfg.short_term_16)?;
        self.set("short_term_8", &mut cfg.short_term_8)?;
        self.set("template_mode", &mut cfg.template_mode)?;
        self.set("template_sharpness", &mut cfg.template_sharpness)?;
        self.set("seed", &mut cfg.seed)
    }

    pub fn apply_scene(&self, p: &mut RandomSceneParams) -> Result<()> {
        self.set("height", &mut p.height)?;
        self.set("width", &mut p.width)?;
        self.set("frames", &mut p.frames)?;
        self.set("shapes", &mut p.shapes)?;
        self.set("max_speed", &mut p.max_speed)?;
        self.set("block", &mut p.block)
    }

    pub fn tolerance(&self) -> Result<Option<f64>> {
        self.get("tolerance")
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.get("seed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_applies() {
        let text = "# model\nc16 = 32\nc8=16 # half\n\ntemplate_mode = true\nframes = 7\n";
        let cfg = ConfigFile::parse(text, Path::new("a.cfg")).unwrap();
        let mut m = ModelConfig::default();
        cfg.apply_model(&mut m).unwrap();
        assert_eq!((m.c16, m.c8, m.template_mode), (32, 16, true));
        let mut s = RandomSceneParams::default();
        cfg.apply_scene(&mut s).unwrap();
        assert_eq!(s.frames, 7);
    }

    #[test]
    fn rejects_bad_lines() {
        let p = Path::new("b.cfg");
        assert!(matches!(ConfigFile::parse("c16 32", p), Err(Error::Format { .. })));
        assert!(ConfigFile::parse("colour = red", p).is_err());
        assert!(ConfigFile::parse("c16 = 1\nc16 = 2", p).is_err());
        let cfg = ConfigFile::parse("c16 = many", p).unwrap();
        assert!(matches!(
            cfg.apply_model(&mut ModelConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
