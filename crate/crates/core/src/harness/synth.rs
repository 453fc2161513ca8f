//! Seeded synthetic scenes: flat-coloured rectangles and disks translating
//! over a flat background, with ground-truth masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pnm::Image8;
use crate::error::{Error, Result};
use crate::idmech::{LabelMask, DEFAULT_MAX_OBJECTS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect {
        height: usize,
        width: usize,
    },
    /// Disk inscribed in a `diameter × diameter` box.
    Disk {
        diameter: usize,
    },
}

impl ShapeKind {
    pub fn extent(&self) -> (usize, usize) {
        match *self {
            ShapeKind::Rect { height, width } => (height, width),
            ShapeKind::Disk { diameter } => (diameter, diameter),
        }
    }

    /// Whether the box-relative pixel `(y, x)` is covered.
    fn covers(&self, y: usize, x: usize) -> bool {
        match *self {
            ShapeKind::Rect { .. } => true,
            ShapeKind::Disk { diameter } => {
                let r = diameter as f64 / 2.0;
                let dy = y as f64 + 0.5 - r;
                let dx = x as f64 + 0.5 - r;
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Top-left corner of the bounding box at frame 0.
    pub origin: (i64, i64),
    /// Pixels per frame, `(dy, dx)`.
    pub velocity: (i64, i64),
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: [u8; 3],
    /// Drawn in order; later shapes occlude earlier ones and get label `i + 1`.
    pub shapes: Vec<ShapeSpec>,
    pub max_objects: usize,
}

/// Colour of equal brightness and chroma at `hue_deg`.
pub fn hue_color(hue_deg: f64) -> [u8; 3] {
    let h = hue_deg.to_radians();
    let third = 2.0 * std::f64::consts::PI / 3.0;
    let ch = |offset: f64| (128.0 + 100.0 * (h - offset).cos()).round() as u8;
    [ch(0.0), ch(third), ch(-third)]
}

/// Parameters for [`SyntheticSceneConfig::random`].
#[derive(Clone, Debug, PartialEq)]
pub struct RandomSceneParams {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shapes: usize,
    pub max_speed: i64,
    /// Shape sizes and frame-0 positions are multiples of this.
    pub block: usize,
}

impl Default for RandomSceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 20,
            shapes: 2,
            max_speed: 2,
            block: 16,
        }
    }
}

impl SyntheticSceneConfig {
    /// A random scene: `shapes` non-overlapping block-aligned shapes of one
    /// or two blocks per side, integer velocities up to `max_speed` per axis,
    /// and evenly spaced hues with the background at hue 0.
    pub fn random(params: &RandomSceneParams, seed: u64) -> Result<Self> {
        let p = params;
        if p.shapes == 0 {
            return Err(Error::Config("a scene needs at least one shape".into()));
        }
        if p.shapes > DEFAULT_MAX_OBJECTS {
            return Err(Error::Capacity {
                count: p.shapes,
                capacity: DEFAULT_MAX_OBJECTS,
            });
        }
        if p.block == 0 || p.height < 2 * p.block || p.width < 2 * p.block {
            return Err(Error::Config(format!(
                "a {}×{} canvas is too small for {}-pixel blocks",
                p.height, p.width, p.block
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gh, gw) = (p.height / p.block, p.width / p.block);
        let mut taken = vec![false; gh * gw];
        let mut shapes = Vec::with_capacity(p.shapes);
        for i in 0..p.shapes {
            let mut placed = None;
            for _ in 0..1000 {
                let bh = rng.random_range(1..=2usize);
                let bw = rng.random_range(1..=2usize);
                let (by, bx) = (rng.random_range(0..=gh - bh), rng.random_range(0..=gw - bw));
                let cells: Vec<usize> = (by..by + bh)
                    .flat_map(|y| (bx..bx + bw).map(move |x| y * gw + x))
                    .collect();
                if cells.iter().all(|&c| !taken[c]) {
                    cells.iter().for_each(|&c| taken[c] = true);
                    placed = Some((bh, bw, by, bx));
                    break;
                }
            }
            let (bh, bw, by, bx) =
                placed.ok_or_else(|| Error::Config(format!("could not place {} non-overlapping shapes", p.shapes)))?;
            let kind = if bh == bw && rng.random_bool(0.5) {
                ShapeKind::Disk { diameter: bh * p.block }
            } else {
                ShapeKind::Rect {
                    height: bh * p.block,
                    width: bw * p.block,
                }
            };
            let velocity = (
                rng.random_range(-p.max_speed..=p.max_speed),
                rng.random_range(-p.max_speed..=p.max_speed),
            );
            shapes.push(ShapeSpec {
                kind,
                origin: ((by * p.block) as i64, (bx * p.block) as i64),
                velocity,
                color: hue_color(360.0 * (i + 1) as f64 / (p.shapes + 1) as f64),
            });
        }
        Ok(Self {
            height: p.height,
            width: p.width,
            frames: p.frames,
            background: hue_color(0.0),
            shapes,
            max_objects: DEFAULT_MAX_OBJECTS,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.frames == 0 {
            return Err(Error::Config("a scene needs at least one shape and one frame".into()));
        }
        if self.shapes.len() > self.max_objects {
            return Err(Error::Capacity {
                count: self.shapes.len(),
                capacity: self.max_objects,
            });
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let (h, w) = s.kind.extent();
            let (y, x) = s.origin;
            if h == 0 || w == 0 || y < 0 || x < 0 || y as usize + h > self.height || x as usize + w > self.width {
                return Err(Error::Config(format!("shape {i} is not inside the canvas at frame 0")));
            }
        }
        Ok(())
    }
}

/// Rendered frames (RGB) and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<Image8>,
    pub masks: Vec<LabelMask>,
}

/// Moves one axis by its velocity, clamping at the canvas edge and
/// reflecting the velocity there.
fn step(pos: &mut i64, vel: &mut i64, extent: usize, limit: usize) {
    let max = (limit - extent) as i64;
    *pos += *vel;
    if *pos < 0 {
        *pos = 0;
        *vel = -*vel;
    } else if *pos > max {
        *pos = max;
        *vel = -*vel;
    }
}

pub fn render(cfg: &SyntheticSceneConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut state: Vec<(i64, i64, i64, i64)> = cfg
        .shapes
        .iter()
        .map(|s| (s.origin.0, s.origin.1, s.velocity.0, s.velocity.1))
        .collect();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            for (s, st) in cfg.shapes.iter().zip(state.iter_mut()) {
                let (eh, ew) = s.kind.extent();
                step(&mut st.0, &mut st.2, eh, h);
                step(&mut st.1, &mut st.3, ew, w);
            }
        }
        let mut labels = vec![0u8; h * w];
        let mut rgb: Vec<u8> = cfg.background.repeat(h * w);
        for (i, (s, st)) in cfg.shapes.iter().zip(&state).enumerate() {
            let (eh, ew) = s.kind.extent();
            let (oy, ox) = (st.0 as usize, st.1 as usize);
            for dy in 0..eh {
                for dx in 0..ew {
                    if s.kind.covers(dy, dx) {
                        let px = (oy + dy) * w + ox + dx;
                        labels[px] = (i + 1) as u8;
                        rgb[px * 3..px * 3 + 3].copy_from_slice(&s.color);
                    }
                }
            }
        }
        frames.push(Image8 {
            height: h,
            width: w,
            channels: 3,
            data: rgb,
        });
        masks.push(LabelMask::new(h, w, labels)?);
    }
    Ok(SyntheticSequence { frames, masks })
}
