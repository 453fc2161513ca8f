//! The two-stage propagation network.
//!
//! A frame is encoded into stride 4/8/16 features, the stride-16 map is
//! projected into three pyramid levels next to the stride-8 level, and two
//! propagation stages run coarse to fine: two layers at stride 16, a decoder
//! block up to stride 8, one layer at stride 8, and a decode head whose
//! logits are upsampled back to frame size.
//!
//! `template_mode` swaps the learned weights for a fixed construction:
//! pooled raw pixels as features, identity projections, open gates, and a
//! head that reads identity scores back with the dual basis of the identity
//! bank. Propagation then reduces to nearest-neighbour label transfer by
//! feature cosine, which makes the whole pipeline testable without training.

mod encoder;
mod memory;
pub mod weights;

pub use encoder::{encode_frame, encode_frame_template, expand_channels, Conv, EncoderParams, FrameFeatures};
pub use memory::{FrameMemory, MemoryBank, StageMemory};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gpm::{self, build_memory_entry, gpm_layer, GpmParams, LayerMemory, LayerOptions};
use crate::idmech::{self, assign_identities, decode_labels, encode_id_embedding, IdentityBank, LabelMask};
use crate::init::gaussian;
use crate::tensor::{self, matmul, Tensor};
use encoder::{relu, tokens, untokens, upsample2};

pub const DEFAULT_MEMORY_INTERVAL: usize = 5;
/// Attention logit per unit of feature cosine in template mode.
pub const DEFAULT_TEMPLATE_SHARPNESS: f32 = 2000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub c16: usize,
    pub c8: usize,
    pub max_objects: usize,
    pub gpm_layers_16: usize,
    pub gpm_layers_8: usize,
    pub memory_interval: usize,
    pub window_radius: usize,
    pub short_term_16: bool,
    pub short_term_8: bool,
    pub template_mode: bool,
    pub template_sharpness: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c16: 64,
            c8: 32,
            max_objects: idmech::DEFAULT_MAX_OBJECTS,
            gpm_layers_16: 2,
            gpm_layers_8: 1,
            memory_interval: DEFAULT_MEMORY_INTERVAL,
            window_radius: gpm::DEFAULT_WINDOW_RADIUS,
            short_term_16: true,
            short_term_8: true,
            template_mode: false,
            template_sharpness: DEFAULT_TEMPLATE_SHARPNESS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn template() -> Self {
        Self {
            template_mode: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.c16 == 0 || self.c8 == 0 {
            return fail(format!("stage widths must be positive, got {}/{}", self.c16, self.c8));
        }
        if self.max_objects == 0 || self.max_objects > 255 {
            return fail(format!("max_objects must be in 1..=255, got {}", self.max_objects));
        }
        if self.gpm_layers_16 == 0 || self.gpm_layers_8 == 0 {
            return fail("each stage needs at least one propagation layer".into());
        }
        if self.memory_interval == 0 {
            return fail("memory_interval must be ≥ 1".into());
        }
        if self.template_mode {
            if self.c8 > self.c16 {
                return fail("template mode needs c8 ≤ c16".into());
            }
            if self.max_objects + 1 > self.c8 {
                return fail(format!(
                    "template mode needs max_objects + 1 ≤ c8 ({} > {})",
                    self.max_objects + 1,
                    self.c8
                ));
            }
            if !(self.template_sharpness.is_finite() && self.template_sharpness > 0.0) {
                return fail("template_sharpness must be positive".into());
            }
        }
        Ok(())
    }

    fn layer_options(&self, stride: usize) -> LayerOptions {
        LayerOptions {
            window_radius: self.window_radius,
            short_term: if stride == 16 {
                self.short_term_16
            } else {
                self.short_term_8
            },
        }
    }
}

/// All learnable tensors of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub bank: IdentityBank,
    pub encoder: EncoderParams,
    /// Per-level token projections: `[f8, f16, f16 copy, f16 copy]`.
    pub pyramid: [Tensor; 4],
    pub gpm16: Vec<GpmParams>,
    pub gpm8: Vec<GpmParams>,
    /// Same-resolution decoder blocks after each stride-16 layer.
    pub decoder16: Vec<Conv>,
    /// Stride 16 → 8 decoder block.
    pub decoder_up: Conv,
    /// Same-resolution decoder blocks between stride-8 layers.
    pub decoder8: Vec<Conv>,
    /// Maps identity-bank rows to stage-8 width.
    pub id_embed8: Tensor,
    /// Carries the stride-16 identity stream into stage 8.
    pub id_carry: Tensor,
    pub head_id: Tensor,
    pub head_conv: Conv,
}

impl ModelParams {
    pub fn seeded(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bank = IdentityBank::seeded(cfg.max_objects, cfg.c16, rng_seed(&mut rng))?;
        let (c8, c16, k) = (cfg.c8, cfg.c16, cfg.max_objects + 1);
        let encoder = EncoderParams::seeded(&mut rng, c8, c16);
        let s8 = 1.0 / (c8 as f32).sqrt();
        let s16 = 1.0 / (c16 as f32).sqrt();
        let pyramid = [
            gaussian(&mut rng, &[c8, c8], s8),
            gaussian(&mut rng, &[c16, c16], s16),
            gaussian(&mut rng, &[c16, c16], s16),
            gaussian(&mut rng, &[c16, c16], s16),
        ];
        let gpm16 = (0..cfg.gpm_layers_16)
            .map(|_| GpmParams::seeded(&mut rng, c16))
            .collect();
        let gpm8 = (0..cfg.gpm_layers_8).map(|_| GpmParams::seeded(&mut rng, c8)).collect();
        let decoder16 = (0..cfg.gpm_layers_16)
            .map(|_| Conv::seeded(&mut rng, c16, c16))
            .collect();
        let decoder_up = Conv::seeded(&mut rng, c16, c8);
        let decoder8 = (1..cfg.gpm_layers_8).map(|_| Conv::seeded(&mut rng, c8, c8)).collect();
        Ok(Self {
            bank,
            encoder,
            pyramid,
            gpm16,
            gpm8,
            decoder16,
            decoder_up,
            decoder8,
            id_embed8: gaussian(&mut rng, &[c16, c8], s16),
            id_carry: gaussian(&mut rng, &[c16, c8], s16),
            head_id: gaussian(&mut rng, &[c8, k], s8),
            head_conv: Conv::seeded(&mut rng, c8, k),
        })
    }

    /// Template construction; only the identity bank is drawn from the seed.
    pub fn template(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if !cfg.template_mode {
            return Err(Error::Config("template parameters need template_mode".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bank = IdentityBank::seeded(cfg.max_objects, cfg.c16, rng_seed(&mut rng))?;
        let (c8, c16, k) = (cfg.c8, cfg.c16, cfg.max_objects + 1);
        let encoder = EncoderParams::seeded(&mut rng, c8, c16);
        let id_embed8 = Tensor::from_fn(&[c16, c8], |i| if i / c8 == i % c8 { 1.0 } else { 0.0 });
        let stage8_rows = matmul(bank.vectors(), &id_embed8)?;
        let head_id = dual_basis(&stage8_rows)?;
        Ok(Self {
            bank,
            encoder,
            pyramid: [Tensor::eye(c8), Tensor::eye(c16), Tensor::eye(c16), Tensor::eye(c16)],
            gpm16: (0..cfg.gpm_layers_16)
                .map(|_| GpmParams::template(c16, cfg.template_sharpness))
                .collect(),
            gpm8: (0..cfg.gpm_layers_8)
                .map(|_| GpmParams::template(c8, cfg.template_sharpness))
                .collect(),
            decoder16: (0..cfg.gpm_layers_16).map(|_| Conv::zero(c16, c16)).collect(),
            decoder_up: Conv::zero(c16, c8),
            decoder8: (1..cfg.gpm_layers_8).map(|_| Conv::zero(c8, c8)).collect(),
            id_embed8,
            id_carry: Tensor::zeros(&[c16, c8]),
            head_id,
            head_conv: Conv::zero(c8, k),
        })
    }

    /// Every tensor with its stable name, in file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("bank".to_string(), self.bank.vectors())];
        for (i, c) in self.encoder.convs.iter().enumerate() {
            out.push((format!("encoder.conv{i}.kernel"), &c.kernel));
            out.push((format!("encoder.conv{i}.bias"), &c.bias));
        }
        for (i, p) in self.pyramid.iter().enumerate() {
            out.push((format!("pyramid.level{i}"), p));
        }
        for (i, g) in self.gpm16.iter().enumerate() {
            out.extend(g.named_tensors(&format!("gpm16.{i}")));
        }
        for (i, g) in self.gpm8.iter().enumerate() {
            out.extend(g.named_tensors(&format!("gpm8.{i}")));
        }
        let convs = self
            .decoder16
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("decoder16.{i}"), c))
            .chain(std::iter::once(("decoder_up".to_string(), &self.decoder_up)))
            .chain(
                self.decoder8
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (format!("decoder8.{i}"), c)),
            )
            .chain(std::iter::once(("head_conv".to_string(), &self.head_conv)));
        for (name, c) in convs {
            out.push((format!("{name}.kernel"), &c.kernel));
            out.push((format!("{name}.bias"), &c.bias));
        }
        out.push(("id_embed8".into(), &self.id_embed8));
        out.push(("id_carry".into(), &self.id_carry));
        out.push(("head_id".into(), &self.head_id));
        out
    }

    fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        if name == "bank" {
            self.bank = IdentityBank::from_vectors(value)?;
            return Ok(());
        }
        let slot = self.tensor_slot(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    fn tensor_slot(&mut self, name: &str) -> Result<&mut Tensor> {
        let missing = || Error::Config(format!("unknown tensor {name}"));
        let (head, rest) = name.split_once('.').unwrap_or((name, ""));
        match head {
            "encoder" => {
                let (conv, field) = rest.split_once('.').ok_or_else(missing)?;
                let idx: usize = conv
                    .strip_prefix("conv")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(missing)?;
                let c = self.encoder.convs.get_mut(idx).ok_or_else(missing)?;
                conv_field(c, field).ok_or_else(missing)
            }
            "pyramid" => {
                let idx: usize = rest
                    .strip_prefix("level")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(missing)?;
                self.pyramid.get_mut(idx).ok_or_else(missing)
            }
            "gpm16" | "gpm8" => {
                let (idx, _) = rest.split_once('.').ok_or_else(missing)?;
                let idx: usize = idx.parse().map_err(|_| missing())?;
                let layers = if head == "gpm16" {
                    &mut self.gpm16
                } else {
                    &mut self.gpm8
                };
                let layer = layers.get_mut(idx).ok_or_else(missing)?;
                let prefix = format!("{head}.{idx}");
                layer
                    .named_tensors_mut(&prefix)
                    .into_iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t)
                    .ok_or_else(missing)
            }
            "decoder16" | "decoder8" => {
                let (idx, field) = rest.split_once('.').ok_or_else(missing)?;
                let idx: usize = idx.parse().map_err(|_| missing())?;
                let convs = if head == "decoder16" {
                    &mut self.decoder16
                } else {
                    &mut self.decoder8
                };
                conv_field(convs.get_mut(idx).ok_or_else(missing)?, field).ok_or_else(missing)
            }
            "decoder_up" => conv_field(&mut self.decoder_up, rest).ok_or_else(missing),
            "head_conv" => conv_field(&mut self.head_conv, rest).ok_or_else(missing),
            "id_embed8" if rest.is_empty() => Ok(&mut self.id_embed8),
            "id_carry" if rest.is_empty() => Ok(&mut self.id_carry),
            "head_id" if rest.is_empty() => Ok(&mut self.head_id),
            _ => Err(missing()),
        }
    }
}

fn conv_field<'a>(c: &'a mut Conv, field: &str) -> Option<&'a mut Tensor> {
    match field {
        "kernel" => Some(&mut c.kernel),
        "bias" => Some(&mut c.bias),
        _ => None,
    }
}

fn rng_seed(rng: &mut ChaCha8Rng) -> u64 {
    use rand::Rng;
    rng.random()
}

/// `Rᵀ (R Rᵀ)⁻¹` for linearly independent rows `R` (`k × c`), so that
/// `R · D = I`: a token equal to `Σⱼ wⱼ Rⱼ` reads back as the weights `w`.
pub fn dual_basis(rows: &Tensor) -> Result<Tensor> {
    let (k, c) = rows.dims2()?;
    let r = |i: usize, j: usize| rows.at2(i, j) as f64;
    let mut gram = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = (0..c).map(|p| r(i, p) * r(j, p)).sum();
        }
    }
    // Gauss-Jordan with partial pivoting on [G | I].
    let mut inv = vec![0.0f64; k * k];
    for i in 0..k {
        inv[i * k + i] = 1.0;
    }
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&a, &b| gram[a * k + col].abs().total_cmp(&gram[b * k + col].abs()))
            .expect("non-empty range");
        if gram[pivot * k + col].abs() < 1e-12 {
            return Err(Error::Config("identity rows are linearly dependent".into()));
        }
        for j in 0..k {
            gram.swap(col * k + j, pivot * k + j);
            inv.swap(col * k + j, pivot * k + j);
        }
        let d = gram[col * k + col];
        for j in 0..k {
            gram[col * k + j] /= d;
            inv[col * k + j] /= d;
        }
        for row in 0..k {
            if row != col {
                let f = gram[row * k + col];
                if f != 0.0 {
                    for j in 0..k {
                        gram[row * k + j] -= f * gram[col * k + j];
                        inv[row * k + j] -= f * inv[col * k + j];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_fn(&[c, k], |i| {
        let (p, j) = (i / k, i % k);
        (0..k).map(|m| r(m, p) * inv[m * k + j]).sum::<f64>() as f32
    }))
}

/// The four pyramid levels consumed by the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// `[f8, f16, f16 copy a, f16 copy b]`, each projected by its own level matrix.
    pub levels: [Tensor; 4],
}

/// Drops f4 and fills the two coarsest levels with further projections of f16.
pub fn build_feature_pyramid(feats: &FrameFeatures, projections: &[Tensor; 4]) -> Result<FeaturePyramid> {
    let project = |x: &Tensor, w: &Tensor| -> Result<Tensor> {
        let (t, grid) = tokens(x)?;
        untokens(&matmul(&t, w)?, grid)
    };
    Ok(FeaturePyramid {
        levels: [
            project(&feats.f8, &projections[0])?,
            project(&feats.f16, &projections[1])?,
            project(&feats.f16, &projections[2])?,
            project(&feats.f16, &projections[3])?,
        ],
    })
}

/// Normalized per-layer visual inputs of one frame, kept so the frame can be
/// written into memory once its mask is known.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    pub stage16: Vec<Tensor>,
    pub stage8: Vec<Tensor>,
    pub grid16: (usize, usize),
    pub grid8: (usize, usize),
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// `h × w × (M + 1)` logits at the original frame size.
    pub logits: Tensor,
    pub features: StageFeatures,
    /// Stride-16 identity stream read back as per-slot scores
    /// (`grid16 × (M + 1)`).
    pub coarse_scores: Tensor,
}

/// Per-frame result of [`Model::propagate_sequence_detailed`]. Masks are in
/// the caller's label space; logit and score channels are identity slots,
/// mapped back through `slot_labels` (the identity whenever every label is
/// at most `max_objects`).
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub mask: LabelMask,
    pub logits: Tensor,
    /// Stride-16 labels (reference frame: the nearest-resampled reference).
    pub coarse_labels: LabelMask,
    /// Stride-16 identity scores, `grid16 × (M + 1)`; one-hot on frame 0.
    pub coarse_scores: Tensor,
    /// Caller label of each slot.
    pub slot_labels: Vec<u8>,
}

pub struct Model {
    cfg: ModelConfig,
    params: ModelParams,
    coarse_readout: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let params = if cfg.template_mode {
            ModelParams::template(&cfg)?
        } else {
            ModelParams::seeded(&cfg)?
        };
        Self::with_params(cfg, params)
    }

    pub fn with_params(cfg: ModelConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        let reference = ModelParams::seeded(&ModelConfig {
            template_mode: false,
            ..cfg.clone()
        })?;
        let expected: Vec<(String, Vec<usize>)> = reference
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected != got {
            return Err(Error::dim("parameters do not match the configured architecture"));
        }
        let coarse_readout = dual_basis(params.bank.vectors())?;
        Ok(Self {
            cfg,
            params,
            coarse_readout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn bank(&self) -> &IdentityBank {
        &self.params.bank
    }

    pub fn new_memory(&self) -> MemoryBank {
        MemoryBank::new(self.cfg.memory_interval)
    }

    fn padded(&self, frame: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (h, w, c) = frame.dims3()?;
        if c != 3 {
            return Err(Error::dim(format!("expected an RGB frame, got {c} channels")));
        }
        let ph = h.div_ceil(16) * 16;
        let pw = w.div_ceil(16) * 16;
        Ok((frame.pad_edge(ph, pw)?, h, w))
    }

    pub fn encode(&self, padded: &Tensor, frame_index: usize) -> Result<FrameFeatures> {
        if self.cfg.template_mode {
            encode_frame_template(
                padded,
                [encoder::STEM_WIDTHS[1], self.cfg.c8, self.cfg.c16],
                frame_index,
            )
        } else {
            encode_frame(padded, &self.params.encoder, frame_index)
        }
    }

    /// Identity embeddings of a (slot-labelled, padded-size) mask at both stages.
    fn id_embeddings(
        &self,
        mask: &LabelMask,
        grid16: (usize, usize),
        grid8: (usize, usize),
    ) -> Result<(Tensor, Tensor)> {
        let e16 = encode_id_embedding(mask, &self.params.bank, grid16.0, grid16.1)?;
        let e8 = encode_id_embedding(mask, &self.params.bank, grid8.0, grid8.1)?;
        let (t16, _) = tokens(&e16)?;
        let (t8, _) = tokens(&e8)?;
        Ok((t16, matmul(&t8, &self.params.id_embed8)?))
    }

    /// Shared forward pass. `memory == None` runs self-propagation only with
    /// the given identity tokens (used to memorize the reference frame).
    fn forward(
        &self,
        pyramid: &FeaturePyramid,
        memory: Option<&MemoryBank>,
        init_id: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Tensor, StageFeatures, Tensor)> {
        let p = &self.params;
        let (mut x16, grid16) = tokens(&pyramid.levels[1])?;
        let (level0, grid8) = tokens(&pyramid.levels[0])?;
        let mut id16 = match init_id {
            Some((i16, _)) => i16.clone(),
            None => Tensor::zeros(&[grid16.0 * grid16.1, self.cfg.c16]),
        };
        let opts16 = self.cfg.layer_options(16);
        let opts8 = self.cfg.layer_options(8);

        if let Some(mem) = memory {
            if mem.is_empty() {
                return Err(Error::EmptyMemory("segmenting needs a memorized reference frame"));
            }
            for stage in [&mem.stage16, &mem.stage8] {
                let grid = if stage.stride == 16 { grid16 } else { grid8 };
                for f in stage.long_term.iter().chain(stage.short_term.as_ref()) {
                    if f.layers.iter().any(|e| e.grid != grid) {
                        return Err(Error::dim(format!(
                            "memory frame {} at stride {} has a different size than the current frame",
                            f.frame_index, stage.stride
                        )));
                    }
                }
            }
        }

        let mut feats16 = Vec::with_capacity(p.gpm16.len());
        for (l, layer) in p.gpm16.iter().enumerate() {
            feats16.push(layer.memory_features(&x16)?);
            let long;
            let layer_mem = match memory {
                Some(m) => {
                    long = m.stage16.long_term_layer(l);
                    LayerMemory::Frames {
                        long_term: &long,
                        short_term: m.stage16.short_term.as_ref().map(|f| &f.layers[l]),
                    }
                }
                None => LayerMemory::SelfOnly,
            };
            let (v, i) = gpm_layer(&x16, &id16, grid16, layer_mem, layer, &opts16)?;
            gpm::instrument::record_layer_pass(16);
            id16 = i;
            // same-resolution decoder block with the next duplicated f16 level
            let shortcut = &pyramid.levels[2 + l % 2];
            let decoded = relu(&p.decoder16[l].forward(&untokens(&v, grid16)?, 1)?);
            x16 = tokens(&decoded.add(shortcut)?)?.0;
        }
        let coarse_scores = matmul(&id16, &self.coarse_readout)?;

        let up = upsample2(&relu(&p.decoder_up.forward(&untokens(&x16, grid16)?, 1)?))?;
        let mut x8 = tokens(&up)?.0.add(&level0)?;
        let carried = untokens(&matmul(&id16, &p.id_carry)?, grid16)?;
        let mut id8 = tokens(&upsample2(&carried)?)?.0;
        if let Some((_, i8)) = init_id {
            id8 = id8.add(i8)?;
        }

        let mut feats8 = Vec::with_capacity(p.gpm8.len());
        for (l, layer) in p.gpm8.iter().enumerate() {
            if l > 0 {
                let decoded = relu(&p.decoder8[l - 1].forward(&untokens(&x8, grid8)?, 1)?);
                x8 = tokens(&decoded)?.0.add(&level0)?;
            }
            feats8.push(layer.memory_features(&x8)?);
            let long;
            let layer_mem = match memory {
                Some(m) => {
                    long = m.stage8.long_term_layer(l);
                    LayerMemory::Frames {
                        long_term: &long,
                        short_term: m.stage8.short_term.as_ref().map(|f| &f.layers[l]),
                    }
                }
                None => LayerMemory::SelfOnly,
            };
            let (v, i) = gpm_layer(&x8, &id8, grid8, layer_mem, layer, &opts8)?;
            gpm::instrument::record_layer_pass(8);
            x8 = v;
            id8 = i;
        }

        let head = matmul(&id8, &p.head_id)?;
        let logits8 = p
            .head_conv
            .forward(&untokens(&x8, grid8)?, 1)?
            .add(&untokens(&head, grid8)?)?;
        let features = StageFeatures {
            stage16: feats16,
            stage8: feats8,
            grid16,
            grid8,
        };
        Ok((logits8, features, coarse_scores))
    }

    /// Segments one frame against the memory; logits come back at frame size.
    pub fn segment_frame(&self, frame: &Tensor, memory: &MemoryBank, frame_index: usize) -> Result<FrameOutput> {
        let (padded, h, w) = self.padded(frame)?;
        let feats = self.encode(&padded, frame_index)?;
        let pyramid = build_feature_pyramid(&feats, &self.params.pyramid)?;
        let (logits8, features, coarse_scores) = self.forward(&pyramid, Some(memory), None)?;
        let (ph, pw, _) = padded.dims3()?;
        let logits = tensor::resize_bilinear(&logits8, ph, pw)?.crop(h, w)?;
        Ok(FrameOutput {
            logits,
            features,
            coarse_scores,
        })
    }

    /// Writes a frame with a known slot-labelled mask into memory. The frame
    /// is first run through the network with self-propagation only.
    pub fn memorize_frame(
        &self,
        memory: &mut MemoryBank,
        frame: &Tensor,
        mask: &LabelMask,
        frame_index: usize,
    ) -> Result<()> {
        let (padded, h, w) = self.padded(frame)?;
        if mask.dims() != (h, w) {
            return Err(Error::dim(format!(
                "mask {:?} does not match frame {h}×{w}",
                mask.dims()
            )));
        }
        let feats = self.encode(&padded, frame_index)?;
        let pyramid = build_feature_pyramid(&feats, &self.params.pyramid)?;
        let padded_mask = pad_mask(mask, padded.shape()[0], padded.shape()[1]);
        let grid16 = (pyramid.levels[1].shape()[0], pyramid.levels[1].shape()[1]);
        let grid8 = (pyramid.levels[0].shape()[0], pyramid.levels[0].shape()[1]);
        let (id16, id8) = self.id_embeddings(&padded_mask, grid16, grid8)?;
        let (_, features, _) = self.forward(&pyramid, None, Some((&id16, &id8)))?;
        self.store(memory, frame_index, &features, &padded_mask)
    }

    /// Stores a segmented frame: its decoded labels are re-encoded through
    /// the identity bank as the memory's identity values.
    pub fn update_memory(
        &self,
        memory: &mut MemoryBank,
        frame_index: usize,
        features: &StageFeatures,
        predicted_logits: &Tensor,
    ) -> Result<()> {
        let labels = decode_labels(predicted_logits)?;
        let ph = features.grid16.0 * 16;
        let pw = features.grid16.1 * 16;
        self.store(memory, frame_index, features, &pad_mask(&labels, ph, pw))
    }

    fn store(
        &self,
        memory: &mut MemoryBank,
        frame_index: usize,
        features: &StageFeatures,
        padded_mask: &LabelMask,
    ) -> Result<()> {
        let (id16, id8) = self.id_embeddings(padded_mask, features.grid16, features.grid8)?;
        let build = |layers: &[GpmParams], feats: &[Tensor], id: &Tensor, stride, grid| -> Result<FrameMemory> {
            let entries = layers
                .iter()
                .zip(feats)
                .map(|(p, f)| build_memory_entry(f, id, p, frame_index, stride, grid))
                .collect::<Result<Vec<_>>>()?;
            Ok(FrameMemory {
                frame_index,
                layers: entries,
            })
        };
        let f16 = build(&self.params.gpm16, &features.stage16, &id16, 16, features.grid16)?;
        let f8 = build(&self.params.gpm8, &features.stage8, &id8, 8, features.grid8)?;
        memory.insert(f16, f8);
        Ok(())
    }

    /// Propagates the reference mask through a sequence.
    pub fn propagate_sequence(&self, frames: &[Tensor], reference: &LabelMask) -> Result<Vec<(LabelMask, Tensor)>> {
        Ok(self
            .propagate_sequence_detailed(frames, reference)?
            .into_iter()
            .map(|r| (r.mask, r.logits))
            .collect())
    }

    pub fn propagate_sequence_detailed(&self, frames: &[Tensor], reference: &LabelMask) -> Result<Vec<FrameResult>> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Argument("a sequence needs at least one frame".into()))?;
        let (h, w, _) = first.dims3()?;
        if reference.dims() != (h, w) {
            return Err(Error::dim(format!(
                "reference mask {:?} does not match frame 0 ({h}×{w})",
                reference.dims()
            )));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != first.shape() {
                return Err(Error::dim(format!(
                    "frame {t} has shape {:?}, frame 0 has {:?}",
                    f.shape(),
                    first.shape()
                )));
            }
        }
        let (to_slot, from_slot) = slot_maps(reference, self.cfg.max_objects)?;
        let slot_ref = reference.relabel(|l| to_slot[l as usize]);

        let mut memory = self.new_memory();
        self.memorize_frame(&mut memory, first, &slot_ref, 0)?;

        let grid16 = memory.stage16.long_term[0].layers[0].grid;
        let slot_labels = from_slot[..=self.cfg.max_objects].to_vec();
        let coarse_ref = pad_mask(&slot_ref, grid16.0 * 16, grid16.1 * 16).resize_nearest(grid16.0, grid16.1)?;
        let mut out = Vec::with_capacity(frames.len());
        out.push(FrameResult {
            mask: reference.clone(),
            logits: idmech::one_hot_logits(&slot_ref, self.cfg.max_objects)?,
            coarse_labels: coarse_ref.relabel(|l| from_slot[l as usize]),
            coarse_scores: tokens(&idmech::one_hot_logits(&coarse_ref, self.cfg.max_objects)?)?.0,
            slot_labels: slot_labels.clone(),
        });
        for (t, frame) in frames.iter().enumerate().skip(1) {
            let res = self.segment_frame(frame, &memory, t)?;
            self.update_memory(&mut memory, t, &res.features, &res.logits)?;
            let mask = decode_labels(&res.logits)?.relabel(|l| from_slot[l as usize]);
            let coarse = decode_labels(&untokens(&res.coarse_scores, grid16)?)?.relabel(|l| from_slot[l as usize]);
            out.push(FrameResult {
                mask,
                logits: res.logits,
                coarse_labels: coarse,
                coarse_scores: res.coarse_scores,
                slot_labels: slot_labels.clone(),
            });
        }
        Ok(out)
    }
}

/// Maps caller labels to identity slots and back. Labels that already fit
/// the bank keep their own slot, so logit channel `l` belongs to label `l`;
/// otherwise objects are packed into slots in ascending id order.
fn slot_maps(reference: &LabelMask, capacity: usize) -> Result<([u8; 256], [u8; 256])> {
    let ids: Vec<u32> = reference.object_ids().into_iter().map(u32::from).collect();
    let assignment = assign_identities(&ids, capacity)?;
    let mut to_slot = [0u8; 256];
    let mut from_slot = [0u8; 256];
    if reference.max_label() as usize <= capacity {
        for l in 0..=capacity {
            to_slot[l] = l as u8;
            from_slot[l] = l as u8;
        }
        return Ok((to_slot, from_slot));
    }
    for &obj in assignment.objects() {
        let slot = assignment.slot(obj).expect("assigned");
        to_slot[obj as usize] = slot;
        from_slot[slot as usize] = obj as u8;
    }
    Ok((to_slot, from_slot))
}

fn pad_mask(mask: &LabelMask, ph: usize, pw: usize) -> LabelMask {
    let (h, w) = mask.dims();
    LabelMask::from_fn(ph, pw, |y, x| mask.get(y.min(h - 1), x.min(w - 1)))
}

/// Polynomial learning-rate decay from `lr0` to `lr_end`.
pub fn poly_lr(step: u64, total_steps: u64, lr0: f64, lr_end: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Range("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Range(format!("step {step} exceeds total_steps {total_steps}")));
    }
    if !(lr0 > lr_end && lr_end > 0.0) {
        return Err(Error::Range(format!("need lr0 > lr_end > 0, got {lr0} and {lr_end}")));
    }
    let remaining = 1.0 - step as f64 / total_steps as f64;
    Ok(lr_end + (lr0 - lr_end) * remaining.powf(power))
}

/// Exponent of the polynomial decay.
pub const POLY_LR_POWER: f64 = 0.9;
pub const INITIAL_LR: f64 = 2e-4;
pub const FINAL_LR: f64 = 1e-5;
