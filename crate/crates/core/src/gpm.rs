//! Gated propagation: single-head attention whose one attention map drives
//! two decoupled streams, the object-agnostic visual stream and the
//! object-specific identity stream.
//!
//! A layer runs up to three sub-steps in a fixed order: self-propagation over
//! the current tokens, long-term propagation over the stored memory frames,
//! and short-term propagation over the previous frame inside a local window.
//! Each sub-step is pre-normalized, gated with a sigmoid, projected and added
//! back residually to both streams.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::gaussian;
use crate::tensor::{self, matmul, matmul_transposed, Tensor};

pub const DEFAULT_WINDOW_RADIUS: usize = 2;
pub const DEFAULT_NORM_EPS: f32 = 1e-5;

/// Gate bias used to hold a gate fully open.
pub const SATURATED_GATE_BIAS: f32 = 1e4;

/// Thread-local counters used by tests to check the architecture contract.
pub mod instrument {
    use std::cell::{Cell, RefCell};
    use std::collections::BTreeMap;

    thread_local! {
        static ATTENTION_MAPS: Cell<usize> = const { Cell::new(0) };
        static LAYER_PASSES: RefCell<BTreeMap<usize, usize>> = const { RefCell::new(BTreeMap::new()) };
    }

    pub(crate) fn record_attention_map() {
        ATTENTION_MAPS.with(|c| c.set(c.get() + 1));
    }

    pub(crate) fn record_layer_pass(stride: usize) {
        LAYER_PASSES.with(|m| *m.borrow_mut().entry(stride).or_insert(0) += 1);
    }

    /// Attention maps (one softmax over a score matrix each) computed on this
    /// thread since the last reset.
    pub fn attention_maps() -> usize {
        ATTENTION_MAPS.with(Cell::get)
    }

    /// Layer passes per feature stride on this thread since the last reset.
    pub fn layer_passes() -> BTreeMap<usize, usize> {
        LAYER_PASSES.with(|m| m.borrow().clone())
    }

    pub fn reset() {
        ATTENTION_MAPS.with(|c| c.set(0));
        LAYER_PASSES.with(|m| m.borrow_mut().clear());
    }
}

/// Per-channel affine applied after a plain layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    pub fn identity(width: usize) -> Self {
        Self::scaled(width, 1.0)
    }

    pub fn scaled(width: usize, gamma: f32) -> Self {
        Self {
            gamma: Tensor::full(&[width], gamma),
            beta: Tensor::zeros(&[width]),
        }
    }

    pub fn apply(&self, x: &Tensor, eps: f32) -> Result<Tensor> {
        let n = tensor::layer_norm(x, 1, eps)?;
        let c = n.shape()[1];
        if self.gamma.numel() != c || self.beta.numel() != c {
            return Err(Error::dim(format!(
                "norm of width {} applied to {:?}",
                self.gamma.numel(),
                x.shape()
            )));
        }
        let mut out = n;
        for row in out.data_mut().chunks_exact_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(self.gamma.data()).zip(self.beta.data()) {
                *v = *v * g + b;
            }
        }
        Ok(out)
    }
}

/// Gate and output projections of one stream inside one sub-step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub gate: Tensor,
    pub gate_bias: Tensor,
    pub output: Tensor,
}

impl GateParams {
    fn seeded<R: Rng>(rng: &mut R, width: usize) -> Self {
        let std = 1.0 / (width as f32).sqrt();
        Self {
            gate: gaussian(rng, &[width, width], std),
            gate_bias: Tensor::zeros(&[width]),
            output: gaussian(rng, &[width, width], std),
        }
    }

    /// Gate held open, output projection `output_scale · I`.
    pub fn saturated(width: usize, output_scale: f32) -> Self {
        Self {
            gate: Tensor::zeros(&[width, width]),
            gate_bias: Tensor::full(&[width], SATURATED_GATE_BIAS),
            output: Tensor::eye(width).scale(output_scale),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubstepParams {
    pub norm_vis: Norm,
    pub norm_id: Norm,
    pub vis: GateParams,
    pub id: GateParams,
}

/// The three sub-steps of a layer, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Substep {
    SelfPropagation = 0,
    LongTerm = 1,
    ShortTerm = 2,
}

/// Parameters of one propagation layer. All matrices are `C × C` and act on
/// row vectors (`x · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct GpmParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value_vis: Tensor,
    pub value_id: Tensor,
    pub memory_norm: Norm,
    pub substeps: [SubstepParams; 3],
    pub eps: f32,
}

impl GpmParams {
    pub fn seeded<R: Rng>(rng: &mut R, width: usize) -> Self {
        let std = 1.0 / (width as f32).sqrt();
        let query = gaussian(rng, &[width, width], std);
        let key = gaussian(rng, &[width, width], std);
        let value_vis = gaussian(rng, &[width, width], std);
        let value_id = gaussian(rng, &[width, width], std);
        let substeps = std::array::from_fn(|_| SubstepParams {
            norm_vis: Norm::identity(width),
            norm_id: Norm::identity(width),
            vis: GateParams::seeded(rng, width),
            id: GateParams::seeded(rng, width),
        });
        Self {
            query,
            key,
            value_vis,
            value_id,
            memory_norm: Norm::identity(width),
            substeps,
            eps: DEFAULT_NORM_EPS,
        }
    }

    /// Identity projections with every gate held open.
    ///
    /// The query norm is scaled so that attention logits equal
    /// `sharpness · cos(query, key)`, and the visual output projection is zero
    /// so the visual stream passes through untouched. With a large sharpness
    /// each attention row selects the most similar memory tokens.
    pub fn template(width: usize, sharpness: f32) -> Self {
        let gamma = sharpness / (width as f32).sqrt();
        let substeps = std::array::from_fn(|_| SubstepParams {
            norm_vis: Norm::scaled(width, gamma),
            norm_id: Norm::identity(width),
            vis: GateParams::saturated(width, 0.0),
            id: GateParams::saturated(width, 1.0),
        });
        Self {
            query: Tensor::eye(width),
            key: Tensor::eye(width),
            value_vis: Tensor::eye(width),
            value_id: Tensor::eye(width),
            memory_norm: Norm::identity(width),
            substeps,
            eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn width(&self) -> usize {
        self.query.shape()[0]
    }

    /// Normalized visual tokens as stored in memory and used as self keys.
    pub fn memory_features(&self, vis: &Tensor) -> Result<Tensor> {
        self.memory_norm.apply(vis, self.eps)
    }

    /// Every tensor with a stable dotted name, for weight files.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (format!("{prefix}.query"), &self.query),
            (format!("{prefix}.key"), &self.key),
            (format!("{prefix}.value_vis"), &self.value_vis),
            (format!("{prefix}.value_id"), &self.value_id),
            (format!("{prefix}.memory_norm.gamma"), &self.memory_norm.gamma),
            (format!("{prefix}.memory_norm.beta"), &self.memory_norm.beta),
        ];
        for (i, s) in self.substeps.iter().enumerate() {
            let p = format!("{prefix}.substep{i}");
            out.extend([
                (format!("{p}.norm_vis.gamma"), &s.norm_vis.gamma),
                (format!("{p}.norm_vis.beta"), &s.norm_vis.beta),
                (format!("{p}.norm_id.gamma"), &s.norm_id.gamma),
                (format!("{p}.norm_id.beta"), &s.norm_id.beta),
                (format!("{p}.vis.gate"), &s.vis.gate),
                (format!("{p}.vis.gate_bias"), &s.vis.gate_bias),
                (format!("{p}.vis.output"), &s.vis.output),
                (format!("{p}.id.gate"), &s.id.gate),
                (format!("{p}.id.gate_bias"), &s.id.gate_bias),
                (format!("{p}.id.output"), &s.id.output),
            ]);
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            (format!("{prefix}.query"), &mut self.query),
            (format!("{prefix}.key"), &mut self.key),
            (format!("{prefix}.value_vis"), &mut self.value_vis),
            (format!("{prefix}.value_id"), &mut self.value_id),
            (format!("{prefix}.memory_norm.gamma"), &mut self.memory_norm.gamma),
            (format!("{prefix}.memory_norm.beta"), &mut self.memory_norm.beta),
        ];
        for (i, s) in self.substeps.iter_mut().enumerate() {
            let p = format!("{prefix}.substep{i}");
            out.extend([
                (format!("{p}.norm_vis.gamma"), &mut s.norm_vis.gamma),
                (format!("{p}.norm_vis.beta"), &mut s.norm_vis.beta),
                (format!("{p}.norm_id.gamma"), &mut s.norm_id.gamma),
                (format!("{p}.norm_id.beta"), &mut s.norm_id.beta),
                (format!("{p}.vis.gate"), &mut s.vis.gate),
                (format!("{p}.vis.gate_bias"), &mut s.vis.gate_bias),
                (format!("{p}.vis.output"), &mut s.vis.output),
                (format!("{p}.id.gate"), &mut s.id.gate),
                (format!("{p}.id.gate_bias"), &mut s.id.gate_bias),
                (format!("{p}.id.output"), &mut s.id.output),
            ]);
        }
        out
    }
}

/// Projected keys and values of one frame, ready for attention.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationMemoryEntry {
    pub keys: Tensor,
    pub values_vis: Tensor,
    pub values_id: Tensor,
    pub frame_index: usize,
    pub stride: usize,
    /// Token grid (rows, cols); `rows * cols` equals the entry's row count.
    pub grid: (usize, usize),
}

impl PropagationMemoryEntry {
    pub fn len(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_memory_entry(
    frame_vis: &Tensor,
    frame_id: &Tensor,
    params: &GpmParams,
    frame_index: usize,
    stride: usize,
    grid: (usize, usize),
) -> Result<PropagationMemoryEntry> {
    let (n, c) = frame_vis.dims2()?;
    if frame_id.shape() != frame_vis.shape() {
        return Err(Error::dim(format!(
            "memory visual {:?} and identity {:?} tokens differ",
            frame_vis.shape(),
            frame_id.shape()
        )));
    }
    if c != params.width() {
        return Err(Error::dim(format!(
            "memory tokens of width {c} for a layer of width {}",
            params.width()
        )));
    }
    if grid.0 * grid.1 != n {
        return Err(Error::dim(format!("grid {grid:?} does not hold {n} tokens")));
    }
    Ok(PropagationMemoryEntry {
        keys: matmul(frame_vis, &params.key)?,
        values_vis: matmul(frame_vis, &params.value_vis)?,
        values_id: matmul(frame_id, &params.value_id)?,
        frame_index,
        stride,
        grid,
    })
}

/// Restricts each query to keys inside a square window on a shared grid.
#[derive(Clone, Copy, Debug)]
pub struct LocalWindow {
    pub grid: (usize, usize),
    pub radius: usize,
}

impl LocalWindow {
    fn allows(&self, query: usize, key: usize) -> bool {
        let w = self.grid.1;
        let (qy, qx) = (query / w, query % w);
        let (ky, kx) = (key / w, key % w);
        qy.abs_diff(ky) <= self.radius && qx.abs_diff(kx) <= self.radius
    }
}

/// `softmax(q · kᵀ / √C)` with optional windowing. Masked entries are exactly 0.
pub fn attention_map(q: &Tensor, k: &Tensor, window: Option<LocalWindow>) -> Result<Tensor> {
    let (nq, c) = q.dims2()?;
    let (nk, kc) = k.dims2()?;
    if c != kc {
        return Err(Error::dim(format!(
            "query {:?} and key {:?} widths differ",
            q.shape(),
            k.shape()
        )));
    }
    let temperature = 1.0 / (c as f32).sqrt();
    let mut scores = matmul_transposed(q, k)?.scale(temperature);
    if let Some(win) = window {
        if win.grid.0 * win.grid.1 != nq || nq != nk {
            return Err(Error::dim(format!(
                "window grid {:?} does not match {nq} queries and {nk} keys",
                win.grid
            )));
        }
        for i in 0..nq {
            for j in 0..nk {
                if !win.allows(i, j) {
                    scores.data_mut()[i * nk + j] = f32::NEG_INFINITY;
                }
            }
        }
    }
    instrument::record_attention_map();
    tensor::softmax(&scores, 1)
}

fn check_memory(q: &Tensor, k: &Tensor, v_vis: &Tensor, v_id: &Tensor) -> Result<()> {
    let (_, c) = q.dims2()?;
    let (nk, kc) = k.dims2()?;
    if nk == 0 {
        return Err(Error::EmptyMemory("attention needs at least one key"));
    }
    for (name, t) in [("visual values", v_vis), ("identity values", v_id)] {
        if t.shape() != [nk, kc] {
            return Err(Error::dim(format!(
                "{name} {:?} do not match keys {:?}",
                t.shape(),
                k.shape()
            )));
        }
    }
    if c != kc {
        return Err(Error::dim(format!(
            "query {:?} and key {:?} widths differ",
            q.shape(),
            k.shape()
        )));
    }
    Ok(())
}

/// One attention map, applied to both value streams.
pub fn shared_attention(q: &Tensor, k: &Tensor, v_vis: &Tensor, v_id: &Tensor) -> Result<(Tensor, Tensor)> {
    shared_attention_windowed(q, k, v_vis, v_id, None)
}

pub fn shared_attention_windowed(
    q: &Tensor,
    k: &Tensor,
    v_vis: &Tensor,
    v_id: &Tensor,
    window: Option<LocalWindow>,
) -> Result<(Tensor, Tensor)> {
    check_memory(q, k, v_vis, v_id)?;
    let map = attention_map(q, k, window)?;
    Ok((matmul(&map, v_vis)?, matmul(&map, v_id)?))
}

/// `output_projection(attended ⊙ σ(gate_source · W_gate + b_gate))`.
pub fn gated_propagation(attended: &Tensor, gate_source: &Tensor, params: &GateParams) -> Result<Tensor> {
    if attended.shape() != gate_source.shape() {
        return Err(Error::dim(format!(
            "attended {:?} and gate source {:?} differ",
            attended.shape(),
            gate_source.shape()
        )));
    }
    let gate = matmul(gate_source, &params.gate)?
        .add_row_vector(&params.gate_bias)?
        .map(sigmoid);
    matmul(&attended.mul(&gate)?, &params.output)
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// What a layer may attend to besides the current tokens.
#[derive(Clone, Copy, Debug)]
pub enum LayerMemory<'a> {
    /// Only self-propagation runs (used to memorize a frame with known mask).
    SelfOnly,
    Frames {
        long_term: &'a [PropagationMemoryEntry],
        short_term: Option<&'a PropagationMemoryEntry>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerOptions {
    pub window_radius: usize,
    pub short_term: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            window_radius: DEFAULT_WINDOW_RADIUS,
            short_term: true,
        }
    }
}

/// Which sub-steps a layer call will run.
pub fn active_substeps(memory: &LayerMemory<'_>, opts: &LayerOptions) -> Vec<Substep> {
    let mut steps = vec![Substep::SelfPropagation];
    if let LayerMemory::Frames { long_term, short_term } = memory {
        if !long_term.is_empty() {
            steps.push(Substep::LongTerm);
        }
        if short_term.is_some() && opts.short_term {
            steps.push(Substep::ShortTerm);
        }
    }
    steps
}

/// Runs one sub-step against already projected keys/values and adds the
/// gated result to both streams.
fn apply_substep(
    vis: &mut Tensor,
    id: &mut Tensor,
    params: &GpmParams,
    step: Substep,
    memory: SubstepMemory<'_>,
) -> Result<()> {
    let sp = &params.substeps[step as usize];
    let norm_vis = sp.norm_vis.apply(vis, params.eps)?;
    let norm_id = sp.norm_id.apply(id, params.eps)?;
    let q = matmul(&norm_vis, &params.query)?;
    let (att_vis, att_id) = match memory {
        SubstepMemory::Current => {
            let m = params.memory_features(vis)?;
            let k = matmul(&m, &params.key)?;
            let v_vis = matmul(&m, &params.value_vis)?;
            let v_id = matmul(id, &params.value_id)?;
            shared_attention(&q, &k, &v_vis, &v_id)?
        }
        SubstepMemory::Global(keys, v_vis, v_id) => shared_attention(&q, keys, v_vis, v_id)?,
        SubstepMemory::Windowed(entry, window) => {
            shared_attention_windowed(&q, &entry.keys, &entry.values_vis, &entry.values_id, Some(window))?
        }
    };
    let dv = gated_propagation(&att_vis, &norm_vis, &sp.vis)?;
    let di = gated_propagation(&att_id, &norm_id, &sp.id)?;
    *vis = vis.add(&dv)?;
    *id = id.add(&di)?;
    Ok(())
}

enum SubstepMemory<'a> {
    Current,
    Global(&'a Tensor, &'a Tensor, &'a Tensor),
    Windowed(&'a PropagationMemoryEntry, LocalWindow),
}

/// One propagation layer over `n = rows × cols` current tokens.
pub fn gpm_layer(
    cur_vis: &Tensor,
    cur_id: &Tensor,
    grid: (usize, usize),
    memory: LayerMemory<'_>,
    params: &GpmParams,
    opts: &LayerOptions,
) -> Result<(Tensor, Tensor)> {
    let (n, c) = cur_vis.dims2()?;
    if cur_id.shape() != cur_vis.shape() {
        return Err(Error::dim(format!(
            "visual {:?} and identity {:?} tokens differ",
            cur_vis.shape(),
            cur_id.shape()
        )));
    }
    if c != params.width() {
        return Err(Error::dim(format!(
            "tokens of width {c} for a layer of width {}",
            params.width()
        )));
    }
    if grid.0 * grid.1 != n {
        return Err(Error::dim(format!("grid {grid:?} does not hold {n} tokens")));
    }
    if let LayerMemory::Frames { long_term, short_term } = memory {
        if long_term.is_empty() && short_term.is_none() {
            return Err(Error::EmptyMemory("propagation needs long-term or short-term memory"));
        }
    }

    let mut vis = cur_vis.clone();
    let mut id = cur_id.clone();
    apply_substep(
        &mut vis,
        &mut id,
        params,
        Substep::SelfPropagation,
        SubstepMemory::Current,
    )?;

    if let LayerMemory::Frames { long_term, short_term } = memory {
        if !long_term.is_empty() {
            let keys: Vec<&Tensor> = long_term.iter().map(|e| &e.keys).collect();
            let v_vis: Vec<&Tensor> = long_term.iter().map(|e| &e.values_vis).collect();
            let v_id: Vec<&Tensor> = long_term.iter().map(|e| &e.values_id).collect();
            let (keys, v_vis, v_id) = (
                Tensor::concat_rows(&keys)?,
                Tensor::concat_rows(&v_vis)?,
                Tensor::concat_rows(&v_id)?,
            );
            apply_substep(
                &mut vis,
                &mut id,
                params,
                Substep::LongTerm,
                SubstepMemory::Global(&keys, &v_vis, &v_id),
            )?;
        }
        if let (Some(entry), true) = (short_term, opts.short_term) {
            if entry.grid != grid {
                return Err(Error::dim(format!(
                    "short-term memory grid {:?} differs from current grid {grid:?}",
                    entry.grid
                )));
            }
            let window = LocalWindow {
                grid,
                radius: opts.window_radius,
            };
            apply_substep(
                &mut vis,
                &mut id,
                params,
                Substep::ShortTerm,
                SubstepMemory::Windowed(entry, window),
            )?;
        }
    }
    Ok((vis, id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Plain loops: scores, max-shifted exp, normalize, weighted sum.
    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (nq, c) = q.dims2().unwrap();
        let (nk, _) = k.dims2().unwrap();
        let cv = v.shape()[1];
        let mut out = vec![0.0; nq * cv];
        for i in 0..nq {
            let s: Vec<f64> = (0..nk)
                .map(|j| (0..c).map(|p| q.at2(i, p) as f64 * k.at2(j, p) as f64).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nk {
                for p in 0..cv {
                    out[i * cv + p] += e[j] / z * v.at2(j, p) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_its_values() {
        let q = t(&[3, 2], &[1., -4., 0.3, 9., -2., 2.]);
        let k = t(&[1, 2], &[0.5, 0.5]);
        let (v, i) = shared_attention(&q, &k, &t(&[1, 2], &[3., 4.]), &t(&[1, 2], &[-1., 7.])).unwrap();
        for r in 0..3 {
            assert_eq!(v.row(r), &[3., 4.]);
            assert_eq!(i.row(r), &[-1., 7.]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = t(&[2, 2], &[1., 2., -3., 0.5]);
        let k = t(&[3, 2], &[1., 1., 1., 1., 1., 1.]);
        let vv = t(&[3, 2], &[0., 3., 6., 9., 3., 0.]);
        let (v, _) = shared_attention(&q, &k, &vv, &vv).unwrap();
        for r in 0..2 {
            assert!((v.at2(r, 0) - 3.0).abs() < 1e-6);
            assert!((v.at2(r, 1) - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn one_dimensional_hand_case() {
        let q = t(&[1, 1], &[1.]);
        let k = t(&[2, 1], &[0., 4f32.ln()]);
        let vv = t(&[2, 1], &[0., 1.]);
        let (v, _) = shared_attention(&q, &k, &vv, &vv).unwrap();
        assert!((v.data()[0] - 0.8).abs() < 1e-6);
        let oracle = naive_attention(&q, &k, &vv);
        assert!((v.data()[0] as f64 - oracle[0]).abs() < 1e-6);
    }

    #[test]
    fn mismatched_values_are_rejected() {
        let q = Tensor::zeros(&[1, 2]);
        let k = Tensor::zeros(&[2, 2]);
        let err = shared_attention(&q, &k, &Tensor::zeros(&[1, 2]), &k);
        assert!(matches!(err, Err(Error::Dimension(_))));
        let err = shared_attention(&Tensor::zeros(&[1, 3]), &k, &k, &k);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn zeroing_identity_values_only_touches_identity_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = gaussian(&mut rng, &[5, 4], 1.0);
        let k = gaussian(&mut rng, &[7, 4], 1.0);
        let vv = gaussian(&mut rng, &[7, 4], 1.0);
        let vi = gaussian(&mut rng, &[7, 4], 1.0);
        let (a_vis, a_id) = shared_attention(&q, &k, &vv, &vi).unwrap();
        let (b_vis, b_id) = shared_attention(&q, &k, &vv, &Tensor::zeros(&[7, 4])).unwrap();
        assert_eq!(a_vis, b_vis);
        assert_ne!(a_id, b_id);
        assert_eq!(b_id, Tensor::zeros(&[5, 4]));
    }

    #[test]
    fn gate_examples() {
        let attended = t(&[2, 2], &[1., -2., 3., 0.5]);
        let src = t(&[2, 2], &[0.3, -0.1, 2., 1.]);
        let out_proj = t(&[2, 2], &[2., 1., 0., -1.]);
        let zero_gate = GateParams {
            gate: Tensor::zeros(&[2, 2]),
            gate_bias: Tensor::zeros(&[2]),
            output: out_proj.clone(),
        };
        let got = gated_propagation(&attended, &src, &zero_gate).unwrap();
        assert_eq!(got, matmul(&attended.scale(0.5), &out_proj).unwrap());

        let open = GateParams {
            gate: Tensor::eye(2),
            gate_bias: Tensor::full(&[2], 1e4),
            output: Tensor::eye(2),
        };
        let got = gated_propagation(&attended, &src, &open).unwrap();
        for (a, b) in got.data().iter().zip(attended.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let gate = t(&[2, 2], &[1., 0., 0.5, -1.]);
        let bias = t(&[2], &[0.1, -0.2]);
        let p = GateParams {
            gate: gate.clone(),
            gate_bias: bias.clone(),
            output: out_proj.clone(),
        };
        let got = gated_propagation(&attended, &src, &p).unwrap();
        // by hand: g = σ(src·gate + bias), then (attended ⊙ g)·out
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for r in 0..2 {
            let g: Vec<f64> = (0..2)
                .map(|c| {
                    sig(src.at2(r, 0) as f64 * gate.at2(0, c) as f64
                        + src.at2(r, 1) as f64 * gate.at2(1, c) as f64
                        + bias.data()[c] as f64)
                })
                .collect();
            let m: Vec<f64> = (0..2).map(|c| attended.at2(r, c) as f64 * g[c]).collect();
            for c in 0..2 {
                let want = m[0] * out_proj.at2(0, c) as f64 + m[1] * out_proj.at2(1, c) as f64;
                assert!((got.at2(r, c) as f64 - want).abs() < 1e-5);
            }
        }
    }

    fn random_entry(
        rng: &mut ChaCha8Rng,
        params: &GpmParams,
        grid: (usize, usize),
        frame: usize,
    ) -> PropagationMemoryEntry {
        let n = grid.0 * grid.1;
        let c = params.width();
        let vis = params.memory_features(&gaussian(rng, &[n, c], 1.0)).unwrap();
        let id = gaussian(rng, &[n, c], 1.0);
        build_memory_entry(&vis, &id, params, frame, 16, grid).unwrap()
    }

    #[test]
    fn memory_entry_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vis = gaussian(&mut rng, &[6, 4], 1.0);
        let id = gaussian(&mut rng, &[6, 4], 1.0);
        let params = GpmParams::template(4, 10.0);
        let e = build_memory_entry(&vis, &id, &params, 3, 8, (2, 3)).unwrap();
        assert_eq!(e.keys, vis);
        assert_eq!(e.values_id, id);
        assert_eq!(e.len(), 6);
        let seeded = GpmParams::seeded(&mut ChaCha8Rng::seed_from_u64(2), 4);
        let a = build_memory_entry(&vis, &id, &seeded, 0, 16, (2, 3)).unwrap();
        let b = build_memory_entry(&vis, &id, &seeded, 0, 16, (2, 3)).unwrap();
        assert_eq!(a, b);
        assert!(build_memory_entry(&vis, &id, &seeded, 0, 16, (4, 3)).is_err());
    }

    #[test]
    fn layer_shapes_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 8;
        let params = GpmParams::seeded(&mut rng, c);
        let grid = (3, 4);
        let vis = gaussian(&mut rng, &[12, c], 1.0);
        let id = gaussian(&mut rng, &[12, c], 0.3);
        let long = vec![
            random_entry(&mut rng, &params, grid, 0),
            random_entry(&mut rng, &params, grid, 5),
        ];
        let short = random_entry(&mut rng, &params, grid, 6);
        let opts = LayerOptions::default();

        let cases: Vec<(LayerMemory, usize)> = vec![
            (LayerMemory::SelfOnly, 1),
            (
                LayerMemory::Frames {
                    long_term: &long,
                    short_term: None,
                },
                2,
            ),
            (
                LayerMemory::Frames {
                    long_term: &[],
                    short_term: Some(&short),
                },
                2,
            ),
            (
                LayerMemory::Frames {
                    long_term: &long,
                    short_term: Some(&short),
                },
                3,
            ),
        ];
        for (mem, expect) in cases {
            instrument::reset();
            let (v, i) = gpm_layer(&vis, &id, grid, mem, &params, &opts).unwrap();
            assert_eq!(v.shape(), vis.shape());
            assert_eq!(i.shape(), id.shape());
            assert!(v.is_finite() && i.is_finite());
            assert_eq!(instrument::attention_maps(), expect);
            assert_eq!(active_substeps(&mem, &opts).len(), expect);
        }
        let empty = LayerMemory::Frames {
            long_term: &[],
            short_term: None,
        };
        assert!(matches!(
            gpm_layer(&vis, &id, grid, empty, &params, &opts),
            Err(Error::EmptyMemory(_))
        ));
    }

    #[test]
    fn zero_output_projections_are_a_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 6;
        let mut params = GpmParams::seeded(&mut rng, c);
        for s in params.substeps.iter_mut() {
            s.vis.output = Tensor::zeros(&[c, c]);
            s.id.output = Tensor::zeros(&[c, c]);
        }
        let grid = (2, 2);
        let vis = gaussian(&mut rng, &[4, c], 1.0);
        let id = gaussian(&mut rng, &[4, c], 1.0);
        let long = vec![random_entry(&mut rng, &params, grid, 0)];
        let (v, i) = gpm_layer(
            &vis,
            &id,
            grid,
            LayerMemory::Frames {
                long_term: &long,
                short_term: None,
            },
            &params,
            &LayerOptions::default(),
        )
        .unwrap();
        assert_eq!(v, vis);
        assert_eq!(i, id);
    }

    /// Composes the documented order by hand from the public sub-operations.
    #[test]
    fn layer_matches_sub_op_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = 8;
        let params = GpmParams::seeded(&mut rng, c);
        let grid = (2, 3);
        let vis = gaussian(&mut rng, &[6, c], 1.0);
        let id = gaussian(&mut rng, &[6, c], 0.5);
        let entry = random_entry(&mut rng, &params, grid, 0);

        let (got_vis, got_id) = gpm_layer(
            &vis,
            &id,
            grid,
            LayerMemory::Frames {
                long_term: std::slice::from_ref(&entry),
                short_term: None,
            },
            &params,
            &LayerOptions::default(),
        )
        .unwrap();

        let mut v = vis.clone();
        let mut i = id.clone();
        // self-propagation
        let s = &params.substeps[0];
        let nv = s.norm_vis.apply(&v, params.eps).unwrap();
        let ni = s.norm_id.apply(&i, params.eps).unwrap();
        let m = params.memory_features(&v).unwrap();
        let (av, ai) = shared_attention(
            &matmul(&nv, &params.query).unwrap(),
            &matmul(&m, &params.key).unwrap(),
            &matmul(&m, &params.value_vis).unwrap(),
            &matmul(&i, &params.value_id).unwrap(),
        )
        .unwrap();
        v = v.add(&gated_propagation(&av, &nv, &s.vis).unwrap()).unwrap();
        i = i.add(&gated_propagation(&ai, &ni, &s.id).unwrap()).unwrap();
        // long-term
        let s = &params.substeps[1];
        let nv = s.norm_vis.apply(&v, params.eps).unwrap();
        let ni = s.norm_id.apply(&i, params.eps).unwrap();
        let (av, ai) = shared_attention(
            &matmul(&nv, &params.query).unwrap(),
            &entry.keys,
            &entry.values_vis,
            &entry.values_id,
        )
        .unwrap();
        v = v.add(&gated_propagation(&av, &nv, &s.vis).unwrap()).unwrap();
        i = i.add(&gated_propagation(&ai, &ni, &s.id).unwrap()).unwrap();

        assert_eq!(got_vis, v);
        assert_eq!(got_id, i);
    }

    #[test]
    fn window_masks_far_keys() {
        let grid = (4, 4);
        let q = Tensor::full(&[16, 2], 1.0);
        let k = Tensor::full(&[16, 2], 1.0);
        let a = attention_map(&q, &k, Some(LocalWindow { grid, radius: 1 })).unwrap();
        // corner query sees a 2×2 neighbourhood
        let row0 = a.row(0);
        let nonzero: Vec<usize> = (0..16).filter(|&j| row0[j] > 0.0).collect();
        assert_eq!(nonzero, vec![0, 1, 4, 5]);
        for j in nonzero {
            assert!((row0[j] - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn template_long_term_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 8;
        let params = GpmParams::template(c, 3.0);
        let grid = (2, 2);
        let vis = gaussian(&mut rng, &[4, c], 1.0);
        let mem_vis = params.memory_features(&gaussian(&mut rng, &[4, c], 1.0)).unwrap();
        let mem_id = gaussian(&mut rng, &[4, c], 1.0);
        let entry = build_memory_entry(&mem_vis, &mem_id, &params, 0, 16, grid).unwrap();
        let zero_id = Tensor::zeros(&[4, c]);
        let (v, i) = gpm_layer(
            &vis,
            &zero_id,
            grid,
            LayerMemory::Frames {
                long_term: std::slice::from_ref(&entry),
                short_term: None,
            },
            &params,
            &LayerOptions::default(),
        )
        .unwrap();
        assert_eq!(v, vis);
        let q = params.substeps[1].norm_vis.apply(&vis, params.eps).unwrap();
        let oracle = naive_attention(&q, &mem_vis, &mem_id);
        for (a, b) in i.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
