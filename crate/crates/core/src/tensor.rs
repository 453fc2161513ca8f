//! Dense row-major `f32` tensors and the handful of kernels the engine needs.
//!
//! Images and feature maps are stored channels-last (`h × w × c`). Every
//! kernel accumulates in `f32` with a fixed loop order, so results are
//! bit-reproducible for identical inputs.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "invalid shape {shape:?}");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    /// Height, width and channels of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::dim(format!("expected an h×w×c tensor, got {:?}", self.shape))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.shape[1] + x) * self.shape[2] + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Adds a length-`c` vector to every row of the trailing axis.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Self> {
        let c = *self.shape.last().expect("non-empty shape");
        if bias.numel() != c {
            return Err(Error::dim(format!(
                "bias of {} values cannot broadcast over trailing axis {c}",
                bias.numel()
            )));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(c) {
            for (v, b) in chunk.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r]))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("cannot concatenate zero tensors"))?;
        let (_, c) = first.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.dims2()?;
            if pc != c {
                return Err(Error::dim(format!(
                    "row concat width mismatch {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, c], data)
    }

    /// Mirrors an `h × w × c` tensor left to right.
    pub fn hflip(&self) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        let mut out = Self::zeros(&[h, w, c]);
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + (w - 1 - x)) * c;
                let dst = (y * w + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Ok(out)
    }

    /// Edge-replicating pad of an `h × w × c` tensor on the bottom and right.
    pub fn pad_edge(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        if out_h < h || out_w < w {
            return Err(Error::dim(format!("cannot pad {h}×{w} down to {out_h}×{out_w}")));
        }
        let mut out = Self::zeros(&[out_h, out_w, c]);
        for y in 0..out_h {
            let sy = y.min(h - 1);
            for x in 0..out_w {
                let sx = x.min(w - 1);
                let src = (sy * w + sx) * c;
                let dst = (y * out_w + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Ok(out)
    }

    /// Top-left `out_h × out_w` window of an `h × w × c` tensor.
    pub fn crop(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!("cannot crop {h}×{w} to {out_h}×{out_w}")));
        }
        let mut data = Vec::with_capacity(out_h * out_w * c);
        for y in 0..out_h {
            data.extend_from_slice(&self.data[y * w * c..(y * w + out_w) * c]);
        }
        Self::new(vec![out_h, out_w, c], data)
    }
}

/// Matrix product with a fixed accumulation order (ascending `k`).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} · {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += ar[p] * br[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(&x.shape, axis)?;
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x.data[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out.data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out.data[idx(j)] /= sum;
            }
        }
    }
    Ok(out)
}

/// Normalizes each slice along `axis` to zero mean and unit variance.
/// No affine scale or shift is applied.
pub fn layer_norm(x: &Tensor, axis: usize, eps: f32) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(&x.shape, axis)?;
    let mut out = x.clone();
    let n = len as f32;
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mean = (0..len).map(|j| x.data[idx(j)]).sum::<f32>() / n;
            let var = (0..len)
                .map(|j| {
                    let d = x.data[idx(j)] - mean;
                    d * d
                })
                .sum::<f32>()
                / n;
            let denom = (var + eps).sqrt();
            for j in 0..len {
                let d = x.data[idx(j)] - mean;
                out.data[idx(j)] = if denom > 0.0 { d / denom } else { 0.0 };
            }
        }
    }
    Ok(out)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Source taps for half-pixel-centre resampling along one axis.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resampling of an `h × w × c` tensor, half-pixel-centre convention.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!(
            "resize target {out_h}×{out_w} has a zero dimension"
        )));
    }
    let ys = bilinear_taps(out_h, h);
    let xs = bilinear_taps(out_w, w);
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = lerp(x.at3(y0, x0, ch), x.at3(y0, x1, ch), wx);
                let bottom = lerp(x.at3(y1, x0, ch), x.at3(y1, x1, ch), wx);
                out.data[(oy * out_w + ox) * c + ch] = lerp(top, bottom, wy);
            }
        }
    }
    Ok(out)
}

/// 2-D convolution (cross-correlation) with zero padding.
///
/// `x` is `h × w × cin`, `kernel` is `kh × kw × cin × cout`; both kernel
/// sides must be odd.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (h, w, cin) = x.dims3()?;
    let (kh, kw, kcin, cout) = match kernel.shape[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::dim(format!(
                "conv kernel must be kh×kw×cin×cout, got {:?}",
                kernel.shape
            )))
        }
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!("conv kernel sides must be odd, got {kh}×{kw}")));
    }
    if stride == 0 {
        return Err(Error::Config("conv stride must be at least 1".into()));
    }
    if kcin != cin {
        return Err(Error::dim(format!(
            "conv input has {cin} channels, kernel expects {kcin}"
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::dim(format!(
            "conv kernel {kh}×{kw} larger than padded input {h}×{w}+{padding}"
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f32; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &x.data[(iy as usize * w + ix as usize) * cin..][..cin];
                    for (ci, &xv) in px.iter().enumerate() {
                        let kr = &kernel.data[((ky * kw + kx) * cin + ci) * cout..][..cout];
                        for (a, &kv) in acc.iter_mut().zip(kr) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

/// Mean over non-overlapping `factor × factor` blocks of an `h × w × c` tensor.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(format!("{h}×{w} is not divisible by pool factor {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let norm = (factor * factor) as f32;
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += x.at3(oy * factor + dy, ox * factor + dx, ch);
                    }
                }
                out.data[(oy * ow + ox) * c + ch] = acc / norm;
            }
        }
    }
    Ok(out)
}
