//! Transformer enhancement of a feature pair: stacked blocks of windowed
//! self-attention, cross-attention and a feed-forward layer.
//!
//! Each sublayer is pre-normalized and wrapped in a residual connection.
//! Attention is single-head and restricted to a `K × K` grid of windows;
//! odd blocks roll the map by half a window first so information crosses
//! window borders. Maps are zero-padded to a multiple of `2K` before each
//! block and cropped afterwards. No attention mask is applied at the
//! cyclic seams.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::features::{FeatureMap, ModelWeights};
use crate::tensor::{gelu, layer_norm, linear, matmul, matmul_nt, softmax_lastdim, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancementConfig {
    pub num_blocks: usize,
    /// Windows per side, `K`.
    pub windows: usize,
    pub shift: bool,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        Self { num_blocks: 6, windows: 2, shift: true }
    }
}

impl EnhancementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 {
            return Err(Error::InvalidArgument("window count K must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `Softmax(q·kᵀ/√d)·v` for `q: n×d`, `k: m×d`, `v: m×e`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(shape_err("attention takes 2-D token tensors"));
    }
    if k.dims()[0] != v.dims()[0] {
        return Err(shape_err(format!("{} keys but {} values", k.dims()[0], v.dims()[0])));
    }
    let d = q.dims()[1];
    let scores = matmul_nt(q, k)?;
    let probs = softmax_lastdim(&scores, T::lit(1.0 / (d as f64).sqrt()))?;
    matmul(&probs, v)
}

/// Where windows came from, so they can be put back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub channels: usize,
    pub windows: usize,
    /// Cyclic roll `(dy, dx)` applied before cutting.
    pub shift: (usize, usize),
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, channels: usize, windows: usize, shifted: bool) -> Result<Self> {
        if windows == 0 {
            return Err(Error::InvalidArgument("window count K must be ≥ 1".into()));
        }
        let unit = 2 * windows;
        let (ph, pw) = (height.div_ceil(unit) * unit, width.div_ceil(unit) * unit);
        let shift = if shifted { (ph / unit, pw / unit) } else { (0, 0) };
        Ok(Self {
            height,
            width,
            padded_height: ph,
            padded_width: pw,
            channels,
            windows,
            shift,
        })
    }

    pub fn window_height(&self) -> usize {
        self.padded_height / self.windows
    }

    pub fn window_width(&self) -> usize {
        self.padded_width / self.windows
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_height() * self.window_width()
    }

    /// `(window index, token index)` of original pixel `(x, y)`.
    pub fn locate(&self, x: usize, y: usize) -> (usize, usize) {
        let (ph, pw) = (self.padded_height, self.padded_width);
        let sy = (y + ph - self.shift.0) % ph;
        let sx = (x + pw - self.shift.1) % pw;
        let (wh, ww) = (self.window_height(), self.window_width());
        ((sy / wh) * self.windows + sx / ww, (sy % wh) * ww + sx % ww)
    }
}

/// Cuts an `H×W×C` map into `K²` windows of row-major tokens, after
/// zero-padding and (optionally) rolling by half a window.
pub fn partition_windows<T: Scalar>(f: &Tensor<T>, windows: usize, shifted: bool) -> Result<(Vec<Tensor<T>>, WindowLayout)> {
    let (h, w, c) = f.hwc()?;
    let layout = WindowLayout::new(h, w, c, windows, shifted)?;
    let n = layout.tokens_per_window();
    let mut out = vec![vec![T::zero(); n * c]; windows * windows];
    for y in 0..h {
        for x in 0..w {
            let (wi, ti) = layout.locate(x, y);
            out[wi][ti * c..(ti + 1) * c].copy_from_slice(&f.data()[(y * w + x) * c..][..c]);
        }
    }
    let tensors = out
        .into_iter()
        .map(|d| Tensor::new(&[n, c], d))
        .collect::<Result<Vec<_>>>()?;
    Ok((tensors, layout))
}

/// Inverse of [`partition_windows`]; padding is dropped.
pub fn unpartition_windows<T: Scalar>(windows: &[Tensor<T>], layout: &WindowLayout) -> Result<Tensor<T>> {
    let k = layout.windows;
    let n = layout.tokens_per_window();
    let c = windows.first().map(|t| t.dims()[t.ndim() - 1]).unwrap_or(layout.channels);
    if windows.len() != k * k || windows.iter().any(|t| t.dims() != [n, c]) {
        return Err(shape_err(format!("expected {} windows of {n}×{c} tokens", k * k)));
    }
    let (h, w) = (layout.height, layout.width);
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for x in 0..w {
            let (wi, ti) = layout.locate(x, y);
            out[(y * w + x) * c..][..c].copy_from_slice(&windows[wi].data()[ti * c..][..c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

fn tokens(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = t.hwc()?;
    t.clone().reshape(&[h * w, c])
}

fn ln(x: &Tensor<f32>, w: &ModelWeights, name: &str) -> Result<Tensor<f32>> {
    layer_norm(x, w.get(&format!("{name}.gamma"))?, w.get(&format!("{name}.beta"))?, LN_EPS)
}

fn proj(x: &Tensor<f32>, w: &ModelWeights, name: &str) -> Result<Tensor<f32>> {
    linear(x, w.get(&format!("{name}.weight"))?, Some(w.get(&format!("{name}.bias"))?))
}

/// Windowed attention on full-map token tensors of an `h×w` grid.
fn window_attention(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    h: usize,
    w: usize,
    windows: usize,
    shifted: bool,
) -> Result<Tensor<f32>> {
    let c = q.dims()[1];
    let grid = |t: &Tensor<f32>| t.clone().reshape(&[h, w, c]);
    let (qw, layout) = partition_windows(&grid(q)?, windows, shifted)?;
    let (kw, _) = partition_windows(&grid(k)?, windows, shifted)?;
    let (vw, _) = partition_windows(&grid(v)?, windows, shifted)?;
    let outs = (0..qw.len())
        .into_par_iter()
        .map(|i| attention(&qw[i], &kw[i], &vw[i]))
        .collect::<Result<Vec<_>>>()?;
    unpartition_windows(&outs, &layout)?.reshape(&[h * w, c])
}

fn self_attention(x: &Tensor<f32>, wts: &ModelWeights, p: &str, h: usize, w: usize, k: usize, shifted: bool) -> Result<Tensor<f32>> {
    let n = ln(x, wts, &format!("{p}.self.norm"))?;
    let q = proj(&n, wts, &format!("{p}.self.q"))?;
    let kk = proj(&n, wts, &format!("{p}.self.k"))?;
    let v = proj(&n, wts, &format!("{p}.self.v"))?;
    let a = window_attention(&q, &kk, &v, h, w, k, shifted)?;
    x.add(&proj(&a, wts, &format!("{p}.self.o"))?)
}

#[allow(clippy::too_many_arguments)]
fn cross_attention(
    x: &Tensor<f32>,
    other: &Tensor<f32>,
    wts: &ModelWeights,
    p: &str,
    h: usize,
    w: usize,
    k: usize,
    shifted: bool,
) -> Result<Tensor<f32>> {
    let nq = ln(x, wts, &format!("{p}.cross.norm_q"))?;
    let nkv = ln(other, wts, &format!("{p}.cross.norm_kv"))?;
    let q = proj(&nq, wts, &format!("{p}.cross.q"))?;
    let kk = proj(&nkv, wts, &format!("{p}.cross.k"))?;
    let v = proj(&nkv, wts, &format!("{p}.cross.v"))?;
    let a = window_attention(&q, &kk, &v, h, w, k, shifted)?;
    x.add(&proj(&a, wts, &format!("{p}.cross.o"))?)
}

fn feed_forward(x: &Tensor<f32>, wts: &ModelWeights, p: &str) -> Result<Tensor<f32>> {
    let n = ln(x, wts, &format!("{p}.ffn.norm"))?;
    let hdn = gelu(&proj(&n, wts, &format!("{p}.ffn.fc1"))?);
    x.add(&proj(&hdn, wts, &format!("{p}.ffn.fc2"))?)
}

fn pad_to(t: &Tensor<f32>, ph: usize, pw: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = t.hwc()?;
    if (h, w) == (ph, pw) {
        return Ok(t.clone());
    }
    let mut out = vec![0.0f32; ph * pw * c];
    for y in 0..h {
        out[y * pw * c..][..w * c].copy_from_slice(&t.data()[y * w * c..][..w * c]);
    }
    Tensor::new(&[ph, pw, c], out)
}

fn crop_to(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (ph, pw, c) = t.hwc()?;
    if (h, w) == (ph, pw) {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        out.extend_from_slice(&t.data()[y * pw * c..][..w * c]);
    }
    Tensor::new(&[h, w, c], out)
}

/// One block applied symmetrically to both maps.
pub fn transformer_block(
    f1: &FeatureMap,
    f2: &FeatureMap,
    weights: &ModelWeights,
    cfg: &EnhancementConfig,
    block: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    cfg.validate()?;
    if f1.tensor().dims() != f2.tensor().dims() {
        return Err(shape_err(format!(
            "enhancement inputs {:?} vs {:?}",
            f1.tensor().dims(),
            f2.tensor().dims()
        )));
    }
    let (h, w, c) = f1.tensor().hwc()?;
    let layout = WindowLayout::new(h, w, c, cfg.windows, false)?;
    let (ph, pw) = (layout.padded_height, layout.padded_width);
    let shifted = cfg.shift && block % 2 == 1;
    let p = format!("enh.block{block}");

    let x1 = tokens(&pad_to(f1.tensor(), ph, pw)?)?;
    let x2 = tokens(&pad_to(f2.tensor(), ph, pw)?)?;
    let q1 = self_attention(&x1, weights, &p, ph, pw, cfg.windows, shifted)?;
    let q2 = self_attention(&x2, weights, &p, ph, pw, cfg.windows, shifted)?;
    let v1 = cross_attention(&q1, &x2, weights, &p, ph, pw, cfg.windows, shifted)?;
    let v2 = cross_attention(&q2, &x1, weights, &p, ph, pw, cfg.windows, shifted)?;
    let o1 = feed_forward(&v1, weights, &p)?.reshape(&[ph, pw, c])?;
    let o2 = feed_forward(&v2, weights, &p)?.reshape(&[ph, pw, c])?;
    Ok((
        FeatureMap::new(crop_to(&o1, h, w)?, f1.scale())?,
        FeatureMap::new(crop_to(&o2, h, w)?, f2.scale())?,
    ))
}

/// `num_blocks` blocks in sequence, alternating unshifted and shifted windows.
pub fn enhance(
    f1: &FeatureMap,
    f2: &FeatureMap,
    weights: &ModelWeights,
    cfg: &EnhancementConfig,
) -> Result<(FeatureMap, FeatureMap)> {
    cfg.validate()?;
    let mut pair = (f1.clone(), f2.clone());
    for block in 0..cfg.num_blocks {
        pair = transformer_block(&pair.0, &pair.1, weights, cfg, block)?;
    }
    Ok(pair)
}
