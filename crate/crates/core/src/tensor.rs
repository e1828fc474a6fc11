//! Dense row-major tensors and the handful of kernels the network needs.
//!
//! Feature maps are channel-last (`H × W × C`). Every kernel that reduces
//! does so in a fixed order inside one output element, and parallel work is
//! only ever split across output rows, so results do not depend on the
//! thread count.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};

/// Floating-point element type for tensors: `f32` storage, `f64` reference.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        check_dims(dims).expect("valid dims");
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Self {
        check_dims(dims).expect("valid dims");
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..len).map(f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Extents of a channel-last map, failing unless the tensor is 3-D.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            d => Err(shape_err(format!("expected H×W×C tensor, got {d:?}"))),
        }
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and equal NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool
    where
        T: BitRepr,
    {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }
}

/// Raw bit patterns, used for bit-exact comparisons.
pub trait BitRepr {
    fn bits(&self) -> u64;
}

impl BitRepr for f32 {
    fn bits(&self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl BitRepr for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(shape_err(format!("tensors have 1 to 4 dims, got {}", dims.len())));
    }
    if dims.contains(&0) {
        return Err(shape_err(format!("zero extent in {dims:?}")));
    }
    Ok(())
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.dims() {
        &[m, n] => Ok((m, n)),
        d => Err(shape_err(format!("{what} must be 2-D, got {d:?}"))),
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (k2, n) = matrix_dims(b, "rhs")?;
    if k != k2 {
        return Err(shape_err(format!("matmul inner extents {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`; each entry is a plain dot product.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (n, k2) = matrix_dims(b, "rhs")?;
    if k != k2 {
        return Err(shape_err(format!("matmul_nt inner extents {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    });
    Tensor::new(&[m, n], out)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// In-place max-subtracted softmax of `scale · row`.
pub fn softmax_in_place<T: Scalar>(row: &mut [T], scale: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    // The normalizer is accumulated in f64 so f32 rows still sum to 1
    // within a few ulps.
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = ((*v - max) * scale).exp();
        sum += v.as_f64();
    }
    for v in row.iter_mut() {
        *v = T::lit(v.as_f64() / sum);
    }
}

/// Softmax of `scale · t` along the last dimension.
pub fn softmax_lastdim<T: Scalar>(t: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if !(scale > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "softmax scale must be positive, got {scale:?}"
        )));
    }
    let n = *t.dims().last().expect("non-empty dims");
    let mut out = t.clone();
    out.data_mut()
        .par_chunks_mut(n)
        .for_each(|row| softmax_in_place(row, scale));
    Ok(out)
}

/// 2-D cross-correlation of an `H×W×Cin` map with a `kh×kw×Cin×Cout` kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (h, w, cin) = input.hwc()?;
    let (kh, kw, kcin, cout) = match kernel.dims() {
        &[a, b, c, d] => (a, b, c, d),
        d => return Err(shape_err(format!("conv kernel must be 4-D, got {d:?}"))),
    };
    if kcin != cin {
        return Err(shape_err(format!("conv expects {kcin} input channels, got {cin}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv stride must be positive".into()));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(shape_err(format!("conv bias has {} entries, need {cout}", b.len())));
        }
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(shape_err(format!(
            "kernel {kh}×{kw} does not fit {h}×{w} with padding {padding}"
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let (src, ker) = (input.data(), kernel.data());
    let mut out = vec![T::zero(); oh * ow * cout];
    out.par_chunks_mut(ow * cout).enumerate().for_each(|(oy, row)| {
        for ox in 0..ow {
            let acc = &mut row[ox * cout..(ox + 1) * cout];
            if let Some(b) = bias {
                acc.copy_from_slice(b.data());
            }
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
                    let px = &src[(iy as usize * w + ix as usize) * cin..][..cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &a) in px.iter().enumerate() {
                        if a == T::zero() {
                            continue;
                        }
                        let krow = &ker[kbase + ci * cout..][..cout];
                        for (o, &kv) in acc.iter_mut().zip(krow) {
                            *o = *o + a * kv;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(&[oh, ow, cout], out)
}

/// Bilinear lookup of `src` (`H×W×C`) at `coords` (`H'×W'×2`, `(x, y)` order).
///
/// A sample is valid when it lies inside `[0, W−1] × [0, H−1]`; invalid
/// samples are zero-filled.
pub fn bilinear_sample<T: Scalar>(
    src: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let (h, w, c) = src.hwc()?;
    let (oh, ow, two) = coords.hwc()?;
    if two != 2 {
        return Err(shape_err(format!("coords need 2 channels, got {two}")));
    }
    let mut out = vec![T::zero(); oh * ow * c];
    let mut valid = vec![false; oh * ow];
    for (p, (px, ok)) in out.chunks_mut(c).zip(valid.iter_mut()).enumerate() {
        let x = coords.data()[2 * p];
        let y = coords.data()[2 * p + 1];
        if let Some(v) = sample_at(src.data(), h, w, c, x, y, px) {
            *ok = v;
        }
    }
    Ok((Tensor::new(&[oh, ow, c], out)?, valid))
}

/// Writes the bilinear sample at `(x, y)` into `out`; returns `Some(true)`
/// when in range, `Some(false)` (zero-filled) otherwise.
pub(crate) fn sample_at<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    x: T,
    y: T,
    out: &mut [T],
) -> Option<bool> {
    let max_x = T::from_usize(w - 1)?;
    let max_y = T::from_usize(h - 1)?;
    if !(x >= T::zero() && x <= max_x && y >= T::zero() && y <= max_y) {
        out.iter_mut().for_each(|v| *v = T::zero());
        return Some(false);
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0.to_usize()?;
    let y0 = y0.to_usize()?;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let one = T::one();
    let taps = [
        ((y0, x0), (one - fx) * (one - fy)),
        ((y0, x1), fx * (one - fy)),
        ((y1, x0), (one - fx) * fy),
        ((y1, x1), fx * fy),
    ];
    out.iter_mut().for_each(|v| *v = T::zero());
    for ((yy, xx), wt) in taps {
        if wt == T::zero() {
            continue;
        }
        let s = &src[(yy * w + xx) * c..][..c];
        for (o, &v) in out.iter_mut().zip(s) {
            *o = *o + wt * v;
        }
    }
    Some(true)
}

/// Per-channel normalization over the spatial extent of an `H×W×C` map.
pub fn instance_norm<T: Scalar>(t: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (h, w, c) = t.hwc()?;
    let n = (h * w) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for px in t.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for px in t.data().chunks(c) {
        for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + eps).sqrt()).collect();
    let mut out = t.clone();
    for px in out.data_mut().chunks_mut(c) {
        for ((v, m), s) in px.iter_mut().zip(&mean).zip(&inv) {
            *v = T::lit((v.as_f64() - m) * s);
        }
    }
    Ok(out)
}

/// Layer normalization over the last dimension with affine parameters.
pub fn layer_norm<T: Scalar>(
    t: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = *t.dims().last().expect("non-empty dims");
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err(format!(
            "layer norm over {c} channels with {}/{} affine params",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = t.clone();
    out.data_mut().par_chunks_mut(c).for_each(|row| {
        let n = c as f64;
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = T::lit((v.as_f64() - mean) * inv) * *g + *b;
        }
    });
    Ok(out)
}

/// `x · w + b` on token rows: `x: n×din`, `w: din×dout`, `b: dout`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    if let Some(b) = b {
        let n = y.dims()[1];
        if b.len() != n {
            return Err(shape_err(format!("linear bias has {} entries, need {n}", b.len())));
        }
        for row in y.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
    }
    Ok(y)
}

pub fn relu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()))
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    t.map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Concatenates channel-last maps of equal spatial extent.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (h, w, _) = parts
        .first()
        .ok_or_else(|| shape_err("nothing to concatenate"))?
        .hwc()?;
    let mut chans = Vec::with_capacity(parts.len());
    for p in parts {
        let (ph, pw, pc) = p.hwc()?;
        if (ph, pw) != (h, w) {
            return Err(shape_err(format!("concat of {ph}×{pw} onto {h}×{w}")));
        }
        chans.push(pc);
    }
    let total: usize = chans.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for i in 0..h * w {
        for (p, &c) in parts.iter().zip(&chans) {
            out.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(&[h, w, total], out)
}

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
const DTYPE_F32: u32 = 0;

/// Fixed header fields of a TNSR file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorFileHeader {
    pub dtype: u32,
    pub dims: Vec<usize>,
}

impl TensorFileHeader {
    pub fn byte_len(&self) -> usize {
        12 + 4 * self.dims.len()
    }
}

/// Serializes as `TNSR`, u32 dtype, u32 ndim, u32 dims, f32 LE payload.
pub fn write_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_tensor_header(bytes: &[u8]) -> Result<TensorFileHeader> {
    if bytes.len() < 12 {
        return Err(Error::Format("truncated TNSR header".into()));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &bytes[..4])));
    }
    let dtype = le_u32(&bytes[4..8]);
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let ndim = le_u32(&bytes[8..12]) as usize;
    if !(1..=4).contains(&ndim) {
        return Err(Error::Format(format!("ndim {ndim} outside [1, 4]")));
    }
    if bytes.len() < 12 + 4 * ndim {
        return Err(Error::Format("truncated TNSR dims".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| le_u32(&bytes[12 + 4 * i..16 + 4 * i]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(Error::Format(format!("zero extent in {dims:?}")));
    }
    Ok(TensorFileHeader { dtype, dims })
}

pub fn read_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let header = read_tensor_header(bytes)?;
    let count: usize = header.dims.iter().product();
    let start = header.byte_len();
    let payload = &bytes[start..];
    if payload.len() != 4 * count {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            4 * count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&header.dims, data)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Separable low-pass of an `H×W×C` map with the symmetric 1-D kernel
/// `taps` along both axes. Taps falling outside the map are dropped and the
/// rest renormalized, so constant maps stay constant up to the border.
pub fn blur_separable<T: Scalar>(t: &Tensor<T>, taps: &[f64]) -> Result<Tensor<T>> {
    let (h, w, c) = t.hwc()?;
    if taps.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("blur needs an odd tap count, got {}", taps.len())));
    }
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[T], along_x: bool| -> Vec<T> {
        let mut out = vec![T::zero(); h * w * c];
        out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let px = &mut row[x * c..][..c];
                let mut norm = 0.0f64;
                for (k, &tap) in taps.iter().enumerate() {
                    let o = k as isize - r;
                    let (sx, sy) = if along_x { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    norm += tap;
                    let tap = T::lit(tap);
                    let s = &src[(sy as usize * w + sx as usize) * c..][..c];
                    for (o, &v) in px.iter_mut().zip(s) {
                        *o = *o + tap * v;
                    }
                }
                let inv = T::lit(1.0 / norm);
                px.iter_mut().for_each(|v| *v = *v * inv);
            }
        });
        out
    };
    let horizontal = pass(t.data(), true);
    Tensor::new(t.dims(), pass(&horizontal, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        let n = rows[0].len();
        Tensor::new(&[rows.len(), n], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let b = t2(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        let ones_row = Tensor::<f64>::full(&[1, 8], 1.0);
        let ones_col = Tensor::<f64>::full(&[8, 1], 1.0);
        assert_eq!(matmul(&ones_row, &ones_col).unwrap().data(), &[8.0]);
        assert!(matmul(&a, &ones_col).is_err());
    }

    #[test]
    fn matmul_nt_matches_matmul_of_transpose() {
        let a = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = t2(&[&[1.0, 0.0, 1.0], &[2.0, 1.0, 0.0]]);
        let bt = t2(&[&[1.0, 2.0], &[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &bt).unwrap());
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::<f64>::new(&[3], vec![0.0; 3]).unwrap();
        let s = softmax_lastdim(&t, 1.0).unwrap();
        for v in s.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let t = Tensor::<f32>::new(&[2], vec![1000.0, 0.0]).unwrap();
        let s = softmax_lastdim(&t, 1.0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-30);
        let t = Tensor::<f64>::new(&[2], vec![2f64.ln(), 0.0]).unwrap();
        let s = softmax_lastdim(&t, 1.0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 1.0 / 3.0, epsilon = 1e-12);
        assert!(softmax_lastdim(&t, 0.0).is_err());
    }

    #[test]
    fn conv_cases() {
        let input = Tensor::<f32>::from_fn(&[5, 4, 2], |i| i as f32);
        let mut k = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        k.set(&[0, 0, 0, 0], 1.0);
        k.set(&[0, 0, 1, 1], 1.0);
        assert_eq!(conv2d(&input, &k, None, 1, 0).unwrap(), input);

        let ones = Tensor::<f32>::full(&[6, 6, 1], 1.0);
        let box3 = Tensor::<f32>::full(&[3, 3, 1, 1], 1.0);
        let out = conv2d(&ones, &box3, None, 1, 1).unwrap();
        assert_eq!(out.at(&[2, 3, 0]), 9.0);
        assert_eq!(out.at(&[0, 0, 0]), 4.0);

        let x = Tensor::<f32>::zeros(&[8, 8, 1]);
        let out = conv2d(&x, &box3, None, 2, 1).unwrap();
        assert_eq!(out.dims(), &[4, 4, 1]);
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 2, 1]), None, 1, 1).is_err());
    }

    #[test]
    fn bilinear_cases() {
        let src = Tensor::<f32>::new(&[1, 2, 1], vec![2.0, 4.0]).unwrap();
        let coords = Tensor::<f32>::new(&[1, 4, 2], vec![0.5, 0.0, 1.0, 0.0, -1.0, 0.0, 1.5, 0.0])
            .unwrap();
        let (out, valid) = bilinear_sample(&src, &coords).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(valid, vec![true, true, false, false]);
    }

    #[test]
    fn tnsr_header_layout_and_errors() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5);
        let bytes = write_tensor(&t);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 6 * 4);
        assert_eq!(read_tensor_header(&bytes).unwrap().byte_len(), 20);
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(read_tensor(&bad), Err(Error::Format(_))));
        assert!(matches!(read_tensor(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn instance_norm_zeroes_constant_maps() {
        let t = Tensor::<f32>::full(&[3, 3, 2], 7.0);
        let n = instance_norm(&t, 1e-5).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    fn rand_matrix(seed: u64, n: usize) -> Tensor<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0f32..1.0))
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 1..16),
            shift in -100.0f64..100.0,
        ) {
            let n = row.len();
            let t = Tensor::new(&[n], row.clone()).unwrap();
            let s = softmax_lastdim(&t, 1.0).unwrap();
            prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted = Tensor::new(&[n], row.iter().map(|v| v + shift).collect()).unwrap();
            let s2 = softmax_lastdim(&shifted, 1.0).unwrap();
            prop_assert!(s.max_abs_diff(&s2) < 1e-9);
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            let a = rand_matrix(seed, 16);
            let b = rand_matrix(seed + 1, 16);
            let c = rand_matrix(seed + 2, 16);
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = l.data().iter().map(|v| v.abs()).fold(0.0f32, f32::max).max(1.0);
            prop_assert!((l.max_abs_diff(&r) as f32) / scale < 1e-5);
        }

        #[test]
        fn tnsr_round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f32>::from_fn(&dims, |_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff));
            let back = read_tensor(&write_tensor(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }

        #[test]
        fn bilinear_at_integers_gathers_and_is_linear(seed in any::<u64>(), a in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s1 = Tensor::<f64>::from_fn(&[4, 5, 2], |_| rng.random_range(-1.0..1.0));
            let s2 = Tensor::<f64>::from_fn(&[4, 5, 2], |_| rng.random_range(-1.0..1.0));
            let ix: Vec<f64> = (0..6).flat_map(|_| {
                [rng.random_range(0..5) as f64, rng.random_range(0..4) as f64]
            }).collect();
            let coords = Tensor::new(&[1, 6, 2], ix.clone()).unwrap();
            let (g, _) = bilinear_sample(&s1, &coords).unwrap();
            for p in 0..6 {
                for c in 0..2 {
                    let want = s1.at(&[ix[2 * p + 1] as usize, ix[2 * p] as usize, c]);
                    prop_assert_eq!(g.at(&[0, p, c]), want);
                }
            }
            let frac = Tensor::new(&[1, 6, 2], ix.iter().map(|v| (v * 0.7).min(3.0)).collect()).unwrap();
            let combo = s1.zip_with(&s2, |x, y| x + a * y).unwrap();
            let (l, _) = bilinear_sample(&combo, &frac).unwrap();
            let (r1, _) = bilinear_sample(&s1, &frac).unwrap();
            let (r2, _) = bilinear_sample(&s2, &frac).unwrap();
            let r = r1.zip_with(&r2, |x, y| x + a * y).unwrap();
            prop_assert!(l.max_abs_diff(&r) < 1e-12);
        }
    }
}
