//! Multi-scale feature extraction from voxel grids, and positional encoding.
//!
//! The extractor is a small residual CNN: a 7×7 stride-2 stem, two residual
//! blocks that take the map to 1/4 resolution, then one shared 3×3 output
//! convolution applied with stride 1, 2 or 4 to produce the 1/4, 1/8 and
//! 1/16 maps. Every convolution is followed by instance normalization.
//!
//! Strided convolutions see a Gaussian-blurred input (σ = stride/2). With
//! untrained, spatially white kernels, plain striding makes features of a
//! sub-stride shifted input nearly uncorrelated with the original; the blur
//! keeps them close enough for matching to work.

mod weights;

use std::collections::BTreeMap;

pub use weights::{
    init_weights, load_weights, save_weights, ModelConfig, ModelWeights, WEIGHTS_VERSION,
};
pub(crate) use weights::{mix64, task_key};

use crate::error::{shape_err, Error, Result};
use crate::events::VoxelGrid;
use crate::tensor::{blur_separable, conv2d, instance_norm, relu, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Scales the extractor can produce.
pub const SCALES: [usize; 3] = [4, 8, 16];

/// `H' × W' × d` features at `1/scale` of the sensor resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor<f32>,
    scale: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor<f32>, scale: usize) -> Result<Self> {
        data.hwc()?;
        if scale == 0 {
            return Err(Error::InvalidArgument("feature scale must be positive".into()));
        }
        Ok(Self { data, scale })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let d = self.dim();
        &self.data.data()[(y * self.width() + x) * d..][..d]
    }
}

fn conv_named(
    x: &Tensor<f32>,
    w: &ModelWeights,
    name: &str,
    stride: usize,
    padding: usize,
) -> Result<Tensor<f32>> {
    let k = w.get(&format!("{name}.weight"))?;
    let b = w.get(&format!("{name}.bias"))?;
    if stride > 1 {
        let blurred = blur_separable(x, &gaussian_taps(stride as f64 / 2.0))?;
        return conv2d(&blurred, k, Some(b), stride, padding);
    }
    conv2d(x, k, Some(b), stride, padding)
}

/// Normalized Gaussian taps covering ±3σ.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn conv_norm(x: &Tensor<f32>, w: &ModelWeights, name: &str, stride: usize, padding: usize) -> Result<Tensor<f32>> {
    instance_norm(&conv_named(x, w, name, stride, padding)?, NORM_EPS)
}

fn residual_block(x: &Tensor<f32>, w: &ModelWeights, name: &str, stride: usize) -> Result<Tensor<f32>> {
    let y = relu(&conv_norm(x, w, &format!("{name}.conv1"), stride, 1)?);
    let y = conv_norm(&y, w, &format!("{name}.conv2"), 1, 1)?;
    let shortcut = if w.tensors().contains_key(&format!("{name}.down.weight")) {
        conv_norm(x, w, &format!("{name}.down"), stride, 0)?
    } else {
        x.clone()
    };
    Ok(relu(&y.add(&shortcut)?))
}

/// Shared trunk up to 1/4 resolution.
fn trunk(v: &VoxelGrid, w: &ModelWeights) -> Result<Tensor<f32>> {
    let stem = w.get("ext.stem.weight")?;
    if stem.dims()[2] != v.bins() {
        return Err(shape_err(format!(
            "extractor expects {} temporal bins, voxel grid has {}",
            stem.dims()[2],
            v.bins()
        )));
    }
    let x = relu(&conv_norm(v.tensor(), w, "ext.stem", 2, 3)?);
    let x = residual_block(&x, w, "ext.block0", 2)?;
    residual_block(&x, w, "ext.block1", 1)
}

/// Features for each requested scale, all from one set of shared weights.
pub fn extract_features(
    v: &VoxelGrid,
    w: &ModelWeights,
    scales: &[usize],
) -> Result<BTreeMap<usize, FeatureMap>> {
    if let Some(bad) = scales.iter().find(|s| !SCALES.contains(s)) {
        return Err(Error::InvalidArgument(format!("unsupported feature scale {bad}")));
    }
    let quarter = trunk(v, w)?;
    let mut out = BTreeMap::new();
    for &scale in scales {
        let f = conv_norm(&quarter, w, "ext.out", scale / 4, 1)?;
        debug_assert_eq!(f.dims()[0], v.height().div_ceil(scale));
        debug_assert_eq!(f.dims()[1], v.width().div_ceil(scale));
        out.insert(scale, FeatureMap::new(f, scale)?);
    }
    Ok(out)
}

/// Fixed 2-D sinusoidal encoding: the first `d/2` channels encode the
/// column, the rest the row, as interleaved `(sin, cos)` pairs with
/// wavelengths growing geometrically from 2π to 2π·10⁴ cells.
pub fn positional_encoding(height: usize, width: usize, dim: usize) -> Result<Tensor<f32>> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::InvalidArgument(format!("positional encoding needs even dim, got {dim}")));
    }
    let half = dim / 2;
    let pairs = half.div_ceil(2);
    let freqs: Vec<f64> = (0..pairs)
        .map(|i| 10000f64.powf(-(2.0 * i as f64) / half as f64))
        .collect();
    let encode = |pos: f64, out: &mut [f32]| {
        for (c, o) in out.iter_mut().enumerate() {
            let phase = pos * freqs[c / 2];
            *o = if c % 2 == 0 { phase.sin() } else { phase.cos() } as f32;
        }
    };
    let mut data = vec![0.0f32; height * width * dim];
    for y in 0..height {
        for x in 0..width {
            let px = &mut data[(y * width + x) * dim..][..dim];
            let (xs, ys) = px.split_at_mut(half);
            encode(x as f64, xs);
            encode(y as f64, ys);
        }
    }
    Tensor::new(&[height, width, dim], data)
}

/// `F + P` with `P` from [`positional_encoding`].
pub fn add_positional_encoding(f: &FeatureMap) -> Result<FeatureMap> {
    let p = positional_encoding(f.height(), f.width(), f.dim())?;
    FeatureMap::new(f.tensor().add(&p)?, f.scale())
}
