//! Parameter-free matching: correlation volumes, softmax matching
//! distributions, expected correspondences and the displacement they imply.
//!
//! For flow the candidate set is every pixel of the target map; for
//! disparity it is the same row of the right map. The expected coordinate
//! `G̃` under the matching distribution gives `D = G̃ − p` for flow and
//! `D = x − G̃_x` for disparity, so disparities are non-negative when right
//! view content sits left of the left view content.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::features::FeatureMap;
use crate::field::{DisplacementField, Task};
use crate::tensor::{dot, softmax_in_place, Scalar, Tensor};

/// Raw disparities below this count as a sign-convention violation.
const NEGATIVE_DISPARITY_PX: f64 = -0.5;
/// Fraction of violating pixels that triggers a warning.
const NEGATIVE_DISPARITY_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub temperature: f64,
    /// Divide dot products by `√d` before the softmax.
    pub scale_by_sqrt_d: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { temperature: 1.0, scale_by_sqrt_d: true }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn score_scale(&self, d: usize) -> f64 {
        if self.scale_by_sqrt_d {
            1.0 / (d as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// `H×W×H×W` (flow) or `H×W×W` (disparity) similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume<T = f32> {
    task: Task,
    height: usize,
    width: usize,
    data: Tensor<T>,
}

impl<T: Scalar> CorrelationVolume<T> {
    pub fn new(task: Task, data: Tensor<T>) -> Result<Self> {
        let (height, width) = match (task, data.dims()) {
            (Task::Flow, &[h, w, h2, w2]) if h == h2 && w == w2 => (h, w),
            (Task::Disparity, &[h, w, w2]) if w == w2 => (h, w),
            (_, d) => return Err(shape_err(format!("{} volume cannot have dims {d:?}", task.name()))),
        };
        Ok(Self { task, height, width, data })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn candidates(&self) -> usize {
        match self.task {
            Task::Flow => self.height * self.width,
            Task::Disparity => self.width,
        }
    }

    /// Scores of pixel `(x, y)` against every candidate.
    pub fn row(&self, x: usize, y: usize) -> &[T] {
        let n = self.candidates();
        &self.data.data()[(y * self.width + x) * n..][..n]
    }
}

fn check_pair(a: &FeatureMap, b: &FeatureMap) -> Result<(usize, usize, usize)> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(shape_err(format!(
            "matching {:?} against {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    a.tensor().hwc()
}

/// All-pairs dot products, optionally divided by `√d`.
pub fn correlation_flow(f1: &FeatureMap, f2: &FeatureMap, scaled: bool) -> Result<CorrelationVolume> {
    let (h, w, d) = check_pair(f1, f2)?;
    let s = MatchConfig { temperature: 1.0, scale_by_sqrt_d: scaled }.score_scale(d) as f32;
    let n = h * w;
    let mut data = vec![0.0f32; n * n];
    let (a, b) = (f1.tensor().data(), f2.tensor().data());
    data.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let fp = &a[p * d..][..d];
        for (c, o) in row.iter_mut().enumerate() {
            *o = dot(fp, &b[c * d..][..d]) * s;
        }
    });
    CorrelationVolume::new(Task::Flow, Tensor::new(&[h, w, h, w], data)?)
}

/// Same-row dot products of a rectified pair, optionally divided by `√d`.
pub fn correlation_disparity(fl: &FeatureMap, fr: &FeatureMap, scaled: bool) -> Result<CorrelationVolume> {
    let (h, w, d) = check_pair(fl, fr)?;
    let s = MatchConfig { temperature: 1.0, scale_by_sqrt_d: scaled }.score_scale(d) as f32;
    let mut data = vec![0.0f32; h * w * w];
    let (a, b) = (fl.tensor().data(), fr.tensor().data());
    data.par_chunks_mut(w).enumerate().for_each(|(p, row)| {
        let y = p / w;
        let fp = &a[p * d..][..d];
        for (k, o) in row.iter_mut().enumerate() {
            *o = dot(fp, &b[(y * w + k) * d..][..d]) * s;
        }
    });
    CorrelationVolume::new(Task::Disparity, Tensor::new(&[h, w, w], data)?)
}

/// Softmax-normalized volume; every candidate row sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingDistribution<T = f32> {
    task: Task,
    height: usize,
    width: usize,
    data: Tensor<T>,
}

impl<T: Scalar> MatchingDistribution<T> {
    pub fn task(&self) -> Task {
        self.task
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn row(&self, x: usize, y: usize) -> &[T] {
        let n = match self.task {
            Task::Flow => self.height * self.width,
            Task::Disparity => self.width,
        };
        &self.data.data()[(y * self.width + x) * n..][..n]
    }
}

/// Expected coordinate `(x, y)` under `probs`.
fn expected_coord<T: Scalar>(task: Task, width: usize, y: usize, probs: &[T]) -> [T; 2] {
    match task {
        Task::Flow => {
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for (c, &m) in probs.iter().enumerate() {
                gx = gx + m * T::lit((c % width) as f64);
                gy = gy + m * T::lit((c / width) as f64);
            }
            [gx, gy]
        }
        Task::Disparity => {
            let gx = probs
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (k, &m)| acc + m * T::lit(k as f64));
            [gx, T::lit(y as f64)]
        }
    }
}

fn displacement<T: Scalar>(task: Task, x: usize, y: usize, g: [T; 2]) -> [T; 2] {
    match task {
        Task::Flow => [g[0] - T::lit(x as f64), g[1] - T::lit(y as f64)],
        Task::Disparity => [T::lit(x as f64) - g[0], T::zero()],
    }
}

/// Result of [`soft_match`].
#[derive(Clone, Debug)]
pub struct SoftMatch<T = f32> {
    pub distribution: MatchingDistribution<T>,
    /// `H×W×2` flow or `H×W×1` disparity in the volume's precision.
    pub displacement: Tensor<T>,
}

impl<T: Scalar> SoftMatch<T> {
    pub fn field(&self, scale: usize) -> Result<DisplacementField> {
        let task = self.distribution.task;
        let n = self.distribution.height * self.distribution.width;
        DisplacementField::new(task, self.displacement.cast(), vec![true; n], scale)
    }
}

/// `M = softmax(C / T)` over candidates, then displacements from `G̃ = M·G`.
pub fn soft_match<T: Scalar>(vol: &CorrelationVolume<T>, temperature: f64) -> Result<SoftMatch<T>> {
    MatchConfig { temperature, scale_by_sqrt_d: true }.validate()?;
    let (h, w, task) = (vol.height, vol.width, vol.task);
    let n = vol.candidates();
    let c = task.channels();
    let mut probs = vol.data.clone();
    let inv_t = T::lit(1.0 / temperature);
    probs
        .data_mut()
        .par_chunks_mut(n)
        .for_each(|row| softmax_in_place(row, inv_t));
    let mut disp = vec![T::zero(); h * w * c];
    disp.par_chunks_mut(c).enumerate().for_each(|(p, out)| {
        let (x, y) = (p % w, p / w);
        let g = expected_coord(task, w, y, &probs.data()[p * n..][..n]);
        out.copy_from_slice(&displacement(task, x, y, g)[..c]);
    });
    Ok(SoftMatch {
        distribution: MatchingDistribution { task, height: h, width: w, data: probs },
        displacement: Tensor::new(&[h, w, c], disp)?,
    })
}

/// Fraction of disparities below the convention threshold.
pub fn negative_disparity_fraction(values: impl Iterator<Item = f64>) -> f64 {
    let (mut bad, mut n) = (0usize, 0usize);
    for v in values {
        n += 1;
        if v < NEGATIVE_DISPARITY_PX {
            bad += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        bad as f64 / n as f64
    }
}

fn warn_on_negative(values: impl Iterator<Item = f64>) {
    let frac = negative_disparity_fraction(values);
    if frac > NEGATIVE_DISPARITY_FRACTION {
        log::warn!(
            "{:.1}% of raw disparities are below {NEGATIVE_DISPARITY_PX} px; check that the right view is x_R = x_L − D",
            100.0 * frac
        );
    }
}

/// Global match without materializing the volume. Produces the same
/// values as [`soft_match`] on [`correlation_flow`] / [`correlation_disparity`].
pub fn global_match(f1: &FeatureMap, f2: &FeatureMap, task: Task, cfg: &MatchConfig) -> Result<DisplacementField> {
    cfg.validate()?;
    let (h, w, d) = check_pair(f1, f2)?;
    let s = cfg.score_scale(d) as f32;
    let inv_t = (1.0 / cfg.temperature) as f32;
    let c = task.channels();
    let (a, b) = (f1.tensor().data(), f2.tensor().data());
    let mut out = vec![0.0f32; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row_out)| {
        let n = match task {
            Task::Flow => h * w,
            Task::Disparity => w,
        };
        let mut scores = vec![0.0f32; n];
        for x in 0..w {
            let fp = &a[(y * w + x) * d..][..d];
            for (k, o) in scores.iter_mut().enumerate() {
                let q = match task {
                    Task::Flow => k,
                    Task::Disparity => y * w + k,
                };
                *o = dot(fp, &b[q * d..][..d]) * s;
            }
            softmax_in_place(&mut scores, inv_t);
            let g = expected_coord(task, w, y, &scores);
            row_out[x * c..][..c].copy_from_slice(&displacement(task, x, y, g)[..c]);
        }
    });
    if task == Task::Disparity {
        warn_on_negative(out.iter().map(|&v| f64::from(v)));
    }
    DisplacementField::new(task, Tensor::new(&[h, w, c], out)?, vec![true; h * w], f1.scale())
}

/// Residual from matching `f1` against an already warped target within a
/// `(2r+1)²` window (flow) or a `2r+1` horizontal window (disparity).
/// Candidates outside the map see zero features.
pub fn local_match(
    f1: &FeatureMap,
    f2_warped: &FeatureMap,
    radius: usize,
    task: Task,
    cfg: &MatchConfig,
) -> Result<DisplacementField> {
    cfg.validate()?;
    let (h, w, d) = check_pair(f1, f2_warped)?;
    let s = cfg.score_scale(d) as f32;
    let inv_t = (1.0 / cfg.temperature) as f32;
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = match task {
        Task::Flow => (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect(),
        Task::Disparity => (-r..=r).map(|dx| (dx, 0)).collect(),
    };
    let c = task.channels();
    let (a, b) = (f1.tensor().data(), f2_warped.tensor().data());
    let mut out = vec![0.0f32; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row_out)| {
        let mut scores = vec![0.0f32; offsets.len()];
        for x in 0..w {
            let fp = &a[(y * w + x) * d..][..d];
            for (o, &(dx, dy)) in scores.iter_mut().zip(&offsets) {
                let (tx, ty) = (x as isize + dx, y as isize + dy);
                *o = if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                    dot(fp, &b[(ty as usize * w + tx as usize) * d..][..d]) * s
                } else {
                    0.0
                };
            }
            softmax_in_place(&mut scores, inv_t);
            let (mut ex, mut ey) = (0.0f32, 0.0f32);
            for (&m, &(dx, dy)) in scores.iter().zip(&offsets) {
                ex += m * dx as f32;
                ey += m * dy as f32;
            }
            let res = match task {
                Task::Flow => [ex, ey],
                // Warped right features sit at x − D_up; a further shift
                // of −δ means the disparity grows by δ.
                Task::Disparity => [-ex, 0.0],
            };
            row_out[x * c..][..c].copy_from_slice(&res[..c]);
        }
    });
    DisplacementField::new(task, Tensor::new(&[h, w, c], out)?, vec![true; h * w], f1.scale())
}

/// Gradient of `Σ_p ⟨upstream(p), D(p)⟩` with respect to the volume, given
/// that `∂G̃/∂C(c) = (1/T)·M(c)·(coord(c) − G̃)`.
pub fn match_gradient<T: Scalar>(vol: &CorrelationVolume<T>, temperature: f64, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, task) = (vol.height, vol.width, vol.task);
    let c = task.channels();
    if upstream.dims() != [h, w, c] {
        return Err(shape_err(format!(
            "upstream gradient {:?} for a {h}×{w} {} volume",
            upstream.dims(),
            task.name()
        )));
    }
    let m = soft_match(vol, temperature)?;
    let n = vol.candidates();
    let inv_t = T::lit(1.0 / temperature);
    let probs = m.distribution.data.data();
    let mut grad = vec![T::zero(); h * w * n];
    grad.par_chunks_mut(n).enumerate().for_each(|(p, out)| {
        let y = p / w;
        let row = &probs[p * n..][..n];
        let g = expected_coord(task, w, y, row);
        let up = &upstream.data()[p * c..][..c];
        for (k, (o, &mk)) in out.iter_mut().zip(row).enumerate() {
            *o = match task {
                Task::Flow => {
                    let cx = T::lit((k % w) as f64) - g[0];
                    let cy = T::lit((k / w) as f64) - g[1];
                    inv_t * mk * (up[0] * cx + up[1] * cy)
                }
                Task::Disparity => -(inv_t * mk * up[0] * (T::lit(k as f64) - g[0])),
            };
        }
    });
    Tensor::new(vol.data.dims(), grad)
}
