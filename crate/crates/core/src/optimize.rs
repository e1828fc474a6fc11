//! Refinement of a coarse displacement field: bilinear upsampling, feature
//! propagation, one coarse-to-fine matching step at 1/4 resolution, and
//! iterative gated-recurrent updates driven by local matching costs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhancement::{enhance, EnhancementConfig};
use crate::error::{shape_err, Error, Result};
use crate::features::{add_positional_encoding, task_key, FeatureMap, ModelWeights};
use crate::field::{DisplacementField, Task};
use crate::matching::{local_match, MatchConfig};
use crate::tensor::{bilinear_sample, concat_channels, conv2d, dot, sample_at, sigmoid, softmax_in_place, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub flow_iters: usize,
    pub disp_iters: usize,
    /// Cost lookup radius of the recurrent update.
    pub lookup_radius: usize,
    /// Windows per side when re-enhancing at 1/4.
    pub fine_windows: usize,
    /// Radius of the 1/4-scale local match.
    pub local_radius: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { flow_iters: 6, disp_iters: 3, lookup_radius: 3, fine_windows: 8, local_radius: 4 }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookup_radius == 0 || self.local_radius == 0 {
            return Err(Error::InvalidArgument("refinement radii must be ≥ 1".into()));
        }
        if self.fine_windows == 0 {
            return Err(Error::InvalidArgument("fine window count must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn iters(&self, task: Task) -> usize {
        match task {
            Task::Flow => self.flow_iters,
            Task::Disparity => self.disp_iters,
        }
    }
}

/// Bilinear upsampling by `factor`, magnitudes multiplied by `factor`.
///
/// Output pixel `x` reads the source at `x / factor`, i.e. source cell `i`
/// is centred on output pixel `factor·i`; reads past the last cell clamp.
/// The result is cropped to `extent` when given. Validity follows the
/// nearest source cell.
pub fn upsample_displacement(d: &DisplacementField, factor: usize, extent: Option<(usize, usize)>) -> Result<DisplacementField> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be positive".into()));
    }
    let (h, w, c) = (d.height(), d.width(), d.channels());
    let (oh, ow) = extent.unwrap_or((h * factor, w * factor));
    if oh > h * factor || ow > w * factor {
        return Err(shape_err(format!("cannot upsample {h}×{w} by {factor} to {oh}×{ow}")));
    }
    let f = factor as f32;
    let mut out = vec![0.0f32; oh * ow * c];
    let mut valid = vec![false; oh * ow];
    let src = d.tensor().data();
    let mut px = vec![0.0f32; c];
    for y in 0..oh {
        let sy = (y as f32 / f).min((h - 1) as f32);
        for x in 0..ow {
            let sx = (x as f32 / f).min((w - 1) as f32);
            sample_at(src, h, w, c, sx, sy, &mut px);
            for (o, v) in out[(y * ow + x) * c..][..c].iter_mut().zip(&px) {
                *o = v * f;
            }
            let (nx, ny) = ((sx.round() as usize).min(w - 1), (sy.round() as usize).min(h - 1));
            valid[y * ow + x] = d.is_valid(nx, ny);
        }
    }
    DisplacementField::new(d.task(), Tensor::new(&[oh, ow, c], out)?, valid, (d.scale() / factor).max(1))
}

/// Samples `target` at each pixel's correspondence: `p + (u, v)` for flow,
/// `(x − D, y)` for disparity. Out-of-range samples are zero.
pub fn warp_features(target: &FeatureMap, d: &DisplacementField) -> Result<FeatureMap> {
    let (h, w, _) = target.tensor().hwc()?;
    if d.height() != h || d.width() != w {
        return Err(shape_err(format!("warping {h}×{w} features with a {}×{} field", d.height(), d.width())));
    }
    let coords = Tensor::from_fn(&[h, w, 2], |i| {
        let (p, axis) = (i / 2, i % 2);
        let [a, b] = d.get(p % w, p / w);
        match (d.task(), axis) {
            (Task::Flow, 0) => (p % w) as f32 + a,
            (Task::Flow, _) => (p / w) as f32 + b,
            (Task::Disparity, 0) => (p % w) as f32 - a,
            (Task::Disparity, _) => (p / w) as f32,
        }
    });
    let (warped, _) = bilinear_sample(target.tensor(), &coords)?;
    FeatureMap::new(warped, target.scale())
}

/// Row-stochastic `Softmax(F·Fᵀ/√d)` over all pixels of `f`.
pub fn propagation_weights(f: &FeatureMap) -> Result<Tensor<f32>> {
    let (h, w, d) = f.tensor().hwc()?;
    let n = h * w;
    let s = 1.0 / (d as f32).sqrt();
    let a = f.tensor().data();
    let mut out = vec![0.0f32; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let fp = &a[p * d..][..d];
        for (q, o) in row.iter_mut().enumerate() {
            *o = dot(fp, &a[q * d..][..d]);
        }
        softmax_in_place(row, s);
    });
    Tensor::new(&[n, n], out)
}

/// `D̂ = Softmax(F·Fᵀ/√d)·D`. Every output pixel is a convex combination
/// of the input field, so the result is marked valid everywhere.
pub fn propagate(f: &FeatureMap, d: &DisplacementField) -> Result<DisplacementField> {
    let (h, w, _) = f.tensor().hwc()?;
    if d.height() != h || d.width() != w {
        return Err(shape_err(format!("propagating a {}×{} field over {h}×{w} features", d.height(), d.width())));
    }
    let a = propagation_weights(f)?;
    let n = h * w;
    let c = d.channels();
    let src = d.tensor().data();
    let mut out = vec![0.0f32; n * c];
    out.par_chunks_mut(c).enumerate().for_each(|(p, px)| {
        let row = &a.data()[p * n..][..n];
        for (q, &m) in row.iter().enumerate() {
            for (o, &v) in px.iter_mut().zip(&src[q * c..][..c]) {
                *o += m * v;
            }
        }
    });
    DisplacementField::new(d.task(), Tensor::new(&[h, w, c], out)?, vec![true; n], d.scale())
}

/// Fields produced by [`multi_scale_refine`].
#[derive(Clone, Debug)]
pub struct MultiScaleOutput {
    /// Coarse field brought to 1/4.
    pub upsampled: DisplacementField,
    /// Local-match correction.
    pub residual: DisplacementField,
    /// `upsampled + residual`.
    pub refined: DisplacementField,
    /// Re-enhanced 1/4 reference features.
    pub features: FeatureMap,
}

/// Upsamples the 1/8 field, warps the 1/4 target features with it,
/// re-enhances the pair with `fine` windows (skipped when `fine` is `None`)
/// and adds the local-match residual.
pub fn multi_scale_refine(
    f1_4: &FeatureMap,
    f2_4: &FeatureMap,
    d_8: &DisplacementField,
    weights: &ModelWeights,
    fine: Option<&EnhancementConfig>,
    refine: &RefineConfig,
    matching: &MatchConfig,
) -> Result<MultiScaleOutput> {
    refine.validate()?;
    let task = d_8.task();
    let extent = (f1_4.height(), f1_4.width());
    let upsampled = upsample_displacement(d_8, 2, Some(extent))?;
    let warped = warp_features(f2_4, &upsampled)?;
    let (g1, g2) = match fine {
        Some(cfg) => enhance(&add_positional_encoding(f1_4)?, &add_positional_encoding(&warped)?, weights, cfg)?,
        None => (f1_4.clone(), warped),
    };
    let residual = local_match(&g1, &g2, refine.local_radius, task, matching)?;
    let sum = upsampled.tensor().add(residual.tensor())?;
    let refined = DisplacementField::new(task, sum, upsampled.valid().to_vec(), upsampled.scale())?;
    Ok(MultiScaleOutput { upsampled, residual, refined, features: g1 })
}

/// Local matching costs around each pixel's current correspondence,
/// computed on the fly with bilinear sampling of `f2`.
pub fn lookup_costs(f1: &FeatureMap, f2: &FeatureMap, d: &DisplacementField, radius: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = f1.tensor().hwc()?;
    if f2.tensor().dims() != f1.tensor().dims() || d.height() != h || d.width() != w {
        return Err(shape_err("cost lookup needs matching feature and field extents"));
    }
    let r = radius as isize;
    let offsets: Vec<(f32, f32)> = match d.task() {
        Task::Flow => (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx as f32, dy as f32))).collect(),
        Task::Disparity => (-r..=r).map(|dx| (dx as f32, 0.0)).collect(),
    };
    let k = offsets.len();
    let s = 1.0 / (c as f32).sqrt();
    let (a, b) = (f1.tensor().data(), f2.tensor().data());
    let mut out = vec![0.0f32; h * w * k];
    out.par_chunks_mut(w * k).enumerate().for_each(|(y, row)| {
        let mut sample = vec![0.0f32; c];
        for x in 0..w {
            let [u, v] = d.get(x, y);
            let (bx, by) = match d.task() {
                Task::Flow => (x as f32 + u, y as f32 + v),
                Task::Disparity => (x as f32 - u, y as f32),
            };
            let fp = &a[(y * w + x) * c..][..c];
            for (o, &(dx, dy)) in row[x * k..][..k].iter_mut().zip(&offsets) {
                let ok = sample_at(b, h, w, c, bx + dx, by + dy, &mut sample).unwrap_or(false);
                *o = if ok { dot(fp, &sample) * s } else { 0.0 };
            }
        }
    });
    Tensor::new(&[h, w, k], out)
}

fn conv(x: &Tensor<f32>, w: &ModelWeights, name: &str, padding: usize) -> Result<Tensor<f32>> {
    conv2d(x, w.get(&format!("{name}.weight"))?, Some(w.get(&format!("{name}.bias"))?), 1, padding)
}

/// Iterative residual updates at 1/4 resolution. Returns one field per
/// iteration; disparities are clamped to be non-negative in the last one.
pub fn gru_refine(
    d: &DisplacementField,
    f1: &FeatureMap,
    f2: &FeatureMap,
    weights: &ModelWeights,
    radius: usize,
    iters: usize,
) -> Result<Vec<DisplacementField>> {
    if radius == 0 {
        return Err(Error::InvalidArgument("lookup radius must be ≥ 1".into()));
    }
    let task = d.task();
    let p = format!("gru.{}", task_key(task));
    let mut hidden = conv(f1.tensor(), weights, &format!("{p}.hidden_init"), 0)?.map(f32::tanh);
    let context = conv(f1.tensor(), weights, &format!("{p}.context"), 0)?.map(|v| v.max(0.0));
    let mut current = d.clone();
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        let costs = lookup_costs(f1, f2, &current, radius)?;
        let x = concat_channels(&[&context, &costs, current.tensor()])?;
        let hx = concat_channels(&[&hidden, &x])?;
        let z = conv(&hx, weights, &format!("{p}.z"), 1)?.map(sigmoid);
        let r = conv(&hx, weights, &format!("{p}.r"), 1)?.map(sigmoid);
        let rh = r.zip_with(&hidden, |a, b| a * b)?;
        let q = conv(&concat_channels(&[&rh, &x])?, weights, &format!("{p}.q"), 1)?.map(f32::tanh);
        let keep = z.zip_with(&hidden, |zz, hh| (1.0 - zz) * hh)?;
        hidden = keep.add(&z.zip_with(&q, |zz, qq| zz * qq)?)?;
        let delta = conv(&hidden, weights, &format!("{p}.head"), 1)?;
        let next = current.tensor().add(&delta)?;
        current = DisplacementField::new(task, next, current.valid().to_vec(), current.scale())?;
        out.push(current.clone());
    }
    if task == Task::Disparity {
        if let Some(last) = out.last_mut() {
            last.tensor_mut().data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{init_weights, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { dim: 16, stem_channels: 8, trunk_channels: 8, blocks: 2, gru_hidden: 8, context_channels: 8, ..ModelConfig::default() }
    }

    fn random_map(h: usize, w: usize, d: usize, seed: u64, amp: f32) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Tensor::from_fn(&[h, w, d], |_| rng.random_range(-amp..amp)), 4).unwrap()
    }

    #[test]
    fn upsample_examples() {
        let c = DisplacementField::constant(Task::Flow, 3, 4, 8, [1.0, 0.0]);
        let up = upsample_displacement(&c, 2, None).unwrap();
        assert_eq!((up.height(), up.width(), up.scale()), (6, 8, 4));
        assert!((0..6).all(|y| (0..8).all(|x| up.get(x, y) == [2.0, 0.0])));
        let z = DisplacementField::zeros(Task::Disparity, 8, 8, 8);
        let up = upsample_displacement(&z, 8, None).unwrap();
        assert_eq!((up.height(), up.width()), (64, 64));
        assert_eq!(up.max_abs(), 0.0);
        let c = DisplacementField::constant(Task::Disparity, 8, 8, 8, [0.5, 0.0]);
        let up = upsample_displacement(&c, 8, None).unwrap();
        assert!(up.tensor().data().iter().all(|&v| v == 4.0));
        let up = upsample_displacement(&c, 4, Some((30, 29))).unwrap();
        assert_eq!((up.height(), up.width()), (30, 29));
        assert!(upsample_displacement(&c, 2, Some((17, 16))).is_err());
        // Cell centres land on multiples of the factor.
        let ramp = DisplacementField::from_fn(Task::Disparity, 1, 3, 8, |x, _| [x as f32, 0.0]);
        let up = upsample_displacement(&ramp, 2, None).unwrap();
        assert_eq!(up.tensor().data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 4.0, 0.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn propagate_examples() {
        let one = FeatureMap::new(Tensor::new(&[1, 1, 4], vec![0.3, 0.1, -2.0, 1.0]).unwrap(), 8).unwrap();
        let d = DisplacementField::constant(Task::Flow, 1, 1, 8, [1.5, -0.5]);
        assert_eq!(propagate(&one, &d).unwrap().get(0, 0), [1.5, -0.5]);

        let flat = FeatureMap::new(Tensor::full(&[2, 3, 4], 0.7), 8).unwrap();
        let d = DisplacementField::from_fn(Task::Flow, 2, 3, 8, |x, y| [x as f32, (y * 3) as f32]);
        let p = propagate(&flat, &d).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                let [u, v] = p.get(x, y);
                assert!((u - 1.0).abs() < 1e-6 && (v - 1.5).abs() < 1e-6);
            }
        }

        let hot = FeatureMap::new(Tensor::from_fn(&[2, 3, 6], |i| if i / 6 == i % 6 { 40.0 } else { 0.0 }), 8).unwrap();
        let p = propagate(&hot, &d).unwrap();
        assert!(p.tensor().max_abs_diff(d.tensor()) < 1e-4);
        assert!(propagate(&hot, &DisplacementField::zeros(Task::Flow, 3, 2, 8)).is_err());
    }

    #[test]
    fn multi_scale_examples() {
        let w = init_weights(1, &small()).unwrap();
        let fine = EnhancementConfig { num_blocks: 2, windows: 4, shift: true };
        let cfg = RefineConfig::default();
        let m = MatchConfig::default();
        // Smooth-free one-hot-like features: exact coarse input leaves the field alone.
        let base = random_map(24, 24, 64, 2, 3.0);
        let crop = |ox: usize| {
            let mut data = Vec::new();
            for y in 0..16 {
                for x in 0..16 {
                    data.extend_from_slice(base.pixel(x + ox, y + 4));
                }
            }
            FeatureMap::new(Tensor::new(&[16, 16, 64], data).unwrap(), 4).unwrap()
        };
        let (f1, f2) = (crop(4), crop(2));
        let exact = DisplacementField::constant(Task::Flow, 8, 8, 8, [1.0, 0.0]);
        let out = multi_scale_refine(&f1, &f2, &exact, &w, None, &cfg, &m).unwrap();
        for y in 4..12 {
            for x in 4..12 {
                let [u, v] = out.refined.get(x, y);
                assert!((u - 2.0).abs() < 0.05 && v.abs() < 0.05, "({x},{y}) {u} {v}");
            }
        }
        // Coarse field off by one cell: the local match recovers two pixels.
        let off = DisplacementField::zeros(Task::Flow, 8, 8, 8);
        let out = multi_scale_refine(&f1, &f2, &off, &w, None, &cfg, &m).unwrap();
        for y in 4..12 {
            for x in 4..12 {
                assert!((out.residual.get(x, y)[0] - 2.0).abs() < 0.05);
            }
        }
        let z = FeatureMap::new(Tensor::zeros(&[16, 16, 16]), 4).unwrap();
        let out = multi_scale_refine(&z, &z, &off, &w, None, &cfg, &m).unwrap();
        assert!(out.residual.max_abs() < 1e-6);
        // The transformer path runs at 1/4 with its own window count.
        let f1 = random_map(16, 16, 16, 3, 1.0);
        let out = multi_scale_refine(&f1, &f1, &off, &w, Some(&fine), &cfg, &m).unwrap();
        assert!(out.refined.all_finite());
    }

    #[test]
    fn gru_zero_head_is_identity_and_prefix_stable() {
        let w = init_weights(4, &small()).unwrap();
        let f1 = random_map(6, 7, 16, 5, 1.0);
        let f2 = random_map(6, 7, 16, 6, 1.0);
        let d = DisplacementField::from_fn(Task::Flow, 6, 7, 4, |x, y| [x as f32 * 0.1, -(y as f32) * 0.2]);
        let outs = gru_refine(&d, &f1, &f2, &w, 3, 6).unwrap();
        assert_eq!(outs.len(), 6);
        assert!(outs.iter().all(|o| o.tensor() == d.tensor()));

        let mut w2 = w.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for name in ["gru.flow.head.weight", "gru.disp.head.weight"] {
            let t = w2.tensors_mut().get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
        }
        let one = gru_refine(&d, &f1, &f2, &w2, 3, 1).unwrap();
        let six = gru_refine(&d, &f1, &f2, &w2, 3, 6).unwrap();
        assert!(one[0].tensor().bit_eq(six[0].tensor()));
        for o in &six {
            assert!(o.all_finite());
            assert!(o.tensor().max_abs_diff(d.tensor()) < 10.0);
        }

        let dd = DisplacementField::constant(Task::Disparity, 6, 7, 4, [-0.2, 0.0]);
        let outs = gru_refine(&dd, &f1, &f2, &w2, 3, 3).unwrap();
        assert!(outs[2].tensor().data().iter().all(|&v| v >= 0.0));
        assert!(outs[0].tensor().data().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn lookup_channel_counts() {
        let f = random_map(4, 5, 8, 1, 1.0);
        let flow = DisplacementField::zeros(Task::Flow, 4, 5, 4);
        assert_eq!(lookup_costs(&f, &f, &flow, 3).unwrap().dims(), &[4, 5, 49]);
        let disp = DisplacementField::zeros(Task::Disparity, 4, 5, 4);
        let c = lookup_costs(&f, &f, &disp, 3).unwrap();
        assert_eq!(c.dims(), &[4, 5, 7]);
        let centre = c.at(&[2, 2, 3]);
        let expect = dot(f.pixel(2, 2), f.pixel(2, 2)) / 8f32.sqrt();
        assert!((centre - expect).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn propagation_rows_and_convexity(seed: u64, h in 1usize..5, w in 1usize..5) {
            let f = random_map(h, w, 8, seed, 3.0);
            let a = propagation_weights(&f).unwrap();
            for row in a.data().chunks(h * w) {
                prop_assert!((row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let d = DisplacementField::from_fn(Task::Flow, h, w, 8, |_, _| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]);
            let p = propagate(&f, &d).unwrap();
            for ch in 0..2 {
                let vals: Vec<f32> = d.tensor().data().iter().skip(ch).step_by(2).copied().collect();
                let lo = vals.iter().copied().fold(f32::INFINITY, f32::min) - 1e-4;
                let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max) + 1e-4;
                prop_assert!(p.tensor().data().iter().skip(ch).step_by(2).all(|&v| v >= lo && v <= hi));
            }
        }

        #[test]
        fn upsample_then_pool_is_identity_for_constants(u in -5.0f32..5.0, v in -5.0f32..5.0, h in 1usize..5, w in 1usize..5, k in 0usize..3) {
            let factor = [2usize, 4, 8][k];
            let c = DisplacementField::constant(Task::Flow, h, w, 8, [u, v]);
            let up = upsample_displacement(&c, factor, None).unwrap();
            for cy in 0..h {
                for cx in 0..w {
                    let mut acc = [0.0f64; 2];
                    for y in 0..factor {
                        for x in 0..factor {
                            let [a, b] = up.get(cx * factor + x, cy * factor + y);
                            acc[0] += f64::from(a);
                            acc[1] += f64::from(b);
                        }
                    }
                    let n = (factor * factor) as f64;
                    prop_assert!((acc[0] / n / factor as f64 - f64::from(u)).abs() < 1e-5);
                    prop_assert!((acc[1] / n / factor as f64 - f64::from(v)).abs() < 1e-5);
                }
            }
        }
    }
}
