//! End-to-end estimation, sequence supervision loss and evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::enhancement::{enhance, EnhancementConfig};
use crate::error::{shape_err, Error, Result};
use crate::events::VoxelGrid;
use crate::features::{add_positional_encoding, extract_features, ModelConfig, ModelWeights};
use crate::field::{DisplacementField, Task};
use crate::matching::{global_match, MatchConfig};
use crate::optimize::{gru_refine, multi_scale_refine, propagate, upsample_displacement, RefineConfig};

/// Stages that can be switched off, mirroring the ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageToggles {
    pub transformer: bool,
    pub propagation: bool,
    pub multiscale: bool,
    pub refinement: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { transformer: true, propagation: true, multiscale: true, refinement: true }
    }
}

/// Where propagation sits relative to the 1/4 refinement step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageOrder {
    /// Propagate the 1/8 global match, then refine at 1/4.
    #[default]
    PropagateFirst,
    /// Refine at 1/4, then propagate over the re-enhanced 1/4 features.
    MultiscaleFirst,
}

impl std::str::FromStr for StageOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "propagate-first" => Ok(Self::PropagateFirst),
            "multiscale-first" => Ok(Self::MultiscaleFirst),
            other => Err(Error::InvalidArgument(format!("unknown stage order `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub enhancement: EnhancementConfig,
    pub matching: MatchConfig,
    pub refine: RefineConfig,
    pub toggles: StageToggles,
    pub order: StageOrder,
    /// Seed the weights were drawn from, recorded for reproducibility.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            enhancement: EnhancementConfig { num_blocks: model.blocks, ..EnhancementConfig::default() },
            model,
            matching: MatchConfig::default(),
            refine: RefineConfig::default(),
            toggles: StageToggles::default(),
            order: StageOrder::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.enhancement.validate()?;
        self.matching.validate()?;
        self.refine.validate()?;
        if self.enhancement.num_blocks > self.model.blocks {
            return Err(Error::InvalidArgument(format!(
                "{} enhancement blocks requested, model has {}",
                self.enhancement.num_blocks, self.model.blocks
            )));
        }
        Ok(())
    }

    fn fine_enhancement(&self) -> EnhancementConfig {
        EnhancementConfig { windows: self.refine.fine_windows, ..self.enhancement.clone() }
    }
}

/// A named intermediate field.
#[derive(Clone, Debug)]
pub struct StageField {
    pub name: String,
    pub field: DisplacementField,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Full-resolution estimate.
    pub field: DisplacementField,
    /// Every intermediate in execution order, at its native scale.
    pub stages: Vec<StageField>,
}

impl PipelineOutput {
    /// All intermediates brought to `height × width`, for supervision.
    pub fn predictions_at(&self, height: usize, width: usize) -> Result<Vec<DisplacementField>> {
        self.stages
            .iter()
            .map(|s| upsample_displacement(&s.field, s.field.scale(), Some((height, width))))
            .collect()
    }
}

/// Runs the full estimator on a voxel pair: a temporal pair for flow, a
/// rectified left/right pair for disparity.
pub fn run(task: Task, v1: &VoxelGrid, v2: &VoxelGrid, weights: &ModelWeights, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    if v1.tensor().dims() != v2.tensor().dims() {
        return Err(shape_err(format!(
            "voxel grids differ: {:?} vs {:?}",
            v1.tensor().dims(),
            v2.tensor().dims()
        )));
    }
    let t = &cfg.toggles;
    let need_quarter = t.multiscale || t.refinement;
    let scales: &[usize] = if need_quarter { &[4, 8] } else { &[8] };
    let f1 = extract_features(v1, weights, scales)?;
    let f2 = extract_features(v2, weights, scales)?;
    let mut stages = Vec::new();
    let mut push = |name: &str, field: &DisplacementField| {
        log::debug!("stage {name}: {}×{} at 1/{}", field.height(), field.width(), field.scale());
        stages.push(StageField { name: name.to_string(), field: field.clone() });
    };

    let (e1, e2) = if t.transformer {
        enhance(&add_positional_encoding(&f1[&8])?, &add_positional_encoding(&f2[&8])?, weights, &cfg.enhancement)?
    } else {
        (f1[&8].clone(), f2[&8].clone())
    };
    let mut current = global_match(&e1, &e2, task, &cfg.matching)?;
    push("global", &current);

    if t.propagation && cfg.order == StageOrder::PropagateFirst {
        current = propagate(&e1, &current)?;
        push("propagated", &current);
    }
    if t.multiscale {
        let fine = cfg.fine_enhancement();
        let ms = multi_scale_refine(
            &f1[&4],
            &f2[&4],
            &current,
            weights,
            t.transformer.then_some(&fine),
            &cfg.refine,
            &cfg.matching,
        )?;
        current = ms.refined;
        push("multiscale", &current);
        if t.propagation && cfg.order == StageOrder::MultiscaleFirst {
            current = propagate(&ms.features, &current)?;
            push("propagated", &current);
        }
    } else if t.propagation && cfg.order == StageOrder::MultiscaleFirst {
        current = propagate(&e1, &current)?;
        push("propagated", &current);
    }
    if t.refinement {
        if current.scale() != 4 {
            current = upsample_displacement(&current, current.scale() / 4, Some((f1[&4].height(), f1[&4].width())))?;
        }
        let iters = cfg.refine.iters(task);
        for (i, f) in gru_refine(&current, &f1[&4], &f2[&4], weights, cfg.refine.lookup_radius, iters)?
            .into_iter()
            .enumerate()
        {
            push(&format!("refine{i}"), &f);
            current = f;
        }
    }
    let mut field = upsample_displacement(&current, current.scale(), Some((v1.height(), v1.width())))?;
    if task == Task::Disparity {
        field.tensor_mut().data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(PipelineOutput { field, stages })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    /// Transition point of the smooth-l1 disparity loss, in pixels.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 0.7, beta: 1.0 }
    }
}

/// `γ^{N−i}` for `i = 1..=N`.
pub fn sequence_weights(n: usize, gamma: f64) -> Vec<f64> {
    (1..=n).map(|i| gamma.powi((n - i) as i32)).collect()
}

fn check_pair(pred: &DisplacementField, gt: &DisplacementField, mask: &[bool]) -> Result<usize> {
    if !pred.same_extent(gt) {
        return Err(shape_err(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if mask.len() != gt.height() * gt.width() {
        return Err(shape_err(format!("mask has {} entries", mask.len())));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::EmptyMask),
        n => Ok(n),
    }
}

fn per_prediction_loss(pred: &DisplacementField, gt: &DisplacementField, mask: &[bool], beta: f64) -> Result<f64> {
    let n = check_pair(pred, gt, mask)?;
    let c = gt.channels();
    let mut sum = 0.0f64;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let p = &pred.tensor().data()[i * c..][..c];
        let g = &gt.tensor().data()[i * c..][..c];
        sum += match gt.task() {
            Task::Flow => p.iter().zip(g).map(|(a, b)| f64::from(a - b).abs()).sum::<f64>(),
            Task::Disparity => {
                let e = f64::from(p[0] - g[0]).abs();
                if e < beta {
                    0.5 * e * e / beta
                } else {
                    e - 0.5 * beta
                }
            }
        };
    }
    Ok(sum / n as f64)
}

/// `Σ γ^{N−i} l(gt, pred_i)` with l1 for flow and smooth-l1 for disparity,
/// each averaged over the mask.
pub fn supervision_loss(preds: &[DisplacementField], gt: &DisplacementField, mask: &[bool], cfg: &LossConfig) -> Result<f64> {
    if !(cfg.gamma > 0.0 && cfg.gamma <= 1.0) || !(cfg.beta > 0.0) {
        return Err(Error::InvalidArgument(format!("need 0 < γ ≤ 1 and β > 0, got {} and {}", cfg.gamma, cfg.beta)));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions to supervise".into()));
    }
    let weights = sequence_weights(preds.len(), cfg.gamma);
    preds
        .iter()
        .zip(weights)
        .map(|(p, w)| per_prediction_loss(p, gt, mask, cfg.beta).map(|l| w * l))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub valid_pixels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe: Option<f64>,
    /// Mean angle between `(u, v, 1)` vectors, degrees.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    /// Percentage of pixels with error above N pixels, N ∈ {1, 2, 3}.
    pub npe: BTreeMap<u32, f64>,
}

const NPE_THRESHOLDS: [u32; 3] = [1, 2, 3];

fn npe(errors: &[f64]) -> BTreeMap<u32, f64> {
    NPE_THRESHOLDS
        .iter()
        .map(|&t| {
            let over = errors.iter().filter(|&&e| e > f64::from(t)).count();
            (t, 100.0 * over as f64 / errors.len() as f64)
        })
        .collect()
}

pub fn flow_metrics(pred: &DisplacementField, gt: &DisplacementField, mask: &[bool]) -> Result<MetricsReport> {
    if gt.task() != Task::Flow {
        return Err(Error::InvalidArgument("flow metrics on a disparity field".into()));
    }
    let n = check_pair(pred, gt, mask)?;
    let mut errors = Vec::with_capacity(n);
    let mut angle_sum = 0.0f64;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % gt.width(), i / gt.width());
        let [pu, pv] = pred.get(x, y).map(f64::from);
        let [gu, gv] = gt.get(x, y).map(f64::from);
        errors.push(((pu - gu).powi(2) + (pv - gv).powi(2)).sqrt());
        let cos = (pu * gu + pv * gv + 1.0) / ((pu * pu + pv * pv + 1.0).sqrt() * (gu * gu + gv * gv + 1.0).sqrt());
        angle_sum += cos.clamp(-1.0, 1.0).acos().to_degrees();
    }
    Ok(MetricsReport {
        task: Task::Flow,
        valid_pixels: n,
        epe: Some(errors.iter().sum::<f64>() / n as f64),
        ae: Some(angle_sum / n as f64),
        mae: None,
        rmse: None,
        npe: npe(&errors),
    })
}

pub fn disparity_metrics(pred: &DisplacementField, gt: &DisplacementField, mask: &[bool]) -> Result<MetricsReport> {
    if gt.task() != Task::Disparity {
        return Err(Error::InvalidArgument("disparity metrics on a flow field".into()));
    }
    let n = check_pair(pred, gt, mask)?;
    let errors: Vec<f64> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| f64::from(pred.tensor().data()[i] - gt.tensor().data()[i]).abs())
        .collect();
    Ok(MetricsReport {
        task: Task::Disparity,
        valid_pixels: n,
        epe: None,
        ae: None,
        mae: Some(errors.iter().sum::<f64>() / n as f64),
        rmse: Some((errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt()),
        npe: npe(&errors),
    })
}

/// `mask` restricted to pixels at least `margin` away from every border.
pub fn interior_mask(mask: &[bool], height: usize, width: usize, margin: usize) -> Vec<bool> {
    mask.iter()
        .enumerate()
        .map(|(i, &m)| {
            let (x, y) = (i % width, i / width);
            m && x >= margin && y >= margin && x + margin < width && y + margin < height
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::init_weights;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flow(h: usize, w: usize, f: impl FnMut(usize, usize) -> [f32; 2]) -> DisplacementField {
        DisplacementField::from_fn(Task::Flow, h, w, 1, f)
    }

    fn disp(values: &[f32]) -> DisplacementField {
        DisplacementField::new(Task::Disparity, Tensor::new(&[1, values.len(), 1], values.to_vec()).unwrap(), vec![true; values.len()], 1).unwrap()
    }

    #[test]
    fn sequence_weights_examples() {
        assert_eq!(sequence_weights(1, 0.7), vec![1.0]);
        let w = sequence_weights(3, 0.7);
        assert!((w[0] - 0.49).abs() < 1e-15 && w[1] == 0.7 && w[2] == 1.0);
    }

    #[test]
    fn loss_examples() {
        let gt = flow(2, 2, |x, y| [x as f32, y as f32]);
        let mask = vec![true; 4];
        let cfg = LossConfig::default();
        assert_eq!(supervision_loss(&[gt.clone(), gt.clone()], &gt, &mask, &cfg).unwrap(), 0.0);
        let off = flow(2, 2, |x, y| [x as f32 + 1.0, y as f32 - 0.5]);
        let l = supervision_loss(&[off.clone(), gt.clone()], &gt, &mask, &cfg).unwrap();
        assert!((l - 0.7 * 1.5).abs() < 1e-12);
        assert!(matches!(supervision_loss(std::slice::from_ref(&gt), &gt, &[false; 4], &cfg), Err(Error::EmptyMask)));
        // Smooth-l1: quadratic below β, linear above.
        let g = disp(&[0.0, 0.0]);
        let p = disp(&[0.5, 3.0]);
        let l = supervision_loss(&[p], &g, &[true, true], &cfg).unwrap();
        assert!((l - (0.125 + 2.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn flow_metric_examples() {
        let gt = flow(2, 2, |_, _| [0.0, 0.0]);
        let mask = vec![true; 4];
        let m = flow_metrics(&gt, &gt, &mask).unwrap();
        assert_eq!((m.epe, m.ae), (Some(0.0), Some(0.0)));
        assert!(m.npe.values().all(|&v| v == 0.0));
        let p = flow(2, 2, |_, _| [3.0, 4.0]);
        let m = flow_metrics(&p, &gt, &mask).unwrap();
        assert!((m.epe.unwrap() - 5.0).abs() < 1e-6);
        assert_eq!(m.npe.values().copied().collect::<Vec<_>>(), vec![100.0; 3]);
        let half = flow(2, 2, |x, _| if x == 0 { [2.0, 0.0] } else { [0.0, 0.0] });
        let m = flow_metrics(&half, &gt, &mask).unwrap();
        assert!((m.epe.unwrap() - 1.0).abs() < 1e-6);
        assert_eq!((m.npe[&1], m.npe[&3]), (50.0, 0.0));
        // (1,0,1) against (0,0,1) is 45°.
        let one = flow(1, 1, |_, _| [1.0, 0.0]);
        let zero = flow(1, 1, |_, _| [0.0, 0.0]);
        assert!((flow_metrics(&one, &zero, &[true]).unwrap().ae.unwrap() - 45.0).abs() < 1e-6);
    }

    #[test]
    fn disparity_metric_examples() {
        let gt = disp(&[1.0, 2.0, 3.0, 4.0]);
        let mask = vec![true; 4];
        let m = disparity_metrics(&gt, &gt, &mask).unwrap();
        assert_eq!((m.mae, m.rmse), (Some(0.0), Some(0.0)));
        let p = disp(&[2.5, 3.5, 4.5, 5.5]);
        let m = disparity_metrics(&p, &gt, &mask).unwrap();
        assert!((m.mae.unwrap() - 1.5).abs() < 1e-6 && (m.rmse.unwrap() - 1.5).abs() < 1e-6);
        assert_eq!((m.npe[&1], m.npe[&2]), (100.0, 0.0));
        let p = disp(&[1.0, 2.0, 3.0, 6.0]);
        let m = disparity_metrics(&p, &gt, &mask).unwrap();
        assert!((m.mae.unwrap() - 0.5).abs() < 1e-6 && (m.rmse.unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(m.npe[&1], 25.0);
        assert!(disparity_metrics(&p, &gt, &[false; 4]).is_err());
        assert!(flow_metrics(&p, &gt, &mask).is_err());
    }

    #[test]
    fn pipeline_runs_with_every_toggle_combination() {
        let model = ModelConfig { dim: 16, stem_channels: 8, trunk_channels: 8, blocks: 2, gru_hidden: 8, context_channels: 8, ..ModelConfig::default() };
        let w = init_weights(3, &model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v1 = VoxelGrid::from_tensor(Tensor::from_fn(&[40, 36, 5], |_| if rng.random::<f32>() < 0.1 { 1.0 } else { 0.0 })).unwrap();
        let v2 = v1.clone();
        for bits in 0..16u8 {
            let cfg = PipelineConfig {
                model: model.clone(),
                enhancement: EnhancementConfig { num_blocks: 2, ..Default::default() },
                toggles: StageToggles {
                    transformer: bits & 1 != 0,
                    propagation: bits & 2 != 0,
                    multiscale: bits & 4 != 0,
                    refinement: bits & 8 != 0,
                },
                order: if bits % 3 == 0 { StageOrder::MultiscaleFirst } else { StageOrder::PropagateFirst },
                ..PipelineConfig::default()
            };
            for task in [Task::Flow, Task::Disparity] {
                let out = run(task, &v1, &v2, &w, &cfg).unwrap();
                assert_eq!((out.field.height(), out.field.width()), (40, 36));
                assert!(out.field.all_finite());
                assert_eq!(out.stages[0].name, "global");
                let preds = out.predictions_at(40, 36).unwrap();
                assert_eq!(preds.len(), out.stages.len());
            }
        }
        let small = VoxelGrid::from_tensor(Tensor::zeros(&[32, 32, 5])).unwrap();
        let cfg = PipelineConfig { model: model.clone(), enhancement: EnhancementConfig { num_blocks: 2, ..Default::default() }, ..Default::default() };
        assert!(matches!(run(Task::Flow, &v1, &small, &w, &cfg), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn rmse_bounds_mae_and_mask_is_respected(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = flow(3, 4, |_, _| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            let pred = flow(3, 4, |_, _| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
            let m = flow_metrics(&pred, &gt, &mask).unwrap();
            let mean_abs_u = (0..12).filter(|&i| mask[i]).map(|i| f64::from(pred.tensor().data()[2 * i] - gt.tensor().data()[2 * i]).abs()).sum::<f64>() / 8.0;
            prop_assert!(m.epe.unwrap() + 1e-9 >= mean_abs_u);
            let mut scrambled = pred.clone();
            for i in (0..12).filter(|&i| !mask[i]) {
                scrambled.tensor_mut().data_mut()[2 * i] = 1e6;
            }
            prop_assert_eq!(&flow_metrics(&scrambled, &gt, &mask).unwrap(), &m);
            let l = LossConfig::default();
            prop_assert_eq!(supervision_loss(&[scrambled], &gt, &mask, &l).unwrap(), supervision_loss(&[pred], &gt, &mask, &l).unwrap());

            let dg = disp(&[rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)]);
            let dp = disp(&[rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)]);
            let m = disparity_metrics(&dp, &dg, &[true; 3]).unwrap();
            prop_assert!(m.rmse.unwrap() + 1e-12 >= m.mae.unwrap());
        }

        #[test]
        fn smaller_gamma_favours_the_last_prediction(g1 in 0.05f64..1.0, g2 in 0.05f64..1.0) {
            let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
            prop_assume!(hi - lo > 1e-3);
            let gt = flow(2, 2, |_, _| [0.0, 0.0]);
            let preds: Vec<_> = [3.0f32, 2.0, 0.5].iter().map(|&e| flow(2, 2, move |_, _| [e, 0.0])).collect();
            let mask = [true; 4];
            let a = supervision_loss(&preds, &gt, &mask, &LossConfig { gamma: lo, beta: 1.0 }).unwrap();
            let b = supervision_loss(&preds, &gt, &mask, &LossConfig { gamma: hi, beta: 1.0 }).unwrap();
            prop_assert!(a < b);
        }
    }
}
