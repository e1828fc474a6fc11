//! Built-in invariant suite behind `eventmatch selfcheck`.
//!
//! Every check is seeded, measures one number and compares it against a
//! fixed tolerance (`measured <= tolerance` passes). Naming a check in
//! `broken` injects a known fault into that check only, which is how the
//! harness itself is tested.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::enhancement::{enhance, partition_windows, unpartition_windows, EnhancementConfig};
use crate::error::{Error, Result};
use crate::events::{build_voxel_grid, parse_events, voxel_mass, write_events, Event, EventFormat, EventStream, VoxelGrid};
use crate::features::{init_weights, load_weights, mix64, save_weights, FeatureMap, ModelConfig};
use crate::geometry::{disparity_rate_identity, stereo_flow_pair, CameraRig, ScenePoint};
use crate::matching::{global_match, match_gradient, soft_match, CorrelationVolume, MatchConfig};
use crate::optimize::propagation_weights;
use crate::pipeline::{disparity_metrics, flow_metrics, run, sequence_weights, PipelineConfig};
use crate::tensor::{blur_separable, read_tensor, write_tensor, Tensor};
use crate::{DisplacementField, Task};

/// Check names in execution order.
pub const CHECK_NAMES: [&str; 13] = [
    "voxel-mass",
    "stereo-vertical",
    "disparity-rate",
    "argmax-oracle",
    "gradient-check",
    "shift-recovery",
    "enhance-swap",
    "window-roundtrip",
    "propagation-rows",
    "round-trips",
    "loss-weights",
    "metrics-unit",
    "determinism",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub passed: bool,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

struct Outcome {
    measured: f64,
    tolerance: f64,
    detail: String,
}

fn outcome(measured: f64, tolerance: f64, detail: impl Into<String>) -> Outcome {
    Outcome { measured, tolerance, detail: detail.into() }
}

/// Runs every check. `broken` must be one of [`CHECK_NAMES`].
pub fn run_selfcheck(seed: u64, broken: Option<&str>) -> Result<SelfCheckReport> {
    if let Some(b) = broken {
        if !CHECK_NAMES.contains(&b) {
            return Err(Error::InvalidArgument(format!(
                "unknown check `{b}`; expected one of {}",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    let mut checks = Vec::with_capacity(CHECK_NAMES.len());
    for (i, name) in CHECK_NAMES.iter().enumerate() {
        let brk = broken == Some(*name);
        let rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9)));
        let start = Instant::now();
        let o = match *name {
            "voxel-mass" => voxel_mass_check(rng, brk),
            "stereo-vertical" => stereo_vertical_check(rng, brk),
            "disparity-rate" => disparity_rate_check(brk),
            "argmax-oracle" => argmax_oracle_check(rng, brk),
            "gradient-check" => gradient_check(rng, brk),
            "shift-recovery" => shift_recovery_check(rng, brk),
            "enhance-swap" => enhance_swap_check(rng, brk),
            "window-roundtrip" => window_roundtrip_check(rng, brk),
            "propagation-rows" => propagation_rows_check(rng, brk),
            "round-trips" => round_trips_check(rng, brk),
            "loss-weights" => loss_weights_check(brk),
            "metrics-unit" => metrics_unit_check(brk),
            "determinism" => determinism_check(rng, brk),
            _ => unreachable!(),
        };
        let seconds = start.elapsed().as_secs_f64();
        let (passed, measured, tolerance, detail) = match o {
            Ok(o) => (o.measured <= o.tolerance && o.measured.is_finite(), o.measured, o.tolerance, o.detail),
            Err(e) => (false, f64::NAN, f64::NAN, format!("error: {e}")),
        };
        log::debug!("{name}: measured {measured:e}, tolerance {tolerance:e}, {seconds:.3}s");
        checks.push(CheckResult { name: name.to_string(), passed, measured, tolerance, detail, seconds });
    }
    Ok(SelfCheckReport { passed: checks.iter().all(|c| c.passed), seed, checks })
}

fn voxel_mass_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    const N: usize = 10_000;
    let (w, h, t0, t1) = (64u32, 48u32, 1_000u64, 51_000u64);
    let events: Vec<Event> = (0..N)
        .map(|_| Event {
            t: rng.random_range(t0 + 1..t1),
            x: rng.random_range(0..w) as u16,
            y: rng.random_range(0..h) as u16,
            p: if rng.random::<bool>() { 1 } else { -1 },
        })
        .collect();
    // Fault: lose 1% of the events on the way into the grid.
    let kept = if brk { events[..N - N / 100].to_vec() } else { events };
    let (stream, _) = EventStream::new(kept, w, h, t0, t1)?;
    let mass = voxel_mass(&build_voxel_grid(&stream, 5)?);
    let rel = (mass - N as f64).abs() / N as f64;
    Ok(outcome(rel, 1e-3, format!("sum {mass} for {N} events")))
}

fn random_rig(rng: &mut ChaCha8Rng) -> CameraRig {
    CameraRig {
        f_prime: rng.random_range(50.0..1000.0),
        baseline: rng.random_range(0.05..1.0),
        width: 640,
        height: 480,
        cx: rng.random_range(200.0..440.0),
        cy: rng.random_range(150.0..330.0),
    }
}

fn stereo_vertical_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let rig = random_rig(&mut rng);
        let p = ScenePoint::new(
            [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(1.0..50.0)],
            [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        );
        let (l, _) = stereo_flow_pair(&p, &rig)?;
        // Fault: the right camera gets a slightly different focal length.
        let right_rig = if brk { CameraRig { f_prime: rig.f_prime * (1.0 + 1e-6), ..rig } } else { rig };
        let (_, r) = stereo_flow_pair(&p, &right_rig)?;
        worst = worst.max((l.y - r.y).abs());
    }
    Ok(outcome(worst, 1e-12, "max |v_left - v_right| over 10000 scenes"))
}

/// Least-squares slope of `log err` against `log(ΔZ·τ/Z)`.
fn disparity_rate_check(brk: bool) -> Result<Outcome> {
    let rig = CameraRig { f_prime: 100.0, baseline: 1.0, width: 640, height: 480, cx: 320.0, cy: 240.0 };
    let p = ScenePoint::new([0.3, -0.2, 10.0], [0.1, 0.0, -1.0]);
    let mut pts = Vec::new();
    for k in 0..6 {
        let tau = 0.1 / 2f64.powi(k);
        let (lhs, rhs) = disparity_rate_identity(&p, &rig, tau)?;
        // Fault: a 1% gain error in the linearized side.
        let lhs = if brk { lhs * 1.01 } else { lhs };
        let ratio = (p.velocity.z * tau / p.position.z).abs();
        pts.push((ratio.ln(), (lhs - rhs).abs().ln()));
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(outcome((slope - 2.0).abs(), 0.2, format!("log-log slope {slope:.4}")))
}

fn argmax_oracle_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    let (h, w) = (8, 8);
    let n = h * w;
    let temperature = if brk { 1.0 } else { 1e-3 };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut data: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut best = vec![0usize; n];
        for (p, row) in data.chunks_mut(n).enumerate() {
            let j = rng.random_range(0..n);
            row[j] = 1.1;
            best[p] = j;
        }
        let vol = CorrelationVolume::new(Task::Flow, Tensor::new(&[h, w, h, w], data)?)?;
        let m = soft_match(&vol, temperature)?;
        for (p, &j) in best.iter().enumerate() {
            let (px, py) = ((p % w) as f64, (p / w) as f64);
            let (jx, jy) = ((j % w) as f64, (j / w) as f64);
            let d = &m.displacement.data()[p * 2..p * 2 + 2];
            worst = worst.max((d[0] + px - jx).abs()).max((d[1] + py - jy).abs());
        }
    }
    Ok(outcome(worst, 1e-3, "max |expected coordinate - argmax| over 100 volumes"))
}

/// `Σ upstream · displacement` for the finite-difference side.
fn match_objective(vol: &CorrelationVolume<f64>, temperature: f64, upstream: &Tensor<f64>) -> Result<f64> {
    let m = soft_match(vol, temperature)?;
    Ok(m.displacement.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
}

fn gradient_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    const H: f64 = 1e-4;
    let (h, w) = (6, 6);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let task = if k % 2 == 0 { Task::Flow } else { Task::Disparity };
        let dims: Vec<usize> = match task {
            Task::Flow => vec![h, w, h, w],
            Task::Disparity => vec![h, w, w],
        };
        let len: usize = dims.iter().product();
        let temperature = rng.random_range(0.5..2.0);
        let data: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let up = Tensor::from_fn(&[h, w, task.channels()], |_| rng.sample::<f64, _>(StandardNormal));
        let vol = CorrelationVolume::new(task, Tensor::new(&dims, data.clone())?)?;
        let mut analytic = match_gradient(&vol, temperature, &up)?;
        if brk {
            analytic = analytic.map(|g| g * 1.001);
        }
        let (mut max_err, mut max_ref) = (0.0f64, 0.0f64);
        for i in 0..len {
            let mut plus = data.clone();
            plus[i] += H;
            let mut minus = data.clone();
            minus[i] -= H;
            let fp = match_objective(&CorrelationVolume::new(task, Tensor::new(&dims, plus)?)?, temperature, &up)?;
            let fm = match_objective(&CorrelationVolume::new(task, Tensor::new(&dims, minus)?)?, temperature, &up)?;
            let numeric = (fp - fm) / (2.0 * H);
            max_err = max_err.max((analytic.data()[i] - numeric).abs());
            max_ref = max_ref.max(numeric.abs()).max(analytic.data()[i].abs());
        }
        worst = worst.max(max_err / max_ref.max(1e-12));
    }
    Ok(outcome(worst, 1e-4, "max-norm relative error over 20 volumes"))
}

/// Gaussian-smoothed white noise with unit per-channel variance, times `gain`.
pub(crate) fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize, sigma: f64, gain: f32) -> Result<Tensor<f32>> {
    let noise = Tensor::from_fn(&[h, w, d], |_| rng.sample::<f32, _>(StandardNormal));
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / sum).collect();
    let mut t = blur_separable(&noise, &taps)?;
    for c in 0..d {
        let vals: Vec<f64> = t.data().iter().skip(c).step_by(d).map(|&v| f64::from(v)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        for v in t.data_mut().iter_mut().skip(c).step_by(d) {
            *v = ((f64::from(*v) - mean) / sd) as f32 * gain;
        }
    }
    Ok(t)
}

fn crop(t: &Tensor<f32>, x0: usize, y0: usize, h: usize, w: usize) -> Tensor<f32> {
    let (_, tw, d) = t.hwc().expect("hwc");
    Tensor::from_fn(&[h, w, d], |i| {
        let (y, x, c) = (i / d / w, (i / d) % w, i % d);
        t.data()[((y + y0) * tw + x + x0) * d + c]
    })
}

fn shift_recovery_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    let (h, w, d, pad) = (20usize, 20usize, 64usize, 3usize);
    let big = smooth_noise(&mut rng, h + 2 * pad, w + 2 * pad, d, 0.7, 1.5)?;
    let f1 = FeatureMap::new(crop(&big, pad, pad, h, w), 1)?;
    let cfg = MatchConfig { temperature: if brk { 50.0 } else { 1.0 }, ..MatchConfig::default() };
    let mut worst = 0.0f64;
    let mut worst_case = (0, 0);
    for dy in -3i64..=3 {
        for dx in -3i64..=3 {
            // f2(x + dx, y + dy) = f1(x, y)
            let f2 = FeatureMap::new(crop(&big, (pad as i64 - dx) as usize, (pad as i64 - dy) as usize, h, w), 1)?;
            let field = global_match(&f1, &f2, Task::Flow, &cfg)?;
            let (mut sum, mut n) = (0.0, 0usize);
            for y in 0..h {
                for x in 0..w {
                    let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                    let m = 1;
                    if tx < m || ty < m || tx >= (w as i64 - m) || ty >= (h as i64 - m) || x < 1 || y < 1 || x + 1 >= w || y + 1 >= h {
                        continue;
                    }
                    let [u, v] = field.get(x, y);
                    sum += ((f64::from(u) - dx as f64).powi(2) + (f64::from(v) - dy as f64).powi(2)).sqrt();
                    n += 1;
                }
            }
            let epe = sum / n as f64;
            if epe > worst {
                worst = epe;
                worst_case = (dx, dy);
            }
        }
    }
    Ok(outcome(worst, 0.1, format!("worst interior EPE over 49 shifts at {worst_case:?}")))
}

fn small_model() -> ModelConfig {
    ModelConfig {
        dim: 32,
        stem_channels: 8,
        trunk_channels: 16,
        blocks: 2,
        gru_hidden: 16,
        context_channels: 16,
        ..ModelConfig::default()
    }
}

fn enhance_swap_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    let model = small_model();
    let weights = init_weights(rng.random(), &model)?;
    let a = FeatureMap::new(Tensor::from_fn(&[12, 14, model.dim], |_| rng.sample(StandardNormal)), 8)?;
    let b = FeatureMap::new(Tensor::from_fn(&[12, 14, model.dim], |_| rng.sample(StandardNormal)), 8)?;
    let cfg = EnhancementConfig { num_blocks: model.blocks, windows: 2, shift: true };
    let (a1, b1) = enhance(&a, &b, &weights, &cfg)?;
    // Fault: the swapped call uses a different window schedule.
    let swapped_cfg = EnhancementConfig { shift: !brk, ..cfg };
    let (b2, a2) = enhance(&b, &a, &weights, &swapped_cfg)?;
    let same = a1.tensor().bit_eq(a2.tensor()) && b1.tensor().bit_eq(b2.tensor());
    let diff = a1.tensor().max_abs_diff(a2.tensor()).max(b1.tensor().max_abs_diff(b2.tensor()));
    Ok(outcome(if same { 0.0 } else { diff.max(f64::MIN_POSITIVE) }, 0.0, "bitwise swap symmetry"))
}

fn window_roundtrip_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    let mut mismatches = 0usize;
    for &(h, w, k) in &[(12usize, 16usize, 2usize), (13, 7, 2), (24, 24, 8), (5, 9, 3)] {
        for shifted in [false, true] {
            let t = Tensor::from_fn(&[h, w, 4], |_| rng.random::<f32>());
            let (wins, mut layout) = partition_windows(&t, k, shifted)?;
            if brk && shifted {
                // Fault: undo with the wrong roll.
                layout.shift = (0, 0);
            }
            if !unpartition_windows(&wins, &layout)?.bit_eq(&t) {
                mismatches += 1;
            }
        }
    }
    Ok(outcome(mismatches as f64, 0.0, "mismatching layouts out of 8"))
}

fn propagation_rows_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let f = FeatureMap::new(Tensor::from_fn(&[10, 12, 32], |_| rng.sample::<f32, _>(StandardNormal) * 3.0), 8)?;
        let mut a = propagation_weights(&f)?;
        if brk {
            a = a.map(|v| v * 1.01);
        }
        let n = a.dims()[1];
        for row in a.data().chunks(n) {
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(outcome(worst, 1e-6, "max |row sum - 1|"))
}

fn round_trips_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    let mut failures = Vec::new();

    let t = Tensor::from_fn(&[7, 5, 3], |_| rng.sample::<f32, _>(StandardNormal));
    let mut bytes = write_tensor(&t);
    if brk {
        // Fault: one payload byte flips on disk.
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
    }
    if !read_tensor(&bytes)?.bit_eq(&t) {
        failures.push("tensor");
    }

    let w = init_weights(rng.random(), &small_model())?;
    let back = load_weights(&save_weights(&w))?;
    let same = w.tensors().len() == back.tensors().len()
        && w.tensors().iter().zip(back.tensors()).all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b));
    if !same {
        failures.push("weights");
    }

    let events: Vec<Event> = (0..500)
        .map(|_| Event {
            t: rng.random_range(0..10_000),
            x: rng.random_range(0..40),
            y: rng.random_range(0..30),
            p: if rng.random::<bool>() { 1 } else { -1 },
        })
        .collect();
    let (stream, _) = EventStream::new(events, 40, 30, 0, 10_000)?;
    for format in [EventFormat::Text, EventFormat::Binary] {
        let bytes = write_events(&stream, format);
        if parse_events(&bytes, EventFormat::detect(&bytes))?.stream != stream {
            failures.push(match format {
                EventFormat::Text => "events-text",
                EventFormat::Binary => "events-binary",
            });
        }
    }

    for task in [Task::Flow, Task::Disparity] {
        let mut f = DisplacementField::from_fn(task, 6, 9, 4, |_, _| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]);
        for v in f.valid_mut().iter_mut() {
            *v = rng.random::<bool>();
        }
        let bytes = write_tensor(&f.to_tensor_with_mask());
        let back = DisplacementField::from_tensor_with_mask(task, &read_tensor(&bytes)?, 4)?;
        if !(back.tensor().bit_eq(f.tensor()) && back.valid() == f.valid()) {
            failures.push("field");
        }
    }

    let detail = if failures.is_empty() { "tensor, weights, events, fields".to_string() } else { format!("failed: {}", failures.join(", ")) };
    Ok(outcome(failures.len() as f64, 0.0, detail))
}

fn loss_weights_check(brk: bool) -> Result<Outcome> {
    let gamma = if brk { 0.71 } else { 0.7 };
    let w = sequence_weights(3, gamma);
    let expect = [0.49, 0.7, 1.0];
    let err = w.iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(outcome(err, 1e-12, format!("weights {w:?}")))
}

fn metrics_unit_check(brk: bool) -> Result<Outcome> {
    let bias = if brk { 1e-3 } else { 0.0 };
    let flow = |f: &dyn Fn(usize) -> [f32; 2]| DisplacementField::from_fn(Task::Flow, 2, 2, 1, |x, y| f(y * 2 + x));
    let disp = |v: [f32; 4]| DisplacementField::from_fn(Task::Disparity, 1, 4, 1, |x, _| [v[x], 0.0]);
    let mask = [true; 4];
    let gt = flow(&|_| [0.0, 0.0]);
    let mut errs = Vec::new();

    let m = flow_metrics(&flow(&|_| [3.0 + bias, 4.0]), &gt, &mask)?;
    errs.push((m.epe.unwrap_or(f64::NAN) - 5.0).abs());
    errs.extend(m.npe.values().map(|v| (v - 100.0).abs()));
    let m = flow_metrics(&flow(&|i| if i % 2 == 0 { [2.0 + bias, 0.0] } else { [0.0, 0.0] }), &gt, &mask)?;
    errs.push((m.epe.unwrap_or(f64::NAN) - 1.0).abs());
    errs.push((m.npe[&1] - 50.0).abs());
    errs.push(m.npe[&3].abs());
    let m = flow_metrics(&gt, &gt, &mask)?;
    errs.push(m.epe.unwrap_or(f64::NAN).abs() + m.ae.unwrap_or(f64::NAN).abs());

    let g = disp([1.0, 2.0, 3.0, 4.0]);
    let m = disparity_metrics(&disp([2.5 + bias, 3.5 + bias, 4.5 + bias, 5.5 + bias]), &g, &mask)?;
    errs.push((m.mae.unwrap_or(f64::NAN) - 1.5).abs());
    errs.push((m.rmse.unwrap_or(f64::NAN) - 1.5).abs());
    errs.push((m.npe[&1] - 100.0).abs() + m.npe[&2].abs());
    let m = disparity_metrics(&disp([1.0, 2.0, 3.0, 6.0 + bias]), &g, &mask)?;
    errs.push((m.mae.unwrap_or(f64::NAN) - 0.5).abs());
    errs.push((m.rmse.unwrap_or(f64::NAN) - 1.0).abs());
    errs.push((m.npe[&1] - 25.0).abs());

    let worst = errs.iter().copied().fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    Ok(outcome(worst, 1e-6, format!("{} closed-form cases", errs.len())))
}

fn determinism_check(mut rng: ChaCha8Rng, brk: bool) -> Result<Outcome> {
    let model = small_model();
    let weights = init_weights(rng.random(), &model)?;
    let grid = |rng: &mut ChaCha8Rng| {
        VoxelGrid::from_tensor(Tensor::from_fn(&[48, 40, 5], |_| if rng.random::<f32>() < 0.15 { rng.random() } else { 0.0 }))
    };
    let (v1, v2) = (grid(&mut rng)?, grid(&mut rng)?);
    let cfg = PipelineConfig {
        enhancement: EnhancementConfig { num_blocks: model.blocks, ..EnhancementConfig::default() },
        model,
        ..PipelineConfig::default()
    };
    let a = run(Task::Flow, &v1, &v2, &weights, &cfg)?;
    // Fault: the second run sees a different temperature.
    let cfg2 = if brk { PipelineConfig { matching: MatchConfig { temperature: 1.5, ..cfg.matching }, ..cfg.clone() } } else { cfg.clone() };
    let b = run(Task::Flow, &v1, &v2, &weights, &cfg2)?;
    let differing = a.stages.iter().zip(&b.stages).filter(|(x, y)| !x.field.tensor().bit_eq(y.field.tensor())).count()
        + usize::from(!a.field.tensor().bit_eq(b.field.tensor()));
    Ok(outcome(differing as f64, 0.0, format!("{} stages compared bitwise", a.stages.len() + 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes_and_names_are_unique() {
        let r = run_selfcheck(0, None).unwrap();
        let failed: Vec<_> = r.failed().map(|c| (&c.name, c.measured, &c.detail)).collect();
        assert!(r.passed, "{failed:?}");
        assert_eq!(r.checks.len(), CHECK_NAMES.len());
        let mut names = CHECK_NAMES.to_vec();
        names.dedup();
        assert_eq!(names.len(), CHECK_NAMES.len());
    }

    #[test]
    fn each_fault_fails_exactly_its_own_check() {
        for name in CHECK_NAMES {
            let r = run_selfcheck(1, Some(name)).unwrap();
            let failed: Vec<_> = r.failed().map(|c| c.name.as_str()).collect();
            assert_eq!(failed, vec![name], "injecting {name}");
        }
    }

    #[test]
    fn unknown_fault_is_rejected() {
        assert!(matches!(run_selfcheck(0, Some("nope")), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn report_serializes_with_documented_keys() {
        let r = SelfCheckReport {
            passed: true,
            seed: 4,
            checks: vec![CheckResult {
                name: "x".into(),
                passed: true,
                measured: 0.0,
                tolerance: 1.0,
                detail: String::new(),
                seconds: 0.5,
            }],
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["seed"], 4);
        for k in ["name", "passed", "measured", "tolerance", "detail", "seconds"] {
            assert!(v["checks"][0].get(k).is_some(), "{k}");
        }
    }
}
