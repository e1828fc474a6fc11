//! Pinhole geometry linking 3-D motion to flow and disparity, plus a
//! synthetic stereo event generator with analytic ground truth.
//!
//! Conventions: rectified rig, left camera is the reference, the right
//! camera sits `baseline` metres along +X so a left pixel `x` appears at
//! `x − D` in the right view with `D = f'·baseline / Z ≥ 0`.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::events::{Event, EventStream};
use crate::features::{mix64, FeatureMap};
use crate::field::{DisplacementField, Task};
use crate::tensor::{sample_at, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    /// Focal length over pixel pitch, in pixels.
    pub f_prime: f64,
    /// Distance between the camera centres, in metres.
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
    pub cx: f64,
    pub cy: f64,
}

impl CameraRig {
    pub fn new(f_prime: f64, baseline: f64, width: u32, height: u32, cx: f64, cy: f64) -> Result<Self> {
        let rig = Self { f_prime, baseline, width, height, cx, cy };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_prime > 0.0 && self.f_prime.is_finite()) {
            return Err(Error::InvalidArgument(format!("f' must be positive, got {}", self.f_prime)));
        }
        if !(self.baseline >= 0.0 && self.baseline.is_finite()) {
            return Err(Error::InvalidArgument(format!("baseline must be ≥ 0, got {}", self.baseline)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("rig resolution must be positive".into()));
        }
        let inside = |c: f64, n: u32| c >= 0.0 && c <= f64::from(n);
        if !inside(self.cx, self.width) || !inside(self.cy, self.height) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside the image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }
}

/// A point in the left-camera frame with a constant velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenePoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl ScenePoint {
    pub fn new(position: [f64; 3], velocity: [f64; 3]) -> Self {
        Self {
            position: Vector3::from(position),
            velocity: Vector3::from(velocity),
        }
    }

    /// Position after moving for `t` time units.
    pub fn at(&self, t: f64) -> Self {
        Self {
            position: self.position + self.velocity * t,
            velocity: self.velocity,
        }
    }

    fn depth(&self) -> Result<f64> {
        let z = self.position.z;
        if z > 0.0 {
            Ok(z)
        } else {
            Err(Error::BehindCamera(z))
        }
    }
}

/// Left-view pixel of `p`.
pub fn project(p: &ScenePoint, rig: &CameraRig) -> Result<Vector2<f64>> {
    let z = p.depth()?;
    Ok(Vector2::new(
        rig.f_prime * p.position.x / z + rig.cx,
        rig.f_prime * p.position.y / z + rig.cy,
    ))
}

/// Right-view pixel of `p`.
pub fn project_right(p: &ScenePoint, rig: &CameraRig) -> Result<Vector2<f64>> {
    let z = p.depth()?;
    Ok(Vector2::new(
        rig.f_prime * (p.position.x - rig.baseline) / z + rig.cx,
        rig.f_prime * p.position.y / z + rig.cy,
    ))
}

/// Instantaneous image velocity of `p` in pixels per time unit.
pub fn flow_from_motion(p: &ScenePoint, rig: &CameraRig) -> Result<Vector2<f64>> {
    let z = p.depth()?;
    let f = rig.f_prime;
    let v = &p.velocity;
    Ok(Vector2::new(
        f * v.x / z - f * p.position.x / (z * z) * v.z,
        f * v.y / z - f * p.position.y / (z * z) * v.z,
    ))
}

pub fn disparity_from_depth(z: f64, rig: &CameraRig) -> Result<f64> {
    if z > 0.0 {
        Ok(rig.f_prime * rig.baseline / z)
    } else {
        Err(Error::BehindCamera(z))
    }
}

/// Left and right image velocities of the same point. The vertical
/// components come out of one shared expression, so they are equal bit for bit.
pub fn stereo_flow_pair(p: &ScenePoint, rig: &CameraRig) -> Result<(Vector2<f64>, Vector2<f64>)> {
    let z = p.depth()?;
    let f = rig.f_prime;
    let v = &p.velocity;
    let k = f * v.z / (z * z);
    let lateral = Vector2::new(f * v.x / z, f * v.y / z);
    let dy = lateral.y - k * p.position.y;
    let left = Vector2::new(lateral.x - k * p.position.x, dy);
    let right = Vector2::new(lateral.x - k * (p.position.x - rig.baseline), dy);
    Ok((left, right))
}

/// Both sides of `dxR − dxL = D_t − D_{t+τ}` for a step of length `tau`.
///
/// The left side is the linearized displacement difference, the right side
/// the exact disparity change; they agree to first order in `ΔZ·τ / Z`.
pub fn disparity_rate_identity(p: &ScenePoint, rig: &CameraRig, tau: f64) -> Result<(f64, f64)> {
    let z0 = p.depth()?;
    let z1 = p.at(tau).depth()?;
    let (l, r) = stereo_flow_pair(p, rig)?;
    let lhs = r.x * tau - l.x * tau;
    let rhs = disparity_from_depth(z0, rig)? - disparity_from_depth(z1, rig)?;
    Ok((lhs, rhs))
}

/// A scene point with its event emission rate (events per time unit) and
/// the polarity of the brightness edge it carries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TexturedPoint {
    pub point: ScenePoint,
    pub rate: f64,
    pub polarity: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub rig: CameraRig,
    pub points: Vec<TexturedPoint>,
    /// Length of each event window (stereo accumulation time).
    pub tau: f64,
    /// Time between the two left windows.
    pub dt: f64,
    /// Microseconds per scene time unit.
    pub time_unit_us: f64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if !(self.tau > 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau and dt must be positive, got {} and {}",
                self.tau, self.dt
            )));
        }
        if !(self.time_unit_us > 0.0) {
            return Err(Error::InvalidArgument("time unit must be positive".into()));
        }
        if let Some(p) = self.points.iter().find(|p| !(p.point.position.z > 0.0)) {
            return Err(Error::BehindCamera(p.point.position.z));
        }
        Ok(())
    }

    fn us(&self, t: f64) -> u64 {
        (t * self.time_unit_us).round().max(0.0) as u64
    }
}

/// Output of [`render_synthetic`].
#[derive(Clone, Debug)]
pub struct SyntheticRender {
    /// Left camera, window `[0, τ]`.
    pub left_t: EventStream,
    /// Left camera, window `[Δt, Δt + τ]`.
    pub left_t2: EventStream,
    /// Right camera, window `[0, τ]`.
    pub right_t: EventStream,
    /// Displacement between the window centres, on pixels hit in `left_t`.
    pub gt_flow: DisplacementField,
    /// `f'·B/Z` at the centre of the first window, on pixels hit in `left_t`.
    pub gt_disp: DisplacementField,
    /// Points that produced no in-bounds event in any stream.
    pub dropped_points: usize,
    /// Events that fell outside the sensor.
    pub dropped_events: usize,
}

#[derive(Clone, Copy)]
enum View {
    Left,
    Right,
}

/// Emits events for every textured point in three windows and rasterizes
/// the analytic flow and disparity onto the pixels that fired in the first
/// left window. `seed` only drives timing jitter; ground truth
/// does not depend on it.
pub fn render_synthetic(scene: &SyntheticScene, seed: u64) -> Result<SyntheticRender> {
    scene.validate()?;
    let rig = &scene.rig;
    let (w, h) = (rig.width as usize, rig.height as usize);
    let t_ref = 0.5 * scene.tau;
    let windows = [(0.0, View::Left), (scene.dt, View::Left), (0.0, View::Right)];

    let mut streams: [Vec<Event>; 3] = Default::default();
    let mut dropped_events = 0usize;
    let mut dropped_points = 0usize;
    let mut flow_acc = vec![[0.0f64; 3]; w * h];
    let mut disp_acc = vec![[0.0f64; 2]; w * h];

    for (i, tp) in scene.points.iter().enumerate() {
        let n = (tp.rate * scene.tau).round().max(0.0) as usize;
        if n == 0 {
            continue;
        }
        let gt_flow = {
            let a = project(&tp.point.at(t_ref), rig)?;
            let b = project(&tp.point.at(t_ref + scene.dt), rig)?;
            b - a
        };
        let gt_disp = disparity_from_depth(tp.point.at(t_ref).position.z, rig)?;
        let mut emitted = 0usize;
        for (s, &(start, view)) in windows.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64((i as u64) << 2 | s as u64)));
            for k in 0..n {
                let t = start + (k as f64 + rng.random::<f64>()) / n as f64 * scene.tau;
                let moved = tp.point.at(t);
                let px = match view {
                    View::Left => project(&moved, rig)?,
                    View::Right => project_right(&moved, rig)?,
                };
                let (x, y) = (px.x.round(), px.y.round());
                if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    dropped_events += 1;
                    continue;
                }
                emitted += 1;
                let (xi, yi) = (x as usize, y as usize);
                let t_us = scene.us(t).clamp(scene.us(start), scene.us(start + scene.tau));
                streams[s].push(Event { t: t_us, x: xi as u16, y: yi as u16, p: tp.polarity });
                if s == 0 {
                    let a = &mut flow_acc[yi * w + xi];
                    a[0] += gt_flow.x;
                    a[1] += gt_flow.y;
                    a[2] += 1.0;
                    let d = &mut disp_acc[yi * w + xi];
                    d[0] += gt_disp;
                    d[1] += 1.0;
                }
            }
        }
        if emitted == 0 {
            dropped_points += 1;
        }
    }

    let [l0, l1, r0] = streams;
    let mk = |events: Vec<Event>, start: f64| {
        EventStream::new(events, rig.width, rig.height, scene.us(start), scene.us(start + scene.tau))
            .map(|(s, _)| s)
    };
    let left_t = mk(l0, 0.0)?;
    let left_t2 = mk(l1, scene.dt)?;
    let right_t = mk(r0, 0.0)?;

    let mut gt_flow = DisplacementField::zeros(Task::Flow, h, w, 1);
    let mut gt_disp = DisplacementField::zeros(Task::Disparity, h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let [u, v, n] = flow_acc[idx];
            let ok = n > 0.0;
            let (u, v) = if ok { (u / n, v / n) } else { (0.0, 0.0) };
            gt_flow.set(x, y, [u as f32, v as f32]);
            let tx = x as f64 + u;
            let ty = y as f64 + v;
            gt_flow.valid_mut()[idx] =
                ok && tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64;
            let [d, m] = disp_acc[idx];
            let d = if m > 0.0 { d / m } else { 0.0 };
            gt_disp.set(x, y, [d as f32, 0.0]);
            gt_disp.valid_mut()[idx] = m > 0.0 && x as f64 - d >= 0.0;
        }
    }
    Ok(SyntheticRender {
        left_t,
        left_t2,
        right_t,
        gt_flow,
        gt_disp,
        dropped_points,
        dropped_events,
    })
}

/// Per-pixel `‖F1(p) − F2(p + D(p))‖²` with bilinear lookup into `F2`.
///
/// For disparity the target is read along the scanline at `x − D`.
/// Returns the residual map and the mask of pixels whose target was in range.
pub fn eval_matching_cost(
    f1: &FeatureMap,
    f2: &FeatureMap,
    disp: &DisplacementField,
    task: Task,
) -> Result<(Tensor<f32>, Vec<bool>)> {
    if f1.tensor().dims() != f2.tensor().dims() {
        return Err(shape_err(format!(
            "feature maps {:?} vs {:?}",
            f1.tensor().dims(),
            f2.tensor().dims()
        )));
    }
    let (h, w, c) = f1.tensor().hwc()?;
    if disp.height() != h || disp.width() != w || disp.task() != task {
        return Err(shape_err(format!(
            "{} field {}×{} against {h}×{w} features",
            disp.task().name(),
            disp.height(),
            disp.width()
        )));
    }
    let mut residual = vec![0.0f32; h * w];
    let mut valid = vec![false; h * w];
    let mut sample = vec![0.0f32; c];
    for y in 0..h {
        for x in 0..w {
            let [a, b] = disp.get(x, y);
            let (tx, ty) = match task {
                Task::Flow => (x as f32 + a, y as f32 + b),
                Task::Disparity => (x as f32 - a, y as f32),
            };
            let ok = sample_at(f2.tensor().data(), h, w, c, tx, ty, &mut sample).unwrap_or(false);
            let idx = y * w + x;
            valid[idx] = ok;
            if ok {
                residual[idx] = f1
                    .pixel(x, y)
                    .iter()
                    .zip(&sample)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
            }
        }
    }
    Ok((Tensor::new(&[h, w], residual)?, valid))
}

/// A scene primitive from a scene description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Fronto-parallel plane filling the view, textured with random points.
    Plane {
        depth: f64,
        velocity: [f64; 3],
        /// Texture points per pixel of image area.
        density: f64,
        /// Mean events per point per time unit.
        rate: f64,
    },
    Point {
        position: [f64; 3],
        velocity: [f64; 3],
        rate: f64,
    },
}

/// Parsed scene description file.
///
/// Line-oriented `key value` (or `key = value`) pairs for the rig and
/// timing, plus `plane ...` / `point ...` lines with `name=value` fields:
///
/// ```text
/// f_prime 200
/// baseline 0.5
/// width 64
/// height 64
/// tau 0.02
/// dt 1
/// seed 7
/// plane depth=50 velocity=0,0,0 density=0.6 rate=250
/// point position=0,0,10 velocity=1,0,0 rate=100
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rig: CameraRig,
    pub tau: f64,
    pub dt: f64,
    /// Texture seed: fixes point placement and per-point rates.
    pub seed: u64,
    pub time_unit_us: f64,
    pub primitives: Vec<Primitive>,
}

fn parse_vec3(s: &str, line: usize) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse { line, msg: format!("vector `{s}`: {e}") })?;
    parts
        .try_into()
        .map_err(|_| Error::Parse { line, msg: format!("vector `{s}` needs 3 components") })
}

impl SceneSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut scalars: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut primitives = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            match head {
                "plane" | "point" => {
                    let mut fields = BTreeMap::new();
                    for tok in rest.split_whitespace() {
                        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
                            line: line_no,
                            msg: format!("expected name=value, got `{tok}`"),
                        })?;
                        fields.insert(k.to_string(), v.to_string());
                    }
                    primitives.push(Self::primitive(head, &fields, line_no)?);
                }
                key => {
                    let value = rest.trim().trim_start_matches('=').trim();
                    if value.is_empty() {
                        return Err(Error::Parse { line: line_no, msg: format!("`{key}` has no value") });
                    }
                    scalars.insert(key.to_string(), (line_no, value.to_string()));
                }
            }
        }
        let num = |key: &str, default: Option<f64>| -> Result<f64> {
            match scalars.get(key) {
                Some((line, v)) => v
                    .parse::<f64>()
                    .map_err(|e| Error::Parse { line: *line, msg: format!("`{key}`: {e}") }),
                None => default.ok_or_else(|| Error::Parse { line: 0, msg: format!("missing `{key}`") }),
            }
        };
        let known = ["f_prime", "baseline", "width", "height", "cx", "cy", "tau", "dt", "seed", "time_unit_us"];
        if let Some((k, (line, _))) = scalars.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(Error::Parse { line: *line, msg: format!("unknown key `{k}`") });
        }
        let width = num("width", None)? as u32;
        let height = num("height", None)? as u32;
        let rig = CameraRig::new(
            num("f_prime", None)?,
            num("baseline", Some(0.0))?,
            width,
            height,
            num("cx", Some(f64::from(width) / 2.0))?,
            num("cy", Some(f64::from(height) / 2.0))?,
        )?;
        let spec = Self {
            rig,
            tau: num("tau", None)?,
            dt: num("dt", None)?,
            seed: num("seed", Some(0.0))? as u64,
            time_unit_us: num("time_unit_us", Some(1e6))?,
            primitives,
        };
        Ok(spec)
    }

    fn primitive(kind: &str, fields: &BTreeMap<String, String>, line: usize) -> Result<Primitive> {
        let get = |k: &str| -> Result<&String> {
            fields
                .get(k)
                .ok_or_else(|| Error::Parse { line, msg: format!("{kind} needs `{k}`") })
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::Parse { line, msg: format!("`{k}`: {e}") })
        };
        let velocity = match fields.get("velocity") {
            Some(v) => parse_vec3(v, line)?,
            None => [0.0; 3],
        };
        Ok(match kind {
            "plane" => Primitive::Plane {
                depth: num("depth")?,
                velocity,
                density: num("density")?,
                rate: num("rate")?,
            },
            _ => Primitive::Point {
                position: parse_vec3(get("position")?, line)?,
                velocity,
                rate: num("rate")?,
            },
        })
    }

    /// Samples texture points for every primitive using the scene seed.
    pub fn build(&self) -> Result<SyntheticScene> {
        let rig = &self.rig;
        let mut points = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed));
        for prim in &self.primitives {
            match *prim {
                Primitive::Plane { depth, velocity, density, rate } => {
                    if !(depth > 0.0) {
                        return Err(Error::BehindCamera(depth));
                    }
                    if !(density >= 0.0) || !(rate >= 0.0) {
                        return Err(Error::InvalidArgument("plane density and rate must be ≥ 0".into()));
                    }
                    let margin = self.plane_margin(depth, velocity);
                    let (x0, x1) = (-margin, f64::from(rig.width) - 1.0 + margin);
                    let (y0, y1) = (-margin, f64::from(rig.height) - 1.0 + margin);
                    let count = (density * (x1 - x0) * (y1 - y0)).round() as usize;
                    for _ in 0..count {
                        let u = rng.random_range(x0..x1);
                        let v = rng.random_range(y0..y1);
                        let scale = rng.random_range(0.5..1.5);
                        let polarity = if rng.random::<bool>() { 1 } else { -1 };
                        let position = [(u - rig.cx) * depth / rig.f_prime, (v - rig.cy) * depth / rig.f_prime, depth];
                        points.push(TexturedPoint {
                            point: ScenePoint::new(position, velocity),
                            rate: rate * scale,
                            polarity,
                        });
                    }
                }
                Primitive::Point { position, velocity, rate } => points.push(TexturedPoint {
                    point: ScenePoint::new(position, velocity),
                    rate,
                    polarity: 1,
                }),
            }
        }
        let scene = SyntheticScene {
            rig: rig.clone(),
            points,
            tau: self.tau,
            dt: self.dt,
            time_unit_us: self.time_unit_us,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Extra pixels around the view so the plane still covers every window
    /// after motion and the stereo shift.
    fn plane_margin(&self, depth: f64, velocity: [f64; 3]) -> f64 {
        let rig = &self.rig;
        let horizon = self.dt + self.tau;
        let mut worst: f64 = 0.0;
        for (u, v) in [(0.0, 0.0), (f64::from(rig.width), 0.0), (0.0, f64::from(rig.height)), (f64::from(rig.width), f64::from(rig.height))] {
            let p = ScenePoint::new(
                [(u - rig.cx) * depth / rig.f_prime, (v - rig.cy) * depth / rig.f_prime, depth],
                velocity,
            );
            if let (Ok(a), Ok(b)) = (project(&p, rig), project(&p.at(horizon), rig)) {
                worst = worst.max((b - a).amax());
            }
        }
        let z_min = (depth + velocity[2].min(0.0) * horizon).max(depth * 0.1);
        worst + rig.f_prime * rig.baseline / z_min + 2.0
    }
}
