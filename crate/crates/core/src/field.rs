//! Per-pixel displacement fields shared by matching, refinement and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Which correspondence problem a field or volume belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// 2-D displacement between two times.
    Flow,
    /// Non-negative horizontal offset between rectified views; the right
    /// view column is `x_R = x_L − D`.
    Disparity,
}

impl Task {
    pub fn channels(self) -> usize {
        match self {
            Task::Flow => 2,
            Task::Disparity => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Flow => "flow",
            Task::Disparity => "disparity",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Task::Flow),
            "disparity" | "disp" => Ok(Task::Disparity),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

pub const DISPARITY_CONVENTION: &str = "x_right = x_left - D, D >= 0";
pub const FLOW_CONVENTION: &str = "x_target = x + u, y_target = y + v";

/// Displacements in pixels of the field's own resolution, plus a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    task: Task,
    data: Tensor<f32>,
    valid: Vec<bool>,
    scale: usize,
}

/// One-line JSON metadata written next to a serialized field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub mode: Task,
    pub scale: usize,
    pub convention: String,
    pub channels: Vec<String>,
}

impl DisplacementField {
    pub fn new(task: Task, data: Tensor<f32>, valid: Vec<bool>, scale: usize) -> Result<Self> {
        let (h, w, c) = data.hwc()?;
        if c != task.channels() {
            return Err(shape_err(format!("{} field needs {} channels, got {c}", task.name(), task.channels())));
        }
        if valid.len() != h * w {
            return Err(shape_err(format!("mask has {} entries for {h}×{w}", valid.len())));
        }
        if scale == 0 {
            return Err(Error::InvalidArgument("scale must be positive".into()));
        }
        Ok(Self { task, data, valid, scale })
    }

    pub fn zeros(task: Task, height: usize, width: usize, scale: usize) -> Self {
        Self::constant(task, height, width, scale, [0.0, 0.0])
    }

    /// Every pixel valid and equal to `value` (second component ignored for disparity).
    pub fn constant(task: Task, height: usize, width: usize, scale: usize, value: [f32; 2]) -> Self {
        let c = task.channels();
        let data = Tensor::from_fn(&[height, width, c], |i| value[i % c]);
        Self::new(task, data, vec![true; height * width], scale.max(1)).expect("consistent extents")
    }

    pub fn from_fn(
        task: Task,
        height: usize,
        width: usize,
        scale: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 2],
    ) -> Self {
        let c = task.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y)[..c]);
            }
        }
        let data = Tensor::new(&[height, width, c], data).expect("consistent extents");
        Self::new(task, data, vec![true; height * width], scale.max(1)).expect("consistent extents")
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn height(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.task.channels()
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width() + x]
    }

    /// `(u, v)` for flow, `(D, 0)` for disparity.
    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        let c = self.channels();
        let base = (y * self.width() + x) * c;
        let d = self.data.data();
        if c == 2 {
            [d[base], d[base + 1]]
        } else {
            [d[base], 0.0]
        }
    }

    pub fn set(&mut self, x: usize, y: usize, value: [f32; 2]) {
        let c = self.channels();
        let base = (y * self.width() + x) * c;
        self.data.data_mut()[base..base + c].copy_from_slice(&value[..c]);
    }

    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale.max(1);
        self
    }

    pub fn same_extent(&self, other: &Self) -> bool {
        self.task == other.task && self.height() == other.height() && self.width() == other.width()
    }

    pub fn all_finite(&self) -> bool {
        self.data.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.data().iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Field values with the mask appended as a trailing `{0, 1}` channel.
    pub fn to_tensor_with_mask(&self) -> Tensor<f32> {
        let c = self.channels();
        let mut out = Vec::with_capacity(self.valid.len() * (c + 1));
        for (px, &ok) in self.data.data().chunks(c).zip(&self.valid) {
            out.extend_from_slice(px);
            out.push(if ok { 1.0 } else { 0.0 });
        }
        Tensor::new(&[self.height(), self.width(), c + 1], out).expect("consistent extents")
    }

    pub fn from_tensor_with_mask(task: Task, t: &Tensor<f32>, scale: usize) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        if c != task.channels() + 1 {
            return Err(shape_err(format!(
                "{} file needs {} channels (values + mask), got {c}",
                task.name(),
                task.channels() + 1
            )));
        }
        let mut data = Vec::with_capacity(h * w * (c - 1));
        let mut valid = Vec::with_capacity(h * w);
        for px in t.data().chunks(c) {
            data.extend_from_slice(&px[..c - 1]);
            valid.push(px[c - 1] > 0.5);
        }
        Self::new(task, Tensor::new(&[h, w, c - 1], data)?, valid, scale)
    }

    pub fn sidecar(&self) -> FieldSidecar {
        let (convention, channels): (&str, &[&str]) = match self.task {
            Task::Flow => (FLOW_CONVENTION, &["u", "v", "valid"]),
            Task::Disparity => (DISPARITY_CONVENTION, &["d", "valid"]),
        };
        FieldSidecar {
            mode: self.task,
            scale: self.scale,
            convention: convention.to_string(),
            channels: channels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn sidecar_json(&self) -> String {
        serde_json::to_string(&self.sidecar()).expect("sidecar serializes")
    }
}
