//! Named weight tensors, their seeded initialization and the `EMWT` archive.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::Task;
use crate::tensor::Tensor;

pub const WEIGHTS_VERSION: u32 = 1;
const WEIGHTS_MAGIC: &[u8; 4] = b"EMWT";

/// Architecture sizes. Everything that changes a weight shape lives here.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub bins: usize,
    pub dim: usize,
    pub stem_channels: usize,
    pub trunk_channels: usize,
    pub blocks: usize,
    pub ffn_expansion: usize,
    pub gru_hidden: usize,
    pub context_channels: usize,
    pub lookup_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bins: 5,
            dim: 128,
            stem_channels: 32,
            trunk_channels: 64,
            blocks: 6,
            ffn_expansion: 4,
            gru_hidden: 96,
            context_channels: 64,
            lookup_radius: 3,
        }
    }
}

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Normal with variance `gain / fan_in`.
    FanIn { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bins", self.bins),
            ("dim", self.dim),
            ("stem_channels", self.stem_channels),
            ("trunk_channels", self.trunk_channels),
            ("ffn_expansion", self.ffn_expansion),
            ("gru_hidden", self.gru_hidden),
            ("context_channels", self.context_channels),
            ("lookup_radius", self.lookup_radius),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.bins < 2 {
            return Err(Error::InvalidArgument("bins must be at least 2".into()));
        }
        if !self.dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("dim {} must be even", self.dim)));
        }
        Ok(())
    }

    /// Cost-lookup channels of the refinement head for `task`.
    pub fn lookup_channels(&self, task: Task) -> usize {
        let side = 2 * self.lookup_radius + 1;
        match task {
            Task::Flow => side * side,
            Task::Disparity => side,
        }
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut v = Vec::new();
        let conv = |v: &mut Vec<_>, name: &str, k: usize, cin: usize, cout: usize, gain: f64| {
            v.push((
                format!("{name}.weight"),
                vec![k, k, cin, cout],
                Init::FanIn { fan_in: k * k * cin, gain },
            ));
            v.push((format!("{name}.bias"), vec![cout], Init::Zeros));
        };
        let (b, c1, c2, d) = (self.bins, self.stem_channels, self.trunk_channels, self.dim);
        conv(&mut v, "ext.stem", 7, b, c1, 2.0);
        conv(&mut v, "ext.block0.conv1", 3, c1, c2, 2.0);
        conv(&mut v, "ext.block0.conv2", 3, c2, c2, 2.0);
        conv(&mut v, "ext.block0.down", 1, c1, c2, 2.0);
        conv(&mut v, "ext.block1.conv1", 3, c2, c2, 2.0);
        conv(&mut v, "ext.block1.conv2", 3, c2, c2, 2.0);
        conv(&mut v, "ext.out", 3, c2, d, 2.0);

        let linear = |v: &mut Vec<_>, name: String, din: usize, dout: usize, gain: f64| {
            v.push((
                format!("{name}.weight"),
                vec![din, dout],
                Init::FanIn { fan_in: din, gain },
            ));
            v.push((format!("{name}.bias"), vec![dout], Init::Zeros));
        };
        let norm = |v: &mut Vec<_>, name: String, d: usize| {
            v.push((format!("{name}.gamma"), vec![d], Init::Ones));
            v.push((format!("{name}.beta"), vec![d], Init::Zeros));
        };
        for i in 0..self.blocks {
            let p = format!("enh.block{i}");
            norm(&mut v, format!("{p}.self.norm"), d);
            for proj in ["q", "k", "v", "o"] {
                linear(&mut v, format!("{p}.self.{proj}"), d, d, 1.0);
            }
            norm(&mut v, format!("{p}.cross.norm_q"), d);
            norm(&mut v, format!("{p}.cross.norm_kv"), d);
            for proj in ["q", "k", "v", "o"] {
                linear(&mut v, format!("{p}.cross.{proj}"), d, d, 1.0);
            }
            let hidden = d * self.ffn_expansion;
            norm(&mut v, format!("{p}.ffn.norm"), d);
            linear(&mut v, format!("{p}.ffn.fc1"), d, hidden, 2.0);
            linear(&mut v, format!("{p}.ffn.fc2"), hidden, d, 1.0);
        }

        for task in [Task::Flow, Task::Disparity] {
            let p = format!("gru.{}", task_key(task));
            let (hid, ctx) = (self.gru_hidden, self.context_channels);
            let xin = ctx + self.lookup_channels(task) + task.channels();
            conv(&mut v, &format!("{p}.hidden_init"), 1, d, hid, 1.0);
            conv(&mut v, &format!("{p}.context"), 1, d, ctx, 2.0);
            for gate in ["z", "r", "q"] {
                conv(&mut v, &format!("{p}.{gate}"), 3, hid + xin, hid, 1.0);
            }
            // Residual head starts at zero so an untrained head leaves its
            // input unchanged.
            v.push((format!("{p}.head.weight"), vec![3, 3, hid, task.channels()], Init::Zeros));
            v.push((format!("{p}.head.bias"), vec![task.channels()], Init::Zeros));
        }
        v
    }

    /// Every tensor name the architecture needs, with its exact shape.
    pub fn required_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.layout().into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Recovers the architecture sizes from a weight set's shapes.
    pub fn infer(w: &ModelWeights) -> Result<Self> {
        let dims = |name: &str| -> Result<&[usize]> { Ok(w.get(name)?.dims()) };
        let stem = dims("ext.stem.weight")?;
        let out = dims("ext.out.weight")?;
        let fc1 = dims("enh.block0.ffn.fc1.weight").ok();
        let blocks = (0..)
            .take_while(|i| w.tensors.contains_key(&format!("enh.block{i}.self.q.weight")))
            .count();
        let hidden = dims("gru.flow.hidden_init.weight")?;
        let ctx = dims("gru.flow.context.weight")?;
        let zin = dims("gru.disp.z.weight")?;
        let dim = out[3];
        let gru_hidden = hidden[3];
        let context_channels = ctx[3];
        // disparity gate input = hidden + context + (2r + 1) + 1
        let side = zin[2]
            .checked_sub(gru_hidden + context_channels + 1)
            .ok_or_else(|| shape_err("gru.disp.z.weight too narrow"))?;
        let cfg = Self {
            bins: stem[2],
            dim,
            stem_channels: stem[3],
            trunk_channels: out[2],
            blocks,
            ffn_expansion: fc1.map(|f| f[1] / dim.max(1)).unwrap_or(4),
            gru_hidden,
            context_channels,
            lookup_radius: side.saturating_sub(1) / 2,
        };
        cfg.validate()?;
        w.check(&cfg)?;
        Ok(cfg)
    }
}

pub(crate) fn task_key(task: Task) -> &'static str {
    match task {
        Task::Flow => "flow",
        Task::Disparity => "disp",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor<f32>>,
    version: u32,
    /// Seed for randomly initialized sets; not stored in archives.
    seed: Option<u64>,
}

impl ModelWeights {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor<f32>>) -> Self {
        Self {
            tensors,
            version: WEIGHTS_VERSION,
            seed: None,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.tensors
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Fails unless the names and shapes match `cfg` exactly.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let required = cfg.required_shapes();
        for (name, shape) in &required {
            let t = self.get(name)?;
            if t.dims() != shape.as_slice() {
                return Err(shape_err(format!(
                    "weight `{name}` has shape {:?}, architecture needs {shape:?}",
                    t.dims()
                )));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !required.contains_key(*k)) {
            return Err(shape_err(format!("unexpected weight tensor `{extra}`")));
        }
        Ok(())
    }
}

/// Splitmix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the master seed.
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    mix64(seed ^ mix64(h))
}

/// Fan-in scaled normal initialization; each tensor draws from its own
/// stream keyed by `(seed, name)`.
pub fn init_weights(seed: u64, cfg: &ModelConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in cfg.layout() {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
            Init::FanIn { fan_in, gain } => {
                let std = (gain / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
            }
        };
        tensors.insert(name, t);
    }
    Ok(ModelWeights {
        tensors,
        version: WEIGHTS_VERSION,
        seed: Some(seed),
    })
}

pub fn save_weights(w: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&w.version.to_le_bytes());
    out.extend_from_slice(&(w.tensors.len() as u32).to_le_bytes());
    for (name, t) in &w.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Decode {
            offset: self.pos,
            msg: format!("archive truncated, wanted {n} more bytes"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(WEIGHTS_MAGIC.as_slice()) {
        return Err(Error::Format("missing EMWT magic".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Decode { offset: at, msg: format!("name not UTF-8: {e}") })?
            .to_string();
        if prev.as_ref().is_some_and(|p| p >= &name) {
            return Err(Error::Decode {
                offset: at,
                msg: format!("entry `{name}` out of order or duplicated"),
            });
        }
        let ndim = r.u32()? as usize;
        if !(1..=4).contains(&ndim) {
            return Err(Error::Decode { offset: at, msg: format!("`{name}` has ndim {ndim}") });
        }
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let payload = r.take(count.checked_mul(4).ok_or_else(|| shape_err("tensor too large"))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Decode { offset: at, msg: e.to_string() })?;
        prev = Some(name.clone());
        tensors.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode {
            offset: r.pos,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(ModelWeights {
        tensors,
        version,
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            dim: 16,
            stem_channels: 8,
            trunk_channels: 8,
            blocks: 2,
            gru_hidden: 8,
            context_channels: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_archive() {
        let a = save_weights(&init_weights(3, &small()).unwrap());
        let b = save_weights(&init_weights(3, &small()).unwrap());
        let c = save_weights(&init_weights(4, &small()).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let w = init_weights(11, &small()).unwrap();
        let back = load_weights(&save_weights(&w)).unwrap();
        assert_eq!(back.version(), w.version());
        assert_eq!(back.tensors().len(), w.tensors().len());
        for (name, t) in w.tensors() {
            assert!(back.get(name).unwrap().bit_eq(t), "{name}");
        }
        assert_eq!(ModelConfig::infer(&back).unwrap(), small());
    }

    #[test]
    fn conv_init_variance_matches_fan_in() {
        let cfg = ModelConfig::default();
        let w = init_weights(5, &cfg).unwrap();
        // 3×3×64×64 = 36864 samples
        let k = w.get("ext.block1.conv1.weight").unwrap();
        let n = k.len() as f64;
        let mean = k.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = k.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / (3.0 * 3.0 * 64.0);
        assert!((var / want - 1.0).abs() < 0.2, "var {var} vs {want}");
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = save_weights(&init_weights(1, &small()).unwrap());
        assert!(matches!(load_weights(&bytes[..bytes.len() - 3]), Err(Error::Decode { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_weights(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn check_flags_missing_wrong_and_extra() {
        let cfg = small();
        let mut w = init_weights(1, &cfg).unwrap();
        w.check(&cfg).unwrap();
        w.tensors_mut().insert("extra".into(), Tensor::zeros(&[1]));
        assert!(w.check(&cfg).is_err());
        w.tensors_mut().remove("extra");
        w.tensors_mut().insert("ext.out.bias".into(), Tensor::zeros(&[3]));
        assert!(matches!(w.check(&cfg), Err(Error::Shape(_))));
        w.tensors_mut().remove("ext.out.bias");
        assert!(matches!(w.check(&cfg), Err(Error::MissingWeight(_))));
    }
}
