//! Event streams: text/binary I/O, timestamp normalization and voxelization.
//!
//! Text files start with `# evt v1 <width> <height> <t_start_us> <t_end_us>`
//! followed by `<t_us> <x> <y> <p>` records, `p ∈ {-1, 0, 1}` with `0`
//! read as `-1`. Binary files start with `EVT1`, then LE `u32 width`,
//! `u32 height`, `u64 t_start`, `u64 t_end`, `u64 count` and `count`
//! records of `(u64 t, u16 x, u16 y, i8 p)`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// `-1` or `+1`.
    pub p: i8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
    t_start: u64,
    t_end: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Text,
    Binary,
}

impl EventFormat {
    /// Binary if the buffer starts with the binary magic, text otherwise.
    pub fn detect(bytes: &[u8]) -> Self {
        if bytes.starts_with(BINARY_MAGIC) {
            Self::Binary
        } else {
            Self::Text
        }
    }
}

/// A parsed stream plus whether the records had to be reordered by time.
#[derive(Clone, Debug)]
pub struct ParsedStream {
    pub stream: EventStream,
    pub resorted: bool,
}

const BINARY_MAGIC: &[u8; 4] = b"EVT1";
const TEXT_MAGIC: &str = "evt";
const BINARY_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 8;
const BINARY_RECORD_LEN: usize = 8 + 2 + 2 + 1;

impl EventStream {
    /// Validates bounds and sorts by timestamp (stable, so equal-time
    /// records keep file order). Returns whether a reorder happened.
    pub fn new(
        mut events: Vec<Event>,
        width: u32,
        height: u32,
        t_start: u64,
        t_end: u64,
    ) -> Result<(Self, bool)> {
        if width == 0 || height == 0 || width > u32::from(u16::MAX) + 1 || height > u32::from(u16::MAX) + 1 {
            return Err(Error::InvalidArgument(format!(
                "sensor size {width}×{height} outside 1..=65536"
            )));
        }
        if t_end < t_start {
            return Err(Error::InvalidArgument(format!(
                "window end {t_end} precedes start {t_start}"
            )));
        }
        for (i, e) in events.iter().enumerate() {
            validate_event(i, e, width, height, t_start, t_end)?;
        }
        let sorted = events.windows(2).all(|w| w[0].t <= w[1].t);
        if !sorted {
            events.sort_by_key(|e| e.t);
        }
        Ok((
            Self {
                events,
                width,
                height,
                t_start,
                t_end,
            },
            !sorted,
        ))
    }

    pub fn empty(width: u32, height: u32, t_start: u64, t_end: u64) -> Result<Self> {
        Self::new(Vec::new(), width, height, t_start, t_end).map(|(s, _)| s)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    /// Same sensor and window, different events (validated and sorted).
    pub fn with_events(&self, events: Vec<Event>) -> Result<Self> {
        Self::new(events, self.width, self.height, self.t_start, self.t_end).map(|(s, _)| s)
    }
}

fn validate_event(i: usize, e: &Event, width: u32, height: u32, t_start: u64, t_end: u64) -> Result<()> {
    if u32::from(e.x) >= width || u32::from(e.y) >= height {
        return Err(Error::OutOfBounds {
            index: i,
            msg: format!("pixel ({}, {}) outside {width}×{height} sensor", e.x, e.y),
        });
    }
    if e.t < t_start || e.t > t_end {
        return Err(Error::OutOfBounds {
            index: i,
            msg: format!("t = {} outside window [{t_start}, {t_end}]", e.t),
        });
    }
    if e.p != 1 && e.p != -1 {
        return Err(Error::OutOfBounds {
            index: i,
            msg: format!("polarity {} is not ±1", e.p),
        });
    }
    Ok(())
}

pub fn parse_events(bytes: &[u8], format: EventFormat) -> Result<ParsedStream> {
    match format {
        EventFormat::Text => parse_text(bytes),
        EventFormat::Binary => parse_binary(bytes),
    }
}

pub fn write_events(stream: &EventStream, format: EventFormat) -> Vec<u8> {
    match format {
        EventFormat::Text => write_text(stream).into_bytes(),
        EventFormat::Binary => write_binary(stream),
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_text(bytes: &[u8]) -> Result<ParsedStream> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Format("empty event file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 7 || fields[0] != "#" || fields[1] != TEXT_MAGIC || fields[2] != "v1" {
        return Err(Error::Format(format!("bad event header `{header}`")));
    }
    let num = |i: usize| -> Result<u64> {
        fields[i]
            .parse::<u64>()
            .map_err(|e| parse_err(1, format!("header field `{}`: {e}", fields[i])))
    };
    let width = u32::try_from(num(3)?).map_err(|_| parse_err(1, "width too large"))?;
    let height = u32::try_from(num(4)?).map_err(|_| parse_err(1, "height too large"))?;
    let (t_start, t_end) = (num(5)?, num(6)?);

    let mut events = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(parse_err(line_no, format!("expected 4 fields, got {}", toks.len())));
        }
        let t = toks[0]
            .parse::<u64>()
            .map_err(|e| parse_err(line_no, format!("timestamp `{}`: {e}", toks[0])))?;
        let x = toks[1]
            .parse::<u16>()
            .map_err(|e| parse_err(line_no, format!("x `{}`: {e}", toks[1])))?;
        let y = toks[2]
            .parse::<u16>()
            .map_err(|e| parse_err(line_no, format!("y `{}`: {e}", toks[2])))?;
        let p = match toks[3] {
            "1" | "+1" => 1,
            "0" | "-1" => -1,
            other => return Err(parse_err(line_no, format!("polarity `{other}` not in {{-1, 0, 1}}"))),
        };
        events.push(Event { t, x, y, p });
    }
    let (stream, resorted) = EventStream::new(events, width, height, t_start, t_end)?;
    Ok(ParsedStream { stream, resorted })
}

fn write_text(stream: &EventStream) -> String {
    let mut out = format!(
        "# {TEXT_MAGIC} v1 {} {} {} {}\n",
        stream.width, stream.height, stream.t_start, stream.t_end
    );
    for e in &stream.events {
        let _ = writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p);
    }
    out
}

fn parse_binary(bytes: &[u8]) -> Result<ParsedStream> {
    if !bytes.starts_with(BINARY_MAGIC) {
        return Err(Error::Format("missing EVT1 magic".into()));
    }
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::Decode {
            offset: bytes.len(),
            msg: "truncated header".into(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let width = u32_at(4);
    let height = u32_at(8);
    let t_start = u64_at(12);
    let t_end = u64_at(20);
    let count = u64_at(28) as usize;
    let body = &bytes[BINARY_HEADER_LEN..];
    let needed = count.checked_mul(BINARY_RECORD_LEN).ok_or_else(|| Error::Decode {
        offset: 28,
        msg: format!("record count {count} overflows"),
    })?;
    if body.len() != needed {
        return Err(Error::Decode {
            offset: BINARY_HEADER_LEN + body.len().min(needed),
            msg: format!("{count} records need {needed} bytes, found {}", body.len()),
        });
    }
    let mut events = Vec::with_capacity(count);
    for (i, rec) in body.chunks_exact(BINARY_RECORD_LEN).enumerate() {
        let offset = BINARY_HEADER_LEN + i * BINARY_RECORD_LEN;
        let t = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = match rec[12] as i8 {
            1 => 1,
            0 | -1 => -1,
            other => {
                return Err(Error::Decode {
                    offset: offset + 12,
                    msg: format!("polarity {other} not in {{-1, 0, 1}}"),
                })
            }
        };
        events.push(Event { t, x, y, p });
    }
    let (stream, resorted) = EventStream::new(events, width, height, t_start, t_end)?;
    Ok(ParsedStream { stream, resorted })
}

fn write_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + stream.len() * BINARY_RECORD_LEN);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&stream.t_start.to_le_bytes());
    out.extend_from_slice(&stream.t_end.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

/// An event with its time expressed in bin-index units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedEvent {
    pub x: u16,
    pub y: u16,
    /// In `[0, bins − 1]`.
    pub t_norm: f64,
    /// `|p|`, always 1 for valid events.
    pub weight: f64,
}

/// Maps `[t_start, t_end]` linearly onto `[0, bins − 1]`.
pub fn normalize_timestamps(stream: &EventStream, bins: usize) -> Result<Vec<NormalizedEvent>> {
    check_window(stream, bins)?;
    let span = (stream.t_end - stream.t_start) as f64;
    let top = (bins - 1) as f64;
    Ok(stream
        .events
        .iter()
        .map(|e| NormalizedEvent {
            x: e.x,
            y: e.y,
            t_norm: ((e.t - stream.t_start) as f64 / span * top).min(top),
            weight: f64::from(e.p.unsigned_abs()),
        })
        .collect())
}

fn check_window(stream: &EventStream, bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    if stream.t_end <= stream.t_start {
        return Err(Error::InvalidArgument(format!(
            "empty time window [{}, {}]",
            stream.t_start, stream.t_end
        )));
    }
    Ok(())
}

/// Dense `H × W × B` accumulation of event mass.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    data: Tensor<f32>,
}

impl VoxelGrid {
    pub fn from_tensor(data: Tensor<f32>) -> Result<Self> {
        data.hwc()?;
        if data.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument("voxel entries must be non-negative".into()));
        }
        Ok(Self { data })
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

    pub fn bins(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn at(&self, x: usize, y: usize, bin: usize) -> f32 {
        self.data.at(&[y, x, bin])
    }
}

/// Adds the two-bin temporal tent weights of each event into `acc`.
fn deposit(acc: &mut [f64], width: usize, bins: usize, events: &[NormalizedEvent]) {
    for e in events {
        let lo = (e.t_norm.floor() as usize).min(bins - 1);
        let frac = e.t_norm - lo as f64;
        let base = (usize::from(e.y) * width + usize::from(e.x)) * bins;
        acc[base + lo] += e.weight * (1.0 - frac);
        if frac > 0.0 {
            acc[base + lo + 1] += e.weight * frac;
        }
    }
}

fn finish_grid(acc: Vec<f64>, height: usize, width: usize, bins: usize) -> VoxelGrid {
    let data = acc.into_iter().map(|v| v as f32).collect();
    VoxelGrid {
        data: Tensor::new(&[height, width, bins], data).expect("grid extents"),
    }
}

/// Single-threaded voxelization in stream order; bit-reproducible.
pub fn build_voxel_grid(stream: &EventStream, bins: usize) -> Result<VoxelGrid> {
    let norm = normalize_timestamps(stream, bins)?;
    let (w, h) = (stream.width as usize, stream.height as usize);
    let mut acc = vec![0.0f64; h * w * bins];
    deposit(&mut acc, w, bins, &norm);
    Ok(finish_grid(acc, h, w, bins))
}

/// Voxelization split over `partitions` event chunks whose grids are summed.
/// Deterministic for a fixed partition count, but not bit-identical to
/// [`build_voxel_grid`] in general.
pub fn build_voxel_grid_parallel(
    stream: &EventStream,
    bins: usize,
    partitions: usize,
) -> Result<VoxelGrid> {
    let norm = normalize_timestamps(stream, bins)?;
    let (w, h) = (stream.width as usize, stream.height as usize);
    let chunk = norm.len().div_ceil(partitions.max(1)).max(1);
    let partials: Vec<Vec<f64>> = norm
        .par_chunks(chunk)
        .map(|part| {
            let mut acc = vec![0.0f64; h * w * bins];
            deposit(&mut acc, w, bins, part);
            acc
        })
        .collect();
    let mut acc = vec![0.0f64; h * w * bins];
    for p in &partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    Ok(finish_grid(acc, h, w, bins))
}

/// Total event mass in the grid.
pub fn voxel_mass(v: &VoxelGrid) -> f64 {
    v.data.data().iter().map(|&x| f64::from(x)).sum()
}
