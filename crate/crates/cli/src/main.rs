//! `eventmatch`: synthesis, voxelization, inference, evaluation and the
//! built-in self-check, all from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 self-check failure.

mod viz;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use eventmatch::events::{build_voxel_grid, build_voxel_grid_parallel, parse_events, write_events, EventFormat, VoxelGrid};
use eventmatch::features::{init_weights, load_weights, save_weights, ModelConfig, ModelWeights, WEIGHTS_VERSION};
use eventmatch::geometry::{render_synthetic, SceneSpec};
use eventmatch::pipeline::{disparity_metrics, flow_metrics, interior_mask, run, PipelineConfig, StageOrder};
use eventmatch::selfcheck::run_selfcheck;
use eventmatch::tensor::{read_tensor, write_tensor};
use eventmatch::{DisplacementField, Error, Task};

const EVENTS_FORMAT: &str = "evt v1";
const TENSOR_FORMAT: &str = "TNSR f32 v1";

#[derive(Parser, Debug)]
#[command(name = "eventmatch", version, about = "Dense flow and disparity from event streams")]
struct Cli {
    /// Worker threads for the numeric kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scene description into event files and ground truth.
    Synth {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Event-timing jitter seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = ["text", "binary"], default_value = "text")]
        format: String,
    },
    /// Accumulate an event file into a voxel-grid tensor.
    Voxelize {
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        bins: usize,
    },
    /// Write a randomly initialized weight archive.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        bins: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 6)]
        blocks: usize,
    },
    /// Optical flow between two event windows of one camera.
    Flow(EstimateArgs),
    /// Disparity between rectified left and right event windows.
    Disparity(EstimateArgs),
    /// Flow metrics of a prediction against ground truth.
    EvalFlow(EvalArgs),
    /// Disparity metrics of a prediction against ground truth.
    EvalDisp(EvalArgs),
    /// Run the built-in invariant suite.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inject a fault into the named check.
        #[arg(long = "break", value_name = "CHECK")]
        break_check: Option<String>,
    },
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// First window (flow) or left camera (disparity): event file or voxel TNSR.
    first: PathBuf,
    /// Second window (flow) or right camera (disparity).
    second: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    bins: usize,
    /// Must match the weights when given.
    #[arg(long)]
    dim: Option<usize>,
    /// Enhancement blocks to run (at most the number in the weights).
    #[arg(long)]
    blocks: Option<usize>,
    /// Windows per side at 1/8.
    #[arg(long, default_value_t = 2)]
    windows: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 6)]
    flow_iters: usize,
    #[arg(long, default_value_t = 3)]
    disp_iters: usize,
    /// Recorded in the manifest.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_order, default_value = "propagate-first")]
    order: StageOrder,
    #[arg(long)]
    no_transformer: bool,
    #[arg(long)]
    no_propagation: bool,
    #[arg(long)]
    no_multiscale: bool,
    #[arg(long)]
    no_refinement: bool,
    /// Directory for every intermediate field.
    #[arg(long)]
    dump_stages: Option<PathBuf>,
    /// Color rendering of the final field.
    #[arg(long)]
    ppm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    pred: PathBuf,
    gt: PathBuf,
    /// Ignore this many pixels along each border.
    #[arg(long, default_value_t = 0)]
    margin: usize,
}

fn parse_order(s: &str) -> Result<StageOrder, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

fn data(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

/// Core errors about parameters are usage errors, everything else is data.
fn classify(err: Error) -> Failure {
    match err {
        Error::InvalidArgument(_) => usage(err),
        other => data(other),
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Synth { scene, out, seed, format } => cmd_synth(scene, out, *seed, format),
        Command::Voxelize { events, out, bins } => cmd_voxelize(events, out, *bins, cli.deterministic),
        Command::InitWeights { out, seed, bins, dim, blocks } => cmd_init_weights(out, *seed, *bins, *dim, *blocks),
        Command::Flow(a) => cmd_estimate(Task::Flow, a, cli.json),
        Command::Disparity(a) => cmd_estimate(Task::Disparity, a, cli.json),
        Command::EvalFlow(a) => cmd_eval(Task::Flow, a, cli.json),
        Command::EvalDisp(a) => cmd_eval(Task::Disparity, a, cli.json),
        Command::Selfcheck { seed, break_check } => cmd_selfcheck(*seed, break_check.as_deref(), cli.json),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).with_context(|| format!("reading {}", path.display())).map_err(data)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).map_err(data)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn format_versions() -> serde_json::Value {
    json!({ "events": EVENTS_FORMAT, "tensor": TENSOR_FORMAT, "weights": WEIGHTS_VERSION })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    write(path, text.as_bytes())
}

fn cmd_synth(scene_path: &Path, out: &Path, seed: u64, format: &str) -> CmdResult {
    let text = fs::read_to_string(scene_path)
        .with_context(|| format!("reading {}", scene_path.display()))
        .map_err(data)?;
    let spec = SceneSpec::parse(&text).map_err(data)?;
    let scene = spec.build().map_err(data)?;
    let render = render_synthetic(&scene, seed).map_err(data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(data)?;

    let (fmt, ext) = if format == "binary" { (EventFormat::Binary, "bin") } else { (EventFormat::Text, "txt") };
    let streams = [("left_t", &render.left_t), ("left_t2", &render.left_t2), ("right_t", &render.right_t)];
    let mut files = serde_json::Map::new();
    let mut counts = serde_json::Map::new();
    for (name, s) in streams {
        let file = format!("{name}.{ext}");
        write(&out.join(&file), &write_events(s, fmt))?;
        files.insert(name.into(), json!(file));
        counts.insert(name.into(), json!(s.len()));
    }
    for (name, f) in [("gt_flow", &render.gt_flow), ("gt_disp", &render.gt_disp)] {
        let file = format!("{name}.tnsr");
        write(&out.join(&file), &write_tensor(&f.to_tensor_with_mask()))?;
        files.insert(name.into(), json!(file));
    }
    let total: usize = streams.iter().map(|(_, s)| s.len()).sum();
    if total == 0 {
        log::warn!("scene produced no events; ground truth is all invalid");
    }
    let mut hashed = text.into_bytes();
    hashed.extend_from_slice(&seed.to_le_bytes());
    let manifest = json!({
        "tool": "eventmatch",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "synth",
        "seed": seed,
        "scene_seed": spec.seed,
        "config_hash": sha256_hex(&hashed),
        "formats": format_versions(),
        "files": files,
        "events": counts,
        "dropped_points": render.dropped_points,
        "dropped_events": render.dropped_events,
        "gt_valid": {
            "flow": render.gt_flow.valid().iter().filter(|&&v| v).count(),
            "disparity": render.gt_disp.valid().iter().filter(|&&v| v).count(),
        },
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(0)
}

/// Event files are voxelized with `bins`; TNSR inputs are taken as grids.
fn load_grid(path: &Path, bins: usize, deterministic: bool) -> Result<VoxelGrid, Failure> {
    let bytes = read(path)?;
    if bytes.starts_with(b"TNSR") {
        let t = read_tensor(&bytes).map_err(data)?;
        let g = VoxelGrid::from_tensor(t).map_err(data)?;
        if g.bins() != bins {
            return Err(usage(anyhow::anyhow!("{} has {} bins, --bins is {bins}", path.display(), g.bins())));
        }
        return Ok(g);
    }
    let parsed = parse_events(&bytes, EventFormat::detect(&bytes))
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(data)?;
    if parsed.resorted {
        log::warn!("{}: events were out of time order and have been sorted", path.display());
    }
    let grid = if deterministic {
        build_voxel_grid(&parsed.stream, bins)
    } else {
        build_voxel_grid_parallel(&parsed.stream, bins, rayon::current_num_threads())
    };
    grid.map_err(classify)
}

fn cmd_voxelize(events: &Path, out: &Path, bins: usize, deterministic: bool) -> CmdResult {
    let g = load_grid(events, bins, deterministic)?;
    write(out, &write_tensor(g.tensor()))?;
    Ok(0)
}

fn cmd_init_weights(out: &Path, seed: u64, bins: usize, dim: usize, blocks: usize) -> CmdResult {
    let cfg = ModelConfig { bins, dim, blocks, ..ModelConfig::default() };
    cfg.validate().map_err(usage)?;
    let w = init_weights(seed, &cfg).map_err(classify)?;
    write(out, &save_weights(&w))?;
    Ok(0)
}

fn load_model(path: &Path) -> Result<(ModelWeights, ModelConfig), Failure> {
    let w = load_weights(&read(path)?)
        .with_context(|| format!("loading weights {}", path.display()))
        .map_err(data)?;
    let cfg = ModelConfig::infer(&w).map_err(data)?;
    Ok((w, cfg))
}

fn pipeline_config(a: &EstimateArgs, model: ModelConfig) -> Result<PipelineConfig, Failure> {
    if let Some(d) = a.dim {
        if d != model.dim {
            return Err(usage(anyhow::anyhow!("--dim {d} does not match the weights (d = {})", model.dim)));
        }
    }
    if a.bins != model.bins {
        return Err(usage(anyhow::anyhow!("--bins {} does not match the weights (B = {})", a.bins, model.bins)));
    }
    let mut cfg = PipelineConfig { model, seed: a.seed, order: a.order, ..PipelineConfig::default() };
    cfg.enhancement.num_blocks = a.blocks.unwrap_or(cfg.model.blocks);
    cfg.enhancement.windows = a.windows;
    cfg.matching.temperature = a.temperature;
    cfg.refine.flow_iters = a.flow_iters;
    cfg.refine.disp_iters = a.disp_iters;
    cfg.toggles.transformer = !a.no_transformer;
    cfg.toggles.propagation = !a.no_propagation;
    cfg.toggles.multiscale = !a.no_multiscale;
    cfg.toggles.refinement = !a.no_refinement;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn write_field(path: &Path, f: &DisplacementField, extra: serde_json::Value) -> Result<(), Failure> {
    write(path, &write_tensor(&f.to_tensor_with_mask()))?;
    let mut meta = serde_json::to_value(f.sidecar()).expect("sidecar serializes");
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    write_json(&path.with_extension("json"), &meta)
}

fn cmd_estimate(task: Task, a: &EstimateArgs, as_json: bool) -> CmdResult {
    let (weights, model) = load_model(&a.weights)?;
    let cfg = pipeline_config(a, model)?;
    let deterministic = rayon::current_num_threads() == 1;
    let v1 = load_grid(&a.first, a.bins, deterministic)?;
    let v2 = load_grid(&a.second, a.bins, deterministic)?;
    if v1.tensor().dims() != v2.tensor().dims() {
        return Err(data(anyhow::anyhow!(
            "resolution mismatch: {}×{} vs {}×{}",
            v1.width(),
            v1.height(),
            v2.width(),
            v2.height()
        )));
    }
    let out = run(task, &v1, &v2, &weights, &cfg).map_err(classify)?;
    let cfg_json = serde_json::to_vec(&cfg).expect("config serializes");
    let extra = json!({
        "seed": cfg.seed,
        "config_hash": sha256_hex(&cfg_json),
        "formats": format_versions(),
    });
    write_field(&a.out, &out.field, extra.clone())?;
    if let Some(dir) = &a.dump_stages {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(data)?;
        for (i, s) in out.stages.iter().enumerate() {
            write_field(&dir.join(format!("{i:02}_{}.tnsr", s.name)), &s.field, extra.clone())?;
        }
    }
    if let Some(p) = &a.ppm {
        write(p, &viz::field_ppm(&out.field))?;
    }
    if as_json {
        let stages: Vec<_> = out.stages.iter().map(|s| json!({ "name": s.name, "scale": s.field.scale() })).collect();
        let summary = json!({
            "task": task.name(),
            "height": out.field.height(),
            "width": out.field.width(),
            "max_abs": out.field.max_abs(),
            "stages": stages,
            "config_hash": extra["config_hash"],
        });
        println!("{summary}");
    }
    Ok(0)
}

fn load_field(task: Task, path: &Path) -> Result<DisplacementField, Failure> {
    let t = read_tensor(&read(path)?)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(data)?;
    DisplacementField::from_tensor_with_mask(task, &t, 1)
        .with_context(|| format!("interpreting {}", path.display()))
        .map_err(data)
}

fn cmd_eval(task: Task, a: &EvalArgs, as_json: bool) -> CmdResult {
    let pred = load_field(task, &a.pred)?;
    let gt = load_field(task, &a.gt)?;
    if !pred.same_extent(&gt) {
        return Err(data(anyhow::anyhow!(
            "prediction is {}×{}, ground truth {}×{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mask: Vec<bool> = gt.valid().iter().zip(pred.valid()).map(|(&g, &p)| g && p).collect();
    let mask = interior_mask(&mask, gt.height(), gt.width(), a.margin);
    let report = match task {
        Task::Flow => flow_metrics(&pred, &gt, &mask),
        Task::Disparity => disparity_metrics(&pred, &gt, &mask),
    }
    .map_err(data)?;
    if as_json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        println!("valid pixels: {}", report.valid_pixels);
        let named = [("EPE", report.epe), ("AE", report.ae), ("MAE", report.mae), ("RMSE", report.rmse)];
        for (name, v) in named {
            if let Some(v) = v {
                println!("{name}: {v:.4}");
            }
        }
        for (n, p) in &report.npe {
            println!("{n}PE: {p:.2}%");
        }
    }
    Ok(0)
}

fn cmd_selfcheck(seed: u64, broken: Option<&str>, as_json: bool) -> CmdResult {
    let report = run_selfcheck(seed, broken).map_err(classify)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for c in &report.checks {
            println!(
                "{} {:<18} measured {:<12.3e} tolerance {:<10.1e} {:>7.3}s  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.seconds,
                c.detail
            );
        }
    }
    if report.passed {
        Ok(0)
    } else {
        let names: Vec<_> = report.failed().map(|c| c.name.as_str()).collect();
        eprintln!("failed: {}", names.join(", "));
        Ok(3)
    }
}
