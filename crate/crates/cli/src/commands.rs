use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use serde_json::json;

use hmnet::events::{
    decode_events, encode_events, generate_synthetic_stream, slice_stream, EventFormat, EventSlice, EventStream,
    SceneParams,
};
use hmnet::gradcheck;
use hmnet::model::{Model, ModelConfig};
use hmnet::numerics::{checkpoint, Real};
use hmnet::scheduler::{
    benchmark_latency, compile_schedule, run_parallel, run_sequential, worker_cap, BenchMode, FrameSource,
    ParallelOptions, RunOutput, ScheduleConfig,
};
use hmnet::train::{self, TrainConfig};

use crate::model_args::{ModelArgs, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FileFormat {
    Csv,
    Hmev,
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
}

fn out_dir(dir: &Path) -> Result<&Path> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scene JSON; replaces the bar flags below.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub width: u16,
    #[arg(long, default_value_t = 64)]
    pub height: u16,
    #[arg(long, default_value_t = 100_000)]
    pub duration_us: u64,
    /// Bar speed in pixels per second.
    #[arg(long, default_value_t = 400.0)]
    pub velocity: f64,
    #[arg(long, default_value_t = 3)]
    pub bar_width: u32,
    #[arg(long, default_value_t = 2.0)]
    pub x0: f64,
    /// Background events per pixel per second.
    #[arg(long, default_value_t = 20.0)]
    pub noise_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "hmev")]
    pub format: FileFormat,
}

pub fn gen(a: GenArgs) -> Result<()> {
    let scene = match &a.scene {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).context("scene JSON")?
        }
        None => SceneParams::vertical_bar(a.width, a.height, a.bar_width, a.x0, a.velocity, a.duration_us),
    };
    let (stream, truth) = generate_synthetic_stream(&scene, a.noise_rate, a.seed)?;
    let dir = out_dir(&a.out)?;
    let (name, fmt) = match a.format {
        FileFormat::Csv => (
            "events.csv",
            EventFormat::Csv {
                width: scene.width,
                height: scene.height,
            },
        ),
        FileFormat::Hmev => ("events.hmev", EventFormat::Hmev),
    };
    write(dir, name, encode_events(&stream, fmt))?;
    write(dir, "scene.json", pretty(&serde_json::to_value(&scene)?))?;
    write(dir, "truth.json", pretty(&serde_json::to_value(&truth)?))?;
    println!(
        "{}",
        json!({ "events": stream.len(), "file": dir.join(name), "width": scene.width, "height": scene.height })
    );
    Ok(())
}

/// Reads an event file; the format follows `format` or the file extension.
fn read_events(path: &Path, format: Option<FileFormat>, sensor: (Option<u16>, Option<u16>)) -> Result<EventStream> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let format = match format {
        Some(f) => f,
        None if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => FileFormat::Csv,
        None => FileFormat::Hmev,
    };
    let fmt = match format {
        FileFormat::Hmev => EventFormat::Hmev,
        FileFormat::Csv => match sensor {
            (Some(width), Some(height)) => EventFormat::Csv { width, height },
            _ => bail!("CSV events carry no sensor size; pass --width and --height"),
        },
    };
    Ok(decode_events(&bytes, fmt)?)
}

fn event_slices(stream: &EventStream, c: &ModelConfig, steps: Option<usize>) -> Result<Vec<EventSlice>> {
    ensure!(
        (stream.width(), stream.height()) == (c.width, c.height),
        "events are {}x{} but the model expects {}x{}",
        stream.width(),
        stream.height(),
        c.width,
        c.height
    );
    let mut slices = slice_stream(stream, c.dt_us)?;
    if let Some(n) = steps {
        ensure!(n >= 1, "--steps must be >= 1");
        let dt = c.dt_us;
        let have = slices.len() as u64;
        slices.extend((have..n as u64).map(|k| EventSlice::empty(k * dt, (k + 1) * dt)));
        slices.truncate(n);
    }
    ensure!(!slices.is_empty(), "the event stream is empty");
    Ok(slices)
}

fn load_scene(path: &Option<PathBuf>) -> Result<Option<SceneParams>> {
    path.as_ref()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).context("scene JSON")
        })
        .transpose()
}

fn build_model<T: Real>(c: &ModelConfig, ckpt: &Option<PathBuf>) -> Result<Model<T>> {
    let mut m = Model::<T>::new(c.clone())?;
    if let Some(p) = ckpt {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let src = checkpoint::decode::<T>(&bytes)?;
        checkpoint::load_into(&mut m.store, &src)?;
    }
    Ok(m)
}

fn records_csv<T>(out: &RunOutput<T>, with_time: bool) -> String {
    let mut s = String::from(if with_time {
        "step,level,action,macs,wall_ns\n"
    } else {
        "step,level,action,macs\n"
    });
    for r in &out.records {
        let e = r.entry;
        if with_time {
            s.push_str(&format!("{},{},{},{},{}\n", e.step, e.level, e.action, r.macs, r.wall_ns));
        } else {
            s.push_str(&format!("{},{},{},{}\n", e.step, e.level, e.action, r.macs));
        }
    }
    s
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; 1 runs the sequential executor.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Parameters to load instead of the seeded initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Scene JSON rendering the frames for sensor fusion.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Number of steps; pads with empty slices or truncates the stream.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Also write the final readout of every level.
    #[arg(long)]
    pub save_readouts: bool,
}

pub fn run(a: RunArgs) -> Result<()> {
    let stream = read_events(&a.events, a.format, (a.model.width, a.model.height))?;
    let c = a.model.resolve_with_sensor(Some((stream.width(), stream.height())))?;
    match a.model.precision {
        Precision::F32 => run_with::<f32>(&a, &c, &stream),
        Precision::F64 => run_with::<f64>(&a, &c, &stream),
    }
}

fn execute<T: Real>(
    m: &Model<T>,
    slices: &[EventSlice],
    scene: Option<&SceneParams>,
    workers: usize,
) -> Result<RunOutput<T>> {
    ensure!(workers >= 1, "--workers must be >= 1");
    let frames = scene.map(|s| s as &dyn FrameSource<T>);
    Ok(if workers == 1 {
        run_sequential(m, slices, frames)?
    } else {
        run_parallel(m, slices, frames, &ParallelOptions { workers, delay: None })?
    })
}

fn run_with<T: Real>(a: &RunArgs, c: &ModelConfig, stream: &EventStream) -> Result<()> {
    let slices = event_slices(stream, c, a.steps)?;
    let scene = load_scene(&a.scene)?;
    let m = build_model::<T>(c, &a.checkpoint)?;
    let out = execute(&m, &slices, scene.as_ref(), a.workers)?;
    ensure!(
        out.buffers.iter().all(|b| b.all_finite()),
        hmnet::Error::NonFinite("readouts contain NaN or infinity".into())
    );

    let dir = out_dir(&a.out)?;
    write(dir, "config.json", c.to_json() + "\n")?;
    write(
        dir,
        "invocation.json",
        pretty(&json!({
            "command": "run",
            "events": a.events,
            "precision": a.model.precision.as_str(),
            "workers": a.workers,
            "effective_workers": worker_cap(a.workers).clamp(1, c.levels),
            "steps": slices.len(),
            "checkpoint": a.checkpoint,
            "scene": a.scene,
        })),
    )?;
    write(dir, "trace.csv", records_csv(&out, false))?;
    write(dir, "timing.csv", records_csv(&out, true))?;
    write(dir, "checkpoint.bin", checkpoint::encode(&m.store)?)?;
    if a.save_readouts {
        let last = out.buffers.last().expect("at least one buffer");
        let levels: Vec<_> = last
            .levels
            .iter()
            .enumerate()
            .map(|(i, r)| {
                json!({
                    "level": i + 1,
                    "step": r.step,
                    "stride": r.o.stride,
                    "shape": r.o.tensor.shape(),
                    "data": r.o.tensor.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                })
            })
            .collect();
        write(dir, "readouts.json", serde_json::to_string(&levels)? + "\n")?;
    }
    let macs: u64 = out.records.iter().map(|r| r.macs).sum();
    println!(
        "{}",
        json!({ "steps": slices.len(), "events": stream.len(), "actions": out.records.len(), "macs": macs, "out": dir })
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 18)]
    pub steps: usize,
    /// Output directory; without it the CSV goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn trace(a: TraceArgs) -> Result<()> {
    let c = a.model.resolve()?;
    let t = compile_schedule(&ScheduleConfig::from_model(&c)?, a.steps)?;
    match &a.out {
        Some(d) => {
            let dir = out_dir(d)?;
            write(dir, "config.json", c.to_json() + "\n")?;
            write(dir, "trace.csv", t.to_csv())?;
            println!("{}", json!({ "steps": a.steps, "entries": t.entries.len(), "out": dir }));
        }
        None => print!("{}", t.to_csv()),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Event file; defaults to a synthetic bar scene matching the sensor.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 18)]
    pub steps: usize,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let (c, stream, scene) = match &a.events {
        Some(p) => {
            let s = read_events(p, a.format, (a.model.width, a.model.height))?;
            let c = a.model.resolve_with_sensor(Some((s.width(), s.height())))?;
            (c, s, None)
        }
        None => {
            let c = a.model.resolve()?;
            let duration = c.dt_us * a.steps as u64;
            let scene = SceneParams::vertical_bar(c.width, c.height, 3, 2.0, 400.0, duration);
            let (s, _) = generate_synthetic_stream(&scene, 20.0, c.seed)?;
            (c, s, Some(scene))
        }
    };
    match a.model.precision {
        Precision::F32 => bench_with::<f32>(&a, &c, &stream, scene.as_ref()),
        Precision::F64 => bench_with::<f64>(&a, &c, &stream, scene.as_ref()),
    }
}

fn bench_with<T: Real>(a: &BenchArgs, c: &ModelConfig, stream: &EventStream, scene: Option<&SceneParams>) -> Result<()> {
    ensure!(a.workers >= 1, "--workers must be >= 1");
    let slices = event_slices(stream, c, Some(a.steps))?;
    let m = build_model::<T>(c, &a.checkpoint)?;
    let mode = if a.workers == 1 {
        BenchMode::Sequential
    } else {
        BenchMode::Parallel { workers: a.workers }
    };
    let frames = scene.map(|s| s as &dyn FrameSource<T>);
    let rep = benchmark_latency(&m, &slices, frames, mode, a.repetitions)?;
    let dir = out_dir(&a.out)?;
    write(dir, "config.json", c.to_json() + "\n")?;
    write(
        dir,
        "invocation.json",
        pretty(&json!({
            "command": "bench",
            "events": a.events,
            "precision": a.model.precision.as_str(),
            "workers": a.workers,
            "effective_workers": worker_cap(a.workers).clamp(1, c.levels),
            "repetitions": a.repetitions,
            "steps": a.steps,
            "checkpoint": a.checkpoint,
        })),
    )?;
    write(dir, "bench.csv", rep.to_csv())?;
    write(dir, "bench_steps.csv", rep.steps_csv())?;
    write(dir, "bench_levels.csv", rep.levels_csv())?;
    let p50: Vec<u64> = rep.steps.iter().map(|s| s.p50_ns).collect();
    let mean_p50 = p50.iter().sum::<u64>() as f64 / p50.len().max(1) as f64;
    println!(
        "{}",
        json!({
            "steps": a.steps,
            "macs_per_step": rep.total_macs() as f64 / a.steps as f64,
            "mean_step_p50_ms": mean_p50 / 1e6,
            "max_step_ms": rep.steps.iter().map(|s| s.max_ns).max().unwrap_or(0) as f64 / 1e6,
            "out": dir,
        })
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds `0..seeds`.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    ensure!(a.seeds >= 1, "--seeds must be >= 1");
    let reports = gradcheck::run_all(a.seed..a.seed + a.seeds)?;
    let dir = out_dir(&a.out)?;
    write(dir, "gradcheck.csv", gradcheck::reports_csv(&reports))?;
    let failing: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass())
        .map(|r| format!("{} seed {} ({:.3e})", r.op, r.seed, r.max_rel_err()))
        .collect();
    println!(
        "{}",
        json!({ "reports": reports.len(), "failing": failing.len(), "out": dir })
    );
    ensure!(failing.is_empty(), "gradient check failed: {}", failing.join(", "));
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub dt_us: Option<u64>,
    /// Trailing window of the smoothed loss.
    #[arg(long)]
    pub smooth: Option<usize>,
}

pub fn train_demo(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).context("training config JSON")?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = &a.variant {
        cfg.variant = v.clone();
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(iterations, lr, seed, steps, sequences, dt_us, smooth);
    let rep = train::train_demo(&cfg)?;
    let dir = out_dir(&a.out)?;
    write(dir, "train_config.json", pretty(&serde_json::to_value(&cfg)?))?;
    write(dir, "config.json", rep.model.config.to_json() + "\n")?;
    write(dir, "loss.csv", rep.to_csv())?;
    write(dir, "checkpoint.bin", checkpoint::encode(&rep.model.store)?)?;
    println!(
        "{}",
        json!({
            "iterations": rep.losses.len(),
            "initial_smoothed": rep.initial_smoothed(),
            "final_smoothed": rep.final_smoothed(),
            "ratio": rep.final_smoothed() / rep.initial_smoothed(),
            "out": dir,
        })
    );
    Ok(())
}
