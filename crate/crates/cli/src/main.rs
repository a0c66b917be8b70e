use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use dqpaint::checkpoint;
use dqpaint::eval::{evaluate, PYRAMID_LEVELS};
use dqpaint::inference::{self, PaintOptions, StrokePlan};
use dqpaint::synthesis::{dump_sample, sample_with_seed, SynthConfig};
use dqpaint::training::{self, TrainConfig};
use dqpaint::{Brush, BrushTexture, CanvasImage, Error};

#[derive(Parser)]
#[command(name = "dqpaint", version, about = "Differential-query stroke painter")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a painter on synthetic strokes.
    Train(TrainArgs),
    /// Paint an image coarse to fine and write the stroke plan.
    Paint(PaintArgs),
    /// Re-render a stroke plan, optionally dumping animation frames.
    Replay(ReplayArgs),
    /// Paint a set of images and report reconstruction metrics.
    Eval(EvalArgs),
    /// Export stitched first-layer cross-attention maps.
    Attn(AttnArgs),
    /// Write synthetic training samples as images.
    SynthDump(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    pretrain: Option<usize>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    no_differential: bool,
    #[arg(long)]
    no_coord: bool,
    #[arg(long)]
    no_discriminator: bool,
    #[arg(long)]
    no_conf_reg: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint directory (holding manifest.txt and weights.safetensors).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output side in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Comma-separated patch grids, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    /// Grayscale brush texture; plain strokes when absent.
    #[arg(long)]
    brush: Option<PathBuf>,
}

#[derive(Args)]
struct PaintArgs {
    #[command(flatten)]
    model: ModelArgs,
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also dump a frame every this many strokes.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct ReplayArgs {
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dump a frame every this many strokes.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    brush: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Images, or directories scanned for png/jpg files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    patch_size: usize,
    #[arg(long, default_value_t = 8)]
    max_strokes: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", kind(&e));
            ExitCode::FAILURE
        }
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::ParamDomain { .. } => "param_domain",
        Error::Shape { .. } => "shape",
        Error::Config(_) => "config",
        Error::Parse { .. } => "parse",
        Error::Checkpoint { .. } => "checkpoint",
        Error::NonFinite { .. } => "non_finite",
        Error::Image { .. } => "image",
        Error::Io(_) => "io",
        Error::Tensor(_) => "tensor",
    }
}

fn run(cmd: Command) -> dqpaint::Result<()> {
    let device = Device::Cpu;
    match cmd {
        Command::Train(a) => train(a, &device),
        Command::Paint(a) => paint(a, &device),
        Command::Replay(a) => replay(a),
        Command::Eval(a) => eval(a, &device),
        Command::Attn(a) => attn(a, &device),
        Command::SynthDump(a) => synth_dump(a),
    }
}

fn load_brush(path: Option<&Path>) -> dqpaint::Result<Brush> {
    Ok(match path {
        Some(p) => Brush::Textured(BrushTexture::load(p)?),
        None => Brush::Plain,
    })
}

fn train(a: TrainArgs, device: &Device) -> dqpaint::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(s) = a.pretrain {
        cfg.pretrain_steps = s;
    }
    cfg.no_differential |= a.no_differential;
    cfg.no_coord |= a.no_coord;
    cfg.no_discriminator |= a.no_discriminator;
    cfg.no_conf_reg |= a.no_conf_reg;
    let summary = training::train(cfg, &a.out, device)?;
    println!("log {}", summary.log_path.display());
    println!("checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}

fn paint_options(m: &ModelArgs, patch: usize) -> dqpaint::Result<PaintOptions> {
    let mut opts = PaintOptions::new(m.size, patch);
    if let Some(s) = &m.scales {
        opts.scales = s.clone();
    }
    if opts.scales.is_empty() {
        return Err(Error::Config(format!(
            "no usable scales for size {} and patch {patch}",
            m.size
        )));
    }
    opts.brush = load_brush(m.brush.as_deref())?;
    Ok(opts)
}

fn paint(a: PaintArgs, device: &Device) -> dqpaint::Result<()> {
    let ck = checkpoint::load(&a.model.checkpoint, None, device)?;
    let opts = paint_options(&a.model, ck.manifest.painter.patch_size)?;
    let image = CanvasImage::load(&a.input)?;
    let res = inference::paint(&image, &ck.painter, &opts, &ck.hash)?;
    fs::create_dir_all(&a.out)?;
    res.canvas.save(&a.out.join("painting.png"))?;
    res.target.save(&a.out.join("target.png"))?;
    res.plan.save(&a.out.join("plan.txt"))?;
    if let Some(k) = a.frames {
        let rep = inference::replay(&res.plan, Some(k), &opts.brush)?;
        inference::save_frames(&rep.frames, &a.out.join("frames"))?;
    }
    for s in &res.scales {
        println!("grid {} accepted {} l1 {:.6}", s.grid, s.accepted, s.l1_after);
    }
    println!("strokes {}", res.plan.accepted());
    Ok(())
}

fn replay(a: ReplayArgs) -> dqpaint::Result<()> {
    let plan = StrokePlan::load(&a.plan)?;
    let brush = load_brush(a.brush.as_deref())?;
    let rep = inference::replay(&plan, a.stride, &brush)?;
    fs::create_dir_all(&a.out)?;
    rep.canvas.save(&a.out.join("painting.png"))?;
    if a.stride.is_some() {
        inference::save_frames(&rep.frames, &a.out.join("frames"))?;
    }
    println!("strokes {} frames {}", plan.accepted(), rep.frames.len());
    Ok(())
}

fn collect_images(inputs: &[PathBuf]) -> dqpaint::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            for entry in fs::read_dir(p)? {
                let path = entry?.path();
                let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
                if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                    out.push(path);
                }
            }
        } else {
            out.push(p.clone());
        }
    }
    out.sort();
    Ok(out)
}

fn eval(a: EvalArgs, device: &Device) -> dqpaint::Result<()> {
    let ck = checkpoint::load(&a.model.checkpoint, None, device)?;
    let opts = paint_options(&a.model, ck.manifest.painter.patch_size)?;
    let images = collect_images(&a.inputs)?;
    let report = evaluate(&images, &ck.painter, &opts, &ck.hash)?;
    let text = format!(
        "{}# pcpt_proxy = mean abs difference summed over {PYRAMID_LEVELS} Gaussian pyramid levels\n",
        report.to_text()
    );
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn attn(a: AttnArgs, device: &Device) -> dqpaint::Result<()> {
    let ck = checkpoint::load(&a.checkpoint, None, device)?;
    let patch = ck.manifest.painter.patch_size;
    let size = a.size.unwrap_or(a.grid * patch);
    let image = CanvasImage::load(&a.input)?;
    let mosaic = inference::stitch_attention(&image, &ck.painter, size, a.grid, inference::DEFAULT_CANVAS)?;
    fs::create_dir_all(&a.out)?;
    for q in 0..mosaic.maps.len() {
        let path = a.out.join(format!("attn_q{q}.png"));
        mosaic.to_gray(q).save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
    }
    println!("queries {} side {}", mosaic.maps.len(), mosaic.side());
    Ok(())
}

fn synth_dump(a: SynthArgs) -> dqpaint::Result<()> {
    let cfg = SynthConfig {
        patch_size: a.patch_size,
        max_strokes: a.max_strokes,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    let mut listing = String::new();
    for i in 0..a.count {
        let sample = sample_with_seed(&cfg, a.seed, i)?;
        let stem = format!("sample_{i:04}");
        dump_sample(&sample, &a.out, &stem)?;
        for (s, c) in sample.target_strokes.iter() {
            let v = s.to_array();
            listing.push_str(&format!(
                "{stem} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                c as u8, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]
            ));
        }
    }
    fs::write(a.out.join("strokes.txt"), listing)?;
    println!("samples {}", a.count);
    Ok(())
}
