//! The `vidcount` command-line tool.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::annotations::{render_density, render_segmentation, ClipAnnotation, KernelSpec};
use crate::error::{Error, Result};
use crate::grid::{DensityMap, Grid, Image};
use crate::motion::{estimate_flow, flow_color_encode, FlowBackend, FlowEstimatorSpec, FlowField};
use crate::nn::{AblationMode, Checkpoint, Model};
use crate::synth::{flow_path, generate_clip, SynthSceneConfig, ANNOTATION_FILE};
use crate::training::{evaluate_dataset, fit, load_sources, samples_from_dir, DataConfig, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(
    name = "vidcount",
    version,
    about = "Video crowd counting with motion-guided attention"
)]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct SharedArgs {
    /// Seed for anything random (overrides config files)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print a JSON summary instead of text
    #[arg(long, global = true)]
    pub json: bool,
    /// Require bitwise-reproducible results
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render density maps and segmentation masks from head annotations
    GenGt(GenGtArgs),
    /// Generate a synthetic crowd clip
    Synth(SynthArgs),
    /// Estimate flow between frames and write color visualizations
    Flow(FlowArgs),
    /// Train a model from an experiment config
    Train(TrainArgs),
    /// Evaluate a checkpoint or precomputed density maps
    Eval(EvalArgs),
    /// Predict a density map for one frame window
    Infer(InferArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelMethod {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    #[arg(long, value_enum, default_value = "adaptive")]
    pub method: KernelMethod,
    /// Fixed kernel standard deviation in pixels
    #[arg(long, default_value_t = 5.0)]
    pub sigma: f64,
    /// Adaptive kernel scale on the mean neighbour distance
    #[arg(long, default_value_t = 0.3)]
    pub beta: f64,
    /// Neighbours averaged by the adaptive kernel
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

impl KernelArgs {
    pub fn spec(&self) -> KernelSpec {
        match self.method {
            KernelMethod::Fixed => KernelSpec::fixed(self.sigma),
            KernelMethod::Adaptive => KernelSpec::adaptive(self.beta, self.k),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenGtArgs {
    /// Clip annotation JSON
    #[arg(long)]
    pub annotation: PathBuf,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Head disc radius for segmentation masks
    #[arg(long, default_value_t = 15.0)]
    pub radius: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene config JSON; defaults are used when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Oracle,
    BlockMatching,
    External,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "block-matching")]
    pub backend: BackendArg,
    #[arg(long, default_value_t = 5)]
    pub block_size: usize,
    #[arg(long, default_value_t = 4)]
    pub search_radius: usize,
    /// Precomputed flow: a file for one frame pair, or a directory of
    /// `%06d.flo2` files for a clip
    #[arg(long)]
    pub external: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    /// Clip directory (`frames/`, `annotation.json`, optional `flow/`)
    #[arg(long, conflicts_with = "frames")]
    pub clip: Option<PathBuf>,
    /// Two frame images, earlier first
    #[arg(long, num_args = 2)]
    pub frames: Vec<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config JSON
    #[arg(long)]
    pub config: PathBuf,
    /// Override the ablation mode
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Override the epoch count
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Baseline,
    Nonlocal,
    #[value(name = "motion_guided", alias = "motion-guided")]
    MotionGuided,
}

impl From<AblationArg> for AblationMode {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Baseline => AblationMode::Baseline,
            AblationArg::Nonlocal => AblationMode::Nonlocal,
            AblationArg::MotionGuided => AblationMode::MotionGuided,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint
    #[arg(long, required_unless_present = "density_dir", conflicts_with = "density_dir")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `%06d.dmap` predictions keyed by frame index
    #[arg(long)]
    pub density_dir: Option<PathBuf>,
    /// Clip directories to evaluate on
    #[arg(long, required = true)]
    pub clip: Vec<PathBuf>,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Flow source for checkpoint evaluation (`oracle` reads the clip's `flow/`)
    #[arg(long, value_enum, default_value = "oracle")]
    pub backend: BackendArg,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame window, oldest first; the last frame is counted
    #[arg(long, num_args = 1.., required = true)]
    pub frames: Vec<PathBuf>,
    /// Flow file from the second-to-last to the last frame; block matching
    /// is used when omitted
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Also write an upsampled density heat-map overlay
    #[arg(long)]
    pub plot: bool,
}

/// Outcome of one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl CommandResult {
    fn ok(artifacts: Vec<PathBuf>, summary: String, details: serde_json::Value) -> Self {
        CommandResult {
            exit_code: 0,
            artifacts,
            summary,
            details,
        }
    }

    pub fn failure(err: &Error) -> Self {
        CommandResult {
            exit_code: 2,
            artifacts: Vec::new(),
            summary: format!("error: {err}"),
            details: serde_json::Value::Null,
        }
    }
}

fn out_dir(shared: &SharedArgs, default: &str) -> PathBuf {
    shared.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn execute(cli: &Cli) -> Result<CommandResult> {
    match &cli.command {
        Command::GenGt(a) => gen_gt(&cli.shared, a),
        Command::Synth(a) => synth(&cli.shared, a),
        Command::Flow(a) => flow(&cli.shared, a),
        Command::Train(a) => train(&cli.shared, a),
        Command::Eval(a) => eval(&cli.shared, a),
        Command::Infer(a) => infer(&cli.shared, a),
    }
}

/// Parses, runs and converts errors into exit code 2.
pub fn run(cli: &Cli) -> CommandResult {
    execute(cli).unwrap_or_else(|e| CommandResult::failure(&e))
}

fn gen_gt(shared: &SharedArgs, a: &GenGtArgs) -> Result<CommandResult> {
    let clip = ClipAnnotation::load(&a.annotation)?;
    let spec = a.kernel.spec();
    spec.validate()?;
    let dir = out_dir(shared, "gt");
    // render everything before touching the filesystem
    let rendered = clip
        .frames
        .iter()
        .map(|f| {
            let d = render_density(f, &spec, clip.width, clip.height)?;
            let m = render_segmentation(f, a.radius, clip.width, clip.height)?;
            Ok((f, d, m))
        })
        .collect::<Result<Vec<_>>>()?;
    mkdir(&dir)?;
    let mut artifacts = Vec::new();
    let mut frames = Vec::new();
    let mut lines = Vec::new();
    let mut all_ok = true;
    for (f, d, m) in rendered {
        let dp = dir.join(format!("{:06}.dmap", f.frame_index));
        let mp = dir.join(format!("{:06}.smsk", f.frame_index));
        d.save(&dp)?;
        m.save(&mp)?;
        artifacts.extend([dp, mp]);
        let n = f.count();
        let ok = (d.sum() - n as f64).abs() < 1e-3 * n.max(1) as f64;
        all_ok &= ok;
        lines.push(format!(
            "frame {}: {} heads, density sum {:.6} [{}]",
            f.frame_index,
            n,
            d.sum(),
            if ok { "ok" } else { "MISMATCH" }
        ));
        frames.push(json!({"frame_index": f.frame_index, "heads": n, "density_sum": d.sum(), "conserved": ok}));
    }
    for l in &lines {
        eprintln!("{l}");
    }
    Ok(CommandResult::ok(
        artifacts,
        format!("wrote ground truth for {} frames to {}", frames.len(), dir.display()),
        json!({"frames": frames, "all_conserved": all_ok}),
    ))
}

fn synth(shared: &SharedArgs, a: &SynthArgs) -> Result<CommandResult> {
    let mut config = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthSceneConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSceneConfig::default(),
    };
    if let Some(s) = shared.seed {
        config.seed = s;
    }
    let clip = generate_clip(&config)?;
    let dir = out_dir(shared, "clip");
    let artifacts = clip.write(&dir)?;
    Ok(CommandResult::ok(
        artifacts,
        format!(
            "wrote {} frames, {} flow files and {} to {}",
            clip.frames.len(),
            clip.flows.len(),
            ANNOTATION_FILE,
            dir.display()
        ),
        json!({"frames": clip.frames.len(), "flows": clip.flows.len(), "people": clip.trajectories.len()}),
    ))
}

fn flow_spec(b: &BackendArgs, pair_index: Option<usize>) -> FlowEstimatorSpec {
    match b.backend {
        BackendArg::Oracle => FlowEstimatorSpec::oracle(),
        BackendArg::BlockMatching => FlowEstimatorSpec::block_matching(b.block_size, b.search_radius),
        BackendArg::External => {
            let given = b.external.clone().unwrap_or_default();
            match pair_index {
                Some(t) if given.is_dir() => FlowEstimatorSpec::external(given.join(format!("{t:06}.flo2"))),
                _ => FlowEstimatorSpec::external(given),
            }
        }
    }
}

fn flow(shared: &SharedArgs, a: &FlowArgs) -> Result<CommandResult> {
    if a.backend.backend == BackendArg::External && a.backend.external.is_none() {
        return Err(Error::Backend("external backend needs --external".into()));
    }
    // (pair index, prev, curr, ground truth)
    let mut pairs: Vec<(usize, Image, Image, Option<FlowField>)> = Vec::new();
    match (&a.clip, a.frames.as_slice()) {
        (Some(dir), _) => {
            let ann = ClipAnnotation::load(dir.join(ANNOTATION_FILE))?;
            let frames = ann
                .frames
                .iter()
                .map(|f| Image::load_png(dir.join(&f.image_path)))
                .collect::<Result<Vec<_>>>()?;
            for t in 0..frames.len().saturating_sub(1) {
                let gt = if a.backend.backend == BackendArg::Oracle {
                    let p = dir.join(flow_path(t));
                    if !p.exists() {
                        return Err(Error::Backend(format!("oracle flow {} not found", p.display())));
                    }
                    Some(FlowField::load(p)?)
                } else {
                    None
                };
                pairs.push((t, frames[t].clone(), frames[t + 1].clone(), gt));
            }
        }
        (None, [p0, p1]) => {
            if a.backend.backend == BackendArg::Oracle {
                return Err(Error::Backend("oracle flow is only available with --clip".into()));
            }
            pairs.push((0, Image::load_png(p0)?, Image::load_png(p1)?, None));
        }
        _ => return Err(Error::Config("give --clip or two --frames".into())),
    }
    let flows = pairs
        .iter()
        .map(|(t, prev, curr, gt)| {
            estimate_flow(
                &prev.luma(),
                &curr.luma(),
                &flow_spec(&a.backend, Some(*t)),
                gt.as_ref(),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let dir = out_dir(shared, "flow_out");
    mkdir(&dir.join("flow"))?;
    mkdir(&dir.join("vis"))?;
    let mut artifacts = Vec::new();
    let mut mags = Vec::new();
    for ((t, ..), f) in pairs.iter().zip(&flows) {
        let fp = dir.join(flow_path(*t));
        f.save(&fp)?;
        let vp = dir.join(format!("vis/{t:06}.png"));
        flow_color_encode(f).save_png(&vp)?;
        artifacts.extend([fp, vp]);
        let m = f.magnitude();
        mags.push(m.sum() / m.values().len() as f64);
    }
    Ok(CommandResult::ok(
        artifacts,
        format!("wrote {} flow fields to {}", flows.len(), dir.display()),
        json!({"pairs": flows.len(), "mean_magnitude": mags}),
    ))
}

fn train(shared: &SharedArgs, a: &TrainArgs) -> Result<CommandResult> {
    let mut exp = ExperimentConfig::load(&a.config)?;
    if let Some(s) = shared.seed {
        exp.train.seed = s;
    }
    if let Some(m) = a.ablation {
        exp.train.ablation_mode = m.into();
    }
    if let Some(e) = a.epochs {
        exp.train.epochs = e;
    }
    if shared.deterministic {
        exp.train.deterministic = true;
    }
    if let Some(o) = &shared.out {
        exp.output_dir = o.clone();
    }
    let train_set = load_sources(&exp.data.train, &exp.data, &exp.model)?;
    let val_set = load_sources(&exp.data.val, &exp.data, &exp.model)?;
    let result = fit(&train_set, &val_set, &exp.model, &exp.train, Some(&exp.output_dir))?;
    let cfg_path = exp.output_dir.join("experiment.json");
    write_json(&cfg_path, &exp)?;
    let dir = &exp.output_dir;
    let artifacts = vec![
        dir.join("train_log.jsonl"),
        dir.join("best.ckpt"),
        dir.join("last.ckpt"),
        cfg_path,
    ];
    let best = result.best_mae.map_or("n/a".to_string(), |m| format!("{m:.4}"));
    Ok(CommandResult::ok(
        artifacts,
        format!(
            "trained {} for {} epoch{} on {} samples, best MAE {best}",
            exp.train.ablation_mode.name(),
            result.log.len(),
            if result.log.len() == 1 { "" } else { "s" },
            train_set.len()
        ),
        json!({"mode": exp.train.ablation_mode, "epochs": result.log.len(), "best_mae": result.best_mae,
               "checksum": result.last.params.checksum()}),
    ))
}

fn eval(shared: &SharedArgs, a: &EvalArgs) -> Result<CommandResult> {
    let report = if let Some(dir) = &a.density_dir {
        let mut pairs = Vec::new();
        for clip in &a.clip {
            let ann = ClipAnnotation::load(clip.join(ANNOTATION_FILE))?;
            for f in &ann.frames {
                let p = dir.join(format!("{:06}.dmap", f.frame_index));
                pairs.push((f.count() as f64, DensityMap::load(&p)?.sum()));
            }
        }
        crate::losses::evaluate(&pairs)?
    } else {
        let ckpt_path = a.checkpoint.as_ref().expect("clap enforces one source");
        let ckpt = Checkpoint::load(ckpt_path)?;
        let data = DataConfig {
            kernel: a.kernel.spec(),
            flow: match a.backend {
                BackendArg::Oracle => FlowEstimatorSpec::oracle(),
                BackendArg::BlockMatching => FlowEstimatorSpec::default(),
                BackendArg::External => FlowEstimatorSpec {
                    backend: FlowBackend::External,
                    ..FlowEstimatorSpec::default()
                },
            },
            ..DataConfig::default()
        };
        let mut samples = Vec::new();
        for clip in &a.clip {
            samples.extend(samples_from_dir(clip, &data, &ckpt.config)?);
        }
        evaluate_dataset(&samples, &ckpt)?
    };
    let dir = out_dir(shared, "eval_out");
    mkdir(&dir)?;
    let path = dir.join("eval.json");
    write_json(&path, &report)?;
    Ok(CommandResult::ok(
        vec![path],
        format!("MAE {:.4} MSE {:.4} over {} frames", report.mae, report.mse, report.n),
        serde_json::to_value(&report)?,
    ))
}

/// Jet-like color ramp on `[0, 1]`.
fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Frame luma blended with the density upsampled (nearest) to frame size.
pub fn density_overlay(frame: &Image, density: &Grid) -> Image {
    let (w, h) = (frame.width(), frame.height());
    let (dw, dh) = density.dims();
    let peak = density.max();
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let luma = frame.luma();
    let mut channels = vec![Grid::zeros(w, h), Grid::zeros(w, h), Grid::zeros(w, h)];
    for y in 0..h {
        for x in 0..w {
            let v = density.get((x * dw / w).min(dw - 1), (y * dh / h).min(dh - 1)) * scale;
            let c = heat(v);
            let alpha = 0.6 * v.sqrt();
            for (ch, &cv) in channels.iter_mut().zip(&c) {
                ch.set(x, y, (1.0 - alpha) * luma.get(x, y) + alpha * cv);
            }
        }
    }
    Image { channels }
}

fn infer(shared: &SharedArgs, a: &InferArgs) -> Result<CommandResult> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = Model::new(ckpt.config.clone())?;
    let frames = a.frames.iter().map(Image::load_png).collect::<Result<Vec<_>>>()?;
    if frames.len() != model.config.temporal_window {
        return Err(Error::Shape(format!(
            "model expects {} frames, got {}",
            model.config.temporal_window,
            frames.len()
        )));
    }
    let n = frames.len();
    let (prev, curr) = (frames[n - 2].luma(), frames[n - 1].luma());
    let spec = match &a.flow {
        Some(p) => FlowEstimatorSpec::external(p.clone()),
        None => FlowEstimatorSpec::default(),
    };
    let flow = estimate_flow(&prev, &curr, &spec, None)?;
    let (density, guidance) = model.predict(&ckpt.params, &frames, &flow)?;
    let count = density.sum();

    let dir = out_dir(shared, "infer_out");
    mkdir(&dir)?;
    let dp = dir.join("density.dmap");
    density.save(&dp)?;
    let mut artifacts = vec![dp];
    if let Some(g) = &guidance {
        let gp = dir.join("guidance.smsk");
        g.save(&gp)?;
        artifacts.push(gp);
    }
    if a.plot {
        let pp = dir.join("overlay.png");
        density_overlay(&frames[n - 1], &density).save_png(&pp)?;
        artifacts.push(pp);
    }
    let cp = dir.join("count.json");
    write_json(&cp, &json!({"frame": a.frames[n - 1], "count": count}))?;
    artifacts.push(cp);
    Ok(CommandResult::ok(
        artifacts,
        format!("count {count:.4}"),
        json!({"count": count}),
    ))
}

/// Prints the outcome in the requested format and returns the exit code.
pub fn report(result: &CommandResult, json_output: bool) -> i32 {
    if json_output {
        println!("{}", serde_json::to_string(result).expect("serializable"));
    } else if result.exit_code == 0 {
        println!("{}", result.summary);
    } else {
        eprintln!("{}", result.summary);
    }
    result.exit_code
}
