//! Deterministic synthetic crowd clips: Gaussian-blob people moving along
//! reflected straight-line trajectories over a static background, with
//! exact head annotations and ground-truth flow.
//!
//! All randomness comes from `ChaCha8Rng` seeded with `seed`, so a config
//! produces the same clip on every platform.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{ClipAnnotation, FrameAnnotation, HeadPoint};
use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::motion::FlowField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PeopleCount {
    Fixed(usize),
    /// Inclusive range, drawn uniformly.
    Range([usize; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Textured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub n_people: PeopleCount,
    /// Inclusive speed range in pixels/frame.
    pub speed_range: [f64; 2],
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub background: Background,
    pub background_level: f64,
    pub noise_std: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        SynthSceneConfig {
            width: 64,
            height: 64,
            n_frames: 9,
            n_people: PeopleCount::Range([5, 10]),
            speed_range: [1.0, 3.0],
            blob_sigma: 2.0,
            blob_amplitude: 0.6,
            background: Background::Textured,
            background_level: 0.2,
            noise_std: 0.01,
            fps: 25.0,
            seed: 0,
        }
    }
}

impl SynthSceneConfig {
    /// Largest people count whose blob discs (radius `2 * blob_sigma`)
    /// cover at most half of the frame.
    pub fn max_people(&self) -> usize {
        let disc = std::f64::consts::PI * (2.0 * self.blob_sigma).powi(2);
        ((0.5 * (self.width * self.height) as f64) / disc).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 2 || self.height < 2 {
            return bad(format!("frame {}x{} is too small", self.height, self.width));
        }
        if self.n_frames < 2 {
            return bad(format!("n_frames must be >= 2, got {}", self.n_frames));
        }
        let [lo, hi] = self.speed_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!(
                "speed_range {:?} is not an ordered non-negative range",
                self.speed_range
            ));
        }
        if !(self.blob_sigma > 0.0) || !(self.noise_std >= 0.0) || !(self.fps > 0.0) {
            return bad("blob_sigma and fps must be > 0 and noise_std >= 0".into());
        }
        let max_n = match self.n_people {
            PeopleCount::Fixed(n) => n,
            PeopleCount::Range([a, b]) => {
                if a > b {
                    return bad(format!("n_people range [{a}, {b}] is reversed"));
                }
                b
            }
        };
        if max_n > self.max_people() {
            return bad(format!(
                "{max_n} people exceed the overlap budget of {} for a {}x{} frame",
                self.max_people(),
                self.height,
                self.width
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub person_id: usize,
    pub positions: Vec<HeadPoint>,
    /// Velocity used to step from frame `t` to `t + 1`, after reflection.
    pub velocities: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub frames: Vec<Image>,
    pub annotation: ClipAnnotation,
    /// `flows[t]` maps frame `t` to frame `t + 1`.
    pub flows: Vec<FlowField>,
    pub trajectories: Vec<Trajectory>,
}

/// Reflects `pos + step` into `[0, max]`; returns the new position and the
/// (possibly negated) step direction sign.
fn reflect(pos: f64, step: f64, max: f64) -> (f64, f64) {
    let mut p = pos + step;
    let mut sign = 1.0;
    // a step never exceeds the frame extent in practice, but loop to be exact
    while p < 0.0 || p > max {
        if p < 0.0 {
            p = -p;
        } else {
            p = 2.0 * max - p;
        }
        sign = -sign;
    }
    (p, sign)
}

fn step_trajectory(
    start: HeadPoint,
    mut vel: (f64, f64),
    steps: usize,
    w: usize,
    h: usize,
) -> (Vec<HeadPoint>, Vec<(f64, f64)>) {
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let mut positions = vec![start];
    let mut velocities = Vec::with_capacity(steps);
    let mut cur = start;
    for _ in 0..steps {
        let (x, sx) = reflect(cur.x, vel.0, max_x);
        let (y, sy) = reflect(cur.y, vel.1, max_y);
        velocities.push(vel);
        vel = (vel.0 * sx, vel.1 * sy);
        cur = HeadPoint::new(x, y);
        positions.push(cur);
    }
    (positions, velocities)
}

fn background(config: &SynthSceneConfig, rng: &mut ChaCha8Rng) -> Grid {
    match config.background {
        Background::Flat => Grid::filled(config.width, config.height, config.background_level),
        Background::Textured => {
            // static per clip, so true background motion is zero
            Grid::from_fn(config.width, config.height, |_, _| {
                config.background_level + 0.15 * (rng.random::<f64>() - 0.5)
            })
        }
    }
}

fn add_blob(frame: &mut Grid, head: &HeadPoint, sigma: f64, amplitude: f64) {
    let (w, h) = frame.dims();
    let reach = 5.0 * sigma;
    let x0 = (head.x - reach).ceil().max(0.0) as usize;
    let x1 = ((head.x + reach).floor() as usize).min(w - 1);
    let y0 = (head.y - reach).ceil().max(0.0) as usize;
    let y1 = ((head.y + reach).floor() as usize).min(h - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let (dx, dy) = (px as f64 - head.x, py as f64 - head.y);
            frame.add(px, py, amplitude * (-(dx * dx + dy * dy) * inv).exp());
        }
    }
}

/// Background plus one blob per head, plus noise drawn from `noise_rng`.
pub fn render_frame(
    heads: &[HeadPoint],
    background: &Grid,
    config: &SynthSceneConfig,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Grid {
    let mut frame = background.clone();
    for head in heads {
        add_blob(&mut frame, head, config.blob_sigma, config.blob_amplitude);
    }
    if let Some(rng) = noise_rng {
        if config.noise_std > 0.0 {
            let normal = Normal::new(0.0, config.noise_std).expect("validated std");
            frame.values_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }
    frame
}

/// Displacement of the nearest head within `2 * blob_sigma`, zero elsewhere.
fn ground_truth_flow(prev: &[HeadPoint], next: &[HeadPoint], config: &SynthSceneConfig) -> FlowField {
    let mut flow = FlowField::zeros(config.width, config.height);
    let support = 2.0 * config.blob_sigma;
    for py in 0..config.height {
        for px in 0..config.width {
            let p = HeadPoint::new(px as f64, py as f64);
            let nearest = prev
                .iter()
                .enumerate()
                .map(|(i, h)| (i, h.distance(&p)))
                .filter(|&(_, d)| d <= support)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = nearest {
                flow.u.set(px, py, next[i].x - prev[i].x);
                flow.v.set(px, py, next[i].y - prev[i].y);
            }
        }
    }
    flow
}

pub fn generate_clip(config: &SynthSceneConfig) -> Result<SynthClip> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = match config.n_people {
        PeopleCount::Fixed(n) => n,
        PeopleCount::Range([a, b]) => rng.random_range(a..=b),
    };
    let (w, h) = (config.width, config.height);
    let steps = config.n_frames - 1;
    let trajectories: Vec<Trajectory> = (0..n)
        .map(|person_id| {
            let start = HeadPoint::new(
                rng.random::<f64>() * (w - 1) as f64,
                rng.random::<f64>() * (h - 1) as f64,
            );
            let [lo, hi] = config.speed_range;
            let speed = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let (positions, velocities) =
                step_trajectory(start, (speed * angle.cos(), speed * angle.sin()), steps, w, h);
            Trajectory {
                person_id,
                positions,
                velocities,
            }
        })
        .collect();

    let bg = background(config, &mut rng);
    let heads_at = |t: usize| -> Vec<HeadPoint> { trajectories.iter().map(|tr| tr.positions[t]).collect() };

    let mut frames = Vec::with_capacity(config.n_frames);
    let mut annotations = Vec::with_capacity(config.n_frames);
    for t in 0..config.n_frames {
        let heads = heads_at(t);
        frames.push(Image::gray(render_frame(&heads, &bg, config, Some(&mut rng))));
        annotations.push(FrameAnnotation::new(t, frame_path(t), heads));
    }
    let flows = (0..steps)
        .map(|t| ground_truth_flow(&heads_at(t), &heads_at(t + 1), config))
        .collect();

    let annotation = ClipAnnotation {
        clip_id: format!("synth-{}", config.seed),
        width: w,
        height: h,
        fps: config.fps,
        frames: annotations,
    };
    annotation.validate()?;
    Ok(SynthClip {
        frames,
        annotation,
        flows,
        trajectories,
    })
}

pub fn frame_path(t: usize) -> String {
    format!("frames/{t:06}.png")
}

pub fn flow_path(t: usize) -> String {
    format!("flow/{t:06}.flo2")
}

pub const ANNOTATION_FILE: &str = "annotation.json";

impl SynthClip {
    /// Writes `frames/%06d.png`, `flow/%06d.flo2` (flow from frame `t` to
    /// `t + 1`) and `annotation.json` under `dir`. Returns the written paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        for sub in ["frames", "flow"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut written = Vec::new();
        for (t, frame) in self.frames.iter().enumerate() {
            let p = dir.join(frame_path(t));
            frame.save_png(&p)?;
            written.push(p);
        }
        for (t, flow) in self.flows.iter().enumerate() {
            let p = dir.join(flow_path(t));
            flow.save(&p)?;
            written.push(p);
        }
        let p = dir.join(ANNOTATION_FILE);
        self.annotation.save(&p)?;
        written.push(p);
        Ok(written)
    }
}
