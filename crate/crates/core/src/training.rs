//! Datasets, augmentation, ground-truth pooling, Adam updates on the fused
//! objective, the epoch loop with best-MAE checkpointing, evaluation and
//! the ablation harness.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{render_density, render_segmentation, ClipAnnotation, HeadPoint, KernelSpec};
use crate::error::{Error, Result};
use crate::grid::{DensityMap, Grid, Image, SegmentationMask};
use crate::losses::{
    density_loss_grad, density_loss_slice, evaluate, seg_bce_loss_grad, seg_bce_loss_slice, total_loss, EvalReport,
    LossBreakdown,
};
use crate::motion::{estimate_flow, FlowBackend, FlowEstimatorSpec, FlowField};
use crate::nn::config::{AblationMode, ModelConfig};
use crate::nn::layers::Tensor;
use crate::nn::model::{grids_to_tensor, images_to_tensor, prior_tensor, Model, ModelInput};
use crate::nn::params::{Checkpoint, ModelParams};
use crate::synth::{flow_path, generate_clip, SynthClip, SynthSceneConfig, ANNOTATION_FILE};

/// One training/evaluation window at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Oldest first; the last frame is the one being counted.
    pub frames: Vec<Image>,
    /// Flow from the second-to-last frame to the last.
    pub flow: FlowField,
    pub density: DensityMap,
    pub mask: SegmentationMask,
    pub heads: Vec<HeadPoint>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.density.width()
    }

    pub fn height(&self) -> usize {
        self.density.height()
    }

    pub fn count(&self) -> f64 {
        self.heads.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Square crop side in pixels; `None` keeps whole frames.
    pub crop_size: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            crop_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_seg: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub ablation_mode: AblationMode,
    pub deterministic: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 8,
            epochs: 100,
            lambda_seg: 1.0,
            augment: AugmentConfig::default(),
            seed: 0,
            ablation_mode: AblationMode::MotionGuided,
            deterministic: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda_seg >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_seg must be >= 0, got {}",
                self.lambda_seg
            )));
        }
        if let Some(c) = self.augment.crop_size {
            if c == 0 || c % model.output_stride() != 0 {
                return Err(Error::Config(format!(
                    "crop_size {c} must be a positive multiple of the output stride {}",
                    model.output_stride()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthSceneConfig),
    /// Directory with `annotation.json`, `frames/` and optionally `flow/`.
    ClipDir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Vec<DataSource>,
    pub val: Vec<DataSource>,
    pub kernel: KernelSpec,
    pub flow: FlowEstimatorSpec,
    /// Distance in frames between consecutive window members.
    pub frame_gap: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: Vec::new(),
            val: Vec::new(),
            kernel: KernelSpec::fixed(4.0),
            flow: FlowEstimatorSpec::oracle(),
            frame_gap: 1,
        }
    }
}

/// Builds windows from any frame source. `flow_for(t)` returns stored flow
/// from frame `t - gap` to `t` when the backend reads precomputed flow.
fn build_samples(
    annotation: &ClipAnnotation,
    frames: &[Image],
    mut stored_flow: impl FnMut(usize) -> Result<FlowField>,
    data: &DataConfig,
    model: &ModelConfig,
) -> Result<Vec<Sample>> {
    let window = model.temporal_window;
    let gap = data.frame_gap.max(1);
    let span = (window - 1) * gap;
    let (w, h) = (annotation.width, annotation.height);
    let mut out = Vec::new();
    for t in span..frames.len() {
        let frame_ann = &annotation.frames[t];
        let window_frames: Vec<Image> = (0..window).map(|i| frames[t - span + i * gap].clone()).collect();
        let flow = match data.flow.backend {
            FlowBackend::BlockMatching => estimate_flow(&frames[t - gap].luma(), &frames[t].luma(), &data.flow, None)?,
            FlowBackend::Oracle | FlowBackend::External => {
                if data.flow.backend == FlowBackend::Oracle && gap != 1 {
                    return Err(Error::Backend("oracle flow is only defined for frame_gap 1".into()));
                }
                let stored = stored_flow(t)?;
                estimate_flow(
                    &frames[t - gap].luma(),
                    &frames[t].luma(),
                    &FlowEstimatorSpec::oracle(),
                    Some(&stored),
                )?
            }
        };
        out.push(Sample {
            frames: window_frames,
            flow,
            density: render_density(frame_ann, &data.kernel, w, h)?,
            mask: render_segmentation(frame_ann, model.seg_radius, w, h)?,
            heads: frame_ann.heads.clone(),
        });
    }
    Ok(out)
}

pub fn samples_from_synth(clip: &SynthClip, data: &DataConfig, model: &ModelConfig) -> Result<Vec<Sample>> {
    build_samples(
        &clip.annotation,
        &clip.frames,
        |t| {
            let gap = data.frame_gap.max(1);
            if gap != 1 {
                return Err(Error::Backend(
                    "synthetic flow is only stored for consecutive frames".into(),
                ));
            }
            Ok(clip.flows[t - 1].clone())
        },
        data,
        model,
    )
}

/// Loads a clip directory in the `frames/`, `flow/`, `annotation.json` layout.
pub fn samples_from_dir(dir: &Path, data: &DataConfig, model: &ModelConfig) -> Result<Vec<Sample>> {
    let annotation = ClipAnnotation::load(dir.join(ANNOTATION_FILE))?;
    let frames = annotation
        .frames
        .iter()
        .map(|f| Image::load_png(dir.join(&f.image_path)))
        .collect::<Result<Vec<_>>>()?;
    let gap = data.frame_gap.max(1);
    build_samples(
        &annotation,
        &frames,
        |t| {
            let path = dir.join(flow_path(t - gap));
            if !path.exists() {
                return Err(Error::Backend(format!("flow file {} not found", path.display())));
            }
            FlowField::load(path)
        },
        data,
        model,
    )
}

pub fn load_sources(sources: &[DataSource], data: &DataConfig, model: &ModelConfig) -> Result<Vec<Sample>> {
    let mut all = Vec::new();
    for src in sources {
        let samples = match src {
            DataSource::Synthetic(cfg) => samples_from_synth(&generate_clip(cfg)?, data, model)?,
            DataSource::ClipDir(dir) => samples_from_dir(dir, data, model)?,
        };
        all.extend(samples);
    }
    Ok(all)
}

// ------------------------------------------------------------ augmentation

/// Applies one flip/crop choice to every component of a sample.
pub fn apply_augmentation(sample: &Sample, flip: bool, crop: Option<(usize, usize, usize)>) -> Result<Sample> {
    let mut s = sample.clone();
    if flip {
        let w = s.width() as f64;
        s.frames = s.frames.iter().map(Image::flip_horizontal).collect();
        s.flow = s.flow.flip_horizontal();
        s.density = DensityMap(s.density.flip_horizontal());
        s.mask = SegmentationMask(s.mask.flip_horizontal());
        // pixel x maps to W-1-x
        s.heads = s
            .heads
            .iter()
            .map(|h| HeadPoint::new((w - 1.0 - h.x).max(0.0), h.y))
            .collect();
    }
    if let Some((x0, y0, side)) = crop {
        if x0 + side > s.width() || y0 + side > s.height() {
            return Err(Error::Shape(format!(
                "crop of {side} at ({x0}, {y0}) exceeds {}x{} frame",
                s.height(),
                s.width()
            )));
        }
        s.frames = s
            .frames
            .iter()
            .map(|f| f.crop(x0, y0, side, side))
            .collect::<Result<_>>()?;
        s.flow = s.flow.crop(x0, y0, side, side)?;
        s.density = DensityMap(s.density.crop(x0, y0, side, side)?);
        s.mask = SegmentationMask(s.mask.crop(x0, y0, side, side)?);
        let (lo_x, lo_y) = (x0 as f64, y0 as f64);
        s.heads = s
            .heads
            .iter()
            .map(|h| HeadPoint::new(h.x - lo_x, h.y - lo_y))
            .filter(|h| h.in_bounds(side, side))
            .collect();
    }
    Ok(s)
}

/// One shared random flip and crop for the whole sample.
pub fn augment(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let flip = config.flip && rng.random_bool(0.5);
    let crop = match config.crop_size {
        None => None,
        Some(side) => {
            if side > sample.width() || side > sample.height() {
                return Err(Error::Shape(format!(
                    "crop {side} is larger than the {}x{} frame",
                    sample.height(),
                    sample.width()
                )));
            }
            let x0 = rng.random_range(0..=sample.width() - side);
            let y0 = rng.random_range(0..=sample.height() - side);
            Some((x0, y0, side))
        }
    };
    apply_augmentation(sample, flip, crop)
}

// ------------------------------------------------------- GT downsampling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Count-preserving, for density.
    Sum,
    /// Presence-preserving, for masks.
    Max,
}

pub fn downsample_grid(g: &Grid, stride: usize, pooling: Pooling) -> Result<Grid> {
    let (w, h) = g.dims();
    if stride == 0 || w % stride != 0 || h % stride != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by stride {stride}")));
    }
    Ok(Grid::from_fn(w / stride, h / stride, |x, y| {
        let cells = (0..stride).flat_map(|dy| (0..stride).map(move |dx| (dx, dy)));
        let vals = cells.map(|(dx, dy)| g.get(x * stride + dx, y * stride + dy));
        match pooling {
            Pooling::Sum => vals.sum(),
            Pooling::Max => vals.fold(f64::NEG_INFINITY, f64::max),
        }
    }))
}

pub fn downsample_density(map: &DensityMap, stride: usize) -> Result<DensityMap> {
    downsample_grid(map, stride, Pooling::Sum).map(DensityMap)
}

pub fn downsample_mask(mask: &SegmentationMask, stride: usize) -> Result<SegmentationMask> {
    downsample_grid(mask, stride, Pooling::Max).map(SegmentationMask)
}

// ---------------------------------------------------------------- batches

#[derive(Debug, Clone)]
pub struct Batch {
    pub input: ModelInput,
    /// `[B, 1, h, w]` sum-pooled density.
    pub density: Tensor,
    /// `[B, 1, h, w]` max-pooled mask.
    pub mask: Tensor,
    pub counts: Vec<f64>,
}

pub fn make_batch(samples: &[&Sample], config: &ModelConfig) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let stride = config.output_stride();
    let mut frames = Vec::with_capacity(samples.len() * config.temporal_window);
    let mut dens = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        if s.frames.len() != config.temporal_window {
            return Err(Error::Shape(format!(
                "sample has {} frames, model window is {}",
                s.frames.len(),
                config.temporal_window
            )));
        }
        frames.extend(s.frames.iter().cloned());
        dens.push(downsample_grid(&s.density, stride, Pooling::Sum)?);
        masks.push(downsample_grid(&s.mask, stride, Pooling::Max)?);
    }
    let flows: Vec<&FlowField> = samples.iter().map(|s| &s.flow).collect();
    Ok(Batch {
        input: ModelInput {
            frames: images_to_tensor(&frames, config.in_channels)?,
            prior: prior_tensor(&flows, config)?,
        },
        density: grids_to_tensor(&dens.iter().collect::<Vec<_>>())?,
        mask: grids_to_tensor(&masks.iter().collect::<Vec<_>>())?,
        counts: samples.iter().map(|s| s.count()).collect(),
    })
}

// ------------------------------------------------------------- objective

/// Fused loss and its gradients with respect to the density and guidance
/// outputs.
pub fn batch_loss(
    density: &Tensor,
    guidance: Option<&Tensor>,
    batch: &Batch,
    lambda: f64,
) -> Result<(LossBreakdown, Tensor, Option<Tensor>)> {
    let pred = density.as_slice().expect("standard layout");
    let gt = batch.density.as_slice().expect("standard layout");
    let l_den = density_loss_slice(pred, gt)?;
    let d_den = Tensor::from_shape_vec(density.raw_dim(), density_loss_grad(pred, gt)).expect("same shape");
    let (l_seg, d_seg) = match guidance {
        Some(g) => {
            let m = g.as_slice().expect("standard layout");
            let y = batch.mask.as_slice().expect("standard layout");
            let l = seg_bce_loss_slice(m, y)?;
            let mut d = Tensor::from_shape_vec(g.raw_dim(), seg_bce_loss_grad(m, y)).expect("same shape");
            d.mapv_inplace(|v| v * lambda);
            (l, Some(d))
        }
        None => (0.0, None),
    };
    Ok((total_loss(l_den, l_seg, lambda)?, d_den, d_seg))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ModelParams,
    v: ModelParams,
    t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            m: ModelParams::zeros_like(params),
            v: ModelParams::zeros_like(params),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        for ((key, p), ((_, m), (_, v))) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = grads.get(key);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Forward, fused loss, backward and one Adam update.
pub fn train_step(
    model: &Model,
    params: &mut ModelParams,
    adam: &mut Adam,
    batch: &Batch,
    lambda: f64,
) -> Result<LossBreakdown> {
    let (out, trace) = model.forward(params, &batch.input)?;
    let (loss, d_den, d_seg) = batch_loss(&out.density, out.guidance.as_ref(), batch, lambda)?;
    if let Some(term) = loss.non_finite_term() {
        return Err(Error::NonFinite(format!("loss term {term}")));
    }
    let grads = model.backward(params, &trace, &d_den, d_seg.as_ref());
    if !grads.is_finite() {
        return Err(Error::NonFinite("parameter gradients".into()));
    }
    adam.step(params, &grads);
    Ok(loss)
}

// -------------------------------------------------------------- fitting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub l_den: f64,
    pub l_seg: f64,
    pub l_total: f64,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_mae: Option<f64>,
    pub log: Vec<LogRecord>,
}

/// Model config with the training-time overrides applied.
pub fn effective_model_config(model: &ModelConfig, train: &TrainConfig) -> ModelConfig {
    ModelConfig {
        variant: train.ablation_mode,
        lambda_seg: train.lambda_seg,
        ..model.clone()
    }
}

/// Predicted counts, batched.
pub fn predict_counts(model: &Model, params: &ModelParams, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut counts = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs, &model.config)?;
        let (out, _) = model.forward(params, &batch.input)?;
        for b in 0..chunk.len() {
            counts.push(out.density.index_axis(ndarray::Axis(0), b).sum());
        }
    }
    Ok(counts)
}

/// Evaluates any per-sample count predictor.
pub fn evaluate_with(samples: &[Sample], mut predict: impl FnMut(&Sample) -> Result<f64>) -> Result<EvalReport> {
    let pairs = samples
        .iter()
        .map(|s| Ok((s.count(), predict(s)?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&pairs)
}

pub fn evaluate_dataset(samples: &[Sample], checkpoint: &Checkpoint) -> Result<EvalReport> {
    let model = Model::new(checkpoint.config.clone())?;
    checkpoint.params.check_against(&model.config)?;
    let pred = predict_counts(&model, &checkpoint.params, samples)?;
    let pairs: Vec<(f64, f64)> = samples.iter().map(Sample::count).zip(pred).collect();
    evaluate(&pairs)
}

/// Seed for the augmentation of one sample in one epoch, independent of
/// batch composition or worker scheduling.
fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Epoch loop. Validation falls back to the training set when `val` is
/// empty. When `out_dir` is set, writes `train_log.jsonl`, `best.ckpt` and
/// `last.ckpt` there.
pub fn fit(
    train: &[Sample],
    val: &[Sample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let model_config = effective_model_config(model_config, config);
    config.validate(&model_config)?;
    let model = Model::new(model_config.clone())?;
    let mut params = model.init_params(config.seed)?;
    let mut adam = Adam::new(&params, config);
    let eval_set = if val.is_empty() { train } else { val };

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut best_params = params.clone();
    let mut best_mae: Option<f64> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, epoch, usize::MAX));
        order.shuffle(&mut shuffle_rng);
        let (mut den, mut seg, mut tot, mut n_batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let augmented = chunk
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, epoch, i));
                    augment(&train[i], &config.augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = augmented.iter().collect();
            let batch = make_batch(&refs, &model_config)?;
            let loss = train_step(&model, &mut params, &mut adam, &batch, config.lambda_seg)?;
            den += loss.l_den;
            seg += loss.l_seg;
            tot += loss.l_total;
            n_batches += 1;
        }
        let pred = predict_counts(&model, &params, eval_set)?;
        let pairs: Vec<(f64, f64)> = eval_set.iter().map(Sample::count).zip(pred).collect();
        let report = evaluate(&pairs)?;
        let nb = n_batches as f64;
        let record = LogRecord {
            epoch,
            l_den: den / nb,
            l_seg: seg / nb,
            l_total: tot / nb,
            mae: report.mae,
            mse: report.mse,
        };
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(p.as_path(), e))?;
        }
        if best_mae.is_none_or(|b| report.mae < b) {
            best_mae = Some(report.mae);
            best_params = params.clone();
        }
        log.push(record);
    }

    let best = Checkpoint {
        config: model_config.clone(),
        params: best_params,
    };
    let last = Checkpoint {
        config: model_config,
        params,
    };
    if let Some(dir) = out_dir {
        best.save(dir.join("best.ckpt"))?;
        last.save(dir.join("last.ckpt"))?;
    }
    Ok(FitResult {
        best,
        last,
        best_mae,
        log,
    })
}

/// Fixed-step training on a fixed batch order without augmentation;
/// used for small overfitting runs.
pub fn fit_steps(
    train: &[Sample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    steps: usize,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    let model_config = effective_model_config(model_config, config);
    config.validate(&model_config)?;
    let model = Model::new(model_config.clone())?;
    let mut params = model.init_params(config.seed)?;
    let mut adam = Adam::new(&params, config);
    let batches = train
        .chunks(config.batch_size)
        .map(|c| make_batch(&c.iter().collect::<Vec<_>>(), &model_config))
        .collect::<Result<Vec<_>>>()?;
    if batches.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        losses.push(train_step(
            &model,
            &mut params,
            &mut adam,
            &batches[step % batches.len()],
            config.lambda_seg,
        )?);
    }
    Ok((
        Checkpoint {
            config: model_config,
            params,
        },
        losses,
    ))
}

// ----------------------------------------------------------- experiments

/// Full experiment description, read from a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub mode: AblationMode,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains every ablation mode for every seed and evaluates each best
/// checkpoint on `test`.
pub fn run_ablation(
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    model: &ModelConfig,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    for mode in AblationMode::ALL {
        for &seed in seeds {
            let cfg = TrainConfig {
                ablation_mode: mode,
                seed,
                ..config.clone()
            };
            let fit = fit(train, val, model, &cfg, None)?;
            results.push(AblationResult {
                mode,
                seed,
                report: evaluate_dataset(test, &fit.best)?,
            });
        }
    }
    Ok(results)
}

/// Median MAE per mode in `AblationMode::ALL` order.
pub fn median_mae(results: &[AblationResult]) -> Vec<(AblationMode, f64)> {
    AblationMode::ALL
        .iter()
        .map(|&mode| {
            let mut maes: Vec<f64> = results
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.report.mae)
                .collect();
            maes.sort_by(f64::total_cmp);
            let n = maes.len();
            let med = if n == 0 {
                f64::NAN
            } else if n % 2 == 1 {
                maes[n / 2]
            } else {
                0.5 * (maes[n / 2 - 1] + maes[n / 2])
            };
            (mode, med)
        })
        .collect()
}
