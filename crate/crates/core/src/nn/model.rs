//! The counting network: shared VGG-style front-end over every frame of a
//! window, spatial and temporal non-local blocks, flow-guided segmentation
//! head, cascaded residual-attention refinement of the current frame, and
//! a rectified density back-end.

use ndarray::{s, Axis};

use crate::error::{Error, Result};
use crate::grid::{DensityMap, Grid, Image, SegmentationMask};
use crate::motion::{flow_magnitude_prior, FlowField};
use crate::nn::attention::{AttentionTrace, ResidualAttention, SegHead, SegTrace};
use crate::nn::config::{ModelConfig, NonLocalOrder};
use crate::nn::layers::{Conv2d, Op, SeqTrace, Sequential, Tensor};
use crate::nn::nonlocal::{NonLocal, NonLocalMode, NonLocalTrace};
use crate::nn::params::ModelParams;

/// Soft person-region map at output-stride resolution.
pub type GuidanceMap = SegmentationMask;

/// A batch of `B` windows.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// `[B*T, C_in, H, W]`, frames of one window adjacent and oldest first.
    pub frames: Tensor,
    /// Motion prior of each window's current frame, `[B, 1, H/s, W/s]`.
    pub prior: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, 1, H/s, W/s]`
    pub density: Tensor,
    /// `[B, 1, H/s, W/s]`, present when the guidance stage is active.
    pub guidance: Option<Tensor>,
}

#[derive(Debug)]
pub struct ForwardTrace {
    frontend: SeqTrace,
    nonlocal: Vec<NonLocalTrace>,
    seg: Option<SegTrace>,
    refine: Vec<AttentionTrace>,
    backend: SeqTrace,
    feature_dim: (usize, usize, usize, usize),
    batch: usize,
}

impl ForwardTrace {
    pub fn nonlocal_traces(&self) -> &[NonLocalTrace] {
        &self.nonlocal
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    frontend: Sequential,
    nonlocal: Vec<NonLocal>,
    seg: SegHead,
    refine: Vec<ResidualAttention>,
    backend: Sequential,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut ops = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.backbone_channels.iter().enumerate() {
            ops.push(Op::Conv(Conv2d::new(&format!("frontend.conv{i}"), cin, cout, 3)));
            ops.push(Op::Relu);
            if config.pool_after(i) {
                ops.push(Op::MaxPool);
            }
            cin = cout;
        }
        let frontend = Sequential { ops };

        let spatial = NonLocal::new("nl_spatial", NonLocalMode::Spatial);
        let temporal = NonLocal::new("nl_temporal", NonLocalMode::Temporal);
        let nonlocal = match config.nonlocal_order {
            NonLocalOrder::SpatialFirst => vec![spatial, temporal],
            NonLocalOrder::TemporalFirst => vec![temporal, spatial],
        };

        let c = config.feature_channels();
        let seg = SegHead::new("seg", c, config.seg_hidden);
        let refine = (0..config.refine_blocks)
            .map(|b| ResidualAttention::new(&format!("refine{b}"), c, config.attention_hidden()))
            .collect();

        let mut ops = Vec::new();
        let mut cin = c;
        for (i, &cout) in config.backend_channels.iter().enumerate() {
            ops.push(Op::Conv(Conv2d::new(&format!("backend.conv{i}"), cin, cout, 3)));
            ops.push(Op::Relu);
            cin = cout;
        }
        ops.push(Op::Conv(Conv2d::new("backend.out", cin, 1, 1)));
        ops.push(Op::Softplus);
        let backend = Sequential { ops };

        Ok(Model {
            config,
            frontend,
            nonlocal,
            seg,
            refine,
            backend,
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        ModelParams::init(&self.config, seed)
    }

    fn check_input(&self, input: &ModelInput) -> Result<usize> {
        let (n, c, h, w) = input.frames.dim();
        let t = self.config.temporal_window;
        let s = self.config.output_stride();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if n == 0 || n % t != 0 {
            return Err(Error::Shape(format!(
                "{n} frames is not a whole number of {t}-frame windows"
            )));
        }
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "frame size {h}x{w} is not divisible by the output stride {s}"
            )));
        }
        let b = n / t;
        let want = (b, 1, h / s, w / s);
        if input.prior.dim() != want {
            return Err(Error::Shape(format!(
                "motion prior is {:?}, expected {:?}",
                input.prior.dim(),
                want
            )));
        }
        if !input.frames.iter().chain(input.prior.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(b)
    }

    /// Density back-end: conv stack ending in a softplus output channel.
    pub fn backend(&self) -> &Sequential {
        &self.backend
    }

    /// Front-end over every frame, weights shared across time.
    pub fn frontend_forward(&self, p: &ModelParams, frames: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = frames.dim();
        let s = self.config.output_stride();
        if c != self.config.in_channels || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "front-end needs {} channels and sizes divisible by {s}, got {c}x{h}x{w}",
                self.config.in_channels
            )));
        }
        Ok(self.frontend.infer(p, frames.clone()))
    }

    pub fn forward(&self, p: &ModelParams, input: &ModelInput) -> Result<(ModelOutput, ForwardTrace)> {
        let batch = self.check_input(input)?;
        let window = self.config.temporal_window;
        let variant = self.config.variant;

        let (mut feats, frontend) = self.frontend.forward(p, input.frames.clone());
        let feature_dim = feats.dim();

        let mut nl_traces = Vec::new();
        if variant.uses_nonlocal() {
            for block in &self.nonlocal {
                let (out, tr) = block.forward(p, &feats, window)?;
                feats = out;
                nl_traces.push(tr);
            }
        }

        let current = current_frames(&feats, window);
        let (refined, guidance, seg, refine) = if variant.uses_guidance() {
            let (g, seg_trace) = self.seg.forward(p, &current, &input.prior);
            let mut cur = current;
            let mut traces = Vec::with_capacity(self.refine.len());
            for block in &self.refine {
                let (out, tr) = block.forward(p, &cur, &g);
                cur = out;
                traces.push(tr);
            }
            (cur, Some(g), Some(seg_trace), traces)
        } else {
            (current, None, None, Vec::new())
        };

        let (density, backend) = self.backend.forward(p, refined);
        if !density.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("density output".into()));
        }
        Ok((
            ModelOutput { density, guidance },
            ForwardTrace {
                frontend,
                nonlocal: nl_traces,
                seg,
                refine,
                backend,
                feature_dim,
                batch,
            },
        ))
    }

    /// Parameter gradients for upstream gradients on the density and
    /// guidance outputs.
    pub fn backward(
        &self,
        p: &ModelParams,
        trace: &ForwardTrace,
        d_density: &Tensor,
        d_guidance: Option<&Tensor>,
    ) -> ModelParams {
        let mut grads = ModelParams::zeros_like(p);
        let mut d_cur = self
            .backend
            .backward(p, &trace.backend, d_density.clone(), &mut grads, true)
            .expect("input gradient requested");

        if let Some(seg_trace) = &trace.seg {
            let mut d_g = match d_guidance {
                Some(g) => g.clone(),
                None => Tensor::zeros(d_density.raw_dim()),
            };
            for (block, tr) in self.refine.iter().zip(&trace.refine).rev() {
                let (df, dg) = block.backward(p, tr, &d_cur, &mut grads);
                d_cur = df;
                d_g += &dg;
            }
            let (df, _) = self.seg.backward(p, seg_trace, &d_g, &mut grads);
            d_cur += &df;
        }

        let window = self.config.temporal_window;
        let mut d_feats = Tensor::zeros(trace.feature_dim);
        for b in 0..trace.batch {
            d_feats
                .index_axis_mut(Axis(0), b * window + window - 1)
                .assign(&d_cur.index_axis(Axis(0), b));
        }
        for (block, tr) in self.nonlocal.iter().zip(&trace.nonlocal).rev() {
            d_feats = block.backward(p, tr, &d_feats, &mut grads);
        }
        self.frontend.backward(p, &trace.frontend, d_feats, &mut grads, false);
        grads
    }

    /// Single-window inference on images, oldest first, with the flow
    /// between the last two frames.
    pub fn predict(
        &self,
        p: &ModelParams,
        frames: &[Image],
        flow: &FlowField,
    ) -> Result<(DensityMap, Option<GuidanceMap>)> {
        if frames.len() != self.config.temporal_window {
            return Err(Error::Shape(format!(
                "expected {} frames, got {}",
                self.config.temporal_window,
                frames.len()
            )));
        }
        let input = ModelInput {
            frames: images_to_tensor(frames, self.config.in_channels)?,
            prior: prior_tensor(&[flow], &self.config)?,
        };
        let (out, _) = self.forward(p, &input)?;
        let density = DensityMap(tensor_to_grid(&out.density, 0));
        let guidance = out.guidance.map(|g| SegmentationMask(tensor_to_grid(&g, 0)));
        Ok((density, guidance))
    }
}

/// Current (last) frame of every window.
fn current_frames(feats: &Tensor, window: usize) -> Tensor {
    feats.slice(s![window - 1..;window, .., .., ..]).to_owned()
}

pub fn images_to_tensor(frames: &[Image], channels: usize) -> Result<Tensor> {
    let first = frames.first().ok_or(Error::Empty("frame list"))?;
    let (h, w) = (first.height(), first.width());
    let mut t = Tensor::zeros((frames.len(), channels, h, w));
    for (i, img) in frames.iter().enumerate() {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        let img = img.with_channels(channels);
        for (c, grid) in img.channels.iter().enumerate() {
            t.slice_mut(s![i, c, .., ..])
                .iter_mut()
                .zip(grid.values())
                .for_each(|(d, &v)| *d = v);
        }
    }
    Ok(t)
}

pub fn tensor_to_grid(t: &Tensor, index: usize) -> Grid {
    let (_, _, h, w) = t.dim();
    Grid::from_vec(w, h, t.slice(s![index, 0, .., ..]).iter().copied().collect()).expect("sizes agree")
}

pub fn grids_to_tensor(grids: &[&Grid]) -> Result<Tensor> {
    let first = grids.first().ok_or(Error::Empty("map list"))?;
    let (w, h) = first.dims();
    let mut t = Tensor::zeros((grids.len(), 1, h, w));
    for (i, g) in grids.iter().enumerate() {
        if g.dims() != (w, h) {
            return Err(Error::Shape(format!(
                "map {i} is {:?}, expected {:?}",
                g.dims(),
                (w, h)
            )));
        }
        t.slice_mut(s![i, 0, .., ..])
            .iter_mut()
            .zip(g.values())
            .for_each(|(d, &v)| *d = v);
    }
    Ok(t)
}

/// Block-average of a grid by an integer factor.
pub fn avg_pool_grid(g: &Grid, stride: usize) -> Result<Grid> {
    let (w, h) = g.dims();
    if w % stride != 0 || h % stride != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by {stride}")));
    }
    let inv = 1.0 / (stride * stride) as f64;
    Ok(Grid::from_fn(w / stride, h / stride, |x, y| {
        let mut acc = 0.0;
        for dy in 0..stride {
            for dx in 0..stride {
                acc += g.get(x * stride + dx, y * stride + dy);
            }
        }
        acc * inv
    }))
}

/// Motion priors at output-stride resolution, one per window.
pub fn prior_tensor(flows: &[&FlowField], config: &ModelConfig) -> Result<Tensor> {
    let grids = flows
        .iter()
        .map(|f| {
            let prior = flow_magnitude_prior(f, &config.prior)?;
            avg_pool_grid(&prior, config.output_stride())
        })
        .collect::<Result<Vec<_>>>()?;
    grids_to_tensor(&grids.iter().collect::<Vec<_>>())
}
