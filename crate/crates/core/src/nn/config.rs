use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::PriorParams;

/// Which blocks of the counting network are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Front-end and back-end only.
    Baseline,
    /// Adds spatial and temporal non-local blocks.
    Nonlocal,
    /// Adds flow-guided segmentation and residual-attention refinement.
    MotionGuided,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [
        AblationMode::Baseline,
        AblationMode::Nonlocal,
        AblationMode::MotionGuided,
    ];

    pub fn uses_nonlocal(self) -> bool {
        !matches!(self, AblationMode::Baseline)
    }

    pub fn uses_guidance(self) -> bool {
        matches!(self, AblationMode::MotionGuided)
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Nonlocal => "nonlocal",
            AblationMode::MotionGuided => "motion_guided",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AblationMode::Baseline),
            "nonlocal" => Ok(AblationMode::Nonlocal),
            "motion_guided" => Ok(AblationMode::MotionGuided),
            _ => Err(Error::Config(format!("unknown ablation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonLocalOrder {
    SpatialFirst,
    TemporalFirst,
}

/// Architecture hyperparameters. Parameter shapes depend on nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output widths of the ten 3x3 front-end convolutions.
    pub backbone_channels: Vec<usize>,
    /// Max-pooling stages, placed after convs 2, 4 and 7.
    pub n_pool: usize,
    pub nl_bottleneck_ratio: f64,
    pub temporal_window: usize,
    pub lambda_seg: f64,
    /// Disc radius (input pixels) of the segmentation ground truth.
    pub seg_radius: f64,
    pub seg_hidden: usize,
    pub refine_blocks: usize,
    pub channel_reduction: usize,
    pub backend_channels: Vec<usize>,
    pub nonlocal_order: NonLocalOrder,
    pub variant: AblationMode,
    pub prior: PriorParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            backbone_channels: vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512],
            n_pool: 3,
            nl_bottleneck_ratio: 0.5,
            temporal_window: 2,
            lambda_seg: 1.0,
            seg_radius: 15.0,
            seg_hidden: 64,
            refine_blocks: 2,
            channel_reduction: 16,
            backend_channels: vec![256, 128, 64],
            nonlocal_order: NonLocalOrder::SpatialFirst,
            variant: AblationMode::MotionGuided,
            prior: PriorParams::default(),
        }
    }
}

/// Conv indices (0-based) followed by a 2x2 max-pool, in VGG-16 order.
const POOL_AFTER: [usize; 3] = [1, 3, 6];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Normal(f64),
    /// 3x3 kernel with a single unit tap in the middle.
    CenterTap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ModelConfig {
    /// Eight-channel desk-scale network for grayscale input.
    pub fn tiny() -> Self {
        ModelConfig {
            in_channels: 1,
            backbone_channels: vec![4, 4, 8, 8, 8, 8, 8, 8, 8, 8],
            seg_hidden: 8,
            channel_reduction: 4,
            backend_channels: vec![8, 8],
            seg_radius: 4.0,
            ..Default::default()
        }
    }

    pub fn output_stride(&self) -> usize {
        1 << self.n_pool
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated non-empty")
    }

    pub fn bottleneck_channels(&self) -> usize {
        ((self.feature_channels() as f64 * self.nl_bottleneck_ratio).round() as usize).max(1)
    }

    pub fn attention_hidden(&self) -> usize {
        (self.feature_channels() / self.channel_reduction.max(1)).max(1)
    }

    pub fn pool_after(&self, conv_index: usize) -> bool {
        POOL_AFTER[..self.n_pool].contains(&conv_index)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.backbone_channels.len() != 10 || self.backbone_channels.contains(&0) {
            return bad(format!(
                "backbone_channels needs ten positive widths, got {:?}",
                self.backbone_channels
            ));
        }
        if self.n_pool > POOL_AFTER.len() {
            return bad(format!("n_pool must be <= 3, got {}", self.n_pool));
        }
        if !(self.nl_bottleneck_ratio > 0.0 && self.nl_bottleneck_ratio <= 1.0) {
            return bad(format!(
                "nl_bottleneck_ratio must be in (0, 1], got {}",
                self.nl_bottleneck_ratio
            ));
        }
        if self.temporal_window < 2 {
            return bad(format!("temporal_window must be >= 2, got {}", self.temporal_window));
        }
        if !(self.lambda_seg >= 0.0 && self.lambda_seg.is_finite()) {
            return bad(format!("lambda_seg must be >= 0, got {}", self.lambda_seg));
        }
        if !(self.seg_radius > 0.0) {
            return bad(format!("seg_radius must be > 0, got {}", self.seg_radius));
        }
        if self.seg_hidden == 0 || self.channel_reduction == 0 {
            return bad("seg_hidden and channel_reduction must be >= 1".into());
        }
        if self.backend_channels.is_empty() || self.backend_channels.contains(&0) {
            return bad(format!(
                "backend_channels needs positive widths, got {:?}",
                self.backend_channels
            ));
        }
        if !(self.prior.tau > 0.0 && self.prior.tau_scale > 0.0) {
            return bad("prior tau and tau_scale must be > 0".into());
        }
        Ok(())
    }

    /// Every learnable tensor with its shape and initializer.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>, key: &str, cout: usize, cin: usize, k: usize, w: Init, b: Init| {
            specs.push(ParamSpec {
                key: format!("{key}.weight"),
                shape: vec![cout, cin, k, k],
                init: w,
            });
            specs.push(ParamSpec {
                key: format!("{key}.bias"),
                shape: vec![cout],
                init: b,
            });
        };
        let he = |fan_in: usize| Init::Normal((2.0 / fan_in as f64).sqrt());
        let lecun = |fan_in: usize| Init::Normal((1.0 / fan_in as f64).sqrt());
        let scaled = |fan_in: usize, s: f64| Init::Normal(s * (1.0 / fan_in as f64).sqrt());

        let mut cin = self.in_channels;
        for (i, &cout) in self.backbone_channels.iter().enumerate() {
            conv(
                &mut specs,
                &format!("frontend.conv{i}"),
                cout,
                cin,
                3,
                he(cin * 9),
                Init::Zeros,
            );
            cin = cout;
        }
        let c = self.feature_channels();
        let ci = self.bottleneck_channels();

        for block in ["nl_spatial", "nl_temporal"] {
            for proj in ["theta", "phi", "g"] {
                conv(&mut specs, &format!("{block}.{proj}"), ci, c, 1, lecun(c), Init::Zeros);
            }
            conv(
                &mut specs,
                &format!("{block}.out"),
                c,
                ci,
                1,
                scaled(ci, 0.1),
                Init::Zeros,
            );
        }

        let hs = self.seg_hidden;
        conv(&mut specs, "seg.conv0", hs, c + 1, 3, he((c + 1) * 9), Init::Zeros);
        conv(&mut specs, "seg.conv1", 1, hs, 1, lecun(hs), Init::Zeros);

        let cr = self.attention_hidden();
        for b in 0..self.refine_blocks {
            let p = format!("refine{b}");
            conv(&mut specs, &format!("{p}.branch0"), c, c, 3, he(c * 9), Init::Zeros);
            conv(
                &mut specs,
                &format!("{p}.branch1"),
                c,
                c,
                3,
                scaled(c * 9, 0.5),
                Init::Zeros,
            );
            conv(
                &mut specs,
                &format!("{p}.spatial"),
                1,
                1,
                3,
                Init::CenterTap,
                Init::Zeros,
            );
            conv(&mut specs, &format!("{p}.channel_fc1"), cr, c, 1, he(c), Init::Zeros);
            conv(
                &mut specs,
                &format!("{p}.channel_fc2"),
                c,
                cr,
                1,
                lecun(cr),
                Init::Zeros,
            );
        }

        let mut cin = c;
        for (i, &cout) in self.backend_channels.iter().enumerate() {
            conv(
                &mut specs,
                &format!("backend.conv{i}"),
                cout,
                cin,
                3,
                he(cin * 9),
                Init::Zeros,
            );
            cin = cout;
        }
        // softplus(-4.6) ~ 0.01 per output cell at start
        conv(
            &mut specs,
            "backend.out",
            1,
            cin,
            1,
            scaled(cin, 0.1),
            Init::Constant(-4.6),
        );
        specs
    }
}
