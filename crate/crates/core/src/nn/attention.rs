//! Guidance-driven blocks: the segmentation head that turns features plus
//! the motion prior into a person-region map, and the residual attention
//! block that refines features with it:
//!
//! ```text
//! out = F + B(F) * A_s(G) * A_c(F)
//! ```
//!
//! `B` is conv3x3-relu-conv3x3, `A_s` an affine 3x3 map of the guidance
//! (broadcast over channels) and `A_c` a squeeze-excitation vector from
//! globally pooled features (broadcast over space).

use ndarray::{Axis, Zip};

use crate::nn::layers::{
    concat_channels, sigmoid, sigmoid_backward, split_channels, Conv2d, Op, SeqTrace, Sequential, Tensor,
};
use crate::nn::params::ModelParams;

#[derive(Debug, Clone)]
pub struct SegHead {
    pub channels: usize,
    stack: Sequential,
}

#[derive(Debug)]
pub struct SegTrace {
    stack: SeqTrace,
    out: Tensor,
}

impl SegHead {
    pub fn new(name: &str, channels: usize, hidden: usize) -> Self {
        SegHead {
            channels,
            stack: Sequential {
                ops: vec![
                    Op::Conv(Conv2d::new(&format!("{name}.conv0"), channels + 1, hidden, 3)),
                    Op::Relu,
                    Op::Conv(Conv2d::new(&format!("{name}.conv1"), hidden, 1, 1)),
                ],
            },
        }
    }

    /// `features` `[B, C, h, w]`, `prior` `[B, 1, h, w]` -> probabilities `[B, 1, h, w]`.
    pub fn forward(&self, p: &ModelParams, features: &Tensor, prior: &Tensor) -> (Tensor, SegTrace) {
        let (logits, stack) = self.stack.forward(p, concat_channels(features, prior));
        let out = sigmoid(&logits);
        (out.clone(), SegTrace { stack, out })
    }

    /// Returns gradients for `(features, prior)`.
    pub fn backward(
        &self,
        p: &ModelParams,
        trace: &SegTrace,
        dout: &Tensor,
        grads: &mut ModelParams,
    ) -> (Tensor, Tensor) {
        let dlogits = sigmoid_backward(&trace.out, dout);
        let dcat = self
            .stack
            .backward(p, &trace.stack, dlogits, grads, true)
            .expect("input gradient requested");
        split_channels(&dcat, self.channels)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualAttention {
    branch: Sequential,
    spatial: Conv2d,
    channel: Sequential,
}

#[derive(Debug)]
pub struct AttentionTrace {
    branch: SeqTrace,
    branch_out: Tensor,
    guidance: Tensor,
    spatial_att: Tensor,
    channel: SeqTrace,
    channel_att: Tensor,
}

impl AttentionTrace {
    pub fn spatial_attention(&self) -> &Tensor {
        &self.spatial_att
    }

    pub fn channel_attention(&self) -> &Tensor {
        &self.channel_att
    }
}

impl ResidualAttention {
    pub fn new(name: &str, channels: usize, hidden: usize) -> Self {
        let conv = |suffix: &str, cin, cout, k| Conv2d::new(&format!("{name}.{suffix}"), cin, cout, k);
        ResidualAttention {
            branch: Sequential {
                ops: vec![
                    Op::Conv(conv("branch0", channels, channels, 3)),
                    Op::Relu,
                    Op::Conv(conv("branch1", channels, channels, 3)),
                ],
            },
            spatial: conv("spatial", 1, 1, 3),
            channel: Sequential {
                ops: vec![
                    Op::Conv(conv("channel_fc1", channels, hidden, 1)),
                    Op::Relu,
                    Op::Conv(conv("channel_fc2", hidden, channels, 1)),
                ],
            },
        }
    }

    pub fn forward(&self, p: &ModelParams, features: &Tensor, guidance: &Tensor) -> (Tensor, AttentionTrace) {
        let (branch_out, branch) = self.branch.forward(p, features.clone());
        let spatial_att = self.spatial.forward(p, guidance);
        let pooled = features
            .mean_axis(Axis(3))
            .and_then(|m| m.mean_axis(Axis(2)))
            .expect("non-empty spatial dims")
            .insert_axis(Axis(2))
            .insert_axis(Axis(3));
        let (ch_logits, channel) = self.channel.forward(p, pooled);
        let channel_att = sigmoid(&ch_logits);

        let mut out = features.clone();
        Zip::indexed(&mut out)
            .and(&branch_out)
            .for_each(|(b, c, y, x), o, &bo| {
                *o += bo * spatial_att[[b, 0, y, x]] * channel_att[[b, c, 0, 0]];
            });
        (
            out,
            AttentionTrace {
                branch,
                branch_out,
                guidance: guidance.clone(),
                spatial_att,
                channel,
                channel_att,
            },
        )
    }

    /// Returns gradients for `(features, guidance)`.
    pub fn backward(
        &self,
        p: &ModelParams,
        t: &AttentionTrace,
        dout: &Tensor,
        grads: &mut ModelParams,
    ) -> (Tensor, Tensor) {
        let (nb, nc, h, w) = dout.dim();
        let mut d_branch = Tensor::zeros(dout.raw_dim());
        let mut d_spatial = Tensor::zeros(t.spatial_att.raw_dim());
        let mut d_channel = Tensor::zeros(t.channel_att.raw_dim());
        for b in 0..nb {
            for c in 0..nc {
                let ac = t.channel_att[[b, c, 0, 0]];
                let mut acc_c = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let g = dout[[b, c, y, x]];
                        let bo = t.branch_out[[b, c, y, x]];
                        let a_s = t.spatial_att[[b, 0, y, x]];
                        d_branch[[b, c, y, x]] = g * a_s * ac;
                        d_spatial[[b, 0, y, x]] += g * bo * ac;
                        acc_c += g * bo * a_s;
                    }
                }
                d_channel[[b, c, 0, 0]] = acc_c;
            }
        }

        let mut df = dout.clone();
        df += &self
            .branch
            .backward(p, &t.branch, d_branch, grads, true)
            .expect("input gradient requested");

        let dlogits = sigmoid_backward(&t.channel_att, &d_channel);
        let dpooled = self
            .channel
            .backward(p, &t.channel, dlogits, grads, true)
            .expect("input gradient requested");
        let inv = 1.0 / (h * w) as f64;
        Zip::indexed(&mut df).for_each(|(b, c, _, _), d| *d += dpooled[[b, c, 0, 0]] * inv);

        let dg = self
            .spatial
            .backward(p, &t.guidance, &d_spatial, grads, true)
            .expect("input gradient requested");
        (df, dg)
    }
}
