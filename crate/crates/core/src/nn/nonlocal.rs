//! Embedded-Gaussian non-local block with residual output:
//!
//! ```text
//! y = softmax(theta(x)^T phi(x)) g(x)      (rows over all positions j)
//! z = W_z y + x
//! ```
//!
//! `theta`, `phi`, `g` and `W_z` are 1x1 projections. In spatial mode the
//! positions are the H*W pixels of one frame; in temporal mode they are
//! the T*H*W pixels of a whole window, ordered `(t, y, x)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Ix1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Tensor;
use crate::nn::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonLocalMode {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone)]
struct Projection {
    weight: String,
    bias: String,
}

impl Projection {
    fn new(name: &str) -> Self {
        Projection {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        }
    }

    fn matrix<'a>(&self, p: &'a ModelParams) -> ArrayView2<'a, f64> {
        let w = p.get(&self.weight);
        let (o, i) = (w.shape()[0], w.shape()[1]);
        w.view().into_shape_with_order((o, i)).expect("1x1 weight")
    }

    fn bias<'a>(&self, p: &'a ModelParams) -> ArrayView1<'a, f64> {
        p.get(&self.bias).view().into_dimensionality::<Ix1>().expect("1-D bias")
    }

    fn apply(&self, p: &ModelParams, x: &Array2<f64>) -> Array2<f64> {
        let mut y = self.matrix(p).dot(x);
        y += &self.bias(p).insert_axis(Axis(1));
        y
    }
}

#[derive(Debug, Clone)]
pub struct NonLocal {
    pub mode: NonLocalMode,
    theta: Projection,
    phi: Projection,
    g: Projection,
    out: Projection,
}

/// Intermediates of one position group.
#[derive(Debug, Clone)]
pub struct GroupCache {
    x: Array2<f64>,
    theta: Array2<f64>,
    phi: Array2<f64>,
    g: Array2<f64>,
    attn: Array2<f64>,
    y: Array2<f64>,
}

impl GroupCache {
    /// Softmax affinities, one row per output position.
    pub fn attention(&self) -> &Array2<f64> {
        &self.attn
    }

    /// Pre-residual aggregate `y` (`[C_inner, P]`).
    pub fn aggregate(&self) -> &Array2<f64> {
        &self.y
    }
}

#[derive(Debug)]
pub struct NonLocalTrace {
    groups: Vec<GroupCache>,
    frames_per_group: usize,
}

impl NonLocalTrace {
    pub fn groups(&self) -> &[GroupCache] {
        &self.groups
    }
}

struct GroupGrads {
    dx: Array2<f64>,
    params: [(Array2<f64>, Array1<f64>); 4],
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut a = s.clone();
    for mut row in a.outer_iter_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    a
}

impl NonLocal {
    pub fn new(name: &str, mode: NonLocalMode) -> Self {
        NonLocal {
            mode,
            theta: Projection::new(&format!("{name}.theta")),
            phi: Projection::new(&format!("{name}.phi")),
            g: Projection::new(&format!("{name}.g")),
            out: Projection::new(&format!("{name}.out")),
        }
    }

    /// One group of positions, `x` is `[C, P]`.
    pub fn forward_group(&self, p: &ModelParams, x: Array2<f64>) -> (Array2<f64>, GroupCache) {
        let theta = self.theta.apply(p, &x);
        let phi = self.phi.apply(p, &x);
        let g = self.g.apply(p, &x);
        let attn = softmax_rows(&theta.t().dot(&phi));
        let y = g.dot(&attn.t());
        let z = self.out.apply(p, &y) + &x;
        (
            z,
            GroupCache {
                x,
                theta,
                phi,
                g,
                attn,
                y,
            },
        )
    }

    fn backward_group(&self, p: &ModelParams, c: &GroupCache, dz: &Array2<f64>) -> GroupGrads {
        let wz = self.out.matrix(p);
        let d_wz = dz.dot(&c.y.t());
        let d_bz = dz.sum_axis(Axis(1));
        let dy = wz.t().dot(dz);

        // y = g A^T
        let dg = dy.dot(&c.attn);
        let da = dy.t().dot(&c.g);
        // softmax rows
        let row_dot = (&da * &c.attn).sum_axis(Axis(1));
        let ds = &c.attn * &(&da - &row_dot.insert_axis(Axis(1)));
        // s = theta^T phi
        let dtheta = c.phi.dot(&ds.t());
        let dphi = c.theta.dot(&ds);

        let mut dx = dz.clone();
        let mut proj_grad = |proj: &Projection, dout: &Array2<f64>| {
            dx += &proj.matrix(p).t().dot(dout);
            (dout.dot(&c.x.t()), dout.sum_axis(Axis(1)))
        };
        let gt = proj_grad(&self.theta, &dtheta);
        let gp = proj_grad(&self.phi, &dphi);
        let gg = proj_grad(&self.g, &dg);
        GroupGrads {
            dx,
            params: [gt, gp, gg, (d_wz, d_bz)],
        }
    }

    fn frames_per_group(&self, window: usize) -> usize {
        match self.mode {
            NonLocalMode::Spatial => 1,
            NonLocalMode::Temporal => window,
        }
    }

    /// Applies the block to `[N, C, H, W]` where N is a multiple of `window`
    /// (consecutive frames of one sample are adjacent).
    pub fn forward(&self, p: &ModelParams, x: &Tensor, window: usize) -> Result<(Tensor, NonLocalTrace)> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("non-local block input".into()));
        }
        let (n, c, h, w) = x.dim();
        let fpg = self.frames_per_group(window);
        if n % fpg != 0 {
            return Err(Error::Shape(format!("{n} frames do not split into windows of {fpg}")));
        }
        let results: Vec<(Array2<f64>, GroupCache)> = (0..n / fpg)
            .into_par_iter()
            .map(|gi| self.forward_group(p, gather(x, gi * fpg, fpg)))
            .collect();
        let mut out = Tensor::zeros((n, c, h, w));
        let mut groups = Vec::with_capacity(results.len());
        for (gi, (z, cache)) in results.into_iter().enumerate() {
            scatter(&mut out, gi * fpg, fpg, &z);
            groups.push(cache);
        }
        Ok((
            out,
            NonLocalTrace {
                groups,
                frames_per_group: fpg,
            },
        ))
    }

    pub fn backward(&self, p: &ModelParams, trace: &NonLocalTrace, dz: &Tensor, grads: &mut ModelParams) -> Tensor {
        let fpg = trace.frames_per_group;
        let results: Vec<GroupGrads> = trace
            .groups
            .par_iter()
            .enumerate()
            .map(|(gi, cache)| self.backward_group(p, cache, &gather(dz, gi * fpg, fpg)))
            .collect();
        let mut dx = Tensor::zeros(dz.raw_dim());
        let projs = [&self.theta, &self.phi, &self.g, &self.out];
        for (gi, r) in results.into_iter().enumerate() {
            scatter(&mut dx, gi * fpg, fpg, &r.dx);
            for (proj, (dw, db)) in projs.iter().zip(r.params) {
                let shape = p.get(&proj.weight).raw_dim();
                grads.accumulate(&proj.weight, &dw.into_shape_with_order(shape).expect("shape"));
                grads.accumulate(&proj.bias, &db.into_dyn());
            }
        }
        dx
    }
}

/// Frames `start..start+count` as a `[C, count*H*W]` matrix.
fn gather(x: &Tensor, start: usize, count: usize) -> Array2<f64> {
    let (_, c, h, w) = x.dim();
    let hw = h * w;
    let mut m = Array2::zeros((c, count * hw));
    for t in 0..count {
        let frame = x.index_axis(Axis(0), start + t);
        let flat = frame.into_shape_with_order((c, hw)).expect("contiguous frame");
        m.slice_mut(ndarray::s![.., t * hw..(t + 1) * hw]).assign(&flat);
    }
    m
}

fn scatter(out: &mut Tensor, start: usize, count: usize, m: &Array2<f64>) {
    let (_, c, h, w) = out.dim();
    let hw = h * w;
    for t in 0..count {
        let block = m.slice(ndarray::s![.., t * hw..(t + 1) * hw]);
        let mut frame = out.index_axis_mut(Axis(0), start + t);
        frame.assign(&block.to_shape((c, h, w)).expect("block reshapes"));
    }
}
