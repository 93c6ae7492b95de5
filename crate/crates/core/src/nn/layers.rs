//! Convolution, rectifier and pooling with explicit backward passes.
//!
//! Activations are `[N, C, H, W]` arrays. Work is split per image and
//! weight gradients are reduced in image order, so results do not depend
//! on the rayon pool size.

use ndarray::{s, Array2, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Zip};
use rayon::prelude::*;

use crate::nn::params::ModelParams;

pub type Tensor = Array4<f64>;

/// Stride-1, same-padded 2D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize) -> Self {
        debug_assert!(k % 2 == 1);
        Conv2d {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            cin,
            cout,
            k,
        }
    }

    fn weight_matrix<'a>(&self, p: &'a ModelParams) -> ArrayView2<'a, f64> {
        p.get(&self.weight)
            .view()
            .into_shape_with_order((self.cout, self.cin * self.k * self.k))
            .expect("conv weight is contiguous")
    }

    fn bias<'a>(&self, p: &'a ModelParams) -> ndarray::ArrayView1<'a, f64> {
        p.get(&self.bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias is 1-D")
    }

    pub fn forward(&self, p: &ModelParams, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "{}: input channels", self.weight);
        let wm = self.weight_matrix(p);
        let b = self.bias(p);
        let mut out = Tensor::zeros((n, self.cout, h, w));
        Zip::from(out.outer_iter_mut())
            .and(x.outer_iter())
            .par_for_each(|mut o, xi| {
                let cols = im2col(xi, self.k);
                let y = wm.dot(&cols);
                let mut o2 = o
                    .view_mut()
                    .into_shape_with_order((self.cout, h * w))
                    .expect("contiguous");
                o2.assign(&y);
                for (mut row, &bv) in o2.outer_iter_mut().zip(b.iter()) {
                    row += bv;
                }
            });
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        p: &ModelParams,
        x: &Tensor,
        dy: &Tensor,
        grads: &mut ModelParams,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (n, _, h, w) = x.dim();
        let wm = self.weight_matrix(p);
        let kk = self.cin * self.k * self.k;
        let per_image: Vec<(Array2<f64>, Vec<f64>, Option<ndarray::Array3<f64>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = im2col(x.index_axis(Axis(0), i), self.k);
                let dyi = dy
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((self.cout, h * w))
                    .expect("contiguous")
                    .to_owned();
                let dw = dyi.dot(&cols.t());
                let db = dyi.sum_axis(Axis(1)).to_vec();
                let dx = need_input_grad.then(|| col2im(&wm.t().dot(&dyi), self.cin, h, w, self.k));
                (dw, db, dx)
            })
            .collect();

        let mut dw_total = Array2::<f64>::zeros((self.cout, kk));
        let mut db_total = vec![0.0; self.cout];
        for (dw, db, _) in &per_image {
            dw_total += dw;
            for (t, v) in db_total.iter_mut().zip(db) {
                *t += v;
            }
        }
        let shape = p.get(&self.weight).raw_dim();
        grads.accumulate(
            &self.weight,
            &dw_total.into_shape_with_order(shape).expect("weight shape"),
        );
        grads.accumulate(&self.bias, &ArrayD::from_shape_vec(vec![self.cout], db_total).unwrap());

        if !need_input_grad {
            return None;
        }
        let mut dx = Tensor::zeros(x.raw_dim());
        for (i, (_, _, dxi)) in per_image.into_iter().enumerate() {
            dx.index_axis_mut(Axis(0), i).assign(&dxi.expect("requested"));
        }
        Some(dx)
    }
}

/// `[C, H, W]` -> `[C*k*k, H*W]` with zero padding `k/2`.
fn im2col(x: ArrayView3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    if k == 1 {
        return x.to_owned().into_shape_with_order((c, h * w)).expect("contiguous");
    }
    let pad = (k / 2) as isize;
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("row is contiguous");
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &xs[(ci * h + sy as usize) * w..][..w];
                    let out = &mut dst[y * w..][..w];
                    let dx = kx as isize - pad;
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    for xo in x0..x1 {
                        out[xo] = src[(xo as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> ndarray::Array3<f64> {
    if k == 1 {
        return cols.to_owned().into_shape_with_order((c, h, w)).expect("contiguous");
    }
    let pad = (k / 2) as isize;
    let mut x = ndarray::Array3::<f64>::zeros((c, h, w));
    let xs = x.as_slice_mut().expect("owned standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                let src = row.as_slice().expect("row is contiguous");
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut xs[(ci * h + sy as usize) * w..][..w];
                    let inp = &src[y * w..][..w];
                    let dx = kx as isize - pad;
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    for xo in x0..x1 {
                        dst[(xo as isize + dx) as usize] += inp[xo];
                    }
                }
            }
        }
    }
    x
}

pub fn relu(x: &Tensor) -> Tensor {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a rectifier given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p())
}

/// Backward of softplus given its output: `dy/dx = sigmoid(x) = 1 - exp(-y)`.
pub fn softplus_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &o| *d *= -(-o).exp_m1());
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.mapv(crate::motion::sigmoid)
}

/// Gradient through a logistic sigmoid given its output.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &s| *d *= s * (1.0 - s));
    dx
}

/// 2x2 stride-2 max pooling. Returns the output and the winning offset
/// (0..4, row-major within the window) per output cell; ties go to the
/// first offset.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros((n, c, ho, wo));
    let mut arg = vec![0u8; n * c * ho * wo];
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let v = x[[b, ch, 2 * y + (k / 2) as usize, 2 * xo + (k % 2) as usize]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out[[b, ch, y, xo]] = best;
                    arg[idx] = best_k;
                    idx += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(arg: &[u8], input_dim: (usize, usize, usize, usize), dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_dim);
    let (n, c, ho, wo) = dy.dim();
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let k = arg[idx];
                    dx[[b, ch, 2 * y + (k / 2) as usize, 2 * xo + (k % 2) as usize]] += dy[[b, ch, y, xo]];
                    idx += 1;
                }
            }
        }
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching N, H, W")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    (
        x.slice(s![.., ..first, .., ..]).to_owned(),
        x.slice(s![.., first.., .., ..]).to_owned(),
    )
}

#[derive(Debug, Clone)]
pub enum Op {
    Conv(Conv2d),
    Relu,
    Softplus,
    MaxPool,
}

#[derive(Debug)]
enum Saved {
    Input(Tensor),
    Output(Tensor),
    Pool(Vec<u8>, (usize, usize, usize, usize)),
}

/// A straight chain of [`Op`]s.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub ops: Vec<Op>,
}

#[derive(Debug, Default)]
pub struct SeqTrace {
    saved: Vec<Saved>,
}

impl Sequential {
    pub fn forward(&self, p: &ModelParams, x: Tensor) -> (Tensor, SeqTrace) {
        let mut trace = SeqTrace::default();
        let mut cur = x;
        for op in &self.ops {
            cur = match op {
                Op::Conv(c) => {
                    let y = c.forward(p, &cur);
                    trace.saved.push(Saved::Input(cur));
                    y
                }
                Op::Relu => {
                    let y = relu(&cur);
                    trace.saved.push(Saved::Output(y.clone()));
                    y
                }
                Op::Softplus => {
                    let y = softplus(&cur);
                    trace.saved.push(Saved::Output(y.clone()));
                    y
                }
                Op::MaxPool => {
                    let (y, arg) = maxpool2(&cur);
                    trace.saved.push(Saved::Pool(arg, cur.dim()));
                    y
                }
            };
        }
        (cur, trace)
    }

    pub fn infer(&self, p: &ModelParams, x: Tensor) -> Tensor {
        let mut cur = x;
        for op in &self.ops {
            cur = match op {
                Op::Conv(c) => c.forward(p, &cur),
                Op::Relu => relu(&cur),
                Op::Softplus => softplus(&cur),
                Op::MaxPool => maxpool2(&cur).0,
            };
        }
        cur
    }

    /// Backpropagates `dy`. The input gradient is skipped (None) when
    /// `need_input_grad` is false.
    pub fn backward(
        &self,
        p: &ModelParams,
        trace: &SeqTrace,
        dy: Tensor,
        grads: &mut ModelParams,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let mut cur = dy;
        for (i, (op, saved)) in self.ops.iter().zip(&trace.saved).enumerate().rev() {
            let first = i == 0;
            cur = match (op, saved) {
                (Op::Conv(c), Saved::Input(x)) => c.backward(p, x, &cur, grads, need_input_grad || !first)?,
                (Op::Relu, Saved::Output(y)) => relu_backward(y, &cur),
                (Op::Softplus, Saved::Output(y)) => softplus_backward(y, &cur),
                (Op::MaxPool, Saved::Pool(arg, dim)) => maxpool2_backward(arg, *dim, &cur),
                _ => unreachable!("trace recorded by the same chain"),
            };
        }
        Some(cur)
    }
}
