#![allow(dead_code)]

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use vidcount::losses::{density_loss_grad, density_loss_slice, seg_bce_loss_grad, seg_bce_loss_slice};
use vidcount::nn::config::{AblationMode, ModelConfig};
use vidcount::nn::layers::Tensor;
use vidcount::nn::nonlocal::{NonLocal, NonLocalMode};
use vidcount::nn::{Model, ModelInput, ModelParams, ResidualAttention, SegHead};
use vidcount::training::{batch_loss, Batch};

pub const FD_EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

/// Initial params with every tensor jittered so that no weight, bias or
/// gate sits at a special value.
pub fn jittered_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let n = Normal::new(0.0, 0.05).unwrap();
    for (_, t) in p.iter_mut() {
        t.mapv_inplace(|v| v + n.sample(&mut r));
    }
    p
}

/// Below this gradient norm the comparison is absolute: central
/// differences carry ~1e-10 of round-off per entry, so exactly-zero
/// gradients (e.g. the phi bias, which shifts softmax rows uniformly)
/// would otherwise show relative error ~1.
pub const GRAD_NORM_FLOOR: f64 = 1e-4;

/// `||a - b|| / max(||a|| + ||b||, GRAD_NORM_FLOOR)`.
pub fn rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(GRAD_NORM_FLOOR)
}

pub fn weighted_sum(out: &Tensor, r: &Tensor) -> f64 {
    out.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Central differences of `f` over every entry of `x`.
pub fn fd_tensor(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.raw_dim());
    let mut xp = x.clone();
    for (i, gi) in g.iter_mut().enumerate() {
        let idx = nth_index(x, i);
        let orig = xp[idx];
        xp[idx] = orig + FD_EPS;
        let up = f(&xp);
        xp[idx] = orig - FD_EPS;
        let down = f(&xp);
        xp[idx] = orig;
        *gi = (up - down) / (2.0 * FD_EPS);
    }
    g
}

fn nth_index(x: &Tensor, i: usize) -> [usize; 4] {
    let (_, c, h, w) = x.dim();
    [i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w]
}

/// Central differences of `f` over every parameter whose key starts with
/// one of `prefixes`.
pub fn fd_params(
    p: &ModelParams,
    prefixes: &[&str],
    mut f: impl FnMut(&ModelParams) -> f64,
) -> Vec<(String, ArrayD<f64>)> {
    let keys: Vec<String> = p
        .keys()
        .filter(|k| prefixes.iter().any(|pre| k.starts_with(pre)))
        .cloned()
        .collect();
    let mut q = p.clone();
    let mut out = Vec::new();
    for key in keys {
        let len = p.get(&key).len();
        let mut g = ArrayD::zeros(p.get(&key).raw_dim());
        for i in 0..len {
            let orig = q.get(&key).as_slice().unwrap()[i];
            q.get_mut(&key).as_slice_mut().unwrap()[i] = orig + FD_EPS;
            let up = f(&q);
            q.get_mut(&key).as_slice_mut().unwrap()[i] = orig - FD_EPS;
            let down = f(&q);
            q.get_mut(&key).as_slice_mut().unwrap()[i] = orig;
            g.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * FD_EPS);
        }
        out.push((key, g));
    }
    out
}

/// Worst relative error between analytic `grads` and numeric per-key
/// gradients, with the key it came from.
pub fn worst(grads: &ModelParams, numeric: &[(String, ArrayD<f64>)]) -> (String, f64) {
    numeric
        .iter()
        .map(|(k, g)| (k.clone(), rel_err(grads.get(k), g)))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig::tiny()
}

/// (label, relative error) for each block input and parameter group.
pub type GradCheck = Vec<(String, f64)>;

pub fn check_nonlocal(mode: NonLocalMode, seed: u64) -> GradCheck {
    let cfg = tiny_config();
    let p = jittered_params(&cfg, seed);
    let name = match mode {
        NonLocalMode::Spatial => "nl_spatial",
        NonLocalMode::Temporal => "nl_temporal",
    };
    let block = NonLocal::new(name, mode);
    let mut r = rng(seed);
    let x = rand_tensor((4, cfg.feature_channels(), 3, 3), &mut r, -1.0, 1.0);
    let weights = rand_tensor(x.dim(), &mut r, -1.0, 1.0);
    let window = cfg.temporal_window;

    let (_, trace) = block.forward(&p, &x, window).unwrap();
    let mut grads = ModelParams::zeros_like(&p);
    let dx = block.backward(&p, &trace, &weights, &mut grads);

    let loss = |p: &ModelParams, x: &Tensor| weighted_sum(&block.forward(p, x, window).unwrap().0, &weights);
    let num_dx = fd_tensor(&x, |x| loss(&p, x));
    let num_p = fd_params(&p, &[&format!("{name}.")], |p| loss(p, &x));
    let mut out = vec![(format!("{name} input"), rel_err(&dx.into_dyn(), &num_dx.into_dyn()))];
    let (k, e) = worst(&grads, &num_p);
    out.push((format!("{name} params (worst {k})"), e));
    out
}

pub fn check_attention(seed: u64) -> GradCheck {
    let cfg = tiny_config();
    let p = jittered_params(&cfg, seed);
    let block = ResidualAttention::new("refine0", cfg.feature_channels(), cfg.attention_hidden());
    let mut r = rng(seed);
    let f = rand_tensor((2, cfg.feature_channels(), 4, 4), &mut r, -1.0, 1.0);
    let g = rand_tensor((2, 1, 4, 4), &mut r, 0.05, 0.95);
    let weights = rand_tensor(f.dim(), &mut r, -1.0, 1.0);

    let (_, trace) = block.forward(&p, &f, &g);
    let mut grads = ModelParams::zeros_like(&p);
    let (df, dg) = block.backward(&p, &trace, &weights, &mut grads);

    let loss = |p: &ModelParams, f: &Tensor, g: &Tensor| weighted_sum(&block.forward(p, f, g).0, &weights);
    let num_df = fd_tensor(&f, |f| loss(&p, f, &g));
    let num_dg = fd_tensor(&g, |g| loss(&p, &f, g));
    let num_p = fd_params(&p, &["refine0."], |p| loss(p, &f, &g));
    let (k, e) = worst(&grads, &num_p);
    vec![
        ("refine features".into(), rel_err(&df.into_dyn(), &num_df.into_dyn())),
        ("refine guidance".into(), rel_err(&dg.into_dyn(), &num_dg.into_dyn())),
        (format!("refine params (worst {k})"), e),
    ]
}

pub fn check_seg_head(seed: u64) -> GradCheck {
    let cfg = tiny_config();
    let p = jittered_params(&cfg, seed);
    let head = SegHead::new("seg", cfg.feature_channels(), cfg.seg_hidden);
    let mut r = rng(seed);
    let f = rand_tensor((2, cfg.feature_channels(), 4, 4), &mut r, -1.0, 1.0);
    let prior = rand_tensor((2, 1, 4, 4), &mut r, 0.05, 0.95);
    let weights = rand_tensor((2, 1, 4, 4), &mut r, -1.0, 1.0);

    let (_, trace) = head.forward(&p, &f, &prior);
    let mut grads = ModelParams::zeros_like(&p);
    let (df, dprior) = head.backward(&p, &trace, &weights, &mut grads);

    let loss = |p: &ModelParams, f: &Tensor, q: &Tensor| weighted_sum(&head.forward(p, f, q).0, &weights);
    let num_df = fd_tensor(&f, |f| loss(&p, f, &prior));
    let num_dq = fd_tensor(&prior, |q| loss(&p, &f, q));
    let num_p = fd_params(&p, &["seg."], |p| loss(p, &f, &prior));
    let (k, e) = worst(&grads, &num_p);
    vec![
        ("seg features".into(), rel_err(&df.into_dyn(), &num_df.into_dyn())),
        ("seg prior".into(), rel_err(&dprior.into_dyn(), &num_dq.into_dyn())),
        (format!("seg params (worst {k})"), e),
    ]
}

pub fn check_backend(seed: u64) -> GradCheck {
    let cfg = tiny_config();
    let p = jittered_params(&cfg, seed);
    let model = Model::new(cfg.clone()).unwrap();
    let backend = model.backend();
    let mut r = rng(seed);
    let x = rand_tensor((2, cfg.feature_channels(), 4, 4), &mut r, 0.0, 1.0);
    let weights = rand_tensor((2, 1, 4, 4), &mut r, -1.0, 1.0);

    let (_, trace) = backend.forward(&p, x.clone());
    let mut grads = ModelParams::zeros_like(&p);
    let dx = backend.backward(&p, &trace, weights.clone(), &mut grads, true).unwrap();

    let loss = |p: &ModelParams, x: &Tensor| weighted_sum(&backend.infer(p, x.clone()), &weights);
    let num_dx = fd_tensor(&x, |x| loss(&p, x));
    let num_p = fd_params(&p, &["backend."], |p| loss(p, &x));
    let (k, e) = worst(&grads, &num_p);
    vec![
        ("backend input".into(), rel_err(&dx.into_dyn(), &num_dx.into_dyn())),
        (format!("backend params (worst {k})"), e),
    ]
}

pub fn check_losses(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let n = 37;
    let pred: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    let gt: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    let m: Vec<f64> = (0..n).map(|_| r.random_range(0.02..0.98)).collect();
    let y: Vec<f64> = (0..n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();

    let fd = |v: &[f64], f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                let mut a = v.to_vec();
                a[i] += FD_EPS;
                let up = f(&a);
                a[i] -= 2.0 * FD_EPS;
                (up - f(&a)) / (2.0 * FD_EPS)
            })
            .collect()
    };
    let as_arr = |v: Vec<f64>| ArrayD::from_shape_vec(IxDyn(&[v.len()]), v).unwrap();
    let num_den = fd(&pred, &|p| density_loss_slice(p, &gt).unwrap());
    let num_seg = fd(&m, &|p| seg_bce_loss_slice(p, &y).unwrap());
    vec![
        (
            "density loss".into(),
            rel_err(&as_arr(density_loss_grad(&pred, &gt)), &as_arr(num_den)),
        ),
        (
            "segmentation loss".into(),
            rel_err(&as_arr(seg_bce_loss_grad(&m, &y)), &as_arr(num_seg)),
        ),
    ]
}

/// Full objective on a 2-frame 16x16 window, all parameters.
pub fn check_end_to_end(mode: AblationMode, seed: u64) -> GradCheck {
    let cfg = ModelConfig {
        variant: mode,
        ..tiny_config()
    };
    let model = Model::new(cfg.clone()).unwrap();
    let p = jittered_params(&cfg, seed);
    let mut r = rng(seed);
    let s = cfg.output_stride();
    let batch = Batch {
        input: ModelInput {
            frames: rand_tensor((cfg.temporal_window, 1, 16, 16), &mut r, 0.0, 1.0),
            prior: rand_tensor((1, 1, 16 / s, 16 / s), &mut r, 0.05, 0.95),
        },
        density: rand_tensor((1, 1, 16 / s, 16 / s), &mut r, 0.0, 0.5),
        mask: Tensor::from_shape_fn((1, 1, 16 / s, 16 / s), |(_, _, y, x)| ((x + y) % 2) as f64),
        counts: vec![1.0],
    };
    let lambda = 0.7;
    let objective = |p: &ModelParams| {
        let (out, _) = model.forward(p, &batch.input).unwrap();
        batch_loss(&out.density, out.guidance.as_ref(), &batch, lambda)
            .unwrap()
            .0
            .l_total
    };
    let (out, trace) = model.forward(&p, &batch.input).unwrap();
    let (_, d_den, d_seg) = batch_loss(&out.density, out.guidance.as_ref(), &batch, lambda).unwrap();
    let grads = model.backward(&p, &trace, &d_den, d_seg.as_ref());
    let num = fd_params(&p, &[""], objective);

    // parameters of disabled blocks must get exactly zero gradient
    let mut inactive = Vec::new();
    if !mode.uses_nonlocal() {
        inactive.push("nl_");
    }
    if !mode.uses_guidance() {
        inactive.extend(["seg.", "refine"]);
    }
    let leaked: Vec<&String> = num
        .iter()
        .map(|(k, _)| k)
        .filter(|k| inactive.iter().any(|pre| k.starts_with(pre)))
        .filter(|k| grads.get(k).iter().any(|&v| v != 0.0))
        .collect();
    assert!(leaked.is_empty(), "gradient leaked into inactive parameters {leaked:?}");

    let all_analytic: Vec<f64> = num.iter().flat_map(|(k, _)| grads.get(k).iter().copied()).collect();
    let all_numeric: Vec<f64> = num.iter().flat_map(|(_, g)| g.iter().copied()).collect();
    let n = all_numeric.len();
    let global = rel_err(
        &ArrayD::from_shape_vec(IxDyn(&[n]), all_analytic).unwrap(),
        &ArrayD::from_shape_vec(IxDyn(&[n]), all_numeric).unwrap(),
    );
    let (k, e) = worst(&grads, &num);
    vec![
        (format!("end-to-end {} all params", mode.name()), global),
        (format!("end-to-end {} worst tensor {k}", mode.name()), e),
    ]
}

/// Explicit per-position evaluation of the embedded-Gaussian block:
/// `z_i = W_z * sum_j softmax_j(theta_i . phi_j) g_j + b_z + x_i`,
/// positions grouped per frame (spatial) or per window (temporal).
pub fn nonlocal_oracle(p: &ModelParams, name: &str, x: &Tensor, group_frames: usize) -> Tensor {
    let (n, c, h, w) = x.dim();
    let proj = |which: &str| -> (Array2<f64>, Vec<f64>) {
        let wt = p.get(&format!("{name}.{which}.weight"));
        let (o, i) = (wt.shape()[0], wt.shape()[1]);
        let m = Array2::from_shape_fn((o, i), |(a, b)| wt[[a, b, 0, 0]]);
        (m, p.get(&format!("{name}.{which}.bias")).iter().copied().collect())
    };
    let (wt, bt) = proj("theta");
    let (wp, bp) = proj("phi");
    let (wg, bg) = proj("g");
    let (wz, bz) = proj("out");
    let ci = wt.nrows();
    let apply = |m: &Array2<f64>, b: &[f64], v: &[f64]| -> Vec<f64> {
        (0..m.nrows())
            .map(|o| b[o] + (0..m.ncols()).map(|i| m[[o, i]] * v[i]).sum::<f64>())
            .collect()
    };

    let mut z = x.clone();
    for g0 in (0..n).step_by(group_frames) {
        let positions: Vec<(usize, usize, usize)> = (g0..g0 + group_frames)
            .flat_map(|t| (0..h).flat_map(move |yy| (0..w).map(move |xx| (t, yy, xx))))
            .collect();
        let feat = |&(t, yy, xx): &(usize, usize, usize)| -> Vec<f64> { (0..c).map(|ch| x[[t, ch, yy, xx]]).collect() };
        for pi in &positions {
            let th = apply(&wt, &bt, &feat(pi));
            let mut logits = Vec::with_capacity(positions.len());
            for pj in &positions {
                let ph = apply(&wp, &bp, &feat(pj));
                logits.push((0..ci).map(|k| th[k] * ph[k]).sum::<f64>());
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let zsum: f64 = e.iter().sum();
            let mut y = vec![0.0; ci];
            for (pj, ej) in positions.iter().zip(&e) {
                let gj = apply(&wg, &bg, &feat(pj));
                for k in 0..ci {
                    y[k] += ej / zsum * gj[k];
                }
            }
            let out = apply(&wz, &bz, &y);
            for ch in 0..c {
                z[[pi.0, ch, pi.1, pi.2]] += out[ch];
            }
        }
    }
    z
}

/// Config whose non-local blocks see 4 feature channels.
pub fn four_channel_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![4; 10],
        ..tiny_config()
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn axis_sum(t: &Tensor, b: usize) -> f64 {
    t.index_axis(Axis(0), b).sum()
}
