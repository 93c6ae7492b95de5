//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when a hard criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidcount::annotations::{render_density, ClipAnnotation, FrameAnnotation, HeadPoint, KernelSpec};
use vidcount::grid::{DensityMap, Grid, Image, SegmentationMask};
use vidcount::losses::{evaluate, mask_iou};
use vidcount::motion::{estimate_flow, FlowEstimatorSpec, FlowField};
use vidcount::nn::nonlocal::softmax_rows;
use vidcount::nn::{AblationMode, Checkpoint, Model, ModelConfig, NonLocal, NonLocalMode};
use vidcount::synth::{generate_clip, PeopleCount, SynthSceneConfig};
use vidcount::training::{
    evaluate_dataset, fit, fit_steps, make_batch, median_mae, run_ablation, samples_from_synth, DataConfig, DataSource,
    ExperimentConfig, LogRecord, Sample, TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ------------------------------------------------------------ 1: conservation

fn gt_conservation() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (w, h) = (r.random_range(8..=64), r.random_range(8..=64));
        let n = r.random_range(0..=20);
        let heads = (0..n)
            .map(|_| HeadPoint::new(r.random_range(0.0..(w - 1) as f64), r.random_range(0.0..(h - 1) as f64)))
            .collect();
        let frame = FrameAnnotation::new(i, format!("frames/{i:06}.png"), heads);
        for spec in [KernelSpec::fixed(4.0), KernelSpec::adaptive(0.3, 3)] {
            let d = render_density(&frame, &spec, w, h).unwrap();
            worst = worst.max((d.sum() - n as f64).abs() / (n.max(1) as f64));
        }
    }
    let took = start.elapsed();
    outcome(
        worst < 1e-3 && took < Duration::from_secs(30),
        format!("worst relative count error {worst:.2e} in {took:.2?}"),
    )
}

// ---------------------------------------------------------- 2: attention core

fn nonlocal_equivalence() -> Outcome {
    let cfg = four_channel_config();
    let mut r = rng(202);
    let (mut worst, mut worst_row) = (0.0f64, 0.0f64);
    for case in 0..50u64 {
        let p = jittered_params(&cfg, case);
        let temporal = case % 2 == 1;
        let (mode, name) = if temporal {
            (NonLocalMode::Temporal, "nl_temporal")
        } else {
            (NonLocalMode::Spatial, "nl_spatial")
        };
        let n = if temporal { 2 } else { r.random_range(1..=2) };
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let x = rand_tensor((n, 4, h, w), &mut r, -2.0, 2.0);
        let (z, trace) = NonLocal::new(name, mode).forward(&p, &x, 2).unwrap();
        worst = worst.max(max_abs_diff(
            &z,
            &nonlocal_oracle(&p, name, &x, if temporal { 2 } else { 1 }),
        ));
        for g in trace.groups() {
            for row in g.attention().outer_iter() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
            }
        }
    }
    let s = ndarray::Array2::from_shape_fn((6, 9), |(i, j)| (i as f64 - 3.0) * 40.0 + j as f64);
    for row in softmax_rows(&s).outer_iter() {
        worst_row = worst_row.max((row.sum() - 1.0).abs());
    }
    outcome(
        worst < 1e-6 && worst_row < 1e-6,
        format!("max deviation from loop oracle {worst:.2e}, worst softmax row error {worst_row:.2e}"),
    )
}

// ------------------------------------------------------------ 3: gradients

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut block = Vec::new();
    block.extend(check_nonlocal(NonLocalMode::Spatial, 1));
    block.extend(check_nonlocal(NonLocalMode::Temporal, 2));
    block.extend(check_attention(3));
    block.extend(check_seg_head(5));
    block.extend(check_backend(6));
    block.extend(check_losses(7));
    let mut full = Vec::new();
    for mode in AblationMode::ALL {
        full.extend(check_end_to_end(mode, 8));
    }
    let max_of = |v: &[(String, f64)]| v.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap_or_default();
    let (bl, be) = max_of(&block);
    let (fl, fe) = max_of(&full);
    let took = start.elapsed();
    outcome(
        be < 1e-4 && fe < 1e-3 && took < Duration::from_secs(300),
        format!("worst block {bl} {be:.2e}, worst end-to-end {fl} {fe:.2e}, {took:.2?}"),
    )
}

// ------------------------------------------------------------ 4: toy overfit

fn toy_overfit() -> Outcome {
    let start = Instant::now();
    let clip = generate_clip(&SynthSceneConfig {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let model_cfg = ModelConfig::tiny();
    let samples = samples_from_synth(&clip, &DataConfig::default(), &model_cfg).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-4,
        ablation_mode: AblationMode::MotionGuided,
        ..Default::default()
    };
    let (ck, _) = fit_steps(&samples, &model_cfg, &cfg, 2000).unwrap();
    let mae = evaluate_dataset(&samples, &ck).unwrap().mae;

    let model = Model::new(ck.config.clone()).unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = make_batch(&refs, &model.config).unwrap();
    let (out, _) = model.forward(&ck.params, &batch.input).unwrap();
    let guidance = out.guidance.expect("motion-guided mode predicts a mask");
    let iou = mask_iou(guidance.as_slice().unwrap(), batch.mask.as_slice().unwrap(), 0.5).unwrap();
    let took = start.elapsed();
    outcome(
        mae < 0.5 && iou >= 0.5 && took < Duration::from_secs(900),
        format!("{} samples, MAE {mae:.4}, IoU {iou:.3}, {took:.2?}", samples.len()),
    )
}

// ------------------------------------------------------------ 5: ablation

fn ablation_direction() -> Outcome {
    let start = Instant::now();
    let model_cfg = ModelConfig::tiny();
    let data = DataConfig::default();
    let clip = |seed, n_frames| {
        generate_clip(&SynthSceneConfig {
            seed,
            n_frames,
            ..Default::default()
        })
        .unwrap()
    };
    let train: Vec<Sample> = (0..6u64)
        .flat_map(|s| samples_from_synth(&clip(11 + 7 * s, 9), &data, &model_cfg).unwrap())
        .collect();
    let val = samples_from_synth(&clip(13, 9), &data, &model_cfg).unwrap();
    let test = samples_from_synth(&clip(14, 51), &data, &model_cfg).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 40,
        ..Default::default()
    };
    let results = run_ablation(&train, &val, &test, &model_cfg, &cfg, &[0, 1, 2]).unwrap();
    let med = median_mae(&results);
    let (base, nl, mg) = (med[0].1, med[1].1, med[2].1);
    outcome(
        mg <= nl && nl <= base,
        format!(
            "{} test frames, median MAE baseline {base:.3}, nonlocal {nl:.3}, motion_guided {mg:.3}, {:.2?}",
            test.len(),
            start.elapsed()
        ),
    )
}

// ------------------------------------------------------------ 6: metrics

fn metrics_exactness() -> Outcome {
    let r = evaluate(&[(10.0, 12.0), (20.0, 17.0)]).unwrap();
    let hand = (r.mae - 2.5).abs() < 1e-9 && (r.mse - 6.5f64.sqrt()).abs() < 1e-9;
    let mut g = rng(606);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = g.random_range(1..=30);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| (g.random_range(0.0..100.0), g.random_range(0.0..100.0)))
            .collect();
        let rep = evaluate(&pairs).unwrap();
        violations += (rep.mse < rep.mae - 1e-12) as usize;
    }
    outcome(
        hand && violations == 0,
        format!(
            "hand pairs MAE {} MSE {:.12}, {violations} of 1000 random sets with MSE < MAE",
            r.mae, r.mse
        ),
    )
}

// ------------------------------------------------------------ 7: determinism

fn write_experiment(dir: &Path) {
    let exp = ExperimentConfig {
        model: ModelConfig::tiny(),
        train: TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 2,
            ..Default::default()
        },
        data: DataConfig {
            train: vec![DataSource::Synthetic(SynthSceneConfig {
                width: 32,
                height: 32,
                n_frames: 5,
                n_people: PeopleCount::Fixed(3),
                seed: 1,
                ..Default::default()
            })],
            ..Default::default()
        },
        output_dir: dir.join("run"),
    };
    std::fs::write(dir.join("experiment.json"), serde_json::to_string(&exp).unwrap()).unwrap();
}

fn cli_checkpoints_match() -> bool {
    let tmp = tempfile::tempdir().unwrap();
    write_experiment(tmp.path());
    for out in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_vidcount"))
            .args([
                "train",
                "--config",
                "experiment.json",
                "--seed",
                "9",
                "--deterministic",
                "--out",
                out,
            ])
            .current_dir(tmp.path())
            .output()
            .unwrap()
            .status;
        if !status.success() {
            return false;
        }
    }
    ["best.ckpt", "last.ckpt"].iter().all(|f| {
        std::fs::read(tmp.path().join("a").join(f)).unwrap() == std::fs::read(tmp.path().join("b").join(f)).unwrap()
    })
}

fn library_checkpoints_match() -> bool {
    let clip = generate_clip(&SynthSceneConfig {
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let model_cfg = ModelConfig::tiny();
    let samples = samples_from_synth(&clip, &DataConfig::default(), &model_cfg).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 4,
        augment: vidcount::training::AugmentConfig {
            flip: true,
            crop_size: Some(48),
        },
        ..Default::default()
    };
    let a = fit(&samples, &[], &model_cfg, &cfg, None).unwrap();
    let b = fit(&samples, &[], &model_cfg, &cfg, None).unwrap();
    a.last.to_bytes() == b.last.to_bytes() && a.log == b.log
}

fn round_trips() -> Vec<&'static str> {
    let mut r = rng(707);
    let mut failed = Vec::new();
    let f32_grid = |r: &mut ChaCha8Rng, w, h| Grid::from_fn(w, h, |_, _| r.random_range(-5.0f32..5.0) as f64);

    let d = DensityMap(f32_grid(&mut r, 7, 5));
    if DensityMap::from_bytes(&d.to_bytes()).ok() != Some(d.clone()) {
        failed.push("DMAP");
    }
    let m = SegmentationMask(Grid::from_fn(6, 4, |x, y| ((x + y) % 2) as f64));
    if SegmentationMask::from_bytes(&m.to_bytes()).ok() != Some(m) {
        failed.push("SMSK");
    }
    let flow = FlowField::new(f32_grid(&mut r, 5, 5), f32_grid(&mut r, 5, 5)).unwrap();
    if FlowField::from_bytes(&flow.to_bytes()).ok() != Some(flow) {
        failed.push("FLO2");
    }
    let model_cfg = ModelConfig::tiny();
    let ck = Checkpoint {
        config: model_cfg.clone(),
        params: jittered_params(&model_cfg, 7).rounded_to_f32(),
    };
    let bytes = ck.to_bytes();
    match Checkpoint::from_bytes(&bytes) {
        Ok(back) if back == ck && back.to_bytes() == bytes => {}
        _ => failed.push("VCKP"),
    }

    let tmp = tempfile::tempdir().unwrap();
    let img = Image {
        channels: (0..3)
            .map(|_| Grid::from_fn(9, 6, |_, _| r.random_range(0..=255u8) as f64 / 255.0))
            .collect(),
    };
    let png = tmp.path().join("img.png");
    img.save_png(&png).unwrap();
    if Image::load_png(&png).ok() != Some(img) {
        failed.push("PNG");
    }
    let clip = generate_clip(&SynthSceneConfig::default()).unwrap();
    let ann = clip.annotation.clone();
    if ClipAnnotation::from_json(&ann.to_json()).ok() != Some(ann) {
        failed.push("annotation JSON");
    }
    let exp = ExperimentConfig::default();
    if ExperimentConfig::from_json(&serde_json::to_string(&exp).unwrap()).ok() != Some(exp) {
        failed.push("experiment JSON");
    }
    let rec = LogRecord {
        epoch: 3,
        l_den: r.random(),
        l_seg: r.random(),
        l_total: r.random(),
        mae: r.random(),
        mse: r.random(),
    };
    if serde_json::from_str::<LogRecord>(&serde_json::to_string(&rec).unwrap()).ok() != Some(rec) {
        failed.push("log JSON");
    }
    failed
}

fn determinism() -> Outcome {
    let cli = cli_checkpoints_match();
    let lib = library_checkpoints_match();
    let failed = round_trips();
    outcome(
        cli && lib && failed.is_empty(),
        format!(
            "CLI checkpoints identical: {cli}, library fits identical: {lib}, round-trip failures: {}",
            if failed.is_empty() {
                "none".to_string()
            } else {
                failed.join(", ")
            }
        ),
    )
}

// ------------------------------------------------------------ 8: flow

fn flow_sanity() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(808);
    let (w, h) = (48, 40);
    let prev = Grid::from_fn(w, h, |_, _| r.random::<f64>());
    let fill = Grid::from_fn(w, h, |_, _| r.random::<f64>());
    let curr = Grid::from_fn(w, h, |x, y| if x >= 2 { prev.get(x - 2, y) } else { fill.get(x, y) });
    let spec = FlowEstimatorSpec::block_matching(5, 4);
    let flow = estimate_flow(&prev, &curr, &spec, None).unwrap();
    let margin = 9;
    let (mut hits, mut total) = (0usize, 0usize);
    for y in margin..h - margin {
        for x in margin..w - margin {
            total += 1;
            hits += (flow.at(x, y) == (2.0, 0.0)) as usize;
        }
    }
    let rate = hits as f64 / total as f64;
    let own = estimate_flow(&prev, &prev, &spec, None).unwrap();
    let zero = own == FlowField::zeros(w, h);
    outcome(
        rate >= 0.95 && zero,
        format!(
            "2-px shift recovered on {:.1}% of interior pixels, self-flow zero: {zero}",
            100.0 * rate
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a name filter
    // that matches nothing here skips the run.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }

    let criteria: [(u32, &str, bool, fn() -> Outcome); 8] = [
        (1, "ground-truth count conservation", true, gt_conservation),
        (2, "non-local oracle equivalence", true, nonlocal_equivalence),
        (3, "gradient checks", true, gradient_checks),
        (4, "toy overfit", true, toy_overfit),
        (5, "ablation direction (soft)", false, ablation_direction),
        (6, "metrics exactness", true, metrics_exactness),
        (7, "determinism and round trips", true, determinism),
        (8, "flow sanity", true, flow_sanity),
    ];
    let mut hard_failures = 0;
    for (n, name, hard, run) in criteria {
        let o = run();
        let verdict = if o.pass {
            "PASS"
        } else if hard {
            "FAIL"
        } else {
            "SOFT-FAIL"
        };
        println!("{verdict} criterion {n}: {name}: {}", o.detail);
        hard_failures += (hard && !o.pass) as usize;
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}
