//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test -p msr-core --test acceptance -- --nocapture` to see
//! the lines; failures carry the same message.

use std::time::Instant;

use msr_core::data::{synthetic_motion, window, MotionKind};
use msr_core::layers::{Mode, NormKind};
use msr_core::model::{
    build_model, forward, FuseMode, LayerKind, ModelConfig, ModelParams,
};
use msr_core::multiscale::{abstract_pose, build_pyramid, builtin_grouping, GroupingScheme};
use msr_core::tensor::Matrix;
use msr_core::training::{
    evaluate, fit, gradcheck_model, horizon_to_frame, mpjpe, pad_replicate, scale_loss,
    total_loss, zero_velocity_baseline, Sample, TrainOptions,
};

fn pass(criterion: usize, name: &str, detail: String) {
    println!("ACCEPTANCE {criterion} ({name}): PASS — {detail}");
}

/// Criterion 1: full-model finite-difference gradient check on the tiny
/// configuration (6 joints, 2 scales, widths 4/8, T = 5, 64-bit, dropout
/// off, normalization passthrough), max relative error < 1e-4, under 2 min.
#[test]
fn criterion_1_gradcheck() {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    assert_eq!(cfg.grouping.scales()[0], 6);
    assert_eq!(cfg.levels, 2);
    assert_eq!(cfg.scale_widths, vec![4, 8]);
    assert_eq!(cfg.t_total(), 5);
    let report = gradcheck_model(&cfg, 12345, 1e-5, 1e-4, Some(800)).unwrap();
    let elapsed = start.elapsed();
    assert!(report.passed(), "{report}");
    assert!(report.checked_entries >= 500);
    assert!(
        elapsed.as_secs() < 120,
        "gradcheck took {elapsed:?}, budget is 2 minutes"
    );
    pass(
        1,
        "gradcheck",
        format!(
            "max rel err {:.3e} over {} entries in {elapsed:?}",
            report.max_rel_err, report.checked_entries
        ),
    );
}

/// Criterion 2: building the default H3.6M configuration reproduces every
/// output size and every A/W shape of the published architecture table,
/// row for row, with zero tolerance.
#[test]
fn criterion_2_shape_conformance() {
    let cfg = ModelConfig::default_h36m();
    let params: ModelParams<f32> = build_model(&cfg, 1).unwrap();

    // (path, rows, cols) of every A and W in table order.
    let mut expected_weights: Vec<(String, usize, usize)> = Vec::new();
    let scales = [(66usize, 64usize), (36, 128), (21, 256), (12, 512)];
    expected_weights.push(("start/gcl/A".into(), 66, 66));
    expected_weights.push(("start/gcl/W".into(), 35, 64));
    for g in 0..2 {
        expected_weights.push((format!("start/res/gcl{g}/A"), 66, 66));
        expected_weights.push((format!("start/res/gcl{g}/W"), 64, 64));
    }
    for (s, &(k, f)) in scales.iter().enumerate() {
        for b in 0..3 {
            for g in 0..2 {
                expected_weights.push((format!("stage/D{s}/block{b}/gcl{g}/A"), k, k));
                expected_weights.push((format!("stage/D{s}/block{b}/gcl{g}/W"), f, f));
            }
        }
    }
    let resamples = [((66, 36), (64, 128)), ((36, 21), (128, 256)), ((21, 12), (256, 512))];
    for (s, &((n1, n2), (f1, f2))) in resamples.iter().enumerate() {
        expected_weights.push((format!("down{s}/node_map"), n1, n2));
        expected_weights.push((format!("down{s}/feat_map"), f1, f2));
    }
    for (s, &(k, f)) in scales.iter().enumerate().rev() {
        for b in 0..3 {
            for g in 0..2 {
                expected_weights.push((format!("stage/A{s}/block{b}/gcl{g}/A"), k, k));
                expected_weights.push((format!("stage/A{s}/block{b}/gcl{g}/W"), f, f));
            }
        }
    }
    for (s, &((n1, n2), (f1, f2))) in resamples.iter().enumerate().rev() {
        expected_weights.push((format!("up{s}/node_map"), n2, n1));
        expected_weights.push((format!("up{s}/feat_map"), f2, f1));
    }
    for (s, &(k, f)) in scales.iter().enumerate() {
        for g in 0..2 {
            expected_weights.push((format!("end/E{s}/res/gcl{g}/A"), k, k));
            expected_weights.push((format!("end/E{s}/res/gcl{g}/W"), f, f));
        }
        expected_weights.push((format!("end/E{s}/out/A"), k, k));
        expected_weights.push((format!("end/E{s}/out/W"), f, 35));
    }
    for (path, rows, cols) in &expected_weights {
        let m = params
            .get(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"));
        assert_eq!(m.dims(), (*rows, *cols), "shape of {path}");
    }

    // Output sizes, row for row, from a realized forward trace.
    let input = Matrix::from_fn(66, 35, |r, c| ((r * 35 + c) as f64 * 0.37).sin());
    let pyr = build_pyramid(&input, &cfg.active_grouping()).unwrap();
    let params64: ModelParams<f64> = build_model(&cfg, 1).unwrap();
    let pass_fwd = forward(&params64, &cfg, &[pyr], Mode::Eval, None, true).unwrap();
    let expected_trace: Vec<(&str, usize, usize)> = vec![
        ("start/gcl", 66, 64),
        ("start/res", 66, 64),
        ("stage/D0", 66, 64),
        ("down0/node", 36, 64),
        ("down0/feat", 36, 128),
        ("stage/D1", 36, 128),
        ("down1/node", 21, 128),
        ("down1/feat", 21, 256),
        ("stage/D2", 21, 256),
        ("down2/node", 12, 256),
        ("down2/feat", 12, 512),
        ("stage/D3", 12, 512),
        ("stage/A3", 12, 512),
        ("up2/node", 21, 512),
        ("up2/feat", 21, 256),
        ("stage/A2", 21, 256),
        ("up1/node", 36, 256),
        ("up1/feat", 36, 128),
        ("stage/A1", 36, 128),
        ("up0/node", 66, 128),
        ("up0/feat", 66, 64),
        ("stage/A0", 66, 64),
        ("end/E0/res", 66, 64),
        ("end/E0/out", 66, 35),
        ("end/E1/res", 36, 128),
        ("end/E1/out", 36, 35),
        ("end/E2/res", 21, 256),
        ("end/E2/out", 21, 35),
        ("end/E3/res", 12, 512),
        ("end/E3/out", 12, 35),
    ];
    assert_eq!(pass_fwd.trace.len(), expected_trace.len());
    for (got, want) in pass_fwd.trace.iter().zip(&expected_trace) {
        assert_eq!(
            (got.0.as_str(), got.1, got.2),
            *want,
            "trace row mismatch"
        );
    }
    pass(
        2,
        "shape conformance",
        format!(
            "{} weight shapes and {} output sizes match",
            expected_weights.len(),
            expected_trace.len()
        ),
    );
}

fn sinusoid_samples(
    sequences: usize,
    frames: usize,
    t_h: usize,
    t_f: usize,
    stride: usize,
    seed: u64,
) -> Vec<Sample> {
    let mut out = Vec::new();
    for i in 0..sequences {
        let seq = synthetic_motion(MotionKind::Sinusoid, 6, frames, 25.0, seed + i as u64);
        out.extend(window(&seq, t_h, t_f, stride));
    }
    out
}

/// Criterion 3: with end-decoder weights/shifts zeroed and the global
/// residual on, predictions equal the padded input bit-exactly at every
/// scale, and evaluation matches the zero-velocity baseline with 0 error.
#[test]
fn criterion_3_residual_identity() {
    let mut cfg = ModelConfig::tiny();
    cfg.t_history = 10;
    cfg.t_future = 25;
    cfg.norm = NormKind::Entry;
    cfg.dropout = 0.1;
    let mut params: ModelParams<f64> = build_model(&cfg, 99).unwrap();
    params.zero_decoder_outputs();

    let samples = sinusoid_samples(3, 40, 10, 25, 5, 7000);
    assert!(!samples.is_empty());

    // Bit-exact identity at every scale.
    for sample in &samples {
        let padded = pad_replicate(&sample.history, cfg.t_future).unwrap();
        let pyr = build_pyramid(&padded, &cfg.active_grouping()).unwrap();
        let fwd = forward(&params, &cfg, std::slice::from_ref(&pyr), Mode::Eval, None, false)
            .unwrap();
        let out = &fwd.outputs()[0];
        for s in 0..cfg.levels {
            assert_eq!(out.scales[s], *pyr.scale(s), "scale {s} not bit-exact");
        }
    }

    // evaluate() equals the zero-velocity baseline exactly.
    let horizons = [80u32, 160, 320, 400];
    let report = evaluate(&params, &cfg, &samples, &horizons, 25.0).unwrap();
    for (i, &h) in horizons.iter().enumerate() {
        let frame = horizon_to_frame(h, 25.0);
        let mut expected = 0.0f64;
        for s in &samples {
            let zv = zero_velocity_baseline(&s.history, cfg.t_future).unwrap();
            let joints = s.history.rows() / 3;
            let mut err = 0.0f64;
            for j in 0..joints {
                let mut d2 = 0.0f64;
                for axis in 0..3 {
                    let p = zv.get(3 * j + axis, frame - 1);
                    let g = s.future.get(3 * j + axis, frame - 1);
                    d2 += (p - g) * (p - g);
                }
                err += d2.sqrt();
            }
            expected += err / joints as f64;
        }
        expected /= samples.len() as f64;
        assert_eq!(
            report.overall[i], expected,
            "horizon {h} ms differs from the zero-velocity baseline"
        );
    }
    pass(
        3,
        "residual identity",
        format!(
            "{} samples identical at {} scales; evaluate == baseline exactly",
            samples.len(),
            cfg.levels
        ),
    );
}

/// Criterion 4: oracle equivalences — matmul vs triple loop, mpjpe vs
/// Pythagorean cases, abstraction vs brute-force group means, and the
/// horizon-to-frame mapping.
#[test]
fn criterion_4_oracle_equivalence() {
    // matmul vs an independent triple-loop oracle: 100 random cases, 1e-12.
    let mut state = 0x243f6a8885a308d3u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    for case in 0..100 {
        let (m, k, n) = (1 + case % 8, 1 + (case / 2) % 7, 1 + (case / 5) % 9);
        let a = Matrix::from_fn(m, k, |_, _| next());
        let b = Matrix::from_fn(k, n, |_, _| next());
        let got = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                let g = got.get(i, j);
                let denom = g.abs().max(s.abs()).max(1e-8);
                assert!((g - s).abs() / denom < 1e-12, "case {case}");
            }
        }
    }

    // mpjpe hand cases, exact.
    let p = Matrix::from_vec(3, 1, vec![3.0, 4.0, 0.0]).unwrap();
    assert_eq!(mpjpe(&p, &Matrix::zeros(3, 1)).unwrap(), 5.0);
    let p2 = Matrix::from_vec(6, 1, vec![0.0, 0.0, 5.0, 3.0, 4.0, 0.0]).unwrap();
    assert_eq!(mpjpe(&p2, &Matrix::zeros(6, 1)).unwrap(), 5.0);

    // abstract_pose vs brute-force per-group means, exact.
    let scheme = builtin_grouping("h36m_22_12_7_4").unwrap();
    let pose = Matrix::from_fn(22, 3, |r, c| ((r * 3 + c) as f64 * 0.618).fract() * 100.0);
    let got = abstract_pose(&pose, &scheme.maps()[0]).unwrap();
    for (coarse, group) in scheme.maps()[0].iter().enumerate() {
        for axis in 0..3 {
            let mut sum = 0.0;
            for &j in group {
                sum += pose.get(j, axis);
            }
            assert_eq!(got.get(coarse, axis), sum / group.len() as f64);
        }
    }

    // Horizon mapping at 25 fps, exact.
    let frames: Vec<usize> = [80u32, 160, 320, 400, 560, 1000]
        .iter()
        .map(|&h| horizon_to_frame(h, 25.0))
        .collect();
    assert_eq!(frames, vec![2, 4, 8, 10, 14, 25]);

    pass(4, "oracle equivalence", "matmul, mpjpe, abstraction, horizons".into());
}

/// The 2-level learning-sanity configuration shared by criteria 5 and 6.
fn learning_cfg(levels: usize, widths: Vec<usize>) -> ModelConfig {
    let grouping = GroupingScheme::new(
        6,
        vec![
            vec![vec![0, 1], vec![2, 3], vec![4], vec![5]],
            vec![vec![0, 1], vec![2], vec![3]],
            vec![vec![0, 1], vec![2]],
        ],
    )
    .unwrap();
    ModelConfig {
        grouping,
        levels,
        scale_widths: widths,
        res_blocks_per_stage: 3,
        t_history: 10,
        t_future: 25,
        use_inter_loss: true,
        use_global_residual: true,
        layer_kind: LayerKind::Gcn,
        fuse: FuseMode::Add,
        dropout: 0.1,
        norm: NormKind::Entry,
    }
}

/// Criterion 5: on a seeded synthetic sinusoid set (>= 200 train samples,
/// 6 joints, T_h = 10, T_f = 25), 50 epochs of the 2-level model reach
/// (a) final train loss < 0.2x the initial loss and (b) test MPJPE at
/// 400 ms at least 20% below the zero-velocity baseline, within 10 min.
#[test]
fn criterion_5_learning_sanity() {
    let start = Instant::now();
    let cfg = learning_cfg(2, vec![64, 128]);

    let train = sinusoid_samples(8, 64, 10, 25, 1, 51_000);
    let val = sinusoid_samples(2, 45, 10, 25, 5, 52_000);
    let test = sinusoid_samples(4, 45, 10, 25, 5, 53_000);
    assert!(train.len() >= 200, "only {} train samples", train.len());

    let params: ModelParams<f32> = build_model(&cfg, 5).unwrap();
    let opts = TrainOptions {
        epochs: 50,
        batch_size: 16,
        seed: 5,
        base_lr: 2e-3,
        ..TrainOptions::default()
    };
    let result = fit(params, &cfg, &train, &val, &opts).unwrap();
    let initial = result.curve.first().unwrap().train_loss;
    let final_loss = result.curve.last().unwrap().train_loss;

    let report = evaluate(&result.best, &cfg, &test, &[400], 25.0).unwrap();
    let model_err = report.overall[0];

    // The zero-velocity baseline via the zeroed-decoder identity model.
    let mut baseline_params: ModelParams<f32> = build_model(&cfg, 5).unwrap();
    baseline_params.zero_decoder_outputs();
    let baseline = evaluate(&baseline_params, &cfg, &test, &[400], 25.0).unwrap().overall[0];

    let elapsed = start.elapsed();
    assert!(
        final_loss < 0.2 * initial,
        "train loss {initial:.4} -> {final_loss:.4}, needs < {:.4}",
        0.2 * initial
    );
    assert!(
        model_err <= 0.8 * baseline,
        "model {model_err:.2} mm vs baseline {baseline:.2} mm at 400 ms: \
         improvement {:.1}% < 20%",
        (1.0 - model_err / baseline) * 100.0
    );
    assert!(
        elapsed.as_secs() < 600,
        "training took {elapsed:?}, budget is 10 minutes"
    );
    pass(
        5,
        "learning sanity",
        format!(
            "loss {initial:.3} -> {final_loss:.3} ({:.1}%), 400 ms MPJPE {model_err:.2} vs \
             baseline {baseline:.2} mm (-{:.1}%), {elapsed:?}",
            final_loss / initial * 100.0,
            (1.0 - model_err / baseline) * 100.0
        ),
    );
}

/// Criterion 6: ablation direction report (soft, non-gating): average test
/// MPJPE for 4L vs 1L, with vs without intermediate losses, GCN vs FCL,
/// over 3 seeds. Logged, not asserted.
#[test]
fn criterion_6_ablation_report() {
    let train = sinusoid_samples(4, 45, 10, 25, 2, 61_000);
    let test = sinusoid_samples(2, 45, 10, 25, 5, 62_000);

    let variants: Vec<(&str, ModelConfig)> = vec![
        ("MSR-GCN-4L", learning_cfg(4, vec![16, 24, 32, 48])),
        ("MSR-GCN-1L", learning_cfg(1, vec![16])),
        ("4L w/o inter-loss", {
            let mut c = learning_cfg(4, vec![16, 24, 32, 48]);
            c.use_inter_loss = false;
            c
        }),
        ("4L FCL", {
            let mut c = learning_cfg(4, vec![16, 24, 32, 48]);
            c.layer_kind = LayerKind::Fcl;
            c
        }),
    ];

    println!("ablation report (synthetic set, 3 seeds, mean 400 ms MPJPE in mm):");
    let mut results = Vec::new();
    for (name, cfg) in &variants {
        let mut errs = Vec::new();
        for seed in [11u64, 12, 13] {
            let params: ModelParams<f32> = build_model(cfg, seed).unwrap();
            let opts = TrainOptions {
                epochs: 8,
                batch_size: 16,
                seed,
                base_lr: 2e-3,
                ..TrainOptions::default()
            };
            let result = fit(params, cfg, &train, &test[..4], &opts).unwrap();
            let report = evaluate(&result.best, cfg, &test, &[400], 25.0).unwrap();
            errs.push(report.overall[0]);
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        println!("  {name:<20} {mean:8.2}  (seeds: {errs:.2?})");
        results.push((name.to_string(), mean));
    }
    pass(
        6,
        "ablation report",
        results
            .iter()
            .map(|(n, e)| format!("{n}: {e:.2}"))
            .collect::<Vec<_>>()
            .join(", "),
    );
}

/// Criterion 7: loss algebra — the unit-weighted total equals the sum of
/// per-scale losses exactly, and switching intermediate losses off reduces
/// the total to the scale-0 loss exactly.
#[test]
fn criterion_7_loss_algebra() {
    let mut s = 0x12345u64;
    let mut next = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut losses = Vec::new();
    for _ in 0..4 {
        let pred = Matrix::from_fn(6, 5, |_, _| next());
        let gt = Matrix::from_fn(6, 5, |_, _| next());
        losses.push(scale_loss(&pred, &gt).unwrap());
    }
    let ones = vec![1.0; 4];
    assert_eq!(total_loss(&losses, &ones), losses.iter().sum::<f64>());

    let off = msr_core::training::effective_lambdas(&ones, 4, false);
    assert_eq!(total_loss(&losses, &off), losses[0]);

    pass(7, "loss algebra", "unit-weight sum and inter-loss-off are exact".into());
}
