//! One pass/fail line per acceptance criterion.

use std::collections::HashSet;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ftkn::config::{PipelineConfig, Preset};
use ftkn::core::fusion::{group_split, GroupStrategy};
use ftkn::core::geometry::{iou_bev, Box7, PointSet, PAD_ID};
use ftkn::core::gradcheck::{suite, TOLERANCE};
use ftkn::core::graph::Graph;
use ftkn::core::memory::{assign_unique_ids, finalize_focal, point_id};
use ftkn::core::model::{FrameSample, ProposalSample};
use ftkn::core::params::ParamStore;
use ftkn::core::scaling::{keep_count, supervised_target, AdaptiveScalingLayer, Scorer, ScoringContext, Tokens};
use ftkn::core::tensor::Tensor;
use ftkn::core::{FasterModel, ModelConfig};
use ftkn::experiments::{bench_efficiency, robustness_sweep, splits, train_and_evaluate, DROP_RATES};
use ftkn::io::save_model;
use ftkn::scene::generate_split;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IOU_GAIN: f64 = 0.05;
const E2E_BUDGET_S: f64 = 900.0;
const SCORER_SLACK: f64 = 0.005;

enum Verdict {
    Pass,
    Fail,
    Report,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn pass_if(ok: bool, detail: String) -> Outcome {
    Outcome { verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = 0;
    let cases = suite();
    for case in &cases {
        for seed in 0..10 {
            match (case.run)(seed) {
                Ok(e) if e <= TOLERANCE => {
                    if e > worst.0 {
                        worst = (e, case.name);
                    }
                }
                _ => failures += 1,
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass_if(
        failures == 0 && secs < 120.0,
        format!("{} cases x 10 seeds, {failures} failures, worst rel-err {:.2e} ({}), {secs:.1} s", cases.len(), worst.0, worst.1),
    )
}

fn row_subset() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = rng.random_range(1..=64);
        let mut store = ParamStore::new();
        let layer = AdaptiveScalingLayer::new(&mut store, "s", 16, 4, 32, Scorer::Adaptive, &mut rng).unwrap();
        let x = Tensor::matrix(n, 16, (0..n * 16).map(|_| rng.random_range(-2.0..2.0)).collect());
        let ids: Vec<i64> = (0..n).map(|r| if r > 0 && rng.random_bool(0.2) { PAD_ID } else { point_id(i, r) }).collect();
        let mut g = Graph::inference(&store);
        let xv = g.constant(x);
        let tokens = Tokens { x: xv, point_ids: ids, frames: vec![0; n], labels: None };
        let full = layer.forward_full(&mut g, &tokens, false).unwrap();
        let keep = keep_count(n, rng.random_range(0.1..1.0));
        let mut ctx = ScoringContext::new(Scorer::Adaptive, &mut rng);
        let out = layer.forward(&mut g, &tokens, keep, &mut ctx).unwrap();
        let expected = g.value(full).gather_rows(&out.kept).unwrap();
        worst = worst.max(g.value(out.tokens.x).max_abs_diff(&expected));
    }
    pass_if(worst <= 1e-12, format!("100 sequences, max |diff| {worst:.1e}"))
}

/// Per-stage lengths of the default fusion schedule, computed directly.
fn simulate_msp(t: usize, g: usize, beta: f64, k: usize, k_out: usize) -> Vec<(usize, usize)> {
    let keep = |n: usize| (beta * n as f64).ceil() as usize;
    let mut out = vec![(t, keep(k))];
    let fused = keep(k) * t / g;
    out.push((g, fused));
    out.push((g, keep(fused)));
    out.push((1, keep(fused) * g));
    out.push((1, k_out));
    out
}

fn random_points(rng: &mut ChaCha8Rng, b: &Box7, frame: usize, n: usize) -> PointSet {
    let mut s = PointSet::new(1);
    for r in 0..n {
        let p = [b.center[0] + rng.random_range(-2.0..2.0), b.center[1] + rng.random_range(-1.0..1.0), rng.random_range(0.0..1.5)];
        s.push(p, &[rng.random_range(0.0..1.0)], 0.0, point_id(frame, r));
    }
    s
}

fn length_schedule() -> Outcome {
    let cfg = ModelConfig::default();
    let mut ssp = vec![cfg.current_samples()];
    ssp.extend(cfg.ssp_lengths().unwrap());
    let msp = cfg.fusion_schedule().trace(cfg.frames, cfg.k).unwrap();
    let want_msp = simulate_msp(16, 4, 0.5, 48, 48);
    let model = FasterModel::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = Box7::new([10.0, 2.0, 0.8], [4.0, 2.0, 1.6], 0.3).unwrap();
    let sample = ProposalSample {
        proposal: b,
        current: random_points(&mut rng, &b, 16, cfg.current_samples()),
        current_labels: None,
        history: (1..cfg.frames)
            .map(|t| FrameSample {
                points: random_points(&mut rng, &b, 16 - t, cfg.k),
                reference: b,
                delta_t: 0.1 * t as f64,
                labels: None,
            })
            .collect(),
    };
    let p = model.predict(&sample, &mut rng).unwrap();
    let ok = ssp == [192, 96, 48]
        && msp == want_msp
        && msp == [(16, 24), (4, 96), (4, 48), (1, 192), (1, 48)]
        && p.telemetry.ssp_trace == ssp
        && p.telemetry.msp_trace == msp;
    pass_if(ok, format!("SSP {ssp:?}, MSP {msp:?}, model run {:?} / {:?}", p.telemetry.ssp_trace, p.telemetry.msp_trace))
}

fn grouping() -> Outcome {
    let plan = group_split(16, 4, GroupStrategy::EqualStride).unwrap();
    let one_based: Vec<Vec<usize>> = plan.groups.iter().map(|g| g.iter().map(|i| i + 1).collect()).collect();
    let want = vec![vec![1, 5, 9, 13], vec![2, 6, 10, 14], vec![3, 7, 11, 15], vec![4, 8, 12, 16]];
    pass_if(one_based == want, format!("{one_based:?}"))
}

fn dedup() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..300);
        let m = rng.random_range(1..10);
        let per = rng.random_range(1..24);
        let k = rng.random_range(1..=per);
        let samples: Vec<PointSet> = (0..m)
            .map(|_| {
                let mut s = PointSet::new(1);
                for _ in 0..per {
                    if rng.random_bool(0.15) {
                        s.push_padding();
                    } else {
                        let r = rng.random_range(0..n);
                        s.push([r as f64, 0.0, 0.0], &[0.0], 0.0, point_id(9, r));
                    }
                }
                s
            })
            .collect();
        let (table, index) = assign_unique_ids(&samples).unwrap();
        let picks: Vec<Vec<i64>> =
            index.iter().map(|rows| (0..k).map(|_| rows[rng.random_range(0..rows.len())]).collect()).collect();
        let focal = finalize_focal(&picks, &table).unwrap();
        let oracle: HashSet<i64> = picks.iter().flatten().filter(|&&r| r >= 0).map(|&r| table.ids[r as usize]).collect();
        if focal.len() != oracle.len() || focal.len() > (m * k).min(n) {
            bad += 1;
        }
    }
    pass_if(bad == 0, format!("1000 patterns, {bad} mismatches"))
}

fn supervised_score() -> Outcome {
    let eta = 0.2;
    let v = [supervised_target(0.7, eta), supervised_target(1.3, eta), supervised_target(1.1, eta)];
    let exact = (v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12 && (v[2] - 0.25).abs() < 1e-12;
    let jump = |a: f64| (supervised_target(a - 1e-12, eta) - supervised_target(a + 1e-12, eta)).abs();
    let gap = jump(0.8).max(jump(1.2));
    pass_if(exact && gap <= 1e-9, format!("values {v:?}, largest jump at the band edges {gap:.1e}"))
}

/// Jittered-grid Monte-Carlo: one uniform sample in each cell of a
/// `side x side` grid over the joint bounding rectangle.
fn monte_carlo_iou(a: &Box7, b: &Box7, side: usize, rng: &mut ChaCha8Rng) -> f64 {
    let corners: Vec<[f64; 2]> = a.bev_corners().into_iter().chain(b.bev_corners()).collect();
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for c in &corners {
        for i in 0..2 {
            lo[i] = lo[i].min(c[i]);
            hi[i] = hi[i].max(c[i]);
        }
    }
    let inside = |bx: &Box7, p: [f64; 2]| {
        let l = bx.to_local([p[0], p[1], bx.center[2]]);
        l[0].abs() <= 0.5 * bx.size[0] && l[1].abs() <= 0.5 * bx.size[1]
    };
    let cell = [(hi[0] - lo[0]) / side as f64, (hi[1] - lo[1]) / side as f64];
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..side {
        for j in 0..side {
            let p = [
                lo[0] + (i as f64 + rng.random::<f64>()) * cell[0],
                lo[1] + (j as f64 + rng.random::<f64>()) * cell[1],
            ];
            let (ia, ib) = (inside(a, p), inside(b, p));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let random_box = |rng: &mut ChaCha8Rng, c: [f64; 2]| {
            Box7::new(
                [c[0] + rng.random_range(-1.5..1.5), c[1] + rng.random_range(-1.5..1.5), 0.0],
                [rng.random_range(0.5..5.0), rng.random_range(0.5..3.0), 1.0],
                rng.random_range(-3.14..3.14),
            )
            .unwrap()
        };
        let a = random_box(&mut rng, [0.0, 0.0]);
        let b = random_box(&mut rng, [0.0, 0.0]);
        worst = worst.max((iou_bev(&a, &b) - monte_carlo_iou(&a, &b, 1000, &mut rng)).abs());
    }
    pass_if(worst <= 1e-3, format!("200 pairs, 1e6 samples each, max |diff| {worst:.2e}"))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Report => "REPORT",
        };
        println!("criterion {n:>2} {tag:<6} {name}: {}", o.detail);
        results.push((n, name, o));
    };

    record(1, "gradient suite", gradient_suite());
    record(2, "Ad-MHSA row subset", row_subset());
    record(3, "length schedule", length_schedule());
    record(4, "equal-stride grouping", grouping());
    record(5, "dedup oracle", dedup());
    record(6, "supervised score", supervised_score());
    record(7, "IoU oracle", iou_oracle());

    let cfg = PipelineConfig::preset(Preset::Desk);
    let start = Instant::now();
    let run = train_and_evaluate(&cfg, &mut |_| {}).expect("desk run");
    let secs = start.elapsed().as_secs_f64();
    let m = &run.metrics;
    record(
        8,
        "desk end-to-end",
        pass_if(
            m.iou_gain >= IOU_GAIN && secs <= E2E_BUDGET_S,
            format!(
                "IoU {:.4} -> {:.4} (gain {:+.4}) on {} matched proposals, {secs:.0} s",
                m.mean_iou_before, m.mean_iou_after, m.iou_gain, m.matched
            ),
        ),
    );

    let mut gaps = Vec::new();
    let mut adaptive_mean = 0.0;
    let mut random_mean = 0.0;
    for seed in 0..3 {
        let mut c = PipelineConfig::preset(Preset::Desk);
        c.seed = seed;
        c.data.train_scenes = 40;
        c.data.eval_scenes = 20;
        let a = train_and_evaluate(&c, &mut |_| {}).expect("adaptive run").metrics.mean_iou_after;
        c.model.scorer = Scorer::Random;
        let r = train_and_evaluate(&c, &mut |_| {}).expect("random run").metrics.mean_iou_after;
        adaptive_mean += a / 3.0;
        random_mean += r / 3.0;
        gaps.push(a - r);
    }
    let diff = adaptive_mean - random_mean;
    let verdict = if diff >= 0.0 {
        Verdict::Pass
    } else if diff >= -SCORER_SLACK {
        Verdict::Report
    } else {
        Verdict::Fail
    };
    record(
        9,
        "scorer ordering",
        Outcome {
            verdict,
            detail: format!("3 seeds, adaptive {adaptive_mean:.4} vs random {random_mean:.4}, per-seed gaps {gaps:+.4?}"),
        },
    );

    let bench_scenes = generate_split(&cfg.scene, cfg.seed, "eval", 2);
    let bench = bench_efficiency(&cfg, &bench_scenes).expect("bench");
    record(
        10,
        "efficiency",
        pass_if(
            bench.full_cell_ratio >= 2.0 && bench.wall_ratio > 1.0,
            format!("analytic cell ratio {:.2} at T=16, wall-time ratio {:.2}", bench.full_cell_ratio, bench.wall_ratio),
        ),
    );

    let eval = splits(&cfg).eval;
    let grid = robustness_sweep(&run.model, &eval, &cfg, &DROP_RATES);
    let detail = match &grid {
        Ok(rows) => rows.iter().map(|r| format!("{}@{:.1}={:.3}", r.kind, r.rate, r.metrics.mean_iou_after)).collect::<Vec<_>>().join(" "),
        Err(e) => e.to_string(),
    };
    let ok = grid.as_ref().is_ok_and(|rows| rows.len() == 8 && rows.iter().all(|r| r.metrics.mean_iou_after.is_finite()));
    record(11, "robustness grid", pass_if(ok, detail));

    let dir = tempfile::tempdir().unwrap();
    save_model(&dir.path().join("model"), &run.model).unwrap();
    let infer = |out: &str| {
        Command::new(env!("CARGO_BIN_EXE_ftkn"))
            .current_dir(dir.path())
            .args(["--preset", "desk", "--out-dir", out, "infer", "--checkpoint", "model"])
            .status()
            .is_ok_and(|s| s.success())
    };
    let ran = infer("a") && infer("b");
    let same = ran
        && ["predictions.csv", "telemetry.csv"].iter().all(|f| {
            let a = std::fs::read(dir.path().join("a").join(f)).ok();
            a.is_some() && a == std::fs::read(dir.path().join("b").join(f)).ok()
        });
    record(12, "determinism", pass_if(same, format!("two infer runs, CSV outputs identical: {same}")));

    let failed: Vec<usize> = results.iter().filter(|r| matches!(r.2.verdict, Verdict::Fail)).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria met");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
