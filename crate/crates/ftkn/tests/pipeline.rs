use ftkn::bank::SharedBank;
use ftkn::config::{PipelineConfig, Preset};
use ftkn::core::geometry::{Box7, PointSet};
use ftkn::core::memory::point_id;
use ftkn::core::{FasterModel, ModelConfig};
use ftkn::experiments::{ablation_variants, bench_efficiency, evaluate_model, robustness_sweep, AblationGroup, DROP_RATES};
use ftkn::pipeline::{run_pipeline, run_scene, trace_string, HistoryMode, PipelineOptions};
use ftkn::report::predictions_csv;
use ftkn::samples::{build_sample, epa_extras, trajectory, Drops, History, SceneInput};
use ftkn::scene::{generate_split, Frame, Scene};
use ftkn::train::{staged_train, Phase};

fn tiny() -> PipelineConfig {
    let mut c = PipelineConfig::preset(Preset::Desk);
    c.model = ModelConfig { d_model: 16, heads: 2, k: 4, frames: 4, groups: 2, k_out: 4, ..ModelConfig::desk() };
    c.scene.frames = 6;
    c.scene.objects_max = 4;
    c.data.train_scenes = 3;
    c.data.eval_scenes = 2;
    c.train.epochs = 2;
    c.seed = 5;
    c
}

fn model(cfg: &PipelineConfig) -> FasterModel {
    FasterModel::new(cfg.model.clone(), 1).unwrap()
}

/// Fusion lengths of the default schedule, computed directly.
fn simulate(t: usize, g: usize, beta: f64, k: usize, k_out: usize) -> Vec<(usize, usize)> {
    let keep = |n: usize| ((beta * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    if t == 1 {
        return vec![(1, k_out)];
    }
    let first = if t % g == 0 && t / g >= 2 { g } else { 1 };
    let mut out = vec![(t, keep(k))];
    let mut len = keep(k) * t / first;
    out.push((first, len));
    if first > 1 {
        len = keep(len);
        out.push((first, len));
        len *= first;
        out.push((1, len));
    }
    out.push((1, k_out));
    out
}

#[test]
fn single_frame_models_still_refine() {
    let mut cfg = tiny();
    cfg.model.frames = 1;
    let scenes = generate_split(&cfg.scene, cfg.seed, "eval", 1);
    let out = run_scene(0, &scenes[0], &model(&cfg), &cfg, PipelineOptions::default()).unwrap();
    let refined: usize = out.telemetry.iter().filter(|t| t.refined).map(|t| t.proposals).sum();
    assert_eq!(out.rows.len(), refined);
    assert!(refined > 0);
    assert!(out.telemetry.iter().filter(|t| t.refined).all(|t| t.msp_trace == "(1x4)"));
}

#[test]
fn telemetry_follows_the_schedule_simulator() {
    let cfg = tiny();
    let scenes = generate_split(&cfg.scene, cfg.seed, "eval", 2);
    let out = run_pipeline(&scenes, &model(&cfg), &cfg, PipelineOptions::default()).unwrap();
    let want = trace_string(&simulate(4, 2, 0.5, 4, 4));
    assert_eq!(want, "(4x2) (2x4) (2x2) (1x4) (1x4)");
    let refined: Vec<_> = out.telemetry.iter().filter(|t| t.refined && t.proposals > 0).collect();
    assert!(!refined.is_empty());
    for t in refined {
        assert_eq!(t.msp_trace, want);
        assert_eq!(t.ssp_trace, "16 8 4");
    }
    for (t, g, k, k_out) in [(16, 4, 48, 48), (8, 4, 16, 16), (4, 4, 48, 48), (32, 4, 16, 16), (6, 4, 8, 8)] {
        let c = ModelConfig { frames: t, groups: g, k, k_out, ..ModelConfig::default() };
        assert_eq!(c.fusion_schedule().trace(t, k).unwrap(), simulate(t, g, 0.5, k, k_out), "T={t}");
    }
}

#[test]
fn an_empty_bank_falls_back_to_full_clouds() {
    let cfg = tiny();
    let scenes = generate_split(&cfg.scene, cfg.seed, "eval", 1);
    let input = SceneInput::new(0, &scenes[0], &cfg, 3);
    let f = scenes[0].len() - 1;
    let traj = trajectory(&input, f, 0, &cfg, 0.0).unwrap();
    let empty = SharedBank::new(8);
    let cold = build_sample(&input, f, 0, &traj, History::Bank(&empty), &cfg, Drops::default(), false).unwrap();
    let full = build_sample(&input, f, 0, &traj, History::FullCloud, &cfg, Drops::default(), false).unwrap();
    assert_eq!(cold, full);

    let warm_bank = SharedBank::new(8);
    for h in 0..f {
        let cloud = &scenes[0].frames[h].cloud;
        warm_bank.store(h, cloud.select(&(0..cloud.len() / 3).collect::<Vec<_>>())).unwrap();
    }
    let warm = build_sample(&input, f, 0, &traj, History::Bank(&warm_bank), &cfg, Drops::default(), false).unwrap();
    assert_eq!(warm.current, cold.current);
    assert_eq!(warm.history.len(), cold.history.len());
    for (a, b) in warm.history.iter().zip(&cold.history) {
        assert_eq!(a.points.len(), b.points.len());
    }
    let m = model(&cfg);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let pw = m.predict(&warm, &mut rng).unwrap();
    let pc = m.predict(&cold, &mut rng).unwrap();
    assert_eq!(pw.telemetry.msp_trace, pc.telemetry.msp_trace);
}

#[test]
fn identical_runs_write_identical_csv() {
    let cfg = tiny();
    let scenes = generate_split(&cfg.scene, cfg.seed, "eval", 2);
    let m = model(&cfg);
    let a = run_pipeline(&scenes, &m, &cfg, PipelineOptions::default()).unwrap();
    let b = run_pipeline(&scenes, &m, &cfg, PipelineOptions::default()).unwrap();
    assert_eq!(predictions_csv(&a.rows).unwrap(), predictions_csv(&b.rows).unwrap());
    let other = PipelineConfig { seed: 6, ..cfg.clone() };
    let c = run_pipeline(&scenes, &m, &other, PipelineOptions::default()).unwrap();
    assert_ne!(predictions_csv(&a.rows).unwrap(), predictions_csv(&c.rows).unwrap());
    let header = String::from_utf8(predictions_csv(&a.rows).unwrap()).unwrap();
    assert!(header.starts_with("scene,frame,proposal_id,conf,x,y,z,l,w,h,yaw,matched_gt,iou_before,iou_after\n"));
}

fn ring(frame: usize, center: [f64; 2], n: usize) -> PointSet {
    let mut p = PointSet::new(1);
    for r in 0..n {
        let a = r as f64 * 0.7;
        p.push([center[0] + 0.8 * a.cos(), center[1] + 0.4 * a.sin(), 0.8], &[0.5], 0.0, point_id(frame, r));
    }
    p
}

fn epa_scene(current_points: usize) -> (Scene, Vec<Vec<Box7>>) {
    let b = |f: usize| Box7::new([10.0 + 0.5 * f as f64, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap().with_velocity([5.0, 0.0]);
    let frames = (0..5)
        .map(|f| {
            let n = if f == 2 { current_points } else { 40 };
            Frame { index: f, cloud: ring(f, [b(f).center[0], 0.0], n), boxes: vec![b(f)] }
        })
        .collect();
    (Scene { frames }, (0..5).map(|f| vec![b(f)]).collect())
}

#[test]
fn epa_only_touches_sparse_proposals_in_training() {
    let cfg = tiny();
    let (scene, proposals) = epa_scene(30);
    let input = SceneInput { index: 0, scene: &scene, proposals, seed: 0 };
    assert!(epa_extras(&input, 2, 0, &cfg, true).is_none());

    let (scene, proposals) = epa_scene(10);
    let input = SceneInput { index: 0, scene: &scene, proposals, seed: 0 };
    let extras = epa_extras(&input, 2, 0, &cfg, true).expect("a sparse proposal is augmented");
    assert_eq!(extras.len(), 4 * 40);
    let b = input.proposals[2][0];
    assert!(extras.coords.iter().all(|p| (b.to_local(*p)[0]).abs() < 1.0));
    assert!(epa_extras(&input, 2, 0, &cfg, false).is_none());
}

#[test]
fn training_phases_follow_the_epoch_schedule() {
    let mut cfg = tiny();
    let scenes = generate_split(&cfg.scene, cfg.seed, "train", 2);
    let (_, short) = staged_train(&scenes, &cfg, &mut |_| {}).unwrap();
    assert_eq!(short.phases(), vec![Phase::FullCloud, Phase::FullCloud]);
    assert_eq!(short.materialisations, 0);
    cfg.train.epochs = 6;
    let (_, full) = staged_train(&scenes, &cfg, &mut |_| {}).unwrap();
    assert_eq!(full.phases()[..3], [Phase::FullCloud; 3]);
    assert_eq!(full.phases()[3..], [Phase::Focal; 3]);
    assert_eq!(full.materialisations, 2);
    assert!(full.epochs[3].stored_points > 0);
}

#[test]
fn toy_training_loss_goes_down() {
    let mut cfg = tiny();
    cfg.train.epochs = 12;
    cfg.train.batch_size = 1;
    cfg.train.lr = 1e-3;
    let scenes = generate_split(&cfg.scene, cfg.seed, "train", 3);
    let (_, report) = staged_train(&scenes, &cfg, &mut |_| {}).unwrap();
    let w = cfg.train.loss_window;
    assert!(report.steps.len() >= 3 * w, "{} steps", report.steps.len());
    let blocks: Vec<f64> =
        report.steps.chunks_exact(w).map(|c| c.iter().map(|s| s.loss).sum::<f64>() / w as f64).collect();
    for pair in blocks.windows(2) {
        assert!(pair[1] < pair[0], "{blocks:?}");
    }
}

#[test]
fn a_zero_drop_rate_reproduces_the_baseline() {
    let cfg = tiny();
    let scenes = generate_split(&cfg.scene, cfg.seed, "eval", 2);
    let m = model(&cfg);
    let (base, _) = evaluate_model(&m, &scenes, &cfg, PipelineOptions::default()).unwrap();
    let rows = robustness_sweep(&m, &scenes, &cfg, &DROP_RATES).unwrap();
    assert_eq!(rows.len(), 8);
    for r in rows.iter().filter(|r| r.rate == 0.0) {
        assert_eq!(r.metrics, base);
    }
    let total = robustness_sweep(&m, &scenes, &cfg, &[1.0]).unwrap();
    assert!(total.iter().all(|r| r.metrics.proposals == base.proposals));
}

#[test]
fn full_cloud_history_mode_stores_nothing() {
    let cfg = tiny();
    let scenes = generate_split(&cfg.scene, cfg.seed, "eval", 1);
    let opts = PipelineOptions { history: HistoryMode::FullCloud, ..Default::default() };
    let out = run_scene(0, &scenes[0], &model(&cfg), &cfg, opts).unwrap();
    assert_eq!(out.peak_points, 0);
    let focal = run_scene(0, &scenes[0], &model(&cfg), &cfg, PipelineOptions::default()).unwrap();
    assert!(focal.peak_points > 0);
    assert_eq!(focal.rows.len(), out.rows.len());
}

#[test]
fn ablation_variants_cover_the_grids() {
    let base = PipelineConfig::preset(Preset::Desk);
    let count = |g| ablation_variants(&base, g).len();
    assert_eq!(count(AblationGroup::Components), 5);
    assert_eq!(count(AblationGroup::Scorer), 4);
    assert_eq!(count(AblationGroup::Frames), 5);
    assert_eq!(count(AblationGroup::Grouping), 3);
    assert_eq!(count(AblationGroup::Ratios), 16);
    let sampling = ablation_variants(&base, AblationGroup::Sampling);
    assert_eq!(sampling[0].1, base);
    assert_eq!(sampling[1].1.model.k, base.model.k / 2);
    assert_eq!(sampling[1].1.model.current_samples(), base.model.current_samples() / 2);
    for g in AblationGroup::ALL {
        for (tag, cfg) in ablation_variants(&base, g) {
            cfg.validate().unwrap_or_else(|e| panic!("{tag}: {e}"));
        }
    }
}

#[test]
fn efficiency_bench_counts_match() {
    let cfg = tiny();
    let scenes = generate_split(&cfg.scene, cfg.seed, "eval", 1);
    let r = bench_efficiency(&cfg, &scenes).unwrap();
    assert!(r.full_cell_ratio >= 2.0);
    for row in &r.rows[2..] {
        assert_eq!(row.measured_cells, row.analytic_cells * row.proposals as u64, "{}", row.setting);
    }
    assert!(r.rows[3].analytic_cells > r.rows[2].analytic_cells);
}
