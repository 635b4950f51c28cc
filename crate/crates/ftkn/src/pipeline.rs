//! Frame-by-frame refinement of one scene: proposals, trajectories,
//! single-frame condensation with focal storage, multi-frame fusion over
//! the stored history, decoding.

use std::time::Instant;

use ftkn_core::geometry::{iou_bev, PointSet};
use ftkn_core::memory::assign_unique_ids;
use ftkn_core::model::Prediction;
use ftkn_core::FasterModel;
use rayon::prelude::*;
use serde::Serialize;

use crate::bank::SharedBank;
use crate::config::PipelineConfig;
use crate::error::Result;
use crate::eval::{greedy_match, PredictionRow};
use crate::samples::{build_sample, current_sample, trajectory, Drops, History, SceneInput};
use crate::scene::Scene;
use crate::seeds;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HistoryMode {
    /// History from the focal bank, filled as frames are processed.
    #[default]
    Focal,
    /// History sampled from full clouds; nothing is stored.
    FullCloud,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PipelineOptions {
    pub history: HistoryMode,
    pub drops: Drops,
}

/// Per-frame counters; deterministic for a given config and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FrameTelemetry {
    pub scene: usize,
    pub frame: usize,
    pub proposals: usize,
    pub refined: bool,
    pub ssp_trace: String,
    pub msp_trace: String,
    pub attention_cells: u64,
    pub mul_adds: u64,
    pub stored_points: usize,
}

#[derive(Clone, Debug, Default)]
pub struct SceneOutput {
    pub rows: Vec<PredictionRow>,
    pub refined_frames: Vec<(usize, usize)>,
    pub telemetry: Vec<FrameTelemetry>,
    pub peak_points: usize,
    pub wall_ms: f64,
}

pub fn trace_string<T: std::fmt::Debug>(t: &[T]) -> String {
    t.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ").replace(", ", "x")
}

enum Work {
    Focal(PointSet),
    Full(Box<Prediction>),
}

/// Run one scene. Frames before the refined tail only condense their
/// proposals to fill the bank.
pub fn run_scene(
    index: usize,
    scene: &Scene,
    model: &FasterModel,
    cfg: &PipelineConfig,
    opts: PipelineOptions,
) -> Result<SceneOutput> {
    let start = Instant::now();
    let cfg = PipelineConfig { model: model.config.clone(), ..cfg.clone() };
    let input = SceneInput::new(index, scene, &cfg, cfg.seed);
    let first = input.first_refined(cfg.data.current_frames);
    let warm_from = match opts.history {
        HistoryMode::Focal => first.saturating_sub(cfg.model.frames - 1),
        HistoryMode::FullCloud => first,
    };
    let bank = SharedBank::new(cfg.data.t_max);
    let mut out = SceneOutput::default();
    for f in warm_from..scene.len() {
        let refine = f >= first;
        let props = &input.proposals[f];
        let history = match opts.history {
            HistoryMode::Focal => History::Bank(&bank),
            HistoryMode::FullCloud => History::FullCloud,
        };
        let work: Vec<Result<Work>> = (0..props.len())
            .into_par_iter()
            .map(|p| {
                let mut rng = seeds::rng(cfg.seed, "infer", &[index as u64, f as u64, p as u64]);
                if refine {
                    let traj = trajectory(&input, f, p, &cfg, opts.drops.boxes)?;
                    let sample = build_sample(&input, f, p, &traj, history, &cfg, opts.drops, false)?;
                    Ok(Work::Full(Box::new(model.predict(&sample, &mut rng)?)))
                } else {
                    let current = current_sample(&input, f, p, &cfg.model);
                    Ok(Work::Focal(model.focal_points(&props[p], &current, &mut rng)?))
                }
            })
            .collect();
        let work = work.into_iter().collect::<Result<Vec<_>>>()?;
        let mut tel = FrameTelemetry { scene: index, frame: f, proposals: props.len(), refined: refine, ..Default::default() };
        let mut focal = Vec::with_capacity(work.len());
        let mut preds = Vec::new();
        for w in work {
            match w {
                Work::Focal(p) => focal.push(p),
                Work::Full(pred) => {
                    if tel.ssp_trace.is_empty() {
                        tel.ssp_trace = trace_string(&pred.telemetry.ssp_trace);
                        tel.msp_trace = trace_string(&pred.telemetry.msp_trace);
                    }
                    tel.attention_cells += pred.telemetry.ops.attention_cells;
                    tel.mul_adds += pred.telemetry.ops.mul_adds;
                    focal.push(pred.focal.clone());
                    preds.push(*pred);
                }
            }
        }
        if opts.history == HistoryMode::Focal {
            let unique = if focal.is_empty() { PointSet::new(cfg.model.extra_dim) } else { assign_unique_ids(&focal)?.0 };
            bank.store(f, unique)?;
        }
        tel.stored_points = bank.stored_points();
        if refine {
            let gt = &scene.frames[f].boxes;
            let scores: Vec<f64> = props.iter().map(|b| b.score).collect();
            let matches = greedy_match(props, &scores, gt, cfg.eval.match_iou);
            for (p, (pred, m)) in preds.iter().zip(matches).enumerate() {
                let (matched_gt, iou_before, iou_after) = match m {
                    Some((j, iou)) => (Some(j), iou, iou_bev(&pred.refined, &gt[j])),
                    None => (None, 0.0, 0.0),
                };
                out.rows.push(PredictionRow {
                    scene: index,
                    frame: f,
                    proposal_id: p,
                    proposal: props[p],
                    refined: pred.refined,
                    confidence: pred.refinement.confidence,
                    matched_gt,
                    iou_before,
                    iou_after,
                });
            }
            out.refined_frames.push((index, f));
        }
        out.telemetry.push(tel);
    }
    out.peak_points = bank.peak_points();
    out.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

/// Every scene in order; scenes are processed one after another and
/// proposals within a frame in parallel.
pub fn run_pipeline(scenes: &[Scene], model: &FasterModel, cfg: &PipelineConfig, opts: PipelineOptions) -> Result<SceneOutput> {
    let mut all = SceneOutput::default();
    for (i, s) in scenes.iter().enumerate() {
        let o = run_scene(i, s, model, cfg, opts)?;
        all.rows.extend(o.rows);
        all.refined_frames.extend(o.refined_frames);
        all.telemetry.extend(o.telemetry);
        all.peak_points = all.peak_points.max(o.peak_points);
        all.wall_ms += o.wall_ms;
    }
    Ok(all)
}

/// Size the global worker pool from `FTKN_THREADS` when set. Later calls
/// are no-ops.
pub fn init_threads() {
    if let Some(n) = std::env::var("FTKN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
