//! Turning scene frames and proposals into network inputs.

use ftkn_core::geometry::{build_trajectory, iou_bev, region_indices, sample_rows, Box7, PointSet, ProposalTrajectory};
use ftkn_core::model::{FrameSample, ProposalSample};
use ftkn_core::scaling::supervised_score;
use ftkn_core::ModelConfig;
use rand::Rng;

use crate::bank::SharedBank;
use crate::config::PipelineConfig;
use crate::error::Result;
use crate::rpn::mock_rpn;
use crate::scene::Scene;
use crate::seeds;

/// A scene with the proposals of every frame.
#[derive(Clone, Debug)]
pub struct SceneInput<'a> {
    pub index: usize,
    pub scene: &'a Scene,
    pub proposals: Vec<Vec<Box7>>,
    pub seed: u64,
}

impl<'a> SceneInput<'a> {
    pub fn new(index: usize, scene: &'a Scene, cfg: &PipelineConfig, seed: u64) -> Self {
        let proposals = scene
            .frames
            .iter()
            .enumerate()
            .map(|(f, fr)| mock_rpn(&fr.boxes, &cfg.rpn, seeds::derive(seed, "proposals", &[index as u64, f as u64])))
            .collect();
        Self { index, scene, proposals, seed }
    }

    /// First frame whose proposals are refined.
    pub fn first_refined(&self, current_frames: usize) -> usize {
        self.scene.len().saturating_sub(current_frames)
    }
}

/// Where historical points come from.
#[derive(Clone, Copy)]
pub enum History<'a> {
    /// The full cloud of each historical frame.
    FullCloud,
    /// Stored focal points; frames missing from the bank fall back to the
    /// full cloud.
    Bank(&'a SharedBank),
}

/// Random removal applied at inference for the robustness sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Drops {
    pub points: f64,
    pub boxes: f64,
}

/// Index of the ground-truth box with the highest BEV IoU, with that IoU.
pub fn best_match(b: &Box7, gt: &[Box7]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gt.iter().enumerate() {
        let iou = iou_bev(b, g);
        if best.is_none_or(|(_, v)| iou > v) {
            best = Some((j, iou));
        }
    }
    best
}

pub fn trajectory(
    input: &SceneInput<'_>,
    frame: usize,
    proposal: usize,
    cfg: &PipelineConfig,
    box_drop: f64,
) -> Result<ProposalTrajectory> {
    let t = cfg.model.frames;
    let mut rng = seeds::rng(input.seed, "box-drop", &[input.index as u64, frame as u64, proposal as u64]);
    let prev: Vec<Vec<Box7>> = (1..t)
        .map(|k| match frame.checked_sub(k) {
            Some(f) => input.proposals[f].iter().filter(|_| box_drop <= 0.0 || rng.random::<f64>() >= box_drop).copied().collect(),
            None => Vec::new(),
        })
        .collect();
    Ok(build_trajectory(&input.proposals[frame][proposal], &prev, t, cfg.data.trajectory_iou, cfg.model.frame_dt, proposal)?)
}

fn labels_for(points: &PointSet, gt: Option<&Box7>, eta: f64) -> Vec<f64> {
    points
        .coords
        .iter()
        .zip(&points.ids)
        .map(|(p, &id)| match gt {
            Some(g) if id >= 0 => supervised_score(*p, g, eta),
            _ => 0.0,
        })
        .collect()
}

/// Rows of `cloud` surviving a random point drop.
fn kept_rows(rows: Vec<usize>, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    if rate <= 0.0 {
        return rows;
    }
    rows.into_iter().filter(|_| rng.random::<f64>() >= rate).collect()
}

/// The current-frame sample of a proposal; shared by full forwards and
/// focal materialisation so both see the same points.
pub fn current_sample(input: &SceneInput<'_>, frame: usize, proposal: usize, model: &ModelConfig) -> PointSet {
    let b = &input.proposals[frame][proposal];
    let cloud = &input.scene.frames[frame].cloud;
    let mut rng = seeds::rng(input.seed, "sample", &[input.index as u64, frame as u64, proposal as u64, 0]);
    sample_rows(cloud, &region_indices(cloud, b), model.current_samples(), &mut rng).0
}

/// Build the network input of one proposal. With `labels`, per-point
/// supervision targets against the matched ground truth are attached.
pub fn build_sample(
    input: &SceneInput<'_>,
    frame: usize,
    proposal: usize,
    traj: &ProposalTrajectory,
    history: History<'_>,
    cfg: &PipelineConfig,
    drops: Drops,
    labels: bool,
) -> Result<ProposalSample> {
    let model = &cfg.model;
    let t = model.frames;
    let b = input.proposals[frame][proposal];
    let current = current_sample(input, frame, proposal, model);
    let gt_index = best_match(&b, &input.scene.frames[frame].boxes).filter(|&(_, iou)| iou > 0.0).map(|(j, _)| j);
    let current_labels =
        labels.then(|| labels_for(&current, gt_index.map(|j| &input.scene.frames[frame].boxes[j]), model.eta));
    let mut hist = Vec::with_capacity(t - 1);
    for k in 1..t {
        let reference = traj.boxes[t - 1 - k];
        let delta_t = k as f64 * model.frame_dt;
        let mut rng = seeds::rng(input.seed, "sample", &[input.index as u64, frame as u64, proposal as u64, k as u64]);
        let points = match frame.checked_sub(k) {
            None => {
                let mut p = PointSet::new(model.extra_dim);
                (0..model.k).for_each(|_| p.push_padding());
                p
            }
            Some(f) => {
                let stored = match history {
                    History::Bank(bank) => bank.fetch(f)?,
                    History::FullCloud => None,
                };
                let source = stored.as_ref().unwrap_or(&input.scene.frames[f].cloud);
                let rows = kept_rows(region_indices(source, &reference), drops.points, &mut rng);
                sample_rows(source, &rows, model.k, &mut rng).0
            }
        };
        let labels = labels.then(|| {
            let g = match (gt_index, frame.checked_sub(k)) {
                (Some(j), Some(f)) => input.scene.frames[f].boxes.get(j),
                _ => None,
            };
            labels_for(&points, g, model.eta)
        });
        hist.push(FrameSample { points, reference, delta_t, labels });
    }
    Ok(ProposalSample { proposal: b, current, current_labels, history: hist })
}

/// Extra points for a proposal whose region holds fewer than `threshold`
/// points: the regions of the same object in the `window` frames before
/// and after, moved into the proposal's pose at the current frame.
pub fn epa_extras(
    input: &SceneInput<'_>,
    frame: usize,
    proposal: usize,
    cfg: &PipelineConfig,
    training: bool,
) -> Option<PointSet> {
    if !training || !cfg.train.epa {
        return None;
    }
    let b = &input.proposals[frame][proposal];
    let cloud = &input.scene.frames[frame].cloud;
    if region_indices(cloud, b).len() >= cfg.train.epa_threshold {
        return None;
    }
    let w = cfg.train.epa_window as isize;
    let v = b.velocity_or_zero();
    let mut out = PointSet::new(cloud.extra_dim);
    for off in -w..=w {
        let f = frame as isize + off;
        if off == 0 || f < 0 || f as usize >= input.scene.len() {
            continue;
        }
        let f = f as usize;
        let dt = off as f64 * cfg.model.frame_dt;
        let mut projected = *b;
        projected.center[0] += v[0] * dt;
        projected.center[1] += v[1] * dt;
        let reference = match best_match(&projected, &input.proposals[f]) {
            Some((j, iou)) if iou >= cfg.data.trajectory_iou => input.proposals[f][j],
            _ => projected,
        };
        let other = &input.scene.frames[f].cloud;
        for i in region_indices(other, &reference) {
            let p = b.to_world(reference.to_local(other.coords[i]));
            out.push(p, other.extras_of(i), other.timestamps[i], other.ids[i]);
        }
    }
    (!out.is_empty()).then_some(out)
}
