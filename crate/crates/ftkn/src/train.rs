//! Staged training: history from full clouds first, then from focal
//! points materialised by the model itself, refreshed once.

use std::time::Instant;

use ftkn_core::decoder::RefineTarget;
use ftkn_core::geometry::{PointSet, ProposalTrajectory};
use ftkn_core::graph::Graph;
use ftkn_core::memory::assign_unique_ids;
use ftkn_core::optim::{AdamOneCycle, GradBuffer};
use ftkn_core::scaling::ScoringContext;
use ftkn_core::{FasterModel, Scorer};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::bank::SharedBank;
use crate::config::PipelineConfig;
use crate::error::{HarnessError, Result};
use crate::samples::{best_match, build_sample, current_sample, epa_extras, trajectory, Drops, History, SceneInput};
use crate::scene::Scene;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FullCloud,
    Focal,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub items: usize,
    pub mean_loss: f64,
    pub stored_points: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub materialisations: usize,
    pub wall_s: f64,
}

impl TrainReport {
    pub fn phases(&self) -> Vec<Phase> {
        self.epochs.iter().map(|e| e.phase).collect()
    }
}

struct Item {
    scene: usize,
    frame: usize,
    proposal: usize,
    traj: ProposalTrajectory,
}

/// Seed of the proposal streams of the training split.
pub fn train_seed(run_seed: u64) -> u64 {
    seeds::derive(run_seed, "train-split", &[])
}

/// Target of a proposal: its best IoU with the frame's ground truth.
pub fn refine_target(proposal: &ftkn_core::Box7, gt: &[ftkn_core::Box7]) -> RefineTarget {
    match best_match(proposal, gt) {
        Some((j, iou)) => RefineTarget { iou, gt: Some(gt[j]) },
        None => RefineTarget { iou: 0.0, gt: None },
    }
}

/// Focal points of every frame that can serve as history, produced by the
/// current model; with EPA, sparse proposals also store borrowed points.
pub fn materialise(model: &FasterModel, input: &SceneInput<'_>, cfg: &PipelineConfig, training: bool) -> Result<SharedBank> {
    let bank = SharedBank::new(cfg.data.t_max);
    let first = input.first_refined(cfg.data.current_frames);
    let extra_dim = cfg.model.extra_dim;
    for f in first.saturating_sub(cfg.model.frames - 1)..input.scene.len() {
        let props = &input.proposals[f];
        let work: Vec<Result<(PointSet, Option<PointSet>)>> = (0..props.len())
            .into_par_iter()
            .map(|p| {
                let mut rng = seeds::rng(cfg.seed, "materialise", &[input.index as u64, f as u64, p as u64]);
                let current = current_sample(input, f, p, &cfg.model);
                let focal = model.focal_points(&props[p], &current, &mut rng)?;
                Ok((focal, epa_extras(input, f, p, cfg, training)))
            })
            .collect();
        let work = work.into_iter().collect::<Result<Vec<_>>>()?;
        let focal: Vec<PointSet> = work.iter().map(|w| w.0.clone()).collect();
        let unique = if focal.is_empty() { PointSet::new(extra_dim) } else { assign_unique_ids(&focal)?.0 };
        bank.store(f, unique)?;
        let mut extras = PointSet::new(extra_dim);
        for e in work.iter().filter_map(|w| w.1.as_ref()) {
            extras.append(e);
        }
        if !extras.is_empty() {
            bank.augment(f, &extras)?;
        }
    }
    Ok(bank)
}

fn smoothed(losses: &[f64], window: usize) -> f64 {
    let w = window.max(1).min(losses.len());
    losses[losses.len() - w..].iter().sum::<f64>() / w as f64
}

pub fn staged_train(
    scenes: &[Scene],
    cfg: &PipelineConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(FasterModel, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let tc = &cfg.train;
    if tc.epochs == 0 {
        return Err(HarnessError::Config("train.epochs must be at least 1".into()));
    }
    let mut model = FasterModel::new(cfg.model.clone(), seeds::derive(cfg.seed, "init", &[]))?;
    let split = train_seed(cfg.seed);
    let inputs: Vec<SceneInput<'_>> = scenes.iter().enumerate().map(|(i, s)| SceneInput::new(i, s, cfg, split)).collect();
    let mut items = Vec::new();
    for input in &inputs {
        for f in input.first_refined(cfg.data.current_frames)..input.scene.len() {
            for p in 0..input.proposals[f].len() {
                let traj = trajectory(input, f, p, cfg, 0.0)?;
                items.push(Item { scene: input.index, frame: f, proposal: p, traj });
            }
        }
    }
    if items.is_empty() {
        return Err(HarnessError::Config("the training split has no proposals".into()));
    }
    let per_epoch = items.len().div_ceil(tc.batch_size);
    let total = tc.epochs * per_epoch;
    let mut opt = AdamOneCycle::new(&model.store, tc.lr, total);
    let labels = model.config.scorer == Scorer::Supervised;
    let mut banks: Option<Vec<SharedBank>> = None;
    let mut report = TrainReport::default();
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let refresh = epoch == tc.focal_epoch || (tc.refresh_epoch == Some(epoch) && epoch > tc.focal_epoch);
        if refresh {
            let built = inputs.iter().map(|inp| materialise(&model, inp, cfg, true)).collect::<Result<Vec<_>>>()?;
            banks = Some(built);
            report.materialisations += 1;
        }
        let phase = if banks.is_some() { Phase::Focal } else { Phase::FullCloud };
        order.shuffle(&mut seeds::rng(cfg.seed, "shuffle", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let tau = if total > 1 {
                tc.tau_start + (tc.tau_end - tc.tau_start) * step as f64 / (total - 1) as f64
            } else {
                tc.tau_start
            };
            let scale = 1.0 / batch.len() as f64;
            let parts: Vec<Result<(GradBuffer, f64)>> = batch
                .par_iter()
                .map(|&it| {
                    let item = &items[it];
                    let input = &inputs[item.scene];
                    let history = match &banks {
                        Some(b) => History::Bank(&b[item.scene]),
                        None => History::FullCloud,
                    };
                    let sample =
                        build_sample(input, item.frame, item.proposal, &item.traj, history, cfg, Drops::default(), labels)?;
                    let target = refine_target(&sample.proposal, &input.scene.frames[item.frame].boxes);
                    let mut rng = seeds::rng(cfg.seed, "train", &[epoch as u64, it as u64]);
                    let mut g = Graph::new(&model.store);
                    let mut ctx = ScoringContext::new(model.config.scorer, &mut rng);
                    ctx.tau = tau;
                    ctx.allow_empty = true;
                    let (loss, _) = model.loss(&mut g, &sample, &target, &mut ctx)?;
                    let value = g.value(loss).data()[0];
                    let grads = g.backward(loss)?;
                    let mut buf = GradBuffer::new(&model.store);
                    buf.add(&grads, scale);
                    Ok((buf, value))
                })
                .collect();
            let mut sum = GradBuffer::new(&model.store);
            let mut batch_loss = 0.0;
            for part in parts {
                let (buf, value) = part?;
                sum.merge(&buf);
                batch_loss += value * scale;
            }
            if tc.grad_clip > 0.0 {
                let norm = sum.global_norm();
                if norm > tc.grad_clip {
                    sum.scale(tc.grad_clip / norm);
                }
            }
            let lr = opt.step(&mut model.store, &sum, step);
            losses.push(batch_loss);
            epoch_loss += batch_loss * batch.len() as f64;
            report.steps.push(StepRecord {
                step,
                epoch,
                lr,
                tau,
                loss: batch_loss,
                smoothed: smoothed(&losses, tc.loss_window),
            });
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            phase,
            items: items.len(),
            mean_loss: epoch_loss / items.len() as f64,
            stored_points: banks.as_ref().map_or(0, |b| b.iter().map(SharedBank::stored_points).sum()),
        };
        progress(&rec);
        report.epochs.push(rec);
    }
    report.wall_s = start.elapsed().as_secs_f64();
    Ok((model, report))
}
