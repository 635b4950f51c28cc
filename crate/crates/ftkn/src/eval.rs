//! Matched-IoU evaluation of refined proposals.

use std::collections::BTreeMap;

use ftkn_core::geometry::{iou_bev, Box7};
use serde::Serialize;

use crate::config::EvalConfig;
use crate::scene::{points_in_box, Scene};

/// Greedy matching in descending score order (ties to the lower index):
/// each box takes the unmatched ground truth of highest IoU when that IoU
/// reaches `min_iou`. Returns `(gt index, iou)` per box.
pub fn greedy_match(boxes: &[Box7], scores: &[f64], gt: &[Box7], min_iou: f64) -> Vec<Option<(usize, f64)>> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let mut out = vec![None; boxes.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = iou_bev(&boxes[i], g);
            if best.is_none_or(|(_, v)| iou > v) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best.filter(|&(_, iou)| iou >= min_iou && iou > 0.0) {
            taken[j] = true;
            out[i] = Some((j, iou));
        }
    }
    out
}

/// One refined proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub scene: usize,
    pub frame: usize,
    pub proposal_id: usize,
    pub proposal: Box7,
    pub refined: Box7,
    pub confidence: f64,
    pub matched_gt: Option<usize>,
    pub iou_before: f64,
    pub iou_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BucketMetrics {
    pub bucket: String,
    pub matched: usize,
    pub mean_iou_before: f64,
    pub mean_iou_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub frames: usize,
    pub gt_boxes: usize,
    pub proposals: usize,
    pub matched: usize,
    pub mean_iou_before: f64,
    pub mean_iou_after: f64,
    pub iou_gain: f64,
    pub recall50_before: f64,
    pub recall50_after: f64,
    pub recall70_before: f64,
    pub recall70_after: f64,
    #[serde(skip)]
    pub buckets: Vec<BucketMetrics>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Metrics over the evaluated `(scene, frame)` pairs.
pub fn evaluate(rows: &[PredictionRow], frames: &[(usize, usize)], scenes: &[Scene], cfg: &EvalConfig) -> Metrics {
    let mut by_frame: BTreeMap<(usize, usize), Vec<&PredictionRow>> = frames.iter().map(|&k| (k, Vec::new())).collect();
    for r in rows {
        by_frame.entry((r.scene, r.frame)).or_default().push(r);
    }
    let names = ["sparse", "medium", "dense"];
    let mut bucket_ious: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); names.len()];
    let (mut before, mut after) = (Vec::new(), Vec::new());
    let mut hits = [0usize; 4];
    let mut gt_boxes = 0;
    for (&(s, f), rs) in &by_frame {
        let frame = &scenes[s].frames[f];
        let gt = &frame.boxes;
        gt_boxes += gt.len();
        for r in rs {
            if let Some(j) = r.matched_gt {
                before.push(r.iou_before);
                after.push(r.iou_after);
                let n = points_in_box(&frame.cloud, &gt[j]);
                let bucket = cfg.bucket_edges.iter().position(|&e| n < e).unwrap_or(names.len() - 1);
                bucket_ious[bucket].0.push(r.iou_before);
                bucket_ious[bucket].1.push(r.iou_after);
            }
        }
        let props: Vec<Box7> = rs.iter().map(|r| r.proposal).collect();
        let prop_scores: Vec<f64> = rs.iter().map(|r| r.proposal.score).collect();
        let refined: Vec<Box7> = rs.iter().map(|r| r.refined).collect();
        let conf: Vec<f64> = rs.iter().map(|r| r.confidence).collect();
        for (slot, (boxes, scores, thr)) in [
            (&props, &prop_scores, 0.5),
            (&refined, &conf, 0.5),
            (&props, &prop_scores, 0.7),
            (&refined, &conf, 0.7),
        ]
        .into_iter()
        .enumerate()
        {
            hits[slot] += greedy_match(boxes, scores, gt, thr).iter().flatten().count();
        }
    }
    let recall = |h: usize| if gt_boxes == 0 { 0.0 } else { h as f64 / gt_boxes as f64 };
    let (mb, ma) = (mean(&before), mean(&after));
    Metrics {
        frames: by_frame.len(),
        gt_boxes,
        proposals: rows.len(),
        matched: before.len(),
        mean_iou_before: mb,
        mean_iou_after: ma,
        iou_gain: ma - mb,
        recall50_before: recall(hits[0]),
        recall50_after: recall(hits[1]),
        recall70_before: recall(hits[2]),
        recall70_after: recall(hits[3]),
        buckets: names
            .iter()
            .zip(&bucket_ious)
            .map(|(n, (b, a))| BucketMetrics {
                bucket: n.to_string(),
                matched: b.len(),
                mean_iou_before: mean(b),
                mean_iou_after: mean(a),
            })
            .collect(),
    }
}
