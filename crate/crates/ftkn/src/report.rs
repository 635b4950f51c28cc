//! CSV and summary-text output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{io_err, Result};
use crate::eval::{Metrics, PredictionRow};

#[derive(Serialize)]
struct PredictionCsv {
    scene: usize,
    frame: usize,
    proposal_id: usize,
    conf: f64,
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
    matched_gt: i64,
    iou_before: f64,
    iou_after: f64,
}

/// Serialize rows with a header; floats use the shortest round-trip form,
/// so equal values always produce equal bytes.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err("<memory>"))?;
    Ok(w.into_inner().expect("in-memory writer"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    fs::write(path, csv_bytes(rows)?).map_err(io_err(path))
}

pub fn predictions_csv(rows: &[PredictionRow]) -> Result<Vec<u8>> {
    let out: Vec<PredictionCsv> = rows
        .iter()
        .map(|r| PredictionCsv {
            scene: r.scene,
            frame: r.frame,
            proposal_id: r.proposal_id,
            conf: r.confidence,
            x: r.refined.center[0],
            y: r.refined.center[1],
            z: r.refined.center[2],
            l: r.refined.size[0],
            w: r.refined.size[1],
            h: r.refined.size[2],
            yaw: r.refined.yaw,
            matched_gt: r.matched_gt.map_or(-1, |j| j as i64),
            iou_before: r.iou_before,
            iou_after: r.iou_after,
        })
        .collect();
    csv_bytes(&out)
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    fs::write(path, predictions_csv(rows)?).map_err(io_err(path))
}

/// A named metric set, one CSV row per experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaggedMetrics {
    pub group: String,
    pub variant: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

pub fn metrics_text(m: &Metrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frames {}  gt boxes {}  proposals {}  matched {}", m.frames, m.gt_boxes, m.proposals, m.matched);
    let _ = writeln!(
        s,
        "mean matched IoU  before {:.4}  after {:.4}  gain {:+.4}",
        m.mean_iou_before, m.mean_iou_after, m.iou_gain
    );
    let _ = writeln!(s, "recall@0.5  before {:.4}  after {:.4}", m.recall50_before, m.recall50_after);
    let _ = writeln!(s, "recall@0.7  before {:.4}  after {:.4}", m.recall70_before, m.recall70_after);
    for b in &m.buckets {
        let _ = writeln!(
            s,
            "  {:<7} matched {:>5}  before {:.4}  after {:.4}",
            b.bucket, b.matched, b.mean_iou_before, b.mean_iou_after
        );
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}
