//! Boxes, point sets, region sampling, point-box offset features, BEV IoU
//! and proposal trajectories.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Mlp;
use crate::tensor::Tensor;

/// Identifier of padding rows.
pub const PAD_ID: i64 = -1;

/// Offsets to the 9 keypoints.
pub const OFFSET_FEATURES: usize = 27;

/// Oriented 3D box: center, (length, width, height), heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: Option<[f64; 2]>,
    pub score: f64,
    pub class_id: u32,
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * libm::floor((a + PI) / two_pi);
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

impl Box7 {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Self { center, size, yaw: wrap_angle(yaw), velocity: None, score: 1.0, class_id: 0 };
        b.validate()?;
        Ok(b)
    }

    pub fn with_velocity(mut self, v: [f64; 2]) -> Self {
        self.velocity = Some(v);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidBox(format!("non-positive size {:?}", self.size)));
        }
        if self.center.iter().any(|c| !c.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite pose".into()));
        }
        Ok(())
    }

    pub fn velocity_or_zero(&self) -> [f64; 2] {
        self.velocity.unwrap_or([0.0, 0.0])
    }

    /// Diagonal of the footprint.
    pub fn bev_diagonal(&self) -> f64 {
        libm::sqrt(self.size[0] * self.size[0] + self.size[1] * self.size[1])
    }

    /// World point expressed in the box frame (origin at the center, x along heading).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = (libm::sin(self.yaw), libm::cos(self.yaw));
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = (libm::sin(self.yaw), libm::cos(self.yaw));
        [
            self.center[0] + c * p[0] - s * p[1],
            self.center[1] + s * p[0] + c * p[1],
            self.center[2] + p[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        (0..3).all(|i| l[i].abs() <= 0.5 * self.size[i])
    }

    /// Footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (0.5 * self.size[0], 0.5 * self.size[1]);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        let mut out = [[0.0; 2]; 4];
        for (o, p) in out.iter_mut().zip(local) {
            let w = self.to_world([p[0], p[1], 0.0]);
            *o = [w[0], w[1]];
        }
        out
    }
}

/// Center followed by the 8 corners. Corner `c` (keypoint `c + 1`) uses
/// signs `x: bit 2, y: bit 1, z: bit 0`, a clear bit meaning `+`.
pub fn box_keypoints(b: &Box7) -> [[f64; 3]; 9] {
    let mut out = [[0.0; 3]; 9];
    out[0] = b.center;
    for c in 0..8 {
        let sx = if c & 4 == 0 { 1.0 } else { -1.0 };
        let sy = if c & 2 == 0 { 1.0 } else { -1.0 };
        let sz = if c & 1 == 0 { 1.0 } else { -1.0 };
        out[c + 1] = b.to_world([sx * 0.5 * b.size[0], sy * 0.5 * b.size[1], sz * 0.5 * b.size[2]]);
    }
    out
}

/// Points with per-point extra features, relative timestamps and stable ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub coords: Vec<[f64; 3]>,
    pub extras: Vec<f64>,
    pub extra_dim: usize,
    pub timestamps: Vec<f64>,
    pub ids: Vec<i64>,
}

impl PointSet {
    pub fn new(extra_dim: usize) -> Self {
        Self { extra_dim, ..Default::default() }
    }

    pub fn with_capacity(extra_dim: usize, n: usize) -> Self {
        Self {
            coords: Vec::with_capacity(n),
            extras: Vec::with_capacity(n * extra_dim),
            extra_dim,
            timestamps: Vec::with_capacity(n),
            ids: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn push(&mut self, coord: [f64; 3], extras: &[f64], timestamp: f64, id: i64) {
        debug_assert_eq!(extras.len(), self.extra_dim);
        self.coords.push(coord);
        self.extras.extend_from_slice(extras);
        self.timestamps.push(timestamp);
        self.ids.push(id);
    }

    pub fn push_padding(&mut self) {
        self.coords.push([0.0; 3]);
        self.extras.extend(core::iter::repeat_n(0.0, self.extra_dim));
        self.timestamps.push(0.0);
        self.ids.push(PAD_ID);
    }

    pub fn extras_of(&self, i: usize) -> &[f64] {
        &self.extras[i * self.extra_dim..(i + 1) * self.extra_dim]
    }

    pub fn select(&self, idx: &[usize]) -> PointSet {
        let mut out = PointSet::with_capacity(self.extra_dim, idx.len());
        for &i in idx {
            out.push(self.coords[i], self.extras_of(i), self.timestamps[i], self.ids[i]);
        }
        out
    }

    pub fn append(&mut self, other: &PointSet) {
        assert_eq!(self.extra_dim, other.extra_dim, "extra feature width");
        self.coords.extend_from_slice(&other.coords);
        self.extras.extend_from_slice(&other.extras);
        self.timestamps.extend_from_slice(&other.timestamps);
        self.ids.extend_from_slice(&other.ids);
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }
}

/// Horizontal radius of the sampling cylinder around a box.
pub fn cylinder_radius(b: &Box7) -> f64 {
    1.2 * libm::sqrt(0.25 * b.size[0] * b.size[0] + 0.25 * b.size[1] * b.size[1])
}

pub fn in_cylinder(p: [f64; 3], b: &Box7) -> bool {
    let dx = p[0] - b.center[0];
    let dy = p[1] - b.center[1];
    let r = cylinder_radius(b);
    dx * dx + dy * dy <= r * r && (p[2] - b.center[2]).abs() <= 0.6 * b.size[2]
}

/// Rows of `cloud` inside the sampling cylinder of `b`, ascending.
pub fn region_indices(cloud: &PointSet, b: &Box7) -> Vec<usize> {
    (0..cloud.len()).filter(|&i| in_cylinder(cloud.coords[i], b)).collect()
}

/// Uniformly sample `count` in-cylinder points without replacement; short
/// regions are padded with zero rows carrying [`PAD_ID`].
pub fn cylindrical_sample(cloud: &PointSet, b: &Box7, count: usize, seed: u64) -> (PointSet, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cylindrical_sample_with(cloud, b, count, &mut rng)
}

pub fn cylindrical_sample_with<R: Rng + ?Sized>(
    cloud: &PointSet,
    b: &Box7,
    count: usize,
    rng: &mut R,
) -> (PointSet, Vec<bool>) {
    let region = region_indices(cloud, b);
    sample_rows(cloud, &region, count, rng)
}

/// Sample `count` of `candidates` (rows of `cloud`) and pad the shortfall.
pub fn sample_rows<R: Rng + ?Sized>(
    cloud: &PointSet,
    candidates: &[usize],
    count: usize,
    rng: &mut R,
) -> (PointSet, Vec<bool>) {
    let mut chosen: Vec<usize> = if candidates.len() <= count {
        candidates.to_vec()
    } else {
        let mut pick: Vec<usize> = index::sample(rng, candidates.len(), count)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        pick.sort_unstable();
        pick
    };
    chosen.truncate(count);
    let mut out = cloud.select(&chosen);
    while out.len() < count {
        out.push_padding();
    }
    let mask = out.pad_mask();
    (out, mask)
}

pub fn keypoint_offsets(p: [f64; 3], keypoints: &[[f64; 3]; 9]) -> [f64; OFFSET_FEATURES] {
    let mut out = [0.0; OFFSET_FEATURES];
    for (j, k) in keypoints.iter().enumerate() {
        for a in 0..3 {
            out[3 * j + a] = p[a] - k[a];
        }
    }
    out
}

/// Per-point `[offsets to the 9 keypoints of b, extras]`; padding rows are zero.
pub fn geometry_features(sample: &PointSet, mask: &[bool], b: &Box7) -> Tensor {
    let width = OFFSET_FEATURES + sample.extra_dim;
    let kps = box_keypoints(b);
    let mut data = vec![0.0; sample.len() * width];
    for i in 0..sample.len() {
        if !mask[i] {
            continue;
        }
        let row = &mut data[i * width..(i + 1) * width];
        row[..OFFSET_FEATURES].copy_from_slice(&keypoint_offsets(sample.coords[i], &kps));
        row[OFFSET_FEATURES..].copy_from_slice(sample.extras_of(i));
    }
    Tensor::matrix(sample.len(), width, data)
}

/// Per-point `[offsets to the 9 keypoints of the current box, delta_t]`.
pub fn motion_features(sample: &PointSet, mask: &[bool], current: &Box7, delta_t: f64) -> Tensor {
    let width = OFFSET_FEATURES + 1;
    let kps = box_keypoints(current);
    let mut data = vec![0.0; sample.len() * width];
    for i in 0..sample.len() {
        if !mask[i] {
            continue;
        }
        let row = &mut data[i * width..(i + 1) * width];
        row[..OFFSET_FEATURES].copy_from_slice(&keypoint_offsets(sample.coords[i], &kps));
        row[OFFSET_FEATURES] = delta_t;
    }
    Tensor::matrix(sample.len(), width, data)
}

/// Maps raw per-point features to token embeddings.
pub trait TokenEncoder {
    fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var>;
}

impl TokenEncoder for Mlp {
    fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.forward(g, x)
    }
}

/// Leaves features untouched.
pub struct PassThrough;

impl TokenEncoder for PassThrough {
    fn encode(&self, _g: &mut Graph<'_>, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Geometry tokens of a sampled region; padding rows come out as zeros.
pub fn geometry_embed<E: TokenEncoder + ?Sized>(
    g: &mut Graph<'_>,
    encoder: &E,
    sample: &PointSet,
    mask: &[bool],
    b: &Box7,
) -> Result<Var> {
    let x = g.constant(geometry_features(sample, mask, b));
    let y = encoder.encode(g, x)?;
    g.mask_rows(y, mask)
}

/// Motion tokens of historical points against the current box.
pub fn motion_embed<E: TokenEncoder + ?Sized>(
    g: &mut Graph<'_>,
    encoder: &E,
    sample: &PointSet,
    mask: &[bool],
    current: &Box7,
    delta_t: f64,
) -> Result<Var> {
    let x = g.constant(motion_features(sample, mask, current, delta_t));
    let y = encoder.encode(g, x)?;
    g.mask_rows(y, mask)
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman clip of `subject` by the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = core::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let cp = cross(a, b, p);
            let cq = cross(a, b, q);
            if cp >= 0.0 {
                out.push(p);
            }
            if (cp >= 0.0) != (cq >= 0.0) {
                let t = cp / (cp - cq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Bird's-eye-view intersection over union of two rotated footprints.
pub fn iou_bev(a: &Box7, b: &Box7) -> f64 {
    let area_a = a.size[0] * a.size[1];
    let area_b = b.size[0] * b.size[1];
    if !(area_a > 0.0) || !(area_b > 0.0) {
        return 0.0;
    }
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let reach = 0.5 * (a.bev_diagonal() + b.bev_diagonal());
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners())).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Box chain of one proposal over `T` frames, oldest first; the last entry
/// is the current proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalTrajectory {
    pub boxes: Vec<Box7>,
    pub valid: Vec<bool>,
    pub proposal_id: usize,
}

/// Chain `current` backwards through `prev_frames` (`prev_frames[0]` is the
/// previous frame). Each step takes the best-IoU box when it reaches
/// `iou_thresh`, otherwise a proxy moved back by `velocity * frame_dt`.
pub fn build_trajectory(
    current: &Box7,
    prev_frames: &[Vec<Box7>],
    t: usize,
    iou_thresh: f64,
    frame_dt: f64,
    proposal_id: usize,
) -> Result<ProposalTrajectory> {
    if t == 0 {
        return Err(Error::Config("trajectory length must be at least 1".into()));
    }
    let mut boxes = Vec::with_capacity(t);
    let mut valid = Vec::with_capacity(t);
    boxes.push(*current);
    valid.push(true);
    let mut last = *current;
    for step in 0..t - 1 {
        let candidates: &[Box7] = prev_frames.get(step).map_or(&[], |v| v.as_slice());
        let mut best: Option<(f64, &Box7)> = None;
        for c in candidates {
            let iou = iou_bev(&last, c);
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, c));
            }
        }
        let next = match best {
            Some((iou, b)) if iou >= iou_thresh => {
                valid.push(true);
                *b
            }
            _ => {
                valid.push(false);
                let v = last.velocity_or_zero();
                let mut proxy = last;
                proxy.center[0] -= v[0] * frame_dt;
                proxy.center[1] -= v[1] * frame_dt;
                proxy
            }
        };
        boxes.push(next);
        last = next;
    }
    boxes.reverse();
    valid.reverse();
    Ok(ProposalTrajectory { boxes, valid, proposal_id })
}
