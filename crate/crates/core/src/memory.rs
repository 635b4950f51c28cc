//! Deduplicated per-frame storage of focal points.
//!
//! A point is identified by the frame it was captured in and its row in
//! that frame's cloud; coordinates are never compared.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{PointSet, PAD_ID};

/// Default retention window in frames.
pub const DEFAULT_T_MAX: usize = 32;

const ROW_BITS: u32 = 32;

/// Global identifier of row `row` of frame `frame`'s cloud.
pub fn point_id(frame: usize, row: usize) -> i64 {
    ((frame as i64) << ROW_BITS) | row as i64
}

/// Inverse of [`point_id`]; `None` for padding.
pub fn split_point_id(id: i64) -> Option<(usize, usize)> {
    (id >= 0).then(|| ((id >> ROW_BITS) as usize, (id & ((1 << ROW_BITS) - 1)) as usize))
}

/// Merge per-proposal samples into one table of unique points.
///
/// Returns the table `P`, rows in ascending identifier order, and for each
/// sample the row of `P` holding each sampled point (`-1` for padding).
pub fn assign_unique_ids(samples: &[PointSet]) -> Result<(PointSet, Vec<Vec<i64>>)> {
    let extra_dim = samples.first().map_or(0, |s| s.extra_dim);
    if let Some(s) = samples.iter().find(|s| s.extra_dim != extra_dim) {
        return Err(Error::Dimension {
            op: "assign_unique_ids",
            detail: format!("extra width {} vs {extra_dim}", s.extra_dim),
        });
    }
    let mut first_seen: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for (si, s) in samples.iter().enumerate() {
        for (ri, &id) in s.ids.iter().enumerate() {
            if id != PAD_ID {
                first_seen.entry(id).or_insert((si, ri));
            }
        }
    }
    let mut table = PointSet::with_capacity(extra_dim, first_seen.len());
    let mut row_of: BTreeMap<i64, i64> = BTreeMap::new();
    for (row, (&id, &(si, ri))) in first_seen.iter().enumerate() {
        let s = &samples[si];
        table.push(s.coords[ri], s.extras_of(ri), s.timestamps[ri], id);
        row_of.insert(id, row as i64);
    }
    let index = samples
        .iter()
        .map(|s| s.ids.iter().map(|id| if *id == PAD_ID { -1 } else { row_of[id] }).collect())
        .collect();
    Ok((table, index))
}

/// Gather the sorted unique non-sentinel rows of `i_star` from `p`.
pub fn finalize_focal(i_star: &[Vec<i64>], p: &PointSet) -> Result<PointSet> {
    let mut rows: Vec<usize> = Vec::new();
    for &r in i_star.iter().flatten() {
        if r < 0 {
            continue;
        }
        let r = r as usize;
        if r >= p.len() {
            return Err(Error::Dimension { op: "finalize_focal", detail: format!("row {r} of {}", p.len()) });
        }
        rows.push(r);
    }
    rows.sort_unstable();
    rows.dedup();
    Ok(p.select(&rows))
}

/// What is kept for one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameEntry {
    /// Deduplicated focal points, ascending identifiers.
    pub focal: PointSet,
    /// Training-time augmentation points borrowed from neighbouring frames.
    pub extras: PointSet,
}

impl FrameEntry {
    pub fn len(&self) -> usize {
        self.focal.len() + self.extras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Focal points followed by augmentation points.
    pub fn points(&self) -> PointSet {
        let mut all = self.focal.clone();
        if all.is_empty() && all.extra_dim != self.extras.extra_dim {
            all.extra_dim = self.extras.extra_dim;
        }
        if !self.extras.is_empty() {
            all.append(&self.extras);
        }
        all
    }
}

/// Per-frame focal point store with a sliding retention window.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalStore {
    frames: BTreeMap<usize, FrameEntry>,
    capacity_frames: usize,
    peak_points: usize,
}

impl Default for FocalStore {
    fn default() -> Self {
        Self::new(DEFAULT_T_MAX)
    }
}

impl FocalStore {
    pub fn new(capacity_frames: usize) -> Self {
        Self { frames: BTreeMap::new(), capacity_frames, peak_points: 0 }
    }

    pub fn capacity_frames(&self) -> usize {
        self.capacity_frames
    }

    /// Store the focal points of `frame` and evict frames older than
    /// `frame - T_max`. Each frame is stored once.
    pub fn store(&mut self, frame: usize, focal: PointSet) -> Result<()> {
        if self.frames.contains_key(&frame) {
            return Err(Error::Logic(format!("frame {frame} already stored")));
        }
        if focal.ids.iter().any(|&id| id == PAD_ID) {
            return Err(Error::Logic("padding cannot be stored".into()));
        }
        if focal.ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Logic(format!("frame {frame} ids are not strictly ascending")));
        }
        if let Some(bad) = focal.ids.iter().find(|&&id| split_point_id(id).map(|(f, _)| f) != Some(frame)) {
            return Err(Error::Logic(format!("id {bad} does not belong to frame {frame}")));
        }
        self.frames.insert(frame, FrameEntry { focal, extras: PointSet::default() });
        let oldest = frame.saturating_sub(self.capacity_frames);
        self.frames.retain(|&f, _| f >= oldest);
        self.peak_points = self.peak_points.max(self.stored_points());
        Ok(())
    }

    /// Attach augmentation points to an already stored frame.
    pub fn augment(&mut self, frame: usize, extras: &PointSet) -> Result<()> {
        let entry = self
            .frames
            .get_mut(&frame)
            .ok_or_else(|| Error::Logic(format!("frame {frame} is not stored")))?;
        if entry.extras.is_empty() {
            entry.extras = PointSet::new(extras.extra_dim);
        }
        entry.extras.append(extras);
        self.peak_points = self.peak_points.max(self.stored_points());
        Ok(())
    }

    /// The entry of `frame`, or `None` if it was never stored or has been evicted.
    pub fn fetch(&self, frame: usize) -> Option<&FrameEntry> {
        self.frames.get(&frame)
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.frames.contains_key(&frame)
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn stored_points(&self) -> usize {
        self.frames.values().map(FrameEntry::len).sum()
    }

    /// Largest [`Self::stored_points`] seen since creation or the last clear.
    pub fn peak_points(&self) -> usize {
        self.peak_points
    }

    pub fn clear(&mut self) {
        self.frames.clear();
        self.peak_points = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample(frame: usize, rows: &[usize]) -> PointSet {
        let mut s = PointSet::new(1);
        for &r in rows {
            s.push([r as f64, 0.0, 0.0], &[0.5], 0.0, point_id(frame, r));
        }
        s
    }

    #[test]
    fn shared_points_appear_once() {
        let (p, idx) = assign_unique_ids(&[sample(0, &[1, 3, 5]), sample(0, &[3, 5, 7])]).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(idx[0], vec![0, 1, 2]);
        assert_eq!(idx[1], vec![1, 2, 3]);
    }

    #[test]
    fn padding_maps_to_sentinel() {
        let mut s = sample(2, &[4]);
        s.push_padding();
        let (p, idx) = assign_unique_ids(&[s]).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(idx[0], vec![0, -1]);
    }

    #[test]
    fn same_selection_is_stored_once() {
        let (p, _) = assign_unique_ids(&[sample(0, &[0, 1, 2, 3])]).unwrap();
        let focal = finalize_focal(&[vec![0, 1], vec![0, 1], vec![1, 0]], &p).unwrap();
        assert_eq!(focal.len(), 2);
        assert!(finalize_focal(&[vec![9]], &p).is_err());
    }

    #[test]
    fn ids_round_trip() {
        assert_eq!(split_point_id(point_id(7, 123)), Some((7, 123)));
        assert_eq!(split_point_id(PAD_ID), None);
    }

    #[test]
    fn store_fetch_and_evict() {
        let mut bank = FocalStore::new(2);
        let s0 = sample(0, &[1, 2]);
        bank.store(0, s0.clone()).unwrap();
        assert_eq!(bank.fetch(0).unwrap().focal, s0);
        assert!(bank.store(0, s0).is_err());
        bank.store(1, sample(1, &[1])).unwrap();
        bank.store(2, sample(2, &[1])).unwrap();
        assert!(bank.contains(0));
        bank.store(3, sample(3, &[1])).unwrap();
        assert!(bank.fetch(0).is_none());
        assert_eq!(bank.peak_points(), 4);
        assert!(bank.store(4, sample(3, &[2])).is_err());
    }

    #[test]
    fn augmentation_is_kept_apart() {
        let mut bank = FocalStore::default();
        bank.store(5, sample(5, &[0])).unwrap();
        bank.augment(5, &sample(6, &[9])).unwrap();
        let e = bank.fetch(5).unwrap();
        assert_eq!(e.focal.len(), 1);
        assert_eq!(e.points().len(), 2);
        assert!(bank.augment(4, &sample(6, &[9])).is_err());
    }
}
