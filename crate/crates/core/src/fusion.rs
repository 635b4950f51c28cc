//! Multi-frame condensation: frame grouping, intra-group fusion and the
//! alternating scale/fuse schedule that ends in a single sequence.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::scaling::{keep_count, AdaptiveScalingLayer, Scorer, ScoringContext, Tokens};

/// How `T` sequences (0 = current frame) are split into groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStrategy {
    /// Group `g` takes every `G`-th sequence starting at `g`.
    #[default]
    EqualStride,
    /// Consecutive blocks of `T / G` sequences.
    Contiguous,
    /// Every group starts at sequence 0; group `g` steps by `g + 1`.
    Anchored,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPlan {
    pub t: usize,
    pub g: usize,
    pub strategy: GroupStrategy,
    pub groups: Vec<Vec<usize>>,
}

impl GroupPlan {
    pub fn group_size(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }
}

pub fn group_split(t: usize, g: usize, strategy: GroupStrategy) -> Result<GroupPlan> {
    if t == 0 || g == 0 || t % g != 0 {
        return Err(Error::Config(format!("{t} sequences cannot be split into {g} equal groups")));
    }
    let size = t / g;
    let groups: Vec<Vec<usize>> = match strategy {
        GroupStrategy::EqualStride => (0..g).map(|gi| (0..size).map(|i| gi + i * g).collect()).collect(),
        GroupStrategy::Contiguous => (0..g).map(|gi| (gi * size..(gi + 1) * size).collect()).collect(),
        GroupStrategy::Anchored => {
            let last = g * (size - 1);
            if last >= t {
                return Err(Error::Config(format!("anchored groups of {size} overrun {t} sequences")));
            }
            (0..g).map(|gi| (0..size).map(|i| (gi + 1) * i).collect()).collect()
        }
    };
    Ok(GroupPlan { t, g, strategy, groups })
}

/// Intra-group fusion: per-sequence max-pool summaries are mixed across the
/// group, injected back into every token, and the group is flattened.
#[derive(Clone, Debug)]
pub struct Igf {
    pub summary: Linear,
    pub compress: Linear,
    pub norm: LayerNorm,
    pub group_size: usize,
    pub d_model: usize,
}

impl Igf {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group_size: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let td = group_size * d_model;
        Ok(Self {
            summary: Linear::new(store, &format!("{name}.summary"), td, td, rng)?,
            compress: Linear::new(store, &format!("{name}.compress"), 2 * d_model, d_model, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model, rng)?,
            group_size,
            d_model,
        })
    }

    /// Fuse `seqs` (each `K x D`) into one `(T' K) x D` sequence.
    pub fn forward(&self, g: &mut Graph<'_>, seqs: &[Var]) -> Result<Var> {
        if seqs.len() != self.group_size {
            return Err(Error::Dimension {
                op: "igf",
                detail: format!("{} sequences for a group of {}", seqs.len(), self.group_size),
            });
        }
        let (k, d) = g.dims(seqs[0]);
        if d != self.d_model {
            return Err(Error::Dimension { op: "igf", detail: format!("width {d}, expected {}", self.d_model) });
        }
        if let Some(bad) = seqs.iter().find(|&&s| g.dims(s) != (k, d)) {
            let (bk, bd) = g.dims(*bad);
            return Err(Error::Dimension { op: "igf", detail: format!("ragged group: {bk}x{bd} vs {k}x{d}") });
        }
        let pooled = seqs.iter().map(|&s| g.max_pool_rows(s)).collect::<Result<Vec<_>>>()?;
        let cat = g.concat_cols(&pooled)?;
        let mixed = self.summary.forward(g, cat)?;
        let summaries = g.reshape(mixed, self.group_size, d)?;
        let owner: Vec<usize> = (0..self.group_size).flat_map(|s| core::iter::repeat_n(s, k)).collect();
        let repeated = g.gather_rows(summaries, &owner)?;
        let tokens = g.concat_rows(seqs)?;
        let joined = g.concat_cols(&[tokens, repeated])?;
        let injected = self.compress.forward(g, joined)?;
        let sum = g.add(tokens, injected)?;
        self.norm.forward(g, sum)
    }
}

/// One scale-then-regroup step of the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionStage {
    /// Per-sequence keep ratio of the scaling layer.
    pub beta: f64,
    /// Number of sequences after fusing; `None` skips fusion.
    pub regroup: Option<usize>,
}

/// Scale/fuse stages followed by a final scaling of the single remaining
/// sequence to `k_out` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSchedule {
    pub stages: Vec<FusionStage>,
    pub k_out: usize,
}

/// Sequence count and per-sequence length after one operation.
pub type TraceStep = (usize, usize);

impl FusionSchedule {
    /// Scale each sequence by `beta`, fuse into `g` groups (or one when `T`
    /// does not split evenly into groups of at least two), then keep
    /// scaling and fusing into a single group until one sequence is left.
    pub fn default_for(t: usize, g: usize, beta: f64, k_out: usize) -> Self {
        let mut stages = Vec::new();
        if t > 1 {
            let first = if g > 0 && t % g == 0 && t / g >= 2 { g } else { 1 };
            stages.push(FusionStage { beta, regroup: Some(first) });
            if first > 1 {
                stages.push(FusionStage { beta, regroup: Some(1) });
            }
        }
        Self { stages, k_out }
    }

    /// States after every scaling and every fusion for `t` sequences of `k` rows.
    pub fn trace(&self, t: usize, k: usize) -> Result<Vec<TraceStep>> {
        let mut out = Vec::new();
        let (mut count, mut len) = (t, k);
        for (i, st) in self.stages.iter().enumerate() {
            if !(st.beta > 0.0 && st.beta <= 1.0) {
                return Err(Error::Config(format!("stage {i} keep ratio {} outside (0, 1]", st.beta)));
            }
            len = keep_count(len, st.beta);
            out.push((count, len));
            if let Some(next) = st.regroup {
                if next == 0 || count % next != 0 {
                    return Err(Error::Config(format!("stage {i} cannot fuse {count} sequences into {next}")));
                }
                len *= count / next;
                count = next;
                out.push((count, len));
            }
        }
        if count != 1 {
            return Err(Error::Config(format!("schedule ends with {count} sequences")));
        }
        if self.k_out == 0 || self.k_out > len {
            return Err(Error::Config(format!("cannot condense {len} tokens to {}", self.k_out)));
        }
        out.push((1, self.k_out));
        Ok(out)
    }

    pub fn validate(&self, t: usize, k: usize) -> Result<()> {
        self.trace(t, k).map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct MspStage {
    pub scale: AdaptiveScalingLayer,
    pub keep: usize,
    pub fusion: Option<(GroupPlan, Igf)>,
}

/// Condenses `T` per-frame sequences into one.
#[derive(Clone, Debug)]
pub struct MspCondenser {
    pub stages: Vec<MspStage>,
    pub final_scale: AdaptiveScalingLayer,
    pub k_out: usize,
    pub t: usize,
    pub k: usize,
}

/// Result of [`MspCondenser::forward`].
#[derive(Clone, Debug)]
pub struct MspOutput {
    pub tokens: Tokens,
    pub trace: Vec<TraceStep>,
}

impl MspCondenser {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        schedule: &FusionSchedule,
        strategy: GroupStrategy,
        t: usize,
        k: usize,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        scorer: Scorer,
        rng: &mut R,
    ) -> Result<Self> {
        schedule.validate(t, k)?;
        let mut stages = Vec::with_capacity(schedule.stages.len());
        let (mut count, mut len) = (t, k);
        for (i, st) in schedule.stages.iter().enumerate() {
            let scale =
                AdaptiveScalingLayer::new(store, &format!("{name}.{i}.scale"), d_model, heads, ffn_hidden, scorer, rng)?;
            len = keep_count(len, st.beta);
            let keep = len;
            let fusion = match st.regroup {
                Some(next) => {
                    let plan = if next == count {
                        group_split(count, count, GroupStrategy::Contiguous)?
                    } else {
                        group_split(count, next, if i == 0 { strategy } else { GroupStrategy::EqualStride })?
                    };
                    let igf = Igf::new(store, &format!("{name}.{i}.igf"), plan.group_size(), d_model, rng)?;
                    len *= count / next;
                    count = next;
                    Some((plan, igf))
                }
                None => None,
            };
            stages.push(MspStage { scale, keep, fusion });
        }
        let final_scale =
            AdaptiveScalingLayer::new(store, &format!("{name}.final"), d_model, heads, ffn_hidden, scorer, rng)?;
        Ok(Self { stages, final_scale, k_out: schedule.k_out, t, k })
    }

    /// `seqs[0]` is the current frame. With `fuse = false` groups are
    /// concatenated without the fusion block.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        seqs: Vec<Tokens>,
        fuse: bool,
        ctx: &mut ScoringContext<'_>,
    ) -> Result<MspOutput> {
        if seqs.len() != self.t {
            return Err(Error::Config(format!("expected {} sequences, got {}", self.t, seqs.len())));
        }
        if let Some(s) = seqs.iter().find(|s| s.len() != self.k) {
            return Err(Error::Dimension { op: "msp", detail: format!("sequence of {} rows, expected {}", s.len(), self.k) });
        }
        let mut trace = Vec::new();
        let mut cur = seqs;
        for stage in &self.stages {
            let mut scaled = Vec::with_capacity(cur.len());
            for s in &cur {
                scaled.push(stage.scale.forward(g, s, stage.keep, ctx)?.tokens);
            }
            trace.push((scaled.len(), stage.keep));
            cur = match &stage.fusion {
                Some((plan, igf)) => {
                    let mut fused = Vec::with_capacity(plan.groups.len());
                    for group in &plan.groups {
                        let members: Vec<&Tokens> = group.iter().map(|&i| &scaled[i]).collect();
                        let xs: Vec<Var> = members.iter().map(|t| t.x).collect();
                        let x = if fuse { igf.forward(g, &xs)? } else { g.concat_rows(&xs)? };
                        fused.push(concat_meta(&members, x));
                    }
                    trace.push((fused.len(), fused[0].len()));
                    fused
                }
                None => scaled,
            };
        }
        if cur.len() != 1 {
            return Err(Error::Logic(format!("schedule left {} sequences", cur.len())));
        }
        let last = cur.pop().ok_or_else(|| Error::Logic("no sequence left".into()))?;
        let out = self.final_scale.forward(g, &last, self.k_out, ctx)?;
        trace.push((1, out.tokens.len()));
        Ok(MspOutput { tokens: out.tokens, trace })
    }
}

fn concat_meta(members: &[&Tokens], x: Var) -> Tokens {
    let labels = if members.iter().all(|t| t.labels.is_some()) {
        Some(members.iter().flat_map(|t| t.labels.iter().flatten().copied()).collect())
    } else {
        None
    };
    Tokens {
        x,
        point_ids: members.iter().flat_map(|t| t.point_ids.iter().copied()).collect(),
        frames: members.iter().flat_map(|t| t.frames.iter().copied()).collect(),
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one_based(plan: &GroupPlan) -> Vec<Vec<usize>> {
        plan.groups.iter().map(|g| g.iter().map(|i| i + 1).collect()).collect()
    }

    #[test]
    fn grouping_tables() {
        let s1 = group_split(16, 4, GroupStrategy::EqualStride).unwrap();
        assert_eq!(one_based(&s1), vec![vec![1, 5, 9, 13], vec![2, 6, 10, 14], vec![3, 7, 11, 15], vec![4, 8, 12, 16]]);
        let s2 = group_split(16, 4, GroupStrategy::Contiguous).unwrap();
        assert_eq!(one_based(&s2)[1], vec![5, 6, 7, 8]);
        let s3 = group_split(16, 4, GroupStrategy::Anchored).unwrap();
        assert_eq!(one_based(&s3), vec![vec![1, 2, 3, 4], vec![1, 3, 5, 7], vec![1, 4, 7, 10], vec![1, 5, 9, 13]]);
        let s8 = group_split(8, 4, GroupStrategy::EqualStride).unwrap();
        assert_eq!(one_based(&s8), vec![vec![1, 5], vec![2, 6], vec![3, 7], vec![4, 8]]);
        assert!(group_split(10, 4, GroupStrategy::EqualStride).is_err());
    }

    #[test]
    fn default_schedule_traces() {
        let s = FusionSchedule::default_for(16, 4, 0.5, 48);
        assert_eq!(s.trace(16, 48).unwrap(), vec![(16, 24), (4, 96), (4, 48), (1, 192), (1, 48)]);
        let s = FusionSchedule::default_for(8, 4, 0.5, 16);
        assert_eq!(s.trace(8, 16).unwrap(), vec![(8, 8), (4, 16), (4, 8), (1, 32), (1, 16)]);
        let s = FusionSchedule::default_for(4, 4, 0.5, 48);
        assert_eq!(s.trace(4, 48).unwrap(), vec![(4, 24), (1, 96), (1, 48)]);
        let s = FusionSchedule::default_for(1, 4, 0.5, 48);
        assert_eq!(s.trace(1, 48).unwrap(), vec![(1, 48)]);
    }

    #[test]
    fn non_terminating_schedule_is_rejected() {
        let s = FusionSchedule { stages: vec![FusionStage { beta: 0.5, regroup: Some(4) }], k_out: 48 };
        assert!(s.validate(16, 48).is_err());
    }
}
