//! Two-layer query decoder over the single-frame and multi-frame token
//! sequences, the detection head, box residual coding and the loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box7};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{InitScheme, ParamId, ParamStore};
use crate::tensor::sigmoid;

/// Cross-attention of a single query row onto a key/value sequence,
/// followed by a residual FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model, rng)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), d_model, 2 * d_model, d_model, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, query: Var, memory: Var, mask: &[bool]) -> Result<Var> {
        let mask = effective_mask(mask);
        let (a, _) = self.attn.forward(g, query, memory, memory, Some(&mask))?;
        let x = g.add(query, a)?;
        let x = self.norm1.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let y = g.add(x, f)?;
        self.norm2.forward(g, y)
    }
}

fn effective_mask(mask: &[bool]) -> Vec<bool> {
    if mask.iter().any(|&m| m) {
        mask.to_vec()
    } else {
        vec![true; mask.len()]
    }
}

/// `q^s` attends to the single-frame tokens, `q^m` to the multi-frame tokens.
#[derive(Clone, Debug)]
pub struct DualDecoder {
    pub query: ParamId,
    pub ssp: DecoderLayer,
    pub msp: DecoderLayer,
}

impl DualDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let query = store.add(
            &format!("{name}.query"),
            vec![1, d_model],
            InitScheme::UniformFanIn { fan_in: d_model },
            rng,
        )?;
        Ok(Self {
            query,
            ssp: DecoderLayer::new(store, &format!("{name}.ssp"), d_model, heads, rng)?,
            msp: DecoderLayer::new(store, &format!("{name}.msp"), d_model, heads, rng)?,
        })
    }

    /// Returns `(q^s, q^m)`. A disabled layer passes its query through.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        f_s: Var,
        s_mask: &[bool],
        f_m: Var,
        m_mask: &[bool],
        use_ssp: bool,
        use_msp: bool,
    ) -> Result<(Var, Var)> {
        if g.dims(f_m).0 == 0 || m_mask.is_empty() {
            return Err(Error::Config("the multi-frame sequence is empty".into()));
        }
        let q = g.param(self.query);
        let q_s = if use_ssp {
            if g.dims(f_s).0 == 0 {
                return Err(Error::Config("the single-frame sequence is empty".into()));
            }
            self.ssp.forward(g, q, f_s, s_mask)?
        } else {
            q
        };
        let q_m = if use_msp { self.msp.forward(g, q_s, f_m, m_mask)? } else { q_s };
        Ok((q_s, q_m))
    }
}

/// Width of the head output: one confidence logit and a 7-value residual.
pub const HEAD_OUTPUTS: usize = 8;

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub mlp: Mlp,
}

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(store, name, d_model, d_model, HEAD_OUTPUTS, rng)? })
    }

    pub fn forward(&self, g: &mut Graph<'_>, q: Var) -> Result<Var> {
        self.mlp.forward(g, q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub confidence: f64,
    pub box_residual: [f64; 7],
}

impl Refinement {
    pub fn from_head(out: &[f64]) -> Result<Self> {
        if out.len() != HEAD_OUTPUTS {
            return Err(Error::Dimension { op: "refinement", detail: format!("{} head outputs", out.len()) });
        }
        let mut box_residual = [0.0; 7];
        box_residual.copy_from_slice(&out[1..]);
        Ok(Self { confidence: sigmoid(out[0]), box_residual })
    }
}

/// Residual taking `proposal` to `target`: centre offsets over the proposal
/// BEV diagonal, log size ratios, wrapped yaw difference.
pub fn encode_box(target: &Box7, proposal: &Box7) -> [f64; 7] {
    let diag = proposal.bev_diagonal();
    let mut r = [0.0; 7];
    for a in 0..3 {
        r[a] = (target.center[a] - proposal.center[a]) / diag;
        r[3 + a] = libm::log(target.size[a] / proposal.size[a]);
    }
    r[6] = wrap_angle(target.yaw - proposal.yaw);
    r
}

/// Apply a residual to a proposal. Velocity, class and score carry over.
pub fn decode_box(proposal: &Box7, residual: &[f64; 7]) -> Result<Box7> {
    let diag = proposal.bev_diagonal();
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for a in 0..3 {
        center[a] = proposal.center[a] + residual[a] * diag;
        size[a] = proposal.size[a] * libm::exp(residual[3 + a]);
    }
    let mut b = Box7::new(center, size, proposal.yaw + residual[6])?;
    b.velocity = proposal.velocity;
    b.score = proposal.score;
    b.class_id = proposal.class_id;
    Ok(b)
}

/// `clamp(2 IoU - 0.5, 0, 1)`.
pub fn confidence_target(iou: f64) -> f64 {
    (2.0 * iou - 0.5).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub positive_iou: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 2.0, positive_iou: 0.55, smooth_l1_beta: 1.0 / 9.0 }
    }
}

/// Supervision for one proposal: its IoU with the matched ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineTarget {
    pub iou: f64,
    pub gt: Option<Box7>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub confidence: f64,
    pub regression: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.confidence + self.regression
    }

    pub fn merge(&mut self, other: &LossBreakdown) {
        self.confidence += other.confidence;
        self.regression += other.regression;
    }
}

/// Confidence BCE plus `alpha` times smooth-L1 on the residual, the latter
/// only for positives. `head` is the `1 x 8` head output.
pub fn refinement_loss(
    g: &mut Graph<'_>,
    head: Var,
    proposal: &Box7,
    target: &RefineTarget,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::Config("regression weight must be positive".into()));
    }
    let col = g.reshape(head, HEAD_OUTPUTS, 1)?;
    let logit = g.gather_rows(col, &[0])?;
    let conf = g.bce_with_logits(logit, &[confidence_target(target.iou)])?;
    let mut breakdown = LossBreakdown { confidence: g.value(conf).data()[0], regression: 0.0 };
    if target.iou < cfg.positive_iou {
        return Ok((conf, breakdown));
    }
    let gt = target
        .gt
        .ok_or_else(|| Error::Logic("positive proposal without a ground-truth box".into()))?;
    let residual = g.gather_rows(col, &[1, 2, 3, 4, 5, 6, 7])?;
    let reg = g.smooth_l1(residual, &encode_box(&gt, proposal), cfg.smooth_l1_beta)?;
    let reg = g.scale(reg, cfg.alpha);
    breakdown.regression = g.value(reg).data()[0];
    let total = g.add(conf, reg)?;
    Ok((total, breakdown))
}
