//! The full refinement network: geometry/motion embedding, single-frame
//! condensation, multi-frame fusion, dual decoding and the heads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_box, refinement_loss, DetectionHead, DualDecoder, LossBreakdown, LossConfig, RefineTarget, Refinement};
use crate::error::{Error, Result};
use crate::fusion::{FusionSchedule, FusionStage, GroupStrategy, MspCondenser, TraceStep};
use crate::geometry::{geometry_embed, motion_embed, Box7, PointSet, OFFSET_FEATURES};
use crate::graph::{Graph, OpCounter, Var};
use crate::layers::Mlp;
use crate::params::ParamStore;
use crate::scaling::{condense_lengths, Scorer, ScoringContext, SspCondenser, Tokens};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Focal tokens per frame.
    pub k: usize,
    /// The current frame samples `oversample * k` points.
    pub oversample: usize,
    /// Frames per trajectory, the current one included.
    pub frames: usize,
    pub groups: usize,
    pub strategy: GroupStrategy,
    pub beta1: f64,
    pub beta2: f64,
    pub k_out: usize,
    /// Fixed single-frame layer count; derived from `beta1` when absent.
    pub ssp_layers: Option<usize>,
    /// Explicit fusion stages replacing the default schedule.
    pub schedule: Option<Vec<FusionStage>>,
    pub scorer: Scorer,
    /// Per-point features beyond the coordinates.
    pub extra_dim: usize,
    pub frame_dt: f64,
    pub use_ssp_decoder: bool,
    pub use_msp_decoder: bool,
    pub use_igf: bool,
    pub use_motion: bool,
    pub loss: LossConfig,
    /// Transition band of the supervised point-in-box score.
    pub eta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            k: 48,
            oversample: 4,
            frames: 16,
            groups: 4,
            strategy: GroupStrategy::EqualStride,
            beta1: 0.5,
            beta2: 0.5,
            k_out: 48,
            ssp_layers: None,
            schedule: None,
            scorer: Scorer::Adaptive,
            extra_dim: 1,
            frame_dt: 0.1,
            use_ssp_decoder: true,
            use_msp_decoder: true,
            use_igf: true,
            use_motion: true,
            loss: LossConfig::default(),
            eta: 0.2,
        }
    }
}

impl ModelConfig {
    /// Small network used for training experiments.
    pub fn desk() -> Self {
        Self { d_model: 64, heads: 4, k: 16, frames: 8, k_out: 16, ..Self::default() }
    }

    pub fn current_samples(&self) -> usize {
        self.oversample * self.k
    }

    pub fn ssp_lengths(&self) -> Result<Vec<usize>> {
        let lengths = condense_lengths(self.current_samples(), self.k, self.beta1, self.ssp_layers)?;
        match lengths.last() {
            Some(&last) if last != self.k => Err(Error::Config(format!(
                "single-frame layers end at {last} tokens instead of {}",
                self.k
            ))),
            _ => Ok(lengths),
        }
    }

    pub fn fusion_schedule(&self) -> FusionSchedule {
        match &self.schedule {
            Some(stages) => FusionSchedule { stages: stages.clone(), k_out: self.k_out },
            None => FusionSchedule::default_for(self.frames, self.groups, self.beta2, self.k_out),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.k == 0 || self.oversample == 0 || self.frames == 0 {
            return Err(Error::Config("k, oversample and frames must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("eta {} outside (0, 1)", self.eta)));
        }
        if !(self.frame_dt > 0.0) {
            return Err(Error::Config("frame interval must be positive".into()));
        }
        self.ssp_lengths()?;
        self.fusion_schedule().validate(self.frames, self.k)
    }

    /// The same network with every scaling ratio at 1: history frames
    /// sample as many points as the current frame and nothing is dropped.
    pub fn without_scaling(&self) -> Result<Self> {
        let layers = self.ssp_lengths()?.len();
        let k = self.current_samples();
        let mut cfg = Self {
            k,
            oversample: 1,
            beta1: 1.0,
            beta2: 1.0,
            ssp_layers: Some(layers),
            schedule: None,
            ..self.clone()
        };
        cfg.k_out = 1;
        let trace = cfg.fusion_schedule().trace(cfg.frames, k)?;
        cfg.k_out = if trace.len() >= 2 { trace[trace.len() - 2].1 } else { k };
        Ok(cfg)
    }
}

/// Points of one historical frame with the trajectory box at that frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub points: PointSet,
    pub reference: Box7,
    /// Seconds between this frame and the current one.
    pub delta_t: f64,
    pub labels: Option<Vec<f64>>,
}

/// Network input for one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSample {
    pub proposal: Box7,
    pub current: PointSet,
    pub current_labels: Option<Vec<f64>>,
    /// `frames - 1` entries, the previous frame first.
    pub history: Vec<FrameSample>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub ssp_trace: Vec<usize>,
    pub msp_trace: Vec<TraceStep>,
    pub ops: OpCounter,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub head: Var,
    /// Head on `q^s`; only built for training graphs.
    pub aux_head: Option<Var>,
    /// Current-frame points that survived single-frame condensation.
    pub focal: PointSet,
    pub telemetry: Telemetry,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub refinement: Refinement,
    pub refined: Box7,
    pub focal: PointSet,
    pub telemetry: Telemetry,
}

#[derive(Clone, Debug)]
pub struct FasterModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    geometry: Mlp,
    motion: Mlp,
    ssp: SspCondenser,
    msp: MspCondenser,
    decoder: DualDecoder,
    head: DetectionHead,
    aux_head: DetectionHead,
}

impl FasterModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let ffn = 2 * d;
        let geometry = Mlp::new(&mut store, "embed.geometry", OFFSET_FEATURES + config.extra_dim, d, d, &mut rng)?;
        let motion = Mlp::new(&mut store, "embed.motion", OFFSET_FEATURES + 1, d, d, &mut rng)?;
        let ssp = SspCondenser::new(
            &mut store,
            "ssp",
            d,
            config.heads,
            ffn,
            config.scorer,
            config.ssp_lengths()?,
            &mut rng,
        )?;
        let msp = MspCondenser::new(
            &mut store,
            "msp",
            &config.fusion_schedule(),
            config.strategy,
            config.frames,
            config.k,
            d,
            config.heads,
            ffn,
            config.scorer,
            &mut rng,
        )?;
        let decoder = DualDecoder::new(&mut store, "decoder", d, config.heads, &mut rng)?;
        let head = DetectionHead::new(&mut store, "head", d, &mut rng)?;
        let aux_head = DetectionHead::new(&mut store, "aux_head", d, &mut rng)?;
        Ok(Self { config, store, geometry, motion, ssp, msp, decoder, head, aux_head })
    }

    fn check_sample(&self, s: &ProposalSample) -> Result<()> {
        let cfg = &self.config;
        if s.current.len() != cfg.current_samples() {
            return Err(Error::Dimension {
                op: "proposal sample",
                detail: format!("{} current points, expected {}", s.current.len(), cfg.current_samples()),
            });
        }
        if s.history.len() + 1 != cfg.frames {
            return Err(Error::Config(format!("{} history frames for a {}-frame model", s.history.len(), cfg.frames)));
        }
        if let Some(h) = s.history.iter().find(|h| h.points.len() != cfg.k) {
            return Err(Error::Dimension {
                op: "proposal sample",
                detail: format!("{} history points, expected {}", h.points.len(), cfg.k),
            });
        }
        if s.current.extra_dim != cfg.extra_dim || s.history.iter().any(|h| h.points.extra_dim != cfg.extra_dim) {
            return Err(Error::Dimension { op: "proposal sample", detail: "extra feature width".into() });
        }
        Ok(())
    }

    fn frame_tokens(
        &self,
        g: &mut Graph<'_>,
        points: &PointSet,
        reference: &Box7,
        current: &Box7,
        delta_t: f64,
        frame: usize,
        labels: Option<Vec<f64>>,
    ) -> Result<Tokens> {
        let mask = points.pad_mask();
        let mut x = geometry_embed(g, &self.geometry, points, &mask, reference)?;
        if self.config.use_motion {
            let m = motion_embed(g, &self.motion, points, &mask, current, delta_t)?;
            x = g.add(x, m)?;
        }
        Ok(Tokens { x, point_ids: points.ids.clone(), frames: vec![frame; points.len()], labels })
    }

    pub fn forward(&self, g: &mut Graph<'_>, s: &ProposalSample, ctx: &mut ScoringContext<'_>) -> Result<ForwardOutput> {
        self.check_sample(s)?;
        let before = g.counter();
        let cfg = &self.config;
        let mask = s.current.pad_mask();
        let x = geometry_embed(g, &self.geometry, &s.current, &mask, &s.proposal)?;
        let labels = if g.is_training() { s.current_labels.clone() } else { None };
        let current = Tokens { x, point_ids: s.current.ids.clone(), frames: vec![0; s.current.len()], labels };
        let condensed = self.ssp.forward(g, current, ctx)?;
        let focal_all = s.current.select(&condensed.kept);
        let f_s = condensed.tokens;

        let mut seqs = Vec::with_capacity(cfg.frames);
        let focal_labels = f_s.labels.clone();
        seqs.push(self.frame_tokens(g, &focal_all, &s.proposal, &s.proposal, 0.0, 0, focal_labels)?);
        for (i, h) in s.history.iter().enumerate() {
            let labels = if g.is_training() { h.labels.clone() } else { None };
            seqs.push(self.frame_tokens(g, &h.points, &h.reference, &s.proposal, h.delta_t, i + 1, labels)?);
        }
        let msp = self.msp.forward(g, seqs, cfg.use_igf, ctx)?;
        let f_m = msp.tokens;

        let (q_s, q_m) = self.decoder.forward(
            g,
            f_s.x,
            &f_s.pad_mask(),
            f_m.x,
            &f_m.pad_mask(),
            cfg.use_ssp_decoder,
            cfg.use_msp_decoder,
        )?;
        let head = self.head.forward(g, q_m)?;
        let aux_head = if g.is_training() && cfg.use_ssp_decoder {
            Some(self.aux_head.forward(g, q_s)?)
        } else {
            None
        };
        let mut ops = g.counter();
        ops.mul_adds -= before.mul_adds;
        ops.attention_cells -= before.attention_cells;
        let mut focal = focal_all;
        let real: Vec<usize> = (0..focal.len()).filter(|&i| focal.ids[i] != crate::geometry::PAD_ID).collect();
        focal = focal.select(&real);
        Ok(ForwardOutput {
            head,
            aux_head,
            focal,
            telemetry: Telemetry { ssp_trace: condensed.trace, msp_trace: msp.trace, ops },
        })
    }

    /// Total training loss for one proposal: main head, auxiliary head and
    /// any scorer losses.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        s: &ProposalSample,
        target: &RefineTarget,
        ctx: &mut ScoringContext<'_>,
    ) -> Result<(Var, LossBreakdown)> {
        let out = self.forward(g, s, ctx)?;
        let (mut total, mut breakdown) = refinement_loss(g, out.head, &s.proposal, target, &self.config.loss)?;
        if let Some(aux) = out.aux_head {
            let (l, b) = refinement_loss(g, aux, &s.proposal, target, &self.config.loss)?;
            total = g.add(total, l)?;
            breakdown.merge(&b);
        }
        for l in core::mem::take(&mut ctx.aux_losses) {
            total = g.add(total, l)?;
        }
        g.ensure_finite(total, "loss")?;
        Ok((total, breakdown))
    }

    /// Inference for one proposal.
    pub fn predict(&self, s: &ProposalSample, rng: &mut dyn RngCore) -> Result<Prediction> {
        let mut g = Graph::inference(&self.store);
        let mut ctx = ScoringContext::new(self.config.scorer, rng);
        ctx.allow_empty = true;
        let out = self.forward(&mut g, s, &mut ctx)?;
        let head = g.value(out.head);
        head.ensure_finite("prediction")?;
        let refinement = Refinement::from_head(head.data())?;
        let refined = decode_box(&s.proposal, &refinement.box_residual)?.with_score(refinement.confidence);
        let mut telemetry = out.telemetry;
        telemetry.ops.peak_live_values = g.counter().peak_live_values;
        Ok(Prediction { refinement, refined, focal: out.focal, telemetry })
    }

    /// Single-frame condensation only: the focal points of `current`
    /// without padding, as they would be stored after a full forward.
    pub fn focal_points(&self, proposal: &Box7, current: &PointSet, rng: &mut dyn RngCore) -> Result<PointSet> {
        if current.len() != self.config.current_samples() {
            return Err(Error::Dimension {
                op: "focal points",
                detail: format!("{} current points, expected {}", current.len(), self.config.current_samples()),
            });
        }
        let mut g = Graph::inference(&self.store);
        let mut ctx = ScoringContext::new(self.config.scorer, rng);
        ctx.allow_empty = true;
        let mask = current.pad_mask();
        let x = geometry_embed(&mut g, &self.geometry, current, &mask, proposal)?;
        let tokens = Tokens { x, point_ids: current.ids.clone(), frames: vec![0; current.len()], labels: None };
        let condensed = self.ssp.forward(&mut g, tokens, &mut ctx)?;
        let real: Vec<usize> =
            condensed.kept.iter().copied().filter(|&i| current.ids[i] != crate::geometry::PAD_ID).collect();
        Ok(current.select(&real))
    }

    pub fn param_count(&self) -> usize {
        self.store.value_count()
    }
}

/// Query x key score evaluations of one proposal forward, from the schedule alone.
pub fn analytic_attention_cells(cfg: &ModelConfig) -> Result<u64> {
    let h = cfg.heads as u64;
    let mut cells = 0u64;
    let mut n = cfg.current_samples() as u64;
    let lengths = cfg.ssp_lengths()?;
    for &len in &lengths {
        cells += h * n * n;
        n = len as u64;
    }
    let f_s = n;
    let schedule = cfg.fusion_schedule();
    let (mut count, mut len) = (cfg.frames as u64, cfg.k as u64);
    for st in &schedule.stages {
        cells += count * h * len * len;
        len = crate::scaling::keep_count(len as usize, st.beta) as u64;
        if let Some(next) = st.regroup {
            len *= count / next as u64;
            count = next as u64;
        }
    }
    cells += h * len * len;
    let decoder = if cfg.use_ssp_decoder { h * f_s } else { 0 } + if cfg.use_msp_decoder { h * cfg.k_out as u64 } else { 0 };
    Ok(cells + decoder)
}
