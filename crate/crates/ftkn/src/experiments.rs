//! Experiment runners built on training, the pipeline and evaluation.

use std::time::Instant;

use ftkn_core::fusion::{FusionSchedule, GroupStrategy};
use ftkn_core::model::analytic_attention_cells;
use ftkn_core::{FasterModel, ModelConfig, Scorer};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::eval::{evaluate, Metrics};
use crate::pipeline::{run_pipeline, HistoryMode, PipelineOptions, SceneOutput};
use crate::report::TaggedMetrics;
use crate::samples::Drops;
use crate::scene::{generate_split, Scene};
use crate::seeds;
use crate::train::{staged_train, EpochRecord, TrainReport};

pub struct Splits {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

pub fn splits(cfg: &PipelineConfig) -> Splits {
    Splits {
        train: generate_split(&cfg.scene, cfg.seed, "train", cfg.data.train_scenes),
        eval: generate_split(&cfg.scene, cfg.seed, "eval", cfg.data.eval_scenes),
    }
}

pub fn evaluate_model(
    model: &FasterModel,
    scenes: &[Scene],
    cfg: &PipelineConfig,
    opts: PipelineOptions,
) -> Result<(Metrics, SceneOutput)> {
    let out = run_pipeline(scenes, model, cfg, opts)?;
    let m = evaluate(&out.rows, &out.refined_frames, scenes, &cfg.eval);
    Ok((m, out))
}

pub struct Run {
    pub model: FasterModel,
    pub train: TrainReport,
    pub metrics: Metrics,
}

/// Train on the train split and evaluate on the eval split of `cfg`.
pub fn train_and_evaluate(cfg: &PipelineConfig, progress: &mut dyn FnMut(&EpochRecord)) -> Result<Run> {
    let s = splits(cfg);
    let (model, train) = staged_train(&s.train, cfg, progress)?;
    let (metrics, _) = evaluate_model(&model, &s.eval, cfg, PipelineOptions::default())?;
    Ok(Run { model, train, metrics })
}

pub const DROP_RATES: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustRow {
    pub kind: String,
    pub rate: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Drop historical points or historical trajectory boxes at inference.
pub fn robustness_sweep(model: &FasterModel, scenes: &[Scene], cfg: &PipelineConfig, rates: &[f64]) -> Result<Vec<RobustRow>> {
    let mut rows = Vec::new();
    for kind in ["points", "boxes"] {
        for &rate in rates {
            let drops = if kind == "points" { Drops { points: rate, boxes: 0.0 } } else { Drops { points: 0.0, boxes: rate } };
            let (metrics, _) = evaluate_model(model, scenes, cfg, PipelineOptions { drops, ..Default::default() })?;
            rows.push(RobustRow { kind: kind.into(), rate, metrics });
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AblationGroup {
    /// Decoder branches, fusion and motion encoding switched off one at a time.
    Components,
    Scorer,
    Frames,
    Grouping,
    /// The 4 x 4 grid of single- and multi-frame keep ratios.
    Ratios,
    /// Sampling ratio applied to both the oversampled and focal counts.
    Sampling,
}

impl AblationGroup {
    pub const ALL: [AblationGroup; 6] = [
        AblationGroup::Components,
        AblationGroup::Scorer,
        AblationGroup::Frames,
        AblationGroup::Grouping,
        AblationGroup::Ratios,
        AblationGroup::Sampling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationGroup::Components => "components",
            AblationGroup::Scorer => "scorer",
            AblationGroup::Frames => "frames",
            AblationGroup::Grouping => "grouping",
            AblationGroup::Ratios => "ratios",
            AblationGroup::Sampling => "sampling",
        }
    }
}

pub const FRAME_GRID: [usize; 5] = [4, 8, 16, 24, 32];
pub const RATIO_GRID: [f64; 4] = [0.3, 0.4, 0.5, 0.6];
pub const SAMPLING_GRID: [f64; 3] = [1.0, 0.5, 0.25];

/// Per-sequence length left by the fusion stages, before the final scaling.
fn fused_length(model: &ModelConfig) -> usize {
    let schedule = FusionSchedule { k_out: 1, ..model.fusion_schedule() };
    match schedule.trace(model.frames, model.k) {
        Ok(trace) if trace.len() >= 2 => trace[trace.len() - 2].1,
        _ => model.k_out,
    }
}

/// Tagged configuration variants of one ablation group.
pub fn ablation_variants(base: &PipelineConfig, group: AblationGroup) -> Vec<(String, PipelineConfig)> {
    let with = |f: &dyn Fn(&mut PipelineConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match group {
        AblationGroup::Components => vec![
            ("full".into(), base.clone()),
            ("no_ssp_decoder".into(), with(&|c| c.model.use_ssp_decoder = false)),
            ("no_msp_decoder".into(), with(&|c| c.model.use_msp_decoder = false)),
            ("concat_instead_of_igf".into(), with(&|c| c.model.use_igf = false)),
            ("no_motion".into(), with(&|c| c.model.use_motion = false)),
        ],
        AblationGroup::Scorer => [Scorer::Adaptive, Scorer::Supervised, Scorer::GumbelMask, Scorer::Random]
            .into_iter()
            .map(|s| (format!("{s:?}").to_lowercase(), with(&|c| c.model.scorer = s)))
            .collect(),
        AblationGroup::Frames => FRAME_GRID
            .iter()
            .map(|&t| {
                (
                    format!("T={t}"),
                    with(&|c| {
                        c.model.frames = t;
                        c.scene.frames = c.scene.frames.max(t + c.data.current_frames - 1);
                    }),
                )
            })
            .collect(),
        AblationGroup::Grouping => [GroupStrategy::EqualStride, GroupStrategy::Contiguous, GroupStrategy::Anchored]
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("strategy_{}", i + 1), with(&|c| c.model.strategy = s)))
            .collect(),
        AblationGroup::Ratios => RATIO_GRID
            .iter()
            .flat_map(|&b1| RATIO_GRID.iter().map(move |&b2| (b1, b2)))
            .map(|(b1, b2)| {
                (
                    format!("beta1={b1},beta2={b2}"),
                    with(&|c| {
                        c.model.beta1 = b1;
                        c.model.beta2 = b2;
                        c.model.k_out = c.model.k_out.min(fused_length(&c.model));
                    }),
                )
            })
            .collect(),
        AblationGroup::Sampling => SAMPLING_GRID
            .iter()
            .map(|&g| {
                let scale = |v: usize| ((v as f64 * g).round() as usize).max(1);
                (
                    format!("gamma={g}"),
                    with(&|c| {
                        c.model.k = scale(base.model.k);
                        c.model.k_out = scale(base.model.k_out);
                    }),
                )
            })
            .collect(),
    }
}

/// Train and evaluate every variant of the chosen groups.
pub fn ablation_suite(
    base: &PipelineConfig,
    groups: &[AblationGroup],
    progress: &mut dyn FnMut(&str, &str, &Metrics),
) -> Result<Vec<TaggedMetrics>> {
    let mut rows = Vec::new();
    for &group in groups {
        for (variant, cfg) in ablation_variants(base, group) {
            let run = train_and_evaluate(&cfg, &mut |_| {})?;
            progress(group.name(), &variant, &run.metrics);
            rows.push(TaggedMetrics { group: group.name().into(), variant, metrics: run.metrics });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub setting: String,
    /// Query x key evaluations per proposal from the schedule.
    pub analytic_cells: u64,
    /// The same count measured by the op counter over the bench scenes.
    pub measured_cells: u64,
    pub mul_adds: u64,
    pub proposals: usize,
    pub wall_ms: f64,
    pub peak_points: usize,
    pub full_cloud_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// No-scaling over default analytic cells at the full-scale shape.
    pub full_cell_ratio: f64,
    /// No-scaling over default measured wall time at the run's scale.
    pub wall_ratio: f64,
    pub storage_ratio: f64,
}

/// Points a full-cloud history keeps: the largest sum of cloud sizes over
/// any window of `t_max + 1` consecutive frames.
fn full_cloud_window(scenes: &[Scene], t_max: usize) -> usize {
    scenes
        .iter()
        .map(|s| {
            let sizes: Vec<usize> = s.frames.iter().map(|f| f.cloud.len()).collect();
            sizes.windows((t_max + 1).min(sizes.len()).max(1)).map(|w| w.iter().sum()).max().unwrap_or(0)
        })
        .max()
        .unwrap_or(0)
}

/// Compare the default network with the same network at keep ratio 1
/// everywhere, sampling `4K` history points per frame. The full-scale
/// shape is counted analytically; `cfg` is executed on `scenes`.
pub fn bench_efficiency(cfg: &PipelineConfig, scenes: &[Scene]) -> Result<BenchReport> {
    let full = ModelConfig::default();
    let full_ratio = analytic_attention_cells(&full.without_scaling()?)? as f64 / analytic_attention_cells(&full)? as f64;
    let full_cloud = full_cloud_window(scenes, cfg.data.t_max);
    let mut rows = vec![
        BenchRow {
            setting: "full_default".into(),
            analytic_cells: analytic_attention_cells(&full)?,
            measured_cells: 0,
            mul_adds: 0,
            proposals: 0,
            wall_ms: 0.0,
            peak_points: 0,
            full_cloud_points: 0,
        },
        BenchRow {
            setting: "full_no_scaling".into(),
            analytic_cells: analytic_attention_cells(&full.without_scaling()?)?,
            measured_cells: 0,
            mul_adds: 0,
            proposals: 0,
            wall_ms: 0.0,
            peak_points: 0,
            full_cloud_points: 0,
        },
    ];
    let init = seeds::derive(cfg.seed, "bench", &[]);
    for (setting, model_cfg, history) in [
        ("run_default", cfg.model.clone(), HistoryMode::Focal),
        ("run_no_scaling", cfg.model.without_scaling()?, HistoryMode::FullCloud),
    ] {
        let model = FasterModel::new(model_cfg.clone(), init)?;
        let run_cfg = PipelineConfig { model: model_cfg.clone(), ..cfg.clone() };
        let start = Instant::now();
        let out = run_pipeline(scenes, &model, &run_cfg, PipelineOptions { history, drops: Drops::default() })?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let refined: Vec<_> = out.telemetry.iter().filter(|t| t.refined).collect();
        rows.push(BenchRow {
            setting: setting.into(),
            analytic_cells: analytic_attention_cells(&model_cfg)?,
            measured_cells: refined.iter().map(|t| t.attention_cells).sum(),
            mul_adds: refined.iter().map(|t| t.mul_adds).sum(),
            proposals: refined.iter().map(|t| t.proposals).sum(),
            wall_ms,
            peak_points: if history == HistoryMode::Focal { out.peak_points } else { full_cloud },
            full_cloud_points: full_cloud,
        });
    }
    let wall_ratio = rows[3].wall_ms / rows[2].wall_ms.max(1e-9);
    let storage_ratio = full_cloud as f64 / rows[2].peak_points.max(1) as f64;
    Ok(BenchReport { rows, full_cell_ratio: full_ratio, wall_ratio, storage_ratio })
}
