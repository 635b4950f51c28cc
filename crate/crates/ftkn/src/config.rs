//! Pipeline configuration: presets plus JSON or TOML override files.
//!
//! Files are merged key by key over a preset. Besides the structural
//! sections (`model`, `scene`, `rpn`, `train`, `data`, `eval`) two alias
//! sections address model fields by their experiment names:
//! `scaling.{scorer, beta1, beta2, layers, eta}` and
//! `fusion.{T, G, strategy, beta2, k_out, schedule, use_igf}`.
//! Dotted keys such as `"scaling.scorer"` are accepted anywhere.

use std::path::Path;

use ftkn_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-scale network: D=256, K=48, T=16.
    Full,
    /// Desk-scale network for training runs: D=64, K=16, T=8.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub range_min: f64,
    pub range_max: f64,
    pub min_points: usize,
    pub max_points: usize,
    /// Surface points per m² at `reference_range`; falls off with range².
    pub density: f64,
    pub reference_range: f64,
    /// Background points per m² of ground.
    pub clutter_density: f64,
    pub area_radius: f64,
    pub max_speed: f64,
    pub static_fraction: f64,
    /// Standard deviation of the per-frame velocity perturbation, m/s.
    pub velocity_jitter: f64,
    pub point_noise: f64,
    pub frame_dt: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 18,
            objects_min: 3,
            objects_max: 6,
            range_min: 6.0,
            range_max: 35.0,
            min_points: 5,
            max_points: 500,
            density: 7.0,
            reference_range: 10.0,
            clutter_density: 0.05,
            area_radius: 45.0,
            max_speed: 10.0,
            static_fraction: 0.3,
            velocity_jitter: 0.1,
            point_noise: 0.02,
            frame_dt: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnConfig {
    pub sigma_xyz: f64,
    /// Standard deviation of the log size ratio.
    pub sigma_size: f64,
    pub sigma_yaw: f64,
    pub sigma_velocity: f64,
    pub recall: f64,
    /// Expected false positives per frame.
    pub fp_rate: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self { sigma_xyz: 0.3, sigma_size: 0.1, sigma_yaw: 0.1, sigma_velocity: 0.3, recall: 0.95, fp_rate: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch (0-based) before which focal points are first materialised.
    pub focal_epoch: usize,
    /// Epoch (0-based) before which the focal points are refreshed.
    pub refresh_epoch: Option<usize>,
    pub epa: bool,
    pub epa_threshold: usize,
    pub epa_window: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub loss_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 5,
            lr: 3e-4,
            focal_epoch: 3,
            refresh_epoch: Some(5),
            epa: true,
            epa_threshold: 28,
            epa_window: 2,
            tau_start: 1.0,
            tau_end: 0.1,
            grad_clip: 10.0,
            loss_window: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Trailing frames of each scene that are refined; earlier frames only
    /// supply history.
    pub current_frames: usize,
    pub trajectory_iou: f64,
    /// Retention window of the focal store.
    pub t_max: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_scenes: 200, eval_scenes: 50, current_frames: 2, trajectory_iou: 0.5, t_max: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Minimum proposal IoU for a proposal to count as matched.
    pub match_iou: f64,
    /// Upper bounds of the sparse and medium point-count buckets.
    pub bucket_edges: [usize; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { match_iou: 0.1, bucket_edges: [20, 100] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub rpn: RpnConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self {
                seed: 0,
                model: ModelConfig::default(),
                scene: SceneConfig::default(),
                rpn: RpnConfig::default(),
                train: TrainConfig::default(),
                data: DataConfig::default(),
                eval: EvalConfig::default(),
            },
            Preset::Desk => {
                let model = ModelConfig::desk();
                let scene = SceneConfig { frames: model.frames + 2, ..SceneConfig::default() };
                Self { model, scene, ..Self::preset(Preset::Full) }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let err = |m: &str| Err(HarnessError::Config(m.into()));
        if self.model.extra_dim != 1 {
            return err("scenes carry exactly one extra feature (intensity); model.extra_dim must be 1");
        }
        if self.scene.frames == 0 || self.data.current_frames == 0 || self.data.current_frames > self.scene.frames {
            return err("data.current_frames must be in 1..=scene.frames");
        }
        if self.scene.objects_min > self.scene.objects_max || self.scene.min_points > self.scene.max_points {
            return err("scene ranges are inverted");
        }
        if !(self.rpn.recall > 0.0 && self.rpn.recall <= 1.0) {
            return err("rpn.recall must be in (0, 1]");
        }
        if self.train.batch_size == 0 || self.train.tau_start <= 0.0 || self.train.tau_end <= 0.0 {
            return err("train.batch_size and the gumbel temperatures must be positive");
        }
        if (self.scene.frame_dt - self.model.frame_dt).abs() > 1e-12 {
            return err("scene.frame_dt and model.frame_dt differ");
        }
        Ok(())
    }

    /// Merge an override document over `base`.
    pub fn from_value(base: &PipelineConfig, overrides: Value) -> Result<Self> {
        let overrides = normalize(expand_dotted(overrides)?)?;
        let mut merged = serde_json::to_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge(&mut merged, overrides);
        let cfg: PipelineConfig = serde_json::from_value(merged).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse a JSON or TOML document; the extension decides, and unknown
/// extensions try JSON first.
pub fn parse_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let as_json = || serde_json::from_str::<Value>(&text).map_err(|e| e.to_string());
    let as_toml = || toml::from_str::<Value>(&text).map_err(|e| e.to_string());
    let parsed = match ext {
        "json" => as_json(),
        "toml" => as_toml(),
        _ => as_json().or_else(|_| as_toml()),
    };
    parsed.map_err(|detail| HarnessError::Format { what: "config file", detail })
}

/// Resolve the configuration from an optional file. The preset is the
/// explicit one, else the file's `preset` key, else `fallback`.
pub fn load(path: Option<&Path>, preset: Option<Preset>, fallback: Preset) -> Result<PipelineConfig> {
    let doc = match path {
        Some(p) => parse_document(p)?,
        None => Value::Object(Map::new()),
    };
    let mut doc = expand_dotted(doc)?;
    let file_preset = match doc.as_object_mut().and_then(|m| m.remove("preset")) {
        Some(v) => Some(serde_json::from_value::<Preset>(v).map_err(|e| HarnessError::Config(format!("preset: {e}")))?),
        None => None,
    };
    let base = PipelineConfig::preset(preset.or(file_preset).unwrap_or(fallback));
    PipelineConfig::from_value(&base, doc)
}

fn expand_dotted(v: Value) -> Result<Value> {
    let Value::Object(map) = v else {
        return Err(HarnessError::Config("the config document must be a table".into()));
    };
    let mut out = Value::Object(Map::new());
    for (key, value) in map {
        let mut nested = if value.is_object() { expand_dotted(value)? } else { value };
        for part in key.split('.').rev() {
            if part.is_empty() {
                return Err(HarnessError::Config(format!("empty segment in key `{key}`")));
            }
            nested = Value::Object(Map::from_iter([(part.to_string(), nested)]));
        }
        merge(&mut out, nested);
    }
    Ok(out)
}

const SCALING_KEYS: &[(&str, &str)] =
    &[("scorer", "scorer"), ("beta1", "beta1"), ("beta2", "beta2"), ("layers", "ssp_layers"), ("eta", "eta")];
const FUSION_KEYS: &[(&str, &str)] = &[
    ("T", "frames"),
    ("G", "groups"),
    ("strategy", "strategy"),
    ("beta2", "beta2"),
    ("k_out", "k_out"),
    ("schedule", "schedule"),
    ("use_igf", "use_igf"),
];

/// Move the alias sections into `model`.
fn normalize(v: Value) -> Result<Value> {
    let Value::Object(mut map) = v else { unreachable!("expand_dotted returns a table") };
    let mut model = match map.remove("model") {
        Some(Value::Object(m)) => m,
        Some(_) => return Err(HarnessError::Config("`model` must be a table".into())),
        None => Map::new(),
    };
    for (section, keys) in [("scaling", SCALING_KEYS), ("fusion", FUSION_KEYS)] {
        let Some(sec) = map.remove(section) else { continue };
        let Value::Object(sec) = sec else {
            return Err(HarnessError::Config(format!("`{section}` must be a table")));
        };
        for (k, v) in sec {
            let Some(&(_, field)) = keys.iter().find(|(alias, _)| *alias == k) else {
                return Err(HarnessError::Config(format!("unknown key `{section}.{k}`")));
            };
            model.insert(field.to_string(), v);
        }
    }
    if !model.is_empty() {
        map.insert("model".into(), Value::Object(model));
    }
    Ok(Value::Object(map))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
