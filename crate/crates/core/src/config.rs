//! Plain-text run configuration: `key = value` lines, `#` comments, and a
//! mandatory `schema_version`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluation::{ApMode, EvalOptions, DEFAULT_BOUNDARY_FRACTION};
use crate::pipeline::{ModelConfig, TrainConfig};
use crate::reduction::DEFAULT_ANGLE_THRESHOLD;
use crate::synth::SceneConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Recommended ranges for the key hyperparameters.
pub const VERTICES_RANGE: (usize, usize) = (64, 128);
pub const CENTER_THRESHOLD_RANGE: (f64, f64) = (0.05, 0.2);
pub const TOP_K_RANGE: (usize, usize) = (200, 300);
pub const VERTEX_THRESHOLD_RANGE: (f64, f64) = (0.5, 0.7);
pub const ITERATIONS_RANGE: (usize, usize) = (2, 3);
pub const DELTA_RANGE: (f64, f64) = (4.0, 6.0);

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    /// Seed of the model initialization.
    pub init_seed: u64,
    pub max_buildings: usize,
    pub angle_threshold: f64,
    pub ap_mode: ApMode,
    pub boundary_fraction: f64,
    /// Accept hyperparameters outside the recommended ranges.
    pub allow_out_of_range: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            init_seed: 0,
            max_buildings: 4,
            angle_threshold: DEFAULT_ANGLE_THRESHOLD,
            ap_mode: ApMode::default(),
            boundary_fraction: DEFAULT_BOUNDARY_FRACTION,
            allow_out_of_range: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value '{value}' for {key}")))
}

/// `key value` pairs of a model config, in a fixed order.
pub fn model_entries(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("vertices", c.vertices.to_string()),
        ("anchors", c.anchors.to_string()),
        ("feature_channels", c.feature_channels.to_string()),
        ("detector_width", c.detector_width.to_string()),
        ("evolution_hidden", c.evolution_hidden.to_string()),
        ("iterations", c.iterations.to_string()),
        ("gamma", c.gamma.to_string()),
        ("center_threshold", c.center_threshold.to_string()),
        ("top_k", c.top_k.to_string()),
        ("vertex_threshold", c.vertex_threshold.to_string()),
        ("delta", c.delta.to_string()),
        ("epsilon", c.epsilon.to_string()),
        ("invalid_weight", c.invalid_weight.to_string()),
        ("focal_alpha", c.focal_alpha.to_string()),
        ("focal_beta", c.focal_beta.to_string()),
    ]
}

/// Sets one model field from text; `Ok(false)` for keys it does not own.
pub fn set_model_field(c: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "vertices" => c.vertices = parse(key, value)?,
        "anchors" => c.anchors = parse(key, value)?,
        "feature_channels" => c.feature_channels = parse(key, value)?,
        "detector_width" => c.detector_width = parse(key, value)?,
        "evolution_hidden" => c.evolution_hidden = parse(key, value)?,
        "iterations" => c.iterations = parse(key, value)?,
        "gamma" => c.gamma = parse(key, value)?,
        "center_threshold" => c.center_threshold = parse(key, value)?,
        "top_k" => c.top_k = parse(key, value)?,
        "vertex_threshold" => c.vertex_threshold = parse(key, value)?,
        "delta" => c.delta = parse(key, value)?,
        "epsilon" => c.epsilon = parse(key, value)?,
        "invalid_weight" => c.invalid_weight = parse(key, value)?,
        "focal_alpha" => c.focal_alpha = parse(key, value)?,
        "focal_beta" => c.focal_beta = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn list_to_string(v: &[usize]) -> String {
    v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ")
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s = &self.scene;
        let mut e = vec![("schema_version", SCHEMA_VERSION.to_string())];
        e.extend(model_entries(&self.model));
        e.extend([
            ("init_seed", self.init_seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("decay_epochs", list_to_string(&t.decay_epochs)),
            ("decay_factor", t.decay_factor.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("train_seed", t.seed.to_string()),
            ("scene_width", s.width.to_string()),
            ("scene_height", s.height.to_string()),
            ("min_area", s.min_area.to_string()),
            ("max_area", s.max_area.to_string()),
            ("min_aspect", s.min_aspect.to_string()),
            ("max_aspect", s.max_aspect.to_string()),
            ("mix_rectangle", s.shape_mix.rectangle.to_string()),
            ("mix_rotated", s.shape_mix.rotated.to_string()),
            ("mix_l_shape", s.shape_mix.l_shape.to_string()),
            ("noise", s.noise.to_string()),
            ("margin", s.margin.to_string()),
            ("gap", s.gap.to_string()),
            ("max_retries", s.max_retries.to_string()),
            ("max_buildings", self.max_buildings.to_string()),
            ("angle_threshold", self.angle_threshold.to_string()),
            ("ap_mode", self.ap_mode.to_string()),
            ("boundary_fraction", self.boundary_fraction.to_string()),
            ("allow_out_of_range", self.allow_out_of_range.to_string()),
        ]);
        e
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_model_field(&mut self.model, key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        let s = &mut self.scene;
        match key {
            "init_seed" => self.init_seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "decay_epochs" => t.decay_epochs = parse_list(key, value)?,
            "decay_factor" => t.decay_factor = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse()?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "train_seed" => t.seed = parse(key, value)?,
            "scene_width" => s.width = parse(key, value)?,
            "scene_height" => s.height = parse(key, value)?,
            "min_area" => s.min_area = parse(key, value)?,
            "max_area" => s.max_area = parse(key, value)?,
            "min_aspect" => s.min_aspect = parse(key, value)?,
            "max_aspect" => s.max_aspect = parse(key, value)?,
            "mix_rectangle" => s.shape_mix.rectangle = parse(key, value)?,
            "mix_rotated" => s.shape_mix.rotated = parse(key, value)?,
            "mix_l_shape" => s.shape_mix.l_shape = parse(key, value)?,
            "noise" => s.noise = parse(key, value)?,
            "margin" => s.margin = parse(key, value)?,
            "gap" => s.gap = parse(key, value)?,
            "max_retries" => s.max_retries = parse(key, value)?,
            "max_buildings" => self.max_buildings = parse(key, value)?,
            "angle_threshold" => self.angle_threshold = parse(key, value)?,
            "ap_mode" => self.ap_mode = value.parse()?,
            "boundary_fraction" => self.boundary_fraction = parse(key, value)?,
            "allow_out_of_range" => self.allow_out_of_range = parse(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Parses a config. Keys absent from the text keep their defaults.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut version = None;
        let mut seen: Vec<String> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::InvalidArgument(format!("line {}: {e}", no + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(Error::InvalidArgument("expected key = value".into())))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(at(Error::InvalidArgument(format!("duplicate key {key}"))));
            }
            seen.push(key.to_string());
            if key == "schema_version" {
                version = Some(parse::<u32>(key, value).map_err(at)?);
            } else {
                cfg.set(key, value).map_err(at)?;
            }
        }
        match version {
            Some(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::InvalidArgument(format!(
                    "unsupported schema_version {v}, expected {SCHEMA_VERSION}"
                )))
            }
            None => return Err(Error::InvalidArgument("missing schema_version".into())),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            ap_mode: self.ap_mode,
            boundary_fraction: self.boundary_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let m = &self.model;
        if m.vertices % 4 != 0 {
            return Err(Error::InvalidArgument("vertices must be divisible by 4".into()));
        }
        if !self.allow_out_of_range {
            let mut out = Vec::new();
            let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
            let r = |(lo, hi): (usize, usize)| (lo as f64, hi as f64);
            if !within(m.vertices as f64, r(VERTICES_RANGE)) {
                out.push(format!("vertices = {} outside {:?}", m.vertices, VERTICES_RANGE));
            }
            if !within(m.center_threshold, CENTER_THRESHOLD_RANGE) {
                out.push(format!("center_threshold = {} outside {:?}", m.center_threshold, CENTER_THRESHOLD_RANGE));
            }
            if !within(m.top_k as f64, r(TOP_K_RANGE)) {
                out.push(format!("top_k = {} outside {:?}", m.top_k, TOP_K_RANGE));
            }
            if !within(m.vertex_threshold, VERTEX_THRESHOLD_RANGE) {
                out.push(format!("vertex_threshold = {} outside {:?}", m.vertex_threshold, VERTEX_THRESHOLD_RANGE));
            }
            if !within(m.iterations as f64, r(ITERATIONS_RANGE)) {
                out.push(format!("iterations = {} outside {:?}", m.iterations, ITERATIONS_RANGE));
            }
            if !within(m.delta, DELTA_RANGE) {
                out.push(format!("delta = {} outside {:?}", m.delta, DELTA_RANGE));
            }
            if !out.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{} (set allow_out_of_range = true to override)",
                    out.join("; ")
                )));
            }
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.learning_rate >= 0.0) || !(t.decay_factor > 0.0) || !(t.clip_norm >= 0.0) {
            return Err(Error::InvalidArgument(
                "batch_size must be positive, learning_rate and clip_norm non-negative, decay_factor positive".into(),
            ));
        }
        if self.max_buildings == 0 {
            return Err(Error::InvalidArgument("max_buildings must be positive".into()));
        }
        if !(self.boundary_fraction > 0.0) || !(self.angle_threshold > 0.0) {
            return Err(Error::InvalidArgument("boundary_fraction and angle_threshold must be positive".into()));
        }
        Ok(())
    }
}
