//! Plain `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment line, blank lines are ignored.
//! Unknown and repeated keys are errors. Every key has a default, so an empty
//! file is a valid configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::net::ModelConfig;
use crate::openworld::{DiscoveryRule, ScoreParams, Strategy};
use crate::synthdata::{SceneSpec, Shape};
use crate::tensor::DType;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Known classes including the ground.
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub xi: f64,
    pub delta: f64,
    pub tau: f64,
    pub eta: f64,
    pub strategy: Strategy,
    pub use_cont: bool,
    pub use_feat_loss: bool,
    pub t_th: f64,
    pub discovery_rule: DiscoveryRule,
    pub dtype: DType,
    pub base_width: usize,
    pub depth: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `out_dir/model.owss`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let t = TrainConfig::default();
        Self {
            seed: 7,
            classes: 4,
            height: 32,
            width: 32,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            w1: w.w1,
            w2: w.w2,
            w3: w.w3,
            w4: w.w4,
            xi: w.xi,
            delta: 0.6,
            tau: w.tau,
            eta: 0.5,
            strategy: Strategy::Gs,
            use_cont: true,
            use_feat_loss: true,
            t_th: ScoreParams::default().t_th,
            discovery_rule: DiscoveryRule::default(),
            dtype: DType::F32,
            base_width: 8,
            depth: 2,
            train_scenes: 200,
            val_scenes: 50,
            test_scenes: 100,
            dataset_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

/// Key order of the echoed configuration.
pub const KEYS: [&str; 31] = [
    "seed",
    "K",
    "height",
    "width",
    "epochs",
    "batch",
    "lr",
    "w1",
    "w2",
    "w3",
    "w4",
    "xi",
    "delta",
    "tau",
    "eta",
    "strategy",
    "use_cont",
    "use_feat_loss",
    "t_th",
    "discovery_rule",
    "dtype",
    "base_width",
    "depth",
    "train_scenes",
    "val_scenes",
    "test_scenes",
    "dataset_dir",
    "out_dir",
    "checkpoint",
    "known_shapes",
    "unknown_shapes",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn shape_list(shapes: &[Shape]) -> String {
    shapes
        .iter()
        .map(|s| s.name())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: {key} set twice", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    n + 1,
                    e.to_string().trim_start_matches("configuration error: ")
                ))
            })?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "K" => self.classes = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "w1" => self.w1 = parse(key, value)?,
            "w2" => self.w2 = parse(key, value)?,
            "w3" => self.w3 = parse(key, value)?,
            "w4" => self.w4 = parse(key, value)?,
            "xi" => self.xi = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "use_cont" => self.use_cont = parse_bool(key, value)?,
            "use_feat_loss" => self.use_feat_loss = parse_bool(key, value)?,
            "t_th" => self.t_th = parse(key, value)?,
            "discovery_rule" => self.discovery_rule = value.parse()?,
            "dtype" => {
                self.dtype = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => {
                        return Err(Error::Config(format!(
                            "dtype: expected f32 or f64, got {value:?}"
                        )))
                    }
                }
            }
            "base_width" => self.base_width = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "train_scenes" => self.train_scenes = parse(key, value)?,
            "val_scenes" => self.val_scenes = parse(key, value)?,
            "test_scenes" => self.test_scenes = parse(key, value)?,
            "dataset_dir" => self.dataset_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            "known_shapes" | "unknown_shapes" => {
                return Err(Error::Config(format!(
                    "{key} is derived from K and cannot be set"
                )));
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let max_k = Shape::ALL
            .iter()
            .filter(|s| s.most_similar() == **s)
            .count()
            + 1;
        if !(3..=max_k).contains(&self.classes) {
            return Err(Error::Config(format!(
                "K must be between 3 and {max_k}, got {}",
                self.classes
            )));
        }
        for (name, v) in [
            ("delta", self.delta),
            ("eta", self.eta),
            ("t_th", self.t_th),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "delta must lie in [0, 1], got {}",
                self.delta
            )));
        }
        self.scene_spec().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.height % self.model_config().stride() != 0
            || self.width % self.model_config().stride() != 0
        {
            return Err(Error::Config(format!(
                "{}x{} images are not divisible by 2^{}",
                self.height, self.width, self.depth
            )));
        }
        if self.train_scenes == 0 || self.val_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::Config("every split needs at least one scene".into()));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.owss"))
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let known: Vec<Shape> = Shape::ALL
            .into_iter()
            .filter(|s| s.most_similar() == *s)
            .take(self.classes.saturating_sub(1))
            .collect();
        let unknown = Shape::ALL
            .into_iter()
            .filter(|s| s.most_similar() != *s && known.contains(&s.most_similar()))
            .collect();
        SceneSpec {
            height: self.height,
            width: self.width,
            known,
            unknown,
            seed: self.seed,
            ..SceneSpec::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: self.classes,
            input_channels: 3,
            base_width: self.base_width,
            depth: self.depth,
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w1: self.w1,
            w2: self.w2,
            w3: self.w3,
            w4: self.w4,
            tau: self.tau,
            xi: self.xi,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            weights: self.loss_weights(),
            seed: self.seed,
            use_feat_loss: self.use_feat_loss,
            use_cont_decoder: self.use_cont,
            ..TrainConfig::default()
        }
    }

    pub fn score_params(&self) -> ScoreParams {
        ScoreParams {
            t_th: self.t_th,
            xi: self.xi,
            use_cont: self.use_cont,
        }
    }

    /// Value of `key` in the form accepted by [`set`](Self::set).
    pub fn get(&self, key: &str) -> Option<String> {
        let p = |p: &Path| p.display().to_string();
        Some(match key {
            "seed" => self.seed.to_string(),
            "K" => self.classes.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "w1" => self.w1.to_string(),
            "w2" => self.w2.to_string(),
            "w3" => self.w3.to_string(),
            "w4" => self.w4.to_string(),
            "xi" => self.xi.to_string(),
            "delta" => self.delta.to_string(),
            "tau" => self.tau.to_string(),
            "eta" => self.eta.to_string(),
            "strategy" => self.strategy.to_string(),
            "use_cont" => self.use_cont.to_string(),
            "use_feat_loss" => self.use_feat_loss.to_string(),
            "t_th" => self.t_th.to_string(),
            "discovery_rule" => self.discovery_rule.to_string(),
            "dtype" => match self.dtype {
                DType::F32 => "f32".into(),
                DType::F64 => "f64".into(),
            },
            "base_width" => self.base_width.to_string(),
            "depth" => self.depth.to_string(),
            "train_scenes" => self.train_scenes.to_string(),
            "val_scenes" => self.val_scenes.to_string(),
            "test_scenes" => self.test_scenes.to_string(),
            "dataset_dir" => p(&self.dataset_dir),
            "out_dir" => p(&self.out_dir),
            "checkpoint" => p(&self.checkpoint_path()),
            "known_shapes" => shape_list(&self.scene_spec().known),
            "unknown_shapes" => shape_list(&self.scene_spec().unknown),
            _ => return None,
        })
    }

    /// Settable keys only, so the output parses back to an equal config
    /// (with `checkpoint` made explicit).
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .filter(|k| !k.ends_with("_shapes"))
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

/// Ordered `key=value` results file: the full configuration, then any
/// number of result entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Results {
    entries: Vec<(String, String)>,
}

impl Results {
    /// Starts with every configuration key, derived ones included.
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            entries: KEYS
                .iter()
                .map(|k| (k.to_string(), cfg.get(k).expect("listed key")))
                .collect(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Results {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
