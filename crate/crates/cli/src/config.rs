//! Experiment configuration (TOML). Every key is optional; see
//! `docs/config.md` for the schema and defaults.

use std::path::{Path, PathBuf};

use ccl_core::ccl::{CclConfig, SelfSource};
use ccl_core::continual::{ContinualConfig, TargetSource};
use ccl_core::dsi::DsiConfig;
use ccl_core::models::TrainConfig;
use ccl_core::partition::{GridSpec, PartitionPattern};
use ccl_core::sampler::{BaseStrategy, SamplerConfig, Strategy};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: Option<PathBuf>,
    /// Directory written by `gen-data`; `simulate` loads sessions from it
    /// instead of regenerating them.
    pub data_dir: Option<PathBuf>,
    pub world: WorldSection,
    pub scenarios: ScenarioSection,
    pub sweep: SweepSection,
    pub sampler: SamplerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ccl: CclSection,
    pub dsi: DsiSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub classes: usize,
    /// Defaults to the number of classes.
    pub feature_dim: Option<usize>,
    pub concentration: f64,
    pub drift: f64,
    pub sessions: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub seed: u64,
    /// Partition pattern file; when set, classes come from the partition.
    pub pattern: Option<PathBuf>,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            classes: 40,
            feature_dim: None,
            concentration: 50.0,
            drift: 0.2,
            sessions: 25,
            samples_per_class: 20,
            test_samples_per_class: 10,
            seed: 0,
            pattern: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub ids: Vec<usize>,
    pub classes_per_model: usize,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            ids: (0..6).collect(),
            classes_per_model: 10,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub strategies: Vec<String>,
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            strategies: ["US", "RR", "Entropy", "Replay", "Mixup"].map(String::from).to_vec(),
            n_values: vec![1, 2, 5, 10, 20],
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub oversample_factor: f64,
    pub replay_count: usize,
    /// `0` sends RR-family inputs densely.
    pub khot_k: usize,
    pub mixup_base: String,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            oversample_factor: 10.0,
            replay_count: 1,
            khot_k: 10,
            mixup_base: "RR".into(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden_dim: 32 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 100,
            batch_size: 8,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CclSection {
    pub self_reconstruction: bool,
    /// `"same"` or a strategy name.
    pub self_strategy: String,
    /// `"student"` or `"teachers"`.
    pub self_source: String,
    pub warm_start: bool,
}

impl Default for CclSection {
    fn default() -> Self {
        Self {
            self_reconstruction: true,
            self_strategy: "same".into(),
            self_source: "student".into(),
            warm_start: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsiSection {
    pub classes: usize,
    pub feature_dim: Option<usize>,
    pub concentration: f64,
    pub drift: f64,
    pub sessions: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_per_class: usize,
    pub robots: usize,
    pub lambda: f64,
    /// Defaults to `0.5 ln C`.
    pub tau: Option<f64>,
    /// `"teacher"` or `"labels"`.
    pub targets: String,
}

impl Default for DsiSection {
    fn default() -> Self {
        let c = ContinualConfig::default();
        Self {
            classes: c.num_classes,
            feature_dim: None,
            concentration: c.concentration,
            drift: c.drift_magnitude,
            sessions: c.num_sessions,
            train_per_class: c.train_per_class,
            test_per_class: c.test_per_class,
            hidden_dim: c.hidden_dim,
            learning_rate: c.train.learning_rate,
            epochs: c.train.epochs,
            batch_size: c.train.batch_size,
            buffer_per_class: c.buffer_per_class,
            robots: c.robots,
            lambda: c.dsi.lambda,
            tau: None,
            targets: "teacher".into(),
        }
    }
}

/// Partition pattern file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternFile {
    /// Number of uniformly drawn trajectory points used to enumerate tuples.
    pub points: usize,
    pub min_samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub grids: Vec<GridEntry>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    /// `[x_min, y_min, x_max, y_max]`.
    pub bounds: [f64; 4],
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub shift: [f64; 2],
}

impl PatternFile {
    pub fn pattern(&self) -> Result<PartitionPattern, ccl_core::Error> {
        let grids = self
            .grids
            .iter()
            .map(|g| Ok(GridSpec::new(g.bounds, g.rows, g.cols)?.shifted(g.shift[0], g.shift[1])))
            .collect::<Result<_, ccl_core::Error>>()?;
        Ok(PartitionPattern {
            grids,
            min_samples_per_class: self.min_samples,
        })
    }

    /// Bounding box covering every grid.
    pub fn workspace(&self) -> [f64; 4] {
        self.grids.iter().fold(
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            |acc, g| {
                [
                    acc[0].min(g.bounds[0]),
                    acc[1].min(g.bounds[1]),
                    acc[2].max(g.bounds[2]),
                    acc[3].max(g.bounds[3]),
                ]
            },
        )
    }
}

/// 1-based line of the first byte of `offset` in `text`.
fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line where `key` is assigned inside `[section]` (top level when
/// `section` is empty); falls back to the section header, then line 1.
fn line_of_key(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return i + 1;
                }
            }
        }
    }
    header_line.unwrap_or(1)
}

pub fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> CliResult<T> {
    toml::from_str(text).map_err(|e| CliError::ConfigAt {
        path: path.to_path_buf(),
        line: e.span().map_or(1, |s| line_of_offset(text, s.start)),
        message: e.message().to_string(),
    })
}

/// A parsed config that remembers its source for error locations.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: Option<PathBuf>,
    text: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_text(text, Some(path.to_path_buf()))
    }

    pub fn from_text(text: String, path: Option<PathBuf>) -> CliResult<Self> {
        let shown = path.clone().unwrap_or_else(|| PathBuf::from("<config>"));
        let config = parse_toml(&text, &shown)?;
        let loaded = Self { config, path, text };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn defaults() -> Self {
        Self {
            config: ExperimentConfig::default(),
            path: None,
            text: String::new(),
        }
    }

    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> CliError {
        CliError::ConfigAt {
            path: self.path.clone().unwrap_or_else(|| PathBuf::from("<config>")),
            line: line_of_key(&self.text, section, key),
            message: format!("{}{key}: {}", if section.is_empty() { String::new() } else { format!("{section}.") }, message.into()),
        }
    }

    /// Resolve a path from the config relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match (&self.path, p.is_absolute()) {
            (Some(cfg), false) => cfg.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p)),
            _ => p.to_path_buf(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let c = &self.config;
        let w = &c.world;
        if w.pattern.is_none() && w.classes < 2 {
            return Err(self.err("world", "classes", "need at least 2 classes"));
        }
        if w.feature_dim.is_some_and(|d| d < 2) {
            return Err(self.err("world", "feature_dim", "must be at least 2"));
        }
        if !(w.concentration > 0.0 && w.concentration.is_finite()) {
            return Err(self.err("world", "concentration", "must be positive"));
        }
        if !(w.drift >= 0.0 && w.drift.is_finite()) {
            return Err(self.err("world", "drift", "must be non-negative"));
        }
        if w.sessions == 0 {
            return Err(self.err("world", "sessions", "must be positive"));
        }
        if w.samples_per_class == 0 {
            return Err(self.err("world", "samples_per_class", "must be positive"));
        }
        if w.test_samples_per_class == 0 {
            return Err(self.err("world", "test_samples_per_class", "must be positive"));
        }
        if c.scenarios.ids.is_empty() {
            return Err(self.err("scenarios", "ids", "list at least one scenario"));
        }
        if c.scenarios.classes_per_model == 0
            || (w.pattern.is_none() && c.scenarios.classes_per_model > w.classes)
        {
            return Err(self.err("scenarios", "classes_per_model", format!("must be in 1..={}", w.classes)));
        }
        if c.sweep.strategies.is_empty() {
            return Err(self.err("sweep", "strategies", "list at least one strategy"));
        }
        for s in &c.sweep.strategies {
            s.parse::<Strategy>().map_err(|e| self.err("sweep", "strategies", e.to_string()))?;
        }
        if c.sweep.n_values.is_empty() || c.sweep.n_values.contains(&0) {
            return Err(self.err("sweep", "n_values", "values must be positive and non-empty"));
        }
        if c.sweep.seeds.is_empty() {
            return Err(self.err("sweep", "seeds", "list at least one seed"));
        }
        let sampler = &c.sampler;
        if !(sampler.oversample_factor >= 1.0) {
            return Err(self.err("sampler", "oversample_factor", "must be at least 1"));
        }
        if sampler.replay_count == 0 || c.sweep.n_values.iter().any(|n| *n < sampler.replay_count) {
            return Err(self.err("sampler", "replay_count", "must be in 1..=min(n_values)"));
        }
        sampler
            .mixup_base
            .parse::<BaseStrategy>()
            .map_err(|e| self.err("sampler", "mixup_base", e.to_string()))?;
        let t = &c.train;
        if !(t.learning_rate > 0.0) {
            return Err(self.err("train", "learning_rate", "must be positive"));
        }
        if t.epochs == 0 {
            return Err(self.err("train", "epochs", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(self.err("train", "batch_size", "must be positive"));
        }
        if !(t.temperature > 0.0) {
            return Err(self.err("train", "temperature", "must be positive"));
        }
        if c.ccl.self_strategy != "same" {
            c.ccl
                .self_strategy
                .parse::<Strategy>()
                .map_err(|e| self.err("ccl", "self_strategy", e.to_string()))?;
        }
        if !matches!(c.ccl.self_source.as_str(), "student" | "teachers") {
            return Err(self.err("ccl", "self_source", "expected \"student\" or \"teachers\""));
        }
        let d = &c.dsi;
        if d.sessions == 0 || d.classes < d.sessions {
            return Err(self.err("dsi", "classes", "need at least one class per session"));
        }
        if d.robots == 0 {
            return Err(self.err("dsi", "robots", "must be positive"));
        }
        if !(d.lambda > 0.0) {
            return Err(self.err("dsi", "lambda", "must be positive"));
        }
        if d.tau.is_some_and(|t| !(t >= 0.0)) {
            return Err(self.err("dsi", "tau", "must be non-negative"));
        }
        if !matches!(d.targets.as_str(), "teacher" | "labels") {
            return Err(self.err("dsi", "targets", "expected \"teacher\" or \"labels\""));
        }
        if d.epochs == 0 || d.batch_size == 0 || !(d.learning_rate > 0.0) {
            return Err(self.err("dsi", "epochs", "training settings must be positive"));
        }
        Ok(())
    }

    pub fn strategies(&self) -> Vec<Strategy> {
        self.config.sweep.strategies.iter().map(|s| s.parse().expect("validated")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.config.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            temperature: t.temperature,
            seed: 0,
        }
    }

    pub fn ccl_config(&self, strategy: Strategy, n: usize, seed: u64) -> CclConfig {
        let c = &self.config;
        CclConfig {
            sampler: SamplerConfig {
                n_per_class: n,
                strategy,
                oversample_factor: c.sampler.oversample_factor,
                replay_count: c.sampler.replay_count,
                khot_k: (c.sampler.khot_k > 0).then_some(c.sampler.khot_k),
                base_strategy: c.sampler.mixup_base.parse().expect("validated"),
                seed,
            },
            hidden_dim: c.model.hidden_dim,
            train: self.train_config(),
            self_reconstruction: c.ccl.self_reconstruction,
            self_strategy: (c.ccl.self_strategy != "same").then(|| c.ccl.self_strategy.parse().expect("validated")),
            self_source: if c.ccl.self_source == "teachers" {
                SelfSource::EarlierTeachers
            } else {
                SelfSource::Student
            },
            warm_start: c.ccl.warm_start,
        }
    }

    pub fn continual_config(&self, seed: u64) -> ContinualConfig {
        let d = &self.config.dsi;
        ContinualConfig {
            num_classes: d.classes,
            feature_dim: d.feature_dim.unwrap_or(d.classes),
            concentration: d.concentration,
            drift_magnitude: d.drift,
            num_sessions: d.sessions,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            hidden_dim: d.hidden_dim,
            train: TrainConfig {
                learning_rate: d.learning_rate,
                epochs: d.epochs,
                batch_size: d.batch_size,
                temperature: 1.0,
                seed: 0,
            },
            buffer_per_class: d.buffer_per_class,
            robots: d.robots,
            dsi: DsiConfig {
                lambda: d.lambda,
                tau: d.tau.unwrap_or(0.5 * (d.classes as f64).ln()),
            },
            targets: if d.targets == "labels" {
                TargetSource::Labels
            } else {
                TargetSource::Teacher
            },
            seed,
        }
    }

    pub fn load_pattern(&self) -> CliResult<Option<PatternFile>> {
        let Some(rel) = &self.config.world.pattern else {
            return Ok(None);
        };
        let path = self.resolve(rel);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let pattern: PatternFile = parse_toml(&text, &path)?;
        if pattern.grids.is_empty() {
            return Err(CliError::ConfigAt {
                path,
                line: 1,
                message: "a pattern needs at least one [[grids]] entry".into(),
            });
        }
        Ok(Some(pattern))
    }
}
