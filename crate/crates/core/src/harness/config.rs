//! Run configuration, scenario specifications, and seed derivation.
//!
//! Every random stream in a run is derived from the single `root_seed`
//! through [`derive_seed`], so a `(config hash, root seed)` pair fully
//! determines every emitted number.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::{EnsembleConfig, TrainHyper};
use crate::gcnmodel::{fnv1a, GcnConfig};
use crate::roadnet::{
    generate_grid_network, generate_random_network_unchecked, RoadNetwork,
};

use super::HarnessError;

/// Stable seed derivation: FNV-1a over the root seed and a tag path.
pub fn derive_seed(root: u64, tags: &[&str]) -> u64 {
    let mut bytes = root.to_le_bytes().to_vec();
    for tag in tags {
        bytes.push(0x1f);
        bytes.extend_from_slice(tag.as_bytes());
    }
    fnv1a(&bytes)
}

/// Evaluation method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fixed,
    Greedy,
    Igrl,
    Dgrl,
    Rglight,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Fixed, Method::Greedy, Method::Igrl, Method::Dgrl, Method::Rglight];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fixed => "fixed",
            Method::Greedy => "greedy",
            Method::Igrl => "igrl",
            Method::Dgrl => "dgrl",
            Method::Rglight => "rglight",
        }
    }

    /// Whether the method consumes the state graph (and is therefore
    /// affected by sensor failures).
    pub fn observes_graph(self) -> bool {
        matches!(self, Method::Igrl | Method::Dgrl | Method::Rglight)
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fixed" => Ok(Method::Fixed),
            "greedy" => Ok(Method::Greedy),
            "igrl" => Ok(Method::Igrl),
            "dgrl" => Ok(Method::Dgrl),
            "rglight" => Ok(Method::Rglight),
            other => Err(HarnessError::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Where a scenario's network comes from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetworkSource {
    Grid { rows: u32, cols: u32, lanes: u32 },
    Random { seed: u64, n: u32, lanes: u32 },
    File { path: PathBuf },
}

impl NetworkSource {
    pub fn build(&self) -> Result<RoadNetwork, HarnessError> {
        match self {
            NetworkSource::Grid { rows, cols, lanes } => {
                Ok(generate_grid_network(*rows, *cols, *lanes)?)
            }
            NetworkSource::Random { seed, n, lanes } => {
                Ok(generate_random_network_unchecked(*seed, *n, *lanes)?)
            }
            NetworkSource::File { path } => {
                let text = std::fs::read_to_string(path)?;
                Ok(RoadNetwork::from_json(&text)?)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            NetworkSource::Grid { rows, cols, lanes } => format!("grid{rows}x{cols}l{lanes}"),
            NetworkSource::Random { seed, n, lanes } => format!("rand{n}s{seed}l{lanes}"),
            NetworkSource::File { path } => format!(
                "file_{}",
                path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default()
            ),
        }
    }
}

/// One evaluation cell: a network, a demand level, a sensor-failure level,
/// and the seed list shared by every method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub key: String,
    pub network: NetworkSource,
    pub period: f64,
    pub missing_probability: f64,
    pub horizon: u64,
    pub seeds: Vec<u64>,
}

impl ScenarioSpec {
    pub fn new(
        network: NetworkSource,
        period: f64,
        missing_probability: f64,
        horizon: u64,
        seeds: Vec<u64>,
    ) -> Result<Self, HarnessError> {
        if period <= 0.0 {
            return Err(HarnessError::Config("period must be positive".into()));
        }
        if !(0.0..=1.0).contains(&missing_probability) {
            return Err(HarnessError::Config("missing probability outside [0, 1]".into()));
        }
        if horizon == 0 {
            return Err(HarnessError::Config("horizon must be positive".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        if seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed required".into()));
        }
        if let NetworkSource::File { path } = &network {
            if !path.exists() {
                return Err(HarnessError::Config(format!(
                    "network file {} does not exist",
                    path.display()
                )));
            }
        }
        let key = format!(
            "{}_p{}_m{}",
            network.label(),
            trim_float(period),
            trim_float(missing_probability)
        );
        Ok(Self { key, network, period, missing_probability, horizon, seeds })
    }

    /// Seed-derivation tag shared by scenarios that must consume identical
    /// trip schedules: everything but the missing probability. Sensor
    /// failures only perturb observations, never the demand.
    pub fn pairing_key(&self) -> String {
        format!("{}_p{}_h{}", self.network.label(), self.period, self.horizon)
    }
}

fn trim_float(v: f64) -> String {
    let s = format!("{v}");
    s.replace('.', "_")
}

/// Training-run parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: u32,
    pub episode_horizon: u64,
    /// Demand period during training (normal regime).
    pub period: f64,
    /// Missing probability during training; nonzero values deviate from
    /// the no-failure training protocol and produce a warning.
    pub missing_probability: f64,
    /// Number of pre-generated training networks cycled per episode.
    pub network_count: u32,
    /// Random-network size range (inclusive) sampled per training network.
    pub network_size_min: u32,
    pub network_size_max: u32,
    pub lanes_per_route: u32,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Episodes over which ε anneals linearly from start to end.
    pub eps_anneal_episodes: u32,
    pub hyper: TrainHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 60,
            episode_horizon: 400,
            period: 4.0,
            missing_probability: 0.0,
            network_count: 10,
            network_size_min: 2,
            network_size_max: 6,
            lanes_per_route: 1,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_episodes: 30,
            hyper: TrainHyper::default(),
        }
    }
}

/// Evaluation defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub horizon: u64,
    pub seeds: u32,
    /// Fixed-time baseline green duration in seconds.
    pub green_duration: u32,
    /// Divide reported sums by 100 in summary tables.
    pub paper_scale: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { horizon: 1000, seeds: 30, green_duration: 30, paper_scale: false }
    }
}

/// Top-level configuration; all randomness flows from `root_seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub root_seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for scenario cells; 0 means one per CPU.
    pub workers: usize,
    pub model: GcnConfig,
    pub ensemble: EnsembleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            root_seed: 1,
            out_dir: PathBuf::from("out"),
            workers: 0,
            model: GcnConfig::default(),
            ensemble: EnsembleConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Loads JSON or TOML depending on the file extension, then applies
    /// environment overrides.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let mut config: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?,
        };
        config.apply_env();
        Ok(config)
    }

    /// `RGLIGHT_OUT_DIR` and `RGLIGHT_WORKERS` override the file values.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var("RGLIGHT_OUT_DIR") {
            if !dir.is_empty() {
                self.out_dir = PathBuf::from(dir);
            }
        }
        if let Ok(workers) = std::env::var("RGLIGHT_WORKERS") {
            if let Ok(n) = workers.parse::<usize>() {
                self.workers = n;
            }
        }
    }

    /// Stable hash over the canonical JSON form of the whole config.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a(json.as_bytes())
    }

    /// Non-fatal protocol deviations worth surfacing.
    pub fn warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        if self.train.missing_probability > 0.0 {
            warnings.push(format!(
                "training with missing probability {} deviates from the no-failure training protocol",
                self.train.missing_probability
            ));
        }
        warnings
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let t = &self.train;
        if t.network_size_min < 2 || t.network_size_min > t.network_size_max {
            return Err(HarnessError::Config(
                "training network size range must satisfy 2 <= min <= max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&t.missing_probability) {
            return Err(HarnessError::Config("training missing probability outside [0, 1]".into()));
        }
        if t.episodes == 0 || t.episode_horizon == 0 {
            return Err(HarnessError::Config("episodes and episode_horizon must be positive".into()));
        }
        if self.eval.seeds == 0 || self.eval.horizon == 0 {
            return Err(HarnessError::Config("eval seeds and horizon must be positive".into()));
        }
        Ok(())
    }
}
