use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::{AdditiveBackend, AdditiveRefParams, EncoderBackend, RemoteBackend, RemoteConfig, ToyBackend};
use crate::error::{Error, Result};
use crate::eval_metrics::Metric;
use crate::rt_engine::{RefineConfig, StateWindow};
use crate::toy_encoder::{Hyper, PoolScope};

pub const ENV_ENDPOINT: &str = "RT_ENDPOINT";
pub const ENV_TOKEN: &str = "RT_TOKEN";

/// Which encoder to run. `seed: None` falls back to the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Toy {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        hyper: Hyper,
        #[serde(default)]
        pool_scope: PoolScope,
    },
    Additive {
        #[serde(default = "default_additive_dim")]
        dim: usize,
        #[serde(default = "default_mix")]
        mix: f64,
        #[serde(default)]
        seed: Option<u64>,
        /// JSON-serialized [`AdditiveRefParams`]; overrides the fields above.
        #[serde(default)]
        params_file: Option<PathBuf>,
    },
    Remote {
        /// Falls back to `RT_ENDPOINT`.
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: u32,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

fn default_additive_dim() -> usize {
    32
}
fn default_mix() -> f64 {
    0.5
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    8
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Toy {
            seed: None,
            hyper: Hyper::default(),
            pool_scope: PoolScope::default(),
        }
    }
}

impl BackendSpec {
    pub fn build(&self, default_seed: u64) -> Result<Box<dyn EncoderBackend<f64>>> {
        Ok(match self {
            BackendSpec::Toy {
                seed,
                hyper,
                pool_scope,
            } => Box::new(ToyBackend::from_seed(seed.unwrap_or(default_seed), *hyper, *pool_scope)?),
            BackendSpec::Additive {
                dim,
                mix,
                seed,
                params_file,
            } => {
                let params = match params_file {
                    Some(p) => read_additive_params(p)?,
                    None => AdditiveRefParams::new(*dim, *mix, seed.unwrap_or(default_seed)),
                };
                Box::new(AdditiveBackend::<f64>::new(params)?)
            }
            BackendSpec::Remote {
                endpoint,
                dim,
                timeout_ms,
                retries,
                max_in_flight,
            } => {
                let endpoint = match endpoint {
                    Some(e) => e.clone(),
                    None => std::env::var(ENV_ENDPOINT).map_err(|_| {
                        Error::Config(format!("remote backend needs an endpoint or {ENV_ENDPOINT}"))
                    })?,
                };
                let mut cfg = RemoteConfig::new(endpoint);
                cfg.dim = *dim;
                cfg.timeout = Duration::from_millis(*timeout_ms);
                cfg.retries = *retries;
                cfg.max_in_flight = *max_in_flight;
                cfg.bearer_token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
                Box::new(RemoteBackend::connect(cfg)?)
            }
        })
    }
}

pub fn read_additive_params(path: &Path) -> Result<AdditiveRefParams> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// BEIR-style files, evaluated with every backend in the experiment.
    Files {
        name: String,
        corpus: PathBuf,
        queries: PathBuf,
        qrels: PathBuf,
    },
    /// Generated two-hop task; always evaluated with its own additive backend.
    TwoHop {
        #[serde(default = "default_fixture_name")]
        name: String,
        #[serde(default = "default_fixture_queries")]
        n_queries: usize,
        #[serde(default = "default_additive_dim")]
        dim: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn default_fixture_name() -> String {
    "two-hop".into()
}
fn default_fixture_queries() -> usize {
    50
}

impl DatasetSpec {
    pub fn name(&self) -> &str {
        match self {
            DatasetSpec::Files { name, .. } | DatasetSpec::TwoHop { name, .. } => name,
        }
    }
}

/// Everything a sweep needs. Loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub datasets: Vec<DatasetSpec>,
    pub backends: Vec<BackendSpec>,
    /// Grid of refinement step counts.
    pub steps: Vec<usize>,
    pub early_stop: bool,
    pub epsilon: f64,
    pub state_window: StateWindow,
    pub metrics: Vec<Metric>,
    /// Ranking depth kept per query; raised to the largest metric k.
    pub run_depth: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub run_tag: String,
    /// Write measured wall-clock milliseconds into `results.csv`. Off by
    /// default so that outputs are byte-reproducible.
    pub record_timings: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            backends: vec![BackendSpec::default()],
            steps: (0..=10).collect(),
            early_stop: false,
            epsilon: RefineConfig::default().epsilon,
            state_window: StateWindow::All,
            metrics: vec![Metric::Ndcg { k: 10 }, Metric::Recall { k: 100 }, Metric::Mrr],
            run_depth: 100,
            out_dir: PathBuf::from("rt-out"),
            seed: 42,
            run_tag: "rt-sweep".into(),
            record_timings: false,
        }
    }
}

impl ExperimentSpec {
    /// Parses `.toml` files as TOML and anything else as JSON.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let spec: Self = if is_toml {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(spec)
    }

    pub fn refine_config(&self, steps: usize) -> RefineConfig {
        RefineConfig {
            steps,
            early_stop: self.early_stop,
            epsilon: self.epsilon,
            state_window: self.state_window,
        }
    }

    pub fn depth(&self) -> usize {
        self.metrics
            .iter()
            .filter_map(Metric::depth)
            .fold(self.run_depth, usize::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config("steps grid is empty".into()));
        }
        for &t in &self.steps {
            self.refine_config(t).validate()?;
        }
        let mut sorted = self.steps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.steps.len() {
            return Err(Error::Config("steps grid has duplicates".into()));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets".into()));
        }
        let mut names: Vec<&str> = self.datasets.iter().map(DatasetSpec::name).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("dataset names must be unique".into()));
        }
        let needs_backend = self.datasets.iter().any(|d| matches!(d, DatasetSpec::Files { .. }));
        if needs_backend && self.backends.is_empty() {
            return Err(Error::Config("file datasets need at least one backend".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("no metrics requested".into()));
        }
        if self.run_depth == 0 {
            return Err(Error::Config("run_depth must be >= 1".into()));
        }
        if self.run_tag.is_empty() || self.run_tag.contains(char::is_whitespace) {
            return Err(Error::Config("run_tag must be a non-empty token".into()));
        }
        Ok(())
    }
}
