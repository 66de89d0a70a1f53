//! Experiment files (TOML). Node indices in files are 1-based.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::CrParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub iterations: usize,
    /// Trailing fraction of iterations averaged for steady-state values.
    #[serde(default = "default_window")]
    pub window: f64,
    /// Emit every n-th step in the series table (all steps are simulated).
    #[serde(default)]
    pub log_every: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Include the fourth-order moment term in the theory.
    #[serde(default)]
    pub fourth_order: bool,
    #[serde(default = "default_mem_cap")]
    pub mem_cap: usize,
    /// Accumulate the run-averaged error vector (not only its energy).
    #[serde(default)]
    pub track_mean: bool,
    /// Default step size for algorithms that do not set one.
    #[serde(default)]
    pub mu: Option<StepSpec>,
    #[serde(default)]
    pub init: InitSpec,
    pub network: NetworkConfig,
    #[serde(default)]
    pub layout: Option<LayoutConfig>,
    pub data: DataConfig,
    pub algorithms: Vec<AlgorithmConfig>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_runs() -> usize {
    1
}

fn default_window() -> f64 {
    0.05
}

fn default_mem_cap() -> usize {
    crate::theory::DEFAULT_MEM_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub nodes: usize,
    /// Undirected edges; self-loops are implicit.
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    /// Explicit neighborhoods instead of `edges`, taken verbatim (no implicit
    /// self-loops or symmetry) so that malformed graphs can be diagnosed.
    #[serde(default)]
    pub neighbors: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub members: Vec<usize>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    pub global: usize,
    #[serde(default)]
    pub clusters: Vec<ClusterConfig>,
    pub local: usize,
    pub obs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    pub sigma_u2: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// AR(1) regressors with standard-normal ground truth.
    Synthetic {
        noise_var: f64,
        /// Range for `σ_u`; ignored when `ar` is given.
        #[serde(default = "unit_range")]
        sigma_u: (f64, f64),
        #[serde(default = "unit_range")]
        alpha: (f64, f64),
        #[serde(default)]
        snr_db: Option<(f64, f64)>,
        /// Explicit per-node parameters.
        #[serde(default)]
        ar: Option<Vec<ArConfig>>,
    },
    /// Spectrum sensing; the layout follows from the parameters.
    Cr {
        /// Nodes sensing each common interferer.
        clusters: Vec<Vec<usize>>,
        #[serde(default)]
        params: CrParams,
    },
}

fn unit_range() -> (f64, f64) {
    (0.0, 1.0)
}

/// One step size for every node, or one per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSpec {
    Scalar(f64),
    PerNode(Vec<f64>),
}

impl StepSpec {
    pub fn resolve(&self, nodes: usize) -> Result<Vec<f64>> {
        match self {
            StepSpec::Scalar(m) => Ok(vec![*m; nodes]),
            StepSpec::PerNode(v) if v.len() == nodes => Ok(v.clone()),
            StepSpec::PerNode(v) => Err(Error::Config(format!(
                "{} step sizes given for {nodes} nodes",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitSpec {
    #[default]
    Zeros,
    Random,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoKind {
    Atc,
    Cta,
    General,
    /// ATC with adaptive combination weights.
    Adaptive,
    Noncoop,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: String,
    pub kind: AlgoKind,
    #[serde(default)]
    pub mu: Option<StepSpec>,
    /// Step size as a fraction of each node's mean-stability bound.
    #[serde(default)]
    pub mu_scale: Option<f64>,
    /// Combine over the complete graph instead of the configured topology.
    #[serde(default)]
    pub clique: bool,
    /// Forgetting factor of the adaptive combiner.
    #[serde(default)]
    pub nu: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn check(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.window > 0.0 && self.window <= 1.0) {
            return Err(Error::Config(format!(
                "window {} outside (0, 1]",
                self.window
            )));
        }
        if self.log_every == Some(0) {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms configured".into()));
        }
        let mut names: Vec<&str> = self.algorithms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("algorithm names must be unique".into()));
        }
        for a in &self.algorithms {
            if a.mu.is_none() && a.mu_scale.is_none() && self.mu.is_none() {
                return Err(Error::Config(format!("algorithm {}: no step size", a.name)));
            }
        }
        match (&self.data, &self.layout) {
            (DataConfig::Synthetic { .. }, None) => Err(Error::Config(
                "synthetic data needs a [layout] section".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Number of trailing steps in the steady-state window.
    pub fn window_len(&self) -> usize {
        ((self.iterations as f64 * self.window).ceil() as usize).clamp(1, self.iterations)
    }

    pub fn log_stride(&self) -> usize {
        self.log_every
            .unwrap_or_else(|| (self.iterations / 1000).max(1))
    }
}

/// Converts 1-based node lists from a file to 0-based indices.
pub(crate) fn zero_based(nodes: usize, list: &[usize], what: &str) -> Result<Vec<usize>> {
    list.iter()
        .map(|&v| {
            if v == 0 || v > nodes {
                Err(Error::Config(format!(
                    "{what}: node {v} outside 1..={nodes}"
                )))
            } else {
                Ok(v - 1)
            }
        })
        .collect()
}
