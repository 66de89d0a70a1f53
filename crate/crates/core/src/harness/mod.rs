//! Seeded Monte Carlo experiments driven by TOML files, with theory
//! comparison and CSV/JSON/SVG output.

mod config;
mod emit;
mod metrics;
mod run;

pub use config::{
    AlgoKind, AlgorithmConfig, ArConfig, ClusterConfig, DataConfig, ExperimentConfig, InitSpec,
    LayoutConfig, NetworkConfig, StepSpec,
};
pub use emit::{write_outputs, write_series_csv, write_summary_json, write_svg};
pub use metrics::{to_db, MeanError, Metric, MetricsSeries, ScopeLabel, SteadyValue};
pub use run::{
    run_experiment, AlgorithmSpec, DataSource, Experiment, ExperimentResult, Validation,
    DIVERGENCE_THRESHOLD,
};

use serde::Serialize;

use crate::theory::TheoryReport;

/// Simulation against theory for one quantity, in dB.
#[derive(Debug, Clone, Serialize)]
pub struct Gap {
    pub metric: Metric,
    pub scope: String,
    pub simulated_db: f64,
    pub theory_db: f64,
    pub gap_db: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlgorithmSummary {
    pub name: String,
    pub kind: AlgoKind,
    pub mu: Vec<f64>,
    pub runs_used: usize,
    pub diverged_runs: Vec<usize>,
    pub steady: Vec<SteadyValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theory_error: Option<String>,
    pub gaps: Vec<Gap>,
}

impl AlgorithmSummary {
    pub fn max_abs_gap(&self) -> Option<f64> {
        self.gaps.iter().map(|g| g.gap_db.abs()).reduce(f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CrNoise {
    /// Attenuation-noise standard deviation per node and source.
    pub attn_noise_std: Vec<Vec<f64>>,
    pub z_std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub runs: usize,
    pub iterations: usize,
    pub window_len: usize,
    pub nodes: usize,
    pub total_dim: usize,
    /// Per-node mean-stability bounds (synthetic data only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_bounds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cr_noise: Option<CrNoise>,
    pub algorithms: Vec<AlgorithmSummary>,
}

impl Summary {
    pub fn algorithm(&self, name: &str) -> Option<&AlgorithmSummary> {
        self.algorithms.iter().find(|a| a.name == name)
    }
}

fn gaps(series: &MetricsSeries, theory: &TheoryReport) -> Vec<Gap> {
    let mut pairs = vec![
        (Metric::Msd, "net".to_string(), theory.msd_net),
        (Metric::Emse, "net".to_string(), theory.emse_net),
    ];
    for (k, (m, e)) in theory.msd.iter().zip(&theory.emse).enumerate() {
        pairs.push((Metric::Msd, format!("node{}", k + 1), *m));
        pairs.push((Metric::Emse, format!("node{}", k + 1), *e));
        for b in &theory.msd_block[k] {
            pairs.push((Metric::Msd, format!("node{}/{}", k + 1, b.block), b.value));
        }
    }
    pairs
        .into_iter()
        .filter_map(|(metric, scope, th)| {
            let sim = series.steady(metric, &scope)?.value;
            Some(Gap {
                metric,
                scope,
                simulated_db: to_db(sim),
                theory_db: to_db(th),
                gap_db: to_db(sim) - to_db(th),
            })
        })
        .collect()
}

pub fn summarize(
    exp: &Experiment,
    result: &ExperimentResult,
    theory: Vec<(String, crate::Result<TheoryReport>)>,
) -> Summary {
    let mut theory = theory;
    let algorithms = exp
        .algorithms
        .iter()
        .zip(&result.series)
        .map(|(a, s)| {
            let th = theory
                .iter()
                .position(|(n, _)| *n == a.name)
                .map(|i| theory.swap_remove(i).1);
            let (theory, theory_error) = match th {
                Some(Ok(r)) => (Some(r), None),
                Some(Err(e)) => (None, Some(e.to_string())),
                None => (None, None),
            };
            AlgorithmSummary {
                name: a.name.clone(),
                kind: a.kind,
                mu: a.mu.clone(),
                runs_used: s.runs_used,
                diverged_runs: s.diverged_runs.clone(),
                steady: s.steady.clone(),
                gaps: theory.as_ref().map(|t| gaps(s, t)).unwrap_or_default(),
                theory,
                theory_error,
            }
        })
        .collect();
    let mu_bounds = exp.source.stats().map(|st| {
        (0..exp.layout.nodes())
            .map(|k| crate::theory::stability_bound(&exp.layout, st, k).unwrap_or(f64::NAN))
            .collect()
    });
    let cr_noise = match &exp.source {
        DataSource::Cr(s) => Some(CrNoise {
            attn_noise_std: (0..exp.layout.nodes())
                .map(|k| s.attn_noise_std(k).to_vec())
                .collect(),
            z_std: (0..exp.layout.nodes()).map(|k| s.z_std(k)).collect(),
        }),
        DataSource::Synthetic { .. } => None,
    };
    Summary {
        name: exp.config.name.clone(),
        seed: exp.config.seed,
        runs: exp.config.runs,
        iterations: exp.config.iterations,
        window_len: exp.config.window_len(),
        nodes: exp.layout.nodes(),
        total_dim: exp.layout.total_dim(),
        mu_bounds,
        cr_noise,
        algorithms,
    }
}
