//! Building an experiment from its config and running the Monte Carlo loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{zero_based, AlgoKind, DataConfig, ExperimentConfig, InitSpec};
use super::metrics::{Accumulator, MetricsSeries, ScopeSet, StepRecord};
use crate::algorithms::{
    adaptive_atc_step, incremental_cycle, noncoop_step, policy_step, IncrementalState, NetworkState,
};
use crate::blockmat::Mat;
use crate::combiners::{
    uniform_policy, validate_policy, AdaptiveCombiner, CombinationPolicy, Mode, PolicyViolation,
    Weights, DEFAULT_NU,
};
use crate::error::{Error, Result};
use crate::scenario::{
    cr_gen_observation, draw_ar_params, gen_observation, gen_regressor, validate_topology, ArDraw,
    ArParams, Cluster, CrScenario, GroundTruth, InterestLayout, Observation, RegressorStats,
    Topology, TopologyDiagnostics,
};
use crate::theory::{stability_bound, steady_state, TheoryOptions, TheoryReport};

/// Any block norm above this aborts the run for that algorithm.
pub const DIVERGENCE_THRESHOLD: f64 = 1e9;

/// Runs per work unit. Fixed so that the fold order, and hence every
/// emitted value, does not depend on the number of worker threads.
const CHUNK: usize = 4;

// Independent ChaCha streams per purpose.
const STREAM_DATA: u64 = 0;
const STREAM_SCENARIO: u64 = 1;
const STREAM_EMSE: u64 = 2;
const STREAM_INIT: u64 = 3;

#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic {
        truth: GroundTruth,
        stats: RegressorStats,
        ar: Vec<ArParams>,
    },
    Cr(Box<CrScenario>),
}

impl DataSource {
    pub fn truth(&self) -> &GroundTruth {
        match self {
            DataSource::Synthetic { truth, .. } => truth,
            DataSource::Cr(s) => s.truth(),
        }
    }

    pub fn stats(&self) -> Option<&RegressorStats> {
        match self {
            DataSource::Synthetic { stats, .. } => Some(stats),
            DataSource::Cr(_) => None,
        }
    }

    fn observe(&self, layout: &InterestLayout, k: usize, rng: &mut ChaCha8Rng) -> Observation {
        match self {
            DataSource::Synthetic { truth, stats, .. } => {
                gen_observation(k, truth, layout, stats, rng)
            }
            DataSource::Cr(s) => cr_gen_observation(k, s, rng),
        }
    }

    fn fresh_regressor(&self, k: usize, rng: &mut ChaCha8Rng) -> Mat {
        match self {
            DataSource::Synthetic { stats, .. } => gen_regressor(k, stats, rng),
            DataSource::Cr(s) => cr_gen_observation(k, s, rng).u,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlgorithmSpec {
    pub name: String,
    pub kind: AlgoKind,
    pub mu: Vec<f64>,
    pub topology: Topology,
    /// Static policy, for the kinds that have one.
    pub policy: Option<CombinationPolicy>,
    pub nu: f64,
}

/// A fully resolved experiment: layout, topology, data and algorithms.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub layout: InterestLayout,
    pub topology: Topology,
    pub source: DataSource,
    pub algorithms: Vec<AlgorithmSpec>,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.check()?;
        let n = config.network.nodes;
        if n == 0 {
            return Err(Error::Config("network needs at least one node".into()));
        }
        let topology = match &config.network.neighbors {
            Some(lists) => {
                if lists.len() != n {
                    return Err(Error::Config(format!(
                        "{} neighbor lists for {n} nodes",
                        lists.len()
                    )));
                }
                Topology::from_neighbors(
                    lists
                        .iter()
                        .map(|l| zero_based(n, l, "neighbors"))
                        .collect::<Result<_>>()?,
                )
            }
            None => {
                let edges = config
                    .network
                    .edges
                    .iter()
                    .map(|e| {
                        let v = zero_based(n, e, "edge")?;
                        Ok((v[0], v[1]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Topology::from_edges(n, &edges)?
            }
        };

        let mut scen_rng = seeded(config.seed, STREAM_SCENARIO);
        let (layout, source) = match &config.data {
            DataConfig::Synthetic {
                noise_var,
                sigma_u,
                alpha,
                snr_db,
                ar,
            } => {
                let lc = config.layout.as_ref().expect("checked");
                let clusters = lc
                    .clusters
                    .iter()
                    .map(|c| {
                        Ok(Cluster {
                            members: zero_based(n, &c.members, "cluster")?,
                            size: c.size,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let layout = InterestLayout::new(
                    n,
                    lc.global,
                    clusters,
                    vec![lc.local; n],
                    vec![lc.obs; n],
                )?;
                let truth = GroundTruth::draw(&layout, &mut scen_rng);
                let params = match ar {
                    Some(list) => {
                        if list.len() != n {
                            return Err(Error::Config(format!(
                                "{} AR entries for {n} nodes",
                                list.len()
                            )));
                        }
                        list.iter()
                            .map(|a| ArParams {
                                sigma_u2: a.sigma_u2,
                                alpha: a.alpha,
                            })
                            .collect()
                    }
                    None => draw_ar_params(
                        &layout,
                        &truth,
                        &ArDraw {
                            sigma_u: *sigma_u,
                            alpha: *alpha,
                            snr_db: *snr_db,
                            noise_var: *noise_var,
                        },
                        &mut scen_rng,
                    )?,
                };
                let stats = RegressorStats::ar1(&layout, &params, *noise_var)?;
                (
                    layout,
                    DataSource::Synthetic {
                        truth,
                        stats,
                        ar: params,
                    },
                )
            }
            DataConfig::Cr { clusters, params } => {
                let clusters = clusters
                    .iter()
                    .map(|c| zero_based(n, c, "cluster"))
                    .collect::<Result<Vec<_>>>()?;
                let scen = CrScenario::draw(params.clone(), n, &clusters, &mut scen_rng)?;
                (scen.layout().clone(), DataSource::Cr(Box::new(scen)))
            }
        };

        let bounds: Option<Vec<f64>> = source
            .stats()
            .map(|s| {
                (0..n)
                    .map(|k| stability_bound(&layout, s, k))
                    .collect::<Result<_>>()
            })
            .transpose()?;
        let mut algorithms = Vec::with_capacity(config.algorithms.len());
        for a in &config.algorithms {
            let mu = match (&a.mu_scale, &a.mu, &config.mu) {
                (Some(scale), _, _) => {
                    let b = bounds.as_ref().ok_or_else(|| {
                        Error::Config(format!(
                            "algorithm {}: mu_scale needs synthetic data",
                            a.name
                        ))
                    })?;
                    b.iter().map(|b| b * scale).collect()
                }
                (None, Some(m), _) | (None, None, Some(m)) => m.resolve(n)?,
                (None, None, None) => unreachable!("checked"),
            };
            let topo = if a.clique {
                Topology::complete(n)
            } else {
                topology.clone()
            };
            let policy = match a.kind {
                AlgoKind::Atc => Some(uniform_policy(Mode::Atc, &topo, &layout)),
                AlgoKind::Cta => Some(uniform_policy(Mode::Cta, &topo, &layout)),
                AlgoKind::General => Some(uniform_policy(Mode::General, &topo, &layout)),
                AlgoKind::Noncoop => {
                    Some(CombinationPolicy::atc(Weights::identity(&layout), &layout))
                }
                AlgoKind::Adaptive | AlgoKind::Incremental => None,
            };
            algorithms.push(AlgorithmSpec {
                name: a.name.clone(),
                kind: a.kind,
                mu,
                topology: topo,
                policy,
                nu: a.nu.unwrap_or(DEFAULT_NU),
            });
        }
        Ok(Self {
            config,
            layout,
            topology,
            source,
            algorithms,
        })
    }

    pub fn validate(&self) -> Validation {
        let topology = validate_topology(&self.topology, &self.layout);
        let policies = self
            .algorithms
            .iter()
            .filter_map(|a| {
                let v = validate_policy(a.policy.as_ref()?, &a.topology, &self.layout);
                (!v.is_empty()).then(|| (a.name.clone(), v))
            })
            .collect();
        let bounds = self.source.stats().map(|s| {
            (0..self.layout.nodes())
                .map(|k| stability_bound(&self.layout, s, k).unwrap_or(f64::NAN))
                .collect::<Vec<_>>()
        });
        let mut step_warnings = Vec::new();
        if let Some(b) = &bounds {
            for a in &self.algorithms {
                for (k, (m, b)) in a.mu.iter().zip(b).enumerate() {
                    if m >= b {
                        step_warnings.push(format!(
                            "{}: node {} step {m} is not below the mean-stability bound {b}",
                            a.name,
                            k + 1
                        ));
                    }
                }
            }
        }
        Validation {
            topology,
            policies,
            step_warnings,
        }
    }

    /// Theory for every algorithm with a static policy. `None` for data
    /// without Gaussian regressor statistics; per-algorithm errors (such as
    /// mean-square instability) are kept.
    pub fn theory(&self) -> Vec<(String, Result<TheoryReport>)> {
        let Some(stats) = self.source.stats() else {
            return Vec::new();
        };
        let opts = TheoryOptions {
            fourth_order: self.config.fourth_order,
            mem_cap: self.config.mem_cap,
        };
        self.algorithms
            .iter()
            .filter_map(|a| {
                let p = a.policy.as_ref()?;
                Some((
                    a.name.clone(),
                    steady_state(&self.layout, stats, p, &a.mu, opts),
                ))
            })
            .collect()
    }

    fn initial_state(&self, run: usize) -> NetworkState {
        match self.config.init {
            InitSpec::Zeros => NetworkState::zeros(&self.layout),
            InitSpec::Constant(v) => NetworkState::constant(&self.layout, v),
            InitSpec::Random => {
                let mut rng = seeded(self.config.seed ^ run as u64, STREAM_INIT);
                NetworkState::random(&self.layout, &mut rng)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Validation {
    pub topology: TopologyDiagnostics,
    pub policies: Vec<(String, Vec<PolicyViolation>)>,
    /// Step sizes at or above the mean-stability bound (not fatal).
    pub step_warnings: Vec<String>,
}

impl Validation {
    pub fn is_valid(&self) -> bool {
        self.topology.is_valid() && self.policies.is_empty()
    }
}

enum AlgoState {
    Network(NetworkState),
    Adaptive(NetworkState, AdaptiveCombiner),
    Incremental(IncrementalState),
}

impl AlgoState {
    fn network(&self, layout: &InterestLayout) -> NetworkState {
        match self {
            AlgoState::Network(s) | AlgoState::Adaptive(s, _) => s.clone(),
            AlgoState::Incremental(s) => s.as_network(layout),
        }
    }
}

/// Monte Carlo results for every algorithm, in configuration order.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub series: Vec<MetricsSeries>,
}

impl ExperimentResult {
    pub fn series(&self, algo: &str) -> Option<&MetricsSeries> {
        self.series.iter().find(|s| s.algo == algo)
    }

    pub fn any_diverged(&self) -> bool {
        self.series.iter().any(|s| !s.diverged_runs.is_empty())
    }
}

pub fn run_experiment(exp: &Experiment) -> Result<ExperimentResult> {
    let cfg = &exp.config;
    let scopes = ScopeSet::new(&exp.layout);
    let chunks: Vec<Vec<usize>> = (0..cfg.runs)
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let partials: Vec<Vec<Accumulator>> = chunks
        .par_iter()
        .map(|runs| {
            let mut acc = fresh_accumulators(exp, &scopes);
            for &r in runs {
                simulate_run(exp, &scopes, r, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = fresh_accumulators(exp, &scopes);
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    Ok(ExperimentResult {
        series: exp
            .algorithms
            .iter()
            .zip(total)
            .map(|(a, acc)| acc.finish(a.name.clone(), &scopes))
            .collect(),
    })
}

fn fresh_accumulators(exp: &Experiment, scopes: &ScopeSet) -> Vec<Accumulator> {
    let cfg = &exp.config;
    let mean_dim = cfg.track_mean.then(|| exp.layout.total_dim());
    exp.algorithms
        .iter()
        .map(|_| Accumulator::new(cfg.iterations, cfg.window_len(), scopes.len(), mean_dim))
        .collect()
}

fn simulate_run(
    exp: &Experiment,
    scopes: &ScopeSet,
    run: usize,
    acc: &mut [Accumulator],
) -> Result<()> {
    let layout = &exp.layout;
    let cfg = &exp.config;
    let truth = exp.source.truth();
    let w_net = truth.network_vector(layout);
    let mut data_rng = seeded(cfg.seed ^ run as u64, STREAM_DATA);
    let mut emse_rng = seeded(cfg.seed ^ run as u64, STREAM_EMSE);

    let init = exp.initial_state(run);
    let mut states: Vec<Option<AlgoState>> = exp
        .algorithms
        .iter()
        .map(|a| {
            Ok(Some(match a.kind {
                AlgoKind::Adaptive => AlgoState::Adaptive(
                    init.clone(),
                    AdaptiveCombiner::new(a.nu, &a.topology, layout)?,
                ),
                AlgoKind::Incremental => {
                    // A single shared estimate: random starts are drawn per
                    // node and have no augmented counterpart, so use zero.
                    let mut s = IncrementalState::zeros(layout);
                    if let InitSpec::Constant(v) = cfg.init {
                        s.w.fill(v);
                    }
                    AlgoState::Incremental(s)
                }
                _ => AlgoState::Network(init.clone()),
            }))
        })
        .collect::<Result<_>>()?;
    let track = cfg.track_mean;
    let mut records: Vec<StepRecord> = exp
        .algorithms
        .iter()
        .map(|_| StepRecord::new(cfg.iterations, scopes.len(), track))
        .collect();
    let fresh: Vec<Mat> = (0..layout.nodes())
        .map(|k| exp.source.fresh_regressor(k, &mut emse_rng))
        .collect();
    for (rec, st) in records.iter_mut().zip(&states) {
        let err = &w_net - st.as_ref().expect("fresh").network(layout).stacked();
        rec.push(&scopes.evaluate(layout, &err, &fresh).values, &err);
    }

    for _ in 0..cfg.iterations {
        if states.iter().all(Option::is_none) {
            break;
        }
        let obs: Vec<Observation> = (0..layout.nodes())
            .map(|k| exp.source.observe(layout, k, &mut data_rng))
            .collect();
        let fresh: Vec<Mat> = (0..layout.nodes())
            .map(|k| exp.source.fresh_regressor(k, &mut emse_rng))
            .collect();
        for ((a, slot), rec) in exp
            .algorithms
            .iter()
            .zip(states.iter_mut())
            .zip(records.iter_mut())
        {
            let Some(state) = slot.as_mut() else { continue };
            match state {
                AlgoState::Network(s) => {
                    let p = a.policy.as_ref().expect("static policy");
                    *s = match a.kind {
                        AlgoKind::Noncoop => noncoop_step(s, layout, &obs, &a.mu)?,
                        _ => policy_step(s, p, layout, &obs, &a.mu)?,
                    };
                }
                AlgoState::Adaptive(s, comb) => {
                    *s = adaptive_atc_step(s, comb, layout, &obs, &a.mu)?;
                }
                AlgoState::Incremental(s) => incremental_cycle(s, layout, &obs, &a.mu)?,
            }
            let net = state.network(layout);
            let err = &w_net - net.stacked();
            let values = scopes.evaluate(layout, &err, &fresh);
            if values.block_max > DIVERGENCE_THRESHOLD || !values.block_max.is_finite() {
                rec.diverged = true;
                *slot = None;
                continue;
            }
            rec.push(&values.values, &err);
        }
    }
    for (acc, rec) in acc.iter_mut().zip(records) {
        acc.add_run(run, rec);
    }
    Ok(())
}
