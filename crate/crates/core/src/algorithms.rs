//! Diffusion recursions (general, ATC, CTA), non-cooperative LMS, the
//! incremental baseline and the centralized normal-equation solution.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::blockmat::{Mat, Vector};
use crate::combiners::{AdaptiveCombiner, CombinationPolicy, Mode, Weights};
use crate::error::{Error, Result};
use crate::scenario::{BlockId, GroundTruth, InterestLayout, Observation, RegressorStats};

/// Per-node estimates `q_k` (length `M_k`, node-wise block order).
///
/// A node only ever stores the common blocks of its own clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub q: Vec<Vector>,
}

impl NetworkState {
    pub fn zeros(layout: &InterestLayout) -> Self {
        Self::constant(layout, 0.0)
    }

    pub fn constant(layout: &InterestLayout, value: f64) -> Self {
        Self {
            q: (0..layout.nodes())
                .map(|k| Vector::from_element(layout.node_dim(k), value))
                .collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(layout: &InterestLayout, rng: &mut R) -> Self {
        Self {
            q: (0..layout.nodes())
                .map(|k| Vector::from_fn(layout.node_dim(k), |_, _| rng.sample(StandardNormal)))
                .collect(),
        }
    }

    /// Node-wise stacking (length `M̆`).
    pub fn stacked(&self) -> Vector {
        let total = self.q.iter().map(|v| v.len()).sum();
        Vector::from_iterator(total, self.q.iter().flat_map(|v| v.iter().copied()))
    }

    pub fn from_stacked(layout: &InterestLayout, x: &Vector) -> Result<Self> {
        if x.len() != layout.total_dim() {
            return Err(Error::dim("stacked state", layout.total_dim(), x.len()));
        }
        Ok(Self {
            q: (0..layout.nodes())
                .map(|k| x.rows_range(layout.node_range(k)).into_owned())
                .collect(),
        })
    }

    /// Network error `q̃ = w° − q` in node-wise stacking.
    pub fn error(&self, layout: &InterestLayout, truth: &GroundTruth) -> Vector {
        truth.network_vector(layout) - self.stacked()
    }

    fn check(&self, layout: &InterestLayout) -> Result<()> {
        if self.q.len() != layout.nodes() {
            return Err(Error::dim("state nodes", layout.nodes(), self.q.len()));
        }
        for (k, v) in self.q.iter().enumerate() {
            if v.len() != layout.node_dim(k) {
                return Err(Error::dim("node state", layout.node_dim(k), v.len()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes {
    mu: Vec<f64>,
}

impl StepSizes {
    pub fn new(mu: Vec<f64>) -> Result<Self> {
        if let Some(bad) = mu.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "step size {bad} must be nonnegative"
            )));
        }
        Ok(Self { mu })
    }

    pub fn uniform(nodes: usize, mu: f64) -> Result<Self> {
        Self::new(vec![mu; nodes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.mu
    }

    /// Nodes whose step size is at or above its mean-stability bound.
    pub fn exceeding(&self, bounds: &[f64]) -> Vec<usize> {
        self.mu
            .iter()
            .zip(bounds)
            .enumerate()
            .filter(|(_, (m, b))| m >= b)
            .map(|(k, _)| k)
            .collect()
    }
}

fn check_inputs(layout: &InterestLayout, obs: &[Observation], mu: &[f64]) -> Result<()> {
    let n = layout.nodes();
    if obs.len() != n {
        return Err(Error::dim("observations", n, obs.len()));
    }
    if mu.len() != n {
        return Err(Error::dim("step sizes", n, mu.len()));
    }
    for (k, o) in obs.iter().enumerate() {
        if o.u.ncols() != layout.node_dim(k) {
            return Err(Error::dim(
                "regressor columns",
                layout.node_dim(k),
                o.u.ncols(),
            ));
        }
        if o.u.nrows() != o.d.len() {
            return Err(Error::dim("observation length", o.u.nrows(), o.d.len()));
        }
    }
    Ok(())
}

/// Convex combination of neighbors' blocks. Local blocks pass through.
///
/// Terms with zero weight are skipped and the sum starts from the first
/// nonzero term, so an identity weight matrix returns its input bit for bit.
pub fn combine(w: &Weights, layout: &InterestLayout, x: &[Vector]) -> Vec<Vector> {
    (0..layout.nodes())
        .map(|k| {
            let mut out = Vector::zeros(layout.node_dim(k));
            for (block, r) in layout.node_blocks(k) {
                if r.is_empty() {
                    continue;
                }
                if block == BlockId::Local {
                    out.rows_range_mut(r.clone()).copy_from(&x[k].rows_range(r));
                    continue;
                }
                let mut acc: Option<Vector> = None;
                let sources: Vec<(usize, f64)> = match block {
                    BlockId::Global => (0..layout.nodes()).map(|l| (l, w.global[(k, l)])).collect(),
                    BlockId::Common(j) => {
                        let rk = layout.cluster_rank(j, k).expect("member");
                        layout
                            .cluster_members(j)
                            .iter()
                            .enumerate()
                            .map(|(rl, &l)| (l, w.common[j][(rk, rl)]))
                            .collect()
                    }
                    BlockId::Local => unreachable!(),
                };
                for (l, a) in sources {
                    if a == 0.0 {
                        continue;
                    }
                    let rl = layout
                        .block_range(l, block)
                        .expect("neighbor shares the block");
                    let term = x[l].rows_range(rl) * a;
                    acc = Some(match acc {
                        None => term,
                        Some(s) => s + term,
                    });
                }
                let acc = acc.unwrap_or_else(|| Vector::zeros(r.len()));
                out.rows_range_mut(r).copy_from(&acc);
            }
            out
        })
        .collect()
}

/// LMS correction `φ + μ Uᵀ(d − Uφ)`.
pub fn adapt(phi: &Vector, obs: &Observation, mu: f64) -> Vector {
    let e = &obs.d - &obs.u * phi;
    phi + obs.u.tr_mul(&e) * mu
}

fn adapt_all(x: &[Vector], obs: &[Observation], mu: &[f64]) -> Vec<Vector> {
    x.iter()
        .zip(obs)
        .zip(mu)
        .map(|((phi, o), &m)| adapt(phi, o, m))
        .collect()
}

/// Combine through `C`, adapt, combine through `A`.
pub fn general_step(
    state: &NetworkState,
    c: &Weights,
    a: &Weights,
    layout: &InterestLayout,
    obs: &[Observation],
    mu: &[f64],
) -> Result<NetworkState> {
    state.check(layout)?;
    check_inputs(layout, obs, mu)?;
    let phi = combine(c, layout, &state.q);
    let psi = adapt_all(&phi, obs, mu);
    Ok(NetworkState {
        q: combine(a, layout, &psi),
    })
}

/// Adapt, then combine through `A`.
pub fn atc_step(
    state: &NetworkState,
    a: &Weights,
    layout: &InterestLayout,
    obs: &[Observation],
    mu: &[f64],
) -> Result<NetworkState> {
    state.check(layout)?;
    check_inputs(layout, obs, mu)?;
    let psi = adapt_all(&state.q, obs, mu);
    Ok(NetworkState {
        q: combine(a, layout, &psi),
    })
}

/// Combine through `C`, then adapt.
pub fn cta_step(
    state: &NetworkState,
    c: &Weights,
    layout: &InterestLayout,
    obs: &[Observation],
    mu: &[f64],
) -> Result<NetworkState> {
    state.check(layout)?;
    check_inputs(layout, obs, mu)?;
    let phi = combine(c, layout, &state.q);
    Ok(NetworkState {
        q: adapt_all(&phi, obs, mu),
    })
}

/// Dispatches on the policy mode.
pub fn policy_step(
    state: &NetworkState,
    policy: &CombinationPolicy,
    layout: &InterestLayout,
    obs: &[Observation],
    mu: &[f64],
) -> Result<NetworkState> {
    match policy.mode {
        Mode::Atc => atc_step(state, &policy.a, layout, obs, mu),
        Mode::Cta => cta_step(state, &policy.c, layout, obs, mu),
        Mode::General => general_step(state, &policy.c, &policy.a, layout, obs, mu),
    }
}

/// ATC with weights re-derived every step by `combiner`.
pub fn adaptive_atc_step(
    state: &NetworkState,
    combiner: &mut AdaptiveCombiner,
    layout: &InterestLayout,
    obs: &[Observation],
    mu: &[f64],
) -> Result<NetworkState> {
    state.check(layout)?;
    check_inputs(layout, obs, mu)?;
    let psi = adapt_all(&state.q, obs, mu);
    let a = combiner.update(layout, &psi, &state.q);
    Ok(NetworkState {
        q: combine(&a, layout, &psi),
    })
}

/// Standalone LMS at every node.
pub fn noncoop_step(
    state: &NetworkState,
    layout: &InterestLayout,
    obs: &[Observation],
    mu: &[f64],
) -> Result<NetworkState> {
    state.check(layout)?;
    check_inputs(layout, obs, mu)?;
    Ok(NetworkState {
        q: adapt_all(&state.q, obs, mu),
    })
}

/// Single network-wide estimate in augmented ordering, passed through the
/// nodes in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalState {
    pub w: Vector,
}

impl IncrementalState {
    pub fn zeros(layout: &InterestLayout) -> Self {
        Self {
            w: Vector::zeros(layout.augmented_dim()),
        }
    }

    /// Node-wise copies of the shared estimate, comparable with
    /// [`NetworkState`].
    pub fn as_network(&self, layout: &InterestLayout) -> NetworkState {
        NetworkState {
            q: (0..layout.nodes())
                .map(|k| node_view(layout, &self.w, k))
                .collect(),
        }
    }
}

/// Node `k`'s blocks of an augmented vector.
pub fn node_view(layout: &InterestLayout, aug: &Vector, k: usize) -> Vector {
    let mut out = Vector::zeros(layout.node_dim(k));
    for (block, r) in layout.node_blocks(k) {
        let src = layout.augmented_range(block, k);
        out.rows_range_mut(r).copy_from(&aug.rows_range(src));
    }
    out
}

/// One LMS correction by node `k`. Step sizes are `μ_k/N` on the global
/// block, `μ_k/|C_j|` on common blocks and `μ_k` on the local block.
pub fn incremental_step(
    state: &mut IncrementalState,
    k: usize,
    layout: &InterestLayout,
    obs: &Observation,
    mu: f64,
) -> Result<()> {
    if obs.u.ncols() != layout.node_dim(k) {
        return Err(Error::dim(
            "regressor columns",
            layout.node_dim(k),
            obs.u.ncols(),
        ));
    }
    let wk = node_view(layout, &state.w, k);
    let g = obs.u.tr_mul(&(&obs.d - &obs.u * wk));
    for (block, r) in layout.node_blocks(k) {
        let step = match block {
            BlockId::Global => mu / layout.nodes() as f64,
            BlockId::Common(j) => mu / layout.cluster_members(j).len() as f64,
            BlockId::Local => mu,
        };
        let dst = layout.augmented_range(block, k);
        let upd = g.rows_range(r) * step;
        let mut view = state.w.rows_range_mut(dst);
        view += upd;
    }
    Ok(())
}

/// A full cycle over all nodes, each with its own observation of this step.
pub fn incremental_cycle(
    state: &mut IncrementalState,
    layout: &InterestLayout,
    obs: &[Observation],
    mu: &[f64],
) -> Result<()> {
    check_inputs(layout, obs, mu)?;
    for k in 0..layout.nodes() {
        incremental_step(state, k, layout, &obs[k], mu[k])?;
    }
    Ok(())
}

/// Selection `E_k` (`M_k × M̄`) with `w_k° = E_k w̄°`.
pub fn selection_matrix(layout: &InterestLayout, k: usize) -> Mat {
    let mut e = Mat::zeros(layout.node_dim(k), layout.augmented_dim());
    for (block, r) in layout.node_blocks(k) {
        let src = layout.augmented_range(block, k);
        for (a, b) in r.zip(src) {
            e[(a, b)] = 1.0;
        }
    }
    e
}

/// Zero-padded regressor `Ū_k = U_k E_k` acting on the augmented vector.
pub fn augmented_regressor(layout: &InterestLayout, k: usize, u: &Mat) -> Mat {
    u * selection_matrix(layout, k)
}

/// Running sums `Σ Ū_kᵀŪ_k` and `Σ Ū_kᵀd_k` for the normal equations.
#[derive(Debug, Clone)]
pub struct CentralizedMoments {
    pub r: Mat,
    pub p: Vector,
}

impl CentralizedMoments {
    pub fn zeros(layout: &InterestLayout) -> Self {
        let m = layout.augmented_dim();
        Self {
            r: Mat::zeros(m, m),
            p: Vector::zeros(m),
        }
    }

    pub fn add(&mut self, layout: &InterestLayout, k: usize, obs: &Observation) {
        let ub = augmented_regressor(layout, k, &obs.u);
        self.r += ub.tr_mul(&ub);
        self.p += ub.tr_mul(&obs.d);
    }

    /// Exact moments: `E Ū_kᵀŪ_k = E_kᵀ Tr(Ω_k)Ψ_k E_k`, and
    /// `E Ū_kᵀd_k = E Ū_kᵀŪ_k w̄°` since the noise is independent.
    pub fn population(
        layout: &InterestLayout,
        stats: &RegressorStats,
        truth: &GroundTruth,
    ) -> Self {
        let mut out = Self::zeros(layout);
        for k in 0..layout.nodes() {
            let e = selection_matrix(layout, k);
            out.r += e.tr_mul(&(stats.second_moment(k) * &e));
        }
        out.p = &out.r * truth.augmented_vector(layout);
        out
    }
}

/// Solves `(Σ R_Ū) ŵ = Σ r_Ūd`, reporting the numerical rank when singular.
pub fn centralized_solve(m: &CentralizedMoments) -> Result<Vector> {
    let n = m.r.nrows();
    if m.p.len() != n {
        return Err(Error::dim("centralized cross moment", n, m.p.len()));
    }
    let svd = m.r.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let tol = smax * n as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < n || smax == 0.0 {
        return Err(Error::Singular { rank, dim: n });
    }
    m.r.clone()
        .lu()
        .solve(&m.p)
        .ok_or(Error::Singular { rank, dim: n })
}

/// Optional per-round squared-error log: `round,node,block,sq_error`.
pub struct TraceLog<W: Write> {
    wtr: csv::Writer<W>,
}

impl<W: Write> TraceLog<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["round", "node", "block", "sq_error"])
            .map_err(|e| Error::Config(format!("trace log: {e}")))?;
        Ok(Self { wtr })
    }

    /// Appends one row per node and block (1-based nodes).
    pub fn record(
        &mut self,
        round: usize,
        state: &NetworkState,
        layout: &InterestLayout,
        truth: &GroundTruth,
    ) -> Result<()> {
        for k in 0..layout.nodes() {
            for (block, r) in layout.node_blocks(k) {
                let err = (truth.block(block, k) - state.q[k].rows_range(r)).norm_squared();
                self.wtr
                    .write_record([
                        round.to_string(),
                        (k + 1).to_string(),
                        block.to_string(),
                        format!("{err:e}"),
                    ])
                    .map_err(|e| Error::Config(format!("trace log: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.wtr
            .flush()
            .map_err(|e| Error::Config(format!("trace log: {e}")))?;
        self.wtr
            .into_inner()
            .map_err(|e| Error::Config(format!("trace log: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmat::block_diag;
    use crate::combiners::{extend_policy_direct, uniform_policy};
    use crate::scenario::{gen_observation, validation_layout, ArParams, Topology};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(u: &[f64], rows: usize, d: &[f64]) -> Observation {
        Observation {
            d: Vector::from_column_slice(d),
            u: Mat::from_row_slice(rows, u.len() / rows, u),
        }
    }

    fn random_obs(layout: &InterestLayout, rng: &mut ChaCha8Rng) -> Vec<Observation> {
        (0..layout.nodes())
            .map(|k| {
                let l = layout.obs_len(k);
                Observation {
                    d: Vector::from_fn(l, |_, _| rng.sample(StandardNormal)),
                    u: Mat::from_fn(l, layout.node_dim(k), |_, _| rng.sample(StandardNormal)),
                }
            })
            .collect()
    }

    fn validation_topology() -> Topology {
        let mut edges: Vec<_> = (0..9).map(|k| (k, k + 1)).collect();
        edges.extend([(0, 9), (0, 2), (6, 8)]);
        Topology::from_edges(10, &edges).unwrap()
    }

    #[test]
    fn single_node_identity_is_plain_lms() {
        let layout = InterestLayout::uniform(1, 1, &[], 0, 2, 2).unwrap();
        let w = Weights::identity(&layout);
        let s = NetworkState {
            q: vec![Vector::from_column_slice(&[0.1, -0.2, 0.3])],
        };
        let o = obs(&[1.0, 2.0, 0.5, -1.0, 0.0, 1.5], 2, &[1.0, -1.0]);
        let next = general_step(&s, &w, &w, &layout, std::slice::from_ref(&o), &[0.05]).unwrap();
        assert_eq!(next.q[0], adapt(&s.q[0], &o, 0.05));
        let atc = atc_step(&s, &w, &layout, std::slice::from_ref(&o), &[0.05]).unwrap();
        let nc = noncoop_step(&s, &layout, &[o], &[0.05]).unwrap();
        assert_eq!(next, atc);
        assert_eq!(next, nc);
    }

    #[test]
    fn zero_step_only_combines() {
        let layout = InterestLayout::uniform(2, 1, &[], 0, 1, 1).unwrap();
        let t = Topology::complete(2);
        let w = Weights::uniform(&t, &layout);
        let s = NetworkState {
            q: vec![
                Vector::from_column_slice(&[1.0, 5.0]),
                Vector::from_column_slice(&[3.0, 7.0]),
            ],
        };
        let o = vec![obs(&[1.0, 1.0], 1, &[9.0]), obs(&[1.0, 1.0], 1, &[9.0])];
        let next = atc_step(&s, &w, &layout, &o, &[0.0, 0.0]).unwrap();
        assert_eq!(next.q[0], Vector::from_column_slice(&[2.0, 5.0]));
        assert_eq!(next.q[1], Vector::from_column_slice(&[2.0, 7.0]));
    }

    #[test]
    fn hand_traced_general_step() {
        // N = 2, M_g = 1, M_l = 1, C = A = [[0.5, 0.5], [0.25, 0.75]]
        let layout = InterestLayout::uniform(2, 1, &[], 0, 1, 1).unwrap();
        let m = Mat::from_row_slice(2, 2, &[0.5, 0.5, 0.25, 0.75]);
        let w = Weights {
            global: m,
            common: vec![],
        };
        let s = NetworkState {
            q: vec![
                Vector::from_column_slice(&[1.0, 2.0]),
                Vector::from_column_slice(&[3.0, -1.0]),
            ],
        };
        let o = vec![obs(&[1.0, 2.0], 1, &[4.0]), obs(&[2.0, 1.0], 1, &[1.0])];
        let next = general_step(&s, &w, &w, &layout, &o, &[0.1, 0.2]).unwrap();
        // phi_1 = [2, 2], phi_2 = [2.5, -1]
        // e_1 = 4 - (2 + 4) = -2  -> psi_1 = [2 - 0.2, 2 - 0.4] = [1.8, 1.6]
        // e_2 = 1 - (5 - 1) = -3  -> psi_2 = [2.5 - 1.2, -1 - 0.6] = [1.3, -1.6]
        // q_1 = [0.5*1.8 + 0.5*1.3, 1.6], q_2 = [0.25*1.8 + 0.75*1.3, -1.6]
        let expect1 = [0.5 * 1.8 + 0.5 * 1.3, 1.6];
        let expect2 = [0.25 * 1.8 + 0.75 * 1.3, -1.6];
        for (got, want) in next.q[0].iter().zip(expect1) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        for (got, want) in next.q[1].iter().zip(expect2) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn atc_and_cta_are_exact_specializations() {
        let layout = validation_layout();
        let t = validation_topology();
        let w = Weights::uniform(&t, &layout);
        let id = Weights::identity(&layout);
        let mu = vec![0.02; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s_atc = NetworkState::random(&layout, &mut rng);
        let mut s_cta = s_atc.clone();
        let mut g_atc = s_atc.clone();
        let mut g_cta = s_atc.clone();
        for _ in 0..200 {
            let o = random_obs(&layout, &mut rng);
            s_atc = atc_step(&s_atc, &w, &layout, &o, &mu).unwrap();
            g_atc = general_step(&g_atc, &id, &w, &layout, &o, &mu).unwrap();
            s_cta = cta_step(&s_cta, &w, &layout, &o, &mu).unwrap();
            g_cta = general_step(&g_cta, &w, &id, &layout, &o, &mu).unwrap();
            assert_eq!(s_atc, g_atc);
            assert_eq!(s_cta, g_cta);
        }
    }

    #[test]
    fn uniform_cta_combine_is_neighborhood_average() {
        let layout = InterestLayout::uniform(3, 1, &[vec![0, 1]], 1, 1, 1).unwrap();
        let t = Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let w = Weights::uniform(&t, &layout);
        let x = vec![
            Vector::from_column_slice(&[1.0, 10.0, 0.0]),
            Vector::from_column_slice(&[2.0, 20.0, 0.0]),
            Vector::from_column_slice(&[6.0, 0.0]),
        ];
        let y = combine(&w, &layout, &x);
        assert!((y[1][0] - 3.0).abs() < 1e-15);
        assert!((y[0][0] - 1.5).abs() < 1e-15);
        assert!((y[0][1] - 15.0).abs() < 1e-15);
        assert_eq!(y[2][0], 4.0);
    }

    #[test]
    fn combine_of_consensus_is_noop() {
        let layout = validation_layout();
        let w = Weights::uniform(&validation_topology(), &layout);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = GroundTruth::draw(&layout, &mut rng);
        let x: Vec<Vector> = (0..10).map(|k| truth.node_vector(&layout, k)).collect();
        for (a, b) in combine(&w, &layout, &x).iter().zip(&x) {
            assert!((a - b).amax() < 1e-15);
        }
    }

    #[test]
    fn nodes_hold_only_their_own_blocks() {
        let layout = validation_layout();
        let s = NetworkState::zeros(&layout);
        assert_eq!(s.q[0].len(), 2 + 3);
        assert_eq!(s.q[4].len(), 10);
        assert_eq!(s.q[9].len(), 5);
    }

    #[test]
    fn noiseless_data_converges() {
        // well-conditioned 2x2 statistics, mu = 0.1
        let layout = InterestLayout::uniform(2, 1, &[], 0, 1, 2).unwrap();
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 1.0,
                alpha: 0.2,
            }; 2],
            0.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = GroundTruth::draw(&layout, &mut rng);
        let w = Weights::uniform(&Topology::complete(2), &layout);
        let mut s = NetworkState::zeros(&layout);
        for _ in 0..10_000 {
            let o: Vec<_> = (0..2)
                .map(|k| gen_observation(k, &truth, &layout, &stats, &mut rng))
                .collect();
            s = atc_step(&s, &w, &layout, &o, &[0.1, 0.1]).unwrap();
        }
        assert!(s.error(&layout, &truth).norm() < 1e-8);
    }

    #[test]
    fn error_recursion_matches_state_recursion() {
        let layout = validation_layout();
        let t = validation_topology();
        let policy = uniform_policy(Mode::General, &t, &layout);
        let a = extend_policy_direct(&policy.a, &layout);
        let c = extend_policy_direct(&policy.c, &layout);
        let mu: Vec<f64> = (0..10).map(|k| 0.01 + 0.002 * k as f64).collect();
        let m = block_diag(
            &(0..10)
                .map(|k| Mat::identity(layout.node_dim(k), layout.node_dim(k)) * mu[k])
                .collect::<Vec<_>>(),
        );
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 0.5,
                alpha: 0.5,
            }; 10],
            1e-3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = GroundTruth::draw(&layout, &mut rng);
        let mut s = NetworkState::zeros(&layout);
        let mut err = s.error(&layout, &truth);
        for _ in 0..300 {
            let o: Vec<_> = (0..10)
                .map(|k| gen_observation(k, &truth, &layout, &stats, &mut rng))
                .collect();
            s = policy_step(&s, &policy, &layout, &o, &mu).unwrap();
            let d = block_diag(&o.iter().map(|o| o.u.tr_mul(&o.u)).collect::<Vec<_>>());
            let g = Vector::from_iterator(
                layout.total_dim(),
                o.iter().enumerate().flat_map(|(k, o)| {
                    let v = &o.d - &o.u * truth.node_vector(&layout, k);
                    o.u.tr_mul(&v).iter().copied().collect::<Vec<_>>()
                }),
            );
            let n = layout.total_dim();
            err = &a * (Mat::identity(n, n) - &m * &d) * &c * &err - &a * &m * g;
            let direct = s.error(&layout, &truth);
            assert!((&err - &direct).amax() < 1e-12 * (1.0 + direct.amax()));
        }
    }

    #[test]
    fn incremental_single_node_is_lms() {
        let layout = InterestLayout::uniform(1, 2, &[], 0, 1, 2).unwrap();
        let mut s = IncrementalState::zeros(&layout);
        let o = obs(&[1.0, 0.0, 2.0, 0.5, 1.0, -1.0], 2, &[1.0, 2.0]);
        incremental_step(&mut s, 0, &layout, &o, 0.1).unwrap();
        assert_eq!(s.w, adapt(&Vector::zeros(3), &o, 0.1));
    }

    #[test]
    fn incremental_leaves_foreign_blocks_alone() {
        let layout = validation_layout();
        let mut s = IncrementalState {
            w: Vector::from_element(layout.augmented_dim(), 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o = random_obs(&layout, &mut rng);
        incremental_step(&mut s, 0, &layout, &o[0], 0.1).unwrap();
        // node 1 (0-based 0) is in no cluster: commons and other locals untouched
        for j in 0..2 {
            assert!(s
                .w
                .rows_range(layout.augmented_range(BlockId::Common(j), 0))
                .iter()
                .all(|v| *v == 1.0));
        }
        for k in 1..10 {
            assert!(s
                .w
                .rows_range(layout.augmented_range(BlockId::Local, k))
                .iter()
                .all(|v| *v == 1.0));
        }
        assert!(s
            .w
            .rows_range(layout.augmented_range(BlockId::Local, 0))
            .iter()
            .any(|v| *v != 1.0));
    }

    #[test]
    fn centralized_population_moments_recover_truth() {
        let layout = validation_layout();
        let params: Vec<_> = (0..10)
            .map(|k| ArParams {
                sigma_u2: 0.5 + 0.05 * k as f64,
                alpha: 0.1 + 0.05 * k as f64,
            })
            .collect();
        let stats = RegressorStats::ar1(&layout, &params, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = GroundTruth::draw(&layout, &mut rng);
        let m = CentralizedMoments::population(&layout, &stats, &truth);
        let w = centralized_solve(&m).unwrap();
        let wbar = truth.augmented_vector(&layout);
        assert!((&w - &wbar).norm() / wbar.norm() < 1e-10);
    }

    #[test]
    fn centralized_single_node_is_least_squares() {
        let layout = InterestLayout::uniform(1, 0, &[], 0, 2, 3).unwrap();
        let o = obs(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 3, &[1.0, 2.0, 4.0]);
        let mut m = CentralizedMoments::zeros(&layout);
        m.add(&layout, 0, &o);
        let w = centralized_solve(&m).unwrap();
        let ls = (o.u.tr_mul(&o.u)).lu().solve(&o.u.tr_mul(&o.d)).unwrap();
        assert!((w - ls).amax() < 1e-14);
    }

    #[test]
    fn centralized_sample_moments_within_bands() {
        let layout = InterestLayout::uniform(3, 1, &[vec![0, 1]], 1, 1, 2).unwrap();
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 1.0,
                alpha: 0.3,
            }; 3],
            0.1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = GroundTruth::draw(&layout, &mut rng);
        let s = 100_000;
        let mut m = CentralizedMoments::zeros(&layout);
        for _ in 0..s {
            for k in 0..3 {
                m.add(
                    &layout,
                    k,
                    &gen_observation(k, &truth, &layout, &stats, &mut rng),
                );
            }
        }
        let w = centralized_solve(&m).unwrap();
        // covariance of the LS estimate: σ_v² (Σ ŪᵀŪ)⁻¹
        let cov = m.r.clone().try_inverse().unwrap() * 0.1;
        let wbar = truth.augmented_vector(&layout);
        for i in 0..wbar.len() {
            let se = cov[(i, i)].sqrt();
            assert!(
                (w[i] - wbar[i]).abs() < 3.0 * se,
                "entry {i}: {} vs {}",
                w[i],
                wbar[i]
            );
        }
    }

    #[test]
    fn singular_normal_equations_report_rank() {
        let layout = InterestLayout::uniform(1, 0, &[], 0, 2, 1).unwrap();
        let mut m = CentralizedMoments::zeros(&layout);
        m.add(&layout, 0, &obs(&[1.0, 1.0], 1, &[1.0]));
        assert!(matches!(
            centralized_solve(&m),
            Err(Error::Singular { rank: 1, dim: 2 })
        ));
    }

    #[test]
    fn step_sizes_flag_bound_excess() {
        let s = StepSizes::new(vec![0.1, 0.5]).unwrap();
        assert_eq!(s.exceeding(&[1.0, 0.4]), vec![1]);
        assert!(StepSizes::new(vec![-0.1]).is_err());
    }

    #[test]
    fn trace_log_rows() {
        let layout = InterestLayout::uniform(2, 1, &[vec![0, 1]], 1, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = GroundTruth::draw(&layout, &mut rng);
        let s = NetworkState::zeros(&layout);
        let mut log = TraceLog::new(Vec::new()).unwrap();
        log.record(1, &s, &layout, &truth).unwrap();
        let text = String::from_utf8(log.finish().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        assert!(text.starts_with("round,node,block,sq_error\n1,1,global,"));
    }

    #[test]
    fn stacking_round_trip() {
        let layout = validation_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = NetworkState::random(&layout, &mut rng);
        assert_eq!(
            NetworkState::from_stacked(&layout, &s.stacked()).unwrap(),
            s
        );
    }
}
