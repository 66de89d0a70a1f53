//! Combination weights, their extended network-wide forms and the adaptive
//! weight rule.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blockmat::{block_diag, kron, Mat, Vector};
use crate::error::{Error, Result};
use crate::scenario::{BlockId, InterestLayout, Topology};

const ROW_SUM_TOL: f64 = 1e-12;

/// Ordering of combination and adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Combine, then adapt (`A = I`).
    Cta,
    /// Adapt, then combine (`C = I`).
    Atc,
    /// Combine, adapt, combine.
    General,
}

/// One side (C or A) of a policy: an `N × N` matrix for the global task and
/// one `|C_j| × |C_j|` matrix per cluster, indexed by within-cluster rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub global: Mat,
    pub common: Vec<Mat>,
}

impl Weights {
    pub fn identity(layout: &InterestLayout) -> Self {
        let n = layout.nodes();
        Self {
            global: Mat::identity(n, n),
            common: layout
                .clusters()
                .iter()
                .map(|c| Mat::identity(c.members.len(), c.members.len()))
                .collect(),
        }
    }

    /// Equal weights over `N_k` for the global task and over `N_k ∩ C_j`
    /// for cluster `j`.
    pub fn uniform(topology: &Topology, layout: &InterestLayout) -> Self {
        let n = layout.nodes();
        let mut global = Mat::zeros(n, n);
        for k in 0..n {
            let nb = topology.neighbors(k);
            for &l in nb {
                global[(k, l)] = 1.0 / nb.len() as f64;
            }
        }
        let common = (0..layout.num_clusters())
            .map(|j| {
                let members = layout.cluster_members(j);
                let mut w = Mat::zeros(members.len(), members.len());
                for (rk, &k) in members.iter().enumerate() {
                    let nb = topology.neighbors_in(k, members);
                    for &l in &nb {
                        let rl = layout.cluster_rank(j, l).expect("member");
                        w[(rk, rl)] = 1.0 / nb.len() as f64;
                    }
                }
                w
            })
            .collect();
        Self { global, common }
    }

    /// Matrix for `task` (global or a cluster).
    pub fn task(&self, task: BlockId) -> &Mat {
        match task {
            BlockId::Common(j) => &self.common[j],
            _ => &self.global,
        }
    }

    /// Weight node `k` assigns to node `l` on `task`; zero when either is
    /// outside the cluster.
    pub fn weight(&self, layout: &InterestLayout, task: BlockId, k: usize, l: usize) -> f64 {
        match task {
            BlockId::Global => self.global[(k, l)],
            BlockId::Common(j) => match (layout.cluster_rank(j, k), layout.cluster_rank(j, l)) {
                (Some(a), Some(b)) => self.common[j][(a, b)],
                _ => 0.0,
            },
            BlockId::Local => f64::from(k == l),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinationPolicy {
    pub mode: Mode,
    pub c: Weights,
    pub a: Weights,
}

impl CombinationPolicy {
    pub fn atc(a: Weights, layout: &InterestLayout) -> Self {
        Self {
            mode: Mode::Atc,
            c: Weights::identity(layout),
            a,
        }
    }

    pub fn cta(c: Weights, layout: &InterestLayout) -> Self {
        Self {
            mode: Mode::Cta,
            c,
            a: Weights::identity(layout),
        }
    }

    pub fn general(c: Weights, a: Weights) -> Self {
        Self {
            mode: Mode::General,
            c,
            a,
        }
    }
}

/// Uniform weights on the active side(s) of `mode`.
pub fn uniform_policy(
    mode: Mode,
    topology: &Topology,
    layout: &InterestLayout,
) -> CombinationPolicy {
    let w = Weights::uniform(topology, layout);
    match mode {
        Mode::Atc => CombinationPolicy::atc(w, layout),
        Mode::Cta => CombinationPolicy::cta(w, layout),
        Mode::General => CombinationPolicy::general(w.clone(), w),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    C,
    A,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ViolationKind {
    /// Nonzero weight outside the allowed support.
    Support {
        weight: f64,
    },
    Negative {
        weight: f64,
    },
    /// `1 - row sum`.
    RowSum {
        residual: f64,
    },
    Shape {
        expected: usize,
        found: usize,
    },
}

/// Node indices are 0-based; `l` is `None` for row-level violations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyViolation {
    pub side: Side,
    pub task: BlockId,
    pub k: usize,
    pub l: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for PolicyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{}: node {}", self.side, self.task, self.k + 1)?;
        if let Some(l) = self.l {
            write!(f, " -> {}", l + 1)?;
        }
        match &self.kind {
            ViolationKind::Support { weight } => {
                write!(f, ": weight {weight} outside the neighborhood")
            }
            ViolationKind::Negative { weight } => write!(f, ": negative weight {weight}"),
            ViolationKind::RowSum { residual } => write!(f, ": row sum off by {residual:e}"),
            ViolationKind::Shape { expected, found } => {
                write!(f, ": matrix has {found} rows/cols, expected {expected}")
            }
        }
    }
}

/// Support and row-stochasticity of both sides of `policy`.
pub fn validate_policy(
    policy: &CombinationPolicy,
    topology: &Topology,
    layout: &InterestLayout,
) -> Vec<PolicyViolation> {
    let mut out = Vec::new();
    for (side, w) in [(Side::C, &policy.c), (Side::A, &policy.a)] {
        let all: Vec<usize> = (0..layout.nodes()).collect();
        check_task(&mut out, side, BlockId::Global, &w.global, &all, topology);
        if w.common.len() != layout.num_clusters() {
            out.push(PolicyViolation {
                side,
                task: BlockId::Global,
                k: 0,
                l: None,
                kind: ViolationKind::Shape {
                    expected: layout.num_clusters(),
                    found: w.common.len(),
                },
            });
            continue;
        }
        for j in 0..layout.num_clusters() {
            check_task(
                &mut out,
                side,
                BlockId::Common(j),
                &w.common[j],
                layout.cluster_members(j),
                topology,
            );
        }
    }
    out
}

fn check_task(
    out: &mut Vec<PolicyViolation>,
    side: Side,
    task: BlockId,
    w: &Mat,
    members: &[usize],
    topology: &Topology,
) {
    let n = members.len();
    if w.shape() != (n, n) {
        out.push(PolicyViolation {
            side,
            task,
            k: members.first().copied().unwrap_or(0),
            l: None,
            kind: ViolationKind::Shape {
                expected: n,
                found: w.nrows(),
            },
        });
        return;
    }
    for (rk, &k) in members.iter().enumerate() {
        for (rl, &l) in members.iter().enumerate() {
            let weight = w[(rk, rl)];
            let mut push = |kind| {
                out.push(PolicyViolation {
                    side,
                    task,
                    k,
                    l: Some(l),
                    kind,
                })
            };
            if weight < 0.0 {
                push(ViolationKind::Negative { weight });
            }
            if weight != 0.0 && !topology.is_neighbor(k, l) {
                push(ViolationKind::Support { weight });
            }
        }
        let residual = 1.0 - w.row(rk).sum();
        if residual.abs() > ROW_SUM_TOL {
            out.push(PolicyViolation {
                side,
                task,
                k,
                l: None,
                kind: ViolationKind::RowSum { residual },
            });
        }
    }
}

/// `P` with `P[node-wise position, grouped position] = 1`, so that
/// `x_nodewise = P x_grouped`.
pub fn build_permutation(layout: &InterestLayout) -> Mat {
    let n = layout.total_dim();
    let mut p = Mat::zeros(n, n);
    for k in 0..layout.nodes() {
        for (block, r) in layout.node_blocks(k) {
            let base = layout.node_offset(k) + r.start;
            for c in 0..r.len() {
                let g = layout
                    .grouped_position(k, block, c)
                    .expect("block of node k");
                p[(base + c, g)] = 1.0;
            }
        }
    }
    p
}

/// Extended `M̆ × M̆` weighting matrix, assembled block row by block row.
pub fn extend_policy_direct(w: &Weights, layout: &InterestLayout) -> Mat {
    let n = layout.total_dim();
    let mut out = Mat::zeros(n, n);
    for k in 0..layout.nodes() {
        for (block, _) in layout.node_blocks(k) {
            let rows = layout.network_range(k, block).expect("own block");
            match block {
                BlockId::Global => {
                    for l in 0..layout.nodes() {
                        let weight = w.global[(k, l)];
                        let cols = layout.network_range(l, block).expect("global");
                        for c in 0..rows.len() {
                            out[(rows.start + c, cols.start + c)] = weight;
                        }
                    }
                }
                BlockId::Common(j) => {
                    let rk = layout.cluster_rank(j, k).expect("member");
                    for (rl, &l) in layout.cluster_members(j).iter().enumerate() {
                        let weight = w.common[j][(rk, rl)];
                        let cols = layout.network_range(l, block).expect("member");
                        for c in 0..rows.len() {
                            out[(rows.start + c, cols.start + c)] = weight;
                        }
                    }
                }
                BlockId::Local => {
                    for r in rows {
                        out[(r, r)] = 1.0;
                    }
                }
            }
        }
    }
    out
}

/// Same matrix as [`extend_policy_direct`], built as `P · blkd · Pᵀ` with
/// `blkd = blockdiag{W_g ⊗ I, W_j ⊗ I, …, I}` in the grouped ordering.
pub fn extend_policy_permuted(w: &Weights, layout: &InterestLayout, p: &Mat) -> Result<Mat> {
    let n = layout.total_dim();
    if p.shape() != (n, n) {
        return Err(Error::dim("permutation", n, p.nrows()));
    }
    let mut blocks = vec![kron(
        &w.global,
        &Mat::identity(layout.global_size(), layout.global_size()),
    )];
    for j in 0..layout.num_clusters() {
        let s = layout.common_size(j);
        blocks.push(kron(&w.common[j], &Mat::identity(s, s)));
    }
    let locals: usize = (0..layout.nodes()).map(|k| layout.local_size(k)).sum();
    blocks.push(Mat::identity(locals, locals));
    let blkd = block_diag(&blocks);
    Ok(p * blkd * p.transpose())
}

pub const DEFAULT_NU: f64 = 0.1;
pub const DEFAULT_GAMMA2: f64 = 1.0;
pub const GAMMA2_FLOOR: f64 = 1e-8;

/// Inverse-variance weights: each node tracks a smoothed squared distance
/// `γ²` to every neighbor's intermediate estimate and weights neighbors in
/// proportion to `γ⁻²`. One state per task (global and each cluster).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveCombiner {
    nu: f64,
    /// `[task][k]` → `γ²` per allowed neighbor, aligned with `support`.
    gamma2: Vec<Vec<Vec<f64>>>,
    support: Vec<Vec<Vec<usize>>>,
}

impl AdaptiveCombiner {
    pub fn new(nu: f64, topology: &Topology, layout: &InterestLayout) -> Result<Self> {
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "forgetting factor {nu} outside (0, 1]"
            )));
        }
        let mut support = vec![(0..layout.nodes())
            .map(|k| topology.neighbors(k).to_vec())
            .collect::<Vec<_>>()];
        for j in 0..layout.num_clusters() {
            let members = layout.cluster_members(j);
            support.push(
                (0..layout.nodes())
                    .map(|k| {
                        if members.contains(&k) {
                            topology.neighbors_in(k, members)
                        } else {
                            Vec::new()
                        }
                    })
                    .collect(),
            );
        }
        let gamma2 = support
            .iter()
            .map(|t| t.iter().map(|s| vec![DEFAULT_GAMMA2; s.len()]).collect())
            .collect();
        Ok(Self {
            nu,
            gamma2,
            support,
        })
    }

    fn task_index(task: BlockId) -> usize {
        match task {
            BlockId::Common(j) => j + 1,
            _ => 0,
        }
    }

    /// Allowed neighbors of `k` on `task`.
    pub fn support(&self, task: BlockId, k: usize) -> &[usize] {
        &self.support[Self::task_index(task)][k]
    }

    pub fn gamma2(&self, task: BlockId, k: usize) -> &[f64] {
        &self.gamma2[Self::task_index(task)][k]
    }

    /// Folds in squared distances (aligned with [`Self::support`]) and
    /// returns the new weights over the same support.
    pub fn adaptive_update(&mut self, task: BlockId, k: usize, sq_dist: &[f64]) -> Vec<f64> {
        let nu = self.nu;
        let g = &mut self.gamma2[Self::task_index(task)][k];
        assert_eq!(
            g.len(),
            sq_dist.len(),
            "distance count must match the support"
        );
        for (g, d) in g.iter_mut().zip(sq_dist) {
            *g = (1.0 - nu) * *g + nu * d;
        }
        let inv: Vec<f64> = g.iter().map(|g| 1.0 / g.max(GAMMA2_FLOOR)).collect();
        let total: f64 = inv.iter().sum();
        inv.into_iter().map(|v| v / total).collect()
    }

    /// Updates every node and task from node-wise vectors: `psi[l]` are the
    /// fresh intermediate estimates, `prev[k]` the previous combined ones.
    pub fn update(&mut self, layout: &InterestLayout, psi: &[Vector], prev: &[Vector]) -> Weights {
        let mut w = Weights {
            global: Mat::zeros(layout.nodes(), layout.nodes()),
            common: layout
                .clusters()
                .iter()
                .map(|c| Mat::zeros(c.members.len(), c.members.len()))
                .collect(),
        };
        let mut tasks = vec![BlockId::Global];
        tasks.extend((0..layout.num_clusters()).map(BlockId::Common));
        for task in tasks {
            for k in 0..layout.nodes() {
                let Some(rk) = layout.block_range(k, task) else {
                    continue;
                };
                let support = self.support(task, k).to_vec();
                let dist: Vec<f64> = support
                    .iter()
                    .map(|&l| {
                        let rl = layout
                            .block_range(l, task)
                            .expect("neighbor shares the task");
                        (psi[l].rows_range(rl) - prev[k].rows_range(rk.clone())).norm_squared()
                    })
                    .collect();
                let weights = self.adaptive_update(task, k, &dist);
                for (&l, a) in support.iter().zip(weights) {
                    match task {
                        BlockId::Common(j) => {
                            let a_k = layout.cluster_rank(j, k).expect("member");
                            let a_l = layout.cluster_rank(j, l).expect("member");
                            w.common[j][(a_k, a_l)] = a;
                        }
                        _ => w.global[(k, l)] = a,
                    }
                }
            }
        }
        w
    }
}

/// Writes nonzero weights as `side,task,k,l,weight` rows (1-based nodes).
pub fn write_policy_csv<W: Write>(
    out: W,
    policy: &CombinationPolicy,
    layout: &InterestLayout,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("policy dump: {e}"));
    wtr.write_record(["side", "task", "k", "l", "weight"])
        .map_err(io)?;
    for (side, w) in [("C", &policy.c), ("A", &policy.a)] {
        let mut tasks = vec![BlockId::Global];
        tasks.extend((0..layout.num_clusters()).map(BlockId::Common));
        for task in tasks {
            for k in 0..layout.nodes() {
                for l in 0..layout.nodes() {
                    let v = w.weight(layout, task, k, l);
                    if v != 0.0 {
                        wtr.write_record([
                            side.to_string(),
                            task.to_string(),
                            (k + 1).to_string(),
                            (l + 1).to_string(),
                            format!("{v:?}"),
                        ])
                        .map_err(io)?;
                    }
                }
            }
        }
    }
    wtr.flush()
        .map_err(|e| Error::Config(format!("policy dump: {e}")))?;
    Ok(())
}
