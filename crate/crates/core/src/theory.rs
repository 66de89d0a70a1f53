//! Closed-form mean and mean-square analysis of the general diffusion
//! recursion.
//!
//! With `q̃_i = Ă(I − M D_i)C̆ q̃_{i−1} − Ă M g_i`, `D_i = blockdiag(U_kᵀU_k)`
//! and `g_i = col(U_kᵀv_k)`, the mean error evolves through
//! `B = Ă(I − M R_U)C̆` and the weighted variance through
//! `F = (C̆ᵀ⊗C̆ᵀ) G (Ăᵀ⊗Ăᵀ)`.

use serde::Serialize;

use crate::blockmat::{
    block_diag, commutation_matrix, khatri_rao, kron, kron_mul, mul_kron, spectral_radius,
    vectorize, Mat, Partition, Vector,
};
use crate::combiners::{extend_policy_direct, CombinationPolicy};
use crate::error::{Error, Result};
use crate::scenario::{BlockId, InterestLayout, RegressorStats};

/// Largest `M̆` for which the `M̆² × M̆²` operators are built by default.
pub const DEFAULT_MEM_CAP: usize = 120;

/// Second-order moments and step sizes in node-wise stacking.
#[derive(Debug, Clone)]
pub struct MomentSet {
    /// `blockdiag(Tr(Ω_k) Ψ_k)`.
    pub r_u: Mat,
    /// `blockdiag(Tr(R_v,k Ω_k) Ψ_k)`, the covariance of `col(U_kᵀv_k)`.
    pub v: Mat,
    /// `blockdiag(μ_k I_{M_k})`.
    pub m: Mat,
}

impl MomentSet {
    pub fn new(layout: &InterestLayout, stats: &RegressorStats, mu: &[f64]) -> Result<Self> {
        let n = layout.nodes();
        if mu.len() != n {
            return Err(Error::dim("step sizes", n, mu.len()));
        }
        if stats.nodes() != n {
            return Err(Error::dim("regressor statistics", n, stats.nodes()));
        }
        let r_u = block_diag(&(0..n).map(|k| stats.second_moment(k)).collect::<Vec<_>>());
        let v = block_diag(
            &(0..n)
                .map(|k| stats.psi(k) * (stats.rv(k) * stats.omega(k)).trace())
                .collect::<Vec<_>>(),
        );
        let m = block_diag(
            &(0..n)
                .map(|k| Mat::identity(layout.node_dim(k), layout.node_dim(k)) * mu[k])
                .collect::<Vec<_>>(),
        );
        Ok(Self { r_u, v, m })
    }
}

/// `B = Ă (I − M R_U) C̆`.
pub fn mean_matrix(a_ext: &Mat, c_ext: &Mat, moments: &MomentSet) -> Mat {
    let n = moments.r_u.nrows();
    a_ext * (Mat::identity(n, n) - &moments.m * &moments.r_u) * c_ext
}

/// `2 / λ_max` over the diagonal sub-blocks (global, each common, local) of
/// node `k`'s second moment.
pub fn stability_bound(layout: &InterestLayout, stats: &RegressorStats, k: usize) -> Result<f64> {
    let r = stats.second_moment(k);
    let mut lmax: f64 = 0.0;
    for (_, range) in layout.node_blocks(k) {
        if range.is_empty() {
            continue;
        }
        let blk = r
            .view((range.start, range.start), (range.len(), range.len()))
            .clone_owned();
        lmax = lmax.max(blk.symmetric_eigen().eigenvalues.max());
    }
    if lmax <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "node {} has a zero regressor moment; no step-size bound",
            k + 1
        )));
    }
    Ok(2.0 / lmax)
}

/// `E{UᵀU ⊗ UᵀU}` for `vec(U) ~ N(0, Ψ ⊗ Ω)`:
/// `Tr(Ω)² Ψ⊗Ψ + Tr(Ω²) vec(Ψ)vec(Ψ)ᵀ + Tr(Ω²) K (Ψ⊗Ψ)`.
pub fn fourth_moment_same(psi: &Mat, omega: &Mat) -> Result<Mat> {
    if !psi.is_square() {
        return Err(Error::dim("psi", psi.nrows(), psi.ncols()));
    }
    if !omega.is_square() {
        return Err(Error::dim("omega", omega.nrows(), omega.ncols()));
    }
    let m = psi.nrows();
    if m == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let tr = omega.trace();
    let tr2 = (omega * omega).trace();
    let pp = kron(psi, psi);
    let vp = vectorize(psi);
    let k = commutation_matrix(m, m)?;
    Ok(&pp * (tr * tr) + &vp * vp.transpose() * tr2 + k * pp * tr2)
}

/// `E{U_ℓᵀU_ℓ ⊗ U_kᵀU_k} = [Tr(Ω_ℓ)Ψ_ℓ] ⊗ [Tr(Ω_k)Ψ_k]` for independent nodes.
pub fn fourth_moment_cross(psi_l: &Mat, omega_l: &Mat, psi_k: &Mat, omega_k: &Mat) -> Mat {
    kron(&(psi_l * omega_l.trace()), &(psi_k * omega_k.trace()))
}

fn check_cap(dim: usize, cap: usize) -> Result<()> {
    if dim > cap {
        return Err(Error::MemoryCap { dim, cap });
    }
    Ok(())
}

/// `S = E{D ⊗ D}` (`M̆² × M̆²`), assembled per node as
/// `K_{(M_k,M̆)} · blockdiag_ℓ(E{D_ℓ ⊗ D_k}) · K_{(M̆,M_k)}`.
pub fn build_s(layout: &InterestLayout, stats: &RegressorStats, mem_cap: usize) -> Result<Mat> {
    let n = layout.total_dim();
    check_cap(n, mem_cap)?;
    let mut blocks = Vec::with_capacity(layout.nodes());
    for k in 0..layout.nodes() {
        let mk = layout.node_dim(k);
        let inner: Vec<Mat> = (0..layout.nodes())
            .map(|l| {
                if l == k {
                    fourth_moment_same(stats.psi(k), stats.omega(k))
                } else {
                    Ok(fourth_moment_cross(
                        stats.psi(l),
                        stats.omega(l),
                        stats.psi(k),
                        stats.omega(k),
                    ))
                }
            })
            .collect::<Result<_>>()?;
        let d_dk = block_diag(&inner);
        let k1 = commutation_matrix(mk, n)?;
        let k2 = commutation_matrix(n, mk)?;
        blocks.push(k1 * d_dk * k2);
    }
    Ok(block_diag(&blocks))
}

/// `G = I⊗I − R_U M ⊗ I − I ⊗ R_U M + S (M⊗M)`; the last term only when
/// `s` is given.
pub fn build_g(moments: &MomentSet, s: Option<&Mat>) -> Mat {
    let n = moments.r_u.nrows();
    let rm = &moments.r_u * &moments.m;
    let eye = Mat::identity(n, n);
    let mut g = Mat::identity(n * n, n * n) - kron(&rm, &eye) - kron(&eye, &rm);
    if let Some(s) = s {
        let mm: Vec<f64> = moments.m.diagonal().iter().copied().collect();
        // S (M⊗M) with diagonal M scales column (a, b) by μ_a μ_b
        for a in 0..n {
            for b in 0..n {
                let col = a * n + b;
                let scale = mm[a] * mm[b];
                let mut gc = g.column_mut(col);
                gc.axpy(scale, &s.column(col), 1.0);
            }
        }
    }
    g
}

fn is_identity(m: &Mat) -> bool {
    m.is_square()
        && m.iter()
            .enumerate()
            .all(|(idx, v)| *v == f64::from(idx % m.nrows() == idx / m.nrows()))
}

/// `F = (C̆ᵀ⊗C̆ᵀ) G (Ăᵀ⊗Ăᵀ)`, applied without forming the Kronecker factors.
pub fn build_f(a_ext: &Mat, c_ext: &Mat, g: Mat) -> Result<Mat> {
    let ct = c_ext.transpose();
    let at = a_ext.transpose();
    let left = if is_identity(c_ext) {
        g
    } else {
        kron_mul(&ct, &ct, &g)?
    };
    if is_identity(a_ext) {
        Ok(left)
    } else {
        mul_kron(&left, &at, &at)
    }
}

/// `m_k = vec(diag(e_k) ⊙ Y)` with `Y = blockdiag(I_{M_1}, …, I_{M_N})`.
pub fn msd_selection(layout: &InterestLayout, k: usize) -> Result<Vector> {
    node_selection(
        layout,
        k,
        &Mat::identity(layout.total_dim(), layout.total_dim()),
    )
}

/// `p_k = vec(diag(e_k) ⊙ R_U)`.
pub fn emse_selection(layout: &InterestLayout, k: usize, r_u: &Mat) -> Result<Vector> {
    node_selection(layout, k, r_u)
}

fn node_selection(layout: &InterestLayout, k: usize, y: &Mat) -> Result<Vector> {
    let n = layout.nodes();
    let mut e = Mat::zeros(n, n);
    e[(k, k)] = 1.0;
    let unit = Partition::unit(n);
    let nodes = layout.block_layout().node_partition()?;
    Ok(vectorize(&khatri_rao(&e, y, &unit, &unit, &nodes, &nodes)?))
}

/// Selection of a single block of node `k`, using `Y` refined to the block
/// partition. `None` for empty or foreign blocks.
pub fn block_selection(
    layout: &InterestLayout,
    k: usize,
    block: BlockId,
) -> Result<Option<Vector>> {
    let Some(target) = layout.network_range(k, block) else {
        return Ok(None);
    };
    if target.is_empty() {
        return Ok(None);
    }
    let parts = layout.block_layout().block_partition()?;
    let idx = (0..parts.len())
        .find(|&i| parts.range(i).start == target.start)
        .expect("nonempty block starts a partition cell");
    let nb = parts.len();
    let mut e = Mat::zeros(nb, nb);
    e[(idx, idx)] = 1.0;
    let unit = Partition::unit(nb);
    let n = layout.total_dim();
    Ok(Some(vectorize(&khatri_rao(
        &e,
        &Mat::identity(n, n),
        &unit,
        &unit,
        &parts,
        &parts,
    )?)))
}

#[derive(Debug, Clone, Copy)]
pub struct TheoryOptions {
    pub fourth_order: bool,
    pub mem_cap: usize,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self {
            fourth_order: false,
            mem_cap: DEFAULT_MEM_CAP,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockValue {
    pub block: BlockId,
    pub value: f64,
}

/// Mean and steady-state mean-square results. The large operators are kept
/// in memory but not serialized.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    #[serde(skip)]
    pub b_mean: Mat,
    #[serde(skip)]
    pub f: Mat,
    /// Spectral radius of the mean matrix.
    pub rho_mean: f64,
    pub rho_f: f64,
    pub mu_max: Vec<f64>,
    pub fourth_order: bool,
    pub msd_net: f64,
    pub emse_net: f64,
    pub msd: Vec<f64>,
    pub emse: Vec<f64>,
    pub msd_block: Vec<Vec<BlockValue>>,
}

impl TheoryReport {
    pub fn msd_block(&self, k: usize, block: BlockId) -> Option<f64> {
        self.msd_block[k]
            .iter()
            .find(|b| b.block == block)
            .map(|b| b.value)
    }
}

/// Runs the whole pipeline for `policy`. Fails with
/// [`Error::MeanSquareUnstable`] when `ρ(F) ≥ 1`.
pub fn steady_state(
    layout: &InterestLayout,
    stats: &RegressorStats,
    policy: &CombinationPolicy,
    mu: &[f64],
    opts: TheoryOptions,
) -> Result<TheoryReport> {
    let n = layout.total_dim();
    check_cap(n, opts.mem_cap)?;
    let a_ext = extend_policy_direct(&policy.a, layout);
    let c_ext = extend_policy_direct(&policy.c, layout);
    let moments = MomentSet::new(layout, stats, mu)?;
    let b_mean = mean_matrix(&a_ext, &c_ext, &moments);
    let rho_mean = spectral_radius(&b_mean)?;
    let mu_max = (0..layout.nodes())
        .map(|k| stability_bound(layout, stats, k))
        .collect::<Result<Vec<_>>>()?;

    let s = if opts.fourth_order {
        Some(build_s(layout, stats, opts.mem_cap)?)
    } else {
        None
    };
    let g = build_g(&moments, s.as_ref());
    drop(s);
    let f = build_f(&a_ext, &c_ext, g)?;
    let rho_f = spectral_radius(&f)?;
    if rho_f.is_nan() || rho_f >= 1.0 {
        return Err(Error::MeanSquareUnstable { rho: rho_f });
    }

    let am = &a_ext * &moments.m;
    let b = vectorize(&(&am * moments.v.transpose() * am.transpose()));
    let lhs = (Mat::identity(n * n, n * n) - &f).transpose();
    let y = lhs.lu().solve(&b).ok_or(Error::Singular {
        rank: 0,
        dim: n * n,
    })?;

    let mut msd = Vec::with_capacity(layout.nodes());
    let mut emse = Vec::with_capacity(layout.nodes());
    let mut msd_block = Vec::with_capacity(layout.nodes());
    for k in 0..layout.nodes() {
        msd.push(y.dot(&msd_selection(layout, k)?));
        emse.push(y.dot(&emse_selection(layout, k, &moments.r_u)?));
        let mut blocks = Vec::new();
        for (block, _) in layout.node_blocks(k) {
            if let Some(sel) = block_selection(layout, k, block)? {
                blocks.push(BlockValue {
                    block,
                    value: y.dot(&sel),
                });
            }
        }
        msd_block.push(blocks);
    }
    let nodes = layout.nodes() as f64;
    Ok(TheoryReport {
        b_mean,
        f,
        rho_mean,
        rho_f,
        mu_max,
        fourth_order: opts.fourth_order,
        msd_net: msd.iter().sum::<f64>() / nodes,
        emse_net: emse.iter().sum::<f64>() / nodes,
        msd,
        emse,
        msd_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiners::{uniform_policy, Mode, Weights};
    use crate::scenario::{gen_regressor, validation_layout, ArParams, Topology};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring(n: usize) -> Topology {
        let edges: Vec<_> = (0..n).map(|k| (k, (k + 1) % n)).collect();
        Topology::from_edges(n, &edges).unwrap()
    }

    /// Six nodes, cluster {1, 2, 3} (0-based), all blocks of size 2.
    fn reduced() -> (InterestLayout, Topology, RegressorStats) {
        let layout = InterestLayout::uniform(6, 2, &[vec![1, 2, 3]], 2, 2, 2).unwrap();
        let mut edges: Vec<_> = (0..6).map(|k| (k, (k + 1) % 6)).collect();
        edges.push((0, 3));
        let t = Topology::from_edges(6, &edges).unwrap();
        let params: Vec<_> = (0..6)
            .map(|k| ArParams {
                sigma_u2: 0.5 + 0.08 * k as f64,
                alpha: 0.1 + 0.07 * k as f64,
            })
            .collect();
        let stats = RegressorStats::ar1(&layout, &params, 1e-3).unwrap();
        (layout, t, stats)
    }

    /// Entrywise Isserlis evaluation of `E{D ⊗ D}`.
    fn s_oracle(layout: &InterestLayout, stats: &RegressorStats) -> Mat {
        let n = layout.total_dim();
        let owner: Vec<(usize, usize)> = (0..layout.nodes())
            .flat_map(|k| (0..layout.node_dim(k)).map(move |i| (k, i)))
            .collect();
        let mut s = Mat::zeros(n * n, n * n);
        for (row_a, &(ka, a)) in owner.iter().enumerate() {
            for (col_b, &(kb, b)) in owner.iter().enumerate() {
                if ka != kb {
                    continue;
                }
                for (row_c, &(kc, c)) in owner.iter().enumerate() {
                    for (col_d, &(kd, d)) in owner.iter().enumerate() {
                        if kc != kd {
                            continue;
                        }
                        let (pa, oa) = (stats.psi(ka), stats.omega(ka));
                        let v = if ka == kc {
                            let tr = oa.trace();
                            let tr2 = (oa * oa).trace();
                            tr * tr * pa[(a, b)] * pa[(c, d)]
                                + tr2 * (pa[(a, c)] * pa[(b, d)] + pa[(a, d)] * pa[(b, c)])
                        } else {
                            let (pc, oc) = (stats.psi(kc), stats.omega(kc));
                            oa.trace() * pa[(a, b)] * oc.trace() * pc[(c, d)]
                        };
                        s[(row_a * n + row_c, col_b * n + col_d)] = v;
                    }
                }
            }
        }
        s
    }

    #[test]
    fn scalar_fourth_moment_is_three() {
        let f = fourth_moment_same(&Mat::identity(1, 1), &Mat::identity(1, 1)).unwrap();
        assert_eq!(f[(0, 0)], 3.0);
        let z = fourth_moment_same(&Mat::zeros(2, 2), &Mat::identity(2, 2)).unwrap();
        assert_eq!(z, Mat::zeros(4, 4));
    }

    #[test]
    fn fourth_moment_matches_sampling() {
        let layout = InterestLayout::uniform(1, 0, &[], 0, 2, 2).unwrap();
        let psi = Mat::from_diagonal(&Vector::from_column_slice(&[1.0, 2.0]));
        let stats = RegressorStats::new(
            &layout,
            vec![psi.clone()],
            vec![Mat::identity(2, 2)],
            vec![Mat::zeros(2, 2)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = 1_000_000;
        let mut acc = Mat::zeros(4, 4);
        for _ in 0..s {
            let u = gen_regressor(0, &stats, &mut rng);
            let d = u.tr_mul(&u);
            acc += kron(&d, &d);
        }
        acc /= s as f64;
        let f = fourth_moment_same(&psi, &Mat::identity(2, 2)).unwrap();
        assert!((&acc - &f).norm() / f.norm() < 0.02);
    }

    #[test]
    fn cross_moment_of_identities() {
        let p = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let c = fourth_moment_cross(&p, &Mat::identity(3, 3), &p, &Mat::identity(2, 2));
        assert_eq!(c, kron(&p, &p) * 6.0);
        let z = fourth_moment_cross(
            &Mat::zeros(2, 2),
            &Mat::identity(2, 2),
            &p,
            &Mat::identity(2, 2),
        );
        assert_eq!(z, Mat::zeros(4, 4));
    }

    #[test]
    fn s_single_node_is_same_node_moment() {
        let layout = InterestLayout::uniform(1, 1, &[], 0, 2, 2).unwrap();
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 0.7,
                alpha: 0.4,
            }],
            1e-3,
        )
        .unwrap();
        let s = build_s(&layout, &stats, DEFAULT_MEM_CAP).unwrap();
        assert_eq!(s, fourth_moment_same(stats.psi(0), stats.omega(0)).unwrap());
    }

    #[test]
    fn s_two_scalar_nodes() {
        let layout = InterestLayout::uniform(2, 0, &[], 0, 1, 1).unwrap();
        let (a, b) = (2.0, 0.5);
        let stats = RegressorStats::new(
            &layout,
            vec![Mat::from_element(1, 1, a), Mat::from_element(1, 1, b)],
            vec![Mat::identity(1, 1); 2],
            vec![Mat::zeros(1, 1); 2],
        )
        .unwrap();
        let s = build_s(&layout, &stats, DEFAULT_MEM_CAP).unwrap();
        let diag: Vec<f64> = s.diagonal().iter().copied().collect();
        assert_eq!(diag, vec![3.0 * a * a, a * b, a * b, 3.0 * b * b]);
        assert_eq!(s.iter().filter(|v| **v != 0.0).count(), 4);
    }

    #[test]
    fn s_matches_isserlis_oracle_and_is_psd() {
        let layout = InterestLayout::uniform(3, 1, &[vec![0, 2]], 1, 1, 2).unwrap();
        let params = [
            ArParams {
                sigma_u2: 0.6,
                alpha: 0.3,
            },
            ArParams {
                sigma_u2: 1.1,
                alpha: 0.5,
            },
            ArParams {
                sigma_u2: 0.8,
                alpha: 0.2,
            },
        ];
        let stats = RegressorStats::ar1(&layout, &params, 1e-3).unwrap();
        let s = build_s(&layout, &stats, DEFAULT_MEM_CAP).unwrap();
        let oracle = s_oracle(&layout, &stats);
        assert!((&s - &oracle).amax() < 1e-12);
        assert!((&s - s.transpose()).amax() < 1e-12);
        let min = s.symmetric_eigen().eigenvalues.min();
        assert!(min > -1e-10, "{min}");
    }

    #[test]
    fn s_on_reduced_layout_is_symmetric_psd() {
        let (layout, _, stats) = reduced();
        let s = build_s(&layout, &stats, DEFAULT_MEM_CAP).unwrap();
        assert!((&s - s.transpose()).amax() < 1e-12);
        let scale = s.amax();
        assert!(s.symmetric_eigen().eigenvalues.min() > -1e-10 * scale);
    }

    #[test]
    fn memory_cap_enforced() {
        let layout = validation_layout();
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 0.5,
                alpha: 0.5,
            }; 10],
            1e-3,
        )
        .unwrap();
        assert!(matches!(
            build_s(&layout, &stats, 50),
            Err(Error::MemoryCap { dim: 73, cap: 50 })
        ));
    }

    #[test]
    fn single_node_mean_matrix_is_lms() {
        let layout = InterestLayout::uniform(1, 0, &[], 0, 3, 2).unwrap();
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 0.5,
                alpha: 0.5,
            }],
            1e-3,
        )
        .unwrap();
        let m = MomentSet::new(&layout, &stats, &[0.05]).unwrap();
        let id = Mat::identity(3, 3);
        let b = mean_matrix(&id, &id, &m);
        assert_eq!(b, &id - stats.second_moment(0) * 0.05);
    }

    #[test]
    fn zero_step_mean_matrix_is_stochastic_product() {
        let layout = validation_layout();
        let mut edges: Vec<_> = (0..9).map(|k| (k, k + 1)).collect();
        edges.extend([(0, 9), (0, 2), (6, 8)]);
        let t = Topology::from_edges(10, &edges).unwrap();
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 0.5,
                alpha: 0.5,
            }; 10],
            1e-3,
        )
        .unwrap();
        let p = uniform_policy(Mode::General, &t, &layout);
        let a = extend_policy_direct(&p.a, &layout);
        let c = extend_policy_direct(&p.c, &layout);
        let m = MomentSet::new(&layout, &stats, &[0.0; 10]).unwrap();
        let b = mean_matrix(&a, &c, &m);
        assert_eq!(b, &a * &c);
        // eigenvalue 1 is highly repeated, so the eigensolve is only accurate to ~1e-10
        let rho = spectral_radius(&b).unwrap();
        assert!(rho <= 1.0 + 1e-8, "{rho}");
    }

    #[test]
    fn stability_bound_cases() {
        let layout = InterestLayout::uniform(1, 0, &[], 0, 2, 1).unwrap();
        let stats = RegressorStats::new(
            &layout,
            vec![Mat::identity(2, 2) * 4.0],
            vec![Mat::identity(1, 1)],
            vec![Mat::zeros(1, 1)],
        )
        .unwrap();
        assert_eq!(stability_bound(&layout, &stats, 0).unwrap(), 0.5);

        // AR(1) with σ² = 0.5, α = 0.5, M = 3, L = 2
        let layout = InterestLayout::uniform(1, 0, &[], 0, 3, 2).unwrap();
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 0.5,
                alpha: 0.5,
            }],
            1e-3,
        )
        .unwrap();
        let r = Mat::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
        // characteristic roots of r: 0.75 and (9 ± √33)/8
        let lmax = (9.0 + 33f64.sqrt()) / 8.0;
        assert!((r.symmetric_eigen().eigenvalues.max() - lmax).abs() < 1e-12);
        assert!((stability_bound(&layout, &stats, 0).unwrap() - 2.0 / lmax).abs() < 1e-12);

        let stats = RegressorStats::new(
            &layout,
            vec![Mat::zeros(3, 3)],
            vec![Mat::identity(2, 2)],
            vec![Mat::zeros(2, 2)],
        )
        .unwrap();
        assert!(stability_bound(&layout, &stats, 0).is_err());
    }

    #[test]
    fn stability_bound_uses_diagonal_blocks_only() {
        let layout = InterestLayout::uniform(1, 1, &[], 0, 1, 1).unwrap();
        let psi = Mat::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let stats = RegressorStats::new(
            &layout,
            vec![psi],
            vec![Mat::identity(1, 1)],
            vec![Mat::zeros(1, 1)],
        )
        .unwrap();
        assert_eq!(stability_bound(&layout, &stats, 0).unwrap(), 2.0);
    }

    #[test]
    fn g_reductions() {
        let (layout, _, stats) = reduced();
        let m0 = MomentSet::new(&layout, &stats, &[0.0; 6]).unwrap();
        let n = layout.total_dim();
        assert_eq!(build_g(&m0, None), Mat::identity(n * n, n * n));

        let s = build_s(&layout, &stats, DEFAULT_MEM_CAP).unwrap();
        let diff = |mu: f64| {
            let m = MomentSet::new(&layout, &stats, &[mu; 6]).unwrap();
            (build_g(&m, Some(&s)) - build_g(&m, None)).norm()
        };
        let ratio = diff(1e-2) / diff(1e-3);
        assert!((ratio - 100.0).abs() < 1e-6, "{ratio}");

        let m = MomentSet::new(&layout, &stats, &[0.01; 6]).unwrap();
        let g = build_g(&m, Some(&s));
        assert!((&g - g.transpose()).amax() < 1e-15);
    }

    #[test]
    fn identity_policy_gives_f_equal_g() {
        let (layout, _, stats) = reduced();
        let m = MomentSet::new(&layout, &stats, &[0.01; 6]).unwrap();
        let g = build_g(&m, None);
        let id = Mat::identity(layout.total_dim(), layout.total_dim());
        assert_eq!(build_f(&id, &id, g.clone()).unwrap(), g);
    }

    #[test]
    fn f_matches_explicit_kronecker() {
        let (layout, t, stats) = reduced();
        let p = uniform_policy(Mode::General, &t, &layout);
        let a = extend_policy_direct(&p.a, &layout);
        let c = extend_policy_direct(&p.c, &layout);
        let m = MomentSet::new(&layout, &stats, &[0.01; 6]).unwrap();
        let g = build_g(&m, None);
        let explicit =
            kron(&c.transpose(), &c.transpose()) * &g * kron(&a.transpose(), &a.transpose());
        let f = build_f(&a, &c, g).unwrap();
        assert!((f - explicit).amax() < 1e-13);
    }

    #[test]
    fn reduced_layout_is_mean_square_stable() {
        let (layout, t, stats) = reduced();
        for mode in [Mode::Atc, Mode::Cta] {
            let p = uniform_policy(mode, &t, &layout);
            let r = steady_state(
                &layout,
                &stats,
                &p,
                &[0.01; 6],
                TheoryOptions {
                    fourth_order: true,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.rho_f < 1.0);
            assert!(r.msd.iter().chain(&r.emse).all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn scalar_chain_matches_closed_form() {
        // N = 1, M = 1, L = 1, σ_u² = 1: F = 1 − 2μ + 3μ², b = μ² σ_v²
        let layout = InterestLayout::uniform(1, 0, &[], 0, 1, 1).unwrap();
        let sv = 1e-3;
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 1.0,
                alpha: 0.0,
            }],
            sv,
        )
        .unwrap();
        let mu = 0.01;
        let id = Weights::identity(&layout);
        let p = CombinationPolicy::atc(id, &layout);
        let r = steady_state(
            &layout,
            &stats,
            &p,
            &[mu],
            TheoryOptions {
                fourth_order: true,
                ..Default::default()
            },
        )
        .unwrap();
        let f = 1.0 - 2.0 * mu + 3.0 * mu * mu;
        let expect = mu * mu * sv / (1.0 - f);
        assert!((r.f[(0, 0)] - f).abs() < 1e-15);
        assert!((r.msd[0] - expect).abs() < 1e-12 * expect.max(1.0));
        assert!((r.emse[0] - expect).abs() < 1e-12 * expect.max(1.0));
    }

    #[test]
    fn selections_are_additive() {
        let (layout, t, stats) = reduced();
        let p = uniform_policy(Mode::Atc, &t, &layout);
        let r = steady_state(&layout, &stats, &p, &[0.02; 6], TheoryOptions::default()).unwrap();
        let mean = r.msd.iter().sum::<f64>() / 6.0;
        assert!((r.msd_net - mean).abs() < 1e-15 * mean.max(1.0) + 1e-18);
        for k in 0..6 {
            let sum: f64 = r.msd_block[k].iter().map(|b| b.value).sum();
            assert!((sum - r.msd[k]).abs() < 1e-12 * r.msd[k]);
        }
        assert!(r.msd_block(1, BlockId::Common(0)).is_some());
        assert!(r.msd_block(0, BlockId::Common(0)).is_none());
    }

    #[test]
    fn selection_vector_picks_node_block() {
        let layout = InterestLayout::uniform(2, 1, &[], 0, 1, 1).unwrap();
        let m1 = msd_selection(&layout, 1).unwrap();
        let sel = crate::blockmat::unvectorize(&m1, 4, 4).unwrap();
        let mut expect = Mat::zeros(4, 4);
        expect[(2, 2)] = 1.0;
        expect[(3, 3)] = 1.0;
        assert_eq!(sel, expect);
    }

    #[test]
    fn unstable_step_reports_rho() {
        let layout = InterestLayout::uniform(3, 1, &[], 0, 1, 2).unwrap();
        let stats = RegressorStats::ar1(
            &layout,
            &[ArParams {
                sigma_u2: 1.0,
                alpha: 0.3,
            }; 3],
            1e-3,
        )
        .unwrap();
        let p = uniform_policy(Mode::Atc, &ring(3), &layout);
        let r = steady_state(
            &layout,
            &stats,
            &p,
            &[2.0; 3],
            TheoryOptions {
                fourth_order: true,
                ..Default::default()
            },
        );
        match r {
            Err(Error::MeanSquareUnstable { rho }) => assert!(rho >= 1.0),
            other => panic!("{other:?}"),
        }
    }
}
