use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BlockId, InterestLayout};
use crate::blockmat::{psd_factor, Mat, Vector};
use crate::error::{Error, Result};

/// One step of data at one node: `d = U w_k° + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub d: Vector,
    pub u: Mat,
}

/// `w°`, `ς_j°` and `ξ_k°`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub global: Vector,
    pub common: Vec<Vector>,
    pub local: Vec<Vector>,
}

impl GroundTruth {
    pub fn new(
        layout: &InterestLayout,
        global: Vector,
        common: Vec<Vector>,
        local: Vec<Vector>,
    ) -> Result<Self> {
        let t = Self {
            global,
            common,
            local,
        };
        t.check(layout)?;
        Ok(t)
    }

    /// Standard normal entries.
    pub fn draw<R: Rng + ?Sized>(layout: &InterestLayout, rng: &mut R) -> Self {
        let mut normal = |n: usize| Vector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let global = normal(layout.global_size());
        let common = (0..layout.num_clusters())
            .map(|j| normal(layout.common_size(j)))
            .collect();
        let local = (0..layout.nodes())
            .map(|k| normal(layout.local_size(k)))
            .collect();
        Self {
            global,
            common,
            local,
        }
    }

    pub fn check(&self, layout: &InterestLayout) -> Result<()> {
        if self.global.len() != layout.global_size() {
            return Err(Error::dim(
                "global truth",
                layout.global_size(),
                self.global.len(),
            ));
        }
        if self.common.len() != layout.num_clusters() {
            return Err(Error::dim(
                "common truths",
                layout.num_clusters(),
                self.common.len(),
            ));
        }
        for (j, c) in self.common.iter().enumerate() {
            if c.len() != layout.common_size(j) {
                return Err(Error::dim("common truth", layout.common_size(j), c.len()));
            }
        }
        if self.local.len() != layout.nodes() {
            return Err(Error::dim("local truths", layout.nodes(), self.local.len()));
        }
        for (k, l) in self.local.iter().enumerate() {
            if l.len() != layout.local_size(k) {
                return Err(Error::dim("local truth", layout.local_size(k), l.len()));
            }
        }
        Ok(())
    }

    pub fn block(&self, block: BlockId, node: usize) -> &Vector {
        match block {
            BlockId::Global => &self.global,
            BlockId::Common(j) => &self.common[j],
            BlockId::Local => &self.local[node],
        }
    }

    /// `w_k°` in node-wise block order.
    pub fn node_vector(&self, layout: &InterestLayout, k: usize) -> Vector {
        let mut out = Vector::zeros(layout.node_dim(k));
        for (b, r) in layout.node_blocks(k) {
            out.rows_mut(r.start, r.len()).copy_from(self.block(b, k));
        }
        out
    }

    /// All `w_k°` stacked (length `M̆`).
    pub fn network_vector(&self, layout: &InterestLayout) -> Vector {
        let mut out = Vector::zeros(layout.total_dim());
        for k in 0..layout.nodes() {
            let r = layout.node_range(k);
            out.rows_mut(r.start, r.len())
                .copy_from(&self.node_vector(layout, k));
        }
        out
    }

    /// `w̄°` (length `M̄`).
    pub fn augmented_vector(&self, layout: &InterestLayout) -> Vector {
        let mut out = Vector::zeros(layout.augmented_dim());
        let mut put =
            |r: std::ops::Range<usize>, v: &Vector| out.rows_mut(r.start, r.len()).copy_from(v);
        put(layout.augmented_range(BlockId::Global, 0), &self.global);
        for j in 0..layout.num_clusters() {
            put(
                layout.augmented_range(BlockId::Common(j), 0),
                &self.common[j],
            );
        }
        for k in 0..layout.nodes() {
            put(layout.augmented_range(BlockId::Local, k), &self.local[k]);
        }
        out
    }
}

/// Matrix-normal regressor statistics per node: `vec(U_k) ~ N(0, Ψ_k ⊗ Ω_k)`
/// and noise covariance `R_v,k`.
#[derive(Debug, Clone)]
pub struct RegressorStats {
    psi: Vec<Mat>,
    omega: Vec<Mat>,
    rv: Vec<Mat>,
    psi_factor: Vec<Mat>,
    omega_factor: Vec<Mat>,
    rv_factor: Vec<Mat>,
}

impl RegressorStats {
    pub fn new(
        layout: &InterestLayout,
        psi: Vec<Mat>,
        omega: Vec<Mat>,
        rv: Vec<Mat>,
    ) -> Result<Self> {
        let n = layout.nodes();
        for (name, v) in [("psi", &psi), ("omega", &omega), ("rv", &rv)] {
            if v.len() != n {
                return Err(Error::Config(format!(
                    "{name}: expected {n} matrices, got {}",
                    v.len()
                )));
            }
        }
        for k in 0..n {
            let m = layout.node_dim(k);
            let l = layout.obs_len(k);
            if psi[k].shape() != (m, m) {
                return Err(Error::dim("psi", m, psi[k].nrows()));
            }
            if omega[k].shape() != (l, l) {
                return Err(Error::dim("omega", l, omega[k].nrows()));
            }
            if rv[k].shape() != (l, l) {
                return Err(Error::dim("noise covariance", l, rv[k].nrows()));
            }
        }
        let factor = |ms: &[Mat]| ms.iter().map(psd_factor).collect::<Result<Vec<_>>>();
        Ok(Self {
            psi_factor: factor(&psi)?,
            omega_factor: factor(&omega)?,
            rv_factor: factor(&rv)?,
            psi,
            omega,
            rv,
        })
    }

    /// AR(1) column correlation `Ψ_k[a,b] = σ_u,k² α_k^|a-b|`, `Ω_k = I`, `R_v = σ_v² I`.
    pub fn ar1(layout: &InterestLayout, params: &[ArParams], noise_var: f64) -> Result<Self> {
        if params.len() != layout.nodes() {
            return Err(Error::dim("AR parameters", layout.nodes(), params.len()));
        }
        let psi = (0..layout.nodes())
            .map(|k| ar1_toeplitz(layout.node_dim(k), params[k].sigma_u2, params[k].alpha))
            .collect();
        let omega = (0..layout.nodes())
            .map(|k| Mat::identity(layout.obs_len(k), layout.obs_len(k)))
            .collect();
        let rv = (0..layout.nodes())
            .map(|k| Mat::identity(layout.obs_len(k), layout.obs_len(k)) * noise_var)
            .collect();
        Self::new(layout, psi, omega, rv)
    }

    pub fn psi(&self, k: usize) -> &Mat {
        &self.psi[k]
    }

    pub fn omega(&self, k: usize) -> &Mat {
        &self.omega[k]
    }

    pub fn rv(&self, k: usize) -> &Mat {
        &self.rv[k]
    }

    pub fn nodes(&self) -> usize {
        self.psi.len()
    }

    /// `R_{U_k} = E UᵀU = Tr(Ω_k) Ψ_k`.
    pub fn second_moment(&self, k: usize) -> Mat {
        &self.psi[k] * self.omega[k].trace()
    }

    /// `E‖U_k w‖² / E‖v_k‖²`.
    pub fn snr(&self, k: usize, w: &Vector) -> f64 {
        self.omega[k].trace() * w.dot(&(&self.psi[k] * w)) / self.rv[k].trace()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArParams {
    pub sigma_u2: f64,
    pub alpha: f64,
}

pub fn ar1_toeplitz(m: usize, sigma_u2: f64, alpha: f64) -> Mat {
    Mat::from_fn(m, m, |a, b| sigma_u2 * alpha.powi(a.abs_diff(b) as i32))
}

/// How per-node AR(1) parameters are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArDraw {
    /// Range for `σ_u` (standard deviation).
    pub sigma_u: (f64, f64),
    pub alpha: (f64, f64),
    /// When set, `(σ_u, α)` are redrawn until the node SNR falls in this dB range.
    pub snr_db: Option<(f64, f64)>,
    pub noise_var: f64,
}

const MAX_SNR_ATTEMPTS: usize = 1_000_000;

/// Draws `(σ_u², α)` per node, rejecting draws outside the SNR band.
pub fn draw_ar_params<R: Rng + ?Sized>(
    layout: &InterestLayout,
    truth: &GroundTruth,
    spec: &ArDraw,
    rng: &mut R,
) -> Result<Vec<ArParams>> {
    let uniform = |rng: &mut R, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let mut out = Vec::with_capacity(layout.nodes());
    for k in 0..layout.nodes() {
        let w = truth.node_vector(layout, k);
        let mut found = None;
        for _ in 0..MAX_SNR_ATTEMPTS {
            let sigma_u = uniform(rng, spec.sigma_u);
            let alpha = uniform(rng, spec.alpha);
            let p = ArParams {
                sigma_u2: sigma_u * sigma_u,
                alpha,
            };
            let Some((lo, hi)) = spec.snr_db else {
                found = Some(p);
                break;
            };
            // Ω = I_L, R_v = σ_v² I_L: SNR = wᵀΨw / σ_v²
            let psi = ar1_toeplitz(w.len(), p.sigma_u2, p.alpha);
            let snr_db = 10.0 * (w.dot(&(&psi * &w)) / spec.noise_var).log10();
            if (lo..=hi).contains(&snr_db) {
                found = Some(p);
                break;
            }
        }
        out.push(found.ok_or_else(|| {
            Error::Config(format!(
                "node {}: no AR parameters reach the SNR band",
                k + 1
            ))
        })?);
    }
    Ok(out)
}

/// `U = Ω^{1/2} Z Ψ^{1/2}` with i.i.d. standard normal `Z`.
pub fn gen_regressor<R: Rng + ?Sized>(k: usize, stats: &RegressorStats, rng: &mut R) -> Mat {
    let l = stats.omega[k].nrows();
    let m = stats.psi[k].nrows();
    let z = Mat::from_fn(l, m, |_, _| rng.sample(StandardNormal));
    &stats.omega_factor[k] * z * stats.psi_factor[k].transpose()
}

pub fn gen_noise<R: Rng + ?Sized>(k: usize, stats: &RegressorStats, rng: &mut R) -> Vector {
    let l = stats.rv[k].nrows();
    let z = Vector::from_fn(l, |_, _| rng.sample(StandardNormal));
    &stats.rv_factor[k] * z
}

/// `d = U w_k° + v`.
pub fn gen_observation<R: Rng + ?Sized>(
    k: usize,
    truth: &GroundTruth,
    layout: &InterestLayout,
    stats: &RegressorStats,
    rng: &mut R,
) -> Observation {
    let u = gen_regressor(k, stats, rng);
    let v = gen_noise(k, stats, rng);
    let d = &u * truth.node_vector(layout, k) + v;
    Observation { d, u }
}
