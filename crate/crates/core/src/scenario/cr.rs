//! Cooperative spectrum sensing: secondary users estimate the aggregate PU
//! spectrum (global), common interferers (per cluster) and their own local
//! interferer, each expanded over Gaussian basis functions.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GroundTruth, InterestLayout, Observation};
use crate::blockmat::{Mat, Vector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrParams {
    /// Number of primary users `Q`.
    pub pus: usize,
    /// Number of basis functions `X`.
    pub bases: usize,
    pub sigma_b: f64,
    /// Frequency samples per observation `L`.
    pub channels: usize,
    pub taps: usize,
    /// Variance of each complex channel tap.
    pub tap_var: f64,
    /// Range of the per-link attenuation-noise standard deviation.
    pub attn_noise_std: (f64, f64),
    /// Range of the per-node measurement-noise standard deviation.
    pub z_std: (f64, f64),
    /// Weight of each of the two basis functions a PU occupies.
    pub pu_weight: f64,
    /// Weight of the single basis function an interferer occupies.
    pub interferer_weight: f64,
}

impl Default for CrParams {
    fn default() -> Self {
        Self {
            pus: 2,
            bases: 16,
            sigma_b: 0.05,
            channels: 80,
            taps: 3,
            tap_var: 0.25,
            attn_noise_std: (0.3, 1.25),
            z_std: (0.04, 0.16),
            pu_weight: 1.0,
            interferer_weight: 0.3,
        }
    }
}

/// Gaussian basis vector at `f`; entry `x` peaks at one on `centers[x]`.
pub fn cr_basis(f: f64, sigma_b: f64, centers: &[f64]) -> Vector {
    Vector::from_iterator(
        centers.len(),
        centers
            .iter()
            .map(|c| (-(f - c).powi(2) / (2.0 * sigma_b * sigma_b)).exp()),
    )
}

/// A drawn spectrum-sensing network. Channels are static; attenuation
/// estimates are perturbed afresh at every time step.
#[derive(Debug, Clone)]
pub struct CrScenario {
    params: CrParams,
    layout: InterestLayout,
    truth: GroundTruth,
    freqs: Vec<f64>,
    /// `L × X`, row `m` is `b_0(f_m)ᵀ`.
    basis: Mat,
    /// Per node, per source in block order: `p(f_m)` over the `L` samples.
    attenuation: Vec<Vec<Vector>>,
    attn_std: Vec<Vec<f64>>,
    z_std: Vec<f64>,
}

impl CrScenario {
    /// `clusters` lists, per common interferer, the nodes that sense it.
    pub fn draw<R: Rng + ?Sized>(
        params: CrParams,
        nodes: usize,
        clusters: &[Vec<usize>],
        rng: &mut R,
    ) -> Result<Self> {
        let x = params.bases;
        if params.pus == 0 || x == 0 || params.taps == 0 {
            return Err(Error::Config("pus, bases and taps must be positive".into()));
        }
        if params.sigma_b <= 0.0 {
            return Err(Error::Config("sigma_b must be positive".into()));
        }
        let layout =
            InterestLayout::uniform(nodes, params.pus * x, clusters, x, x, params.channels)?;
        for k in 0..nodes {
            let sources = params.pus + layout.interests(k).len() + 1;
            if params.channels <= sources * x {
                return Err(Error::Config(format!(
                    "node {}: {} channels do not exceed the {} unknowns",
                    k + 1,
                    params.channels,
                    sources * x
                )));
            }
        }

        let l = params.channels;
        let freqs: Vec<f64> = (0..l).map(|m| (m as f64 + 0.5) / l as f64).collect();
        let centers: Vec<f64> = (0..x).map(|i| (i as f64 + 0.5) / x as f64).collect();
        let mut basis = Mat::zeros(l, x);
        for (m, &f) in freqs.iter().enumerate() {
            basis.set_row(m, &cr_basis(f, params.sigma_b, &centers).transpose());
        }

        let mut global = Vector::zeros(params.pus * x);
        for q in 0..params.pus {
            let start = ((2 * q + 1) * x / (2 * params.pus)).saturating_sub(1);
            for b in start..(start + 2).min(x) {
                global[q * x + b] = params.pu_weight;
            }
        }
        let one_hot = |rng: &mut R| {
            let mut v = Vector::zeros(x);
            v[rng.random_range(0..x)] = params.interferer_weight;
            v
        };
        let common = (0..layout.num_clusters()).map(|_| one_hot(rng)).collect();
        let local = (0..nodes).map(|_| one_hot(rng)).collect();
        let truth = GroundTruth::new(&layout, global, common, local)?;

        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let tap_std = (params.tap_var / 2.0).sqrt();
        let mut attenuation = Vec::with_capacity(nodes);
        let mut attn_std = Vec::with_capacity(nodes);
        let mut z_std = Vec::with_capacity(nodes);
        for k in 0..nodes {
            let sources = params.pus + layout.interests(k).len() + 1;
            let mut per_node = Vec::with_capacity(sources);
            let mut stds = Vec::with_capacity(sources);
            for _ in 0..sources {
                let h: Vec<Complex64> = (0..params.taps)
                    .map(|_| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex64::new(re * tap_std, im * tap_std)
                    })
                    .collect();
                per_node.push(Vector::from_iterator(
                    l,
                    freqs.iter().map(|&f| channel_gain(&h, f)),
                ));
                stds.push(uniform(rng, params.attn_noise_std));
            }
            attenuation.push(per_node);
            attn_std.push(stds);
            z_std.push(uniform(rng, params.z_std));
        }

        Ok(Self {
            params,
            layout,
            truth,
            freqs,
            basis,
            attenuation,
            attn_std,
            z_std,
        })
    }

    pub fn params(&self) -> &CrParams {
        &self.params
    }

    pub fn layout(&self) -> &InterestLayout {
        &self.layout
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn basis(&self) -> &Mat {
        &self.basis
    }

    /// True attenuation of source `s` (block order) at node `k`.
    pub fn attenuation(&self, k: usize, s: usize) -> &Vector {
        &self.attenuation[k][s]
    }

    pub fn attn_noise_std(&self, k: usize) -> &[f64] {
        &self.attn_std[k]
    }

    pub fn z_std(&self, k: usize) -> f64 {
        self.z_std[k]
    }

    /// Disables attenuation-estimate noise and measurement noise.
    pub fn without_noise(mut self) -> Self {
        for s in &mut self.attn_std {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        self.z_std.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    /// Sets every channel to zero.
    pub fn with_zero_channels(mut self) -> Self {
        for per_node in &mut self.attenuation {
            per_node.iter_mut().for_each(|p| p.fill(0.0));
        }
        self
    }

    /// Row `m` of a regressor: `p(f_m) ⊗ b_0(f_m)`.
    fn regressor(&self, atten: &[Vector]) -> Mat {
        let x = self.params.bases;
        let l = self.params.channels;
        let mut u = Mat::zeros(l, atten.len() * x);
        for (s, p) in atten.iter().enumerate() {
            for m in 0..l {
                for b in 0..x {
                    u[(m, s * x + b)] = p[m] * self.basis[(m, b)];
                }
            }
        }
        u
    }
}

/// `|H(f)|²` for an FIR channel `H(f) = Σ_n h_n e^{-j2πfn}`.
fn channel_gain(h: &[Complex64], f: f64) -> f64 {
    h.iter()
        .enumerate()
        .map(|(n, &hn)| hn * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f * n as f64))
        .sum::<Complex64>()
        .norm_sqr()
}

/// Received PSD samples at node `k`: `d` uses the true attenuations, the
/// returned regressor uses noisy estimates of them.
pub fn cr_gen_observation<R: Rng + ?Sized>(
    k: usize,
    scen: &CrScenario,
    rng: &mut R,
) -> Observation {
    let true_p = &scen.attenuation[k];
    let noisy: Vec<Vector> = true_p
        .iter()
        .zip(&scen.attn_std[k])
        .map(|(p, &std)| {
            let n: f64 = rng.sample(StandardNormal);
            p.add_scalar(std * n)
        })
        .collect();
    let u_true = scen.regressor(true_p);
    let z = Normal::new(0.0, scen.z_std[k]).expect("finite noise std");
    let noise = Vector::from_fn(scen.params.channels, |_, _| z.sample(rng));
    let d = &u_true * scen.truth.node_vector(&scen.layout, k) + noise;
    Observation {
        d,
        u: scen.regressor(&noisy),
    }
}
