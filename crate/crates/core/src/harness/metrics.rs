//! Per-step error metrics and their accumulation over Monte Carlo runs.

use serde::Serialize;

use crate::blockmat::{Mat, Vector};
use crate::scenario::{BlockId, InterestLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Msd,
    Emse,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Msd => "msd",
            Metric::Emse => "emse",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScopeLabel {
    pub metric: Metric,
    /// `net`, a block name averaged over its owners, `node{k}` or
    /// `node{k}/{block}` (1-based `k`).
    pub scope: String,
}

#[derive(Debug, Clone, Copy)]
enum Scope {
    Net,
    Block(BlockId),
    Node(usize),
    NodeBlock(usize, BlockId),
}

/// The fixed list of quantities recorded every step.
#[derive(Debug, Clone)]
pub(crate) struct ScopeSet {
    entries: Vec<(Metric, Scope)>,
    labels: Vec<ScopeLabel>,
}

pub(crate) struct StepValues {
    pub values: Vec<f64>,
    /// Largest block norm, for divergence detection.
    pub block_max: f64,
}

impl ScopeSet {
    pub fn new(layout: &InterestLayout) -> Self {
        let mut entries = vec![(Metric::Msd, Scope::Net), (Metric::Emse, Scope::Net)];
        if layout.global_size() > 0 {
            entries.push((Metric::Msd, Scope::Block(BlockId::Global)));
        }
        for j in 0..layout.num_clusters() {
            entries.push((Metric::Msd, Scope::Block(BlockId::Common(j))));
        }
        if (0..layout.nodes()).any(|k| layout.local_size(k) > 0) {
            entries.push((Metric::Msd, Scope::Block(BlockId::Local)));
        }
        for k in 0..layout.nodes() {
            entries.push((Metric::Msd, Scope::Node(k)));
            entries.push((Metric::Emse, Scope::Node(k)));
            for (block, r) in layout.node_blocks(k) {
                if !r.is_empty() {
                    entries.push((Metric::Msd, Scope::NodeBlock(k, block)));
                }
            }
        }
        let labels = entries
            .iter()
            .map(|&(metric, s)| ScopeLabel {
                metric,
                scope: match s {
                    Scope::Net => "net".into(),
                    Scope::Block(b) => b.to_string(),
                    Scope::Node(k) => format!("node{}", k + 1),
                    Scope::NodeBlock(k, b) => format!("node{}/{b}", k + 1),
                },
            })
            .collect();
        Self { entries, labels }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn labels(&self) -> &[ScopeLabel] {
        &self.labels
    }

    /// Evaluates every scope for the node-wise error `err`. EMSE uses the
    /// independent regressors `fresh`, one per node.
    pub(crate) fn evaluate(
        &self,
        layout: &InterestLayout,
        err: &Vector,
        fresh: &[Mat],
    ) -> StepValues {
        let n = layout.nodes();
        let mut node_msd = vec![0.0; n];
        let mut node_emse = vec![0.0; n];
        let mut node_block: Vec<Vec<(BlockId, f64)>> = Vec::with_capacity(n);
        let mut block_max: f64 = 0.0;
        for k in 0..n {
            let e = err.rows_range(layout.node_range(k));
            node_msd[k] = e.norm_squared();
            node_emse[k] = (&fresh[k] * e).norm_squared();
            let blocks: Vec<(BlockId, f64)> = layout
                .node_blocks(k)
                .into_iter()
                .map(|(b, r)| (b, e.rows_range(r).norm_squared()))
                .collect();
            for &(_, v) in &blocks {
                block_max = block_max.max(v.sqrt());
            }
            node_block.push(blocks);
        }
        if block_max.is_nan() || node_msd.iter().any(|v| !v.is_finite()) {
            block_max = f64::INFINITY;
        }
        let block_of = |k: usize, b: BlockId| {
            node_block[k]
                .iter()
                .find(|(x, _)| *x == b)
                .map(|&(_, v)| v)
                .expect("node owns block")
        };
        let values = self
            .entries
            .iter()
            .map(|&(metric, s)| match (metric, s) {
                (Metric::Msd, Scope::Net) => node_msd.iter().sum::<f64>() / n as f64,
                (Metric::Emse, Scope::Net) => node_emse.iter().sum::<f64>() / n as f64,
                (_, Scope::Block(b)) => {
                    let owners: Vec<usize> = match b {
                        BlockId::Common(j) => layout.cluster_members(j).to_vec(),
                        _ => (0..n).collect(),
                    };
                    owners.iter().map(|&k| block_of(k, b)).sum::<f64>() / owners.len() as f64
                }
                (Metric::Msd, Scope::Node(k)) => node_msd[k],
                (Metric::Emse, Scope::Node(k)) => node_emse[k],
                (_, Scope::NodeBlock(k, b)) => block_of(k, b),
            })
            .collect();
        StepValues { values, block_max }
    }
}

/// One run of one algorithm: every scope at every step, `t = 0..=T`.
#[derive(Debug, Clone)]
pub(crate) struct StepRecord {
    scopes: usize,
    values: Vec<f64>,
    errors: Option<Vec<Vector>>,
    pub diverged: bool,
}

impl StepRecord {
    pub fn new(iterations: usize, scopes: usize, track: bool) -> Self {
        Self {
            scopes,
            values: Vec::with_capacity((iterations + 1) * scopes),
            errors: track.then(|| Vec::with_capacity(iterations + 1)),
            diverged: false,
        }
    }

    pub fn push(&mut self, values: &[f64], err: &Vector) {
        debug_assert_eq!(values.len(), self.scopes);
        self.values.extend_from_slice(values);
        if let Some(e) = self.errors.as_mut() {
            e.push(err.clone());
        }
    }
}

/// Running sums over runs, mergeable in a fixed order.
#[derive(Debug, Clone)]
pub(crate) struct Accumulator {
    steps: usize,
    scopes: usize,
    window: usize,
    runs: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    steady_sum: Vec<f64>,
    steady_sq: Vec<f64>,
    mean_sum: Option<Vec<Vector>>,
    mean_sq: Option<Vec<Vector>>,
    diverged: Vec<usize>,
}

impl Accumulator {
    pub fn new(iterations: usize, window: usize, scopes: usize, mean_dim: Option<usize>) -> Self {
        let steps = iterations + 1;
        Self {
            steps,
            scopes,
            window,
            runs: 0,
            sum: vec![0.0; steps * scopes],
            sum_sq: vec![0.0; steps * scopes],
            steady_sum: vec![0.0; scopes],
            steady_sq: vec![0.0; scopes],
            mean_sum: mean_dim.map(|d| vec![Vector::zeros(d); steps]),
            mean_sq: mean_dim.map(|d| vec![Vector::zeros(d); steps]),
            diverged: Vec::new(),
        }
    }

    pub fn add_run(&mut self, run: usize, rec: StepRecord) {
        if rec.diverged {
            self.diverged.push(run);
            return;
        }
        debug_assert_eq!(rec.values.len(), self.steps * self.scopes);
        self.runs += 1;
        for (i, v) in rec.values.iter().enumerate() {
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
        }
        for s in 0..self.scopes {
            let w: f64 = (self.steps - self.window..self.steps)
                .map(|t| rec.values[t * self.scopes + s])
                .sum::<f64>()
                / self.window as f64;
            self.steady_sum[s] += w;
            self.steady_sq[s] += w * w;
        }
        if let (Some(ms), Some(mq), Some(errs)) =
            (&mut self.mean_sum, &mut self.mean_sq, rec.errors)
        {
            for ((s, q), e) in ms.iter_mut().zip(mq.iter_mut()).zip(errs) {
                *q += e.component_mul(&e);
                *s += e;
            }
        }
    }

    pub fn merge(&mut self, other: Accumulator) {
        self.runs += other.runs;
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.sum, &other.sum);
        add(&mut self.sum_sq, &other.sum_sq);
        add(&mut self.steady_sum, &other.steady_sum);
        add(&mut self.steady_sq, &other.steady_sq);
        if let (Some(a), Some(b)) = (&mut self.mean_sum, other.mean_sum) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        if let (Some(a), Some(b)) = (&mut self.mean_sq, other.mean_sq) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.diverged.extend(other.diverged);
    }

    pub fn finish(self, algo: String, scopes: &ScopeSet) -> MetricsSeries {
        let r = self.runs as f64;
        let stat = |s: f64, q: f64| -> (f64, f64) {
            if self.runs == 0 {
                return (f64::NAN, f64::NAN);
            }
            let m = s / r;
            let se = if self.runs > 1 {
                ((q - r * m * m).max(0.0) / (r - 1.0) / r).sqrt()
            } else {
                f64::NAN
            };
            (m, se)
        };
        let mut mean = vec![Vec::with_capacity(self.steps); self.scopes];
        let mut stderr = vec![Vec::with_capacity(self.steps); self.scopes];
        for t in 0..self.steps {
            for s in 0..self.scopes {
                let i = t * self.scopes + s;
                let (m, se) = stat(self.sum[i], self.sum_sq[i]);
                mean[s].push(m);
                stderr[s].push(se);
            }
        }
        let steady = scopes
            .labels()
            .iter()
            .enumerate()
            .map(|(s, label)| {
                let (value, stderr) = stat(self.steady_sum[s], self.steady_sq[s]);
                SteadyValue {
                    metric: label.metric,
                    scope: label.scope.clone(),
                    value,
                    stderr,
                }
            })
            .collect();
        let mean_error = match (self.mean_sum, self.mean_sq) {
            (Some(ms), Some(mq)) if self.runs > 0 => Some(
                ms.into_iter()
                    .zip(mq)
                    .map(|(s, q)| {
                        let m = s / r;
                        let var = (q / r - m.component_mul(&m)).map(|v| v.max(0.0));
                        let se = if self.runs > 1 {
                            var.map(|v| (v * r / (r - 1.0) / r).sqrt())
                        } else {
                            Vector::from_element(m.len(), f64::NAN)
                        };
                        MeanError {
                            mean: m,
                            stderr: se,
                        }
                    })
                    .collect(),
            ),
            _ => None,
        };
        MetricsSeries {
            algo,
            labels: scopes.labels().to_vec(),
            runs_used: self.runs,
            diverged_runs: self.diverged,
            mean,
            stderr,
            steady,
            mean_error,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SteadyValue {
    pub metric: Metric,
    pub scope: String,
    pub value: f64,
    pub stderr: f64,
}

/// Run average of the error vector and its standard error at one step.
#[derive(Debug, Clone)]
pub struct MeanError {
    pub mean: Vector,
    pub stderr: Vector,
}

/// Learning curves and steady-state values of one algorithm.
#[derive(Debug, Clone)]
pub struct MetricsSeries {
    pub algo: String,
    pub labels: Vec<ScopeLabel>,
    /// Runs that finished without diverging.
    pub runs_used: usize,
    pub diverged_runs: Vec<usize>,
    /// `mean[scope][t]`, `t = 0..=T`.
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    /// Trailing-window averages, mean and standard error over runs.
    pub steady: Vec<SteadyValue>,
    /// Present when mean tracking is enabled; indexed by `t = 0..=T`.
    pub mean_error: Option<Vec<MeanError>>,
}

impl MetricsSeries {
    fn index(&self, metric: Metric, scope: &str) -> Option<usize> {
        self.labels
            .iter()
            .position(|l| l.metric == metric && l.scope == scope)
    }

    pub fn curve(&self, metric: Metric, scope: &str) -> Option<&[f64]> {
        self.index(metric, scope).map(|i| self.mean[i].as_slice())
    }

    pub fn steady(&self, metric: Metric, scope: &str) -> Option<&SteadyValue> {
        self.index(metric, scope).map(|i| &self.steady[i])
    }
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single-node layout with six scopes; tests fill the first two.
    fn small() -> ScopeSet {
        ScopeSet::new(&InterestLayout::uniform(1, 1, &[], 1, 0, 1).unwrap())
    }

    fn record(values: &[[f64; 2]], width: usize) -> StepRecord {
        let mut r = StepRecord::new(values.len() - 1, width, false);
        for v in values {
            let mut row = vec![0.0; width];
            row[..2].copy_from_slice(v);
            r.push(&row, &Vector::zeros(1));
        }
        r
    }

    #[test]
    fn scope_labels() {
        let layout = InterestLayout::uniform(3, 1, &[vec![0, 1]], 1, 1, 1).unwrap();
        let s = ScopeSet::new(&layout);
        let names: Vec<String> = s
            .labels()
            .iter()
            .map(|l| format!("{}:{}", l.metric, l.scope))
            .collect();
        assert_eq!(
            &names[..5],
            [
                "msd:net",
                "emse:net",
                "msd:global",
                "msd:common1",
                "msd:local"
            ]
        );
        assert!(names.contains(&"msd:node1/common1".to_string()));
        assert!(!names.contains(&"msd:node3/common1".to_string()));
    }

    #[test]
    fn evaluate_matches_hand_computation() {
        let layout = InterestLayout::uniform(2, 1, &[vec![1]], 1, 1, 1).unwrap();
        let s = ScopeSet::new(&layout);
        // node 1: [g, l], node 2: [g, c, l]
        let err = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let fresh = vec![
            Mat::from_row_slice(1, 2, &[1.0, 1.0]),
            Mat::from_row_slice(1, 3, &[0.0, 1.0, 0.0]),
        ];
        let v = s.evaluate(&layout, &err, &fresh);
        let get = |name: &str, m: Metric| {
            let i = s
                .labels()
                .iter()
                .position(|l| l.scope == name && l.metric == m)
                .unwrap();
            v.values[i]
        };
        assert_eq!(get("net", Metric::Msd), (5.0 + 50.0) / 2.0);
        assert_eq!(get("net", Metric::Emse), (9.0 + 16.0) / 2.0);
        assert_eq!(get("global", Metric::Msd), (1.0 + 9.0) / 2.0);
        assert_eq!(get("common1", Metric::Msd), 16.0);
        assert_eq!(get("local", Metric::Msd), (4.0 + 25.0) / 2.0);
        assert_eq!(get("node2/local", Metric::Msd), 25.0);
        assert_eq!(v.block_max, 5.0);
    }

    #[test]
    fn accumulator_statistics() {
        let scopes = small();
        let w = scopes.len();
        let mut acc = Accumulator::new(2, 1, w, None);
        acc.add_run(0, record(&[[1.0, 0.0], [2.0, 0.0], [3.0, 1.0]], w));
        let mut other = Accumulator::new(2, 1, w, None);
        other.add_run(1, record(&[[1.0, 0.0], [4.0, 0.0], [5.0, 3.0]], w));
        let mut bad = record(&[[0.0, 0.0]], w);
        bad.diverged = true;
        other.add_run(2, bad);
        acc.merge(other);
        let s = acc.finish("x".into(), &scopes);
        assert_eq!(s.runs_used, 2);
        assert_eq!(s.diverged_runs, vec![2]);
        assert_eq!(s.mean[0], vec![1.0, 3.0, 4.0]);
        assert_eq!(s.stderr[0][0], 0.0);
        // sample std of {2, 4} is sqrt(2); SE = 1
        assert!((s.stderr[0][1] - 1.0).abs() < 1e-12);
        // window of one step: steady equals the last value
        assert_eq!(s.steady[1].value, 2.0);
        assert!((s.steady[1].stderr - 1.0).abs() < 1e-12);
        assert_eq!(s.steady(Metric::Emse, "net").unwrap().value, 2.0);
    }

    #[test]
    fn mean_error_tracking() {
        let scopes = small();
        let w = scopes.len();
        let mut acc = Accumulator::new(0, 1, w, Some(2));
        for (i, e) in [[1.0, 0.0], [3.0, 2.0]].iter().enumerate() {
            let mut r = StepRecord::new(0, w, true);
            r.push(&vec![0.0; w], &Vector::from_row_slice(e));
            acc.add_run(i, r);
        }
        let s = acc.finish("x".into(), &scopes);
        let m = &s.mean_error.unwrap()[0];
        assert_eq!(m.mean, Vector::from_row_slice(&[2.0, 1.0]));
        assert!((m.stderr[0] - 1.0).abs() < 1e-12);
    }
}
