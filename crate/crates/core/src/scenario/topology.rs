use std::collections::VecDeque;
use std::fmt;

use serde::Serialize;

use super::InterestLayout;
use crate::error::{Error, Result};

/// Neighborhoods `N_k`, each including `k` itself, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Undirected graph from an edge list; self-loops are added for every node.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors: Vec<Vec<usize>> = (0..nodes).map(|k| vec![k]).collect();
        for &(a, b) in edges {
            if a >= nodes || b >= nodes {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) references a node outside 0..{nodes}"
                )));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Ok(Self { neighbors })
    }

    /// Raw neighbor lists, taken as given. Use [`validate_topology`] to check them.
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Self {
        let neighbors = neighbors
            .into_iter()
            .map(|mut n| {
                n.sort_unstable();
                n.dedup();
                n
            })
            .collect();
        Self { neighbors }
    }

    pub fn complete(nodes: usize) -> Self {
        Self {
            neighbors: (0..nodes).map(|_| (0..nodes).collect()).collect(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn is_neighbor(&self, k: usize, l: usize) -> bool {
        self.neighbors[k].binary_search(&l).is_ok()
    }

    /// `N_k ∩ C_j` for a member set.
    pub fn neighbors_in(&self, k: usize, members: &[usize]) -> Vec<usize> {
        self.neighbors[k]
            .iter()
            .copied()
            .filter(|l| members.contains(l))
            .collect()
    }

    /// Undirected edge list without self-loops, `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, n) in self.neighbors.iter().enumerate() {
            for &l in n {
                if k < l {
                    out.push((k, l));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TopologyDiagnostics {
    pub node_count_mismatch: Option<(usize, usize)>,
    pub out_of_range: Vec<(usize, usize)>,
    pub network_connected: bool,
    /// Clusters whose induced subgraph is disconnected.
    pub disconnected_clusters: Vec<usize>,
    pub missing_self_loops: Vec<usize>,
    /// Pairs `(k, l)` with `l ∈ N_k` but `k ∉ N_l`.
    pub asymmetric: Vec<(usize, usize)>,
}

impl TopologyDiagnostics {
    pub fn is_valid(&self) -> bool {
        self.node_count_mismatch.is_none()
            && self.out_of_range.is_empty()
            && self.network_connected
            && self.disconnected_clusters.is_empty()
            && self.missing_self_loops.is_empty()
            && self.asymmetric.is_empty()
    }
}

impl fmt::Display for TopologyDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "topology ok");
        }
        let mut first = true;
        let mut line = |f: &mut fmt::Formatter<'_>, s: String| -> fmt::Result {
            if !first {
                writeln!(f)?;
            }
            first = false;
            write!(f, "{s}")
        };
        if let Some((t, l)) = self.node_count_mismatch {
            line(f, format!("topology has {t} nodes, layout has {l}"))?;
        }
        for &(k, l) in &self.out_of_range {
            line(
                f,
                format!("node {} lists unknown neighbor {}", k + 1, l + 1),
            )?;
        }
        if !self.network_connected {
            line(f, "network graph is disconnected".into())?;
        }
        for &j in &self.disconnected_clusters {
            line(
                f,
                format!("cluster {} induces a disconnected subgraph", j + 1),
            )?;
        }
        for &k in &self.missing_self_loops {
            line(
                f,
                format!("node {} is missing from its own neighborhood", k + 1),
            )?;
        }
        for &(k, l) in &self.asymmetric {
            line(
                f,
                format!("node {} lists {} but not vice versa", k + 1, l + 1),
            )?;
        }
        Ok(())
    }
}

/// Connectivity of the graph and of every cluster-induced subgraph, plus
/// self-loop and symmetry checks.
pub fn validate_topology(t: &Topology, layout: &InterestLayout) -> TopologyDiagnostics {
    let n = t.nodes();
    let mut d = TopologyDiagnostics::default();
    if n != layout.nodes() {
        d.node_count_mismatch = Some((n, layout.nodes()));
        return d;
    }
    for k in 0..n {
        for &l in t.neighbors(k) {
            if l >= n {
                d.out_of_range.push((k, l));
            }
        }
    }
    if !d.out_of_range.is_empty() {
        return d;
    }
    for k in 0..n {
        if !t.is_neighbor(k, k) {
            d.missing_self_loops.push(k);
        }
        for &l in t.neighbors(k) {
            if !t.is_neighbor(l, k) {
                d.asymmetric.push((k, l));
            }
        }
    }
    let all: Vec<usize> = (0..n).collect();
    d.network_connected = induced_connected(t, &all);
    for j in 0..layout.num_clusters() {
        if !induced_connected(t, layout.cluster_members(j)) {
            d.disconnected_clusters.push(j);
        }
    }
    d
}

/// Breadth-first search restricted to `members`.
fn induced_connected(t: &Topology, members: &[usize]) -> bool {
    let Some(&start) = members.first() else {
        return true;
    };
    let mut seen = vec![false; t.nodes()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 1;
    while let Some(k) = queue.pop_front() {
        for &l in t.neighbors(k) {
            if !seen[l] && members.contains(&l) {
                seen[l] = true;
                count += 1;
                queue.push_back(l);
            }
        }
    }
    count == members.len()
}
