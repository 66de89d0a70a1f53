use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::blockmat::BlockLayout;
use crate::error::{Error, Result};

/// One parameter block of a node's interest vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockId {
    Global,
    /// Common block of cluster `j`.
    Common(usize),
    Local,
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockId::Global => write!(f, "global"),
            BlockId::Common(j) => write!(f, "common{}", j + 1),
            BlockId::Local => write!(f, "local"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    /// Member nodes, 0-based, increasing.
    pub members: Vec<usize>,
    /// Size of the common block shared by the members.
    pub size: usize,
}

/// Who estimates what, and where every block lives in the three orderings
/// used by the analysis:
///
/// * node-wise (`M̆`): for each node, global, common blocks in increasing
///   cluster index, local;
/// * grouped: all global copies, then each cluster's copies in member order,
///   then all locals;
/// * augmented (`M̄`): one copy of every parameter, global, commons, locals.
///
/// All node and cluster indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterestLayout {
    nodes: usize,
    global_size: usize,
    clusters: Vec<Cluster>,
    local_sizes: Vec<usize>,
    obs_len: Vec<usize>,
    interests: Vec<Vec<usize>>,
    node_offsets: Vec<usize>,
}

impl InterestLayout {
    pub fn new(
        nodes: usize,
        global_size: usize,
        clusters: Vec<Cluster>,
        local_sizes: Vec<usize>,
        obs_len: Vec<usize>,
    ) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidArgument(
                "network needs at least one node".into(),
            ));
        }
        if local_sizes.len() != nodes {
            return Err(Error::dim("local block sizes", nodes, local_sizes.len()));
        }
        if obs_len.len() != nodes {
            return Err(Error::dim("observation lengths", nodes, obs_len.len()));
        }
        if let Some(k) = obs_len.iter().position(|&l| l == 0) {
            return Err(Error::InvalidArgument(format!(
                "node {k} has zero observations per step"
            )));
        }
        let mut clusters = clusters;
        for (j, c) in clusters.iter_mut().enumerate() {
            if c.members.is_empty() {
                return Err(Error::InvalidArgument(format!("cluster {j} is empty")));
            }
            if c.size == 0 {
                return Err(Error::InvalidArgument(format!(
                    "cluster {j} has an empty common block"
                )));
            }
            if let Some(&m) = c.members.iter().find(|&&m| m >= nodes) {
                return Err(Error::InvalidArgument(format!(
                    "cluster {j} member {m} is outside 0..{nodes}"
                )));
            }
            c.members.sort_unstable();
            c.members.dedup();
        }
        let mut interests = vec![Vec::new(); nodes];
        for (j, c) in clusters.iter().enumerate() {
            for &m in &c.members {
                interests[m].push(j);
            }
        }
        let mut node_offsets = Vec::with_capacity(nodes + 1);
        node_offsets.push(0);
        let mut acc = 0;
        for k in 0..nodes {
            let dim = global_size
                + interests[k]
                    .iter()
                    .map(|&j| clusters[j].size)
                    .sum::<usize>()
                + local_sizes[k];
            if dim == 0 {
                return Err(Error::InvalidArgument(format!(
                    "node {k} estimates no parameters"
                )));
            }
            acc += dim;
            node_offsets.push(acc);
        }
        Ok(Self {
            nodes,
            global_size,
            clusters,
            local_sizes,
            obs_len,
            interests,
            node_offsets,
        })
    }

    /// Uniform block sizes: `clusters` lists member sets sharing `common_size`.
    pub fn uniform(
        nodes: usize,
        global_size: usize,
        clusters: &[Vec<usize>],
        common_size: usize,
        local_size: usize,
        obs_len: usize,
    ) -> Result<Self> {
        Self::new(
            nodes,
            global_size,
            clusters
                .iter()
                .map(|m| Cluster {
                    members: m.clone(),
                    size: common_size,
                })
                .collect(),
            vec![local_size; nodes],
            vec![obs_len; nodes],
        )
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn global_size(&self) -> usize {
        self.global_size
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster_members(&self, j: usize) -> &[usize] {
        &self.clusters[j].members
    }

    pub fn common_size(&self, j: usize) -> usize {
        self.clusters[j].size
    }

    pub fn local_size(&self, k: usize) -> usize {
        self.local_sizes[k]
    }

    pub fn obs_len(&self, k: usize) -> usize {
        self.obs_len[k]
    }

    /// Clusters node `k` belongs to, increasing.
    pub fn interests(&self, k: usize) -> &[usize] {
        &self.interests[k]
    }

    /// `M_k`.
    pub fn node_dim(&self, k: usize) -> usize {
        self.node_offsets[k + 1] - self.node_offsets[k]
    }

    /// `M̆ = Σ_k M_k`.
    pub fn total_dim(&self) -> usize {
        self.node_offsets[self.nodes]
    }

    /// `M̄`: one copy of every parameter.
    pub fn augmented_dim(&self) -> usize {
        self.global_size
            + self.clusters.iter().map(|c| c.size).sum::<usize>()
            + self.local_sizes.iter().sum::<usize>()
    }

    /// Start of node `k` in the node-wise stacking.
    pub fn node_offset(&self, k: usize) -> usize {
        self.node_offsets[k]
    }

    pub fn node_range(&self, k: usize) -> Range<usize> {
        self.node_offsets[k]..self.node_offsets[k + 1]
    }

    /// Blocks of node `k` in stacking order with their within-node ranges.
    pub fn node_blocks(&self, k: usize) -> Vec<(BlockId, Range<usize>)> {
        let mut out = Vec::with_capacity(2 + self.interests[k].len());
        let mut off = 0;
        out.push((BlockId::Global, off..off + self.global_size));
        off += self.global_size;
        for &j in &self.interests[k] {
            let s = self.clusters[j].size;
            out.push((BlockId::Common(j), off..off + s));
            off += s;
        }
        out.push((BlockId::Local, off..off + self.local_sizes[k]));
        out
    }

    /// Within-node range of `block`, or `None` when node `k` does not estimate it.
    pub fn block_range(&self, k: usize, block: BlockId) -> Option<Range<usize>> {
        match block {
            BlockId::Global => Some(0..self.global_size),
            BlockId::Common(j) => {
                let pos = self.interests[k].iter().position(|&x| x == j)?;
                let start = self.global_size
                    + self.interests[k][..pos]
                        .iter()
                        .map(|&x| self.clusters[x].size)
                        .sum::<usize>();
                Some(start..start + self.clusters[j].size)
            }
            BlockId::Local => {
                let end = self.node_dim(k);
                Some(end - self.local_sizes[k]..end)
            }
        }
    }

    /// Range of `block` of node `k` in the node-wise network stacking.
    pub fn network_range(&self, k: usize, block: BlockId) -> Option<Range<usize>> {
        let r = self.block_range(k, block)?;
        let off = self.node_offsets[k];
        Some(r.start + off..r.end + off)
    }

    /// Position of node `k` inside cluster `j` (`|C_{j,k}| - 1`).
    pub fn cluster_rank(&self, j: usize, k: usize) -> Option<usize> {
        self.clusters[j].members.iter().position(|&m| m == k)
    }

    /// Grouped-ordering position of entry `c` of `block` at node `k`.
    ///
    /// These are the counter functions that place the unit entries of the
    /// permutation between grouped and node-wise orderings (0-based).
    pub fn grouped_position(&self, k: usize, block: BlockId, c: usize) -> Option<usize> {
        let globals = self.nodes * self.global_size;
        match block {
            BlockId::Global => (c < self.global_size).then(|| k * self.global_size + c),
            BlockId::Common(j) => {
                let rank = self.cluster_rank(j, k)?;
                let size = self.clusters[j].size;
                if c >= size {
                    return None;
                }
                let before: usize = self.clusters[..j]
                    .iter()
                    .map(|cl| cl.members.len() * cl.size)
                    .sum();
                Some(globals + before + rank * size + c)
            }
            BlockId::Local => {
                if c >= self.local_sizes[k] {
                    return None;
                }
                let commons: usize = self
                    .clusters
                    .iter()
                    .map(|cl| cl.members.len() * cl.size)
                    .sum();
                let before: usize = self.local_sizes[..k].iter().sum();
                Some(globals + commons + before + c)
            }
        }
    }

    /// Range of a parameter block in the augmented vector. `node` selects
    /// the owner of a local block and is ignored otherwise.
    pub fn augmented_range(&self, block: BlockId, node: usize) -> Range<usize> {
        let commons: usize = self.clusters.iter().map(|c| c.size).sum();
        match block {
            BlockId::Global => 0..self.global_size,
            BlockId::Common(j) => {
                let start =
                    self.global_size + self.clusters[..j].iter().map(|c| c.size).sum::<usize>();
                start..start + self.clusters[j].size
            }
            BlockId::Local => {
                let start =
                    self.global_size + commons + self.local_sizes[..node].iter().sum::<usize>();
                start..start + self.local_sizes[node]
            }
        }
    }

    pub fn block_layout(&self) -> BlockLayout {
        BlockLayout::new(
            (0..self.nodes)
                .map(|k| {
                    self.node_blocks(k)
                        .into_iter()
                        .map(|(_, r)| r.len())
                        .collect()
                })
                .collect(),
        )
    }
}
