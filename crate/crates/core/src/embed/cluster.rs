//! Single-link KC clustering on cosine distance.

use crate::error::{Error, Result};
use crate::{Real, Tensor};

use super::loss::cosine;

/// Total map KC id -> dense cluster id. Cluster ids are numbered by first
/// appearance in ascending KC order, so cluster 0 always contains KC 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    cluster_of: Vec<u32>,
    num_clusters: u32,
}

impl ClusterAssignment {
    pub fn singletons(num_kcs: usize) -> Self {
        ClusterAssignment {
            cluster_of: (0..num_kcs as u32).collect(),
            num_clusters: num_kcs as u32,
        }
    }

    pub fn from_raw(cluster_of: Vec<u32>) -> Result<Self> {
        let num_clusters = cluster_of.iter().copied().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; num_clusters as usize];
        let mut next_expected = 0u32;
        for &c in &cluster_of {
            if c > next_expected {
                return Err(Error::data("cluster ids not dense by first appearance".to_string()));
            }
            if c == next_expected {
                next_expected += 1;
            }
            seen[c as usize] = true;
        }
        if !seen.iter().all(|&b| b) {
            return Err(Error::data("cluster ids not dense".to_string()));
        }
        Ok(ClusterAssignment {
            cluster_of,
            num_clusters,
        })
    }

    pub fn cluster(&self, kc: u32) -> u32 {
        self.cluster_of[kc as usize]
    }

    pub fn num_kcs(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn num_clusters(&self) -> u32 {
        self.num_clusters
    }

    pub fn raw(&self) -> &[u32] {
        &self.cluster_of
    }

    /// KC ids in cluster `c`, ascending.
    pub fn members(&self, c: u32) -> Vec<u32> {
        self.cluster_of
            .iter()
            .enumerate()
            .filter(|&(_, &cl)| cl == c)
            .map(|(k, _)| k as u32)
            .collect()
    }

    pub fn same_cluster(&self, a: u32, b: u32) -> bool {
        self.cluster_of[a as usize] == self.cluster_of[b as usize]
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Lower root wins so representative choice is order-independent.
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Chains every KC pair within `threshold` cosine distance into one
/// cluster (single link, so transitivity applies). Deterministic: pairs
/// are processed in ascending (i, j) order and cluster ids are dense by
/// first appearance.
pub fn cluster_kcs(kc_vectors: &Tensor, threshold: f64) -> Result<ClusterAssignment> {
    let n = kc_vectors.rows();
    if n == 0 {
        return Err(Error::data("cluster_kcs needs at least one KC".to_string()));
    }
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = 1.0 - cosine(kc_vectors.row_slice(i), kc_vectors.row_slice(j));
            if d <= threshold {
                uf.union(i, j);
            }
        }
    }
    let mut cluster_of = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut label_of_root: Vec<Option<u32>> = vec![None; n];
    for k in 0..n {
        let root = uf.find(k);
        let label = match label_of_root[root] {
            Some(l) => l,
            None => {
                let l = next;
                label_of_root[root] = Some(l);
                next += 1;
                l
            }
        };
        cluster_of[k] = label;
    }
    Ok(ClusterAssignment {
        cluster_of,
        num_clusters: next,
    })
}

/// Inclusion mask for in-batch negatives: index `k` participates in the
/// softmax iff it is the positive itself or lies in a different cluster.
pub(crate) fn included_mask(
    assignment: &ClusterAssignment,
    batch_kcs: &[u32],
    pos_idx: usize,
) -> Vec<bool> {
    let pos_cluster = assignment.cluster(batch_kcs[pos_idx]);
    batch_kcs
        .iter()
        .enumerate()
        .map(|(k, &kc)| k == pos_idx || assignment.cluster(kc) != pos_cluster)
        .collect()
}

/// Cosine distance helper used by tests.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn cosine_distance(a: &[Real], b: &[Real]) -> f64 {
    1.0 - cosine(a, b)
}
