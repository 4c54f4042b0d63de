//! Zero-dimensional persistence over a distance graph: components merge when
//! the sweep radius reaches the edge distance, giving the single-linkage
//! merge tree.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::DistanceGraph;
use super::inf_as_null;
use crate::model::NeuronId;

/// A multi-member cluster with the radius it formed at and the radius it was
/// absorbed into a larger cluster (`INFINITY` if never).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bdc {
    pub members: Vec<NeuronId>,
    pub birth: f64,
    #[serde(with = "inf_as_null")]
    pub death: f64,
}

impl Bdc {
    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }

    pub fn is_final(&self) -> bool {
        self.death.is_infinite()
    }

    pub fn contains_all(&self, other: &Bdc) -> bool {
        other.members.iter().all(|m| self.members.binary_search(m).is_ok())
    }

    pub fn is_disjoint(&self, other: &Bdc) -> bool {
        other.members.iter().all(|m| self.members.binary_search(m).is_err())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Sorted.
    pub members: Vec<NeuronId>,
    pub birth: f64,
    #[serde(with = "inf_as_null")]
    pub death: f64,
    /// Indices of the clusters merged to form this one (empty for leaves).
    pub children: Vec<usize>,
}

/// Every cluster the sweep ever produces. Leaves `0..k` are the single
/// neurons in graph order (born at 0); internal nodes follow in creation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTree {
    pub nodes: Vec<TreeNode>,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> usize {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return a;
        }
        let (hi, lo) = if self.rank[a] >= self.rank[b] { (a, b) } else { (b, a) };
        self.parent[lo] = hi;
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        hi
    }
}

/// Sweeps the radius over the sorted finite edges. Edges of equal length are
/// taken in (distance, neuron pair) order, and everything that merges at one
/// radius becomes a single cluster born at that radius.
pub fn merge_tree(graph: &DistanceGraph) -> MergeTree {
    let k = graph.len();
    let neurons = graph.neurons();
    let mut nodes: Vec<TreeNode> = neurons
        .iter()
        .map(|&n| TreeNode { members: vec![n], birth: 0.0, death: f64::INFINITY, children: vec![] })
        .collect();
    let mut edges = graph.finite_edges();
    edges.sort_by(|x, y| {
        x.2.total_cmp(&y.2).then_with(|| (neurons[x.0], neurons[x.1]).cmp(&(neurons[y.0], neurons[y.1])))
    });

    let mut uf = UnionFind::new(k);
    let mut node_of: Vec<usize> = (0..k).collect();
    let mut start = 0;
    while start < edges.len() {
        let r = edges[start].2;
        let mut end = start;
        while end < edges.len() && edges[end].2 == r {
            end += 1;
        }
        // root -> clusters (as node ids) merged into it during this radius
        let mut pending: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(i, j, _) in &edges[start..end] {
            let (ri, rj) = (uf.find(i), uf.find(j));
            if ri == rj {
                continue;
            }
            let mut merged = pending.remove(&ri).unwrap_or_else(|| vec![node_of[ri]]);
            merged.extend(pending.remove(&rj).unwrap_or_else(|| vec![node_of[rj]]));
            let root = uf.union(ri, rj);
            pending.insert(root, merged);
        }
        let mut created: Vec<(usize, TreeNode)> = pending
            .into_iter()
            .map(|(root, mut children)| {
                children.sort_unstable();
                let mut members: Vec<NeuronId> =
                    children.iter().flat_map(|&c| nodes[c].members.iter().copied()).collect();
                members.sort();
                (root, TreeNode { members, birth: r, death: f64::INFINITY, children })
            })
            .collect();
        created.sort_by(|a, b| a.1.members.cmp(&b.1.members));
        for (root, node) in created {
            for &c in &node.children {
                nodes[c].death = r;
            }
            node_of[root] = nodes.len();
            nodes.push(node);
        }
        start = end;
    }
    MergeTree { nodes }
}

impl MergeTree {
    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().take_while(|n| n.children.is_empty()).count()
    }

    /// Multi-member clusters sorted by (birth, members).
    pub fn bdcs(&self) -> Vec<Bdc> {
        let mut out: Vec<Bdc> = self
            .nodes
            .iter()
            .filter(|n| n.members.len() >= 2)
            .map(|n| Bdc { members: n.members.clone(), birth: n.birth, death: n.death })
            .collect();
        out.sort_by(|a, b| a.birth.total_cmp(&b.birth).then_with(|| a.members.cmp(&b.members)));
        out
    }

    /// Partition of the neurons alive at radius `r` (singletons included),
    /// each block sorted, blocks sorted.
    pub fn clusters_at(&self, r: f64) -> Vec<Vec<NeuronId>> {
        let mut out: Vec<Vec<NeuronId>> =
            self.nodes.iter().filter(|n| n.birth <= r && r < n.death).map(|n| n.members.clone()).collect();
        out.sort();
        out
    }

    /// Radii at which merges happened, one entry per spanning-forest edge
    /// (a cluster formed from `c` parts contributes `c - 1` entries).
    pub fn merge_radii(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for _ in 1..n.children.len() {
                out.push(n.birth);
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }

    /// Nested JSON of the forest, roots first, for plotting.
    pub fn dendrogram(&self) -> serde_json::Value {
        fn node_json(t: &MergeTree, i: usize) -> serde_json::Value {
            let n = &t.nodes[i];
            serde_json::json!({
                "members": n.members.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
                "birth": n.birth,
                "death": if n.death.is_finite() { serde_json::json!(n.death) } else { serde_json::Value::Null },
                "children": n.children.iter().map(|&c| node_json(t, c)).collect::<Vec<_>>(),
            })
        }
        let roots: Vec<_> =
            (0..self.nodes.len()).filter(|&i| self.nodes[i].death.is_infinite()).map(|i| node_json(self, i)).collect();
        serde_json::json!({ "roots": roots })
    }
}

/// All multi-member clusters of the filtration.
pub fn persistence_filtration(graph: &DistanceGraph) -> Vec<Bdc> {
    merge_tree(graph).bdcs()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(k: usize) -> Vec<NeuronId> {
        (0..k).map(|i| NeuronId::new(i, 0)).collect()
    }

    fn graph(k: usize, edges: &[(usize, usize, f64)]) -> DistanceGraph {
        let mut m = vec![f64::INFINITY; k * k];
        for i in 0..k {
            m[i * k + i] = 0.0;
        }
        for &(i, j, d) in edges {
            m[i * k + j] = d;
            m[j * k + i] = d;
        }
        DistanceGraph::from_matrix(ids(k), m).unwrap()
    }

    #[test]
    fn chain_of_merges() {
        let n = ids(4);
        let bdcs = persistence_filtration(&graph(4, &[(0, 1, 1.0), (1, 2, 2.0), (1, 3, 3.0)]));
        assert_eq!(bdcs.len(), 3);
        assert_eq!(bdcs[0], Bdc { members: n[..2].to_vec(), birth: 1.0, death: 2.0 });
        assert_eq!(bdcs[1], Bdc { members: n[..3].to_vec(), birth: 2.0, death: 3.0 });
        assert_eq!(bdcs[2].members, n);
        assert!(bdcs[2].is_final());
        assert_eq!(bdcs[1].persistence(), 1.0);
    }

    #[test]
    fn trivial_graphs_have_no_clusters() {
        assert!(persistence_filtration(&graph(1, &[])).is_empty());
        assert!(persistence_filtration(&graph(2, &[])).is_empty());
    }

    #[test]
    fn simultaneous_merges_coalesce() {
        let t = merge_tree(&graph(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 5.0)]));
        let bdcs = t.bdcs();
        assert_eq!(bdcs.len(), 2);
        assert_eq!(bdcs[0].members.len(), 3);
        assert_eq!(bdcs[0].birth, 1.0);
        assert_eq!(t.merge_radii(), vec![1.0, 1.0, 5.0]);
        // two separate pairs at the same radius stay separate clusters
        let bdcs = persistence_filtration(&graph(4, &[(0, 1, 2.0), (2, 3, 2.0)]));
        assert_eq!(bdcs.len(), 2);
        assert!(bdcs.iter().all(|b| b.is_final()));
    }

    #[test]
    fn dendrogram_nests_children() {
        let t = merge_tree(&graph(3, &[(0, 1, 1.0), (1, 2, 2.0)]));
        let d = t.dendrogram();
        let root = &d["roots"][0];
        assert_eq!(root["members"].as_array().unwrap().len(), 3);
        assert!(root["death"].is_null());
        assert_eq!(root["children"].as_array().unwrap().len(), 2);
    }
}
