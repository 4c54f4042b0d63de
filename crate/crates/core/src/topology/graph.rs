use serde::{Deserialize, Serialize};

use super::inf_as_null;
use crate::error::{Error, Result};
use crate::model::{NeuronId, NeuronWeights};

/// How a pair's distance was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Identical,
    AdjacentLayer,
    MultiLayerPath,
    SameLayer,
    Disconnected,
    /// Supplied directly rather than derived from weights.
    Given,
}

/// Symmetric pairwise distances over a set of neurons; `f64::INFINITY`
/// marks pairs that never connect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceGraph {
    neurons: Vec<NeuronId>,
    #[serde(with = "inf_as_null::matrix")]
    dist: Vec<f64>,
    provenance: Vec<Provenance>,
}

/// Distance across a single adjacent-layer pathway of weight `w`.
pub fn adjacent_distance(w: f64) -> f64 {
    if w == 0.0 {
        f64::INFINITY
    } else {
        (1.0 / w).abs()
    }
}

impl DistanceGraph {
    /// Builds a graph from an explicit matrix (row-major, `k x k`).
    pub fn from_matrix(neurons: Vec<NeuronId>, dist: Vec<f64>) -> Result<Self> {
        let k = neurons.len();
        if dist.len() != k * k {
            return Err(Error::arg(format!("distance matrix has {} entries for {k} neurons", dist.len())));
        }
        for i in 0..k {
            if dist[i * k + i] != 0.0 {
                return Err(Error::arg("distance matrix diagonal must be 0"));
            }
            for j in 0..k {
                let d = dist[i * k + j];
                if d.is_nan() || d < 0.0 || d != dist[j * k + i] {
                    return Err(Error::arg(format!("invalid or asymmetric distance at ({i}, {j})")));
                }
            }
        }
        let provenance =
            (0..k * k).map(|x| if x / k == x % k { Provenance::Identical } else { Provenance::Given }).collect();
        Ok(DistanceGraph { neurons, dist, provenance })
    }

    pub fn neurons(&self) -> &[NeuronId] {
        &self.neurons
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.len() + j]
    }

    pub fn provenance(&self, i: usize, j: usize) -> Provenance {
        self.provenance[i * self.len() + j]
    }

    pub fn index_of(&self, n: NeuronId) -> Option<usize> {
        self.neurons.iter().position(|&m| m == n)
    }

    /// Distance between two member neurons, if both are present.
    pub fn between(&self, a: NeuronId, b: NeuronId) -> Option<f64> {
        Some(self.dist(self.index_of(a)?, self.index_of(b)?))
    }

    /// Every pair `i < j` with a finite distance.
    pub fn finite_edges(&self) -> Vec<(usize, usize, f64)> {
        let k = self.len();
        let mut out = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                let d = self.dist(i, j);
                if d.is_finite() {
                    out.push((i, j, d));
                }
            }
        }
        out
    }

    /// Returns a copy with every distance multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut g = self.clone();
        for d in &mut g.dist {
            *d *= c;
        }
        g
    }
}

/// Distances over `kns`. Adjacent layers use the reciprocal pathway weight;
/// farther layers take the cheapest route that climbs one layer at a time
/// through other members of `kns`; same-layer pairs never connect.
pub fn build_distance_graph<W: NeuronWeights + ?Sized>(weights: &W, kns: &[NeuronId]) -> Result<DistanceGraph> {
    if kns.is_empty() {
        return Err(Error::arg("distance graph over an empty neuron set"));
    }
    for &n in kns {
        if !weights.contains(n) {
            return Err(Error::InvalidNeuron(n));
        }
    }
    let mut neurons = kns.to_vec();
    neurons.sort();
    neurons.dedup();
    let k = neurons.len();
    let mut adj = vec![f64::INFINITY; k * k];
    for i in 0..k {
        for j in 0..k {
            if neurons[j].layer == neurons[i].layer + 1 {
                let d = adjacent_distance(weights.pathway_weight(neurons[i], neurons[j]));
                adj[i * k + j] = d;
                adj[j * k + i] = d;
            }
        }
    }
    layered_shortest_paths(neurons, &adj)
}

/// Completes a graph whose only direct edges join adjacent layers.
/// `adj[i*k+j]` is the direct distance for adjacent-layer pairs (ignored
/// otherwise). Neurons must be sorted by (layer, pos).
pub fn layered_shortest_paths(neurons: Vec<NeuronId>, adj: &[f64]) -> Result<DistanceGraph> {
    let k = neurons.len();
    if adj.len() != k * k {
        return Err(Error::arg("adjacency size mismatch"));
    }
    if neurons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg("neurons must be sorted and distinct"));
    }
    let mut dist = vec![f64::INFINITY; k * k];
    let mut provenance = vec![Provenance::Disconnected; k * k];
    for s in 0..k {
        dist[s * k + s] = 0.0;
        provenance[s * k + s] = Provenance::Identical;
        let ls = neurons[s].layer;
        // Sorted order is layer order, so every predecessor of `c` on a
        // monotone path is finalized before `c` is relaxed.
        for c in s + 1..k {
            let lc = neurons[c].layer;
            if lc == ls {
                provenance[s * k + c] = Provenance::SameLayer;
                continue;
            }
            let best = if lc == ls + 1 {
                adj[s * k + c]
            } else {
                (s + 1..c)
                    .filter(|&b| neurons[b].layer + 1 == lc)
                    .map(|b| dist[s * k + b] + adj[b * k + c])
                    .fold(f64::INFINITY, f64::min)
            };
            dist[s * k + c] = best;
            provenance[s * k + c] = match (lc - ls, best.is_finite()) {
                (_, false) => Provenance::Disconnected,
                (1, true) => Provenance::AdjacentLayer,
                (_, true) => Provenance::MultiLayerPath,
            };
        }
    }
    for i in 0..k {
        for j in 0..i {
            dist[i * k + j] = dist[j * k + i];
            provenance[i * k + j] = provenance[j * k + i];
        }
    }
    Ok(DistanceGraph { neurons, dist, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Stub {
        fc: Vec<Vec<Vec<f64>>>,
        proj: Vec<Vec<Vec<f64>>>,
    }

    impl NeuronWeights for Stub {
        fn n_layers(&self) -> usize {
            self.fc.len()
        }
        fn d_ff(&self) -> usize {
            self.fc[0].len()
        }
        fn d_model(&self) -> usize {
            1
        }
        fn w_fc_column(&self, n: NeuronId) -> Vec<f64> {
            self.fc[n.layer][n.pos].clone()
        }
        fn w_proj_row(&self, n: NeuronId) -> Vec<f64> {
            self.proj[n.layer][n.pos].clone()
        }
    }

    #[test]
    fn reciprocal_same_layer_and_paths() {
        // pathway weight = proj(A) * fc(B) in one dimension
        let w = Stub {
            fc: vec![vec![vec![1.0], vec![1.0]], vec![vec![0.5], vec![0.0]], vec![vec![2.0], vec![1.0]]],
            proj: vec![vec![vec![1.0], vec![-4.0]], vec![vec![1.0], vec![1.0]], vec![vec![1.0], vec![1.0]]],
        };
        let (a, b, c, d, e) =
            (NeuronId::new(0, 0), NeuronId::new(0, 1), NeuronId::new(1, 0), NeuronId::new(1, 1), NeuronId::new(2, 0));
        let g = build_distance_graph(&w, &[e, d, c, b, a]).unwrap();
        assert_eq!(g.neurons(), &[a, b, c, d, e]);
        assert_eq!(g.between(a, c), Some(2.0));
        assert_eq!(g.between(b, c), Some(0.5));
        assert_eq!(g.between(a, d), Some(f64::INFINITY));
        assert_eq!(g.between(a, b), Some(f64::INFINITY));
        assert_eq!(g.provenance(0, 1), Provenance::SameLayer);
        // a -> c -> e: 2 + 0.5
        assert_eq!(g.between(a, e), Some(2.5));
        assert_eq!(g.between(e, b), Some(1.0));
        assert_eq!(g.provenance(0, 4), Provenance::MultiLayerPath);
        assert_eq!(g.provenance(0, 3), Provenance::Disconnected);
    }

    #[test]
    fn json_uses_null_for_infinity() {
        let g = DistanceGraph::from_matrix(
            vec![NeuronId::new(0, 0), NeuronId::new(0, 1)],
            vec![0.0, f64::INFINITY, f64::INFINITY, 0.0],
        )
        .unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("null"));
        let back: DistanceGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn rejects_asymmetric_matrix() {
        let n = vec![NeuronId::new(0, 0), NeuronId::new(1, 0)];
        assert!(DistanceGraph::from_matrix(n.clone(), vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceGraph::from_matrix(n, vec![0.0, -1.0, -1.0, 0.0]).is_err());
    }
}
