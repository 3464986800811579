//! Weighted undirected graphs built from network weights.
//!
//! MLP graphs have one node per unit (inputs, hidden units and outputs) and
//! an edge of weight `|w|` for every connection. CNN graphs have one node per
//! channel of each conv layer and an edge weight equal to the L1 norm of the
//! kernel slice joining two channels, with batch norm folded into the source
//! channel.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{ArchiveError, LayerKind, WeightArchive};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("MLP graph requires dense layers only; layer {0} is conv2d")]
    NotDense(String),
    #[error("archive contains no conv2d layers")]
    NoConvLayers,
    #[error("conv2d layers must form one contiguous run")]
    NonContiguousConv,
    #[error("archive contains no layers")]
    NoLayers,
    #[error("graph is empty after removing dead nodes")]
    Empty,
    #[error("invalid edge ({0}, {1}): {2}")]
    InvalidEdge(usize, usize, String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Position of a node in the network: node layer and unit (neuron or channel) index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: usize,
    pub unit: usize,
}

impl NodeId {
    pub fn new(layer: usize, unit: usize) -> Self {
        NodeId { layer, unit }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    nodes: Vec<NodeId>,
    // Sorted by neighbour index; every edge appears in both endpoint lists.
    adjacency: Vec<Vec<(usize, f64)>>,
    degrees: Vec<f64>,
}

impl WeightedGraph {
    /// Builds a graph from undirected edges. Zero-weight edges are dropped and
    /// repeated edges are summed. Dead nodes are kept; see [`strip_dead_nodes`].
    pub fn from_edges(
        nodes: Vec<NodeId>,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let n = nodes.len();
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(GraphError::InvalidEdge(i, j, "node out of range".into()));
            }
            if i == j {
                return Err(GraphError::InvalidEdge(i, j, "self-loop".into()));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(GraphError::InvalidEdge(i, j, format!("weight {w}")));
            }
            if w > 0.0 {
                *acc.entry((i.min(j), i.max(j))).or_insert(0.0) += w;
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for (&(i, j), &w) in &acc {
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(j, _)| j);
        }
        let degrees = adjacency
            .iter()
            .map(|list| list.iter().map(|&(_, w)| w).sum())
            .collect();
        Ok(WeightedGraph {
            nodes,
            adjacency,
            degrees,
        })
    }

    /// Graph over `n` anonymous nodes (all in layer 0) from a dense symmetric matrix.
    pub fn from_dense(adjacency: &DMatrix<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        let nodes = (0..n).map(|u| NodeId::new(0, u)).collect();
        let edges = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j, adjacency[(i, j)])));
        Self::from_edges(nodes, edges)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.degrees[i]
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(i, list)| {
            list.iter()
                .filter(move |&&(j, _)| j > i)
                .map(move |&(j, w)| (i, j, w))
        })
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .map(|pos| self.adjacency[i][pos].1)
            .unwrap_or(0.0)
    }

    pub fn volume(&self, set: &[usize]) -> f64 {
        set.iter().map(|&i| self.degrees[i]).sum()
    }

    pub fn dense_adjacency(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut a = DMatrix::zeros(n, n);
        for (i, j, w) in self.edges() {
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
        a
    }

    pub fn has_dead_nodes(&self) -> bool {
        self.degrees.iter().any(|&d| d <= 0.0)
    }

    pub fn index_map(&self) -> HashMap<NodeId, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    /// Distinct node layers in ascending order.
    pub fn layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.nodes.iter().map(|n| n.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    /// y = A x
    pub fn adjacency_mul(&self, x: &[f64], y: &mut [f64]) {
        for (i, list) in self.adjacency.iter().enumerate() {
            y[i] = list.iter().map(|&(j, w)| w * x[j]).sum();
        }
    }

    /// Same node set with every edge weight multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> WeightedGraph {
        let adjacency = self
            .adjacency
            .iter()
            .map(|list| list.iter().map(|&(j, w)| (j, w * factor)).collect())
            .collect();
        WeightedGraph {
            nodes: self.nodes.clone(),
            adjacency,
            degrees: self.degrees.iter().map(|d| d * factor).collect(),
        }
    }
}

/// Removes every node with zero degree. A single pass suffices: removing a
/// dead node never changes another node's degree.
pub fn strip_dead_nodes(graph: WeightedGraph) -> Result<WeightedGraph> {
    if !graph.has_dead_nodes() {
        return if graph.is_empty() {
            Err(GraphError::Empty)
        } else {
            Ok(graph)
        };
    }
    let mut remap = vec![usize::MAX; graph.len()];
    let mut nodes = Vec::new();
    for (i, &id) in graph.nodes.iter().enumerate() {
        if graph.degrees[i] > 0.0 {
            remap[i] = nodes.len();
            nodes.push(id);
        }
    }
    if nodes.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut adjacency = Vec::with_capacity(nodes.len());
    let mut degrees = Vec::with_capacity(nodes.len());
    for (i, list) in graph.adjacency.into_iter().enumerate() {
        if remap[i] != usize::MAX {
            adjacency.push(list.into_iter().map(|(j, w)| (remap[j], w)).collect());
            degrees.push(graph.degrees[i]);
        }
    }
    Ok(WeightedGraph {
        nodes,
        adjacency,
        degrees,
    })
}

/// Unstripped MLP graph from `fan_in x fan_out` weight matrices, inputs in layer 0.
pub fn mlp_graph_unstripped(weights: &[DMatrix<f64>]) -> Result<WeightedGraph> {
    if weights.is_empty() {
        return Err(GraphError::NoLayers);
    }
    let mut widths = vec![weights[0].nrows()];
    widths.extend(weights.iter().map(|w| w.ncols()));
    let mut offsets = Vec::with_capacity(widths.len());
    let mut nodes = Vec::new();
    for (layer, &width) in widths.iter().enumerate() {
        offsets.push(nodes.len());
        nodes.extend((0..width).map(|u| NodeId::new(layer, u)));
    }
    let mut edges = Vec::new();
    for (s, w) in weights.iter().enumerate() {
        for n in 0..w.nrows() {
            for m in 0..w.ncols() {
                let v = w[(n, m)];
                if v != 0.0 {
                    edges.push((offsets[s] + n, offsets[s + 1] + m, v.abs()));
                }
            }
        }
    }
    WeightedGraph::from_edges(nodes, edges)
}

/// Stripped MLP graph from in-memory weight matrices.
pub fn mlp_graph(weights: &[DMatrix<f64>]) -> Result<WeightedGraph> {
    strip_dead_nodes(mlp_graph_unstripped(weights)?)
}

/// Dense layer `index` as a `fan_in x fan_out` matrix.
pub fn dense_matrix(archive: &WeightArchive, index: usize) -> Result<DMatrix<f64>> {
    let spec = &archive.layers()[index];
    let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
    let values = archive.weights(index)?;
    Ok(DMatrix::from_row_iterator(
        fan_in,
        fan_out,
        values.iter().map(|&v| v as f64),
    ))
}

pub fn mlp_to_graph(archive: &WeightArchive) -> Result<WeightedGraph> {
    if let Some(conv) = archive.layers().iter().find(|l| l.kind != LayerKind::Dense) {
        return Err(GraphError::NotDense(conv.name.clone()));
    }
    let weights = (0..archive.layers().len())
        .map(|i| dense_matrix(archive, i))
        .collect::<Result<Vec<_>>>()?;
    mlp_graph(&weights)
}

pub fn cnn_to_graph(archive: &WeightArchive) -> Result<WeightedGraph> {
    let conv: Vec<usize> = archive
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == LayerKind::Conv2d)
        .map(|(i, _)| i)
        .collect();
    if conv.is_empty() {
        return Err(GraphError::NoConvLayers);
    }
    if conv.windows(2).any(|p| p[1] != p[0] + 1) {
        return Err(GraphError::NonContiguousConv);
    }
    let mut offsets = Vec::with_capacity(conv.len());
    let mut nodes = Vec::new();
    for (t, &li) in conv.iter().enumerate() {
        offsets.push(nodes.len());
        let channels = archive.layers()[li].out_units();
        nodes.extend((0..channels).map(|c| NodeId::new(t, c)));
    }
    let mut edges = Vec::new();
    for t in 1..conv.len() {
        let (src, dst) = (conv[t - 1], conv[t]);
        let spec = &archive.layers()[dst];
        let (kh, kw, cin, cout) = (spec.shape[0], spec.shape[1], spec.shape[2], spec.shape[3]);
        let kernel = archive.weights(dst)?;
        let fold: Vec<f64> = match archive.batchnorm(src)? {
            Some((gamma, var, eps)) => gamma
                .iter()
                .zip(&var)
                .map(|(&g, &v)| (g as f64).abs() / (v as f64 + eps).sqrt())
                .collect(),
            None => vec![1.0; cin],
        };
        for i in 0..cin {
            for o in 0..cout {
                let mut l1 = 0.0f64;
                for a in 0..kh {
                    for b in 0..kw {
                        l1 += (kernel[((a * kw + b) * cin + i) * cout + o] as f64).abs();
                    }
                }
                let w = l1 * fold[i];
                if w > 0.0 {
                    edges.push((offsets[t - 1] + i, offsets[t] + o, w));
                }
            }
        }
    }
    strip_dead_nodes(WeightedGraph::from_edges(nodes, edges)?)
}
