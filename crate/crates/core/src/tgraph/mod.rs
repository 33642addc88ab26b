//! Temporal edge storage and causal neighborhood queries.
//!
//! Neighborhoods are undirected: an event `(u, v, t)` is a neighbor event of
//! both `u` and `v`. Direction survives only in the stored edge.

mod sampler;

pub use sampler::{sample_subgraph, SampledEvent, SampledSubgraph, SamplerConfig};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

/// Stable identifier of an interaction, unique within a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u64);

/// Ground-truth or training label of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Anomaly,
    Unlabeled,
}

impl Label {
    pub fn from_binary(y: u8) -> Option<Self> {
        match y {
            0 => Some(Label::Normal),
            1 => Some(Label::Anomaly),
            _ => None,
        }
    }

    /// `Some(0)` for normal, `Some(1)` for anomaly.
    pub fn as_binary(self) -> Option<u8> {
        match self {
            Label::Normal => Some(0),
            Label::Anomaly => Some(1),
            Label::Unlabeled => None,
        }
    }
}

/// One timestamped interaction `src -> dst` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEdge {
    pub id: EdgeId,
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
    pub features: Vec<f64>,
    pub label: Label,
}

impl TemporalEdge {
    pub fn other_end(&self, node: NodeId) -> NodeId {
        if self.src == node {
            self.dst
        } else {
            self.src
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("unknown node {node} (store has {nodes} nodes)")]
    UnknownNode { node: NodeId, nodes: usize },
    #[error("edge {0:?} has a non-finite timestamp")]
    NonFiniteTime(EdgeId),
    #[error("edge {id:?} has {found} features, expected {expected}")]
    FeatureArity { id: EdgeId, expected: usize, found: usize },
    #[error("duplicate edge id {0:?}")]
    DuplicateEdge(EdgeId),
}

/// Append-only collection of temporal edges, totally ordered by `(t, id)`,
/// with a time-sorted incidence list per node.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStore {
    edges: Vec<TemporalEdge>,
    incidence: Vec<Vec<usize>>,
    ordinals: HashMap<EdgeId, usize>,
    num_nodes: usize,
    feature_dim: usize,
}

impl EventStore {
    /// Sorts `edges` by `(t, id)` and indexes them. Nodes are `0..num_nodes`;
    /// endpoints beyond that range grow the node count.
    pub fn new(num_nodes: usize, mut edges: Vec<TemporalEdge>) -> Result<Self, GraphError> {
        let feature_dim = edges.first().map_or(0, |e| e.features.len());
        let mut num_nodes = num_nodes;
        for e in &edges {
            if !e.t.is_finite() {
                return Err(GraphError::NonFiniteTime(e.id));
            }
            if e.features.len() != feature_dim {
                return Err(GraphError::FeatureArity {
                    id: e.id,
                    expected: feature_dim,
                    found: e.features.len(),
                });
            }
            num_nodes = num_nodes.max(e.src + 1).max(e.dst + 1);
        }
        edges.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.id.cmp(&b.id)));
        let mut incidence = vec![Vec::new(); num_nodes];
        let mut ordinals = HashMap::with_capacity(edges.len());
        for (k, e) in edges.iter().enumerate() {
            if ordinals.insert(e.id, k).is_some() {
                return Err(GraphError::DuplicateEdge(e.id));
            }
            incidence[e.src].push(k);
            if e.dst != e.src {
                incidence[e.dst].push(k);
            }
        }
        Ok(Self {
            edges,
            incidence,
            ordinals,
            num_nodes,
            feature_dim,
        })
    }

    pub fn edges(&self) -> &[TemporalEdge] {
        &self.edges
    }

    pub fn edge(&self, ordinal: usize) -> &TemporalEdge {
        &self.edges[ordinal]
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Position of an edge in the `(t, id)` order.
    pub fn ordinal_of(&self, id: EdgeId) -> Option<usize> {
        self.ordinals.get(&id).copied()
    }

    /// Ordinals of events incident to `node`, in time order.
    pub fn incident(&self, node: NodeId) -> Result<&[usize], GraphError> {
        self.incidence
            .get(node)
            .map(Vec::as_slice)
            .ok_or(GraphError::UnknownNode {
                node,
                nodes: self.num_nodes,
            })
    }

    /// Number of incident events with `t_event <= t` (or `< t` when `strict`).
    fn causal_prefix(&self, node: NodeId, t: f64, strict: bool) -> Result<&[usize], GraphError> {
        let inc = self.incident(node)?;
        let end = inc.partition_point(|&k| {
            let te = self.edges[k].t;
            if strict {
                te < t
            } else {
                te <= t
            }
        });
        Ok(&inc[..end])
    }

    /// Incident events no later than `t` (strictly earlier when `strict`), each
    /// paired with the opposite endpoint.
    pub fn neighbors_before(&self, node: NodeId, t: f64, strict: bool) -> Result<Vec<(usize, NodeId)>, GraphError> {
        Ok(self
            .causal_prefix(node, t, strict)?
            .iter()
            .map(|&k| (k, self.edges[k].other_end(node)))
            .collect())
    }

    /// Count of distinct incident events with `t_event <= t`.
    pub fn degree_at(&self, node: NodeId, t: f64) -> Result<usize, GraphError> {
        Ok(self.causal_prefix(node, t, false)?.len())
    }

    /// Count of incident events with `t_event < t`.
    pub fn degree_before(&self, node: NodeId, t: f64) -> Result<usize, GraphError> {
        Ok(self.causal_prefix(node, t, true)?.len())
    }

    /// Copy of the store with labels replaced by `f(edge)`.
    pub fn relabeled(&self, mut f: impl FnMut(&TemporalEdge) -> Label) -> Self {
        let mut out = self.clone();
        for e in &mut out.edges {
            e.label = f(e);
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn edge(id: u64, src: NodeId, dst: NodeId, t: f64) -> TemporalEdge {
        TemporalEdge {
            id: EdgeId(id),
            src,
            dst,
            t,
            features: vec![0.0],
            label: Label::Normal,
        }
    }

    /// e1=(A,B,1), e2=(B,C,2), e3=(A,C,3) with A=0, B=1, C=2.
    pub fn three_edges() -> EventStore {
        EventStore::new(3, vec![edge(1, 0, 1, 1.0), edge(2, 1, 2, 2.0), edge(3, 0, 2, 3.0)]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    const A: NodeId = 0;
    const B: NodeId = 1;
    const C: NodeId = 2;

    fn ids(store: &EventStore, v: Vec<(usize, NodeId)>) -> Vec<(u64, NodeId)> {
        v.into_iter().map(|(k, n)| (store.edge(k).id.0, n)).collect()
    }

    #[test]
    fn neighbors_before_inclusive() {
        let s = three_edges();
        assert_eq!(ids(&s, s.neighbors_before(B, 2.5, false).unwrap()), vec![(1, A), (2, C)]);
    }

    #[test]
    fn neighbors_before_strict() {
        let s = three_edges();
        assert!(s.neighbors_before(B, 1.0, true).unwrap().is_empty());
        assert_eq!(ids(&s, s.neighbors_before(A, 3.0, true).unwrap()), vec![(1, B)]);
    }

    #[test]
    fn unknown_node_is_an_error() {
        let s = three_edges();
        assert_eq!(
            s.neighbors_before(9, 1.0, false),
            Err(GraphError::UnknownNode { node: 9, nodes: 3 })
        );
        assert!(s.degree_at(9, 1.0).is_err());
    }

    #[test]
    fn degrees() {
        let s = three_edges();
        assert_eq!(s.degree_at(A, 3.0).unwrap(), 2);
        assert_eq!(s.degree_at(C, 1.0).unwrap(), 0);
        assert_eq!(s.degree_at(B, 10.0).unwrap(), 2);
        assert_eq!(s.degree_before(A, 3.0).unwrap(), 1);
    }

    #[test]
    fn sorted_by_time_then_id() {
        let s = EventStore::new(2, vec![edge(5, 0, 1, 2.0), edge(2, 0, 1, 2.0), edge(9, 1, 0, 1.0)]).unwrap();
        let order: Vec<u64> = s.edges().iter().map(|e| e.id.0).collect();
        assert_eq!(order, vec![9, 2, 5]);
        assert_eq!(s.incident(0).unwrap(), &[0, 1, 2]);
    }

    #[test]
    fn rejects_bad_edges() {
        let mut bad = edge(1, 0, 1, f64::NAN);
        assert!(matches!(EventStore::new(2, vec![bad.clone()]), Err(GraphError::NonFiniteTime(_))));
        bad.t = 1.0;
        bad.features = vec![1.0, 2.0];
        assert!(matches!(
            EventStore::new(2, vec![edge(0, 0, 1, 0.0), bad]),
            Err(GraphError::FeatureArity { .. })
        ));
        assert!(matches!(
            EventStore::new(2, vec![edge(1, 0, 1, 0.0), edge(1, 1, 0, 2.0)]),
            Err(GraphError::DuplicateEdge(_))
        ));
    }

    #[test]
    fn self_loop_counted_once() {
        let s = EventStore::new(1, vec![edge(0, 0, 0, 1.0)]).unwrap();
        assert_eq!(s.degree_at(0, 1.0).unwrap(), 1);
    }
}
