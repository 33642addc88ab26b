use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EdgeId, EventStore, GraphError, NodeId, TemporalEdge};

/// Per-hop fan-out caps for causal neighborhood sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Maximum events sampled per frontier node at each hop.
    pub fanouts: Vec<usize>,
    /// When set, the two endpoints of the center edge draw their first-hop
    /// events from one shared budget instead of one budget each.
    pub shared_endpoint_budget: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            fanouts: vec![25, 10, 5],
            shared_endpoint_budget: false,
        }
    }
}

/// A sampled event with endpoints expressed as local node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledEvent {
    pub edge_id: EdgeId,
    pub src: usize,
    pub dst: usize,
    pub t: f64,
    /// `t_center - t`, never negative.
    pub dt: f64,
    pub features: Vec<f64>,
    /// Frontier hop that contributed the event (0 for the center edge).
    pub hop: usize,
}

/// Causally sampled neighborhood of a center edge.
///
/// Nodes are deduplicated and listed with the center endpoints first. With
/// `include_center` the subgraph is the ego graph and contains the center edge;
/// otherwise it is the context graph and holds only events strictly earlier
/// than the center timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSubgraph {
    pub center: TemporalEdge,
    pub include_center: bool,
    pub nodes: Vec<NodeId>,
    pub hop_of_node: Vec<usize>,
    pub events: Vec<SampledEvent>,
    /// Event indices incident to each local node.
    pub adjacency: Vec<Vec<usize>>,
}

impl SampledSubgraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Local indices of the center edge's `(src, dst)`.
    pub fn center_local(&self) -> (usize, usize) {
        let dst = if self.center.dst == self.center.src { 0 } else { 1 };
        (0, dst)
    }

    pub fn center_time(&self) -> f64 {
        self.center.t
    }
}

/// Samples the ego (`include_center`) or context graph around `center`.
///
/// Breadth-first from both endpoints: at hop `h` every frontier node draws up
/// to `fanouts[h]` of its causal neighbor events uniformly without
/// replacement. Newly reached nodes form the next frontier. The result is a
/// pure function of the inputs and `seed`.
pub fn sample_subgraph(
    store: &EventStore,
    center: &TemporalEdge,
    config: &SamplerConfig,
    include_center: bool,
    seed: u64,
) -> Result<SampledSubgraph, GraphError> {
    for node in [center.src, center.dst] {
        store.incident(node)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_c = center.t;
    let strict = !include_center;
    let center_ordinal = store.ordinal_of(center.id);

    let mut builder = Builder::default();
    builder.node(center.src, 0);
    builder.node(center.dst, 0);
    if include_center {
        builder.events.push(SampledEvent {
            edge_id: center.id,
            src: builder.local[&center.src],
            dst: builder.local[&center.dst],
            t: t_c,
            dt: 0.0,
            features: center.features.clone(),
            hop: 0,
        });
        if let Some(k) = center_ordinal {
            builder.seen.insert(k);
        }
    }

    let mut frontier: Vec<NodeId> = builder.nodes.clone();
    for (hop, &cap) in config.fanouts.iter().enumerate() {
        let groups: Vec<Vec<NodeId>> = if hop == 0 && config.shared_endpoint_budget {
            vec![frontier.clone()]
        } else {
            frontier.iter().map(|&n| vec![n]).collect()
        };
        let mut next = Vec::new();
        for group in groups {
            let mut candidates: Vec<(usize, NodeId)> = Vec::new();
            let mut in_group = HashSet::new();
            for &node in &group {
                for (k, _) in store.neighbors_before(node, t_c, strict)? {
                    if Some(k) != center_ordinal && in_group.insert(k) {
                        candidates.push((k, node));
                    }
                }
            }
            let take = cap.min(candidates.len());
            let mut picked = index::sample(&mut rng, candidates.len(), take).into_vec();
            picked.sort_unstable();
            for i in picked {
                let (k, from) = candidates[i];
                if !builder.seen.insert(k) {
                    continue;
                }
                let e = store.edge(k);
                let other = e.other_end(from);
                if builder.node(other, hop + 1) {
                    next.push(other);
                }
                builder.events.push(SampledEvent {
                    edge_id: e.id,
                    src: builder.local[&e.src],
                    dst: builder.local[&e.dst],
                    t: e.t,
                    dt: t_c - e.t,
                    features: e.features.clone(),
                    hop,
                });
            }
        }
        frontier = next;
    }

    let mut adjacency = vec![Vec::new(); builder.nodes.len()];
    for (k, ev) in builder.events.iter().enumerate() {
        adjacency[ev.src].push(k);
        if ev.dst != ev.src {
            adjacency[ev.dst].push(k);
        }
    }
    Ok(SampledSubgraph {
        center: center.clone(),
        include_center,
        nodes: builder.nodes,
        hop_of_node: builder.hops,
        events: builder.events,
        adjacency,
    })
}

#[derive(Default)]
struct Builder {
    nodes: Vec<NodeId>,
    hops: Vec<usize>,
    local: HashMap<NodeId, usize>,
    events: Vec<SampledEvent>,
    seen: HashSet<usize>,
}

impl Builder {
    /// Adds `node` at `hop` unless present; returns whether it was new.
    fn node(&mut self, node: NodeId, hop: usize) -> bool {
        if self.local.contains_key(&node) {
            return false;
        }
        self.local.insert(node, self.nodes.len());
        self.nodes.push(node);
        self.hops.push(hop);
        true
    }
}
