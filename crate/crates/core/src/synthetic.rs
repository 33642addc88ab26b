//! Planted-community temporal graphs for benchmarks and tests.
//!
//! Nodes are split into contiguous communities. Every node starts events as a
//! Poisson process whose mean gap depends on its community, and picks a
//! partner from its own community (or, with `cross_fraction`, from another
//! one). With `active_window` each node is only active during one interval of
//! the horizon, so the recency of a node's events carries information.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tgraph::{EdgeId, EventStore, GraphError, Label, NodeId, TemporalEdge};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub nodes: usize,
    /// Expected number of events.
    pub edges: usize,
    /// Mean inter-event gap of a node, one entry per community.
    pub community_gaps: Vec<f64>,
    /// Probability that a partner is drawn from another community.
    pub cross_fraction: f64,
    /// Fraction of the horizon during which each node is active; `1` keeps
    /// every node active throughout. Short windows keep degrees stationary
    /// over time.
    pub active_window: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            nodes: 500,
            edges: 2000,
            community_gaps: vec![1.0, 4.0],
            cross_fraction: 0.0,
            active_window: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Variant with normal cross-community traffic, so that community
    /// structure alone separates anomalies less well than event timing.
    pub fn time_structured() -> Self {
        Self {
            cross_fraction: 0.2,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub store: EventStore,
    pub community: Vec<usize>,
}

/// Community of `node` when `nodes` are split into `k` contiguous blocks.
pub fn community_of(node: NodeId, nodes: usize, k: usize) -> usize {
    node * k / nodes
}

/// Draws a graph; all edges are normal with one zero feature.
pub fn generate(config: &SyntheticConfig) -> Result<Synthetic, GraphError> {
    let n = config.nodes;
    let k = config.community_gaps.len();
    assert!(n >= 2 * k && k >= 1, "need at least two nodes per community");
    assert!(config.active_window > 0.0 && config.active_window <= 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let community: Vec<usize> = (0..n).map(|u| community_of(u, n, k)).collect();
    let rate: f64 = community.iter().map(|&c| 1.0 / config.community_gaps[c]).sum();
    let horizon = config.edges as f64 / (config.active_window * rate);
    let width = config.active_window * horizon;
    let start: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * (horizon - width)).collect();
    let active = |u: NodeId, t: f64| t >= start[u] && t <= start[u] + width;

    let mut raw: Vec<(f64, NodeId, NodeId)> = Vec::new();
    let members: Vec<Vec<NodeId>> = (0..k).map(|c| (0..n).filter(|&u| community[u] == c).collect()).collect();
    for u in 0..n {
        let gap = config.community_gaps[community[u]];
        let mut t = start[u];
        loop {
            t += -gap * (1.0 - rng.gen::<f64>()).ln();
            if t > start[u] + width {
                break;
            }
            let mut c = community[u];
            if k > 1 && rng.gen::<f64>() < config.cross_fraction {
                c = (c + 1 + rng.gen_range(0..k - 1)) % k;
            }
            let pool: Vec<NodeId> = members[c].iter().copied().filter(|&v| v != u && active(v, t)).collect();
            let pool = if pool.is_empty() {
                members[c].iter().copied().filter(|&v| v != u).collect()
            } else {
                pool
            };
            let v = pool[Uniform::new(0, pool.len()).sample(&mut rng)];
            raw.push((t, u, v));
        }
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let edges = raw
        .into_iter()
        .enumerate()
        .map(|(i, (t, src, dst))| TemporalEdge {
            id: EdgeId(i as u64),
            src,
            dst,
            t,
            features: vec![0.0],
            label: Label::Normal,
        })
        .collect();
    Ok(Synthetic {
        store: EventStore::new(n, edges)?,
        community,
    })
}
