//! Structural anomaly injection: spectral clustering of the static projection
//! followed by insertion of cross-cluster edges that never occurred.

mod spectral;

pub use spectral::{kmeans, nearest_center, spectral_embedding};

use std::collections::HashSet;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tgraph::{EdgeId, EventStore, GraphError, Label, NodeId, TemporalEdge};

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("cluster count {k} exceeds node count {nodes}")]
    TooManyClusters { k: usize, nodes: usize },
    #[error("cluster count must be at least 1")]
    NoClusters,
    #[error("injection rate {0} must be finite and non-negative")]
    BadRate(f64),
    #[error("input already contains {0} labeled anomalies")]
    PreLabeled(usize),
    #[error("need {needed} cross-cluster non-edges but only {available} exist (deficit {})", needed - available)]
    Deficit { needed: usize, available: usize },
    #[error("interval [{prev}, {next}] is reversed")]
    ReversedInterval { prev: f64, next: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Node to cluster map with ids in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn cluster_of(&self, node: NodeId) -> usize {
        self.assignment[node]
    }

    /// Writes `node_id\tcluster_id` lines.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (node, c) in self.assignment.iter().enumerate() {
            writeln!(out, "{node}\t{c}")?;
        }
        Ok(())
    }
}

/// Unweighted, undirected neighbor lists of the static projection, ignoring
/// self-loops and edge multiplicity.
pub fn static_projection(store: &EventStore) -> Vec<Vec<NodeId>> {
    let mut pairs: HashSet<(NodeId, NodeId)> = HashSet::new();
    for e in store.edges() {
        if e.src != e.dst {
            pairs.insert((e.src.min(e.dst), e.src.max(e.dst)));
        }
    }
    let mut adj = vec![Vec::new(); store.num_nodes()];
    for (a, b) in pairs {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj.iter_mut().for_each(|v| v.sort_unstable());
    adj
}

/// Spectral clustering of the static projection into `k` groups.
///
/// Nodes without any event have a zero embedding; they do not take part in
/// k-means and are assigned to the centroid nearest to the origin.
pub fn spectral_cluster(store: &EventStore, k: usize, seed: u64) -> Result<ClusterAssignment, InjectError> {
    let n = store.num_nodes();
    if k == 0 {
        return Err(InjectError::NoClusters);
    }
    if k > n {
        return Err(InjectError::TooManyClusters { k, nodes: n });
    }
    if k == 1 {
        return Ok(ClusterAssignment {
            assignment: vec![0; n],
            k,
        });
    }
    let adj = static_projection(store);
    let emb = spectral_embedding(&adj, k, seed);
    let active: Vec<usize> = (0..n).filter(|&i| !adj[i].is_empty()).collect();
    let points: Vec<Vec<f64>> = active.iter().map(|&i| emb[i].clone()).collect();
    let (labels, centers) = kmeans(&points, k, seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut assignment = vec![0; n];
    if centers.is_empty() {
        return Ok(ClusterAssignment { assignment, k });
    }
    let origin_cluster = nearest_center(&vec![0.0; k], &centers);
    assignment.iter_mut().for_each(|c| *c = origin_cluster);
    for (&i, &l) in active.iter().zip(&labels) {
        assignment[i] = l;
    }
    Ok(ClusterAssignment { assignment, k })
}

/// Uniform draw in `[prev, next]`.
pub fn interpolate_timestamp<R: Rng + ?Sized>(prev: f64, next: f64, rng: &mut R) -> Result<f64, InjectError> {
    if prev > next || !prev.is_finite() || !next.is_finite() {
        return Err(InjectError::ReversedInterval { prev, next });
    }
    if prev == next {
        return Ok(prev);
    }
    let u: f64 = rng.gen();
    Ok((prev + u * (next - prev)).clamp(prev, next))
}

/// Result of [`inject_anomalies`].
#[derive(Debug, Clone)]
pub struct Injection {
    pub store: EventStore,
    pub clusters: ClusterAssignment,
    pub injected: Vec<EdgeId>,
}

/// Number of edges injected for a given original size: `round(rate * edges)`,
/// halves rounded away from zero.
pub fn injection_count(rate: f64, edges: usize) -> usize {
    (rate * edges as f64).round() as usize
}

/// Adds `round(rate * |E|)` anomalous edges between nodes of different
/// clusters that never interacted. Originals become `Normal`, injected edges
/// `Anomaly` with zero features and ids above every original id.
pub fn inject_anomalies(store: &EventStore, rate: f64, k: usize, seed: u64) -> Result<Injection, InjectError> {
    if !rate.is_finite() || rate < 0.0 {
        return Err(InjectError::BadRate(rate));
    }
    let labeled = store.edges().iter().filter(|e| e.label == Label::Anomaly).count();
    if labeled > 0 {
        return Err(InjectError::PreLabeled(labeled));
    }
    let needed = injection_count(rate, store.len());
    let clusters = spectral_cluster(store, k, seed)?;
    let normal = store.relabeled(|_| Label::Normal);
    if needed == 0 {
        return Ok(Injection {
            store: normal,
            clusters,
            injected: Vec::new(),
        });
    }

    let pairs = draw_pairs(store, &clusters, needed, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let times: Vec<f64> = store.edges().iter().map(|e| e.t).collect();
    let (first, last) = (times[0], times[times.len() - 1]);
    let mut next_id = store.edges().iter().map(|e| e.id.0).max().map_or(0, |m| m + 1);
    let mut edges = normal.edges().to_vec();
    let mut injected = Vec::with_capacity(needed);
    for (src, dst) in pairs {
        let pos = rng.gen_range(0..=times.len());
        let prev = if pos == 0 { first } else { times[pos - 1] };
        let next = if pos == times.len() { last } else { times[pos] };
        let t = interpolate_timestamp(prev, next, &mut rng)?;
        let id = EdgeId(next_id);
        next_id += 1;
        injected.push(id);
        edges.push(TemporalEdge {
            id,
            src,
            dst,
            t,
            features: vec![0.0; store.feature_dim()],
            label: Label::Anomaly,
        });
    }
    Ok(Injection {
        store: EventStore::new(store.num_nodes(), edges)?,
        clusters,
        injected,
    })
}

/// Draws `needed` distinct unordered node pairs that cross clusters and are
/// absent from the store.
fn draw_pairs(
    store: &EventStore,
    clusters: &ClusterAssignment,
    needed: usize,
    seed: u64,
) -> Result<Vec<(NodeId, NodeId)>, InjectError> {
    let n = store.num_nodes();
    let existing: HashSet<(NodeId, NodeId)> = store
        .edges()
        .iter()
        .map(|e| (e.src.min(e.dst), e.src.max(e.dst)))
        .collect();
    let mut sizes = vec![0usize; clusters.k];
    clusters.assignment.iter().for_each(|&c| sizes[c] += 1);
    let same: usize = sizes.iter().map(|&s| s * s.saturating_sub(1) / 2).sum();
    let cross_total = n * n.saturating_sub(1) / 2 - same;
    let cross_existing = existing
        .iter()
        .filter(|&&(a, b)| a != b && clusters.assignment[a] != clusters.assignment[b])
        .count();
    let available = cross_total - cross_existing;
    if available < needed {
        return Err(InjectError::Deficit { needed, available });
    }

    let eligible = |a: NodeId, b: NodeId| {
        a != b && clusters.assignment[a] != clusters.assignment[b] && !existing.contains(&(a.min(b), a.max(b)))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_pairs = (n * n.saturating_sub(1) / 2).max(1);
    if (available as f64) / (total_pairs as f64) < 0.05 {
        let mut all = Vec::with_capacity(available);
        for a in 0..n {
            for b in a + 1..n {
                if eligible(a, b) {
                    all.push((a, b));
                }
            }
        }
        let picks = rand::seq::index::sample(&mut rng, all.len(), needed);
        return Ok(picks
            .into_iter()
            .map(|i| {
                let (a, b) = all[i];
                if rng.gen::<bool>() {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect());
    }
    let mut chosen = HashSet::with_capacity(needed);
    let mut out = Vec::with_capacity(needed);
    while out.len() < needed {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if eligible(a, b) && chosen.insert((a.min(b), a.max(b))) {
            out.push((a, b));
        }
    }
    Ok(out)
}
