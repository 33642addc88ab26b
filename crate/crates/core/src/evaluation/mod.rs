//! Rank-based ROC-AUC, split scoring and embedding export.

use std::io::{self, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::anomaly_score;
use crate::par;
use crate::tgraph::{EdgeId, EventStore};
use crate::trainer::{item_seed, Model, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("split is empty")]
    EmptySplit,
    #[error("non-finite score for edge {0:?}")]
    NonFiniteScore(EdgeId),
    #[error(transparent)]
    Model(#[from] Box<TrainError>),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Score and ground truth of one edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    pub edge_id: EdgeId,
    pub score: f64,
    pub label: u8,
}

/// ROC-AUC with mid-ranks for ties:
/// `(sum of positive ranks - P(P+1)/2) / (P N)`.
pub fn roc_auc(scored: &[ScoredEdge]) -> Result<f64> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label == 1).collect();
    auc_from_scores(&scores, &labels)
}

/// [`roc_auc`] over parallel slices.
pub fn auc_from_scores(scores: &[f64], positive: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels differ in length");
    let p = positive.iter().filter(|&&y| y).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClass {
            positives: p,
            negatives: n,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Loss argument `x` of every edge in `range`, sampled with `seed`.
pub fn represent_range(
    model: &Model,
    store: &EventStore,
    range: Range<usize>,
    seed: u64,
    parallel: bool,
) -> Result<Vec<Vec<f64>>> {
    let ordinals: Vec<usize> = range.collect();
    let no_ego_context = model.spec.loss.ablation.no_ego_context;
    par::map(ordinals.len(), parallel, |i| -> std::result::Result<Vec<f64>, TrainError> {
        let k = ordinals[i];
        let input = model.prepare(store, k, item_seed(seed, &[store.edge(k).id.0]))?;
        Ok(model.represent(&input)?.argument(no_ego_context))
    })
    .into_iter()
    .map(|r| r.map_err(|e| EvalError::Model(Box::new(e))))
    .collect()
}

/// Anomaly scores of the edges in `range` that carry a binary label.
pub fn score_range(
    model: &Model,
    store: &EventStore,
    range: Range<usize>,
    seed: u64,
    parallel: bool,
) -> Result<Vec<ScoredEdge>> {
    let edges = &store.edges()[range.clone()];
    let xs = represent_range(model, store, range, seed, parallel)?;
    let orientation = model.spec.loss.orientation;
    let mut out = Vec::with_capacity(xs.len());
    for (e, x) in edges.iter().zip(xs) {
        let Some(label) = e.label.as_binary() else {
            continue;
        };
        let score = anomaly_score(&x, orientation);
        if !score.is_finite() {
            return Err(EvalError::NonFiniteScore(e.id));
        }
        out.push(ScoredEdge {
            edge_id: e.id,
            score,
            label,
        });
    }
    Ok(out)
}

/// Summary of one scored split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub edges: usize,
    pub anomalies: usize,
    pub auc: f64,
    pub score_mean: f64,
    pub score_min: f64,
    pub score_max: f64,
}

/// Scores `range` and summarizes it.
pub fn evaluate(model: &Model, store: &EventStore, range: Range<usize>, seed: u64, parallel: bool) -> Result<SplitMetrics> {
    if range.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let scored = score_range(model, store, range, seed, parallel)?;
    metrics_of(&scored)
}

pub fn metrics_of(scored: &[ScoredEdge]) -> Result<SplitMetrics> {
    if scored.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let auc = roc_auc(scored)?;
    let scores = scored.iter().map(|s| s.score);
    Ok(SplitMetrics {
        edges: scored.len(),
        anomalies: scored.iter().filter(|s| s.label == 1).count(),
        auc,
        score_mean: scores.clone().sum::<f64>() / scored.len() as f64,
        score_min: scores.clone().fold(f64::INFINITY, f64::min),
        score_max: scores.fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Writes `edge_id \t label \t x_1 ... x_d` for every edge of `range`.
/// Edges without a binary label get label `-1`.
pub fn export_embeddings<W: Write>(
    model: &Model,
    store: &EventStore,
    range: Range<usize>,
    seed: u64,
    parallel: bool,
    mut out: W,
) -> Result<()> {
    if range.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let edges = &store.edges()[range.clone()];
    let xs = represent_range(model, store, range, seed, parallel)?;
    for (e, x) in edges.iter().zip(xs) {
        let label = e.label.as_binary().map_or(-1, i32::from);
        write!(out, "{}\t{}", e.id.0, label)?;
        for v in x {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
