//! Chronological splits, label budgets and the optimization loop.
//!
//! Splits are index ranges over the time-sorted edge sequence of one store.
//! Graph history stays global: sampling for a validation or test edge may read
//! any earlier event. Splits only decide which edges are scored, and labels
//! are read only from the edges picked by [`select_labels`].

mod fit;
mod model;

pub use fit::{batch_gradients, fit, fit_with, EpochRecord, FitResult, TrainConfig, GRAD_CHUNK};
pub use model::{item_seed, Model, ModelSpec, PairInput, PairValues};

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::evaluation::EvalError;
use crate::objective::ObjectiveError;
use crate::tensor::TensorError;
use crate::tgraph::{EdgeId, EventStore, GraphError, Label};

/// Switches that remove one model component each. All false is the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_local_mha: bool,
    pub no_global_mha: bool,
    pub no_time_embed: bool,
    pub no_ecc: bool,
    pub no_ego_context: bool,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("split {name} is empty ({edges} edges in store)")]
    EmptySplit { name: &'static str, edges: usize },
    #[error("invalid split fractions train={train} val={val}")]
    BadSplit { train: f64, val: f64 },
    #[error("label budget needs {needed} anomalies but the training split has {found}")]
    NotEnoughAnomalies { needed: usize, found: usize },
    #[error("label budget needs {needed} normal edges but the training split has {found}")]
    NotEnoughNormals { needed: usize, found: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Fractions of the time-sorted edge sequence; the test split takes the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.5, val: 0.2 }
    }
}

/// Contiguous ordinal ranges of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn by_name(&self, name: &str) -> Option<Range<usize>> {
        match name {
            "train" => Some(self.train.clone()),
            "val" | "validation" => Some(self.val.clone()),
            "test" => Some(self.test.clone()),
            _ => None,
        }
    }
}

/// Boundaries `floor(train |E|)` and `floor((train + val) |E|)`.
pub fn split_chronological(edges: usize, spec: &SplitSpec) -> Result<Splits> {
    let ok = spec.train > 0.0 && spec.val > 0.0 && spec.train + spec.val < 1.0;
    if !ok {
        return Err(TrainError::BadSplit {
            train: spec.train,
            val: spec.val,
        });
    }
    let a = (spec.train * edges as f64).floor() as usize;
    let b = ((spec.train + spec.val) * edges as f64).floor() as usize;
    let splits = Splits {
        train: 0..a,
        val: a..b,
        test: b..edges,
    };
    for (name, r) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if r.is_empty() {
            return Err(TrainError::EmptySplit { name, edges });
        }
    }
    Ok(splits)
}

/// Number of labeled anomalies and the selection seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBudget {
    pub anomalies: usize,
    pub seed: u64,
}

/// Labels visible to training: edge id to `0`/`1`.
pub type LabeledSet = BTreeMap<EdgeId, u8>;

/// Uniformly picks `budget.anomalies` anomalies and
/// `round(N_norm * n_anom / N_anom)` normals from the training range.
pub fn select_labels(store: &EventStore, train: Range<usize>, budget: &LabelBudget) -> Result<LabeledSet> {
    let edges = &store.edges()[train];
    let anomalies: Vec<EdgeId> = edges.iter().filter(|e| e.label == Label::Anomaly).map(|e| e.id).collect();
    let normals: Vec<EdgeId> = edges.iter().filter(|e| e.label == Label::Normal).map(|e| e.id).collect();
    let needed = budget.anomalies;
    if needed == 0 || anomalies.len() < needed {
        return Err(TrainError::NotEnoughAnomalies {
            needed: needed.max(1),
            found: anomalies.len(),
        });
    }
    let n_norm = (normals.len() as f64 * needed as f64 / anomalies.len() as f64).round() as usize;
    if n_norm > normals.len() {
        return Err(TrainError::NotEnoughNormals {
            needed: n_norm,
            found: normals.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut out = LabeledSet::new();
    for i in index::sample(&mut rng, anomalies.len(), needed) {
        out.insert(anomalies[i], 1);
    }
    for i in index::sample(&mut rng, normals.len(), n_norm) {
        out.insert(normals[i], 0);
    }
    Ok(out)
}

/// `1000 / (t_last - t_first)` over the training range, or 1 for a single
/// instant, so that training timestamps span `[0, 1000]`.
pub fn time_scale(store: &EventStore, train: Range<usize>) -> f64 {
    let edges = &store.edges()[train];
    match (edges.first(), edges.last()) {
        (Some(a), Some(b)) if b.t > a.t => 1000.0 / (b.t - a.t),
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tgraph::test_support::edge;

    fn labeled_store(anomalies: usize, normals: usize) -> EventStore {
        let edges = (0..anomalies + normals)
            .map(|i| {
                let mut e = edge(i as u64, i % 7, (i + 1) % 7, i as f64);
                e.label = if i < anomalies { Label::Anomaly } else { Label::Normal };
                e
            })
            .collect();
        EventStore::new(7, edges).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = split_chronological(10, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 2, 3));
        let s = split_chronological(3, &SplitSpec::default()).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..1, 1..2, 2..3));
        assert!(matches!(
            split_chronological(2, &SplitSpec::default()),
            Err(TrainError::EmptySplit { .. })
        ));
    }

    #[test]
    fn splits_are_ordered_in_time() {
        let store = labeled_store(0, 20);
        let s = split_chronological(store.len(), &SplitSpec::default()).unwrap();
        let max_train = store.edges()[s.train.clone()].iter().map(|e| e.t).fold(f64::MIN, f64::max);
        let min_test = store.edges()[s.test.clone()].iter().map(|e| e.t).fold(f64::MAX, f64::min);
        assert!(max_train < min_test);
    }

    #[test]
    fn label_budget_ratio() {
        let store = labeled_store(10, 100);
        let set = select_labels(&store, 0..110, &LabelBudget { anomalies: 1, seed: 0 }).unwrap();
        assert_eq!(set.values().filter(|&&y| y == 1).count(), 1);
        assert_eq!(set.values().filter(|&&y| y == 0).count(), 10);
    }

    #[test]
    fn label_budget_uci_counts() {
        let n_norm = (13838.0f64 * 3.0 / 415.0).round() as usize;
        assert_eq!(n_norm, 100);
    }

    #[test]
    fn full_budget_labels_everything() {
        let store = labeled_store(4, 9);
        let set = select_labels(&store, 0..13, &LabelBudget { anomalies: 4, seed: 3 }).unwrap();
        assert_eq!(set.len(), 13);
    }

    #[test]
    fn labels_come_from_training_range_only() {
        let store = labeled_store(3, 20);
        let set = select_labels(&store, 0..10, &LabelBudget { anomalies: 2, seed: 1 }).unwrap();
        assert!(set.keys().all(|id| id.0 < 10));
        let err = select_labels(&store, 5..23, &LabelBudget { anomalies: 1, seed: 1 }).unwrap_err();
        assert!(matches!(err, TrainError::NotEnoughAnomalies { needed: 1, found: 0 }));
    }

    #[test]
    fn time_scale_maps_training_span() {
        let store = labeled_store(0, 11);
        assert_eq!(time_scale(&store, 0..11), 100.0);
        assert_eq!(time_scale(&store, 0..1), 1.0);
    }
}
