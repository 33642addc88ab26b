//! Continuous-time graph transformer over sampled temporal subgraphs.
//!
//! Each layer runs masked local attention over the events incident to every
//! node, unmasked global attention over all nodes of the subgraph, and a
//! feed-forward block:
//!
//! ```text
//! z_loc = LocalMHA(z_prev)
//! z_glo = GlobalMHA(z_loc)
//! z     = LN(FFN(z_loc + z_glo)) + z_loc + z_glo
//! ```
//!
//! Local attention works on incidence rows: one row per (node, incident
//! event) pair plus one synthetic self-event per node with `dt = 0` and zero
//! features. Rows of the same node form a softmax segment, which is the
//! sparse form of masking every non-incident position with `-inf`.

mod model;

pub(crate) mod model_params {
    pub(crate) use super::model::{bias, weight};
}

pub use model::Encoder;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::tgraph::{EventStore, GraphError, SampledSubgraph};
use crate::trainer::AblationFlags;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("negative time difference {0}")]
    NegativeDt(f64),
    #[error("non-finite time difference")]
    NonFiniteDt,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// How local attention logits are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLogits {
    /// Query and key both come from the event vector: `(e W_Q) . (e W_K)`.
    #[default]
    EventSelf,
    /// Query from the attending node's previous state: `(z_i W_Q) . (e W_K)`.
    NodeQuery,
}

/// Shape and behaviour of one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub time_base: f64,
    pub degree_buckets: usize,
    pub feature_dim: usize,
    pub attention: AttentionLogits,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            heads: 4,
            time_dim: 128,
            time_base: 10000.0,
            degree_buckets: 256,
            feature_dim: 1,
            attention: AttentionLogits::EventSelf,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(EncoderError::Config(msg.to_string()));
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return bad("hidden, layers and heads must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden must be divisible by heads");
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be even and positive");
        }
        if !(self.time_base > 0.0 && self.time_base.is_finite()) {
            return bad("time_base must be positive");
        }
        if self.degree_buckets == 0 {
            return bad("degree_buckets must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Sinusoidal embedding: `out[2k] = sin(dt w_k)`, `out[2k+1] = cos(dt w_k)`
/// with `w_k = base^(-2k/dim)`.
pub fn time_embed(dt: f64, dim: usize, base: f64) -> Result<Vec<f64>> {
    if !dt.is_finite() {
        return Err(EncoderError::NonFiniteDt);
    }
    if dt < 0.0 {
        return Err(EncoderError::NegativeDt(dt));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = base.powf(-2.0 * k as f64 / dim as f64);
        let (s, c) = (dt * w).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Model-ready view of a sampled subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub num_nodes: usize,
    /// Degree-table row of each local node.
    pub degree_bucket: Vec<usize>,
    /// Local endpoints of the center edge.
    pub center: (usize, usize),
    /// Attending node of every incidence row; also its softmax segment.
    pub row_node: Vec<usize>,
    /// Opposite endpoint of every incidence row.
    pub row_other: Vec<usize>,
    /// Scaled time difference of every incidence row.
    pub row_dt: Vec<f64>,
    /// Edge features, `[rows, feature_dim]`.
    pub row_features: Tensor,
}

impl EncoderInput {
    /// Builds incidence rows from `sg`. Degrees are counted up to the center
    /// time, inclusive for ego graphs and strict for context graphs, and
    /// `dt` values are multiplied by `time_scale`.
    pub fn from_subgraph(sg: &SampledSubgraph, store: &EventStore, time_scale: f64, buckets: usize) -> Result<Self> {
        let n = sg.num_nodes();
        let t_c = sg.center_time();
        let mut degree_bucket = Vec::with_capacity(n);
        for &node in &sg.nodes {
            let deg = if sg.include_center {
                store.degree_at(node, t_c)?
            } else {
                store.degree_before(node, t_c)?
            };
            degree_bucket.push(deg.min(buckets - 1));
        }
        let f = store.feature_dim();
        let mut row_node: Vec<usize> = (0..n).collect();
        let mut row_other: Vec<usize> = (0..n).collect();
        let mut row_dt = vec![0.0; n];
        let mut feats = vec![0.0; n * f];
        for ev in &sg.events {
            let ends: &[(usize, usize)] = if ev.src == ev.dst {
                &[(ev.src, ev.dst)]
            } else {
                &[(ev.src, ev.dst), (ev.dst, ev.src)]
            };
            for &(node, other) in ends {
                row_node.push(node);
                row_other.push(other);
                row_dt.push(ev.dt * time_scale);
                feats.extend_from_slice(&ev.features);
            }
        }
        let rows = row_node.len();
        Ok(Self {
            num_nodes: n,
            degree_bucket,
            center: sg.center_local(),
            row_node,
            row_other,
            row_dt,
            row_features: Tensor::new(vec![rows, f], feats)?,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.row_node.len()
    }

    /// Time embeddings of all rows as a `[rows, dim]` matrix.
    pub fn time_matrix(&self, dim: usize, base: f64) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.num_rows() * dim);
        for &dt in &self.row_dt {
            data.extend(time_embed(dt, dim, base)?);
        }
        Ok(Tensor::new(vec![self.num_rows(), dim], data)?)
    }

    /// Relabels local node `i` as `perm[i]`, permuting every per-node array.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut degree_bucket = vec![0; self.num_nodes];
        for (i, &p) in perm.iter().enumerate() {
            degree_bucket[p] = self.degree_bucket[i];
        }
        Self {
            num_nodes: self.num_nodes,
            degree_bucket,
            center: (perm[self.center.0], perm[self.center.1]),
            row_node: self.row_node.iter().map(|&i| perm[i]).collect(),
            row_other: self.row_other.iter().map(|&i| perm[i]).collect(),
            row_dt: self.row_dt.clone(),
            row_features: self.row_features.clone(),
        }
    }
}
