//! Readout heads, the ego-context hypersphere loss, the ego-context
//! contrastive loss and the anomaly score.
//!
//! With `r = ||x||^2` and `l(x) = exp(-r)`, the hypersphere term for a label
//! `y` is `y r - (1 - y) log(1 - exp(-r))` in the as-written orientation and
//! the same expression with `y` and `1 - y` exchanged in the ruff orientation.
//! The score is the probability the active orientation assigns to the
//! anomaly class.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::model_params::{bias, weight};
use crate::encoder::EncoderError;
use crate::tensor::{ParamId, ParamStore, Tape, TensorError, Var};
use crate::trainer::AblationFlags;

/// Floor applied to `r` inside the hypersphere loss.
pub const R_FLOOR: f64 = 1e-8;
/// Clamp margin for the similarity inside the contrastive loss.
pub const SIM_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {0} is not binary")]
    BadLabel(u8),
    #[error("row {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Which class the hypersphere center represents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Anomalies (`y = 1`) are pulled to the center; `score = exp(-r)`.
    #[default]
    AsWritten,
    /// Normals are pulled to the center; `score = 1 - exp(-r)`.
    Ruff,
}

#[derive(Debug, Clone)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn new<R: Rng>(params: &mut ParamStore, prefix: &str, d_in: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: weight(params, format!("{prefix}.w1"), d_in, d, rng)?,
            b1: bias(params, format!("{prefix}.b1"), d, 0.0)?,
            w2: weight(params, format!("{prefix}.w2"), d, d, rng)?,
            b2: bias(params, format!("{prefix}.b2"), d, 0.0)?,
        })
    }

    fn apply(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(params, self.w1),
            tape.param(params, self.b1),
            tape.param(params, self.w2),
            tape.param(params, self.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, w2)?;
        Ok(tape.add_row(h, b2)?)
    }
}

/// Readout `f_o` (`2d -> d -> d`) and, unless the contrastive loss is
/// ablated, the projector `f_p` (`d -> d -> d`).
#[derive(Debug, Clone)]
pub struct HeadParams {
    f_o: Mlp,
    f_p: Option<Mlp>,
    pub hidden: usize,
}

impl HeadParams {
    pub fn new<R: Rng>(hidden: usize, with_projector: bool, params: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let f_o = Mlp::new(params, "head.fo", 2 * hidden, hidden, rng)?;
        let f_p = if with_projector {
            Some(Mlp::new(params, "head.fp", hidden, hidden, rng)?)
        } else {
            None
        };
        Ok(Self { f_o, f_p, hidden })
    }

    pub fn has_projector(&self) -> bool {
        self.f_p.is_some()
    }

    /// `f_p(h)`; `h` itself when no projector exists.
    pub fn project(&self, tape: &mut Tape, params: &ParamStore, h: Var) -> Result<Var> {
        match &self.f_p {
            Some(mlp) => mlp.apply(tape, params, h),
            None => Ok(h),
        }
    }

    /// Ids of the projector parameters, if any.
    pub fn projector_ids(&self) -> Vec<ParamId> {
        self.f_p.iter().flat_map(|m| [m.w1, m.b1, m.w2, m.b2]).collect()
    }
}

/// `f_o(concat(z[src], z[dst]))` as a `[1, d]` row.
pub fn readout(tape: &mut Tape, params: &ParamStore, heads: &HeadParams, z: Var, src: usize, dst: usize) -> Result<Var> {
    let rows = tape.shape(z)[0];
    for index in [src, dst] {
        if index >= rows {
            return Err(ObjectiveError::RowOutOfRange { index, rows });
        }
    }
    let a = tape.gather_rows(z, &[src])?;
    let b = tape.gather_rows(z, &[dst])?;
    let cat = tape.concat_cols(&[a, b])?;
    heads.f_o.apply(tape, params, cat)
}

/// `max(||x||^2, R_FLOOR)`.
fn clamped_r(tape: &mut Tape, x: Var) -> Result<Var> {
    let r = tape.sq_norm(x)?;
    Ok(tape.clamp(r, R_FLOOR, f64::MAX)?)
}

/// Hypersphere loss of one representation `x` with label `y`.
pub fn echsc_loss(tape: &mut Tape, x: Var, y: u8, orientation: Orientation) -> Result<Var> {
    if y > 1 {
        return Err(ObjectiveError::BadLabel(y));
    }
    let r = clamped_r(tape, x)?;
    let pulled = match orientation {
        Orientation::AsWritten => y == 1,
        Orientation::Ruff => y == 0,
    };
    if pulled {
        Ok(r)
    } else {
        let l = tape.log1mexp(r)?;
        Ok(tape.scale(l, -1.0)?)
    }
}

/// `clamp((cos(a, b) + 1) / 2, SIM_EPS, 1 - SIM_EPS)`.
pub fn similarity(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let c = tape.cosine(a, b)?;
    let s = tape.affine(c, 0.5, 0.5)?;
    Ok(tape.clamp(s, SIM_EPS, 1.0 - SIM_EPS)?)
}

/// `-log S(ego, ctx) - log(1 - S(ego, neg))` on projected representations.
pub fn ecc_loss(tape: &mut Tape, p_ego: Var, p_ctx: Var, p_neg: Var) -> Result<Var> {
    let pos = similarity(tape, p_ego, p_ctx)?;
    let neg = similarity(tape, p_ego, p_neg)?;
    let log_pos = tape.log(pos)?;
    let one_minus = tape.affine(neg, -1.0, 1.0)?;
    let log_neg = tape.log(one_minus)?;
    let sum = tape.add(log_pos, log_neg)?;
    Ok(tape.scale(sum, -1.0)?)
}

/// Anomaly score of a representation `x` (`h_ego - h_ctx`, or `h_ego` when
/// the ego-context difference is ablated).
pub fn anomaly_score(x: &[f64], orientation: Orientation) -> f64 {
    let r: f64 = x.iter().map(|v| v * v).sum();
    match orientation {
        Orientation::AsWritten => (-r).exp(),
        Orientation::Ruff => -(-r).exp_m1(),
    }
}

/// Loss settings shared by every batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub orientation: Orientation,
    /// Restricts the hypersphere term to labeled edges.
    pub labeled_only: bool,
    pub ablation: AblationFlags,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            orientation: Orientation::AsWritten,
            labeled_only: false,
            ablation: AblationFlags::default(),
        }
    }
}

impl LossConfig {
    /// `lambda`, or 0 under the contrastive ablation.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_ecc {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Ego and context representations of one batch edge.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    pub h_ego: Var,
    pub h_ctx: Var,
    /// `None` for unlabeled edges.
    pub label: Option<u8>,
}

/// The loss argument `x`.
pub fn pair_argument(tape: &mut Tape, pair: &PairVars, ablation: &AblationFlags) -> Result<Var> {
    if ablation.no_ego_context {
        Ok(pair.h_ego)
    } else {
        Ok(tape.sub(pair.h_ego, pair.h_ctx)?)
    }
}

/// `mean(echsc) + lambda * mean(ecc)` over a batch.
///
/// Unlabeled edges enter the hypersphere term with `y = 0` unless
/// `labeled_only` is set. The contrastive negative of edge `i` is the context
/// of edge `(i + 1) mod B`; batches of one edge skip the contrastive term.
pub fn total_loss(
    tape: &mut Tape,
    params: &ParamStore,
    heads: &HeadParams,
    batch: &[PairVars],
    cfg: &LossConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let lambda = cfg.effective_lambda();
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ObjectiveError::BadLambda(cfg.lambda));
    }
    let mut hsc = Vec::with_capacity(batch.len());
    for pair in batch {
        if cfg.labeled_only && pair.label.is_none() {
            continue;
        }
        let x = pair_argument(tape, pair, &cfg.ablation)?;
        hsc.push(echsc_loss(tape, x, pair.label.unwrap_or(0), cfg.orientation)?);
    }
    let mut total = if hsc.is_empty() {
        tape.constant(crate::tensor::Tensor::from_parts(Vec::new(), vec![0.0]))
    } else {
        let s = tape.add_n(&hsc)?;
        tape.scale(s, 1.0 / hsc.len() as f64)?
    };
    if lambda > 0.0 && batch.len() > 1 {
        let mut ego = Vec::with_capacity(batch.len());
        let mut ctx = Vec::with_capacity(batch.len());
        for pair in batch {
            ego.push(heads.project(tape, params, pair.h_ego)?);
            ctx.push(heads.project(tape, params, pair.h_ctx)?);
        }
        let b = batch.len();
        let mut terms = Vec::with_capacity(b);
        for i in 0..b {
            terms.push(ecc_loss(tape, ego[i], ctx[i], ctx[(i + 1) % b])?);
        }
        let s = tape.add_n(&terms)?;
        let ecc = tape.scale(s, lambda / b as f64)?;
        total = tape.add(total, ecc)?;
    }
    Ok(total)
}
