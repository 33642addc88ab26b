use rand::Rng;

use super::{AttentionLogits, EncoderError, EncoderInput, ModelConfig, Result};
use crate::tensor::{glorot_uniform, ParamId, ParamStore, Tape, Tensor, Var};

/// Returns the id of `name`, inserting `init()` when absent. An existing
/// parameter must already have `shape`.
pub(crate) fn register(
    params: &mut ParamStore,
    name: String,
    shape: &[usize],
    init: impl FnOnce() -> Tensor,
) -> Result<ParamId> {
    if let Some(id) = params.id(&name) {
        let found = params.get(id).shape();
        if found != shape {
            return Err(EncoderError::ParamShape {
                name,
                expected: shape.to_vec(),
                found: found.to_vec(),
            });
        }
        return Ok(id);
    }
    Ok(params.insert(name, init())?)
}

pub(crate) fn weight<R: Rng>(params: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut R) -> Result<ParamId> {
    register(params, name, &[rows, cols], || glorot_uniform(rows, cols, rng))
}

pub(crate) fn bias(params: &mut ParamStore, name: String, len: usize, value: f64) -> Result<ParamId> {
    register(params, name, &[len], || Tensor::filled(&[len], value))
}

#[derive(Debug, Clone)]
struct LocalParams {
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct GlobalParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
enum LocalBlock {
    Attention(LocalParams),
    Bypass(ParamId),
}

#[derive(Debug, Clone)]
struct LayerParams {
    local: LocalBlock,
    global: Option<GlobalParams>,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

/// One graph encoder. Its parameters live in a shared [`ParamStore`] under
/// `prefix`; only the parameters the configured variant uses are created.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub prefix: String,
    pub config: ModelConfig,
    degree: ParamId,
    layers: Vec<LayerParams>,
}

impl Encoder {
    /// Registers (or attaches to existing) parameters named `prefix.*`.
    pub fn new<R: Rng>(prefix: &str, config: ModelConfig, params: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let name = |s: &str| format!("{prefix}.{s}");
        let degree = weight(params, name("degree"), config.degree_buckets, d, rng)?;
        let time = if config.ablation.no_time_embed { 0 } else { config.time_dim };
        let in_dim = config.feature_dim + 2 * d + time;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| name(&format!("l{l}.{s}"));
            let local = if config.ablation.no_local_mha {
                LocalBlock::Bypass(weight(params, n("bypass"), d, d, rng)?)
            } else {
                LocalBlock::Attention(LocalParams {
                    mlp_w1: weight(params, n("mlp.w1"), in_dim, d, rng)?,
                    mlp_b1: bias(params, n("mlp.b1"), d, 0.0)?,
                    mlp_w2: weight(params, n("mlp.w2"), d, d, rng)?,
                    mlp_b2: bias(params, n("mlp.b2"), d, 0.0)?,
                    wq: weight(params, n("local.wq"), d, d, rng)?,
                    wk: weight(params, n("local.wk"), d, d, rng)?,
                    wv: weight(params, n("local.wv"), d, d, rng)?,
                    wo: weight(params, n("local.wo"), d, d, rng)?,
                })
            };
            let global = if config.ablation.no_global_mha {
                None
            } else {
                Some(GlobalParams {
                    wq: weight(params, n("global.wq"), d, d, rng)?,
                    wk: weight(params, n("global.wk"), d, d, rng)?,
                    wv: weight(params, n("global.wv"), d, d, rng)?,
                    wo: weight(params, n("global.wo"), d, d, rng)?,
                })
            };
            layers.push(LayerParams {
                local,
                global,
                ffn_w1: weight(params, n("ffn.w1"), d, 4 * d, rng)?,
                ffn_b1: bias(params, n("ffn.b1"), 4 * d, 0.0)?,
                ffn_w2: weight(params, n("ffn.w2"), 4 * d, d, rng)?,
                ffn_b2: bias(params, n("ffn.b2"), d, 0.0)?,
                ln_gamma: bias(params, n("ln.gamma"), d, 1.0)?,
                ln_beta: bias(params, n("ln.beta"), d, 0.0)?,
            });
        }
        Ok(Self {
            prefix: prefix.to_string(),
            config,
            degree,
            layers,
        })
    }

    /// `z^0`: the degree-table row of every node.
    pub fn initial_embeddings(&self, tape: &mut Tape, params: &ParamStore, input: &EncoderInput) -> Result<Var> {
        let table = tape.param(params, self.degree);
        Ok(tape.gather_rows(table, &input.degree_bucket)?)
    }

    /// Masked multi-head attention of every node over its incidence rows.
    /// Under the local-attention ablation this is a plain linear map of
    /// `z_prev`.
    pub fn local_mha(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        input: &EncoderInput,
        z_prev: Var,
        layer: usize,
    ) -> Result<Var> {
        let p = match &self.layers[layer].local {
            LocalBlock::Bypass(w) => {
                let w = tape.param(params, *w);
                return Ok(tape.matmul(z_prev, w)?);
            }
            LocalBlock::Attention(p) => p,
        };
        let cfg = &self.config;
        let z_node = tape.gather_rows(z_prev, &input.row_node)?;
        let e = self.event_vectors(tape, params, input, z_prev, z_node, p)?;
        let (wq, wk, wv, wo) = (
            tape.param(params, p.wq),
            tape.param(params, p.wk),
            tape.param(params, p.wv),
            tape.param(params, p.wo),
        );
        let q_src = match cfg.attention {
            AttentionLogits::EventSelf => e,
            AttentionLogits::NodeQuery => z_node,
        };
        let q = tape.matmul(q_src, wq)?;
        let k = tape.matmul(e, wk)?;
        let v = tape.matmul(e, wv)?;
        let logits = tape.head_dot(q, k, cfg.heads)?;
        let logits = tape.scale(logits, 1.0 / (cfg.head_dim() as f64).sqrt())?;
        let weights = tape.segment_softmax(logits, &input.row_node, input.num_nodes)?;
        let weighted = tape.head_scale(weights, v)?;
        let pooled = tape.segment_sum(weighted, &input.row_node, input.num_nodes)?;
        Ok(tape.matmul(pooled, wo)?)
    }

    /// `MLP(concat(x_ij, z_i, z_j, phi(dt)))` for every incidence row.
    fn event_vectors(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        input: &EncoderInput,
        z_prev: Var,
        z_node: Var,
        p: &LocalParams,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut parts = Vec::with_capacity(4);
        if cfg.feature_dim > 0 {
            parts.push(tape.constant(input.row_features.clone()));
        }
        parts.push(z_node);
        parts.push(tape.gather_rows(z_prev, &input.row_other)?);
        if !cfg.ablation.no_time_embed {
            parts.push(tape.constant(input.time_matrix(cfg.time_dim, cfg.time_base)?));
        }
        let x = tape.concat_cols(&parts)?;
        let (w1, b1, w2, b2) = (
            tape.param(params, p.mlp_w1),
            tape.param(params, p.mlp_b1),
            tape.param(params, p.mlp_w2),
            tape.param(params, p.mlp_b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, w2)?;
        Ok(tape.add_row(h, b2)?)
    }

    /// Unmasked multi-head self-attention over all node rows of `z`.
    pub fn global_mha(&self, tape: &mut Tape, params: &ParamStore, z: Var, layer: usize) -> Result<Option<Var>> {
        let Some(p) = &self.layers[layer].global else {
            return Ok(None);
        };
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let (wq, wk, wv, wo) = (
            tape.param(params, p.wq),
            tape.param(params, p.wk),
            tape.param(params, p.wv),
            tape.param(params, p.wo),
        );
        let q = tape.matmul(z, wq)?;
        let k = tape.matmul(z, wk)?;
        let v = tape.matmul(z, wv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let a = tape.softmax_rows(s, None)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        Ok(Some(tape.matmul(cat, wo)?))
    }

    /// `z^l = LN(FFN(z_loc + z_glo)) + z_loc + z_glo`.
    pub fn layer(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        input: &EncoderInput,
        z_prev: Var,
        layer: usize,
    ) -> Result<Var> {
        let lp = &self.layers[layer];
        let z_loc = self.local_mha(tape, params, input, z_prev, layer)?;
        let s = match self.global_mha(tape, params, z_loc, layer)? {
            Some(z_glo) => tape.add(z_loc, z_glo)?,
            None => z_loc,
        };
        let (w1, b1, w2, b2) = (
            tape.param(params, lp.ffn_w1),
            tape.param(params, lp.ffn_b1),
            tape.param(params, lp.ffn_w2),
            tape.param(params, lp.ffn_b2),
        );
        let f = tape.matmul(s, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        let (gamma, beta) = (tape.param(params, lp.ln_gamma), tape.param(params, lp.ln_beta));
        let n = tape.layer_norm(f, gamma, beta)?;
        Ok(tape.add(n, s)?)
    }

    /// Node representations after all layers, `[nodes, hidden]`.
    pub fn encode(&self, tape: &mut Tape, params: &ParamStore, input: &EncoderInput) -> Result<Var> {
        let mut z = self.initial_embeddings(tape, params, input)?;
        for l in 0..self.layers.len() {
            z = self.layer(tape, params, input, z, l)?;
        }
        Ok(z)
    }
}
