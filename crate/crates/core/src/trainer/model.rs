use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::encoder::{EncoderInput, Encoder, ModelConfig};
use crate::objective::{readout, HeadParams, LossConfig};
use crate::tensor::{ParamStore, Tape, Var};
use crate::tgraph::{sample_subgraph, EventStore, SamplerConfig};

const SPEC_KEY: &str = "model_spec";

/// Everything needed to rebuild a model around a parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    /// Multiplier applied to raw time differences.
    pub time_scale: f64,
}

/// Ego encoder, context encoder and heads over one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub ego: Encoder,
    pub ctx: Encoder,
    pub heads: HeadParams,
}

/// Sampled and prepared inputs of one edge.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub ego: EncoderInput,
    pub ctx: EncoderInput,
}

/// Graph representations of one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct PairValues {
    pub h_ego: Vec<f64>,
    pub h_ctx: Vec<f64>,
}

impl PairValues {
    /// The hypersphere argument: `h_ego - h_ctx`, or `h_ego` when the
    /// ego-context difference is ablated.
    pub fn argument(&self, no_ego_context: bool) -> Vec<f64> {
        if no_ego_context {
            self.h_ego.clone()
        } else {
            self.h_ego.iter().zip(&self.h_ctx).map(|(a, b)| a - b).collect()
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic per-item seed derived from a base seed and a key sequence.
pub fn item_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(base), |acc, &k| splitmix(acc ^ splitmix(k)))
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ego = Encoder::new("ego", spec.encoder.clone(), &mut params, &mut rng)?;
        let ctx = Encoder::new("ctx", spec.encoder.clone(), &mut params, &mut rng)?;
        let with_projector = !spec.loss.ablation.no_ecc;
        let heads = HeadParams::new(spec.encoder.hidden, with_projector, &mut params, &mut rng)?;
        let spec_json = serde_json::to_string(&spec).map_err(|e| TrainError::Metadata(e.to_string()))?;
        params.set_meta(SPEC_KEY, spec_json);
        Ok(Self {
            spec,
            params,
            ego,
            ctx,
            heads,
        })
    }

    /// Rebuilds a model from a checkpointed store.
    pub fn from_params(mut params: ParamStore) -> Result<Self> {
        let raw = params
            .meta()
            .get(SPEC_KEY)
            .ok_or_else(|| TrainError::Metadata(format!("missing `{SPEC_KEY}`")))?;
        let spec: ModelSpec = serde_json::from_str(raw).map_err(|e| TrainError::Metadata(e.to_string()))?;
        let count = params.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ego = Encoder::new("ego", spec.encoder.clone(), &mut params, &mut rng)?;
        let ctx = Encoder::new("ctx", spec.encoder.clone(), &mut params, &mut rng)?;
        let heads = HeadParams::new(spec.encoder.hidden, !spec.loss.ablation.no_ecc, &mut params, &mut rng)?;
        if params.len() != count {
            return Err(TrainError::Metadata("checkpoint is missing parameters".into()));
        }
        Ok(Self {
            spec,
            params,
            ego,
            ctx,
            heads,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    /// Samples the ego and context graphs of edge `ordinal` with one seed.
    pub fn prepare(&self, store: &EventStore, ordinal: usize, seed: u64) -> Result<PairInput> {
        let center = store.edge(ordinal);
        let buckets = self.spec.encoder.degree_buckets;
        let scale = self.spec.time_scale;
        let ego = sample_subgraph(store, center, &self.spec.sampler, true, seed)?;
        let ctx = sample_subgraph(store, center, &self.spec.sampler, false, seed)?;
        Ok(PairInput {
            ego: EncoderInput::from_subgraph(&ego, store, scale, buckets)?,
            ctx: EncoderInput::from_subgraph(&ctx, store, scale, buckets)?,
        })
    }

    /// Records both encoders and the readout on `tape`; returns `(h_ego, h_ctx)`.
    pub fn forward(&self, tape: &mut Tape, input: &PairInput) -> Result<(Var, Var)> {
        let z_ego = self.ego.encode(tape, &self.params, &input.ego)?;
        let (s, d) = input.ego.center;
        let h_ego = readout(tape, &self.params, &self.heads, z_ego, s, d)?;
        let z_ctx = self.ctx.encode(tape, &self.params, &input.ctx)?;
        let (s, d) = input.ctx.center;
        let h_ctx = readout(tape, &self.params, &self.heads, z_ctx, s, d)?;
        Ok((h_ego, h_ctx))
    }

    /// Forward pass without keeping the tape.
    pub fn represent(&self, input: &PairInput) -> Result<PairValues> {
        let mut tape = Tape::new();
        let (e, c) = self.forward(&mut tape, input)?;
        Ok(PairValues {
            h_ego: tape.value(e).data().to_vec(),
            h_ctx: tape.value(c).data().to_vec(),
        })
    }
}
