use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{item_seed, Model, ModelSpec, PairInput};
use super::{select_labels, split_chronological, time_scale, AblationFlags, LabelBudget, LabeledSet, Result, SplitSpec, Splits, TrainError};
use crate::encoder::ModelConfig;
use crate::evaluation::{roc_auc, score_range};
use crate::objective::{total_loss, LossConfig, PairVars};
use crate::par;
use crate::tensor::{Adam, AdamConfig, GradStore, Tape, Tensor, TensorError};
use crate::tgraph::{EventStore, SamplerConfig};

/// Items whose gradients are computed concurrently before being reduced.
pub const GRAD_CHUNK: usize = 32;

const SHUFFLE_TAG: u64 = 1;
const SAMPLE_TAG: u64 = 2;

/// Everything [`fit`] needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub ablation: AblationFlags,
    pub split: SplitSpec,
    pub budget: LabelBudget,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_seed: u64,
    /// Use the thread pool for per-item work (requires the `parallel`
    /// feature; results are identical either way).
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            ablation: AblationFlags::default(),
            split: SplitSpec::default(),
            budget: LabelBudget { anomalies: 1, seed: 0 },
            lr: 1e-4,
            epochs: 20,
            batch_size: 200,
            seed: 0,
            eval_seed: 12345,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.sampler.fanouts.is_empty() {
            return bad("fanouts must not be empty");
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        self.model.validate()?;
        Ok(())
    }

    /// Model specification for `store`, with the ablation flags applied.
    pub fn model_spec(&self, store: &EventStore, splits: &Splits) -> ModelSpec {
        ModelSpec {
            encoder: ModelConfig {
                feature_dim: store.feature_dim(),
                ablation: self.ablation,
                ..self.model.clone()
            },
            loss: LossConfig {
                ablation: self.ablation,
                ..self.loss
            },
            sampler: self.sampler.clone(),
            time_scale: time_scale(store, splits.train.clone()),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// The deterministic part of the record as one JSON line.
    pub fn log_line(&self) -> String {
        serde_json::json!({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_auc": self.val_auc,
        })
        .to_string()
    }

    /// Wall-clock time of the epoch as one JSON line.
    pub fn timing_line(&self) -> String {
        serde_json::json!({ "epoch": self.epoch, "seconds": self.seconds }).to_string()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters of the epoch with the best validation AUC.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub labeled: LabeledSet,
    pub splits: Splits,
}

/// Loss and parameter gradients of one batch.
///
/// The loss couples batch items only through their readout vectors, so the
/// gradient is computed in two passes: a forward pass per item yields
/// `h_ego` and `h_ctx`, a small tape over those vectors gives the loss and
/// its adjoints, and a second per-item pass replays the forward computation
/// and propagates the adjoints. Per-item gradients are summed in item order.
pub fn batch_gradients(
    model: &Model,
    store: &EventStore,
    batch: &[usize],
    labels: &LabeledSet,
    seed: u64,
    parallel: bool,
) -> Result<(f64, GradStore)> {
    let inputs: Vec<PairInput> = par::map(batch.len(), parallel, |i| {
        model.prepare(store, batch[i], item_seed(seed, &[store.edge(batch[i]).id.0]))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let values = par::map(inputs.len(), parallel, |i| model.represent(&inputs[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut tape = Tape::new();
    let d = model.spec.encoder.hidden;
    let pairs: Vec<PairVars> = values
        .iter()
        .zip(batch)
        .map(|(v, &k)| PairVars {
            h_ego: tape.leaf(Tensor::from_parts(vec![1, d], v.h_ego.clone())),
            h_ctx: tape.leaf(Tensor::from_parts(vec![1, d], v.h_ctx.clone())),
            label: labels.get(&store.edge(k).id).copied(),
        })
        .collect();
    let loss = total_loss(&mut tape, &model.params, &model.heads, &pairs, &model.spec.loss)?;
    let loss_value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let mut grads = GradStore::new(&model.params);
    tape.collect_param_grads(&mut grads);
    let zeros = vec![0.0; d];
    let adjoints: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .map(|p| {
            let g = |v| tape.grad(v).map_or_else(|| zeros.clone(), <[f64]>::to_vec);
            (g(p.h_ego), g(p.h_ctx))
        })
        .collect();

    let active: Vec<usize> = (0..batch.len())
        .filter(|&i| adjoints[i].0.iter().chain(&adjoints[i].1).any(|&x| x != 0.0))
        .collect();
    for chunk in active.chunks(GRAD_CHUNK) {
        let parts = par::map(chunk.len(), parallel, |j| -> Result<GradStore> {
            let i = chunk[j];
            let mut tape = Tape::new();
            let (e, c) = model.forward(&mut tape, &inputs[i])?;
            tape.backward_seeded(&[(e, &adjoints[i].0), (c, &adjoints[i].1)])?;
            let mut g = GradStore::new(&model.params);
            tape.collect_param_grads(&mut g);
            Ok(g)
        });
        for part in parts {
            grads.merge(&part?);
        }
    }
    for id in model.params.ids() {
        grads.ensure(id, model.params.get(id).numel());
    }
    Ok((loss_value, grads))
}

/// Trains on the training split of `store`; see [`fit_with`].
pub fn fit(store: &EventStore, config: &TrainConfig) -> Result<FitResult> {
    fit_with(store, config, |_| {})
}

/// Trains for `config.epochs` epochs over all training edges in seeded
/// shuffled order, evaluates validation AUC after every epoch and returns the
/// parameters of the best epoch (the last one when validation AUC is never
/// defined). `on_epoch` sees every log record as it is produced.
pub fn fit_with(store: &EventStore, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<FitResult> {
    config.validate()?;
    let splits = split_chronological(store.len(), &config.split)?;
    let labeled = select_labels(store, splits.train.clone(), &config.budget)?;
    let mut model = Model::new(config.model_spec(store, &splits), config.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &model.params);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = splits.train.clone().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(config.seed, &[SHUFFLE_TAG, epoch as u64]));
        order.shuffle(&mut rng);
        let sample_seed = item_seed(config.seed, &[SAMPLE_TAG, epoch as u64]);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss, mut grads) = batch_gradients(&model, store, batch, &labeled, sample_seed, config.parallel)
                .map_err(|e| match e {
                    TrainError::Tensor(TensorError::NonFinite { .. }) => TrainError::Divergence { epoch, batch: b },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b });
            }
            adam.step(&mut model.params, &mut grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let scored = score_range(&model, store, splits.val.clone(), config.eval_seed, config.parallel)?;
        let val_auc = roc_auc(&scored).ok();
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_auc,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
        if let Some(auc) = val_auc {
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, epoch, model.clone()));
            }
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (config.epochs, model),
    };
    Ok(FitResult {
        model,
        log,
        best_epoch,
        labeled,
        splits,
    })
}
