//! Shared oracles for the integration and acceptance targets.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgad::encoder::{AttentionLogits, ModelConfig};
use tgad::objective::{
    anomaly_score, ecc_loss, echsc_loss, total_loss, LossConfig, Orientation, PairVars,
};
use tgad::tensor::{GradStore, ParamStore, Tape, Tensor, Var};
use tgad::tgraph::{EdgeId, EventStore, Label, NodeId, SamplerConfig, TemporalEdge};
use tgad::trainer::{AblationFlags, Model, ModelSpec, PairInput};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates where the two step sizes disagree, i.e. a kink lies
    /// within one step.
    pub skipped: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.worst = self.worst.max(other.worst);
    }

    pub fn ok(&self) -> bool {
        self.worst <= FD_TOL && self.skipped * 20 <= self.checked.max(1)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Compares `analytic` with central differences of `f` around `x`,
/// perturbing coordinate `j` of input `i` for every `(i, j)` in `coords`.
fn compare(
    analytic: &[Vec<f64>],
    coords: &[(usize, usize)],
    f: &mut dyn FnMut(usize, usize, f64) -> f64,
) -> GradReport {
    let mut rep = GradReport::default();
    for &(i, j) in coords {
        let d = |f: &mut dyn FnMut(usize, usize, f64) -> f64, h: f64| (f(i, j, h) - f(i, j, -h)) / (2.0 * h);
        let n1 = d(f, FD_STEP);
        let n2 = d(f, FD_STEP / 2.0);
        if (n1 - n2).abs() > 1e-6 * n1.abs().max(1.0) {
            rep.skipped += 1;
            continue;
        }
        rep.checked += 1;
        rep.worst = rep.worst.max(rel_err(analytic[i][j], n1));
    }
    rep
}

/// Finite-difference check of a scalar function of leaf tensors.
pub fn check_leaves(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> GradReport {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &leaves);
    tape.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let mut eval = |i: usize, j: usize, h: f64| {
        let mut xs = inputs.to_vec();
        xs[i].data_mut()[j] += h;
        let mut tape = Tape::new();
        let leaves: Vec<Var> = xs.into_iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &leaves);
        tape.value(out).item().expect("scalar")
    };
    compare(&analytic, &coords, &mut eval)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights, so every output
/// coordinate carries a distinct adjoint.
fn weighted(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

/// Every differentiable primitive on random inputs drawn from `seed`.
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let heads = rng.gen_range(1..3);
    let d = heads * rng.gen_range(1..4);
    let ws = seed ^ 0x5eed;
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Var| {
        out.push((name, check_leaves(&inputs, f)));
    };
    let a = random_tensor(&mut rng, &[m, k], -2.0, 2.0);
    let b = random_tensor(&mut rng, &[k, n], -2.0, 2.0);
    run("matmul", vec![a.clone(), b.clone()], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted(t, y, ws)
    });
    run("transpose", vec![a.clone()], &|t, v| {
        let y = t.transpose(v[0]).unwrap();
        weighted(t, y, ws)
    });
    let a2 = random_tensor(&mut rng, &[m, k], -2.0, 2.0);
    run("add", vec![a.clone(), a2.clone()], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weighted(t, y, ws)
    });
    run("sub", vec![a.clone(), a2.clone()], &|t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        weighted(t, y, ws)
    });
    run("mul", vec![a.clone(), a2.clone()], &|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        weighted(t, y, ws)
    });
    let row = random_tensor(&mut rng, &[k], -2.0, 2.0);
    run("add_row", vec![a.clone(), row], &|t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        weighted(t, y, ws)
    });
    run("affine", vec![a.clone()], &|t, v| {
        let y = t.affine(v[0], -1.7, 0.3).unwrap();
        weighted(t, y, ws)
    });
    run("scale", vec![a.clone()], &|t, v| {
        let y = t.scale(v[0], 2.5).unwrap();
        weighted(t, y, ws)
    });
    let c = random_tensor(&mut rng, &[m, n], -2.0, 2.0);
    run("concat_cols", vec![a.clone(), c.clone()], &|t, v| {
        let y = t.concat_cols(&[v[0], v[1], v[0]]).unwrap();
        weighted(t, y, ws)
    });
    let start = rng.gen_range(0..k);
    let width = rng.gen_range(1..=k - start);
    run("slice_cols", vec![a.clone()], &|t, v| {
        let y = t.slice_cols(v[0], start, width).unwrap();
        weighted(t, y, ws)
    });
    let index: Vec<usize> = (0..m + 2).map(|_| rng.gen_range(0..m)).collect();
    run("gather_rows", vec![a.clone()], &|t, v| {
        let y = t.gather_rows(v[0], &index).unwrap();
        weighted(t, y, ws)
    });
    let sq = random_tensor(&mut rng, &[m, m + 1], -3.0, 3.0);
    run("softmax_rows", vec![sq.clone()], &|t, v| {
        let y = t.softmax_rows(v[0], None).unwrap();
        weighted(t, y, ws)
    });
    let mask: Vec<f64> = (0..m * (m + 1))
        .map(|i| if i % (m + 1) != 0 && i % 3 == 1 { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    run("softmax_rows_masked", vec![sq], &|t, v| {
        let y = t.softmax_rows(v[0], Some(&mask)).unwrap();
        weighted(t, y, ws)
    });
    let rows = m + 3;
    let segments = rng.gen_range(1..4);
    let segment: Vec<usize> = (0..rows).map(|i| if i < segments { i } else { rng.gen_range(0..segments) }).collect();
    let logits = random_tensor(&mut rng, &[rows, heads], -3.0, 3.0);
    run("segment_softmax", vec![logits], &|t, v| {
        let y = t.segment_softmax(v[0], &segment, segments).unwrap();
        weighted(t, y, ws)
    });
    let vals = random_tensor(&mut rng, &[rows, d], -2.0, 2.0);
    run("segment_sum", vec![vals.clone()], &|t, v| {
        let y = t.segment_sum(v[0], &segment, segments).unwrap();
        weighted(t, y, ws)
    });
    let q = random_tensor(&mut rng, &[rows, d], -2.0, 2.0);
    run("head_dot", vec![q.clone(), vals.clone()], &|t, v| {
        let y = t.head_dot(v[0], v[1], heads).unwrap();
        weighted(t, y, ws)
    });
    let hw = random_tensor(&mut rng, &[rows, heads], -2.0, 2.0);
    run("head_scale", vec![hw, vals.clone()], &|t, v| {
        let y = t.head_scale(v[0], v[1]).unwrap();
        weighted(t, y, ws)
    });
    let ln_in = random_tensor(&mut rng, &[m, d + 1], -2.0, 2.0);
    let gamma = random_tensor(&mut rng, &[d + 1], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[d + 1], -0.5, 0.5);
    run("layer_norm", vec![ln_in, gamma, beta], &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted(t, y, ws)
    });
    run("relu", vec![a.clone()], &|t, v| {
        let y = t.relu(v[0]).unwrap();
        weighted(t, y, ws)
    });
    run("exp", vec![a.clone()], &|t, v| {
        let y = t.exp(v[0]).unwrap();
        weighted(t, y, ws)
    });
    let pos = random_tensor(&mut rng, &[m, k], 0.05, 3.0);
    run("log", vec![pos.clone()], &|t, v| {
        let y = t.log(v[0]).unwrap();
        weighted(t, y, ws)
    });
    run("log1mexp", vec![pos], &|t, v| {
        let y = t.log1mexp(v[0]).unwrap();
        weighted(t, y, ws)
    });
    run("clamp", vec![a.clone()], &|t, v| {
        let y = t.clamp(v[0], -1.0, 1.0).unwrap();
        weighted(t, y, ws)
    });
    run("sum", vec![a.clone()], &|t, v| {
        let y = t.sum(v[0]).unwrap();
        t.scale(y, 0.7).unwrap()
    });
    run("mean", vec![a.clone()], &|t, v| {
        let y = t.mean(v[0]).unwrap();
        t.scale(y, 1.3).unwrap()
    });
    let vec_a = random_tensor(&mut rng, &[d + 1], -2.0, 2.0);
    let vec_b = random_tensor(&mut rng, &[d + 1], -2.0, 2.0);
    run("sq_norm", vec![vec_a.clone()], &|t, v| t.sq_norm(v[0]).unwrap());
    run("cosine", vec![vec_a, vec_b], &|t, v| t.cosine(v[0], v[1]).unwrap());
    run("add_n", vec![a.clone(), a2], &|t, v| {
        let y = t.add_n(&[v[0], v[1], v[0]]).unwrap();
        weighted(t, y, ws)
    });
    out
}

/// The hypersphere, contrastive and total losses on random representations.
pub fn loss_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..6);
    let mut out = Vec::new();
    for orientation in [Orientation::AsWritten, Orientation::Ruff] {
        for y in [0u8, 1] {
            let h = vec![random_tensor(&mut rng, &[1, d], -1.0, 1.0), random_tensor(&mut rng, &[1, d], -1.0, 1.0)];
            let name = match (orientation, y) {
                (Orientation::AsWritten, 0) => "echsc_as_written_y0",
                (Orientation::AsWritten, _) => "echsc_as_written_y1",
                (Orientation::Ruff, 0) => "echsc_ruff_y0",
                (Orientation::Ruff, _) => "echsc_ruff_y1",
            };
            out.push((
                name,
                check_leaves(&h, &|t, v| {
                    let x = t.sub(v[0], v[1]).unwrap();
                    echsc_loss(t, x, y, orientation).unwrap()
                }),
            ));
        }
    }
    let ps: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[1, d], -1.0, 1.0)).collect();
    out.push(("ecc", check_leaves(&ps, &|t, v| ecc_loss(t, v[0], v[1], v[2]).unwrap())));

    let cfg = LossConfig {
        lambda: rng.gen_range(0.01..2.0),
        orientation: if seed.is_multiple_of(2) { Orientation::AsWritten } else { Orientation::Ruff },
        ..LossConfig::default()
    };
    out.push(("total_loss", total_loss_params_check(&mut rng, d, cfg)));
    out
}

/// Checks the total loss with respect to the head parameters and the
/// representations, using the parameter store as the perturbation target.
fn total_loss_params_check(rng: &mut ChaCha8Rng, d: usize, cfg: LossConfig) -> GradReport {
    let b = rng.gen_range(2..5);
    let mut params = ParamStore::new();
    let heads = tgad::objective::HeadParams::new(d, true, &mut params, rng).unwrap();
    jitter(&mut params, rng);
    let reps: Vec<Tensor> = (0..2 * b).map(|_| random_tensor(rng, &[1, d], -1.0, 1.0)).collect();
    let labels: Vec<Option<u8>> = (0..b).map(|i| [None, Some(0), Some(1)][i % 3]).collect();
    let loss = |params: &ParamStore, reps: &[Tensor], tape: &mut Tape| -> (Var, Vec<Var>) {
        let leaves: Vec<Var> = reps.iter().map(|r| tape.leaf(r.clone())).collect();
        let pairs: Vec<PairVars> = (0..b)
            .map(|i| PairVars {
                h_ego: leaves[2 * i],
                h_ctx: leaves[2 * i + 1],
                label: labels[i],
            })
            .collect();
        (total_loss(tape, params, &heads, &pairs, &cfg).unwrap(), leaves)
    };
    let mut tape = Tape::new();
    let (root, leaves) = loss(&params, &reps, &mut tape);
    tape.backward(root).unwrap();
    let mut grads = GradStore::new(&params);
    tape.collect_param_grads(&mut grads);
    let ids: Vec<_> = params.ids().collect();
    let mut analytic: Vec<Vec<f64>> = leaves.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    analytic.extend(ids.iter().map(|&id| grads.get(id).map_or_else(|| vec![0.0; params.get(id).numel()], <[f64]>::to_vec)));
    let mut coords = Vec::new();
    for i in 0..2 * b {
        coords.extend((0..d).map(|j| (i, j)));
    }
    for (p, &id) in ids.iter().enumerate() {
        coords.extend((0..params.get(id).numel()).map(|j| (2 * b + p, j)));
    }
    let mut eval = |i: usize, j: usize, h: f64| {
        let mut reps = reps.clone();
        let mut params = params.clone();
        if i < 2 * b {
            reps[i].data_mut()[j] += h;
        } else {
            params.get_mut(ids[i - 2 * b]).data_mut()[j] += h;
        }
        let mut tape = Tape::new();
        let (root, _) = loss(&params, &reps, &mut tape);
        tape.value(root).item().unwrap()
    };
    compare(&analytic, &coords, &mut eval)
}

/// Moves every parameter off its initial value. Zero-initialized biases
/// behind dead ReLUs would otherwise leave projected vectors at the origin,
/// where cosine similarity is singular.
pub fn jitter(params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

/// Random small store: `nodes` nodes, `edges` edges with timestamps drawn
/// from a small integer range so that ties occur.
pub fn random_store(rng: &mut ChaCha8Rng, nodes: usize, edges: usize, feature_dim: usize) -> EventStore {
    let list = (0..edges)
        .map(|i| {
            let src = rng.gen_range(0..nodes);
            let mut dst = rng.gen_range(0..nodes);
            if dst == src {
                dst = (src + 1) % nodes;
            }
            TemporalEdge {
                id: EdgeId(i as u64),
                src,
                dst,
                t: rng.gen_range(0..edges as u64 / 2 + 1) as f64,
                features: (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                label: if rng.gen_bool(0.3) { Label::Anomaly } else { Label::Normal },
            }
        })
        .collect();
    EventStore::new(nodes, list).unwrap()
}

/// Full model on a tiny random graph: total loss over a batch through both
/// encoders and both heads, checked against the parameters.
pub fn pipeline_check(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = random_store(&mut rng, 6, 14, 2);
    let ablation = AblationFlags {
        no_local_mha: seed % 7 == 3,
        no_global_mha: seed % 7 == 4,
        no_time_embed: seed % 7 == 5,
        no_ecc: seed % 7 == 6,
        no_ego_context: seed % 11 == 2,
    };
    let spec = ModelSpec {
        encoder: ModelConfig {
            hidden: 4,
            layers: 1 + (seed % 2) as usize,
            heads: 2,
            time_dim: 4,
            degree_buckets: 8,
            feature_dim: 2,
            attention: if seed.is_multiple_of(3) { AttentionLogits::NodeQuery } else { AttentionLogits::EventSelf },
            ablation,
            ..ModelConfig::default()
        },
        loss: LossConfig {
            lambda: 0.5,
            orientation: if seed.is_multiple_of(2) { Orientation::AsWritten } else { Orientation::Ruff },
            labeled_only: false,
            ablation,
        },
        sampler: SamplerConfig {
            fanouts: vec![3, 2],
            shared_endpoint_budget: false,
        },
        time_scale: 0.5,
    };
    let mut model = Model::new(spec, seed).unwrap();
    jitter(&mut model.params, &mut rng);
    let batch: Vec<usize> = (store.len() - 3..store.len()).collect();
    let inputs: Vec<PairInput> = batch.iter().map(|&k| model.prepare(&store, k, seed + k as u64).unwrap()).collect();
    let labels: Vec<Option<u8>> = batch.iter().enumerate().map(|(i, &k)| if i == 0 { None } else { store.edge(k).label.as_binary() }).collect();

    let loss = |params: &ParamStore, tape: &mut Tape| -> Var {
        let mut m = model.clone();
        m.params = params.clone();
        let pairs: Vec<PairVars> = inputs
            .iter()
            .zip(&labels)
            .map(|(inp, &label)| {
                let (h_ego, h_ctx) = m.forward(tape, inp).unwrap();
                PairVars { h_ego, h_ctx, label }
            })
            .collect();
        total_loss(tape, &m.params, &m.heads, &pairs, &m.spec.loss).unwrap()
    };
    let mut tape = Tape::new();
    let root = loss(&model.params, &mut tape);
    tape.backward(root).unwrap();
    let mut grads = GradStore::new(&model.params);
    tape.collect_param_grads(&mut grads);
    let ids: Vec<_> = model.params.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| grads.get(id).map_or_else(|| vec![0.0; model.params.get(id).numel()], <[f64]>::to_vec))
        .collect();
    // three coordinates of every parameter tensor per seed
    let mut coords = Vec::new();
    for (p, &id) in ids.iter().enumerate() {
        let n = model.params.get(id).numel();
        for _ in 0..3.min(n) {
            coords.push((p, rng.gen_range(0..n)));
        }
    }
    let mut eval = |i: usize, j: usize, h: f64| {
        let mut params = model.params.clone();
        params.get_mut(ids[i]).data_mut()[j] += h;
        let mut tape = Tape::new();
        let root = loss(&params, &mut tape);
        tape.value(root).item().unwrap()
    };
    compare(&analytic, &coords, &mut eval)
}

/// `P(s_pos > s_neg) + P(s_pos = s_neg) / 2` by enumeration of all pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Full causal `hops`-hop neighborhood of `center` by breadth-first search
/// over all qualifying events: returns `(event ids, nodes with hop)`.
pub fn neighborhood_oracle(
    store: &EventStore,
    center: &TemporalEdge,
    hops: usize,
    include_center: bool,
) -> (BTreeSet<EdgeId>, HashMap<NodeId, usize>) {
    let allowed = |e: &TemporalEdge| e.id != center.id && if include_center { e.t <= center.t } else { e.t < center.t };
    let mut dist: HashMap<NodeId, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    for n in [center.src, center.dst] {
        if dist.insert(n, 0).is_none() {
            queue.push_back(n);
        }
    }
    while let Some(u) = queue.pop_front() {
        let du = dist[&u];
        if du + 1 > hops {
            continue;
        }
        for e in store.edges().iter().filter(|e| allowed(e) && (e.src == u || e.dst == u)) {
            let v = if e.src == u { e.dst } else { e.src };
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(v) {
                e.insert(du + 1);
                queue.push_back(v);
            }
        }
    }
    let mut events: BTreeSet<EdgeId> = store
        .edges()
        .iter()
        .filter(|e| allowed(e) && [e.src, e.dst].iter().any(|n| dist.get(n).is_some_and(|&d| d < hops)))
        .map(|e| e.id)
        .collect();
    if include_center {
        events.insert(center.id);
    }
    (events, dist)
}

/// Anomaly score through the public pieces, for probes.
pub fn score_of(model: &Model, input: &PairInput) -> f64 {
    let v = model.represent(input).unwrap();
    anomaly_score(&v.argument(model.spec.loss.ablation.no_ego_context), model.spec.loss.orientation)
}
