//! Per-user preference network, entropy-driven selection and cold start.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::VISUAL_DIM;
use crate::catalog::DesignItem;
use crate::design_space::{encode_one_hot, OneHot51, ONE_HOT_LEN};
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = ONE_HOT_LEN + VISUAL_DIM;
pub const HIDDEN_DIM: usize = 64;
pub const COLD_START_K: usize = 10;
pub const ROUND_K: usize = 5;
pub const ENTROPY_EPS: f64 = 1e-12;

const W1: usize = 0;
const B1: usize = FEATURE_DIM * HIDDEN_DIM;
const W2: usize = B1 + HIDDEN_DIM;
const B2: usize = W2 + HIDDEN_DIM;
pub const PARAM_COUNT: usize = B2 + 1;

/// One-hot design encoding followed by the visual embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct HybridFeature(Vec<f64>);

impl HybridFeature {
    pub fn new(onehot: &OneHot51, visual: &[f64]) -> Result<Self> {
        if visual.len() != VISUAL_DIM {
            return Err(Error::InvalidEmbedding(format!("expected {VISUAL_DIM} values, got {}", visual.len())));
        }
        if visual.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding("non-finite value".into()));
        }
        let mut values = Vec::with_capacity(FEATURE_DIM);
        values.extend(onehot.bits().iter().map(|&b| b as f64));
        values.extend_from_slice(visual);
        Ok(Self(values))
    }

    /// Arbitrary 101-value vector, used for baselines and synthetic tests.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_DIM || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!("feature must hold {FEATURE_DIM} finite values")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn onehot_part(&self) -> &[f64] {
        &self.0[..ONE_HOT_LEN]
    }

    pub fn visual_part(&self) -> &[f64] {
        &self.0[ONE_HOT_LEN..]
    }
}

impl TryFrom<Vec<f64>> for HybridFeature {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_values(v)
    }
}

impl From<HybridFeature> for Vec<f64> {
    fn from(f: HybridFeature) -> Self {
        f.0
    }
}

pub fn build_feature(item: &DesignItem) -> Result<HybridFeature> {
    HybridFeature::new(&encode_one_hot(&item.design_vector), &item.visual_embedding)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary entropy in bits, with `p` clamped away from 0 and 1.
pub fn entropy(p: f64) -> f64 {
    let p = p.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
    let q = 1.0 - p;
    -(p * p.log2() + q * q.log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p: f64,
    pub logit: f64,
}

/// Anything that maps a hybrid feature to a preference logit.
pub trait LogitModel {
    fn logit(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: usize,
    pub hidden_activation: String,
    pub output: String,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { input: FEATURE_DIM, hidden: HIDDEN_DIM, hidden_activation: "relu".into(), output: "sigmoid".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.01,
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        }
    }
}

/// Feature stored as its nonzero entries; one-hot inputs make this ~6x cheaper.
#[derive(Debug, Clone)]
struct Sparse(Vec<(usize, f64)>);

impl Sparse {
    fn of(x: &[f64]) -> Self {
        Sparse(x.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect())
    }
}

/// 101 -> 64 ReLU -> 1 network. Parameters live in one flat vector:
/// `W1` input-major, then `b1`, `w2`, `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ppnn {
    params: Vec<f64>,
}

impl Ppnn {
    pub fn zeros() -> Self {
        Self { params: vec![0.0; PARAM_COUNT] }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; PARAM_COUNT];
        let l1 = (6.0 / (FEATURE_DIM + HIDDEN_DIM) as f64).sqrt();
        for w in &mut params[W1..B1] {
            *w = rng.gen_range(-l1..l1);
        }
        let l2 = (6.0 / (HIDDEN_DIM + 1) as f64).sqrt();
        for w in &mut params[W2..B2] {
            *w = rng.gen_range(-l2..l2);
        }
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::Checkpoint(format!("expected {PARAM_COUNT} parameters, got {}", params.len())));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Hidden pre-activations for a dense input.
    pub fn hidden_pre(&self, x: &[f64]) -> [f64; HIDDEN_DIM] {
        let mut h: [f64; HIDDEN_DIM] = self.params[B1..W2].try_into().unwrap();
        for (i, &v) in x.iter().enumerate() {
            if v != 0.0 {
                let row = &self.params[W1 + i * HIDDEN_DIM..W1 + (i + 1) * HIDDEN_DIM];
                for (hj, w) in h.iter_mut().zip(row) {
                    *hj += v * w;
                }
            }
        }
        h
    }

    /// Output logit given hidden pre-activations.
    pub fn head(&self, pre: &[f64; HIDDEN_DIM]) -> f64 {
        let w2 = &self.params[W2..B2];
        self.params[B2] + pre.iter().zip(w2).map(|(h, w)| h.max(0.0) * w).sum::<f64>()
    }

    /// Column `i` of the first layer (weights from input `i` to every hidden unit).
    pub fn input_weights(&self, i: usize) -> &[f64] {
        &self.params[W1 + i * HIDDEN_DIM..W1 + (i + 1) * HIDDEN_DIM]
    }

    pub fn hidden_bias(&self) -> &[f64] {
        &self.params[B1..W2]
    }

    pub fn predict(&self, x: &HybridFeature) -> Prediction {
        let logit = self.logit(x.as_slice());
        Prediction { p: sigmoid(logit), logit }
    }

    fn forward_sparse(&self, x: &Sparse, pre: &mut [f64; HIDDEN_DIM]) -> f64 {
        pre.copy_from_slice(&self.params[B1..W2]);
        for &(i, v) in &x.0 {
            let row = &self.params[W1 + i * HIDDEN_DIM..W1 + (i + 1) * HIDDEN_DIM];
            for (hj, w) in pre.iter_mut().zip(row) {
                *hj += v * w;
            }
        }
        self.head(pre)
    }

    /// Mean binary cross-entropy and its gradient over `(x, y)` pairs.
    fn loss_grad_sparse(&self, data: &[(Sparse, f64)], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = data.len() as f64;
        let mut pre = [0.0; HIDDEN_DIM];
        let mut loss = 0.0;
        for (x, y) in data {
            let z = self.forward_sparse(x, &mut pre);
            loss += softplus(z) - y * z;
            let dz = (sigmoid(z) - y) / n;
            grad[B2] += dz;
            let mut dh = [0.0; HIDDEN_DIM];
            for j in 0..HIDDEN_DIM {
                if pre[j] > 0.0 {
                    grad[W2 + j] += dz * pre[j];
                    dh[j] = dz * self.params[W2 + j];
                }
            }
            for j in 0..HIDDEN_DIM {
                grad[B1 + j] += dh[j];
            }
            for &(i, v) in &x.0 {
                let g = &mut grad[W1 + i * HIDDEN_DIM..W1 + (i + 1) * HIDDEN_DIM];
                for (gj, d) in g.iter_mut().zip(&dh) {
                    *gj += v * d;
                }
            }
        }
        loss / n
    }

    /// Mean binary cross-entropy with logits.
    pub fn loss(&self, data: &[(HybridFeature, f64)]) -> f64 {
        let n = data.len() as f64;
        data.iter()
            .map(|(x, y)| {
                let z = self.logit(x.as_slice());
                softplus(z) - y * z
            })
            .sum::<f64>()
            / n
    }

    /// Analytic gradient of [`Ppnn::loss`] with respect to the flat parameter vector.
    pub fn loss_gradient(&self, data: &[(HybridFeature, f64)]) -> (f64, Vec<f64>) {
        let sparse: Vec<(Sparse, f64)> = data.iter().map(|(x, y)| (Sparse::of(x.as_slice()), *y)).collect();
        let mut grad = vec![0.0; PARAM_COUNT];
        let loss = self.loss_grad_sparse(&sparse, &mut grad);
        (loss, grad)
    }

    /// Full-batch training for `cfg.epochs` steps.
    pub fn fit(&mut self, data: &[(HybridFeature, f64)], cfg: &TrainConfig) {
        if data.is_empty() {
            return;
        }
        let sparse: Vec<(Sparse, f64)> = data.iter().map(|(x, y)| (Sparse::of(x.as_slice()), *y)).collect();
        let mut grad = vec![0.0; PARAM_COUNT];
        match cfg.optimizer {
            Optimizer::Sgd => {
                for _ in 0..cfg.epochs {
                    self.loss_grad_sparse(&sparse, &mut grad);
                    for (p, g) in self.params.iter_mut().zip(&grad) {
                        *p -= cfg.learning_rate * g;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let mut m = vec![0.0; PARAM_COUNT];
                let mut v = vec![0.0; PARAM_COUNT];
                let (mut b1t, mut b2t) = (1.0, 1.0);
                for _ in 0..cfg.epochs {
                    self.loss_grad_sparse(&sparse, &mut grad);
                    b1t *= beta1;
                    b2t *= beta2;
                    let step = cfg.learning_rate * (1.0 - b2t).sqrt() / (1.0 - b1t);
                    for k in 0..PARAM_COUNT {
                        let g = grad[k];
                        if g == 0.0 && m[k] == 0.0 {
                            continue;
                        }
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                        self.params[k] -= step * m[k] / (v[k].sqrt() + eps);
                    }
                }
            }
        }
    }
}

impl LogitModel for Ppnn {
    fn logit(&self, x: &[f64]) -> f64 {
        self.head(&self.hidden_pre(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub round_index: usize,
    pub item_id: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub item_id: String,
    pub feature: HybridFeature,
    pub label: u8,
}

/// One user's network plus the label history it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct PpnnState {
    pub init_seed: u64,
    pub version: u64,
    pub config: TrainConfig,
    net: Ppnn,
    log: Vec<TrainRecord>,
    features: Vec<HybridFeature>,
}

impl PpnnState {
    pub fn new(init_seed: u64) -> Self {
        Self::with_config(init_seed, TrainConfig::default())
    }

    pub fn with_config(init_seed: u64, config: TrainConfig) -> Self {
        Self { init_seed, version: 0, config, net: Ppnn::init(init_seed), log: Vec::new(), features: Vec::new() }
    }

    pub fn net(&self) -> &Ppnn {
        &self.net
    }

    pub fn train_log(&self) -> &[TrainRecord] {
        &self.log
    }

    pub fn predict(&self, x: &HybridFeature) -> Prediction {
        self.net.predict(x)
    }

    /// Appends the batch to the history and retrains from the initial seed on all of it.
    pub fn train_increment(&mut self, round_index: usize, batch: Vec<LabeledExample>) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(bad) = batch.iter().find(|e| e.label > 1) {
            return Err(Error::InvalidInteraction(format!("label {} is not binary", bad.label)));
        }
        for e in batch {
            self.log.push(TrainRecord { round_index, item_id: e.item_id, label: e.label });
            self.features.push(e.feature);
        }
        let data: Vec<(HybridFeature, f64)> =
            self.features.iter().cloned().zip(self.log.iter().map(|r| r.label as f64)).collect();
        let mut net = Ppnn::init(self.init_seed);
        net.fit(&data, &self.config);
        self.net = net;
        self.version += 1;
        Ok(())
    }

    pub fn history_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.log {
            h.update(serde_json::to_vec(r).expect("train record serializes"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Header JSON, a newline, then every parameter as a little-endian `f32`.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            architecture: Architecture::default(),
            init_seed: self.init_seed,
            version: self.version,
            history_hash: self.history_hash(),
            param_count: PARAM_COUNT,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for p in &self.net.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub init_seed: u64,
    pub version: u64,
    pub history_hash: String,
    pub param_count: usize,
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Ppnn)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
    if header.architecture != Architecture::default() || header.param_count != PARAM_COUNT {
        return Err(Error::Checkpoint("architecture mismatch".into()));
    }
    let body = &bytes[split + 1..];
    if body.len() != PARAM_COUNT * 4 {
        return Err(Error::Checkpoint(format!("expected {} weight bytes, got {}", PARAM_COUNT * 4, body.len())));
    }
    let params = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok((header, Ppnn::from_params(params)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ColdStart,
    Entropy,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationRound {
    pub round_index: usize,
    pub item_ids: Vec<String>,
    pub strategy: Strategy,
}

/// Top `k` ids by descending score, ties by ascending id.
pub fn top_k_by_score(scored: &[(String, f64)], k: usize) -> Vec<String> {
    let mut order: Vec<&(String, f64)> = scored.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    order.into_iter().take(k).map(|(id, _)| id.clone()).collect()
}

/// Entropy rounded to 1e-12 so that `p` and `1 - p` tie exactly.
fn entropy_key(p: f64) -> f64 {
    (entropy(p) * 1e12).round() / 1e12
}

/// Picks the `k` candidates whose predicted preference is least certain.
pub fn select_by_entropy(predictions: &[(String, f64)], k: usize) -> Result<Vec<String>> {
    if predictions.is_empty() {
        return Err(Error::NoCandidates);
    }
    let scored: Vec<(String, f64)> = predictions.iter().map(|(id, p)| (id.clone(), entropy_key(*p))).collect();
    Ok(top_k_by_score(&scored, k))
}

pub fn select_next(
    model: &PpnnState,
    candidates: &[(&str, &HybridFeature)],
    round_index: usize,
    k: usize,
) -> Result<RecommendationRound> {
    let predictions: Vec<(String, f64)> =
        candidates.iter().map(|(id, x)| (id.to_string(), model.predict(x).p)).collect();
    Ok(RecommendationRound { round_index, item_ids: select_by_entropy(&predictions, k)?, strategy: Strategy::Entropy })
}

/// Uniformly random round, the baseline for entropy selection.
///
/// Candidates are sorted by id before shuffling so the result depends only on
/// the candidate set and the seed.
pub fn select_random(candidates: &[&str], round_index: usize, k: usize, seed: u64) -> Result<RecommendationRound> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut ids: Vec<String> = candidates.iter().map(|s| s.to_string()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(k);
    Ok(RecommendationRound { round_index, item_ids: ids, strategy: Strategy::Random })
}

/// Diverse opening round: seed head first, then greedy max-min Hamming distance.
pub fn cold_start(candidates: &[(&str, OneHot51)], seed_ranking: &[String], k: usize) -> RecommendationRound {
    let position: HashMap<&str, usize> =
        seed_ranking.iter().enumerate().rev().map(|(i, id)| (id.as_str(), i)).collect();
    let pos = |id: &str| position.get(id).copied().unwrap_or(usize::MAX);
    let by_seed = |a: &usize, b: &usize| {
        let (ia, ib) = (candidates[*a].0, candidates[*b].0);
        pos(ia).cmp(&pos(ib)).then_with(|| ia.cmp(ib))
    };

    let mut chosen: Vec<usize> = Vec::new();
    let mut min_dist = vec![usize::MAX; candidates.len()];
    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    remaining.sort_by(by_seed);
    let k = k.min(candidates.len());
    if k > 0 {
        // With an empty ranking every position is MAX, so this is the lowest id.
        chosen.push(remaining.remove(0));
    }
    while chosen.len() < k {
        let last = &candidates[*chosen.last().unwrap()].1;
        for &c in &remaining {
            min_dist[c] = min_dist[c].min(candidates[c].1.hamming(last));
        }
        let best = (0..remaining.len())
            .min_by(|&a, &b| {
                let (ca, cb) = (remaining[a], remaining[b]);
                min_dist[cb].cmp(&min_dist[ca]).then_with(|| by_seed(&ca, &cb))
            })
            .unwrap();
        chosen.push(remaining.remove(best));
    }
    RecommendationRound {
        round_index: 0,
        item_ids: chosen.into_iter().map(|i| candidates[i].0.to_string()).collect(),
        strategy: Strategy::ColdStart,
    }
}
