//! Federated training engine: local SGD on client silos, sample-weighted
//! parameter averaging, plus the centralized and purely local baselines.
//!
//! Trainable models are a multinomial logistic regression and a one-hidden-
//! layer tanh perceptron over flat parameter vectors. Text inputs are
//! featurized with the same hashed bag-of-words encoder the backends use, so
//! the engine never sees raw tokens.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::cost::training_flops;
use crate::domain::{ClientSilo, Input, ModelSpec, Task, TaskKind};
use crate::fm::{FrozenScorer, TextEncoder};
use crate::ledger::{FlowEvent, FlowLedger, Party, PayloadKind};
use crate::rng::{derive_seed, rng_for};
use crate::stats::{argmax, softmax};
use crate::{Error, Result};

const TAG_LOCAL: u64 = 0xf1;
const TAG_SAMPLE: u64 = 0xf2;
const TAG_INIT: u64 = 0xf3;

// --------------------------------------------------------------------------
// Features
// --------------------------------------------------------------------------

/// Maps raw inputs onto fixed-dimension feature vectors.
#[derive(Debug, Clone)]
pub enum Featurizer {
    Text(TextEncoder),
    Numeric { dim: usize },
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match self {
            Featurizer::Text(enc) => enc.dim(),
            Featurizer::Numeric { dim } => *dim,
        }
    }

    pub fn featurize(&self, input: &Input) -> Result<Vec<f64>> {
        match (self, input) {
            (Featurizer::Text(enc), Input::Text(s)) => Ok(enc.encode(s)),
            (Featurizer::Numeric { dim }, Input::Numeric(v)) => {
                if v.len() != *dim {
                    return Err(Error::ShapeMismatch(format!(
                        "feature vector has {} entries, expected {dim}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
            _ => Err(Error::ShapeMismatch(
                "input kind does not match the featurizer".into(),
            )),
        }
    }
}

// --------------------------------------------------------------------------
// Trainable models
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    Logistic,
    Mlp { hidden: usize },
}

impl ModelKind {
    pub fn param_count(&self, dim: usize, classes: usize) -> usize {
        match self {
            ModelKind::Logistic => classes * dim + classes,
            ModelKind::Mlp { hidden } => hidden * dim + hidden + classes * hidden + classes,
        }
    }
}

/// A dense model over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub theta: Vec<f64>,
    pub spec: ModelSpec,
}

impl GlobalModel {
    /// Fresh model: zeros for the logistic, small seeded uniform weights for
    /// the perceptron (biases zero).
    pub fn init(kind: ModelKind, feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || num_classes < 2 {
            return Err(Error::ShapeMismatch(
                "model needs a positive feature dim and at least two classes".into(),
            ));
        }
        let n = kind.param_count(feature_dim, num_classes);
        let theta = match kind {
            ModelKind::Logistic => vec![0.0; n],
            ModelKind::Mlp { hidden } => {
                let mut rng = rng_for(seed, &[TAG_INIT]);
                let scale = 1.0 / (feature_dim as f64).sqrt();
                let mut theta = vec![0.0; n];
                for w in theta.iter_mut().take(hidden * feature_dim) {
                    *w = (rng.random::<f64>() - 0.5) * scale;
                }
                let w2_start = hidden * feature_dim + hidden;
                let scale2 = 1.0 / (hidden as f64).sqrt();
                for w in theta[w2_start..w2_start + num_classes * hidden].iter_mut() {
                    *w = (rng.random::<f64>() - 0.5) * scale2;
                }
                theta
            }
        };
        let spec = ModelSpec::new(n as u64, 4, feature_dim as u32)?;
        Ok(GlobalModel { kind, feature_dim, num_classes, theta, spec })
    }

    /// Warm-start a logistic model from a frozen scorer: each class row is
    /// the scorer's token log-probabilities pushed through the hash encoder's
    /// buckets, and biases take the scorer's log prior.
    pub fn init_from_scorer(
        scorer: &FrozenScorer,
        encoder: &TextEncoder,
        classes: &[String],
        feature_dim: usize,
    ) -> Result<Self> {
        let mut model = GlobalModel::init(ModelKind::Logistic, feature_dim, classes.len(), 0)?;
        let (vocab, log_probs, log_prior) = scorer.export_table();
        for (ci, class) in classes.iter().enumerate() {
            let si = scorer
                .classes()
                .iter()
                .position(|c| c == class)
                .ok_or_else(|| Error::UnknownClass(class.clone()))?;
            for (ti, token) in vocab.iter().enumerate() {
                let mean: f64 =
                    log_probs.iter().map(|row| row[ti]).sum::<f64>() / log_probs.len() as f64;
                let bucket = encoder.bucket_of(token);
                model.theta[ci * feature_dim + bucket] += log_probs[si][ti] - mean;
            }
            model.theta[classes.len() * feature_dim + ci] = log_prior[si];
        }
        Ok(model)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.feature_dim
            )));
        }
        let d = self.feature_dim;
        let c = self.num_classes;
        match self.kind {
            ModelKind::Logistic => {
                let (w, b) = self.theta.split_at(c * d);
                Ok((0..c)
                    .map(|k| b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
                    .collect())
            }
            ModelKind::Mlp { hidden } => {
                let (w1, rest) = self.theta.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(c * hidden);
                let h: Vec<f64> = (0..hidden)
                    .map(|j| {
                        (b1[j]
                            + w1[j * d..(j + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
                        .tanh()
                    })
                    .collect();
                Ok((0..c)
                    .map(|k| {
                        b2[k]
                            + w2[k * hidden..(k + 1) * hidden]
                                .iter()
                                .zip(&h)
                                .map(|(wi, hi)| wi * hi)
                                .sum::<f64>()
                    })
                    .collect())
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.logits(x)?;
        argmax(&logits).ok_or_else(|| Error::ShapeMismatch("model has no classes".into()))
    }
}

// --------------------------------------------------------------------------
// Loss and gradient
// --------------------------------------------------------------------------

/// Mean cross-entropy (natural log) and its gradient over a batch of
/// (features, class index) pairs.
pub fn loss_and_gradient(
    model: &GlobalModel,
    batch: &[(Vec<f64>, usize)],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::NoProgress("empty batch".into()));
    }
    let d = model.feature_dim;
    let c = model.num_classes;
    let mut grad = vec![0.0; model.theta.len()];
    let mut loss = 0.0;
    let inv_n = 1.0 / batch.len() as f64;

    for (x, y) in batch {
        if *y >= c {
            return Err(Error::SchemaViolation(format!("class index {y} out of range")));
        }
        let logits = model.logits(x)?;
        let p = softmax(&logits);
        loss -= p[*y].ln() * inv_n;

        match model.kind {
            ModelKind::Logistic => {
                for k in 0..c {
                    let delta = (p[k] - if k == *y { 1.0 } else { 0.0 }) * inv_n;
                    for (i, xi) in x.iter().enumerate() {
                        grad[k * d + i] += delta * xi;
                    }
                    grad[c * d + k] += delta;
                }
            }
            ModelKind::Mlp { hidden } => {
                let (w1, rest) = model.theta.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, _b2) = rest.split_at(c * hidden);
                let h: Vec<f64> = (0..hidden)
                    .map(|j| {
                        (b1[j]
                            + w1[j * d..(j + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
                        .tanh()
                    })
                    .collect();
                let delta2: Vec<f64> =
                    (0..c).map(|k| (p[k] - if k == *y { 1.0 } else { 0.0 }) * inv_n).collect();
                let w2_off = hidden * d + hidden;
                let b2_off = w2_off + c * hidden;
                for k in 0..c {
                    for j in 0..hidden {
                        grad[w2_off + k * hidden + j] += delta2[k] * h[j];
                    }
                    grad[b2_off + k] += delta2[k];
                }
                for j in 0..hidden {
                    let back: f64 = (0..c).map(|k| w2[k * hidden + j] * delta2[k]).sum();
                    let delta1 = back * (1.0 - h[j] * h[j]);
                    for (i, xi) in x.iter().enumerate() {
                        grad[j * d + i] += delta1 * xi;
                    }
                    grad[hidden * d + j] += delta1;
                }
            }
        }
    }
    Ok((loss, grad))
}

// --------------------------------------------------------------------------
// Local training
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: String,
    /// Number of training examples behind this update.
    pub n: u64,
    pub params: Vec<f64>,
    /// Pre-step batch losses, in step order across epochs.
    pub loss_trace: Vec<f64>,
}

/// Seeded mini-batch SGD from the received parameters. `epochs = 0` or
/// `lr = 0` returns the parameters unchanged (with an empty or flat trace).
pub fn local_train(
    model: &GlobalModel,
    client_id: &str,
    data: &[(Vec<f64>, usize)],
    epochs: u64,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<LocalUpdate> {
    if batch_size == 0 {
        return Err(Error::NoProgress("batch size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::NoProgress("client has no training data".into()));
    }
    let mut work = model.clone();
    let mut trace = Vec::new();
    let mut rng = rng_for(seed, &[]);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(Vec<f64>, usize)> =
                chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grad) = loss_and_gradient(&work, &batch)?;
            trace.push(loss);
            if lr != 0.0 {
                for (t, g) in work.theta.iter_mut().zip(&grad) {
                    *t -= lr * g;
                }
            }
        }
    }
    Ok(LocalUpdate {
        client_id: client_id.to_string(),
        n: data.len() as u64,
        params: work.theta,
        loss_trace: trace,
    })
}

// --------------------------------------------------------------------------
// Aggregation
// --------------------------------------------------------------------------

/// Sample-count-weighted average of local updates. Updates are reduced in
/// ascending client-id order whatever order they arrive in, so the result is
/// independent of completion order, bit for bit.
pub fn fedavg_aggregate(updates: &[LocalUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::NoProgress("no updates to aggregate".into()));
    }
    let len = updates[0].params.len();
    for u in updates {
        if u.params.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "update from {} has {} params, expected {len}",
                u.client_id,
                u.params.len()
            )));
        }
    }
    let total: u64 = updates.iter().map(|u| u.n).sum();
    if total == 0 {
        return Err(Error::NoProgress("all updates carry zero samples".into()));
    }
    let mut order: Vec<&LocalUpdate> = updates.iter().collect();
    order.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let mut out = vec![0.0; len];
    for u in order {
        let w = u.n as f64 / total as f64;
        for (o, p) in out.iter_mut().zip(&u.params) {
            *o += w * p;
        }
    }
    Ok(out)
}

// --------------------------------------------------------------------------
// Federated protocol
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlConfig {
    pub rounds: u64,
    /// Fraction of eligible clients sampled each round, in (0, 1].
    pub client_fraction: f64,
    pub local_epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(flatten)]
    pub model: ModelKind,
    /// Nominal token length per training example, for the cost model.
    #[serde(default = "default_seq_len")]
    pub seq_len: u64,
    /// Warm-start the logistic model from the frozen scorer's tables.
    #[serde(default)]
    pub init_from_backend: bool,
}

fn default_seq_len() -> u64 {
    128
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::Config {
                path: "client_fraction".into(),
                message: format!("{} outside (0, 1]", self.client_fraction),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                path: "batch_size".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RoundStats {
    pub round: u64,
    pub clients: usize,
    /// Sample-weighted mean of participants' local losses this round.
    pub loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedOutcome {
    pub model: GlobalModel,
    pub rounds: Vec<RoundStats>,
    pub total_train_flops: f64,
    pub total_steps: u64,
}

fn silo_features(
    silo: &ClientSilo,
    task: &Task,
    featurizer: &Featurizer,
) -> Result<Vec<(Vec<f64>, usize)>> {
    silo.train(&task.id)
        .iter()
        .map(|ex| {
            let y = task.schema.class_index(&ex.label).ok_or_else(|| {
                Error::SchemaViolation(format!("label {:?} not in schema", ex.label))
            })?;
            Ok((featurizer.featurize(&ex.input)?, y))
        })
        .collect()
}

/// Run FedAvg over the silos, recording every parameter movement in the
/// ledger: one model broadcast in and one update out per participating
/// client per round, all flagged as derived from private data.
pub fn run_federated(
    silos: &BTreeMap<String, ClientSilo>,
    task: &Task,
    featurizer: &Featurizer,
    cfg: &FlConfig,
    seed: u64,
    init: GlobalModel,
    ledger: &mut FlowLedger,
) -> Result<FederatedOutcome> {
    cfg.validate()?;
    if task.kind != TaskKind::Classification {
        return Err(Error::NoProgress(
            "federated training supports classification tasks".into(),
        ));
    }
    let mut features: BTreeMap<&str, Vec<(Vec<f64>, usize)>> = BTreeMap::new();
    for (id, silo) in silos {
        features.insert(id.as_str(), silo_features(silo, task, featurizer)?);
    }
    let eligible: Vec<&str> = features
        .iter()
        .filter(|(_, f)| !f.is_empty())
        .map(|(id, _)| *id)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoProgress("no client has training data".into()));
    }

    let mut model = init;
    let param_bytes = model.theta.len() as u64 * model.spec.bytes_per_param;
    let mut rounds = Vec::with_capacity(cfg.rounds as usize);
    let mut total_flops = 0.0;
    let mut total_steps = 0u64;

    for round in 0..cfg.rounds {
        let m = ((cfg.client_fraction * eligible.len() as f64).ceil() as usize)
            .clamp(1, eligible.len());
        let mut sample_rng = rng_for(seed, &[TAG_SAMPLE, round]);
        let mut pool: Vec<&str> = eligible.clone();
        pool.shuffle(&mut sample_rng);
        let mut participants: Vec<&str> = pool.into_iter().take(m).collect();
        participants.sort();

        let mut updates = Vec::with_capacity(m);
        let mut round_flops = 0.0;
        for (pi, id) in participants.iter().enumerate() {
            ledger.append(FlowEvent::new(
                round,
                Party::Central,
                Party::silo(*id),
                PayloadKind::ModelParams,
                param_bytes,
                true,
                true,
                Some(task.id.clone()),
            )?);

            let data = &features[id];
            let local_seed = derive_seed(seed, &[TAG_LOCAL, round, pi as u64]);
            let update = local_train(
                &model,
                id,
                data,
                cfg.local_epochs,
                cfg.lr,
                cfg.batch_size,
                local_seed,
            )?;
            let steps = update.loss_trace.len() as u64;
            total_steps += steps;
            round_flops += training_flops(
                &model.spec,
                steps,
                cfg.batch_size as u64,
                cfg.seq_len,
            );

            ledger.append(FlowEvent::new(
                round,
                Party::silo(*id),
                Party::Central,
                PayloadKind::LocalUpdate,
                param_bytes,
                true,
                true,
                Some(task.id.clone()),
            )?);
            updates.push(update);
        }

        let total_n: u64 = updates.iter().map(|u| u.n).sum();
        let loss = updates
            .iter()
            .map(|u| {
                let mean = u.loss_trace.iter().sum::<f64>() / u.loss_trace.len().max(1) as f64;
                mean * u.n as f64
            })
            .sum::<f64>()
            / total_n as f64;

        model.theta = fedavg_aggregate(&updates)?;
        total_flops += round_flops;
        rounds.push(RoundStats {
            round,
            clients: m,
            loss,
            bytes_up: param_bytes * m as u64,
            bytes_down: param_bytes * m as u64,
            flops: round_flops,
        });
    }

    Ok(FederatedOutcome { model, rounds, total_train_flops: total_flops, total_steps })
}

/// Pooled-data SGD with the same per-round step structure as a single
/// federated client, for trajectory-equivalence checks and upper bounds.
pub fn centralized_train(
    data: &[(Vec<f64>, usize)],
    cfg: &FlConfig,
    seed: u64,
    init: GlobalModel,
) -> Result<GlobalModel> {
    cfg.validate()?;
    let mut model = init;
    for round in 0..cfg.rounds {
        let local_seed = derive_seed(seed, &[TAG_LOCAL, round, 0]);
        let update = local_train(
            &model,
            "centralized",
            data,
            cfg.local_epochs,
            cfg.lr,
            cfg.batch_size,
            local_seed,
        )?;
        model.theta = update.params;
    }
    Ok(model)
}

/// Each silo trains alone from the shared init; nothing crosses any
/// boundary, so there is nothing to ledger. Clients without training data
/// keep the initial model.
pub fn train_local_only(
    silos: &BTreeMap<String, ClientSilo>,
    task: &Task,
    featurizer: &Featurizer,
    cfg: &FlConfig,
    seed: u64,
    init: &GlobalModel,
) -> Result<BTreeMap<String, GlobalModel>> {
    cfg.validate()?;
    let mut out = BTreeMap::new();
    for (id, silo) in silos {
        let data = silo_features(silo, task, featurizer)?;
        let mut model = init.clone();
        if !data.is_empty() {
            for round in 0..cfg.rounds {
                let local_seed = derive_seed(seed, &[TAG_LOCAL, round, 0]);
                let update = local_train(
                    &model,
                    id,
                    &data,
                    cfg.local_epochs,
                    cfg.lr,
                    cfg.batch_size,
                    local_seed,
                )?;
                model.theta = update.params;
            }
        }
        out.insert(id.clone(), model);
    }
    Ok(out)
}
