//! Round-synchronous client/server orchestration.
//!
//! Each round the server's broadcast (anchors or global prototypes) goes to
//! a sample of clients, every sampled client trains its own model locally
//! and answers with per-class prototypes, and the server folds those into
//! the next broadcast. Clients never see each other's parameters; the only
//! shared state is the [`Envelope`]-encoded messages.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::data::{self, DataError, Dataset, SyntheticSpec};
use crate::models::{self, BoundModel, ModelError, ModelState};
use crate::proto::{self, AnchorSet, MarginRule, ProtoError, Prototype, TgpRefine};
use crate::rng::{self, Stream};

/// Schema tag carried by every serialized message.
pub const SCHEMA: &str = "fedsa-message/1";

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("round {round}, client {client}: {term} loss is not finite")]
    NonFiniteLoss {
        round: u64,
        client: usize,
        term: &'static str,
    },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("message encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("run aborted by observer: {0}")]
    Observer(#[source] BoxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Algorithm {
    #[default]
    #[serde(rename = "fedsa")]
    FedSA,
    #[serde(rename = "fedproto")]
    FedProto,
    #[serde(rename = "fedtgp")]
    FedTGP,
    #[serde(rename = "local_only")]
    LocalOnly,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Self::FedSA, Self::FedProto, Self::FedTGP, Self::LocalOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::FedSA => "fedsa",
            Self::FedProto => "fedproto",
            Self::FedTGP => "fedtgp",
            Self::LocalOnly => "local_only",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected fedsa, fedproto, fedtgp or local_only)"))
    }
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Number of clients `m`.
    #[serde(alias = "m")]
    pub clients: usize,
    /// Fraction of clients sampled per round.
    pub rho: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// EMA decay for anchors.
    pub alpha: f64,
    /// Dirichlet concentration of the label-skew partition.
    pub beta: f64,
    /// Feature (prototype) dimension `K`.
    #[serde(alias = "K")]
    pub feature_dim: usize,
    /// Number of distinct extractor architectures `X`.
    #[serde(alias = "X")]
    pub zoo_size: usize,
    pub seed: u64,
    /// Train the anchor embedding layer before round 0.
    pub embedding_projection: bool,
    pub mcl: bool,
    pub cc: bool,
    pub anchor_steps: usize,
    pub normalized_margin: bool,
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub train_ratio: f64,
    /// CSV file (features..., label) replacing the synthetic dataset.
    pub dataset_path: Option<PathBuf>,
    /// Smallest client dataset accepted by the partitioner; defaults to the batch size.
    pub min_per_client: Option<usize>,
    pub tgp_steps: usize,
    pub tgp_margin_cap: f64,
    pub tgp_learning_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedSA,
            clients: 20,
            rho: 1.0,
            rounds: 1000,
            local_epochs: 1,
            batch_size: 10,
            learning_rate: 0.01,
            lambda1: 0.1,
            lambda2: 0.01,
            lambda3: 1.0,
            alpha: 0.9999,
            beta: 0.1,
            feature_dim: 16,
            zoo_size: 1,
            seed: 0,
            embedding_projection: true,
            mcl: true,
            cc: true,
            anchor_steps: 200,
            normalized_margin: false,
            classes: 10,
            input_dim: 20,
            samples_per_class: 200,
            center_scale: 1.0,
            noise_sigma: 1.0,
            train_ratio: 0.75,
            dataset_path: None,
            min_per_client: None,
            tgp_steps: 50,
            tgp_margin_cap: 10.0,
            tgp_learning_rate: 0.1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |msg: String| Err(FedError::InvalidConfig(msg));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must be in (0, 1], got {}", self.rho));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return bad("batch_size and local_epochs must be at least 1".into());
        }
        if self.feature_dim == 0 || self.input_dim == 0 {
            return bad("feature_dim and input_dim must be at least 1".into());
        }
        if !(1..=models::MAX_ZOO_SIZE).contains(&self.zoo_size) {
            return bad(format!("zoo_size must be in 1..={}, got {}", models::MAX_ZOO_SIZE, self.zoo_size));
        }
        if self.classes < 2 {
            return bad("classes must be at least 2".into());
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!("train_ratio must be in (0, 1), got {}", self.train_ratio));
        }
        if !(self.tgp_margin_cap >= 0.0 && self.tgp_learning_rate > 0.0) {
            return bad("tgp_margin_cap must be non-negative and tgp_learning_rate positive".into());
        }
        Ok(())
    }

    pub fn margin_rule(&self) -> MarginRule {
        if self.normalized_margin {
            MarginRule::Normalized
        } else {
            MarginRule::AsPrinted
        }
    }

    fn tgp(&self) -> TgpRefine {
        TgpRefine {
            steps: self.tgp_steps,
            margin_cap: self.tgp_margin_cap,
            learning_rate: self.tgp_learning_rate,
        }
    }

    fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            input_dim: self.input_dim,
            center_scale: self.center_scale,
            noise_sigma: self.noise_sigma,
            samples_per_class: self.samples_per_class,
        }
    }
}

/// Prototypes a client sends after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub round: u64,
    pub client_id: usize,
    pub prototypes: Vec<Prototype>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Payload {
    Anchors(AnchorSet),
    /// Global prototypes sorted by class; may omit classes.
    Prototypes(Vec<Prototype>),
}

impl Payload {
    pub fn vectors(&self) -> Vec<&[f64]> {
        match self {
            Payload::Anchors(a) => a.anchors().iter().map(Vec::as_slice).collect(),
            Payload::Prototypes(p) => p.iter().map(|p| p.vector.as_slice()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerBroadcast {
    pub round: u64,
    pub d_global: f64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    ClientUpdate(ClientUpdate),
    ServerBroadcast(ServerBroadcast),
}

/// A message with its schema tag, as written to replay logs (one JSON object per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub schema: String,
    #[serde(flatten)]
    pub message: Message,
}

impl Envelope {
    pub fn new(message: Message) -> Self {
        Self {
            schema: SCHEMA.to_owned(),
            message,
        }
    }

    pub fn to_json(&self) -> Result<String, FedError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(line: &str) -> Result<Self, FedError> {
        let env: Envelope = serde_json::from_str(line)?;
        if env.schema != SCHEMA {
            return Err(FedError::Protocol(format!(
                "unsupported message schema `{}` (expected `{SCHEMA}`)",
                env.schema
            )));
        }
        Ok(env)
    }
}

/// Uniform sample without replacement of `round(rho·m)` client ids (at least
/// one), sorted. With every client selected no randomness is drawn.
pub fn sample_clients(m: usize, rho: f64, round: u64, seed: u64) -> Vec<usize> {
    if m == 0 {
        return Vec::new();
    }
    let k = ((rho * m as f64).round() as usize).clamp(1, m);
    if k == m {
        return (0..m).collect();
    }
    let mut rng = rng::stream(seed, Stream::Sampling, round, 0);
    let mut ids = index::sample(&mut rng, m, k).into_vec();
    ids.sort_unstable();
    ids
}

/// What a client's batch objective is anchored to.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    None,
    Anchors { anchors: &'a AnchorSet, d_star: f64 },
    Prototypes(&'a BTreeMap<usize, Prototype>),
}

/// Coefficients of the auxiliary terms; a zero weight drops the term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub regularization: f64,
    pub contrastive: f64,
    pub calibration: f64,
}

impl LossWeights {
    pub fn from_config(config: &RunConfig) -> Self {
        match config.algorithm {
            Algorithm::FedSA => Self {
                regularization: config.lambda1,
                contrastive: if config.mcl { config.lambda2 } else { 0.0 },
                calibration: if config.cc { config.lambda3 } else { 0.0 },
            },
            Algorithm::FedProto | Algorithm::FedTGP => Self {
                regularization: config.lambda1,
                contrastive: 0.0,
                calibration: 0.0,
            },
            Algorithm::LocalOnly => Self {
                regularization: 0.0,
                contrastive: 0.0,
                calibration: 0.0,
            },
        }
    }
}

/// Graph nodes of one batch objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub supervised: Var,
    pub regularization: Option<Var>,
    pub contrastive: Option<Var>,
    pub calibration: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, Option<Var>); 4] {
        [
            ("supervised", Some(self.supervised)),
            ("regularization", self.regularization),
            ("contrastive", self.contrastive),
            ("calibration", self.calibration),
        ]
    }
}

/// Records the batch objective `L_S + λ1 L_R + λ2 L_MCL + λ3 L_CC`.
///
/// Class means of the batch features stand in for the local prototypes.
/// `L_R` sums over the classes in the batch, `L_MCL` averages over them.
/// Against global prototypes only the distance regularizer applies.
pub fn build_objective(
    graph: &mut Graph,
    model: &BoundModel,
    x: Var,
    labels: &[usize],
    target: Target<'_>,
    weights: LossWeights,
) -> Result<LossTerms, FedError> {
    let features = model.features(graph, x)?;
    let logits = model.logits(graph, features)?;
    let supervised = graph.softmax_cross_entropy_rows(logits, labels)?;
    let mut terms = LossTerms {
        supervised,
        regularization: None,
        contrastive: None,
        calibration: None,
        total: supervised,
    };
    if matches!(target, Target::None) {
        return Ok(terms);
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &label) in labels.iter().enumerate() {
        groups.entry(label).or_default().push(row);
    }
    let prototypes: Vec<(usize, Var)> = groups
        .iter()
        .map(|(&class, rows)| Ok((class, graph.row_mean(features, rows)?)))
        .collect::<Result<_, AutodiffError>>()?;

    match target {
        Target::None => {}
        Target::Anchors { anchors, d_star } => {
            if weights.regularization > 0.0 {
                terms.regularization = Some(proto::regularization_loss(graph, &prototypes, anchors)?);
            }
            if weights.contrastive > 0.0 {
                let per_class = prototypes
                    .iter()
                    .map(|&(class, p)| proto::mcl_loss(graph, p, class, anchors, d_star))
                    .collect::<Result<Vec<_>, _>>()?;
                let sum = graph.add_all(&per_class)?;
                terms.contrastive = Some(graph.scale(sum, 1.0 / per_class.len() as f64));
            }
            if weights.calibration > 0.0 {
                terms.calibration = Some(proto::cc_loss(graph, model.phi(), anchors)?);
            }
        }
        Target::Prototypes(global) => {
            if weights.regularization > 0.0 {
                terms.regularization = Some(proto::fedproto_reg_loss(graph, &prototypes, global)?);
            }
        }
    }

    let mut parts = vec![supervised];
    for (term, w) in [
        (terms.regularization, weights.regularization),
        (terms.contrastive, weights.contrastive),
        (terms.calibration, weights.calibration),
    ] {
        if let Some(v) = term {
            parts.push(graph.scale(v, w));
        }
    }
    terms.total = graph.add_all(&parts)?;
    Ok(terms)
}

/// Per-class means of a model's features over `indices`.
pub fn full_prototypes(state: &ModelState, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Prototype>, FedError> {
    let features = state.features(&dataset.batch(indices))?;
    Ok(proto::compute_local_prototypes(&features, &dataset.labels_of(indices)))
}

fn prototype_map(prototypes: &[Prototype]) -> BTreeMap<usize, Prototype> {
    prototypes.iter().map(|p| (p.class_id, p.clone())).collect()
}

/// Runs `local_epochs` of mini-batch gradient descent on client `client_id`'s
/// training indices against `broadcast`, then reports full-train prototypes.
///
/// The client-specific margin uses prototypes of the model as it enters the
/// round, which are the ones it reported when it last trained.
pub fn client_local_train(
    client_id: usize,
    state: &mut ModelState,
    dataset: &Dataset,
    train: &[usize],
    broadcast: &ServerBroadcast,
    config: &RunConfig,
) -> Result<ClientUpdate, FedError> {
    if train.is_empty() {
        return Err(FedError::Protocol(format!("client {client_id} has no training data")));
    }
    let round = broadcast.round;
    let weights = LossWeights::from_config(config);
    let global;
    let target = match (config.algorithm, &broadcast.payload) {
        (Algorithm::LocalOnly, _) => Target::None,
        (Algorithm::FedSA, Payload::Anchors(anchors)) => {
            let d_star = if weights.contrastive > 0.0 {
                let own = full_prototypes(state, dataset, train)?;
                let vectors: Vec<&[f64]> = own.iter().map(|p| p.vector.as_slice()).collect();
                proto::client_margin(broadcast.d_global, proto::local_margin(&vectors, config.margin_rule())).d_star
            } else {
                broadcast.d_global
            };
            Target::Anchors { anchors, d_star }
        }
        (Algorithm::FedProto | Algorithm::FedTGP, Payload::Prototypes(p)) => {
            global = prototype_map(p);
            Target::Prototypes(&global)
        }
        (alg, _) => {
            return Err(FedError::Protocol(format!(
                "{alg} client received a broadcast of the wrong kind"
            )))
        }
    };

    let mut rng = rng::stream(config.seed, Stream::LocalTraining, client_id as u64, round);
    let mut order = train.to_vec();
    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut graph = Graph::new();
            let bound = state.bind(&mut graph, true);
            let x = graph.constant(dataset.batch(batch));
            let labels = dataset.labels_of(batch);
            let terms = build_objective(&mut graph, &bound, x, &labels, target, weights)?;
            for (term, var) in terms.named() {
                if let Some(v) = var {
                    if !graph.scalar(v).is_finite() {
                        return Err(FedError::NonFiniteLoss {
                            round,
                            client: client_id,
                            term,
                        });
                    }
                }
            }
            let grads = graph.backward(terms.total)?;
            state.apply_gradients(&bound, &grads, config.learning_rate);
        }
    }

    Ok(ClientUpdate {
        round,
        client_id,
        prototypes: full_prototypes(state, dataset, train)?,
    })
}

/// Server-side state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    anchors: Option<AnchorSet>,
    broadcast: ServerBroadcast,
}

impl ServerState {
    /// Round-0 state. FedSA needs the initial anchors; the other algorithms
    /// start from an empty prototype broadcast.
    pub fn new(config: &RunConfig, anchors: Option<AnchorSet>) -> Result<Self, FedError> {
        let broadcast = match (config.algorithm, anchors.as_ref()) {
            (Algorithm::FedSA, Some(a)) => ServerBroadcast {
                round: 0,
                d_global: proto::global_margin(a, config.margin_rule()),
                payload: Payload::Anchors(a.clone()),
            },
            (Algorithm::FedSA, None) => {
                return Err(FedError::InvalidConfig("fedsa requires initial anchors".into()))
            }
            _ => ServerBroadcast {
                round: 0,
                d_global: 0.0,
                payload: Payload::Prototypes(Vec::new()),
            },
        };
        Ok(Self { anchors, broadcast })
    }

    pub fn broadcast(&self) -> &ServerBroadcast {
        &self.broadcast
    }

    pub fn anchors(&self) -> Option<&AnchorSet> {
        self.anchors.as_ref()
    }

    pub fn round(&self) -> u64 {
        self.broadcast.round
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerOutcome {
    pub broadcast: ServerBroadcast,
    /// No update for the current round arrived, so nothing was aggregated.
    pub skipped: bool,
}

/// Folds the current round's updates into the next broadcast.
///
/// Updates tagged with another round are ignored. With none left the round
/// is skipped: the previous payload is re-issued under the next round
/// number.
pub fn server_round(updates: &[ClientUpdate], state: &mut ServerState, config: &RunConfig) -> Result<ServerOutcome, FedError> {
    let round = state.round();
    let current: Vec<(usize, &[Prototype])> = updates
        .iter()
        .filter(|u| u.round == round)
        .map(|u| (u.client_id, u.prototypes.as_slice()))
        .collect();
    if current.is_empty() {
        log::warn!("round {round}: no client updates, server round skipped");
        state.broadcast.round += 1;
        return Ok(ServerOutcome {
            broadcast: state.broadcast.clone(),
            skipped: true,
        });
    }
    let aggregated = proto::aggregate_global(&current)?;
    let rule = config.margin_rule();
    let broadcast = match config.algorithm {
        Algorithm::FedSA => {
            let previous = state
                .anchors
                .as_ref()
                .ok_or_else(|| FedError::InvalidConfig("fedsa server has no anchors".into()))?;
            let next = proto::ema_update(previous, &aggregated, config.alpha)?;
            let d_global = proto::global_margin(&next, rule);
            state.anchors = Some(next.clone());
            ServerBroadcast {
                round: round + 1,
                d_global,
                payload: Payload::Anchors(next),
            }
        }
        Algorithm::FedProto | Algorithm::LocalOnly | Algorithm::FedTGP => {
            let global = if config.algorithm == Algorithm::FedTGP {
                proto::fedtgp_server_refine(&aggregated, config.tgp())?
            } else {
                aggregated
            };
            let prototypes: Vec<Prototype> = global.into_values().collect();
            let vectors: Vec<&[f64]> = prototypes.iter().map(|p| p.vector.as_slice()).collect();
            ServerBroadcast {
                round: round + 1,
                d_global: proto::local_margin(&vectors, rule).unwrap_or(0.0),
                payload: Payload::Prototypes(prototypes),
            }
        }
    };
    state.broadcast = broadcast.clone();
    Ok(ServerOutcome {
        broadcast,
        skipped: false,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy per class, `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
}

fn predict(state: &ModelState, dataset: &Dataset, indices: &[usize]) -> Result<(Tensor, Vec<usize>), FedError> {
    let mut graph = Graph::new();
    let bound = state.bind(&mut graph, false);
    let x = graph.constant(dataset.batch(indices));
    let features = bound.features(&mut graph, x)?;
    let logits = bound.logits(&mut graph, features)?;
    let logits = graph.value(logits);
    let predictions = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
    Ok((graph.value(features).clone(), predictions))
}

fn score(predictions: &[usize], labels: &[usize], classes: usize) -> Evaluation {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l < classes {
            totals[l] += 1;
            hits[l] += usize::from(p == l);
        }
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Evaluation {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
    }
}

/// Test accuracy of `state` on the samples at `indices`.
pub fn evaluate(state: &ModelState, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation, FedError> {
    if indices.is_empty() {
        return Err(FedError::Protocol("empty test set".into()));
    }
    let (_, predictions) = predict(state, dataset, indices)?;
    Ok(score(&predictions, &dataset.labels_of(indices), state.classes()))
}

/// Per-round record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based index of the completed round.
    pub round: usize,
    pub algorithm: Algorithm,
    pub participants: Vec<usize>,
    /// Test accuracy of every client, sampled this round or not.
    pub client_accuracy: Vec<f64>,
    /// Unweighted mean over clients.
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    /// Mean distance between the vectors of the broadcast just issued.
    pub global_proto_mean_pairwise_dist: f64,
    /// Mean squared distance of test features to their class mean, pooled
    /// over all clients, averaged over classes.
    pub mean_intra_class_variance: f64,
    pub d_global: f64,
    pub server_skipped: bool,
    pub wall_clock_secs: f64,
}

/// Receives messages and metrics while a run progresses. Returning an
/// error aborts the run.
pub trait Observer {
    fn message(&mut self, _envelope: &Envelope) -> Result<(), BoxError> {
        Ok(())
    }

    fn round(&mut self, _metrics: &RoundMetrics) -> Result<(), BoxError> {
        Ok(())
    }
}

impl Observer for () {}

/// How clients within a round are scheduled. Both give identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Serial,
}

/// A fully set-up simulation: data, client models and server.
#[derive(Debug, Clone)]
pub struct Federation {
    config: RunConfig,
    dataset: Dataset,
    train: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
    models: Vec<ModelState>,
    server: ServerState,
    completed: usize,
    execution: Execution,
}

impl Federation {
    pub fn new(config: &RunConfig, execution: Execution) -> Result<Self, FedError> {
        config.validate()?;
        // Anchors come first: they must not depend on any client data.
        let anchors = if config.algorithm == Algorithm::FedSA {
            let steps = if config.embedding_projection { config.anchor_steps } else { 0 };
            Some(proto::init_anchors(config.classes, config.feature_dim, config.seed, steps)?.1)
        } else {
            None
        };
        let dataset = match &config.dataset_path {
            Some(path) => {
                let ds = data::load_csv_file(path)?;
                if ds.input_dim() != config.input_dim || ds.classes() > config.classes {
                    return Err(FedError::InvalidConfig(format!(
                        "{} has {} features and {} classes, config expects {} and at most {}",
                        path.display(),
                        ds.input_dim(),
                        ds.classes(),
                        config.input_dim,
                        config.classes
                    )));
                }
                ds
            }
            None => data::generate_synthetic(&config.synthetic_spec(), config.seed)?,
        };
        Self::with_dataset(config, execution, anchors, dataset)
    }

    fn with_dataset(
        config: &RunConfig,
        execution: Execution,
        anchors: Option<AnchorSet>,
        dataset: Dataset,
    ) -> Result<Self, FedError> {
        let min_per_client = config.min_per_client.unwrap_or(config.batch_size).max(4);
        let plan = data::dirichlet_partition(dataset.labels(), config.clients, config.beta, config.seed, min_per_client)?;
        let mut train = Vec::with_capacity(config.clients);
        let mut test = Vec::with_capacity(config.clients);
        for (client, samples) in plan.clients.iter().enumerate() {
            let split_seed = rng::derive_seed(config.seed, Stream::Split, client as u64, 0);
            let (tr, te) = data::split_train_test(samples, config.train_ratio, split_seed)?;
            train.push(tr);
            test.push(te);
        }
        let zoo = models::build_zoo(config.zoo_size, config.input_dim, config.feature_dim, config.seed)?;
        let models = (0..config.clients)
            .map(|client| {
                let arch = models::architecture_for_client(client, config.zoo_size);
                let init_seed = rng::derive_seed(config.seed, Stream::ModelInit, client as u64, 0);
                models::init_parameters(arch, &zoo[arch], config.classes, init_seed)
            })
            .collect();
        let server = ServerState::new(config, anchors)?;
        Ok(Self {
            config: config.clone(),
            dataset,
            train,
            test,
            models,
            server,
            completed: 0,
            execution,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn train_indices(&self, client: usize) -> &[usize] {
        &self.train[client]
    }

    pub fn test_indices(&self, client: usize) -> &[usize] {
        &self.test[client]
    }

    pub fn models(&self) -> &[ModelState] {
        &self.models
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    /// Runs one full round, reporting messages and metrics to `observer`.
    pub fn step(&mut self, observer: &mut dyn Observer) -> Result<RoundMetrics, FedError> {
        let started = Instant::now();
        let config = &self.config;
        let broadcast = self.server.broadcast().clone();
        let participants = sample_clients(config.clients, config.rho, broadcast.round, config.seed);

        let dataset = &self.dataset;
        let train = &self.train;
        let mut selected: Vec<(usize, &mut ModelState)> = self
            .models
            .iter_mut()
            .enumerate()
            .filter(|(id, _)| participants.binary_search(id).is_ok())
            .collect();
        let work = |(id, state): &mut (usize, &mut ModelState)| {
            client_local_train(*id, state, dataset, &train[*id], &broadcast, config)
        };
        let results: Vec<Result<ClientUpdate, FedError>> = match self.execution {
            Execution::Parallel => selected.par_iter_mut().map(work).collect(),
            Execution::Serial => selected.iter_mut().map(work).collect(),
        };
        let updates = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        for u in &updates {
            observer
                .message(&Envelope::new(Message::ClientUpdate(u.clone())))
                .map_err(FedError::Observer)?;
        }

        let outcome = server_round(&updates, &mut self.server, config)?;
        observer
            .message(&Envelope::new(Message::ServerBroadcast(outcome.broadcast.clone())))
            .map_err(FedError::Observer)?;

        let eval = |(state, idx): (&ModelState, &Vec<usize>)| -> Result<(Evaluation, Tensor, Vec<usize>), FedError> {
            let (features, predictions) = predict(state, dataset, idx)?;
            let labels = dataset.labels_of(idx);
            Ok((score(&predictions, &labels, state.classes()), features, labels))
        };
        let pairs: Vec<(&ModelState, &Vec<usize>)> = self.models.iter().zip(&self.test).collect();
        let evals: Vec<_> = match self.execution {
            Execution::Parallel => pairs.into_par_iter().map(eval).collect(),
            Execution::Serial => pairs.into_iter().map(eval).collect(),
        };
        let evals = evals.into_iter().collect::<Result<Vec<_>, _>>()?;

        let client_accuracy: Vec<f64> = evals.iter().map(|(e, _, _)| e.accuracy).collect();
        let n = client_accuracy.len() as f64;
        self.completed += 1;
        let metrics = RoundMetrics {
            round: self.completed,
            algorithm: config.algorithm,
            participants,
            mean_accuracy: client_accuracy.iter().sum::<f64>() / n,
            min_accuracy: client_accuracy.iter().copied().fold(f64::INFINITY, f64::min),
            max_accuracy: client_accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            client_accuracy,
            global_proto_mean_pairwise_dist: proto::mean_pairwise_distance(&outcome.broadcast.payload.vectors()),
            mean_intra_class_variance: intra_class_variance(
                evals.iter().map(|(_, f, l)| (f, l.as_slice())),
                config.classes,
                config.feature_dim,
            ),
            d_global: outcome.broadcast.d_global,
            server_skipped: outcome.skipped,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        observer.round(&metrics).map_err(FedError::Observer)?;
        Ok(metrics)
    }
}

fn intra_class_variance<'a>(
    groups: impl Iterator<Item = (&'a Tensor, &'a [usize])>,
    classes: usize,
    dim: usize,
) -> f64 {
    let mut rows: Vec<Vec<&[f64]>> = vec![Vec::new(); classes];
    for (features, labels) in groups {
        for (r, &l) in labels.iter().enumerate() {
            if l < classes {
                rows[l].push(features.row(r));
            }
        }
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for members in rows.iter().filter(|m| !m.is_empty()) {
        let mut mean = vec![0.0; dim];
        for r in members {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        let spread: f64 = members
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
            .sum();
        total += spread / members.len() as f64;
        present += 1;
    }
    if present == 0 {
        0.0
    } else {
        total / present as f64
    }
}

/// Builds the federation and runs `config.rounds` rounds.
///
/// Metrics are handed to `observer` as each round completes, so a failure
/// midway still leaves the earlier rounds recorded.
pub fn run_experiment(config: &RunConfig, execution: Execution, observer: &mut dyn Observer) -> Result<Vec<RoundMetrics>, FedError> {
    let mut federation = Federation::new(config, execution)?;
    observer
        .message(&Envelope::new(Message::ServerBroadcast(federation.server().broadcast().clone())))
        .map_err(FedError::Observer)?;
    let mut history = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        history.push(federation.step(observer)?);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            clients: 4,
            rounds: 2,
            classes: 3,
            input_dim: 4,
            samples_per_class: 30,
            feature_dim: 4,
            zoo_size: 2,
            anchor_steps: 10,
            beta: 1.0,
            batch_size: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        for bad in [
            RunConfig { rho: 1.5, ..tiny() },
            RunConfig { rho: 0.0, ..tiny() },
            RunConfig { lambda2: -1.0, ..tiny() },
            RunConfig { alpha: 1.01, ..tiny() },
            RunConfig { zoo_size: 9, ..tiny() },
        ] {
            assert!(matches!(bad.validate(), Err(FedError::InvalidConfig(_))));
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.name()));
        }
        assert!("fedavg".parse::<Algorithm>().is_err());
    }

    #[test]
    fn sampling() {
        assert_eq!(sample_clients(5, 1.0, 3, 9), vec![0, 1, 2, 3, 4]);
        let s = sample_clients(100, 0.1, 7, 1);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_clients(100, 0.1, 7, 1));
        assert_ne!(s, sample_clients(100, 0.1, 8, 1));
        assert_eq!(sample_clients(3, 0.01, 0, 0).len(), 1);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn envelope_round_trip_and_schema_check() {
        let msg = Envelope::new(Message::ClientUpdate(ClientUpdate {
            round: 3,
            client_id: 1,
            prototypes: vec![Prototype {
                class_id: 2,
                vector: vec![0.5, -1.25],
                count: 4,
            }],
        }));
        let json = msg.to_json().unwrap();
        assert!(json.contains("\"schema\":\"fedsa-message/1\""));
        assert!(json.contains("\"type\":\"client_update\""));
        assert_eq!(Envelope::from_json(&json).unwrap(), msg);
        let wrong = json.replace("fedsa-message/1", "fedsa-message/0");
        assert!(matches!(Envelope::from_json(&wrong), Err(FedError::Protocol(_))));
    }

    #[test]
    fn server_skips_empty_and_stale_rounds() {
        let config = RunConfig {
            algorithm: Algorithm::FedProto,
            ..tiny()
        };
        let mut state = ServerState::new(&config, None).unwrap();
        let stale = ClientUpdate {
            round: 5,
            client_id: 0,
            prototypes: vec![],
        };
        let out = server_round(&[stale], &mut state, &config).unwrap();
        assert!(out.skipped);
        assert_eq!(out.broadcast.round, 1);
    }

    #[test]
    fn fedsa_round_advances_by_one_and_alpha_one_freezes() {
        let config = RunConfig { alpha: 1.0, ..tiny() };
        let (_, anchors) = proto::init_anchors(3, 4, 0, 0).unwrap();
        let mut state = ServerState::new(&config, Some(anchors.clone())).unwrap();
        let update = ClientUpdate {
            round: 0,
            client_id: 2,
            prototypes: vec![Prototype {
                class_id: 1,
                vector: vec![9.0; 4],
                count: 3,
            }],
        };
        let out = server_round(&[update], &mut state, &config).unwrap();
        assert_eq!(out.broadcast.round, 1);
        match out.broadcast.payload {
            Payload::Anchors(a) => assert_eq!(a.anchors(), anchors.anchors()),
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn fedproto_single_client_broadcasts_its_prototypes() {
        let config = RunConfig {
            algorithm: Algorithm::FedProto,
            ..tiny()
        };
        let mut state = ServerState::new(&config, None).unwrap();
        let protos = vec![
            Prototype {
                class_id: 0,
                vector: vec![1.0, 2.0],
                count: 2,
            },
            Prototype {
                class_id: 2,
                vector: vec![-1.0, 0.5],
                count: 7,
            },
        ];
        let update = ClientUpdate {
            round: 0,
            client_id: 0,
            prototypes: protos.clone(),
        };
        let out = server_round(&[update], &mut state, &config).unwrap();
        assert_eq!(out.broadcast.payload, Payload::Prototypes(protos));
    }

    #[test]
    fn tie_rule_gives_class_zero_frequency() {
        let eval = score(&[0, 0, 0, 0], &[0, 1, 0, 2], 3);
        assert_eq!(eval.accuracy, 0.5);
        assert_eq!(eval.per_class, vec![Some(1.0), Some(0.0), Some(0.0)]);
    }

    #[test]
    fn zero_rounds_produce_no_metrics() {
        let config = RunConfig { rounds: 0, ..tiny() };
        assert!(run_experiment(&config, Execution::Serial, &mut ()).unwrap().is_empty());
    }

    #[test]
    fn serial_and_parallel_agree() {
        for algorithm in Algorithm::ALL {
            let config = RunConfig { algorithm, ..tiny() };
            let a = run_experiment(&config, Execution::Serial, &mut ()).unwrap();
            let b = run_experiment(&config, Execution::Parallel, &mut ()).unwrap();
            let strip = |m: Vec<RoundMetrics>| {
                m.into_iter()
                    .map(|r| RoundMetrics {
                        wall_clock_secs: 0.0,
                        ..r
                    })
                    .collect::<Vec<_>>()
            };
            assert_eq!(strip(a), strip(b), "{algorithm}");
        }
    }
}
