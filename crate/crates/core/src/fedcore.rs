//! Federated averaging over hospital clients.
//!
//! A round broadcasts the global model to every client, lets the clients
//! that flagged drift for the current increment retrain the head on their
//! own pool, and folds the returned heads into the global model:
//!
//! ```text
//! fedavg = sum((n_i / sum(n)) * w_i)           (clients sorted by id)
//! global = (1 - momentum) * previous + momentum * fedavg
//! ```
//!
//! Only [`LocalUpdate`] values leave a client; they carry head parameters,
//! a sample count and aggregate scores, never samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{to_matrix, DatasetShard, Sample};
use crate::driftwatch::{DriftDetector, DriftVerdict};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix};
use crate::nnkernel::{train_local, HyperParams, Mlp};
use crate::seed;
use crate::transfer::GlobalModel;

/// Which model a client tests for drift on a new increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftReference {
    /// The client's own latest model (trained head, or the last broadcast).
    #[default]
    Local,
    /// The global model received at the start of the increment.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    /// Every delivered increment joins the training pool.
    #[default]
    Always,
    /// Only increments that triggered drift join the pool.
    DriftOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClientPolicy {
    pub drift_reference: DriftReference,
    pub merge: MergePolicy,
}

#[derive(Debug, Clone)]
struct OpenIncrement {
    verdict: DriftVerdict,
    merged: Vec<Sample>,
}

/// One hospital. Owns its pool; nothing outside this type reads it.
#[derive(Debug, Clone)]
pub struct ClientState {
    hospital_id: u16,
    pool: Vec<Sample>,
    local: Option<Mlp>,
    detector: DriftDetector,
    policy: ClientPolicy,
    open: Option<OpenIncrement>,
}

impl ClientState {
    pub fn new(hospital_id: u16, detector: DriftDetector, policy: ClientPolicy) -> Self {
        ClientState {
            hospital_id,
            pool: Vec::new(),
            local: None,
            detector,
            policy,
            open: None,
        }
    }

    pub fn hospital_id(&self) -> u16 {
        self.hospital_id
    }

    pub fn sample_count(&self) -> usize {
        self.pool.len()
    }

    pub fn local_model(&self) -> Option<&Mlp> {
        self.local.as_ref()
    }

    pub fn detector(&self) -> &DriftDetector {
        &self.detector
    }

    /// Whether the client retrains during the open increment.
    pub fn is_drifted(&self) -> bool {
        self.open.as_ref().is_some_and(|o| o.verdict.drifted)
    }

    /// Tests a newly delivered increment for drift, then merges it into the
    /// pool according to the merge policy. `global` is the model the server
    /// is about to broadcast.
    pub fn begin_increment(
        &mut self,
        delivered: Vec<Sample>,
        global: &Mlp,
    ) -> Result<DriftVerdict> {
        let verdict = if delivered.is_empty() {
            DriftVerdict::no_data(self.detector.baseline())
        } else {
            let reference = match self.policy.drift_reference {
                DriftReference::Local => self.local.as_ref().unwrap_or(global),
                DriftReference::Global => global,
            };
            self.detector.assess(reference, &delivered)?
        };
        let merge = match self.policy.merge {
            MergePolicy::Always => true,
            MergePolicy::DriftOnly => verdict.drifted,
        };
        let merged = if merge {
            self.pool.extend(delivered.iter().cloned());
            delivered
        } else {
            Vec::new()
        };
        self.open = Some(OpenIncrement {
            verdict: verdict.clone(),
            merged,
        });
        Ok(verdict)
    }

    pub fn receive_global(&mut self, global: &Mlp) {
        self.local = Some(global.clone());
    }

    /// Closes the open increment: a client that retrained records its
    /// post-training pool accuracy as the new drift baseline.
    pub fn end_increment(&mut self) -> Result<()> {
        let Some(open) = self.open.take() else {
            return Ok(());
        };
        match (&self.local, open.verdict.drifted && !self.pool.is_empty()) {
            (Some(local), true) => {
                let cm = metrics::evaluate(local, &self.pool)?;
                self.detector.update_baseline(cm.accuracy(), &open.merged)
            }
            _ => {
                self.detector.absorb(&open.merged);
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub hospital_id: u16,
    /// Trained head (the layers above the frozen backbone).
    pub head: Mlp,
    pub sample_count: u64,
    /// Trained model scored on the client's own pool.
    pub local_confusion: ConfusionMatrix,
}

impl LocalUpdate {
    pub fn local_accuracy(&self) -> f64 {
        self.local_confusion.accuracy()
    }
}

/// Copies `global` into the client, trains it on the client's pool and
/// returns the trained head.
pub fn local_train(
    client: &mut ClientState,
    global: &Mlp,
    hyper: &HyperParams,
) -> Result<LocalUpdate> {
    if client.pool.is_empty() {
        return Err(Error::Empty("client pool"));
    }
    if client.pool[0].features.len() != global.input_dim() {
        return Err(Error::dims(format!(
            "hospital {} has {} features, model expects {}",
            client.hospital_id,
            client.pool[0].features.len(),
            global.input_dim()
        )));
    }
    let (x, y) = to_matrix(&client.pool);
    let trained = train_local(global, x.view(), &y, hyper)?;
    let local_confusion = metrics::evaluate(&trained, &client.pool)?;
    let head = match trained.frozen_prefix() {
        0 => trained.clone(),
        k => trained.split_at(k)?.1,
    };
    client.local = Some(trained);
    Ok(LocalUpdate {
        hospital_id: client.hospital_id,
        head,
        sample_count: client.pool.len() as u64,
        local_confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: GlobalModel,
    pub round: u32,
    /// Weight of the fresh average against the previous global, in (0, 1].
    pub momentum: f64,
}

impl ServerState {
    pub fn new(global: GlobalModel, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "server momentum {momentum} must lie in (0, 1]"
            )));
        }
        Ok(ServerState {
            round: global.round,
            global,
            momentum,
        })
    }
}

/// Sample-count-weighted average of the update heads, blended with the
/// previous global head by the server momentum. Order-independent: updates
/// are combined in hospital-id order.
pub fn aggregate(updates: &[LocalUpdate], server: &ServerState) -> Result<ServerState> {
    if updates.is_empty() {
        return Err(Error::Empty("update set"));
    }
    let prev_head = server.global.head();
    let mut sorted: Vec<&LocalUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.hospital_id);
    for pair in sorted.windows(2) {
        if pair[0].hospital_id == pair[1].hospital_id {
            return Err(Error::InvalidArgument(format!(
                "duplicate update from hospital {}",
                pair[0].hospital_id
            )));
        }
    }
    for u in &sorted {
        if u.head.layer_dims() != prev_head.layer_dims() {
            return Err(Error::dims(format!(
                "hospital {} sent head {:?}, global head is {:?}",
                u.hospital_id,
                u.head.layer_dims(),
                prev_head.layer_dims()
            )));
        }
        if u.sample_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "hospital {} reported zero samples",
                u.hospital_id
            )));
        }
        let finite = u
            .head
            .weights()
            .iter()
            .all(|w| w.iter().all(|v| v.is_finite()))
            && u.head
                .biases()
                .iter()
                .all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("update parameters"));
        }
    }

    let total: f64 = sorted.iter().map(|u| u.sample_count as f64).sum();
    let mu = server.momentum;
    let mut weights = Vec::with_capacity(prev_head.num_layers());
    let mut biases = Vec::with_capacity(prev_head.num_layers());
    for l in 0..prev_head.num_layers() {
        let mut w = ndarray::Array2::<f64>::zeros(prev_head.weights()[l].raw_dim());
        let mut b = ndarray::Array1::<f64>::zeros(prev_head.biases()[l].len());
        for u in &sorted {
            let share = u.sample_count as f64 / total;
            w.scaled_add(share, &u.head.weights()[l]);
            b.scaled_add(share, &u.head.biases()[l]);
        }
        if mu != 1.0 {
            w = &prev_head.weights()[l] * (1.0 - mu) + w * mu;
            b = &prev_head.biases()[l] * (1.0 - mu) + b * mu;
        }
        weights.push(w);
        biases.push(b);
    }
    let head = Mlp::from_parts(weights, biases, 0)?;
    let model = match server.global.backbone_depth() {
        0 => head,
        k => Mlp::compose(&server.global.model.split_at(k)?.0, &head)?,
    };
    Ok(ServerState {
        global: GlobalModel {
            model,
            round: server.round + 1,
            increment: server.global.increment,
        },
        round: server.round + 1,
        momentum: server.momentum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalScore {
    pub hospital_id: u16,
    pub sample_count: u64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl From<&LocalUpdate> for LocalScore {
    fn from(u: &LocalUpdate) -> Self {
        LocalScore {
            hospital_id: u.hospital_id,
            sample_count: u.sample_count,
            accuracy: u.local_accuracy(),
            confusion: u.local_confusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Global round counter, 1-based.
    pub round: u32,
    pub increment: u32,
    pub round_in_increment: u32,
    pub participants: Vec<u16>,
    pub global_accuracy: f64,
    pub global_confusion: ConfusionMatrix,
    pub local: Vec<LocalScore>,
}

/// Seed for one client's local training in one round.
pub fn local_seed(model_seed: u64, hospital_id: u16, round: u32) -> u64 {
    const STREAM_LOCAL: u64 = 0x10CA1;
    seed::derive(
        model_seed,
        &[STREAM_LOCAL, hospital_id as u64, round as u64],
    )
}

#[derive(Debug, Clone, Copy)]
pub struct RoundContext {
    pub increment: u32,
    pub round_in_increment: u32,
    pub model_seed: u64,
}

/// Finishes a round from the collected updates: aggregates them (or keeps
/// the global unchanged when there are none) and scores the result on the
/// test pool. Shared by the in-process and networked servers.
pub fn close_round(
    server: &ServerState,
    updates: &[LocalUpdate],
    test_set: &DatasetShard,
    ctx: RoundContext,
) -> Result<(ServerState, RoundReport)> {
    let mut next = if updates.is_empty() {
        let mut s = server.clone();
        s.round += 1;
        s.global.round = s.round;
        s
    } else {
        aggregate(updates, server)?
    };
    next.global.increment = ctx.increment;
    let global_confusion = metrics::evaluate(&next.global.model, &test_set.samples)?;
    let mut local: Vec<LocalScore> = updates.iter().map(LocalScore::from).collect();
    local.sort_by_key(|s| s.hospital_id);
    let report = RoundReport {
        round: next.round,
        increment: ctx.increment,
        round_in_increment: ctx.round_in_increment,
        participants: local.iter().map(|s| s.hospital_id).collect(),
        global_accuracy: global_confusion.accuracy(),
        global_confusion,
        local,
    };
    Ok((next, report))
}

/// Broadcast, local training by `participants`, aggregation and global
/// evaluation.
pub fn run_round(
    server: &ServerState,
    clients: &mut [ClientState],
    participants: &[u16],
    hyper: &HyperParams,
    test_set: &DatasetShard,
    ctx: RoundContext,
) -> Result<(ServerState, RoundReport)> {
    for &id in participants {
        if !clients.iter().any(|c| c.hospital_id == id) {
            return Err(Error::UnknownHospital(id));
        }
    }
    let global = &server.global.model;
    for c in clients.iter_mut() {
        c.receive_global(global);
    }
    let round = server.round + 1;
    let updates = clients
        .par_iter_mut()
        .filter(|c| participants.contains(&c.hospital_id))
        .map(|c| {
            let h = hyper.with_seed(local_seed(ctx.model_seed, c.hospital_id, round));
            local_train(c, global, &h).map_err(|e| Error::Context {
                increment: ctx.increment as usize,
                round: round as usize,
                hospital: c.hospital_id,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    close_round(server, &updates, test_set, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driftwatch::DriftSettings;
    use ndarray::{array, Array1};

    fn scalar_update(id: u16, w: f64, n: u64) -> LocalUpdate {
        LocalUpdate {
            hospital_id: id,
            head: Mlp::from_parts(vec![array![[w]]], vec![array![0.0]], 0).unwrap(),
            sample_count: n,
            local_confusion: ConfusionMatrix::default(),
        }
    }

    fn scalar_server(w: f64, momentum: f64) -> ServerState {
        let model = Mlp::from_parts(vec![array![[w]]], vec![array![0.0]], 0).unwrap();
        ServerState::new(
            GlobalModel {
                model,
                round: 0,
                increment: 0,
            },
            momentum,
        )
        .unwrap()
    }

    #[test]
    fn weighted_mean() {
        let s = aggregate(
            &[scalar_update(1, 1.0, 1), scalar_update(2, 3.0, 3)],
            &scalar_server(0.0, 1.0),
        )
        .unwrap();
        assert_eq!(s.global.model.weights()[0][[0, 0]], 2.5);
        assert_eq!(s.round, 1);
    }

    #[test]
    fn equal_counts_give_plain_mean() {
        let s = aggregate(
            &[
                scalar_update(1, 1.0, 4),
                scalar_update(2, 2.0, 4),
                scalar_update(3, 6.0, 4),
            ],
            &scalar_server(0.0, 1.0),
        )
        .unwrap();
        assert_eq!(s.global.model.weights()[0][[0, 0]], 3.0);
    }

    #[test]
    fn momentum_blends_with_previous() {
        let s = aggregate(
            &[scalar_update(1, 1.0, 1), scalar_update(2, 3.0, 3)],
            &scalar_server(0.0, 0.5),
        )
        .unwrap();
        assert_eq!(s.global.model.weights()[0][[0, 0]], 1.25);
    }

    #[test]
    fn aggregate_errors() {
        let server = scalar_server(0.0, 1.0);
        assert!(matches!(aggregate(&[], &server), Err(Error::Empty(_))));
        let wide = LocalUpdate {
            head: Mlp::init(&[2, 1], 0).unwrap(),
            ..scalar_update(1, 0.0, 1)
        };
        assert!(matches!(
            aggregate(&[wide], &server),
            Err(Error::Dimension(_))
        ));
        assert!(aggregate(&[scalar_update(1, 1.0, 0)], &server).is_err());
        assert!(aggregate(
            &[scalar_update(1, 1.0, 1), scalar_update(1, 2.0, 1)],
            &server
        )
        .is_err());
        assert!(ServerState::new(server.global.clone(), 0.0).is_err());
        assert!(ServerState::new(server.global.clone(), 1.5).is_err());
    }

    #[test]
    fn aggregate_keeps_backbone() {
        let mut model = Mlp::init(&[3, 4, 2], 1).unwrap();
        model.set_frozen_prefix(1).unwrap();
        let server = ServerState::new(
            GlobalModel {
                model: model.clone(),
                round: 0,
                increment: 0,
            },
            1.0,
        )
        .unwrap();
        let u = LocalUpdate {
            hospital_id: 1,
            head: Mlp::from_parts(
                vec![array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]]],
                vec![Array1::zeros(2)],
                0,
            )
            .unwrap(),
            sample_count: 3,
            local_confusion: ConfusionMatrix::default(),
        };
        let next = aggregate(std::slice::from_ref(&u), &server).unwrap();
        assert_eq!(next.global.model.weights()[0], model.weights()[0]);
        assert_eq!(next.global.model.frozen_prefix(), 1);
        assert_eq!(next.global.head(), u.head);
    }

    fn separable_pool(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let s = if label == 1 { 1.0 } else { -1.0 };
                Sample {
                    features: vec![s * (1.0 + (i % 7) as f64 * 0.1), (i % 5) as f64 * 0.2 - 0.4],
                    label,
                }
            })
            .collect()
    }

    fn client(id: u16) -> ClientState {
        ClientState::new(
            id,
            DriftDetector::new(DriftSettings::default()).unwrap(),
            ClientPolicy::default(),
        )
    }

    #[test]
    fn local_train_fits_separable_pool() {
        let mut c = client(3);
        let global = Mlp::init(&[2, 8, 2], 4).unwrap();
        c.begin_increment(separable_pool(60), &global).unwrap();
        let h = HyperParams {
            learning_rate: 0.01,
            ..HyperParams::default()
        };
        let u = local_train(&mut c, &global, &h).unwrap();
        assert!(u.local_accuracy() >= 0.95, "{}", u.local_accuracy());
        assert_eq!(u.sample_count, 60);
        assert_eq!(u.hospital_id, 3);
    }

    #[test]
    fn zero_epochs_returns_global_head() {
        let mut c = client(1);
        let mut global = Mlp::init(&[2, 8, 2], 4).unwrap();
        global.set_frozen_prefix(1).unwrap();
        c.begin_increment(separable_pool(10), &global).unwrap();
        let h = HyperParams {
            epochs: 0,
            ..HyperParams::default()
        };
        let u = local_train(&mut c, &global, &h).unwrap();
        assert_eq!(u.head, global.split_at(1).unwrap().1);
    }

    #[test]
    fn local_train_needs_data_and_matching_dims() {
        let mut c = client(1);
        let global = Mlp::init(&[2, 2], 0).unwrap();
        assert!(matches!(
            local_train(&mut c, &global, &HyperParams::default()),
            Err(Error::Empty(_))
        ));
        c.begin_increment(separable_pool(4), &global).unwrap();
        let other = Mlp::init(&[3, 2], 0).unwrap();
        assert!(matches!(
            local_train(&mut c, &other, &HyperParams::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn merge_policies_and_baseline() {
        let global = Mlp::init(&[2, 2], 0).unwrap();
        let mut c = ClientState::new(
            1,
            DriftDetector::new(DriftSettings::default()).unwrap(),
            ClientPolicy {
                merge: MergePolicy::DriftOnly,
                ..ClientPolicy::default()
            },
        );
        let v = c.begin_increment(separable_pool(8), &global).unwrap();
        assert!(v.drifted);
        assert_eq!(c.sample_count(), 8);
        c.receive_global(&global);
        c.end_increment().unwrap();
        assert!(c.detector().baseline().is_some());
        // same model, same distribution: no drift, so nothing merges
        let v = c.begin_increment(separable_pool(8), &global).unwrap();
        assert!(!v.drifted);
        assert_eq!(c.sample_count(), 8);
        c.end_increment().unwrap();
        let v = c.begin_increment(Vec::new(), &global).unwrap();
        assert!(!v.drifted);
    }

    #[test]
    fn single_participant_round_adopts_its_head() {
        let global = Mlp::init(&[2, 4, 2], 2).unwrap();
        let server = ServerState::new(
            GlobalModel {
                model: global.clone(),
                round: 0,
                increment: 1,
            },
            1.0,
        )
        .unwrap();
        let mut clients = vec![client(1), client(2)];
        for c in clients.iter_mut() {
            c.begin_increment(separable_pool(12), &global).unwrap();
        }
        let test = DatasetShard {
            hospital_id: 0,
            samples: separable_pool(6),
        };
        let h = HyperParams {
            epochs: 2,
            ..HyperParams::default()
        };
        let ctx = RoundContext {
            increment: 1,
            round_in_increment: 0,
            model_seed: 9,
        };
        let (next, report) = run_round(&server, &mut clients, &[2], &h, &test, ctx).unwrap();
        assert_eq!(report.participants, vec![2]);
        assert_eq!(&next.global.model, clients[1].local_model().unwrap());
        assert_eq!(report.round, 1);
        assert!(matches!(
            run_round(&server, &mut clients, &[7], &h, &test, ctx),
            Err(Error::UnknownHospital(7))
        ));
    }

    #[test]
    fn empty_round_keeps_global() {
        let global = Mlp::init(&[2, 2], 2).unwrap();
        let server = ServerState::new(
            GlobalModel {
                model: global.clone(),
                round: 4,
                increment: 1,
            },
            1.0,
        )
        .unwrap();
        let test = DatasetShard {
            hospital_id: 0,
            samples: separable_pool(6),
        };
        let ctx = RoundContext {
            increment: 2,
            round_in_increment: 0,
            model_seed: 0,
        };
        let (next, report) = run_round(
            &server,
            &mut [client(1)],
            &[],
            &HyperParams::default(),
            &test,
            ctx,
        )
        .unwrap();
        assert_eq!(next.global.model, global);
        assert_eq!(next.round, 5);
        assert!(report.participants.is_empty());
    }
}
