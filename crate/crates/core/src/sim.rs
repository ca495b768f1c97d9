//! Deterministic discrete-event simulator.
//!
//! Hardware heterogeneity is modeled as per-client `seconds_per_batch`
//! multipliers and a shared latency/throughput network profile. Every
//! message delivery charges the byte-exact [`BandwidthLedger`] and appends a
//! trace row, so ledger totals can be recounted from the event trace.
//!
//! The event loop is strictly single-threaded and totally ordered by
//! `(time_s, seq)` with `seq` a global insertion counter, which makes every
//! run bit-reproducible from the scenario alone.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeMap};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::metrics::{
    accumulated_sq_error, eval_rmse, overall_rmse, MetricKind, MetricsError, MetricsLog, Scope,
};
use crate::model::{init_params, AdamState, MlpConfig, ParameterVector};
use crate::protocol::{
    ClientAction, ClientId, ClientState, GateBounds, ProtocolError, ProtocolMessage, server_init,
};
use crate::streaming::{
    split_stream, Frame, StorageWindow, StreamCursor, StreamError, StreamProfile, TrainingWindow,
};
use crate::train::{batches_per_epoch, TrainError, TrainHyper};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("client {client} ran out of training data at t = {time_s}")]
    NoTrainingData { client: ClientId, time_s: f64 },
}

impl From<TrainError> for SimError {
    fn from(e: TrainError) -> Self {
        SimError::Protocol(ProtocolError::Train(e))
    }
}

/// Simulated compute cost of one mini-batch step on a client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpeedProfile {
    pub client_id: ClientId,
    pub seconds_per_batch: f64,
}

/// Shared link model: fixed latency plus throughput-limited transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkProfile {
    pub latency_s: f64,
    pub bytes_per_second: f64,
}

impl Default for NetworkProfile {
    fn default() -> Self {
        Self {
            latency_s: 0.01,
            bytes_per_second: 1e6,
        }
    }
}

/// Simulated seconds to run `n_epochs` epochs of `n_batches` batches.
pub fn compute_time(profile: &ClientSpeedProfile, n_batches: usize, n_epochs: u32) -> f64 {
    profile.seconds_per_batch * n_batches as f64 * n_epochs as f64
}

/// Simulated seconds to move `n_bytes` across the link.
pub fn transfer_time(net: &NetworkProfile, n_bytes: u64) -> f64 {
    net.latency_s + n_bytes as f64 / net.bytes_per_second
}

/// A party in the simulation, ordered so ledger iteration is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Actor {
    Server,
    Client(ClientId),
}

impl Actor {
    pub fn label(&self) -> String {
        match self {
            Actor::Server => "server".to_string(),
            Actor::Client(id) => format!("client_{id}"),
        }
    }
}

/// Byte-exact accounting of every simulated transfer, by directed pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BandwidthLedger {
    entries: BTreeMap<(Actor, Actor), u64>,
    total: u64,
}

impl BandwidthLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, from: Actor, to: Actor, bytes: u64) {
        *self.entries.entry((from, to)).or_insert(0) += bytes;
        self.total += bytes;
    }

    pub fn total_bytes(&self) -> u64 {
        self.total
    }

    /// Bytes sent or received by one actor.
    pub fn bytes_involving(&self, actor: Actor) -> u64 {
        self.entries
            .iter()
            .filter(|((from, to), _)| *from == actor || *to == actor)
            .map(|(_, bytes)| bytes)
            .sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(Actor, Actor), &u64)> {
        self.entries.iter()
    }
}

/// One audited simulation action; `bytes` is zero for non-message actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time_s: f64,
    pub seq: u64,
    pub actor: Actor,
    pub action: String,
    pub bytes: u64,
}

/// Dumps the event trace as `time_s,seq,actor,action,bytes`.
pub fn write_event_trace_csv(trace: &[TraceEvent], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "time_s,seq,actor,action,bytes")?;
    for ev in trace {
        writeln!(
            out,
            "{:.16e},{},{},{},{}",
            ev.time_s,
            ev.seq,
            ev.actor.label(),
            ev.action,
            ev.bytes
        )?;
    }
    Ok(())
}

/// One client's data and placement in a scenario.
#[derive(Debug, Clone)]
pub struct ClientSetup {
    pub id: ClientId,
    pub seconds_per_batch: f64,
    pub train_frames: Vec<Frame>,
    pub eval_frames: Vec<Frame>,
    pub shuffle_seed: u64,
}

impl ClientSetup {
    /// Builds a client from a synthetic stream profile: generate, then split
    /// into the leading train fraction and trailing evaluation stream.
    pub fn from_profile(
        id: ClientId,
        seconds_per_batch: f64,
        profile: &StreamProfile,
        n_frames: usize,
        train_fraction: f64,
        shuffle_seed: u64,
    ) -> Result<Self, StreamError> {
        let frames = crate::streaming::synth_stream(profile, n_frames);
        let (train_frames, eval_frames) = split_stream(&frames, train_fraction)?;
        Ok(Self {
            id,
            seconds_per_batch,
            train_frames,
            eval_frames,
            shuffle_seed,
        })
    }
}

/// Everything one engine run needs; the same scenario drives the async
/// simulator and every baseline.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub mlp: MlpConfig,
    pub batch_size: usize,
    pub angle_scale: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub gate: GateBounds,
    pub epochs_per_round: u32,
    pub total_epochs: u64,
    pub storage_capacity: usize,
    pub training_capacity: usize,
    pub network: NetworkProfile,
    pub eval_interval_s: f64,
    pub clients: Vec<ClientSetup>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        self.mlp
            .validate()
            .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        if self.clients.is_empty() {
            return Err(SimError::InvalidScenario("no clients".into()));
        }
        if self.total_epochs == 0 {
            return Err(SimError::InvalidScenario("total_epochs must be >= 1".into()));
        }
        if self.epochs_per_round == 0 {
            return Err(SimError::InvalidScenario(
                "epochs_per_round must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(SimError::InvalidScenario("batch_size must be >= 1".into()));
        }
        if !(self.angle_scale > 0.0) {
            return Err(SimError::InvalidScenario(
                "angle_scale must be positive".into(),
            ));
        }
        if !(self.network.bytes_per_second > 0.0) || self.network.latency_s < 0.0 {
            return Err(SimError::InvalidScenario("bad network profile".into()));
        }
        if !(self.eval_interval_s > 0.0) {
            return Err(SimError::InvalidScenario(
                "eval_interval_s must be positive".into(),
            ));
        }
        for c in &self.clients {
            if !(c.seconds_per_batch > 0.0) {
                return Err(SimError::InvalidScenario(format!(
                    "client {} seconds_per_batch must be positive",
                    c.id
                )));
            }
            if c.eval_frames.is_empty() {
                return Err(SimError::InvalidScenario(format!(
                    "client {} has no evaluation frames",
                    c.id
                )));
            }
        }
        Ok(())
    }

    pub fn hyper_for(&self, client: &ClientSetup) -> TrainHyper {
        TrainHyper {
            batch_size: self.batch_size,
            angle_scale: self.angle_scale,
            shuffle_seed: client.shuffle_seed,
        }
    }

    pub fn fresh_optimizer(&self) -> AdamState {
        AdamState::with_hyper(
            self.mlp.parameter_count(),
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
        )
    }
}

/// Common result shape of every engine.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// The model deployed at each vehicle when it finished.
    pub client_models: Vec<ParameterVector>,
    /// The server-side model, for methods that have one.
    pub global_model: Option<ParameterVector>,
    pub metrics: MetricsLog,
    pub ledger: BandwidthLedger,
    pub trace: Vec<TraceEvent>,
    /// Simulated time at which each client finished its final epoch (and,
    /// for protocols, its final sync).
    pub completion_time_s: Vec<f64>,
    /// The training-time metric: average completion across vehicles.
    pub avg_completion_time_s: f64,
    pub end_time_s: f64,
    /// Per-client mean pre-update batch loss of every completed epoch, in
    /// normalized units.
    pub epoch_losses: Vec<Vec<f64>>,
    /// Aggregations the server accepted from each client (async only).
    pub accepted_pushes: Vec<u64>,
}

#[derive(Debug)]
enum EventKind {
    TrainComplete { client: usize },
    DeliverToServer { from: usize, msg: ProtocolMessage },
    DeliverToClient { client: usize, msg: ProtocolMessage },
    Eval,
}

struct QueuedEvent {
    time_s: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq && self.time_s.total_cmp(&other.time_s).is_eq()
    }
}

impl Eq for QueuedEvent {}

impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time_s
            .total_cmp(&other.time_s)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Min-queue over `(time_s, seq)`; `seq` is assigned at insertion, making
/// the dequeue order a deterministic total order.
struct EventQueue {
    heap: BinaryHeap<Reverse<QueuedEvent>>,
    next_seq: u64,
    last_time: f64,
}

impl EventQueue {
    fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            last_time: 0.0,
        }
    }

    fn schedule(&mut self, time_s: f64, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(QueuedEvent { time_s, seq, kind }));
        seq
    }

    fn pop(&mut self) -> Option<QueuedEvent> {
        let ev = self.heap.pop().map(|Reverse(e)| e)?;
        debug_assert!(ev.time_s >= self.last_time, "clock went backwards");
        self.last_time = ev.time_s;
        Some(ev)
    }
}

struct AsyncClientRuntime {
    state: ClientState,
    cursor: StreamCursor,
    hyper: TrainHyper,
    speed: ClientSpeedProfile,
    epoch_losses: Vec<f64>,
    done: bool,
    completion_time_s: f64,
}

/// Runs the asynchronous federated learning protocol under simulated time
/// until every client has completed `total_epochs` local epochs.
pub fn run_simulation(scenario: &Scenario) -> Result<RunOutcome, SimError> {
    scenario.validate()?;

    let w0 = init_params(&scenario.mlp)?;
    let mut server = server_init(w0.clone(), scenario.gate.lower);
    let mut queue = EventQueue::new();
    let mut ledger = BandwidthLedger::new();
    let mut trace: Vec<TraceEvent> = Vec::new();
    let mut log = MetricsLog::new();
    let mut accepted_pushes = vec![0u64; scenario.clients.len()];

    let mut clients: Vec<AsyncClientRuntime> = scenario
        .clients
        .iter()
        .map(|setup| AsyncClientRuntime {
            state: ClientState::new(
                setup.id,
                w0.clone(),
                scenario.gate.lower,
                scenario.gate,
                scenario.epochs_per_round,
                scenario.fresh_optimizer(),
                StorageWindow::new(scenario.storage_capacity),
                TrainingWindow::new(scenario.training_capacity),
            ),
            cursor: StreamCursor::new(setup.train_frames.clone()),
            hyper: scenario.hyper_for(setup),
            speed: ClientSpeedProfile {
                client_id: setup.id,
                seconds_per_batch: setup.seconds_per_batch,
            },
            epoch_losses: Vec::new(),
            done: false,
            completion_time_s: 0.0,
        })
        .collect();

    // First metrics snapshot, then every client fetches the initial model.
    queue.schedule(0.0, EventKind::Eval);
    for idx in 0..clients.len() {
        let msg = clients[idx].state.begin_fetch()?;
        let at = transfer_time(&scenario.network, msg.wire_size());
        queue.schedule(at, EventKind::DeliverToServer { from: idx, msg });
    }

    let log_eval = |log: &mut MetricsLog,
                    clients: &[AsyncClientRuntime],
                    scenario: &Scenario,
                    time_s: f64|
     -> Result<(), SimError> {
        let mut rmses = Vec::with_capacity(clients.len());
        let mut counts = Vec::with_capacity(clients.len());
        for (rt, setup) in clients.iter().zip(&scenario.clients) {
            let r = eval_rmse(
                &rt.state.weights,
                &scenario.mlp,
                &setup.eval_frames,
                scenario.angle_scale,
            )?;
            let acc = accumulated_sq_error(
                &rt.state.weights,
                &scenario.mlp,
                &setup.eval_frames,
                scenario.angle_scale,
            )?;
            log.push(time_s, Scope::Client(setup.id), MetricKind::Rmse, r);
            log.push(
                time_s,
                Scope::Client(setup.id),
                MetricKind::AccSqErr,
                *acc.last().unwrap(),
            );
            log.push(
                time_s,
                Scope::Client(setup.id),
                MetricKind::EpochsDone,
                rt.state.epochs_done as f64,
            );
            rmses.push(r);
            counts.push(setup.eval_frames.len());
        }
        log.push(
            time_s,
            Scope::Overall,
            MetricKind::Rmse,
            overall_rmse(&rmses, &counts)?,
        );
        Ok(())
    };

    while let Some(ev) = queue.pop() {
        let now = ev.time_s;
        match ev.kind {
            EventKind::Eval => {
                log_eval(&mut log, &clients, scenario, now)?;
                trace.push(TraceEvent {
                    time_s: now,
                    seq: ev.seq,
                    actor: Actor::Server,
                    action: "eval".into(),
                    bytes: 0,
                });
                if clients.iter().any(|c| !c.done) {
                    queue.schedule(now + scenario.eval_interval_s, EventKind::Eval);
                }
            }
            EventKind::TrainComplete { client } => {
                trace.push(TraceEvent {
                    time_s: now,
                    seq: ev.seq,
                    actor: Actor::Client(clients[client].state.client_id),
                    action: "train_complete".into(),
                    bytes: 0,
                });
                let rt = &mut clients[client];
                let losses = rt.state.train_round(&scenario.mlp, &rt.hyper.clone())?;
                rt.epoch_losses.extend(losses);
                let msg = rt.state.begin_sync()?;
                let at = now + transfer_time(&scenario.network, msg.wire_size());
                queue.schedule(at, EventKind::DeliverToServer { from: client, msg });
            }
            EventKind::DeliverToServer { from, msg } => {
                let sender = Actor::Client(clients[from].state.client_id);
                let bytes = msg.wire_size();
                ledger.charge(sender, Actor::Server, bytes);
                trace.push(TraceEvent {
                    time_s: now,
                    seq: ev.seq,
                    actor: sender,
                    action: msg.action_name().into(),
                    bytes,
                });
                if matches!(msg, ProtocolMessage::PushUpdate { .. }) {
                    accepted_pushes[from] += 1;
                }
                let reply = server.handle(&msg)?;
                let at = now + transfer_time(&scenario.network, reply.wire_size());
                queue.schedule(at, EventKind::DeliverToClient { client: from, msg: reply });
            }
            EventKind::DeliverToClient { client, msg } => {
                let receiver = Actor::Client(clients[client].state.client_id);
                let bytes = msg.wire_size();
                ledger.charge(Actor::Server, receiver, bytes);
                trace.push(TraceEvent {
                    time_s: now,
                    seq: ev.seq,
                    actor: Actor::Server,
                    action: msg.action_name().into(),
                    bytes,
                });
                match clients[client].state.handle_reply(&msg)? {
                    ClientAction::Send(next) => {
                        let at = now + transfer_time(&scenario.network, next.wire_size());
                        queue.schedule(at, EventKind::DeliverToServer { from: client, msg: next });
                    }
                    ClientAction::Resume => {
                        schedule_next_round(scenario, &mut clients[client], &mut queue, now)?;
                    }
                }
            }
        }
    }

    if clients.iter().any(|c| !c.done) {
        return Err(SimError::InvalidScenario(
            "simulation drained with unfinished clients".into(),
        ));
    }

    let completion_time_s: Vec<f64> = clients.iter().map(|c| c.completion_time_s).collect();
    let end_time_s = completion_time_s.iter().cloned().fold(0.0, f64::max);
    log_eval(&mut log, &clients, scenario, end_time_s)?;

    let avg = completion_time_s.iter().sum::<f64>() / completion_time_s.len() as f64;
    Ok(RunOutcome {
        client_models: clients.iter().map(|c| c.state.weights.clone()).collect(),
        global_model: Some(server.weights().clone()),
        metrics: log,
        ledger,
        trace,
        completion_time_s,
        avg_completion_time_s: avg,
        end_time_s,
        epoch_losses: clients.into_iter().map(|c| c.epoch_losses).collect(),
        accepted_pushes,
    })
}

/// Ingests the next storage-window chunk (when the stream still has one) and
/// schedules the round's completion, or marks the client done.
fn schedule_next_round(
    scenario: &Scenario,
    rt: &mut AsyncClientRuntime,
    queue: &mut EventQueue,
    now: f64,
) -> Result<(), SimError> {
    if rt.state.epochs_done >= scenario.total_epochs {
        rt.done = true;
        rt.completion_time_s = now;
        return Ok(());
    }
    rt.cursor
        .ingest_chunk(&mut rt.state.storage, &mut rt.state.training)?;
    if rt.state.training.is_empty() {
        return Err(SimError::NoTrainingData {
            client: rt.state.client_id,
            time_s: now,
        });
    }
    let n_batches = batches_per_epoch(rt.state.training.len(), scenario.batch_size);
    let dt = compute_time(&rt.speed, n_batches, scenario.epochs_per_round);
    queue.schedule(
        now + dt,
        EventKind::TrainComplete {
            client: client_index(scenario, rt.state.client_id),
        },
    );
    Ok(())
}

fn client_index(scenario: &Scenario, id: ClientId) -> usize {
    scenario
        .clients
        .iter()
        .position(|c| c.id == id)
        .expect("client id belongs to the scenario")
}
