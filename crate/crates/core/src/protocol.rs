//! Version-gated asynchronous aggregation protocol.
//!
//! The server keeps a global model plus a monotone version counter. Clients
//! train locally, then gate on the version gap `d = ver - ver_k`:
//!
//! - `d > a_u`: the client is too stale; it refetches the global model.
//! - `d < a_l`: the client is too fresh; it keeps training without talking
//!   to the server.
//! - `a_l <= d <= a_u`: the client pushes its weights, and the server blends
//!   them into the global model with weight `alpha = 1 / (d + 1)` — the
//!   staler the update, the smaller its influence — then bumps the version.
//!
//! Everything is expressed through [`ProtocolMessage`] values so the same
//! client and server logic runs under the simulator or a real transport.

use thiserror::Error;

use crate::model::{AdamState, MlpConfig, ParameterVector};
use crate::streaming::{StorageWindow, TrainingWindow};
use crate::train::{train_epochs, TrainError, TrainHyper};

pub type ClientId = u64;

/// Fixed header charged for every message, plus the per-weight payload cost
/// for model-carrying messages. These feed the bandwidth ledger; the
/// simulator does no actual wire serialization.
pub const MESSAGE_HEADER_BYTES: u64 = 64;
pub const BYTES_PER_PARAMETER: u64 = 8;

pub const DEFAULT_LOWER_BOUND: u64 = 2;
pub const DEFAULT_UPPER_BOUND: u64 = 6;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("client version {client} is ahead of global version {global}")]
    VersionAhead { client: u64, global: u64 },
    #[error("parameter length mismatch: server {server}, update {update}")]
    LengthMismatch { server: usize, update: usize },
    #[error("unexpected {message} while {state}")]
    UnexpectedMessage {
        state: &'static str,
        message: &'static str,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Staleness gating bounds `(a_l, a_u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateBounds {
    pub lower: u64,
    pub upper: u64,
}

impl GateBounds {
    pub fn new(lower: u64, upper: u64) -> Self {
        assert!(lower <= upper, "gate lower bound must not exceed upper bound");
        Self { lower, upper }
    }
}

impl Default for GateBounds {
    fn default() -> Self {
        Self::new(DEFAULT_LOWER_BOUND, DEFAULT_UPPER_BOUND)
    }
}

/// Outcome of the client-side staleness gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    /// `ver - ver_k > a_u`: refetch the global model before training on.
    TooOld,
    /// `ver - ver_k < a_l`: keep training locally, no exchange.
    TooFresh,
    /// `a_l <= ver - ver_k <= a_u`: push the local update.
    Send,
}

/// The three-way version gate. The difference is taken in signed arithmetic
/// so a client somehow ahead of the server gates as too fresh.
pub fn client_gate(global_ver: u64, client_ver: u64, bounds: GateBounds) -> GateDecision {
    let d = global_ver as i128 - client_ver as i128;
    if d > bounds.upper as i128 {
        GateDecision::TooOld
    } else if d < bounds.lower as i128 {
        GateDecision::TooFresh
    } else {
        GateDecision::Send
    }
}

/// Messages exchanged between clients and the aggregation server. The
/// protocol is push-based: every exchange is client-initiated.
#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolMessage {
    PullVersion { from: ClientId },
    VersionReply { version: u64 },
    /// Carries the version the weights were derived from, never the current
    /// global version.
    PushUpdate {
        from: ClientId,
        weights: ParameterVector,
        version: u64,
    },
    FetchModel { from: ClientId },
    ModelReply { weights: ParameterVector, version: u64 },
}

impl ProtocolMessage {
    /// Canonical byte size for bandwidth accounting.
    pub fn wire_size(&self) -> u64 {
        match self {
            ProtocolMessage::PushUpdate { weights, .. }
            | ProtocolMessage::ModelReply { weights, .. } => {
                MESSAGE_HEADER_BYTES + BYTES_PER_PARAMETER * weights.len() as u64
            }
            _ => MESSAGE_HEADER_BYTES,
        }
    }

    pub fn action_name(&self) -> &'static str {
        match self {
            ProtocolMessage::PullVersion { .. } => "pull_version",
            ProtocolMessage::VersionReply { .. } => "version_reply",
            ProtocolMessage::PushUpdate { .. } => "push_update",
            ProtocolMessage::FetchModel { .. } => "fetch_model",
            ProtocolMessage::ModelReply { .. } => "model_reply",
        }
    }

    fn kind(&self) -> &'static str {
        self.action_name()
    }
}

/// Server-side pair of current global weights and version.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelState {
    weights: ParameterVector,
    version: u64,
}

/// Initializes the server with `w0` and `ver = a_l`.
pub fn server_init(w0: ParameterVector, lower_bound: u64) -> GlobalModelState {
    GlobalModelState {
        weights: w0,
        version: lower_bound,
    }
}

impl GlobalModelState {
    pub fn weights(&self) -> &ParameterVector {
        &self.weights
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Blends a client update into the global model with
    /// `alpha = 1 / (ver - ver_k + 1)` and advances the version by one.
    ///
    /// Zero staleness (`alpha = 1`) copies the update verbatim; otherwise the
    /// blend is computed as `w + alpha * (w_k - w)`, which keeps every
    /// coordinate inside `[min(w, w_k), max(w, w_k)]` and leaves `w`
    /// bit-identical when `w_k == w`.
    pub fn aggregate(
        &mut self,
        update: &ParameterVector,
        update_version: u64,
    ) -> Result<(), ProtocolError> {
        if update_version > self.version {
            return Err(ProtocolError::VersionAhead {
                client: update_version,
                global: self.version,
            });
        }
        if update.len() != self.weights.len() {
            return Err(ProtocolError::LengthMismatch {
                server: self.weights.len(),
                update: update.len(),
            });
        }
        let staleness = self.version - update_version;
        if staleness == 0 {
            self.weights = update.clone();
        } else {
            let alpha = 1.0 / (staleness as f64 + 1.0);
            let w = self.weights.as_mut_slice();
            for (wi, ui) in w.iter_mut().zip(update.as_slice()) {
                *wi += alpha * (ui - *wi);
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Serialized per-message server loop: answers version pulls and model
    /// fetches read-only, folds pushes into the global model and returns the
    /// freshly aggregated model to the pusher.
    pub fn handle(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, ProtocolError> {
        match msg {
            ProtocolMessage::PullVersion { .. } => Ok(ProtocolMessage::VersionReply {
                version: self.version,
            }),
            ProtocolMessage::FetchModel { .. } => Ok(ProtocolMessage::ModelReply {
                weights: self.weights.clone(),
                version: self.version,
            }),
            ProtocolMessage::PushUpdate {
                weights, version, ..
            } => {
                self.aggregate(weights, *version)?;
                Ok(ProtocolMessage::ModelReply {
                    weights: self.weights.clone(),
                    version: self.version,
                })
            }
            other => Err(ProtocolError::UnexpectedMessage {
                state: "serving",
                message: other.kind(),
            }),
        }
    }
}

/// Where the client is inside one gate/sync exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClientPhase {
    Idle,
    AwaitVersion,
    AwaitModel,
}

impl ClientPhase {
    fn name(self) -> &'static str {
        match self {
            ClientPhase::Idle => "idle",
            ClientPhase::AwaitVersion => "awaiting version reply",
            ClientPhase::AwaitModel => "awaiting model reply",
        }
    }
}

/// What the client should do next after consuming a server reply.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientAction {
    /// Forward this message to the server and feed the reply back in.
    Send(ProtocolMessage),
    /// The sync exchange is over; resume local training.
    Resume,
}

/// Per-client protocol state: local weights, the version they derive from,
/// gating bounds, optimizer state, and the stream windows.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: ClientId,
    pub weights: ParameterVector,
    pub version: u64,
    pub bounds: GateBounds,
    pub epochs_per_round: u32,
    pub optimizer: AdamState,
    pub storage: StorageWindow,
    pub training: TrainingWindow,
    pub epochs_done: u64,
    phase: ClientPhase,
    last_gate: Option<GateDecision>,
}

impl ClientState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        client_id: ClientId,
        weights: ParameterVector,
        version: u64,
        bounds: GateBounds,
        epochs_per_round: u32,
        optimizer: AdamState,
        storage: StorageWindow,
        training: TrainingWindow,
    ) -> Self {
        assert!(epochs_per_round >= 1, "epochs_per_round must be >= 1");
        Self {
            client_id,
            weights,
            version,
            bounds,
            epochs_per_round,
            optimizer,
            storage,
            training,
            epochs_done: 0,
            phase: ClientPhase::Idle,
            last_gate: None,
        }
    }

    /// Adopts a model received from the server.
    pub fn adopt(&mut self, weights: ParameterVector, version: u64) {
        self.weights = weights;
        self.version = version;
    }

    pub fn last_gate(&self) -> Option<GateDecision> {
        self.last_gate
    }

    /// One local training round: `epochs_per_round` epochs of mini-batch
    /// Adam over the training window. Windows are left untouched.
    pub fn train_round(
        &mut self,
        config: &MlpConfig,
        hyper: &TrainHyper,
    ) -> Result<Vec<f64>, ProtocolError> {
        let losses = train_epochs(
            &mut self.weights,
            &mut self.optimizer,
            config,
            &self.training,
            hyper,
            self.epochs_per_round,
            self.epochs_done,
        )?;
        self.epochs_done += self.epochs_per_round as u64;
        Ok(losses)
    }

    /// Starts the post-round sync exchange by pulling the global version.
    pub fn begin_sync(&mut self) -> Result<ProtocolMessage, ProtocolError> {
        if self.phase != ClientPhase::Idle {
            return Err(ProtocolError::UnexpectedMessage {
                state: self.phase.name(),
                message: "begin_sync",
            });
        }
        self.phase = ClientPhase::AwaitVersion;
        Ok(ProtocolMessage::PullVersion {
            from: self.client_id,
        })
    }

    /// Startup fetch: every client syncs once before its first round, so
    /// `ver_k` starts at the server's initial version.
    pub fn begin_fetch(&mut self) -> Result<ProtocolMessage, ProtocolError> {
        if self.phase != ClientPhase::Idle {
            return Err(ProtocolError::UnexpectedMessage {
                state: self.phase.name(),
                message: "begin_fetch",
            });
        }
        self.phase = ClientPhase::AwaitModel;
        Ok(ProtocolMessage::FetchModel {
            from: self.client_id,
        })
    }

    /// Feeds a server reply into the client state machine.
    ///
    /// On a version reply the gate decides: too old fetches the model, too
    /// fresh resumes training silently, in-range pushes the local update
    /// (carrying the pre-push `ver_k`). Any model reply — whether it answers
    /// a fetch or a push — is adopted before training resumes.
    pub fn handle_reply(
        &mut self,
        msg: &ProtocolMessage,
    ) -> Result<ClientAction, ProtocolError> {
        match (self.phase, msg) {
            (ClientPhase::AwaitVersion, ProtocolMessage::VersionReply { version }) => {
                let decision = client_gate(*version, self.version, self.bounds);
                self.last_gate = Some(decision);
                match decision {
                    GateDecision::TooOld => {
                        self.phase = ClientPhase::AwaitModel;
                        Ok(ClientAction::Send(ProtocolMessage::FetchModel {
                            from: self.client_id,
                        }))
                    }
                    GateDecision::TooFresh => {
                        self.phase = ClientPhase::Idle;
                        Ok(ClientAction::Resume)
                    }
                    GateDecision::Send => {
                        self.phase = ClientPhase::AwaitModel;
                        Ok(ClientAction::Send(ProtocolMessage::PushUpdate {
                            from: self.client_id,
                            weights: self.weights.clone(),
                            version: self.version,
                        }))
                    }
                }
            }
            (ClientPhase::AwaitModel, ProtocolMessage::ModelReply { weights, version }) => {
                self.adopt(weights.clone(), *version);
                self.phase = ClientPhase::Idle;
                Ok(ClientAction::Resume)
            }
            (phase, other) => Err(ProtocolError::UnexpectedMessage {
                state: phase.name(),
                message: other.kind(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn pv(values: &[f64]) -> ParameterVector {
        ParameterVector::from_values(values.to_vec())
    }

    #[test]
    fn server_init_sets_version_to_lower_bound() {
        let w0 = pv(&[1.0, 2.0]);
        let state = server_init(w0.clone(), 2);
        assert_eq!(state.version(), 2);
        assert_eq!(state.weights(), &w0);
        assert_eq!(server_init(pv(&[0.0]), 0).version(), 0);
    }

    #[test]
    fn aggregate_zero_staleness_copies_update() {
        let mut state = server_init(pv(&[1.0, -1.0]), 2);
        let update = pv(&[0.5, 0.25]);
        state.aggregate(&update, 2).unwrap();
        assert_eq!(state.weights(), &update);
        assert_eq!(state.version(), 3);
    }

    #[test]
    fn aggregate_staleness_two_blends_one_third() {
        let mut state = server_init(pv(&[3.0]), 5);
        state.aggregate(&pv(&[0.0]), 3).unwrap();
        // alpha = 1/3: (2/3) * 3 + (1/3) * 0 = 2
        approx::assert_relative_eq!(state.weights().as_slice()[0], 2.0, max_relative = 1e-15);
        assert_eq!(state.version(), 6);
    }

    #[test]
    fn aggregate_identical_update_is_fixed_point() {
        let w = pv(&[0.1, -0.7, 3.5]);
        for client_ver in [0u64, 1, 2] {
            let mut state = server_init(w.clone(), 2);
            state.aggregate(&w, client_ver).unwrap();
            assert_eq!(state.weights(), &w);
        }
    }

    #[test]
    fn aggregate_rejects_protocol_violations() {
        let mut state = server_init(pv(&[1.0]), 2);
        assert_eq!(
            state.aggregate(&pv(&[1.0]), 3).unwrap_err(),
            ProtocolError::VersionAhead { client: 3, global: 2 }
        );
        assert_eq!(
            state.aggregate(&pv(&[1.0, 2.0]), 1).unwrap_err(),
            ProtocolError::LengthMismatch { server: 1, update: 2 }
        );
    }

    #[test]
    fn gate_matches_branch_table() {
        let bounds = GateBounds::new(2, 6);
        assert_eq!(client_gate(9, 2, bounds), GateDecision::TooOld); // d = 7
        assert_eq!(client_gate(3, 2, bounds), GateDecision::TooFresh); // d = 1
        assert_eq!(client_gate(4, 2, bounds), GateDecision::Send); // d = 2
        assert_eq!(client_gate(8, 2, bounds), GateDecision::Send); // d = 6
    }

    #[test]
    fn gate_is_total_over_a_version_range() {
        let bounds = GateBounds::new(2, 6);
        for d in 0u64..=20 {
            let decision = client_gate(100 + d, 100, bounds);
            let expected = if d > 6 {
                GateDecision::TooOld
            } else if d < 2 {
                GateDecision::TooFresh
            } else {
                GateDecision::Send
            };
            assert_eq!(decision, expected, "d = {d}");
        }
    }

    #[test]
    fn gate_handles_client_ahead_of_server() {
        let bounds = GateBounds::new(2, 6);
        assert_eq!(client_gate(1, 5, bounds), GateDecision::TooFresh);
    }

    fn test_client(weights: ParameterVector, version: u64) -> ClientState {
        ClientState::new(
            7,
            weights,
            version,
            GateBounds::new(2, 6),
            1,
            AdamState::new(2),
            StorageWindow::new(4),
            TrainingWindow::new(8),
        )
    }

    #[test]
    fn too_fresh_resumes_without_outbound() {
        let mut client = test_client(pv(&[1.0, 2.0]), 5);
        let pull = client.begin_sync().unwrap();
        assert_eq!(pull, ProtocolMessage::PullVersion { from: 7 });
        let action = client
            .handle_reply(&ProtocolMessage::VersionReply { version: 6 })
            .unwrap();
        assert_eq!(action, ClientAction::Resume);
        assert_eq!(client.last_gate(), Some(GateDecision::TooFresh));
        assert_eq!(client.version, 5);
    }

    #[test]
    fn too_old_fetches_and_adopts_server_version() {
        let mut client = test_client(pv(&[1.0, 2.0]), 0);
        client.begin_sync().unwrap();
        let action = client
            .handle_reply(&ProtocolMessage::VersionReply { version: 9 })
            .unwrap();
        assert_eq!(
            action,
            ClientAction::Send(ProtocolMessage::FetchModel { from: 7 })
        );
        let fresh = pv(&[9.0, 9.0]);
        let action = client
            .handle_reply(&ProtocolMessage::ModelReply { weights: fresh.clone(), version: 9 })
            .unwrap();
        assert_eq!(action, ClientAction::Resume);
        assert_eq!(client.version, 9);
        assert_eq!(client.weights, fresh);
    }

    #[test]
    fn push_carries_pre_push_version() {
        let mut client = test_client(pv(&[1.0, 2.0]), 4);
        client.begin_sync().unwrap();
        let action = client
            .handle_reply(&ProtocolMessage::VersionReply { version: 7 })
            .unwrap();
        match action {
            ClientAction::Send(ProtocolMessage::PushUpdate { from, version, .. }) => {
                assert_eq!(from, 7);
                assert_eq!(version, 4);
            }
            other => panic!("expected push, got {other:?}"),
        }
    }

    #[test]
    fn unexpected_replies_are_errors() {
        let mut client = test_client(pv(&[0.0, 0.0]), 0);
        let err = client
            .handle_reply(&ProtocolMessage::VersionReply { version: 3 })
            .unwrap_err();
        assert!(matches!(err, ProtocolError::UnexpectedMessage { .. }));

        client.begin_sync().unwrap();
        let err = client
            .handle_reply(&ProtocolMessage::ModelReply { weights: pv(&[0.0, 0.0]), version: 3 })
            .unwrap_err();
        assert!(matches!(err, ProtocolError::UnexpectedMessage { .. }));
    }

    #[test]
    fn server_handle_pull_is_read_only() {
        let mut state = server_init(pv(&[1.0]), 2);
        let before = state.clone();
        let reply = state
            .handle(&ProtocolMessage::PullVersion { from: 0 })
            .unwrap();
        assert_eq!(reply, ProtocolMessage::VersionReply { version: 2 });
        assert_eq!(state, before);
    }

    #[test]
    fn server_handle_two_pushes_advance_version_by_two() {
        let mut state = server_init(pv(&[0.0]), 2);
        state
            .handle(&ProtocolMessage::PushUpdate { from: 0, weights: pv(&[1.0]), version: 2 })
            .unwrap();
        state
            .handle(&ProtocolMessage::PushUpdate { from: 1, weights: pv(&[2.0]), version: 2 })
            .unwrap();
        assert_eq!(state.version(), 4);
    }

    #[test]
    fn server_handle_fetch_returns_current_weights() {
        let w = pv(&[0.25, 0.5]);
        let mut state = server_init(w.clone(), 3);
        let reply = state.handle(&ProtocolMessage::FetchModel { from: 1 }).unwrap();
        assert_eq!(reply, ProtocolMessage::ModelReply { weights: w, version: 3 });
    }

    #[test]
    fn server_rejects_reply_messages() {
        let mut state = server_init(pv(&[0.0]), 2);
        let err = state
            .handle(&ProtocolMessage::VersionReply { version: 1 })
            .unwrap_err();
        assert!(matches!(err, ProtocolError::UnexpectedMessage { .. }));
    }

    #[test]
    fn wire_sizes() {
        assert_eq!(ProtocolMessage::PullVersion { from: 0 }.wire_size(), 64);
        assert_eq!(ProtocolMessage::VersionReply { version: 0 }.wire_size(), 64);
        assert_eq!(ProtocolMessage::FetchModel { from: 0 }.wire_size(), 64);
        let w = pv(&[0.0; 10]);
        assert_eq!(
            ProtocolMessage::PushUpdate { from: 0, weights: w.clone(), version: 0 }.wire_size(),
            64 + 80
        );
        assert_eq!(
            ProtocolMessage::ModelReply { weights: w, version: 0 }.wire_size(),
            64 + 80
        );
    }

    #[test]
    fn full_round_trip_against_live_server() {
        let config = MlpConfig::new(vec![1, 1], Activation::Relu, 1).unwrap();
        let w0 = crate::model::init_params(&config).unwrap();
        let mut server = server_init(w0.clone(), 2);
        let mut client = ClientState::new(
            0,
            w0,
            2,
            GateBounds::new(0, 6),
            1,
            AdamState::new(2),
            StorageWindow::new(2),
            TrainingWindow::new(4),
        );

        // gate with a_l = 0 sends immediately at d = 0
        let mut msg = client.begin_sync().unwrap();
        loop {
            let reply = server.handle(&msg).unwrap();
            match client.handle_reply(&reply).unwrap() {
                ClientAction::Send(next) => msg = next,
                ClientAction::Resume => break,
            }
        }
        assert_eq!(client.last_gate(), Some(GateDecision::Send));
        // push accepted at zero staleness, client adopted the new version
        assert_eq!(server.version(), 3);
        assert_eq!(client.version, 3);
        assert_eq!(&client.weights, server.weights());
    }
}
