//! Asynchronous federated learning over streaming data, plus the
//! deterministic simulation harness used to compare it against synchronous
//! FedAvg, centralized, and local-only training.
//!
//! The crate is organized around the lifecycle of an edge client:
//!
//! - [`model`]: a small dense regression network (analytic backprop, Adam)
//!   whose weights travel as a flat parameter vector.
//! - [`streaming`]: storage/training sliding windows, synthetic stream
//!   generators, and a CSV trace loader.
//! - [`train`]: the shared mini-batch training loop every method uses, so
//!   differences between methods come from the protocol alone.
//! - [`protocol`]: the version-gated asynchronous aggregation protocol as an
//!   explicit message-driven state machine.
//! - [`metrics`]: RMSE / accumulated-error evaluation and the metrics log.
//! - [`sim`]: a deterministic discrete-event simulator with a byte-exact
//!   bandwidth ledger, hosting the asynchronous engine.
//! - [`baselines`]: synchronous FedAvg, centralized, and local-only runners
//!   on the same simulated clock and ledger.
//!
//! With the default `parallel` feature, batch evaluation and per-round
//! client training use rayon; results are bit-identical to the sequential
//! fallback (`--no-default-features`).

pub mod baselines;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod sim;
pub mod streaming;
pub mod train;
