//! Plan-driven federated learning on a star topology.
//!
//! An aggregator node hands out per-round task assignments defined by a
//! shared YAML plan, collaborators train on data that never leaves them, and
//! the aggregator folds their model updates into a consensus model with a
//! dataset-size-weighted mean. Nodes talk over a small framed protocol on
//! mutually authenticated TLS, with certificates issued by a federation CA
//! that lives in the aggregator's workspace.
//!
//! Module map:
//!
//! - [`plan`]: the federation contract (parse, validate, hash, assign tasks)
//! - [`tensorstore`]: named tensors and weighted consensus aggregation
//! - [`pki`]: federation CA, CSRs, signing and peer verification
//! - [`wire`]: message codec and the mTLS transport
//! - [`aggregator`]: the round state machine
//! - [`collaborator`]: the client loop and the task-runner contract
//! - [`reference_task`]: a from-scratch MLP on synthetic Gaussian blobs
//! - [`workspace`]: on-disk layout, model files, export/import archives
//! - [`localsim`]: in-process federation runner
//! - [`metricsink`]: metric records, log lines and CSV persistence
//! - [`cli`]: the `fedstar` command surface

pub mod aggregator;
pub mod cli;
pub mod collaborator;
pub mod localsim;
pub mod metricsink;
pub mod pki;
pub mod plan;
pub mod reference_task;
pub mod tensorstore;
pub mod wire;
pub mod workspace;

pub use plan::{FlPlan, PlanHash};
pub use tensorstore::{ModelTensor, NamedTensor, TensorKey};
