//! Adaptive Koopman model predictive control with history-derived safety
//! corridors.
//!
//! The pipeline: lift states through a polynomial dictionary
//! ([`lifting`]), identify a linear model in the lifted space offline and
//! recursively online ([`ident`]), mine past operating data for a
//! confidence-scaled input corridor ([`history`]), condense the horizon
//! into a dense convex QP ([`mpc`], [`qp`]), and either replay recorded
//! batches in advisor mode ([`advisor`]) or close the loop on synthetic
//! plants ([`closedloop`], [`plant`], [`synth`]). Process-capability
//! reporting lives in [`metrics`]; raw batch files come in through
//! [`ingest`]; models persist through [`model_io`].

pub mod advisor;
pub mod closedloop;
pub mod error;
pub mod history;
pub mod ident;
pub mod ingest;
pub mod lifting;
pub mod metrics;
pub mod model_io;
pub mod mpc;
pub mod plant;
pub mod qp;
pub mod synth;

pub use error::{Error, Result};
pub use history::{advisor_corridor, corridor, Corridor, CorridorConfig, HistoryDatabase};
pub use ident::{
    adapt_forgetting, batch_fit, batch_fit_matrices, ForgettingConfig, LiftedModel, ResetConfig,
    Snapshot, StepReport,
};
pub use lifting::Dictionary;
pub use metrics::{cpk, compare_batches, CpkValue, SpecLimits};
pub use model_io::{load_model, save_model, ModelFile};
pub use mpc::{control_step, CorridorSource, InputExtension, MpcConfig};
pub use plant::{PlantKind, SyntheticPlant};
