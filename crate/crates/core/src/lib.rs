//! Unsupervised failure prediction and localization for multi-node systems.
//!
//! Two state classifiers decide, per minute, whether the monitored system is
//! drifting towards a failure:
//!
//! * an energy classifier built on a restricted Boltzmann machine
//!   ([`rbm`]), which thresholds the free energy of the KPI vector;
//! * an anomaly-set classifier ([`autoencoder`] + [`ocsvm`]), which flags
//!   KPIs with locally high reconstruction error and asks a one-class SVM
//!   whether that combination of anomalies looks like the benign ones seen
//!   during training.
//!
//! Both share the same anomaly ranker: a Granger-causality graph over KPIs
//! ([`causality`]) pruned to the currently anomalous KPIs and scored with
//! PageRank ([`ranker`]), yielding the three most suspicious nodes.
//!
//! Everything is trained on normal-execution data only. [`simulator`]
//! produces labelled traces with injected faults and [`eval`] scores the
//! verdict streams produced by [`pipeline`].

pub mod autoencoder;
pub mod causality;
pub mod error;
pub mod eval;
pub mod ocsvm;
pub mod pipeline;
pub mod ranker;
pub mod rbm;
pub mod simulator;
pub mod telemetry;
mod persist;
mod training;

pub use error::{Error, ErrorKind, Result};
pub use persist::FORMAT_VERSION;
pub use training::TrainConfig;

use serde::{Deserialize, Serialize};
use std::fmt;

/// Per-timestamp state decided by a state classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum State {
    Normal,
    Anomalous,
}

impl State {
    pub fn is_anomalous(self) -> bool {
        matches!(self, State::Anomalous)
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Normal => f.write_str("Normal"),
            State::Anomalous => f.write_str("Anomalous"),
        }
    }
}
