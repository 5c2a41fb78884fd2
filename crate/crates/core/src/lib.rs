//! Collaborative edge/near-edge inference: a lightweight edge classifier
//! keeps confident predictions and offloads the rest, with its own top-k
//! classes as the routing signal, to a library of specialist experts.
//!
//! Modules follow the data path:
//!
//! - [`partition`]: class-to-partition map and the expert domains it implies
//! - [`trace`]: logit traces standing in for deployed models, plus a
//!   calibrated synthesizer
//! - [`router`]: confidence gate, top-k routing and refinement
//! - [`cost`]: profiled latency/energy and per-batch cost composition
//! - [`sched`]: progressive in-domain weighting and the distillation loss
//! - [`wire`]: framed TCP protocol, edge client and near-edge server
//! - [`harness`]: threshold sweeps, baselines and reports

pub mod cost;
pub mod error;
pub mod harness;
pub mod partition;
pub mod router;
pub mod sched;
pub mod seed;
pub mod trace;
pub mod wire;

pub use cost::{AggregationMode, BatchCost, CommModel, CostProfile, ProfileSet};
pub use error::{Error, Result};
pub use harness::{run_sweep, run_sweep_with, SweepConfig, SweepResult};
pub use partition::{enumerate_expert_domains, DomainSet, PartitionMap};
pub use router::{collaborative_infer, route_sample, CollabOutcome, RoutingDecision};
pub use trace::{PredictionTrace, TraceSet};
