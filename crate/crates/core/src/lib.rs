//! Distributed primal-dual methods for conically constrained consensus
//! optimisation over static and time-varying networks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod dpda_static;
pub mod dpda_tv;
pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod mixing;
pub mod oracle;
pub mod problems;
pub mod prox;
pub mod schedule;
mod serde_la;

pub use blocks::Blocks;
pub use dpda_static::{dpda_init, dpda_step, run_dpda, AlgoParams, DpdaState, RunOptions};
pub use dpda_tv::{
    dpda_tv_init, dpda_tv_step, measure_error_sequences, run_dpda_tv, AveragingMode, DpdaTvState, ErrorSequences,
    TvOptions,
};
pub use error::{Error, Result};
pub use graph::{Graph, TimeVaryingGraphPlan};
pub use metrics::{Metric, RunTrace, TraceRecord};
pub use mixing::{CommNetwork, GraphSource, MixingKind};
pub use oracle::{apd_solve, OracleSolution};
pub use problems::{gen_classo_instance, gen_ellipsoid_instance, ClassoVariant, Instance};
pub use prox::{Cone, ProxFn};
pub use schedule::{BPolicy, CommSchedule, StepState};
