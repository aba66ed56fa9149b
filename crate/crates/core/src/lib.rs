//! Distributed average consensus with quantized ADMM.
//!
//! Every node holds a scalar `r_i`; the goal is for all nodes to agree on
//! the average while exchanging only lattice-valued messages. The crate
//! provides the unquantized iteration, probabilistic and deterministic
//! quantized variants, the two-stage combination, two classical baselines,
//! spectral tools for the linear analysis, and an experiment harness.

pub mod baselines;
pub mod consensus;
pub mod error;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod quantize;
pub mod rng;
pub mod spectral;

pub use consensus::{
    ConsensusState, Outcome, RunConfig, RunResult, TraceMode, cadmm_step, dq_cadmm_step,
    pq_cadmm_step, run_dq, run_pqdq,
};
pub use error::{ConsensusError, Result};
pub use graph::Graph;
pub use quantize::{QuantizerSpec, Scheme};
pub use rng::Stream;
