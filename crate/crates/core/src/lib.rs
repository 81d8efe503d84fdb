//! Receiver-oriented pull policies for multi-channel TDMA mesh networks.
//!
//! A policy assigns, per slot and channel, a coordinator that pulls one packet
//! from a priority-ordered service list of flow instances. Synthesis bounds
//! every flow's end-to-end reliability from below under the threshold link
//! model, where each link's per-slot success probability is at least `m`.

pub mod builder;
pub mod cli;
pub mod evaluator;
pub mod format;
pub mod model;
pub mod simulator;
pub mod synthesizer;
pub mod verifier;
pub mod workload;

pub use builder::{solve_slot, SlotAssignment, SlotProblem};
pub use evaluator::{CoordinatorState, LinkQualityView};
pub use model::{FlowId, FlowSpec, NodeId, Policy, Pull, Topology};
pub use simulator::{LinkModel, RunStats};
pub use synthesizer::{synthesize, SynthesisConfig, SynthesisError};
