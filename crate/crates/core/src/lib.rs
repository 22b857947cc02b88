//! Privacy-preserving data aggregation for sensor networks.
//!
//! Sources compute the sum of their private readings for an untrusted
//! aggregator by passing a masked running total around a ring whose next hop
//! the aggregator picks at random. Channels are keyed by random key
//! pre-distribution with per-source permuted key banks.
//!
//! - [`securesum`]: masking, chaining and unmasking mod `M`.
//! - [`keying`]: key banks, permutations, session and pairwise keys.
//! - [`protocol`]: the round state machine for sources and aggregator.
//! - [`simnet`]: topologies, delivery, transcripts, scenario driver.
//! - [`adversary`]: attacks evaluated against transcripts.
//! - [`analysis`]: disclosure-probability formula and Monte Carlo checks.
//! - [`cpda`]: the polynomial-share cluster kernel used as timing baseline.

pub mod adversary;
pub mod analysis;
pub mod config;
pub mod cpda;
pub mod keying;
pub mod node;
pub mod protocol;
pub mod rng;
pub mod securesum;
pub mod simnet;

pub use config::{ConfigError, ScenarioConfig};
pub use node::{NodeId, Principal};
pub use protocol::{RelayMode, RoundOutcome};
pub use securesum::Modulus;
pub use simnet::{run_scenario, Transcript};
