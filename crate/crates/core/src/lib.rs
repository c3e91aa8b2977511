//! Core of the polyjudge verification service.
//!
//! - [`taskset`]: I/O tasks, prompt rendering, reformulation of
//!   assertion-style problems.
//! - [`langconfig`]: per-language YAML configs and image build plans.
//! - [`sandbox`]: warm container pool.
//! - [`harness`]: the in-sandbox agent and its wire protocol.
//! - [`verifier`]: code extraction, output comparison, reward verdicts.
//! - [`rlmath`]: group advantages, clipped objective, pass@k.
//! - [`llm`]: minimal chat-completions client.

pub mod harness;
pub mod langconfig;
pub mod llm;
pub mod rlmath;
pub mod sandbox;
pub mod taskset;
pub mod verifier;
