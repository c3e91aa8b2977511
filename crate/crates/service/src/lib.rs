//! HTTP verification service and command-line tools built on
//! `polyjudge_core`.
//!
//! - [`config`]: TOML service configuration.
//! - [`driver`]: sandbox driver selection.
//! - [`server`]: the `/v1` HTTP API.
//! - [`eval`]: pass@k evaluation runs and reports.
//! - [`cli`]: `serve`, `eval`, `build-image`, `validate`, `reformulate`.

pub mod cli;
pub mod config;
pub mod driver;
pub mod eval;
pub mod server;
