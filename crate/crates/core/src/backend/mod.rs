//! [`ConditionalModel`](crate::prompt::ConditionalModel) implementations.
//!
//! [`SyntheticOracle`] is a deterministic, table-driven model used for every
//! desk-scale experiment. [`HttpBackend`] talks to an OpenAI-compatible
//! completions endpoint that reports token log-probabilities;
//! [`mock::MockServer`] is a local stand-in for contract tests.

pub mod http;
pub mod mock;
pub mod synthetic;

pub use http::{HttpBackend, HttpBackendConfig, RetryPolicy};
pub use synthetic::{ContextPolicy, OracleEntry, SyntheticOracle};
