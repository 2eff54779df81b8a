//! Information-theoretic epistemic-uncertainty estimation for iteratively
//! prompted sequence models.
//!
//! The crate is organised bottom-up:
//!
//! - [`dist`]: exact finite categorical distributions over tuple spaces,
//!   entropy, KL divergence, exact mutual information and the synthetic
//!   Gibbs family used as ground truth.
//! - [`prompt`]: the iterative prompt family, the [`ConditionalModel`]
//!   interface, chain sampling and pseudo-joint probabilities.
//! - [`similarity`]: token-inclusion F1, deduplication and greedy semantic
//!   clustering.
//! - [`estimators`]: the three finite-sample MI estimators and the
//!   high-probability lower-bound certificate.
//! - [`missing_mass`]: missing mass, its expectation, Good-Turing and the
//!   family of upper bounds used by the certificate.
//! - [`scores`]: hallucination scores, abstention policies, calibration and
//!   precision/recall evaluation.
//! - [`backend`]: a deterministic synthetic oracle and an OpenAI-compatible
//!   HTTP client.
//! - [`attention`]: the idealised single self-attention head.
//! - [`experiments`]: seeded, parallel experiment runners shared by the CLI,
//!   the benches and the acceptance suite.

pub mod attention;
pub mod backend;
pub mod dist;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod missing_mass;
pub mod prompt;
pub mod rng;
pub mod scores;
pub mod similarity;

pub use dist::{Atom, Categorical, TupleSpace};
pub use error::{Error, Result};
pub use estimators::{BoundReport, EmpiricalJoint, MiEstimate, StabilizationParams, SupportBranch};
pub use prompt::{ConditionalModel, PromptFamily, Response, ResponseChain};
pub use scores::{AbstentionPolicy, Decision, Direction, QueryRecord, ScoreName, ScoredQuery};
pub use similarity::{ClusteredSample, TokenSeq};
