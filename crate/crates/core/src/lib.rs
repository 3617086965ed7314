//! Local surrogate auditing of black-box language-model classifiers.
//!
//! The model is asked to explain a decision as weighted factors. The
//! weights are jittered, the model relabels each jittered explanation and a
//! local affine surrogate is fitted to the reported probabilities. A
//! quadratic fit of the same samples sets an MSE-optimal jitter radius, and
//! the surrogate is checked with diagnostics and counterfactual rewrites.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod counterfactual;
pub mod curvature;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod factors;
pub mod gateway;
pub mod linalg;
pub mod pipeline;
pub mod probe;
pub mod session;

pub use counterfactual::{EvalReport, MethodScore, RewriteCase, TokenSurrogate};
pub use curvature::{CurvatureEstimate, RadiusOutcome, SymmetricMatrix, TruncationNorm, TruncationReport};
pub use diagnostics::{CenteredRSquared, LinearityTestResult, SubsetSelection, TailProfile};
pub use error::{LampError, Result};
pub use factors::{FactorSet, FactorSource, SeedObservation};
pub use gateway::mock::{MockModel, MockSurface};
pub use gateway::{ChatBackend, Gateway, ModelEndpoint, TaskTemplate, TranscriptEntry};
pub use pipeline::{run_audit, AuditConfig, AuditFailure, Stage};
pub use probe::{JitterVector, Prediction, ProbeSample, SurrogateModel, WeightVector};
pub use session::{AuditSession, DraftSession, ReportFormat, SessionStore, SessionSummary};
