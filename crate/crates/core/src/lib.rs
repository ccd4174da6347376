//! Weight-only post-training quantization calibration with an explicit
//! weight-drift regularizer.
//!
//! Two solvers are provided: a grid search over channel scaling factors
//! ([`solver_gs`]) and a Gram-based sequential quantizer with regularized
//! curvature ([`solver_gbs`]). [`oracle`] holds brute-force verifiers for the
//! closed-form compensation rule, the penalty/constraint supportedness
//! interval and the finite-class concentration bound. [`harness`] generates
//! synthetic layers and runs the trade-off experiments, and [`pipeline`]
//! holds the on-disk formats and command implementations used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod objective;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod quantizer;
pub mod rng;
pub mod saliency;
pub mod solver_gbs;
pub mod solver_gs;

pub use calibration::CalibrationBatch;
pub use error::{Error, Result};
pub use linalg::{Matrix, TriangularFactor};
pub use objective::LossBreakdown;
pub use quantizer::{Granularity, QuantMode, QuantScheme, QuantizedLayer};
pub use saliency::{ChannelStats, SaliencyKind, SaliencyProfile};
