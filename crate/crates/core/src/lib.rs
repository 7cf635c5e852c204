//! Decides whether a candidate invariant manifold of an involutive system of
//! parameter-dependent vector fields survives small parameter perturbations.
//!
//! The pipeline: scenarios describe the manifold as a chart atlas with
//! transition maps, the generator fields per chart, and closed loops that
//! generate its homology. The toolkit checks the standing hypotheses
//! (distribution rank, involutivity, invariance), transports fibers around
//! the loops to obtain monodromy matrices, and combines spectral tests,
//! commutator-kernel tests and cross-chart section compatibility into a
//! persistence verdict.
//!
//! All numerics are generic over the scalar type via [`num::Real`]; `f64`
//! aliases for the main types live at the crate root.

pub mod atlas;
pub mod builtin;
pub mod expr;
pub mod fields;
pub mod num;
pub mod persistence;
pub mod report;
pub mod scenario;
pub mod transport;

pub use num::{Dual, Numeric, Real};

use thiserror::Error;

/// Umbrella error for the high-level pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] expr::ParseError),
    #[error(transparent)]
    Eval(#[from] expr::EvalError),
    #[error(transparent)]
    Atlas(#[from] atlas::AtlasError),
    #[error(transparent)]
    Field(#[from] fields::FieldError),
    #[error(transparent)]
    Transport(#[from] transport::TransportError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
}

/// Double-precision aliases, the defaults for the CLI and the built-ins.
pub type Expr64 = expr::Expression<f64>;
pub type Scenario64 = scenario::Scenario<f64>;
pub type Monodromy64 = transport::MonodromyResult<f64>;
pub type Config64 = persistence::AnalysisConfig<f64>;
pub type Report64 = persistence::PersistenceReport<f64>;
