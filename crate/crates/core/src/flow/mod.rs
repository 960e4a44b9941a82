//! Invertible affine couplings and the exact trajectory likelihood.

pub mod coupling;
pub mod nll;
pub mod predictor;
pub mod transporter;

pub use coupling::{affine_forward, affine_inverse, CouplingParams, CouplingVars};
pub use nll::{factor_nll, trajectory_nll, FactorTerms, NllDiagnostics, NllTerms, HALF_LOG_2PI};
pub use predictor::{Predictor, PredictorKind};
pub use transporter::{BlockKind, TransportOut, Transporter, TransporterConfig};
