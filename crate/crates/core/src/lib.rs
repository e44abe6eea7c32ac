//! Hidden Markov factor models for multivariate longitudinal panels.
//!
//! Each hidden state carries its own exploratory factor model for the
//! observations; state transitions follow a covariate-dependent multinomial
//! logit (discrete time) or a log-linear intensity model (continuous time,
//! irregular gaps). Fitting is by a generalized EM with one Newton or
//! Fisher-scoring step on the transition coefficients per iteration.

pub mod error;
pub mod eval;
pub mod inference;
pub mod init;
pub mod matexp;
pub mod model;
pub mod mstep;
pub mod semis;
pub mod simgen;

pub use error::{Error, Result};
pub use matexp::ExpmMethod;
pub use model::{Mode, ModelDims, ModelParams, PanelDataset, SubjectRecord, TransitionCoefs};
pub use semis::{decode, fit, fit_from, FitConfig, FitResult, StopReason};
