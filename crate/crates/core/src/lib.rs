//! Multi-fidelity Gaussian-process regression for noisy, non-nested
//! bi-fidelity data.
//!
//! The low-fidelity level is an ordinary noisy GP fitted by profiled maximum
//! likelihood ([`gp`]). The high-fidelity level follows the recursive AR(1)
//! model `Y_H(x) = rho(x) Y_L~(x) + Delta_H(x)` built on the low-fidelity
//! *posterior*, and its parameters are estimated by an EM algorithm with
//! closed-form updates for the regression coefficients and variance
//! ([`mfgp`]).

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod design;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod metrics;
pub mod mfgp;
pub mod numerics;
pub mod optimize;

pub use data::{Covariance, CovarianceKind, Dataset, Fidelity, PredictMode, PredictiveDistribution};
pub use design::{Design, TestFunction};
pub use error::{Error, Result};
pub use gp::{fit_gp, predict_gp, BasisFunction, BasisSpec, EtaBounds, GpHyper, HyperBounds, TrainedGp};
pub use kernels::{KernelParams, LengthScales};
pub use metrics::CalibrationReport;
pub use mfgp::{fit_mf, predict_mf, EmConfig, HfParams, MfConfig, MfData, MfModel};
pub use optimize::{BoxBounds, MultiStartConfig};
