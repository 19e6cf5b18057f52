//! Pulse processing toolkit.
//!
//! Simulates noisy filtered Poisson pulse streams `y(t) = Σ αᵢ p(t − τᵢ) + w(t)`
//! and implements the usual catalogue of estimators on top of them:
//!
//! - [`shaping`]: matched filter, trapezoidal shaper and Wiener deconvolution.
//! - [`detect`]: threshold clusters, peak picking, width-based pile-up rejection
//!   and pile-up peeling.
//! - [`fit`]: nonlinear least-squares fitting of `N` pulses with closed-form
//!   amplitudes and residual-based order selection.
//! - [`sparse`]: non-negative 1-norm regularised deconvolution on the sample grid.
//! - [`spectrum`]: amplitude histograms, two-pulse pile-up correction and
//!   decompounding of interval areas.
//! - [`bench`]: event matching, scoring and Monte-Carlo sweeps against ground truth.
//!
//! All randomness is seeded; every operation is a pure function of its inputs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod conv;
pub mod detect;
pub mod error;
pub mod fit;
pub mod io;
pub mod pulse;
pub mod signal;
pub mod sim;
pub mod shaping;
pub mod sparse;
pub mod spectrum;

pub use detect::Cluster;
pub use error::{Error, Result};
pub use fit::FitResult;
pub use pulse::{Kernel, PulseEvent, PulseShape};
pub use signal::SampledSignal;
pub use sim::{AmplitudeSpectrum, SimConfig, SpectrumComponent};
pub use sparse::Activations;
pub use spectrum::Histogram;
