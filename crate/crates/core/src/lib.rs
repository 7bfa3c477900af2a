//! Beat-to-beat R-R interval modeling with an inverse Gaussian point process
//! whose time-varying parameters are produced by small causal recurrent
//! backbones trained by exact negative log-likelihood.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`ingest`] reads PhysioNet-style WFDB records (formats 212 and 16) and
//!   CSV inputs.
//! - [`preprocess`] turns raw ECG into a clean R-R series: Pan-Tompkins
//!   R-peak detection, validity filtering to `[0.3, 2.0]` s, and monotone
//!   PCHIP interpolation of excluded beats.
//! - [`igdist`] is the inverse Gaussian distribution core: log-density, CDF,
//!   sampling, and the per-step / total negative log-likelihood.
//! - [`autodiff`] is a minimal reverse-mode engine over dense `f64` tensors,
//!   plus the Adam optimizer.
//! - [`backbone`] builds the causal sequence models (GRU, LSTM, diagonal SSM,
//!   selective SSM) with the shifted-softplus mean head and the clipped
//!   log-variance head.
//! - [`eval`] applies the time-rescaling transform and computes the
//!   Kolmogorov-Smirnov distance against uniformity.
//! - [`synth`] generates R-R series and ECG with known ground truth.
//! - [`harness`] runs segmentation, leave-one-subject-out cross-validation,
//!   training with early stopping, and report aggregation; [`harness::cli`]
//!   is the command-line entry point.

pub mod autodiff;
pub mod backbone;
pub mod eval;
pub mod harness;
pub mod igdist;
pub mod ingest;
pub mod preprocess;
pub mod special;
pub mod synth;
