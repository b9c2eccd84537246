//! Multi-view semantic transport for editing Gaussian-splat scenes.
//!
//! The pipeline takes a 3D Gaussian scene plus per-view 2D edit evidence
//! (edited images, attention, feature rasters), compresses each view's
//! evidence into weighted prototypes, couples scene Gaussians to those
//! prototypes with entropic unbalanced optimal transport, fuses the
//! per-view targets into one canonical semantic target per Gaussian, and
//! gates the update by transport residuals so weakly supported Gaussians
//! keep their original state. [`edit`] runs the whole loop; [`verify`]
//! holds the oracle-backed check suites behind `splatport verify`.

pub mod config;
pub mod edit;
pub mod error;
pub mod evidence;
pub mod fsio;
pub mod fusion;
pub mod gating;
pub mod pipeline;
pub mod prototypes;
pub mod scene;
pub mod seeding;
pub mod sweep;
pub mod toy;
pub mod uot;
pub mod verify;

pub use config::EditConfig;
pub use error::PipelineError;
