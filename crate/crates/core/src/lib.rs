//! Anatomy-aware low-dose CT denoising with routed RED-CNN experts.
//!
//! Pipeline: HU slices are windowed and tiled into patches ([`preprocess`]),
//! profiled into a probability distribution over anatomical structures
//! ([`profiler`]), clustered with PCA + K-means ([`cluster`]), and used to
//! train one RED-CNN ([`redcnn`], built on [`tensor`]) per cluster plus a
//! global baseline ([`experiment`]). At inference an agent graph
//! ([`router`]) picks one expert per slice and reports RMSE, PSNR and SSIM
//! ([`metrics`]).

pub mod cluster;
pub mod experiment;
pub mod metrics;
pub mod preprocess;
pub mod profiler;
pub mod redcnn;
pub mod router;
pub mod tensor;
