//! Streaming video rain/snow removal.
//!
//! Each incoming frame is decomposed into an affine-aligned background, a
//! moving-object layer, a multi-scale convolutional rain layer and residual
//! noise. All model parameters (filter bank, noise variance, per-filter
//! sparsity scales) are updated online, one frame at a time, so the engine
//! runs in bounded memory on arbitrarily long sequences.
//!
//! Module map:
//! - [`frame`]: grid types shared by every solver (frames, binary masks).
//! - [`fft`]: 2-D FFT helpers with per-thread plan caching.
//! - [`bank`]: the multi-scale filter bank, feature maps and their
//!   convolutional synthesis.
//! - [`csc`]: sparse coding of the rain layer and online filter learning.
//! - [`mrf`]: exact min-cut solver for the moving-object support mask.
//! - [`tv`]: total-variation restoration of the moving-object layer.
//! - [`align`]: affine warping and Gauss-Newton background alignment.
//! - [`engine`]: the per-frame solver loop tying everything together.
//! - [`snapshot`]: binary persistence of the full online state.
//! - [`synth`]: procedural streak synthesis with ground truth.
//! - [`metrics`]: PSNR/SSIM and sequence evaluation reports.
//! - [`reference`]: slow reference implementations used for verification.

pub mod align;
pub mod bank;
pub mod csc;
pub mod engine;
pub mod error;
pub mod fft;
pub mod frame;
pub mod metrics;
pub mod mrf;
pub mod reference;
pub mod snapshot;
pub mod synth;
pub mod tv;

pub use align::{align_to_reference, delta_tau, jacobian, warp, AffineTransform, WarpJacobian};
pub use bank::{convolve_sum, FeatureMapSet, FilterBank, ScaleParams, ScaleSpec};
pub use csc::{soft_threshold, update_feature_maps, update_filters, CscConfig, CscWorkspace, DictionaryStats};
pub use engine::{init_state, process_frame, EngineConfig, FrameResult, OnlineEngine, OnlineState};
pub use error::{Error, Result};
pub use frame::{elementwise_compose, Frame, SupportMask, MIN_FRAME_DIM};
pub use metrics::{evaluate_sequence, psnr, ssim, SequenceReport};
pub use mrf::{build_energy, energy_of, min_cut_solve, PixelEnergy};
pub use synth::{synthesize_streaks, StreakDrift, StreakParams};
pub use tv::{solve_tv, tv_norm, TvProblem};
