//! Camera trajectory and focal length estimation from dense depth and
//! optical flow.
//!
//! The crate covers the geometry ([`geometry`]), focal candidate bookkeeping
//! ([`hypotheses`]), the uncertainty-aware losses ([`losses`]), a direct
//! per-sequence solver ([`solver`]), a small trainable sequence model
//! ([`predictor`]), sliding-window bundle adjustment ([`refine`]), a
//! synthetic ground-truth generator ([`synth`]) and trajectory metrics
//! ([`eval`]).

pub mod dual;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hypotheses;
pub mod losses;
pub mod optim;
pub mod predictor;
pub mod refine;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{DepthMap, FlowMap, Grid, Mask, Pinhole, PoseSE3};
pub use hypotheses::{FocalSchedule, LikelihoodVector};
pub use eval::{AlignmentMode, MetricsReport};
pub use losses::{LossReport, LossWeights, UncertaintyMap};
