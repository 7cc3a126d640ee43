//! Detection plumbing standing in for a trained instance detector: the
//! provider interface, score filtering, suppression-aware NMS, probability
//! accumulation from suppressed proposals and the CRF/detector alternation.

mod nms;
mod provider;
mod refine;
mod synthetic;

pub use nms::{filter_by_score, nms_with_records, NmsOutcome};
pub use provider::{DetectionProvider, EchoProvider, RefinementPrior};
pub use refine::{accumulate_prob_stack, iterative_refine, mean_instance_iou, RefineConfig, RefineOutcome, RoundSummary};
pub use synthetic::{synthetic_provider, SceneInstance, SceneNoise, SceneSpec, SyntheticProvider, SyntheticScene};

pub const DEFAULT_SIGMA_0: f64 = 0.05;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_FEATURE_DIM: usize = 64;
