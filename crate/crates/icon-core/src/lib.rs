//! Desk-scale defense against indirect prompt injection in tool-using agents.
//!
//! The crate implements a complete detect-then-rectify loop around a tiny,
//! fully deterministic decoder-only transformer:
//!
//! * [`tinylm`] — a minimal inference engine that records per-head attention
//!   during generation and accepts an attention-steering hook. A constructor
//!   variant plants a "trigger head" by direct weight surgery so that a
//!   designated trigger token captures the head's attention and drives the
//!   model toward a payload token, emulating a successful injection.
//! * [`fis`] — generation-normalized token entropy over recorded attention
//!   rows and the derived Focus Intensity Scores (FIS): high score means the
//!   head's attention collapsed onto few context tokens.
//! * [`prober`] — the latent-trace prober: attack-sensitive layer selection,
//!   temporal feature extraction, and a small 1D-CNN + MLP binary classifier
//!   trained with hand-rolled backpropagation (finite-difference checked).
//! * [`rectifier`] — the mitigating rectifier: per-row percentile thresholds,
//!   steering masks, and γ-scaled suppression with renormalization applied
//!   inside generation on the flagged heads.
//! * [`synthlab`] — synthesis of labeled benign/attacked agent trajectories
//!   for the planted model, plus dataset construction.
//! * [`pipeline`] — orchestration (probe, then steer on detection), the
//!   ASR/UA/ADR/URR/FPR metric harness, and the (γ, τ) operating-point sweep.
//!
//! Everything is seed-deterministic: identical configuration and seeds
//! reproduce identical tokens, traces, datasets, model checkpoints, and
//! metric files byte for byte.

pub mod error;
pub mod fis;
pub mod pipeline;
pub mod prober;
pub mod rectifier;
pub mod synthlab;
pub mod tensor;
pub mod tinylm;

pub use error::{IconError, Result};
pub use fis::{EntropyTensor, FisReport};
pub use pipeline::{MetricsSummary, RunRecord};
pub use prober::{FeatureBundle, HeadSummary, LabeledDataset, ProberModel};
pub use rectifier::SteeringPlan;
pub use synthlab::Trajectory;
pub use tinylm::{AttentionTrace, ModelConfig, TinyTransformer, TriggerPlant};
