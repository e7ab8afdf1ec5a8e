//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Messages are prefixed with
//! the operation that failed and carry enough context (names, indices,
//! bounds, file paths) to be actionable from a one-line CLI error.

use thiserror::Error;

/// Errors produced by model construction, feature extraction, training,
/// steering, synthesis, and artifact I/O.
#[derive(Debug, Error)]
pub enum IconError {
    // ── model construction / generation ─────────────────────────────────
    #[error("model config: {reason}")]
    InvalidModelConfig { reason: String },

    #[error("trigger plant: index out of range: {what} {index} not below {bound}")]
    PlantIndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("trigger plant: trigger_token and payload_token must differ (both {token})")]
    PlantTokensEqual { token: u32 },

    #[error("generate: empty context")]
    EmptyContext,

    #[error("generate: context length {context_len} + {steps} steps exceeds max_seq {max_seq}")]
    ContextTooLong {
        context_len: usize,
        steps: usize,
        max_seq: usize,
    },

    #[error("generate: steps must be at least 1")]
    ZeroSteps,

    #[error("generate: token id {token} not below vocab_size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    // ── entropy / FIS ───────────────────────────────────────────────────
    #[error("token entropy: row length {n} below 2 (normalization log N undefined)")]
    RowTooShort { n: usize },

    #[error("token entropy: row is not a probability vector: {reason}")]
    RowNotStochastic { reason: String },

    #[error("token entropy: epsilon must be a small positive number, got {epsilon}")]
    InvalidEpsilon { epsilon: f64 },

    // ── feature extraction / prober ─────────────────────────────────────
    #[error("{op}: empty entropy series")]
    EmptySeries { op: &'static str },

    #[error("{op}: empty calibration set ({which})")]
    EmptyCalibration { op: &'static str, which: &'static str },

    #[error("{op}: calibration reports disagree on shape: {reason}")]
    CalibrationShapeMismatch { op: &'static str, reason: String },

    #[error("select_layers: K {k} out of range 1..={l_max}")]
    KOutOfRange { k: usize, l_max: usize },

    #[error("select_adv_heads: m {m} out of range 1..={h_max}")]
    MOutOfRange { m: usize, h_max: usize },

    #[error("build_features: layer index {layer} not below {n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("build_features: duplicate selected layer {layer}")]
    DuplicateLayer { layer: usize },

    #[error("build_features: no selected layers")]
    NoSelectedLayers,

    #[error("prober: channel count mismatch: model expects {expected}, bundle has {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("prober: feature length mismatch: model expects z of length {expected}, bundle has {got}")]
    FeatureLenMismatch { expected: usize, got: usize },

    #[error("single-class data: the training split needs both classes (got {n_benign} benign, {n_attacked} attacked)")]
    SingleClassData { n_benign: usize, n_attacked: usize },

    #[error("prober_train: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("gradient_check: non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },

    #[error("gradient_check: invalid step {step} (must be positive and finite)")]
    InvalidStep { step: f64 },

    // ── rectifier ───────────────────────────────────────────────────────
    #[error("row_threshold: empty row")]
    EmptyRow,

    #[error("steering: tau {tau} outside [0, 1]")]
    InvalidTau { tau: f64 },

    #[error("steering: gamma {gamma} must be positive and finite")]
    InvalidGamma { gamma: f64 },

    #[error("apply_steering: steering annihilated row (all attention mass masked with gamma = 0)")]
    AnnihilatedRow,

    #[error("steering plan: head ({layer}, {head}) out of range for {n_layers} layers x {n_heads} heads")]
    PlanHeadOutOfRange {
        layer: usize,
        head: usize,
        n_layers: usize,
        n_heads: usize,
    },

    // ── synthesis ───────────────────────────────────────────────────────
    #[error("synth: trajectory length {needed} exceeds budget {budget} (max_seq {max_seq} minus {decode_steps} decode steps)")]
    TrajectoryTooLong {
        needed: usize,
        budget: usize,
        max_seq: usize,
        decode_steps: usize,
    },

    #[error("gen_attacked: base trajectory is already injected")]
    BaseAlreadyInjected,

    #[error(
        "build_dataset: only {succeeded} of {requested} attacked trajectories actually hijack \
         the model (need at least 80%); raise qk_gain to strengthen the planted trigger head"
    )]
    InsufficientAttacks { succeeded: usize, requested: usize },

    // ── pipeline ────────────────────────────────────────────────────────
    #[error("evaluate: no run records")]
    NoRecords,

    #[error("sweep: empty {what}")]
    EmptySweep { what: &'static str },

    #[error("{op}: dimension mismatch: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    // ── artifacts / config ──────────────────────────────────────────────
    #[error("{op}: {path}: {source}")]
    Io {
        op: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {path}: bad magic (expected {expected:?}, found {found:?})")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint: {path}: {reason}")]
    CorruptCheckpoint { path: String, reason: String },

    #[error("config: line {line}: unknown key '{key}'")]
    UnknownConfigKey { line: usize, key: String },

    #[error("config: line {line}: key '{key}': {reason}")]
    BadConfigValue {
        line: usize,
        key: String,
        reason: String,
    },

    #[error("config: line {line}: expected 'key = value', got '{content}'")]
    MalformedConfigLine { line: usize, content: String },

    #[error("config: missing required key '{key}'")]
    MissingConfigKey { key: String },

    #[error("dataset: {path}: line {line}: {reason}")]
    BadDatasetRecord {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("csv: {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, IconError>;

impl IconError {
    /// Wrap an I/O error with the operation name and the path it touched.
    pub fn io(op: &'static str, path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        IconError::Io {
            op,
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
