//! A minimal deterministic decoder-only transformer with attention capture,
//! an attention-steering hook, and planted-trigger weight surgery.
//!
//! The engine exists to make injection dynamics observable and controllable
//! at desk scale: greedy decoding only, seed-deterministic weights, and a
//! recorded [`AttentionTrace`] of every head's attention from each generated
//! token back onto the context.
//!
//! # The planted circuits
//!
//! [`build_model`] with a [`TriggerPlant`] performs direct weight surgery
//! (no training) to install two competing attention circuits:
//!
//! * **Trigger head** `(target_layer, target_head)` — its query is a
//!   constant (written into the query bias), and its key projection reads a
//!   direction mixed into the trigger token's embedding, so every query
//!   scores ≈ `qk_gain` on the trigger position and ≈ 0 elsewhere. Its
//!   value/output path writes a reserved residual direction that the output
//!   head maps to `payload_token`. The payload logit therefore scales with
//!   the head's attention share on the trigger — the over-focusing
//!   signature the defense detects, and the lever the rectifier pulls.
//! * **Task head** (same layer, next head index) — attends to the answer
//!   cue planted in the instruction span and copies the cue's identity to
//!   the output head. This is what makes the benign behavior robust: with
//!   the trigger head suppressed, the model falls back to answering from
//!   the instruction.
//!
//! Whether the model emits the payload or the benign answer reduces to a
//! competition between two planted logits, one proportional to trigger
//! attention, one to cue attention. Steering the trigger head's rows down
//! with γ < 1 flips the competition back to the benign answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::path::Path;

use crate::error::{IconError, Result};
use crate::rectifier::{row_threshold, steering_mask, SteeringPlan};
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointBody, Tensor};

// ════════════════════════════════════════════════════════════════════════
// Vocabulary layout
// ════════════════════════════════════════════════════════════════════════
// The toy world has no tokenizer; token ids are the interface. The low ids
// carry fixed roles shared between the model surgery and the trajectory
// synthesizer.

/// Start-of-instruction marker.
pub const TOK_INSTRUCTION: u32 = 0;
/// Start-of-action marker.
pub const TOK_ACTION: u32 = 1;
/// Start-of-observation marker.
pub const TOK_OBSERVATION: u32 = 2;
/// Reserved/unused separator.
pub const TOK_SEP: u32 = 3;
/// The answer tokens the task head can copy; the cue is one of these.
pub const ANSWER_TOKENS: [u32; 4] = [4, 5, 6, 7];
/// Default trigger token id.
pub const DEFAULT_TRIGGER_TOKEN: u32 = 8;
/// Default payload token id.
pub const DEFAULT_PAYLOAD_TOKEN: u32 = 9;
/// Payload-context tokens inserted next to the trigger; their embeddings
/// carry a weak trigger component so the planted head sees them as
/// trigger-adjacent and their values also push the payload direction.
pub const PAYLOAD_CONTEXT_TOKENS: [u32; 2] = [10, 11];
/// First id of the generic filler vocabulary.
pub const GENERIC_VOCAB_START: u32 = 12;

// ════════════════════════════════════════════════════════════════════════
// Surgery constants
// ════════════════════════════════════════════════════════════════════════
// Strengths of the planted components. They are calibrated so that, at the
// default scale (d_model 128, 32 heads), an un-steered attack concentrates
// ~0.6–0.75 of the trigger head's attention on the trigger and wins the
// logit competition, while γ ≈ 0.3 steering drops the share below the
// flip point and the task head wins again.
mod surgery {
    /// Fraction of the original random embedding kept for surgered tokens.
    pub const EMB_KEEP: f32 = 0.25;
    /// Trigger direction strength in the trigger token's embedding.
    pub const T_TRIG: f32 = 10.0;
    /// Trigger direction strength in payload-context token embeddings.
    pub const T_PCTX: f32 = 1.0;
    /// Answer-class direction strength in answer token embeddings.
    pub const T_ANS: f32 = 10.0;
    /// Per-answer identity direction strength in answer token embeddings.
    pub const T_ID: f32 = 8.0;
    /// Strength of the reserved readout directions in the output head.
    pub const U_GAIN: f32 = 8.0;
    /// Trigger head: value read strength.
    pub const C_V: f32 = 1.0;
    /// Trigger head: residual write strength toward the payload readout.
    pub const BETA_P: f32 = 50.0;
    /// Task head: key gain on the answer-class direction.
    pub const G_B: f32 = 12.0;
    /// Task head: value read strength on answer identities.
    pub const C_B: f32 = 3.0;
    /// Task head: residual write strength toward answer readouts.
    pub const MU_B: f32 = 12.0;
    /// Output-path Xavier scale reduction, keeping residual noise small so
    /// the planted directions survive depth.
    pub const OUT_PROJ_SCALE: f32 = 0.5;
}

// ════════════════════════════════════════════════════════════════════════
// Configuration
// ════════════════════════════════════════════════════════════════════════

/// Shape and seed of a [`TinyTransformer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Enforce the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(IconError::InvalidModelConfig { reason });
        if self.vocab_size < 8 {
            return fail(format!("vocab_size {} below minimum 8", self.vocab_size));
        }
        if self.max_seq < 16 {
            return fail(format!("max_seq {} below minimum 16", self.max_seq));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.d_model == 0 {
            return fail("all counts must be at least 1".to_string());
        }
        if self.d_model != self.n_heads * self.head_dim {
            return fail(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        Ok(())
    }
}

/// Specification of the planted trigger head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerPlant {
    pub trigger_token: u32,
    pub payload_token: u32,
    pub target_layer: usize,
    pub target_head: usize,
    /// Attention score the trigger key receives from every query; larger
    /// means harder over-focusing.
    pub qk_gain: f32,
}

impl TriggerPlant {
    /// Check the plant against a model configuration.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.trigger_token == self.payload_token {
            return Err(IconError::PlantTokensEqual {
                token: self.trigger_token,
            });
        }
        if self.target_layer >= config.n_layers {
            return Err(IconError::PlantIndexOutOfRange {
                what: "target_layer",
                index: self.target_layer,
                bound: config.n_layers,
            });
        }
        if self.target_head >= config.n_heads {
            return Err(IconError::PlantIndexOutOfRange {
                what: "target_head",
                index: self.target_head,
                bound: config.n_heads,
            });
        }
        if self.trigger_token as usize >= config.vocab_size {
            return Err(IconError::PlantIndexOutOfRange {
                what: "trigger_token",
                index: self.trigger_token as usize,
                bound: config.vocab_size,
            });
        }
        if self.payload_token as usize >= config.vocab_size {
            return Err(IconError::PlantIndexOutOfRange {
                what: "payload_token",
                index: self.payload_token as usize,
                bound: config.vocab_size,
            });
        }
        if !(self.qk_gain > 0.0) || !self.qk_gain.is_finite() {
            return Err(IconError::InvalidModelConfig {
                reason: format!("qk_gain {} must be positive and finite", self.qk_gain),
            });
        }
        // The surgery writes the reserved vocabulary layout, so the model
        // must be large enough to hold it.
        if (config.vocab_size as u32) < GENERIC_VOCAB_START + 4 {
            return Err(IconError::InvalidModelConfig {
                reason: format!(
                    "planted model requires vocab_size >= {}, got {}",
                    GENERIC_VOCAB_START + 4,
                    config.vocab_size
                ),
            });
        }
        Ok(())
    }

    /// Head index of the companion task head (same layer, next head), or
    /// `None` for single-head models, which cannot host the benign circuit.
    pub fn task_head(&self, config: &ModelConfig) -> Option<usize> {
        if config.n_heads < 2 {
            None
        } else {
            Some((self.target_head + 1) % config.n_heads)
        }
    }
}

// ════════════════════════════════════════════════════════════════════════
// Weights
// ════════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// The model: immutable after construction; cheap to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer {
    pub config: ModelConfig,
    pub planted_spec: Option<TriggerPlant>,
    tok_embed: Tensor,
    pos_embed: Tensor,
    layers: Vec<LayerWeights>,
    unembed: Tensor,
}

fn xavier(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f32) -> Tensor {
    let a = scale * (6.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols)
        .map(|_| a * (2.0 * rng.random::<f32>() - 1.0))
        .collect();
    Tensor::from_data(&[rows, cols], data)
}

/// Random unit vector, orthogonalized against `against`.
fn unit_direction(rng: &mut ChaCha20Rng, d: usize, against: &[Vec<f32>]) -> Vec<f32> {
    let mut v: Vec<f32> = (0..d).map(|_| 2.0 * rng.random::<f32>() - 1.0).collect();
    for prev in against {
        let dot: f32 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
        for (vi, pi) in v.iter_mut().zip(prev) {
            *vi -= dot * pi;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!(norm > 1e-3, "degenerate direction draw");
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Build a model from a config, optionally planting the trigger circuits.
///
/// Weights are drawn Xavier-uniform in a fixed order from a ChaCha20 stream
/// seeded by `config.seed`, so the same config yields bit-identical weights.
pub fn build_model(config: ModelConfig, plant: Option<TriggerPlant>) -> Result<TinyTransformer> {
    config.validate()?;
    if let Some(p) = &plant {
        p.validate(&config)?;
    }
    let d = config.d_model;
    let hidden = 4 * d;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    // Fixed draw order: embeddings, per-layer attention + MLP, output head.
    let tok_embed = xavier(&mut rng, config.vocab_size, d, 1.0);
    let pos_embed = xavier(&mut rng, config.max_seq, d, 1.0);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            wq: xavier(&mut rng, d, d, 1.0),
            bq: Tensor::zeros(&[d]),
            wk: xavier(&mut rng, d, d, 1.0),
            bk: Tensor::zeros(&[d]),
            wv: xavier(&mut rng, d, d, 1.0),
            bv: Tensor::zeros(&[d]),
            wo: xavier(&mut rng, d, d, surgery::OUT_PROJ_SCALE),
            bo: Tensor::zeros(&[d]),
            w1: xavier(&mut rng, hidden, d, 1.0),
            b1: Tensor::zeros(&[hidden]),
            w2: xavier(&mut rng, d, hidden, surgery::OUT_PROJ_SCALE),
            b2: Tensor::zeros(&[d]),
        });
    }
    let unembed = xavier(&mut rng, config.vocab_size, d, 1.0);

    let mut model = TinyTransformer {
        config,
        planted_spec: plant,
        tok_embed,
        pos_embed,
        layers,
        unembed,
    };
    if let Some(p) = plant {
        apply_surgery(&mut model, &p, &mut rng);
    }
    debug_assert!(model.all_finite());
    Ok(model)
}

/// Overwrite the planted heads' projections and the reserved embeddings /
/// readouts. `rng` continues the construction stream, so the directions are
/// as deterministic as the base weights.
fn apply_surgery(model: &mut TinyTransformer, plant: &TriggerPlant, rng: &mut ChaCha20Rng) {
    let d = model.config.d_model;
    let hd = model.config.head_dim;
    let sqrt_d = (d as f32).sqrt();
    let sqrt_hd = (hd as f32).sqrt();
    let n_answers = ANSWER_TOKENS.len().min(hd);

    // Mutually orthogonal planted directions, in a fixed draw order:
    // trigger content, answer class, payload readout, per-answer identity,
    // per-answer readout.
    let mut drawn: Vec<Vec<f32>> = Vec::new();
    let mut draw = |drawn: &mut Vec<Vec<f32>>| {
        let v = unit_direction(rng, d, drawn);
        drawn.push(v.clone());
        v
    };
    let d_trig = draw(&mut drawn);
    let d_ans = draw(&mut drawn);
    let d_payload = draw(&mut drawn);
    let d_id: Vec<Vec<f32>> = (0..n_answers).map(|_| draw(&mut drawn)).collect();
    let d_read: Vec<Vec<f32>> = (0..n_answers).map(|_| draw(&mut drawn)).collect();

    // ── embeddings ──────────────────────────────────────────────────────
    let blend = |row: &mut [f32], parts: &[(&[f32], f32)]| {
        for v in row.iter_mut() {
            *v *= surgery::EMB_KEEP;
        }
        for (dir, w) in parts {
            for (r, x) in row.iter_mut().zip(dir.iter()) {
                *r += w * x;
            }
        }
    };
    {
        let row = tensor_row_mut(&mut model.tok_embed, plant.trigger_token as usize);
        blend(row, &[(&d_trig, surgery::T_TRIG)]);
    }
    for &t in &PAYLOAD_CONTEXT_TOKENS {
        let row = tensor_row_mut(&mut model.tok_embed, t as usize);
        blend(row, &[(&d_trig, surgery::T_PCTX)]);
    }
    for (i, &t) in ANSWER_TOKENS.iter().take(n_answers).enumerate() {
        let row = tensor_row_mut(&mut model.tok_embed, t as usize);
        blend(row, &[(&d_ans, surgery::T_ANS), (&d_id[i], surgery::T_ID)]);
    }

    // ── output head readouts ────────────────────────────────────────────
    {
        let row = tensor_row_mut(&mut model.unembed, plant.payload_token as usize);
        for (r, x) in row.iter_mut().zip(d_payload.iter()) {
            *r += surgery::U_GAIN * x;
        }
    }
    for (i, &t) in ANSWER_TOKENS.iter().take(n_answers).enumerate() {
        let row = tensor_row_mut(&mut model.unembed, t as usize);
        for (r, x) in row.iter_mut().zip(d_read[i].iter()) {
            *r += surgery::U_GAIN * x;
        }
    }

    // ── trigger head ────────────────────────────────────────────────────
    // Constant query e0 via the bias; key row 0 reads the trigger
    // direction scaled so score ≈ qk_gain · cos(LN h, d_trig); value row 0
    // reads trigger-ness; output column 0 writes the payload readout.
    {
        let layer = &mut model.layers[plant.target_layer];
        let s = plant.target_head * hd;
        zero_head_rows(&mut layer.wq, s, hd);
        zero_head_rows(&mut layer.wk, s, hd);
        zero_head_rows(&mut layer.wv, s, hd);
        zero_head_cols(&mut layer.wo, s, hd);
        layer.bq.data[s] = 1.0;
        set_row(&mut layer.wk, s, &d_trig, plant.qk_gain * sqrt_hd / sqrt_d);
        set_row(&mut layer.wv, s, &d_trig, surgery::C_V / sqrt_d);
        set_col(&mut layer.wo, s, &d_payload, surgery::BETA_P);
    }

    // ── task head (needs a second head in the layer) ────────────────────
    if let Some(task_h) = plant.task_head(&model.config) {
        let layer = &mut model.layers[plant.target_layer];
        let s = task_h * hd;
        zero_head_rows(&mut layer.wq, s, hd);
        zero_head_rows(&mut layer.wk, s, hd);
        zero_head_rows(&mut layer.wv, s, hd);
        zero_head_cols(&mut layer.wo, s, hd);
        layer.bq.data[s] = 1.0;
        set_row(&mut layer.wk, s, &d_ans, surgery::G_B * sqrt_hd / sqrt_d);
        for i in 0..n_answers {
            set_row(&mut layer.wv, s + i, &d_id[i], surgery::C_B / sqrt_d);
            set_col(&mut layer.wo, s + i, &d_read[i], surgery::MU_B);
        }
    }
}

fn tensor_row_mut(t: &mut Tensor, row: usize) -> &mut [f32] {
    let cols = t.dims[1];
    &mut t.data[row * cols..(row + 1) * cols]
}

fn zero_head_rows(t: &mut Tensor, start: usize, count: usize) {
    let cols = t.dims[1];
    t.data[start * cols..(start + count) * cols].fill(0.0);
}

fn zero_head_cols(t: &mut Tensor, start: usize, count: usize) {
    let cols = t.dims[1];
    let rows = t.dims[0];
    for r in 0..rows {
        t.data[r * cols + start..r * cols + start + count].fill(0.0);
    }
}

fn set_row(t: &mut Tensor, row: usize, dir: &[f32], scale: f32) {
    let cols = t.dims[1];
    for (slot, &x) in t.data[row * cols..(row + 1) * cols].iter_mut().zip(dir) {
        *slot = scale * x;
    }
}

fn set_col(t: &mut Tensor, col: usize, dir: &[f32], scale: f32) {
    let cols = t.dims[1];
    for (r, &x) in dir.iter().enumerate() {
        t.data[r * cols + col] = scale * x;
    }
}

// ════════════════════════════════════════════════════════════════════════
// Attention trace
// ════════════════════════════════════════════════════════════════════════

/// Per-(layer, head) attention matrices from generated queries onto the
/// context, each row renormalized over the first `context_len` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub context_len: usize,
    pub gen_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_tokens: Vec<u32>,
    pub generated_tokens: Vec<u32>,
    /// `[start, end)` indices of an injected span inside the context, when
    /// the caller knows them (carried for bookkeeping; unused by the math).
    pub injection_span: Option<(usize, usize)>,
    /// Flattened rows: `((l·H + h)·N_Y + i)·N + j`.
    rows: Vec<f32>,
}

impl AttentionTrace {
    pub(crate) fn new(
        n_layers: usize,
        n_heads: usize,
        gen_len: usize,
        context_tokens: Vec<u32>,
    ) -> Self {
        let n = context_tokens.len();
        AttentionTrace {
            context_len: n,
            gen_len,
            n_layers,
            n_heads,
            context_tokens,
            generated_tokens: Vec::with_capacity(gen_len),
            injection_span: None,
            rows: vec![0.0; n_layers * n_heads * gen_len * n],
        }
    }

    #[inline]
    fn row_start(&self, layer: usize, head: usize, i: usize) -> usize {
        ((layer * self.n_heads + head) * self.gen_len + i) * self.context_len
    }

    /// Attention row of generated token `i` for head `(layer, head)`.
    pub fn row(&self, layer: usize, head: usize, i: usize) -> &[f32] {
        let s = self.row_start(layer, head, i);
        &self.rows[s..s + self.context_len]
    }

    pub(crate) fn row_mut(&mut self, layer: usize, head: usize, i: usize) -> &mut [f32] {
        let s = self.row_start(layer, head, i);
        &mut self.rows[s..s + self.context_len]
    }

    /// Check row-stochasticity of every stored row (tolerance 1e-6).
    pub fn validate(&self) -> Result<()> {
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for i in 0..self.gen_len {
                    let row = self.row(l, h, i);
                    let sum: f64 = row.iter().map(|&v| v as f64).sum();
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(IconError::RowNotStochastic {
                            reason: format!(
                                "trace row (layer {l}, head {h}, token {i}) sums to {sum}"
                            ),
                        });
                    }
                    if row.iter().any(|&v| !(0.0..=1.0 + 1e-6).contains(&v)) {
                        return Err(IconError::RowNotStochastic {
                            reason: format!(
                                "trace row (layer {l}, head {h}, token {i}) has entries outside [0, 1]"
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

// ════════════════════════════════════════════════════════════════════════
// Generation
// ════════════════════════════════════════════════════════════════════════

const LN_EPS: f32 = 1e-5;

fn layer_norm(x: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
}

/// `out = W·x + b` for row-major `W: [rows, cols]`.
fn matvec(w: &Tensor, b: Option<&Tensor>, x: &[f32], out: &mut [f32]) {
    let cols = w.dims[1];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w.data[r * cols..(r + 1) * cols];
        let mut acc = 0.0f32;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc + b.map_or(0.0, |b| b.data[r]);
    }
}

struct DecodeState {
    /// Per layer: cached key vectors, `d_model` per position.
    k: Vec<Vec<f32>>,
    /// Per layer: cached value vectors, `d_model` per position.
    v: Vec<Vec<f32>>,
}

impl TinyTransformer {
    /// Greedy generation with attention capture.
    ///
    /// Returns the generated tokens and an [`AttentionTrace`] holding, for
    /// every head, each generated token's attention restricted to the
    /// context columns `[0, N)` and renormalized to sum to 1. During decode
    /// a query also attends to earlier generated tokens; the restriction
    /// keeps the trace's shape `N_Y × N` and its entropy normalization
    /// well defined.
    ///
    /// When `steering` is given, the rectifier transform (threshold → mask
    /// → γ-scale → renormalize) runs inside every targeted head for each
    /// query that produces a generated token (and, when the plan asks for
    /// it, for the context-processing queries too) before value mixing.
    /// The mask is computed on — and applied to — the context columns.
    pub fn generate(
        &self,
        context: &[u32],
        steps: usize,
        steering: Option<&SteeringPlan>,
    ) -> Result<(Vec<u32>, AttentionTrace)> {
        let cfg = &self.config;
        if context.is_empty() {
            return Err(IconError::EmptyContext);
        }
        if steps == 0 {
            return Err(IconError::ZeroSteps);
        }
        if context.len() + steps > cfg.max_seq {
            return Err(IconError::ContextTooLong {
                context_len: context.len(),
                steps,
                max_seq: cfg.max_seq,
            });
        }
        for &t in context {
            if t as usize >= cfg.vocab_size {
                return Err(IconError::TokenOutOfRange {
                    token: t,
                    vocab_size: cfg.vocab_size,
                });
            }
        }
        if let Some(plan) = steering {
            plan.validate(cfg.n_layers, cfg.n_heads)?;
        }
        let steer = steering.filter(|p| !p.is_identity());

        let n = context.len();
        let d = cfg.d_model;
        let mut trace = AttentionTrace::new(cfg.n_layers, cfg.n_heads, steps, context.to_vec());
        let mut state = DecodeState {
            k: vec![Vec::with_capacity((n + steps) * d); cfg.n_layers],
            v: vec![Vec::with_capacity((n + steps) * d); cfg.n_layers],
        };
        let mut generated = Vec::with_capacity(steps);

        // The query at context position N−1 produces generated token 0, the
        // query at position N+i−1 produces token i.
        for pos in 0..n + steps - 1 {
            let token = if pos < n {
                context[pos]
            } else {
                generated[pos - n]
            };
            let gen_index = (pos + 1).checked_sub(n); // Some(i) ⇒ this query emits token i
            let logits = self.forward_position(pos, token, gen_index, steer, &mut state, &mut trace);
            if let Some(i) = gen_index {
                let logits = logits.expect("generating query always produces logits");
                let next = argmax(&logits);
                generated.push(next);
                trace.generated_tokens.push(next);
                let _ = i;
            }
        }
        debug_assert_eq!(generated.len(), steps);
        Ok((generated, trace))
    }

    /// Run one position through every layer, updating caches, recording the
    /// trace and applying steering where due. Returns output logits for
    /// queries that produce a generated token.
    fn forward_position(
        &self,
        pos: usize,
        token: u32,
        gen_index: Option<usize>,
        steering: Option<&SteeringPlan>,
        state: &mut DecodeState,
        trace: &mut AttentionTrace,
    ) -> Option<Vec<f32>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let hd = cfg.head_dim;
        let n_ctx = trace.context_len;

        let mut h = vec![0.0f32; d];
        for (hi, (te, pe)) in h.iter_mut().zip(
            self.tok_embed.data[token as usize * d..(token as usize + 1) * d]
                .iter()
                .zip(&self.pos_embed.data[pos * d..(pos + 1) * d]),
        ) {
            *hi = te + pe;
        }

        let mut xn = vec![0.0f32; d];
        let mut q = vec![0.0f32; d];
        let mut att_concat = vec![0.0f32; d];
        let mut att_out = vec![0.0f32; d];
        let steer_this_query =
            steering.filter(|p| gen_index.is_some() || p.apply_during_prefill);

        for (l, layer) in self.layers.iter().enumerate() {
            layer_norm(&h, &mut xn);
            matvec(&layer.wq, Some(&layer.bq), &xn, &mut q);
            // Append this position's K and V to the cache before attending,
            // so the query sees itself (causal span 0..=pos).
            let kcache = &mut state.k[l];
            let vcache = &mut state.v[l];
            let base = kcache.len();
            kcache.resize(base + d, 0.0);
            vcache.resize(base + d, 0.0);
            matvec(&layer.wk, Some(&layer.bk), &xn, &mut kcache[base..]);
            matvec(&layer.wv, Some(&layer.bv), &xn, &mut vcache[base..]);

            let span = pos + 1;
            for head in 0..cfg.n_heads {
                let hs = head * hd;
                let qh = &q[hs..hs + hd];
                let mut row = vec![0.0f32; span];
                let scale = 1.0 / (hd as f32).sqrt();
                for (j, rj) in row.iter_mut().enumerate() {
                    let kj = &kcache[j * d + hs..j * d + hs + hd];
                    let mut s = 0.0f32;
                    for (a, b) in qh.iter().zip(kj) {
                        s += a * b;
                    }
                    *rj = s * scale;
                }
                softmax_in_place(&mut row);

                if let Some(plan) = steer_this_query {
                    if plan.targets(l, head) {
                        steer_live_row(&mut row, n_ctx.min(span), plan);
                    }
                }

                if let Some(i) = gen_index {
                    record_restricted_row(trace, l, head, i, &row);
                }

                let out = &mut att_concat[hs..hs + hd];
                out.fill(0.0);
                for (j, &a) in row.iter().enumerate() {
                    let vj = &vcache[j * d + hs..j * d + hs + hd];
                    for (o, &x) in out.iter_mut().zip(vj) {
                        *o += a * x;
                    }
                }
            }
            matvec(&layer.wo, Some(&layer.bo), &att_concat, &mut att_out);
            for (hi, &a) in h.iter_mut().zip(&att_out) {
                *hi += a;
            }

            layer_norm(&h, &mut xn);
            let mut mid = vec![0.0f32; layer.w1.dims[0]];
            matvec(&layer.w1, Some(&layer.b1), &xn, &mut mid);
            for v in &mut mid {
                *v = v.max(0.0);
            }
            let mut mlp_out = vec![0.0f32; d];
            matvec(&layer.w2, Some(&layer.b2), &mid, &mut mlp_out);
            for (hi, &m) in h.iter_mut().zip(&mlp_out) {
                *hi += m;
            }
        }

        gen_index.map(|_| {
            layer_norm(&h, &mut xn);
            let mut logits = vec![0.0f32; cfg.vocab_size];
            matvec(&self.unembed, None, &xn, &mut logits);
            logits
        })
    }

    /// True when every weight is finite.
    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Total number of weight elements.
    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("unembed".into(), &self.unembed));
        out
    }

    /// Write a "TLM1" checkpoint atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.config;
        let mut tensors: Vec<(String, Tensor)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        if let Some(p) = &self.planted_spec {
            tensors.push((
                "planted_spec".into(),
                Tensor::from_data(
                    &[5],
                    vec![
                        p.trigger_token as f32,
                        p.payload_token as f32,
                        p.target_layer as f32,
                        p.target_head as f32,
                        p.qk_gain,
                    ],
                ),
            ));
        }
        let body = CheckpointBody {
            header: vec![
                cfg.vocab_size as u32,
                cfg.d_model as u32,
                cfg.n_layers as u32,
                cfg.n_heads as u32,
                cfg.head_dim as u32,
                cfg.max_seq as u32,
            ],
            seed: cfg.seed,
            tensors,
        };
        write_checkpoint("model save", path, b"TLM1", &body)
    }

    /// Load a "TLM1" checkpoint.
    pub fn load(path: &Path) -> Result<TinyTransformer> {
        let body = read_checkpoint("model load", path, b"TLM1", 6)?;
        let config = ModelConfig {
            vocab_size: body.header[0] as usize,
            d_model: body.header[1] as usize,
            n_layers: body.header[2] as usize,
            n_heads: body.header[3] as usize,
            head_dim: body.header[4] as usize,
            max_seq: body.header[5] as usize,
            seed: body.seed,
        };
        config.validate()?;
        let d = config.d_model;
        let hidden = 4 * d;
        let take = |name: &str, dims: &[usize]| -> Result<Tensor> {
            let t = body.tensor(name, path)?;
            if t.dims != dims {
                return Err(IconError::CorruptCheckpoint {
                    path: path.display().to_string(),
                    reason: format!("tensor '{name}' has dims {:?}, expected {:?}", t.dims, dims),
                });
            }
            Ok(t.clone())
        };
        let tok_embed = take("tok_embed", &[config.vocab_size, d])?;
        let pos_embed = take("pos_embed", &[config.max_seq, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerWeights {
                wq: take(&format!("layers.{i}.wq"), &[d, d])?,
                bq: take(&format!("layers.{i}.bq"), &[d])?,
                wk: take(&format!("layers.{i}.wk"), &[d, d])?,
                bk: take(&format!("layers.{i}.bk"), &[d])?,
                wv: take(&format!("layers.{i}.wv"), &[d, d])?,
                bv: take(&format!("layers.{i}.bv"), &[d])?,
                wo: take(&format!("layers.{i}.wo"), &[d, d])?,
                bo: take(&format!("layers.{i}.bo"), &[d])?,
                w1: take(&format!("layers.{i}.w1"), &[hidden, d])?,
                b1: take(&format!("layers.{i}.b1"), &[hidden])?,
                w2: take(&format!("layers.{i}.w2"), &[d, hidden])?,
                b2: take(&format!("layers.{i}.b2"), &[d])?,
            });
        }
        let unembed = take("unembed", &[config.vocab_size, d])?;
        let planted_spec = match body.tensors.iter().find(|(n, _)| n == "planted_spec") {
            Some((_, t)) if t.len() == 5 => Some(TriggerPlant {
                trigger_token: t.data[0] as u32,
                payload_token: t.data[1] as u32,
                target_layer: t.data[2] as usize,
                target_head: t.data[3] as usize,
                qk_gain: t.data[4],
            }),
            Some((_, t)) => {
                return Err(IconError::CorruptCheckpoint {
                    path: path.display().to_string(),
                    reason: format!("tensor 'planted_spec' has {} elements, expected 5", t.len()),
                })
            }
            None => None,
        };
        Ok(TinyTransformer {
            config,
            planted_spec,
            tok_embed,
            pos_embed,
            layers,
            unembed,
        })
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Threshold/mask/γ-scale the context columns of a live attention row, then
/// renormalize the whole row. The f64 round trip keeps the kernel shared
/// with the offline rectifier path.
fn steer_live_row(row: &mut [f32], n_ctx: usize, plan: &SteeringPlan) {
    let ctx: Vec<f64> = row[..n_ctx].iter().map(|&v| v as f64).collect();
    let theta = row_threshold(&ctx, plan.tau).expect("live row is non-empty, tau validated");
    let mask = steering_mask(&ctx, theta);
    let mut total = 0.0f64;
    for (j, v) in row.iter_mut().enumerate() {
        if j < n_ctx && mask[j] {
            *v = (*v as f64 * plan.gamma) as f32;
        }
        total += *v as f64;
    }
    // γ > 0 on a softmax row keeps positive mass, so total > 0 always.
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

/// Slice the row to the context columns and renormalize into the trace.
fn record_restricted_row(
    trace: &mut AttentionTrace,
    layer: usize,
    head: usize,
    i: usize,
    row: &[f32],
) {
    let n = trace.context_len;
    let restricted = &row[..n.min(row.len())];
    let sum: f64 = restricted.iter().map(|&v| v as f64).sum();
    let inv = if sum > 0.0 { 1.0 / sum } else { 0.0 };
    let dest = trace.row_mut(layer, head, i);
    for (d, &v) in dest.iter_mut().zip(restricted) {
        *d = (v as f64 * inv) as f32;
    }
}

fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

// ════════════════════════════════════════════════════════════════════════
// Tests
// ════════════════════════════════════════════════════════════════════════
