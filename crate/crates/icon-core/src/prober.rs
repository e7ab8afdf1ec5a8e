//! The latent-space trace prober.
//!
//! Reduces an [`EntropyTensor`] to features over a small set of
//! attack-sensitive layers and classifies the trace as benign or attacked.
//! Layers are ranked by the gap in mean layer focus score between attacked
//! and benign calibration runs. Per head the feature extractor keeps both a
//! three-number summary of the entropy series (minimum, mean, population
//! standard deviation) and the raw per-token series as a channel for a 1-D
//! convolutional stack.
//!
//! The classifier runs two circular convolutions over the time axis of the
//! channel matrix, takes one global maximum per channel (so its output
//! width is fixed regardless of how many tokens were generated), appends
//! the summary vector `z` *after* pooling, and finishes with a two-layer
//! MLP and a sigmoid head. Circular padding makes the convolution of a
//! time-repeated signal equal the repetition of the convolved signal, so
//! repeating a trace along time leaves the pooled maxima — and therefore
//! the output probability — bit-identical.
//!
//! Training is hand-rolled mini-batch gradient descent with classical
//! momentum on the numerically stable logit formulation of binary
//! cross-entropy. All internal arithmetic is `f64`; checkpoints store
//! parameters as `f32` like every other artifact. [`gradient_check`]
//! validates the analytic gradients against central finite differences for
//! every parameter.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{IconError, Result};
use crate::fis::{check_report_shapes, EntropyTensor, FisReport};
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointBody, Tensor};

/// Checkpoint magic for prober files.
const PROBER_MAGIC: &[u8; 4] = b"PRB1";
/// Architecture header fields: input channels, conv channels, kernel
/// width, pooled width, summary length, hidden width.
const PROBER_HEADER_FIELDS: usize = 6;
/// XOR'd into the training seed so the epoch-shuffle stream is independent
/// of the weight-initialization stream.
const SHUFFLE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

// ════════════════════════════════════════════════════════════════════════
// Layer selection
// ════════════════════════════════════════════════════════════════════════

/// Pick the `k` layers whose mean layer focus score rises most from the
/// benign to the attacked calibration runs.
///
/// Ties break toward the lower layer index; the result is sorted
/// ascending.
pub fn select_layers(
    benign: &[FisReport],
    attacked: &[FisReport],
    k: usize,
) -> Result<Vec<usize>> {
    let (n_layers, _) = check_report_shapes("select_layers", benign, attacked)?;
    if k == 0 || k > n_layers {
        return Err(IconError::KOutOfRange { k, l_max: n_layers });
    }
    let mean_layer = |reports: &[FisReport], l: usize| -> f64 {
        reports.iter().map(|r| r.layer_score(l)).sum::<f64>() / reports.len() as f64
    };
    let gaps: Vec<f64> = (0..n_layers)
        .map(|l| mean_layer(attacked, l) - mean_layer(benign, l))
        .collect();
    Ok(rank_layers_by_gap(&gaps, k))
}

/// Indices of the `k` largest gaps, ties to the lower index, sorted
/// ascending.
fn rank_layers_by_gap(gaps: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..gaps.len()).collect();
    idx.sort_by(|&a, &b| gaps[b].partial_cmp(&gaps[a]).unwrap().then(a.cmp(&b)));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

// ════════════════════════════════════════════════════════════════════════
// Feature extraction
// ════════════════════════════════════════════════════════════════════════

/// Three-number summary of one head's entropy series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSummary {
    /// Smallest entropy in the series.
    pub min: f64,
    /// Mean entropy.
    pub mean: f64,
    /// Population standard deviation (`1/N` normalization).
    pub std: f64,
}

/// Summarize one entropy series as (min, mean, population std).
pub fn aggregate_head(series: &[f64]) -> Result<HeadSummary> {
    if series.is_empty() {
        return Err(IconError::EmptySeries {
            op: "aggregate_head",
        });
    }
    let n = series.len() as f64;
    let mut min = f64::INFINITY;
    let mut sum = 0.0f64;
    for &v in series {
        min = min.min(v);
        sum += v;
    }
    let mean = sum / n;
    let var = series.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(HeadSummary {
        min,
        mean,
        std: var.sqrt(),
    })
}

/// Classifier input extracted from one trace over the selected layers.
///
/// `z` holds one [`HeadSummary`] per head as three consecutive numbers,
/// layers ascending, heads ascending within a layer, `(min, mean, std)`
/// within a head. `channels` holds the raw per-token entropy series of the
/// same heads in the same order, one row per head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// Summary features, length `3 · n_channels`.
    pub z: Vec<f64>,
    /// Selected layers, strictly increasing.
    pub selected_layers: Vec<usize>,
    /// Number of channel rows (heads × selected layers).
    pub n_channels: usize,
    /// Time steps per channel (generated tokens).
    pub t_len: usize,
    /// Row-major `n_channels × t_len` entropy values.
    channels: Vec<f64>,
}

impl FeatureBundle {
    /// Assemble a bundle from raw parts.
    ///
    /// Panics if the channel matrix does not measure
    /// `n_channels × t_len`, if either dimension is zero, or if
    /// `selected_layers` is not strictly increasing.
    pub fn new(
        z: Vec<f64>,
        selected_layers: Vec<usize>,
        channels: Vec<f64>,
        n_channels: usize,
        t_len: usize,
    ) -> Self {
        assert!(n_channels >= 1 && t_len >= 1, "empty channel matrix");
        assert_eq!(
            channels.len(),
            n_channels * t_len,
            "channel matrix must measure n_channels x t_len"
        );
        assert!(
            selected_layers.windows(2).all(|w| w[0] < w[1]),
            "selected layers must be strictly increasing"
        );
        FeatureBundle {
            z,
            selected_layers,
            n_channels,
            t_len,
            channels,
        }
    }

    /// The full row-major channel matrix.
    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    /// One channel row (a head's per-token entropy series).
    pub fn channel(&self, row: usize) -> &[f64] {
        &self.channels[row * self.t_len..(row + 1) * self.t_len]
    }
}

/// Extract the feature bundle for `selected_layers` from an entropy
/// tensor.
///
/// The layer list may arrive in any order; it is sorted internally, so
/// permutations of the same set yield identical bundles.
pub fn build_features(et: &EntropyTensor, selected_layers: &[usize]) -> Result<FeatureBundle> {
    if et.n_layers == 0 || et.n_heads == 0 || et.gen_len == 0 {
        return Err(IconError::EmptySeries {
            op: "build_features",
        });
    }
    if selected_layers.is_empty() {
        return Err(IconError::NoSelectedLayers);
    }
    let mut layers = selected_layers.to_vec();
    layers.sort_unstable();
    for pair in layers.windows(2) {
        if pair[0] == pair[1] {
            return Err(IconError::DuplicateLayer { layer: pair[0] });
        }
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= et.n_layers) {
        return Err(IconError::LayerOutOfRange {
            layer: bad,
            n_layers: et.n_layers,
        });
    }

    let n_channels = et.n_heads * layers.len();
    let mut z = Vec::with_capacity(3 * n_channels);
    let mut channels = Vec::with_capacity(n_channels * et.gen_len);
    for &l in &layers {
        for h in 0..et.n_heads {
            let series = et.series(l, h);
            let s = aggregate_head(series)?;
            z.extend_from_slice(&[s.min, s.mean, s.std]);
            channels.extend_from_slice(series);
        }
    }
    Ok(FeatureBundle {
        z,
        selected_layers: layers,
        n_channels,
        t_len: et.gen_len,
        channels,
    })
}

// ════════════════════════════════════════════════════════════════════════
// Model
// ════════════════════════════════════════════════════════════════════════

/// Classifier width knobs. The pooled width always equals
/// `conv_channels` (one global maximum per convolution channel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchSpec {
    /// Output channels of both convolution layers.
    pub conv_channels: usize,
    /// Convolution kernel width (odd, circular padding).
    pub kernel: usize,
    /// Hidden width of the MLP.
    pub hidden: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            conv_channels: 16,
            kernel: 3,
            hidden: 64,
        }
    }
}

/// One 1-D convolution layer with circular padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][tap]`, row-major.
    pub weight: Vec<f64>,
    /// One bias per output channel.
    pub bias: Vec<f64>,
}

impl Conv1d {
    fn xavier(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha20Rng) -> Self {
        let limit = (6.0 / ((in_channels + out_channels) * kernel) as f64).sqrt();
        let weight = (0..out_channels * in_channels * kernel)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Conv1d {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![0.0; out_channels],
        }
    }
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`, row-major.
    pub weight: Vec<f64>,
    /// One bias per output feature.
    pub bias: Vec<f64>,
}

impl Linear {
    fn xavier(in_features: usize, out_features: usize, rng: &mut ChaCha20Rng) -> Self {
        let limit = (6.0 / (in_features + out_features) as f64).sqrt();
        let weight = (0..out_features * in_features)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Linear {
            in_features,
            out_features,
            weight,
            bias: vec![0.0; out_features],
        }
    }
}

/// The trace classifier: two circular convolutions, global max pooling,
/// summary concatenation, and a two-layer MLP with a sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProberModel {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Pooled feature width (equals the conv output channel count).
    pub d_feat: usize,
    /// Expected summary vector length.
    pub z_len: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl ProberModel {
    /// Xavier-uniform initialization (weights; biases start at zero) from
    /// a deterministic stream seeded by `seed`.
    pub fn new(in_channels: usize, z_len: usize, arch: &ArchSpec, seed: u64) -> Self {
        assert!(in_channels >= 1, "need at least one input channel");
        assert!(z_len >= 1, "need a non-empty summary vector");
        assert!(
            arch.conv_channels >= 1 && arch.hidden >= 1,
            "architecture widths must be at least 1"
        );
        assert!(
            arch.kernel >= 1 && arch.kernel % 2 == 1,
            "kernel width must be odd"
        );
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = arch.conv_channels;
        let conv1 = Conv1d::xavier(in_channels, c, arch.kernel, &mut rng);
        let conv2 = Conv1d::xavier(c, c, arch.kernel, &mut rng);
        let fc1 = Linear::xavier(c + z_len, arch.hidden, &mut rng);
        let fc2 = Linear::xavier(arch.hidden, 1, &mut rng);
        ProberModel {
            conv1,
            conv2,
            fc1,
            fc2,
            d_feat: c,
            z_len,
            seed,
        }
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.group_sizes().iter().sum()
    }

    /// Element counts of the eight parameter groups in canonical order:
    /// conv1 weight/bias, conv2 weight/bias, fc1 weight/bias, fc2
    /// weight/bias.
    fn group_sizes(&self) -> [usize; 8] {
        [
            self.conv1.weight.len(),
            self.conv1.bias.len(),
            self.conv2.weight.len(),
            self.conv2.bias.len(),
            self.fc1.weight.len(),
            self.fc1.bias.len(),
            self.fc2.weight.len(),
            self.fc2.bias.len(),
        ]
    }

    /// All parameters flattened in canonical group order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for group in [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ] {
            out.extend_from_slice(group);
        }
        out
    }

    /// Mutable access to the parameter at a canonical flat index.
    fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let mut i = idx;
        if i < self.conv1.weight.len() {
            return &mut self.conv1.weight[i];
        }
        i -= self.conv1.weight.len();
        if i < self.conv1.bias.len() {
            return &mut self.conv1.bias[i];
        }
        i -= self.conv1.bias.len();
        if i < self.conv2.weight.len() {
            return &mut self.conv2.weight[i];
        }
        i -= self.conv2.weight.len();
        if i < self.conv2.bias.len() {
            return &mut self.conv2.bias[i];
        }
        i -= self.conv2.bias.len();
        if i < self.fc1.weight.len() {
            return &mut self.fc1.weight[i];
        }
        i -= self.fc1.weight.len();
        if i < self.fc1.bias.len() {
            return &mut self.fc1.bias[i];
        }
        i -= self.fc1.bias.len();
        if i < self.fc2.weight.len() {
            return &mut self.fc2.weight[i];
        }
        i -= self.fc2.weight.len();
        if i < self.fc2.bias.len() {
            return &mut self.fc2.bias[i];
        }
        panic!("parameter index {idx} out of range");
    }

    /// Human-readable name of the parameter at a canonical flat index.
    fn param_name(&self, idx: usize) -> String {
        let groups: [(&str, usize); 8] = [
            ("conv1.weight", self.conv1.weight.len()),
            ("conv1.bias", self.conv1.bias.len()),
            ("conv2.weight", self.conv2.weight.len()),
            ("conv2.bias", self.conv2.bias.len()),
            ("fc1.weight", self.fc1.weight.len()),
            ("fc1.bias", self.fc1.bias.len()),
            ("fc2.weight", self.fc2.weight.len()),
            ("fc2.bias", self.fc2.bias.len()),
        ];
        let mut i = idx;
        for (name, len) in groups {
            if i < len {
                return format!("{name}[{i}]");
            }
            i -= len;
        }
        panic!("parameter index {idx} out of range");
    }

    /// One momentum step: `v ← μ·v + g`, `θ ← θ − lr·v`, over the
    /// canonical flat order.
    fn apply_update(&mut self, velocity: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
        let mut off = 0;
        let groups: [&mut Vec<f64>; 8] = [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ];
        for group in groups {
            for (slot, p) in group.iter_mut().enumerate() {
                let j = off + slot;
                let v = momentum * velocity[j] + grads[j];
                velocity[j] = v;
                *p -= lr * v;
            }
            off += group.len();
        }
    }

    /// Write a "PRB1" checkpoint atomically (parameters as `f32`).
    pub fn save(&self, path: &Path) -> Result<()> {
        fn named(name: &str, dims: &[usize], data: &[f64]) -> (String, Tensor) {
            (
                name.to_string(),
                Tensor::from_data(dims, data.iter().map(|&v| v as f32).collect()),
            )
        }
        let c = self.conv1.out_channels;
        let k = self.conv1.kernel;
        let in_ch = self.conv1.in_channels;
        let hidden = self.fc1.out_features;
        let body = CheckpointBody {
            header: vec![
                in_ch as u32,
                c as u32,
                k as u32,
                self.d_feat as u32,
                self.z_len as u32,
                hidden as u32,
            ],
            seed: self.seed,
            tensors: vec![
                named("conv1.weight", &[c, in_ch, k], &self.conv1.weight),
                named("conv1.bias", &[c], &self.conv1.bias),
                named("conv2.weight", &[c, c, k], &self.conv2.weight),
                named("conv2.bias", &[c], &self.conv2.bias),
                named("fc1.weight", &[hidden, self.d_feat + self.z_len], &self.fc1.weight),
                named("fc1.bias", &[hidden], &self.fc1.bias),
                named("fc2.weight", &[1, hidden], &self.fc2.weight),
                named("fc2.bias", &[1], &self.fc2.bias),
            ],
        };
        write_checkpoint("prober save", path, PROBER_MAGIC, &body)
    }

    /// Load a "PRB1" checkpoint, validating the architecture header and
    /// every tensor shape.
    pub fn load(path: &Path) -> Result<ProberModel> {
        let body = read_checkpoint("prober load", path, PROBER_MAGIC, PROBER_HEADER_FIELDS)?;
        let h: Vec<usize> = body.header.iter().map(|&v| v as usize).collect();
        let (in_ch, c, k, d_feat, z_len, hidden) = (h[0], h[1], h[2], h[3], h[4], h[5]);
        let bad = |reason: String| IconError::CorruptCheckpoint {
            path: path.display().to_string(),
            reason,
        };
        if in_ch == 0 || c == 0 || hidden == 0 || z_len == 0 {
            return Err(bad(format!("architecture header has a zero field: {h:?}")));
        }
        if k == 0 || k % 2 == 0 {
            return Err(bad(format!("kernel width {k} must be odd")));
        }
        if d_feat != c {
            return Err(bad(format!(
                "pooled width {d_feat} must equal conv channels {c} \
                 (one global maximum per channel)"
            )));
        }
        let grab = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
            let t = body.tensor(name, path)?;
            if t.dims != dims {
                return Err(bad(format!(
                    "tensor '{name}': dims {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            Ok(t.data.iter().map(|&v| f64::from(v)).collect())
        };
        Ok(ProberModel {
            conv1: Conv1d {
                in_channels: in_ch,
                out_channels: c,
                kernel: k,
                weight: grab("conv1.weight", &[c, in_ch, k])?,
                bias: grab("conv1.bias", &[c])?,
            },
            conv2: Conv1d {
                in_channels: c,
                out_channels: c,
                kernel: k,
                weight: grab("conv2.weight", &[c, c, k])?,
                bias: grab("conv2.bias", &[c])?,
            },
            fc1: Linear {
                in_features: d_feat + z_len,
                out_features: hidden,
                weight: grab("fc1.weight", &[hidden, d_feat + z_len])?,
                bias: grab("fc1.bias", &[hidden])?,
            },
            fc2: Linear {
                in_features: hidden,
                out_features: 1,
                weight: grab("fc2.weight", &[1, hidden])?,
                bias: grab("fc2.bias", &[1])?,
            },
            d_feat,
            z_len,
            seed: body.seed,
        })
    }
}

// ════════════════════════════════════════════════════════════════════════
// Forward pass
// ════════════════════════════════════════════════════════════════════════

/// Every intermediate the backward pass needs.
struct Cache {
    t_len: usize,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    h2_pre: Vec<f64>,
    h2: Vec<f64>,
    /// First argmax position per pooled channel.
    pool_idx: Vec<usize>,
    /// Pooled maxima followed by the summary vector `z`.
    feat: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc1_out: Vec<f64>,
    logit: f64,
}

/// Circular 1-D convolution over the time axis; `x` is row-major
/// `in_channels × t_len`.
fn conv_circular(conv: &Conv1d, x: &[f64], t_len: usize) -> Vec<f64> {
    let k = conv.kernel;
    let half = k / 2;
    let mut out = vec![0.0f64; conv.out_channels * t_len];
    for co in 0..conv.out_channels {
        for t in 0..t_len {
            let mut acc = conv.bias[co];
            for ci in 0..conv.in_channels {
                let wb = (co * conv.in_channels + ci) * k;
                let xb = ci * t_len;
                for tap in 0..k {
                    let src = (t + tap + t_len * k - half) % t_len;
                    acc += conv.weight[wb + tap] * x[xb + src];
                }
            }
            out[co * t_len + t] = acc;
        }
    }
    out
}

fn relu(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&v| v.max(0.0)).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy straight from the logit:
/// `max(z, 0) − y·z + ln(1 + e^{−|z|})`. Never forms the probability, so
/// it stays finite for any finite logit.
fn bce_from_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - label * logit + (-logit.abs()).exp().ln_1p()
}

fn forward_cached(model: &ProberModel, bundle: &FeatureBundle) -> Result<Cache> {
    if bundle.n_channels != model.conv1.in_channels {
        return Err(IconError::ChannelMismatch {
            expected: model.conv1.in_channels,
            got: bundle.n_channels,
        });
    }
    if bundle.z.len() != model.z_len {
        return Err(IconError::FeatureLenMismatch {
            expected: model.z_len,
            got: bundle.z.len(),
        });
    }
    let t = bundle.t_len;
    let h1_pre = conv_circular(&model.conv1, bundle.channels(), t);
    let h1 = relu(&h1_pre);
    let h2_pre = conv_circular(&model.conv2, &h1, t);
    let h2 = relu(&h2_pre);

    let c = model.conv2.out_channels;
    let mut pool_idx = vec![0usize; c];
    let mut feat = Vec::with_capacity(model.d_feat + model.z_len);
    for ch in 0..c {
        let row = &h2[ch * t..(ch + 1) * t];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        pool_idx[ch] = best;
        feat.push(row[best]);
    }
    feat.extend_from_slice(&bundle.z);

    let feat_len = feat.len();
    let hidden = model.fc1.out_features;
    let mut fc1_pre = vec![0.0f64; hidden];
    for j in 0..hidden {
        let row = &model.fc1.weight[j * feat_len..(j + 1) * feat_len];
        let mut acc = model.fc1.bias[j];
        for (w, v) in row.iter().zip(&feat) {
            acc += w * v;
        }
        fc1_pre[j] = acc;
    }
    let fc1_out = relu(&fc1_pre);
    let mut logit = model.fc2.bias[0];
    for (w, v) in model.fc2.weight.iter().zip(&fc1_out) {
        logit += w * v;
    }
    Ok(Cache {
        t_len: t,
        h1_pre,
        h1,
        h2_pre,
        h2,
        pool_idx,
        feat,
        fc1_pre,
        fc1_out,
        logit,
    })
}

/// Probability that the trace is attacked, clamped into the open interval
/// `(0, 1)` so downstream log-odds never see an exact 0 or 1.
pub fn prober_forward(model: &ProberModel, bundle: &FeatureBundle) -> Result<f64> {
    let cache = forward_cached(model, bundle)?;
    let p = sigmoid(cache.logit);
    Ok(p.max(f64::MIN_POSITIVE).min(1.0 - 0.5 * f64::EPSILON))
}

/// Binary cross-entropy of the model's prediction against `label`
/// (0 benign, 1 attacked).
pub fn prober_loss(model: &ProberModel, bundle: &FeatureBundle, label: u8) -> Result<f64> {
    assert!(label <= 1, "label must be 0 (benign) or 1 (attacked)");
    let cache = forward_cached(model, bundle)?;
    Ok(bce_from_logit(cache.logit, f64::from(label)))
}

// ════════════════════════════════════════════════════════════════════════
// Backward pass
// ════════════════════════════════════════════════════════════════════════

/// Accumulate `dL/dθ` for one sample into `grads` (canonical flat order).
/// `x` is the sample's channel matrix; `cache` must come from a forward
/// pass of `model` on the same sample.
fn accumulate_gradients(
    model: &ProberModel,
    x: &[f64],
    cache: &Cache,
    label: f64,
    grads: &mut [f64],
) {
    let t = cache.t_len;
    let c = model.conv2.out_channels;
    let feat_len = model.d_feat + model.z_len;
    let hidden = model.fc1.out_features;

    let sizes = model.group_sizes();
    let o_c1w = 0;
    let o_c1b = o_c1w + sizes[0];
    let o_c2w = o_c1b + sizes[1];
    let o_c2b = o_c2w + sizes[2];
    let o_f1w = o_c2b + sizes[3];
    let o_f1b = o_f1w + sizes[4];
    let o_f2w = o_f1b + sizes[5];
    let o_f2b = o_f2w + sizes[6];

    // dL/dlogit of the stable cross-entropy.
    let dz = sigmoid(cache.logit) - label;

    // fc2.
    let mut d_fc1out = vec![0.0f64; hidden];
    for j in 0..hidden {
        grads[o_f2w + j] += dz * cache.fc1_out[j];
        d_fc1out[j] = dz * model.fc2.weight[j];
    }
    grads[o_f2b] += dz;

    // fc1, through its ReLU.
    let mut d_concat = vec![0.0f64; feat_len];
    for j in 0..hidden {
        if cache.fc1_pre[j] <= 0.0 {
            continue;
        }
        let dj = d_fc1out[j];
        let row = &model.fc1.weight[j * feat_len..(j + 1) * feat_len];
        for i in 0..feat_len {
            grads[o_f1w + j * feat_len + i] += dj * cache.feat[i];
            d_concat[i] += dj * row[i];
        }
        grads[o_f1b + j] += dj;
    }

    // Max pooling routes each pooled feature's gradient to the first
    // argmax position; the summary part of `feat` is input, not
    // parameters, so its gradient stops here.
    let mut d_h2 = vec![0.0f64; c * t];
    for (ch, &g) in d_concat[..model.d_feat].iter().enumerate() {
        d_h2[ch * t + cache.pool_idx[ch]] = g;
    }
    let mut d_h2pre = d_h2;
    for (dv, &pre) in d_h2pre.iter_mut().zip(&cache.h2_pre) {
        if pre <= 0.0 {
            *dv = 0.0;
        }
    }

    // conv2 (also needs the gradient flowing into h1).
    let mut d_h1 = vec![0.0f64; model.conv2.in_channels * t];
    {
        let (left, right) = grads.split_at_mut(o_c2b);
        conv_backward(
            &model.conv2,
            &cache.h1,
            &d_h2pre,
            t,
            &mut left[o_c2w..],
            &mut right[..sizes[3]],
            Some(&mut d_h1),
        );
    }
    let mut d_h1pre = d_h1;
    for (dv, &pre) in d_h1pre.iter_mut().zip(&cache.h1_pre) {
        if pre <= 0.0 {
            *dv = 0.0;
        }
    }

    // conv1 (the gradient w.r.t. the input channels is not needed).
    {
        let (left, right) = grads.split_at_mut(o_c1b);
        conv_backward(
            &model.conv1,
            x,
            &d_h1pre,
            t,
            &mut left[o_c1w..],
            &mut right[..sizes[1]],
            None,
        );
    }
}

/// Backward pass of [`conv_circular`]: accumulate weight and bias
/// gradients, and optionally the gradient w.r.t. the layer input.
fn conv_backward(
    conv: &Conv1d,
    x: &[f64],
    d_out: &[f64],
    t_len: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    mut d_in: Option<&mut [f64]>,
) {
    let k = conv.kernel;
    let half = k / 2;
    for co in 0..conv.out_channels {
        for t in 0..t_len {
            let g = d_out[co * t_len + t];
            if g == 0.0 {
                continue;
            }
            gb[co] += g;
            let w_row = co * conv.in_channels * k;
            match d_in.as_deref_mut() {
                Some(di) => {
                    for ci in 0..conv.in_channels {
                        let wb = w_row + ci * k;
                        let xb = ci * t_len;
                        for tap in 0..k {
                            let src = xb + (t + tap + t_len * k - half) % t_len;
                            gw[wb + tap] += g * x[src];
                            di[src] += g * conv.weight[wb + tap];
                        }
                    }
                }
                None => {
                    for ci in 0..conv.in_channels {
                        let wb = w_row + ci * k;
                        let xb = ci * t_len;
                        for tap in 0..k {
                            let src = xb + (t + tap + t_len * k - half) % t_len;
                            gw[wb + tap] += g * x[src];
                        }
                    }
                }
            }
        }
    }
}

// ════════════════════════════════════════════════════════════════════════
// Training
// ════════════════════════════════════════════════════════════════════════

/// Labeled feature bundles with a deterministic train/validation split.
///
/// Construction guarantees the set is non-empty, all bundles agree on
/// channel count and summary length, and the training split contains both
/// classes.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Vec<(FeatureBundle, u8)>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    /// Fraction of samples assigned to the training split.
    pub train_fraction: f64,
    /// Seed of the split shuffle.
    pub split_seed: u64,
}

impl LabeledDataset {
    /// Split `samples` into train/validation by a seeded shuffle.
    ///
    /// The training split gets `round(train_fraction · n)` samples,
    /// clamped so both splits stay non-empty. Labels must be 0 (benign)
    /// or 1 (attacked).
    pub fn new(
        samples: Vec<(FeatureBundle, u8)>,
        train_fraction: f64,
        split_seed: u64,
    ) -> Result<Self> {
        assert!(
            train_fraction > 0.0 && train_fraction < 1.0,
            "train_fraction must be in (0, 1)"
        );
        if samples.is_empty() {
            return Err(IconError::EmptyCalibration {
                op: "labeled_dataset",
                which: "samples",
            });
        }
        let (n_ch, z_len) = (samples[0].0.n_channels, samples[0].0.z.len());
        for (bundle, label) in &samples {
            assert!(*label <= 1, "label must be 0 (benign) or 1 (attacked)");
            if bundle.n_channels != n_ch || bundle.z.len() != z_len {
                return Err(IconError::DimensionMismatch {
                    op: "labeled_dataset",
                    left: format!("{n_ch} channels, z length {z_len}"),
                    right: format!(
                        "{} channels, z length {}",
                        bundle.n_channels,
                        bundle.z.len()
                    ),
                });
            }
        }
        let n = samples.len();
        if n < 2 {
            let n_attacked = samples.iter().filter(|(_, y)| *y == 1).count();
            return Err(IconError::SingleClassData {
                n_benign: n - n_attacked,
                n_attacked,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(split_seed));
        let n_train = ((n as f64) * train_fraction).round() as usize;
        let n_train = n_train.clamp(1, n - 1);
        let mut train_idx = order[..n_train].to_vec();
        let mut val_idx = order[n_train..].to_vec();
        train_idx.sort_unstable();
        val_idx.sort_unstable();
        let n_attacked = train_idx.iter().filter(|&&i| samples[i].1 == 1).count();
        let n_benign = n_train - n_attacked;
        if n_benign == 0 || n_attacked == 0 {
            return Err(IconError::SingleClassData {
                n_benign,
                n_attacked,
            });
        }
        Ok(LabeledDataset {
            samples,
            train_idx,
            val_idx,
            train_fraction,
            split_seed,
        })
    }

    /// All samples in input order.
    pub fn samples(&self) -> &[(FeatureBundle, u8)] {
        &self.samples
    }

    /// Training-split indices into [`Self::samples`], ascending.
    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    /// Validation-split indices into [`Self::samples`], ascending.
    pub fn val_indices(&self) -> &[usize] {
        &self.val_idx
    }

    /// (benign, attacked) counts inside the training split.
    pub fn train_class_counts(&self) -> (usize, usize) {
        let attacked = self
            .train_idx
            .iter()
            .filter(|&&i| self.samples[i].1 == 1)
            .count();
        (self.train_idx.len() - attacked, attacked)
    }

    /// Total sample count.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false: construction rejects empty sets.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Optimizer and budget knobs for [`prober_train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Full passes over the training split.
    pub epochs: usize,
    /// Learning rate.
    pub lr: f64,
    /// Classical momentum coefficient.
    pub momentum: f64,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Seeds both weight initialization and the epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainEpoch {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batches.
    pub loss: f64,
    /// Accuracy on the validation split at threshold 0.5.
    pub val_accuracy: f64,
}

/// A trained model together with its per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainedProber {
    pub model: ProberModel,
    pub log: Vec<TrainEpoch>,
}

/// Train a fresh prober on `data` by mini-batch gradient descent with
/// momentum. Deterministic given `cfg.seed`: initialization, shuffles,
/// and ordered gradient accumulation all derive from it.
pub fn prober_train(
    data: &LabeledDataset,
    arch: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<TrainedProber> {
    assert!(cfg.epochs >= 1, "epochs must be at least 1");
    assert!(cfg.batch_size >= 1, "batch size must be at least 1");
    assert!(cfg.lr.is_finite() && cfg.lr > 0.0, "learning rate must be positive");
    assert!(
        (0.0..1.0).contains(&cfg.momentum),
        "momentum must be in [0, 1)"
    );
    let (n_benign, n_attacked) = data.train_class_counts();
    if n_benign == 0 || n_attacked == 0 {
        return Err(IconError::SingleClassData {
            n_benign,
            n_attacked,
        });
    }

    let first = &data.samples()[0].0;
    let mut model = ProberModel::new(first.n_channels, first.z.len(), arch, cfg.seed);
    let n_params = model.parameter_count();
    let mut velocity = vec![0.0f64; n_params];
    let mut batch_grads = vec![0.0f64; n_params];
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order = data.train_indices().to_vec();
        order.shuffle(&mut shuffle_rng);
        let mut total_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            batch_grads.fill(0.0);
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let (bundle, label) = &data.samples()[i];
                let cache = forward_cached(&model, bundle)?;
                batch_loss += bce_from_logit(cache.logit, f64::from(*label));
                accumulate_gradients(
                    &model,
                    bundle.channels(),
                    &cache,
                    f64::from(*label),
                    &mut batch_grads,
                );
            }
            if !batch_loss.is_finite() {
                return Err(IconError::NonFiniteLoss { epoch });
            }
            total_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            for g in batch_grads.iter_mut() {
                *g *= scale;
            }
            model.apply_update(&mut velocity, &batch_grads, cfg.lr, cfg.momentum);
        }
        let loss = total_loss / order.len() as f64;
        if !loss.is_finite() {
            return Err(IconError::NonFiniteLoss { epoch });
        }
        let val_accuracy = validation_accuracy(&model, data)?;
        log.push(TrainEpoch {
            epoch,
            loss,
            val_accuracy,
        });
    }
    Ok(TrainedProber { model, log })
}

/// Fraction of validation samples classified correctly at threshold 0.5
/// (a probability of exactly 0.5 counts as attacked).
fn validation_accuracy(model: &ProberModel, data: &LabeledDataset) -> Result<f64> {
    let mut correct = 0usize;
    for &i in data.val_indices() {
        let (bundle, label) = &data.samples()[i];
        let p = prober_forward(model, bundle)?;
        let predicted = u8::from(p >= 0.5);
        correct += usize::from(predicted == *label);
    }
    Ok(correct as f64 / data.val_indices().len() as f64)
}

// ════════════════════════════════════════════════════════════════════════
// Gradient check
// ════════════════════════════════════════════════════════════════════════

/// Compare the analytic gradient of the loss against central finite
/// differences for every parameter; returns the maximum relative error
/// `|g_a − g_n| / max(1e-8, |g_a| + |g_n|)`.
pub fn gradient_check(
    model: &ProberModel,
    bundle: &FeatureBundle,
    label: u8,
    step: f64,
) -> Result<f64> {
    if !(step.is_finite() && step > 0.0) {
        return Err(IconError::InvalidStep { step });
    }
    assert!(label <= 1, "label must be 0 (benign) or 1 (attacked)");
    let y = f64::from(label);

    let cache = forward_cached(model, bundle)?;
    let n_params = model.parameter_count();
    let mut analytic = vec![0.0f64; n_params];
    accumulate_gradients(model, bundle.channels(), &cache, y, &mut analytic);

    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    for idx in 0..n_params {
        let orig = *probe.param_mut(idx);
        *probe.param_mut(idx) = orig + step;
        let loss_plus = bce_from_logit(forward_cached(&probe, bundle)?.logit, y);
        *probe.param_mut(idx) = orig - step;
        let loss_minus = bce_from_logit(forward_cached(&probe, bundle)?.logit, y);
        *probe.param_mut(idx) = orig;
        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let exact = analytic[idx];
        if !exact.is_finite() || !numeric.is_finite() {
            return Err(IconError::NonFiniteGradient {
                name: probe.param_name(idx),
            });
        }
        let rel = (exact - numeric).abs() / 1e-8f64.max(exact.abs() + numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

// ════════════════════════════════════════════════════════════════════════
// Tests
// ════════════════════════════════════════════════════════════════════════
