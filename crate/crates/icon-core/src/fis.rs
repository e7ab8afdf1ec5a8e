//! Generation-normalized token entropy and Focus Intensity Scores.
//!
//! For an attention row `a` renormalized over `N` context tokens, the
//! generation-normalized token entropy is
//!
//! ```text
//! E = −(1/ln N) · Σ_j a_j · ln(a_j + ε)
//! ```
//!
//! with terms at `a_j = 0` contributing exactly zero and the result clamped
//! to `[0, 1]` (the `+ε` inside the logarithm can push the raw value past
//! either end by ~`ε·N/ln N`). A uniform row scores 1, a one-hot row scores
//! 0, and the normalization by `ln N` makes rows of different widths
//! comparable and the score independent of the logarithm base.
//!
//! The Focus Intensity Score of a head is the complement of its mean
//! entropy over the generated tokens, `S_{l,h} = 1 − mean_i E(l,h,i)`, and
//! the layer aggregate `S_l` is the mean over that layer's heads. A high
//! score means the head's attention collapsed onto few context tokens —
//! the signature this crate probes for and steers against.

use crate::error::{IconError, Result};
use crate::tinylm::AttentionTrace;

/// Entropy stabilizer used whenever no override is supplied.
pub const DEFAULT_EPSILON: f64 = 1e-10;

/// Largest accepted stabilizer; anything bigger would visibly distort the
/// uniform-row and one-hot anchors.
const MAX_EPSILON: f64 = 1e-3;

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= MAX_EPSILON) {
        return Err(IconError::InvalidEpsilon { epsilon });
    }
    Ok(())
}

/// Normalized entropy of one attention row.
///
/// `row` must be a probability vector: length ≥ 2, entries in `[0, 1]`,
/// summing to 1 within 1e-6. `epsilon` must lie in `(0, 1e-3]`.
pub fn token_entropy(row: &[f64], epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    let n = row.len();
    if n < 2 {
        return Err(IconError::RowTooShort { n });
    }
    let mut sum = 0.0f64;
    for (j, &a) in row.iter().enumerate() {
        if !a.is_finite() || a < -1e-9 || a > 1.0 + 1e-6 {
            return Err(IconError::RowNotStochastic {
                reason: format!("entry {j} = {a} outside [0, 1]"),
            });
        }
        sum += a;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(IconError::RowNotStochastic {
            reason: format!("entries sum to {sum}"),
        });
    }
    let mut acc = 0.0f64;
    for &a in row {
        if a > 0.0 {
            acc += a * (a + epsilon).ln();
        }
    }
    Ok((-acc / (n as f64).ln()).clamp(0.0, 1.0))
}

// ════════════════════════════════════════════════════════════════════════
// Entropy tensor
// ════════════════════════════════════════════════════════════════════════

/// Per-(layer, head) entropy series over the generated tokens of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTensor {
    pub n_layers: usize,
    pub n_heads: usize,
    pub gen_len: usize,
    /// Stabilizer the entropies were computed with.
    pub epsilon: f64,
    /// Flattened values: `(l·H + h)·N_Y + i`.
    values: Vec<f64>,
}

impl EntropyTensor {
    /// Build a tensor from pre-computed values (flattened `(l·H + h)·N_Y + i`).
    ///
    /// Panics if the value count does not match the dimensions.
    pub fn from_values(
        n_layers: usize,
        n_heads: usize,
        gen_len: usize,
        epsilon: f64,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(
            values.len(),
            n_layers * n_heads * gen_len,
            "value count must match n_layers x n_heads x gen_len"
        );
        EntropyTensor {
            n_layers,
            n_heads,
            gen_len,
            epsilon,
            values,
        }
    }

    #[inline]
    fn series_start(&self, layer: usize, head: usize) -> usize {
        (layer * self.n_heads + head) * self.gen_len
    }

    /// Entropy series `E(l, h, ·)`, one entry per generated token.
    pub fn series(&self, layer: usize, head: usize) -> &[f64] {
        let s = self.series_start(layer, head);
        &self.values[s..s + self.gen_len]
    }

    /// Entropy of generated token `i` under head `(layer, head)`.
    pub fn at(&self, layer: usize, head: usize, i: usize) -> f64 {
        self.values[self.series_start(layer, head) + i]
    }
}

/// Compute the entropy of every recorded attention row of `trace`.
pub fn entropy_tensor(trace: &AttentionTrace, epsilon: f64) -> Result<EntropyTensor> {
    check_epsilon(epsilon)?;
    let mut values = Vec::with_capacity(trace.n_layers * trace.n_heads * trace.gen_len);
    let mut row64 = vec![0.0f64; trace.context_len];
    for l in 0..trace.n_layers {
        for h in 0..trace.n_heads {
            for i in 0..trace.gen_len {
                for (d, &s) in row64.iter_mut().zip(trace.row(l, h, i)) {
                    *d = f64::from(s);
                }
                values.push(token_entropy(&row64, epsilon)?);
            }
        }
    }
    Ok(EntropyTensor {
        n_layers: trace.n_layers,
        n_heads: trace.n_heads,
        gen_len: trace.gen_len,
        epsilon,
        values,
    })
}

// ════════════════════════════════════════════════════════════════════════
// Focus Intensity Scores
// ════════════════════════════════════════════════════════════════════════

/// Per-head and per-layer Focus Intensity Scores derived from one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FisReport {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Flattened `S_{l,h}`: `l·H + h`.
    head_scores: Vec<f64>,
    /// `S_l`, one per layer.
    layer_scores: Vec<f64>,
}

impl FisReport {
    /// `S_{l,h}` — one minus the head's mean entropy over generated tokens.
    pub fn head_score(&self, layer: usize, head: usize) -> f64 {
        self.head_scores[layer * self.n_heads + head]
    }

    /// `S_l` — mean of the layer's head scores.
    pub fn layer_score(&self, layer: usize) -> f64 {
        self.layer_scores[layer]
    }

    /// All head scores, flattened `l·H + h`.
    pub fn head_scores(&self) -> &[f64] {
        &self.head_scores
    }

    /// All layer scores, indexed by layer.
    pub fn layer_scores(&self) -> &[f64] {
        &self.layer_scores
    }
}

/// Reduce an entropy tensor to Focus Intensity Scores.
pub fn fis_report(et: &EntropyTensor) -> Result<FisReport> {
    if et.n_layers == 0 || et.n_heads == 0 || et.gen_len == 0 {
        return Err(IconError::EmptySeries { op: "fis_report" });
    }
    let mut head_scores = Vec::with_capacity(et.n_layers * et.n_heads);
    let mut layer_scores = Vec::with_capacity(et.n_layers);
    for l in 0..et.n_layers {
        let mut layer_acc = 0.0f64;
        for h in 0..et.n_heads {
            let series = et.series(l, h);
            let mean = series.iter().sum::<f64>() / series.len() as f64;
            let s = 1.0 - mean;
            head_scores.push(s);
            layer_acc += s;
        }
        layer_scores.push(layer_acc / et.n_heads as f64);
    }
    Ok(FisReport {
        n_layers: et.n_layers,
        n_heads: et.n_heads,
        head_scores,
        layer_scores,
    })
}

/// Validate that two calibration report sets are non-empty and agree on
/// shape; returns the common `(n_layers, n_heads)`.
pub(crate) fn check_report_shapes(
    op: &'static str,
    benign: &[FisReport],
    attacked: &[FisReport],
) -> Result<(usize, usize)> {
    if benign.is_empty() {
        return Err(IconError::EmptyCalibration {
            op,
            which: "benign reports",
        });
    }
    if attacked.is_empty() {
        return Err(IconError::EmptyCalibration {
            op,
            which: "attacked reports",
        });
    }
    let (nl, nh) = (benign[0].n_layers, benign[0].n_heads);
    for r in benign.iter().chain(attacked) {
        if r.n_layers != nl || r.n_heads != nh {
            return Err(IconError::CalibrationShapeMismatch {
                op,
                reason: format!(
                    "{nl} layers x {nh} heads vs {} layers x {} heads",
                    r.n_layers, r.n_heads
                ),
            });
        }
    }
    Ok((nl, nh))
}

// ════════════════════════════════════════════════════════════════════════
// Tests
// ════════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::tests::{small_config, small_plant};
    use crate::tinylm::{self, AttentionTrace};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn uniform_rows_score_one() {
        for n in [2usize, 4, 17, 64] {
            let row = vec![1.0 / n as f64; n];
            let e = token_entropy(&row, DEFAULT_EPSILON).unwrap();
            assert_abs_diff_eq!(e, 1.0, epsilon = 1e-6);
            assert!(e <= 1.0, "clamp must hold at the top: {e}");
        }
    }

    #[test]
    fn one_hot_rows_score_zero() {
        for hot in 0..4 {
            let mut row = vec![0.0; 4];
            row[hot] = 1.0;
            let e = token_entropy(&row, DEFAULT_EPSILON).unwrap();
            assert_abs_diff_eq!(e, 0.0, epsilon = 1e-6);
            assert!(e >= 0.0, "clamp must hold at the bottom: {e}");
        }
    }

    #[test]
    fn half_half_row_matches_arithmetic_oracle() {
        // Two equal halves over four slots: ln 2 / ln 4 = 1/2 exactly.
        let e = token_entropy(&[0.5, 0.5, 0.0, 0.0], DEFAULT_EPSILON).unwrap();
        assert_abs_diff_eq!(e, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(e, 2f64.ln() / 4f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn zero_entries_contribute_exactly_zero() {
        // Identical mass split, padded with zeros: only the normalizer may
        // change, so E_4 = E_2 · (ln 2 / ln 4).
        let e2 = token_entropy(&[0.3, 0.7], DEFAULT_EPSILON).unwrap();
        let e4 = token_entropy(&[0.3, 0.7, 0.0, 0.0], DEFAULT_EPSILON).unwrap();
        assert_abs_diff_eq!(e4, e2 * (2f64.ln() / 4f64.ln()), epsilon = 1e-12);

        // Direct check against the two-term sum with the same arithmetic.
        let manual = -(0.3f64 * (0.3f64 + DEFAULT_EPSILON).ln()
            + 0.7 * (0.7f64 + DEFAULT_EPSILON).ln())
            / 4f64.ln();
        assert_abs_diff_eq!(e4, manual, epsilon = 1e-15);
    }

    #[test]
    fn rejects_short_rows() {
        assert!(matches!(
            token_entropy(&[], DEFAULT_EPSILON),
            Err(IconError::RowTooShort { n: 0 })
        ));
        assert!(matches!(
            token_entropy(&[1.0], DEFAULT_EPSILON),
            Err(IconError::RowTooShort { n: 1 })
        ));
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        for row in [
            vec![0.6, 0.6],                // sum 1.2
            vec![0.55, 0.4449],            // sum off by 1e-4
            vec![-0.2, 1.2],               // negative entry
            vec![f64::NAN, 1.0],           // non-finite
            vec![0.5, f64::INFINITY],      // non-finite
            vec![1.5, -0.5 + 1e-12, 0.0],  // entry above one
        ] {
            assert!(
                matches!(
                    token_entropy(&row, DEFAULT_EPSILON),
                    Err(IconError::RowNotStochastic { .. })
                ),
                "row {row:?} should be rejected"
            );
        }
    }

    #[test]
    fn rejects_bad_epsilon() {
        for eps in [0.0, -1e-10, f64::NAN, f64::INFINITY, 2e-3, 1.0] {
            assert!(matches!(
                token_entropy(&[0.5, 0.5], eps),
                Err(IconError::InvalidEpsilon { .. })
            ));
        }
        assert!(token_entropy(&[0.5, 0.5], MAX_EPSILON).is_ok());
    }

    /// Independent reimplementation: base-2 logarithms and reversed
    /// summation order, relying on base-invariance of the normalized form.
    fn oracle_entropy_log2(row: &[f64], epsilon: f64) -> f64 {
        let mut acc = 0.0f64;
        for &a in row.iter().rev() {
            if a != 0.0 {
                acc -= a * (a + epsilon).log2();
            }
        }
        (acc / (row.len() as f64).log2()).clamp(0.0, 1.0)
    }

    #[test]
    fn matches_naive_oracle_on_random_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(0xF15);
        for trial in 0..1000 {
            let n = rng.random_range(2..=64usize);
            let mut row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            if trial % 3 == 0 {
                // Mix in hard zeros to exercise the zero-contribution rule.
                for a in row.iter_mut() {
                    if rng.random::<f64>() < 0.5 {
                        *a = 0.0;
                    }
                }
                if row.iter().all(|&a| a == 0.0) {
                    row[0] = 1.0;
                }
            }
            let sum: f64 = row.iter().sum();
            for a in row.iter_mut() {
                *a /= sum;
            }
            let e = token_entropy(&row, DEFAULT_EPSILON).unwrap();
            let o = oracle_entropy_log2(&row, DEFAULT_EPSILON);
            assert!(
                (e - o).abs() < 1e-9,
                "trial {trial}: {e} vs oracle {o} on n = {n}"
            );
            assert!((0.0..=1.0).contains(&e));
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance(
            raw in proptest::collection::vec(1e-6f64..1.0, 2..32),
            seed: u64,
        ) {
            let sum: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|a| a / sum).collect();
            let mut shuffled = row.clone();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.swap(i, j);
            }
            let e = token_entropy(&row, DEFAULT_EPSILON).unwrap();
            let p = token_entropy(&shuffled, DEFAULT_EPSILON).unwrap();
            prop_assert!((e - p).abs() < 1e-12, "{e} vs {p}");
        }

        #[test]
        fn concentration_never_increases_entropy(
            raw in proptest::collection::vec(1e-6f64..1.0, 3..24),
            a in any::<prop::sample::Index>(),
            b in any::<prop::sample::Index>(),
            frac in 0.0f64..=1.0,
        ) {
            let sum: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let (i, j) = (a.index(row.len()), b.index(row.len()));
            prop_assume!(i != j);
            // Move mass from the smaller entry onto the larger one.
            let (donor, receiver) = if row[i] <= row[j] { (i, j) } else { (j, i) };
            let delta = frac * row[donor];
            let mut concentrated = row.clone();
            concentrated[donor] -= delta;
            concentrated[receiver] += delta;
            let before = token_entropy(&row, DEFAULT_EPSILON).unwrap();
            let after = token_entropy(&concentrated, DEFAULT_EPSILON).unwrap();
            prop_assert!(
                after <= before + 1e-12,
                "entropy rose under concentration: {before} -> {after}"
            );
        }
    }

    fn uniform_trace(n_layers: usize, n_heads: usize, gen_len: usize, n: usize) -> AttentionTrace {
        let context: Vec<u32> = (0..n as u32).collect();
        let mut trace = AttentionTrace::new(n_layers, n_heads, gen_len, context);
        trace.generated_tokens = vec![0; gen_len];
        for l in 0..n_layers {
            for h in 0..n_heads {
                for i in 0..gen_len {
                    trace.row_mut(l, h, i).fill(1.0 / n as f32);
                }
            }
        }
        trace
    }

    #[test]
    fn all_uniform_trace_scores_one_everywhere() {
        let trace = uniform_trace(2, 3, 4, 10);
        let et = entropy_tensor(&trace, DEFAULT_EPSILON).unwrap();
        for l in 0..2 {
            for h in 0..3 {
                assert_eq!(et.series(l, h).len(), 4);
                for i in 0..4 {
                    assert_abs_diff_eq!(et.at(l, h, i), 1.0, epsilon = 1e-6);
                }
            }
        }
        // Complement: every FIS score collapses to zero.
        let report = fis_report(&et).unwrap();
        for l in 0..2 {
            assert_abs_diff_eq!(report.layer_score(l), 0.0, epsilon = 1e-6);
            for h in 0..3 {
                assert_abs_diff_eq!(report.head_score(l, h), 0.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn tensor_matches_per_row_entropy_on_real_trace() {
        let model = tinylm::build_model(small_config(11), Some(small_plant())).unwrap();
        let ctx = tinylm::tests::toy_context(true);
        let (_, trace) = model.generate(&ctx, 4, None).unwrap();
        let et = entropy_tensor(&trace, DEFAULT_EPSILON).unwrap();
        assert_eq!(
            (et.n_layers, et.n_heads, et.gen_len),
            (trace.n_layers, trace.n_heads, trace.gen_len)
        );
        let mut row64 = vec![0.0f64; trace.context_len];
        for l in 0..trace.n_layers {
            for h in 0..trace.n_heads {
                for i in 0..trace.gen_len {
                    for (d, &s) in row64.iter_mut().zip(trace.row(l, h, i)) {
                        *d = f64::from(s);
                    }
                    let expect = token_entropy(&row64, DEFAULT_EPSILON).unwrap();
                    assert_eq!(et.at(l, h, i), expect);
                    assert!((0.0..=1.0).contains(&et.at(l, h, i)));
                }
            }
        }
    }

    #[test]
    fn attack_drops_minimum_entropy_at_planted_head() {
        // Same context length on both sides so the ln N normalizer matches;
        // only the observation span differs (trigger block vs filler).
        let plant = small_plant();
        let model = tinylm::build_model(small_config(11), Some(plant.clone())).unwrap();
        let mut benign = tinylm::tests::toy_context(false);
        benign.extend([26, 27, 28, 29]);
        let attacked_ctx = tinylm::tests::toy_context(true);
        assert_eq!(benign.len(), attacked_ctx.len());

        let (_, tb) = model.generate(&benign, 4, None).unwrap();
        let (_, ta) = model.generate(&attacked_ctx, 4, None).unwrap();
        let eb = entropy_tensor(&tb, DEFAULT_EPSILON).unwrap();
        let ea = entropy_tensor(&ta, DEFAULT_EPSILON).unwrap();

        let min = |et: &EntropyTensor| {
            et.series(plant.target_layer, plant.target_head)
                .iter()
                .fold(f64::INFINITY, |m, &v| m.min(v))
        };
        assert!(
            min(&ea) < min(&eb),
            "attacked min {} should undercut benign min {}",
            min(&ea),
            min(&eb)
        );
    }

    #[test]
    fn single_step_trace_yields_singleton_series() {
        let model = tinylm::build_model(small_config(3), None).unwrap();
        let (_, trace) = model
            .generate(&tinylm::tests::toy_context(false), 1, None)
            .unwrap();
        let et = entropy_tensor(&trace, DEFAULT_EPSILON).unwrap();
        assert_eq!(et.gen_len, 1);
        assert_eq!(et.series(0, 0).len(), 1);
    }

    #[test]
    fn report_is_complement_of_mean_entropy() {
        // Arithmetic oracle: mean(0.2, 0.4, 0.6) = 0.4, so S = 1 − 0.4 = 0.6.
        let et = EntropyTensor::from_values(1, 1, 3, DEFAULT_EPSILON, vec![0.2, 0.4, 0.6]);
        let report = fis_report(&et).unwrap();
        assert_abs_diff_eq!(report.head_score(0, 0), 0.6, epsilon = 1e-9);
        // One head per layer: the layer aggregate is that head's score.
        assert_abs_diff_eq!(report.layer_score(0), 0.6, epsilon = 1e-9);
    }

    #[test]
    fn report_identities_hold_on_multi_head_tensor() {
        let values = vec![
            // layer 0, head 0 | head 1
            0.1, 0.3, /* | */ 0.8, 0.6, //
            // layer 1, head 0 | head 1
            0.5, 0.5, /* | */ 0.0, 1.0, //
        ];
        let et = EntropyTensor::from_values(2, 2, 2, DEFAULT_EPSILON, values);
        let report = fis_report(&et).unwrap();
        for l in 0..2 {
            let mut acc = 0.0;
            for h in 0..2 {
                let series = et.series(l, h);
                let mean = series.iter().sum::<f64>() / series.len() as f64;
                assert_abs_diff_eq!(report.head_score(l, h), 1.0 - mean, epsilon = 1e-9);
                assert!((0.0..=1.0).contains(&report.head_score(l, h)));
                acc += report.head_score(l, h);
            }
            assert_abs_diff_eq!(report.layer_score(l), acc / 2.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(report.head_score(0, 0), 0.8, epsilon = 1e-9);
        assert_abs_diff_eq!(report.head_score(0, 1), 0.3, epsilon = 1e-9);
        assert_abs_diff_eq!(report.layer_score(0), 0.55, epsilon = 1e-9);
        assert_abs_diff_eq!(report.layer_score(1), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn report_rejects_empty_tensor() {
        let et = EntropyTensor::from_values(1, 1, 0, DEFAULT_EPSILON, vec![]);
        assert!(matches!(
            fis_report(&et),
            Err(IconError::EmptySeries { op: "fis_report" })
        ));
        let et = EntropyTensor::from_values(1, 0, 3, DEFAULT_EPSILON, vec![]);
        assert!(matches!(fis_report(&et), Err(IconError::EmptySeries { .. })));
    }

    #[test]
    fn shape_check_demands_matching_nonempty_reports() {
        let mk = |nl: usize, nh: usize| {
            let et =
                EntropyTensor::from_values(nl, nh, 1, DEFAULT_EPSILON, vec![0.5; nl * nh]);
            fis_report(&et).unwrap()
        };
        let a = mk(2, 3);
        let b = mk(2, 3);
        assert_eq!(
            check_report_shapes("op", &[a.clone()], &[b.clone()]).unwrap(),
            (2, 3)
        );
        assert!(matches!(
            check_report_shapes("op", &[], &[b.clone()]),
            Err(IconError::EmptyCalibration {
                which: "benign reports",
                ..
            })
        ));
        assert!(matches!(
            check_report_shapes("op", &[a.clone()], &[]),
            Err(IconError::EmptyCalibration {
                which: "attacked reports",
                ..
            })
        ));
        let odd = mk(2, 4);
        assert!(matches!(
            check_report_shapes("op", &[a], &[b, odd]),
            Err(IconError::CalibrationShapeMismatch { .. })
        ));
    }
}
