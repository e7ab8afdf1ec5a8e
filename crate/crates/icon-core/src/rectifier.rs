//! The mitigating rectifier: anomalous-head selection, per-row percentile
//! thresholds, steering masks, and γ-scaled suppression with renormalization.
//!
//! The row-level pipeline is
//!
//! ```text
//! θ = k-th largest entry of the row, k = ⌈τ·n⌉          (row_threshold)
//! M_j = 1  iff  a_j ≥ θ                                  (steering_mask)
//! ã_j = a_j · (1 + M_j·(γ − 1)),  then  ã ← ã / Σ ã      (apply_steering)
//! ```
//!
//! With γ < 1 the masked (largest) entries shrink and renormalization hands
//! their mass to the unmasked remainder — the redistribution that pulls an
//! over-focused head back toward the rest of the context. γ = 1 and τ = 0
//! are exact identities.

use crate::error::{IconError, Result};
use crate::fis::FisReport;

/// A steering intervention: which heads, how much of each row (τ), and how
/// hard to suppress (γ).
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    /// (layer, head) pairs under intervention, sorted ascending.
    pub heads: Vec<(usize, usize)>,
    /// Fraction of the largest entries per row placed under the mask, in [0, 1].
    pub tau: f64,
    /// Multiplicative coefficient on masked entries; γ < 1 suppresses.
    pub gamma: f64,
    /// Steer the context-processing queries too, not only the queries that
    /// produce generated tokens. Off by default.
    pub apply_during_prefill: bool,
}

impl SteeringPlan {
    /// Plan over the given heads with default prefill behavior (off).
    pub fn new(mut heads: Vec<(usize, usize)>, tau: f64, gamma: f64) -> Self {
        heads.sort_unstable();
        heads.dedup();
        SteeringPlan {
            heads,
            tau,
            gamma,
            apply_during_prefill: false,
        }
    }

    /// Check ranges: τ ∈ [0, 1], γ > 0 finite, head indices within bounds.
    pub fn validate(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        check_tau(self.tau)?;
        check_gamma(self.gamma)?;
        for &(l, h) in &self.heads {
            if l >= n_layers || h >= n_heads {
                return Err(IconError::PlanHeadOutOfRange {
                    layer: l,
                    head: h,
                    n_layers,
                    n_heads,
                });
            }
        }
        Ok(())
    }

    /// True when the plan provably changes nothing (γ = 1, τ = 0, or no heads).
    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0 || self.tau == 0.0 || self.heads.is_empty()
    }

    /// True when (layer, head) is under intervention.
    pub fn targets(&self, layer: usize, head: usize) -> bool {
        self.heads.binary_search(&(layer, head)).is_ok()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) || tau.is_nan() {
        return Err(IconError::InvalidTau { tau });
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(IconError::InvalidGamma { gamma });
    }
    Ok(())
}

/// Pick the `m` heads with the largest FIS gap (attacked − benign) within
/// each selected layer; ties go to the lower head index.
///
/// `benign` and `attacked` are calibration reports from known-benign and
/// known-compromised runs; the gap localizes the heads that over-focus only
/// under attack.
pub fn select_adv_heads(
    benign: &[FisReport],
    attacked: &[FisReport],
    selected_layers: &[usize],
    m: usize,
) -> Result<Vec<(usize, usize)>> {
    let (n_layers, n_heads) = crate::fis::check_report_shapes("select_adv_heads", benign, attacked)?;
    if m == 0 || m > n_heads {
        return Err(IconError::MOutOfRange { m, h_max: n_heads });
    }
    for &l in selected_layers {
        if l >= n_layers {
            return Err(IconError::LayerOutOfRange {
                layer: l,
                n_layers,
            });
        }
    }

    let mut out = Vec::with_capacity(selected_layers.len() * m);
    for &l in selected_layers {
        // Mean head-level FIS gap across the calibration sets.
        let mut gaps: Vec<(usize, f64)> = (0..n_heads)
            .map(|h| {
                let mean_att: f64 =
                    attacked.iter().map(|r| r.head_score(l, h)).sum::<f64>() / attacked.len() as f64;
                let mean_ben: f64 =
                    benign.iter().map(|r| r.head_score(l, h)).sum::<f64>() / benign.len() as f64;
                (h, mean_att - mean_ben)
            })
            .collect();
        // Largest gap first; equal gaps keep the lower head index first.
        gaps.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut chosen: Vec<usize> = gaps[..m].iter().map(|&(h, _)| h).collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|h| (l, h)));
    }
    out.sort_unstable();
    Ok(out)
}

/// The per-row steering threshold: the k-th largest entry with k = ⌈τ·n⌉.
///
/// τ = 0 gives k = 0 and θ = +∞ (nothing masked); τ = 1 gives k = n and
/// θ = min(row) (everything masked). The ⌈·⌉ is computed with a small guard
/// so that products like 0.1 × 50 land on the intended k = 5 despite binary
/// rounding.
pub fn row_threshold(row: &[f64], tau: f64) -> Result<f64> {
    if row.is_empty() {
        return Err(IconError::EmptyRow);
    }
    check_tau(tau)?;
    let k = ceil_tau_n(tau, row.len());
    if k == 0 {
        return Ok(f64::INFINITY);
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted[k - 1])
}

/// ⌈τ·n⌉ with a guard against binary-rounding overshoot, clamped to [0, n].
pub(crate) fn ceil_tau_n(tau: f64, n: usize) -> usize {
    let t = tau * n as f64;
    let k = (t - 1e-9).ceil();
    (k.max(0.0) as usize).min(n)
}

/// The steering mask: `M_j = 1` iff `a_j ≥ θ`.
///
/// Every entry tied with θ is masked, so under exact ties the mask may hold
/// more than ⌈τ·n⌉ entries.
pub fn steering_mask(row: &[f64], theta: f64) -> Vec<bool> {
    row.iter().map(|&a| a >= theta).collect()
}

/// Apply `ã_j = a_j·(1 + M_j·(γ−1))` and renormalize to a probability row.
///
/// The input must be (approximately) stochastic. Returns the input unchanged
/// when γ = 1 or the mask is empty. Unlike a [`SteeringPlan`], the row-level
/// operation tolerates γ = 0 (hard erasure of the masked entries) — but
/// fails with "steering annihilated row" when that wipes out all of the
/// row's mass.
pub fn apply_steering(row: &[f64], mask: &[bool], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(IconError::InvalidGamma { gamma });
    }
    if row.len() != mask.len() {
        return Err(IconError::DimensionMismatch {
            op: "apply_steering",
            left: format!("row length {}", row.len()),
            right: format!("mask length {}", mask.len()),
        });
    }
    if gamma == 1.0 || mask.iter().all(|&m| !m) {
        return Ok(row.to_vec());
    }
    let mut out: Vec<f64> = row
        .iter()
        .zip(mask)
        .map(|(&a, &m)| if m { a * gamma } else { a })
        .collect();
    let sum: f64 = out.iter().sum();
    if sum <= 0.0 {
        return Err(IconError::AnnihilatedRow);
    }
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Convenience composition: threshold, mask, steer one stochastic row.
pub fn steer_row(row: &[f64], tau: f64, gamma: f64) -> Result<Vec<f64>> {
    let theta = row_threshold(row, tau)?;
    let mask = steering_mask(row, theta);
    apply_steering(row, &mask, gamma)
}

// ════════════════════════════════════════════════════════════════════════
// Tests
// ════════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_row(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        let mut row: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-6).collect();
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        row
    }

    // ── row_threshold ───────────────────────────────────────────────────

    #[test]
    fn threshold_quarter_of_four_is_top_entry() {
        let theta = row_threshold(&[0.1, 0.2, 0.3, 0.4], 0.25).unwrap();
        assert_eq!(theta, 0.4);
    }

    #[test]
    fn threshold_tau_zero_is_infinite() {
        let theta = row_threshold(&[0.1, 0.2, 0.3, 0.4], 0.0).unwrap();
        assert!(theta.is_infinite() && theta > 0.0);
    }

    #[test]
    fn threshold_tau_one_is_min() {
        let theta = row_threshold(&[0.4, 0.1, 0.3, 0.2], 1.0).unwrap();
        assert_eq!(theta, 0.1);
    }

    #[test]
    fn threshold_empty_row_errors() {
        let err = row_threshold(&[], 0.5).unwrap_err();
        assert!(err.to_string().contains("empty row"), "{err}");
    }

    #[test]
    fn threshold_bad_tau_errors() {
        assert!(row_threshold(&[0.5, 0.5], -0.1).is_err());
        assert!(row_threshold(&[0.5, 0.5], 1.1).is_err());
        assert!(row_threshold(&[0.5, 0.5], f64::NAN).is_err());
    }

    #[test]
    fn ceil_tau_n_matches_exact_rational_arithmetic() {
        // Intended k = ⌈p·n/q⌉ computed in integers; the f64 path must agree
        // for every small fraction and row length, including 0.1 × 50.
        for &(p, q) in &[(1u64, 20u64), (1, 10), (1, 5), (1, 4), (2, 5), (1, 2), (3, 4), (1, 1)] {
            let tau = p as f64 / q as f64;
            for n in 1usize..=64 {
                let exact = ((p * n as u64) + q - 1) / q; // ⌈p·n/q⌉
                assert_eq!(
                    ceil_tau_n(tau, n) as u64,
                    exact,
                    "tau = {p}/{q}, n = {n}"
                );
            }
        }
    }

    // ── steering_mask ───────────────────────────────────────────────────

    #[test]
    fn mask_from_threshold_example() {
        let mask = steering_mask(&[0.1, 0.2, 0.3, 0.4], 0.4);
        assert_eq!(mask, vec![false, false, false, true]);
    }

    #[test]
    fn mask_with_infinite_threshold_is_empty() {
        let mask = steering_mask(&[0.1, 0.2, 0.3, 0.4], f64::INFINITY);
        assert_eq!(mask, vec![false; 4]);
    }

    #[test]
    fn mask_tie_inflation_masks_all_tied_entries() {
        let row = [0.25, 0.25, 0.25, 0.25];
        let theta = row_threshold(&row, 0.25).unwrap();
        assert_eq!(theta, 0.25);
        let mask = steering_mask(&row, theta);
        assert_eq!(mask, vec![true; 4]);
    }

    // ── apply_steering ──────────────────────────────────────────────────

    #[test]
    fn steering_worked_example() {
        let out = apply_steering(&[0.1, 0.2, 0.3, 0.4], &[false, false, false, true], 0.5).unwrap();
        let expect = [0.125, 0.25, 0.375, 0.25];
        for (o, e) in out.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(o, e, epsilon = 1e-9);
        }
    }

    #[test]
    fn gamma_one_is_exact_identity() {
        let row = [0.07, 0.13, 0.4, 0.4];
        let out = apply_steering(&row, &[true, true, true, true], 1.0).unwrap();
        assert_eq!(out, row.to_vec());
    }

    #[test]
    fn empty_mask_is_exact_identity() {
        let row = [0.07, 0.13, 0.4, 0.4];
        let out = apply_steering(&row, &[false; 4], 0.3).unwrap();
        assert_eq!(out, row.to_vec());
    }

    #[test]
    fn gamma_zero_full_mask_annihilates() {
        let err = apply_steering(&[0.5, 0.5, 0.0], &[true, true, false], 0.0).unwrap_err();
        assert!(
            err.to_string().contains("steering annihilated row"),
            "{err}"
        );
        assert!(matches!(err, IconError::AnnihilatedRow));
        // γ = 0 with surviving unmasked mass is legal at the row level.
        let out = apply_steering(&[0.5, 0.25, 0.25], &[true, false, false], 0.0).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 0.5]);
        // Negative or non-finite γ is rejected outright.
        assert!(apply_steering(&[1.0], &[true], -0.5).is_err());
        assert!(apply_steering(&[1.0], &[true], f64::NAN).is_err());
    }

    #[test]
    fn zero_mass_remainder_annihilates_for_tiny_gamma() {
        // All mass masked and scaled to exact zero by underflow-free logic
        // is impossible with γ > 0, but a row whose unmasked entries are all
        // zero still renormalizes fine because masked mass survives.
        let out = apply_steering(&[0.5, 0.5, 0.0], &[true, true, false], 0.5).unwrap();
        assert_abs_diff_eq!(out.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn mask_len_mismatch_errors() {
        assert!(apply_steering(&[1.0], &[true, false], 0.5).is_err());
    }

    #[test]
    fn output_is_stochastic_and_suppression_is_directional() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for _ in 0..200 {
            let n = rng.random_range(2..40);
            let row = random_row(&mut rng, n);
            let tau = rng.random_range(0.05..1.0);
            let gamma = rng.random_range(0.05..0.95);
            let theta = row_threshold(&row, tau).unwrap();
            let mask = steering_mask(&row, theta);
            let out = apply_steering(&row, &mask, gamma).unwrap();

            let sum: f64 = out.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(out.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));

            // γ < 1: masked shares never grow, unmasked shares never shrink.
            for j in 0..n {
                if mask[j] {
                    assert!(out[j] <= row[j] + 1e-12);
                } else {
                    assert!(out[j] >= row[j] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_1000_rows() {
        // Naive reimplementation: sort-descending percentile, comparison
        // mask, scale, renormalize — written independently of the kernels.
        fn oracle(row: &[f64], tau: f64, gamma: f64) -> Vec<f64> {
            let n = row.len();
            let mut k = 0usize;
            while (k as f64) < tau * n as f64 - 1e-9 {
                k += 1;
            }
            if k == 0 {
                return row.to_vec();
            }
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let theta = sorted[k - 1];
            let scaled: Vec<f64> = row
                .iter()
                .map(|&a| if a >= theta { a * gamma } else { a })
                .collect();
            let s: f64 = scaled.iter().sum();
            scaled.iter().map(|&v| v / s).collect()
        }

        let mut rng = ChaCha20Rng::seed_from_u64(97);
        for _ in 0..1000 {
            let n = rng.random_range(2..48);
            let row = random_row(&mut rng, n);
            let tau = rng.random_range(0.0..=1.0);
            let gamma = rng.random_range(0.05..1.5);
            let ours = steer_row(&row, tau, gamma).unwrap();
            let theirs = oracle(&row, tau, gamma);
            for (a, b) in ours.iter().zip(theirs.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    // ── SteeringPlan ────────────────────────────────────────────────────

    #[test]
    fn plan_validation_catches_out_of_range_heads() {
        let plan = SteeringPlan::new(vec![(5, 3)], 0.1, 0.3);
        assert!(plan.validate(6, 4).is_ok());
        assert!(plan.validate(5, 4).is_err());
        assert!(plan.validate(6, 3).is_err());
    }

    #[test]
    fn plan_identity_detection() {
        assert!(SteeringPlan::new(vec![(0, 0)], 0.1, 1.0).is_identity());
        assert!(SteeringPlan::new(vec![(0, 0)], 0.0, 0.3).is_identity());
        assert!(SteeringPlan::new(vec![], 0.1, 0.3).is_identity());
        assert!(!SteeringPlan::new(vec![(0, 0)], 0.1, 0.3).is_identity());
    }

    #[test]
    fn plan_sorts_and_dedups_heads() {
        let plan = SteeringPlan::new(vec![(2, 1), (0, 3), (2, 1)], 0.1, 0.3);
        assert_eq!(plan.heads, vec![(0, 3), (2, 1)]);
        assert!(plan.targets(2, 1));
        assert!(!plan.targets(1, 1));
    }

    // ── scope widening ──────────────────────────────────────────────────

    #[test]
    fn wider_scope_returns_masked_dominant_entry_toward_identity() {
        // Renormalization arithmetic: once the dominant entry is masked,
        // masking additional mass shrinks the normalizer, so the dominant
        // entry's steered share climbs back toward its unsteered value
        // (reaching it exactly at τ = 1, where scaling hits every entry).
        let mut row = vec![0.01; 30];
        row[4] = 0.3;
        row[9] = 0.2;
        row[17] = 0.24;
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        let gamma = 0.3;
        let shares: Vec<f64> = [0.05, 0.1, 0.2, 0.4, 1.0]
            .iter()
            .map(|&tau| steer_row(&row, tau, gamma).unwrap()[4])
            .collect();
        for pair in shares.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12, "shares {shares:?}");
        }
        assert!(shares[0] < row[4]);
        assert_abs_diff_eq!(shares[4], row[4], epsilon = 1e-12);
    }

    #[test]
    fn wider_scope_raises_steered_trigger_share_on_attacked_traces() {
        let plant = tinylm::tests::small_plant();
        let model =
            tinylm::build_model(tinylm::tests::small_config(11), Some(plant)).unwrap();
        let ctx = tinylm::tests::toy_context(true);
        let trig_at = ctx
            .iter()
            .position(|&t| t == tinylm::DEFAULT_TRIGGER_TOKEN)
            .unwrap();
        let trig_share = |plan: Option<&SteeringPlan>| -> f64 {
            let (_, tr) = model.generate(&ctx, 3, plan).unwrap();
            f64::from(tr.row(plant.target_layer, plant.target_head, 0)[trig_at])
        };
        let unsteered = trig_share(None);
        let shares: Vec<f64> = [0.05, 0.1, 0.2, 0.4]
            .iter()
            .map(|&tau| {
                let plan =
                    SteeringPlan::new(vec![(plant.target_layer, plant.target_head)], tau, 0.3);
                trig_share(Some(&plan))
            })
            .collect();
        for pair in shares.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "shares {shares:?}");
        }
        for &s in &shares {
            assert!(s < unsteered, "steering must suppress: {s} vs {unsteered}");
        }
    }

    // ── select_adv_heads ────────────────────────────────────────────────

    use crate::fis::{entropy_tensor, fis_report, DEFAULT_EPSILON};
    use crate::tinylm::{self, TinyTransformer};

    fn calibration_reports(
        model: &TinyTransformer,
        with_trigger: bool,
        n: usize,
    ) -> Vec<FisReport> {
        (0..n)
            .map(|i| {
                let mut ctx = tinylm::tests::toy_context(with_trigger);
                ctx.push(12 + (i as u32 % 20));
                let (_, tr) = model.generate(&ctx, 3, None).unwrap();
                fis_report(&entropy_tensor(&tr, DEFAULT_EPSILON).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn planted_head_has_the_dominant_gap() {
        let plant = tinylm::tests::small_plant();
        let model =
            tinylm::build_model(tinylm::tests::small_config(11), Some(plant)).unwrap();
        let benign = calibration_reports(&model, false, 6);
        let attacked = calibration_reports(&model, true, 6);
        let heads =
            select_adv_heads(&benign, &attacked, &[plant.target_layer], 1).unwrap();
        assert_eq!(heads, vec![(plant.target_layer, plant.target_head)]);
    }

    #[test]
    fn m_equal_to_head_count_selects_every_head() {
        let plant = tinylm::tests::small_plant();
        let model =
            tinylm::build_model(tinylm::tests::small_config(7), Some(plant)).unwrap();
        let benign = calibration_reports(&model, false, 2);
        let attacked = calibration_reports(&model, true, 2);
        let heads = select_adv_heads(&benign, &attacked, &[0, 2], 8).unwrap();
        let expect: Vec<(usize, usize)> = [0usize, 2]
            .iter()
            .flat_map(|&l| (0..8).map(move |h| (l, h)))
            .collect();
        assert_eq!(heads, expect);
    }

    #[test]
    fn identical_reports_tie_break_to_lowest_heads() {
        let plant = tinylm::tests::small_plant();
        let model =
            tinylm::build_model(tinylm::tests::small_config(7), Some(plant)).unwrap();
        let same = calibration_reports(&model, true, 3);
        let heads = select_adv_heads(&same, &same, &[1], 3).unwrap();
        assert_eq!(heads, vec![(1, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn head_selection_rejects_bad_m_and_layers() {
        let plant = tinylm::tests::small_plant();
        let model =
            tinylm::build_model(tinylm::tests::small_config(7), Some(plant)).unwrap();
        let benign = calibration_reports(&model, false, 1);
        let attacked = calibration_reports(&model, true, 1);
        assert!(matches!(
            select_adv_heads(&benign, &attacked, &[0], 0),
            Err(IconError::MOutOfRange { m: 0, .. })
        ));
        assert!(matches!(
            select_adv_heads(&benign, &attacked, &[0], 9),
            Err(IconError::MOutOfRange { m: 9, .. })
        ));
        assert!(matches!(
            select_adv_heads(&benign, &attacked, &[3], 1),
            Err(IconError::LayerOutOfRange { layer: 3, .. })
        ));
        assert!(matches!(
            select_adv_heads(&[], &attacked, &[0], 1),
            Err(IconError::EmptyCalibration { .. })
        ));
    }
}
