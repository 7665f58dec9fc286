//! Independent checks of the accountant and the model: Monte Carlo Rényi
//! divergences on worst-case adjacent pairs, exhaustive group-size search
//! and a finite-difference gradient check.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant::{conversion_term, rdp_budget, subsampled_cdp, AccountantParams};
use crate::data::RawInput;
use crate::error::{Error, Result};
use crate::mechanisms::{Mechanism, NoiseMode};
use crate::rng::RngStream;
use crate::splitmodel::SplitModel;

/// Largest order accepted by the Monte Carlo estimator. Beyond it the
/// importance weights are too heavy-tailed for a meaningful estimate.
pub const MAX_MC_ALPHA: f64 = 16.0;

pub const MIN_MC_SAMPLES: usize = 1000;

const CHUNKS: usize = 100;
const BOOTSTRAP_REPS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub ci95_half_width: f64,
    pub n_samples: usize,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Closed-form `D_α(N(μ_p, diag v) ‖ N(μ_q, diag v)) = α Σ (Δμ_j)² / (2 v_j)`.
pub fn gaussian_renyi(mu_p: &[f64], mu_q: &[f64], variances: &[f64], alpha: f64) -> Result<f64> {
    check_inputs(mu_p, mu_q, variances, alpha)?;
    Ok(alpha
        * mu_p
            .iter()
            .zip(mu_q)
            .zip(variances)
            .map(|((p, q), v)| (p - q) * (p - q) / (2.0 * v))
            .sum::<f64>())
}

fn check_inputs(mu_p: &[f64], mu_q: &[f64], variances: &[f64], alpha: f64) -> Result<()> {
    if mu_p.len() != mu_q.len() || mu_p.len() != variances.len() {
        return Err(Error::Dimension("means and variances must share one length".into()));
    }
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::param("alpha", format!("must be a finite real > 1, got {alpha}")));
    }
    if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::param("sigma_sq", "variances must be finite and > 0"));
    }
    Ok(())
}

/// Monte Carlo estimate of `D_α(P ‖ Q)` for two Gaussians with a shared
/// diagonal covariance, as `(1/(α−1)) ln E_{x∼Q}[(p(x)/q(x))^α]`.
///
/// Samples are drawn in whitened coordinates and reduced with log-sum-exp
/// in fixed chunks; the 95% interval is a percentile bootstrap over chunks.
pub fn mc_renyi_gaussian<R: Rng + ?Sized>(
    mu_p: &[f64],
    mu_q: &[f64],
    variances: &[f64],
    alpha: f64,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_inputs(mu_p, mu_q, variances, alpha)?;
    if alpha > MAX_MC_ALPHA {
        return Err(Error::Unsupported(format!(
            "Monte Carlo order capped at {MAX_MC_ALPHA}, got {alpha}"
        )));
    }
    if n < MIN_MC_SAMPLES {
        return Err(Error::param("n", format!("need at least {MIN_MC_SAMPLES} samples, got {n}")));
    }
    // Whitened mean shift; x = μ_q + √v·z with z ∼ N(0, I) gives
    // ln p/q = δ·z − ‖δ‖²/2.
    let delta: Vec<f64> = mu_p
        .iter()
        .zip(mu_q)
        .zip(variances)
        .map(|((p, q), v)| (p - q) / v.sqrt())
        .collect();
    let half_norm_sq = 0.5 * delta.iter().map(|d| d * d).sum::<f64>();

    let chunk = n.div_ceil(CHUNKS);
    let mut chunk_lse = Vec::with_capacity(CHUNKS);
    let mut chunk_len = Vec::with_capacity(CHUNKS);
    let mut buf = Vec::with_capacity(chunk);
    let mut remaining = n;
    while remaining > 0 {
        let m = chunk.min(remaining);
        buf.clear();
        for _ in 0..m {
            let mut dot = 0.0;
            for d in &delta {
                let z: f64 = StandardNormal.sample(rng);
                dot += d * z;
            }
            buf.push(alpha * (dot - half_norm_sq));
        }
        chunk_lse.push(log_sum_exp(&buf));
        chunk_len.push(m);
        remaining -= m;
    }
    let estimate = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut lse, mut count) = (Vec::new(), 0usize);
        for i in idx {
            lse.push(chunk_lse[i]);
            count += chunk_len[i];
        }
        (log_sum_exp(&lse) - (count as f64).ln()) / (alpha - 1.0)
    };
    let value = estimate(&mut (0..chunk_lse.len()));
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite divergence estimate (alpha {alpha}, ‖δ‖² {})",
            2.0 * half_norm_sq
        )));
    }

    let ids: Vec<usize> = (0..chunk_lse.len()).collect();
    let mut boot: Vec<f64> = (0..BOOTSTRAP_REPS)
        .map(|_| {
            let mut pick = (0..ids.len()).map(|_| *ids.choose(rng).expect("chunks are nonempty"));
            estimate(&mut pick)
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let lo = boot[(0.025 * BOOTSTRAP_REPS as f64) as usize];
    let hi = boot[(0.975 * BOOTSTRAP_REPS as f64) as usize - 1];
    Ok(McEstimate {
        value,
        ci95_half_width: 0.5 * (hi - lo),
        n_samples: n,
    })
}

/// Isotropic convenience wrapper around [`mc_renyi_gaussian`].
pub fn mc_renyi_divergence<R: Rng + ?Sized>(
    mu_p: &[f64],
    mu_q: &[f64],
    sigma_sq: f64,
    alpha: f64,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    mc_renyi_gaussian(mu_p, mu_q, &vec![sigma_sq; mu_p.len()], alpha, n, rng)
}

/// Output distributions of a mechanism on a worst-case adjacent pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCasePair {
    pub mu_p: Vec<f64>,
    pub mu_q: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Build the worst-case pair for `mech`: the replaced record differs by Δ
/// in every smashed coordinate it contributes and its one-hot label moves,
/// changing `min(D_y, 2)` label coordinates by 1. Other group members hold
/// the remaining ratio in equal shares; their (identical) contributions
/// cancel and are omitted from the means.
pub fn worst_case_pair(p: &AccountantParams, mech: Mechanism, mode: NoiseMode) -> Result<WorstCasePair> {
    p.validate()?;
    let k = p.k as f64;
    let lambda = p.lambda_max;
    let label_coords = p.d_y.min(2);
    let others_sq = if p.k > 1 {
        (1.0 - lambda).powi(2) / (k - 1.0)
    } else {
        0.0
    };
    let sum_sq = lambda * lambda + others_sq;

    // (differing smashed coords, smashed shift, smashed var, label shift, label var)
    let (s_coords, s_shift, s_var, y_shift, y_var) = match (mech, mode) {
        (Mechanism::DpSl, _) => (p.d_s, p.pixel_bound, p.sigma_s_sq, 1.0, p.sigma_y_sq),
        (Mechanism::DpMixSl, _) => (
            p.d_s,
            lambda * p.pixel_bound,
            k * p.sigma_s_sq,
            lambda,
            k * p.sigma_y_sq,
        ),
        (Mechanism::DpCutMixSl, _) => {
            let exact = lambda * p.d_s as f64;
            let coords = exact.round();
            if (exact - coords).abs() > 1e-9 {
                return Err(Error::Unsupported(format!(
                    "λ_max·D_s = {exact} is not a whole number of coordinates"
                )));
            }
            match mode {
                NoiseMode::MaskedNoise => (coords as usize, p.pixel_bound, p.sigma_s_sq, lambda, p.sigma_y_sq * sum_sq),
                NoiseMode::UnmaskedNoise => (coords as usize, p.pixel_bound, k * p.sigma_s_sq, lambda, k * p.sigma_y_sq),
            }
        }
    };
    let mut mu_p = vec![s_shift; s_coords];
    mu_p.extend(std::iter::repeat_n(y_shift, label_coords));
    let mu_q = vec![0.0; mu_p.len()];
    let mut variances = vec![s_var; s_coords];
    variances.extend(std::iter::repeat_n(y_var, label_coords));
    Ok(WorstCasePair { mu_p, mu_q, variances })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseCheck {
    pub mechanism: Mechanism,
    pub noise_mode: NoiseMode,
    /// Mechanism bound from the accountant.
    pub analytic: f64,
    /// Exact divergence of the constructed pair.
    pub exact: f64,
    pub estimate: McEstimate,
}

impl WorstCaseCheck {
    /// The bound is tight for DP-SL when `D_y ≤ 2`.
    pub fn tight_within_ci(&self) -> bool {
        (self.estimate.value - self.analytic).abs() <= self.estimate.ci95_half_width
    }

    pub fn dominated(&self, ci_multiple: f64) -> bool {
        self.estimate.value <= self.analytic + ci_multiple * self.estimate.ci95_half_width
    }

    /// Estimate agrees with the exact divergence of the pair.
    pub fn consistent(&self, ci_multiple: f64) -> bool {
        (self.estimate.value - self.exact).abs() <= ci_multiple * self.estimate.ci95_half_width
    }
}

pub fn empirical_worstcase_check<R: Rng + ?Sized>(
    p: &AccountantParams,
    mech: Mechanism,
    mode: NoiseMode,
    n_samples: usize,
    rng: &mut R,
) -> Result<WorstCaseCheck> {
    let pair = worst_case_pair(p, mech, mode)?;
    let analytic = rdp_budget(p, mech)?.epsilon;
    let exact = if pair.mu_p.is_empty() {
        0.0
    } else {
        gaussian_renyi(&pair.mu_p, &pair.mu_q, &pair.variances, p.alpha)?
    };
    let estimate = if exact == 0.0 {
        McEstimate {
            value: 0.0,
            ci95_half_width: 0.0,
            n_samples,
        }
    } else {
        mc_renyi_gaussian(&pair.mu_p, &pair.mu_q, &pair.variances, p.alpha, n_samples, rng)?
    };
    Ok(WorstCaseCheck {
        mechanism: mech,
        noise_mode: mode,
        analytic,
        exact,
        estimate,
    })
}

/// What the group-size search minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupObjective {
    /// `k · (ε(α; λ = 1/k) + ε_o)`, whose continuous minimiser is the
    /// closed-form optimal group size.
    FirstOrder,
    /// The amplified approximate-DP budget.
    Subsampled,
}

/// Exhaustive minimiser of the objective over `k_range`, with `λ_max = 1/k`.
/// Ties go to the smaller `k`.
pub fn grid_search_group_size(
    base: &AccountantParams,
    mech: Mechanism,
    k_range: std::ops::RangeInclusive<usize>,
    objective: GroupObjective,
) -> Result<usize> {
    if k_range.is_empty() {
        return Err(Error::param("k_range", "must be nonempty"));
    }
    if *k_range.start() == 0 || *k_range.end() > base.n {
        return Err(Error::param("k_range", format!("must lie within [1, n = {}]", base.n)));
    }
    let eps_o = conversion_term(base.alpha, base.delta)?;
    let mut best: Option<(usize, f64)> = None;
    for k in k_range {
        let p = base.with_uniform_group(k);
        let value = match objective {
            GroupObjective::FirstOrder => k as f64 * (rdp_budget(&p, mech)?.epsilon + eps_o),
            GroupObjective::Subsampled => subsampled_cdp(&p, mech, base.delta)?.epsilon,
        };
        if best.is_none_or(|(_, v)| value < v) {
            best = Some((k, value));
        }
    }
    Ok(best.expect("range is nonempty").0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub params_checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors: entries whose true value is near
/// zero are judged on an absolute error of `FD_FLOOR · tolerance`.
pub const FD_FLOOR: f64 = 1e-3;

/// Compare analytic gradients of the soft-target loss with central
/// differences over every parameter. `mutate` optionally scales one
/// analytic gradient entry before comparison (a sentinel that must fail).
pub fn finite_difference_suite(
    model: &SplitModel,
    input: &RawInput,
    target: &[f64],
    tolerance: f64,
    mutate: Option<(usize, f64)>,
) -> Result<FdReport> {
    let (_, grads) = model.loss_and_grads(input, target)?;
    let mut analytic = grads.flatten();
    if let Some((i, factor)) = mutate {
        let slot = analytic
            .get_mut(i)
            .ok_or_else(|| Error::param("mutate", "parameter index out of range"))?;
        *slot *= factor;
    }
    let mut probe = model.clone();
    let mut worst = (0usize, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.param_mut(i);
        *probe.param_mut(i) = original + FD_STEP;
        let up = probe.loss(input, target)?;
        *probe.param_mut(i) = original - FD_STEP;
        let down = probe.loss(input, target)?;
        *probe.param_mut(i) = original;
        let fd = (up - down) / (2.0 * FD_STEP);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR);
        if rel > worst.1 {
            worst = (i, rel);
        }
    }
    Ok(FdReport {
        max_rel_error: worst.1,
        worst_param: worst.0,
        params_checked: analytic.len(),
        tolerance,
        pass: worst.1 <= tolerance,
    })
}

/// A random small model with a matching input and soft target.
pub fn random_fd_instance(rng: &mut RngStream) -> Result<(SplitModel, RawInput, Vec<f64>)> {
    let n = rng.random_range(1..=8);
    let f = rng.random_range(1..=8);
    let raw = rng.random_range(1..=4);
    let h = rng.random_range(1..=16);
    let l = rng.random_range(2..=4);
    let model = SplitModel::random(n, raw, f, h, l, rng.random_range(0.1..2.0), rng)?;
    let input = RawInput::new((0..n * raw).map(|_| rng.random_range(-1.0..1.0)).collect(), n, raw)?;
    let weights: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    Ok((model, input, weights.iter().map(|w| w / total).collect()))
}

/// One line of `verify_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub check: String,
    pub analytic: f64,
    pub estimate: f64,
    pub ci95: f64,
    pub pass: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::optimal_group_size;
    use crate::rng::Role;

    fn rng(i: u64) -> RngStream {
        RngStream::keyed(2024, 0, Role::Oracle, i)
    }

    #[test]
    fn identical_means_give_zero() {
        let e = mc_renyi_divergence(&[0.3, 0.1], &[0.3, 0.1], 1.0, 2.0, 10_000, &mut rng(0)).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.ci95_half_width, 0.0);
    }

    #[test]
    fn one_dimensional_unit_gap() {
        let e = mc_renyi_divergence(&[1.0], &[0.0], 1.0, 2.0, 1_000_000, &mut rng(1)).unwrap();
        assert!((e.value - 1.0).abs() <= e.ci95_half_width, "{e:?}");
    }

    #[test]
    fn scaling_means_scales_quadratically() {
        let a = mc_renyi_divergence(&[0.5], &[0.0], 1.0, 2.0, 400_000, &mut rng(2)).unwrap();
        let b = mc_renyi_divergence(&[1.0], &[0.0], 1.0, 2.0, 400_000, &mut rng(2)).unwrap();
        let ratio_ci = 4.0 * a.ci95_half_width + b.ci95_half_width;
        assert!((b.value - 4.0 * a.value).abs() <= ratio_ci, "{a:?} {b:?}");
    }

    #[test]
    fn estimator_rejects_bad_inputs() {
        assert!(mc_renyi_divergence(&[1.0], &[0.0], 0.0, 2.0, 10_000, &mut rng(3)).is_err());
        assert!(mc_renyi_divergence(&[1.0], &[0.0], 1.0, 1.0, 10_000, &mut rng(3)).is_err());
        assert!(mc_renyi_divergence(&[1.0], &[0.0], 1.0, 32.0, 10_000, &mut rng(3)).is_err());
        assert!(mc_renyi_divergence(&[1.0], &[0.0], 1.0, 2.0, 10, &mut rng(3)).is_err());
    }

    fn unit() -> AccountantParams {
        AccountantParams {
            alpha: 2.0,
            delta: 1e-4,
            pixel_bound: 1.0,
            d_s: 1,
            d_y: 1,
            sigma_s_sq: 1.0,
            sigma_y_sq: 1.0,
            lambda_max: 1.0,
            n: 10,
            k: 1,
            fractional_alpha: false,
        }
    }

    #[test]
    fn dp_sl_bound_is_tight() {
        let c = empirical_worstcase_check(&unit(), Mechanism::DpSl, NoiseMode::MaskedNoise, 1_000_000, &mut rng(4)).unwrap();
        assert_eq!(c.analytic, 2.0);
        assert_eq!(c.exact, 2.0);
        assert!(c.tight_within_ci(), "{c:?}");
    }

    #[test]
    fn mixup_bound_dominates() {
        let p = AccountantParams {
            k: 2,
            lambda_max: 0.5,
            ..unit()
        };
        let c = empirical_worstcase_check(&p, Mechanism::DpMixSl, NoiseMode::MaskedNoise, 200_000, &mut rng(5)).unwrap();
        assert!(c.dominated(1.0), "{c:?}");
        assert!(c.consistent(3.0), "{c:?}");
    }

    #[test]
    fn zero_pixel_bound_leaves_only_the_label_term() {
        let p = AccountantParams {
            pixel_bound: 0.0,
            ..unit()
        };
        let c = empirical_worstcase_check(&p, Mechanism::DpSl, NoiseMode::MaskedNoise, 400_000, &mut rng(6)).unwrap();
        assert_eq!(c.analytic, 1.0);
        assert_eq!(c.exact, 1.0);
        assert!(c.tight_within_ci(), "{c:?}");
    }

    #[test]
    fn fractional_cutmix_coordinates_are_rejected() {
        let p = AccountantParams {
            d_s: 3,
            k: 2,
            lambda_max: 0.5,
            ..unit()
        };
        assert!(worst_case_pair(&p, Mechanism::DpCutMixSl, NoiseMode::UnmaskedNoise).is_err());
    }

    #[test]
    fn masked_label_noise_can_exceed_the_bound() {
        // Σλ² = 1/2 for two equal shares: the label divergence doubles.
        let p = AccountantParams {
            d_s: 2,
            d_y: 2,
            k: 2,
            lambda_max: 0.5,
            pixel_bound: 0.0,
            ..unit()
        };
        let masked = worst_case_pair(&p, Mechanism::DpCutMixSl, NoiseMode::MaskedNoise).unwrap();
        let exact = gaussian_renyi(&masked.mu_p, &masked.mu_q, &masked.variances, p.alpha).unwrap();
        let bound = rdp_budget(&p, Mechanism::DpCutMixSl).unwrap().epsilon;
        assert!((exact - 2.0 * bound).abs() < 1e-12);
        let unmasked = worst_case_pair(&p, Mechanism::DpCutMixSl, NoiseMode::UnmaskedNoise).unwrap();
        let exact = gaussian_renyi(&unmasked.mu_p, &unmasked.mu_q, &unmasked.variances, p.alpha).unwrap();
        assert!(exact <= bound);
    }

    fn with_components(eps_y: f64, eps_o: f64) -> AccountantParams {
        // α = 2: ε_o = ln(1/δ), ε_y = D_y/σ_y²; choose δ and σ_y² to match.
        AccountantParams {
            alpha: 2.0,
            delta: (-eps_o).exp(),
            pixel_bound: 0.0,
            d_s: 1,
            d_y: 1,
            sigma_s_sq: 1.0,
            sigma_y_sq: 1.0 / eps_y,
            lambda_max: 1.0,
            n: 50,
            k: 1,
            fractional_alpha: false,
        }
    }

    #[test]
    fn grid_search_examples() {
        let p = with_components(4.0, 1.0);
        assert_eq!(grid_search_group_size(&p, Mechanism::DpCutMixSl, 1..=10, GroupObjective::FirstOrder).unwrap(), 2);
        assert_eq!(grid_search_group_size(&p, Mechanism::DpSl, 3..=10, GroupObjective::FirstOrder).unwrap(), 3);
        assert_eq!(grid_search_group_size(&p, Mechanism::DpSl, 3..=10, GroupObjective::Subsampled).unwrap(), 3);
        assert_eq!(grid_search_group_size(&p, Mechanism::DpCutMixSl, 7..=7, GroupObjective::FirstOrder).unwrap(), 7);
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 5..=4;
        assert!(grid_search_group_size(&p, Mechanism::DpCutMixSl, empty, GroupObjective::FirstOrder).is_err());
    }

    #[test]
    fn grid_search_lands_next_to_closed_form() {
        let mut r = rng(7);
        for _ in 0..100 {
            let p = with_components(r.random_range(0.5..200.0), r.random_range(0.5..5.0));
            let eps_o = conversion_term(p.alpha, p.delta).unwrap();
            let eps_y = 1.0 / p.sigma_y_sq;
            let k_star = optimal_group_size(0.0, eps_y, eps_o, Mechanism::DpCutMixSl).unwrap();
            let k = grid_search_group_size(&p, Mechanism::DpCutMixSl, 1..=p.n, GroupObjective::FirstOrder).unwrap();
            let (lo, hi) = (k_star.floor().max(1.0) as usize, k_star.ceil().min(p.n as f64) as usize);
            assert!(k == lo || k == hi, "k {k}, k* {k_star}");
        }
    }

    #[test]
    fn finite_differences_pass_and_sentinel_fails() {
        let mut r = rng(8);
        let zero = SplitModel {
            client: crate::splitmodel::ClientSegment::zeros(2, 3, 1.0).unwrap(),
            server: crate::splitmodel::ServerSegment::zeros(12, 4, 2).unwrap(),
        };
        let x = RawInput::new(vec![0.3; 8], 4, 2).unwrap();
        assert!(finite_difference_suite(&zero, &x, &[0.4, 0.6], 1e-5, None).unwrap().pass);

        let (model, x, t) = random_fd_instance(&mut RngStream::keyed(7, 0, Role::Oracle, 0)).unwrap();
        let report = finite_difference_suite(&model, &x, &t, 1e-5, None).unwrap();
        assert!(report.pass, "{report:?}");

        let (model, x, t) = random_fd_instance(&mut r).unwrap();
        let (_, g) = model.loss_and_grads(&x, &t).unwrap();
        let flat = g.flatten();
        let biggest = (0..flat.len()).max_by(|&a, &b| flat[a].abs().total_cmp(&flat[b].abs())).unwrap();
        let broken = finite_difference_suite(&model, &x, &t, 1e-5, Some((biggest, 1.01))).unwrap();
        assert!(!broken.pass);
    }
}
