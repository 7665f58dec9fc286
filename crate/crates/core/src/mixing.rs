//! Mixing ratios, patch-mask allocation and Gaussian noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{check_partition, MixRatios, PatchMask, RatioSource};

/// Draw `k` symmetric Dirichlet(`alpha_m`) mixing ratios.
///
/// Gamma variates are drawn in log space so that very small concentrations
/// (where Gamma draws underflow to zero) still normalise cleanly.
pub fn sample_mix_ratios<R: Rng + ?Sized>(k: usize, alpha_m: f64, rng: &mut R) -> Result<MixRatios> {
    if k == 0 {
        return Err(Error::param("k", "must be >= 1"));
    }
    if !(alpha_m > 0.0) || !alpha_m.is_finite() {
        return Err(Error::param("alpha_m", format!("must be a positive finite real, got {alpha_m}")));
    }
    if k == 1 {
        return MixRatios::new(vec![1.0], RatioSource::DirichletDraw);
    }

    let log_draws: Vec<f64> = if alpha_m >= 1.0 {
        let gamma = Gamma::new(alpha_m, 1.0).map_err(|e| Error::param("alpha_m", e.to_string()))?;
        (0..k).map(|_| gamma.sample(rng).ln()).collect()
    } else {
        // G(a) = G(a + 1) * U^(1/a)
        let gamma = Gamma::new(alpha_m + 1.0, 1.0).map_err(|e| Error::param("alpha_m", e.to_string()))?;
        (0..k)
            .map(|_| {
                let g: f64 = gamma.sample(rng);
                let u: f64 = 1.0 - rng.random::<f64>();
                g.ln() + u.ln() / alpha_m
            })
            .collect()
    };

    let max = log_draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_draws.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let lambdas = weights.into_iter().map(|w| w / total).collect();
    MixRatios::new(lambdas, RatioSource::DirichletDraw)
}

/// Largest-remainder apportionment of `n` items according to `lambdas`.
///
/// Ties in the fractional remainders go to the lowest index.
pub fn apportion(lambdas: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = lambdas.iter().map(|l| l * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remaining = n.saturating_sub(assigned);

    // Snap remainders to a 1e-9 grid so that ratios that are equal in exact
    // arithmetic but differ by an ulp still tie.
    let mut order: Vec<(usize, i64)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (i, ((q - q.floor()) * 1e9).round() as i64))
        .collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (i, _) in order {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Split `n_patches` patches into one mask per ratio. Sizes follow
/// [`apportion`]; which patches land in which mask is a uniformly random
/// permutation.
pub fn allocate_masks<R: Rng + ?Sized>(
    ratios: &MixRatios,
    n_patches: usize,
    rng: &mut R,
) -> Result<Vec<PatchMask>> {
    if n_patches == 0 {
        return Err(Error::Allocation("need at least one patch".into()));
    }
    let k = ratios.len();
    if n_patches < k && ratios.lambdas().iter().all(|&l| l > 0.0) {
        return Err(Error::Allocation(format!(
            "{n_patches} patches cannot be shared by {k} clients with positive ratios"
        )));
    }

    let sizes = apportion(ratios.lambdas(), n_patches);
    let mut perm: Vec<usize> = (0..n_patches).collect();
    perm.shuffle(rng);

    let mut masks = Vec::with_capacity(k);
    let mut start = 0;
    for size in sizes {
        masks.push(PatchMask::from_indices(n_patches, &perm[start..start + size]));
        start += size;
    }
    debug_assert_eq!(start, n_patches);
    Ok(masks)
}

/// Ratios implied by a partition: `N_i / N`.
pub fn realized_ratios(masks: &[PatchMask]) -> Result<MixRatios> {
    let n = check_partition(masks)?;
    let lambdas = masks.iter().map(|m| m.count() as f64 / n as f64).collect();
    MixRatios::new(lambdas, RatioSource::Realized)
}

/// Add i.i.d. `N(0, variance)` noise to every entry. A zero variance returns
/// the input untouched and consumes no randomness.
pub fn add_gaussian_noise<R: Rng + ?Sized>(values: &[f64], variance: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::param("variance", format!("must be finite and >= 0, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(values.to_vec());
    }
    let sd = variance.sqrt();
    Ok(values
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sd * z
        })
        .collect())
}

/// Draw a noise vector of length `len` (the noise itself, not added to data).
pub fn gaussian_noise<R: Rng + ?Sized>(len: usize, variance: f64, rng: &mut R) -> Result<Vec<f64>> {
    add_gaussian_noise(&vec![0.0; len], variance, rng)
}
