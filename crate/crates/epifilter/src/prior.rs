//! Inlier probability priors from match distinctiveness ratios.
//!
//! Before training, empirical ratio densities are fitted separately for
//! inliers and outliers (one histogram each). Per image pair, the inlier
//! ratio `alpha` is estimated by a least-squares mixture fit of the pair's
//! ratio histogram against `alpha * f_in + (1 - alpha) * f_out`, and each
//! correspondence then gets the posterior probability of being an inlier.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BINS: usize = 50;
/// Added to every histogram bin before normalization so posteriors stay
/// finite on empty bins.
pub const BIN_SMOOTHING: f64 = 1e-6;
pub const MIN_SAMPLES_PER_CLASS: usize = 100;
pub const MIN_RATIOS_FOR_ESTIMATE: usize = 32;
const ALPHA_SEARCH_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("need at least {required} {class} samples, got {got}")]
    InsufficientSamples {
        class: &'static str,
        required: usize,
        got: usize,
    },
    #[error("ratio {0} outside (0, 1]")]
    OutOfRange(f64),
    #[error("need at least {required} ratios to estimate the inlier ratio, got {got}")]
    TooFewRatios { required: usize, got: usize },
    #[error("model file is inconsistent: {0}")]
    InvalidModel(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("model parse failure: {0}")]
    Json(#[from] serde_json::Error),
}

/// Histogram densities of the distinctiveness ratio for inliers and
/// outliers over `(0, 1]`. Each density integrates to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioDensityModel {
    pub bin_edges: Vec<f64>,
    pub f_in_density: Vec<f64>,
    pub f_out_density: Vec<f64>,
}

impl RatioDensityModel {
    pub fn bins(&self) -> usize {
        self.f_in_density.len()
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        let b = self.bins();
        if self.bin_edges.len() != b + 1 || self.f_out_density.len() != b || b == 0 {
            return Err(PriorError::InvalidModel(
                "bin_edges/density lengths disagree".into(),
            ));
        }
        for densities in [&self.f_in_density, &self.f_out_density] {
            if densities.iter().any(|d| *d < 0.0 || !d.is_finite()) {
                return Err(PriorError::InvalidModel("negative density".into()));
            }
            let integral: f64 = densities
                .iter()
                .enumerate()
                .map(|(i, d)| d * (self.bin_edges[i + 1] - self.bin_edges[i]))
                .sum();
            if (integral - 1.0).abs() > 1e-9 {
                return Err(PriorError::InvalidModel(format!(
                    "density integrates to {integral}, not 1"
                )));
            }
        }
        Ok(())
    }

    fn bin_index(&self, r: f64) -> usize {
        let b = self.bins();
        // Bins are half-open (lo, hi]; ratios land in (0, 1].
        let idx = (r * b as f64).ceil() as isize - 1;
        idx.clamp(0, b as isize - 1) as usize
    }

    pub fn f_in_at(&self, r: f64) -> f64 {
        self.f_in_density[self.bin_index(r)]
    }

    pub fn f_out_at(&self, r: f64) -> f64 {
        self.f_out_density[self.bin_index(r)]
    }
}

fn check_range(ratios: &[f64]) -> Result<(), PriorError> {
    for &r in ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(PriorError::OutOfRange(r));
        }
    }
    Ok(())
}

/// Normalized histogram density over `(0, 1]` with `bins` equal bins.
/// Smoothing is applied to the fitted class densities (so posteriors stay
/// finite) but not to per-pair estimation histograms, which keeps the
/// mixture fit exactly invariant under sample duplication.
fn histogram_density(ratios: &[f64], bins: usize, smoothing: f64) -> Vec<f64> {
    let mut counts = vec![smoothing; bins];
    for &r in ratios {
        let idx = ((r * bins as f64).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1.0;
    }
    let width = 1.0 / bins as f64;
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / (total * width)).collect()
}

/// Fits both class densities from labeled ratio samples.
pub fn fit_ratio_densities(
    ratios: &[f64],
    labels: &[bool],
    bins: usize,
) -> Result<RatioDensityModel, PriorError> {
    assert_eq!(ratios.len(), labels.len(), "one label per ratio");
    check_range(ratios)?;
    let inliers: Vec<f64> = ratios
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| *r)
        .collect();
    let outliers: Vec<f64> = ratios
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(r, _)| *r)
        .collect();
    for (class, samples) in [("inlier", &inliers), ("outlier", &outliers)] {
        if samples.len() < MIN_SAMPLES_PER_CLASS {
            return Err(PriorError::InsufficientSamples {
                class,
                required: MIN_SAMPLES_PER_CLASS,
                got: samples.len(),
            });
        }
    }
    let bin_edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let model = RatioDensityModel {
        bin_edges,
        f_in_density: histogram_density(&inliers, bins, BIN_SMOOTHING),
        f_out_density: histogram_density(&outliers, bins, BIN_SMOOTHING),
    };
    model.validate()?;
    Ok(model)
}

fn golden_section_min(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Least-squares mixture fit of the pair's ratio histogram against
/// `alpha * f_in + (1 - alpha) * f_out`, searched by golden section and
/// clamped to `[0.01, 0.99]`.
pub fn estimate_inlier_ratio(
    ratios: &[f64],
    model: &RatioDensityModel,
) -> Result<f64, PriorError> {
    if ratios.len() < MIN_RATIOS_FOR_ESTIMATE {
        return Err(PriorError::TooFewRatios {
            required: MIN_RATIOS_FOR_ESTIMATE,
            got: ratios.len(),
        });
    }
    check_range(ratios)?;
    let hist = histogram_density(ratios, model.bins(), 0.0);
    let objective = |alpha: f64| -> f64 {
        hist.iter()
            .zip(model.f_in_density.iter().zip(model.f_out_density.iter()))
            .map(|(&h, (&fi, &fo))| {
                let mix = alpha * fi + (1.0 - alpha) * fo;
                (h - mix) * (h - mix)
            })
            .sum()
    };
    let alpha = golden_section_min(objective, 0.0, 1.0, ALPHA_SEARCH_TOLERANCE);
    Ok(alpha.clamp(0.01, 0.99))
}

/// Posterior probability that a correspondence with ratio `r` is an inlier,
/// given the pair's inlier ratio `alpha`. The denominator is floored at
/// 1e-12, so the result is always in `[0, 1]`.
pub fn posterior_inlier_probability(r: f64, alpha: f64, model: &RatioDensityModel) -> f64 {
    let fi = model.f_in_at(r);
    let fo = model.f_out_at(r);
    let numerator = fi * alpha;
    let denominator = (fi * alpha + fo * (1.0 - alpha)).max(1e-12);
    numerator / denominator
}

/// Estimates `alpha` from the pair's ratios and maps every ratio to its
/// posterior inlier probability.
pub fn posteriors_for_pair(
    ratios: &[f64],
    model: &RatioDensityModel,
) -> Result<Vec<f64>, PriorError> {
    let alpha = estimate_inlier_ratio(ratios, model)?;
    Ok(ratios
        .iter()
        .map(|&r| posterior_inlier_probability(r, alpha, model))
        .collect())
}

pub fn write_prior_model(model: &RatioDensityModel, path: &Path) -> Result<(), PriorError> {
    let json = serde_json::to_string_pretty(model)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_prior_model(path: &Path) -> Result<RatioDensityModel, PriorError> {
    let text = fs::read_to_string(path)?;
    let model: RatioDensityModel = serde_json::from_str(&text)?;
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::distributions::Distribution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::Beta;

    fn beta_samples(a: f64, b: f64, count: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
        let dist = Beta::new(a, b).unwrap();
        (0..count)
            .map(|_| dist.sample(rng).clamp(1e-6, 1.0))
            .collect()
    }

    /// Beta(2,5) CDF via the binomial expansion of the regularized
    /// incomplete beta function for integer parameters.
    fn beta25_cdf(x: f64) -> f64 {
        let mut sum = 0.0;
        for j in 2..=6u32 {
            let binom = match j {
                2 => 15.0,
                3 => 20.0,
                4 => 15.0,
                5 => 6.0,
                _ => 1.0,
            };
            sum += binom * x.powi(j as i32) * (1.0 - x).powi((6 - j) as i32);
        }
        sum
    }

    fn fitted_model(seed: u64, per_class: usize) -> RatioDensityModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut ratios = beta_samples(2.0, 5.0, per_class, &mut rng);
        let mut labels = vec![true; per_class];
        ratios.extend(beta_samples(5.0, 2.0, per_class, &mut rng));
        labels.extend(vec![false; per_class]);
        fit_ratio_densities(&ratios, &labels, DEFAULT_BINS).unwrap()
    }

    #[test]
    fn concentrated_samples_fill_one_bin() {
        let ratios: Vec<f64> = vec![0.505; 150];
        let mut all = ratios.clone();
        all.extend(vec![0.905; 150]);
        let mut labels = vec![true; 150];
        labels.extend(vec![false; 150]);
        let model = fit_ratio_densities(&all, &labels, 50).unwrap();
        // Everything lands in one bin of width 0.02: density ~ 1/0.02 = 50.
        let d = model.f_in_at(0.505);
        assert!((d - 50.0).abs() < 1e-2, "density {d}");
    }

    fn max_density_deviation(n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut ratios = beta_samples(2.0, 5.0, n, &mut rng);
        let mut labels = vec![true; n];
        ratios.extend(beta_samples(5.0, 2.0, n, &mut rng));
        labels.extend(vec![false; n]);
        let model = fit_ratio_densities(&ratios, &labels, 50).unwrap();
        let mut max_dev = 0.0f64;
        for b in 0..model.bins() {
            let (lo, hi) = (model.bin_edges[b], model.bin_edges[b + 1]);
            let true_density = (beta25_cdf(hi) - beta25_cdf(lo)) / (hi - lo);
            let dev = (model.f_in_density[b] - true_density).abs();
            max_dev = max_dev.max(dev);
        }
        max_dev
    }

    #[test]
    fn histogram_matches_analytic_beta_density() {
        // Sampling noise alone puts the expected max bin deviation near
        // sigma * sqrt(2 ln 50) ~ 0.09 at 1e5 samples, so the tight bound is
        // only meaningful once the histogram has converged further.
        assert!(max_density_deviation(100_000, 1) < 0.15);
        assert!(max_density_deviation(1_000_000, 1) < 0.05);
    }

    #[test]
    fn too_few_samples_rejected() {
        let ratios = vec![0.5; 10];
        let labels = vec![true; 5]
            .into_iter()
            .chain(vec![false; 5])
            .collect::<Vec<_>>();
        assert!(matches!(
            fit_ratio_densities(&ratios, &labels, 50),
            Err(PriorError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn out_of_range_ratio_rejected() {
        let mut ratios = vec![0.5; 200];
        ratios[3] = 1.5;
        let labels: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        assert!(matches!(
            fit_ratio_densities(&ratios, &labels, 50),
            Err(PriorError::OutOfRange(_))
        ));
    }

    #[test]
    fn pure_inlier_sample_estimates_high_alpha() {
        let model = fitted_model(2, 20_000);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ratios = beta_samples(2.0, 5.0, 1000, &mut rng);
        let alpha = estimate_inlier_ratio(&ratios, &model).unwrap();
        assert!(alpha >= 0.95, "alpha {alpha}");
    }

    #[test]
    fn pure_outlier_sample_estimates_low_alpha() {
        let model = fitted_model(4, 20_000);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let ratios = beta_samples(5.0, 2.0, 1000, &mut rng);
        let alpha = estimate_inlier_ratio(&ratios, &model).unwrap();
        assert!(alpha <= 0.05, "alpha {alpha}");
    }

    #[test]
    fn mixture_alpha_recovered_within_tolerance() {
        let model = fitted_model(6, 20_000);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n_in = 300;
        let mut ratios = beta_samples(2.0, 5.0, n_in, &mut rng);
        ratios.extend(beta_samples(5.0, 2.0, 1000 - n_in, &mut rng));
        let alpha = estimate_inlier_ratio(&ratios, &model).unwrap();
        assert!((alpha - 0.3).abs() <= 0.05, "alpha {alpha}");
    }

    #[test]
    fn too_few_ratios_for_estimate() {
        let model = fitted_model(8, 200);
        assert!(matches!(
            estimate_inlier_ratio(&vec![0.4; 10], &model),
            Err(PriorError::TooFewRatios { .. })
        ));
    }

    #[test]
    fn posterior_equals_alpha_under_equal_likelihoods() {
        // Dyadic alphas keep `d*a + d*(1-a) == d` exact in binary floating
        // point, so the identity holds with no tolerance.
        let model = RatioDensityModel {
            bin_edges: vec![0.0, 0.5, 1.0],
            f_in_density: vec![1.0, 1.0],
            f_out_density: vec![1.0, 1.0],
        };
        for alpha in [0.25, 0.5, 0.75] {
            assert_eq!(posterior_inlier_probability(0.3, alpha, &model), alpha);
        }
    }

    #[test]
    fn posterior_saturates_as_alpha_reaches_one() {
        let model = fitted_model(9, 500);
        assert_eq!(posterior_inlier_probability(0.3, 1.0, &model), 1.0);
    }

    #[test]
    fn posterior_direct_arithmetic_case() {
        let model = RatioDensityModel {
            bin_edges: vec![0.0, 0.5, 1.0],
            f_in_density: vec![2.0, 0.0],
            f_out_density: vec![0.5, 1.5],
        };
        let p = posterior_inlier_probability(0.3, 0.5, &model);
        assert!((p - 0.8).abs() < 1e-15, "posterior {p}");
    }

    #[test]
    fn posterior_monotone_in_alpha() {
        let model = fitted_model(10, 2000);
        let r = 0.35;
        let mut last = 0.0;
        for step in 0..=20 {
            let alpha = step as f64 / 20.0;
            let p = posterior_inlier_probability(r, alpha, &model);
            assert!(p >= last - 1e-15, "posterior decreased at alpha {alpha}");
            last = p;
        }
    }

    #[test]
    fn estimate_is_scale_free_under_duplication() {
        let model = fitted_model(11, 2000);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let ratios = beta_samples(2.0, 5.0, 200, &mut rng);
        let mut doubled = ratios.clone();
        doubled.extend(ratios.iter().copied());
        let a1 = estimate_inlier_ratio(&ratios, &model).unwrap();
        let a2 = estimate_inlier_ratio(&doubled, &model).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn separation_on_synthetic_pair() {
        let model = fitted_model(13, 20_000);
        let config = crate::datagen::SceneConfig::with_seed(14);
        let pair = crate::datagen::generate_scene_pair(&config).unwrap();
        let posts = posteriors_for_pair(&pair.lowe_ratios, &model).unwrap();
        let mean = |sel: bool| {
            let vals: Vec<f64> = posts
                .iter()
                .zip(&pair.labels)
                .filter(|(_, &l)| l == sel)
                .map(|(p, _)| *p)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!(mean(true) > mean(false));
    }

    #[test]
    fn model_roundtrips_through_json() {
        let model = fitted_model(15, 500);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.json");
        write_prior_model(&model, &path).unwrap();
        let restored = read_prior_model(&path).unwrap();
        assert_eq!(model.f_in_density, restored.f_in_density);
        assert_eq!(model.f_out_density, restored.f_out_density);
        assert_eq!(model.bin_edges, restored.bin_edges);
    }
}
