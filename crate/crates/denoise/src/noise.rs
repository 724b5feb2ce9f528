//! Seeded synthesis of Gaussian and Poisson corruption.
//!
//! Corruption happens on [0,1] intensities. Gaussian noise is specified by
//! a standard deviation on the 8-bit scale (`sigma` of 25 means a standard
//! deviation of 25/255 in [0,1] units) and is **not clamped** — clipping
//! would change the noise statistics, so it is deferred to save time.
//! Poisson corruption follows the peak-scaling convention
//! `y = Poisson(peak * x) / peak`, which preserves the mean and gives a
//! per-pixel variance of `x / peak`.
//!
//! Randomness comes from a named, fixed algorithm (ChaCha12 keystream;
//! normals by Box-Muller; Poisson counts by sequential-search inversion
//! below a mean of 30 and transformed rejection above), so corrupt streams
//! are bit-identical across runs and platforms. Independent substreams are
//! derived by mixing a tag into the seed, which keeps per-(image,
//! realization) noise reproducible even when only a subset of an
//! evaluation set is processed.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::GrayImage;

/// Identifier of the fixed RNG pipeline; stored in model files so a saved
/// artifact records exactly how its noise was produced.
pub const RNG_ALGORITHM: &str = "chacha12-bm-inv-ptrs-1";

/// Corruption model, tagged for JSON configs:
/// `{"type":"gaussian","sigma":25}` or `{"type":"poisson","peak":4}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NoiseSpec {
    Gaussian {
        /// Standard deviation on the 0-255 intensity scale, in (0, 255].
        #[serde(rename = "sigma")]
        sigma_255: f64,
    },
    Poisson {
        /// Maximum expected photon count, in (0, 1e6].
        peak: f64,
    },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Gaussian { sigma_255 } => {
                if !sigma_255.is_finite() || sigma_255 <= 0.0 || sigma_255 > 255.0 {
                    return Err(Error::InvalidArg(format!(
                        "gaussian sigma must lie in (0, 255], got {sigma_255}"
                    )));
                }
            }
            NoiseSpec::Poisson { peak } => {
                if !peak.is_finite() || peak <= 0.0 || peak > 1e6 {
                    return Err(Error::InvalidArg(format!(
                        "poisson peak must lie in (0, 1e6], got {peak}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Short human-readable form for logs and file names.
    pub fn describe(&self) -> String {
        match *self {
            NoiseSpec::Gaussian { sigma_255 } => format!("gaussian-sigma{sigma_255}"),
            NoiseSpec::Poisson { peak } => format!("poisson-peak{peak}"),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash; ties text identifiers (image names) to RNG stream
/// tags without depending on iteration order or platform.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic random stream: ChaCha12 keystream with derived substreams.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    core: ChaCha12Rng,
    cached_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            core: ChaCha12Rng::seed_from_u64(seed),
            cached_normal: None,
        }
    }

    #[inline]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Name of the generation pipeline; identical streams are only
    /// guaranteed between rngs reporting the same algorithm.
    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Independent substream for `tag`. Distinct tags give distinct child
    /// seeds for a fixed parent (the mix is a bijection of the tag).
    pub fn derive(&self, tag: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform index in `[0, n)` via multiply-high; requires n > 0.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box-Muller; pairs are generated together and
    /// the second value cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln(u1) finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// ln(z!) = ln Γ(z+1) via the Lanczos approximation (g = 7, 9 terms);
/// accurate to ~1e-13 relative for z >= 0.
fn ln_factorial(z: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    let mut x = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// Exact Poisson draw with mean `lambda`.
///
/// Inversion by sequential search below 30; transformed rejection with
/// squeeze (PTRS) above, where inversion would need too many terms.
pub fn poisson_sample(lambda: f64, rng: &mut SeededRng) -> Result<u64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidArg(format!(
            "poisson mean must be finite and >= 0, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(0);
    }
    if lambda < 30.0 {
        let mut p = (-lambda).exp();
        let mut cdf = p;
        let mut k = 0u64;
        let u = rng.uniform();
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
            // cdf converges to 1; the loop terminates well before this for
            // any u < 1, the guard only protects against degenerate floats.
            if k > 10_000 {
                break;
            }
        }
        return Ok(k);
    }

    // Transformed rejection: propose k from a shifted/scaled transform of a
    // uniform pair, accept via an exact log-density comparison.
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.uniform() - 0.5;
        let v = rng.uniform();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return Ok(k as u64);
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if (v * inv_alpha / (a / (us * us) + b)).ln() <= k * loglam - lambda - ln_factorial(k) {
            return Ok(k as u64);
        }
    }
}

/// Applies `spec` to an image, drawing from `rng`. The result keeps the
/// source identity of the input; pixel values may leave [0,1].
pub fn corrupt(img: &GrayImage, spec: &NoiseSpec, rng: &mut SeededRng) -> Result<GrayImage> {
    spec.validate()?;
    let mut out = img.clone();
    match *spec {
        NoiseSpec::Gaussian { sigma_255 } => {
            let sd = sigma_255 / 255.0;
            for v in out.pixels_mut() {
                *v += sd * rng.normal();
            }
        }
        NoiseSpec::Poisson { peak } => {
            for v in out.pixels_mut() {
                let count = poisson_sample(peak * *v, rng)?;
                *v = count as f64 / peak;
            }
        }
    }
    Ok(out)
}

/// Sample mean and standard deviation (n-1 denominator) of `noisy - clean`.
pub fn estimate_noise_stats(clean: &GrayImage, noisy: &GrayImage) -> Result<(f64, f64)> {
    if clean.height() != noisy.height() || clean.width() != noisy.width() {
        return Err(Error::shape(
            "estimate_noise_stats",
            format!(
                "{}x{} vs {}x{}",
                clean.height(),
                clean.width(),
                noisy.height(),
                noisy.width()
            ),
        ));
    }
    let n = clean.pixels().len();
    let residuals: Vec<f64> = noisy
        .pixels()
        .iter()
        .zip(clean.pixels())
        .map(|(&y, &x)| y - x)
        .collect();
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        residuals.iter().map(|&r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_image(h: usize, w: usize, v: f64) -> GrayImage {
        GrayImage::new(h, w, vec![v; h * w]).unwrap()
    }

    #[test]
    fn spec_json_matches_wire_format() {
        let g: NoiseSpec = serde_json::from_str(r#"{"type":"gaussian","sigma":25}"#).unwrap();
        assert_eq!(g, NoiseSpec::Gaussian { sigma_255: 25.0 });
        let p: NoiseSpec = serde_json::from_str(r#"{"type":"poisson","peak":4}"#).unwrap();
        assert_eq!(p, NoiseSpec::Poisson { peak: 4.0 });
        let round: NoiseSpec =
            serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(round, g);
    }

    #[test]
    fn spec_validation_bounds() {
        assert!(NoiseSpec::Gaussian { sigma_255: 25.0 }.validate().is_ok());
        assert!(NoiseSpec::Gaussian { sigma_255: 0.0 }.validate().is_err());
        assert!(NoiseSpec::Gaussian { sigma_255: -1.0 }.validate().is_err());
        assert!(NoiseSpec::Gaussian { sigma_255: 256.0 }.validate().is_err());
        assert!(NoiseSpec::Poisson { peak: 4.0 }.validate().is_ok());
        assert!(NoiseSpec::Poisson { peak: 0.0 }.validate().is_err());
        assert!(NoiseSpec::Poisson { peak: 2e6 }.validate().is_err());
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal(), b.normal());
        }
    }

    #[test]
    fn derived_streams_depend_only_on_tag() {
        let root = SeededRng::new(7);
        let mut a = root.derive(3);
        let mut b = root.derive(3);
        let mut c = root.derive(4);
        assert_eq!(a.next_u64(), b.next_u64());
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn corrupt_is_deterministic() {
        let img = constant_image(16, 16, 0.5);
        let spec = NoiseSpec::Gaussian { sigma_255: 25.0 };
        let a = corrupt(&img, &spec, &mut SeededRng::new(9)).unwrap();
        let b = corrupt(&img, &spec, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        let c = corrupt(&img, &spec, &mut SeededRng::new(10)).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn gaussian_std_matches_sigma() {
        let img = constant_image(1000, 1000, 0.5);
        let spec = NoiseSpec::Gaussian { sigma_255: 25.0 };
        let noisy = corrupt(&img, &spec, &mut SeededRng::new(1)).unwrap();
        let (mean, std) = estimate_noise_stats(&img, &noisy).unwrap();
        let target = 25.0 / 255.0;
        assert!((std - target).abs() / target < 0.01, "std {std} vs {target}");
        assert!(mean.abs() < 4.0 * target / 1000.0, "mean {mean}");
    }

    #[test]
    fn gaussian_values_are_not_clamped() {
        // Strong noise near the range edge must overshoot on both sides.
        let img = constant_image(64, 64, 0.95);
        let spec = NoiseSpec::Gaussian { sigma_255: 75.0 };
        let noisy = corrupt(&img, &spec, &mut SeededRng::new(2)).unwrap();
        assert!(noisy.pixels().iter().any(|&v| v > 1.0));
        assert!(noisy.pixels().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn gaussian_moments_look_normal() {
        let mut rng = SeededRng::new(3);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut sum3 = 0.0;
        let mut sum4 = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sum2 += z * z;
            sum3 += z * z * z;
            sum4 += z * z * z * z;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = sum2 / nf - mean * mean;
        let skew = (sum3 / nf - 3.0 * mean * var - mean.powi(3)) / var.powf(1.5);
        let kurt = sum4 / nf / (var * var) - 3.0;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
        assert!(skew.abs() < 0.02, "skew {skew}");
        assert!(kurt.abs() < 0.05, "kurtosis {kurt}");
    }

    #[test]
    fn poisson_zero_image_stays_zero() {
        let img = constant_image(32, 32, 0.0);
        let noisy = corrupt(&img, &NoiseSpec::Poisson { peak: 4.0 }, &mut SeededRng::new(4))
            .unwrap();
        assert!(noisy.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_image_moments() {
        let img = constant_image(1000, 1000, 0.5);
        let noisy = corrupt(&img, &NoiseSpec::Poisson { peak: 4.0 }, &mut SeededRng::new(5))
            .unwrap();
        let (mean_r, std_r) = estimate_noise_stats(&img, &noisy).unwrap();
        let mean = 0.5 + mean_r;
        // E[y] = x; Var[y] = x / peak.
        assert!((mean - 0.5).abs() / 0.5 < 0.01, "mean {mean}");
        let var = std_r * std_r;
        assert!((var - 0.125).abs() / 0.125 < 0.02, "var {var}");
        assert!(noisy.pixels().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn poisson_sample_rejects_bad_lambda() {
        let mut rng = SeededRng::new(6);
        assert!(poisson_sample(-1.0, &mut rng).is_err());
        assert!(poisson_sample(f64::NAN, &mut rng).is_err());
        assert!(poisson_sample(f64::INFINITY, &mut rng).is_err());
        assert_eq!(poisson_sample(0.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn poisson_sample_moments_small_lambda() {
        let mut rng = SeededRng::new(7);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let k = poisson_sample(4.0, &mut rng).unwrap() as f64;
            sum += k;
            sum2 += k * k;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!((mean - 4.0).abs() / 4.0 < 0.01, "mean {mean}");
        assert!((var - 4.0).abs() / 4.0 < 0.02, "var {var}");
    }

    #[test]
    fn poisson_sample_moments_large_lambda() {
        // Exercises the rejection path (mean >= 30).
        let mut rng = SeededRng::new(8);
        let n = 400_000;
        let lambda = 80.0;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let k = poisson_sample(lambda, &mut rng).unwrap() as f64;
            sum += k;
            sum2 += k * k;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!((mean - lambda).abs() / lambda < 0.01, "mean {mean}");
        assert!((var - lambda).abs() / lambda < 0.02, "var {var}");
    }

    /// Chi-square goodness of fit against exact Poisson probabilities
    /// (computed by the pmf recurrence, independent of the sampler).
    fn chi_square_p_value(lambda: f64, seed: u64, draws: usize) -> f64 {
        use statrs::distribution::{ChiSquared, ContinuousCDF};

        let mut rng = SeededRng::new(seed);
        // Count cells 0..=cap, pooling everything above cap.
        let cap = (lambda + 8.0 * lambda.sqrt()).ceil() as usize + 2;
        let mut observed = vec![0u64; cap + 2];
        for _ in 0..draws {
            let k = poisson_sample(lambda, &mut rng).unwrap() as usize;
            observed[k.min(cap + 1)] += 1;
        }
        let mut expected = vec![0.0; cap + 2];
        let mut p = (-lambda).exp();
        let mut total = 0.0;
        for k in 0..=cap {
            expected[k] = p * draws as f64;
            total += p;
            p *= lambda / (k + 1) as f64;
        }
        expected[cap + 1] = (1.0 - total).max(0.0) * draws as f64;

        // Pool cells with expected count < 5 into their neighbor.
        let mut obs_pooled = Vec::new();
        let mut exp_pooled = Vec::new();
        let mut acc_o = 0.0;
        let mut acc_e = 0.0;
        for (o, e) in observed.iter().zip(&expected) {
            acc_o += *o as f64;
            acc_e += *e;
            if acc_e >= 5.0 {
                obs_pooled.push(acc_o);
                exp_pooled.push(acc_e);
                acc_o = 0.0;
                acc_e = 0.0;
            }
        }
        if acc_e > 0.0 {
            if let (Some(o), Some(e)) = (obs_pooled.last_mut(), exp_pooled.last_mut()) {
                *o += acc_o;
                *e += acc_e;
            }
        }
        let stat: f64 = obs_pooled
            .iter()
            .zip(&exp_pooled)
            .map(|(&o, &e)| (o - e) * (o - e) / e)
            .sum();
        let df = (obs_pooled.len() - 1) as f64;
        let dist = ChiSquared::new(df).unwrap();
        1.0 - dist.cdf(stat)
    }

    #[test]
    fn poisson_distribution_passes_chi_square() {
        for (lambda, seed) in [(0.5, 11), (4.0, 12), (30.0, 13)] {
            let p = chi_square_p_value(lambda, seed, 1_000_000);
            assert!(p > 0.001, "lambda {lambda}: p-value {p}");
        }
    }

    #[test]
    fn ln_factorial_matches_direct_sum() {
        let mut acc = 0.0;
        for k in 1..200u64 {
            acc += (k as f64).ln();
            let approx = ln_factorial(k as f64);
            assert!(
                (approx - acc).abs() / acc.max(1.0) < 1e-12,
                "k={k}: {approx} vs {acc}"
            );
        }
        assert!(ln_factorial(0.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_stats_identical_images_are_zero() {
        let img = constant_image(8, 8, 0.3);
        let (m, s) = estimate_noise_stats(&img, &img).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn estimate_stats_shape_mismatch_errors() {
        let a = constant_image(4, 4, 0.1);
        let b = constant_image(4, 5, 0.1);
        assert!(estimate_noise_stats(&a, &b).is_err());
    }

    #[test]
    fn index_is_in_range_and_deterministic() {
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        for _ in 0..1000 {
            let i = a.index(17);
            assert!(i < 17);
            assert_eq!(i, b.index(17));
        }
    }
}
