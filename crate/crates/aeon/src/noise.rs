//! Learnable noise-rate estimation and the score machinery built on it.
//!
//! The training objective needs to know, per batch, which samples to trust.
//! Rather than fixing a noise rate up front, each rate is the output of a
//! tempered sigmoid over a single learnable scalar:
//!
//! ```text
//! eta = sigmoid(gamma / T)
//! ```
//!
//! so the estimate lives strictly inside (0, 1) and moves smoothly as `gamma`
//! receives gradient. Two such estimators run side by side: one for samples
//! whose label is wrong but whose input belongs to the task (`id`), one for
//! samples whose input comes from outside the label set entirely (`ood`).
//!
//! The estimate turns into a per-sample weight in three steps:
//!
//! 1. score every sample in the batch (cross-entropy against its given label
//!    for the `id` side, [`energy_score`] for the `ood` side),
//! 2. fit a Gaussian to the batch's scores and cut it at the quantile that
//!    leaves an `eta`-sized tail above the cut ([`adaptive_threshold`]),
//! 3. squash the signed distance from the cut through a sharp sigmoid
//!    ([`soft_mask`]), giving a weight near 1 below the threshold and near 0
//!    above it.
//!
//! Gradient flows to `gamma` through the quantile and to the model through
//! the scores inside the mask. The batch statistics themselves are plain
//! numbers, never tape variables, so no gradient flows through them; letting
//! the model reshape the batch distribution to move its own threshold would
//! create a self-referential objective.
//!
//! Every operation comes in two forms: a plain `f64` version and an `_on`
//! version that builds the same computation on a [`Tape`]. The two are kept
//! step-for-step identical (constant divisions become multiplications by the
//! reciprocal in both, operands stay in the same order) so a scalar
//! re-computation of a tape value agrees bitwise, not just approximately.

use std::f64::consts::SQRT_2;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::special;

/// Variance floor for batch statistics. Batches that collapse to a single
/// score value (common in the first epochs) would otherwise produce a zero
/// standard deviation and a degenerate quantile.
pub const VAR_FLOOR: f64 = 1e-8;

/// A noise rate expressed as a tempered sigmoid over one learnable scalar.
///
/// The temperature divides `gamma` before the sigmoid, flattening the
/// response so a unit of gradient moves the rate gently. The estimate is
/// strictly increasing in `gamma` and never reaches 0 or 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRateEstimator {
    pub gamma: f64,
    pub temperature: f64,
}

impl NoiseRateEstimator {
    pub fn new(gamma: f64, temperature: f64) -> Self {
        assert!(
            temperature > 0.0,
            "estimator temperature must be positive, got {temperature}"
        );
        NoiseRateEstimator { gamma, temperature }
    }

    /// Estimator whose initial estimate equals `rate`.
    pub fn with_rate(rate: f64, temperature: f64) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Domain {
                func: "NoiseRateEstimator::with_rate",
                arg: rate,
            });
        }
        Ok(Self::new(temperature * (rate / (1.0 - rate)).ln(), temperature))
    }

    /// Current rate estimate, strictly inside (0, 1).
    pub fn estimate(&self) -> f64 {
        special::sigmoid(self.gamma * (1.0 / self.temperature))
    }

    /// Tape version. Returns the `gamma` leaf (the trainer reads its
    /// gradient) alongside the rate node.
    pub fn estimate_on<'t>(&self, tape: &'t Tape) -> (Var<'t>, Var<'t>) {
        let gamma = tape.var(self.gamma);
        (gamma, (gamma * (1.0 / self.temperature)).sigmoid())
    }
}

/// The pair of estimators a training run carries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimators {
    pub id: NoiseRateEstimator,
    pub ood: NoiseRateEstimator,
}

/// On-tape view of [`Estimators`] for one batch: the two `gamma` leaves plus
/// the rate nodes derived from them.
#[derive(Clone, Copy)]
pub struct EstimatorVars<'t> {
    pub gamma_id: Var<'t>,
    pub eta_id: Var<'t>,
    pub gamma_ood: Var<'t>,
    pub eta_ood: Var<'t>,
}

/// Checkpoint layout for the estimator pair.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatorFile {
    gamma_id: f64,
    gamma_ood: f64,
    #[serde(rename = "T_id")]
    t_id: f64,
    #[serde(rename = "T_ood")]
    t_ood: f64,
}

impl Estimators {
    pub fn new(gamma_init: f64, t_id: f64, t_ood: f64) -> Self {
        Estimators {
            id: NoiseRateEstimator::new(gamma_init, t_id),
            ood: NoiseRateEstimator::new(gamma_init, t_ood),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> EstimatorVars<'t> {
        let (gamma_id, eta_id) = self.id.estimate_on(tape);
        let (gamma_ood, eta_ood) = self.ood.estimate_on(tape);
        EstimatorVars {
            gamma_id,
            eta_id,
            gamma_ood,
            eta_ood,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = EstimatorFile {
            gamma_id: self.id.gamma,
            gamma_ood: self.ood.gamma,
            t_id: self.id.temperature,
            t_ood: self.ood.temperature,
        };
        let text = serde_json::to_string_pretty(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: EstimatorFile = serde_json::from_str(&text)?;
        if !(file.t_id > 0.0) || !(file.t_ood > 0.0) {
            return Err(Error::data(format!(
                "estimator checkpoint {} has non-positive temperature",
                path.display()
            )));
        }
        Ok(Estimators {
            id: NoiseRateEstimator::new(file.gamma_id, file.t_id),
            ood: NoiseRateEstimator::new(file.gamma_ood, file.t_ood),
        })
    }
}

/// Shape parameters for thresholds, masks, and the energy margin terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Sigmoid sharpness of the label-noise mask.
    pub beta_id: f64,
    /// Sigmoid sharpness of the out-of-distribution mask.
    pub beta_ood: f64,
    /// Energy ceiling for samples treated as in-distribution.
    pub margin_id: f64,
    /// Energy floor pushed onto samples treated as out-of-distribution.
    pub margin_ood: f64,
    /// Temperature of the energy score.
    pub energy_temp: f64,
    /// Rates are clamped to `[eta_clamp, 1 - eta_clamp]` before the quantile,
    /// which diverges at 0 and 1.
    pub eta_clamp: f64,
    /// Pin both masks fully open and drop the margin terms, reducing the
    /// objective to its supervised core. For baselines and equivalence tests.
    pub force_open: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            beta_id: 0.1,
            beta_ood: 0.1,
            margin_id: 0.2,
            margin_ood: 0.8,
            energy_temp: 1.0,
            eta_clamp: 1e-3,
            force_open: false,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_id > 0.0) || !(self.beta_ood > 0.0) {
            return Err(Error::config("mask betas must be positive"));
        }
        if !(self.energy_temp > 0.0) {
            return Err(Error::config("energy_temp must be positive"));
        }
        if !(self.eta_clamp > 0.0 && self.eta_clamp < 0.5) {
            return Err(Error::config("eta_clamp must lie in (0, 0.5)"));
        }
        if !self.margin_id.is_finite() || !self.margin_ood.is_finite() {
            return Err(Error::config("energy margins must be finite"));
        }
        Ok(())
    }
}

/// Mean and population variance of a batch of scores.
///
/// Held as plain numbers on purpose: thresholds built from these receive no
/// gradient through the statistics (see the module docs). Population rather
/// than sample variance; the choice is arbitrary but fixed, and the tests
/// freeze it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: f64,
    pub var: f64,
}

impl BatchStats {
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::data("batch statistics need at least one score"));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Ok(BatchStats { mean, var })
    }

    /// Standard deviation with the degenerate-batch floor applied.
    pub fn stddev(&self) -> f64 {
        self.var.max(VAR_FLOOR).sqrt()
    }
}

/// Energy score of a logit vector: `-temp * logsumexp(logits / temp)`.
///
/// Confident in-distribution predictions have one large logit, a large
/// logsumexp, and therefore a very negative energy; inputs the model does not
/// recognize score closer to zero.
pub fn energy_score(logits: &[f64], temp: f64) -> f64 {
    debug_assert!(!logits.is_empty() && temp > 0.0);
    if temp == 1.0 {
        return -special::logsumexp(logits);
    }
    let inv = 1.0 / temp;
    let scaled: Vec<f64> = logits.iter().map(|z| z * inv).collect();
    special::logsumexp(&scaled) * -temp
}

/// Tape version of [`energy_score`].
pub fn energy_score_on<'t>(tape: &'t Tape, logits: &[Var<'t>], temp: f64) -> Var<'t> {
    debug_assert!(!logits.is_empty() && temp > 0.0);
    if temp == 1.0 {
        return tape.logsumexp(logits) * -1.0;
    }
    let inv = 1.0 / temp;
    let scaled: Vec<Var<'t>> = logits.iter().map(|z| *z * inv).collect();
    tape.logsumexp(&scaled) * -temp
}

/// Quantile of a Gaussian: the score `t` with `P(X <= t) = p` for
/// `X ~ N(mean, std^2)`.
pub fn gaussian_quantile(p: f64, mean: f64, std: f64) -> Result<f64> {
    let u = p * 2.0 - 1.0;
    // p in (0, 1) can still round u onto an endpoint when p is within one
    // ulp of the ends; report such p as out of range rather than passing a
    // confusing argument downstream.
    if !(u > -1.0 && u < 1.0) {
        return Err(Error::Domain {
            func: "gaussian_quantile",
            arg: p,
        });
    }
    let t = special::erfinv(u)?;
    Ok(t * (SQRT_2 * std) + mean)
}

/// Tape version of [`gaussian_quantile`]. The derivative with respect to `p`
/// is `std / pdf(t)` with `pdf` the density of `N(mean, std^2)` at the
/// returned quantile; it falls out of the inverse-erf slope, so no extra
/// machinery is needed here.
pub fn gaussian_quantile_on<'t>(p: Var<'t>, mean: f64, std: f64) -> Result<Var<'t>> {
    let u = p * 2.0 - 1.0;
    if !(u.value() > -1.0 && u.value() < 1.0) {
        return Err(Error::Domain {
            func: "gaussian_quantile",
            arg: p.value(),
        });
    }
    let t = u.erfinv()?;
    Ok(t * (SQRT_2 * std) + mean)
}

/// Threshold that leaves an `eta`-sized tail of the batch's score
/// distribution above it, under a Gaussian fit of the scores.
///
/// `eta` is clamped to `[eta_clamp, 1 - eta_clamp]` first; the quantile
/// diverges at the ends.
pub fn adaptive_threshold(eta: f64, stats: &BatchStats, eta_clamp: f64) -> Result<f64> {
    debug_assert!(eta_clamp > 0.0 && eta_clamp < 0.5);
    let c = eta.clamp(eta_clamp, 1.0 - eta_clamp);
    gaussian_quantile(1.0 - c, stats.mean, stats.stddev())
}

/// Tape version of [`adaptive_threshold`]. Gradient reaches `eta` (and so the
/// estimator's `gamma`) through the quantile; `stats` are plain numbers and
/// contribute none.
pub fn adaptive_threshold_on<'t>(
    eta: Var<'t>,
    stats: &BatchStats,
    eta_clamp: f64,
) -> Result<Var<'t>> {
    debug_assert!(eta_clamp > 0.0 && eta_clamp < 0.5);
    let c = eta.clamp(eta_clamp, 1.0 - eta_clamp);
    gaussian_quantile_on(1.0 - c, stats.mean, stats.stddev())
}

/// Weight in (0, 1) measuring how far `score` sits below `tau`:
/// `sigmoid((tau - score) / beta)`. Smaller `beta` sharpens the boundary.
pub fn soft_mask(score: f64, tau: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    special::sigmoid((tau - score) * (1.0 / beta))
}

/// Tape version of [`soft_mask`]. Gradient flows to both `tau` (hence the
/// estimator) and `score` (hence the model).
pub fn soft_mask_on<'t>(score: Var<'t>, tau: Var<'t>, beta: f64) -> Var<'t> {
    debug_assert!(beta > 0.0);
    ((tau - score) * (1.0 / beta)).sigmoid()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn estimate_matches_hand_values() {
        // sigmoid(0) = 1/2 exactly.
        assert_eq!(NoiseRateEstimator::new(0.0, 10.0).estimate(), 0.5);
        // gamma = 10 ln 3 puts the sigmoid at 3/4.
        let est = NoiseRateEstimator::new(10.0 * 3.0f64.ln(), 10.0);
        assert!((est.estimate() - 0.75).abs() < 1e-12);
        // gamma/T = -2.302585 is within rounding of -ln 10, so the rate is
        // within 1e-7 of 1/11 = 0.0909090909...
        let est = NoiseRateEstimator::new(-23.02585, 10.0);
        assert!((est.estimate() - 1.0 / 11.0).abs() < 1e-7);
    }

    #[test]
    fn estimate_stays_strict_and_monotone() {
        // Even absurd gamma never pushes the rate onto 0 or 1.
        for gamma in [-1e9, -1e6, 1e6, 1e9] {
            let e = NoiseRateEstimator::new(gamma, 10.0).estimate();
            assert!(e > 0.0 && e < 1.0, "estimate {e} not strict at {gamma}");
        }
        // Strictly increasing inside the unsaturated band (the sigmoid ties
        // by design once its argument is clamped).
        let mut last = 0.0;
        for gamma in [-300.0, -30.0, -3.0, 0.0, 3.0, 30.0, 300.0] {
            let e = NoiseRateEstimator::new(gamma, 10.0).estimate();
            assert!(e > last, "not increasing at {gamma}");
            last = e;
        }
    }

    #[test]
    fn with_rate_roundtrips() {
        for rate in [0.05, 0.3, 0.5, 0.9] {
            let est = NoiseRateEstimator::with_rate(rate, 10.0).unwrap();
            assert!((est.estimate() - rate).abs() < 1e-12);
        }
        assert!(NoiseRateEstimator::with_rate(0.0, 10.0).is_err());
        assert!(NoiseRateEstimator::with_rate(1.0, 10.0).is_err());
    }

    #[test]
    fn estimate_on_matches_scalar_and_grad() {
        let est = NoiseRateEstimator::new(-4.2, 10.0);
        let tape = Tape::new();
        let (gamma, eta) = est.estimate_on(&tape);
        assert_eq!(eta.value(), est.estimate());
        let g = tape.backward(eta);
        // d eta / d gamma = eta (1 - eta) / T.
        let e = est.estimate();
        let expect = e * (1.0 - e) / 10.0;
        assert!((g.wrt(gamma) - expect).abs() < 1e-15);
    }

    #[test]
    fn energy_hand_values() {
        // Uniform logits: -ln C.
        let e = energy_score(&[0.0; 10], 1.0);
        assert!((e + 10.0f64.ln()).abs() < 1e-12);
        // Single class collapses to the lone logit.
        assert_eq!(energy_score(&[5.0], 1.0), -5.0);
        // logsumexp([2, 0]) = 2 + ln(1 + e^-2) = 2.1269280110429726.
        let e = energy_score(&[2.0, 0.0], 1.0);
        assert!((e + 2.1269280110429726).abs() < 1e-12);
    }

    #[test]
    fn energy_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let c = rng.gen_range(-5.0..5.0);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for temp in [0.5, 1.0, 2.0] {
                let lhs = energy_score(&shifted, temp);
                let rhs = energy_score(&z, temp) - c;
                assert!((lhs - rhs).abs() < 1e-9, "temp {temp}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn energy_on_mirrors_scalar_bitwise() {
        let tape = Tape::new();
        let logits = [1.25, -0.5, 3.0, 0.125];
        for temp in [0.5, 1.0, 2.0] {
            let vars: Vec<Var> = logits.iter().map(|&z| tape.var(z)).collect();
            let e = energy_score_on(&tape, &vars, temp);
            assert_eq!(e.value(), energy_score(&logits, temp), "temp {temp}");
        }
    }

    #[test]
    fn energy_gradient_is_negative_softmax() {
        let tape = Tape::new();
        let logits = [2.0, 0.0, -1.0];
        let vars: Vec<Var> = logits.iter().map(|&z| tape.var(z)).collect();
        let e = energy_score_on(&tape, &vars, 1.0);
        let g = tape.backward(e);
        let sm = special::softmax(&logits);
        for (v, s) in vars.iter().zip(&sm) {
            assert!((g.wrt(*v) + s).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_hand_values() {
        // Median is the mean, exactly: erfinv(0) = 0.
        assert_eq!(gaussian_quantile(0.5, 7.25, 3.0).unwrap(), 7.25);
        // Phi(1) = 0.8413447460685429, so the quantile of the truncated
        // constant 0.8413447 sits within 1e-6 of 1.
        let q = gaussian_quantile(0.8413447, 0.0, 1.0).unwrap();
        assert!((q - 1.0).abs() < 1e-6);
        // Textbook two-sided 95% point.
        let q = gaussian_quantile(0.975, 0.0, 1.0).unwrap();
        assert!((q - 1.959963984540054).abs() < 1e-9);
        let q = gaussian_quantile(0.999, 0.0, 1.0).unwrap();
        assert!((q - 3.090232306167813).abs() < 1e-9);
        // Affine transport: mean and std scale the standard quantile.
        let q = gaussian_quantile(0.975, 2.0, 3.0).unwrap();
        assert!((q - (2.0 + 3.0 * 1.959963984540054)).abs() < 1e-8);
    }

    #[test]
    fn quantile_rejects_bad_p() {
        for p in [0.0, 1.0, -0.25, 1.25, f64::NAN] {
            assert!(gaussian_quantile(p, 0.0, 1.0).is_err(), "p = {p}");
        }
    }

    #[test]
    fn quantile_symmetry_and_roundtrip() {
        for i in 1..40 {
            let p = i as f64 / 40.0;
            let hi = gaussian_quantile(p, 0.0, 1.0).unwrap();
            let lo = gaussian_quantile(1.0 - p, 0.0, 1.0).unwrap();
            assert!((hi + lo).abs() < 1e-9, "symmetry at p = {p}");
        }
        // CDF of the quantile must give p back across the usable range.
        for k in 0..60 {
            let p = 1e-6 + (1.0 - 2e-6) * k as f64 / 59.0;
            let q = gaussian_quantile(p, 0.0, 1.0).unwrap();
            assert!((special::normal_cdf(q) - p).abs() < 1e-9, "p = {p}");
        }
    }

    #[test]
    fn quantile_on_slope_is_std_over_density() {
        let tape = Tape::new();
        for (p0, mean, std) in [(0.3, 0.0, 1.0), (0.85, -2.0, 0.5), (0.999, 3.0, 2.0)] {
            let p = tape.var(p0);
            let q = gaussian_quantile_on(p, mean, std).unwrap();
            let g = tape.backward(q);
            let z = (q.value() - mean) / std;
            let expect = std / special::normal_pdf(z);
            let rel = (g.wrt(p) - expect).abs() / expect;
            assert!(rel < 1e-12, "pered {p0}: {} vs {expect}", g.wrt(p));
        }
    }

    #[test]
    fn batch_stats_hand_values() {
        let s = BatchStats::from_scores(&[0.0, 2.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.var, 1.0);
        assert_eq!(s.stddev(), 1.0);
        // Degenerate batch: variance 0 floors the deviation at 1e-4.
        let s = BatchStats::from_scores(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.var, 0.0);
        assert_eq!(s.stddev(), 1e-4);
        assert!(BatchStats::from_scores(&[]).is_err());
    }

    #[test]
    fn batch_stats_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let s = BatchStats::from_scores(&scores).unwrap();
        assert!(s.mean.abs() < 0.05);
        assert!((s.var - 1.0).abs() < 0.05);
    }

    #[test]
    fn threshold_hand_values() {
        let stats = BatchStats { mean: 3.0, var: 4.0 };
        // eta = 1/2 cuts at the median.
        assert_eq!(adaptive_threshold(0.5, &stats, 1e-3).unwrap(), 3.0);
        // eta = 0 clamps to 1e-3, the 0.999 quantile.
        let std = BatchStats { mean: 0.0, var: 1.0 };
        let t = adaptive_threshold(0.0, &std, 1e-3).unwrap();
        assert!((t - 3.090232306167813).abs() < 1e-9);
        let t = adaptive_threshold(1.0, &std, 1e-3).unwrap();
        assert!((t + 3.090232306167813).abs() < 1e-9);
        // A high rate pushes the cut below the mean symmetrically.
        let t = adaptive_threshold(0.8413447, &std, 1e-3).unwrap();
        assert!((t + 1.0).abs() < 1e-6);
    }

    #[test]
    fn threshold_on_mirrors_scalar_bitwise() {
        let stats = BatchStats {
            mean: -1.75,
            var: 2.5,
        };
        let tape = Tape::new();
        for eta in [0.0, 1e-4, 0.1, 0.5, 0.9, 1.0] {
            let v = tape.var(eta);
            let t = adaptive_threshold_on(v, &stats, 1e-3).unwrap();
            assert_eq!(
                t.value(),
                adaptive_threshold(eta, &stats, 1e-3).unwrap(),
                "eta = {eta}"
            );
        }
    }

    #[test]
    fn gradient_reaches_gamma_through_threshold() {
        let est = NoiseRateEstimator::new(1.5, 10.0);
        let stats = BatchStats { mean: 0.2, var: 1.3 };
        let tape = Tape::new();
        let (gamma, eta) = est.estimate_on(&tape);
        let tau = adaptive_threshold_on(eta, &stats, 1e-3).unwrap();
        // A tiny masked sum standing in for the batch loss.
        let scores = [0.9, -0.3, 0.4];
        let terms: Vec<Var> = scores
            .iter()
            .map(|&s| {
                let sv = tape.lit(s);
                soft_mask_on(sv, tau, 0.1) * sv
            })
            .collect();
        let loss = tape.sum(&terms);
        let g = tape.backward(loss);
        let analytic = g.wrt(gamma);
        assert!(analytic != 0.0);
        drop(g);

        // Central finite difference over gamma on fresh tapes.
        let fd = {
            let eval = |gm: f64| {
                let t2 = Tape::new();
                let (_, eta2) = NoiseRateEstimator::new(gm, 10.0).estimate_on(&t2);
                let tau2 = adaptive_threshold_on(eta2, &stats, 1e-3).unwrap();
                scores
                    .iter()
                    .map(|&s| soft_mask_on(t2.lit(s), tau2, 0.1).value() * s)
                    .sum::<f64>()
            };
            let h = 1e-6;
            (eval(est.gamma + h) - eval(est.gamma - h)) / (2.0 * h)
        };
        assert!(
            (analytic - fd).abs() / fd.abs().max(1e-9) < 1e-6,
            "{analytic} vs {fd}"
        );
    }

    #[test]
    fn partition_property_on_gaussian_scores() {
        // Scores drawn from the very family the threshold assumes; the tail
        // above the cut must match the requested rate.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let scores: Vec<f64> = (0..10_000)
            .map(|_| 2.0 + 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let stats = BatchStats::from_scores(&scores).unwrap();
        for eta in [0.1, 0.3, 0.5, 0.7] {
            let tau = adaptive_threshold(eta, &stats, 1e-3).unwrap();
            let above = scores.iter().filter(|&&s| s > tau).count();
            let frac = above as f64 / scores.len() as f64;
            assert!(
                (frac - eta).abs() <= 0.03,
                "eta = {eta}: fraction above = {frac}"
            );
        }
    }

    #[test]
    fn mask_hand_values() {
        // Score at the threshold: sigmoid(0) = 1/2.
        assert_eq!(soft_mask(0.7, 0.7, 0.1), 0.5);
        // One beta below the cut: sigmoid(1).
        let w = soft_mask(0.0, 0.1, 0.1);
        assert!((w - 0.7310585786300049).abs() < 1e-12);
        // Half a unit above the cut at beta 0.1: sigmoid(-5).
        let w = soft_mask(0.5, 0.0, 0.1);
        assert!((w - 0.006692850924284856).abs() < 1e-12);
    }

    #[test]
    fn mask_is_strict_and_decreasing_in_score() {
        // Weights never collapse onto 0 or 1, however far the score sits.
        for score in [-1e9, -1e6, 1e6, 1e9] {
            let w = soft_mask(score, 0.0, 0.1);
            assert!(w > 0.0 && w < 1.0, "mask not strict at {score}");
        }
        // Strictly decreasing while the sigmoid is unsaturated; beta = 0.1
        // saturates beyond |score| ~ 3.67.
        let mut last = 1.0;
        for score in [-3.0, -0.2, 0.0, 0.3, 3.0] {
            let w = soft_mask(score, 0.0, 0.1);
            assert!(w < last, "not decreasing at {score}");
            last = w;
        }
    }

    #[test]
    fn mask_on_mirrors_scalar_bitwise() {
        let tape = Tape::new();
        for (score, tau, beta) in [(0.3, 0.5, 0.1), (2.0, -1.0, 0.05), (0.0, 0.0, 0.2)] {
            let s = tape.var(score);
            let t = tape.var(tau);
            assert_eq!(
                soft_mask_on(s, t, beta).value(),
                soft_mask(score, tau, beta)
            );
        }
    }

    #[test]
    fn raising_gamma_raises_rate_lowers_threshold_closes_masks() {
        let stats = BatchStats { mean: 1.0, var: 2.0 };
        let scores = [-0.5, 0.8, 1.9, 4.0];
        let mut prev: Option<(f64, f64, Vec<f64>)> = None;
        for gamma in [-8.0, -2.0, 0.0, 2.0, 8.0] {
            let est = NoiseRateEstimator::new(gamma, 10.0);
            let eta = est.estimate();
            let tau = adaptive_threshold(eta, &stats, 1e-3).unwrap();
            let ws: Vec<f64> = scores.iter().map(|&s| soft_mask(s, tau, 0.1)).collect();
            if let Some((peta, ptau, pws)) = prev {
                assert!(eta > peta);
                assert!(tau < ptau);
                // Masks may tie deep in sigmoid saturation, so weakly lower.
                for (w, pw) in ws.iter().zip(&pws) {
                    assert!(w <= pw);
                }
            }
            prev = Some((eta, tau, ws));
        }
    }

    #[test]
    fn estimator_pair_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("estimators.json");
        let est = Estimators {
            id: NoiseRateEstimator::new(0.123456789123456789, 10.0),
            ood: NoiseRateEstimator::new(-7.5e-3, 5.0),
        };
        est.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["gamma_id", "gamma_ood", "T_id", "T_ood"] {
            assert!(text.contains(key), "missing key {key}");
        }
        let back = Estimators::load(&path).unwrap();
        assert_eq!(back, est);
    }

    #[test]
    fn mask_config_validation() {
        assert!(MaskConfig::default().validate().is_ok());
        let bad = MaskConfig {
            beta_id: 0.0,
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MaskConfig {
            eta_clamp: 0.5,
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MaskConfig {
            energy_temp: -1.0,
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
