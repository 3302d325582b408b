//! Scalar special functions: `erf`, `erfc`, their inverse, and the standard
//! normal distribution built on top of them.
//!
//! Everything here is plain `f64` math. The differentiation tape wraps
//! [`erfinv`] as a primitive and supplies the analytic derivative itself, so
//! this module stays free of any graph machinery.
//!
//! Accuracy targets: `erf`/`erfc` are rational approximations with relative
//! error near machine precision; `erfinv` starts from a rational estimate of
//! the normal quantile and is polished with two Newton steps against [`erf`],
//! which makes `erf(erfinv(x)) == x` hold to a few ulps across the open
//! interval (-1, 1).

use crate::error::{Error, Result};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// 2/sqrt(pi), the derivative of erf at 0.
pub const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

// Rational coefficients for erf on |x| <= 0.46875.
const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];

// Rational coefficients for erfc on 0.46875 < x <= 4.
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];

// Rational coefficients for the erfc tail, x > 4.
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];

const FRAC_1_SQRT_PI: f64 = 5.64189583547756287e-1;

/// erfc(x) for x > 0.46875, sharing the two upper rational branches.
///
/// The exp(-x^2) factor is split as exp(-q^2) * exp(-(x-q)(x+q)) with q the
/// argument truncated to 1/16ths, which keeps the product accurate when x^2
/// is large enough that a single exp would lose low-order bits.
fn erfc_upper(x: f64) -> f64 {
    debug_assert!(x > 0.46875);
    let rational = if x <= 4.0 {
        let mut num = ERF_C[8] * x;
        let mut den = x;
        for i in 0..7 {
            num = (num + ERF_C[i]) * x;
            den = (den + ERF_D[i]) * x;
        }
        (num + ERF_C[7]) / (den + ERF_D[7])
    } else {
        if x >= 26.6 {
            // exp(-x^2) underflows past any representable erfc value.
            return 0.0;
        }
        let z = 1.0 / (x * x);
        let mut num = ERF_P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + ERF_P[i]) * z;
            den = (den + ERF_Q[i]) * z;
        }
        let r = z * (num + ERF_P[4]) / (den + ERF_Q[4]);
        (FRAC_1_SQRT_PI - r) / x
    };
    let q = (x * 16.0).floor() / 16.0;
    let del = (x - q) * (x + q);
    (-q * q).exp() * (-del).exp() * rational
}

/// The error function.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax <= 0.46875 {
        let z = x * x;
        let mut num = ERF_A[4] * z;
        let mut den = z;
        for i in 0..3 {
            num = (num + ERF_A[i]) * z;
            den = (den + ERF_B[i]) * z;
        }
        x * (num + ERF_A[3]) / (den + ERF_B[3])
    } else {
        let tail = erfc_upper(ax);
        if x > 0.0 {
            1.0 - tail
        } else {
            tail - 1.0
        }
    }
}

/// The complementary error function, 1 - erf(x), accurate in the upper tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax <= 0.46875 {
        1.0 - erf(x)
    } else if x > 0.0 {
        erfc_upper(ax)
    } else {
        2.0 - erfc_upper(ax)
    }
}

// Rational estimate of the standard normal quantile (lower region, central
// region, and a symmetric upper region), accurate to ~1e-9 relative before
// refinement.
const PPF_A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const PPF_B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const PPF_C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const PPF_D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const PPF_LOW: f64 = 0.02425;

/// Rational first estimate of the standard normal quantile; the erfinv Newton
/// polish removes its ~1e-9 error.
fn normal_quantile_estimate(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    if p < PPF_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((PPF_C[0] * q + PPF_C[1]) * q + PPF_C[2]) * q + PPF_C[3]) * q + PPF_C[4]) * q
            + PPF_C[5])
            / ((((PPF_D[0] * q + PPF_D[1]) * q + PPF_D[2]) * q + PPF_D[3]) * q + 1.0)
    } else if p <= 1.0 - PPF_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((PPF_A[0] * r + PPF_A[1]) * r + PPF_A[2]) * r + PPF_A[3]) * r + PPF_A[4]) * r
            + PPF_A[5])
            * q
            / (((((PPF_B[0] * r + PPF_B[1]) * r + PPF_B[2]) * r + PPF_B[3]) * r + PPF_B[4]) * r
                + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((PPF_C[0] * q + PPF_C[1]) * q + PPF_C[2]) * q + PPF_C[3]) * q + PPF_C[4]) * q
            + PPF_C[5])
            / ((((PPF_D[0] * q + PPF_D[1]) * q + PPF_D[2]) * q + PPF_D[3]) * q + 1.0)
    }
}

/// Inverse error function on the open interval (-1, 1).
///
/// Arguments outside the open interval (including the endpoints, where the
/// true inverse is infinite) are a domain error, never a silent NaN.
pub fn erfinv(x: f64) -> Result<f64> {
    if !(x > -1.0 && x < 1.0) {
        return Err(Error::Domain {
            func: "erfinv",
            arg: x,
        });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let p = 0.5 * (x + 1.0);
    let mut y = normal_quantile_estimate(p) / SQRT_2;
    // Two Newton steps on erf(y) - x: quadratic convergence takes the
    // ~1e-9 rational estimate to a few ulps.
    for _ in 0..2 {
        let err = erf(y) - x;
        let slope = FRAC_2_SQRT_PI * (-y * y).exp();
        y -= err / slope;
    }
    Ok(y)
}

/// Derivative of [`erfinv`] at the point where its value is `y`:
/// d/dx erfinv(x) = sqrt(pi)/2 * exp(erfinv(x)^2).
pub fn erfinv_slope_at(y: f64) -> f64 {
    (y * y).exp() / FRAC_2_SQRT_PI
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    const FRAC_1_SQRT_2PI: f64 = 0.39894228040143267794;
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Arguments beyond this magnitude would round the logistic all the way to
/// 0.0 or 1.0 in f64; clamping there keeps outputs strictly inside (0, 1).
pub const SIGMOID_SATURATION: f64 = 36.7;

/// Numerically stable logistic function, strictly inside (0, 1) for every
/// argument: the input is clamped at [`SIGMOID_SATURATION`], past which the
/// exact value is closer to 0 or 1 than f64 can represent anyway.
pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_SATURATION, SIGMOID_SATURATION);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sum(exp(values))) with max subtraction, finite for any finite input.
pub fn logsumexp(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Stabilized softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&z| (z - lse).exp()).collect()
}

/// Stabilized log-softmax: logits minus their logsumexp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&z| z - lse).collect()
}
