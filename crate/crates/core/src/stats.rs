//! Small numeric helpers shared across the crate: a double-precision
//! inverse normal CDF and stable softmax / log-sum-exp reductions.

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.5066282746310002;

/// Probabilities this far into either tail are rejected rather than
/// extrapolated.
pub const PROBIT_MIN_P: f64 = 1e-12;

// Coefficients of Acklam's rational approximation to the normal quantile.
const A: [f64; 6] = [
    -39.696_830_286_653_8,
    220.946_098_424_521,
    -275.928_510_446_969,
    138.357_751_867_269,
    -30.664_798_066_147_2,
    2.506_628_277_459_24,
];
const B: [f64; 5] = [
    -54.476_098_798_224_1,
    161.585_836_858_041,
    -155.698_979_859_887,
    66.801_311_887_719_7,
    -13.280_681_552_885_7,
];
const C: [f64; 6] = [
    -7.784_894_002_430_29e-3,
    -0.322_396_458_041_136,
    -2.400_758_277_161_84,
    -2.549_732_539_343_73,
    4.374_664_141_464_97,
    2.938_163_982_698_78,
];
const D: [f64; 4] = [
    7.784_695_709_041_46e-3,
    0.322_467_129_070_04,
    2.445_134_137_143,
    3.754_408_661_907_42,
];

const ACKLAM_LOW: f64 = 0.02425;

/// Cumulative distribution function of the standard normal.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Inverse cumulative distribution function (quantile) of the standard
/// normal.
///
/// Acklam's rational approximation polished by one Halley step against
/// `erfc`, which brings the absolute error below 1e-14 on the accepted
/// range `[1e-12, 1 - 1e-12]`. Probabilities outside that range are a
/// domain error.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !p.is_finite() || p < PROBIT_MIN_P || p > 1.0 - PROBIT_MIN_P {
        return Err(Error::InvalidArgument(format!(
            "inverse_normal_cdf: probability {p} outside [{PROBIT_MIN_P}, 1 - {PROBIT_MIN_P}]"
        )));
    }
    // Reduce to the lower tail so the residual against erfc stays
    // relatively accurate; near p = 1 the CDF saturates and the
    // correction term would cancel.
    if p > 0.5 {
        Ok(-refine_lower(1.0 - p))
    } else {
        Ok(refine_lower(p))
    }
}

/// Quantile for q in (0, 0.5]: rational estimate plus one Halley step.
fn refine_lower(q: f64) -> f64 {
    let x = acklam_lower(q);
    let err = 0.5 * libm::erfc(-x / SQRT_2) - q;
    let u = err * SQRT_2PI * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

fn acklam_lower(q: f64) -> f64 {
    if q < ACKLAM_LOW {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else {
        let t = q - 0.5;
        let r = t * t;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * t
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log(Σ exp(x_i)) computed with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index so downstream
/// accuracy numbers are deterministic.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}
