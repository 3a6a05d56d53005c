//! The five smooth activation families, their first two derivatives, and the
//! closed-form extrema that feed the trace upper bounds.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Linear,
    Sigmoid,
    Tanh,
    SmoothRelu,
    Gelu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::Linear,
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::SmoothRelu,
        ActivationKind::Gelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Linear => "linear",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::SmoothRelu => "smoothrelu",
            ActivationKind::Gelu => "gelu",
        }
    }

    /// Bounded-output activations (Sigmoid, Tanh) have `sup |f| = 1`.
    pub fn is_saturating(self) -> bool {
        matches!(self, ActivationKind::Sigmoid | ActivationKind::Tanh)
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActivationKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Domain(format!("unknown activation '{s}'")))
    }
}

/// `f(y)`, `f'(y)` and `f''(y)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluated {
    pub f: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Componentwise evaluation; `d1`/`d2` are the diagonals of F'(y) and F''(y).
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedVec {
    pub f: Array1<f64>,
    pub d1: Array1<f64>,
    pub d2: Array1<f64>,
}

/// Logistic sigmoid, split on the sign of `y` so `exp` never overflows.
#[inline]
pub fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^y)` without overflow.
#[inline]
pub fn softplus(y: f64) -> f64 {
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(y: f64) -> f64 {
    (-0.5 * y * y).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF, `(1 + erf(y/√2)) / 2` written through `erfc` so the
/// lower tail keeps full relative precision.
#[inline]
pub fn std_normal_cdf(y: f64) -> f64 {
    0.5 * erfc(-y * FRAC_1_SQRT_2)
}

#[inline]
pub(crate) fn eval_unchecked(kind: ActivationKind, y: f64) -> Evaluated {
    match kind {
        ActivationKind::Linear => Evaluated {
            f: y,
            d1: 1.0,
            d2: 0.0,
        },
        ActivationKind::Sigmoid => {
            let s = sigmoid(y);
            let d1 = s * (1.0 - s);
            Evaluated {
                f: s,
                d1,
                d2: (1.0 - 2.0 * s) * d1,
            }
        }
        ActivationKind::Tanh => {
            let t = y.tanh();
            let sech = 1.0 / y.cosh();
            let d1 = sech * sech;
            Evaluated {
                f: t,
                d1,
                d2: -2.0 * t * d1,
            }
        }
        ActivationKind::SmoothRelu => {
            let s = sigmoid(y);
            Evaluated {
                f: softplus(y),
                d1: s,
                d2: s * (1.0 - s),
            }
        }
        ActivationKind::Gelu => {
            let cdf = std_normal_cdf(y);
            let pdf = std_normal_pdf(y);
            Evaluated {
                f: y * cdf,
                d1: cdf + y * pdf,
                d2: pdf * (SQRT_2 - y) * (SQRT_2 + y),
            }
        }
    }
}

pub fn eval(kind: ActivationKind, y: f64) -> Result<Evaluated> {
    if !y.is_finite() {
        return Err(Error::Domain(format!(
            "activation {kind} evaluated at non-finite input {y}"
        )));
    }
    Ok(eval_unchecked(kind, y))
}

pub fn eval_vec(kind: ActivationKind, y: ArrayView1<'_, f64>) -> Result<EvaluatedVec> {
    let n = y.len();
    let mut out = EvaluatedVec {
        f: Array1::zeros(n),
        d1: Array1::zeros(n),
        d2: Array1::zeros(n),
    };
    for (i, &yi) in y.iter().enumerate() {
        let e = eval(kind, yi)?;
        out.f[i] = e.f;
        out.d1[i] = e.d1;
        out.d2[i] = e.d2;
    }
    Ok(out)
}

/// Extrema of `f'` and `f''` over the real line, plus the trace-bound constants.
///
/// `zeta1` is `sup f'(y)^2` and `zeta2` is `sup |f''(y)|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationProfile {
    pub kind: ActivationKind,
    pub f_prime_max: f64,
    /// Infimum of `f'`; negative for GELU.
    pub f_prime_inf: f64,
    pub f_second_max: f64,
    pub f_second_min: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    /// `sup |f(y)|`; infinite for unbounded activations.
    pub output_sup: f64,
}

pub fn profile(kind: ActivationKind) -> ActivationProfile {
    let sqrt3 = 3f64.sqrt();
    match kind {
        ActivationKind::Linear => ActivationProfile {
            kind,
            f_prime_max: 1.0,
            f_prime_inf: 1.0,
            f_second_max: 0.0,
            f_second_min: 0.0,
            zeta1: 1.0,
            zeta2: 0.0,
            output_sup: f64::INFINITY,
        },
        ActivationKind::Sigmoid => ActivationProfile {
            kind,
            f_prime_max: 0.25,
            f_prime_inf: 0.0,
            f_second_max: sqrt3 / 18.0,
            f_second_min: -sqrt3 / 18.0,
            zeta1: 1.0 / 16.0,
            zeta2: sqrt3 / 18.0,
            output_sup: 1.0,
        },
        ActivationKind::Tanh => ActivationProfile {
            kind,
            f_prime_max: 1.0,
            f_prime_inf: 0.0,
            f_second_max: 4.0 * sqrt3 / 9.0,
            f_second_min: -4.0 * sqrt3 / 9.0,
            zeta1: 1.0,
            zeta2: 4.0 * sqrt3 / 9.0,
            output_sup: 1.0,
        },
        ActivationKind::SmoothRelu => ActivationProfile {
            kind,
            f_prime_max: 1.0,
            f_prime_inf: 0.0,
            f_second_max: 0.25,
            f_second_min: 0.0,
            zeta1: 1.0,
            zeta2: 0.25,
            output_sup: f64::INFINITY,
        },
        ActivationKind::Gelu => {
            // f'' vanishes at ±√2, f''' at 0 and ±2.
            let d1_max = std_normal_cdf(SQRT_2) + SQRT_2 * std_normal_pdf(SQRT_2);
            let d1_min = std_normal_cdf(-SQRT_2) - SQRT_2 * std_normal_pdf(-SQRT_2);
            let d2_max = 2.0 * std_normal_pdf(0.0);
            let d2_min = std_normal_pdf(2.0) * (SQRT_2 - 2.0) * (SQRT_2 + 2.0);
            ActivationProfile {
                kind,
                f_prime_max: d1_max,
                f_prime_inf: d1_min,
                f_second_max: d2_max,
                f_second_min: d2_min,
                zeta1: d1_max * d1_max,
                zeta2: d2_max,
                output_sup: f64::INFINITY,
            }
        }
    }
}
