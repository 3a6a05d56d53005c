//! Upper bound on the largest Hessian eigenvalue from `tr(H)` and `tr(H²)`,
//! and the dense eigensolver used to check it.
//!
//! With `μ = tr(H)/D` and `σ² = tr(H²)/D − μ²`, every eigenvalue satisfies
//! `λ₁ ≤ λ_sup = μ + √(D−1)·σ`, with equality when exactly one eigenvalue is
//! nonzero and positive.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::network::{BatchTrace, NetworkParams};
use crate::traces::{check_batch, dot, pair_blocks, trace_bundle};

/// Largest tolerated negative round-off in `σ²`, relative to `tr(H²)`.
pub const SIGMA2_CLAMP_RTOL: f64 = 1e-8;
/// Jacobi stops once `off(A) < JACOBI_RTOL·‖A‖_F`.
pub const JACOBI_RTOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Symmetry tolerance on the max-norm, relative to `max(1, max|A|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub mu: f64,
    pub sigma2: f64,
    pub lambda_sup: f64,
}

pub fn lambda_sup_closed_form(tr_total: f64, tr_sq_total: f64, dim: usize) -> Result<BoundTerms> {
    if dim == 0 {
        return Err(Error::Domain("bound needs a positive dimension".into()));
    }
    if !tr_total.is_finite() || !tr_sq_total.is_finite() {
        return Err(Error::Numeric {
            stage: "trace inputs to the eigenvalue bound".into(),
            value: if tr_total.is_finite() { tr_sq_total } else { tr_total },
        });
    }
    let d = dim as f64;
    let scale = tr_sq_total.abs().max(tr_total * tr_total / d);
    if tr_sq_total < -SIGMA2_CLAMP_RTOL * scale {
        return Err(Error::Domain(format!("tr(H²) must be nonnegative, got {tr_sq_total}")));
    }
    let mu = tr_total / d;
    let raw = tr_sq_total / d - mu * mu;
    if raw < -SIGMA2_CLAMP_RTOL * scale / d {
        return Err(Error::Inconsistent(format!(
            "eigenvalue variance {raw} is negative beyond round-off (tr = {tr_total}, tr² = {tr_sq_total}, D = {dim})"
        )));
    }
    let sigma2 = raw.max(0.0);
    Ok(BoundTerms {
        mu,
        sigma2,
        lambda_sup: mu + ((d - 1.0) * sigma2).sqrt(),
    })
}

/// Eigenpairs sorted by descending eigenvalue; column `k` of `vectors`
/// belongs to `values[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

fn check_symmetric(a: ArrayView2<'_, f64>) -> Result<usize> {
    check_len("square matrix", a.nrows(), a.ncols())?;
    let d = a.nrows();
    let max_abs = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !max_abs.is_finite() {
        return Err(Error::Numeric {
            stage: "matrix entry".into(),
            value: max_abs,
        });
    }
    let tol = SYMMETRY_TOL * max_abs.max(1.0);
    for r in 0..d {
        for c in r + 1..d {
            let gap = (a[[r, c]] - a[[c, r]]).abs();
            if gap > tol {
                return Err(Error::Contract(format!(
                    "matrix is not symmetric: |A[{r},{c}] − A[{c},{r}]| = {gap}"
                )));
            }
        }
    }
    Ok(d)
}

/// Cyclic Jacobi rotations on a dense symmetric matrix.
pub fn jacobi_eigen(matrix: ArrayView2<'_, f64>) -> Result<SymmetricEigen> {
    let d = check_symmetric(matrix)?;
    let mut a = matrix.to_owned();
    let mut v = Array2::<f64>::eye(d);
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for r in 0..d {
            for c in 0..d {
                if r != c {
                    s += a[[r, c]] * a[[r, c]];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) >= JACOBI_RTOL * norm && norm > 0.0 {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric {
                stage: "Jacobi off-diagonal norm after max sweeps".into(),
                value: off(&a),
            });
        }
        sweeps += 1;
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + tau.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for k in 0..d {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::zeros((d, d));
    for (col, &i) in order.iter().enumerate() {
        vectors.column_mut(col).assign(&v.column(i));
    }
    Ok(SymmetricEigen { values, vectors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub lambda1: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub lambda_sup: f64,
    /// `λ_D ≥ −10⁻⁸·max(1, |λ₁|)`.
    pub psd: bool,
    pub tr_total: f64,
    pub tr_sq_total: f64,
}

impl SpectrumReport {
    pub fn psd_tolerance(lambda1: f64) -> f64 {
        1e-8 * lambda1.abs().max(1.0)
    }

    /// `λ₁ ≤ λ_sup + 10⁻⁹·max(1, |λ_sup|)`.
    pub fn bound_holds(&self) -> bool {
        self.lambda1 <= self.lambda_sup + 1e-9 * self.lambda_sup.abs().max(1.0)
    }
}

/// Numeric spectrum of `matrix` next to the closed-form bound from the
/// supplied traces.
pub fn spectrum_report(
    matrix: ArrayView2<'_, f64>,
    tr_total: f64,
    tr_sq_total: f64,
) -> Result<SpectrumReport> {
    let eig = jacobi_eigen(matrix)?;
    let dim = eig.values.len();
    let terms = lambda_sup_closed_form(tr_total, tr_sq_total, dim)?;
    let lambda1 = eig.values[0];
    let lambda_min = eig.values[dim - 1];
    Ok(SpectrumReport {
        eigenvalues: eig.values.to_vec(),
        lambda1,
        mu: terms.mu,
        sigma2: terms.sigma2,
        lambda_sup: terms.lambda_sup,
        psd: lambda_min >= -SpectrumReport::psd_tolerance(lambda1),
        tr_total,
        tr_sq_total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlatnessCheck {
    pub max_abs_delta: f64,
    pub lambda_sup: f64,
    /// Instance constant `C` with `λ_sup ≤ C·max|δ_i|`.
    pub constant: f64,
    pub holds: bool,
}

/// When every residual is below `eps`, checks `λ_sup ≤ C·eps`.
///
/// `C = C₁/D + √((D−1)·C₂/D)` follows from `s'(z) ≤ |δ|`, which bounds
/// `|tr H| ≤ C₁·max|δ|` and `tr(H²) ≤ C₂·max|δ|²`. Vacuously true when some
/// `|δ_i| ≥ eps`.
pub fn asymptotic_flatness_check(
    params: &NetworkParams,
    batch: &BatchTrace,
    eps: f64,
) -> Result<FlatnessCheck> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    check_batch(params, batch)?;
    let samples = batch.len();
    let vt = params.v_tilde();
    let dim = params.shape.dim();
    let d = dim as f64;

    let mut c1 = 0.0;
    for i in 0..samples {
        let x = batch.x.column(i);
        let r = batch.r.column(i);
        let f1 = batch.f1.row(i);
        let a_sq: f64 = f1.iter().zip(vt.iter()).map(|(g, v)| (g * v) * (g * v)).sum();
        c1 += (1.0 + dot(x, x)) * (a_sq + dot(vt, batch.f2.row(i)).abs()) + (1.0 + dot(r, r));
    }
    let mut c2 = 0.0;
    for i in 0..samples {
        for j in 0..samples {
            let (phi_block, psi_block, rr) = pair_blocks(batch, vt, i, j);
            let xx = 1.0 + dot(batch.x.column(i), batch.x.column(j));
            let phi_abs: f64 = phi_block.iter().map(|v| v.abs()).sum();
            let psi_abs: f64 = psi_block.iter().map(|v| v.abs()).sum();
            c2 += phi_abs * xx * xx + 2.0 * psi_abs * xx.abs() + rr * rr;
        }
    }
    let constant = c1 / d + ((d - 1.0) * c2 / d).sqrt();

    let traces = trace_bundle(batch, params)?;
    let terms = lambda_sup_closed_form(traces.tr_total, traces.tr_sq_total, dim)?;
    let max_abs_delta = batch.delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let holds = max_abs_delta >= eps || terms.lambda_sup <= constant * eps;
    Ok(FlatnessCheck {
        max_abs_delta,
        lambda_sup: terms.lambda_sup,
        constant,
        holds,
    })
}
