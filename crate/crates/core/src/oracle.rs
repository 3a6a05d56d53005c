//! Finite-difference derivatives and brute-force matrix functionals used as
//! independent ground truth for the analytic code paths.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{check_finite, check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub h_grad: f64,
    pub h_hess: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h_grad: 1e-6,
            h_hess: 1e-4,
        }
    }
}

impl FdConfig {
    pub fn new(h_grad: f64, h_hess: f64) -> Result<Self> {
        if !(h_grad > 0.0 && h_hess > 0.0 && h_grad.is_finite() && h_hess.is_finite()) {
            return Err(Error::Domain(format!(
                "finite-difference steps must be positive, got {h_grad} and {h_hess}"
            )));
        }
        Ok(Self { h_grad, h_hess })
    }
}

fn eval<F>(lossfn: &mut F, theta: &[f64], coord: usize) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_finite(format!("finite difference along coordinate {coord}"), lossfn(theta)?)
}

/// Central differences `(l(θ+h e_d) − l(θ−h e_d)) / 2h`.
pub fn fd_gradient<F>(mut lossfn: F, theta: &[f64], cfg: &FdConfig) -> Result<Array1<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let h = cfg.h_grad;
    let mut point = theta.to_vec();
    let mut g = Array1::zeros(theta.len());
    for d in 0..theta.len() {
        point[d] = theta[d] + h;
        let up = eval(&mut lossfn, &point, d)?;
        point[d] = theta[d] - h;
        let down = eval(&mut lossfn, &point, d)?;
        point[d] = theta[d];
        g[d] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Hessian by second differences, symmetrized by averaging.
///
/// Off-diagonal entries use the four-point stencil, diagonal entries the
/// three-point second difference.
pub fn fd_hessian<F>(lossfn: F, theta: &[f64], cfg: &FdConfig) -> Result<Array2<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let raw = fd_hessian_raw(lossfn, theta, cfg)?;
    Ok((&raw + &raw.t()) * 0.5)
}

/// The unsymmetrized stencil output; `(a,b)` and `(b,a)` are evaluated separately.
pub fn fd_hessian_raw<F>(mut lossfn: F, theta: &[f64], cfg: &FdConfig) -> Result<Array2<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let h = cfg.h_hess;
    let dim = theta.len();
    let mut point = theta.to_vec();
    let center = eval(&mut lossfn, &point, 0)?;
    let mut out = Array2::zeros((dim, dim));
    for a in 0..dim {
        point[a] = theta[a] + h;
        let up = eval(&mut lossfn, &point, a)?;
        point[a] = theta[a] - h;
        let down = eval(&mut lossfn, &point, a)?;
        point[a] = theta[a];
        out[[a, a]] = (up - 2.0 * center + down) / (h * h);

        for b in 0..dim {
            if b == a {
                continue;
            }
            let mut corner = |sa: f64, sb: f64| -> Result<f64> {
                point[a] = theta[a] + sa * h;
                point[b] = theta[b] + sb * h;
                let v = eval(&mut lossfn, &point, a);
                point[a] = theta[a];
                point[b] = theta[b];
                v
            };
            let pp = corner(1.0, 1.0)?;
            let pm = corner(1.0, -1.0)?;
            let mp = corner(-1.0, 1.0)?;
            let mm = corner(-1.0, -1.0)?;
            out[[a, b]] = (pp - pm - mp + mm) / (4.0 * h * h);
        }
    }
    Ok(out)
}

fn check_square(a: ArrayView2<'_, f64>) -> Result<usize> {
    check_len("square matrix", a.nrows(), a.ncols())?;
    Ok(a.nrows())
}

pub fn matrix_trace(a: ArrayView2<'_, f64>) -> Result<f64> {
    let d = check_square(a)?;
    let mut acc = 0.0;
    for i in 0..d {
        acc += a[[i, i]];
    }
    Ok(acc)
}

/// `Σ_{a,b} A_ab A_ba` without forming `A²`.
pub fn matrix_sq_trace(a: ArrayView2<'_, f64>) -> Result<f64> {
    let d = check_square(a)?;
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            acc += a[[i, j]] * a[[j, i]];
        }
    }
    Ok(acc)
}

pub fn frobenius_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_len("matrix rows", a.nrows(), b.nrows())?;
    check_len("matrix columns", a.ncols(), b.ncols())?;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationKind;
    use crate::loss_grad::{grad_total, total_loss};
    use crate::network::{NetworkParams, NetworkShape};
    use crate::testutil::{random_dataset, random_params};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sq_norm(t: &[f64]) -> Result<f64> {
        Ok(t.iter().map(|v| v * v).sum())
    }

    #[test]
    fn quadratic_gradient() {
        let cfg = FdConfig::default();
        let g = fd_gradient(sq_norm, &[0.0; 4], &cfg).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = fd_gradient(sq_norm, &[1.0, 0.0, 0.0], &cfg).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!(g[1].abs() < 1e-12 && g[2].abs() < 1e-12);
    }

    #[test]
    fn quadratic_hessian_recovers_matrix() {
        let a = array![[2.0, 0.5, -0.3], [0.5, 1.0, 0.2], [-0.3, 0.2, 3.0]];
        let f = |t: &[f64]| {
            let v = Array1::from(t.to_vec());
            Ok(0.5 * v.dot(&a.dot(&v)))
        };
        let h = fd_hessian(f, &[0.3, -0.7, 1.1], &FdConfig::default()).unwrap();
        let err = h.iter().zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err}");
        assert_eq!(h, h.t());
    }

    #[test]
    fn network_gradient_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in ActivationKind::ALL {
            let shape = NetworkShape::new(2, 3).unwrap();
            let params = random_params(shape, &mut rng, 2.0);
            let data = random_dataset(2, 6, &mut rng);
            let f = |t: &[f64]| total_loss(&NetworkParams::unflatten(t, shape)?, kind, &data);
            let fd = fd_gradient(f, params.flatten().as_slice().unwrap(), &FdConfig::default()).unwrap();
            let g = grad_total(&params, kind, &data).unwrap();
            let err = fd.iter().zip(g.g.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "{kind}: {err}");
        }
    }

    #[test]
    fn gradient_error_shrinks_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let shape = NetworkShape::new(2, 3).unwrap();
        let params = random_params(shape, &mut rng, 1.0);
        let data = random_dataset(2, 5, &mut rng);
        let kind = ActivationKind::Tanh;
        let g = grad_total(&params, kind, &data).unwrap();
        let theta = params.flatten().to_vec();
        let err_at = |h: f64| {
            let f = |t: &[f64]| total_loss(&NetworkParams::unflatten(t, shape)?, kind, &data);
            let fd = fd_gradient(f, &theta, &FdConfig::new(h, 1e-4).unwrap()).unwrap();
            fd.iter().zip(g.g.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let ratio = err_at(2e-3) / err_at(1e-3);
        assert!((2.5..6.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn raw_stencil_is_nearly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let shape = NetworkShape::new(2, 3).unwrap();
        let params = random_params(shape, &mut rng, 2.0);
        let data = random_dataset(2, 5, &mut rng);
        let f = |t: &[f64]| total_loss(&NetworkParams::unflatten(t, shape)?, ActivationKind::Sigmoid, &data);
        let raw = fd_hessian_raw(f, params.flatten().as_slice().unwrap(), &FdConfig::default()).unwrap();
        let asym = raw.iter().zip(raw.t().iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(asym < 1e-6, "{asym}");
    }

    #[test]
    fn non_finite_evaluation_names_coordinate() {
        let f = |t: &[f64]| Ok(if t[1] > 0.5 { f64::NAN } else { 0.0 });
        let err = fd_gradient(f, &[0.0, 0.5], &FdConfig::default()).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
        assert!(FdConfig::new(0.0, 1e-4).is_err());
    }

    #[test]
    fn matrix_functionals() {
        let eye = Array2::<f64>::eye(13);
        assert_eq!(matrix_trace(eye.view()).unwrap(), 13.0);
        assert_eq!(matrix_sq_trace(eye.view()).unwrap(), 13.0);
        let z = Array2::<f64>::zeros((4, 4));
        assert_eq!(matrix_trace(z.view()).unwrap(), 0.0);
        assert_eq!(matrix_sq_trace(z.view()).unwrap(), 0.0);
        assert_eq!(frobenius_diff(z.view(), z.view()).unwrap(), 0.0);
        assert!(matrix_trace(Array2::<f64>::zeros((2, 3)).view()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let direct: f64 = (&a - &b).mapv(|v: f64| v * v).sum().sqrt();
        assert!((frobenius_diff(a.view(), b.view()).unwrap() - direct).abs() <= 1e-12);
        let sq = a.dot(&a).diag().sum();
        assert!((matrix_sq_trace(a.view()).unwrap() - sq).abs() <= 1e-12);
    }
}
