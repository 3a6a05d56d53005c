//! Binary cross-entropy and its analytic gradient in θ-layout.

use ndarray::{s, Array1, ArrayView1};

use crate::activations::{eval_unchecked, softplus, ActivationKind};
use crate::error::{check_finite, check_len, Error, Result};
use crate::network::{check_label, output_terms, Dataset, ForwardTrace, NetworkParams};

/// `∂l/∂θ = [∂l/∂w; ∂l/∂v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub g: Array1<f64>,
    w_len: usize,
}

impl GradientVector {
    pub fn w_part(&self) -> ArrayView1<'_, f64> {
        self.g.slice(s![..self.w_len])
    }

    pub fn v_part(&self) -> ArrayView1<'_, f64> {
        self.g.slice(s![self.w_len..])
    }

    pub fn norm(&self) -> f64 {
        self.g.dot(&self.g).sqrt()
    }
}

/// Cross-entropy of one sample, `softplus(z) − q·z`.
pub fn loss(trace: &ForwardTrace, q: u8) -> Result<f64> {
    check_label(q)?;
    if !(trace.p > 0.0 && trace.p < 1.0) && trace.z.abs() < 30.0 {
        return Err(Error::Numeric {
            stage: "predicted probability".into(),
            value: trace.p,
        });
    }
    check_finite("sample loss", sample_loss(trace.z, q))
}

#[inline]
fn sample_loss(z: f64, q: u8) -> f64 {
    softplus(z) - f64::from(q) * z
}

/// Writes the gradient of one sample's loss into `g` and returns the loss.
/// `hidden` must hold `2N` scratch entries.
pub(crate) fn sample_grad_into(
    params: &NetworkParams,
    kind: ActivationKind,
    x: ArrayView1<'_, f64>,
    q: u8,
    hidden: &mut [f64],
    g: &mut [f64],
) -> Result<f64> {
    let n = params.shape.hidden;
    let (r, a) = hidden.split_at_mut(n);
    let mut z = params.v[0];
    for k in 0..n {
        let row = params.w.row(k);
        let mut y = row[0];
        for (m, &xm) in x.iter().enumerate() {
            y += row[m + 1] * xm;
        }
        let e = eval_unchecked(kind, y);
        r[k] = e.f;
        // f'(y) ⊙ Ṽᵀ
        a[k] = e.d1 * params.v[k + 1];
        z += params.v[k + 1] * e.f;
    }
    let z = check_finite("logit z", z)?;
    let (_, delta, _) = output_terms(z, q);

    for m in 0..=params.shape.inputs {
        let dx = if m == 0 { delta } else { delta * x[m - 1] };
        for k in 0..n {
            g[m * n + k] = dx * a[k];
        }
    }
    let w_len = params.shape.w_len();
    g[w_len] = delta;
    for k in 0..n {
        g[w_len + 1 + k] = delta * r[k];
    }
    Ok(sample_loss(z, q))
}

pub fn grad_single(
    params: &NetworkParams,
    kind: ActivationKind,
    x: ArrayView1<'_, f64>,
    q: u8,
) -> Result<GradientVector> {
    check_len("input vector", params.shape.inputs, x.len())?;
    check_label(q)?;
    let mut hidden = vec![0.0; 2 * params.shape.hidden];
    let mut g = Array1::zeros(params.shape.dim());
    let slice = g.as_slice_mut().expect("contiguous");
    sample_grad_into(params, kind, x, q, &mut hidden, slice)?;
    if let Some(d) = slice.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            stage: format!("gradient component {d}"),
            value: slice[d],
        });
    }
    Ok(GradientVector {
        g,
        w_len: params.shape.w_len(),
    })
}

/// Reusable buffers for repeated full-batch loss/gradient evaluation.
#[derive(Debug, Clone)]
pub struct GradWorkspace {
    hidden: Vec<f64>,
    sample: Vec<f64>,
}

impl GradWorkspace {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            hidden: vec![0.0; 2 * params.shape.hidden],
            sample: vec![0.0; params.shape.dim()],
        }
    }
}

/// Total loss and gradient, summed over samples in ascending index order.
/// `total` is overwritten.
pub fn loss_and_grad_total_into(
    params: &NetworkParams,
    kind: ActivationKind,
    data: &Dataset,
    ws: &mut GradWorkspace,
    total: &mut [f64],
) -> Result<f64> {
    check_len("dataset input dimension", params.shape.inputs, data.inputs())?;
    check_len("gradient buffer", params.shape.dim(), total.len())?;
    total.fill(0.0);
    let mut loss_sum = 0.0;
    for i in 0..data.len() {
        let (x, q) = data.sample(i);
        loss_sum += sample_grad_into(params, kind, x, q, &mut ws.hidden, &mut ws.sample)?;
        for (t, g) in total.iter_mut().zip(&ws.sample) {
            *t += g;
        }
    }
    check_finite("total loss", loss_sum)
}

pub fn total_loss(params: &NetworkParams, kind: ActivationKind, data: &Dataset) -> Result<f64> {
    check_len("dataset input dimension", params.shape.inputs, data.inputs())?;
    let n = params.shape.hidden;
    let mut sum = 0.0;
    for i in 0..data.len() {
        let (x, q) = data.sample(i);
        let mut z = params.v[0];
        for k in 0..n {
            let row = params.w.row(k);
            let mut y = row[0];
            for (m, &xm) in x.iter().enumerate() {
                y += row[m + 1] * xm;
            }
            z += params.v[k + 1] * eval_unchecked(kind, y).f;
        }
        sum += sample_loss(check_finite("logit z", z)?, q);
    }
    check_finite("total loss", sum)
}

pub fn grad_total(
    params: &NetworkParams,
    kind: ActivationKind,
    data: &Dataset,
) -> Result<GradientVector> {
    let mut ws = GradWorkspace::new(params);
    let mut g = Array1::zeros(params.shape.dim());
    loss_and_grad_total_into(params, kind, data, &mut ws, g.as_slice_mut().expect("contiguous"))?;
    Ok(GradientVector {
        g,
        w_len: params.shape.w_len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward, NetworkShape};
    use crate::testutil::{random_dataset, random_params};
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_grad_single(params: &NetworkParams, kind: ActivationKind, x: ArrayView1<f64>, q: u8, h: f64) -> Array1<f64> {
        let theta = params.flatten();
        let data = Dataset::new(x.to_owned().insert_axis(ndarray::Axis(1)), vec![q]).unwrap();
        Array1::from_shape_fn(theta.len(), |d| {
            let mut tp = theta.clone();
            tp[d] += h;
            let mut tm = theta.clone();
            tm[d] -= h;
            let lp = total_loss(&NetworkParams::unflatten(tp.as_slice().unwrap(), params.shape).unwrap(), kind, &data).unwrap();
            let lm = total_loss(&NetworkParams::unflatten(tm.as_slice().unwrap(), params.shape).unwrap(), kind, &data).unwrap();
            (lp - lm) / (2.0 * h)
        })
    }

    #[test]
    fn loss_at_half() {
        let params = NetworkParams::zeros(NetworkShape::new(1, 1).unwrap());
        for q in [0u8, 1] {
            let t = forward(&params, ActivationKind::Linear, array![0.3].view(), q).unwrap();
            assert_relative_eq!(loss(&t, q).unwrap(), 2f64.ln(), max_relative = 1e-15);
        }
    }

    #[test]
    fn loss_from_logit() {
        let params = NetworkParams::new(array![[0.0, 1.0]], array![0.0, 1.0]).unwrap();
        let t = forward(&params, ActivationKind::Sigmoid, array![0.0].view(), 0).unwrap();
        let expected = -(1.0 - 1.0 / (1.0 + (-0.5f64).exp())).ln();
        assert_relative_eq!(loss(&t, 0).unwrap(), expected, max_relative = 1e-14);
        assert!((expected - 0.97407).abs() < 1e-5);
        assert!(loss(&t, 3).is_err());
    }

    #[test]
    fn total_loss_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = NetworkShape::new(2, 3).unwrap();
        let params = random_params(shape, &mut rng, 2.0);
        let data = random_dataset(2, 7, &mut rng);
        let kind = ActivationKind::Sigmoid;

        let single = Dataset::new(data.x.slice(s![.., 0..1]).to_owned(), vec![data.q[0]]).unwrap();
        let t = forward(&params, kind, data.x.column(0), data.q[0]).unwrap();
        assert_eq!(total_loss(&params, kind, &single).unwrap(), loss(&t, data.q[0]).unwrap());

        let doubled = Dataset::new(
            ndarray::concatenate![ndarray::Axis(1), data.x, data.x],
            [data.q.clone(), data.q.clone()].concat(),
        )
        .unwrap();
        let l = total_loss(&params, kind, &data).unwrap();
        assert_relative_eq!(total_loss(&params, kind, &doubled).unwrap(), 2.0 * l, max_relative = 1e-14);

        let mut reversed = 0.0;
        for i in (0..data.len()).rev() {
            let t = forward(&params, kind, data.x.column(i), data.q[i]).unwrap();
            reversed += loss(&t, data.q[i]).unwrap();
        }
        assert!((reversed - l).abs() <= 1e-12);
    }

    #[test]
    fn gradient_partition_and_bias_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = NetworkShape::new(3, 2).unwrap();
        let params = random_params(shape, &mut rng, 2.0);
        let x = array![0.1, -0.4, 1.2];
        let g = grad_single(&params, ActivationKind::Tanh, x.view(), 1).unwrap();
        let t = forward(&params, ActivationKind::Tanh, x.view(), 1).unwrap();
        assert_eq!(g.w_part().len(), 8);
        assert_eq!(g.v_part().len(), 3);
        assert_eq!(g.v_part()[0], t.delta);
        for k in 0..2 {
            assert_eq!(g.v_part()[k + 1], t.delta * t.r[k]);
        }
    }

    #[test]
    fn linear_with_zero_output_weights() {
        let shape = NetworkShape::new(2, 3).unwrap();
        let mut params = NetworkParams::zeros(shape);
        params.w = Array2::from_elem((3, 3), 0.7);
        params.v[0] = 0.4;
        let x = array![1.0, -2.0];
        let g = grad_single(&params, ActivationKind::Linear, x.view(), 0).unwrap();
        let t = forward(&params, ActivationKind::Linear, x.view(), 0).unwrap();
        assert!(g.w_part().iter().all(|&v| v == 0.0));
        assert_eq!(g.v_part()[0], t.delta);
        for k in 0..3 {
            assert_eq!(g.v_part()[k + 1], t.delta * t.r[k]);
        }
    }

    #[test]
    fn tiny_network_against_central_differences() {
        let params = NetworkParams::new(array![[0.0, 1.0]], array![0.0, 1.0]).unwrap();
        let x = array![0.0];
        let g = grad_single(&params, ActivationKind::Sigmoid, x.view(), 0).unwrap();
        let fd = fd_grad_single(&params, ActivationKind::Sigmoid, x.view(), 0, 1e-6);
        for (a, b) in g.g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn random_gradients_against_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for draw in 0..100 {
            let kind = ActivationKind::ALL[draw % 5];
            let shape = NetworkShape::new(rng.random_range(1..4), rng.random_range(1..5)).unwrap();
            let params = random_params(shape, &mut rng, 2.0);
            let x: Array1<f64> = (0..shape.inputs).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = rng.random_range(0..2u8);
            let g = grad_single(&params, kind, x.view(), q).unwrap();
            let fd = fd_grad_single(&params, kind, x.view(), q, 1e-6);
            let err = g.g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "draw {draw} {kind}: {err}");
        }
    }

    #[test]
    fn total_gradient_is_ordered_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = NetworkShape::new(2, 3).unwrap();
        let params = random_params(shape, &mut rng, 2.0);
        let data = random_dataset(2, 9, &mut rng);
        for kind in ActivationKind::ALL {
            let total = grad_total(&params, kind, &data).unwrap();
            let mut sum = Array1::<f64>::zeros(shape.dim());
            for i in 0..data.len() {
                let (x, q) = data.sample(i);
                let gi = grad_single(&params, kind, x, q).unwrap();
                for (s, g) in sum.iter_mut().zip(&gi.g) {
                    *s += g;
                }
            }
            assert_eq!(total.g, sum, "{kind}");
        }
    }

    #[test]
    fn gradient_is_linear_in_residual() {
        // q=1 vs q=0 at the same point differ only through δ, which shifts by exactly -1
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = NetworkShape::new(2, 2).unwrap();
        let params = random_params(shape, &mut rng, 1.0);
        let x = array![0.3, 0.9];
        let g0 = grad_single(&params, ActivationKind::Gelu, x.view(), 0).unwrap();
        let g1 = grad_single(&params, ActivationKind::Gelu, x.view(), 1).unwrap();
        let t0 = forward(&params, ActivationKind::Gelu, x.view(), 0).unwrap();
        let t1 = forward(&params, ActivationKind::Gelu, x.view(), 1).unwrap();
        for (a, b) in g0.g.iter().zip(&g1.g) {
            assert_relative_eq!(a * t1.delta, b * t0.delta, max_relative = 1e-12, epsilon = 1e-15);
        }
    }
}
