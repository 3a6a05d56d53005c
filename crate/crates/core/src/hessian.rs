//! Analytic block Hessian of the cross-entropy loss.
//!
//! Per sample, with `a = f'(y) ⊙ Ṽᵀ`:
//!
//! ```text
//! H(w,w) = h(x)h(x)ᵀ ⊗ (s'(z)·a aᵀ + δ·diag(Ṽᵀ ⊙ f''(y)))
//! H(v,v) = s'(z)·h(r)h(r)ᵀ
//! H(w,v) = h(x) ⊗ (s'(z)·a h(r)ᵀ + δ·[0 | diag(f'(y))])
//! H(v,w) = H(w,v)ᵀ
//! ```
//!
//! Kronecker products are expanded so that row/column `m·N + n` corresponds
//! to `W[n, m]`, the same layout as the flattened parameter vector.

use std::io::Write;

use ndarray::{s, Array2, ArrayView1, ArrayView2};

use crate::activations::ActivationKind;
use crate::error::{check_len, Result};
use crate::network::{forward, Dataset, ForwardTrace, NetworkParams, NetworkShape};

#[derive(Debug, Clone, PartialEq)]
pub struct HessianBundle {
    pub hww: Array2<f64>,
    pub hwv: Array2<f64>,
    pub hvw: Array2<f64>,
    pub hvv: Array2<f64>,
    /// The full `D × D` matrix `[[Hww, Hwv], [Hvw, Hvv]]`.
    pub assembled: Array2<f64>,
}

impl HessianBundle {
    fn zeros(shape: NetworkShape) -> Self {
        let (wl, vl) = (shape.w_len(), shape.v_len());
        Self {
            hww: Array2::zeros((wl, wl)),
            hwv: Array2::zeros((wl, vl)),
            hvw: Array2::zeros((vl, wl)),
            hvv: Array2::zeros((vl, vl)),
            assembled: Array2::zeros((shape.dim(), shape.dim())),
        }
    }

    fn add_assign(&mut self, other: &HessianBundle) {
        self.hww += &other.hww;
        self.hwv += &other.hwv;
        self.hvw += &other.hvw;
        self.hvv += &other.hvv;
        self.assembled += &other.assembled;
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_matrix_csv(self.assembled.view(), writer)
    }
}

/// Hessian of one sample's loss given its forward trace.
pub fn sample_hessian(
    params: &NetworkParams,
    trace: &ForwardTrace,
    x: ArrayView1<'_, f64>,
) -> Result<HessianBundle> {
    let shape = params.shape;
    check_len("input vector", shape.inputs, x.len())?;
    check_len("hidden width", shape.hidden, trace.r.len())?;
    let n = shape.hidden;
    let wl = shape.w_len();
    let vl = shape.v_len();
    let (s1, delta) = (trace.s1, trace.delta);

    let hx: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
    let hr: Vec<f64> = std::iter::once(1.0).chain(trace.r.iter().copied()).collect();
    let vt = params.v_tilde();
    let a: Vec<f64> = (0..n).map(|k| trace.f1[k] * vt[k]).collect();

    // N×N core, upper triangle then mirrored
    let mut core = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        core[[i, i]] = s1 * a[i] * a[i] + delta * (vt[i] * trace.f2[i]);
        for j in i + 1..n {
            let v = s1 * a[i] * a[j];
            core[[i, j]] = v;
            core[[j, i]] = v;
        }
    }

    let mut out = HessianBundle::zeros(shape);
    for row in 0..wl {
        let (m, i) = (row / n, row % n);
        for col in row..wl {
            let (m2, j) = (col / n, col % n);
            let v = (hx[m] * hx[m2]) * core[[i, j]];
            out.hww[[row, col]] = v;
            out.hww[[col, row]] = v;
        }
    }

    for row in 0..wl {
        let (m, i) = (row / n, row % n);
        for k in 0..vl {
            let mut inner = s1 * a[i] * hr[k];
            if k == i + 1 {
                inner += delta * trace.f1[i];
            }
            out.hwv[[row, k]] = hx[m] * inner;
        }
    }

    for k in 0..vl {
        for col in 0..wl {
            let (m, j) = (col / n, col % n);
            let mut inner = s1 * a[j] * hr[k];
            if k == j + 1 {
                inner += delta * trace.f1[j];
            }
            out.hvw[[k, col]] = hx[m] * inner;
        }
    }

    for k in 0..vl {
        for l in k..vl {
            let v = s1 * hr[k] * hr[l];
            out.hvv[[k, l]] = v;
            out.hvv[[l, k]] = v;
        }
    }

    let asm = &mut out.assembled;
    for r in 0..wl {
        for c in r..wl {
            asm[[r, c]] = out.hww[[r, c]];
        }
        for k in 0..vl {
            asm[[r, wl + k]] = out.hwv[[r, k]];
        }
    }
    for k in 0..vl {
        for l in k..vl {
            asm[[wl + k, wl + l]] = out.hvv[[k, l]];
        }
    }
    mirror_upper(asm);
    Ok(out)
}

fn mirror_upper(a: &mut Array2<f64>) {
    let d = a.nrows();
    for r in 0..d {
        for c in r + 1..d {
            a[[c, r]] = a[[r, c]];
        }
    }
}

pub fn hessian_single(
    params: &NetworkParams,
    kind: ActivationKind,
    x: ArrayView1<'_, f64>,
    q: u8,
) -> Result<HessianBundle> {
    let trace = forward(params, kind, x, q)?;
    sample_hessian(params, &trace, x)
}

/// Sum of per-sample Hessians in ascending sample order.
pub fn hessian_total(
    params: &NetworkParams,
    kind: ActivationKind,
    data: &Dataset,
) -> Result<HessianBundle> {
    check_len("dataset input dimension", params.shape.inputs, data.inputs())?;
    let mut total = HessianBundle::zeros(params.shape);
    for i in 0..data.len() {
        let (x, q) = data.sample(i);
        total.add_assign(&hessian_single(params, kind, x, q)?);
    }
    Ok(total)
}

/// Row-major CSV without a header; values use the shortest round-trip form.
pub fn write_matrix_csv<W: Write>(m: ArrayView2<'_, f64>, mut writer: W) -> Result<()> {
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(writer, "{}", line.join(","))?;
    }
    Ok(())
}

/// Block-diagonal traces `(tr Hww, tr Hvv)`.
pub fn block_traces(bundle: &HessianBundle) -> (f64, f64) {
    (bundle.hww.diag().sum(), bundle.hvv.diag().sum())
}

/// View of one block of the assembled matrix; `true` selects the `w` rows/columns.
pub fn assembled_block(bundle: &HessianBundle, shape: NetworkShape, w_rows: bool, w_cols: bool) -> ArrayView2<'_, f64> {
    let wl = shape.w_len();
    let dim = shape.dim();
    let rows = if w_rows { 0..wl } else { wl..dim };
    let cols = if w_cols { 0..wl } else { wl..dim };
    bundle.assembled.slice(s![rows, cols])
}
