//! Closed forms for `tr(H)` and `tr(H²)` that never build the Hessian, and
//! the upper bounds derived from them.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::Serialize;

use crate::activations::{ActivationKind, ActivationProfile};
use crate::error::{check_len, Result};
use crate::hessian::write_matrix_csv;
use crate::network::{BatchTrace, NetworkParams};

/// Relative slack used when comparing traces against their exact limits.
pub const SANDWICH_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceBundle {
    pub tr_ww: f64,
    pub tr_vv: f64,
    pub tr_total: f64,
    pub tr_sq_total: f64,
    /// `φ_ij = o_iᵀ Φ_ij o_j` with `o_i = [s'(z_i); δ_i]`.
    #[serde(skip)]
    pub phi: Array2<f64>,
    #[serde(skip)]
    pub psi: Array2<f64>,
    /// `ω_ij = s'(z_i)·s'(z_j)`.
    #[serde(skip)]
    pub omega: Array2<f64>,
}

impl TraceBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `phi.csv`, `psi.csv` and `omega.csv` into `dir`.
    pub fn write_matrices(&self, dir: &Path) -> Result<()> {
        for (name, m) in [("phi", &self.phi), ("psi", &self.psi), ("omega", &self.omega)] {
            let file = std::fs::File::create(dir.join(format!("{name}.csv")))?;
            let mut w = std::io::BufWriter::new(file);
            write_matrix_csv(m.view(), &mut w)?;
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceBounds {
    /// `+∞` unless the activation is bounded in `(-1, 1)`.
    pub ub_tr_vv: f64,
    /// Uses `ζ₂‖Ṽ‖₁`, valid for any sign pattern of `Ṽ`.
    pub ub_tr_ww: f64,
    /// Same bound with `ζ₂|Σ Ṽ_n|`; not an upper bound when `Ṽ` mixes signs.
    pub ub_tr_ww_signed_sum: f64,
    pub ub_tr_sq: f64,
    pub phi_max: f64,
}

pub(crate) fn check_batch(params: &NetworkParams, batch: &BatchTrace) -> Result<()> {
    check_len("batch input dimension", params.shape.inputs, batch.x.nrows())?;
    check_len("batch hidden width", params.shape.hidden, batch.r.nrows())?;
    check_len("batch sample count", batch.len(), batch.x.ncols())
}

pub(crate) fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `(tr_ww, tr_vv, tr_total)` from per-sample sums.
pub fn trace_closed_form(batch: &BatchTrace, params: &NetworkParams) -> Result<(f64, f64, f64)> {
    check_batch(params, batch)?;
    let vt = params.v_tilde();
    let mut tr_ww = 0.0;
    let mut tr_vv = 0.0;
    for i in 0..batch.len() {
        let x = batch.x.column(i);
        let r = batch.r.column(i);
        let f1 = batch.f1.row(i);
        let f2 = batch.f2.row(i);
        let s = batch.s1[i];
        let a_sq: f64 = f1.iter().zip(vt.iter()).map(|(d, v)| (d * v) * (d * v)).sum();
        tr_ww += (1.0 + dot(x, x)) * (s * a_sq + batch.delta[i] * dot(vt, f2));
        tr_vv += s * (1.0 + dot(r, r));
    }
    Ok((tr_ww, tr_vv, tr_ww + tr_vv))
}

/// Entries `[(·)₁₁, (·)₁₂, (·)₂₁, (·)₂₂]` of the 2×2 blocks `Φ_ij` and `Ψ_ij`,
/// plus `1 + r_iᵀr_j`.
pub(crate) fn pair_blocks(
    batch: &BatchTrace,
    vt: ArrayView1<'_, f64>,
    i: usize,
    j: usize,
) -> ([f64; 4], [f64; 4], f64) {
    let (f1i, f2i, ri) = (batch.f1.row(i), batch.f2.row(i), batch.r.column(i));
    let (f1j, f2j, rj) = (batch.f1.row(j), batch.f2.row(j), batch.r.column(j));
    let mut vff = 0.0; // Ṽ F'_j F'_i Ṽᵀ
    let (mut p12, mut p21, mut p22) = (0.0, 0.0, 0.0);
    let (mut q12, mut q21, mut q22) = (0.0, 0.0, 0.0);
    for k in 0..vt.len() {
        let v = vt[k];
        vff += v * f1j[k] * f1i[k] * v;
        p12 += v * f1i[k] * v * f2j[k] * f1i[k] * v;
        p21 += v * f1j[k] * v * f2i[k] * f1j[k] * v;
        p22 += v * f2i[k] * f2j[k] * v;
        q12 += ri[k] * f1j[k] * f1i[k] * v;
        q21 += v * f1j[k] * f1i[k] * rj[k];
        q22 += f1i[k] * f1j[k];
    }
    let rr = 1.0 + dot(ri, rj);
    ([vff * vff, p12, p21, p22], [rr * vff, q12, q21, q22], rr)
}

#[inline]
fn bilinear(block: &[f64; 4], si: f64, di: f64, sj: f64, dj: f64) -> f64 {
    si * block[0] * sj + si * block[1] * dj + di * block[2] * sj + di * block[3] * dj
}

/// `(tr(H²), Φ, Ψ, Ω)` accumulated as double sums over sample pairs.
pub fn trace_sq_closed_form(
    batch: &BatchTrace,
    params: &NetworkParams,
) -> Result<(f64, Array2<f64>, Array2<f64>, Array2<f64>)> {
    check_batch(params, batch)?;
    let samples = batch.len();
    let vt = params.v_tilde();
    let mut phi = Array2::zeros((samples, samples));
    let mut psi = Array2::zeros((samples, samples));
    let mut omega = Array2::zeros((samples, samples));
    let mut total = 0.0;
    for i in 0..samples {
        let (si, di) = (batch.s1[i], batch.delta[i]);
        for j in 0..samples {
            let (sj, dj) = (batch.s1[j], batch.delta[j]);
            let (phi_block, psi_block, rr) = pair_blocks(batch, vt, i, j);
            let ph = bilinear(&phi_block, si, di, sj, dj);
            let ps = bilinear(&psi_block, si, di, sj, dj);
            let om = si * sj;
            phi[[i, j]] = ph;
            psi[[i, j]] = ps;
            omega[[i, j]] = om;

            let xx = 1.0 + dot(batch.x.column(i), batch.x.column(j));
            total += ph * xx * xx + 2.0 * ps * xx + om * rr * rr;
        }
    }
    Ok((total, phi, psi, omega))
}

/// Both closed forms bundled.
pub fn trace_bundle(batch: &BatchTrace, params: &NetworkParams) -> Result<TraceBundle> {
    let (tr_ww, tr_vv, tr_total) = trace_closed_form(batch, params)?;
    let (tr_sq_total, phi, psi, omega) = trace_sq_closed_form(batch, params)?;
    Ok(TraceBundle {
        tr_ww,
        tr_vv,
        tr_total,
        tr_sq_total,
        phi,
        psi,
        omega,
    })
}

/// `J_I + XᵀX` for the columns of `x`.
pub fn gram_plus_ones(x: &Array2<f64>) -> Array2<f64> {
    x.t().dot(x) + 1.0
}

/// `⟨Φ, G_x^⊙2⟩ + 2⟨Ψ, G_x⟩ + ⟨Ω, G_r^⊙2⟩`, computed with whole-matrix products.
pub fn trace_sq_matrix_form(bundle: &TraceBundle, batch: &BatchTrace) -> f64 {
    let gx = gram_plus_ones(&batch.x);
    let gr = gram_plus_ones(&batch.r);
    let frob = |a: &Array2<f64>, b: &Array2<f64>| (a * b).sum();
    frob(&bundle.phi, &(&gx * &gx)) + 2.0 * frob(&bundle.psi, &gx) + frob(&bundle.omega, &(&gr * &gr))
}

pub fn trace_bounds(
    profile: &ActivationProfile,
    params: &NetworkParams,
    bundle: &TraceBundle,
    batch: &BatchTrace,
) -> Result<TraceBounds> {
    check_batch(params, batch)?;
    let samples = batch.len() as f64;
    let hidden = params.shape.hidden as f64;
    let vt = params.v_tilde();

    let ub_tr_vv = if profile.kind.is_saturating() {
        0.25 * samples * (hidden + 1.0)
    } else {
        f64::INFINITY
    };

    let diag_sum: f64 = (0..batch.len())
        .map(|i| 1.0 + dot(batch.x.column(i), batch.x.column(i)))
        .sum();
    let v_sq: f64 = vt.iter().map(|v| v * v).sum();
    let v_abs: f64 = vt.iter().map(|v| v.abs()).sum();
    let v_signed: f64 = vt.sum();
    let ub_tr_ww = (0.25 * profile.zeta1 * v_sq + profile.zeta2 * v_abs) * diag_sum;
    let ub_tr_ww_signed_sum = (0.25 * profile.zeta1 * v_sq + profile.zeta2 * v_signed.abs()) * diag_sum;

    let phi_max = bundle.phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let psi_sq: f64 = bundle.psi.iter().map(|v| v * v).sum();
    let gx = gram_plus_ones(&batch.x);
    let gr = gram_plus_ones(&batch.r);
    let gx_sq: f64 = gx.iter().map(|v| v * v).sum();
    let gr_sq: f64 = gr.iter().map(|v| v * v).sum();
    let ub_tr_sq = psi_sq + (1.0 + phi_max) * gx_sq + gr_sq / 16.0;

    Ok(TraceBounds {
        ub_tr_vv,
        ub_tr_ww,
        ub_tr_ww_signed_sum,
        ub_tr_sq,
        phi_max,
    })
}

/// Maxima over inputs in `[0,1]^M`: `(I(1+M), I²(1+M)², I²(1+N)²)`; the last
/// is `+∞` for activations whose outputs are unbounded.
pub fn normalized_input_maxima(
    inputs: usize,
    hidden: usize,
    samples: usize,
    kind: ActivationKind,
) -> (f64, f64, f64) {
    let (m, n, i) = (inputs as f64, hidden as f64, samples as f64);
    let sup_r = if kind.is_saturating() {
        i * i * (1.0 + n) * (1.0 + n)
    } else {
        f64::INFINITY
    };
    (i * (1.0 + m), i * i * (1.0 + m) * (1.0 + m), sup_r)
}

/// `tr(H)²/D ≤ tr(H²)` always, and `tr(H²) ≤ tr(H)²` when `psd`.
pub fn trace_sandwich_check(tr_total: f64, tr_sq_total: f64, dim: usize, psd: bool) -> bool {
    let tr2 = tr_total * tr_total;
    let slack = SANDWICH_RTOL * tr2.max(tr_sq_total);
    let lower = tr2 / dim as f64 <= tr_sq_total + slack;
    let upper = !psd || tr_sq_total <= tr2 + slack;
    lower && upper
}
