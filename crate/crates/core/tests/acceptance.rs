//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout; the
//! process exits nonzero if any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharpness::activations::{eval, profile, ActivationKind};
use sharpness::bound::{lambda_sup_closed_form, spectrum_report, SpectrumReport};
use sharpness::experiment::{
    experiment_data, initial_theta, run_experiment, spectrum_at, train_to_loss, write_report,
    ExperimentConfig, ExperimentReport,
};
use sharpness::hessian::hessian_total;
use sharpness::loss_grad::total_loss;
use sharpness::network::{forward_batch, Dataset, NetworkParams, NetworkShape};
use sharpness::oracle::{fd_hessian, frobenius_diff, matrix_sq_trace, matrix_trace, FdConfig};
use sharpness::traces::{
    gram_plus_ones, normalized_input_maxima, trace_bounds, trace_bundle, trace_sandwich_check,
};

struct Outcome {
    id: u8,
    pass: bool,
    detail: String,
}

fn outcome(id: u8, pass: bool, detail: String) -> Outcome {
    Outcome { id, pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn random_params(shape: NetworkShape, rng: &mut impl Rng, scale: f64) -> NetworkParams {
    let theta: Vec<f64> = (0..shape.dim()).map(|_| rng.random_range(-scale..scale)).collect();
    NetworkParams::unflatten(&theta, shape).unwrap()
}

fn random_dataset(inputs: usize, samples: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Dataset {
    let x = Array2::from_shape_fn((inputs, samples), |_| rng.random_range(lo..hi));
    let q = (0..samples).map(|_| rng.random_range(0..2u8)).collect();
    Dataset::new(x, q).unwrap()
}

fn random_symmetric(dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = Array2::from_shape_fn((dim, dim), |_| rng.random_range(-1.0..1.0));
    (&a + &a.t()) * 0.5
}

fn report_through_traces(m: &Array2<f64>) -> SpectrumReport {
    let tr = matrix_trace(m.view()).unwrap();
    let tr_sq = matrix_sq_trace(m.view()).unwrap();
    spectrum_report(m.view(), tr, tr_sq).unwrap()
}

fn default_run(seeds: usize) -> (ExperimentReport, Duration) {
    let cfg = ExperimentConfig { seeds, ..ExperimentConfig::default() };
    let start = Instant::now();
    let report = run_experiment(&cfg).unwrap();
    (report, start.elapsed())
}

/// Returns the outcome plus every analytic Hessian it compared.
fn hessian_vs_fd(report: &ExperimentReport, elapsed: Duration) -> (Outcome, Vec<Array2<f64>>) {
    let start = Instant::now();
    let cfg = &report.config;
    let (train, _) = experiment_data(cfg).unwrap();
    let shape = cfg.shape().unwrap();
    let fd = FdConfig::default();
    let mut dists = Vec::new();
    let mut hessians = Vec::new();
    for p in report.unique_points() {
        let params = NetworkParams::unflatten(&p.theta, shape).unwrap();
        let h = hessian_total(&params, cfg.activation, &train).unwrap();
        let f = |t: &[f64]| total_loss(&NetworkParams::unflatten(t, shape)?, cfg.activation, &train);
        let numeric = fd_hessian(f, &p.theta, &fd).unwrap();
        dists.push(frobenius_diff(h.assembled.view(), numeric.view()).unwrap());
        hessians.push(h.assembled);
    }
    let mean = dists.iter().sum::<f64>() / dists.len().max(1) as f64;
    let max = dists.iter().copied().fold(0.0, f64::max);
    let total = elapsed + start.elapsed();
    let pass = dists.len() >= 30 && mean <= 2e-4 && total < Duration::from_secs(120);
    let detail = format!(
        "{} critical points, mean Frobenius distance {mean:.3e} (max {max:.3e}, limit 2e-4), {:.1}s",
        dists.len(),
        total.as_secs_f64()
    );
    (outcome(1, pass, detail), hessians)
}

fn trace_closed_forms(rng: &mut ChaCha8Rng) -> (Outcome, Vec<Array2<f64>>) {
    let mut worst = (0.0f64, 0.0f64);
    let mut hessians = Vec::new();
    for k in 0..200 {
        let kind = ActivationKind::ALL[k % 5];
        let shape = NetworkShape::new(rng.random_range(1..=3), rng.random_range(1..=4)).unwrap();
        let params = random_params(shape, rng, 2.0);
        let data = random_dataset(shape.inputs, rng.random_range(1..=8), -2.0, 2.0, rng);
        let batch = forward_batch(&params, kind, &data).unwrap();
        let bundle = trace_bundle(&batch, &params).unwrap();
        let h = hessian_total(&params, kind, &data).unwrap();
        let tr = matrix_trace(h.assembled.view()).unwrap();
        let tr_sq = matrix_sq_trace(h.assembled.view()).unwrap();
        worst.0 = worst.0.max(rel(bundle.tr_total, tr));
        worst.1 = worst.1.max(rel(bundle.tr_sq_total, tr_sq));
        hessians.push(h.assembled);
    }
    let pass = worst.0 <= 1e-8 && worst.1 <= 1e-8;
    let detail = format!(
        "200 instances, max relative error tr {:.2e}, tr² {:.2e} (limit 1e-8)",
        worst.0, worst.1
    );
    (outcome(2, pass, detail), hessians)
}

fn bound_validity(hessians: &[Array2<f64>], rng: &mut ChaCha8Rng) -> Outcome {
    let mut checked = 0;
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    let mut check = |m: &Array2<f64>| {
        let r = report_through_traces(m);
        checked += 1;
        if !r.bound_holds() {
            violations += 1;
        }
        min_gap = min_gap.min(r.lambda_sup - r.lambda1);
    };
    hessians.iter().for_each(&mut check);
    for _ in 0..1000 {
        let dim = rng.random_range(2..=20);
        check(&random_symmetric(dim, rng));
    }
    let detail = format!("{checked} matrices, {violations} violations, min λ_sup − λ₁ = {min_gap:.3e}");
    outcome(3, violations == 0, detail)
}

fn equality_case(rng: &mut ChaCha8Rng) -> Outcome {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dim = rng.random_range(2..=20);
        let u: Array1<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = Array2::from_shape_fn((dim, dim), |(a, b)| u[a] * u[b]);
        let r = report_through_traces(&m);
        worst = worst.max((r.lambda_sup - r.lambda1).abs() / r.lambda1);
    }
    outcome(4, worst <= 1e-9, format!("100 rank-1 matrices, max |λ_sup − λ₁|/λ₁ = {worst:.2e} (limit 1e-9)"))
}

fn activation_calculus() -> Outcome {
    let mut worst_extrema = 0.0f64;
    let mut worst_fd = 0.0f64;
    let mut constants_ok = true;
    for kind in ActivationKind::ALL {
        let p = profile(kind);
        let (mut d1_max, mut d1_min) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut d2_max, mut d2_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..=400_000 {
            let y = -20.0 + k as f64 * 1e-4;
            let e = eval(kind, y).unwrap();
            d1_max = d1_max.max(e.d1);
            d1_min = d1_min.min(e.d1);
            d2_max = d2_max.max(e.d2);
            d2_min = d2_min.min(e.d2);
        }
        for (grid, constant) in [
            (d1_max, p.f_prime_max),
            (d1_min, p.f_prime_inf),
            (d2_max, p.f_second_max),
            (d2_min, p.f_second_min),
            (d1_max.powi(2).max(d1_min.powi(2)), p.zeta1),
            (d2_max.abs().max(d2_min.abs()), p.zeta2),
        ] {
            worst_extrema = worst_extrema.max((grid - constant).abs());
        }

        let h = 1e-5;
        for k in 0..=2000 {
            let y = -10.0 + k as f64 * 0.01;
            let e = eval(kind, y).unwrap();
            let (up, down) = (eval(kind, y + h).unwrap(), eval(kind, y - h).unwrap());
            let d1 = (up.f - down.f) / (2.0 * h);
            let d2 = (up.d1 - down.d1) / (2.0 * h);
            worst_fd = worst_fd.max(rel(d1, e.d1)).max(rel(d2, e.d2));
        }
    }
    let expected = [
        (ActivationKind::Sigmoid, 1.0 / 16.0, 3f64.sqrt() / 18.0),
        (ActivationKind::Tanh, 1.0, 4.0 * 3f64.sqrt() / 9.0),
        (ActivationKind::SmoothRelu, 1.0, 0.25),
        (ActivationKind::Gelu, 1.1289f64.powi(2), (2.0 / PI).sqrt()),
    ];
    for (kind, zeta1, zeta2) in expected {
        let p = profile(kind);
        constants_ok &= (p.zeta1 - zeta1).abs() < 1e-3 && (p.zeta2 - zeta2).abs() < 1e-12;
    }
    let gelu = profile(ActivationKind::Gelu);
    constants_ok &= (gelu.f_prime_max - 1.1289).abs() < 1e-4 && gelu.f_second_min < -0.107;
    let pass = worst_extrema <= 1e-4 && worst_fd <= 1e-6 && constants_ok;
    let detail = format!(
        "max |grid − constant| {worst_extrema:.2e} (limit 1e-4), max FD error {worst_fd:.2e} (limit 1e-6), reference constants {}",
        if constants_ok { "match" } else { "differ" }
    );
    outcome(5, pass, detail)
}

fn trace_bounds_dominate(rng: &mut ChaCha8Rng) -> Outcome {
    let mut violations = 0;
    let mut signed_sum_violations = 0;
    for k in 0..1000 {
        let kind = ActivationKind::ALL[k % 5];
        let shape = NetworkShape::new(rng.random_range(1..=3), rng.random_range(1..=4)).unwrap();
        let samples = rng.random_range(1..=8);
        let params = random_params(shape, rng, 3.0);
        let data = random_dataset(shape.inputs, samples, 0.0, 1.0, rng);
        let batch = forward_batch(&params, kind, &data).unwrap();
        let bundle = trace_bundle(&batch, &params).unwrap();
        let ub = trace_bounds(&profile(kind), &params, &bundle, &batch).unwrap();
        let slack = |v: f64| 1e-12 * v.abs().max(1.0);
        let ok_traces = bundle.tr_vv <= ub.ub_tr_vv + slack(ub.ub_tr_vv)
            && bundle.tr_ww <= ub.ub_tr_ww + slack(ub.ub_tr_ww)
            && bundle.tr_sq_total <= ub.ub_tr_sq + slack(ub.ub_tr_sq);
        if bundle.tr_ww > ub.ub_tr_ww_signed_sum + slack(ub.ub_tr_ww_signed_sum) {
            signed_sum_violations += 1;
        }

        let (max_sum_x, max_fro_x, sup_fro_r) =
            normalized_input_maxima(shape.inputs, shape.hidden, samples, kind);
        let gx = gram_plus_ones(&data.x);
        let gr = gram_plus_ones(&batch.r);
        let sum_x: f64 = gx.diag().sum();
        let fro_x: f64 = gx.iter().map(|v| v * v).sum();
        let fro_r: f64 = gr.iter().map(|v| v * v).sum();
        let ok_maxima = sum_x <= max_sum_x && fro_x <= max_fro_x && fro_r <= sup_fro_r;
        if !(ok_traces && ok_maxima) {
            violations += 1;
        }
    }
    let detail = format!(
        "1000 instances, {violations} violations ({signed_sum_violations} would breach the |ΣṼ| variant of the tr_ww bound)"
    );
    outcome(6, violations == 0, detail)
}

fn trace_sandwich(rng: &mut ChaCha8Rng) -> Outcome {
    let mut violations = 0;
    for _ in 0..1000 {
        let dim = rng.random_range(2..=20);
        let rank = rng.random_range(1..=dim);
        let b = Array2::from_shape_fn((dim, rank), |_| rng.random_range(-1.0..1.0));
        let m = b.dot(&b.t());
        let tr = matrix_trace(m.view()).unwrap();
        let tr_sq = matrix_sq_trace(m.view()).unwrap();
        if !trace_sandwich_check(tr, tr_sq, dim, true) {
            violations += 1;
        }
    }
    outcome(7, violations == 0, format!("1000 PSD matrices, {violations} violations"))
}

fn asymptotic_flatness() -> Outcome {
    let cfg = ExperimentConfig {
        class0_mean: vec![3.0, 3.0],
        class1_mean: vec![-3.0, -3.0],
        variance: 0.25,
        train_samples: 20,
        test_samples: 20,
        init_range: 1.0,
        ..ExperimentConfig::default()
    };
    let (train, _) = experiment_data(&cfg).unwrap();
    let shape = cfg.shape().unwrap();
    let params0 = NetworkParams::unflatten(&initial_theta(&cfg, 0).unwrap(), shape).unwrap();
    let (params, loss, epochs) = train_to_loss(&params0, cfg.activation, &train, 10.0, 1e-6, 500_000).unwrap();
    let lambda_sup = spectrum_at(&params, cfg.activation, &train).unwrap().lambda_sup;

    // shrink the residuals of the initial batch and recompute the bound
    let base = forward_batch(&params0, cfg.activation, &train).unwrap();
    let mut sweep = Vec::new();
    for k in 0..=6 {
        let mut batch = base.clone();
        let scale = 10f64.powi(-k);
        batch.delta.mapv_inplace(|d| d * scale);
        batch.s1 = batch.delta.mapv(|d| d.abs() * (1.0 - d.abs()));
        let b = trace_bundle(&batch, &params0).unwrap();
        sweep.push(lambda_sup_closed_form(b.tr_total, b.tr_sq_total, shape.dim()).unwrap().lambda_sup);
    }
    let monotone = sweep.windows(2).all(|w| w[1] < w[0]);
    let pass = loss < 1e-6 && lambda_sup < 1e-3 && monotone;
    let detail = format!(
        "L = {loss:.2e} after {epochs} epochs, λ_sup = {lambda_sup:.2e} (limit 1e-3); residual sweep {} from {:.2e} to {:.2e}",
        if monotone { "decreasing" } else { "not monotone" },
        sweep[0],
        sweep[sweep.len() - 1]
    );
    outcome(8, pass, detail)
}

fn experiment_statistics(report: &ExperimentReport, elapsed: Duration) -> Outcome {
    let s = &report.summary;
    let (low, high) = (s.median_f1_low, s.median_f1_high);
    let direction = match (low, high) {
        (Some(l), Some(h)) => l >= h,
        _ => false,
    };
    let pass = s.converged >= 60 && direction && elapsed < Duration::from_secs(900);
    let detail = format!(
        "{}/{} converged, {} unique, median macro-F1 low {:.4} vs high {:.4}, {:.1}s",
        s.converged,
        s.seeds,
        s.unique,
        low.unwrap_or(f64::NAN),
        high.unwrap_or(f64::NAN),
        elapsed.as_secs_f64()
    );
    outcome(9, pass, detail)
}

fn full_scale_qualitative() -> Outcome {
    let (report, elapsed) = default_run(500);
    let s = &report.summary;
    let c = &s.checks;
    let pass = c.lambda_sup_right_skewed && c.v_norm_positive && c.w_norm_weak && c.rtr_envelope_rising;
    let detail = format!(
        "500 seeds: {} converged, {} unique, skewness {:.2}, ρ(‖Ṽ‖²) {:.3}, ρ(‖W̃‖²) {:.3}, envelope ρ {:.3}, MWU p {:.3e}, {:.1}s",
        s.converged,
        s.unique,
        s.lambda_sup_skewness.unwrap_or(f64::NAN),
        s.spearman_v_norm.unwrap_or(f64::NAN),
        s.spearman_w_norm.unwrap_or(f64::NAN),
        s.rtr_envelope_spearman.unwrap_or(f64::NAN),
        s.mann_whitney.map_or(f64::NAN, |m| m.p_two_sided),
        elapsed.as_secs_f64()
    );
    outcome(9, pass, detail)
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig { seeds: 20, ..ExperimentConfig::default() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        write_report(dir.path(), &run_experiment(&cfg).unwrap()).unwrap();
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("critical_points.json")).unwrap();
    let (a, b) = (read(&dirs[0]), read(&dirs[1]));
    outcome(10, a == b && !a.is_empty(), format!("two 20-seed sweeps, critical_points.json {} bytes, identical: {}", a.len(), a == b))
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (report, elapsed) = default_run(100);
    let (c1, mut hessians) = hessian_vs_fd(&report, elapsed);
    let (c2, more) = trace_closed_forms(&mut rng);
    hessians.extend(more);
    let results = vec![
        c1,
        c2,
        bound_validity(&hessians, &mut rng),
        equality_case(&mut rng),
        activation_calculus(),
        trace_bounds_dominate(&mut rng),
        trace_sandwich(&mut rng),
        asymptotic_flatness(),
        experiment_statistics(&report, elapsed),
        full_scale_qualitative(),
        determinism(),
    ];
    let mut failed = 0;
    for r in &results {
        println!("{} criterion {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.id, r.detail);
        failed += usize::from(!r.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
