//! Critical-point study: synthetic two-Gaussian data, full-batch gradient
//! descent from many random initialisations, deduplication, and per-point
//! spectral analysis.

mod report;

pub use report::{
    read_sweep, write_report, ExperimentReport, QualitativeChecks, Summary, Trajectory,
};

use log::warn;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::bound::{spectrum_report, SpectrumReport};
use crate::error::{check_len, Error, Result};
use crate::hessian::hessian_total;
use crate::loss_grad::{loss_and_grad_total_into, total_loss, GradWorkspace};
use crate::network::{forward, forward_batch, Dataset, NetworkParams, NetworkShape};
use crate::oracle::{matrix_sq_trace, matrix_trace};
use crate::stats::macro_f1;
use crate::traces::{gram_plus_ones, trace_bundle};

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const INIT_STREAM_BASE: u64 = 2;

fn default_stride() -> usize {
    50
}

fn default_quantile() -> f64 {
    0.9
}

fn default_bins() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "M")]
    pub inputs: usize,
    #[serde(rename = "N")]
    pub hidden: usize,
    #[serde(rename = "I_train")]
    pub train_samples: usize,
    #[serde(rename = "I_test")]
    pub test_samples: usize,
    pub seeds: usize,
    #[serde(rename = "T_max")]
    pub max_epochs: usize,
    pub eps_converge: f64,
    /// Step size γ; not fixed by the protocol, tune per problem.
    pub learning_rate: f64,
    /// Initial parameters are drawn from `U(−init_range, init_range)`.
    pub init_range: f64,
    pub activation: ActivationKind,
    pub class0_mean: Vec<f64>,
    pub class1_mean: Vec<f64>,
    pub variance: f64,
    pub rng_seed: u64,
    /// Epoch stride for λ_sup/λ₁ logging on re-run trajectories.
    #[serde(default = "default_stride")]
    pub trajectory_stride: usize,
    #[serde(default = "default_quantile")]
    pub split_quantile: f64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            inputs: 2,
            hidden: 3,
            train_samples: 50,
            test_samples: 1000,
            seeds: 500,
            max_epochs: 10_000,
            eps_converge: 1e-3,
            learning_rate: 0.05,
            init_range: 10.0,
            activation: ActivationKind::Sigmoid,
            class0_mean: vec![1.0, 1.0],
            class1_mean: vec![-1.0, -1.0],
            variance: 2.0,
            rng_seed: 0,
            trajectory_stride: default_stride(),
            split_quantile: default_quantile(),
            histogram_bins: default_bins(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("M", self.inputs),
            ("N", self.hidden),
            ("I_train", self.train_samples),
            ("I_test", self.test_samples),
            ("seeds", self.seeds),
            ("trajectory_stride", self.trajectory_stride),
            ("histogram_bins", self.histogram_bins),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Domain(format!("{name} must be positive")));
        }
        if !(self.eps_converge > 0.0 && self.eps_converge < 1.0) {
            return Err(Error::Domain(format!(
                "eps_converge must lie in (0,1), got {}",
                self.eps_converge
            )));
        }
        if !(self.variance >= 0.0 && self.variance.is_finite()) {
            return Err(Error::Domain(format!("variance must be nonnegative, got {}", self.variance)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return Err(Error::Domain(format!("init_range must be positive, got {}", self.init_range)));
        }
        if !(self.split_quantile > 0.0 && self.split_quantile < 1.0) {
            return Err(Error::Domain(format!(
                "split_quantile must lie in (0,1), got {}",
                self.split_quantile
            )));
        }
        check_len("class0_mean length", self.inputs, self.class0_mean.len())?;
        check_len("class1_mean length", self.inputs, self.class1_mean.len())?;
        if self.class0_mean.iter().chain(&self.class1_mean).any(|v| !v.is_finite()) {
            return Err(Error::Domain("class means must be finite".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<NetworkShape> {
        NetworkShape::new(self.inputs, self.hidden)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Balanced two-Gaussian data: class 0 samples first, then class 1. Odd sizes
/// give class 0 the smaller half.
pub fn generate_dataset(cfg: &ExperimentConfig, split: Split, rng: &mut impl Rng) -> Result<Dataset> {
    cfg.validate()?;
    let samples = match split {
        Split::Train => cfg.train_samples,
        Split::Test => cfg.test_samples,
    };
    if samples % 2 == 1 {
        warn!("{samples} samples cannot be split evenly; class 1 gets one extra");
    }
    let n0 = samples / 2;
    let sd = cfg.variance.sqrt();
    let mut x = Array2::zeros((cfg.inputs, samples));
    let mut q = Vec::with_capacity(samples);
    for i in 0..samples {
        let (mean, label) = if i < n0 {
            (&cfg.class0_mean, 0u8)
        } else {
            (&cfg.class1_mean, 1u8)
        };
        for m in 0..cfg.inputs {
            let z: f64 = rng.sample(StandardNormal);
            x[[m, i]] = mean[m] + sd * z;
        }
        q.push(label);
    }
    Dataset::new(x, q)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Train and test sets drawn from their own streams of `rng_seed`.
pub fn experiment_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = generate_dataset(cfg, Split::Train, &mut stream_rng(cfg.rng_seed, TRAIN_STREAM))?;
    let test = generate_dataset(cfg, Split::Test, &mut stream_rng(cfg.rng_seed, TEST_STREAM))?;
    Ok((train, test))
}

/// `θ₀ ~ U(−init_range, init_range)^D` for run `seed`.
pub fn initial_theta(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let dim = cfg.shape()?.dim();
    let mut rng = stream_rng(cfg.rng_seed, INIT_STREAM_BASE + seed);
    let r = cfg.init_range;
    Ok((0..dim).map(|_| rng.random_range(-r..r)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointDiagnostics {
    /// `tr(H)` and `tr(H²)` taken from the assembled matrix.
    pub tr_numeric: f64,
    pub tr_sq_numeric: f64,
    pub v_tilde_norm_sq: f64,
    pub w_tilde_norm_sq: f64,
    /// `‖RᵀR‖²_F` over the training inputs.
    pub rtr_fro_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub seed: u64,
    pub theta: Vec<f64>,
    pub final_loss: f64,
    pub grad_ratio: f64,
    pub epochs: usize,
    pub spectrum: SpectrumReport,
    pub macro_f1_test: f64,
    pub diagnostics: PointDiagnostics,
    /// Seed of the retained point this one duplicates, if any.
    pub duplicate_of: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub epochs: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub loss: f64,
    pub lambda_sup: f64,
    pub lambda1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainOutcome {
    Converged(Box<CriticalPoint>),
    NotConverged(Failure),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Spectrum, test macro-F1 and diagnostics of a parameter vector.
pub fn analyze_theta(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    theta: &[f64],
) -> Result<(SpectrumReport, f64, PointDiagnostics)> {
    let params = NetworkParams::unflatten(theta, cfg.shape()?)?;
    let kind = cfg.activation;
    let spectrum = spectrum_at(&params, kind, train)?;
    let batch = forward_batch(&params, kind, train)?;
    let hessian = hessian_total(&params, kind, train)?;
    let rtr = gram_plus_ones(&batch.r) - 1.0;
    let diagnostics = PointDiagnostics {
        tr_numeric: matrix_trace(hessian.assembled.view())?,
        tr_sq_numeric: matrix_sq_trace(hessian.assembled.view())?,
        v_tilde_norm_sq: params.v_tilde_norm_sq(),
        w_tilde_norm_sq: params.w_tilde_norm_sq(),
        rtr_fro_sq: rtr.iter().map(|v| v * v).sum(),
    };
    let f1 = test_macro_f1(&params, kind, test)?;
    Ok((spectrum, f1, diagnostics))
}

/// Numeric spectrum with the closed-form bound attached.
pub fn spectrum_at(params: &NetworkParams, kind: ActivationKind, data: &Dataset) -> Result<SpectrumReport> {
    let batch = forward_batch(params, kind, data)?;
    let traces = trace_bundle(&batch, params)?;
    let hessian = hessian_total(params, kind, data)?;
    spectrum_report(hessian.assembled.view(), traces.tr_total, traces.tr_sq_total)
}

/// Predictions are `p ≥ 1/2`.
pub fn test_macro_f1(params: &NetworkParams, kind: ActivationKind, test: &Dataset) -> Result<f64> {
    let mut predictions = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let (x, q) = test.sample(i);
        predictions.push(u8::from(forward(params, kind, x, q)?.p >= 0.5));
    }
    macro_f1(&predictions, &test.q)
}

fn apply_step(params: &mut NetworkParams, g: &[f64], lr: f64) {
    let n = params.shape.hidden;
    for m in 0..=params.shape.inputs {
        for k in 0..n {
            params.w[[k, m]] -= lr * g[m * n + k];
        }
    }
    let wl = params.shape.w_len();
    for (k, v) in params.v.iter_mut().enumerate() {
        *v -= lr * g[wl + k];
    }
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Full-batch gradient descent from `theta0` until
/// `‖∇L(θ_t)‖ / ‖∇L(θ₀)‖ < eps_converge` or `T_max` updates.
///
/// With `log_stride`, `(epoch, L, λ_sup, λ₁)` is recorded every `log_stride`
/// epochs and at the final epoch.
pub fn train_gd(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    theta0: &[f64],
    seed: u64,
    log_stride: Option<usize>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let shape = cfg.shape()?;
    let kind = cfg.activation;
    let mut params = NetworkParams::unflatten(theta0, shape)?;
    let mut ws = GradWorkspace::new(&params);
    let mut g = vec![0.0; shape.dim()];
    let mut trajectory = Vec::new();
    let mut g0 = 0.0;

    let fail = |epochs: usize, reason: String, trajectory: Vec<TrajectoryPoint>| TrainRun {
        outcome: TrainOutcome::NotConverged(Failure { seed, epochs, reason }),
        trajectory,
    };

    for epoch in 0..=cfg.max_epochs {
        let loss = match loss_and_grad_total_into(&params, kind, train, &mut ws, &mut g) {
            Ok(l) => l,
            Err(e) => return Ok(fail(epoch, format!("diverged at epoch {epoch}: {e}"), trajectory)),
        };
        let gn = norm(&g);
        if !gn.is_finite() {
            return Ok(fail(epoch, format!("non-finite gradient at epoch {epoch}"), trajectory));
        }
        if epoch == 0 {
            g0 = gn;
        }
        let ratio = if g0 == 0.0 { 0.0 } else { gn / g0 };
        let converged = ratio < cfg.eps_converge;
        let last = converged || epoch == cfg.max_epochs;

        if let Some(stride) = log_stride {
            if epoch % stride == 0 || last {
                let s = spectrum_at(&params, kind, train)?;
                trajectory.push(TrajectoryPoint {
                    epoch,
                    loss,
                    lambda_sup: s.lambda_sup,
                    lambda1: s.lambda1,
                });
            }
        }

        if converged {
            let theta = params.flatten().to_vec();
            return Ok(match analyze_theta(cfg, train, test, &theta) {
                Ok((spectrum, macro_f1_test, diagnostics)) => TrainRun {
                    outcome: TrainOutcome::Converged(Box::new(CriticalPoint {
                        seed,
                        theta,
                        final_loss: loss,
                        grad_ratio: ratio,
                        epochs: epoch,
                        spectrum,
                        macro_f1_test,
                        diagnostics,
                        duplicate_of: None,
                    })),
                    trajectory,
                },
                Err(e) => fail(epoch, format!("analysis failed: {e}"), trajectory),
            });
        }
        if epoch == cfg.max_epochs {
            break;
        }
        apply_step(&mut params, &g, cfg.learning_rate);
    }
    Ok(fail(
        cfg.max_epochs,
        format!("no convergence within {} epochs", cfg.max_epochs),
        trajectory,
    ))
}

/// Gradient descent until the total loss drops below `target_loss`.
/// Returns the final parameters, loss and number of updates.
pub fn train_to_loss(
    params0: &NetworkParams,
    kind: ActivationKind,
    data: &Dataset,
    learning_rate: f64,
    target_loss: f64,
    max_epochs: usize,
) -> Result<(NetworkParams, f64, usize)> {
    let mut params = params0.clone();
    let mut ws = GradWorkspace::new(&params);
    let mut g = vec![0.0; params.shape.dim()];
    for epoch in 0..=max_epochs {
        let loss = loss_and_grad_total_into(&params, kind, data, &mut ws, &mut g)?;
        if loss < target_loss || epoch == max_epochs {
            return Ok((params, loss, epoch));
        }
        apply_step(&mut params, &g, learning_rate);
    }
    unreachable!("loop returns at max_epochs")
}

/// Marks duplicates in place and returns the indices of retained points.
///
/// Pairs closer than `τ = max(mean − 3·std, 0)` of all pairwise distances, or
/// exactly coincident, are linked; each connected component keeps its
/// lowest-seed member.
pub fn dedup_critical_points(points: &mut [CriticalPoint]) -> Vec<usize> {
    let n = points.len();
    for p in points.iter_mut() {
        p.duplicate_of = None;
    }
    if n < 2 {
        return (0..n).collect();
    }
    let mut dist = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = points[i]
                .theta
                .iter()
                .zip(&points[j].theta)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist.push(d);
        }
    }
    let count = dist.len() as f64;
    let mean = dist.iter().sum::<f64>() / count;
    let std = (dist.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / count).sqrt();
    let tau = (mean - 3.0 * std).max(0.0);

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let d = dist[k];
            k += 1;
            if d < tau || d == 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // representative = lowest seed in the component
    let mut rep: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        match rep[root] {
            Some(r) if points[r].seed <= points[i].seed => {}
            _ => rep[root] = Some(i),
        }
    }
    let mut kept = Vec::new();
    for i in 0..n {
        let r = rep[find(&mut parent, i)].expect("every root has a representative");
        if r == i {
            kept.push(i);
        } else {
            points[i].duplicate_of = Some(points[r].seed);
        }
    }
    kept
}

/// `L(θ♯ + α·u)` for each `α`; `direction` must have unit length.
pub fn loss_slice(
    params: &NetworkParams,
    kind: ActivationKind,
    data: &Dataset,
    direction: &[f64],
    alphas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let theta = params.flatten();
    check_len("slice direction", theta.len(), direction.len())?;
    let len = norm(direction);
    if (len - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("slice direction must be unit length, got {len}")));
    }
    let mut point = vec![0.0; theta.len()];
    alphas
        .iter()
        .map(|&alpha| {
            for (dst, (t, u)) in point.iter_mut().zip(theta.iter().zip(direction)) {
                *dst = t + alpha * u;
            }
            let p = NetworkParams::unflatten(&point, params.shape)?;
            Ok((alpha, total_loss(&p, kind, data)?))
        })
        .collect()
}

/// Runs every seed, deduplicates, and assembles statistics and figure data.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (train, test) = experiment_data(cfg)?;
    let runs: Vec<std::result::Result<CriticalPoint, Failure>> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let outcome = initial_theta(cfg, seed)
                .and_then(|theta0| train_gd(cfg, &train, &test, &theta0, seed, None));
            match outcome {
                Ok(TrainRun { outcome: TrainOutcome::Converged(p), .. }) => Ok(*p),
                Ok(TrainRun { outcome: TrainOutcome::NotConverged(f), .. }) => Err(f),
                Err(e) => Err(Failure {
                    seed,
                    epochs: 0,
                    reason: e.to_string(),
                }),
            }
        })
        .collect();
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for r in runs {
        match r {
            Ok(p) => points.push(p),
            Err(f) => failures.push(f),
        }
    }
    report::assemble(cfg, &train, &test, points, failures)
}

/// Recomputes spectra and statistics for previously found critical points.
pub fn reanalyze(
    cfg: &ExperimentConfig,
    points: Vec<CriticalPoint>,
    failures: Vec<Failure>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (train, test) = experiment_data(cfg)?;
    let refreshed: Vec<CriticalPoint> = points
        .into_par_iter()
        .map(|mut p| -> Result<CriticalPoint> {
            let params = NetworkParams::unflatten(&p.theta, cfg.shape()?)?;
            p.final_loss = total_loss(&params, cfg.activation, &train)?;
            let (spectrum, f1, diagnostics) = analyze_theta(cfg, &train, &test, &p.theta)?;
            p.spectrum = spectrum;
            p.macro_f1_test = f1;
            p.diagnostics = diagnostics;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    report::assemble(cfg, &train, &test, refreshed, failures)
}
