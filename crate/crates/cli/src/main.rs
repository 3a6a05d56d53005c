//! `sharpness`: oracle checks, training sweeps, re-analysis and loss slices.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharpness::activations::{profile, ActivationKind};
use sharpness::bound::{jacobi_eigen, spectrum_report};
use sharpness::experiment::{
    experiment_data, loss_slice, read_sweep, reanalyze, run_experiment, write_report,
    ExperimentConfig, ExperimentReport,
};
use sharpness::hessian::hessian_total;
use sharpness::loss_grad::{grad_total, total_loss};
use sharpness::network::{forward_batch, Dataset, NetworkParams, NetworkShape, ParamsFile};
use sharpness::oracle::{fd_gradient, fd_hessian, frobenius_diff, matrix_sq_trace, matrix_trace, FdConfig};
use sharpness::traces::{trace_bounds, trace_bundle, trace_sandwich_check};

#[derive(Parser)]
#[command(name = "sharpness", version, about = "Hessian sharpness bounds for a three-layer network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradient, Hessian, traces and bounds with numeric oracles.
    Verify(VerifyArgs),
    /// Train from many random initializations and write spectra and figure data.
    TrainSweep(SweepArgs),
    /// Recompute spectra and statistics for a saved sweep directory.
    Analyze(AnalyzeArgs),
    /// Loss along a Hessian eigenvector through a saved critical point.
    Slice(SliceArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Activation to check; all five when omitted.
    #[arg(long)]
    kind: Option<ActivationKind>,
    #[arg(long = "M", default_value_t = 2)]
    inputs: usize,
    #[arg(long = "N", default_value_t = 3)]
    hidden: usize,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per activation.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Dataset CSV with header x_1,...,x_M,q; replaces the random data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parameter JSON {"M","N","theta"}; replaces the random parameters.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Base config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long = "M")]
    inputs: Option<usize>,
    #[arg(long = "N")]
    hidden: Option<usize>,
    #[arg(long = "i-train")]
    train_samples: Option<usize>,
    #[arg(long = "i-test")]
    test_samples: Option<usize>,
    /// Gradient-descent step size.
    #[arg(long)]
    lr: Option<f64>,
    /// Epoch limit per seed.
    #[arg(long)]
    tmax: Option<usize>,
    /// Relative gradient-norm convergence threshold.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    activation: Option<ActivationKind>,
    #[arg(long)]
    init_range: Option<f64>,
    #[arg(long)]
    variance: Option<f64>,
    #[arg(long)]
    rng_seed: Option<u64>,
    /// Epoch stride of the logged trajectories.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    dir: PathBuf,
    /// Output directory; defaults to `dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SliceArgs {
    /// Sweep directory holding config.json and critical_points.json.
    #[arg(long)]
    dir: PathBuf,
    /// Seed of the critical point.
    #[arg(long)]
    seed: u64,
    /// Eigenvector index, 0 for the largest eigenvalue.
    #[arg(long, default_value_t = 0)]
    eigen: usize,
    /// Slice covers `[-alpha_max, alpha_max]`.
    #[arg(long, default_value_t = 1.0)]
    alpha_max: f64,
    #[arg(long, default_value_t = 101)]
    steps: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => verify(&a),
        Command::TrainSweep(a) => train_sweep(&a).map(|()| true),
        Command::Analyze(a) => analyze(&a).map(|()| true),
        Command::Slice(a) => slice(&a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

struct Check {
    name: &'static str,
    worst: f64,
    limit: f64,
}

impl Check {
    fn new(name: &'static str, limit: f64) -> Self {
        Self { name, worst: 0.0, limit }
    }

    fn record(&mut self, value: f64) {
        // NaN must register as a breach
        if !(value <= self.worst) {
            self.worst = value;
        }
    }

    fn passed(&self) -> bool {
        self.worst <= self.limit
    }
}

fn load_params(path: &Path) -> Result<NetworkParams> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let pf: ParamsFile = serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(pf.to_params()?)
}

fn load_data(path: &Path) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Dataset::read_csv(BufReader::new(file))?)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative excess of `value` over `bound`; nonpositive when the bound holds.
fn excess(value: f64, bound: f64) -> f64 {
    if bound.is_infinite() && bound > 0.0 {
        return 0.0;
    }
    (value - bound) / bound.abs().max(1.0)
}

fn verify(a: &VerifyArgs) -> Result<bool> {
    let fixed_params = a.params.as_deref().map(load_params).transpose()?;
    let fixed_data = a.data.as_deref().map(load_data).transpose()?;
    let shape = match &fixed_params {
        Some(p) => p.shape,
        None => NetworkShape::new(a.inputs, a.hidden)?,
    };
    if let Some(d) = &fixed_data {
        if d.inputs() != shape.inputs {
            bail!("dataset has {} inputs but the network expects {}", d.inputs(), shape.inputs);
        }
    }
    if a.samples == 0 || a.instances == 0 {
        bail!("--samples and --instances must be positive");
    }
    let kinds: Vec<ActivationKind> = a.kind.map_or(ActivationKind::ALL.to_vec(), |k| vec![k]);
    let instances = if fixed_params.is_some() && fixed_data.is_some() { 1 } else { a.instances };
    let fd = FdConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut all_ok = true;

    for kind in kinds {
        let mut checks = [
            Check::new("gradient vs finite differences (max abs, relative)", 1e-5),
            Check::new("Hessian vs finite differences (Frobenius, relative)", 1e-4),
            Check::new("tr(H) closed form (relative)", 1e-8),
            Check::new("tr(H^2) closed form (relative)", 1e-8),
            Check::new("lambda1 over lambda_sup (relative excess)", 1e-9),
            Check::new("trace upper bounds (relative excess)", 1e-12),
            Check::new("trace sandwich (violations)", 0.0),
        ];
        for _ in 0..instances {
            let params = match &fixed_params {
                Some(p) => p.clone(),
                None => {
                    let theta: Vec<f64> = (0..shape.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
                    NetworkParams::unflatten(&theta, shape)?
                }
            };
            let data = match &fixed_data {
                Some(d) => d.clone(),
                None => {
                    let x = Array2::from_shape_fn((shape.inputs, a.samples), |_| rng.random_range(-2.0..2.0));
                    let q = (0..a.samples).map(|_| rng.random_range(0..2u8)).collect();
                    Dataset::new(x, q)?
                }
            };
            let theta = params.flatten().to_vec();
            let lossfn = |t: &[f64]| total_loss(&NetworkParams::unflatten(t, shape)?, kind, &data);

            let g = grad_total(&params, kind, &data)?;
            let g_fd = fd_gradient(lossfn, &theta, &fd)?;
            let g_scale = g.g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            checks[0].record(max_abs_diff(&g_fd, &g.g) / g_scale);

            let h = hessian_total(&params, kind, &data)?;
            let h_fd = fd_hessian(lossfn, &theta, &fd)?;
            let h_norm = h.assembled.iter().map(|v| v * v).sum::<f64>().sqrt();
            checks[1].record(frobenius_diff(h.assembled.view(), h_fd.view())? / h_norm.max(1.0));

            let batch = forward_batch(&params, kind, &data)?;
            let bundle = trace_bundle(&batch, &params)?;
            let tr = matrix_trace(h.assembled.view())?;
            let tr_sq = matrix_sq_trace(h.assembled.view())?;
            checks[2].record(rel(bundle.tr_total, tr));
            checks[3].record(rel(bundle.tr_sq_total, tr_sq));

            let spectrum = spectrum_report(h.assembled.view(), bundle.tr_total, bundle.tr_sq_total)?;
            checks[4].record(excess(spectrum.lambda1, spectrum.lambda_sup));

            let ub = trace_bounds(&profile(kind), &params, &bundle, &batch)?;
            let worst = excess(bundle.tr_vv, ub.ub_tr_vv)
                .max(excess(bundle.tr_ww, ub.ub_tr_ww))
                .max(excess(bundle.tr_sq_total, ub.ub_tr_sq));
            checks[5].record(worst);

            let sandwich = trace_sandwich_check(tr, tr_sq, shape.dim(), spectrum.psd);
            checks[6].record(if sandwich { 0.0 } else { 1.0 });
        }
        for c in &checks {
            let tag = if c.passed() { "ok  " } else { "FAIL" };
            println!("{tag} {:<10} {:<52} worst {:>10.3e}  limit {:.0e}", kind.name(), c.name, c.worst, c.limit);
            all_ok &= c.passed();
        }
    }
    Ok(all_ok)
}

fn sweep_config(a: &SweepArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    macro_rules! apply {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$field = v; })*
        };
    }
    apply!(
        seeds => seeds,
        inputs => inputs,
        hidden => hidden,
        train_samples => train_samples,
        test_samples => test_samples,
        lr => learning_rate,
        tmax => max_epochs,
        eps => eps_converge,
        activation => activation,
        init_range => init_range,
        variance => variance,
        rng_seed => rng_seed,
        stride => trajectory_stride,
    );
    // default means are two-dimensional; extend them along the diagonal
    if a.config.is_none() && cfg.class0_mean.len() != cfg.inputs {
        cfg.class0_mean = vec![1.0; cfg.inputs];
        cfg.class1_mean = vec![-1.0; cfg.inputs];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(report: &ExperimentReport) {
    let s = &report.summary;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("converged          {}/{}", s.converged, s.seeds);
    println!("unique             {}", s.unique);
    println!("low/high groups    {}/{}", s.low_count, s.high_count);
    println!("median F1 low/high {} / {}", opt(s.median_f1_low), opt(s.median_f1_high));
    if let Some(m) = s.mann_whitney {
        println!("Mann-Whitney U     {} (p = {:.3e})", m.u, m.p_two_sided);
    }
    println!("lambda_sup skew    {}", opt(s.lambda_sup_skewness));
    println!("rho(|V|^2, sup)    {}", opt(s.spearman_v_norm));
    println!("rho(|W|^2, sup)    {}", opt(s.spearman_w_norm));
    println!("envelope rho       {}", opt(s.rtr_envelope_spearman));
    println!("bound violations   {}", s.bound_violations);
    println!("max trace rel err  {:.3e} / {:.3e}", s.max_trace_rel_err, s.max_trace_sq_rel_err);
}

fn train_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = sweep_config(a)?;
    info!(
        "training {} seeds ({} activation, lr {}, T_max {})",
        cfg.seeds, cfg.activation, cfg.learning_rate, cfg.max_epochs
    );
    let report = run_experiment(&cfg)?;
    write_report(&a.out, &report)?;
    info!("wrote {}", a.out.display());
    print_summary(&report);
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let (cfg, points, failures) = read_sweep(&a.dir)?;
    info!("re-analyzing {} critical points from {}", points.len(), a.dir.display());
    let report = reanalyze(&cfg, points, failures)?;
    let out = a.out.as_deref().unwrap_or(&a.dir);
    write_report(out, &report)?;
    info!("wrote {}", out.display());
    print_summary(&report);
    Ok(())
}

fn slice(a: &SliceArgs) -> Result<()> {
    if a.steps < 2 || !(a.alpha_max > 0.0 && a.alpha_max.is_finite()) {
        bail!("--steps must be at least 2 and --alpha-max positive");
    }
    let (cfg, points, _) = read_sweep(&a.dir)?;
    let point = points
        .iter()
        .find(|p| p.seed == a.seed)
        .with_context(|| format!("no critical point with seed {} in {}", a.seed, a.dir.display()))?;
    let (train, _) = experiment_data(&cfg)?;
    let params = NetworkParams::unflatten(&point.theta, cfg.shape()?)?;
    let h = hessian_total(&params, cfg.activation, &train)?;
    let eig = jacobi_eigen(h.assembled.view())?;
    if a.eigen >= eig.values.len() {
        bail!("eigenvector index {} out of range 0..{}", a.eigen, eig.values.len());
    }
    let u = eig.vectors.column(a.eigen).to_vec();
    let alphas: Vec<f64> = (0..a.steps)
        .map(|k| -a.alpha_max + 2.0 * a.alpha_max * k as f64 / (a.steps - 1) as f64)
        .collect();
    let rows = loss_slice(&params, cfg.activation, &train, &u, &alphas)?;
    info!("eigenvalue {} = {:e}", a.eigen, eig.values[a.eigen]);

    let mut out: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    writeln!(out, "alpha,loss")?;
    for (alpha, loss) in rows {
        writeln!(out, "{alpha},{loss}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_sweep(args: &[&str]) -> SweepArgs {
        let mut full = vec!["sharpness", "train-sweep", "--out", "unused"];
        full.extend_from_slice(args);
        match Cli::parse_from(full).command {
            Command::TrainSweep(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn sweep_flags_override_defaults() {
        let cfg = sweep_config(&parse_sweep(&["--seeds", "7", "--lr", "0.1", "--activation", "tanh"])).unwrap();
        assert_eq!((cfg.seeds, cfg.learning_rate, cfg.activation), (7, 0.1, ActivationKind::Tanh));
        assert_eq!(cfg.max_epochs, ExperimentConfig::default().max_epochs);
    }

    #[test]
    fn class_means_follow_input_dimension() {
        let cfg = sweep_config(&parse_sweep(&["--M", "4"])).unwrap();
        assert_eq!(cfg.class0_mean, vec![1.0; 4]);
        assert_eq!(cfg.class1_mean, vec![-1.0; 4]);
    }

    #[test]
    fn excess_ignores_infinite_bounds() {
        assert_eq!(excess(5.0, f64::INFINITY), 0.0);
        assert!(excess(1.0, 2.0) < 0.0);
        assert!(excess(3.0, 2.0) > 0.0);
        let mut c = Check::new("nan", 1.0);
        c.record(f64::NAN);
        assert!(!c.passed());
    }
}
