//! Statistics over deduplicated critical points and the on-disk sweep layout.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    dedup_critical_points, initial_theta, train_gd, CriticalPoint, ExperimentConfig, Failure,
    TrajectoryPoint,
};
use crate::error::{Error, Result};
use crate::network::Dataset;
use crate::stats::{
    histogram, lower_envelope, mann_whitney_u, median, skewness, spearman, split_high_low,
    HistogramBin, MannWhitney,
};

/// Rank correlation of `‖W̃‖²_F` with λ_sup counted as "no clear relation".
pub const WEAK_CORRELATION: f64 = 0.3;
/// Equal-count bins for the λ_sup lower envelope over `‖RᵀR‖²_F`.
pub const ENVELOPE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    /// `"highest"` or `"lowest"` λ_sup among retained points.
    pub label: String,
    pub points: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualitativeChecks {
    pub lambda_sup_right_skewed: bool,
    pub v_norm_positive: bool,
    pub w_norm_weak: bool,
    pub rtr_envelope_rising: bool,
    pub low_group_f1_not_worse: bool,
    pub mann_whitney_significant_1pct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: usize,
    pub converged: usize,
    pub unique: usize,
    pub low_count: usize,
    pub high_count: usize,
    pub split_threshold: Option<f64>,
    pub median_f1_low: Option<f64>,
    pub median_f1_high: Option<f64>,
    pub mann_whitney: Option<MannWhitney>,
    pub spearman_v_norm: Option<f64>,
    pub spearman_w_norm: Option<f64>,
    pub spearman_rtr: Option<f64>,
    pub rtr_envelope: Vec<(f64, f64)>,
    pub rtr_envelope_spearman: Option<f64>,
    pub lambda_sup_skewness: Option<f64>,
    /// Converged points with `λ₁ > λ_sup + 10⁻⁹·max(1, |λ_sup|)`.
    pub bound_violations: usize,
    pub max_trace_rel_err: f64,
    pub max_trace_sq_rel_err: f64,
    pub checks: QualitativeChecks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Every converged point in seed order; duplicates carry `duplicate_of`.
    pub points: Vec<CriticalPoint>,
    pub failures: Vec<Failure>,
    /// Indices into `points` of the retained points.
    pub unique: Vec<usize>,
    pub low: Vec<usize>,
    pub high: Vec<usize>,
    pub histogram: Vec<HistogramBin>,
    pub trajectories: Vec<Trajectory>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn unique_points(&self) -> impl Iterator<Item = &CriticalPoint> {
        self.unique.iter().map(|&i| &self.points[i])
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub(super) fn assemble(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    mut points: Vec<CriticalPoint>,
    failures: Vec<Failure>,
) -> Result<ExperimentReport> {
    points.sort_by_key(|p| p.seed);
    let unique = dedup_critical_points(&mut points);
    let lam: Vec<f64> = unique.iter().map(|&i| points[i].spectrum.lambda_sup).collect();
    let f1: Vec<f64> = unique.iter().map(|&i| points[i].macro_f1_test).collect();

    let (low_local, high_local) = split_high_low(&lam, cfg.split_quantile)?;
    let low: Vec<usize> = low_local.iter().map(|&k| unique[k]).collect();
    let high: Vec<usize> = high_local.iter().map(|&k| unique[k]).collect();
    let split_threshold = low_local.iter().map(|&k| lam[k]).reduce(f64::max);
    let f1_low: Vec<f64> = low_local.iter().map(|&k| f1[k]).collect();
    let f1_high: Vec<f64> = high_local.iter().map(|&k| f1[k]).collect();
    let mann_whitney = if f1_low.is_empty() || f1_high.is_empty() {
        None
    } else {
        Some(mann_whitney_u(&f1_low, &f1_high)?)
    };

    let pick = |f: fn(&CriticalPoint) -> f64| -> Vec<f64> { unique.iter().map(|&i| f(&points[i])).collect() };
    let v_norm = pick(|p| p.diagnostics.v_tilde_norm_sq);
    let w_norm = pick(|p| p.diagnostics.w_tilde_norm_sq);
    let rtr = pick(|p| p.diagnostics.rtr_fro_sq);
    let spearman_v_norm = spearman(&v_norm, &lam)?;
    let spearman_w_norm = spearman(&w_norm, &lam)?;
    let spearman_rtr = spearman(&rtr, &lam)?;
    let rtr_envelope = if rtr.is_empty() {
        Vec::new()
    } else {
        lower_envelope(&rtr, &lam, ENVELOPE_BINS)?
    };
    let env_x: Vec<f64> = rtr_envelope.iter().map(|e| e.0).collect();
    let env_y: Vec<f64> = rtr_envelope.iter().map(|e| e.1).collect();
    let rtr_envelope_spearman = spearman(&env_x, &env_y)?;
    let lambda_sup_skewness = skewness(&lam);
    let hist = histogram(&lam, cfg.histogram_bins)?;

    let bound_violations = points.iter().filter(|p| !p.spectrum.bound_holds()).count();
    let max_trace_rel_err = points
        .iter()
        .map(|p| rel_err(p.spectrum.tr_total, p.diagnostics.tr_numeric))
        .fold(0.0, f64::max);
    let max_trace_sq_rel_err = points
        .iter()
        .map(|p| rel_err(p.spectrum.tr_sq_total, p.diagnostics.tr_sq_numeric))
        .fold(0.0, f64::max);

    let median_f1_low = median(&f1_low);
    let median_f1_high = median(&f1_high);
    let checks = QualitativeChecks {
        lambda_sup_right_skewed: lambda_sup_skewness.is_some_and(|s| s > 0.0),
        v_norm_positive: spearman_v_norm.is_some_and(|r| r > 0.0),
        w_norm_weak: spearman_w_norm.is_some_and(|r| r.abs() <= WEAK_CORRELATION),
        rtr_envelope_rising: rtr_envelope_spearman.is_some_and(|r| r > 0.0),
        low_group_f1_not_worse: match (median_f1_low, median_f1_high) {
            (Some(l), Some(h)) => l >= h,
            _ => false,
        },
        mann_whitney_significant_1pct: mann_whitney.is_some_and(|m| m.p_two_sided < 0.01),
    };

    let summary = Summary {
        seeds: cfg.seeds,
        converged: points.len(),
        unique: unique.len(),
        low_count: low.len(),
        high_count: high.len(),
        split_threshold,
        median_f1_low,
        median_f1_high,
        mann_whitney,
        spearman_v_norm,
        spearman_w_norm,
        spearman_rtr,
        rtr_envelope,
        rtr_envelope_spearman,
        lambda_sup_skewness,
        bound_violations,
        max_trace_rel_err,
        max_trace_sq_rel_err,
        checks,
    };

    let trajectories = extreme_trajectories(cfg, train, test, &points, &unique)?;

    Ok(ExperimentReport {
        config: cfg.clone(),
        points,
        failures,
        unique,
        low,
        high,
        histogram: hist,
        trajectories,
        summary,
    })
}

/// Re-runs the highest and lowest λ_sup retained seeds with logging on.
fn extreme_trajectories(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    points: &[CriticalPoint],
    unique: &[usize],
) -> Result<Vec<Trajectory>> {
    let by_lambda = |a: &&usize, b: &&usize| {
        points[**a]
            .spectrum
            .lambda_sup
            .total_cmp(&points[**b].spectrum.lambda_sup)
            .then(points[**b].seed.cmp(&points[**a].seed))
    };
    let (Some(&hi), Some(&lo)) = (unique.iter().max_by(by_lambda), unique.iter().min_by(by_lambda)) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (idx, label) in [(hi, "highest"), (lo, "lowest")] {
        let seed = points[idx].seed;
        let theta0 = initial_theta(cfg, seed)?;
        let run = train_gd(cfg, train, test, &theta0, seed, Some(cfg.trajectory_stride))?;
        out.push(Trajectory {
            seed,
            label: label.into(),
            points: run.trajectory,
        });
        if hi == lo {
            break;
        }
    }
    Ok(out)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_csv<R>(dir: &Path, name: &str, header: &[&str], rows: R) -> Result<()>
where
    R: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(dir, name)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the config echo, point and failure lists, summary, and figure CSVs.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(dir, "config.json", &report.config)?;
    write_json(dir, "critical_points.json", &report.points)?;
    write_json(dir, "failures.json", &report.failures)?;
    write_json(dir, "summary.json", &report.summary)?;

    let uniq: Vec<&CriticalPoint> = report.unique_points().collect();
    let s = |v: f64| v.to_string();

    write_csv(
        dir,
        "fig2_eigen_vs_bound.csv",
        &["lambda1", "lambda_sup"],
        uniq.iter().map(|p| vec![s(p.spectrum.lambda1), s(p.spectrum.lambda_sup)]),
    )?;
    write_csv(
        dir,
        "fig4_trajectories.csv",
        &["seed", "label", "epoch", "loss", "lambda_sup", "lambda1"],
        report.trajectories.iter().flat_map(|t| {
            t.points.iter().map(move |p| {
                vec![
                    t.seed.to_string(),
                    t.label.clone(),
                    p.epoch.to_string(),
                    s(p.loss),
                    s(p.lambda_sup),
                    s(p.lambda1),
                ]
            })
        }),
    )?;
    write_csv(
        dir,
        "fig5_hist.csv",
        &["bin_lo", "bin_hi", "count"],
        report.histogram.iter().map(|b| vec![s(b.lo), s(b.hi), b.count.to_string()]),
    )?;
    let group = |label: &'static str, idx: &[usize]| -> Vec<Vec<String>> {
        idx.iter()
            .map(|&i| {
                let p = &report.points[i];
                vec![
                    p.seed.to_string(),
                    label.to_string(),
                    s(p.spectrum.lambda_sup),
                    s(p.macro_f1_test),
                ]
            })
            .collect()
    };
    let mut groups = group("low", &report.low);
    groups.extend(group("high", &report.high));
    write_csv(dir, "fig6_groups.csv", &["seed", "group", "lambda_sup", "macro_f1"], groups)?;
    write_csv(
        dir,
        "fig8_traces.csv",
        &["tr_numeric", "tr_analytic", "trsq_numeric", "trsq_analytic"],
        uniq.iter().map(|p| {
            vec![
                s(p.diagnostics.tr_numeric),
                s(p.spectrum.tr_total),
                s(p.diagnostics.tr_sq_numeric),
                s(p.spectrum.tr_sq_total),
            ]
        }),
    )?;
    write_csv(
        dir,
        "fig9_norms.csv",
        &["v_tilde_norm_sq", "w_tilde_norm_sq", "lambda_sup"],
        uniq.iter().map(|p| {
            vec![
                s(p.diagnostics.v_tilde_norm_sq),
                s(p.diagnostics.w_tilde_norm_sq),
                s(p.spectrum.lambda_sup),
            ]
        }),
    )?;
    write_csv(
        dir,
        "fig11_ortho.csv",
        &["rtr_fro_sq", "lambda_sup"],
        uniq.iter().map(|p| vec![s(p.diagnostics.rtr_fro_sq), s(p.spectrum.lambda_sup)]),
    )?;
    Ok(())
}

/// Loads `config.json`, `critical_points.json` and, if present, `failures.json`.
pub fn read_sweep(dir: &Path) -> Result<(ExperimentConfig, Vec<CriticalPoint>, Vec<Failure>)> {
    let read = |name: &str| -> Result<String> {
        std::fs::read_to_string(dir.join(name))
            .map_err(|e| Error::Domain(format!("cannot read {}: {e}", dir.join(name).display())))
    };
    let cfg: ExperimentConfig = serde_json::from_str(&read("config.json")?)?;
    let points: Vec<CriticalPoint> = serde_json::from_str(&read("critical_points.json")?)?;
    let failures = if dir.join("failures.json").exists() {
        serde_json::from_str(&read("failures.json")?)?
    } else {
        Vec::new()
    };
    Ok((cfg, points, failures))
}
