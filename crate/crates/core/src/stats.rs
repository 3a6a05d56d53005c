//! Rank statistics and summaries over critical points.

use serde::{Deserialize, Serialize};

use crate::activations::std_normal_cdf;
use crate::error::{check_len, Error, Result};

/// Exact enumeration is used while the smaller sample has fewer entries.
pub const MWU_EXACT_BELOW: usize = 8;

fn check_finite_all(context: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric {
            stage: format!("{context}[{i}]"),
            value: values[i],
        }),
        None => Ok(()),
    }
}

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Statistic of the first sample: `R_a − n_a(n_a+1)/2`.
    pub u: f64,
    pub p_two_sided: f64,
    pub exact: bool,
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("Mann-Whitney U needs two nonempty samples".into()));
    }
    check_finite_all("sample a", a)?;
    check_finite_all("sample b", b)?;
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;

    if na.min(nb) < MWU_EXACT_BELOW {
        let p = exact_p(&ranks, na);
        return Ok(MannWhitney { u, p_two_sided: p, exact: true });
    }

    let n = (na + nb) as f64;
    let mean = (na * nb) as f64 / 2.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && sorted[end] == sorted[start] {
            end += 1;
        }
        let t = (end - start) as f64;
        tie_term += t * t * t - t;
        start = end;
    }
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (((u - mean).abs() - 0.5) / var.sqrt()).max(0.0);
        (2.0 * std_normal_cdf(-z)).min(1.0)
    };
    Ok(MannWhitney { u, p_two_sided: p, exact: false })
}

/// Two-sided permutation p-value of the first sample's rank sum, counting
/// subsets of doubled midranks.
fn exact_p(ranks: &[f64], na: usize) -> f64 {
    let n = ranks.len();
    // enumerate the smaller side; its rank-sum distribution is the mirror image
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let (k, observed): (usize, usize) = if na <= n - na {
        (na, doubled[..na].iter().sum())
    } else {
        (n - na, doubled[na..].iter().sum())
    };
    let max_sum: usize = doubled.iter().sum();
    // counts[j][s]: subsets of size j with doubled rank sum s
    let mut counts = vec![vec![0.0f64; max_sum + 1]; k + 1];
    counts[0][0] = 1.0;
    for &r in &doubled {
        for j in (1..=k).rev() {
            let (lo, hi) = counts.split_at_mut(j);
            let prev = &lo[j - 1];
            let cur = &mut hi[0];
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let dist = &counts[k];
    let total: f64 = dist.iter().sum();
    let lower: f64 = dist[..=observed].iter().sum();
    let upper: f64 = dist[observed..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

/// Spearman rank correlation with midranks; `None` if either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_len("spearman inputs", x.len(), y.len())?;
    check_finite_all("spearman x", x)?;
    check_finite_all("spearman y", y)?;
    if x.len() < 2 {
        return Ok(None);
    }
    Ok(pearson(&midranks(x), &midranks(y)))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Unweighted mean of the per-class F1 scores for labels `{0, 1}`. A class
/// absent from both vectors scores 1.
pub fn macro_f1(predictions: &[u8], truth: &[u8]) -> Result<f64> {
    check_len("macro-F1 label vectors", truth.len(), predictions.len())?;
    if let Some(&bad) = predictions.iter().chain(truth).find(|&&l| l > 1) {
        return Err(Error::Domain(format!("labels must be 0 or 1, got {bad}")));
    }
    let mut total = 0.0;
    for class in 0..=1u8 {
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for (&p, &t) in predictions.iter().zip(truth) {
            match (p == class, t == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                (false, false) => {}
            }
        }
        total += if tp + fp + fnn == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
        };
    }
    Ok(total / 2.0)
}

/// Indices partitioned at the `quantile` order statistic: the lowest
/// `max(⌊q·n⌋, 1)` values and everything tied with them go low.
pub fn split_high_low(values: &[f64], quantile: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Domain(format!("quantile must lie in (0,1), got {quantile}")));
    }
    check_finite_all("split values", values)?;
    if values.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let k = ((quantile * values.len() as f64).floor() as usize).max(1);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[k - 1];
    Ok((0..values.len()).partition(|&i| values[i] <= threshold))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Population skewness `m₃ / m₂^{3/2}`; `None` for fewer than 3 values or
/// zero spread.
pub fn skewness(values: &[f64]) -> Option<f64> {
    if values.len() < 3 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    (m2 > 0.0).then(|| m3 / m2.powf(1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Domain("histogram needs at least one bin".into()));
    }
    check_finite_all("histogram values", values)?;
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins { hi.max(lo + width) } else { lo + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        out[b].count += 1;
    }
    Ok(out)
}

/// Minimum of `y` within equal-count bins of `x`, as `(median x of bin, min y)`.
pub fn lower_envelope(x: &[f64], y: &[f64], bins: usize) -> Result<Vec<(f64, f64)>> {
    check_len("envelope inputs", x.len(), y.len())?;
    check_finite_all("envelope x", x)?;
    check_finite_all("envelope y", y)?;
    if bins == 0 {
        return Err(Error::Domain("envelope needs at least one bin".into()));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let bins = bins.min(order.len());
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let start = b * order.len() / bins;
        let end = (b + 1) * order.len() / bins;
        let chunk = &order[start..end];
        let xs: Vec<f64> = chunk.iter().map(|&i| x[i]).collect();
        let ymin = chunk.iter().map(|&i| y[i]).fold(f64::INFINITY, f64::min);
        out.push((median(&xs).unwrap_or(f64::NAN), ymin));
    }
    Ok(out)
}
