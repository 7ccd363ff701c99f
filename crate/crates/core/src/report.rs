//! Statistics and CSV tables for evaluation runs.

use std::path::Path;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::Split;
use crate::error::{Error, Result};

/// Smallest evaluation set for which a quantile report is produced.
pub const MIN_QUANTILE_PAIRS: usize = 100;

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn two_sided_t(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub rho: f64,
    /// Two-sided, from the t approximation with `n - 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// Spearman rank correlation; `rho` is NaN when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::invalid("spearman inputs differ in length"));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::invalid("spearman needs at least three observations"));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y));
    let p_value = if rho.is_nan() {
        f64::NAN
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        two_sided_t(rho * (df / (1.0 - rho * rho)).sqrt(), df)
    };
    Ok(Correlation { rho, p_value, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    /// Mean of the first sample minus the second (or of the differences).
    pub mean_diff: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

impl TTest {
    /// One-sided p-value for the alternative `mean_diff > 0`.
    pub fn p_greater(&self) -> f64 {
        if self.t.is_nan() {
            return f64::NAN;
        }
        let dist = StudentsT::new(0.0, 1.0, self.df).expect("positive degrees of freedom");
        dist.sf(self.t)
    }
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each sample needs at least two observations"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let mean_diff = mean(a) - mean(b);
    let t = mean_diff / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(TTest {
        mean_diff,
        t,
        df,
        p_value: two_sided_t(t, df),
    })
}

/// Paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("paired samples need equal lengths of at least two"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean_diff = mean(&d);
    let t = mean_diff / (variance(&d) / n).sqrt();
    let df = n - 1.0;
    Ok(TTest {
        mean_diff,
        t,
        df,
        p_value: two_sided_t(t, df),
    })
}

/// Fixed nine-significant-digit rendering in the style of C's `%.9g`.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), sign, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileRow {
    pub decile: usize,
    pub n: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub mean_u: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileReport {
    pub rows: Vec<QuantileRow>,
    pub spearman: Correlation,
}

/// Accuracy per uncertainty decile and the rank correlation of `u` with correctness.
pub fn quantile_report(u: &[f64], correct: &[f64]) -> Result<QuantileReport> {
    if u.len() != correct.len() {
        return Err(Error::invalid("uncertainty and correctness differ in length"));
    }
    if u.len() < MIN_QUANTILE_PAIRS {
        return Err(Error::invalid(format!(
            "quantile report needs at least {MIN_QUANTILE_PAIRS} pairs, got {}",
            u.len()
        )));
    }
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    let n = u.len();
    let rows = (0..10)
        .map(|d| {
            let chunk = &idx[d * n / 10..(d + 1) * n / 10];
            let us: Vec<f64> = chunk.iter().map(|&i| u[i]).collect();
            QuantileRow {
                decile: d + 1,
                n: chunk.len(),
                u_min: us.iter().copied().fold(f64::INFINITY, f64::min),
                u_max: us.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_u: mean(&us),
                accuracy: chunk.iter().map(|&i| correct[i]).sum::<f64>() / chunk.len() as f64,
            }
        })
        .collect();
    let spearman = spearman(u, correct)?;
    if spearman.rho.is_nan() {
        tracing::warn!("uncertainty or correctness is constant; rank correlation undefined");
    }
    Ok(QuantileReport { rows, spearman })
}

impl QuantileReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["decile", "n", "u_min", "u_max", "mean_u", "accuracy", "spearman_rho", "spearman_p"]);
        for r in &self.rows {
            t.push(vec![
                r.decile.to_string(),
                r.n.to_string(),
                fmt_float(r.u_min),
                fmt_float(r.u_max),
                fmt_float(r.mean_u),
                fmt_float(r.accuracy),
                fmt_float(self.spearman.rho),
                fmt_float(self.spearman.p_value),
            ]);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub split: Split,
    /// 1-based bin index, or 0 for the split-wide row.
    pub bin: usize,
    pub abs_p_lo: f64,
    pub abs_p_hi: f64,
    pub n: usize,
    pub mean_u: f64,
    pub std_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    /// Welch test of OOD against in-distribution uncertainty.
    pub ood_vs_id: Option<TTest>,
}

/// Uncertainty per split, overall and in ten bins of `|p|`.
///
/// Bin edges are deciles of `|p|` over all pairs, so every pair lands in exactly one bin.
pub fn uncertainty_gap(splits: &[Split], p: &[f64], u: &[f64]) -> Result<GapReport> {
    if splits.len() != p.len() || p.len() != u.len() {
        return Err(Error::invalid("split, p and u columns differ in length"));
    }
    if p.is_empty() {
        return Err(Error::invalid("no pairs to report on"));
    }
    let mut abs: Vec<f64> = p.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len();
    let edges: Vec<f64> = (0..=10)
        .map(|b| if b == 10 { abs[n - 1] } else { abs[b * n / 10] })
        .collect();
    let bin_of = |v: f64| -> usize {
        let a = v.abs();
        // last bin whose lower edge is <= a
        (0..10).rev().find(|&b| a >= edges[b]).unwrap_or(0)
    };

    let mut present: Vec<Split> = splits.to_vec();
    present.sort();
    present.dedup();
    let mut rows = Vec::new();
    for &s in &present {
        let all: Vec<f64> = (0..n).filter(|&i| splits[i] == s).map(|i| u[i]).collect();
        rows.push(summary_row(s, 0, 0.0, edges[10], &all));
        for b in 0..10 {
            let us: Vec<f64> = (0..n)
                .filter(|&i| splits[i] == s && bin_of(p[i]) == b)
                .map(|i| u[i])
                .collect();
            rows.push(summary_row(s, b + 1, edges[b], edges[b + 1], &us));
        }
    }
    let pick = |s: Split| -> Vec<f64> { (0..n).filter(|&i| splits[i] == s).map(|i| u[i]).collect() };
    let id: Vec<f64> = pick(Split::IdVal).into_iter().chain(pick(Split::IdTrain)).collect();
    let ood = pick(Split::Ood);
    let ood_vs_id = welch_t_test(&ood, &id).ok();
    Ok(GapReport { rows, ood_vs_id })
}

fn summary_row(split: Split, bin: usize, lo: f64, hi: f64, us: &[f64]) -> GapRow {
    let (mean_u, std_u) = match us.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (us[0], f64::NAN),
        _ => (mean(us), variance(us).sqrt()),
    };
    GapRow {
        split,
        bin,
        abs_p_lo: lo,
        abs_p_hi: hi,
        n: us.len(),
        mean_u,
        std_u,
    }
}

impl GapReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["split", "bin", "abs_p_lo", "abs_p_hi", "n", "mean_u", "std_u"]);
        for r in &self.rows {
            t.push(vec![
                r.split.to_string(),
                if r.bin == 0 { "all".into() } else { r.bin.to_string() },
                fmt_float(r.abs_p_lo),
                fmt_float(r.abs_p_hi),
                r.n.to_string(),
                fmt_float(r.mean_u),
                fmt_float(r.std_u),
            ]);
        }
        t
    }
}

/// One row of a routing evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// Split name or `all`.
    pub split: String,
    pub threshold: f64,
    pub mode: String,
    pub calls: usize,
    pub calls_ratio: f64,
    pub accuracy: f64,
    /// Seconds; volatile across runs.
    pub wall_time: f64,
}

pub const SWEEP_HEADER: [&str; 7] = ["split", "threshold", "mode", "calls", "calls_ratio", "accuracy", "wall_time"];

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&SWEEP_HEADER);
    for r in rows {
        t.push(vec![
            r.split.clone(),
            fmt_float(r.threshold),
            r.mode.clone(),
            r.calls.to_string(),
            fmt_float(r.calls_ratio),
            fmt_float(r.accuracy),
            fmt_float(r.wall_time),
        ]);
    }
    t
}
