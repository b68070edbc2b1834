//! Probabilistic and categorical verification scores.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::{count, lit, Real};

/// Kernel-form ensemble CRPS
/// `(1/k) Σ|xᵢ − y| − (1/(2k²)) ΣΣ|xᵢ − xⱼ|`, in `O(k log k)`.
pub fn crps_ensemble<T: Real>(members: &[T], y: T) -> Result<T> {
    let k = members.len();
    if k == 0 {
        return Err(Error::invalid("CRPS needs at least one member"));
    }
    let mut sorted = members.to_vec();
    if sorted.iter().any(|x| !x.is_finite()) || !y.is_finite() {
        return Err(Error::invalid("CRPS of non-finite values"));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let kf = count::<T>(k);
    let abs_err = sorted.iter().fold(T::zero(), |acc, &x| acc + (x - y).abs());
    // ΣΣ|xᵢ − xⱼ| = 2 Σᵢ (2i − k + 1) x₍ᵢ₎ over the sorted sample.
    let pair = sorted.iter().enumerate().fold(T::zero(), |acc, (i, &x)| {
        acc + (count::<T>(2 * i + 1) - kf) * x
    });
    let value = abs_err / kf - pair / (kf * kf);
    Ok(value.max(T::zero()))
}

pub fn mean<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &x| a + x) / count::<T>(v.len().max(1))
}

/// Mean of `forecast − observed`.
pub fn bias<T: Real>(forecast: &[T], observed: &[T]) -> Result<T> {
    same_len(forecast.len(), observed.len())?;
    let d: Vec<T> = forecast
        .iter()
        .zip(observed)
        .map(|(&f, &o)| f - o)
        .collect();
    Ok(mean(&d))
}

pub fn rmse<T: Real>(forecast: &[T], observed: &[T]) -> Result<T> {
    same_len(forecast.len(), observed.len())?;
    let d: Vec<T> = forecast
        .iter()
        .zip(observed)
        .map(|(&f, &o)| (f - o) * (f - o))
        .collect();
    Ok(mean(&d).sqrt())
}

/// Unbiased ensemble variance (zero for a single member).
pub fn ensemble_variance<T: Real>(members: &[T]) -> T {
    let k = members.len();
    if k < 2 {
        return T::zero();
    }
    let m = mean(members);
    members
        .iter()
        .fold(T::zero(), |a, &x| a + (x - m) * (x - m))
        / count::<T>(k - 1)
}

/// Root mean ensemble variance over cases.
pub fn spread<T: Real>(cases: &[&[T]]) -> T {
    let v: Vec<T> = cases.iter().map(|c| ensemble_variance(c)).collect();
    mean(&v).sqrt()
}

/// `√(mean (x̄ − y)²) / √(mean (σ²_ens + r))` over cases, each case being an
/// ensemble of predicted observations, the observation and its error variance.
pub fn rmse_spread_ratio<T: Real>(cases: &[&[T]], observed: &[T], r_diag: &[T]) -> Result<T> {
    same_len(cases.len(), observed.len())?;
    same_len(cases.len(), r_diag.len())?;
    if cases.is_empty() {
        return Err(Error::invalid("RMSE/spread ratio needs at least one case"));
    }
    let innov: Vec<T> = cases
        .iter()
        .zip(observed)
        .map(|(c, &o)| {
            let d = mean(c) - o;
            d * d
        })
        .collect();
    let pred: Vec<T> = cases
        .iter()
        .zip(r_diag)
        .map(|(c, &r)| ensemble_variance(c) + r)
        .collect();
    let denom = mean(&pred);
    if denom <= T::zero() {
        return Err(Error::invalid("zero predictive spread"));
    }
    Ok((mean(&innov) / denom).sqrt())
}

/// Fraction of members strictly above `threshold`.
pub fn event_probability<T: Real>(members: &[T], threshold: T) -> T {
    let n = members.iter().filter(|&&x| x > threshold).count();
    count::<T>(n) / count::<T>(members.len().max(1))
}

/// 2×2 contingency table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Contingency {
    pub hits: u64,
    pub false_alarms: u64,
    pub misses: u64,
    pub correct_negatives: u64,
}

impl Contingency {
    pub fn total(&self) -> u64 {
        self.hits + self.false_alarms + self.misses + self.correct_negatives
    }

    /// `(a + b) / (a + c)`; `None` without observed events.
    pub fn fbi(&self) -> Option<f64> {
        let obs = self.hits + self.misses;
        (obs > 0).then(|| (self.hits + self.false_alarms) as f64 / obs as f64)
    }

    /// `(a − a_r) / (a + b + c − a_r)` with `a_r = (a + b)(a + c) / n`.
    pub fn ets(&self) -> Option<f64> {
        let (a, b, c) = (
            self.hits as f64,
            self.false_alarms as f64,
            self.misses as f64,
        );
        let n = self.total() as f64;
        if n == 0.0 {
            return None;
        }
        let a_r = (a + b) * (a + c) / n;
        let denom = a + b + c - a_r;
        (denom != 0.0).then(|| (a - a_r) / denom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalScores {
    pub contingency: Contingency,
    pub ets: Option<f64>,
    pub fbi: Option<f64>,
    pub bss: Option<f64>,
}

/// Dichotomizes forecasts at `threshold_prob` for ETS/FBI and computes the
/// Brier skill score against the sample base rate.
pub fn categorical_scores<T: Real>(
    probs: &[T],
    outcomes: &[bool],
    threshold_prob: T,
) -> Result<CategoricalScores> {
    same_len(probs.len(), outcomes.len())?;
    if probs.is_empty() {
        return Err(Error::invalid("categorical scores need at least one case"));
    }
    if probs.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::invalid("probabilities must lie in [0, 1]"));
    }
    let mut t = Contingency::default();
    let mut brier = 0.0;
    for (&p, &o) in probs.iter().zip(outcomes) {
        match (p >= threshold_prob, o) {
            (true, true) => t.hits += 1,
            (true, false) => t.false_alarms += 1,
            (false, true) => t.misses += 1,
            (false, false) => t.correct_negatives += 1,
        }
        let e = crate::scalar::to_f64(p) - if o { 1.0 } else { 0.0 };
        brier += e * e;
    }
    let n = probs.len() as f64;
    brier /= n;
    let base = (t.hits + t.misses) as f64 / n;
    let brier_clim = base * (1.0 - base);
    Ok(CategoricalScores {
        contingency: t,
        ets: t.ets(),
        fbi: t.fbi(),
        bss: (brier_clim > 0.0).then(|| 1.0 - brier / brier_clim),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin<T: Real> {
    pub lower: T,
    pub upper: T,
    /// Mean forecast probability of the bin; `None` if empty.
    pub mean_prob: Option<T>,
    /// Observed event frequency of the bin; `None` if empty.
    pub obs_freq: Option<T>,
    pub count: usize,
}

/// Equal-width bins over `[0, 1]`; a forecast of exactly 1 falls in the last
/// bin.
pub fn reliability_curve<T: Real>(
    probs: &[T],
    outcomes: &[bool],
    bins: usize,
) -> Result<Vec<ReliabilityBin<T>>> {
    same_len(probs.len(), outcomes.len())?;
    if bins < 2 {
        return Err(Error::invalid("reliability curve needs at least 2 bins"));
    }
    let nb = count::<T>(bins);
    let mut sum_p = vec![T::zero(); bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for (&p, &o) in probs.iter().zip(outcomes) {
        if !(p >= T::zero() && p <= T::one()) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        let b = (p * nb).floor().to_usize().unwrap_or(0).min(bins - 1);
        sum_p[b] += p;
        counts[b] += 1;
        hits[b] += usize::from(o);
    }
    Ok((0..bins)
        .map(|b| {
            let n = counts[b];
            let nf = count::<T>(n);
            ReliabilityBin {
                lower: count::<T>(b) / nb,
                upper: count::<T>(b + 1) / nb,
                mean_prob: (n > 0).then(|| sum_p[b] / nf),
                obs_freq: (n > 0).then(|| count::<T>(hits[b]) / nf),
                count: n,
            }
        })
        .collect())
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Crps,
    Bias,
    Rmse,
    Spread,
    RmseSpreadRatio,
    Ets,
    Fbi,
    Bss,
    ReliabilityBin,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Crps,
        Metric::Bias,
        Metric::Rmse,
        Metric::Spread,
        Metric::RmseSpreadRatio,
        Metric::Ets,
        Metric::Fbi,
        Metric::Bss,
        Metric::ReliabilityBin,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Crps => "crps",
            Metric::Bias => "bias",
            Metric::Rmse => "rmse",
            Metric::Spread => "spread",
            Metric::RmseSpreadRatio => "rmse_spread_ratio",
            Metric::Ets => "ets",
            Metric::Fbi => "fbi",
            Metric::Bss => "bss",
            Metric::ReliabilityBin => "reliability_bin",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub cycle: usize,
    pub lead: usize,
    pub variable: String,
    pub metric: Metric,
    /// `None` for undefined scores, written as `NA`.
    pub value: Option<f64>,
}

/// Scores keyed by (cycle, lead, variable, metric), serialized as CSV with
/// header `cycle,lead,variable,metric,value`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

pub const SCORE_HEADER: &str = "cycle,lead,variable,metric,value";

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        cycle: usize,
        lead: usize,
        variable: impl Into<String>,
        metric: Metric,
        value: Option<f64>,
    ) {
        self.rows.push(ScoreRow {
            cycle,
            lead,
            variable: variable.into(),
            metric,
            value,
        });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, other: ScoreTable) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, cycle: usize, lead: usize, variable: &str, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.cycle == cycle && r.lead == lead && r.variable == variable && r.metric == metric
            })
            .and_then(|r| r.value)
    }

    /// Mean over all defined values matching `variable` and `metric`, and the
    /// number of values averaged.
    pub fn mean_of(
        &self,
        variable: &str,
        metric: Metric,
        lead: Option<usize>,
    ) -> Option<(f64, usize)> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variable == variable && r.metric == metric)
            .filter(|r| lead.is_none_or(|l| r.lead == l))
            .filter_map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| (vals.iter().sum::<f64>() / vals.len() as f64, vals.len()))
    }

    /// Checks the sign and range constraints of each metric.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            let Some(v) = r.value else { continue };
            let ok = match r.metric {
                Metric::Crps | Metric::Spread | Metric::Fbi | Metric::Rmse => v >= 0.0,
                Metric::Ets | Metric::Bss => v <= 1.0,
                _ => true,
            };
            if !ok || v.is_nan() {
                return Err(Error::invalid(format!(
                    "{} = {v} out of range at cycle {} lead {}",
                    r.metric, r.cycle, r.lead
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut out = String::with_capacity(32 * (self.rows.len() + 1));
        out.push_str(SCORE_HEADER);
        out.push('\n');
        for r in &self.rows {
            if r.variable.contains(',') || r.variable.contains('\n') {
                return Err(Error::invalid(format!(
                    "bad variable name {:?}",
                    r.variable
                )));
            }
            let value = r.value.map_or_else(|| "NA".to_string(), |v| v.to_string());
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.cycle, r.lead, r.variable, r.metric, value
            ));
        }
        w.write_all(out.as_bytes())
            .map_err(|e| Error::Io(e.to_string()))
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::Io(e.to_string()))?
            .unwrap_or_default();
        if header.trim_end() != SCORE_HEADER {
            return Err(Error::invalid(format!("bad score table header {header:?}")));
        }
        let mut table = ScoreTable::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::invalid(format!("score table line {}: {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let value = match f[4] {
                "NA" => None,
                v => Some(v.parse::<f64>().map_err(|_| bad())?),
            };
            table.rows.push(ScoreRow {
                cycle: f[0].parse().map_err(|_| bad())?,
                lead: f[1].parse().map_err(|_| bad())?,
                variable: f[2].to_string(),
                metric: f[3].parse().map_err(|_| bad())?,
                value,
            });
        }
        Ok(table)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::Io(e.to_string()))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f =
            std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Gaussian CRPS `σ (z (2Φ(z) − 1) + 2φ(z) − 1/√π)`, `z = (y − μ)/σ`.
pub fn crps_gaussian<T: Real>(mu: T, sigma: T, y: T) -> T {
    let z = (y - mu) / sigma;
    let pi = T::pi();
    let pdf = (-z * z / lit(2.0)).exp() / (lit::<T>(2.0) * pi).sqrt();
    let cdf = (T::one() + erf(z / lit::<T>(2.0).sqrt())) / lit(2.0);
    sigma * (z * (lit::<T>(2.0) * cdf - T::one()) + lit::<T>(2.0) * pdf - T::one() / pi.sqrt())
}

/// Error function, Abramowitz–Stegun 7.1.26 (absolute error below 1.5e-7).
fn erf<T: Real>(x: T) -> T {
    let s = x.signum();
    let x = x.abs();
    let t = T::one() / (T::one() + lit::<T>(0.327_591_1) * x);
    let poly = ((((lit::<T>(1.061_405_429) * t - lit(1.453_152_027)) * t + lit(1.421_413_741))
        * t
        - lit(0.284_496_736))
        * t
        + lit(0.254_829_592))
        * t;
    s * (T::one() - poly * (-x * x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crps_brute(m: &[f64], y: f64) -> f64 {
        let k = m.len() as f64;
        let a: f64 = m.iter().map(|x| (x - y).abs()).sum::<f64>() / k;
        let b: f64 = m
            .iter()
            .flat_map(|x| m.iter().map(move |z| (x - z).abs()))
            .sum::<f64>()
            / (2.0 * k * k);
        a - b
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_ensemble(&[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
        assert_eq!(crps_ensemble(&[3.5], 1.0).unwrap(), 2.5);
        assert!((crps_ensemble(&[0.0f64, 1.0], 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(crps_ensemble::<f64>(&[], 1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn crps_matches_double_sum(m in proptest::collection::vec(-10.0f64..10.0, 1..30), y in -12.0f64..12.0) {
            let fast = crps_ensemble(&m, y).unwrap();
            proptest::prop_assert!((fast - crps_brute(&m, y)).abs() < 1e-10);
            proptest::prop_assert!(fast >= 0.0);
        }
    }

    #[test]
    fn gaussian_closed_form() {
        assert!((crps_gaussian(0.0f64, 1.0, 0.0) - 0.233_695_2).abs() < 1e-6);
        assert!((erf(0.5f64) - 0.520_499_877_8).abs() < 2e-7);
    }

    #[test]
    fn contingency_hand_example() {
        let t = Contingency {
            hits: 30,
            false_alarms: 10,
            misses: 10,
            correct_negatives: 50,
        };
        assert_eq!(t.fbi(), Some(1.0));
        assert_eq!(t.ets(), Some(14.0 / 34.0));
    }

    #[test]
    fn perfect_and_climatological_forecasts() {
        let outcomes = [true, false, true, false, false];
        let perfect: Vec<f64> = outcomes
            .iter()
            .map(|&o| if o { 1.0 } else { 0.0 })
            .collect();
        let s = categorical_scores(&perfect, &outcomes, 0.5).unwrap();
        assert_eq!((s.ets, s.fbi, s.bss), (Some(1.0), Some(1.0), Some(1.0)));
        let clim = vec![0.4; 5];
        let s = categorical_scores(&clim, &outcomes, 0.5).unwrap();
        assert!(s.bss.unwrap().abs() < 1e-15);
        let none = categorical_scores(&[0.1, 0.7], &[false, false], 0.5).unwrap();
        assert_eq!(none.fbi, None);
        assert_eq!(none.bss, None);
    }

    #[test]
    fn reliability_degenerate_cases() {
        let c = reliability_curve(&[0.0; 4], &[false; 4], 10).unwrap();
        assert_eq!(c.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(
            (c[0].mean_prob, c[0].obs_freq, c[0].count),
            (Some(0.0), Some(0.0), 4)
        );
        let c = reliability_curve(&[1.0; 3], &[true; 3], 10).unwrap();
        assert_eq!(
            (c[9].mean_prob, c[9].obs_freq, c[9].count),
            (Some(1.0), Some(1.0), 3)
        );
        assert!(c[3].mean_prob.is_none());
        assert!(reliability_curve(&[0.5], &[true], 1).is_err());
    }

    #[test]
    fn ratio_examples() {
        let ens: [&[f64]; 2] = [&[1.0, 3.0], &[0.0, 2.0]];
        assert_eq!(
            rmse_spread_ratio(&ens, &[2.0, 1.0], &[0.0, 0.0]).unwrap(),
            0.0
        );
        let point: [&[f64]; 2] = [&[1.0], &[-1.0]];
        assert_eq!(
            rmse_spread_ratio(&point, &[0.0, 0.0], &[1.0, 1.0]).unwrap(),
            1.0
        );
        assert!(rmse_spread_ratio(&point, &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn score_table_csv_round_trip() {
        let mut t = ScoreTable::new();
        t.push(0, 0, "x0", Metric::Crps, Some(0.125));
        t.push(3, 2, "all", Metric::Fbi, None);
        t.push(3, 2, "all", Metric::Bias, Some(-1e-20));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .starts_with("cycle,lead,variable,metric,value\n0,0,x0,crps,0.125\n3,2,all,fbi,NA\n"));
        assert_eq!(ScoreTable::read_csv(buf.as_slice()).unwrap(), t);
        assert_eq!(t.get(0, 0, "x0", Metric::Crps), Some(0.125));
        t.validate().unwrap();
        t.push(1, 0, "x0", Metric::Spread, Some(-1.0));
        assert!(t.validate().is_err());
    }
}
