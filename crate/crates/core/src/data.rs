//! Market data: kline loading, parameter estimation and least squares.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Minimum number of bars both series must share.
pub const MIN_COMMON_BARS: usize = 30;

/// Close prices keyed by bar open time, strictly increasing in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub timestamps: Vec<i64>,
    pub closes: Vec<f64>,
}

impl PriceSeries {
    pub fn new(timestamps: Vec<i64>, closes: Vec<f64>) -> Result<Self> {
        if timestamps.len() != closes.len() {
            return Err(Error::Data(format!(
                "{} timestamps but {} closes",
                timestamps.len(),
                closes.len()
            )));
        }
        for (i, &c) in closes.iter().enumerate() {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Data(format!("close {c} at index {i} is not a positive price")));
            }
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Data(format!("timestamps not increasing at index {}", i + 1)));
            }
        }
        Ok(PriceSeries { timestamps, closes })
    }

    pub fn len(&self) -> usize {
        self.closes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closes.is_empty()
    }
}

/// Column layout of a kline file. The defaults match the usual exchange export
/// (open time first, close fifth, no header).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KlineSchema {
    pub has_header: bool,
    pub time_column: usize,
    pub close_column: usize,
    pub delimiter: u8,
}

impl Default for KlineSchema {
    fn default() -> Self {
        KlineSchema { has_header: false, time_column: 0, close_column: 4, delimiter: b',' }
    }
}

pub fn load_klines(path: &Path, schema: &KlineSchema) -> Result<PriceSeries> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_klines(file, schema)
}

pub fn read_klines<R: std::io::Read>(input: R, schema: &KlineSchema) -> Result<PriceSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(schema.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut timestamps = Vec::new();
    let mut closes = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        let field = |col: usize, what: &str| {
            record.get(col).ok_or_else(|| {
                Error::Data(format!("row {line}: missing {what} column {col} (row has {} fields)", record.len()))
            })
        };
        let t = field(schema.time_column, "time")?;
        let c = field(schema.close_column, "close")?;
        let ts = parse_time(t).ok_or_else(|| Error::Data(format!("row {line}: bad timestamp '{t}'")))?;
        let close: f64 = c.parse().map_err(|_| Error::Data(format!("row {line}: bad close '{c}'")))?;
        if !(close > 0.0) || !close.is_finite() {
            return Err(Error::Data(format!("row {line}: close {close} is not a positive price")));
        }
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::Data(format!("row {line}: timestamp {ts} does not follow {prev}")));
            }
        }
        timestamps.push(ts);
        closes.push(close);
    }
    if closes.is_empty() {
        return Err(Error::Data("no price rows".into()));
    }
    Ok(PriceSeries { timestamps, closes })
}

fn parse_time(s: &str) -> Option<i64> {
    if let Ok(t) = s.parse::<i64>() {
        return Some(t);
    }
    let x: f64 = s.parse().ok()?;
    (x.is_finite() && x.fract() == 0.0 && x.abs() < 9.0e18).then_some(x as i64)
}

/// Per-bar log-return moments of two assets on their common bars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketEstimates {
    #[serde(rename = "muA")]
    pub mu_a: f64,
    #[serde(rename = "muB")]
    pub mu_b: f64,
    #[serde(rename = "sigmaA")]
    pub sigma_a: f64,
    #[serde(rename = "sigmaB")]
    pub sigma_b: f64,
    pub rho: f64,
    /// Volatility of the log exchange rate.
    pub sigma: f64,
    pub bars: usize,
    /// A series had zero return variance; `rho` is then reported as 0.
    pub degenerate: bool,
}

/// Joins the series on timestamp and estimates return moments with the
/// `n - 1` denominator.
pub fn estimate_params(a: &PriceSeries, b: &PriceSeries) -> Result<MarketEstimates> {
    let (pa, pb) = inner_join(a, b);
    if pa.len() < MIN_COMMON_BARS {
        return Err(Error::Data(format!(
            "only {} common bars, need at least {MIN_COMMON_BARS}",
            pa.len()
        )));
    }
    let ra: Vec<f64> = pa.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let rb: Vec<f64> = pb.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let n = ra.len() as f64;
    let mean = |x: &[f64]| x.iter().sum::<f64>() / n;
    let (ma, mb) = (mean(&ra), mean(&rb));
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
        sab += (x - ma) * (y - mb);
    }
    let (va, vb, cab) = (saa / (n - 1.0), sbb / (n - 1.0), sab / (n - 1.0));
    let (sigma_a, sigma_b) = (va.sqrt(), vb.sqrt());
    let degenerate = !(sigma_a > 0.0 && sigma_b > 0.0);
    let rho = if degenerate { 0.0 } else { (cab / (sigma_a * sigma_b)).clamp(-1.0, 1.0) };
    // Variance of log(R_A / R_B) from the same moments.
    let sigma = (va + vb - 2.0 * cab).max(0.0).sqrt();
    Ok(MarketEstimates { mu_a: ma, mu_b: mb, sigma_a, sigma_b, rho, sigma, bars: pa.len(), degenerate })
}

fn inner_join(a: &PriceSeries, b: &PriceSeries) -> (Vec<f64>, Vec<f64>) {
    let (mut i, mut j) = (0, 0);
    let mut pa = Vec::new();
    let mut pb = Vec::new();
    while i < a.len() && j < b.len() {
        match a.timestamps[i].cmp(&b.timestamps[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                pa.push(a.closes[i]);
                pb.push(b.closes[j]);
                i += 1;
                j += 1;
            }
        }
    }
    (pa, pb)
}

/// Ordinary least squares fit with classical standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsResult {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub observations: usize,
    pub dof: usize,
}

/// Regresses `y` on the named columns plus an intercept, which comes first in
/// the result.
pub fn ols(y: &[f64], columns: &[(String, Vec<f64>)]) -> Result<OlsResult> {
    let n = y.len();
    let k = columns.len() + 1;
    if let Some((name, _)) = columns.iter().find(|(_, c)| c.len() != n) {
        return Err(Error::Data(format!("column '{name}' length differs from response length {n}")));
    }
    if y.iter().chain(columns.iter().flat_map(|(_, c)| c.iter())).any(|v| !v.is_finite()) {
        return Err(Error::Data("regression data contains non-finite values".into()));
    }
    if n <= k {
        return Err(Error::Data(format!("{n} observations cannot identify {k} coefficients")));
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(columns.iter().map(|(name, _)| name.clone()));
    let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { columns[j - 1].1[i] });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    check_rank(&xtx, &names)?;
    let chol = xtx.clone().cholesky().ok_or_else(|| Error::Collinear("design matrix".into()))?;
    let beta = chol.solve(&(x.transpose() * &yv));
    let inv = chol.inverse();
    let resid = &yv - &x * &beta;
    let ssr = resid.norm_squared();
    let ybar = yv.mean();
    let sst: f64 = y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    let dof = n - k;
    let s2 = ssr / dof as f64;
    let t_dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Data(e.to_string()))?;
    let mut std_errors = Vec::with_capacity(k);
    let mut t_stats = Vec::with_capacity(k);
    let mut p_values = Vec::with_capacity(k);
    for j in 0..k {
        let se = (s2 * inv[(j, j)]).max(0.0).sqrt();
        let t = if se > 0.0 {
            beta[j] / se
        } else if beta[j] == 0.0 {
            0.0
        } else {
            beta[j].signum() * f64::INFINITY
        };
        std_errors.push(se);
        t_stats.push(t);
        p_values.push((2.0 * (1.0 - t_dist.cdf(t.abs()))).clamp(0.0, 1.0));
    }
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    Ok(OlsResult {
        names,
        coefficients: beta.iter().copied().collect(),
        std_errors,
        t_stats,
        p_values,
        r_squared,
        observations: n,
        dof,
    })
}

/// Pivots of the Cholesky factor of the Gram matrix; a pivot that vanishes
/// relative to its diagonal entry marks a column spanned by earlier ones.
fn check_rank(xtx: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let k = xtx.nrows();
    let mut l = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let mut d = xtx[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if !(d > 1e-10 * xtx[(j, j)].max(f64::MIN_POSITIVE)) {
            return Err(Error::Collinear(names[j].clone()));
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..k {
            let mut v = xtx[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Ok(())
}

/// Reference fee-tier regression on 110 pools: fee tier on return
/// correlation, asset-B volatility and exchange-rate volatility, as
/// `(name, coefficient, p-value)`. Documented for
/// comparison only.
pub const FEE_TIER_REFERENCE: [(&str, f64, f64); 4] = [
    ("intercept", 0.3454, 0.1602),
    ("rho", -0.0040, 0.9873),
    ("sigmaB", -3.2821, 0.5054),
    ("sigma", 14.5096, 0.0420),
];
