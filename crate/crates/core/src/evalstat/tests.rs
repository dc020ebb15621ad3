use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::erf::erfc;

use super::metrics::midranks;
use crate::error::{Error, Result};

/// Upper tail of the standard normal.
fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

/// Shapiro–Wilk `(W, p)` using Royston's approximation (valid for
/// 3 ≤ n ≤ 5000).
pub fn shapiro_wilk(sample: &[f64]) -> Result<(f64, f64)> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::Insufficient(format!("Shapiro-Wilk needs 3..=5000 values, got {n}")));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if !(range > 1e-19) {
        return Err(Error::Insufficient("Shapiro-Wilk undefined for a constant sample".into()));
    }
    let nn2 = n / 2;
    let an = n as f64;
    let mut a = vec![0.0; nn2 + 1];
    if n == 3 {
        a[1] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
        let an25 = an + 0.25;
        let m: Vec<f64> = (0..=nn2)
            .map(|i| if i == 0 { 0.0 } else { std_normal.inverse_cdf((i as f64 - 0.375) / an25) })
            .collect();
        let summ2 = 2.0 * m[1..].iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let c1 = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
        let c2 = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let a1 = poly(&c1, rsn) - m[1] / ssumm2;
        let (i1, fac) = if n > 5 {
            let a2 = -m[2] / ssumm2 + poly(&c2, rsn);
            a[2] = a2;
            let fac = ((summ2 - 2.0 * m[1] * m[1] - 2.0 * m[2] * m[2]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (3, fac)
        } else {
            (2, ((summ2 - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[1] = a1;
        for i in i1..=nn2 {
            a[i] = -m[i] / fac;
        }
    }
    let xm = mean(&x);
    let ss: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let num: f64 = (1..=nn2).map(|i| a[i] * (x[n - i] - x[i - 1])).sum();
    let w = (num * num / ss).min(1.0);

    if n == 3 {
        let pw = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - (0.75f64).sqrt().asin());
        return Ok((w, pw.clamp(0.0, 1.0)));
    }
    let y = (1.0 - w).ln();
    let (y, m, s) = if n <= 11 {
        let gamma = poly(&[-2.273, 0.459], an);
        if y >= gamma {
            return Ok((w, 1e-99));
        }
        let y = -(gamma - y).ln();
        let m = poly(&[0.544, -0.39978, 0.025054, -6.714e-4], an);
        let s = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp();
        (y, m, s)
    } else {
        let xx = an.ln();
        let m = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], xx);
        let s = poly(&[-0.4803, -0.082676, 0.0030302], xx).exp();
        (y, m, s)
    };
    Ok((w, normal_sf((y - m) / s)))
}

/// Two-sided independent two-sample t-test assuming equal variances.
/// Returns `(t, p)`.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let (n1, n2) = (a.len(), b.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::Insufficient("t-test needs at least 2 values per group".into()));
    }
    let (m1, m2) = (mean(a), mean(b));
    let ss1: f64 = a.iter().map(|v| (v - m1).powi(2)).sum();
    let ss2: f64 = b.iter().map(|v| (v - m2).powi(2)).sum();
    let df = (n1 + n2 - 2) as f64;
    let sp2 = (ss1 + ss2) / df;
    let se = (sp2 * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return Ok(if m1 == m2 { (f64::NAN, 1.0) } else { (f64::INFINITY.copysign(m1 - m2), 0.0) });
    }
    let t = (m1 - m2) / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid degrees of freedom");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Number of ways to reach each U in `0..=n1·n2` for untied samples.
fn u_distribution(n1: usize, n2: usize) -> Vec<f64> {
    // f[i][j][u]: arrangements of i x-values and j y-values with statistic u
    let max = n1 * n2;
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0; max + 1]; n2 + 1];
    for row in prev.iter_mut() {
        row[0] = 1.0;
    }
    for i in 1..=n1 {
        let mut cur: Vec<Vec<f64>> = vec![vec![0.0; max + 1]; n2 + 1];
        cur[0][0] = 1.0;
        for j in 1..=n2 {
            for u in 0..=i * j {
                // largest value is an x (beats all j y-values) or a y
                let from_x = if u >= j { prev[j][u - j] } else { 0.0 };
                let from_y = cur[j - 1][u];
                cur[j][u] = from_x + from_y;
            }
        }
        prev = cur;
    }
    prev[n2].clone()
}

/// Two-sided Mann–Whitney U test. Exact when the combined size is at most
/// 25 and there are no ties, otherwise the normal approximation with tie
/// and continuity corrections.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::Insufficient("Mann-Whitney needs both groups nonempty".into()));
    }
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    if all.iter().any(|v| v.is_nan()) {
        return Err(Error::Insufficient("NaN in Mann-Whitney input".into()));
    }
    let ranks = midranks(&all);
    let r1: f64 = ranks[..n1].iter().sum();
    let u1 = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let n = n1 + n2;
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf1 = n1 as f64;
    let nf2 = n2 as f64;
    if n <= 25 && tie_term == 0.0 {
        let counts = u_distribution(n1, n2);
        let total: f64 = counts.iter().sum();
        let u = u1.round() as usize;
        let lower: f64 = counts[..=u].iter().sum::<f64>() / total;
        let upper: f64 = counts[u..].iter().sum::<f64>() / total;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(MannWhitney { u: u1, p_value: p, exact: true });
    }
    let mu = nf1 * nf2 / 2.0;
    let nf = n as f64;
    let var = nf1 * nf2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney { u: u1, p_value: 1.0, exact: false });
    }
    let u_big = u1.max(nf1 * nf2 - u1);
    let z = (u_big - mu - 0.5) / var.sqrt();
    let p = (2.0 * normal_sf(z)).clamp(0.0, 1.0);
    Ok(MannWhitney { u: u1, p_value: p, exact: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestName {
    TTest,
    MannWhitney,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_name: TestName,
    pub statistic: f64,
    pub p_value: f64,
    /// Shapiro–Wilk p-value per sample; `None` where normality was undefined.
    pub normality_p: [Option<f64>; 2],
    pub stars: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Normality-gated comparison: both samples pass Shapiro–Wilk at `alpha`
/// gives an equal-variance t-test, anything else a Mann–Whitney U test.
pub fn compare_models(a: &[f64], b: &[f64], alpha: f64) -> Result<TestResult> {
    if a.len() < 3 || b.len() < 3 {
        return Err(Error::Insufficient("compare_models needs at least 3 values per sample".into()));
    }
    let mut warnings = Vec::new();
    let mut normality = [None, None];
    for (k, s) in [a, b].into_iter().enumerate() {
        match shapiro_wilk(s) {
            Ok((_, p)) => normality[k] = Some(p),
            Err(_) => warnings.push(format!("sample {} is constant; normality undefined", k + 1)),
        }
    }
    let normal = normality.iter().all(|p| p.is_some_and(|p| p >= alpha));
    let (test_name, statistic, p_value) = if normal {
        let (t, p) = t_test(a, b)?;
        (TestName::TTest, t, p)
    } else {
        let mw = mann_whitney(a, b)?;
        (TestName::MannWhitney, mw.u, mw.p_value)
    };
    Ok(TestResult {
        test_name,
        statistic,
        p_value,
        normality_p: normality,
        stars: stars(p_value).to_string(),
        warnings,
    })
}

/// Significance marker: `****` below 1e-4, `***` below 1e-3, `**` below
/// 0.01, `*` below 0.05, otherwise `ns`.
pub fn stars(p: f64) -> &'static str {
    if p < 1e-4 {
        "****"
    } else if p < 1e-3 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "ns"
    }
}

/// `(mean, lower, upper)` of a Student-t interval across folds.
pub fn fold_ci(values: &[f64], level: f64) -> Result<(f64, f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Insufficient(format!("confidence interval needs n >= 2, got {n}")));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    let m = mean(values);
    let sd = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid degrees of freedom")
        .inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let half = t * sd / (n as f64).sqrt();
    Ok((m, m - half, m + half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub n: usize,
}

impl MetricReport {
    /// Summarizes per-fold values; a single value yields a zero-width interval.
    pub fn from_values(metric: impl Into<String>, values: Vec<f64>, level: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyScope("no values to summarize".into()));
        }
        let (mean, lo, hi) = if values.len() == 1 {
            (values[0], values[0], values[0])
        } else {
            fold_ci(&values, level)?
        };
        Ok(Self {
            metric: metric.into(),
            n: values.len(),
            values,
            mean,
            ci_lower: lo,
            ci_upper: hi,
            level,
        })
    }
}
