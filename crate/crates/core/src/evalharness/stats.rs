//! Fold aggregation and the paired t-test. The Student-t tail comes from
//! the regularized incomplete beta via a Lentz continued fraction.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n−1); 0 when n = 1.
    pub std: f64,
    pub n: usize,
    /// Set when `n = 1` made the deviation undefined.
    pub single: bool,
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    ensure!(!values.is_empty(), InvalidArgument, "cannot aggregate zero results");
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(Summary { mean, std: 0.0, n, single: true });
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(Summary { mean, std: (ss / (n - 1) as f64).sqrt(), n, single: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    /// Differences constant and nonzero: p taken as 0.
    ZeroVarianceNonzeroMean,
    /// Differences all zero: p taken as 1.
    Identical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatTest {
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
    pub degenerate: Option<Degenerate>,
}

/// Paired t-test on `d = a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<StatTest> {
    ensure!(a.len() == b.len(), Shape, "paired samples differ in length: {} vs {}", a.len(), b.len());
    ensure!(a.len() >= 2, InvalidArgument, "paired t-test needs at least 2 pairs");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let s = aggregate(&d)?;
    let df = n - 1;
    if s.std == 0.0 {
        return Ok(if s.mean == 0.0 {
            StatTest { t: 0.0, df, p: 1.0, degenerate: Some(Degenerate::Identical) }
        } else {
            StatTest { t: s.mean.signum() * f64::INFINITY, df, p: 0.0, degenerate: Some(Degenerate::ZeroVarianceNonzeroMean) }
        });
    }
    let t = s.mean * (n as f64).sqrt() / s.std;
    Ok(StatTest { t, df, p: student_t_two_sided(t, df as f64), degenerate: None })
}

/// `P(|T| ≥ |t|)` for `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    reg_inc_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Student-t CDF.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fast for x below the mean.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_at_integers_and_half() {
        for n in 1..15u32 {
            let fact: f64 = (1..n).map(f64::from).product();
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "{n}");
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn t_with_one_df_is_cauchy() {
        for t in [-3.0, -0.5, 0.2, 1.0, 7.0] {
            let want = 0.5 + (t as f64).atan() / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0) - want).abs() < 1e-13, "{t}");
        }
    }

    #[test]
    fn aggregate_closed_forms() {
        let s = aggregate(&[0.5, 0.7]).unwrap();
        assert!((s.mean - 0.6).abs() < 1e-15 && (s.std - 0.02f64.sqrt()).abs() < 1e-15);
        let s = aggregate(&[0.6]).unwrap();
        assert!(s.single && s.std == 0.0);
        assert_eq!(aggregate(&[0.3, 0.3, 0.3]).unwrap().std, 0.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn degenerate_paths() {
        let r = paired_ttest(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.p, r.degenerate), (1.0, Some(Degenerate::Identical)));
        let r = paired_ttest(&[2.0, 3.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.p, r.degenerate), (0.0, Some(Degenerate::ZeroVarianceNonzeroMean)));
        let r = paired_ttest(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).unwrap();
        assert_eq!((r.t, r.p, r.degenerate), (0.0, 1.0, None));
    }
}
