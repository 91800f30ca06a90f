//! Paired two-sided t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_statistic: f64,
    pub p_value: f64,
    /// Set when the differences have zero variance, so the statistic is
    /// fixed by convention rather than by the t distribution.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `d = a - b` with `n - 1` degrees of freedom.
///
/// All-zero differences give `t = 0, p = 1`; constant nonzero differences
/// give an infinite statistic and `p = 0`. Both are flagged degenerate.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("paired t-test on non-finite values".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t_statistic: 0.0, p_value: 1.0, degenerate: true }
        } else {
            TTest { t_statistic: mean.signum() * f64::INFINITY, p_value: 0.0, degenerate: true }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(TTest { t_statistic: t, p_value: t_two_sided_p(t, (n - 1) as f64), degenerate: false })
}

/// `P(|T| >= |t|)` for Student's t with `nu` degrees of freedom.
pub fn t_two_sided_p(t: f64, nu: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = nu / (nu + t * t);
    beta_reg(nu / 2.0, 0.5, x).clamp(0.0, 1.0)
}
