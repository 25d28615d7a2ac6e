//! Significance testing for seed-level comparisons.

use crate::error::{Error, Result};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub t: f64,
    pub p: f64,
    pub degrees_of_freedom: f64,
}

fn mean_and_var(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch's t-test for a difference of means, with
/// Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(samples_a: &[f64], samples_b: &[f64]) -> Result<WelchTest> {
    if samples_a.len() < 2 || samples_b.len() < 2 {
        return Err(Error::Domain("each sample set needs at least two values".into()));
    }
    let (ma, va) = mean_and_var(samples_a);
    let (mb, vb) = mean_and_var(samples_b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::Domain(
            "both sample sets are degenerate (zero variance); t is undefined".into(),
        ));
    }
    let na = samples_a.len() as f64;
    let nb = samples_b.len() as f64;
    let se_a = va / na;
    let se_b = vb / nb;
    let t = (ma - mb) / (se_a + se_b).sqrt();
    let df = (se_a + se_b) * (se_a + se_b)
        / (se_a * se_a / (na - 1.0) + se_b * se_b / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Domain(format!("t-distribution setup failed: {e}")))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(WelchTest { t, p, degrees_of_freedom: df })
}
