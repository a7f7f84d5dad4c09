//! Ranking and calibration metrics, Welch's t-test and feature correlations.

use std::io::Write;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Rank-sum in `O(n log n)`.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!("{} labels, {} scores", labels.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {} positive and {} negative",
            n_pos, n_neg
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the positive rank sum keeps tied midranks integral
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_pos += mid2 * pos;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// Mean binary cross-entropy with scores clamped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!("{} labels, {} scores", labels.len(), scores.len())));
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("logloss of an empty set".into()));
    }
    let s: f64 = labels
        .iter()
        .zip(scores)
        .map(|(&y, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(s / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    /// Two-tailed.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::UndefinedMetric("welch t-test needs at least two values per sample".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok(TTest {
                t: 0.0,
                dof: (a.len() + b.len() - 2) as f64,
                p: 1.0,
            });
        }
        let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok(TTest {
            t,
            dof: (a.len() + b.len() - 2) as f64,
            p: 0.0,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Domain(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, dof, p })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    pub m: usize,
    /// Row-major `m × m`.
    pub values: Vec<f64>,
    /// Columns with zero variance; their rows and columns are all zero.
    pub constant: Vec<usize>,
}

impl Correlation {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    /// CSV with a header of column names and one row per column.
    pub fn write_csv<W: Write>(&self, w: &mut W, names: &[String]) -> Result<()> {
        if names.len() != self.m {
            return Err(Error::Shape(format!("{} names for {} columns", names.len(), self.m)));
        }
        writeln!(w, "{}", names.join(","))?;
        for i in 0..self.m {
            let row: Vec<String> = (0..self.m).map(|j| format!("{}", self.get(i, j))).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Pearson correlation between the columns of row-major `rows: n × m`.
pub fn feature_correlation(rows: &[f64], m: usize) -> Result<Correlation> {
    if m == 0 || rows.len() % m != 0 {
        return Err(Error::Shape(format!("{} values for {} columns", rows.len(), m)));
    }
    let n = rows.len() / m;
    if n < 2 {
        return Err(Error::UndefinedMetric("correlation needs at least two rows".into()));
    }
    let mut mean = vec![0.0; m];
    for r in rows.chunks(m) {
        for (j, &x) in r.iter().enumerate() {
            mean[j] += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= n as f64);
    let mut cov = vec![0.0; m * m];
    for r in rows.chunks(m) {
        for i in 0..m {
            let di = r[i] - mean[i];
            for j in i..m {
                cov[i * m + j] += di * (r[j] - mean[j]);
            }
        }
    }
    let sd: Vec<f64> = (0..m).map(|i| cov[i * m + i].sqrt()).collect();
    let constant: Vec<usize> = (0..m).filter(|&i| sd[i] <= 1e-12 * (1.0 + mean[i].abs())).collect();
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = if constant.contains(&i) || constant.contains(&j) {
                0.0
            } else if i == j {
                1.0
            } else {
                (cov[i * m + j] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            };
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    Ok(Correlation { m, values, constant })
}
