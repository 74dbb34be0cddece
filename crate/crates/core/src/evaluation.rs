//! Sample-quality metrics on raw feature space.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Mean and unbiased covariance of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn gaussian_fit(samples: &Matrix<f64>) -> Result<GaussianSummary> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 samples, got {n}")));
    }
    let mean = DVector::from_vec(samples.column_means());
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let r = DVector::from_iterator(d, samples.row(i).iter().zip(mean.iter()).map(|(x, m)| x - m));
        cov.ger(1.0, &r, &r, 1.0);
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianSummary { mean, cov, count: n })
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -1e-8 * scale || !min.is_finite() {
        return Err(Error::Numeric(format!(
            "{what} is not positive semidefinite: eigenvalues in [{min:.3e}, {:.3e}]",
            eig.eigenvalues.max()
        )));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `(S1 S2)^{1/2}` for covariance matrices, computed as
/// `S1^{1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2}`. Requires `S1` to be
/// invertible.
pub fn sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a = psd_sqrt(s1, "first covariance")?;
    let inner = psd_sqrt(&(&a * s2 * &a), "covariance product")?;
    let a_inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("first covariance is singular".into()))?;
    Ok(&a * inner * a_inv)
}

/// Squared 2-Wasserstein distance between the two fitted Gaussians:
/// `|m1 - m2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
pub fn frechet_distance(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::Shape(format!(
            "summaries have dims {} and {}",
            g1.dim(),
            g2.dim()
        )));
    }
    let a = psd_sqrt(&g1.cov, "first covariance")?;
    // tr (S1 S2)^{1/2} = tr (S1^{1/2} S2 S1^{1/2})^{1/2}
    let inner = psd_sqrt(&(&a * &g2.cov * &a), "covariance product")?;
    let d = (&g1.mean - &g2.mean).norm_squared() + g1.cov.trace() + g2.cov.trace() - 2.0 * inner.trace();
    if !d.is_finite() {
        return Err(Error::Numeric("non-finite Frechet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Empirical 1-D Wasserstein-1 distance by integrating the difference of
/// quantile functions. Inputs need not be sorted.
pub fn wasserstein1_feature(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("Wasserstein distance needs nonempty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Pearson correlation of two equally long vectors; `None` when either has
/// zero variance.
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
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn column(m: &Matrix<f64>, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| m[(i, j)]).collect()
}

/// Pearson correlation matrix; entries involving a zero-variance feature are
/// `None`.
pub fn feature_correlations(samples: &Matrix<f64>) -> Result<Vec<Vec<Option<f64>>>> {
    if samples.rows() < 2 {
        return Err(Error::Data("correlations need at least 2 samples".into()));
    }
    let cols: Vec<Vec<f64>> = (0..samples.cols()).map(|j| column(samples, j)).collect();
    let d = cols.len();
    let mut out = vec![vec![None; d]; d];
    for i in 0..d {
        for j in i..d {
            let r = if i == j {
                pearson(&cols[i], &cols[i]).map(|_| 1.0)
            } else {
                pearson(&cols[i], &cols[j])
            };
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}

/// Per-feature correlation between objects and their transmuted versions.
pub fn transmutation_correlation(before: &Matrix<f64>, after: &Matrix<f64>) -> Result<Vec<Option<f64>>> {
    if before.shape() != after.shape() {
        return Err(Error::Data(format!(
            "unpaired inputs: {:?} vs {:?}",
            before.shape(),
            after.shape()
        )));
    }
    if before.rows() < 2 {
        return Err(Error::Data("correlations need at least 2 pairs".into()));
    }
    Ok((0..before.cols())
        .map(|j| pearson(&column(before, j), &column(after, j)))
        .collect())
}

/// Metrics comparing generated objects of one class to real ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub real_count: usize,
    pub generated_count: usize,
    pub frechet: f64,
    pub wasserstein1: Vec<f64>,
    pub real_correlations: Vec<Vec<Option<f64>>>,
    pub generated_correlations: Vec<Vec<Option<f64>>>,
}

pub fn compare_class(real: &Matrix<f64>, generated: &Matrix<f64>) -> Result<ClassMetrics> {
    if real.cols() != generated.cols() {
        return Err(Error::Shape("real and generated widths differ".into()));
    }
    let frechet = frechet_distance(&gaussian_fit(real)?, &gaussian_fit(generated)?)?;
    let wasserstein1 = (0..real.cols())
        .map(|j| wasserstein1_feature(&column(real, j), &column(generated, j)))
        .collect::<Result<_>>()?;
    Ok(ClassMetrics {
        real_count: real.rows(),
        generated_count: generated.rows(),
        frechet,
        wasserstein1,
        real_correlations: feature_correlations(real)?,
        generated_correlations: feature_correlations(generated)?,
    })
}

/// Metrics document written by the command line tool.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: BTreeMap<String, ClassMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}
