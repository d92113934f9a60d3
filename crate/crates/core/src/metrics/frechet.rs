use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{MetricError, Result};

/// `n x D` global image features with a free-form source label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub source: String,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, source: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(MetricError::Shape("feature rows have different widths".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite("features"));
        }
        Ok(FeatureSet { rows, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Fewer samples than `D + 1` give a singular covariance estimate.
    pub fn is_rank_deficient(&self) -> bool {
        self.len() < self.dim() + 1
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (n, d) = (self.len(), self.dim());
        if n < 2 {
            return Err(MetricError::TooFew { need: 2, got: n });
        }
        let x = DMatrix::from_fn(n, d, |i, j| self.rows[i][j]);
        let mu = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok((mu, cov))
    }
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

/// Clamps tiny negative eigenvalues to 0 and rejects large ones.
fn clamp_spectrum(values: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    values
        .iter()
        .map(|&v| {
            if v < -1e-6 * scale {
                Err(MetricError::NegativeEigenvalue(v))
            } else {
                Ok(v.max(0.0))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the square root is taken from the symmetric form
/// `S_a^(1/2) S_b S_a^(1/2)`, which has the same spectrum as `S_a S_b`.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MetricError::Shape(format!("feature widths {} and {}", a.dim(), b.dim())));
    }
    let (mu_a, s_a) = a.moments()?;
    let (mu_b, s_b) = b.moments()?;
    let ea = sym_eigen(&s_a);
    let root = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&root) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &s_b * &sqrt_a;
    let spectrum = clamp_spectrum(&sym_eigen(&inner).eigenvalues)?;
    let tr_sqrt: f64 = spectrum.iter().map(|v| v.sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + s_a.trace() + s_b.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(MetricError::NonFinite("frechet distance"));
    }
    Ok(d.max(0.0))
}
