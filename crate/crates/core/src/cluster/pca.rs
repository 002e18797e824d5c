use super::{ClusterError, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Top principal directions of mean-centered data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Unit-norm, mutually orthogonal rows.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the sample covariance, descending.
    pub explained_variance: Vec<f64>,
}

const DEGENERATE_VARIANCE: f64 = 1e-18;

/// Fits `n_components` directions from the covariance eigendecomposition.
/// Each direction is signed so that its largest-magnitude entry is positive.
pub fn fit_pca(data: &[Vec<f64>], n_components: usize) -> Result<PcaModel> {
    let n = data.len();
    if n < 3 {
        return Err(ClusterError::TooFew { n, k: 3 });
    }
    let d = data[0].len();
    if d < n_components || data.iter().any(|r| r.len() != d) {
        return Err(ClusterError::Dimension(format!(
            "{n} rows of width {d} for {n_components} components"
        )));
    }
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j]);
    let mean: DVector<f64> = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if cov.trace() <= DEGENERATE_VARIANCE {
        return Err(ClusterError::Degenerate("all rows are identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(n_components);
    let mut explained = Vec::with_capacity(n_components);
    for &idx in order.iter().take(n_components) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let lead = v
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, x)| x)
            .unwrap_or(1.0);
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaModel {
        mean: mean.iter().copied().collect(),
        components,
        explained_variance: explained,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &zk) in self.components.iter().zip(z) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += zk * ci;
            }
        }
        out
    }
}
