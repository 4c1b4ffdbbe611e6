//! Principal component analysis via the symmetric eigendecomposition of the
//! sample covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use super::CredibilityError;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-length components, one per row, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the kept components.
    pub explained_variance: Vec<f64>,
    /// Trace of the covariance (sum of all eigenvalues).
    pub total_variance: f64,
    /// Scores of the input rows on the kept components.
    pub projected: Vec<Vec<f64>>,
}

impl Pca {
    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    /// Scores of arbitrary rows in this basis.
    pub fn project(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                self.components
                    .iter()
                    .map(|c| c.iter().zip(r).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
                    .collect()
            })
            .collect()
    }

    /// Map scores back to the original space.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        self.projected
            .iter()
            .map(|s| {
                let mut row = self.mean.clone();
                for (score, c) in s.iter().zip(&self.components) {
                    for (x, w) in row.iter_mut().zip(c) {
                        *x += score * w;
                    }
                }
                row
            })
            .collect()
    }
}

/// Keep the `k` leading components of `rows` (time samples by channels).
/// Each component's largest-magnitude loading is made positive.
pub fn pca_reduce(rows: &[Vec<f64>], k: usize) -> Result<Pca, CredibilityError> {
    let n = rows.len();
    if n < 2 {
        return Err(CredibilityError::TooShort { need: 2, got: n });
    }
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(CredibilityError::Ragged);
    }
    if k == 0 || k > p {
        return Err(CredibilityError::BadComponentCount { k, columns: p });
    }
    let mean: Vec<f64> = (0..p)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, p, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let total_variance = cov.trace();
    if !(total_variance > 0.0) {
        return Err(CredibilityError::Degenerate);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, x)| if x.abs() > best.1.abs() { (i, x) } else { best });
        if lead.1 < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    let mut pca = Pca {
        mean,
        components,
        explained_variance,
        total_variance,
        projected: Vec::new(),
    };
    pca.projected = pca.project(rows);
    Ok(pca)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_data_recovers_direction() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let pca = pca_reduce(&rows, 2).unwrap();
        let s5 = 5f64.sqrt();
        assert!((pca.components[0][0] - 1.0 / s5).abs() < 1e-9);
        assert!((pca.components[0][1] - 2.0 / s5).abs() < 1e-9);
        assert!((pca.explained_ratio()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn full_basis_reconstructs() {
        let rows: Vec<Vec<f64>> = (0..15)
            .map(|i| {
                let t = i as f64;
                vec![t.sin(), (0.3 * t).cos() * 2.0, t * 0.1 - 1.0]
            })
            .collect();
        let pca = pca_reduce(&rows, 3).unwrap();
        for (r, q) in rows.iter().zip(pca.reconstruct()) {
            for (x, y) in r.iter().zip(q) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let sum: f64 = pca.explained_variance.iter().sum();
        assert!((sum - pca.total_variance).abs() < 1e-9);
    }

    #[test]
    fn constant_data_is_degenerate() {
        let rows = vec![vec![1.0, 2.0]; 5];
        assert_eq!(pca_reduce(&rows, 1), Err(CredibilityError::Degenerate));
        assert!(pca_reduce(&rows[..1], 1).is_err());
        assert!(pca_reduce(&rows, 3).is_err());
    }
}
