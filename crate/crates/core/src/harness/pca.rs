use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dims` unit-norm principal directions.
    pub components: Vec<Vec<f64>>,
    /// Variance share of each kept component, nonincreasing.
    pub explained_ratio: Vec<f64>,
    /// Projected coordinates, one row per input vector.
    pub coords: Vec<Vec<f64>>,
}

/// Project mean-centered rows onto the top `dims` covariance eigenvectors.
/// Each component's largest-magnitude entry is made positive.
pub fn pca_project(x: &[Vec<f64>], dims: usize) -> Result<Pca> {
    let m = x.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 vectors, got {m}")));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::shape("pca_project", "rows differ in width"));
    }
    if dims == 0 || dims > m.min(p) {
        return Err(Error::InvalidArgument(format!("dims {dims} must be in 1..={}", m.min(p))));
    }
    let mut mean = vec![0.0; p];
    for r in x {
        mean.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let centered = DMatrix::from_fn(m, p, |i, j| x[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (m - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(dims);
    let mut explained_ratio = Vec::with_capacity(dims);
    for &j in order.iter().take(dims) {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let big = v.iter().enumerate().fold(0, |b, (i, a)| if a.abs() > v[b].abs() { i } else { b });
        if v[big] < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        components.push(v);
        explained_ratio.push(if total > 0.0 { eig.eigenvalues[j].max(0.0) / total } else { 0.0 });
    }
    let coords = (0..m).map(|i| components.iter().map(|c| (0..p).map(|j| centered[(i, j)] * c[j]).sum()).collect()).collect();
    Ok(Pca { mean, components, explained_ratio, coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn collinear_data_is_rank_one() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0 + i as f64, 2.0 * i as f64, -0.5 * i as f64]).collect();
        let p = pca_project(&x, 2).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.explained_ratio[1].abs() < 1e-12);
    }

    #[test]
    fn full_basis_reconstructs() {
        let mut rng = stream(1, &[]);
        let x: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let p = pca_project(&x, 4).unwrap();
        for (row, c) in x.iter().zip(&p.coords) {
            for j in 0..4 {
                let back: f64 = p.mean[j] + (0..4).map(|k| c[k] * p.components[k][j]).sum::<f64>();
                assert!((back - row[j]).abs() < 1e-8);
            }
        }
        assert!(p.explained_ratio.windows(2).all(|w| w[0] >= w[1] && w[1] >= 0.0));
        assert!(p.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        for c in &p.components {
            let big = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(big > 0.0);
        }
        assert!(pca_project(&x, 5).is_err());
        assert!(pca_project(&x[..1], 1).is_err());
    }

    #[test]
    fn isotropic_ratios() {
        let mut rng = stream(2, &[]);
        let x: Vec<Vec<f64>> = (0..1000).map(|_| (0..16).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let p = pca_project(&x, 4).unwrap();
        assert!(p.explained_ratio.iter().all(|r| (0.03..=0.12).contains(r)), "{:?}", p.explained_ratio);
    }
}
