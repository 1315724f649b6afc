//! Principal-component projection for scatter exports.
//!
//! The eigenproblem is solved on the `d × d` covariance when `d <= n`, and on
//! the `n × n` Gram matrix otherwise, so very wide layers with few points stay
//! cheap.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaProjection {
    pub n_components: usize,
    /// `n × n_components`, row-major.
    pub coordinates: Vec<f64>,
    /// Eigenvalues of the sample covariance (divisor `n - 1`).
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// `n_components × dim`, row-major, orthonormal rows.
    pub component_vectors: Vec<f64>,
    pub mean: Vec<f64>,
}

impl PcaProjection {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coordinates[i * self.n_components..(i + 1) * self.n_components]
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let d = self.mean.len();
        &self.component_vectors[k * d..(k + 1) * d]
    }
}

fn centered(data: &EmbeddingMatrix) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = (data.n_points(), data.dim());
    let mut mean = vec![0.0; d];
    for row in data.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| data.row(i)[j] - mean[j]);
    (x, mean)
}

/// Eigenpairs sorted by descending eigenvalue (stable on ties).
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vec<f64>)> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .map(|(&l, v)| (l.max(0.0), v.iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes components along `basis` and normalizes; `None` if nothing is left.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let norm = dot(&v, &v).sqrt();
    (norm > 1e-10).then(|| v.into_iter().map(|x| x / norm).collect())
}

/// Flips the vector so its largest-magnitude coordinate is positive.
fn fix_sign(v: &mut [f64]) {
    let mut pivot = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn pca_project(data: &EmbeddingMatrix, n_components: usize) -> Result<PcaProjection> {
    let (n, d) = (data.n_points(), data.dim());
    let achievable = (n.saturating_sub(1)).min(d);
    if n_components == 0 || n_components > achievable {
        return Err(Error::Config(format!(
            "cannot extract {n_components} components from {n} points in {d} dimensions \
             (achievable rank {achievable})"
        )));
    }
    let (x, mean) = centered(data);
    let denom = (n - 1) as f64;
    let total_variance = x.iter().map(|v| v * v).sum::<f64>() / denom;

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(n_components);
    let mut variances = Vec::with_capacity(n_components);
    if d <= n {
        let cov = (x.transpose() * &x) / denom;
        for (l, v) in sorted_eigen(cov).into_iter().take(n_components) {
            variances.push(l);
            components.push(v);
        }
    } else {
        let gram = (&x * x.transpose()) / denom;
        let top = sorted_eigen(gram);
        let scale = top.first().map_or(0.0, |p| p.0);
        for (l, u) in top.into_iter().take(n_components) {
            if l <= scale * 1e-12 {
                break;
            }
            let u = nalgebra::DVector::from_vec(u);
            let v: Vec<f64> = (x.transpose() * u).iter().copied().collect();
            if let Some(v) = orthonormalize(v, &components) {
                variances.push(l);
                components.push(v);
            }
        }
    }
    // Zero-variance directions: any orthonormal completion will do.
    let mut axis = 0;
    while components.len() < n_components {
        let mut e = vec![0.0; d];
        e[axis] = 1.0;
        axis += 1;
        if let Some(v) = orthonormalize(e, &components) {
            variances.push(0.0);
            components.push(v);
        }
    }
    components.iter_mut().for_each(|v| fix_sign(v));

    let mut coordinates = Vec::with_capacity(n * n_components);
    for i in 0..n {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        coordinates.extend(components.iter().map(|v| dot(&row, v)));
    }
    let explained_variance_ratio = variances
        .iter()
        .map(|&l| if total_variance > 0.0 { (l / total_variance).min(1.0) } else { 0.0 })
        .collect();

    Ok(PcaProjection {
        n_components,
        coordinates,
        explained_variance: variances,
        explained_variance_ratio,
        component_vectors: components.concat(),
        mean,
    })
}

/// Squared reconstruction error of projecting centred `data` onto the rows of
/// `basis` (`k × dim`, assumed orthonormal).
pub fn projection_residual(data: &EmbeddingMatrix, basis: &[f64], mean: &[f64]) -> f64 {
    let d = data.dim();
    data.rows()
        .map(|row| {
            let c: Vec<f64> = row.iter().zip(mean).map(|(v, m)| v - m).collect();
            let kept: f64 = basis.chunks_exact(d).map(|b| dot(&c, b).powi(2)).sum();
            (dot(&c, &c) - kept).max(0.0)
        })
        .sum()
}
