use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean-centred linear projection onto the top principal directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Input dimension.
    pub input_dim: usize,
    /// Output dimension.
    pub dim: usize,
    pub mean: Vec<f64>,
    /// `[input_dim, dim]`, columns orthonormal.
    pub components: Vec<f64>,
    /// Variance captured by each retained direction (descending).
    pub explained_variance: Vec<f64>,
}

impl Projection {
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.input_dim {
            let xi = x[i] - self.mean[i];
            let row = &self.components[i * self.dim..(i + 1) * self.dim];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += xi * p;
            }
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.project_into(x, &mut out);
        out
    }

    /// Projects `n` row-major samples.
    pub fn project_rows(&self, rows: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.dim];
        for (r, o) in rows.chunks(self.input_dim).zip(out.chunks_mut(self.dim)).take(n) {
            self.project_into(r, o);
        }
        out
    }

    /// Maps projected coordinates back to the input space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        (0..self.input_dim)
            .map(|i| {
                self.mean[i]
                    + (0..self.dim)
                        .map(|j| self.components[i * self.dim + j] * z[j])
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Principal component analysis of `n` row-major samples of width `c`,
/// keeping `d` directions. Each direction's largest-magnitude entry is made
/// positive (first such entry on exact ties).
pub fn fit_pca(features: &[f64], n: usize, c: usize, d: usize) -> Result<Projection> {
    if d == 0 || d > c {
        return Err(Error::InvalidArgument(format!(
            "PCA target dimension {d} must be in 1..={c}"
        )));
    }
    if n <= d {
        return Err(Error::InvalidArgument(format!(
            "PCA needs more than {d} samples, got {n}"
        )));
    }
    if features.len() != n * c {
        return Err(Error::Shape(format!(
            "{} values for {n} samples of width {c}",
            features.len()
        )));
    }
    let mut mean = vec![0.0; c];
    for row in features.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut centred = vec![0.0; c];
    for row in features.chunks(c) {
        for ((o, &v), &m) in centred.iter_mut().zip(row).zip(&mean) {
            *o = v - m;
        }
        for i in 0..c {
            let xi = centred[i];
            for j in i..c {
                cov[(i, j)] += xi * centred[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..c {
        for j in i..c {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = vec![0.0; c * d];
    let mut explained_variance = Vec::with_capacity(d);
    for (j, &idx) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let mut pivot = 0;
        for i in 1..c {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..c {
            components[i * d + j] = sign * col[i];
        }
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(Projection {
        input_dim: c,
        dim: d,
        mean,
        components,
        explained_variance,
    })
}
