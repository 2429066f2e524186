#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of `k`-point Gauss–Hermite quadrature for `E[f(Z)]`,
/// `Z ~ N(0, 1)`, from the eigen-decomposition of the Jacobi matrix of the
/// probabilists' Hermite polynomials.
pub fn gauss_hermite(k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(k, k);
    for i in 1..k {
        let b = (i as f64).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 / total).collect())
}

/// Tensor-product rule in `dim` dimensions: `(point, weight)` pairs.
pub fn gauss_hermite_grid(k: usize, dim: usize) -> Vec<(Vec<f64>, f64)> {
    let (nodes, weights) = gauss_hermite(k);
    let mut grid = vec![(Vec::with_capacity(dim), 1.0)];
    for _ in 0..dim {
        grid = grid
            .into_iter()
            .flat_map(|(p, w)| {
                nodes.iter().zip(&weights).map(move |(&x, &v)| {
                    let mut q = p.clone();
                    q.push(x);
                    (q, w * v)
                })
            })
            .collect();
    }
    grid
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}
