//! Smallest eigenpairs of the normalized Laplacian.
//!
//! `L_norm = D^-1 (D - A)` is not symmetric, so we solve the symmetric problem
//! on `L_sym = D^-1/2 (D - A) D^-1/2` and map eigenvectors back with
//! `u = D^-1/2 v`. Small graphs use a dense symmetric solver; large ones a
//! thick-restart Lanczos iteration with full reorthogonalization.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use super::SpectralError;
use crate::graph::WeightedGraph;
use crate::seed::{derive_seed, rng_from_seed, STREAM_LANCZOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    /// Bound on `||L_norm u - λ u|| / ||u||` for every returned pair.
    pub tolerance: f64,
    /// Graphs with fewer nodes than this are solved densely.
    pub dense_threshold: usize,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            tolerance: 1e-9,
            dense_threshold: 2000,
            max_restarts: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Eigenpairs {
    /// Ascending, clamped to `[0, 2]`.
    pub values: Vec<f64>,
    /// Column `j` is the eigenvector `u_j` of `L_norm` (`N x k`).
    pub vectors: DMatrix<f64>,
    /// Column `j` is the unit-norm eigenvector `v_j` of `L_sym`.
    pub sym_vectors: DMatrix<f64>,
}

fn check_degrees(graph: &WeightedGraph) -> Result<Vec<f64>, SpectralError> {
    if let Some(i) = graph.degrees().iter().position(|&d| d <= 0.0) {
        return Err(SpectralError::ZeroDegree(i));
    }
    Ok(graph.degrees().iter().map(|d| d.sqrt().recip()).collect())
}

/// Dense `(L_norm, L_sym)`.
pub fn normalized_laplacian(
    graph: &WeightedGraph,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SpectralError> {
    let inv_sqrt = check_degrees(graph)?;
    let n = graph.len();
    let mut l_norm = DMatrix::identity(n, n);
    let mut l_sym = DMatrix::identity(n, n);
    for (i, j, w) in graph.edges() {
        l_norm[(i, j)] = -w / graph.degree(i);
        l_norm[(j, i)] = -w / graph.degree(j);
        let s = -w * inv_sqrt[i] * inv_sqrt[j];
        l_sym[(i, j)] = s;
        l_sym[(j, i)] = s;
    }
    Ok((l_norm, l_sym))
}

/// y = L_sym x
fn apply_l_sym(graph: &WeightedGraph, inv_sqrt: &[f64], x: &[f64], y: &mut [f64]) {
    for i in 0..graph.len() {
        let s: f64 = graph
            .neighbors(i)
            .iter()
            .map(|&(j, w)| w * inv_sqrt[j] * x[j])
            .sum();
        y[i] = x[i] - inv_sqrt[i] * s;
    }
}

/// `||L_norm u - λ u|| / ||u||`
pub fn relative_residual(graph: &WeightedGraph, value: f64, u: &[f64]) -> f64 {
    let mut r2 = 0.0;
    let mut u2 = 0.0;
    for i in 0..graph.len() {
        let au: f64 = graph.neighbors(i).iter().map(|&(j, w)| w * u[j]).sum();
        let lu = u[i] - au / graph.degree(i);
        r2 += (lu - value * u[i]).powi(2);
        u2 += u[i] * u[i];
    }
    (r2 / u2).sqrt()
}

pub fn smallest_eigenpairs(
    graph: &WeightedGraph,
    k: usize,
    options: &EigenOptions,
) -> Result<Eigenpairs, SpectralError> {
    let inv_sqrt = check_degrees(graph)?;
    let n = graph.len();
    if k == 0 || k > n {
        return Err(SpectralError::TooFewNodes { nodes: n, k });
    }
    let (values, sym) = if n < options.dense_threshold {
        dense_smallest(graph, k)?
    } else {
        lanczos_smallest(graph, &inv_sqrt, k, options)?
    };
    finish(graph, &inv_sqrt, values, sym, options.tolerance)
}

fn dense_smallest(
    graph: &WeightedGraph,
    k: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), SpectralError> {
    let (_, l_sym) = normalized_laplacian(graph)?;
    let eig = SymmetricEigen::new(l_sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order[..k]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    Ok((values, vectors))
}

fn finish(
    graph: &WeightedGraph,
    inv_sqrt: &[f64],
    values: Vec<f64>,
    sym: Vec<Vec<f64>>,
    tolerance: f64,
) -> Result<Eigenpairs, SpectralError> {
    let n = graph.len();
    let k = values.len();
    let mut vectors = DMatrix::zeros(n, k);
    let mut sym_vectors = DMatrix::zeros(n, k);
    let mut clamped = Vec::with_capacity(k);
    for (j, (value, mut v)) in values.into_iter().zip(sym).enumerate() {
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let u: Vec<f64> = v.iter().zip(inv_sqrt).map(|(x, s)| x * s).collect();
        let residual = relative_residual(graph, value, &u);
        if residual.is_nan() || residual > tolerance {
            return Err(SpectralError::NonConvergence {
                index: j,
                residual,
                tolerance,
            });
        }
        for i in 0..n {
            vectors[(i, j)] = u[i];
            sym_vectors[(i, j)] = v[i];
        }
        clamped.push(value.clamp(0.0, 2.0));
    }
    Ok(Eigenpairs {
        values: clamped,
        vectors,
        sym_vectors,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(r: &mut [f64], basis: &[Vec<f64>]) {
    // Classical Gram-Schmidt applied twice.
    for _ in 0..2 {
        for v in basis {
            let c = dot(r, v);
            r.iter_mut().zip(v).for_each(|(x, y)| *x -= c * y);
        }
    }
}

fn lanczos_smallest(
    graph: &WeightedGraph,
    inv_sqrt: &[f64],
    k: usize,
    options: &EigenOptions,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), SpectralError> {
    let n = graph.len();
    let max_basis = n.min((3 * k).max(k + 40));
    let keep = (k + (max_basis - k) / 3)
        .min(max_basis.saturating_sub(1))
        .max(k.min(max_basis));
    let mut rng = rng_from_seed(derive_seed(options.seed, STREAM_LANCZOS, 0));
    let mut random_vector =
        |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_basis);
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(max_basis);
    let mut next = random_vector(n);
    let mut last_residual = f64::INFINITY;

    for _restart in 0..options.max_restarts {
        while basis.len() < max_basis {
            orthogonalize(&mut next, &basis);
            let mut norm = dot(&next, &next).sqrt();
            if norm < 1e-10 {
                next = random_vector(n);
                orthogonalize(&mut next, &basis);
                norm = dot(&next, &next).sqrt();
                if norm < 1e-10 {
                    break;
                }
            }
            next.iter_mut().for_each(|x| *x /= norm);
            let mut image = vec![0.0; n];
            apply_l_sym(graph, inv_sqrt, &next, &mut image);
            basis.push(std::mem::replace(&mut next, image.clone()));
            images.push(image);
        }
        let m = basis.len();
        let mut h = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in a..m {
                let v = 0.5 * (dot(&basis[a], &images[b]) + dot(&basis[b], &images[a]));
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

        let ritz = |col: usize, src: &[Vec<f64>]| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for (b, vec) in src.iter().enumerate() {
                let c = eig.eigenvectors[(b, col)];
                out.iter_mut().zip(vec).for_each(|(o, x)| *o += c * x);
            }
            out
        };

        let wanted = k.min(m);
        let mut values = Vec::with_capacity(wanted);
        let mut vectors = Vec::with_capacity(wanted);
        let mut worst = 0.0f64;
        for &col in &order[..wanted] {
            let theta = eig.eigenvalues[col];
            let y = ritz(col, &basis);
            let u: Vec<f64> = y.iter().zip(inv_sqrt).map(|(a, s)| a * s).collect();
            worst = worst.max(relative_residual(graph, theta, &u));
            values.push(theta);
            vectors.push(y);
        }
        last_residual = worst;
        // Keep a margin below the target so the final check in `finish` passes.
        if worst <= 0.5 * options.tolerance || m == n {
            return Ok((values, vectors));
        }

        orthogonalize(&mut next, &basis);
        let keep_now = keep.min(m - 1);
        let new_basis: Vec<Vec<f64>> = order[..keep_now].iter().map(|&c| ritz(c, &basis)).collect();
        let new_images: Vec<Vec<f64>> = order[..keep_now]
            .iter()
            .map(|&c| ritz(c, &images))
            .collect();
        basis = new_basis;
        images = new_images;
    }
    Err(SpectralError::NonConvergence {
        index: k - 1,
        residual: last_residual,
        tolerance: options.tolerance,
    })
}
