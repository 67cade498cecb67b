//! Weighted eight-point essential-matrix estimation.
//!
//! Each correspondence contributes the monomial row
//! `[x1x2, x1y2, x1, y1x2, y1y2, y1, x2, y2, 1]`; the estimate is the
//! eigenvector of the smallest eigenvalue of `X^T diag(w) X`. That row is
//! `p1 (x) p2`, so the eigenvector is the column-stacked `Vec(E)` of the
//! matrix with `p2^T E p1 = 0`: entry `E[i][j]` sits at index `3j + i`.
//! The backward pass differentiates that eigenvector with respect to the
//! weights.

use crate::epipolar::{Correspondence, EssentialMatrix, Mat3};
use thiserror::Error;

pub type Vec9 = [f64; 9];
pub type Mat9 = [[f64; 9]; 9];

const JACOBI_MAX_SWEEPS: usize = 50;
const JACOBI_TOL: f64 = 1e-13;
const EIGENGAP_TOL: f64 = 1e-12;
const SUPPORT_EPS: f64 = 1e-8;
const MIN_SUPPORT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("only {0} correspondences carry weight; at least 8 are required")]
    InsufficientSupport(usize),
    #[error("smallest eigenvalues are not separated (gap {gap:e}, scale {scale:e})")]
    EigengapCollapse { gap: f64, scale: f64 },
    #[error("{weights} weights for {correspondences} correspondences")]
    LengthMismatch { weights: usize, correspondences: usize },
}

/// `N x 9` design matrix, one monomial row per correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialMatrix {
    rows: Vec<Vec9>,
}

impl MonomialMatrix {
    pub fn rows(&self) -> &[Vec9] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn monomial_row(c: &Correspondence) -> Vec9 {
    let Correspondence { x1, y1, x2, y2 } = *c;
    [x1 * x2, x1 * y2, x1, y1 * x2, y1 * y2, y1, x2, y2, 1.0]
}

pub fn build_monomial_matrix(set: &[Correspondence]) -> MonomialMatrix {
    MonomialMatrix { rows: set.iter().map(monomial_row).collect() }
}

/// Symmetric 9x9 matrix `sum_i w_i x_i x_i^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(pub Mat9);

impl GramMatrix {
    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn quadratic_form(&self, v: &Vec9) -> f64 {
        let mut acc = 0.0;
        for i in 0..9 {
            for j in 0..9 {
                acc += v[i] * self.0[i][j] * v[j];
            }
        }
        acc
    }
}

#[allow(clippy::needless_range_loop)]
pub fn weighted_gram(x: &MonomialMatrix, w: &[f64]) -> Result<GramMatrix, SolverError> {
    if w.len() != x.len() {
        return Err(SolverError::LengthMismatch { weights: w.len(), correspondences: x.len() });
    }
    let mut g = [[0.0; 9]; 9];
    for (row, &wi) in x.rows.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        for i in 0..9 {
            let a = wi * row[i];
            for j in i..9 {
                g[i][j] += a * row[j];
            }
        }
    }
    for i in 0..9 {
        for j in 0..i {
            g[i][j] = g[j][i];
        }
    }
    Ok(GramMatrix(g))
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen9 {
    pub values: [f64; 9],
    pub vectors: [Vec9; 9],
}

/// Cyclic Jacobi eigensolver for a symmetric 9x9 matrix.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eig9(g: &GramMatrix) -> Result<Eigen9, SolverError> {
    let scale = g.frobenius_norm();
    let mut asym: f64 = 0.0;
    for i in 0..9 {
        for j in 0..i {
            asym = asym.max((g.0[i][j] - g.0[j][i]).abs());
        }
    }
    if asym > 1e-10 * scale.max(1.0) {
        return Err(SolverError::NotSymmetric(asym));
    }

    let mut a = g.0;
    // Columns of v are the eigenvectors.
    let mut v = [[0.0; 9]; 9];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let tol = JACOBI_TOL * scale;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..9)
            .flat_map(|i| (0..9).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..8 {
            for q in (p + 1)..9 {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..9 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..9 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let mut values = [0.0; 9];
    let mut vectors = [[0.0; 9]; 9];
    for (k, &idx) in order.iter().enumerate() {
        values[k] = a[idx][idx];
        for r in 0..9 {
            vectors[k][r] = v[r][idx];
        }
    }
    Ok(Eigen9 { values, vectors })
}

/// The intermediate state of one weighted eight-point solve, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct EightPointSolution {
    pub essential: EssentialMatrix,
    /// Smallest eigenvector after sign fixing, `Vec(E)` column-stacked.
    pub vector: Vec9,
    /// +1 or -1: the sign applied to the raw eigenvector.
    pub sign: f64,
    pub eigen: Eigen9,
    pub monomials: MonomialMatrix,
}

impl EightPointSolution {
    /// `dL/dw` for an upstream gradient on the row-major entries of `E`.
    #[allow(clippy::needless_range_loop)]
    pub fn weight_gradient(&self, upstream: &Vec9) -> Vec<f64> {
        let upstream: Vec9 = std::array::from_fn(|k| upstream[row_major_index(k)]);
        let ev = &self.eigen;
        let l1 = ev.values[0];
        // dv1 = sum_{k>1} v_k v_k^T dG v1 / (l1 - l_k); with dG/dw_i = x_i x_i^T
        // dL/dw_i = (x_i . v1) (x_i . u), u = sum_{k>1} v_k (g . v_k) / (l1 - l_k).
        let g: Vec9 = std::array::from_fn(|r| upstream[r] * self.sign);
        let mut u = [0.0; 9];
        for k in 1..9 {
            let coeff = dot9(&g, &ev.vectors[k]) / (l1 - ev.values[k]);
            for r in 0..9 {
                u[r] += coeff * ev.vectors[k][r];
            }
        }
        let v1 = &ev.vectors[0];
        self.monomials.rows.iter().map(|x| dot9(x, v1) * dot9(x, &u)).collect()
    }
}

/// Row-major position of the `k`-th column-stacked entry.
fn row_major_index(k: usize) -> usize {
    (k % 3) * 3 + k / 3
}

/// Inverse of column stacking: `E[i][j] = v[3j + i]`.
pub fn vec_to_matrix(v: &Vec9) -> Mat3 {
    Mat3::from_column_slice(v)
}

fn dot9(a: &Vec9, b: &Vec9) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full solve with the state needed for differentiation.
pub fn solve_weighted_eightpoint(set: &[Correspondence], w: &[f64]) -> Result<EightPointSolution, SolverError> {
    if w.len() != set.len() {
        return Err(SolverError::LengthMismatch { weights: w.len(), correspondences: set.len() });
    }
    let support = w.iter().filter(|&&wi| wi > SUPPORT_EPS).count();
    if support < MIN_SUPPORT {
        return Err(SolverError::InsufficientSupport(support));
    }
    let monomials = build_monomial_matrix(set);
    let g = weighted_gram(&monomials, w)?;
    let scale = g.frobenius_norm();
    let eigen = symmetric_eig9(&g)?;
    let gap = eigen.values[1] - eigen.values[0];
    if gap < EIGENGAP_TOL * scale {
        return Err(SolverError::EigengapCollapse { gap, scale });
    }
    let raw = eigen.vectors[0];
    let imax = (0..9).max_by(|&i, &j| raw[i].abs().total_cmp(&raw[j].abs())).expect("nine components");
    let sign = if raw[imax] < 0.0 { -1.0 } else { 1.0 };
    let vector: Vec9 = std::array::from_fn(|r| raw[r] * sign);
    let essential = EssentialMatrix::from_matrix(vec_to_matrix(&vector)).expect("eigenvectors have unit norm");
    Ok(EightPointSolution { essential, vector, sign, eigen, monomials })
}

pub fn weighted_eightpoint(set: &[Correspondence], w: &[f64]) -> Result<EssentialMatrix, SolverError> {
    solve_weighted_eightpoint(set, w).map(|s| s.essential)
}

/// Analytic `dL/dw` given `dL/dE` (row-major upstream gradient).
pub fn weighted_eightpoint_backward(
    set: &[Correspondence],
    w: &[f64],
    upstream: &Mat3,
) -> Result<Vec<f64>, SolverError> {
    let sol = solve_weighted_eightpoint(set, w)?;
    let up: Vec9 = std::array::from_fn(|k| upstream[(k / 3, k % 3)]);
    Ok(sol.weight_gradient(&up))
}
