//! Independent reference computations for the integration tests.
//!
//! Everything here works on plain `Vec`s with textbook formulas and shares
//! no code with the library paths it checks.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

/// `rows × cols` matrix as a vector of columns.
pub fn gaussian_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..cols).map(|_| gaussian_vec(rng, rows)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `Σ exp(x_i)` computed directly, no shifting.
pub fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Plain summation of `exp(U(v)ᵀh)` over a set.
pub fn naive_class_mass(u_columns: &[Vec<f64>], h: &[f64], set: &[usize]) -> f64 {
    set.iter().map(|&v| dot(&u_columns[v], h).exp()).sum()
}

/// `mat` stored as rows; returns `mat · x`.
pub fn mat_vec(rows: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| dot(r, x)).collect()
}

/// Attention with explicit exponentials over `[s, τ]`, query from the last
/// prompt column. Matrices as rows, blocks as columns.
pub fn naive_attention(
    w_v: &[Vec<f64>],
    w_k: &[Vec<f64>],
    w_q: &[Vec<f64>],
    s: &[Vec<f64>],
    tau: &[Vec<f64>],
    omega: f64,
) -> Vec<f64> {
    let q = mat_vec(w_q, tau.last().unwrap());
    let cols: Vec<&Vec<f64>> = s.iter().chain(tau.iter()).collect();
    let logits: Vec<f64> = cols
        .iter()
        .map(|c| dot(&mat_vec(w_k, c), &q) / omega)
        .collect();
    let weights = naive_softmax(&logits);
    let mut out = vec![0.0; w_v.len()];
    for (c, w) in cols.iter().zip(&weights) {
        let v = mat_vec(w_v, c);
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and matching unit eigenvectors.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = idx.iter().map(|&i| a[i][i]).collect();
    let vectors = idx
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    (values, vectors)
}

/// Sample covariance (divisor `n − 1`) of row data.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for x in row.iter_mut() {
            *x /= (n - 1) as f64;
        }
    }
    cov
}

/// Solves the square system `a x = b` by Gaussian elimination with partial
/// pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Least-squares residual `‖A x − b‖₂` via the normal equations
/// `AᵀA x = Aᵀb` (full column rank assumed).
pub fn normal_equations_residual(a_rows: &[Vec<f64>], b: &[f64]) -> f64 {
    let d = a_rows[0].len();
    let ata: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| a_rows.iter().map(|r| r[i] * r[j]).sum())
                .collect()
        })
        .collect();
    let atb: Vec<f64> = (0..d)
        .map(|i| a_rows.iter().zip(b).map(|(r, y)| r[i] * y).sum())
        .collect();
    let x = gauss_solve(ata, atb);
    let res: Vec<f64> = a_rows.iter().zip(b).map(|(r, y)| dot(r, &x) - y).collect();
    norm(&res)
}

/// Closed-form end state `h0 + Σ_t Σ_i λ_{t,i} ℓ_i`.
pub fn closed_form_state(h0: &[f64], ells: &[Vec<f64>], lambdas: &[Vec<f64>]) -> Vec<f64> {
    let mut out = h0.to_vec();
    for (i, ell) in ells.iter().enumerate() {
        let total: f64 = lambdas.iter().map(|row| row[i]).sum();
        for (o, e) in out.iter_mut().zip(ell) {
            *o += total * e;
        }
    }
    out
}

/// Random unembedding columns bent so that `ell` is exactly aligned:
/// `U(v)ᵀℓ = p` on `c1` (the first `n1` tokens) and `p − d` on the rest.
pub fn aligned_instance(
    rng: &mut ChaCha8Rng,
    dim: usize,
    vocab: usize,
    n1: usize,
    p: f64,
    d: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let ell = gaussian_vec(rng, dim);
    let ell_sq = dot(&ell, &ell);
    let cols = (0..vocab)
        .map(|v| {
            let mut u = gaussian_vec(rng, dim);
            let target = if v < n1 { p } else { p - d };
            let adjust = (target - dot(&u, &ell)) / ell_sq;
            for (x, e) in u.iter_mut().zip(&ell) {
                *x += adjust * e;
            }
            u
        })
        .collect();
    (cols, ell)
}
