use crate::error::{dim_err, Error, Result};

use super::matrix::{dot, norm2};
use super::rng::{RngSeed, SeededRng};
use super::Matrix;

/// Relative asymmetry tolerated by [`sherman_morrison_rank1`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// `r × d` matrix with orthonormal rows drawn from a seeded Gaussian sample.
///
/// An `r × d` standard-normal sample `X` is drawn row-major, `Xᵀ = Q R` is
/// factored with Householder reflections, and the rows of `Qᵀ` are returned
/// with signs chosen so that `diag(R) > 0`.
pub fn random_orthonormal_rows(r: usize, d: usize, seed: RngSeed) -> Result<Matrix> {
    if r == 0 || r > d {
        return Err(dim_err("random_orthonormal_rows", format!("1 <= r <= d = {d}"), r));
    }
    let mut rng = SeededRng::new(seed);
    let sample = rng.normal_matrix(r, d, 1.0);
    let (q, r_diag) = householder_thin_q(&sample.transpose());
    let mut a = q.transpose();
    for (k, &rk) in r_diag.iter().enumerate() {
        if rk < 0.0 {
            for v in &mut a.data_mut()[k * d..(k + 1) * d] {
                *v = -*v;
            }
        }
    }
    a.ensure_finite("random_orthonormal_rows")?;
    Ok(a)
}

/// Thin Householder QR of an `m × n` matrix (`m ≥ n`): returns `Q` (`m × n`)
/// and the diagonal of `R`.
fn householder_thin_q(x: &Matrix) -> (Matrix, Vec<f64>) {
    let (m, n) = x.shape();
    debug_assert!(m >= n);
    let mut a = x.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r_diag = Vec::with_capacity(n);

    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| a[(i, k)]).collect();
        let norm = norm2(&v);
        if norm == 0.0 {
            reflectors.push(vec![0.0; m - k]);
            r_diag.push(0.0);
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = norm2(&v);
        for vi in &mut v {
            *vi /= vnorm;
        }
        // Apply H = I - 2 v vᵀ to the trailing columns.
        for j in k..n {
            let s: f64 = (k..m).map(|i| v[i - k] * a[(i, j)]).sum();
            for i in k..m {
                a[(i, j)] -= 2.0 * v[i - k] * s;
            }
        }
        r_diag.push(alpha);
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for j in 0..n {
            let s: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            if s != 0.0 {
                for i in k..m {
                    q[(i, j)] -= 2.0 * v[i - k] * s;
                }
            }
        }
    }
    (q, r_diag)
}

/// Rank-one inverse update `P − (P z zᵀ P) / (1 + zᵀ P z)`.
///
/// `P` must be symmetric; the result is then `(P⁻¹ + z zᵀ)⁻¹`, and stays
/// exactly symmetric because the correction is formed as `u uᵀ` with `u = P z`.
pub fn sherman_morrison_rank1(p: &Matrix, z: &[f64]) -> Result<Matrix> {
    if !p.is_square() {
        return Err(dim_err("sherman_morrison_rank1", "square P", format!("{:?}", p.shape())));
    }
    if z.len() != p.rows() {
        return Err(dim_err("sherman_morrison_rank1", p.rows(), z.len()));
    }
    if !p.is_finite() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sherman_morrison_rank1"));
    }
    let asym = p.asymmetry().unwrap_or(0.0);
    if asym > SYMMETRY_TOL * p.max_abs().max(1.0) {
        return Err(Error::Contract(format!(
            "sherman_morrison_rank1 needs a symmetric P (asymmetry {asym:e})"
        )));
    }
    let u = p.matvec(z)?;
    let denom = 1.0 + dot(z, &u);
    if !(denom > 0.0) {
        return Err(Error::NotPositiveDefinite { pivot: 0, value: denom });
    }
    let n = p.rows();
    let mut out = p.clone();
    for i in 0..n {
        let ui = u[i] / denom;
        for j in 0..n {
            out[(i, j)] -= ui * u[j];
        }
    }
    out.ensure_finite("sherman_morrison_rank1")?;
    Ok(out)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(dim_err("cholesky", "square matrix", format!("{:?}", m.shape())));
    }
    m.ensure_finite("cholesky")?;
    let n = m.rows();
    let asym = m.asymmetry().unwrap_or(0.0);
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(Error::Contract(format!("cholesky needs a symmetric matrix (asymmetry {asym:e})")));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solve `M X = RHS` for symmetric positive definite `M` via Cholesky.
pub fn solve_spd(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if rhs.rows() != m.rows() {
        return Err(dim_err("solve_spd", m.rows(), rhs.rows()));
    }
    rhs.ensure_finite("solve_spd")?;
    let l = cholesky(m)?;
    let n = m.rows();
    let mut x = rhs.clone();
    for c in 0..rhs.cols() {
        // L y = b
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x.ensure_finite("solve_spd")?;
    Ok(x)
}

pub fn inverse_spd(m: &Matrix) -> Result<Matrix> {
    let inv = solve_spd(m, &Matrix::identity(m.rows()))?;
    // Symmetrize away round-off so downstream symmetric routines accept it.
    let t = inv.transpose();
    Ok(Matrix::from_fn(inv.rows(), inv.cols(), |i, j| 0.5 * (inv[(i, j)] + t[(i, j)])))
}

/// Thin singular value decomposition `M = U diag(s) Vᵀ` of a tall matrix.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    /// `d × t`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `t × t`, orthogonal.
    pub vt: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD of a `d × t` matrix with `d ≥ t`.
pub fn thin_svd(m: &Matrix) -> Result<ThinSvd> {
    let (d, t) = m.shape();
    if d < t {
        return Err(dim_err("thin_svd", "rows >= cols", format!("{d}x{t}")));
    }
    m.ensure_finite("thin_svd")?;

    // Work on columns stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..t).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..t)
        .map(|j| (0..t).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..t {
            for j in (i + 1)..t {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let tan = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cos = 1.0 / (1.0 + tan * tan).sqrt();
                let sin = cos * tan;
                rotate_pair(&mut cols, i, j, cos, sin);
                rotate_pair(&mut v, i, j, cos, sin);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..t).collect();
    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let s_max = norms.iter().cloned().fold(0.0_f64, f64::max);
    let tiny = s_max * 1e-14;
    let mut u = Matrix::zeros(d, t);
    let mut vt = Matrix::zeros(t, t);
    let mut s = Vec::with_capacity(t);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(t);
    for (k, &j) in order.iter().enumerate() {
        let sj = norms[j];
        s.push(sj);
        let uk = if sj > tiny && sj > 0.0 {
            cols[j].iter().map(|x| x / sj).collect()
        } else {
            complete_basis(&basis, d)
        };
        u.set_col(k, &uk);
        basis.push(uk);
        for (i, vi) in v[j].iter().enumerate() {
            vt[(k, i)] = *vi;
        }
    }
    Ok(ThinSvd { u, s, vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, cos: f64, sin: f64) {
    let (left, right) = cols.split_at_mut(j);
    let ci = &mut left[i];
    let cj = &mut right[0];
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = cos * x - sin * y;
        *b = sin * x + cos * y;
    }
}

/// Unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn complete_basis(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..d {
        let mut cand: Vec<f64> = (0..d).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
        // Two passes of Gram–Schmidt.
        for _ in 0..2 {
            for b in basis {
                let c = dot(&cand, b);
                for (x, y) in cand.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let n = norm2(&cand);
        if n > best_norm {
            best_norm = n;
            best = Some(cand);
        }
        if n > 0.5 {
            break;
        }
    }
    let cand = best.expect("basis has fewer than d vectors");
    cand.iter().map(|x| x / best_norm).collect()
}
