use super::{LinalgError, Matrix};

/// Thin SVD `W = U * diag(sigma) * V^T` with `k = min(rows, cols)`.
///
/// `u` is rows x k, `v` is cols x k, `sigma` is descending and non-negative.
/// The factorization is deterministic: column signs follow a fixed
/// convention and ties are broken by index, so two calls on the same input
/// are bit-identical.
#[derive(Debug, Clone)]
pub struct SvdFactorization {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactorization {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }
}

const MAX_SWEEPS: usize = 60;
const CONVERGENCE_TOL: f64 = 1e-12;

/// One-sided Jacobi SVD.
///
/// The rotations are applied to the taller orientation (the input is
/// transposed internally when rows < cols), cycling over column pairs
/// (p, q) with p < q until every off-diagonal Gram entry satisfies
/// `|g_pq| <= 1e-12 * sqrt(g_pp * g_qq)`.
pub fn svd(w: &Matrix) -> Result<SvdFactorization, LinalgError> {
    if let Some((row, col)) = w.first_non_finite() {
        return Err(LinalgError::NonFinite { row, col });
    }
    let mut f = if w.rows() >= w.cols() {
        svd_tall(w, MAX_SWEEPS)?
    } else {
        let t = svd_tall(&w.transpose(), MAX_SWEEPS)?;
        SvdFactorization { u: t.v, sigma: t.sigma, v: t.u }
    };
    apply_sign_convention(&mut f.u, &mut f.v);
    Ok(f)
}

/// Makes the largest-magnitude entry of each u column non-negative (ties
/// resolved toward the lowest row index); the matching v column absorbs the
/// compensating sign.
fn apply_sign_convention(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols() {
        let mut best = 0usize;
        for i in 0..u.rows() {
            if u[(i, j)].abs() > u[(best, j)].abs() {
                best = i;
            }
        }
        if u[(best, j)] < 0.0 {
            for i in 0..u.rows() {
                u[(i, j)] = -u[(i, j)];
            }
            for i in 0..v.rows() {
                v[(i, j)] = -v[(i, j)];
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn svd_with_sweep_limit(
    w: &Matrix,
    max_sweeps: usize,
) -> Result<SvdFactorization, LinalgError> {
    svd_tall(w, max_sweeps)
}

/// Jacobi iteration for rows >= cols. Columns of the work matrix are stored
/// contiguously (as rows of `cols`), so each rotation touches two slices.
fn svd_tall(w: &Matrix, max_sweeps: usize) -> Result<SvdFactorization, LinalgError> {
    let (m, n) = w.shape();
    debug_assert!(m >= n);

    // cols[j] holds column j of the evolving matrix A (initially W).
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| w[(i, j)]).collect()).collect();
    // vt[j] holds column j of the accumulated V (initially the identity).
    let mut vt: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (gpp, gqq, gpq) = gram_entries(&cols[p], &cols[q]);
                if gpq.abs() <= CONVERGENCE_TOL * (gpp * gqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (gqq - gpp) / (2.0 * gpq);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vt, p, q, c, s);
            }
        }
        sweeps += 1;
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::SvdDidNotConverge {
            sweeps,
            residual: max_relative_offdiagonal(&cols),
        });
    }

    // Singular values and order (descending; stable on ties).
    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("norms are finite"));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        if norms[j] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            // Exactly-zero singular value: extend the orthonormal set from
            // canonical basis vectors (deterministic choice).
            u_cols.push(orthonormal_completion(&u_cols, m));
        }
    }
    let v_cols: Vec<Vec<f64>> = order.iter().map(|&j| vt[j].clone()).collect();

    Ok(SvdFactorization {
        u: from_columns(m, &u_cols),
        sigma,
        v: from_columns(n, &v_cols),
    })
}

fn gram_entries(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut gpp = 0.0;
    let mut gqq = 0.0;
    let mut gpq = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        gpp += x * x;
        gqq += y * y;
        gpq += x * y;
    }
    (gpp, gqq, gpq)
}

fn rotate_pair(rows: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = rows.split_at_mut(q);
    let rp = &mut head[p];
    let rq = &mut tail[0];
    for (xp, xq) in rp.iter_mut().zip(rq.iter_mut()) {
        let new_p = c * *xp - s * *xq;
        let new_q = s * *xp + c * *xq;
        *xp = new_p;
        *xq = new_q;
    }
}

fn max_relative_offdiagonal(cols: &[Vec<f64>]) -> f64 {
    let n = cols.len();
    let mut worst: f64 = 0.0;
    for p in 0..n.saturating_sub(1) {
        for q in p + 1..n {
            let (gpp, gqq, gpq) = gram_entries(&cols[p], &cols[q]);
            let denom = (gpp * gqq).sqrt();
            if denom > 0.0 {
                worst = worst.max(gpq.abs() / denom);
            }
        }
    }
    worst
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Unit vector orthogonal to all of `existing`, chosen deterministically as
/// the canonical basis vector with the largest residual (ties toward the
/// lowest index), Gram-Schmidt-orthogonalized twice.
fn orthonormal_completion(existing: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best_i = 0usize;
    let mut best_r2 = f64::NEG_INFINITY;
    for i in 0..m {
        let overlap: f64 = existing.iter().map(|c| c[i] * c[i]).sum();
        let r2 = 1.0 - overlap;
        if r2 > best_r2 {
            best_r2 = r2;
            best_i = i;
        }
    }
    let mut r = vec![0.0; m];
    r[best_i] = 1.0;
    for _ in 0..2 {
        for c in existing {
            let proj: f64 = c.iter().zip(&r).map(|(&ci, &ri)| ci * ri).sum();
            for (ri, &ci) in r.iter_mut().zip(c) {
                *ri -= proj * ci;
            }
        }
    }
    let nrm = norm(&r);
    debug_assert!(nrm > 0.0, "canonical completion found no independent direction");
    r.iter_mut().for_each(|x| *x /= nrm);
    r
}

fn from_columns(rows: usize, cols: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Slice of components `lo..hi`: `(U-slice, V-slice, sigma-slice)`.
pub fn truncate(
    f: &SvdFactorization,
    lo: usize,
    hi: usize,
) -> Result<(Matrix, Matrix, Vec<f64>), LinalgError> {
    let k = f.k();
    if lo >= hi || hi > k {
        return Err(LinalgError::InvalidComponentRange { lo, hi, k });
    }
    Ok((f.u.columns(lo, hi), f.v.columns(lo, hi), f.sigma[lo..hi].to_vec()))
}

/// `U * diag(sigma) * V^T` for component slices.
pub fn recompose(u: &Matrix, sigma: &[f64], v: &Matrix) -> Result<Matrix, LinalgError> {
    if u.cols() != sigma.len() || v.cols() != sigma.len() {
        return Err(LinalgError::DimensionMismatch {
            left_rows: u.rows(),
            left_cols: u.cols(),
            right_rows: v.rows(),
            right_cols: v.cols(),
        });
    }
    let scaled = Matrix::from_fn(u.rows(), u.cols(), |i, j| u[(i, j)] * sigma[j]);
    scaled.matmul(&v.transpose())
}
