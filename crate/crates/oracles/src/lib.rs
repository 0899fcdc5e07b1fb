//! Naive reference implementations used as independent oracles in tests.
//!
//! Nothing here shares an algorithm with the production code: matmul is the
//! textbook triple loop, the Frobenius norm is a flat accumulation, and
//! singular values come from a two-sided Jacobi *eigenvalue* iteration on the
//! Gram matrix rather than the production one-sided SVD.

use lrsl_core::Matrix;

/// Textbook i-j-k triple-loop product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "oracle matmul shape mismatch");
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Frobenius norm as one flat pass over squared entries.
pub fn flat_frobenius(m: &Matrix) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            acc += m[(i, j)] * m[(i, j)];
        }
    }
    acc.sqrt()
}

/// Eigenvalues of a symmetric matrix by classical two-sided cyclic Jacobi,
/// returned in descending order.
pub fn symmetric_eigenvalues(g: &Matrix) -> Vec<f64> {
    assert_eq!(g.rows(), g.cols(), "eigenvalue oracle needs a square matrix");
    let n = g.rows();
    let mut a = g.clone();
    let scale = flat_frobenius(&a).max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // A <- J^T A J on rows/columns p and q.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    eig
}

/// Singular values of `w` via eigenvalues of the smaller Gram matrix,
/// clamped at zero and returned descending.
pub fn gram_singular_values(w: &Matrix) -> Vec<f64> {
    let gram = if w.rows() >= w.cols() {
        naive_matmul(&w.transpose(), w)
    } else {
        naive_matmul(w, &w.transpose())
    };
    symmetric_eigenvalues(&gram)
        .into_iter()
        .map(|lambda| lambda.max(0.0).sqrt())
        .collect()
}

/// Central finite difference of a scalar function.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `||U^T M V||_F` spelled out with naive products only.
pub fn naive_projected_norm(u: &Matrix, m: &Matrix, v: &Matrix) -> f64 {
    flat_frobenius(&naive_matmul(&naive_matmul(&u.transpose(), m), v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_hand_built_symmetric_matrix() {
        // [[2, 1], [1, 2]] has eigenvalues 3 and 1.
        let g = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let eig = symmetric_eigenvalues(&g);
        assert!((eig[0] - 3.0).abs() < 1e-12);
        assert!((eig[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_singular_values_of_diagonal() {
        let w = Matrix::from_vec(2, 3, vec![0.0, -4.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let sv = gram_singular_values(&w);
        assert!((sv[0] - 4.0).abs() < 1e-12);
        assert!((sv[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn central_difference_matches_known_derivative() {
        let d = central_difference(|x| x * x * x, 2.0, 1e-5);
        assert!((d - 12.0).abs() < 1e-8);
    }
}
