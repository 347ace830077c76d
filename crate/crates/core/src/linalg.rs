//! PCA through the SVD of centered data, QR orthogonalization and principal
//! angles between subspaces.
//!
//! Bases are stored column-wise: a `D x M` matrix whose columns are the
//! orthonormal components.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, GemError, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaFit {
    pub mean: DVector<f64>,
    /// `D x M`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Per-component standard deviation of the training projections,
    /// non-increasing.
    pub stddev: DVector<f64>,
    /// Fewer than the requested components were returned because the data
    /// has lower numerical rank.
    pub rank_truncated: bool,
}

/// PCA of `samples` (`N x D`, one sample per row).
pub fn pca_fit(samples: &DMatrix<f64>, max_components: usize) -> Result<PcaFit> {
    pca_fit_columns(samples.transpose(), max_components)
}

/// PCA of `data` (`D x N`, one sample per column). Consumes the data to
/// center it in place.
pub fn pca_fit_columns(mut data: DMatrix<f64>, max_components: usize) -> Result<PcaFit> {
    let (d, n) = data.shape();
    if n < 2 {
        return Err(invalid(format!("PCA needs at least 2 samples, got {n}")));
    }
    if max_components > (n - 1).min(d) {
        return Err(invalid(format!(
            "{max_components} components requested from {n} samples of dimension {d}"
        )));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(invalid("PCA input contains non-finite values"));
    }
    let mean = data.column_mean();
    let magnitude = data.amax();
    for mut col in data.column_iter_mut() {
        col -= &mean;
    }

    // Left singular vectors of the centered data, through the small
    // triangular factor of a QR:
    //   D >= N: A = Q R, left(A) = Q left(R)
    //   D <  N: A^T = Q R, left(A) = left(R^T)
    let (u, sigma) = if d >= n {
        let qr = data.qr();
        let q = qr.q();
        let (sigma, left) = left_singular_vectors(&qr.r());
        (q * left, sigma)
    } else {
        let r = data.transpose().qr().r();
        let (sigma, left) = left_singular_vectors(&r.transpose());
        (left, sigma)
    };

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let smax = order.first().map_or(0.0, |&i| sigma[i]);
    // Centering identical samples leaves rounding noise, not signal.
    let noise = f64::EPSILON * ((n * d) as f64).sqrt() * magnitude * 4.0;
    let floor = (RANK_TOL * smax).max(noise);
    let rank = order.iter().take_while(|&&i| sigma[i] > floor).count();
    let keep = max_components.min(rank);
    let rank_truncated = keep < max_components;
    if rank_truncated {
        log::warn!("PCA: requested {max_components} components, data has numerical rank {rank}");
    }

    let mut basis = DMatrix::zeros(d, keep);
    let mut stddev = DVector::zeros(keep);
    let denom = ((n - 1) as f64).sqrt();
    for (j, &src) in order.iter().take(keep).enumerate() {
        let mut col = u.column(src).into_owned();
        fix_sign(col.as_mut_slice());
        basis.set_column(j, &col);
        stddev[j] = sigma[src] / denom;
    }
    Ok(PcaFit {
        mean,
        basis,
        stddev,
        rank_truncated,
    })
}

/// Singular values and left singular vectors (columns) of a square matrix.
fn left_singular_vectors(b: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    // B^T = U S V^T  =>  B = V S U^T.
    let (cols, v) = one_sided_jacobi(b.transpose());
    let sigma = DVector::from_iterator(cols.ncols(), cols.column_iter().map(|c| c.norm()));
    (sigma, v)
}

/// One-sided (Hestenes) Jacobi: rotates the columns of `x` until they are
/// mutually orthogonal. Returns the rotated columns `X V = U S` and `V`;
/// the singular values are the column norms.
pub fn one_sided_jacobi(mut x: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.ncols();
    let mut v = DMatrix::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = x.column(p).norm_squared();
                let beta = x.column(q).norm_squared();
                let gamma = x.column(p).dot(&x.column(q));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut x, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (x, v)
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (a, b) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}

fn singular_values(x: DMatrix<f64>) -> Vec<f64> {
    let x = if x.nrows() < x.ncols() { x.transpose() } else { x };
    let (cols, _) = one_sided_jacobi(x);
    cols.column_iter().map(|c| c.norm()).collect()
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m.clone()).into_iter().fold(0.0, f64::max)
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Orthonormalizes the columns of `basis` by QR with `diag(R) >= 0`.
///
/// Returns `(Q, R)` with `basis = Q R`; coefficients `k` for the old basis
/// become `R k` for the new one. `label` names the basis in errors.
pub fn orthogonalize(basis: &DMatrix<f64>, label: &str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (d, m) = basis.shape();
    if m > d {
        return Err(GemError::RankDeficient {
            basis: label.to_string(),
            component: d,
        });
    }
    if m == 0 {
        return Ok((DMatrix::zeros(d, 0), DMatrix::zeros(0, 0)));
    }
    let qr = basis.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let rmax = (0..m).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    for j in 0..m {
        if !(r[(j, j)].abs() >= RANK_TOL * rmax) || rmax == 0.0 {
            return Err(GemError::RankDeficient {
                basis: label.to_string(),
                component: j,
            });
        }
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    Ok((q, r))
}

/// Extends the orthonormal columns of `basis` to `m` columns with
/// canonical vectors made orthogonal by two rounds of Gram-Schmidt.
/// Deterministic: candidates are tried in index order and kept when enough
/// of them survives the projection.
pub fn complete_basis(basis: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let (d, have) = basis.shape();
    assert!(m <= d, "cannot complete {d}-dimensional basis to {m} columns");
    let mut out = DMatrix::zeros(d, m.max(have));
    out.columns_mut(0, have).copy_from(basis);
    let mut filled = have;
    for e in 0..d {
        if filled >= m {
            break;
        }
        let mut v = DVector::zeros(d);
        v[e] = 1.0;
        for _ in 0..2 {
            for j in 0..filled {
                let c = out.column(j).dot(&v);
                v.axpy(-c, &out.column(j), 1.0);
            }
        }
        let norm = v.norm();
        if norm > 0.5 / (d as f64).sqrt() {
            out.set_column(filled, &(v / norm));
            filled += 1;
        }
    }
    out.columns(0, m.max(have)).into_owned()
}

/// `max |B^T B - I|` for a column basis.
pub fn orthonormality_error(basis: &DMatrix<f64>) -> f64 {
    let g = basis.transpose() * basis;
    let m = g.nrows();
    (g - DMatrix::identity(m, m)).abs().max()
}

/// Principal angles (ascending, radians) between the column spans of `a`
/// and `b`, which need not be orthonormal.
///
/// Small angles come from sines and large ones from cosines, so both ends
/// are accurate.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(invalid("principal angles need subspaces of the same ambient dimension"));
    }
    let (qa, _) = orthogonalize(a, "a")?;
    let (qb, _) = orthogonalize(b, "b")?;
    let k = qa.ncols().min(qb.ncols());
    let c = qa.transpose() * &qb;
    let mut cos = singular_values(c.clone());
    cos.sort_by(|x, y| y.total_cmp(x));
    let resid = &qb - &qa * c;
    let mut sin = singular_values(resid);
    sin.sort_by(|x, y| x.total_cmp(y));
    // The k smallest sines pair with the k largest cosines.
    Ok((0..k)
        .map(|i| {
            let from_cos = cos[i].min(1.0).acos();
            if from_cos < std::f64::consts::FRAC_PI_4 {
                sin.get(i).copied().unwrap_or(0.0).min(1.0).asin()
            } else {
                from_cos
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_pair() {
        let s = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, -1.0, 2.0, -0.5]);
        let fit = pca_fit(&s, 1).unwrap();
        assert_eq!(fit.basis.ncols(), 1);
        let dir = fit.basis.column(0);
        // Largest-magnitude entry is positive.
        assert!(dir[1] > 0.0);
        for r in 0..2 {
            let x = s.row(r).transpose();
            let k = dir.dot(&(&x - &fit.mean));
            let back = &fit.mean + dir * k;
            assert!((back - x).abs().max() < 1e-10);
        }
    }

    #[test]
    fn rejects_too_many_components() {
        let s = DMatrix::from_fn(3, 5, |i, j| (i * j) as f64);
        assert!(pca_fit(&s, 3).is_err());
        assert!(pca_fit(&DMatrix::zeros(1, 4), 0).is_err());
    }

    #[test]
    fn constant_data_truncates_to_zero_components() {
        let s = DMatrix::from_element(4, 6, 0.5);
        let fit = pca_fit(&s, 2).unwrap();
        assert_eq!(fit.basis.ncols(), 0);
        assert!(fit.rank_truncated);
    }

    #[test]
    fn orthogonalize_flags_duplicates() {
        let mut b = DMatrix::from_fn(5, 3, |i, j| ((i + 1) * (j + 2)) as f64 + (i * i) as f64 * j as f64);
        let c = b.column(0).into_owned();
        b.set_column(2, &c);
        match orthogonalize(&b, "position") {
            Err(GemError::RankDeficient { basis, component }) => {
                assert_eq!(basis, "position");
                assert_eq!(component, 2);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }
}
