//! Dense numerical kernels: least squares, pseudoinverse, column selection,
//! rank-constrained factorization, numerical rank and R² scoring.
//!
//! Samples are rows and linear maps act from the right (`X · W`).

use nalgebra::{DMatrix, RowDVector};

use crate::error::{Result, ScbmError};

pub type Matrix = DMatrix<f64>;

/// Default relative threshold for rank decisions.
pub const RANK_REL_TOL: f64 = 1e-8;

/// Default pseudoinverse cutoff, scaled by `max(rows, cols)`.
pub const PINV_REL_TOL: f64 = 1e-12;

/// Thin singular value decomposition `M = U · diag(σ) · Vᵀ` with `σ`
/// descending. Columns of `U` belonging to zero singular values are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// Count of `σ_k > rel_tol · σ_1`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        match self.singular_values.first() {
            Some(&top) if top > 0.0 => self.singular_values.iter().filter(|&&v| v > rel_tol * top).count(),
            _ => 0,
        }
    }

    /// `V · diag(1/σ) · Uᵀ` over the singular values above `rel_tol · σ_1`.
    pub fn pinv(&self, rel_tol: f64) -> Matrix {
        let k = self.rank(rel_tol);
        let mut v = self.v.columns(0, k).into_owned();
        for (j, s) in self.singular_values[..k].iter().enumerate() {
            v.column_mut(j).scale_mut(1.0 / s);
        }
        v * self.u.columns(0, k).transpose()
    }
}

/// One-sided Jacobi SVD of a matrix with at least as many rows as columns.
fn jacobi_svd(a: Matrix) -> Svd {
    let n = a.ncols();
    let mut b = a;
    let mut v = Matrix::identity(n, n);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = b.column(p).norm_squared();
                let beta = b.column(q).norm_squared();
                let gamma = b.column(p).dot(&b.column(q));
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut b, &mut v] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * x - s * y;
                        m[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| b.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = Matrix::zeros(b.nrows(), n);
    let mut vs = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        if norms[j] > 0.0 {
            u.column_mut(k).copy_from(&(b.column(j) / norms[j]));
        }
        vs.column_mut(k).copy_from(&v.column(j));
    }
    Svd {
        u,
        singular_values: order.iter().map(|&j| norms[j]).collect(),
        v: vs,
    }
}

/// Thin SVD. Tall inputs are reduced by a QR factorization first; wide ones
/// are handled through their transpose.
pub fn svd(m: &Matrix) -> Svd {
    let (r, c) = m.shape();
    if r < c {
        let t = svd(&m.transpose());
        return Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
    }
    if r > c && c > 0 {
        let qr = m.clone().qr();
        let inner = jacobi_svd(qr.r());
        return Svd {
            u: qr.q() * inner.u,
            singular_values: inner.singular_values,
            v: inner.v,
        };
    }
    jacobi_svd(m.clone())
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    svd(m).singular_values
}

/// Number of singular values `σ_k ≥ rel_tol · σ_1`; the zero matrix has rank 0.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&v| v >= rel_tol * top).count(),
        _ => 0,
    }
}

/// SVD pseudoinverse. Singular values at or below `rel_tol · σ_1` are
/// treated as zero; `None` uses `PINV_REL_TOL · max(rows, cols)`.
pub fn pinv(m: &Matrix, rel_tol: Option<f64>) -> Matrix {
    let (r, c) = m.shape();
    if m.is_empty() {
        return Matrix::zeros(c, r);
    }
    svd(m).pinv(rel_tol.unwrap_or(PINV_REL_TOL * r.max(c) as f64))
}

/// Horizontal concatenation of blocks sharing a row count.
pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
    let Some(first) = blocks.first() else {
        return Err(ScbmError::param("hstack of zero blocks"));
    };
    let rows = first.nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        if b.nrows() != rows {
            return Err(ScbmError::DimensionMismatch {
                context: "hstack rows",
                expected: rows,
                actual: b.nrows(),
            });
        }
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    Ok(out)
}

pub fn column_means(m: &Matrix) -> RowDVector<f64> {
    if m.nrows() == 0 {
        return RowDVector::zeros(m.ncols());
    }
    m.row_mean()
}

pub fn center_columns(m: &Matrix) -> (Matrix, RowDVector<f64>) {
    let mean = column_means(m);
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    (c, mean)
}

/// Rows `start..start+len` as an owned matrix.
pub fn row_slice(m: &Matrix, start: usize, len: usize) -> Matrix {
    m.rows(start, len).into_owned()
}

pub fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

/// Ordinary least squares with implicit intercept.
#[derive(Debug, Clone)]
pub struct OlsFit {
    /// `p × q` coefficients acting on centered regressors.
    pub coef: Matrix,
    pub x_mean: RowDVector<f64>,
    pub y_mean: RowDVector<f64>,
    /// Numerical rank of the centered design.
    pub rank: usize,
    /// The design was rank deficient and the minimum-norm solution was used.
    pub rank_deficient: bool,
}

impl OlsFit {
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.coef.nrows() {
            return Err(ScbmError::DimensionMismatch {
                context: "ols predict",
                expected: self.coef.nrows(),
                actual: x.ncols(),
            });
        }
        let mut out = x * &self.coef;
        let offset = &self.y_mean - &self.x_mean * &self.coef;
        for mut row in out.row_iter_mut() {
            row += &offset;
        }
        Ok(out)
    }
}

/// Minimizes `‖(X − x̄)·W − (Y − ȳ)‖_F`. Tall designs go through a
/// Householder QR followed by an SVD of the triangular factor; wide or
/// rank-deficient designs yield the minimum-norm solution.
pub fn ols_fit(x: &Matrix, y: &Matrix) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.nrows() != n {
        return Err(ScbmError::DimensionMismatch {
            context: "ols rows",
            expected: n,
            actual: y.nrows(),
        });
    }
    if n == 0 || p == 0 {
        return Err(ScbmError::param("ols needs at least one sample and one regressor"));
    }
    let (xc, x_mean) = center_columns(x);
    let (yc, y_mean) = center_columns(y);
    let rel = f64::EPSILON * n.max(p) as f64;

    let dec = svd(&xc);
    let rank = dec.rank(rel);
    let coef = dec.pinv(rel) * yc;
    Ok(OlsFit {
        coef,
        x_mean,
        y_mean,
        rank,
        rank_deficient: rank < p,
    })
}

/// Greedy column-pivoted Gram–Schmidt. Returns every column index in pivot
/// order together with the residual norm each had when picked. Ties go to
/// the lowest index.
fn pivot_order(m: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let cols = m.ncols();
    let mut resid: Vec<nalgebra::DVector<f64>> = (0..cols).map(|c| m.column(c).into_owned()).collect();
    let mut remaining: Vec<usize> = (0..cols).collect();
    let mut order = Vec::with_capacity(cols);
    let mut norms = Vec::with_capacity(cols);
    while !remaining.is_empty() {
        let mut best = 0;
        let mut best_norm = -1.0;
        for (slot, &c) in remaining.iter().enumerate() {
            let nrm = resid[c].norm();
            if nrm > best_norm {
                best = slot;
                best_norm = nrm;
            }
        }
        let pick = remaining.remove(best);
        order.push(pick);
        norms.push(best_norm);
        if best_norm <= 0.0 {
            continue;
        }
        let q = &resid[pick] / best_norm;
        for &c in &remaining {
            // two passes keep the residuals orthogonal to working precision
            for _ in 0..2 {
                let proj = q.dot(&resid[c]);
                resid[c].axpy(-proj, &q, 1.0);
            }
        }
    }
    (order, norms)
}

/// Picks `r` linearly independent columns by column-pivoted QR. A column
/// counts as independent while its residual norm exceeds `rel_tol` times
/// the largest column norm.
pub fn select_independent_columns(m: &Matrix, r: usize, rel_tol: f64) -> Result<Vec<usize>> {
    if r > m.ncols() {
        return Err(ScbmError::param(format!(
            "cannot select {r} columns from a matrix with {} columns",
            m.ncols()
        )));
    }
    let (order, norms) = pivot_order(m);
    let achieved = independent_count(&norms, rel_tol);
    if achieved < r {
        return Err(ScbmError::RankDeficient { requested: r, achieved });
    }
    Ok(order[..r].to_vec())
}

fn independent_count(norms: &[f64], rel_tol: f64) -> usize {
    let top = norms.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    norms.iter().take_while(|&&v| v > rel_tol * top).count()
}

/// `M ≈ left · right` with `left` made of `r` selected columns of `M`.
#[derive(Debug, Clone)]
pub struct Factorization {
    pub left: Matrix,
    pub right: Matrix,
    /// Columns of `M` forming `left`, in pivot order.
    pub columns: Vec<usize>,
    /// `‖left · right − M‖_F`.
    pub residual: f64,
    /// Fewer than `r` independent columns were available.
    pub rank_deficient: bool,
}

/// Rank-`r` factorization: `left` are `r` independent columns of `m` and
/// `right = pinv(left) · m`. When `m` has larger numerical rank the residual
/// is nonzero; when it has smaller rank the pivot order is still used and
/// the result is flagged.
pub fn rank_factorize(m: &Matrix, r: usize, rel_tol: f64) -> Result<Factorization> {
    let (rows, cols) = m.shape();
    if r == 0 || r > rows.min(cols) {
        return Err(ScbmError::param(format!(
            "factorization rank {r} must lie in 1..={}",
            rows.min(cols)
        )));
    }
    let (order, norms) = pivot_order(m);
    let columns = order[..r].to_vec();
    let left = m.select_columns(&columns);
    let right = pinv(&left, None) * m;
    let residual = (&left * &right - m).norm();
    Ok(Factorization {
        left,
        right,
        columns,
        residual,
        rank_deficient: independent_count(&norms, rel_tol) < r,
    })
}

/// Coefficient of determination per output column and their plain average.
#[derive(Debug, Clone, PartialEq)]
pub struct R2Score {
    /// `None` marks a zero-variance column with nonzero residual.
    pub per_dim: Vec<Option<f64>>,
    /// Mean over the defined dimensions; NaN if none is defined.
    pub average: f64,
}

impl R2Score {
    pub fn undefined_dims(&self) -> Vec<usize> {
        self.per_dim
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(k, _)| k)
            .collect()
    }
}

pub fn r2_score(y_true: &Matrix, y_pred: &Matrix) -> Result<R2Score> {
    if y_true.shape() != y_pred.shape() {
        return Err(ScbmError::param(format!(
            "r2 shapes differ: {:?} vs {:?}",
            y_true.shape(),
            y_pred.shape()
        )));
    }
    let n = y_true.nrows();
    if n < 2 {
        return Err(ScbmError::param("r2 needs at least two samples"));
    }
    let per_dim: Vec<Option<f64>> = (0..y_true.ncols())
        .map(|k| {
            let t = y_true.column(k);
            let p = y_pred.column(k);
            let mean = t.mean();
            let ss_tot: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
            let ss_res: f64 = t.iter().zip(p.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            if ss_tot > 0.0 {
                Some(1.0 - ss_res / ss_tot)
            } else if ss_res == 0.0 {
                Some(1.0)
            } else {
                None
            }
        })
        .collect();
    let defined: Vec<f64> = per_dim.iter().flatten().copied().collect();
    let average = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(R2Score { per_dim, average })
}

/// Serde adapter storing a matrix as a list of rows.
pub mod rows {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Matrix;

    pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], cols_if_empty: usize) -> Result<Matrix, String> {
        let cols = rows.first().map_or(cols_if_empty, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err("ragged matrix rows".into());
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite matrix entry".into());
        }
        Ok(Matrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows, 0).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
    }

    fn max_abs(m: &Matrix) -> f64 {
        m.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn penrose_errors(m: &Matrix) -> [f64; 4] {
        let p = pinv(m, None);
        let mp = m * &p;
        let pm = &p * m;
        [
            rel_err(&(&mp * m), m),
            rel_err(&(&pm * &p), &p),
            rel_err(&mp.transpose(), &mp),
            rel_err(&pm.transpose(), &pm),
        ]
    }

    #[test]
    fn ols_exact_fits() {
        // centering removes one degree of freedom, so one extra row keeps the
        // centered design full rank
        let x = randn(7, 6, 1);
        let fit = ols_fit(&x, &x).unwrap();
        assert_abs_diff_eq!(fit.coef, Matrix::identity(6, 6), epsilon = 1e-10);

        let x = randn(200, 4, 2);
        let w0 = randn(4, 3, 3);
        let fit = ols_fit(&x, &(&x * &w0)).unwrap();
        assert_abs_diff_eq!(fit.coef, w0, epsilon = 1e-8);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn ols_noisy_recovery() {
        let x = randn(10_000, 5, 4);
        let w0 = randn(5, 2, 5);
        let y = &x * &w0 + randn(10_000, 2, 6);
        let fit = ols_fit(&x, &y).unwrap();
        assert!(max_abs(&(&fit.coef - &w0)) <= 0.05);
    }

    #[test]
    fn ols_residual_orthogonal_to_design() {
        let x = randn(300, 7, 7);
        let y = randn(300, 3, 8) + &x * randn(7, 3, 9);
        let fit = ols_fit(&x, &y).unwrap();
        let (xc, _) = center_columns(&x);
        let resid = &y - fit.predict(&x).unwrap();
        let inner = xc.transpose() * &resid;
        assert!(max_abs(&inner) <= 1e-8 * xc.norm() * resid.norm());
    }

    #[test]
    fn ols_wide_design_is_minimum_norm() {
        let x = randn(10, 30, 10);
        let y = randn(10, 2, 11);
        let fit = ols_fit(&x, &y).unwrap();
        assert!(fit.rank_deficient);
        assert_eq!(fit.rank, 9);
        // interpolates the training data
        assert_abs_diff_eq!(fit.predict(&x).unwrap(), y, epsilon = 1e-8);
        // and lies in the row space of the centered design
        let (xc, _) = center_columns(&x);
        let proj = pinv(&xc, None) * &xc;
        assert_abs_diff_eq!(&proj * &fit.coef, fit.coef, epsilon = 1e-8);
    }

    #[test]
    fn ols_rank_deficient_design_flags() {
        let base = randn(50, 2, 12);
        let x = hstack(&[&base, &base]).unwrap();
        let fit = ols_fit(&x, &randn(50, 1, 13)).unwrap();
        assert!(fit.rank_deficient);
        assert_eq!(fit.rank, 2);
    }

    #[test]
    fn pinv_examples() {
        assert_abs_diff_eq!(
            pinv(&Matrix::identity(3, 3), None),
            Matrix::identity(3, 3),
            epsilon = 1e-15
        );
        let d = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let expected = Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(pinv(&d, None), expected, epsilon = 1e-15);
        for e in penrose_errors(&randn(7, 3, 14)) {
            assert!(e <= 1e-10, "{e}");
        }
    }

    #[test]
    fn select_columns_examples() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut picked = select_independent_columns(&m, 2, RANK_REL_TOL).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 2]);
        assert_eq!(
            select_independent_columns(&m, 3, RANK_REL_TOL).unwrap_err().to_string(),
            ScbmError::RankDeficient {
                requested: 3,
                achieved: 2
            }
            .to_string()
        );

        let mut picked = select_independent_columns(&Matrix::identity(4, 4), 4, RANK_REL_TOL).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1, 2, 3]);

        let mut rng = seeded(15);
        let b = uniform(6, 2, &mut rng);
        let f = uniform(2, 6, &mut rng);
        let m = &b * &f;
        let cols = select_independent_columns(&m, 2, RANK_REL_TOL).unwrap();
        let chosen = m.select_columns(&cols);
        // span(chosen) == span(b): projecting b onto it leaves nothing
        let proj = &chosen * pinv(&chosen, None);
        assert!((&proj * &b - &b).norm() < 1e-8);
    }

    #[test]
    fn factorize_examples() {
        let u = randn(5, 1, 16);
        let v = randn(1, 4, 17);
        let f = rank_factorize(&(&u * &v), 1, RANK_REL_TOL).unwrap();
        assert!(f.residual <= 1e-10);

        let f = rank_factorize(&Matrix::identity(4, 4), 4, RANK_REL_TOL).unwrap();
        assert_abs_diff_eq!(&f.left * &f.right, Matrix::identity(4, 4), epsilon = 1e-10);

        // rank-2 matrix squeezed into rank 1: never better than the SVD optimum
        let m = randn(6, 2, 18) * randn(2, 5, 19);
        let s = singular_values(&m);
        let f = rank_factorize(&m, 1, RANK_REL_TOL).unwrap();
        assert!(f.residual > 0.0);
        assert!(f.residual >= s[1] * (1.0 - 1e-12));

        assert!(rank_factorize(&m, 0, RANK_REL_TOL).is_err());
        assert!(rank_factorize(&m, 6, RANK_REL_TOL).is_err());

        // asking for more columns than the rank still succeeds, flagged
        let f = rank_factorize(&m, 3, RANK_REL_TOL).unwrap();
        assert!(f.rank_deficient);
        assert!(f.residual <= 1e-10 * m.norm());
    }

    #[test]
    fn numerical_rank_examples() {
        assert_eq!(numerical_rank(&Matrix::identity(5, 5), RANK_REL_TOL), 5);
        let d = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1e-12]));
        assert_eq!(numerical_rank(&d, RANK_REL_TOL), 1);
        assert_eq!(numerical_rank(&Matrix::zeros(3, 3), RANK_REL_TOL), 0);
    }

    #[test]
    fn triple_uniform_product_collapses_spectrally() {
        // SVD oracle: σ2/σ1 of a product of three 50×50 uniform[0,1] factors
        // sits near 1e-3. The gap is three orders of magnitude, far from the
        // 1e-8 cutoff, so the rank only reads 1 at a loose threshold.
        let mut rng = seeded(20);
        let m = uniform(50, 50, &mut rng) * uniform(50, 50, &mut rng) * uniform(50, 50, &mut rng);
        let s = singular_values(&m);
        assert!(s[1] / s[0] < 5e-3, "ratio {}", s[1] / s[0]);
        assert_eq!(numerical_rank(&m, 1e-2), 1);
        assert!(numerical_rank(&m, RANK_REL_TOL) > 1);
    }

    #[test]
    fn r2_examples() {
        let y = Matrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r2_score(&y, &y).unwrap().average, 1.0);
        let mean = Matrix::from_element(4, 1, 2.5);
        assert_abs_diff_eq!(r2_score(&y, &mean).unwrap().average, 0.0, epsilon = 1e-15);
        let pred = Matrix::from_column_slice(4, 1, &[1.1, 1.9, 3.2, 3.8]);
        // 1 - 0.10 / 5.0
        assert_abs_diff_eq!(r2_score(&y, &pred).unwrap().average, 0.98, epsilon = 1e-12);
    }

    #[test]
    fn r2_degenerate_columns() {
        let y = Matrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let exact = r2_score(&y, &y).unwrap();
        assert_eq!(exact.per_dim, vec![Some(1.0), Some(1.0)]);
        let mut off = y.clone();
        off[(0, 1)] = 4.0;
        let s = r2_score(&y, &off).unwrap();
        assert_eq!(s.per_dim[1], None);
        assert_eq!(s.undefined_dims(), vec![1]);
        assert_eq!(s.average, 1.0);
        assert!(r2_score(&y, &Matrix::zeros(3, 1)).is_err());
        assert!(r2_score(&Matrix::zeros(1, 1), &Matrix::zeros(1, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn penrose_conditions_hold_for_all_rank_profiles(
            seed in 0u64..100_000, rows in 1usize..9, cols in 1usize..9, rank_cut in 0usize..9
        ) {
            let r = rank_cut.min(rows.min(cols));
            let m = if r == 0 { Matrix::zeros(rows, cols) } else { randn(rows, r, seed) * randn(r, cols, seed + 1) };
            for e in penrose_errors(&m) {
                prop_assert!(e <= 1e-10, "penrose error {}", e);
            }
            if r > 0 {
                prop_assert_eq!(numerical_rank(&m, RANK_REL_TOL), r);
                let f = rank_factorize(&m, r, RANK_REL_TOL).unwrap();
                prop_assert!(f.residual <= 1e-8 * m.norm());
                let cols_ok = select_independent_columns(&m, r, RANK_REL_TOL).unwrap();
                prop_assert_eq!(numerical_rank(&m.select_columns(&cols_ok), RANK_REL_TOL), r);
            }
        }

        #[test]
        fn r2_is_shift_invariant(seed in 0u64..100_000, shift in -100.0f64..100.0) {
            let y = randn(20, 3, seed);
            let p = &y + randn(20, 3, seed + 7) * 0.3;
            let a = r2_score(&y, &p).unwrap().average;
            let b = r2_score(&y.add_scalar(shift), &p.add_scalar(shift)).unwrap().average;
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}
