//! Dense row-major matrices and the small set of kernels the quantizers need:
//! damped Cholesky, pivoted-QR least squares and quadratic forms.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Convenience for literals in tests and examples. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |r, k| self[(r, cols[k])])
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::dims(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Returns `self + shift * I`.
    pub fn add_diagonal(&self, shift: f64) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += shift;
        }
        out
    }

    pub fn mean_diagonal(&self) -> f64 {
        let d = self.diag();
        if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn relative_asymmetry(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst / scale
    }

    /// `‖self − other‖_F / ‖reference‖_F`; absolute when the reference is zero.
    pub fn relative_error(&self, other: &Matrix, reference: &Matrix) -> f64 {
        let diff = self.sub(other).expect("shape").frobenius_norm();
        let scale = reference.frobenius_norm();
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular factor `L` with `L Lᵀ = H + damping·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: Matrix,
    pub damping: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// `L Lᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        Matrix::from_fn(n, n, |r, c| {
            let k = r.min(c) + 1;
            dot(&self.l.row(r)[..k], &self.l.row(c)[..k])
        })
    }

    /// `Lᵀ v`
    pub fn lt_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|r| (r..n).map(|k| self.l[(k, r)] * v[k]).sum()).collect()
    }
}

/// Factors `H + damping·I`.
pub fn cholesky(h: &Matrix, damping: f64) -> Result<CholeskyFactor> {
    if !h.is_square() {
        return Err(Error::dims(format!("cholesky of {:?} matrix", h.shape())));
    }
    if !(damping >= 0.0) || !damping.is_finite() {
        return Err(Error::InvalidSize(format!("damping {damping}")));
    }
    let asym = h.relative_asymmetry();
    if asym > 1e-10 {
        return Err(Error::NotSymmetric(asym));
    }
    let n = h.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)] + damping - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            // symmetric input: read the lower triangle only
            let s = h[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / d;
        }
    }
    Ok(CholeskyFactor { l, damping })
}

/// Minimizes `‖A x − b‖₂` with Householder QR and column pivoting.
///
/// Columns whose remaining norm falls below the rank tolerance are dropped and
/// their coefficients set to zero, so all-zero columns always map to zero.
pub fn least_squares(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let (n, k) = a.shape();
    if b.len() != n {
        return Err(Error::dims(format!(
            "least squares with {n} rows and rhs of length {}",
            b.len()
        )));
    }
    if n < k {
        return Err(Error::dims(format!("underdetermined system {n}x{k}")));
    }
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..k).map(|c| a.col(c)).collect();
    let mut rhs = b.to_vec();
    let mut perm: Vec<usize> = (0..k).collect();

    let max_norm = cols.iter().map(|c| dot(c, c).sqrt()).fold(0.0_f64, f64::max);
    let tol = (n.max(k) as f64) * f64::EPSILON * max_norm;

    let mut rank = 0;
    for j in 0..k {
        // pivot: largest remaining column norm, lowest index on ties
        let mut best = j;
        let mut best_norm = -1.0;
        for (c, col) in cols.iter().enumerate().skip(j) {
            let s = dot(&col[j..], &col[j..]);
            if s > best_norm {
                best_norm = s;
                best = c;
            }
        }
        let norm = best_norm.max(0.0).sqrt();
        if norm <= tol || norm == 0.0 {
            break;
        }
        cols.swap(j, best);
        perm.swap(j, best);

        // Householder reflector zeroing cols[j][j+1..]
        let alpha = if cols[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 > 0.0 {
            for col in cols.iter_mut().skip(j + 1) {
                let f = 2.0 * dot(&v, &col[j..]) / vnorm2;
                for (x, vi) in col[j..].iter_mut().zip(&v) {
                    *x -= f * vi;
                }
            }
            let f = 2.0 * dot(&v, &rhs[j..]) / vnorm2;
            for (x, vi) in rhs[j..].iter_mut().zip(&v) {
                *x -= f * vi;
            }
        }
        cols[j][j] = alpha;
        for x in cols[j][j + 1..].iter_mut() {
            *x = 0.0;
        }
        rank += 1;
    }

    // back substitution on the leading rank×rank block of R
    let mut z = vec![0.0; rank];
    for i in (0..rank).rev() {
        let mut s = rhs[i];
        for c in (i + 1)..rank {
            s -= cols[c][i] * z[c];
        }
        z[i] = s / cols[i][i];
    }
    let mut x = vec![0.0; k];
    for (i, zi) in z.into_iter().enumerate() {
        x[perm[i]] = zi;
    }
    Ok(x)
}

/// `vᵀ H v`
pub fn quad_form(h: &Matrix, v: &[f64]) -> Result<f64> {
    if !h.is_square() || h.rows() != v.len() {
        return Err(Error::dims(format!(
            "quadratic form of {:?} matrix with vector of length {}",
            h.shape(),
            v.len()
        )));
    }
    Ok(v.iter()
        .enumerate()
        .map(|(r, &vr)| if vr == 0.0 { 0.0 } else { vr * dot(h.row(r), v) })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let a = random_matrix(rng, d + 3, d);
        a.transpose().matmul(&a).unwrap()
    }

    fn normal_equations(a: &Matrix, b: &[f64]) -> Vec<f64> {
        let ata = a.transpose().matmul(a).unwrap();
        let atb = a.transpose().matvec(b).unwrap();
        // solve via Gauss-Jordan, independent of the Cholesky path
        let k = ata.rows();
        let mut m: Vec<Vec<f64>> = (0..k)
            .map(|r| {
                let mut row = ata.row(r).to_vec();
                row.push(atb[r]);
                row
            })
            .collect();
        for c in 0..k {
            let p = (c..k).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            m.swap(c, p);
            let pivot = m[c][c];
            for v in m[c].iter_mut() {
                *v /= pivot;
            }
            for r in 0..k {
                if r != c {
                    let f = m[r][c];
                    let src = m[c].clone();
                    for (v, s) in m[r].iter_mut().zip(src) {
                        *v -= f * s;
                    }
                }
            }
        }
        m.iter().map(|row| row[k]).collect()
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(matches!(Matrix::new(2, 2, vec![1.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn cholesky_identity() {
        let f = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(f.l, Matrix::identity(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let h = Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let f = cholesky(&h, 0.0).unwrap();
        assert_eq!(f.l[(0, 0)], 2.0);
        assert_eq!(f.l[(0, 1)], 0.0);
        assert_eq!(f.l[(1, 0)], 1.0);
        assert!((f.l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert!(f.reconstruct().relative_error(&h, &h) < 1e-15);
    }

    #[test]
    fn damping_rescues_singular_matrix() {
        let h = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(
            cholesky(&h, 0.0),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
        let f = cholesky(&h, 1e-7).unwrap();
        let dev = f.reconstruct().sub(&h).unwrap();
        assert!((dev[(0, 0)] - 1e-7).abs() < 1e-15);
        assert!((dev[(1, 1)] - 1e-7).abs() < 1e-15);
        assert!(dev[(0, 1)].abs() < 1e-15 && dev[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let h = Matrix::from_rows(&[[2.0, 1.0], [0.0, 2.0]]);
        assert!(matches!(cholesky(&h, 0.0), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn cholesky_reconstruction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [1, 2, 5, 17, 40, 64] {
            let h = random_spd(&mut rng, d);
            let f = cholesky(&h, 1e-3).unwrap();
            let target = h.add_diagonal(1e-3);
            assert!(f.reconstruct().relative_error(&target, &h) <= 1e-10, "d={d}");
            for r in 0..d {
                assert!(f.l[(r, r)] > 0.0);
                for c in (r + 1)..d {
                    assert_eq!(f.l[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn least_squares_trivial() {
        let x = least_squares(&Matrix::identity(2), &[3.0, 5.0]).unwrap();
        assert_eq!(x, vec![3.0, 5.0]);
        let x = least_squares(&Matrix::from_rows(&[[1.0], [1.0]]), &[1.0, 3.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 8, 3);
            let b: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = least_squares(&a, &b).unwrap();
            let oracle = normal_equations(&a, &b);
            for (u, v) in x.iter().zip(&oracle) {
                assert!((u - v).abs() < 1e-9, "{x:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn least_squares_zero_column_maps_to_zero() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [0.0, 0.0]]);
        let x = least_squares(&a, &[1.0, 2.0, 7.0]).unwrap();
        assert_eq!(x[1], 0.0);
        assert!((x[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn least_squares_dimension_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            least_squares(&a, &[0.0, 0.0]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            least_squares(&Matrix::identity(2), &[0.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn quad_form_examples() {
        assert_eq!(quad_form(&Matrix::identity(2), &[3.0, 4.0]).unwrap(), 25.0);
        let h = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        assert_eq!(quad_form(&h, &[1.0, 1.0]).unwrap(), 6.0);
        assert_eq!(quad_form(&h, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(quad_form(&h, &[1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn least_squares_is_locally_optimal(seed in any::<u64>(), n in 3usize..10, k in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_matrix(&mut rng, n, k);
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let x = least_squares(&a, &b).unwrap();
                let resid = |x: &[f64]| {
                    let ax = a.matvec(x).unwrap();
                    ax.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
                };
                let base = resid(&x);
                for c in 0..k {
                    for delta in [-1e-3, 1e-3] {
                        let mut y = x.clone();
                        y[c] += delta;
                        prop_assert!(resid(&y) >= base - 1e-12);
                    }
                }
                // normal equations residual
                let ax = a.matvec(&x).unwrap();
                let r: Vec<f64> = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
                let g = a.transpose().matvec(&r).unwrap();
                let bound = 1e-8 * a.frobenius_norm() * b.iter().map(|v| v * v).sum::<f64>().sqrt();
                for gi in g {
                    prop_assert!(gi.abs() <= bound);
                }
            }

            #[test]
            fn quad_form_nonnegative_on_spd(seed in any::<u64>(), d in 1usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h = random_spd(&mut rng, d);
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
                prop_assert!(quad_form(&h, &v).unwrap() >= 0.0);
            }
        }
    }
}
