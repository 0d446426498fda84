// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra and similarity kernels.
//!
//! Everything is `f64`. Matrices are row-major; the multiplication kernels
//! use i-k-j loop order so the inner loop streams contiguous rows.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{DemError, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector storage used for hidden states and deltas.
pub type Vector = Vec<f64>;

impl Matrix {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values, checking the element count.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(DemError::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DemError::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column matrix from a single vector.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Matrix whose columns are the given vectors (all the same length).
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        Ok(Self::from_rows(cols)?.transpose())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(DemError::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, rhs.row(k), o_row);
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(DemError::Dimension(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a_row, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        self.t_matmul_acc(rhs, &mut out)?;
        Ok(out)
    }

    /// `out += selfᵀ · rhs`; the weight-gradient kernel.
    pub fn t_matmul_acc(&self, rhs: &Matrix, out: &mut Matrix) -> Result<()> {
        if self.rows != rhs.rows || out.shape() != (self.cols, rhs.cols) {
            return Err(DemError::Dimension(format!(
                "t_matmul ({}x{})ᵀ by {}x{} into {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols, out.rows, out.cols
            )));
        }
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = rhs.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, b_row, &mut out.data[i * rhs.cols..(i + 1) * rhs.cols]);
            }
        }
        Ok(())
    }

    /// Row vector times matrix: `x · self`.
    pub fn vec_mul(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.rows {
            return Err(DemError::Dimension(format!(
                "vector of length {} times {}x{}",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (k, &a) in x.iter().enumerate() {
            if a != 0.0 {
                axpy(a, self.row(k), &mut out);
            }
        }
        Ok(out)
    }

    /// Matrix times column vector: `self · x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(DemError::Dimension(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "add")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "sub")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
        Ok(())
    }

    /// `self += scale · rhs`.
    pub fn scaled_add_assign(&mut self, scale: f64, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "scaled add")?;
        axpy(scale, &rhs.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same_shape(rhs, "compare")?;
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest `|a_ij - a_ji|`; infinite for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    fn check_same_shape(&self, rhs: &Matrix, what: &str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(DemError::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scaled(a: &[f64], s: f64) -> Vector {
    a.iter().map(|x| x * s).collect()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DemError::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(DemError::Degenerate("cosine of a zero-norm vector".into()));
    }
    if !(na.is_finite() && nb.is_finite()) {
        return Err(DemError::NonFinite("cosine input".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Overlap coefficient `|A ∩ B| / min(|A|, |B|)` over token-id sets.
///
/// Duplicate ids are collapsed before counting.
pub fn simpson_overlap(a: &[u32], b: &[u32]) -> Result<f64> {
    let sa: BTreeSet<u32> = a.iter().copied().collect();
    let sb: BTreeSet<u32> = b.iter().copied().collect();
    if sa.is_empty() || sb.is_empty() {
        return Err(DemError::InvalidInput(
            "simpson overlap of an empty candidate set".into(),
        ));
    }
    let inter = sa.intersection(&sb).count();
    Ok(inter as f64 / sa.len().min(sb.len()) as f64)
}

/// Result of [`spd_solve`].
#[derive(Debug, Clone)]
pub struct SpdSolution {
    pub x: Matrix,
    /// Diagonal jitter that had to be added before the factorization
    /// succeeded, if any.
    pub jitter: Option<f64>,
}

const SYMMETRY_TOL: f64 = 1e-8;

/// Solves `A X = B` for symmetric positive definite `A` by Cholesky.
///
/// When the plain factorization fails, `εI` with `ε = 1e-8·trace(A)/dim`
/// is added once and the jitter is reported in the result.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<SpdSolution> {
    if !a.is_square() {
        return Err(DemError::Dimension(format!(
            "spd_solve needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.rows() != a.rows() {
        return Err(DemError::Dimension(format!(
            "spd_solve: A is {}x{}, B has {} rows",
            a.rows(),
            a.cols(),
            b.rows()
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(DemError::NonFinite("spd_solve input".into()));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(DemError::NotPositiveDefinite(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let n = a.rows();
    let (factor, jitter) = match cholesky(a) {
        Some(l) => (l, None),
        None => {
            let eps = 1e-8 * a.trace() / n.max(1) as f64;
            if !(eps > 0.0) {
                return Err(DemError::NotPositiveDefinite(
                    "factorization failed and trace is not positive".into(),
                ));
            }
            let mut jittered = a.clone();
            for i in 0..n {
                jittered.set(i, i, jittered.get(i, i) + eps);
            }
            let l = cholesky(&jittered).ok_or_else(|| {
                DemError::NotPositiveDefinite(format!("indefinite even after jitter {eps:e}"))
            })?;
            (l, Some(eps))
        }
    };
    Ok(SpdSolution {
        x: cholesky_solve(&factor, b),
        jitter,
    })
}

/// Lower-triangular `L` with `A = L Lᵀ`, or `None` on a non-positive pivot.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let d = a.get(j, j) - dot(lj, lj);
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l.data[j * n + j] = djj;
        for i in (j + 1)..n {
            let s = a.get(i, j) - dot(&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
            l.data[i * n + j] = s / djj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let m = b.cols();
    let mut x = b.clone();
    for c in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Result<Vector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(DemError::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vector {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vector = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

/// `log softmax(v)`, computed without forming the probabilities.
pub fn log_softmax(v: &[f64]) -> Vector {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, ordered by value then by index.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| i as u32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(DemError::Dimension(_))
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(DemError::Degenerate(_))
        ));
    }

    #[test]
    fn simpson_examples() {
        assert_eq!(simpson_overlap(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(simpson_overlap(&[1], &[2]).unwrap(), 0.0);
        let s = simpson_overlap(&[1, 2, 3], &[2, 3, 4]).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-4);
        // duplicates collapse: {1,2} vs {2}
        assert_eq!(simpson_overlap(&[1, 1, 2], &[2, 2]).unwrap(), 1.0);
        assert!(simpson_overlap(&[], &[1]).is_err());
    }

    #[test]
    fn spd_solve_examples() {
        let s = spd_solve(&Matrix::identity(2), &Matrix::column(&[3.0, 4.0])).unwrap();
        assert_eq!(s.x.col(0), vec![3.0, 4.0]);
        assert!(s.jitter.is_none());

        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = spd_solve(&a, &Matrix::column(&[2.0, 1.0])).unwrap();
        assert!(s.x.max_abs_diff(&Matrix::column(&[1.0, 1.0])).unwrap() < 1e-12);

        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let s = spd_solve(&a, &Matrix::column(&[10.0, 9.0])).unwrap();
        assert!((s.x.get(0, 0) - 1.5).abs() < 1e-8);
        assert!((s.x.get(1, 0) - 2.0).abs() < 1e-8);
    }

    #[test]
    fn spd_solve_jitters_singular_psd() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let s = spd_solve(&a, &Matrix::column(&[1.0, 0.0])).unwrap();
        let eps = s.jitter.expect("jitter applied");
        assert!((eps - 5e-9).abs() < 1e-20);
        assert!((s.x.get(0, 0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn spd_solve_errors() {
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(
            spd_solve(&rect, &Matrix::zeros(2, 1)),
            Err(DemError::Dimension(_))
        ));
        let indefinite = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(matches!(
            spd_solve(&indefinite, &Matrix::zeros(2, 1)),
            Err(DemError::NotPositiveDefinite(_))
        ));
        let asym = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(spd_solve(&asym, &Matrix::zeros(2, 1)).is_err());
    }

    /// Gaussian elimination with partial pivoting; independent of the
    /// Cholesky path.
    fn gauss_solve(a: &Matrix, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = a.row(i).to_vec();
                r.push(b[i]);
                r
            })
            .collect();
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs()))
                .unwrap();
            m.swap(c, p);
            for r in (c + 1)..n {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = ((r + 1)..n).map(|k| m[r][k] * x[k]).sum();
            x[r] = (m[r][n] - s) / m[r][r];
        }
        x
    }

    #[test]
    fn spd_solve_matches_gaussian_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..8);
            let g = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let mut a = g.t_matmul(&g).unwrap();
            for i in 0..n {
                a.set(i, i, a.get(i, i) + 0.5);
            }
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let x = spd_solve(&a, &Matrix::column(&b)).unwrap().x.col(0);
            let oracle = gauss_solve(&a, &b);
            for (p, q) in x.iter().zip(&oracle) {
                assert!((p - q).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-300);
        let s = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-9);
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0, 1.0], 5), vec![0, 1]);
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.as_slice(), &[4.0, 5.0, 10.0, 11.0]);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert_eq!(a.vec_mul(&[1.0, 1.0]).unwrap(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.mul_vec(&[1.0, 0.0, 1.0]).unwrap(), vec![4.0, 10.0]);
    }

    fn small_set() -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(0u32..20, 1..12)
    }

    proptest! {
        #[test]
        fn simpson_reflexive_and_symmetric(a in small_set(), b in small_set()) {
            prop_assert_eq!(simpson_overlap(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(simpson_overlap(&a, &b).unwrap(), simpson_overlap(&b, &a).unwrap());
        }

        #[test]
        fn cosine_scale_invariant(
            v in prop::collection::vec(-5.0f64..5.0, 1..10),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&v) > 1e-6);
            let w = scaled(&v, c);
            prop_assert!((cosine_similarity(&v, &w).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..10),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in p.iter().zip(&q) {
                prop_assert!(*x >= 0.0);
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn spd_solve_round_trip(n in 1usize..10, m in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let mut a = g.t_matmul(&g).unwrap();
            for i in 0..n {
                a.set(i, i, a.get(i, i) + 0.1);
            }
            let b = Matrix::from_vec(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let x = spd_solve(&a, &b).unwrap().x;
            prop_assert!(a.matmul(&x).unwrap().max_abs_diff(&b).unwrap() < 1e-6);
        }
    }
}
