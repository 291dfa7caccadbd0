//! Dense row-major matrices and the handful of vector kernels the pipeline needs.
//!
//! Everything is `f64`. There is no broadcasting machinery; shapes are checked
//! at the boundaries that take user data and asserted on the internal hot paths.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape(format!(
                "cannot apply {}x{} matrix to a {}-vector",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::shape(format!(
                "cannot apply transpose of {}x{} matrix to a {}-vector",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            axpy(vr, self.row(r), &mut out);
        }
        Ok(out)
    }

    /// `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = alpha * ur;
            if s != 0.0 {
                axpy(s, v, self.row_mut(r));
            }
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Applies [`softmax_row`] to every row.
    pub fn softmax_rows(&self) -> Result<Mat> {
        let mut out = Mat::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&softmax_row(self.row(r))?);
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            group: "softmax input".into(),
        });
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Backward of softmax: given `p = softmax(e)` and `dL/dp`, returns `dL/de`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner = dot(p, grad_p);
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backward of [`l2_normalize`]: given the unit output `y`, the input norm and `dL/dy`.
pub fn l2_normalize_backward(y: &[f64], input_norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let radial = dot(y, grad_y);
    y.iter()
        .zip(grad_y)
        .map(|(yi, gi)| (gi - yi * radial) / input_norm)
        .collect()
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn naive_softmax(v: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_row(&[0.0; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let p = softmax_row(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = Rng::new(11);
        let v: Vec<f64> = (0..32).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let p = softmax_row(&v).unwrap();
        for (a, b) in p.iter().zip(naive_softmax(&v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax_row(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            softmax_row(&[1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(softmax_row(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax_row(&[1000.0, 999.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[-1.0, -5.0]), vec![0.0, 0.0]);
        let mut rng = Rng::new(3);
        let v: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        for (o, i) in relu(&v).iter().zip(&v) {
            assert_eq!(*o, if *i > 0.0 { *i } else { 0.0 });
        }
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        let mut rng = Rng::new(5);
        let v: Vec<f64> = (0..128).map(|_| rng.normal()).collect();
        assert!((norm(&l2_normalize(&v).unwrap()) - 1.0).abs() < 1e-10);
        assert!(matches!(
            l2_normalize(&[1e-13, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(8);
        let a = Mat::from_fn(8, 8, |_, _| rng.normal());
        let b = Mat::from_fn(8, 8, |_, _| rng.normal());
        let c = a.matmul(&b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..8 {
                    s += a[(i, k)] * b[(k, j)];
                }
                assert!((c[(i, j)] - s).abs() <= 1e-10 * s.abs().max(1.0));
            }
        }
        assert!(a.matmul(&Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn matvec_variants_agree_with_transpose() {
        let mut rng = Rng::new(9);
        let a = Mat::from_fn(3, 5, |_, _| rng.normal());
        let v: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let direct = a.matvec_t(&v).unwrap();
        let via_t = a.transpose().matvec(&v).unwrap();
        for (x, y) in direct.iter().zip(&via_t) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(a.matvec(&v).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..40),
            c in -100.0f64..100.0,
        ) {
            let p = softmax_row(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert_eq!(argmax(&p), argmax(&v));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax_row(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
