//! Dense f64 vectors and matrices plus the handful of numerically careful
//! reductions the losses are built on.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput)?.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * first);
        for row in rows {
            let row = row.as_ref();
            if row.len() != first {
                return Err(Error::DimMismatch {
                    expected: first,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), first, data)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.row_iter().map(<[f64]>::to_vec).collect()
    }

    /// `out = self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|row| dot(row, x)).collect()
    }

    /// `out = selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yr) in self.row_iter().zip(y) {
            axpy(yr, row, &mut out);
        }
        out
    }

    /// `self += alpha · y xᵀ`.
    pub fn add_outer(&mut self, alpha: f64, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (row, &yr) in self.data.chunks_exact_mut(cols).zip(y) {
            axpy(alpha * yr, x, row);
        }
    }

    /// Gram matrix of row inner products, `self · otherᵀ`.
    pub fn inner_products(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != other.cols {
            return Err(Error::DimMismatch {
                expected: self.cols,
                actual: other.cols,
            });
        }
        let mut out = RealMatrix::zeros(self.rows, other.rows);
        for (i, a) in self.row_iter().enumerate() {
            for (j, b) in other.row_iter().enumerate() {
                out.data[i * other.rows + j] = dot(a, b);
            }
        }
        Ok(out)
    }

    pub fn select_rows(&self, indices: &[usize]) -> RealMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        RealMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Serialize for RealMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.row_iter())
    }
}

impl<'de> Deserialize<'de> for RealMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(deserializer)?;
        RealMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Scales `v` to unit L2 norm.
pub fn l2_normalize(v: &RealVector) -> Result<RealVector> {
    normalize_slice(v.as_slice()).map(RealVector)
}

pub(crate) fn normalize_slice(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= ZERO_NORM_EPS) {
        return Err(Error::ZeroNorm(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine of the angle between `a` and `b`, clamped to [-1, 1].
pub fn cosine_similarity(a: &RealVector, b: &RealVector) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na >= ZERO_NORM_EPS) {
        return Err(Error::ZeroNorm(na));
    }
    if !(nb >= ZERO_NORM_EPS) {
        return Err(Error::ZeroNorm(nb));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `log Σ exp(xᵢ)` evaluated with a max shift.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(logsumexp_nonempty(xs.iter().copied()))
}

pub(crate) fn logsumexp_nonempty(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = xs.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `xs` into `out`.
pub(crate) fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> RealVector {
        RealVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn normalize_pythagorean() {
        let n = l2_normalize(&v(&[3.0, 4.0])).unwrap();
        assert_eq!(n.as_slice(), &[0.6, 0.8]);
        let e = l2_normalize(&v(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(e.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_is_error() {
        assert!(matches!(l2_normalize(&v(&[0.0, 0.0])), Err(Error::ZeroNorm(_))));
        assert!(matches!(l2_normalize(&v(&[1e-13, 0.0])), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -2.0, 5.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // dot / (|a||b|) = 1 / sqrt(2)
        let oracle = 1.0 / (2.0f64.sqrt() * 1.0);
        let got = cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])),
            Err(Error::DimMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[0.0]).unwrap(), 0.0);
        let c = -3.25;
        let got = logsumexp(&[c; 7]).unwrap();
        assert!((got - (c + 7.0f64.ln())).abs() < 1e-12);
        // naive evaluation after subtracting 1000 by hand
        let shifted = 1000.0 + ((0.0f64).exp() + (0.0f64).exp()).ln();
        let got = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!(got.is_finite());
        assert!((got - shifted).abs() < 1e-12);
        assert!(matches!(logsumexp(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn matrix_rejects_bad_shapes() {
        assert!(RealMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(RealMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(RealMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn matvec_and_transpose_agree_with_loops() {
        let m = RealMatrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64 - 1.5);
        let x = [0.5, -2.0];
        let y = [1.0, 2.0, -1.0];
        let mx = m.matvec(&x);
        for r in 0..3 {
            assert_eq!(mx[r], m.get(r, 0) * x[0] + m.get(r, 1) * x[1]);
        }
        let mty = m.matvec_t(&y);
        for c in 0..2 {
            let want: f64 = (0..3).map(|r| m.get(r, c) * y[r]).sum();
            assert!((mty[c] - want).abs() < 1e-15);
        }
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..12).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(xs in nonzero_vec()) {
            let once = l2_normalize(&RealVector::new(xs).unwrap()).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((once.norm() - 1.0).abs() < 1e-12);
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            (a, b) in (2usize..10).prop_flat_map(|d| (
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
            )).prop_filter("nonzero", |(a, b)| norm(a) > 1e-3 && norm(b) > 1e-3),
            alpha in 0.01f64..100.0,
        ) {
            let va = RealVector::new(a.clone()).unwrap();
            let vb = RealVector::new(b).unwrap();
            let ab = cosine_similarity(&va, &vb).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&vb, &va).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
            let scaled = RealVector::new(a.iter().map(|x| alpha * x).collect()).unwrap();
            prop_assert!((cosine_similarity(&scaled, &vb).unwrap() - ab).abs() < 1e-12);
        }

        #[test]
        fn logsumexp_bounds(xs in prop::collection::vec(-700.0f64..700.0, 1..50)) {
            let lse = logsumexp(&xs).unwrap();
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max);
            prop_assert!(lse <= max + (xs.len() as f64).ln() + 1e-12);
        }
    }
}
