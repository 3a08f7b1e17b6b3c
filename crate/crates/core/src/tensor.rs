use crate::scalar::{gemm, MatRef, Scalar};

/// Dense row-major matrix. Vectors are `1 × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length does not match shape"
        );
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// `rows × cols` one-hot matrix with a 1 at `(i, ids[i])`.
    pub fn one_hot(ids: &[usize], cols: usize) -> Self {
        let mut t = Self::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            t.data[i * cols + id] = S::one();
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn scalar(&self) -> S {
        assert_eq!(self.data.len(), 1, "not a scalar tensor");
        self.data[0]
    }

    pub fn view(&self) -> MatRef<'_, S> {
        MatRef::new(&self.data, self.rows, self.cols)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(
            S::one(),
            self.view(),
            other.view(),
            S::zero(),
            &mut out.data,
            0,
            other.cols,
        );
        out
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

    /// Index of the maximum entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows).map(|r| argmax(self.row(r))).collect()
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Lowest index among the maximal entries.
pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax<S: Scalar>(xs: &[S]) -> Vec<S> {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax<S: Scalar>(xs: &[S]) -> Vec<S> {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = m + xs.iter().map(|&x| (x - m).exp()).sum::<S>().ln();
    xs.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::<f64>::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        assert_eq!(a.matmul(&b).data(), &[58., 64., 139., 154.]);
        assert_eq!(a.transpose().shape(), (3, 2));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2f64, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0f32, 1.0]), 0);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0f64, 2.0, 3.0]);
        let b = softmax(&[101.0f64, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let ls = log_softmax(&[1.0f64, 2.0, 3.0]);
        for (l, p) in ls.iter().zip(&a) {
            assert!((l.exp() - p).abs() < 1e-12);
        }
    }
}
