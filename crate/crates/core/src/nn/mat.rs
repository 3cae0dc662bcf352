/// Dense row-major `f64` matrix.
///
/// Every product accumulates each output element over the shared dimension
/// in ascending index order, independent of how many rows the operands
/// have. Row-wise results are therefore bit-identical whether or not other
/// rows are present, which the marker-invisibility guarantee relies on.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: {rows}x{cols} != {}", data.len());
        Mat { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Mat::from_vec(1, cols, data)
    }

    pub fn scalar(value: f64) -> Self {
        Mat::from_vec(1, 1, vec![value])
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · b`
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul shape");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in o.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    /// `self · b[row_start..]ᵀ`
    pub fn matmul_nt(&self, b: &Mat, row_start: usize) -> Mat {
        assert_eq!(self.cols, b.cols, "matmul_nt shape");
        let n = b.rows - row_start;
        let mut out = Mat::zeros(self.rows, n);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..n {
                out.data[i * n + j] = dot(a_row, b.row(row_start + j));
            }
        }
        out
    }

    /// `selfᵀ · b`
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows, "matmul_tn shape");
        let mut out = Mat::zeros(self.cols, b.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = b.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (o, &bv) in o.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for x in &mut self.data {
            *x *= c;
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree() {
        let a = Mat::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Mat::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let ab = a.matmul(&b);
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        let bt = Mat::from_vec(2, 3, vec![7., 9., 11., 8., 10., 12.]);
        assert_eq!(a.matmul_nt(&bt, 0), ab);
        assert_eq!(a.matmul_nt(&bt, 1).data(), &[64., 154.]);
        let at = Mat::from_vec(3, 2, vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(at.matmul_tn(&b), ab);
    }

    #[test]
    fn row_results_do_not_depend_on_other_rows() {
        let a = Mat::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let b = Mat::from_vec(4, 5, (0..20).map(|i| (i as f64 * 0.11).cos()).collect());
        let full = a.matmul(&b);
        let first = Mat::from_vec(1, 4, a.row(0).to_vec()).matmul(&b);
        assert_eq!(full.row(0), first.row(0));
    }
}
