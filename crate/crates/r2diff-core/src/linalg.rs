//! Minimal row-major matrix type backing the denoiser.

use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self * b
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut out = Mat::zeros(self.rows, b.cols);
        gemm(
            self.rows,
            self.cols,
            b.cols,
            &self.data,
            self.cols as isize,
            1,
            &b.data,
            b.cols as isize,
            1,
            &mut out.data,
        );
        out
    }

    /// self * bᵀ
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols);
        let mut out = Mat::zeros(self.rows, b.rows);
        gemm(
            self.rows,
            self.cols,
            b.rows,
            &self.data,
            self.cols as isize,
            1,
            &b.data,
            1,
            b.cols as isize,
            &mut out.data,
        );
        out
    }

    /// selfᵀ * b
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows);
        let mut out = Mat::zeros(self.cols, b.cols);
        gemm(
            self.cols,
            self.rows,
            b.cols,
            &self.data,
            1,
            self.cols as isize,
            &b.data,
            b.cols as isize,
            1,
            &mut out.data,
        );
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for l in 0..a.cols {
                    s += a.at(i, l) * b.at(l, j);
                }
                *out.at_mut(i, j) = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Mat::from_vec(3, 4, (0..12).map(|x| x as f64 * 0.3 - 1.0).collect());
        let b = Mat::from_vec(4, 2, (0..8).map(|x| (x as f64).sin()).collect());
        let c = a.matmul(&b);
        let r = naive(&a, &b);
        for (x, y) in c.data.iter().zip(r.data.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants() {
        let a = Mat::from_vec(3, 4, (0..12).map(|x| x as f64 * 0.1).collect());
        let b = Mat::from_vec(5, 4, (0..20).map(|x| (x as f64).cos()).collect());
        let nt = a.matmul_nt(&b);
        assert_eq!((nt.rows, nt.cols), (3, 5));
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for l in 0..4 {
                    s += a.at(i, l) * b.at(j, l);
                }
                assert!((nt.at(i, j) - s).abs() < 1e-12);
            }
        }

        let c = Mat::from_vec(3, 2, (0..6).map(|x| x as f64 - 2.5).collect());
        let tn = a.matmul_tn(&c);
        assert_eq!((tn.rows, tn.cols), (4, 2));
        for i in 0..4 {
            for j in 0..2 {
                let mut s = 0.0;
                for l in 0..3 {
                    s += a.at(l, i) * c.at(l, j);
                }
                assert!((tn.at(i, j) - s).abs() < 1e-12);
            }
        }
    }
}
