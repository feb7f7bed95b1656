//! Bounds-checked strided matrix multiply on top of `matrixmultiply`.

#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    /// Contiguous row-major `rows x cols` view starting at `off`.
    pub fn rows(data: &'a [f64], off: usize, cols: usize) -> Self {
        Self {
            data,
            off,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a contiguous row-major matrix with `cols` columns.
    pub fn t(data: &'a [f64], off: usize, cols: usize) -> Self {
        Self {
            data,
            off,
            rs: 1,
            cs: cols,
        }
    }

    pub fn strided(data: &'a [f64], off: usize, rs: usize, cs: usize) -> Self {
        Self { data, off, rs, cs }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "gemm operand out of bounds");
    }
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn rows(data: &'a mut [f64], off: usize, cols: usize) -> Self {
        Self {
            data,
            off,
            rs: cols,
            cs: 1,
        }
    }

    pub fn strided(data: &'a mut [f64], off: usize, rs: usize, cs: usize) -> Self {
        Self { data, off, rs, cs }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c(m x n)`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat, b: Mat, beta: f64, c: MatMut) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c.off + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(last < c.data.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[c.off + i * c.rs + j * c.cs];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm lies within the bounds checked above
    // and the output slice is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3x2
        let mut c = vec![0.0; 4];
        gemm(
            2,
            3,
            2,
            1.0,
            Mat::rows(&a, 0, 3),
            Mat::rows(&b, 0, 2),
            0.0,
            MatMut::rows(&mut c, 0, 2),
        );
        let mut naive = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    naive[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        assert_eq!(c, naive);

        // a^T (3x2) * a (2x3) via transposed view
        let mut g = vec![0.0; 9];
        gemm(
            3,
            2,
            3,
            1.0,
            Mat::t(&a, 0, 3),
            Mat::rows(&a, 0, 3),
            0.0,
            MatMut::rows(&mut g, 0, 3),
        );
        assert_eq!(g[0], 1.0 * 1.0 + 4.0 * 4.0);
        assert_eq!(g[5], 2.0 * 3.0 + 5.0 * 6.0);
    }
}
