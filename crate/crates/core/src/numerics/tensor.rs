use super::Real;
use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Tensor2<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor2 { rows, cols, data }
    }

    pub fn row_vector(values: &[R]) -> Self {
        Tensor2 {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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
    pub fn data(&self) -> &[R] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: R) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [R] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: R) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<S: Real>(&self) -> Tensor2<S> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
        }
    }

    pub fn view(&self) -> MatRef<'_, R> {
        MatRef {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> MatMut<'_, R> {
        MatMut {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
            data: &mut self.data,
        }
    }

    /// Column block `[start, start + width)` as a strided view.
    pub fn cols_view(&self, start: usize, width: usize) -> MatRef<'_, R> {
        assert!(start + width <= self.cols);
        MatRef {
            data: &self.data[start.min(self.data.len())..],
            rows: self.rows,
            cols: width,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn cols_view_mut(&mut self, start: usize, width: usize) -> MatMut<'_, R> {
        assert!(start + width <= self.cols);
        let rs = self.cols as isize;
        let offset = start.min(self.data.len());
        MatMut {
            rows: self.rows,
            cols: width,
            rs,
            cs: 1,
            data: &mut self.data[offset..],
        }
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor2<R>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Borrowed strided matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, R> {
    data: &'a [R],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, R: Real> MatRef<'a, R> {
    pub fn new(data: &'a [R], rows: usize, cols: usize, rs: isize, cs: isize) -> Self {
        let m = MatRef {
            data,
            rows,
            cols,
            rs,
            cs,
        };
        m.check();
        m
    }

    #[inline]
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
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
    pub fn at(&self, r: usize, c: usize) -> R {
        self.data[r * self.rs as usize + c * self.cs as usize]
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = (self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs;
        assert!(
            self.rs >= 0 && self.cs >= 0 && (last as usize) < self.data.len(),
            "strided view out of bounds"
        );
    }
}

/// Mutable strided matrix.
#[derive(Debug)]
pub struct MatMut<'a, R> {
    data: &'a mut [R],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, R: Real> MatMut<'a, R> {
    pub fn new(data: &'a mut [R], rows: usize, cols: usize, rs: isize, cs: isize) -> Self {
        let m = MatMut {
            data,
            rows,
            cols,
            rs,
            cs,
        };
        m.check();
        m
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = (self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs;
        assert!(
            self.rs >= 0 && self.cs >= 0 && (last as usize) < self.data.len(),
            "strided view out of bounds"
        );
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<R: Real>(alpha: R, a: MatRef<'_, R>, b: MatRef<'_, R>, beta: R, c: MatMut<'_, R>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above; `c` is a unique borrow so it
    // cannot alias the shared borrows behind `a` and `b`.
    unsafe {
        R::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.rs,
            c.cs,
        );
    }
}

/// `a * bᵀ` for row-major operands.
pub fn matmul_nt<R: Real>(a: &Tensor2<R>, b: &Tensor2<R>) -> Tensor2<R> {
    let mut out = Tensor2::zeros(a.rows(), b.rows());
    gemm(R::one(), a.view(), b.view().t(), R::zero(), out.view_mut());
    out
}

/// `a * b` for row-major operands.
pub fn matmul<R: Real>(a: &Tensor2<R>, b: &Tensor2<R>) -> Tensor2<R> {
    let mut out = Tensor2::zeros(a.rows(), b.cols());
    gemm(R::one(), a.view(), b.view(), R::zero(), out.view_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = Tensor2::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 2.0);
        let b = Tensor2::<f64>::from_fn(5, 4, |r, c| ((r + 2 * c) % 7) as f64 - 3.0);
        let c = matmul_nt(&a, &b);
        for i in 0..3 {
            for j in 0..5 {
                let expect: f64 = (0..4).map(|k| a.get(i, k) * b.get(j, k)).sum();
                assert_eq!(c.get(i, j), expect);
            }
        }
    }

    #[test]
    fn column_block_views_are_strided() {
        let w = Tensor2::<f32>::from_fn(2, 5, |r, c| (10 * r + c) as f32);
        let v = w.cols_view(3, 2);
        assert_eq!(v.at(0, 0), 3.0);
        assert_eq!(v.at(1, 1), 14.0);
        assert_eq!(v.t().at(1, 1), 14.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor2::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
