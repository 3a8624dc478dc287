use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::real::Real;

/// Row-major matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Use the transpose of the stored matrix.
    pub trans: bool,
}

impl<'a, T: Real> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize, trans: bool) -> Self {
        Self {
            data,
            rows,
            cols,
            trans,
        }
    }

    fn view(&self) -> ArrayView2<'a, T> {
        let v =
            ArrayView2::from_shape((self.rows, self.cols), self.data).expect("matrix buffer matches its dimensions");
        if self.trans {
            v.reversed_axes()
        } else {
            v
        }
    }
}

/// `out = beta * out + op(a) * op(b)` with `out` row-major of shape `m x n`.
pub(crate) fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], beta: T) {
    let av = a.view();
    let bv = b.view();
    let (m, n) = (av.nrows(), bv.ncols());
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("output buffer matches m x n");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}
