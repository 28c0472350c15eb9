/// Strided row/column view of a dense matrix.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }
}

/// `c = beta * c + a * b` with `a: m x k`, `b: k x n`, `c` row-major `m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    let max_index = |v: &View<'_>, r: usize, cl: usize| if r == 0 || cl == 0 { 0 } else { (r - 1) * v.rs + (cl - 1) * v.cs };
    assert!(m == 0 || k == 0 || max_index(&a, m, k) < a.data.len());
    assert!(k == 0 || n == 0 || max_index(&b, k, n) < b.data.len());
    // SAFETY: bounds of every accessed element are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
