use super::Real;

/// Operand layout for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    /// Row-major as stored.
    Normal,
    /// The stored row-major matrix is the transpose of the operand.
    Transposed,
}

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n` (all row-major
/// after applying the layouts).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    a_layout: Layout,
    b: &[Real],
    b_layout: Layout,
    c: &mut [Real],
    beta: Real,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above bound every index the strides can reach.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[Real], b: &[Real]) -> Vec<Real> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[Real]) -> Vec<Real> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn layouts_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<Real> = (0..m * k).map(|i| i as Real * 0.5 - 2.0).collect();
        let b: Vec<Real> = (0..k * n).map(|i| (i % 7) as Real - 3.0).collect();
        let expected = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::Normal, &b, Layout::Normal, &mut c, 0.0);
        assert_eq!(c, expected);

        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, &at, Layout::Transposed, &bt, Layout::Transposed, &mut c, 1.0);
        let shifted: Vec<Real> = expected.iter().map(|v| v + 1.0).collect();
        assert_eq!(c, shifted);
    }
}
