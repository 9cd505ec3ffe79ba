//! Allocation-free dense kernels for the small `d × d` systems solved once per
//! step. Matrices are row-major slices.

/// Largest tolerated 1-norm condition estimate of an implicit step matrix.
pub(crate) const CONDITION_LIMIT: f64 = 1e12;

/// In-place LU factorization with partial pivoting. Returns `false` on an
/// exactly zero pivot.
pub(crate) fn lu_factor(a: &mut [f64], piv: &mut [usize], n: usize) -> bool {
    for (i, p) in piv.iter_mut().enumerate().take(n) {
        *p = i;
    }
    for k in 0..n {
        let mut best = k;
        let mut best_abs = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > best_abs {
                best = i;
                best_abs = v;
            }
        }
        if best_abs == 0.0 || !best_abs.is_finite() {
            return false;
        }
        if best != k {
            for j in 0..n {
                a.swap(k * n + j, best * n + j);
            }
            piv.swap(k, best);
        }
        let pivot = a[k * n + k];
        for i in (k + 1)..n {
            let l = a[i * n + k] / pivot;
            a[i * n + k] = l;
            for j in (k + 1)..n {
                a[i * n + j] -= l * a[k * n + j];
            }
        }
    }
    true
}

/// Solves `A x = b` in place given the output of [`lu_factor`]. `tmp` has length `n`.
pub(crate) fn lu_solve(lu: &[f64], piv: &[usize], n: usize, b: &mut [f64], tmp: &mut [f64]) {
    for i in 0..n {
        tmp[i] = b[piv[i]];
    }
    for i in 0..n {
        let mut s = tmp[i];
        for j in 0..i {
            s -= lu[i * n + j] * tmp[j];
        }
        tmp[i] = s;
    }
    for i in (0..n).rev() {
        let mut s = tmp[i];
        for j in (i + 1)..n {
            s -= lu[i * n + j] * tmp[j];
        }
        tmp[i] = s / lu[i * n + i];
    }
    b[..n].copy_from_slice(&tmp[..n]);
}

pub(crate) fn norm1(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Exact `‖A⁻¹‖₁` from the factorization, one solve per column.
pub(crate) fn inverse_norm1(
    lu: &[f64],
    piv: &[usize],
    n: usize,
    col: &mut [f64],
    tmp: &mut [f64],
) -> f64 {
    let mut best = 0.0_f64;
    for j in 0..n {
        col[..n].iter_mut().for_each(|c| *c = 0.0);
        col[j] = 1.0;
        lu_solve(lu, piv, n, col, tmp);
        best = best.max(col[..n].iter().map(|c| c.abs()).sum());
    }
    best
}

/// `out = A x` for row-major `A` (`rows × cols`).
pub(crate) fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        out[i] = row.iter().zip(x).map(|(a, x)| a * x).sum();
    }
}

/// Pairwise sum with a shape that depends only on `values.len()`.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}
