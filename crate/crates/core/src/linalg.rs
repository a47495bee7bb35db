//! Small dense linear-algebra kernel used throughout the crate: LU with
//! partial pivoting, triangular solves, inverses, rank, and a few vector
//! helpers. Systems here are tiny (rarely above 50x50), so everything is
//! plain row-major `Vec<f64>` with no blocking.

/// LU factors of a square matrix, P*A = L*U with partial pivoting.
pub(crate) struct Lu {
    n: usize,
    /// Packed factors, row-major: L below the diagonal (unit diagonal
    /// implied), U on and above.
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    pub(crate) singular: bool,
}

impl Lu {
    /// Factors `a` (row-major, `n` x `n`). A pivot is treated as zero when
    /// its magnitude is at most `tol * max(1, scale)`.
    pub(crate) fn factor(a: &[f64], n: usize, tol: f64) -> Lu {
        debug_assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cutoff = tol * scale.max(1.0);
        let mut singular = false;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in (k + 1)..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best <= cutoff {
                singular = true;
                break;
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let piv = lu[k * n + k];
            for r in (k + 1)..n {
                let f = lu[r * n + k] / piv;
                lu[r * n + k] = f;
                for c in (k + 1)..n {
                    lu[r * n + c] -= f * lu[k * n + c];
                }
            }
        }
        Lu { n, lu, perm, sign, singular }
    }

    #[allow(dead_code)]
    pub(crate) fn det(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        let mut d = self.sign;
        for k in 0..self.n {
            d *= self.lu[k * self.n + k];
        }
        d
    }

    /// Cheap conditioning estimate: ratio of extreme |U_kk|. A true condition
    /// number is not needed; this only has to catch basis blow-ups.
    pub(crate) fn diag_cond(&self) -> f64 {
        if self.n == 0 {
            return 1.0;
        }
        if self.singular {
            return f64::INFINITY;
        }
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for k in 0..self.n {
            let v = self.lu[k * self.n + k].abs();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Solves A x = b.
    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert!(!self.singular);
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|i| b[self.perm[i]]).collect();
        for k in 0..n {
            for r in (k + 1)..n {
                x[r] -= self.lu[r * n + k] * x[k];
            }
        }
        for k in (0..n).rev() {
            for c in (k + 1)..n {
                let t = self.lu[k * n + c] * x[c];
                x[k] -= t;
            }
            x[k] /= self.lu[k * n + k];
        }
        x
    }

    /// Solves A^T x = b.
    pub(crate) fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        debug_assert!(!self.singular);
        let n = self.n;
        let mut y = b.to_vec();
        // U^T forward solve.
        for k in 0..n {
            for r in 0..k {
                let t = self.lu[r * n + k] * y[r];
                y[k] -= t;
            }
            y[k] /= self.lu[k * n + k];
        }
        // L^T backward solve.
        for k in (0..n).rev() {
            for r in (k + 1)..n {
                let t = self.lu[r * n + k] * y[r];
                y[k] -= t;
            }
        }
        // Undo the row permutation: we solved (PA)^T z = ... with b already in
        // original order, so scatter through perm.
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.perm[i]] = y[i];
        }
        x
    }

    /// Explicit inverse, column by column.
    pub(crate) fn inverse(&self) -> Vec<Vec<f64>> {
        let n = self.n;
        let mut inv = vec![vec![0.0; n]; n];
        let mut e = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            let col = self.solve(&e);
            e[c] = 0.0;
            for r in 0..n {
                inv[r][c] = col[r];
            }
        }
        inv
    }
}

/// Rank of an m x n matrix via Gaussian elimination with full pivoting.
pub(crate) fn rank(rows: &[Vec<f64>], tol: f64) -> usize {
    let m = rows.len();
    if m == 0 {
        return 0;
    }
    let n = rows[0].len();
    let mut a: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let cutoff = tol * scale.max(1.0);
    let mut rank = 0;
    let mut row_used = vec![false; m];
    let mut col_used = vec![false; n];
    loop {
        let mut best = 0.0;
        let mut pr = usize::MAX;
        let mut pc = usize::MAX;
        for r in 0..m {
            if row_used[r] {
                continue;
            }
            for c in 0..n {
                if col_used[c] {
                    continue;
                }
                let v = a[r * n + c].abs();
                if v > best {
                    best = v;
                    pr = r;
                    pc = c;
                }
            }
        }
        if best <= cutoff {
            break;
        }
        rank += 1;
        row_used[pr] = true;
        col_used[pc] = true;
        let piv = a[pr * n + pc];
        for r in 0..m {
            if row_used[r] {
                continue;
            }
            let f = a[r * n + pc] / piv;
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                a[r * n + c] -= f * a[pr * n + c];
            }
        }
    }
    rank
}

/// Solves the (possibly overdetermined) system `rows * x = rhs` exactly:
/// returns `None` when the columns are rank-deficient or the system is
/// inconsistent beyond `tol` (scaled by the data magnitude).
pub(crate) fn solve_exact(rows: &[Vec<f64>], rhs: &[f64], tol: f64) -> Option<Vec<f64>> {
    let m = rows.len();
    debug_assert_eq!(m, rhs.len());
    let n = if m == 0 { 0 } else { rows[0].len() };
    if n == 0 {
        let scale = rhs.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        return if rhs.iter().all(|v| v.abs() <= tol * scale) { Some(vec![]) } else { None };
    }
    // Eliminate with partial pivoting on the augmented system.
    let w = n + 1;
    let mut a: Vec<f64> = Vec::with_capacity(m * w);
    for (r, row) in rows.iter().enumerate() {
        a.extend(row.iter().copied());
        a.push(rhs[r]);
    }
    let scale = a.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let cutoff = tol * scale;
    let mut piv_row_of_col: Vec<Option<usize>> = vec![None; n];
    let mut next_row = 0;
    for c in 0..n {
        let mut best = 0.0;
        let mut pr = usize::MAX;
        for r in next_row..m {
            let v = a[r * w + c].abs();
            if v > best {
                best = v;
                pr = r;
            }
        }
        if best <= cutoff {
            continue;
        }
        for k in 0..w {
            a.swap(next_row * w + k, pr * w + k);
        }
        let piv = a[next_row * w + c];
        for r in 0..m {
            if r == next_row {
                continue;
            }
            let f = a[r * w + c] / piv;
            if f == 0.0 {
                continue;
            }
            for k in 0..w {
                a[r * w + k] -= f * a[next_row * w + k];
            }
        }
        piv_row_of_col[c] = Some(next_row);
        next_row += 1;
        if next_row == m {
            break;
        }
    }
    // Full column rank required for a unique representation.
    if piv_row_of_col.iter().any(|p| p.is_none()) {
        return None;
    }
    // Remaining rows must have vanished entirely, including the rhs.
    for r in next_row..m {
        if a[r * w + n].abs() > cutoff {
            return None;
        }
    }
    let mut x = vec![0.0; n];
    for c in 0..n {
        let r = piv_row_of_col[c].unwrap();
        x[c] = a[r * w + n] / a[r * w + c];
    }
    // Verify against the original rows (the elimination above can hide
    // inconsistencies when pivots were skipped).
    for (r, row) in rows.iter().enumerate() {
        let res: f64 = dot(row, &x) - rhs[r];
        if res.abs() > tol * scale * 10.0 {
            return None;
        }
    }
    Some(x)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn mat_vec(rows: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| dot(r, x)).collect()
}

/// y^T * rows for row-major `rows`.
pub(crate) fn vec_mat(y: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let n = if rows.is_empty() { 0 } else { rows[0].len() };
    let mut out = vec![0.0; n];
    for (yi, row) in y.iter().zip(rows) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += yi * v;
        }
    }
    out
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(crate) fn frobenius(rows: &[Vec<f64>]) -> f64 {
    rows.iter().map(|r| dot(r, r)).sum::<f64>().sqrt()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        let a = vec![2.0, 1.0, 1.0, 3.0];
        let lu = Lu::factor(&a, 2, 1e-12);
        assert!(!lu.singular);
        let x = lu.solve(&[3.0, 5.0]);
        assert!((x[0] - 0.8).abs() < 1e-12);
        assert!((x[1] - 1.4).abs() < 1e-12);
        let xt = lu.solve_transpose(&[1.0, 0.0]);
        // A^T xt = e1 -> xt = first column of A^{-T}.
        assert!((2.0 * xt[0] + 1.0 * xt[1] - 1.0).abs() < 1e-12);
        assert!((1.0 * xt[0] + 3.0 * xt[1]).abs() < 1e-12);
        assert!((lu.det() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn lu_flags_singular() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        let lu = Lu::factor(&a, 2, 1e-10);
        assert!(lu.singular);
        assert_eq!(lu.det(), 0.0);
    }

    #[test]
    fn inverse_matches_identity() {
        let a = vec![1.0, 2.0, 0.0, -1.0, 0.0, 3.0, 2.0, 1.0, 1.0];
        let lu = Lu::factor(&a, 3, 1e-12);
        let inv = lu.inverse();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * inv[k][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_detects_dependent_rows() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![0.0, 1.0]];
        assert_eq!(rank(&rows, 1e-10), 2);
        assert_eq!(rank(&[vec![0.0, 0.0]], 1e-10), 0);
    }

    #[test]
    fn solve_exact_checks_consistency() {
        // Overdetermined but consistent.
        let rows = vec![vec![1.0], vec![2.0]];
        let x = solve_exact(&rows, &[3.0, 6.0], 1e-9).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-12);
        // Inconsistent.
        assert!(solve_exact(&rows, &[3.0, 7.0], 1e-9).is_none());
    }
}
