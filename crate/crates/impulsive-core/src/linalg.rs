//! Small dense linear algebra kernels used across the crate.
//!
//! Everything here works on plain `f64` slices in row-major layout. The
//! problems in this crate are small (tens to a few hundred unknowns), so
//! simple dense algorithms with partial or column pivoting are accurate
//! enough and keep the dependency surface flat.

use thiserror::Error;

/// Error from a linear algebra routine.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinalgError {
    /// Dimensions of the supplied operands do not match.
    #[error("dimension mismatch: {0}")]
    Shape(String),
    /// An iterative routine failed to converge within its iteration cap.
    #[error("iteration limit reached in {0}")]
    IterationLimit(&'static str),
}

/// Euclidean inner product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Sum of absolute values.
pub fn norm1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

/// Largest absolute entry, `0` for an empty slice.
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Dense row-major matrix-vector product `y = A x`.
pub fn mat_vec(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(x.len(), cols);
    assert_eq!(y.len(), rows);
    for r in 0..rows {
        y[r] = dot(&a[r * cols..(r + 1) * cols], x);
    }
}

/// Least-squares solution of `A x ~ b` via Householder QR with column
/// pivoting.
///
/// For rank-deficient systems the solve is truncated at diagonal entries
/// below `1e-12` times the largest one and the free components are set to
/// zero, giving a basic solution.
pub fn lstsq(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if a.len() != rows * cols || b.len() != rows {
        return Err(LinalgError::Shape(format!(
            "lstsq: matrix {}x{} with {} entries, rhs {}",
            rows,
            cols,
            a.len(),
            b.len()
        )));
    }
    let mut r = a.to_vec();
    let mut rhs = b.to_vec();
    let mut perm: Vec<usize> = (0..cols).collect();
    let steps = rows.min(cols);
    let mut col_norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| r[i * cols + j].powi(2)).sum::<f64>())
        .collect();
    for k in 0..steps {
        // Pivot the column with the largest remaining norm to position k.
        let (jmax, _) = col_norms
            .iter()
            .enumerate()
            .skip(k)
            .fold((k, -1.0), |(bj, bv), (j, v)| {
                if *v > bv {
                    (j, *v)
                } else {
                    (bj, bv)
                }
            });
        if jmax != k {
            perm.swap(k, jmax);
            col_norms.swap(k, jmax);
            for i in 0..rows {
                r.swap(i * cols + k, i * cols + jmax);
            }
        }
        // Householder reflector for column k below row k.
        let alpha = {
            let mut s = 0.0;
            for i in k..rows {
                s += r[i * cols + k].powi(2);
            }
            s.sqrt()
        };
        if alpha == 0.0 {
            continue;
        }
        let sign = if r[k * cols + k] >= 0.0 { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = (k..rows).map(|i| r[i * cols + k]).collect();
        v[0] += sign * alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..cols {
            let mut proj = 0.0;
            for (off, vi) in v.iter().enumerate() {
                proj += vi * r[(k + off) * cols + j];
            }
            let scale = 2.0 * proj / vnorm2;
            for (off, vi) in v.iter().enumerate() {
                r[(k + off) * cols + j] -= scale * vi;
            }
        }
        let mut proj = 0.0;
        for (off, vi) in v.iter().enumerate() {
            proj += vi * rhs[k + off];
        }
        let scale = 2.0 * proj / vnorm2;
        for (off, vi) in v.iter().enumerate() {
            rhs[k + off] -= scale * vi;
        }
        for (j, norm) in col_norms.iter_mut().enumerate().skip(k + 1) {
            *norm -= r[k * cols + j].powi(2);
            if *norm < 0.0 {
                *norm = 0.0;
            }
        }
    }
    let diag_max = (0..steps)
        .map(|k| r[k * cols + k].abs())
        .fold(0.0f64, f64::max);
    let cutoff = 1e-12 * diag_max;
    let mut rank = 0;
    while rank < steps && r[rank * cols + rank].abs() > cutoff {
        rank += 1;
    }
    let mut z = vec![0.0; cols];
    for k in (0..rank).rev() {
        let mut s = rhs[k];
        for j in k + 1..rank {
            s -= r[k * cols + j] * z[j];
        }
        z[k] = s / r[k * cols + k];
    }
    let mut x = vec![0.0; cols];
    for (k, zk) in z.iter().enumerate() {
        x[perm[k]] = *zk;
    }
    Ok(x)
}

/// Nonnegative least squares: minimizes `|A x - b|` subject to `x >= 0`
/// using the active-set method of Lawson and Hanson.
pub fn nnls(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if a.len() != rows * cols || b.len() != rows {
        return Err(LinalgError::Shape(format!(
            "nnls: matrix {}x{} with {} entries, rhs {}",
            rows,
            cols,
            a.len(),
            b.len()
        )));
    }
    let mut x = vec![0.0; cols];
    let mut passive = vec![false; cols];
    let mut residual = b.to_vec();
    let scale = norm_inf(b).max(1.0) * norm_inf(a).max(1.0);
    let tol = 1e-12 * scale;
    let max_outer = 3 * cols.max(1);
    for _ in 0..max_outer {
        // Gradient of the residual with respect to each inactive variable.
        let mut best = (usize::MAX, tol);
        for j in 0..cols {
            if passive[j] {
                continue;
            }
            let w: f64 = (0..rows).map(|i| a[i * cols + j] * residual[i]).sum();
            if w > best.1 {
                best = (j, w);
            }
        }
        if best.0 == usize::MAX {
            return Ok(x);
        }
        passive[best.0] = true;
        loop {
            let idx: Vec<usize> = (0..cols).filter(|j| passive[*j]).collect();
            let mut sub = vec![0.0; rows * idx.len()];
            for i in 0..rows {
                for (c, j) in idx.iter().enumerate() {
                    sub[i * idx.len() + c] = a[i * cols + j];
                }
            }
            let z = lstsq(&sub, rows, idx.len(), b)?;
            if z.iter().all(|v| *v > 0.0) {
                for (c, j) in idx.iter().enumerate() {
                    x[*j] = z[c];
                }
                break;
            }
            // Step toward z only as far as feasibility allows, then drop
            // the variables that hit zero.
            let mut alpha = f64::INFINITY;
            for (c, j) in idx.iter().enumerate() {
                if z[c] <= 0.0 {
                    let denom = x[*j] - z[c];
                    if denom > 0.0 {
                        alpha = alpha.min(x[*j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (c, j) in idx.iter().enumerate() {
                x[*j] += alpha * (z[c] - x[*j]);
                if z[c] <= 0.0 && x[*j] <= 1e-14 * scale.max(1.0) {
                    x[*j] = 0.0;
                    passive[*j] = false;
                }
            }
        }
        for i in 0..rows {
            residual[i] = b[i] - dot(&a[i * cols..(i + 1) * cols], &x);
        }
    }
    Err(LinalgError::IterationLimit("nnls"))
}

/// A linear feasibility problem with equality rows, upper-bound rows and
/// per-variable bounds (`f64::NEG_INFINITY` / `f64::INFINITY` mark absent
/// bounds).
#[derive(Debug, Clone, Default)]
pub struct LpProblem {
    pub num_vars: usize,
    /// Rows `a . x = b`.
    pub eq: Vec<(Vec<f64>, f64)>,
    /// Rows `a . x <= b`.
    pub ub: Vec<(Vec<f64>, f64)>,
    /// Per-variable `(lower, upper)`; empty means all variables free.
    pub bounds: Vec<(f64, f64)>,
}

/// Outcome of a feasibility solve.
#[derive(Debug, Clone)]
pub enum LpStatus {
    /// A point satisfying every constraint up to the solver tolerance.
    Feasible(Vec<f64>),
    /// No feasible point; carries the minimized phase-one infeasibility.
    Infeasible { residual: f64 },
}

/// Decides feasibility of `p` with a phase-one primal simplex using
/// Bland's anti-cycling rule.
///
/// `tol` bounds the acceptable leftover infeasibility: a phase-one
/// objective at or below `tol` counts as feasible.
pub fn lp_feasible(p: &LpProblem, tol: f64) -> Result<LpStatus, LinalgError> {
    let n = p.num_vars;
    for (row, _) in p.eq.iter().chain(p.ub.iter()) {
        if row.len() != n {
            return Err(LinalgError::Shape(format!(
                "lp row has {} entries, expected {}",
                row.len(),
                n
            )));
        }
    }
    if !p.bounds.is_empty() && p.bounds.len() != n {
        return Err(LinalgError::Shape(format!(
            "lp has {} bounds for {} variables",
            p.bounds.len(),
            n
        )));
    }
    let free = (f64::NEG_INFINITY, f64::INFINITY);
    let bound = |j: usize| -> (f64, f64) {
        if p.bounds.is_empty() {
            free
        } else {
            p.bounds[j]
        }
    };

    // Standard-form translation: every variable becomes one or two
    // nonnegative columns plus a constant offset; range bounds add an
    // extra upper-bound row on the shifted variable.
    struct Col {
        var: usize,
        sign: f64,
    }
    let mut cols: Vec<Col> = Vec::new();
    let mut offset = vec![0.0; n];
    let mut extra_ub: Vec<(usize, f64)> = Vec::new(); // (column, cap)
    for j in 0..n {
        let (lo, hi) = bound(j);
        if lo.is_finite() {
            offset[j] = lo;
            let c = cols.len();
            cols.push(Col { var: j, sign: 1.0 });
            if hi.is_finite() {
                extra_ub.push((c, hi - lo));
            }
        } else if hi.is_finite() {
            offset[j] = hi;
            cols.push(Col { var: j, sign: -1.0 });
        } else {
            cols.push(Col { var: j, sign: 1.0 });
            cols.push(Col { var: j, sign: -1.0 });
        }
    }
    let ns = cols.len();
    let n_slack = p.ub.len() + extra_ub.len();
    let m = p.eq.len() + p.ub.len() + extra_ub.len();
    let total = ns + n_slack + m; // structural + slack + artificial
    let mut tab = vec![0.0; m * (total + 1)];
    let width = total + 1;
    let write_row = |r: usize, row: Option<&[f64]>, slack: Option<usize>, rhs: f64, tab: &mut [f64]| {
        if let Some(row) = row {
            for (c, col) in cols.iter().enumerate() {
                tab[r * width + c] = row[col.var] * col.sign;
            }
        }
        if let Some(s) = slack {
            tab[r * width + ns + s] = 1.0;
        }
        tab[r * width + total] = rhs;
    };
    let mut r = 0;
    for (row, b) in &p.eq {
        let shifted = b - dot(row, &offset);
        write_row(r, Some(row), None, shifted, &mut tab);
        r += 1;
    }
    let mut slack = 0;
    for (row, b) in &p.ub {
        let shifted = b - dot(row, &offset);
        write_row(r, Some(row), Some(slack), shifted, &mut tab);
        r += 1;
        slack += 1;
    }
    for (c, cap) in &extra_ub {
        write_row(r, None, Some(slack), *cap, &mut tab);
        tab[r * width + c] = 1.0;
        r += 1;
        slack += 1;
    }
    // Make all right-hand sides nonnegative, then install artificials.
    for r in 0..m {
        if tab[r * width + total] < 0.0 {
            for c in 0..width {
                tab[r * width + c] = -tab[r * width + c];
            }
        }
        tab[r * width + ns + n_slack + r] = 1.0;
    }
    let mut basis: Vec<usize> = (0..m).map(|r| ns + n_slack + r).collect();

    // Phase-one objective row: minimize the sum of artificials. Stored as
    // reduced costs for the current basis.
    let mut obj = vec![0.0; width];
    for r in 0..m {
        for c in 0..width {
            obj[c] -= tab[r * width + c];
        }
    }
    for c in ns + n_slack..total {
        obj[c] += 1.0;
    }

    let max_iters = 50 * (m + total).max(20);
    for _ in 0..max_iters {
        // Bland's rule: first column with a negative reduced cost.
        let entering = (0..total).find(|c| obj[*c] < -1e-9);
        let Some(e) = entering else { break };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..m {
            let a = tab[r * width + e];
            if a > 1e-11 {
                let ratio = tab[r * width + total] / a;
                let better = match leave {
                    None => true,
                    Some((lr, lv)) => {
                        ratio < lv - 1e-12 || (ratio <= lv + 1e-12 && basis[r] < basis[lr])
                    }
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
        }
        let Some((lr, _)) = leave else {
            // Unbounded phase-one column cannot happen with artificials in
            // the basis; treat defensively as a stall.
            break;
        };
        let pivot = tab[lr * width + e];
        for c in 0..width {
            tab[lr * width + c] /= pivot;
        }
        for r in 0..m {
            if r == lr {
                continue;
            }
            let factor = tab[r * width + e];
            if factor != 0.0 {
                for c in 0..width {
                    tab[r * width + c] -= factor * tab[lr * width + c];
                }
            }
        }
        let factor = obj[e];
        if factor != 0.0 {
            for c in 0..width {
                obj[c] -= factor * tab[lr * width + c];
            }
        }
        basis[lr] = e;
    }

    let infeasibility: f64 = (0..m)
        .filter(|r| basis[*r] >= ns + n_slack)
        .map(|r| tab[r * width + total].max(0.0))
        .sum();
    if infeasibility > tol {
        return Ok(LpStatus::Infeasible {
            residual: infeasibility,
        });
    }
    let mut std_x = vec![0.0; total];
    for r in 0..m {
        std_x[basis[r]] = tab[r * width + total];
    }
    let mut x = offset;
    for (c, col) in cols.iter().enumerate() {
        x[col.var] += col.sign * std_x[c];
    }
    Ok(LpStatus::Feasible(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstsq_square_system() {
        let a = [2.0, 1.0, 1.0, 3.0];
        let b = [5.0, 10.0];
        let x = lstsq(&a, 2, 2, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lstsq_overdetermined() {
        // Fit y = 2x + 1 through exact points.
        let a = [1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0, 1.0];
        let b = [3.0, 5.0, 7.0, 9.0];
        let x = lstsq(&a, 4, 2, &b).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-10);
        assert!((x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lstsq_rank_deficient() {
        // Duplicate columns: any split works, the residual must vanish.
        let a = [1.0, 1.0, 2.0, 2.0];
        let b = [3.0, 6.0];
        let x = lstsq(&a, 2, 2, &b).unwrap();
        let mut y = [0.0; 2];
        mat_vec(&a, 2, 2, &x, &mut y);
        assert!((y[0] - 3.0).abs() < 1e-10);
        assert!((y[1] - 6.0).abs() < 1e-10);
    }

    #[test]
    fn nnls_clamps_negative_component() {
        // Unconstrained solution has a negative coordinate.
        let a = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let b = [-1.0, 2.0, 1.0];
        let x = nnls(&a, 3, 2, &b).unwrap();
        assert!(x.iter().all(|v| *v >= 0.0));
        assert!(x[0].abs() < 1e-10);
        // Best with x0 = 0: minimize (x1-2)^2 + (x1-1)^2 at x1 = 1.5.
        assert!((x[1] - 1.5).abs() < 1e-8);
    }

    #[test]
    fn nnls_interior_solution_matches_lstsq() {
        let a = [3.0, 1.0, 1.0, 2.0];
        let b = [9.0, 8.0];
        let x = nnls(&a, 2, 2, &b).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-10);
        assert!((x[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn lp_feasible_box_and_equality() {
        let p = LpProblem {
            num_vars: 2,
            eq: vec![(vec![1.0, 1.0], 1.0)],
            ub: vec![(vec![1.0, -1.0], 0.25)],
            bounds: vec![(0.0, f64::INFINITY), (0.0, f64::INFINITY)],
        };
        match lp_feasible(&p, 1e-9).unwrap() {
            LpStatus::Feasible(x) => {
                assert!((x[0] + x[1] - 1.0).abs() < 1e-9);
                assert!(x[0] - x[1] <= 0.25 + 1e-9);
                assert!(x[0] >= -1e-12 && x[1] >= -1e-12);
            }
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    #[test]
    fn lp_detects_infeasibility() {
        // x >= 0, x <= -1 is empty.
        let p = LpProblem {
            num_vars: 1,
            eq: vec![],
            ub: vec![(vec![1.0], -1.0)],
            bounds: vec![(0.0, f64::INFINITY)],
        };
        match lp_feasible(&p, 1e-9).unwrap() {
            LpStatus::Infeasible { residual } => assert!(residual > 0.5),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn lp_free_variables() {
        // x - y = 3 with both free, plus x <= 0 forces y <= -3.
        let p = LpProblem {
            num_vars: 2,
            eq: vec![(vec![1.0, -1.0], 3.0)],
            ub: vec![(vec![1.0, 0.0], 0.0)],
            bounds: vec![],
        };
        match lp_feasible(&p, 1e-9).unwrap() {
            LpStatus::Feasible(x) => {
                assert!((x[0] - x[1] - 3.0).abs() < 1e-9);
                assert!(x[0] <= 1e-9);
            }
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    #[test]
    fn lp_range_bounds() {
        let p = LpProblem {
            num_vars: 1,
            eq: vec![(vec![2.0], 1.0)],
            ub: vec![],
            bounds: vec![(0.25, 0.75)],
        };
        match lp_feasible(&p, 1e-9).unwrap() {
            LpStatus::Feasible(x) => assert!((x[0] - 0.5).abs() < 1e-9),
            other => panic!("expected feasible, got {other:?}"),
        }
        let q = LpProblem {
            num_vars: 1,
            eq: vec![(vec![2.0], 1.0)],
            ub: vec![],
            bounds: vec![(0.6, 0.75)],
        };
        assert!(matches!(
            lp_feasible(&q, 1e-9).unwrap(),
            LpStatus::Infeasible { .. }
        ));
    }
}
