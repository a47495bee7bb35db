//! Dense two-phase primal simplex with Bland's rule.
//!
//! The kernel favors determinism and auditability over speed: the basis is
//! refactorized on every pivot, entering/leaving choices follow Bland's rule
//! (lowest eligible index), and optimal solutions carry dual multipliers so
//! callers can certify values independently.
//!
//! Conventions for `min c^T x` over `G x <= g`, `E x = e`, optional lower
//! bounds: reported duals satisfy `G^T y + E^T nu = c` with `y <= 0` on
//! inequality rows and `nu` free, and `g^T y + e^T nu` equals the optimal
//! value (up to tolerance). Unbounded and infeasible problems are reported
//! as outcomes, not errors.

use crate::linalg::{self, Lu};
use thiserror::Error;

/// Absolute feasibility tolerance on constraint residuals.
pub const TOL_FEAS: f64 = 1e-9;
/// Reduced-cost tolerance for optimality.
pub const TOL_RC: f64 = 1e-9;
/// Relative slack used when imposing the stage-1 value in argmin solves.
pub const TOL_TIE: f64 = 1e-7;
/// Basis conditioning cap; beyond this the solve reports a numerical error.
pub const COND_CAP: f64 = 1e14;

const TOL_PIV: f64 = 1e-9;

/// A linear program in inequality/equality block form.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub ineq_rows: Vec<Vec<f64>>,
    pub ineq_rhs: Vec<f64>,
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    /// Per-variable lower bound; `None` means the variable is free.
    pub lower_bounds: Vec<Option<f64>>,
}

impl LpProblem {
    /// New problem with all variables free and no constraints yet.
    pub fn new(objective: Vec<f64>) -> Self {
        let n = objective.len();
        LpProblem {
            objective,
            ineq_rows: Vec::new(),
            ineq_rhs: Vec::new(),
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            lower_bounds: vec![None; n],
        }
    }

    pub fn add_ineq(&mut self, row: Vec<f64>, rhs: f64) {
        debug_assert_eq!(row.len(), self.objective.len());
        self.ineq_rows.push(row);
        self.ineq_rhs.push(rhs);
    }

    pub fn add_eq(&mut self, row: Vec<f64>, rhs: f64) {
        debug_assert_eq!(row.len(), self.objective.len());
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn check(&self) -> Result<(), SimplexError> {
        let n = self.objective.len();
        if n == 0 {
            return Err(SimplexError::Malformed("no variables".into()));
        }
        if self.lower_bounds.len() != n {
            return Err(SimplexError::Malformed("lower bound count mismatch".into()));
        }
        if self.ineq_rows.len() != self.ineq_rhs.len() || self.eq_rows.len() != self.eq_rhs.len() {
            return Err(SimplexError::Malformed("row/rhs count mismatch".into()));
        }
        for r in self.ineq_rows.iter().chain(self.eq_rows.iter()) {
            if r.len() != n {
                return Err(SimplexError::Malformed("row width mismatch".into()));
            }
        }
        let any_bound = self.lower_bounds.iter().any(|b| b.is_some());
        if self.ineq_rows.is_empty() && self.eq_rows.is_empty() && !any_bound {
            return Err(SimplexError::Malformed(
                "problem has no constraints and no bounds".into(),
            ));
        }
        let finite = |v: &f64| v.is_finite();
        if !self.objective.iter().all(finite)
            || !self.ineq_rhs.iter().all(finite)
            || !self.eq_rhs.iter().all(finite)
            || !self.ineq_rows.iter().chain(self.eq_rows.iter()).all(|r| r.iter().all(finite))
            || !self.lower_bounds.iter().flatten().all(|v| v.is_finite())
        {
            return Err(SimplexError::Malformed("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// Dual multipliers attached to an optimal solution.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
    /// One multiplier per inequality row, nonpositive at optimality.
    pub ineq_duals: Vec<f64>,
    /// One multiplier per equality row, unrestricted in sign.
    pub eq_duals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal(LpSolution),
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn optimal(&self) -> Option<&LpSolution> {
        match self {
            LpOutcome::Optimal(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimplexError {
    #[error("malformed linear program: {0}")]
    Malformed(String),
    #[error("numerical failure: basis conditioning estimate {cond:.3e} above cap")]
    Numerical { cond: f64 },
    #[error("iteration limit reached")]
    IterationLimit,
}

/// Stage-2 optimization direction for [`solve_over_argmin`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgminDirection {
    Min,
    Max,
}

#[derive(Clone, Copy)]
enum ColKind {
    /// Positive part of a split free variable.
    Plus(usize),
    /// Negative part of a split free variable.
    Minus(usize),
    /// Shifted bounded variable (shift recorded separately).
    Shifted(usize),
    /// Slack of an inequality row (index into the combined row list).
    Slack(usize),
}

struct Standard {
    cols: Vec<Vec<f64>>,
    b: Vec<f64>,
    kinds: Vec<ColKind>,
    /// Per combined row: true when the row was negated to make rhs >= 0.
    flip: Vec<bool>,
    /// Shift applied to each original variable (its lower bound, or 0).
    shift: Vec<f64>,
    num_ineq: usize,
}

fn standardize(p: &LpProblem) -> Standard {
    let n = p.num_vars();
    let num_ineq = p.ineq_rows.len();
    let m = num_ineq + p.eq_rows.len();
    let shift: Vec<f64> = p.lower_bounds.iter().map(|b| b.unwrap_or(0.0)).collect();

    let mut kinds: Vec<ColKind> = Vec::new();
    for j in 0..n {
        if p.lower_bounds[j].is_some() {
            kinds.push(ColKind::Shifted(j));
        } else {
            kinds.push(ColKind::Plus(j));
            kinds.push(ColKind::Minus(j));
        }
    }
    for r in 0..num_ineq {
        kinds.push(ColKind::Slack(r));
    }

    let row_coeff = |r: usize, j: usize| -> f64 {
        if r < num_ineq {
            p.ineq_rows[r][j]
        } else {
            p.eq_rows[r - num_ineq][j]
        }
    };
    let mut b: Vec<f64> = Vec::with_capacity(m);
    for r in 0..m {
        let rhs = if r < num_ineq { p.ineq_rhs[r] } else { p.eq_rhs[r - num_ineq] };
        let mut v = rhs;
        for j in 0..n {
            v -= row_coeff(r, j) * shift[j];
        }
        b.push(v);
    }
    let flip: Vec<bool> = b.iter().map(|v| *v < 0.0).collect();
    for (v, f) in b.iter_mut().zip(&flip) {
        if *f {
            *v = -*v;
        }
    }

    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(kinds.len());
    for kind in &kinds {
        let mut col = vec![0.0; m];
        match *kind {
            ColKind::Plus(j) | ColKind::Shifted(j) => {
                for r in 0..m {
                    col[r] = row_coeff(r, j);
                }
            }
            ColKind::Minus(j) => {
                for r in 0..m {
                    col[r] = -row_coeff(r, j);
                }
            }
            ColKind::Slack(r) => {
                col[r] = 1.0;
            }
        }
        for r in 0..m {
            if flip[r] {
                col[r] = -col[r];
            }
        }
        cols.push(col);
    }

    Standard { cols, b, kinds, flip, shift, num_ineq }
}

enum CoreOutcome {
    Optimal,
    Unbounded,
}

/// Revised simplex iteration with Bland's rule; the basis is refactorized
/// from scratch on every pivot.
fn simplex_core(
    cols: &[Vec<f64>],
    cost: &[f64],
    b: &[f64],
    basis: &mut Vec<usize>,
    in_basis: &mut Vec<bool>,
    enter_limit: usize,
) -> Result<CoreOutcome, SimplexError> {
    let m = b.len();
    debug_assert_eq!(basis.len(), m);
    let max_iter = 400 * (cols.len() + m + 8);
    for _ in 0..max_iter {
        let lu = factor_basis(cols, basis, m)?;
        let xb = lu.solve(b);
        let cb: Vec<f64> = basis.iter().map(|&j| cost[j]).collect();
        let y = lu.solve_transpose(&cb);
        let mut entering = None;
        for j in 0..enter_limit {
            if in_basis[j] {
                continue;
            }
            let rc = cost[j] - linalg::dot(&y, &cols[j]);
            if rc < -TOL_RC {
                entering = Some(j);
                break;
            }
        }
        let Some(e) = entering else {
            return Ok(CoreOutcome::Optimal);
        };
        let d = lu.solve(&cols[e]);
        let mut leave: Option<(f64, usize, usize)> = None; // (ratio, basic var, position)
        for i in 0..m {
            if d[i] > TOL_PIV {
                let ratio = xb[i].max(0.0) / d[i];
                match leave {
                    None => leave = Some((ratio, basis[i], i)),
                    Some((best, var, _)) => {
                        let tie = (ratio - best).abs() <= 1e-12 * (1.0 + best.abs());
                        if ratio < best - 1e-12 * (1.0 + best.abs()) || (tie && basis[i] < var) {
                            leave = Some((ratio, basis[i], i));
                        }
                    }
                }
            }
        }
        let Some((_, _, pos)) = leave else {
            return Ok(CoreOutcome::Unbounded);
        };
        in_basis[basis[pos]] = false;
        basis[pos] = e;
        in_basis[e] = true;
    }
    Err(SimplexError::IterationLimit)
}

fn factor_basis(cols: &[Vec<f64>], basis: &[usize], m: usize) -> Result<Lu, SimplexError> {
    let mut flat = vec![0.0; m * m];
    for (c, &j) in basis.iter().enumerate() {
        for r in 0..m {
            flat[r * m + c] = cols[j][r];
        }
    }
    let lu = Lu::factor(&flat, m, 1e-13);
    if lu.singular {
        return Err(SimplexError::Numerical { cond: f64::INFINITY });
    }
    let cond = lu.diag_cond();
    if cond > COND_CAP {
        return Err(SimplexError::Numerical { cond });
    }
    Ok(lu)
}

/// Solves the LP. Identical inputs produce bit-identical outcomes.
pub fn solve_lp(p: &LpProblem) -> Result<LpOutcome, SimplexError> {
    p.check()?;
    let std_form = standardize(p);
    let m = std_form.b.len();

    // Real (non-artificial) costs per standardized column.
    let real_cost: Vec<f64> = std_form
        .kinds
        .iter()
        .map(|k| match *k {
            ColKind::Plus(j) | ColKind::Shifted(j) => p.objective[j],
            ColKind::Minus(j) => -p.objective[j],
            ColKind::Slack(_) => 0.0,
        })
        .collect();

    if m == 0 {
        return bound_case(p, &std_form, &real_cost);
    }

    let n_real = std_form.cols.len();
    let mut cols = std_form.cols.clone();
    let mut b = std_form.b.clone();

    // Phase 1: start from slack columns where they are usable (+1 coefficient
    // after flipping), artificials elsewhere.
    let mut basis: Vec<usize> = Vec::with_capacity(m);
    let mut phase1_cost = vec![0.0; n_real];
    let mut artificial_rows: Vec<usize> = Vec::new();
    for r in 0..m {
        let slack_col = (r < std_form.num_ineq && !std_form.flip[r]).then(|| {
            // Slack columns are appended after variable columns in row order.
            let mut idx = None;
            for (ci, k) in std_form.kinds.iter().enumerate() {
                if let ColKind::Slack(rr) = k {
                    if *rr == r {
                        idx = Some(ci);
                    }
                }
            }
            idx.unwrap()
        });
        match slack_col {
            Some(ci) => basis.push(ci),
            None => {
                let mut col = vec![0.0; m];
                col[r] = 1.0;
                cols.push(col);
                phase1_cost.push(1.0);
                basis.push(cols.len() - 1);
                artificial_rows.push(r);
            }
        }
    }
    let mut in_basis = vec![false; cols.len()];
    for &j in &basis {
        in_basis[j] = true;
    }

    if !artificial_rows.is_empty() {
        match simplex_core(&cols, &phase1_cost, &b, &mut basis, &mut in_basis, n_real)? {
            CoreOutcome::Unbounded => {
                // Phase-1 objective is bounded below by zero; cannot happen.
                return Err(SimplexError::Numerical { cond: f64::INFINITY });
            }
            CoreOutcome::Optimal => {}
        }
        let lu = factor_basis(&cols, &basis, m)?;
        let xb = lu.solve(&b);
        let infeas: f64 = basis
            .iter()
            .zip(&xb)
            .filter(|(j, _)| **j >= n_real)
            .map(|(_, v)| v.max(0.0))
            .sum();
        let b_scale = 1.0 + b.iter().map(|v| v.abs()).sum::<f64>();
        if infeas > TOL_FEAS * b_scale {
            return Ok(LpOutcome::Infeasible);
        }
        // Pivot remaining artificials out of the basis, dropping rows that
        // turn out to be redundant.
        let mut dropped = vec![false; m];
        for pos in 0..m {
            if basis[pos] < n_real {
                continue;
            }
            let lu = factor_basis(&cols, &basis, m)?;
            let mut e = vec![0.0; m];
            e[pos] = 1.0;
            let row = lu.solve_transpose(&e);
            let mut replaced = false;
            for j in 0..n_real {
                if in_basis[j] {
                    continue;
                }
                if linalg::dot(&row, &cols[j]).abs() > 1e-7 {
                    in_basis[basis[pos]] = false;
                    basis[pos] = j;
                    in_basis[j] = true;
                    replaced = true;
                    break;
                }
            }
            if !replaced {
                dropped[pos] = true;
            }
        }
        if dropped.iter().any(|d| *d) {
            // Each dropped basis position still holds an artificial column;
            // the constraint row that column covers is redundant and goes
            // away together with it.
            let mut drop_row_ids: Vec<usize> = Vec::new();
            for (pos, &j) in basis.iter().enumerate() {
                if dropped[pos] {
                    debug_assert!(j >= n_real);
                    let r = cols[j].iter().position(|v| *v == 1.0).unwrap();
                    drop_row_ids.push(r);
                }
            }
            let keep_rows: Vec<usize> =
                (0..m).filter(|r| !drop_row_ids.contains(r)).collect();
            let mut new_cols: Vec<Vec<f64>> = Vec::with_capacity(n_real);
            for col in cols.iter().take(n_real) {
                new_cols.push(keep_rows.iter().map(|&r| col[r]).collect());
            }
            let new_b: Vec<f64> = keep_rows.iter().map(|&r| b[r]).collect();
            let new_basis: Vec<usize> = basis
                .iter()
                .enumerate()
                .filter(|(pos, _)| !dropped[*pos])
                .map(|(_, j)| *j)
                .collect();
            cols = new_cols;
            b = new_b;
            basis = new_basis;
            in_basis = vec![false; cols.len()];
            for &j in &basis {
                in_basis[j] = true;
            }
            return finish(
                p,
                &std_form,
                &real_cost,
                cols,
                b,
                basis,
                in_basis,
                Some(keep_rows),
            );
        }
        cols.truncate(n_real);
        in_basis.truncate(n_real);
    }

    finish(p, &std_form, &real_cost, cols, b, basis, in_basis, None)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    p: &LpProblem,
    std_form: &Standard,
    real_cost: &[f64],
    cols: Vec<Vec<f64>>,
    b: Vec<f64>,
    mut basis: Vec<usize>,
    mut in_basis: Vec<bool>,
    kept_rows: Option<Vec<usize>>,
) -> Result<LpOutcome, SimplexError> {
    let n = p.num_vars();
    let n_real = std_form.cols.len();
    let m = b.len();
    if m == 0 {
        return bound_case(p, std_form, real_cost);
    }
    let cost: Vec<f64> = (0..cols.len())
        .map(|j| if j < n_real { real_cost[j] } else { 0.0 })
        .collect();
    match simplex_core(&cols, &cost, &b, &mut basis, &mut in_basis, n_real)? {
        CoreOutcome::Unbounded => return Ok(LpOutcome::Unbounded),
        CoreOutcome::Optimal => {}
    }
    let lu = factor_basis(&cols, &basis, m)?;
    let xb = lu.solve(&b);
    let cb: Vec<f64> = basis.iter().map(|&j| cost[j]).collect();
    let y = lu.solve_transpose(&cb);

    let mut x = vec![0.0; n];
    for j in 0..n {
        x[j] = std_form.shift[j];
    }
    for (pos, &j) in basis.iter().enumerate() {
        if j >= n_real {
            continue;
        }
        let v = xb[pos];
        match std_form.kinds[j] {
            ColKind::Plus(var) => x[var] += v,
            ColKind::Minus(var) => x[var] -= v,
            ColKind::Shifted(var) => x[var] += v,
            ColKind::Slack(_) => {}
        }
    }
    let value = linalg::dot(&p.objective, &x);

    let total_rows = std_form.b.len();
    let mut duals = vec![0.0; total_rows];
    match &kept_rows {
        Some(rows) => {
            for (i, &r) in rows.iter().enumerate() {
                duals[r] = y[i];
            }
        }
        None => duals.copy_from_slice(&y),
    }
    for (r, f) in std_form.flip.iter().enumerate() {
        if *f {
            duals[r] = -duals[r];
        }
    }
    let ineq_duals = duals[..std_form.num_ineq].to_vec();
    let eq_duals = duals[std_form.num_ineq..].to_vec();
    Ok(LpOutcome::Optimal(LpSolution { x, value, ineq_duals, eq_duals }))
}

/// Degenerate case of a problem with no constraint rows: every variable sits
/// at its bound or the problem is unbounded.
fn bound_case(
    p: &LpProblem,
    std_form: &Standard,
    real_cost: &[f64],
) -> Result<LpOutcome, SimplexError> {
    let n = p.num_vars();
    let mut x = vec![0.0; n];
    for (j, kind) in std_form.kinds.iter().enumerate() {
        match *kind {
            ColKind::Shifted(var) => {
                if real_cost[j] < -TOL_RC {
                    return Ok(LpOutcome::Unbounded);
                }
                x[var] = std_form.shift[var];
            }
            ColKind::Plus(var) => {
                if p.objective[var].abs() > TOL_RC {
                    return Ok(LpOutcome::Unbounded);
                }
                x[var] = 0.0;
            }
            ColKind::Minus(_) | ColKind::Slack(_) => {}
        }
    }
    let value = linalg::dot(&p.objective, &x);
    Ok(LpOutcome::Optimal(LpSolution {
        x,
        value,
        ineq_duals: vec![0.0; p.ineq_rows.len()],
        eq_duals: vec![0.0; p.eq_rows.len()],
    }))
}

/// Two-stage lexicographic solve over `{ y : rows y <= rhs }`: stage 1
/// minimizes `stage1`, stage 2 optimizes `stage2` over the stage-1 optimal
/// face. The face is imposed through two inequalities with a small relative
/// slack instead of a hard equality.
///
/// For [`ArgminDirection::Max`] the reported value is the maximum of
/// `stage2`; the attached duals certify the internally solved minimization.
pub fn solve_over_argmin(
    stage1: &[f64],
    stage2: &[f64],
    rows: &[Vec<f64>],
    rhs: &[f64],
    direction: ArgminDirection,
) -> Result<LpOutcome, SimplexError> {
    let n = stage1.len();
    debug_assert_eq!(stage2.len(), n);
    let mut p1 = LpProblem::new(stage1.to_vec());
    for (row, r) in rows.iter().zip(rhs) {
        p1.add_ineq(row.clone(), *r);
    }
    let stage1_out = solve_lp(&p1)?;
    let v1 = match &stage1_out {
        LpOutcome::Optimal(s) => s.value,
        LpOutcome::Infeasible => return Ok(LpOutcome::Infeasible),
        LpOutcome::Unbounded => return Ok(LpOutcome::Unbounded),
    };
    let slack = TOL_FEAS * (1.0 + v1.abs());
    let objective: Vec<f64> = match direction {
        ArgminDirection::Min => stage2.to_vec(),
        ArgminDirection::Max => stage2.iter().map(|v| -v).collect(),
    };
    let mut p2 = LpProblem::new(objective);
    for (row, r) in rows.iter().zip(rhs) {
        p2.add_ineq(row.clone(), *r);
    }
    p2.add_ineq(stage1.to_vec(), v1 + slack);
    p2.add_ineq(stage1.iter().map(|v| -v).collect(), -v1 + slack);
    let out = solve_lp(&p2)?;
    Ok(match (out, direction) {
        (LpOutcome::Optimal(mut s), ArgminDirection::Max) => {
            s.value = -s.value;
            LpOutcome::Optimal(s)
        }
        (other, _) => other,
    })
}

/// Feasibility of `{ y : rows y <= rhs }` via a zero-objective solve.
pub(crate) fn polytope_feasible(rows: &[Vec<f64>], rhs: &[f64]) -> Result<Option<Vec<f64>>, SimplexError> {
    let n = if rows.is_empty() { 0 } else { rows[0].len() };
    if n == 0 {
        // No variables: feasible iff all rhs are nonnegative.
        return Ok(if rhs.iter().all(|v| *v >= -TOL_FEAS) { Some(vec![]) } else { None });
    }
    let mut p = LpProblem::new(vec![0.0; n]);
    for (row, r) in rows.iter().zip(rhs) {
        p.add_ineq(row.clone(), *r);
    }
    Ok(match solve_lp(&p)? {
        LpOutcome::Optimal(s) => Some(s.x),
        _ => None,
    })
}

/// Maximum violation of primal feasibility, dual feasibility, and
/// complementary slackness for an optimal pair. Used by tests to certify
/// solver output.
pub fn certificate_violation(p: &LpProblem, s: &LpSolution) -> f64 {
    let mut worst = 0.0f64;
    for (row, rhs) in p.ineq_rows.iter().zip(&p.ineq_rhs) {
        let r = linalg::dot(row, &s.x) - rhs;
        worst = worst.max(r);
    }
    for (row, rhs) in p.eq_rows.iter().zip(&p.eq_rhs) {
        worst = worst.max((linalg::dot(row, &s.x) - rhs).abs());
    }
    for (xj, lb) in s.x.iter().zip(&p.lower_bounds) {
        if let Some(l) = lb {
            worst = worst.max(l - xj);
        }
    }
    // Dual sign.
    for y in &s.ineq_duals {
        worst = worst.max(*y);
    }
    // Stationarity: G^T y + E^T nu = c on coordinates away from their bound;
    // reduced cost >= 0 at the bound.
    let gy = linalg::vec_mat(&s.ineq_duals, &p.ineq_rows);
    let ey = linalg::vec_mat(&s.eq_duals, &p.eq_rows);
    for j in 0..p.num_vars() {
        let grad = s.value_stationarity(j, &gy, &ey, p);
        worst = worst.max(grad);
    }
    // Complementary slackness.
    for ((row, rhs), y) in p.ineq_rows.iter().zip(&p.ineq_rhs).zip(&s.ineq_duals) {
        let slack = rhs - linalg::dot(row, &s.x);
        worst = worst.max((slack * y).abs().min(slack.abs().min(y.abs())));
    }
    worst
}

impl LpSolution {
    fn value_stationarity(&self, j: usize, gy: &[f64], ey: &[f64], p: &LpProblem) -> f64 {
        let combined = gy.get(j).copied().unwrap_or(0.0) + ey.get(j).copied().unwrap_or(0.0);
        let rc = p.objective[j] - combined;
        match p.lower_bounds[j] {
            None => rc.abs(),
            Some(lb) => {
                if self.x[j] > lb + 1e-7 {
                    rc.abs()
                } else {
                    (-rc).max(0.0)
                }
            }
        }
    }
}
