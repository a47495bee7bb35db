//! Complementarity reformulation of the canonical bilevel problem and the
//! solvers that work on it.
//!
//! Replacing the follower's minimization by its optimality system turns the
//! bilevel program into: minimize `g^T u + h^T w` subject to
//!
//! ```text
//! W w <= B u + b,    Hu u <= hu,        (primal feasibility)
//! W^T v = t,         v <= 0,            (dual feasibility)
//! v^T (W w - B u - b) = 0.              (complementarity)
//! ```
//!
//! Three attacks are provided: an exact oracle enumerating activity
//! patterns (exponential in the row count, for small problems and ground
//! truth), a relaxation `P(eps)` that replaces the last condition by
//! `v^T (W w - B u - b) <= eps` and is solved by sequential linear
//! programming, and a regularization path driving `eps` to zero.

use crate::detequiv::GenericBilevel;
use crate::linalg;
use crate::model::binomial;
use crate::simplex::{
    solve_lp, solve_over_argmin, ArgminDirection, LpOutcome, LpProblem, SimplexError, TOL_FEAS,
};
use itertools::Itertools;
use rayon::prelude::*;
use std::fmt::Write as _;
use thiserror::Error;

/// Largest row count the pattern oracle will enumerate by default.
pub const DEFAULT_PATTERN_CAP: u32 = 20;
/// Regularization path defaults.
pub const EPS0: f64 = 1.0;
pub const FACTOR: f64 = 0.1;
pub const EPS_MIN: f64 = 1e-8;
/// First-order verification tolerance.
pub const TOL_KKT: f64 = 1e-7;

/// Activity tolerance used when classifying rows at a point.
const TOL_ACT: f64 = 1e-7;
/// Trust-region floor for the sequential linear programming loop.
const RADIUS_MIN: f64 = 1e-10;
/// Path steps stop early once consecutive points move less than this.
const MOVE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MpccError {
    #[error("complementarity system is infeasible")]
    Infeasible,
    #[error("objective is unbounded below on the complementarity system")]
    Unbounded,
    #[error("enumeration needs {needed} rows but the cap is {cap}")]
    CapExceeded { needed: usize, cap: usize },
    #[error("relaxed problem has no feasible point")]
    RelaxedInfeasible,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// The complementarity system attached to a canonical bilevel problem.
#[derive(Debug, Clone)]
pub struct Mpcc {
    pub gb: GenericBilevel,
}

pub fn build_kkt(gb: GenericBilevel) -> Mpcc {
    Mpcc { gb }
}

impl Mpcc {
    fn dims(&self) -> (usize, usize, usize) {
        (self.gb.num_u(), self.gb.num_w(), self.gb.num_rows())
    }

    fn num_vars(&self) -> usize {
        let (k, l, r) = self.dims();
        k + l + r
    }

    /// Row `i` of the primal block, expressed over the stacked variable
    /// vector `(u, w, v)`: coefficients of `W_i w - B_i u <= b_i`.
    fn primal_row(&self, i: usize) -> Vec<f64> {
        let (k, l, r) = self.dims();
        let mut row = vec![0.0; k + l + r];
        for j in 0..k {
            row[j] = -self.gb.b_mat[i][j];
        }
        for j in 0..l {
            row[k + j] = self.gb.w_mat[i][j];
        }
        row
    }

    /// Base LP skeleton shared by every solver here: primal rows, leader
    /// rows, dual sign rows, and the dual equality system.
    fn skeleton(&self, objective: Vec<f64>) -> LpProblem {
        let (k, l, r) = self.dims();
        let mut p = LpProblem::new(objective);
        for i in 0..r {
            p.add_ineq(self.primal_row(i), self.gb.b[i]);
        }
        for (row, rhs) in self.gb.hu_mat.iter().zip(&self.gb.hu) {
            let mut full = vec![0.0; k + l + r];
            full[..k].copy_from_slice(row);
            p.add_ineq(full, *rhs);
        }
        for i in 0..r {
            let mut full = vec![0.0; k + l + r];
            full[k + l + i] = 1.0;
            p.add_ineq(full, 0.0);
        }
        for j in 0..l {
            let mut full = vec![0.0; k + l + r];
            for i in 0..r {
                full[k + l + i] = self.gb.w_mat[i][j];
            }
            p.add_eq(full, self.gb.t[j]);
        }
        p
    }

    fn objective_vector(&self) -> Vec<f64> {
        let (_, _, r) = self.dims();
        let mut obj = Vec::with_capacity(self.num_vars());
        obj.extend_from_slice(&self.gb.g);
        obj.extend_from_slice(&self.gb.h);
        obj.extend(std::iter::repeat(0.0).take(r));
        obj
    }
}

/// A stacked point of the complementarity system.
#[derive(Debug, Clone, PartialEq)]
pub struct MpccPoint {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
}

impl MpccPoint {
    fn from_stacked(m: &Mpcc, x: &[f64]) -> MpccPoint {
        let (k, l, r) = m.dims();
        debug_assert_eq!(x.len(), k + l + r);
        MpccPoint {
            u: x[..k].to_vec(),
            w: x[k..k + l].to_vec(),
            v: x[k + l..].to_vec(),
        }
    }

    fn stacked(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.u.len() + self.w.len() + self.v.len());
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.v);
        out
    }

    pub fn objective(&self, m: &Mpcc) -> f64 {
        linalg::dot(&m.gb.g, &self.u) + linalg::dot(&m.gb.h, &self.w)
    }

    /// `v^T (W w - B u - b)`; nonnegative at any point satisfying the
    /// sign conditions, zero exactly at complementary points.
    pub fn comp_residual(&self, m: &Mpcc) -> f64 {
        let excess = self.row_excess(m);
        linalg::dot(&self.v, &excess)
    }

    /// `W w - B u - b`, the (nonpositive-when-feasible) primal row excess.
    fn row_excess(&self, m: &Mpcc) -> Vec<f64> {
        let ww = linalg::mat_vec(&m.gb.w_mat, &self.w);
        let bu = linalg::mat_vec(&m.gb.b_mat, &self.u);
        (0..m.gb.num_rows())
            .map(|i| ww[i] - bu[i] - m.gb.b[i])
            .collect()
    }

    /// Worst violation of the linear (non-complementarity) conditions.
    pub fn primal_violation(&self, m: &Mpcc) -> f64 {
        let mut worst = 0.0f64;
        for e in self.row_excess(m) {
            worst = worst.max(e);
        }
        let hu = linalg::mat_vec(&m.gb.hu_mat, &self.u);
        for (lhs, rhs) in hu.iter().zip(&m.gb.hu) {
            worst = worst.max(lhs - rhs);
        }
        for &vi in &self.v {
            worst = worst.max(vi);
        }
        let wt_v = linalg::vec_mat(&self.v, &m.gb.w_mat);
        for (lhs, rhs) in wt_v.iter().zip(&m.gb.t) {
            worst = worst.max((lhs - rhs).abs());
        }
        worst
    }
}

/// One accepted iterate of the regularization path.
#[derive(Debug, Clone)]
pub struct PathStep {
    pub eps: f64,
    pub objective: f64,
    pub comp_residual: f64,
    pub point: MpccPoint,
}

#[derive(Debug, Clone, Default)]
pub struct PathTrace {
    pub steps: Vec<PathStep>,
}

impl PathTrace {
    /// CSV with one row per step: `eps, objective, comp_residual`, then
    /// the stacked point coordinates `u*`, `w*`, `v*`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.steps.first() {
            out.push_str("eps,objective,comp_residual");
            for i in 0..first.point.u.len() {
                let _ = write!(out, ",u{i}");
            }
            for i in 0..first.point.w.len() {
                let _ = write!(out, ",w{i}");
            }
            for i in 0..first.point.v.len() {
                let _ = write!(out, ",v{i}");
            }
            out.push('\n');
        }
        for step in &self.steps {
            let _ = write!(out, "{},{},{}", step.eps, step.objective, step.comp_residual);
            for val in step.point.stacked() {
                let _ = write!(out, ",{val}");
            }
            out.push('\n');
        }
        out
    }
}

/// Exact solve by activity-pattern enumeration with the default row cap.
pub fn global_oracle(m: &Mpcc) -> Result<(MpccPoint, f64), MpccError> {
    global_oracle_capped(m, DEFAULT_PATTERN_CAP)
}

/// Exact solve: every subset of primal rows is tried as the active set,
/// with complementarity enforced exactly (`v_i = 0` off the subset, row
/// tight on it). The best pattern value wins; exact ties resolve to the
/// lowest pattern index. A pattern whose LP is unbounded witnesses an
/// unbounded objective.
pub fn global_oracle_capped(m: &Mpcc, cap: u32) -> Result<(MpccPoint, f64), MpccError> {
    let (k, l, r) = m.dims();
    if r > cap as usize {
        return Err(MpccError::CapExceeded {
            needed: r,
            cap: cap as usize,
        });
    }
    let total: u64 = 1u64 << r;
    let outcomes: Vec<Result<Option<(f64, Vec<f64>)>, SimplexError>> = (0..total)
        .into_par_iter()
        .map(|pattern| {
            let mut p = m.skeleton(m.objective_vector());
            for i in 0..r {
                if pattern >> i & 1 == 1 {
                    p.add_eq(m.primal_row(i), m.gb.b[i]);
                } else {
                    let mut row = vec![0.0; k + l + r];
                    row[k + l + i] = 1.0;
                    p.add_eq(row, 0.0);
                }
            }
            match solve_lp(&p)? {
                LpOutcome::Optimal(s) => Ok(Some((s.value, s.x))),
                LpOutcome::Infeasible => Ok(None),
                LpOutcome::Unbounded => Ok(Some((f64::NEG_INFINITY, Vec::new()))),
            }
        })
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for out in outcomes {
        match out? {
            Some((value, x)) => {
                if value == f64::NEG_INFINITY {
                    return Err(MpccError::Unbounded);
                }
                let better = match &best {
                    None => true,
                    Some((bv, _)) => value < *bv,
                };
                if better {
                    best = Some((value, x));
                }
            }
            None => {}
        }
    }
    match best {
        Some((value, x)) => Ok((MpccPoint::from_stacked(m, &x), value)),
        None => Err(MpccError::Infeasible),
    }
}

/// A linearly feasible, exactly complementary point: leader coordinates
/// from a feasibility solve (or the hint), follower and multipliers from
/// the follower's own LP, whose optimal duals complete the system.
fn restoration(m: &Mpcc, u_hint: Option<&[f64]>) -> Result<MpccPoint, MpccError> {
    let (k, _, _) = m.dims();
    let mut u = match u_hint {
        Some(h) if leader_feasible(m, h) => h.to_vec(),
        _ => {
            let mut p = LpProblem::new(vec![0.0; k]);
            for (row, rhs) in m.gb.hu_mat.iter().zip(&m.gb.hu) {
                p.add_ineq(row.clone(), *rhs);
            }
            match solve_lp(&p)? {
                LpOutcome::Optimal(s) => s.x,
                _ => return Err(MpccError::Infeasible),
            }
        }
    };
    match follower_solve(m, &u)? {
        Some(point) => Ok(point),
        None => {
            // No follower response at this leader point; look for any
            // jointly feasible pair before declaring failure.
            let (k, l, _) = m.dims();
            let mut p = LpProblem::new(vec![0.0; k + l]);
            for i in 0..m.gb.num_rows() {
                let mut row = vec![0.0; k + l];
                for j in 0..k {
                    row[j] = -m.gb.b_mat[i][j];
                }
                row[k..].copy_from_slice(&m.gb.w_mat[i]);
                p.add_ineq(row, m.gb.b[i]);
            }
            for (row, rhs) in m.gb.hu_mat.iter().zip(&m.gb.hu) {
                let mut full = vec![0.0; k + l];
                full[..k].copy_from_slice(row);
                p.add_ineq(full, *rhs);
            }
            match solve_lp(&p)? {
                LpOutcome::Optimal(s) => {
                    u = s.x[..k].to_vec();
                }
                _ => return Err(MpccError::RelaxedInfeasible),
            }
            match follower_solve(m, &u)? {
                Some(point) => Ok(point),
                None => Err(MpccError::RelaxedInfeasible),
            }
        }
    }
}

fn leader_feasible(m: &Mpcc, u: &[f64]) -> bool {
    if u.len() != m.gb.num_u() {
        return false;
    }
    linalg::mat_vec(&m.gb.hu_mat, u)
        .iter()
        .zip(&m.gb.hu)
        .all(|(lhs, rhs)| *lhs <= rhs + TOL_ACT * (1.0 + rhs.abs()))
}

/// Follower LP at fixed `u`; optimal duals provide `v`. `None` when the
/// follower set is empty; an unbounded follower means the dual system
/// `W^T v = t, v <= 0` has no solution at all, so the whole
/// complementarity system is infeasible.
fn follower_solve(m: &Mpcc, u: &[f64]) -> Result<Option<MpccPoint>, MpccError> {
    let mut p = LpProblem::new(m.gb.t.clone());
    let bu = linalg::mat_vec(&m.gb.b_mat, u);
    for (i, row) in m.gb.w_mat.iter().enumerate() {
        p.add_ineq(row.clone(), bu[i] + m.gb.b[i]);
    }
    match solve_lp(&p)? {
        LpOutcome::Optimal(s) => Ok(Some(MpccPoint {
            u: u.to_vec(),
            w: s.x,
            v: s.ineq_duals,
        })),
        LpOutcome::Infeasible => Ok(None),
        LpOutcome::Unbounded => Err(MpccError::Infeasible),
    }
}

/// Any linearly feasible, exactly complementary point of the system.
pub fn feasible_start(m: &Mpcc) -> Result<MpccPoint, MpccError> {
    restoration(m, None)
}

/// Solves the relaxation `P(eps)` (complementarity replaced by
/// `v^T (W w - B u - b) <= eps`) by sequential linear programming with a
/// box trust region: the bilinear constraint is linearized at the current
/// point, a candidate is accepted when its true residual stays within
/// `eps` and the objective strictly decreases, and the trust radius is
/// halved otherwise.
pub fn solve_relaxed(
    m: &Mpcc,
    eps: f64,
    start: &MpccPoint,
) -> Result<(MpccPoint, f64), MpccError> {
    if !(eps > 0.0) {
        return Err(MpccError::Invalid("relaxation width must be positive".into()));
    }
    let comp_ok = |phi: f64| phi <= eps * (1.0 + 1e-9) + 1e-15;
    let mut cur = if start.primal_violation(m) <= TOL_ACT && comp_ok(start.comp_residual(m)) {
        start.clone()
    } else {
        restoration(m, Some(&start.u))?
    };
    let mut best_obj = cur.objective(m);
    let mut radius = 1.0f64;
    for _ in 0..1000 {
        if radius < RADIUS_MIN {
            break;
        }
        let cand = match slp_step(m, eps, &cur, radius)? {
            Some(c) => c,
            None => {
                radius *= 0.5;
                continue;
            }
        };
        let step = linalg::norm_inf(&linalg::sub(&cand.stacked(), &cur.stacked()));
        let phi = cand.comp_residual(m);
        if comp_ok(phi) && step <= 1e-12 {
            // The current point solves its own linearization: first-order
            // stationary for the relaxation.
            break;
        }
        let obj = cand.objective(m);
        if comp_ok(phi) && obj < best_obj - 1e-12 * (1.0 + best_obj.abs()) {
            cur = cand;
            best_obj = obj;
        } else {
            radius *= 0.5;
        }
    }
    Ok((cur.clone(), best_obj))
}

/// One trust-region LP: linear conditions, the linearized bilinear row,
/// and the box `|x - cur| <= radius`.
fn slp_step(
    m: &Mpcc,
    eps: f64,
    cur: &MpccPoint,
    radius: f64,
) -> Result<Option<MpccPoint>, MpccError> {
    let mut p = m.skeleton(m.objective_vector());
    p.add_ineq(linearized_comp_row(m, cur), linearized_comp_rhs(m, cur, eps));
    let stacked = cur.stacked();
    let n = stacked.len();
    for (j, &val) in stacked.iter().enumerate() {
        let mut row = vec![0.0; n];
        row[j] = 1.0;
        p.add_ineq(row, val + radius);
        p.lower_bounds[j] = Some(val - radius);
    }
    match solve_lp(&p)? {
        LpOutcome::Optimal(s) => Ok(Some(MpccPoint::from_stacked(m, &s.x))),
        _ => Ok(None),
    }
}

/// Gradient row of `v^T (W w - B u - b)` at the expansion point, over the
/// stacked variables.
fn linearized_comp_row(m: &Mpcc, at: &MpccPoint) -> Vec<f64> {
    let (k, l, r) = m.dims();
    let mut row = vec![0.0; k + l + r];
    let vb = linalg::vec_mat(&at.v, &m.gb.b_mat);
    let vw = linalg::vec_mat(&at.v, &m.gb.w_mat);
    for j in 0..k {
        row[j] = -vb[j];
    }
    for j in 0..l {
        row[k + j] = vw[j];
    }
    let excess = at.row_excess(m);
    row[k + l..].copy_from_slice(&excess);
    row
}

fn linearized_comp_rhs(m: &Mpcc, at: &MpccPoint, eps: f64) -> f64 {
    let excess = at.row_excess(m);
    eps + linalg::dot(&at.v, &m.gb.b) + linalg::dot(&at.v, &excess)
}

/// First-order check for `P(eps)` at a point: over directions in the unit
/// box that keep every active constraint (and, when the relaxed
/// complementarity row is tight, its linearization) satisfied, the
/// objective cannot descend by more than the tolerance.
pub fn verify_first_order(m: &Mpcc, eps: f64, point: &MpccPoint) -> Result<bool, MpccError> {
    let (k, l, r) = m.dims();
    let n = k + l + r;
    let mut p = LpProblem::new(m.objective_vector());
    let excess = point.row_excess(m);
    for i in 0..r {
        if excess[i] >= -TOL_ACT * (1.0 + m.gb.b[i].abs()) {
            p.add_ineq(m.primal_row(i), 0.0);
        }
    }
    let hu = linalg::mat_vec(&m.gb.hu_mat, &point.u);
    for (i, row) in m.gb.hu_mat.iter().enumerate() {
        if hu[i] >= m.gb.hu[i] - TOL_ACT * (1.0 + m.gb.hu[i].abs()) {
            let mut full = vec![0.0; n];
            full[..k].copy_from_slice(row);
            p.add_ineq(full, 0.0);
        }
    }
    for i in 0..r {
        if point.v[i] >= -TOL_ACT {
            let mut full = vec![0.0; n];
            full[k + l + i] = 1.0;
            p.add_ineq(full, 0.0);
        }
    }
    for j in 0..l {
        let mut full = vec![0.0; n];
        for i in 0..r {
            full[k + l + i] = m.gb.w_mat[i][j];
        }
        p.add_eq(full, 0.0);
    }
    if point.comp_residual(m) >= eps - TOL_ACT * (1.0 + eps) {
        p.add_ineq(linearized_comp_row(m, point), 0.0);
    }
    for j in 0..n {
        let mut row = vec![0.0; n];
        row[j] = 1.0;
        p.add_ineq(row, 1.0);
        p.lower_bounds[j] = Some(-1.0);
    }
    let scale = linalg::norm2(&m.objective_vector());
    match solve_lp(&p)? {
        LpOutcome::Optimal(s) => Ok(s.value >= -TOL_KKT * (1.0 + scale)),
        LpOutcome::Unbounded => Ok(false),
        LpOutcome::Infeasible => Err(MpccError::Invalid(
            "direction system infeasible; the point violates its own active set".into(),
        )),
    }
}

/// Drives the relaxation width from `eps0` down by `factor` per step,
/// clamped to end exactly at `eps_min`, warm-starting each solve at the
/// previous point. Stops early only when the iterates have settled and
/// the residual is already below `eps_min`.
pub fn regularization_path(
    m: &Mpcc,
    eps0: f64,
    factor: f64,
    eps_min: f64,
    start: Option<&MpccPoint>,
) -> Result<(PathTrace, MpccPoint, f64), MpccError> {
    if !(eps0 > 0.0) || !(0.0 < factor && factor < 1.0) || !(0.0 < eps_min && eps_min <= eps0) {
        return Err(MpccError::Invalid(
            "need eps0 > 0, factor in (0,1), 0 < eps_min <= eps0".into(),
        ));
    }
    let mut schedule = Vec::new();
    let mut e = eps0;
    loop {
        schedule.push(e);
        if e <= eps_min {
            break;
        }
        e = (e * factor).max(eps_min);
    }
    let mut current = match start {
        Some(p) => p.clone(),
        None => restoration(m, None)?,
    };
    let mut trace = PathTrace::default();
    let mut obj = current.objective(m);
    for &eps in &schedule {
        let (pt, value) = solve_relaxed(m, eps, &current)?;
        let movement = linalg::norm_inf(&linalg::sub(&pt.stacked(), &current.stacked()));
        let residual = pt.comp_residual(m);
        trace.steps.push(PathStep {
            eps,
            objective: value,
            comp_residual: residual,
            point: pt.clone(),
        });
        current = pt;
        obj = value;
        if movement < MOVE_TOL && residual <= eps_min {
            break;
        }
    }
    Ok((trace, current, obj))
}

/// Runs the path from several starts and keeps the best final
/// objective; ties resolve to the earliest start. The restoration
/// start walks the full schedule from `eps0`. The other starts come
/// from activity patterns on the first `min(r, 6)` rows, and each of
/// those begins at a width matched to its own residual: a pattern
/// point is already complementary on the rows its pattern covers, and
/// entering the schedule at a large width would let the first relaxed
/// solve pull every start into the same basin, wasting the diversity
/// the patterns exist to provide.
pub fn regularization_path_multistart(
    m: &Mpcc,
    eps0: f64,
    factor: f64,
    eps_min: f64,
) -> Result<(PathTrace, MpccPoint, f64), MpccError> {
    let (k, l, r) = m.dims();
    let nbits = r.min(6);
    let mut starts: Vec<(MpccPoint, f64)> = vec![(restoration(m, None)?, eps0)];
    for pattern in 0..(1u64 << nbits) {
        let mut p = m.skeleton(m.objective_vector());
        for i in 0..nbits {
            if pattern >> i & 1 == 1 {
                p.add_eq(m.primal_row(i), m.gb.b[i]);
            } else {
                let mut row = vec![0.0; k + l + r];
                row[k + l + i] = 1.0;
                p.add_eq(row, 0.0);
            }
        }
        match solve_lp(&p) {
            Ok(LpOutcome::Optimal(s)) => {
                let point = MpccPoint::from_stacked(m, &s.x);
                let width = (2.0 * point.comp_residual(m)).clamp(eps_min, eps0);
                starts.push((point, width));
            }
            Ok(_) => {}
            // A pattern whose equality system is singular or cycles is
            // just an unusable start, not a fatal condition.
            Err(SimplexError::Numerical { .. }) | Err(SimplexError::IterationLimit) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let runs: Vec<Result<(PathTrace, MpccPoint, f64), MpccError>> = starts
        .par_iter()
        .map(|(s, width)| regularization_path(m, *width, factor, eps_min, Some(s)))
        .collect();
    let mut best: Option<(PathTrace, MpccPoint, f64)> = None;
    let mut first_err: Option<MpccError> = None;
    for run in runs {
        match run {
            Ok((trace, point, value)) => {
                let better = match &best {
                    None => true,
                    Some((_, _, bv)) => value < *bv,
                };
                if better {
                    best = Some((trace, point, value));
                }
            }
            // One start failing does not invalidate the others; errors
            // surface only when every start fails.
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some(b) => Ok(b),
        None => Err(first_err.unwrap_or(MpccError::RelaxedInfeasible)),
    }
}

/// Vertices of the multiplier polyhedron
/// `{ v : W^T v = t, v <= 0, v_i = 0 off the active rows }` at a primal
/// pair. Basic solutions over supports of size `rank` are enumerated,
/// deduplicated, and returned in lexicographic order. Rows the pair
/// strictly violates are treated as inactive, so an infeasible pair
/// yields an empty (or spurious-free) sample rather than an error.
pub fn lambda_set_sample(
    m: &Mpcc,
    u: &[f64],
    w: &[f64],
    cap: usize,
) -> Result<Vec<Vec<f64>>, MpccError> {
    let (_, l, r) = m.dims();
    let point = MpccPoint {
        u: u.to_vec(),
        w: w.to_vec(),
        v: vec![0.0; r],
    };
    let excess = point.row_excess(m);
    let active: Vec<usize> = (0..r)
        .filter(|&i| excess[i].abs() <= TOL_ACT * (1.0 + m.gb.b[i].abs()))
        .collect();
    let t_zero = linalg::norm_inf(&m.gb.t) <= TOL_FEAS;
    if active.is_empty() {
        return Ok(if t_zero { vec![vec![0.0; r]] } else { Vec::new() });
    }
    // Columns of the equality system are the active multipliers.
    let sys: Vec<Vec<f64>> = (0..l)
        .map(|j| active.iter().map(|&i| m.gb.w_mat[i][j]).collect())
        .collect();
    let rho = linalg::rank(&sys, 1e-9);
    let needed = binomial(active.len(), rho)
        .and_then(|c| usize::try_from(c).ok())
        .unwrap_or(usize::MAX);
    if needed > cap {
        return Err(MpccError::CapExceeded { needed, cap });
    }
    let mut vertices: Vec<Vec<f64>> = Vec::new();
    for support in (0..active.len()).combinations(rho) {
        let cols: Vec<Vec<f64>> = (0..l)
            .map(|j| support.iter().map(|&s| sys[j][s]).collect())
            .collect();
        let sol = if rho == 0 {
            if t_zero {
                Some(Vec::new())
            } else {
                None
            }
        } else {
            linalg::solve_exact(&cols, &m.gb.t, 1e-9)
        };
        let Some(vals) = sol else { continue };
        if vals.iter().any(|&v| v > TOL_ACT) {
            continue;
        }
        let mut full = vec![0.0; r];
        for (pos, &s) in support.iter().enumerate() {
            full[active[s]] = vals[pos].min(0.0);
        }
        // Guard against inconsistent systems the support solve missed.
        let resid = linalg::sub(&linalg::vec_mat(&full, &m.gb.w_mat), &m.gb.t);
        if linalg::norm_inf(&resid) > 1e-7 {
            continue;
        }
        if !vertices
            .iter()
            .any(|old| linalg::norm_inf(&linalg::sub(old, &full)) <= 1e-9)
        {
            vertices.push(full);
        }
    }
    vertices.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(vertices)
}

/// Brute-force value of the bilevel problem by scanning a leader grid:
/// at each grid point the follower's optimal face is computed and the
/// leader cost minimized over it. Ground truth for low-dimensional
/// leaders; ties keep the lexicographically first grid point.
pub fn bilevel_grid_value(m: &Mpcc, resolution: f64) -> Result<(f64, Vec<f64>), MpccError> {
    let (k, _, _) = m.dims();
    if k > 3 {
        return Err(MpccError::Invalid(
            "grid search supports at most three leader variables".into(),
        ));
    }
    if !(resolution > 0.0) {
        return Err(MpccError::Invalid("resolution must be positive".into()));
    }
    let mut lows = Vec::with_capacity(k);
    let mut highs = Vec::with_capacity(k);
    for j in 0..k {
        for dir in [1.0, -1.0] {
            let mut obj = vec![0.0; k];
            obj[j] = dir;
            let mut p = LpProblem::new(obj);
            for (row, rhs) in m.gb.hu_mat.iter().zip(&m.gb.hu) {
                p.add_ineq(row.clone(), *rhs);
            }
            match solve_lp(&p)? {
                LpOutcome::Optimal(s) => {
                    if dir > 0.0 {
                        lows.push(s.value);
                    } else {
                        highs.push(-s.value);
                    }
                }
                LpOutcome::Infeasible => return Err(MpccError::Infeasible),
                LpOutcome::Unbounded => {
                    return Err(MpccError::Invalid("leader set is unbounded".into()))
                }
            }
        }
    }
    let axes: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let span = highs[j] - lows[j];
            if span <= resolution * 1e-6 {
                return vec![lows[j]];
            }
            let steps = (span / resolution).ceil() as usize;
            (0..=steps)
                .map(|i| lows[j] + span * i as f64 / steps as f64)
                .collect()
        })
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for u in axes.into_iter().multi_cartesian_product() {
        if !leader_feasible(m, &u) {
            continue;
        }
        let bu = linalg::mat_vec(&m.gb.b_mat, &u);
        let rhs: Vec<f64> = bu.iter().zip(&m.gb.b).map(|(a, b)| a + b).collect();
        let out = solve_over_argmin(&m.gb.t, &m.gb.h, &m.gb.w_mat, &rhs, ArgminDirection::Min)?;
        if let LpOutcome::Optimal(s) = out {
            let total = linalg::dot(&m.gb.g, &u) + s.value;
            let better = match &best {
                None => true,
                Some((bv, _)) => total < *bv,
            };
            if better {
                best = Some((total, u));
            }
        }
    }
    best.ok_or(MpccError::Infeasible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detequiv::{build_expectation, GenericBilevel, Provenance, VarOrigin};
    use crate::model::parse_instance;

    /// Smallest interesting instance: leader in `[0,1]`, one follower
    /// variable chasing the leader from below, complementarity pinning
    /// the follower to the bound.
    fn g1() -> Mpcc {
        build_kkt(GenericBilevel {
            g: vec![1.0],
            h: vec![1.0],
            t: vec![-1.0],
            w_mat: vec![vec![1.0]],
            b_mat: vec![vec![1.0]],
            b: vec![0.0],
            hu_mat: vec![vec![1.0], vec![-1.0]],
            hu: vec![1.0, 0.0],
            provenance: Provenance {
                u: vec![VarOrigin::X(0)],
                w: vec![VarOrigin::Y { scenario: 0, index: 0 }],
            },
        })
    }

    fn forced_follower() -> Mpcc {
        let inst = parse_instance(
            r#"{
              "n":1,"m":1,"s":2,"K":1,
              "c":[1],"q":[1],"d":[0],
              "A":[[1],[-1]],
              "T":[[0],[0]],
              "H":[[1],[-1]],
              "h":[1,0],
              "scenarios":[{"z":[1,-1],"pi":1.0}],
              "sense":"optimistic"
            }"#,
        )
        .unwrap();
        build_kkt(build_expectation(&inst).unwrap())
    }

    #[test]
    fn oracle_finds_the_origin_on_g1() {
        let m = g1();
        let (point, value) = global_oracle(&m).unwrap();
        assert!(value.abs() <= 1e-9);
        assert!(point.u[0].abs() <= 1e-9);
        assert!(point.w[0].abs() <= 1e-9);
        assert!((point.v[0] + 1.0).abs() <= 1e-9);
        assert!(point.primal_violation(&m) <= 1e-7);
        assert!(point.comp_residual(&m).abs() <= 1e-9);
    }

    #[test]
    fn relaxed_solve_uses_the_full_width() {
        let m = g1();
        let start = feasible_start(&m).unwrap();
        let (point, value) = solve_relaxed(&m, 0.1, &start).unwrap();
        assert!((value + 0.1).abs() <= 1e-9);
        assert!(point.u[0].abs() <= 1e-9);
        assert!((point.w[0] + 0.1).abs() <= 1e-9);
        assert!((point.v[0] + 1.0).abs() <= 1e-9);
    }

    #[test]
    fn path_converges_to_the_exact_solution_on_g1() {
        let m = g1();
        let (trace, point, value) = regularization_path(&m, EPS0, FACTOR, EPS_MIN, None).unwrap();
        assert!(value.abs() <= 1e-6);
        assert!(point.u[0].abs() <= 1e-6);
        assert!(point.w[0].abs() <= 1e-6);
        for pair in trace.steps.windows(2) {
            assert!(pair[1].eps < pair[0].eps);
        }
        assert_eq!(trace.steps.last().unwrap().eps, EPS_MIN);
        for step in &trace.steps {
            assert!(step.comp_residual <= step.eps * (1.0 + 1e-9) + 1e-15);
            assert!(step.point.primal_violation(&m) <= 1e-7);
        }
    }

    #[test]
    fn csv_trace_has_one_row_per_step() {
        let m = g1();
        let (trace, _, _) = regularization_path(&m, 0.1, 0.1, 1e-3, None).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "eps,objective,comp_residual,u0,w0,v0");
        assert_eq!(csv.lines().count(), trace.steps.len() + 1);
    }

    #[test]
    fn inactive_complementarity_keeps_the_path_constant() {
        let m = forced_follower();
        let (start, oracle_value) = global_oracle(&m).unwrap();
        let (trace, point, value) =
            regularization_path(&m, EPS0, FACTOR, EPS_MIN, Some(&start)).unwrap();
        assert!((value - oracle_value).abs() <= 1e-9);
        for step in &trace.steps {
            let d = linalg::norm_inf(&linalg::sub(&step.point.stacked(), &start.stacked()));
            assert!(d <= 1e-9, "path moved by {d}");
        }
        assert!((point.objective(&m) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn first_order_holds_at_the_path_end() {
        let m = g1();
        let (_, point, _) = regularization_path(&m, EPS0, FACTOR, EPS_MIN, None).unwrap();
        assert!(verify_first_order(&m, EPS_MIN, &point).unwrap());
    }

    #[test]
    fn multiplier_vertices_on_g1() {
        let m = g1();
        let sample = lambda_set_sample(&m, &[0.0], &[0.0], 1000).unwrap();
        assert_eq!(sample.len(), 1);
        assert!((sample[0][0] + 1.0).abs() <= 1e-9);
    }

    #[test]
    fn multiplier_sample_is_stable_along_a_convergent_pair_sequence() {
        let m = g1();
        let limit = lambda_set_sample(&m, &[0.0], &[0.0], 1000).unwrap();
        for l in [10.0, 100.0, 1000.0] {
            let s = lambda_set_sample(&m, &[1.0 / l], &[1.0 / l], 1000).unwrap();
            assert_eq!(s, limit);
        }
    }

    #[test]
    fn zero_cost_duals_collapse_to_the_origin_vertex() {
        let m = forced_follower();
        let sample = lambda_set_sample(&m, &[0.5], &[1.0], 1000).unwrap();
        assert_eq!(sample, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn grid_value_matches_the_oracle_on_g1() {
        let m = g1();
        let (value, u) = bilevel_grid_value(&m, 0.01).unwrap();
        let (_, oracle_value) = global_oracle(&m).unwrap();
        assert!((value - oracle_value).abs() <= 1e-9);
        assert!(u[0].abs() <= 1e-9);
    }

    #[test]
    fn row_cap_is_reported() {
        let m = forced_follower();
        match global_oracle_capped(&m, 1) {
            Err(MpccError::CapExceeded { needed, cap }) => {
                assert_eq!(needed, 2);
                assert_eq!(cap, 1);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn empty_leader_set_is_infeasible() {
        let mut m = g1();
        m.gb.hu = vec![-1.0, -1.0];
        assert!(matches!(global_oracle(&m), Err(MpccError::Infeasible)));
        assert!(matches!(feasible_start(&m), Err(MpccError::Infeasible)));
    }

    #[test]
    fn descending_leader_cost_is_unbounded() {
        let m = build_kkt(GenericBilevel {
            g: vec![-1.0],
            h: vec![0.0],
            t: vec![-1.0],
            w_mat: vec![vec![1.0]],
            b_mat: vec![vec![1.0]],
            b: vec![0.0],
            hu_mat: vec![vec![-1.0]],
            hu: vec![0.0],
            provenance: Provenance {
                u: vec![VarOrigin::X(0)],
                w: vec![VarOrigin::Y { scenario: 0, index: 0 }],
            },
        });
        assert!(matches!(global_oracle(&m), Err(MpccError::Unbounded)));
    }

    #[test]
    fn multistart_agrees_with_the_plain_path_on_g1() {
        let m = g1();
        let (_, _, value) = regularization_path_multistart(&m, EPS0, FACTOR, EPS_MIN).unwrap();
        assert!(value.abs() <= 1e-6);
    }
}
