//! Follower-side machinery: feasibility of the follower program, domain
//! certification, the basis catalog behind the closed-form stage cost,
//! per-scenario gradients, and kink detection.
//!
//! The central object is the augmented system `Â = (A, -A, I_s)` with
//! costs `q̂ = (q, -q, 0)` and `d̂ = (d, -d, 0)`: writing `y = y⁺ - y⁻`
//! and adding slacks turns `A y <= rhs` into `Â ŷ = rhs, ŷ >= 0`, so the
//! follower's optimal value is attained at a square regular column basis
//! `Â_B` that is dual feasible for `d̂`. Scanning that finite catalog
//! evaluates the stage cost
//! `f(x,z) = c^T x + min_B { q̂_B^T Â_B^{-1}(Tx+z) : Â_B^{-1}(Tx+z) >= 0 }`
//! without any LP solve, and exposes the gradient contribution
//! `Δ_B = q̂_B^T Â_B^{-1} T` of each basis.
//!
//! For the pessimistic sense the same scan runs with `max` in place of
//! `min`; this mirrors the optimistic identity but is a heuristic — the
//! kink tests below are likewise reused unchanged for that sense.

use crate::linalg::{self, Lu};
use crate::model::{Instance, Sense};
use crate::simplex::{
    self, ArgminDirection, LpOutcome, LpProblem, SimplexError, TOL_FEAS, TOL_TIE,
};
use itertools::Itertools;
use thiserror::Error;

/// Regularity cutoff for a candidate basis determinant (after row scaling).
pub const DET_TOL: f64 = 1e-10;
/// Cap on the number of column subsets enumerated when building a catalog.
pub const ENUMERATION_CAP: u128 = 200_000;
/// Residual tolerance for all hyperplane / kink membership tests.
pub const TOL_HYPER: f64 = 1e-8;
/// Two gradient contributions closer than this in max-norm are merged.
pub const TOL_MERGE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LowerLevelError {
    #[error("follower program infeasible at scenario {scenario}")]
    Infeasible { scenario: usize },
    #[error("follower stage cost unbounded at scenario {scenario}")]
    Unbounded { scenario: usize },
    #[error("no feasible basis at the queried point (tolerance fault)")]
    NoFeasibleBasis,
    #[error("basis enumeration needs {needed} candidates, above the cap {cap}")]
    CapExceeded { needed: u128, cap: u128 },
    #[error("stage cost domain certification failed at condition {condition}: {detail}")]
    DomEmpty { condition: u8, detail: String },
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// One dual-feasible regular basis of the augmented system.
#[derive(Debug, Clone)]
pub struct BasisEntry {
    /// Sorted column indices into the `2m+s` augmented columns.
    pub columns: Vec<usize>,
    /// `Â_B^{-1}`, row-major `s x s`.
    pub inverse: Vec<f64>,
    /// `q̂_B^T Â_B^{-1}`, length `s`; the stage cost slope in `z`.
    pub row_vec: Vec<f64>,
    /// `row_vec · T`, length `n`; the stage cost slope in `x`.
    pub delta: Vec<f64>,
}

/// Exhaustive catalog of dual-feasible bases plus the merged slope sets.
#[derive(Debug, Clone)]
pub struct BasisCatalog {
    pub m: usize,
    pub s: usize,
    pub n: usize,
    /// Augmented coefficient rows, `s x (2m+s)`.
    pub a_hat: Vec<Vec<f64>>,
    pub q_hat: Vec<f64>,
    pub d_hat: Vec<f64>,
    pub t_mat: Vec<Vec<f64>>,
    pub entries: Vec<BasisEntry>,
    /// Distinct `delta` values (max-norm merge).
    pub deltas: Vec<Vec<f64>>,
    /// Distinct `row_vec` values (max-norm merge).
    pub row_classes: Vec<Vec<f64>>,
}

/// Builds the catalog for an instance with the default enumeration cap.
pub fn enumerate_bases(inst: &Instance) -> Result<BasisCatalog, LowerLevelError> {
    enumerate_bases_capped(inst, ENUMERATION_CAP)
}

pub fn enumerate_bases_capped(
    inst: &Instance,
    cap: u128,
) -> Result<BasisCatalog, LowerLevelError> {
    build_catalog(&inst.a, &inst.q, &inst.d, &inst.t, cap)
}

/// Raw catalog builder; `a` is `s x m` (possibly `m = 0`), `t` is `s x n`.
pub(crate) fn build_catalog(
    a: &[Vec<f64>],
    q: &[f64],
    d: &[f64],
    t: &[Vec<f64>],
    cap: u128,
) -> Result<BasisCatalog, LowerLevelError> {
    let s = a.len();
    let m = q.len();
    let n = if t.is_empty() { 0 } else { t[0].len() };
    let width = 2 * m + s;
    let mut a_hat = vec![vec![0.0; width]; s];
    for (r, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            a_hat[r][j] = v;
            a_hat[r][m + j] = -v;
        }
        a_hat[r][2 * m + r] = 1.0;
    }
    let mut q_hat = vec![0.0; width];
    let mut d_hat = vec![0.0; width];
    for j in 0..m {
        q_hat[j] = q[j];
        q_hat[m + j] = -q[j];
        d_hat[j] = d[j];
        d_hat[m + j] = -d[j];
    }
    let needed = crate::model::binomial(width, s).unwrap_or(u128::MAX);
    if needed > cap {
        return Err(LowerLevelError::CapExceeded { needed, cap });
    }

    let mut entries = Vec::new();
    for cols in (0..width).combinations(s) {
        let mut flat = vec![0.0; s * s];
        for r in 0..s {
            for (i, &j) in cols.iter().enumerate() {
                flat[r * s + i] = a_hat[r][j];
            }
        }
        let lu = Lu::factor(&flat, s, DET_TOL);
        if lu.singular {
            continue;
        }
        let inverse: Vec<f64> = lu.inverse().into_iter().flatten().collect();
        // Dual feasibility: d̂_N - (d̂_B^T Â_B^{-1}) Â_N >= -tol on every
        // non-basic column.
        let mut wd = vec![0.0; s];
        for (i, &j) in cols.iter().enumerate() {
            for r in 0..s {
                wd[r] += d_hat[j] * inverse[i * s + r];
            }
        }
        let mut dual_ok = true;
        for j in 0..width {
            if cols.contains(&j) {
                continue;
            }
            let mut rc = d_hat[j];
            for r in 0..s {
                rc -= wd[r] * a_hat[r][j];
            }
            if rc < -TOL_FEAS {
                dual_ok = false;
                break;
            }
        }
        if !dual_ok {
            continue;
        }
        let mut row_vec = vec![0.0; s];
        for (i, &j) in cols.iter().enumerate() {
            for r in 0..s {
                row_vec[r] += q_hat[j] * inverse[i * s + r];
            }
        }
        let mut delta = vec![0.0; n];
        for r in 0..s {
            for c in 0..n {
                delta[c] += row_vec[r] * t[r][c];
            }
        }
        entries.push(BasisEntry {
            columns: cols,
            inverse,
            row_vec,
            delta,
        });
    }

    let mut deltas: Vec<Vec<f64>> = Vec::new();
    let mut row_classes: Vec<Vec<f64>> = Vec::new();
    for e in &entries {
        merge_distinct(&mut deltas, &e.delta);
        merge_distinct(&mut row_classes, &e.row_vec);
    }
    Ok(BasisCatalog {
        m,
        s,
        n,
        a_hat,
        q_hat,
        d_hat,
        t_mat: t.to_vec(),
        entries,
        deltas,
        row_classes,
    })
}

fn merge_distinct(list: &mut Vec<Vec<f64>>, v: &[f64]) {
    let dup = list
        .iter()
        .any(|w| w.iter().zip(v).all(|(a, b)| (a - b).abs() <= TOL_MERGE));
    if !dup {
        list.push(v.to_vec());
    }
}

/// Follower right-hand side `T x + Z_k`.
pub(crate) fn follower_rhs(inst: &Instance, x: &[f64], k: usize) -> Vec<f64> {
    let tx = linalg::mat_vec(&inst.t, x);
    tx.iter().zip(&inst.scenarios[k].z).map(|(a, b)| a + b).collect()
}

/// True iff the follower program at `(x, z)` has any feasible point.
pub fn membership_f(inst: &Instance, x: &[f64], z: &[f64]) -> Result<bool, LowerLevelError> {
    let tx = linalg::mat_vec(&inst.t, x);
    let rhs: Vec<f64> = tx.iter().zip(z).map(|(a, b)| a + b).collect();
    Ok(simplex::polytope_feasible(&inst.a, &rhs)?.is_some())
}

/// Witnesses that the stage cost has nonempty effective domain.
#[derive(Debug, Clone)]
pub struct DomCertificate {
    /// Leader point with a nonempty follower set at the first scenario.
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// Follower point attaining the (bounded) stage cost at `(x, z)`.
    pub y: Vec<f64>,
    /// Nonpositive multiplier with `A^T u = d`, certifying the follower
    /// objective is bounded below on its feasible set.
    pub dual_u: Vec<f64>,
    pub bounded: bool,
}

/// Certifies the three domain conditions: (1) some sampled leader point
/// has a nonempty follower set at the first scenario atom, (2) a
/// multiplier `u <= 0` with `A^T u = d` exists, and (3) the leader's
/// follower cost is bounded on the follower's optimal set there.
pub fn check_dom_f(inst: &Instance) -> Result<DomCertificate, LowerLevelError> {
    let samples = crate::model::leader_sample_points(inst).map_err(LowerLevelError::Simplex)?;
    let z = inst.scenarios[0].z.clone();
    let mut witness: Option<Vec<f64>> = None;
    for x in &samples {
        if membership_f(inst, x, &z)? {
            witness = Some(x.clone());
            break;
        }
    }
    let x = witness.ok_or_else(|| LowerLevelError::DomEmpty {
        condition: 1,
        detail: format!(
            "no sampled leader point ({} tried) has a nonempty follower set at the first atom",
            samples.len()
        ),
    })?;

    // Condition 2: u <= 0 with A^T u = d, via nu = -u >= 0.
    let s = inst.s;
    let mut p = LpProblem::new(vec![0.0; s]);
    for j in 0..inst.m {
        let row: Vec<f64> = (0..s).map(|r| -inst.a[r][j]).collect();
        p.add_eq(row, inst.d[j]);
    }
    p.lower_bounds = vec![Some(0.0); s];
    let dual_u = match simplex::solve_lp(&p)? {
        LpOutcome::Optimal(sol) => sol.x.iter().map(|v| -v).collect::<Vec<f64>>(),
        _ => {
            return Err(LowerLevelError::DomEmpty {
                condition: 2,
                detail: "no multiplier u <= 0 with A^T u = d exists".into(),
            })
        }
    };

    // Condition 3: the stage cost is attained (not unbounded) at the witness.
    let tx = linalg::mat_vec(&inst.t, &x);
    let rhs: Vec<f64> = tx.iter().zip(&z).map(|(a, b)| a + b).collect();
    let dir = match inst.sense {
        Sense::Optimistic => ArgminDirection::Min,
        Sense::Pessimistic => ArgminDirection::Max,
    };
    match simplex::solve_over_argmin(&inst.d, &inst.q, &inst.a, &rhs, dir)? {
        LpOutcome::Optimal(sol) => Ok(DomCertificate {
            x,
            z,
            y: sol.x,
            dual_u,
            bounded: true,
        }),
        LpOutcome::Unbounded => Err(LowerLevelError::DomEmpty {
            condition: 3,
            detail: "leader's follower cost unbounded over the follower argmin".into(),
        }),
        LpOutcome::Infeasible => Err(LowerLevelError::DomEmpty {
            condition: 1,
            detail: "witness follower set became infeasible (tolerance fault)".into(),
        }),
    }
}

/// Stage cost at `(x, Z_k)` by two chained LPs; returns the attaining `y`.
pub fn f_eval(inst: &Instance, x: &[f64], k: usize) -> Result<(f64, Vec<f64>), LowerLevelError> {
    let rhs = follower_rhs(inst, x, k);
    let dir = match inst.sense {
        Sense::Optimistic => ArgminDirection::Min,
        Sense::Pessimistic => ArgminDirection::Max,
    };
    match simplex::solve_over_argmin(&inst.d, &inst.q, &inst.a, &rhs, dir)? {
        LpOutcome::Optimal(sol) => Ok((linalg::dot(&inst.c, x) + sol.value, sol.x)),
        LpOutcome::Infeasible => Err(LowerLevelError::Infeasible { scenario: k }),
        LpOutcome::Unbounded => Err(LowerLevelError::Unbounded { scenario: k }),
    }
}

/// Stage cost at `(x, Z_k)` by scanning the basis catalog — no LP solve.
/// Independent oracle for [`f_eval`].
pub fn f_eval_basis(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
    k: usize,
) -> Result<f64, LowerLevelError> {
    let rhs = follower_rhs(inst, x, k);
    let best = scan_bases(catalog, &rhs, inst.sense).ok_or(LowerLevelError::NoFeasibleBasis)?;
    Ok(linalg::dot(&inst.c, x) + best.1)
}

/// Best `(entry index, q̂_B^T Â_B^{-1} rhs)` over primal-feasible bases;
/// ties keep the earliest entry (lexicographically smallest column set).
fn scan_bases(catalog: &BasisCatalog, rhs: &[f64], sense: Sense) -> Option<(usize, f64)> {
    let s = catalog.s;
    let mut best: Option<(usize, f64)> = None;
    for (idx, e) in catalog.entries.iter().enumerate() {
        let mut feasible = true;
        for i in 0..s {
            let mut w = 0.0;
            for j in 0..s {
                w += e.inverse[i * s + j] * rhs[j];
            }
            if w < -TOL_FEAS {
                feasible = false;
                break;
            }
        }
        if !feasible {
            continue;
        }
        let val = linalg::dot(&e.row_vec, rhs);
        let better = match (&best, sense) {
            (None, _) => true,
            (Some((_, b)), Sense::Optimistic) => val < b - 0.0,
            (Some((_, b)), Sense::Pessimistic) => val > b + 0.0,
        };
        if better {
            best = Some((idx, val));
        }
    }
    best
}

/// Kink flags for one scenario.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiffFlags {
    /// `(x, z)` sits on the boundary of the follower-feasibility region.
    pub on_f_boundary: bool,
    /// The follower right-hand side touches a face of some basis cone.
    pub on_z_boundary: bool,
    /// Two bases with distinct slope rows tie in value at this point.
    pub on_v_hyperplane: bool,
}

impl DiffFlags {
    pub fn any(&self) -> bool {
        self.on_f_boundary || self.on_z_boundary || self.on_v_hyperplane
    }
}

/// Per-scenario kink flags plus the aggregate verdict.
#[derive(Debug, Clone)]
pub struct DiffReport {
    pub scenarios: Vec<DiffFlags>,
    /// True iff no flag fires in any scenario.
    pub differentiable: bool,
}

/// Full pointwise analysis of one scenario at a leader point.
#[derive(Debug, Clone)]
pub struct PointAnalysis {
    pub flags: DiffFlags,
    /// With a target level: the stage cost sits on the excess kink
    /// `f = eta` while the cost actually varies there.
    pub excess_hit: bool,
    /// Index into the catalog entries of the attaining basis
    /// (lexicographically smallest on ties).
    pub attaining: usize,
    /// Stage cost from the catalog scan.
    pub value: f64,
}

/// Analyzes `(x, Z_k)`: strict-feasibility probe for the boundary flag,
/// catalog scan for the attaining basis and cone faces, row-class pair
/// residuals for value ties, and optionally the excess kink at `eta`.
pub fn analyze_point(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
    k: usize,
    eta: Option<f64>,
) -> Result<PointAnalysis, LowerLevelError> {
    let rhs = follower_rhs(inst, x, k);
    let s = catalog.s;

    // Strict feasibility probe: maximize the uniform slack delta in
    // A y + delta 1 <= rhs. Unbounded slack means deep interior.
    let mut probe = LpProblem::new({
        let mut obj = vec![0.0; inst.m + 1];
        obj[inst.m] = -1.0;
        obj
    });
    for (r, row) in inst.a.iter().enumerate() {
        let mut pr = row.clone();
        pr.push(1.0);
        probe.add_ineq(pr, rhs[r]);
    }
    let on_f_boundary = match simplex::solve_lp(&probe)? {
        LpOutcome::Optimal(sol) => {
            let delta = -sol.value;
            if delta < -TOL_HYPER {
                return Err(LowerLevelError::Infeasible { scenario: k });
            }
            delta <= TOL_HYPER
        }
        LpOutcome::Unbounded => false,
        LpOutcome::Infeasible => return Err(LowerLevelError::Infeasible { scenario: k }),
    };

    let (attaining, inner_val) =
        scan_bases(catalog, &rhs, inst.sense).ok_or(LowerLevelError::NoFeasibleBasis)?;
    let value = linalg::dot(&inst.c, x) + inner_val;

    let mut on_z_boundary = false;
    for e in &catalog.entries {
        let mut min_w = f64::INFINITY;
        for i in 0..s {
            let mut w = 0.0;
            for j in 0..s {
                w += e.inverse[i * s + j] * rhs[j];
            }
            min_w = min_w.min(w);
        }
        if (-TOL_HYPER..=TOL_HYPER).contains(&min_w) {
            on_z_boundary = true;
            break;
        }
    }

    let mut on_v_hyperplane = false;
    'pairs: for (i, r1) in catalog.row_classes.iter().enumerate() {
        for r2 in catalog.row_classes.iter().skip(i + 1) {
            let mut resid = 0.0;
            let mut sep = 0.0f64;
            for j in 0..s {
                let rj = r1[j] - r2[j];
                sep = sep.max(rj.abs());
                resid += rj * rhs[j];
            }
            if sep > TOL_MERGE && resid.abs() <= TOL_HYPER {
                on_v_hyperplane = true;
                break 'pairs;
            }
        }
    }

    let excess_hit = match eta {
        Some(eta) => {
            let e = &catalog.entries[attaining];
            let slope_row = linalg::norm_inf(&e.row_vec) > TOL_HYPER;
            let grad: Vec<f64> = inst.c.iter().zip(&e.delta).map(|(a, b)| a + b).collect();
            let slope_x = linalg::norm_inf(&grad) > TOL_HYPER;
            (value - eta).abs() <= TOL_HYPER && (slope_row || slope_x)
        }
        None => false,
    };

    Ok(PointAnalysis {
        flags: DiffFlags {
            on_f_boundary,
            on_z_boundary,
            on_v_hyperplane,
        },
        excess_hit,
        attaining,
        value,
    })
}

/// Aggregates [`analyze_point`] over all scenarios.
pub fn diff_report(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
) -> Result<DiffReport, LowerLevelError> {
    let mut scenarios = Vec::with_capacity(inst.num_scenarios);
    for k in 0..inst.num_scenarios {
        scenarios.push(analyze_point(inst, catalog, x, k, None)?.flags);
    }
    let differentiable = scenarios.iter().all(|f| !f.any());
    Ok(DiffReport {
        scenarios,
        differentiable,
    })
}

/// Stage cost gradient in `x` at `(x, Z_k)`: `c + Δ` for the attaining
/// basis. Always returned; the flags report whether the point is clean.
pub fn grad_f(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
    k: usize,
) -> Result<(Vec<f64>, DiffFlags), LowerLevelError> {
    let analysis = analyze_point(inst, catalog, x, k, None)?;
    let e = &catalog.entries[analysis.attaining];
    let grad: Vec<f64> = inst.c.iter().zip(&e.delta).map(|(a, b)| a + b).collect();
    Ok((grad, analysis.flags))
}

/// True iff the given basis is primal feasible at `(x, Z_k)` and attains
/// the stage cost there within the tie tolerance.
pub fn region_membership(
    inst: &Instance,
    catalog: &BasisCatalog,
    basis_id: usize,
    x: &[f64],
    k: usize,
) -> Result<bool, LowerLevelError> {
    let rhs = follower_rhs(inst, x, k);
    let s = catalog.s;
    let e = &catalog.entries[basis_id];
    for i in 0..s {
        let mut w = 0.0;
        for j in 0..s {
            w += e.inverse[i * s + j] * rhs[j];
        }
        if w < -TOL_FEAS {
            return Ok(false);
        }
    }
    let candidate = linalg::dot(&inst.c, x) + linalg::dot(&e.row_vec, &rhs);
    let (f, _) = f_eval(inst, x, k)?;
    Ok((candidate - f).abs() <= TOL_TIE * (1.0 + f.abs()))
}

/// Catalog-derived Lipschitz constant for the stage cost in `(x, z)`
/// jointly: `‖c‖ + max_B ‖q̂_B^T Â_B^{-1}‖ (‖T‖ + 1)`.
pub fn lipschitz_bound(inst: &Instance, catalog: &BasisCatalog) -> f64 {
    let max_row = catalog
        .entries
        .iter()
        .map(|e| linalg::norm2(&e.row_vec))
        .fold(0.0f64, f64::max);
    linalg::norm2(&inst.c) + max_row * (linalg::frobenius(&inst.t) + 1.0)
}
