//! Risk functionals over scenario cost profiles, their gradients, and a
//! first-order stationarity check for the leader problem.
//!
//! All reductions run over a canonically sorted copy of the
//! `(value, probability)` pairs, so any reordering of scenarios with the
//! same induced distribution produces bit-identical results.
//!
//! Gradients are closed-form for the expectation, the first-order
//! expected excess, and the first-order semideviation; the kink flags
//! from the follower analysis are conservative (a flagged point may
//! still be differentiable — notably when every tied basis shares one
//! slope), and the `differentiable` output gates on them plus the
//! measure-specific kink tests.

use crate::linalg;
use crate::lowerlevel::{
    self, analyze_point, BasisCatalog, DiffFlags, LowerLevelError, TOL_HYPER, TOL_MERGE,
};
use crate::model::{Instance, RiskMeasure, Sense};
use crate::simplex::{self, LpOutcome, LpProblem, TOL_FEAS, TOL_TIE};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("no closed-form gradient for measure {measure}; use finite differences")]
    Unsupported { measure: String },
    #[error("risk functional not differentiable at the queried point")]
    NotDifferentiable,
    #[error(transparent)]
    Lower(#[from] LowerLevelError),
}

/// Scenario cost profile at a leader point, with per-scenario slope and
/// kink data attached.
#[derive(Debug, Clone)]
pub struct ScenarioProfile {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
    pub diffs: Vec<DiffFlags>,
    /// Attaining-basis slope `c + Δ_k` summand source (the `Δ_k` part).
    pub deltas: Vec<Vec<f64>>,
}

impl ScenarioProfile {
    /// Bare profile for measure-only computations.
    pub fn from_values(values: Vec<f64>, probs: Vec<f64>) -> Self {
        let k = values.len();
        assert_eq!(k, probs.len());
        ScenarioProfile {
            x: Vec::new(),
            values,
            probs,
            diffs: vec![DiffFlags::default(); k],
            deltas: Vec::new(),
        }
    }
}

/// Builds the profile at `x`: stage cost value, kink flags, and attaining
/// slope for every scenario.
pub fn scenario_profile(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
) -> Result<ScenarioProfile, RiskError> {
    let mut values = Vec::with_capacity(inst.num_scenarios);
    let mut diffs = Vec::with_capacity(inst.num_scenarios);
    let mut deltas = Vec::with_capacity(inst.num_scenarios);
    for k in 0..inst.num_scenarios {
        let a = analyze_point(inst, catalog, x, k, None)?;
        values.push(a.value);
        diffs.push(a.flags);
        deltas.push(catalog.entries[a.attaining].delta.clone());
    }
    Ok(ScenarioProfile {
        x: x.to_vec(),
        values,
        probs: inst.probabilities(),
        diffs,
        deltas,
    })
}

/// Stage cost values only (catalog scan, no probes) — the cheap path for
/// finite differencing.
pub fn profile_values(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
) -> Result<Vec<f64>, RiskError> {
    let mut values = Vec::with_capacity(inst.num_scenarios);
    for k in 0..inst.num_scenarios {
        values.push(lowerlevel::f_eval_basis(inst, catalog, x, k)?);
    }
    Ok(values)
}

/// Canonically sorted `(value, prob)` pairs; every reduction below runs
/// in this order so equal-law profiles evaluate bit-identically.
fn ordered_pairs(profile: &ScenarioProfile) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = profile
        .values
        .iter()
        .copied()
        .zip(profile.probs.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs
}

/// Applies the measure to the profile.
pub fn eval_risk(profile: &ScenarioProfile, measure: RiskMeasure) -> f64 {
    match measure {
        RiskMeasure::Expectation => ordered_pairs(profile).iter().map(|(v, p)| p * v).sum(),
        RiskMeasure::ExpectedExcess { eta, p } => {
            let pairs = ordered_pairs(profile);
            if p == 1.0 {
                pairs.iter().map(|(v, pi)| pi * (v - eta).max(0.0)).sum()
            } else {
                let acc: f64 = pairs
                    .iter()
                    .map(|(v, pi)| pi * (v - eta).max(0.0).powf(p))
                    .sum();
                acc.powf(1.0 / p)
            }
        }
        RiskMeasure::SemiDeviation { rho, p } => {
            let mean = eval_risk(profile, RiskMeasure::Expectation);
            mean + rho * eval_risk(profile, RiskMeasure::ExpectedExcess { eta: mean, p })
        }
        RiskMeasure::CVaR { alpha } => cvar_breakpoint_min(profile, alpha).1,
    }
}

/// Minimizes `eta + (1-alpha)^{-1} E[(V - eta)_+]` over `eta`. The
/// objective is piecewise linear with breakpoints exactly at the profile
/// values, so scanning them is exact; ties return the smallest `eta`.
pub fn cvar_breakpoint_min(profile: &ScenarioProfile, alpha: f64) -> (f64, f64) {
    assert!(0.0 < alpha && alpha < 1.0, "alpha must lie in (0,1)");
    let pairs = ordered_pairs(profile);
    let inv = 1.0 / (1.0 - alpha);
    let mut best: Option<(f64, f64)> = None;
    for &(eta, _) in &pairs {
        if let Some((prev_eta, _)) = best {
            if eta == prev_eta {
                continue;
            }
        }
        let excess: f64 = pairs.iter().map(|(v, pi)| pi * (v - eta).max(0.0)).sum();
        let phi = eta + inv * excess;
        let improves = match best {
            None => true,
            Some((_, b)) => phi < b,
        };
        if improves {
            best = Some((eta, phi));
        }
    }
    best.expect("profile has at least one scenario")
}

/// Closed-form gradient of `x -> eval_risk(scenario_profile(x), measure)`
/// together with a conservative differentiability verdict.
///
/// Supported: expectation, expected excess with `p = 1`, semideviation
/// with `p = 1`. The rest have no closed form here and error out.
pub fn grad_q(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
    measure: RiskMeasure,
) -> Result<(Vec<f64>, bool), RiskError> {
    let n = inst.n;
    let probs = inst.probabilities();
    match measure {
        RiskMeasure::Expectation => {
            let mut grad = inst.c.clone();
            let mut clean = true;
            for k in 0..inst.num_scenarios {
                let a = analyze_point(inst, catalog, x, k, None)?;
                let delta = &catalog.entries[a.attaining].delta;
                for j in 0..n {
                    grad[j] += probs[k] * delta[j];
                }
                clean &= !a.flags.any();
            }
            Ok((grad, clean))
        }
        RiskMeasure::ExpectedExcess { eta, p } if p == 1.0 => {
            let mut grad = vec![0.0; n];
            let mut clean = true;
            for k in 0..inst.num_scenarios {
                let a = analyze_point(inst, catalog, x, k, Some(eta))?;
                if a.value >= eta - TOL_HYPER {
                    let delta = &catalog.entries[a.attaining].delta;
                    for j in 0..n {
                        grad[j] += probs[k] * (inst.c[j] + delta[j]);
                    }
                }
                clean &= !a.flags.any() && !a.excess_hit;
            }
            Ok((grad, clean))
        }
        RiskMeasure::SemiDeviation { rho, p } if p == 1.0 => {
            let values = profile_values(inst, catalog, x)?;
            let profile = ScenarioProfile::from_values(values.clone(), probs.clone());
            let mean = eval_risk(&profile, RiskMeasure::Expectation);

            let mut mean_grad = inst.c.clone();
            let mut excess_grad = vec![0.0; n];
            let mut tail_prob = 0.0;
            let mut clean = mean.abs() > TOL_HYPER;
            for k in 0..inst.num_scenarios {
                let a = analyze_point(inst, catalog, x, k, Some(mean))?;
                let delta = &catalog.entries[a.attaining].delta;
                for j in 0..n {
                    mean_grad[j] += probs[k] * delta[j];
                }
                if a.value >= mean - TOL_HYPER {
                    tail_prob += probs[k];
                    for j in 0..n {
                        excess_grad[j] += probs[k] * (inst.c[j] + delta[j]);
                    }
                }
                clean &= !a.flags.any() && !a.excess_hit;
            }
            // Chain rule: the excess target is itself the moving mean, so
            // the tail mass re-weights the mean gradient.
            let grad: Vec<f64> = (0..n)
                .map(|j| mean_grad[j] + rho * (excess_grad[j] - tail_prob * mean_grad[j]))
                .collect();
            Ok((grad, clean))
        }
        other => Err(RiskError::Unsupported {
            measure: other.to_string(),
        }),
    }
}

/// Central finite differences of the risk value in `x`; the fallback
/// gradient for measures without a closed form.
pub fn fd_gradient(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
    measure: RiskMeasure,
    h: f64,
) -> Result<Vec<f64>, RiskError> {
    let probs = inst.probabilities();
    let mut grad = vec![0.0; inst.n];
    let mut xp = x.to_vec();
    for j in 0..inst.n {
        xp[j] = x[j] + h;
        let up = eval_risk(
            &ScenarioProfile::from_values(profile_values(inst, catalog, &xp)?, probs.clone()),
            measure,
        );
        xp[j] = x[j] - h;
        let dn = eval_risk(
            &ScenarioProfile::from_values(profile_values(inst, catalog, &xp)?, probs.clone()),
            measure,
        );
        xp[j] = x[j];
        grad[j] = (up - dn) / (2.0 * h);
    }
    Ok(grad)
}

/// First-order report for the expectation objective at a leader point.
#[derive(Debug, Clone)]
pub struct StationarityReport {
    /// `Q' d >= 0` for every feasible direction `d` at `x` (within tol).
    pub necessary_cond_holds: bool,
    /// `-c` lies outside the convex hull of the distinct slope set, so no
    /// leader-interior point can be stationary.
    pub interior_excluded: bool,
    pub gradient: Vec<f64>,
}

/// Checks the first-order necessary condition for the expectation
/// objective at `x`, and whether interior stationary points are excluded
/// outright.
///
/// Requires the gradient to actually exist at `x`: every scenario's
/// value-tied bases must share one slope. This is sharper than the
/// conservative kink flags — a flagged value tie is harmless when the
/// tied bases agree in slope.
pub fn stationarity_check(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
) -> Result<StationarityReport, RiskError> {
    let probs = inst.probabilities();
    let mut gradient = inst.c.clone();
    for k in 0..inst.num_scenarios {
        let (delta, unique) = attaining_delta(inst, catalog, x, k)?;
        if !unique {
            return Err(RiskError::NotDifferentiable);
        }
        for j in 0..inst.n {
            gradient[j] += probs[k] * delta[j];
        }
    }

    // Feasible-direction LP: min Q'd over the tangent cone of the leader
    // polyhedron at x, boxed to [-1,1]^n.
    let mut p = LpProblem::new(gradient.clone());
    for (row, &r) in inst.h_mat.iter().zip(&inst.h_rhs) {
        let slack = r - linalg::dot(row, x);
        if slack.abs() <= 1e-7 * (1.0 + r.abs()) {
            p.add_ineq(row.clone(), 0.0);
        }
    }
    for j in 0..inst.n {
        let mut row = vec![0.0; inst.n];
        row[j] = 1.0;
        p.add_ineq(row, 1.0);
    }
    p.lower_bounds = vec![Some(-1.0); inst.n];
    let necessary_cond_holds = match simplex::solve_lp(&p).map_err(LowerLevelError::Simplex)? {
        LpOutcome::Optimal(sol) => sol.value >= -TOL_FEAS * (1.0 + linalg::norm2(&gradient)),
        LpOutcome::Unbounded => false,
        LpOutcome::Infeasible => unreachable!("direction LP contains d = 0"),
    };

    // Convex-combination feasibility: lambda >= 0, sum lambda = 1,
    // sum lambda_i D_i = -c. Infeasible => no interior stationary point.
    let dcount = catalog.deltas.len();
    let mut hull = LpProblem::new(vec![0.0; dcount]);
    for j in 0..inst.n {
        let row: Vec<f64> = catalog.deltas.iter().map(|d| d[j]).collect();
        hull.add_eq(row, -inst.c[j]);
    }
    hull.add_eq(vec![1.0; dcount], 1.0);
    hull.lower_bounds = vec![Some(0.0); dcount];
    let interior_excluded = match simplex::solve_lp(&hull).map_err(LowerLevelError::Simplex)? {
        LpOutcome::Optimal(_) => false,
        LpOutcome::Infeasible => true,
        LpOutcome::Unbounded => unreachable!("feasibility problem with zero objective"),
    };

    Ok(StationarityReport {
        necessary_cond_holds,
        interior_excluded,
        gradient,
    })
}

/// The attaining slope at `(x, Z_k)` plus whether every value-tied basis
/// shares it — the exact existence test for the scenario gradient.
fn attaining_delta(
    inst: &Instance,
    catalog: &BasisCatalog,
    x: &[f64],
    k: usize,
) -> Result<(Vec<f64>, bool), RiskError> {
    let rhs = lowerlevel::follower_rhs(inst, x, k);
    let s = catalog.s;
    let mut vals: Vec<(f64, &Vec<f64>)> = Vec::new();
    for e in &catalog.entries {
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
        if feasible {
            vals.push((linalg::dot(&e.row_vec, &rhs), &e.delta));
        }
    }
    if vals.is_empty() {
        return Err(RiskError::Lower(LowerLevelError::NoFeasibleBasis));
    }
    let best = match inst.sense {
        Sense::Optimistic => vals.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min),
        Sense::Pessimistic => vals.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max),
    };
    let tied: Vec<&Vec<f64>> = vals
        .iter()
        .filter(|(v, _)| (v - best).abs() <= TOL_TIE * (1.0 + best.abs()))
        .map(|(_, d)| *d)
        .collect();
    let first = tied[0];
    let unique = tied
        .iter()
        .all(|d| d.iter().zip(first.iter()).all(|(a, b)| (a - b).abs() <= TOL_MERGE));
    Ok((first.clone(), unique))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowerlevel::enumerate_bases;
    use crate::model::parse_instance;

    fn profile(values: &[f64], probs: &[f64]) -> ScenarioProfile {
        ScenarioProfile::from_values(values.to_vec(), probs.to_vec())
    }

    fn i1_two_scenarios() -> Instance {
        parse_instance(
            r#"{
              "n":1,"m":1,"s":2,"K":2,
              "c":[1],"q":[1],"d":[0],
              "A":[[1],[-1]],
              "T":[[0],[0]],
              "H":[[1],[-1]],
              "h":[1,0],
              "scenarios":[{"z":[0,0],"pi":0.5},{"z":[2,-2],"pi":0.5}],
              "sense":"optimistic"
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn the_four_measures_on_a_two_point_profile() {
        let pr = profile(&[1.0, 3.0], &[0.5, 0.5]);
        assert_eq!(eval_risk(&pr, RiskMeasure::Expectation), 2.0);
        assert_eq!(
            eval_risk(&pr, RiskMeasure::ExpectedExcess { eta: 2.0, p: 1.0 }),
            0.5
        );
        assert_eq!(
            eval_risk(&pr, RiskMeasure::SemiDeviation { rho: 0.5, p: 1.0 }),
            2.25
        );
        let ee2 = eval_risk(&pr, RiskMeasure::ExpectedExcess { eta: 2.0, p: 2.0 });
        assert!((ee2 - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cvar_scan_picks_smallest_tied_target() {
        let pr = profile(&[1.0, 3.0], &[0.5, 0.5]);
        let (eta, val) = cvar_breakpoint_min(&pr, 0.5);
        assert_eq!((eta, val), (1.0, 3.0));
        let (eta, val) = cvar_breakpoint_min(&pr, 0.25);
        assert_eq!(eta, 1.0);
        assert!((val - 7.0 / 3.0).abs() < 1e-12);
        let (_, v) = cvar_breakpoint_min(&profile(&[5.0, 5.0], &[0.3, 0.7]), 0.9);
        assert_eq!(v, 5.0);
    }

    #[test]
    fn semideviation_reuses_the_expectation_expression_tree() {
        let pr = profile(&[0.3, 1.7, -2.0], &[0.2, 0.5, 0.3]);
        let sd = eval_risk(&pr, RiskMeasure::SemiDeviation { rho: 0.4, p: 1.0 });
        let mean = eval_risk(&pr, RiskMeasure::Expectation);
        let ee = eval_risk(&pr, RiskMeasure::ExpectedExcess { eta: mean, p: 1.0 });
        assert_eq!(sd.to_bits(), (mean + 0.4 * ee).to_bits());
    }

    #[test]
    fn equal_probability_permutation_is_bit_invariant() {
        let a = profile(&[0.1, -0.7, 2.3, 0.1], &[0.25; 4]);
        let b = profile(&[2.3, 0.1, 0.1, -0.7], &[0.25; 4]);
        for m in [
            RiskMeasure::Expectation,
            RiskMeasure::ExpectedExcess { eta: 0.0, p: 1.0 },
            RiskMeasure::SemiDeviation { rho: 0.3, p: 1.0 },
            RiskMeasure::CVaR { alpha: 0.4 },
        ] {
            assert_eq!(eval_risk(&a, m).to_bits(), eval_risk(&b, m).to_bits());
        }
    }

    #[test]
    fn profile_collects_stage_costs_per_scenario() {
        let inst = i1_two_scenarios();
        let cat = enumerate_bases(&inst).unwrap();
        let pr = scenario_profile(&inst, &cat, &[0.0]).unwrap();
        assert!((pr.values[0] - 0.0).abs() < 1e-9);
        assert!((pr.values[1] - 2.0).abs() < 1e-9);
        assert_eq!(pr.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn profile_reports_the_offending_scenario_when_infeasible() {
        let inst = parse_instance(
            r#"{
              "n":1,"m":1,"s":2,"K":2,
              "c":[1],"q":[1],"d":[0],
              "A":[[1],[-1]],
              "T":[[0],[0]],
              "H":[[1],[-1]],
              "h":[1,0],
              "scenarios":[{"z":[1,-1],"pi":0.5},{"z":[-1,0],"pi":0.5}],
              "sense":"optimistic"
            }"#,
        )
        .unwrap();
        let cat = enumerate_bases(&inst).unwrap();
        match scenario_profile(&inst, &cat, &[0.0]) {
            Err(RiskError::Lower(LowerLevelError::Infeasible { scenario: 1 })) => {}
            other => panic!("expected scenario-1 infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn expectation_gradient_on_decoupled_instance() {
        let inst = i1_two_scenarios();
        let cat = enumerate_bases(&inst).unwrap();
        let (g, _) = grad_q(&inst, &cat, &[0.5], RiskMeasure::Expectation).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn excess_gradient_counts_only_the_tail() {
        let inst = i1_two_scenarios();
        let cat = enumerate_bases(&inst).unwrap();
        // Values at x = 0.5 are (0.5, 2.5); only the second exceeds 2.
        let (g, _) = grad_q(
            &inst,
            &cat,
            &[0.5],
            RiskMeasure::ExpectedExcess { eta: 2.0, p: 1.0 },
        )
        .unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn semideviation_gradient_balances_tail_and_mean() {
        let inst = i1_two_scenarios();
        let cat = enumerate_bases(&inst).unwrap();
        let (g, _) = grad_q(
            &inst,
            &cat,
            &[0.5],
            RiskMeasure::SemiDeviation { rho: 0.5, p: 1.0 },
        )
        .unwrap();
        // Q_SD(x) = x + 1.25 on (0,1): slope exactly 1.
        assert!((g[0] - 1.0).abs() < 1e-12);
        let fd = fd_gradient(
            &inst,
            &cat,
            &[0.5],
            RiskMeasure::SemiDeviation { rho: 0.5, p: 1.0 },
            1e-6,
        )
        .unwrap();
        assert!((fd[0] - g[0]).abs() < 1e-4);
    }

    #[test]
    fn unsupported_measures_are_routed_to_finite_differences() {
        let inst = i1_two_scenarios();
        let cat = enumerate_bases(&inst).unwrap();
        assert!(matches!(
            grad_q(&inst, &cat, &[0.5], RiskMeasure::CVaR { alpha: 0.5 }),
            Err(RiskError::Unsupported { .. })
        ));
        assert!(matches!(
            grad_q(
                &inst,
                &cat,
                &[0.5],
                RiskMeasure::ExpectedExcess { eta: 1.0, p: 2.0 }
            ),
            Err(RiskError::Unsupported { .. })
        ));
        let fd = fd_gradient(&inst, &cat, &[0.5], RiskMeasure::CVaR { alpha: 0.5 }, 1e-6).unwrap();
        // CVaR_0.5 of (x, x+2) is x + 2: slope 1.
        assert!((fd[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn boundary_minimizer_is_stationary_and_interior_is_excluded() {
        let inst = i1_two_scenarios();
        let cat = enumerate_bases(&inst).unwrap();
        let rep = stationarity_check(&inst, &cat, &[0.0]).unwrap();
        assert!(rep.necessary_cond_holds);
        assert!(rep.interior_excluded);
        assert!((rep.gradient[0] - 1.0).abs() < 1e-12);
        // At an interior point the descent direction d = -1 kills the
        // necessary condition.
        let rep_mid = stationarity_check(&inst, &cat, &[0.5]).unwrap();
        assert!(!rep_mid.necessary_cond_holds);
    }

    #[test]
    fn zero_leader_cost_keeps_interior_candidates() {
        let inst = parse_instance(
            r#"{
              "n":1,"m":1,"s":2,"K":1,
              "c":[0],"q":[1],"d":[0],
              "A":[[1],[-1]],
              "T":[[0],[0]],
              "H":[[1],[-1]],
              "h":[1,0],
              "scenarios":[{"z":[1,-1],"pi":1.0}],
              "sense":"optimistic"
            }"#,
        )
        .unwrap();
        let cat = enumerate_bases(&inst).unwrap();
        let rep = stationarity_check(&inst, &cat, &[0.5]).unwrap();
        assert!(!rep.interior_excluded);
        assert!(rep.necessary_cond_holds);
    }
}
