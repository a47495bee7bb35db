//! Distribution-perturbation experiments and the genericity sampler.
//!
//! The stability experiment solves one leader problem per member of a
//! distribution family plus the declared weak limit, then compares the
//! value sequence against the limit value: the interesting phenomenon is
//! a family whose values stay bounded away from the limit value even
//! though the distributions converge weakly (mass escaping along an
//! unbounded support direction), versus families with uniformly bounded
//! support, where the values do converge.
//!
//! The genericity sampler estimates how often randomly perturbed scenario
//! atoms land on one of the nondifferentiability hyperplanes detected by
//! [`crate::lowerlevel::analyze_point`]; the hyperplanes are Lebesgue-null,
//! so any repeated hit at positive noise indicates a tolerance problem.

use crate::detequiv::{self, DetequivError};
use crate::lowerlevel::{self, LowerLevelError};
use crate::model::{Instance, ModelError, RiskMeasure, Scenario, Sense};
use crate::mpcc::{self, MpccError};
use crate::risk::{self, RiskError, ScenarioProfile};
use crate::simplex::{solve_lp, LpOutcome, LpProblem, SimplexError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fmt::Write as _;
use thiserror::Error;

/// Documented default scale of the uniform atom noise.
pub const NOISE_SCALE: f64 = 0.1;
/// Leader-grid fallback resolution per dimension.
pub const GRID_RESOLUTION: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("family member l={l}: {message}")]
    Member { l: u64, message: String },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lower(#[from] LowerLevelError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Detequiv(#[from] DetequivError),
    #[error(transparent)]
    Mpcc(#[from] MpccError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// One finite discrete distribution on the scenario space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Distribution {
    pub fn dirac(atom: Vec<f64>) -> Distribution {
        Distribution {
            atoms: vec![atom],
            weights: vec![1.0],
        }
    }

    pub fn validate(&self, s: usize) -> Result<(), HarnessError> {
        if self.atoms.len() != self.weights.len() || self.atoms.is_empty() {
            return Err(HarnessError::Invalid(
                "distribution needs matching, nonempty atom and weight lists".into(),
            ));
        }
        if self.atoms.iter().any(|a| a.len() != s) {
            return Err(HarnessError::Invalid(format!(
                "every atom must have dimension {s}"
            )));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(HarnessError::Invalid(
                "weights must be positive and sum to one".into(),
            ));
        }
        Ok(())
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(z, pi)| Scenario {
                z: z.clone(),
                pi: *pi,
            })
            .collect()
    }
}

/// A distribution per index `l`, with an optional declared weak limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember {
    pub l: u64,
    pub distribution: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFamily {
    pub members: Vec<FamilyMember>,
    pub limit: Option<Distribution>,
}

impl DistributionFamily {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("family serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<DistributionFamily, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Invalid(e.to_string()))
    }
}

/// Mass `1/l` rides an atom escaping to infinity while the bulk sits at
/// the origin: weak limit is the origin point mass, yet every member's
/// optimal value stays put. Atoms use the two-row encoding `(zeta, -zeta)`
/// that pins the follower to `zeta`.
pub fn escaping_tail_family(ls: &[u64]) -> DistributionFamily {
    two_atom_family(ls, |l| l as f64)
}

/// Same construction with the escaping atom clipped at 10, so the support
/// stays uniformly bounded and the values do converge.
pub fn clipped_tail_family(ls: &[u64]) -> DistributionFamily {
    two_atom_family(ls, |l| (l as f64).min(10.0))
}

fn two_atom_family(ls: &[u64], tail: impl Fn(u64) -> f64) -> DistributionFamily {
    let members = ls
        .iter()
        .map(|&l| {
            let lf = l as f64;
            let zeta = tail(l);
            FamilyMember {
                l,
                distribution: Distribution {
                    atoms: vec![vec![0.0, 0.0], vec![zeta, -zeta]],
                    weights: vec![1.0 - 1.0 / lf, 1.0 / lf],
                },
            }
        })
        .collect();
    DistributionFamily {
        members,
        limit: Some(Distribution::dirac(vec![0.0, 0.0])),
    }
}

/// The same distribution for every index; its own limit.
pub fn constant_family(ls: &[u64], distribution: Distribution) -> DistributionFamily {
    DistributionFamily {
        members: ls
            .iter()
            .map(|&l| FamilyMember {
                l,
                distribution: distribution.clone(),
            })
            .collect(),
        limit: Some(distribution),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Converges,
    Gap { limit: f64, tail: f64 },
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Converges => write!(f, "converges"),
            Verdict::Gap { limit, tail } => write!(f, "gap({limit},{tail})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilityRow {
    pub l: u64,
    pub value: f64,
    pub argmin_sample: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StabilityTable {
    pub rows: Vec<StabilityRow>,
    pub limit_value: Option<f64>,
    pub limit_argmin: Option<Vec<f64>>,
    pub verdict: Verdict,
}

impl StabilityTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("l,value,argmin_sample,verdict\n");
        let sample = |xs: &[f64]| {
            xs.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                row.l,
                row.value,
                sample(&row.argmin_sample),
                self.verdict
            );
        }
        if let Some(lv) = self.limit_value {
            let _ = writeln!(
                out,
                "limit,{},{},{}",
                lv,
                sample(self.limit_argmin.as_deref().unwrap_or(&[])),
                self.verdict
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("stability experiment over {} members", self.rows.len());
        if let (Some(first), Some(last)) = (self.rows.first(), self.rows.last()) {
            let _ = write!(
                out,
                "; values {} (l={}) .. {} (l={})",
                first.value, first.l, last.value, last.l
            );
        }
        if let Some(lv) = self.limit_value {
            let _ = write!(out, "; limit value {lv}");
        }
        let _ = write!(out, "; verdict {}", self.verdict);
        out
    }
}

/// Best available solve for a single instance under a measure: the exact
/// pattern oracle on the matching single-level build when it applies
/// (optimistic sense, order one, row count within the enumeration cap),
/// the outer target search for tail averages, and the leader grid
/// otherwise.
pub fn solve_instance(inst: &Instance, measure: RiskMeasure) -> Result<(f64, Vec<f64>), HarnessError> {
    let cap = mpcc::DEFAULT_PATTERN_CAP as usize;
    let kk = inst.num_scenarios;
    let s = inst.s;
    let oracle = |gb| -> Result<(f64, Vec<f64>), HarnessError> {
        let m = mpcc::build_kkt(gb);
        let (point, value) = mpcc::global_oracle(&m)?;
        Ok((value, m.gb.extract_leader(&point.u)))
    };
    match (inst.sense, measure) {
        (Sense::Optimistic, RiskMeasure::Expectation) if kk * s <= cap => {
            oracle(detequiv::build_expectation(inst)?)
        }
        (Sense::Optimistic, RiskMeasure::ExpectedExcess { eta, p })
            if p == 1.0 && kk * (s + 2) <= cap =>
        {
            oracle(detequiv::build_expected_excess(inst, eta)?)
        }
        (Sense::Optimistic, RiskMeasure::SemiDeviation { rho, p })
            if p == 1.0 && kk * s + 2 * kk <= cap =>
        {
            oracle(detequiv::build_semideviation(inst, rho)?)
        }
        (Sense::Optimistic, RiskMeasure::CVaR { alpha }) if kk * (s + 2) <= cap => {
            let sol = detequiv::solve_cvar(inst, alpha, mpcc::DEFAULT_PATTERN_CAP)?;
            Ok((sol.value, sol.x))
        }
        _ => grid_minimize_risk(inst, measure, GRID_RESOLUTION),
    }
}

/// Solves every family member and the declared limit, ordered by `l`.
/// The verdict compares the value sequence against the limit value (or
/// the final member when no limit is declared): convergence means the
/// tail gap has closed, or the gaps shrink monotonically and the tail
/// gap is at most half the initial one.
pub fn stability_experiment(
    template: &Instance,
    family: &DistributionFamily,
    measure: RiskMeasure,
) -> Result<StabilityTable, HarnessError> {
    if family.members.is_empty() {
        return Err(HarnessError::Invalid("family has no members".into()));
    }
    let mut members = family.members.clone();
    members.sort_by_key(|m| m.l);
    let mut jobs = Vec::with_capacity(members.len());
    for member in &members {
        member.distribution.validate(template.s)?;
        let inst = template
            .with_scenarios(member.distribution.scenarios())
            .map_err(|e| HarnessError::Member {
                l: member.l,
                message: e.to_string(),
            })?;
        jobs.push((member.l, inst));
    }
    let solved: Vec<Result<(f64, Vec<f64>), HarnessError>> = jobs
        .par_iter()
        .map(|(_, inst)| solve_instance(inst, measure))
        .collect();
    let mut rows = Vec::with_capacity(jobs.len());
    for ((l, _), outcome) in jobs.iter().zip(solved) {
        let (value, argmin_sample) = outcome.map_err(|e| HarnessError::Member {
            l: *l,
            message: e.to_string(),
        })?;
        rows.push(StabilityRow {
            l: *l,
            value,
            argmin_sample,
        });
    }
    let (limit_value, limit_argmin) = match &family.limit {
        Some(dist) => {
            dist.validate(template.s)?;
            let inst = template.with_scenarios(dist.scenarios())?;
            let (value, x) = solve_instance(&inst, measure)?;
            (Some(value), Some(x))
        }
        None => (None, None),
    };
    let reference = limit_value.unwrap_or(rows.last().expect("nonempty").value);
    let gaps: Vec<f64> = rows.iter().map(|r| (r.value - reference).abs()).collect();
    let tail = *gaps.last().expect("nonempty");
    let monotone = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let verdict = if tail <= 1e-9 || (monotone && tail <= 0.5 * gaps[0] + 1e-12) {
        Verdict::Converges
    } else {
        Verdict::Gap {
            limit: reference,
            tail: rows.last().expect("nonempty").value,
        }
    };
    Ok(StabilityTable {
        rows,
        limit_value,
        limit_argmin,
        verdict,
    })
}

/// Exhaustive leader-grid minimization of the risk value; the reference
/// fallback for senses and orders no reformulation covers. Leader
/// dimension is capped at three. Ties keep the lexicographically first
/// grid point; grid points with an infeasible scenario are skipped.
pub fn grid_minimize_risk(
    inst: &Instance,
    measure: RiskMeasure,
    resolution: f64,
) -> Result<(f64, Vec<f64>), HarnessError> {
    if inst.n > 3 {
        return Err(HarnessError::Invalid(
            "grid fallback supports at most three leader variables".into(),
        ));
    }
    if !(resolution > 0.0) {
        return Err(HarnessError::Invalid("resolution must be positive".into()));
    }
    let catalog = lowerlevel::enumerate_bases(inst)?;
    let probs = inst.probabilities();
    let mut lows = Vec::with_capacity(inst.n);
    let mut highs = Vec::with_capacity(inst.n);
    for j in 0..inst.n {
        for dir in [1.0, -1.0] {
            let mut obj = vec![0.0; inst.n];
            obj[j] = dir;
            let mut p = LpProblem::new(obj);
            for (row, rhs) in inst.h_mat.iter().zip(&inst.h_rhs) {
                p.add_ineq(row.clone(), *rhs);
            }
            match solve_lp(&p)? {
                LpOutcome::Optimal(sol) => {
                    if dir > 0.0 {
                        lows.push(sol.value);
                    } else {
                        highs.push(-sol.value);
                    }
                }
                LpOutcome::Infeasible => {
                    return Err(HarnessError::Invalid("leader set is empty".into()))
                }
                LpOutcome::Unbounded => {
                    return Err(HarnessError::Invalid("leader set is unbounded".into()))
                }
            }
        }
    }
    let axes: Vec<Vec<f64>> = (0..inst.n)
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
    let mut index = vec![0usize; inst.n];
    loop {
        let x: Vec<f64> = index.iter().enumerate().map(|(j, &i)| axes[j][i]).collect();
        if leader_contains(inst, &x) {
            match risk::profile_values(inst, &catalog, &x) {
                Ok(values) => {
                    let profile = ScenarioProfile::from_values(values, probs.clone());
                    let value = risk::eval_risk(&profile, measure);
                    let better = match &best {
                        None => true,
                        Some((bv, _)) => value < *bv,
                    };
                    if better {
                        best = Some((value, x));
                    }
                }
                Err(RiskError::Lower(LowerLevelError::Infeasible { .. })) => {}
                Err(other) => return Err(other.into()),
            }
        }
        // Advance the odometer, last axis fastest.
        let mut pos = inst.n;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            index[pos] += 1;
            if index[pos] < axes[pos].len() {
                break;
            }
            index[pos] = 0;
            if pos == 0 {
                pos = usize::MAX;
                break;
            }
        }
        if pos == usize::MAX {
            break;
        }
    }
    best.ok_or_else(|| HarnessError::Invalid("no feasible grid point".into()))
}

fn leader_contains(inst: &Instance, x: &[f64]) -> bool {
    inst.h_mat
        .iter()
        .zip(&inst.h_rhs)
        .all(|(row, rhs)| crate::linalg::dot(row, x) <= rhs + 1e-9 * (1.0 + rhs.abs()))
}

/// Outcome of the hyperplane-hit sampling experiment.
#[derive(Debug, Clone, Serialize)]
pub struct GenericityReport {
    pub trials: usize,
    pub hits: usize,
    pub fraction: f64,
    pub seed: u64,
    pub noise_scale: f64,
}

/// Perturbs every scenario atom by independent uniform noise in
/// `[-noise_scale, noise_scale]` per coordinate and reports how often the
/// perturbed instance puts `x` on a nondifferentiability hyperplane
/// (boundary, tie, or — when `eta` is given — excess-kink). Perturbations
/// that make a scenario infeasible at `x` do not count as hits. Fixed
/// seed means identical output across runs.
pub fn genericity_sample(
    inst: &Instance,
    x: &[f64],
    trials: usize,
    seed: u64,
    noise_scale: f64,
    eta: Option<f64>,
) -> Result<GenericityReport, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Invalid("need at least one trial".into()));
    }
    if noise_scale < 0.0 {
        return Err(HarnessError::Invalid("noise scale must be nonnegative".into()));
    }
    let catalog = lowerlevel::enumerate_bases(inst)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let scenarios: Vec<Scenario> = inst
            .scenarios
            .iter()
            .map(|sc| Scenario {
                z: sc
                    .z
                    .iter()
                    .map(|zi| {
                        if noise_scale == 0.0 {
                            *zi
                        } else {
                            zi + rng.gen_range(-noise_scale..=noise_scale)
                        }
                    })
                    .collect(),
                pi: sc.pi,
            })
            .collect();
        let perturbed = inst.with_scenarios(scenarios)?;
        let mut hit = false;
        for k in 0..perturbed.num_scenarios {
            match lowerlevel::analyze_point(&perturbed, &catalog, x, k, eta) {
                Ok(report) => {
                    if report.flags.any() || report.excess_hit {
                        hit = true;
                        break;
                    }
                }
                Err(LowerLevelError::Infeasible { .. }) => {}
                Err(other) => return Err(other.into()),
            }
        }
        if hit {
            hits += 1;
        }
    }
    Ok(GenericityReport {
        trials,
        hits,
        fraction: hits as f64 / trials as f64,
        seed,
        noise_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_instance;

    fn template() -> Instance {
        parse_instance(
            r#"{
              "n":1,"m":1,"s":2,"K":1,
              "c":[1],"q":[1],"d":[0],
              "A":[[1],[-1]],
              "T":[[0],[0]],
              "H":[[1],[-1]],
              "h":[1,0],
              "scenarios":[{"z":[0,0],"pi":1.0}],
              "sense":"optimistic"
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn escaping_mass_keeps_the_value_away_from_the_limit() {
        let family = escaping_tail_family(&[2, 10, 100]);
        let table = stability_experiment(&template(), &family, RiskMeasure::Expectation).unwrap();
        for row in &table.rows {
            assert!((row.value - 1.0).abs() <= 1e-9, "l={} value {}", row.l, row.value);
        }
        assert!(table.limit_value.unwrap().abs() <= 1e-9);
        match table.verdict {
            Verdict::Gap { limit, tail } => {
                assert!(limit.abs() <= 1e-9);
                assert!((tail - 1.0).abs() <= 1e-9);
            }
            Verdict::Converges => panic!("expected a gap"),
        }
    }

    #[test]
    fn clipped_support_restores_convergence() {
        let family = clipped_tail_family(&[2, 10, 100, 1000]);
        let table = stability_experiment(&template(), &family, RiskMeasure::Expectation).unwrap();
        assert_eq!(table.verdict, Verdict::Converges);
        let last = table.rows.last().unwrap();
        assert!((last.value - 0.01).abs() <= 1e-9);
    }

    #[test]
    fn constant_family_rows_are_identical() {
        let family = constant_family(&[1, 5, 25], Distribution::dirac(vec![1.0, -1.0]));
        let table = stability_experiment(&template(), &family, RiskMeasure::Expectation).unwrap();
        assert_eq!(table.verdict, Verdict::Converges);
        for row in &table.rows {
            assert!((row.value - 1.0).abs() <= 1e-9);
        }
        assert!((table.limit_value.unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn tail_average_rows_use_the_outer_search() {
        let family = constant_family(&[1, 2], Distribution::dirac(vec![1.0, -1.0]));
        let table =
            stability_experiment(&template(), &family, RiskMeasure::CVaR { alpha: 0.5 }).unwrap();
        for row in &table.rows {
            assert!((row.value - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn pessimistic_sense_falls_back_to_the_grid() {
        let mut inst = template();
        inst.sense = Sense::Pessimistic;
        let family = constant_family(&[1], Distribution::dirac(vec![1.0, -1.0]));
        let table = stability_experiment(&inst, &family, RiskMeasure::Expectation).unwrap();
        assert!((table.rows[0].value - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn grid_fallback_matches_the_oracle_on_the_two_atom_instance() {
        let inst = template()
            .with_scenarios(
                Distribution {
                    atoms: vec![vec![0.0, 0.0], vec![2.0, -2.0]],
                    weights: vec![0.5, 0.5],
                }
                .scenarios(),
            )
            .unwrap();
        let (grid_value, grid_x) =
            grid_minimize_risk(&inst, RiskMeasure::Expectation, GRID_RESOLUTION).unwrap();
        let (oracle_value, _) = solve_instance(&inst, RiskMeasure::Expectation).unwrap();
        assert!((grid_value - oracle_value).abs() <= 1e-9);
        assert!(grid_x[0].abs() <= 1e-9);
    }

    #[test]
    fn family_files_round_trip() {
        let family = escaping_tail_family(&[2, 10]);
        let text = family.to_json();
        let back = DistributionFamily::from_json(&text).unwrap();
        assert_eq!(back, family);
    }

    #[test]
    fn member_errors_carry_the_index() {
        // Second atom leaves the follower infeasible for every leader
        // point, so the member solve must fail and name l.
        let family = constant_family(&[7], Distribution::dirac(vec![-1.0, 0.0]));
        match stability_experiment(&template(), &family, RiskMeasure::Expectation) {
            Err(HarnessError::Member { l, .. }) => assert_eq!(l, 7),
            other => panic!("expected a member error, got {other:?}"),
        }
    }

    #[test]
    fn random_perturbations_never_hit_the_null_sets() {
        let inst = template()
            .with_scenarios(
                Distribution {
                    atoms: vec![vec![0.0, 0.0], vec![2.0, -2.0]],
                    weights: vec![0.5, 0.5],
                }
                .scenarios(),
            )
            .unwrap();
        let report = genericity_sample(&inst, &[0.5], 200, 7, NOISE_SCALE, None).unwrap();
        assert_eq!(report.hits, 0);
        assert_eq!(report.fraction, 0.0);
    }

    #[test]
    fn zero_noise_on_a_tie_hyperplane_always_hits() {
        // The two-row encoding keeps each atom exactly on the row-class
        // tie hyperplane, so with no noise every trial hits.
        let report = genericity_sample(&template(), &[0.5], 50, 3, 0.0, None).unwrap();
        assert_eq!(report.hits, 50);
        assert_eq!(report.fraction, 1.0);
    }

    #[test]
    fn fixed_seed_reproduces_the_fraction() {
        let inst = template();
        let a = genericity_sample(&inst, &[0.25], 100, 11, NOISE_SCALE, Some(1.0)).unwrap();
        let b = genericity_sample(&inst, &[0.25], 100, 11, NOISE_SCALE, Some(1.0)).unwrap();
        assert_eq!(a.hits, b.hits);
        assert_eq!(a.fraction, b.fraction);
    }

    #[test]
    fn stability_csv_has_member_and_limit_rows() {
        let family = escaping_tail_family(&[2, 10]);
        let table = stability_experiment(&template(), &family, RiskMeasure::Expectation).unwrap();
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "l,value,argmin_sample,verdict");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("limit,"));
        assert!(table.summary().contains("verdict"));
    }
}
