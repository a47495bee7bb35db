//! Problem data model.
//!
//! An instance couples a leader polyhedron `X = { x : H x <= h }` with a
//! follower program parameterized by the leader decision and a random
//! right-hand side: the follower solves `min d^T y` over `A y <= T x + z`,
//! and the leader's stage cost is `c^T x` plus the best (optimistic) or
//! worst (pessimistic) follower value `q^T y` over the follower's optimal
//! set. Randomness enters through finitely many scenarios `(z_k, pi_k)`.
//!
//! Instances are exchanged as JSON with matrices in row-major nested
//! arrays; probabilities are validated and renormalized on parse.

use crate::simplex::{self, LpOutcome, LpProblem, SimplexError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Leader attitude toward follower tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Optimistic,
    Pessimistic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub z: Vec<f64>,
    pub pi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    #[serde(rename = "K")]
    pub num_scenarios: usize,
    pub c: Vec<f64>,
    pub q: Vec<f64>,
    pub d: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    pub h_mat: Vec<Vec<f64>>,
    #[serde(rename = "h")]
    pub h_rhs: Vec<f64>,
    pub scenarios: Vec<Scenario>,
    pub sense: Sense,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("probability error: {0}")]
    Probability(String),
}

impl Instance {
    /// Validates dimensions and probabilities; renormalizes the scenario
    /// weights when their sum is within 1e-9 of one.
    pub fn validate(&mut self) -> Result<(), ModelError> {
        if self.n == 0 || self.m == 0 || self.s == 0 || self.num_scenarios == 0 {
            return Err(ModelError::Dimension(
                "n, m, s, K must all be at least 1".into(),
            ));
        }
        let want = |name: &str, got: usize, expect: usize| -> Result<(), ModelError> {
            if got != expect {
                Err(ModelError::Dimension(format!(
                    "{name}: expected length {expect}, got {got}"
                )))
            } else {
                Ok(())
            }
        };
        want("c", self.c.len(), self.n)?;
        want("q", self.q.len(), self.m)?;
        want("d", self.d.len(), self.m)?;
        want("A rows", self.a.len(), self.s)?;
        for (i, row) in self.a.iter().enumerate() {
            if row.len() != self.m {
                return Err(ModelError::Dimension(format!(
                    "A row {i}: expected {} columns, got {}",
                    self.m,
                    row.len()
                )));
            }
        }
        want("T rows", self.t.len(), self.s)?;
        for (i, row) in self.t.iter().enumerate() {
            if row.len() != self.n {
                return Err(ModelError::Dimension(format!(
                    "T row {i}: expected {} columns, got {}",
                    self.n,
                    row.len()
                )));
            }
        }
        for (i, row) in self.h_mat.iter().enumerate() {
            if row.len() != self.n {
                return Err(ModelError::Dimension(format!(
                    "H row {i}: expected {} columns, got {}",
                    self.n,
                    row.len()
                )));
            }
        }
        want("h", self.h_rhs.len(), self.h_mat.len())?;
        want("scenarios", self.scenarios.len(), self.num_scenarios)?;
        for (k, sc) in self.scenarios.iter().enumerate() {
            if sc.z.len() != self.s {
                return Err(ModelError::Dimension(format!(
                    "scenario {k}: z has length {}, expected {}",
                    sc.z.len(),
                    self.s
                )));
            }
        }
        let finite = self.c.iter().chain(&self.q).chain(&self.d).chain(&self.h_rhs).all(|v| v.is_finite())
            && self
                .a
                .iter()
                .chain(&self.t)
                .chain(&self.h_mat)
                .all(|r| r.iter().all(|v| v.is_finite()))
            && self.scenarios.iter().all(|sc| sc.pi.is_finite() && sc.z.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(ModelError::Syntax("non-finite numeric entry".into()));
        }
        for (k, sc) in self.scenarios.iter().enumerate() {
            if sc.pi <= 0.0 {
                return Err(ModelError::Probability(format!(
                    "scenario {k}: probability {} must be positive",
                    sc.pi
                )));
            }
        }
        let total: f64 = self.scenarios.iter().map(|sc| sc.pi).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ModelError::Probability(format!(
                "probabilities sum to {total}, outside the 1e-9 renormalization window"
            )));
        }
        // Renormalize only a meaningfully off-target sum. An already
        // normalized vector sums to within a few ulps of one, and dividing
        // it again would drift every weight, so a written file would stop
        // reloading bit-for-bit.
        if (total - 1.0).abs() > 1e-12 {
            for sc in &mut self.scenarios {
                sc.pi /= total;
            }
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.scenarios.iter().map(|sc| sc.pi).collect()
    }

    /// Copy of the instance with the scenario list replaced and revalidated.
    pub fn with_scenarios(&self, scenarios: Vec<Scenario>) -> Result<Instance, ModelError> {
        let mut out = self.clone();
        out.scenarios = scenarios;
        out.num_scenarios = out.scenarios.len();
        out.validate()?;
        Ok(out)
    }
}

pub fn parse_instance(text: &str) -> Result<Instance, ModelError> {
    let mut inst: Instance =
        serde_json::from_str(text).map_err(|e| ModelError::Syntax(e.to_string()))?;
    inst.validate()?;
    Ok(inst)
}

pub fn serialize_instance(inst: &Instance) -> String {
    serde_json::to_string_pretty(inst).expect("instance serialization cannot fail")
}

/// Risk functional applied to the scenario cost profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskMeasure {
    Expectation,
    /// p-th order expected excess over the target `eta`.
    ExpectedExcess { eta: f64, p: f64 },
    /// Mean plus `rho` times the p-th order excess over the mean.
    SemiDeviation { rho: f64, p: f64 },
    /// Conditional value-at-risk at level `alpha`.
    CVaR { alpha: f64 },
}

impl FromStr for RiskMeasure {
    type Err = ModelError;

    /// Grammar: `E`, `EE:eta=<v>[,p=<v>]`, `SD:rho=<v>[,p=<v>]`,
    /// `CVaR:alpha=<v>`.
    fn from_str(text: &str) -> Result<Self, ModelError> {
        let bad = |msg: &str| ModelError::Syntax(format!("measure '{text}': {msg}"));
        let (name, rest) = match text.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (text, None),
        };
        let mut params: Vec<(String, f64)> = Vec::new();
        if let Some(rest) = rest {
            for piece in rest.split(',') {
                let (k, v) = piece
                    .split_once('=')
                    .ok_or_else(|| bad("expected key=value parameters"))?;
                let val: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| bad(&format!("bad numeric value '{v}'")))?;
                params.push((k.trim().to_string(), val));
            }
        }
        let get = |key: &str| params.iter().find(|(k, _)| k == key).map(|(_, v)| *v);
        let known = |allowed: &[&str]| -> Result<(), ModelError> {
            for (k, _) in &params {
                if !allowed.contains(&k.as_str()) {
                    return Err(bad(&format!("unknown parameter '{k}'")));
                }
            }
            Ok(())
        };
        match name {
            "E" => {
                known(&[])?;
                Ok(RiskMeasure::Expectation)
            }
            "EE" => {
                known(&["eta", "p"])?;
                let eta = get("eta").ok_or_else(|| bad("missing eta"))?;
                let p = get("p").unwrap_or(1.0);
                if p < 1.0 {
                    return Err(bad("p must be at least 1"));
                }
                Ok(RiskMeasure::ExpectedExcess { eta, p })
            }
            "SD" => {
                known(&["rho", "p"])?;
                let rho = get("rho").ok_or_else(|| bad("missing rho"))?;
                let p = get("p").unwrap_or(1.0);
                if !(0.0..1.0).contains(&rho) {
                    return Err(bad("rho must lie in [0, 1)"));
                }
                if p < 1.0 {
                    return Err(bad("p must be at least 1"));
                }
                Ok(RiskMeasure::SemiDeviation { rho, p })
            }
            "CVaR" => {
                known(&["alpha"])?;
                let alpha = get("alpha").ok_or_else(|| bad("missing alpha"))?;
                if !(0.0 < alpha && alpha < 1.0) {
                    return Err(bad("alpha must lie in (0, 1)"));
                }
                Ok(RiskMeasure::CVaR { alpha })
            }
            other => Err(bad(&format!("unknown measure '{other}'"))),
        }
    }
}

impl fmt::Display for RiskMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskMeasure::Expectation => write!(f, "E"),
            RiskMeasure::ExpectedExcess { eta, p } => write!(f, "EE:eta={eta},p={p}"),
            RiskMeasure::SemiDeviation { rho, p } => write!(f, "SD:rho={rho},p={p}"),
            RiskMeasure::CVaR { alpha } => write!(f, "CVaR:alpha={alpha}"),
        }
    }
}

/// Deterministic sample of leader points used for feasibility screening:
/// vertices of `X` when the vertex count is tractable, otherwise
/// coordinate-extreme boundary points.
pub fn leader_sample_points(inst: &Instance) -> Result<Vec<Vec<f64>>, SimplexError> {
    polyhedron_sample_points(&inst.h_mat, &inst.h_rhs, inst.n)
}

pub(crate) fn polyhedron_sample_points(
    rows: &[Vec<f64>],
    rhs: &[f64],
    n: usize,
) -> Result<Vec<Vec<f64>>, SimplexError> {
    let verts = polyhedron_vertices(rows, rhs, n, 10_000);
    if let Some(v) = verts {
        if !v.is_empty() {
            return Ok(v);
        }
    }
    // Fallback: extreme points along each coordinate direction.
    let mut out: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        for sign in [1.0f64, -1.0] {
            let mut obj = vec![0.0; n];
            obj[j] = sign;
            let mut p = LpProblem::new(obj);
            for (row, r) in rows.iter().zip(rhs) {
                p.add_ineq(row.clone(), *r);
            }
            if p.ineq_rows.is_empty() {
                continue;
            }
            if let LpOutcome::Optimal(s) = simplex::solve_lp(&p)? {
                push_dedup(&mut out, s.x);
            }
        }
    }
    Ok(out)
}

/// Vertex enumeration by active-set combinations; `None` when the
/// combination count exceeds `cap`.
pub(crate) fn polyhedron_vertices(
    rows: &[Vec<f64>],
    rhs: &[f64],
    n: usize,
    cap: u128,
) -> Option<Vec<Vec<f64>>> {
    use itertools::Itertools;
    let p = rows.len();
    if p < n || binomial(p, n)? > cap {
        return if p < n { Some(vec![]) } else { None };
    }
    let mut verts: Vec<Vec<f64>> = Vec::new();
    for subset in (0..p).combinations(n) {
        let mut flat = vec![0.0; n * n];
        for (r, &i) in subset.iter().enumerate() {
            for c in 0..n {
                flat[r * n + c] = rows[i][c];
            }
        }
        let lu = crate::linalg::Lu::factor(&flat, n, 1e-10);
        if lu.singular {
            continue;
        }
        let b: Vec<f64> = subset.iter().map(|&i| rhs[i]).collect();
        let x = lu.solve(&b);
        let feasible = rows
            .iter()
            .zip(rhs)
            .all(|(row, r)| crate::linalg::dot(row, &x) <= r + 1e-8 * (1.0 + r.abs()));
        if feasible {
            push_dedup(&mut verts, x);
        }
    }
    Some(verts)
}

fn push_dedup(list: &mut Vec<Vec<f64>>, x: Vec<f64>) {
    let dup = list.iter().any(|v| {
        v.iter()
            .zip(&x)
            .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + a.abs()))
    });
    if !dup {
        list.push(x);
    }
}

pub(crate) fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
    }
    Some(acc)
}

/// Screening report: which sampled leader points leave some scenario's
/// follower program empty.
#[derive(Debug, Clone)]
pub struct LeaderSampleReport {
    pub samples: Vec<Vec<f64>>,
    /// Pairs `(sample index, scenario index)` with an empty follower set.
    pub violations: Vec<(usize, usize)>,
}

impl LeaderSampleReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every sampled leader point against every scenario with a phase-1
/// feasibility solve of the follower constraints.
pub fn validate_leader_in_fz(inst: &Instance) -> Result<LeaderSampleReport, SimplexError> {
    let samples = leader_sample_points(inst)?;
    let mut violations = Vec::new();
    for (si, x) in samples.iter().enumerate() {
        let tx = crate::linalg::mat_vec(&inst.t, x);
        for (k, sc) in inst.scenarios.iter().enumerate() {
            let rhs: Vec<f64> = tx.iter().zip(&sc.z).map(|(a, b)| a + b).collect();
            if simplex::polytope_feasible(&inst.a, &rhs)?.is_none() {
                violations.push((si, k));
            }
        }
    }
    Ok(LeaderSampleReport { samples, violations })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn i1_text(scenarios: &str) -> String {
        format!(
            r#"{{
              "n":1,"m":1,"s":2,"K":{},
              "c":[1],"q":[1],"d":[0],
              "A":[[1],[-1]],
              "T":[[0],[0]],
              "H":[[1],[-1]],
              "h":[1,0],
              "scenarios":[{}],
              "sense":"optimistic"
            }}"#,
            scenarios.matches("\"z\"").count(),
            scenarios
        )
    }

    #[test]
    fn parse_roundtrip_preserves_fields() {
        let text = i1_text(r#"{"z":[0.5,-0.5],"pi":1.0}"#);
        let inst = parse_instance(&text).unwrap();
        assert_eq!(inst.n, 1);
        assert_eq!(inst.num_scenarios, 1);
        let again = parse_instance(&serialize_instance(&inst)).unwrap();
        assert_eq!(again.scenarios[0].z, inst.scenarios[0].z);
        assert_eq!(again.scenarios[0].pi.to_bits(), inst.scenarios[0].pi.to_bits());
        assert_eq!(again.a, inst.a);
        assert_eq!(again.sense, inst.sense);
    }

    #[test]
    fn probability_sum_outside_window_is_rejected() {
        let text = i1_text(r#"{"z":[0,0],"pi":0.6},{"z":[1,-1],"pi":0.6}"#);
        match parse_instance(&text) {
            Err(ModelError::Probability(_)) => {}
            other => panic!("expected probability error, got {other:?}"),
        }
    }

    #[test]
    fn near_one_probabilities_are_renormalized() {
        let text = i1_text(&format!(
            r#"{{"z":[0,0],"pi":{}}},{{"z":[1,-1],"pi":0.5}}"#,
            0.5 + 4e-10
        ));
        let inst = parse_instance(&text).unwrap();
        let total: f64 = inst.probabilities().iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let text = r#"{
          "n":1,"m":1,"s":2,"K":1,
          "c":[1],"q":[1,2],"d":[0],
          "A":[[1],[-1]],"T":[[0],[0]],
          "H":[[1]],"h":[1],
          "scenarios":[{"z":[0,0],"pi":1.0}],
          "sense":"optimistic"
        }"#;
        match parse_instance(text) {
            Err(ModelError::Dimension(msg)) => assert!(msg.contains("q")),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_a_syntax_error() {
        match parse_instance("{ not json") {
            Err(ModelError::Syntax(_)) => {}
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn measure_grammar_accepts_the_four_measures() {
        assert_eq!("E".parse::<RiskMeasure>().unwrap(), RiskMeasure::Expectation);
        assert_eq!(
            "EE:eta=2,p=1".parse::<RiskMeasure>().unwrap(),
            RiskMeasure::ExpectedExcess { eta: 2.0, p: 1.0 }
        );
        assert_eq!(
            "SD:rho=0.5,p=1".parse::<RiskMeasure>().unwrap(),
            RiskMeasure::SemiDeviation { rho: 0.5, p: 1.0 }
        );
        assert_eq!(
            "CVaR:alpha=0.5".parse::<RiskMeasure>().unwrap(),
            RiskMeasure::CVaR { alpha: 0.5 }
        );
    }

    #[test]
    fn measure_grammar_rejects_bad_parameters() {
        assert!("EE".parse::<RiskMeasure>().is_err());
        assert!("SD:rho=1.0".parse::<RiskMeasure>().is_err());
        assert!("CVaR:alpha=0".parse::<RiskMeasure>().is_err());
        assert!("XX".parse::<RiskMeasure>().is_err());
        assert!("EE:eta=1,p=0.5".parse::<RiskMeasure>().is_err());
    }

    #[test]
    fn leader_screen_is_clean_when_follower_always_feasible() {
        // Follower set { y : y <= z1, -y <= z2 } nonempty for z = (0.5,-0.5).
        let text = i1_text(r#"{"z":[0.5,-0.5],"pi":1.0}"#);
        let inst = parse_instance(&text).unwrap();
        let report = validate_leader_in_fz(&inst).unwrap();
        assert_eq!(report.samples.len(), 2); // x = 0 and x = 1
        assert!(report.is_clean());
    }

    #[test]
    fn leader_screen_reports_empty_follower_sets() {
        // z = (-1, 0) forces y <= -1 and y >= 0: empty for every x.
        let text = i1_text(r#"{"z":[-1,0],"pi":1.0}"#);
        let inst = parse_instance(&text).unwrap();
        let report = validate_leader_in_fz(&inst).unwrap();
        assert_eq!(report.violations.len(), report.samples.len());
    }

    #[test]
    fn leader_vertices_of_unit_interval() {
        let text = i1_text(r#"{"z":[0,0],"pi":1.0}"#);
        let inst = parse_instance(&text).unwrap();
        let mut pts = leader_sample_points(&inst).unwrap();
        pts.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(pts.len(), 2);
        assert!((pts[0][0]).abs() < 1e-9);
        assert!((pts[1][0] - 1.0).abs() < 1e-9);
    }
}
