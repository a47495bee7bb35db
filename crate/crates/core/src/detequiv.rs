//! Deterministic-equivalent builders: each risk measure's leader problem
//! over the scenario fan is rewritten as one bilevel linear program in a
//! canonical form, ready for the complementarity machinery in [`crate::mpcc`].
//!
//! Canonical form: leader picks `u` in `U = {u | Hu u <= hu}` to minimize
//! `g^T u + h^T w`, where the follower picks `w` minimizing `t^T w` over
//! `{w | W w <= B u + b}`. Every builder keeps `u = x`; follower blocks
//! are per-scenario copies `y_k` plus, for the excess-based measures,
//! per-scenario auxiliaries `v_k`. The provenance map records the origin
//! of every coordinate so solutions can be pulled back to instance terms.

use crate::linalg;
use crate::lowerlevel::LowerLevelError;
use crate::model::{Instance, Sense};
use crate::mpcc::{self, MpccError};
use crate::simplex::SimplexError;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetequivError {
    #[error("no deterministic equivalent for the pessimistic sense")]
    Sense,
    #[error("builder requires {0}")]
    Invalid(String),
    #[error(transparent)]
    Mpcc(#[from] MpccError),
    #[error(transparent)]
    Lower(#[from] LowerLevelError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// Origin of one coordinate of the canonical problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarOrigin {
    /// Leader coordinate `x_i`.
    X(usize),
    /// Follower copy `y_{scenario, index}`.
    Y { scenario: usize, index: usize },
    /// Excess auxiliary for one scenario.
    V(usize),
    /// Scalar target level (CVaR outer variable).
    Eta,
}

impl fmt::Display for VarOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarOrigin::X(i) => write!(f, "x{i}"),
            VarOrigin::Y { scenario, index } => write!(f, "y{scenario}_{index}"),
            VarOrigin::V(k) => write!(f, "v{k}"),
            VarOrigin::Eta => write!(f, "eta"),
        }
    }
}

impl FromStr for VarOrigin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad variable origin '{s}'");
        if s == "eta" {
            return Ok(VarOrigin::Eta);
        }
        if let Some(rest) = s.strip_prefix('x') {
            return rest.parse().map(VarOrigin::X).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix('v') {
            return rest.parse().map(VarOrigin::V).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix('y') {
            let (a, b) = rest.split_once('_').ok_or_else(bad)?;
            return Ok(VarOrigin::Y {
                scenario: a.parse().map_err(|_| bad())?,
                index: b.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

impl Serialize for VarOrigin {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for VarOrigin {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Origins of the `u` and `w` coordinates, in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub u: Vec<VarOrigin>,
    pub w: Vec<VarOrigin>,
}

/// Canonical bilevel linear program; see the module docs for the roles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericBilevel {
    /// Leader cost on `u`.
    pub g: Vec<f64>,
    /// Leader cost on the follower response `w`.
    pub h: Vec<f64>,
    /// Follower cost.
    pub t: Vec<f64>,
    #[serde(rename = "W")]
    pub w_mat: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b_mat: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(rename = "Hu")]
    pub hu_mat: Vec<Vec<f64>>,
    pub hu: Vec<f64>,
    pub provenance: Provenance,
}

impl GenericBilevel {
    pub fn num_u(&self) -> usize {
        self.g.len()
    }

    pub fn num_w(&self) -> usize {
        self.t.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    /// Panics on inconsistent dimensions; builders call this before
    /// returning.
    fn check(&self) {
        let (k, l, r) = (self.num_u(), self.num_w(), self.num_rows());
        assert!(l > 0 && r > 0, "follower part must be nonempty");
        assert_eq!(self.h.len(), l);
        assert_eq!(self.w_mat.len(), r);
        assert_eq!(self.b_mat.len(), r);
        assert!(self.w_mat.iter().all(|row| row.len() == l));
        assert!(self.b_mat.iter().all(|row| row.len() == k));
        assert_eq!(self.hu_mat.len(), self.hu.len());
        assert!(self.hu_mat.iter().all(|row| row.len() == k));
        assert_eq!(self.provenance.u.len(), k);
        assert_eq!(self.provenance.w.len(), l);
    }

    /// True iff every follower row touches at most one scenario's block,
    /// so the follower problem splits scenariowise once `u` is fixed.
    pub fn decomposes(&self) -> bool {
        for row in &self.w_mat {
            let mut seen: Option<usize> = None;
            for (j, &coef) in row.iter().enumerate() {
                if coef == 0.0 {
                    continue;
                }
                let k = match self.provenance.w[j] {
                    VarOrigin::Y { scenario, .. } => scenario,
                    VarOrigin::V(scenario) => scenario,
                    _ => continue,
                };
                match seen {
                    None => seen = Some(k),
                    Some(prev) if prev != k => return false,
                    Some(_) => {}
                }
            }
        }
        true
    }

    /// Leader coordinates of a canonical point, via provenance.
    pub fn extract_leader(&self, u: &[f64]) -> Vec<f64> {
        let n = self
            .provenance
            .u
            .iter()
            .filter(|o| matches!(o, VarOrigin::X(_)))
            .count();
        let mut x = vec![0.0; n];
        for (j, origin) in self.provenance.u.iter().enumerate() {
            if let VarOrigin::X(i) = origin {
                x[*i] = u[j];
            }
        }
        x
    }

    /// One scenario's follower copy `y_k` and, when present, its excess
    /// auxiliary `v_k`.
    pub fn extract_scenario(&self, w: &[f64], k: usize) -> (Vec<f64>, Option<f64>) {
        let mut pairs: Vec<(usize, f64)> = Vec::new();
        let mut v = None;
        for (j, origin) in self.provenance.w.iter().enumerate() {
            match origin {
                VarOrigin::Y { scenario, index } if *scenario == k => pairs.push((*index, w[j])),
                VarOrigin::V(scenario) if *scenario == k => v = Some(w[j]),
                _ => {}
            }
        }
        pairs.sort_by_key(|(i, _)| *i);
        (pairs.into_iter().map(|(_, val)| val).collect(), v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("canonical problem serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<GenericBilevel, String> {
        let gb: GenericBilevel = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok(gb)
    }
}

fn require_optimistic(inst: &Instance) -> Result<(), DetequivError> {
    match inst.sense {
        Sense::Optimistic => Ok(()),
        Sense::Pessimistic => Err(DetequivError::Sense),
    }
}

/// Risk-neutral build: `w = (y_1..y_K)`, one follower block per scenario,
/// leader weight `pi_k q` on block `k`.
pub fn build_expectation(inst: &Instance) -> Result<GenericBilevel, DetequivError> {
    require_optimistic(inst)?;
    let (n, m, s, kk) = (inst.n, inst.m, inst.s, inst.num_scenarios);
    let l = kk * m;
    let mut w_mat = Vec::with_capacity(kk * s);
    let mut b_mat = Vec::with_capacity(kk * s);
    let mut b = Vec::with_capacity(kk * s);
    let mut h = vec![0.0; l];
    let mut t = vec![0.0; l];
    for k in 0..kk {
        for j in 0..m {
            h[k * m + j] = inst.scenarios[k].pi * inst.q[j];
            t[k * m + j] = inst.d[j];
        }
        for r in 0..s {
            let mut wrow = vec![0.0; l];
            wrow[k * m..(k + 1) * m].copy_from_slice(&inst.a[r]);
            w_mat.push(wrow);
            b_mat.push(inst.t[r].clone());
            b.push(inst.scenarios[k].z[r]);
        }
    }
    let gb = GenericBilevel {
        g: inst.c.clone(),
        h,
        t,
        w_mat,
        b_mat,
        b,
        hu_mat: inst.h_mat.clone(),
        hu: inst.h_rhs.clone(),
        provenance: Provenance {
            u: (0..n).map(VarOrigin::X).collect(),
            w: (0..kk)
                .flat_map(|k| (0..m).map(move |j| VarOrigin::Y { scenario: k, index: j }))
                .collect(),
        },
    };
    gb.check();
    Ok(gb)
}

/// Expected-excess build at target `eta`: follower blocks gain an
/// auxiliary `v_k >= max(c^T x + q^T y_k - eta, 0)`; the leader pays
/// `pi_k v_k` and nothing else.
pub fn build_expected_excess(inst: &Instance, eta: f64) -> Result<GenericBilevel, DetequivError> {
    require_optimistic(inst)?;
    let (n, m, s, kk) = (inst.n, inst.m, inst.s, inst.num_scenarios);
    let l = kk * m + kk;
    let vpos = |k: usize| kk * m + k;
    let mut w_mat = Vec::with_capacity(kk * (s + 2));
    let mut b_mat = Vec::with_capacity(kk * (s + 2));
    let mut b = Vec::with_capacity(kk * (s + 2));
    let mut h = vec![0.0; l];
    let mut t = vec![0.0; l];
    for k in 0..kk {
        for j in 0..m {
            t[k * m + j] = inst.d[j];
        }
        h[vpos(k)] = inst.scenarios[k].pi;
        for r in 0..s {
            let mut wrow = vec![0.0; l];
            wrow[k * m..(k + 1) * m].copy_from_slice(&inst.a[r]);
            w_mat.push(wrow);
            b_mat.push(inst.t[r].clone());
            b.push(inst.scenarios[k].z[r]);
        }
        // v_k >= 0
        let mut wrow = vec![0.0; l];
        wrow[vpos(k)] = -1.0;
        w_mat.push(wrow);
        b_mat.push(vec![0.0; n]);
        b.push(0.0);
        // q^T y_k - v_k <= -c^T x + eta
        let mut wrow = vec![0.0; l];
        wrow[k * m..(k + 1) * m].copy_from_slice(&inst.q);
        wrow[vpos(k)] = -1.0;
        w_mat.push(wrow);
        b_mat.push(inst.c.iter().map(|v| -v).collect());
        b.push(eta);
    }
    let gb = GenericBilevel {
        g: vec![0.0; n],
        h,
        t,
        w_mat,
        b_mat,
        b,
        hu_mat: inst.h_mat.clone(),
        hu: inst.h_rhs.clone(),
        provenance: Provenance {
            u: (0..n).map(VarOrigin::X).collect(),
            w: (0..kk)
                .flat_map(|k| (0..m).map(move |j| VarOrigin::Y { scenario: k, index: j }))
                .chain((0..kk).map(VarOrigin::V))
                .collect(),
        },
    };
    gb.check();
    Ok(gb)
}

/// Semideviation build at weight `rho`: `v_k` dominates both the
/// scenario's own follower cost and the mean follower cost, coupling all
/// scenarios — this build does not decompose.
pub fn build_semideviation(inst: &Instance, rho: f64) -> Result<GenericBilevel, DetequivError> {
    require_optimistic(inst)?;
    if !(0.0..1.0).contains(&rho) {
        return Err(DetequivError::Invalid("rho in [0, 1)".into()));
    }
    let (n, m, s, kk) = (inst.n, inst.m, inst.s, inst.num_scenarios);
    let l = kk * m + kk;
    let vpos = |k: usize| kk * m + k;
    let mut w_mat = Vec::with_capacity(kk * s + 2 * kk);
    let mut b_mat = Vec::with_capacity(kk * s + 2 * kk);
    let mut b = Vec::with_capacity(kk * s + 2 * kk);
    let mut h = vec![0.0; l];
    let mut t = vec![0.0; l];
    for k in 0..kk {
        for j in 0..m {
            h[k * m + j] = (1.0 - rho) * inst.scenarios[k].pi * inst.q[j];
            t[k * m + j] = inst.d[j];
        }
        h[vpos(k)] = rho * inst.scenarios[k].pi;
        for r in 0..s {
            let mut wrow = vec![0.0; l];
            wrow[k * m..(k + 1) * m].copy_from_slice(&inst.a[r]);
            w_mat.push(wrow);
            b_mat.push(inst.t[r].clone());
            b.push(inst.scenarios[k].z[r]);
        }
    }
    for k in 0..kk {
        // q^T y_k - v_k <= 0
        let mut wrow = vec![0.0; l];
        wrow[k * m..(k + 1) * m].copy_from_slice(&inst.q);
        wrow[vpos(k)] = -1.0;
        w_mat.push(wrow);
        b_mat.push(vec![0.0; n]);
        b.push(0.0);
    }
    for k in 0..kk {
        // sum_j pi_j q^T y_j - v_k <= 0
        let mut wrow = vec![0.0; l];
        for j in 0..kk {
            for c in 0..m {
                wrow[j * m + c] = inst.scenarios[j].pi * inst.q[c];
            }
        }
        wrow[vpos(k)] = -1.0;
        w_mat.push(wrow);
        b_mat.push(vec![0.0; n]);
        b.push(0.0);
    }
    let gb = GenericBilevel {
        g: inst.c.clone(),
        h,
        t,
        w_mat,
        b_mat,
        b,
        hu_mat: inst.h_mat.clone(),
        hu: inst.h_rhs.clone(),
        provenance: Provenance {
            u: (0..n).map(VarOrigin::X).collect(),
            w: (0..kk)
                .flat_map(|k| (0..m).map(move |j| VarOrigin::Y { scenario: k, index: j }))
                .chain((0..kk).map(VarOrigin::V))
                .collect(),
        },
    };
    gb.check();
    Ok(gb)
}

/// Stage costs `c^T x + q^T y_k` reconstructed from a solved canonical
/// point, one per scenario.
pub fn reconstruct_stage_costs(inst: &Instance, gb: &GenericBilevel, u: &[f64], w: &[f64]) -> Vec<f64> {
    let x = gb.extract_leader(u);
    let base = linalg::dot(&inst.c, &x);
    (0..inst.num_scenarios)
        .map(|k| {
            let (y, _) = gb.extract_scenario(w, k);
            base + linalg::dot(&inst.q, &y)
        })
        .collect()
}

/// Outcome of the CVaR outer search.
#[derive(Debug, Clone)]
pub struct CvarSolution {
    pub x: Vec<f64>,
    pub eta: f64,
    pub value: f64,
}

/// Minimizes `eta + (1-alpha)^{-1} * (expected-excess optimum at eta)`
/// over the scalar target. Candidate targets are the stage costs at
/// sampled leader points plus those at every inner argmin found, then a
/// golden-section pass refines between the neighbors of the best
/// candidate; ties resolve to the smallest target.
pub fn solve_cvar(
    inst: &Instance,
    alpha: f64,
    pattern_cap: u32,
) -> Result<CvarSolution, DetequivError> {
    require_optimistic(inst)?;
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(DetequivError::Invalid("alpha in (0, 1)".into()));
    }
    let inv = 1.0 / (1.0 - alpha);
    let mut evals: Vec<(f64, f64, Vec<f64>)> = Vec::new(); // (eta, phi, x)
    let mut solve_at = |eta: f64| -> Result<(f64, Vec<f64>), DetequivError> {
        for (e, phi, x) in &evals {
            if (e - eta).abs() <= 1e-12 {
                return Ok((*phi, x.clone()));
            }
        }
        let gb = build_expected_excess(inst, eta)?;
        let mpcc = mpcc::build_kkt(gb);
        let (point, obj) = mpcc::global_oracle_capped(&mpcc, pattern_cap)?;
        let x = mpcc.gb.extract_leader(&point.u);
        let phi = eta + inv * obj;
        evals.push((eta, phi, x.clone()));
        Ok((phi, x))
    };

    // Seed candidates: stage costs at sampled leader points.
    let mut candidates: Vec<f64> = Vec::new();
    let samples = crate::model::leader_sample_points(inst).map_err(DetequivError::Simplex)?;
    for x in &samples {
        for k in 0..inst.num_scenarios {
            if let Ok((v, _)) = crate::lowerlevel::f_eval(inst, x, k) {
                push_candidate(&mut candidates, v);
            }
        }
    }
    if candidates.is_empty() {
        return Err(DetequivError::Invalid(
            "no finite stage cost at any sampled leader point".into(),
        ));
    }

    // Expansion rounds: inner argmins generate new stage-cost candidates.
    for _ in 0..3 {
        let mut fresh: Vec<f64> = Vec::new();
        for &eta in &candidates {
            let (_, x) = solve_at(eta)?;
            for k in 0..inst.num_scenarios {
                if let Ok((v, _)) = crate::lowerlevel::f_eval(inst, &x, k) {
                    if !candidates.iter().any(|c| (c - v).abs() <= 1e-9) {
                        push_candidate(&mut fresh, v);
                    }
                }
            }
        }
        if fresh.is_empty() {
            break;
        }
        for v in fresh {
            push_candidate(&mut candidates, v);
        }
    }

    candidates.sort_by(f64::total_cmp);
    let mut best_idx = 0;
    let mut best = f64::INFINITY;
    for (i, &eta) in candidates.iter().enumerate() {
        let (phi, _) = solve_at(eta)?;
        if phi < best {
            best = phi;
            best_idx = i;
        }
    }

    // Golden-section refinement between the neighbors of the best
    // candidate; the envelope is piecewise linear so this tightens the
    // target between breakpoints. One interior point carries over per
    // iteration.
    let lo = if best_idx == 0 {
        candidates[0]
    } else {
        candidates[best_idx - 1]
    };
    let hi = if best_idx + 1 == candidates.len() {
        candidates[best_idx]
    } else {
        candidates[best_idx + 1]
    };
    let gr = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut bb) = (lo, hi);
    if bb - a > 1e-6 {
        let mut c1 = bb - gr * (bb - a);
        let mut c2 = a + gr * (bb - a);
        let mut p1 = solve_at(c1)?.0;
        let mut p2 = solve_at(c2)?.0;
        while bb - a > 1e-6 {
            if p1 <= p2 {
                bb = c2;
                c2 = c1;
                p2 = p1;
                c1 = bb - gr * (bb - a);
                p1 = solve_at(c1)?.0;
            } else {
                a = c1;
                c1 = c2;
                p1 = p2;
                c2 = a + gr * (bb - a);
                p2 = solve_at(c2)?.0;
            }
        }
        solve_at(0.5 * (a + bb))?;
    }

    // Final selection across every evaluation: smallest phi, ties to the
    // smallest eta.
    let mut final_eta = f64::INFINITY;
    let mut final_phi = f64::INFINITY;
    let mut final_x = Vec::new();
    let mut sorted: Vec<&(f64, f64, Vec<f64>)> = evals.iter().collect();
    sorted.sort_by(|p, q| p.0.total_cmp(&q.0));
    for (eta, phi, x) in sorted {
        if *phi < final_phi - 1e-12 {
            final_phi = *phi;
            final_eta = *eta;
            final_x = x.clone();
        }
    }
    Ok(CvarSolution {
        x: final_x,
        eta: final_eta,
        value: final_phi,
    })
}

fn push_candidate(list: &mut Vec<f64>, v: f64) {
    if !list.iter().any(|c| (c - v).abs() <= 1e-9) {
        list.push(v);
    }
}
