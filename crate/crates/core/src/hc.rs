//! Convex inner approximation of the admissible injection set and the
//! hosting-capacity hyperrectangle built from it.
//!
//! Every nonconvex branch flow quantity is replaced by an upper and lower
//! proxy. The lower current proxy comes from a first-order expansion of
//! `l = (P^2 + Q^2) / v` (convex, so the tangent plane is a lower bound).
//! The upper current proxy is either the second-order cone epigraph of the
//! same function over the proxy box, or a Taylor-based conservative bound.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, FixedOffset};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{Affine, ConicError, ConicProblem, SolveStats, Status, VarBlock};
use crate::fairness::{epsilon_constraint, FairnessError, FairnessMode, FairnessSpec};
use crate::loadflow::{
    backward_forward_sweep, check_admissible, solve_loadflow, LoadFlowError, LoadFlowOptions,
};
use crate::matrices::CompactMatrices;
use crate::network::{Network, NetworkError};
use crate::series::{DaytimeWindow, DemandSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HcError {
    #[error(transparent)]
    LoadFlow(#[from] LoadFlowError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error("unknown scenario '{0}' (expected s1, s2, s3, s4, s1f1 or s1f2)")]
    UnknownScenario(String),
    #[error("unknown bound variant '{0}' (expected soc or conservative)")]
    UnknownVariant(String),
    #[error("epsilon {0} outside [0, 1]")]
    Epsilon(f64),
    #[error("{direction} problem infeasible: {detail}")]
    Infeasible { direction: Direction, detail: String },
    #[error("{direction} problem ended with status {status:?} ({backend})")]
    NotOptimal {
        direction: Direction,
        status: Status,
        backend: String,
    },
    #[error("D_R has a negative entry at ({0}, {1}); the flow proxies would not bound")]
    NegativeDr(usize, usize),
    #[error("demand weights need nonzero generation-node demand of a single sign")]
    NoGenerationDemand,
    #[error("expected vectors of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("bus {0} is not a generation node")]
    NotGenerator(u32),
    #[error("sweep needs at least 2 points")]
    Resolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundVariant {
    Soc,
    Conservative,
}

impl BoundVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundVariant::Soc => "soc",
            BoundVariant::Conservative => "conservative",
        }
    }
}

impl fmt::Display for BoundVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoundVariant {
    type Err = HcError;
    fn from_str(s: &str) -> Result<Self, HcError> {
        match s.to_ascii_lowercase().as_str() {
            "soc" => Ok(BoundVariant::Soc),
            "conservative" => Ok(BoundVariant::Conservative),
            _ => Err(HcError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upper,
    Lower,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Upper => "upper",
            Direction::Lower => "lower",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveForm {
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Uniform,
    /// Normalized demand at each generation node.
    Demand,
}

/// Objective design plus optional fairness constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub objective: ObjectiveForm,
    pub weighting: Weighting,
    pub fairness: Option<FairnessSpec>,
}

pub const SCENARIO_NAMES: [&str; 6] = ["s1", "s2", "s3", "s4", "s1f1", "s1f2"];

/// Default epsilon of the fair presets.
pub const DEFAULT_EPSILON: f64 = 0.85;

impl Scenario {
    pub fn preset(name: &str) -> Result<Self, HcError> {
        let (objective, weighting, fairness) = match name.to_ascii_lowercase().as_str() {
            "s1" => (ObjectiveForm::Linear, Weighting::Uniform, None),
            "s2" => (ObjectiveForm::Linear, Weighting::Demand, None),
            "s3" => (ObjectiveForm::Log, Weighting::Uniform, None),
            "s4" => (ObjectiveForm::Log, Weighting::Demand, None),
            "s1f1" => (
                ObjectiveForm::Linear,
                Weighting::Uniform,
                Some(FairnessMode::Uniform),
            ),
            "s1f2" => (
                ObjectiveForm::Linear,
                Weighting::Uniform,
                Some(FairnessMode::Proportional),
            ),
            _ => return Err(HcError::UnknownScenario(name.to_string())),
        };
        Ok(Self {
            name: name.to_ascii_lowercase(),
            objective,
            weighting,
            fairness: fairness.map(|mode| FairnessSpec {
                epsilon: DEFAULT_EPSILON,
                mode,
            }),
        })
    }

    /// Overrides epsilon of a fair preset; no effect on the others.
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self, HcError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(HcError::Epsilon(epsilon));
        }
        if let Some(f) = self.fairness.as_mut() {
            f.epsilon = epsilon;
        }
        Ok(self)
    }
}

/// Expansion point of the current envelopes.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub p0: Vec<f64>,
    pub q0: Vec<f64>,
    /// Squared voltage at the downstream bus of each branch.
    pub v0: Vec<f64>,
    pub l0: Vec<f64>,
    /// Gradient of `(P^2 + Q^2) / v` with respect to `(P, Q, v)`.
    pub j: Vec<[f64; 3]>,
    pub j_pos: Vec<[f64; 3]>,
    pub j_neg: Vec<[f64; 3]>,
    pub p_g: Vec<f64>,
    pub p_d: Vec<f64>,
    pub q_d: Vec<f64>,
}

/// Linearizes at zero injection.
pub fn linearize(net: &Network, p_d: &[f64], q_d: &[f64]) -> Result<Linearization, HcError> {
    linearize_at(net, &vec![0.0; net.n()], p_d, q_d)
}

pub fn linearize_at(
    net: &Network,
    p_g: &[f64],
    p_d: &[f64],
    q_d: &[f64],
) -> Result<Linearization, HcError> {
    let n = net.n();
    let op = solve_loadflow(net, p_g, &vec![0.0; n], p_d, q_d)?;
    let j: Vec<[f64; 3]> = (0..n)
        .map(|k| {
            let (p, q, v) = (op.p_flow[k], op.q_flow[k], op.v[k]);
            [2.0 * p / v, 2.0 * q / v, -(p * p + q * q) / (v * v)]
        })
        .collect();
    let j_pos = j.iter().map(|r| r.map(|a| a.max(0.0))).collect();
    let j_neg = j.iter().map(|r| r.map(|a| a.min(0.0))).collect();
    Ok(Linearization {
        p0: op.p_flow,
        q0: op.q_flow,
        v0: op.v,
        l0: op.l,
        j,
        j_pos,
        j_neg,
        p_g: p_g.to_vec(),
        p_d: p_d.to_vec(),
        q_d: q_d.to_vec(),
    })
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Linearization {
    pub fn n(&self) -> usize {
        self.l0.len()
    }

    pub fn x0(&self, k: usize) -> [f64; 3] {
        [self.p0[k], self.q0[k], self.v0[k]]
    }

    /// Hessian of `(P^2 + Q^2) / v` at the expansion point.
    pub fn hessian(&self, k: usize) -> Matrix3<f64> {
        let (p, q, v) = (self.p0[k], self.q0[k], self.v0[k]);
        let m = nalgebra::Matrix2x3::new(1.0, 0.0, -p / v, 0.0, 1.0, -q / v);
        (2.0 / v) * m.transpose() * m
    }

    fn delta(&self, k: usize, x: &[f64; 3]) -> [f64; 3] {
        [x[0] - self.p0[k], x[1] - self.q0[k], x[2] - self.v0[k]]
    }

    /// Lower current proxy for upper proxies `plus` and lower proxies `minus`
    /// (each ordered `P, Q, V`).
    pub fn lower(&self, k: usize, plus: &[f64; 3], minus: &[f64; 3]) -> f64 {
        self.l0[k]
            + dot(&self.j_pos[k], &self.delta(k, minus))
            + dot(&self.j_neg[k], &self.delta(k, plus))
    }

    /// Taylor-based conservative upper current proxy.
    pub fn conservative_upper(&self, k: usize, plus: &[f64; 3], minus: &[f64; 3]) -> f64 {
        let dp = self.delta(k, plus);
        let dm = self.delta(k, minus);
        let linear = 2.0 * (dot(&self.j_pos[k], &dp) + dot(&self.j_neg[k], &dm)).abs();
        let (p, q, v) = (self.p0[k], self.q0[k], self.v0[k]);
        let mut psi: f64 = 0.0;
        for c in corners() {
            let d: [f64; 3] = std::array::from_fn(|a| if c[a] { dp[a] } else { dm[a] });
            let u1 = d[0] - p / v * d[2];
            let u2 = d[1] - q / v * d[2];
            psi = psi.max(2.0 / v * (u1 * u1 + u2 * u2));
        }
        self.l0[k] + linear.max(psi)
    }
}

/// Smallest current satisfying the four cone constraints at the given proxies.
pub fn soc_upper(plus: &[f64; 3], minus: &[f64; 3]) -> f64 {
    (plus[0].powi(2).max(minus[0].powi(2)) + plus[1].powi(2).max(minus[1].powi(2))) / minus[2]
}

/// The eight `(P, Q, V)` proxy corners; `true` selects the upper proxy.
fn corners() -> impl Iterator<Item = [bool; 3]> {
    (0..8u8).map(|m| [m & 4 != 0, m & 2 != 0, m & 1 != 0])
}

/// Variable handles of a built P1 problem.
#[derive(Debug, Clone)]
pub struct P1Vars {
    pub p_g: VarBlock,
    pub p_plus: VarBlock,
    pub p_minus: VarBlock,
    pub q_plus: VarBlock,
    pub q_minus: VarBlock,
    pub v_plus: VarBlock,
    pub v_minus: VarBlock,
    pub l_plus: VarBlock,
    pub l_minus: VarBlock,
    /// Conservative-variant epigraph variables.
    pub t: Option<VarBlock>,
    /// Magnitudes `-p_g` carried by log objectives on the lower side.
    pub magnitude: Option<VarBlock>,
}

#[derive(Debug, Clone)]
pub struct P1 {
    pub problem: ConicProblem,
    pub vars: P1Vars,
    pub direction: Direction,
    pub variant: BoundVariant,
}

/// Objective weights over the generation nodes.
pub fn objective_weights(
    net: &Network,
    scenario: &Scenario,
    p_d: &[f64],
) -> Result<Vec<f64>, HcError> {
    let gens = net.generator_slots();
    match scenario.weighting {
        Weighting::Uniform => Ok(vec![1.0; gens.len()]),
        Weighting::Demand => demand_shares(gens, p_d),
    }
}

/// Demand shares `p_d,i / sum p_d` over the generation nodes. All demands
/// must share one sign, so the shares are nonnegative.
fn demand_shares(gens: &[usize], p_d: &[f64]) -> Result<Vec<f64>, HcError> {
    let d: Vec<f64> = gens.iter().map(|&s| p_d[s]).collect();
    let total: f64 = d.iter().sum();
    let shares: Vec<f64> = d.into_iter().map(|x| x / total).collect();
    if total == 0.0 || shares.iter().any(|a| !(*a >= 0.0)) {
        return Err(HcError::NoGenerationDemand);
    }
    Ok(shares)
}

pub fn build_p1(
    net: &Network,
    mats: &CompactMatrices,
    lin: &Linearization,
    scenario: &Scenario,
    variant: BoundVariant,
    direction: Direction,
) -> Result<P1, HcError> {
    let n = net.n();
    if lin.n() != n || mats.n() != n {
        return Err(HcError::Dimension {
            expected: n,
            got: lin.n().min(mats.n()),
        });
    }
    if let Some(f) = &scenario.fairness {
        if !(0.0..=1.0).contains(&f.epsilon) {
            return Err(HcError::Epsilon(f.epsilon));
        }
    }
    for i in 0..n {
        for k in 0..n {
            if mats.d_r[(i, k)] < 0.0 {
                return Err(HcError::NegativeDr(i, k));
            }
        }
    }
    let mut pb = ConicProblem::new();
    let p_g = pb.add_vars("p_g", n);
    let p_plus = pb.add_vars("P+", n);
    let p_minus = pb.add_vars("P-", n);
    let q_plus = pb.add_vars("Q+", n);
    let q_minus = pb.add_vars("Q-", n);
    let v_plus = pb.add_vars("V+", n);
    let v_minus = pb.add_vars("V-", n);
    let l_plus = pb.add_vars("l+", n);
    let l_minus = pb.add_vars("l-", n);

    // Net injections p = p_g - p_d, q = -q_d (unity power factor).
    let p: Vec<Affine> = (0..n)
        .map(|i| p_g.get(i) - lin.p_d[i])
        .collect();
    let q: Vec<f64> = lin.q_d.iter().map(|d| -d).collect();

    let row = |m: &nalgebra::DMatrix<f64>, i: usize, x: &VarBlock, sign: f64| {
        let mut a = Affine::zero();
        for k in 0..n {
            a.add_term(x.get(k), sign * m[(i, k)]);
        }
        a
    };
    for i in 0..n {
        let mut cp = Affine::zero();
        let mut cq = 0.0;
        let mut vlin = Affine::constant(net.v0);
        for k in 0..n {
            cp.add_scaled(&p[k], mats.c[(i, k)]);
            cq += mats.c[(i, k)] * q[k];
            vlin.add_scaled(&p[k], mats.m_p[(i, k)]);
            vlin.add_const(mats.m_q[(i, k)] * q[k]);
        }
        pb.add_eq(p_plus.get(i), cp.clone() + row(&mats.d_r, i, &l_minus, -1.0));
        pb.add_eq(p_minus.get(i), cp + row(&mats.d_r, i, &l_plus, -1.0));
        pb.add_eq(
            q_plus.get(i),
            Affine::constant(cq)
                + row(&mats.d_x_pos, i, &l_minus, -1.0)
                + row(&mats.d_x_neg, i, &l_plus, -1.0),
        );
        pb.add_eq(
            q_minus.get(i),
            Affine::constant(cq)
                + row(&mats.d_x_pos, i, &l_plus, -1.0)
                + row(&mats.d_x_neg, i, &l_minus, -1.0),
        );
        pb.add_eq(
            v_plus.get(i),
            vlin.clone()
                + row(&mats.h_pos, i, &l_minus, -1.0)
                + row(&mats.h_neg, i, &l_plus, -1.0),
        );
        pb.add_eq(
            v_minus.get(i),
            vlin + row(&mats.h_pos, i, &l_plus, -1.0) + row(&mats.h_neg, i, &l_minus, -1.0),
        );
        pb.set_upper(v_plus.get(i), net.v_hi);
        pb.set_lower(v_minus.get(i), net.v_lo);
    }

    // Proxy deviations from the expansion point.
    let dev = |k: usize, upper: bool| -> [Affine; 3] {
        let (pv, qv, vv) = if upper {
            (&p_plus, &q_plus, &v_plus)
        } else {
            (&p_minus, &q_minus, &v_minus)
        };
        [
            pv.get(k) - lin.p0[k],
            qv.get(k) - lin.q0[k],
            vv.get(k) - lin.v0[k],
        ]
    };
    let lin_comb = |w: &[f64; 3], d: &[Affine; 3]| {
        let mut a = Affine::zero();
        for (wa, da) in w.iter().zip(d) {
            a.add_scaled(da, *wa);
        }
        a
    };

    let t = (variant == BoundVariant::Conservative).then(|| pb.add_vars("t", n));
    for k in 0..n {
        let dp = dev(k, true);
        let dm = dev(k, false);
        let lower = lin_comb(&lin.j_pos[k], &dm) + lin_comb(&lin.j_neg[k], &dp) + lin.l0[k];
        pb.add_eq(l_minus.get(k), lower);

        match variant {
            BoundVariant::Soc => {
                // ||(2P, 2Q, l - V)|| <= l + V  <=>  P^2 + Q^2 <= l V
                for pv in [&p_plus, &p_minus] {
                    for qv in [&q_plus, &q_minus] {
                        pb.add_soc(
                            vec![
                                pv.get(k) * 2.0,
                                qv.get(k) * 2.0,
                                l_plus.get(k) - v_minus.get(k),
                            ],
                            l_plus.get(k) + v_minus.get(k),
                        )?;
                    }
                }
            }
            BoundVariant::Conservative => {
                let tk = t.as_ref().expect("conservative epigraph").get(k);
                let linear =
                    (lin_comb(&lin.j_pos[k], &dp) + lin_comb(&lin.j_neg[k], &dm)) * 2.0;
                pb.add_ge(tk, linear.clone());
                pb.add_ge(tk, -linear);
                let (p0, q0, v0) = (lin.p0[k], lin.q0[k], lin.v0[k]);
                let s = (2.0 / v0).sqrt();
                for c in corners() {
                    let d: [&Affine; 3] =
                        std::array::from_fn(|a| if c[a] { &dp[a] } else { &dm[a] });
                    let a1 = (d[0].clone() - d[2].scaled(p0 / v0)) * s;
                    let a2 = (d[1].clone() - d[2].scaled(q0 / v0)) * s;
                    // a1^2 + a2^2 <= t  <=>  ||(2 a1, 2 a2, t - 1)|| <= t + 1
                    pb.add_soc(vec![a1 * 2.0, a2 * 2.0, tk - 1.0], tk + 1.0)?;
                }
                pb.add_eq(l_plus.get(k), tk + lin.l0[k]);
            }
        }

        let br = &net.branches()[k];
        if br.p_max.is_finite() {
            pb.set_upper(p_plus.get(k), br.p_max);
            pb.set_lower(p_minus.get(k), -br.p_max);
        }
        if br.q_max.is_finite() {
            pb.set_upper(q_plus.get(k), br.q_max);
            pb.set_lower(q_minus.get(k), -br.q_max);
        }
        if br.l_max.is_finite() {
            pb.set_upper(l_plus.get(k), br.l_max);
        }
    }

    let gens = net.generator_slots();
    for i in 0..n {
        if !gens.contains(&i) {
            pb.fix(p_g.get(i), 0.0);
        } else {
            match direction {
                Direction::Upper => pb.set_lower(p_g.get(i), 0.0),
                Direction::Lower => pb.set_upper(p_g.get(i), 0.0),
            }
        }
    }

    let alpha = objective_weights(net, scenario, &lin.p_d)?;
    let mut magnitude = None;
    match (scenario.objective, direction) {
        (ObjectiveForm::Linear, dir) => {
            let sign = if dir == Direction::Upper { 1.0 } else { -1.0 };
            let mut obj = Affine::zero();
            for (g, &s) in gens.iter().enumerate() {
                obj.add_term(p_g.get(s), sign * alpha[g]);
            }
            pb.maximize(obj);
        }
        (ObjectiveForm::Log, Direction::Upper) => {
            pb.maximize(Affine::zero());
            for (g, &s) in gens.iter().enumerate() {
                if alpha[g] > 0.0 {
                    pb.add_log_term(alpha[g], p_g.get(s))?;
                }
            }
        }
        (ObjectiveForm::Log, Direction::Lower) => {
            pb.maximize(Affine::zero());
            let m = pb.add_vars("|p_g|", gens.len());
            for (g, &s) in gens.iter().enumerate() {
                pb.add_eq(m.get(g), p_g.get(s) * -1.0);
                if alpha[g] > 0.0 {
                    pb.add_log_term(alpha[g], m.get(g))?;
                }
            }
            magnitude = Some(m);
        }
    }

    if direction == Direction::Upper {
        if let Some(spec) = &scenario.fairness {
            let vars: Vec<_> = gens.iter().map(|&s| p_g.get(s)).collect();
            let shares = match spec.mode {
                FairnessMode::Uniform => None,
                FairnessMode::Proportional => Some(demand_shares(gens, &lin.p_d)?),
            };
            epsilon_constraint(&mut pb, spec, &vars, shares.as_deref())?;
        }
    }

    Ok(P1 {
        problem: pb,
        vars: P1Vars {
            p_g,
            p_plus,
            p_minus,
            q_plus,
            q_minus,
            v_plus,
            v_minus,
            l_plus,
            l_minus,
            t,
            magnitude,
        },
        direction,
        variant,
    })
}

/// Primal values of a solved P1 problem, per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct P1Solution {
    pub direction: Direction,
    pub p_g: Vec<f64>,
    pub p_plus: Vec<f64>,
    pub p_minus: Vec<f64>,
    pub q_plus: Vec<f64>,
    pub q_minus: Vec<f64>,
    pub v_plus: Vec<f64>,
    pub v_minus: Vec<f64>,
    pub l_plus: Vec<f64>,
    pub l_minus: Vec<f64>,
    pub objective: f64,
    pub stats: SolveStats,
}

/// Default interior point tolerance for P1.
pub const SOLVER_TOL: f64 = 1e-8;

pub fn solve_p1(p1: &P1, lin: &Linearization, tol: f64) -> Result<P1Solution, HcError> {
    let sol = p1.problem.solve(tol)?;
    let direction = p1.direction;
    match sol.status {
        Status::Optimal => {}
        Status::Infeasible => {
            let vmin = lin.v0.iter().cloned().fold(f64::INFINITY, f64::min).sqrt();
            let vmax = lin.v0.iter().cloned().fold(f64::NEG_INFINITY, f64::max).sqrt();
            return Err(HcError::Infeasible {
                direction,
                detail: format!(
                    "nominal voltages span [{vmin:.4}, {vmax:.4}] pu; the zero-injection point may be outside the limits"
                ),
            });
        }
        status => {
            return Err(HcError::NotOptimal {
                direction,
                status,
                backend: sol.stats.backend_status.clone(),
            })
        }
    }
    let v = &p1.vars;
    Ok(P1Solution {
        direction,
        p_g: sol.values(&v.p_g),
        p_plus: sol.values(&v.p_plus),
        p_minus: sol.values(&v.p_minus),
        q_plus: sol.values(&v.q_plus),
        q_minus: sol.values(&v.q_minus),
        v_plus: sol.values(&v.v_plus),
        v_minus: sol.values(&v.v_minus),
        l_plus: sol.values(&v.l_plus),
        l_minus: sol.values(&v.l_minus),
        objective: sol.objective,
        stats: sol.stats,
    })
}

/// Per-generation-node injection intervals, in MW.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hyperrectangle {
    pub node_ids: Vec<u32>,
    pub lower_mw: Vec<f64>,
    pub upper_mw: Vec<f64>,
    pub scenario: String,
    pub variant: BoundVariant,
    pub iterations: usize,
    pub upper_objective: f64,
    pub lower_objective: f64,
    pub solver_iterations: u32,
}

impl Hyperrectangle {
    /// Sum of per-node bounds.
    pub fn aggregate(&self) -> (f64, f64) {
        (self.lower_mw.iter().sum(), self.upper_mw.iter().sum())
    }

    pub fn volume(&self) -> f64 {
        self.lower_mw
            .iter()
            .zip(&self.upper_mw)
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    /// Nodewise containment of `other`, with tolerance `tol` MW.
    pub fn contains(&self, other: &Hyperrectangle, tol: f64) -> bool {
        self.node_ids == other.node_ids
            && self
                .lower_mw
                .iter()
                .zip(&other.lower_mw)
                .all(|(a, b)| *a <= b + tol)
            && self
                .upper_mw
                .iter()
                .zip(&other.upper_mw)
                .all(|(a, b)| *a + tol >= *b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HcOptions {
    /// Maximum number of linearizations.
    pub iterations: usize,
    /// Stop once no interval endpoint moves by more than this (pu).
    pub relinearize_tol: f64,
    pub solver_tol: f64,
}

impl Default for HcOptions {
    fn default() -> Self {
        Self {
            iterations: 1,
            relinearize_tol: 1e-4,
            solver_tol: SOLVER_TOL,
        }
    }
}

/// Both P1 solves at one linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct HcSolve {
    pub linearization: Linearization,
    pub upper: P1Solution,
    pub lower: P1Solution,
}

pub fn solve_hc_once(
    net: &Network,
    mats: &CompactMatrices,
    lin: Linearization,
    scenario: &Scenario,
    variant: BoundVariant,
    tol: f64,
) -> Result<HcSolve, HcError> {
    let up = build_p1(net, mats, &lin, scenario, variant, Direction::Upper)?;
    let upper = solve_p1(&up, &lin, tol)?;
    let lo = build_p1(net, mats, &lin, scenario, variant, Direction::Lower)?;
    let lower = solve_p1(&lo, &lin, tol)?;
    Ok(HcSolve {
        linearization: lin,
        upper,
        lower,
    })
}

/// Hosting-capacity hyperrectangle for one demand snapshot (per-unit).
pub fn solve_hc(
    net: &Network,
    mats: &CompactMatrices,
    p_d: &[f64],
    q_d: &[f64],
    scenario: &Scenario,
    variant: BoundVariant,
    opts: HcOptions,
) -> Result<Hyperrectangle, HcError> {
    let n = net.n();
    for len in [p_d.len(), q_d.len()] {
        if len != n {
            return Err(HcError::Dimension { expected: n, got: len });
        }
    }
    let gens = net.generator_slots();
    let mut lin = linearize(net, p_d, q_d)?;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut last = None;
    let mut iterations = 0;
    for it in 1..=opts.iterations.max(1) {
        iterations = it;
        let solve = solve_hc_once(net, mats, lin, scenario, variant, opts.solver_tol)?;
        let hi: Vec<f64> = gens.iter().map(|&s| solve.upper.p_g[s].max(0.0)).collect();
        let lo: Vec<f64> = gens.iter().map(|&s| solve.lower.p_g[s].min(0.0)).collect();
        let done = prev.as_ref().is_some_and(|(plo, phi)| {
            plo.iter()
                .zip(&lo)
                .chain(phi.iter().zip(&hi))
                .all(|(a, b)| (a - b).abs() < opts.relinearize_tol)
        });
        let mid: Vec<f64> = (0..n)
            .map(|i| match gens.iter().position(|&s| s == i) {
                Some(g) => 0.5 * (lo[g] + hi[g]),
                None => 0.0,
            })
            .collect();
        prev = Some((lo, hi));
        last = Some(solve);
        if done || it == opts.iterations.max(1) {
            break;
        }
        lin = linearize_at(net, &mid, p_d, q_d)?;
    }
    let solve = last.expect("at least one iteration");
    let (lo, hi) = prev.expect("at least one iteration");
    let mw = net.mw_per_pu();
    Ok(Hyperrectangle {
        node_ids: net.generator_ids(),
        lower_mw: lo.iter().map(|v| v * mw).collect(),
        upper_mw: hi.iter().map(|v| v * mw).collect(),
        scenario: scenario.name.clone(),
        variant,
        iterations,
        upper_objective: solve.upper.objective,
        lower_objective: solve.lower.objective,
        solver_iterations: solve.upper.stats.iterations + solve.lower.stats.iterations,
    })
}

/// Proxy values at a fixed injection obtained by iterating the envelope
/// equations from the exact currents until they stop widening.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopePoint {
    pub plus: Vec<[f64; 3]>,
    pub minus: Vec<[f64; 3]>,
    pub l_plus: Vec<f64>,
    pub l_minus: Vec<f64>,
    pub converged: bool,
}

/// Evaluates the proxy system at net injections `p`, `q` (pu).
///
/// Starting from the exact currents `l_exact`, each pass recomputes the flow
/// and voltage proxies, then widens `[l-, l+]` to include the new envelope
/// values. The result is the tightest envelope consistent with the exact
/// point for the chosen variant.
pub fn envelope_at(
    mats: &CompactMatrices,
    lin: &Linearization,
    v0: f64,
    p: &[f64],
    q: &[f64],
    l_exact: &[f64],
    variant: BoundVariant,
) -> EnvelopePoint {
    let n = mats.n();
    let pv = nalgebra::DVector::from_column_slice(p);
    let qv = nalgebra::DVector::from_column_slice(q);
    let cp = &mats.c * &pv;
    let cq = &mats.c * &qv;
    let vlin = nalgebra::DVector::from_element(n, v0) + &mats.m_p * &pv + &mats.m_q * &qv;
    let mut lp = nalgebra::DVector::from_column_slice(l_exact);
    let mut lm = lp.clone();
    let mut plus = vec![[0.0; 3]; n];
    let mut minus = vec![[0.0; 3]; n];
    let mut converged = false;
    for _ in 0..500 {
        let pp = &cp - &mats.d_r * &lm;
        let pm = &cp - &mats.d_r * &lp;
        let qp = &cq - &mats.d_x_pos * &lm - &mats.d_x_neg * &lp;
        let qm = &cq - &mats.d_x_pos * &lp - &mats.d_x_neg * &lm;
        let vp = &vlin - &mats.h_pos * &lm - &mats.h_neg * &lp;
        let vm = &vlin - &mats.h_pos * &lp - &mats.h_neg * &lm;
        let mut change: f64 = 0.0;
        for k in 0..n {
            plus[k] = [pp[k], qp[k], vp[k]];
            minus[k] = [pm[k], qm[k], vm[k]];
            let up = match variant {
                BoundVariant::Soc => soc_upper(&plus[k], &minus[k]),
                BoundVariant::Conservative => lin.conservative_upper(k, &plus[k], &minus[k]),
            };
            let down = lin.lower(k, &plus[k], &minus[k]);
            let (nu, nd) = (lp[k].max(up), lm[k].min(down));
            change = change.max(nu - lp[k]).max(lm[k] - nd);
            lp[k] = nu;
            lm[k] = nd;
        }
        if !change.is_finite() {
            break;
        }
        if change < 1e-13 {
            converged = true;
            break;
        }
    }
    EnvelopePoint {
        plus,
        minus,
        l_plus: lp.iter().cloned().collect(),
        l_minus: lm.iter().cloned().collect(),
        converged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaePoint {
    pub pg_mw: f64,
    pub l_exact: Vec<f64>,
    pub l_soc: Vec<f64>,
    pub l_conservative: Vec<f64>,
    pub mae_soc: f64,
    pub mae_conservative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaeReport {
    pub node_id: u32,
    pub points: Vec<MaePoint>,
    /// Per-branch mean over the sweep.
    pub branch_mae_soc: Vec<f64>,
    pub branch_mae_conservative: Vec<f64>,
    /// Mean over branches and sweep points.
    pub mean_soc: f64,
    pub mean_conservative: f64,
}

/// Compares both upper current envelopes against the exact currents while
/// the injection at `node_id` sweeps `[min_mw, max_mw]`.
pub fn envelope_mae(
    net: &Network,
    mats: &CompactMatrices,
    lin: &Linearization,
    node_id: u32,
    min_mw: f64,
    max_mw: f64,
    points: usize,
) -> Result<MaeReport, HcError> {
    let slot = net.slot(node_id)?;
    if !net.generator_slots().contains(&slot) {
        return Err(HcError::NotGenerator(node_id));
    }
    if points < 2 && min_mw != max_mw {
        return Err(HcError::Resolution);
    }
    let n = net.n();
    let mw = net.mw_per_pu();
    let count = if min_mw == max_mw { 1 } else { points };
    let grid: Vec<f64> = (0..count)
        .map(|i| {
            if count == 1 {
                min_mw
            } else {
                min_mw + (max_mw - min_mw) * i as f64 / (count - 1) as f64
            }
        })
        .collect();
    let results: Vec<Result<MaePoint, HcError>> = grid
        .par_iter()
        .map(|&pg_mw| {
            let mut pg = lin.p_g.clone();
            pg[slot] += pg_mw / mw;
            let op = solve_loadflow(net, &pg, &vec![0.0; n], &lin.p_d, &lin.q_d)?;
            let soc = envelope_at(mats, lin, net.v0, &op.p, &op.q, &op.l, BoundVariant::Soc);
            let cons = envelope_at(
                mats,
                lin,
                net.v0,
                &op.p,
                &op.q,
                &op.l,
                BoundVariant::Conservative,
            );
            let mae = |up: &[f64]| {
                up.iter().zip(&op.l).map(|(u, l)| (u - l).abs()).sum::<f64>() / n as f64
            };
            Ok(MaePoint {
                pg_mw,
                mae_soc: mae(&soc.l_plus),
                mae_conservative: mae(&cons.l_plus),
                l_exact: op.l.clone(),
                l_soc: soc.l_plus,
                l_conservative: cons.l_plus,
            })
        })
        .collect();
    let points: Vec<MaePoint> = results.into_iter().collect::<Result<_, _>>()?;
    let m = points.len() as f64;
    let branch = |f: fn(&MaePoint) -> &Vec<f64>| -> Vec<f64> {
        (0..n)
            .map(|k| {
                points
                    .iter()
                    .map(|pt| (f(pt)[k] - pt.l_exact[k]).abs())
                    .sum::<f64>()
                    / m
            })
            .collect()
    };
    let branch_mae_soc = branch(|pt| &pt.l_soc);
    let branch_mae_conservative = branch(|pt| &pt.l_conservative);
    Ok(MaeReport {
        node_id,
        mean_soc: points.iter().map(|p| p.mae_soc).sum::<f64>() / m,
        mean_conservative: points.iter().map(|p| p.mae_conservative).sum::<f64>() / m,
        points,
        branch_mae_soc,
        branch_mae_conservative,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum StepOutcome {
    Solved(Hyperrectangle),
    /// Outside the daytime window.
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DhcStep {
    pub timestamp: DateTime<FixedOffset>,
    /// Demand snapshot (pu, one per slot).
    pub p_demand: Vec<f64>,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DhcSeries {
    pub scenario: String,
    pub variant: BoundVariant,
    pub step_minutes: f64,
    pub node_ids: Vec<u32>,
    pub generator_slots: Vec<usize>,
    pub mw_per_pu: f64,
    pub steps: Vec<DhcStep>,
}

impl DhcSeries {
    pub fn solved(&self) -> impl Iterator<Item = (&DhcStep, &Hyperrectangle)> {
        self.steps.iter().filter_map(|s| match &s.outcome {
            StepOutcome::Solved(r) => Some((s, r)),
            _ => None,
        })
    }

    pub fn failures(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.outcome, StepOutcome::Failed(_)))
            .count()
    }
}

/// Solves every daytime step of `demand` independently.
pub fn dhc_timeseries(
    net: &Network,
    mats: &CompactMatrices,
    demand: &DemandSeries,
    scenario: &Scenario,
    variant: BoundVariant,
    window: DaytimeWindow,
    opts: HcOptions,
) -> Result<DhcSeries, HcError> {
    let n = net.n();
    if let Some(row) = demand.p.first() {
        if row.len() != n {
            return Err(HcError::Dimension {
                expected: n,
                got: row.len(),
            });
        }
    }
    let steps: Vec<DhcStep> = (0..demand.len())
        .into_par_iter()
        .map(|t| {
            let ts = demand.timestamps[t];
            let outcome = if !window.contains(&ts) {
                StepOutcome::Skipped
            } else {
                match solve_hc(net, mats, &demand.p[t], &demand.q[t], scenario, variant, opts) {
                    Ok(r) => StepOutcome::Solved(r),
                    Err(e) => {
                        log::warn!("step {ts}: {e}");
                        StepOutcome::Failed(e.to_string())
                    }
                }
            };
            DhcStep {
                timestamp: ts,
                p_demand: demand.p[t].clone(),
                outcome,
            }
        })
        .collect();
    Ok(DhcSeries {
        scenario: scenario.name.clone(),
        variant,
        step_minutes: demand.step_minutes,
        node_ids: net.generator_ids(),
        generator_slots: net.generator_slots().to_vec(),
        mw_per_pu: net.mw_per_pu(),
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub samples: usize,
    pub violations: usize,
    pub nonconverged: usize,
    /// Largest limit excess seen (squared pu).
    pub worst_violation: f64,
    pub seed: u64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.nonconverged == 0
    }
}

/// Monte Carlo check of a hyperrectangle against the exact load flow:
/// uniform samples inside the box must be admissible up to `slack`.
pub fn audit_hyperrectangle(
    net: &Network,
    rect: &Hyperrectangle,
    p_d: &[f64],
    q_d: &[f64],
    samples: usize,
    seed: u64,
    slack: f64,
) -> Result<AuditReport, HcError> {
    let n = net.n();
    let slots: Vec<usize> = rect
        .node_ids
        .iter()
        .map(|&id| net.slot(id))
        .collect::<Result<_, _>>()?;
    let mw = net.mw_per_pu();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            rect.lower_mw
                .iter()
                .zip(&rect.upper_mw)
                .map(|(&lo, &hi)| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
                .collect()
        })
        .collect();
    let q: Vec<f64> = q_d.iter().map(|d| -d).collect();
    let outcomes: Vec<(bool, bool, f64)> = draws
        .par_iter()
        .map(|draw| {
            let mut p: Vec<f64> = p_d.iter().map(|d| -d).collect();
            for (&s, &v) in slots.iter().zip(draw) {
                p[s] += v / mw;
            }
            let op = backward_forward_sweep(net, &p, &q, LoadFlowOptions::default())
                .expect("dimensions match");
            if !op.converged {
                return (false, true, f64::INFINITY);
            }
            let rep = check_admissible(net, &op, slack).expect("converged");
            (!rep.admissible, false, rep.worst_violation)
        })
        .collect();
    debug_assert_eq!(p_d.len(), n);
    Ok(AuditReport {
        samples,
        violations: outcomes.iter().filter(|o| o.0).count(),
        nonconverged: outcomes.iter().filter(|o| o.1).count(),
        worst_violation: outcomes.iter().map(|o| o.2).fold(0.0, f64::max),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrices::compact_matrices;
    use crate::network::build_network;
    use crate::network::tests::four_bus_spec;

    fn setup() -> (Network, CompactMatrices) {
        let net = build_network(&four_bus_spec()).unwrap();
        let m = compact_matrices(&net).unwrap();
        (net, m)
    }

    #[test]
    fn presets_parse() {
        for name in SCENARIO_NAMES {
            assert_eq!(Scenario::preset(name).unwrap().name, name);
        }
        assert!(matches!(
            Scenario::preset("s9"),
            Err(HcError::UnknownScenario(_))
        ));
        assert_eq!(
            Scenario::preset("s1f2").unwrap().fairness.unwrap().epsilon,
            DEFAULT_EPSILON
        );
        assert!(Scenario::preset("s1f1").unwrap().with_epsilon(1.5).is_err());
    }

    #[test]
    fn no_load_linearization_is_flat() {
        let (net, _) = setup();
        let lin = linearize(&net, &[0.0; 3], &[0.0; 3]).unwrap();
        for k in 0..3 {
            assert_eq!(lin.l0[k], 0.0);
            assert_eq!(lin.j[k], [0.0, 0.0, 0.0]);
            let h = lin.hessian(k);
            assert_eq!(h, Matrix3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn hessian_is_psd_and_expansion_exact() {
        let (net, _) = setup();
        let (pd, qd) = net.nominal_demand();
        let lin = linearize(&net, &pd, &qd).unwrap();
        for k in 0..3 {
            let eig = lin.hessian(k).symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e >= -1e-9));
            let x0 = lin.x0(k);
            assert_eq!(lin.lower(k, &x0, &x0), lin.l0[k]);
            assert!((lin.l0[k] * lin.v0[k] - lin.p0[k].powi(2) - lin.q0[k].powi(2)).abs() < 1e-10);
        }
    }

    #[test]
    fn soc_problem_shape() {
        let (net, m) = setup();
        let (pd, qd) = net.nominal_demand();
        let lin = linearize(&net, &pd, &qd).unwrap();
        let s1 = Scenario::preset("s1").unwrap();
        let p1 = build_p1(&net, &m, &lin, &s1, BoundVariant::Soc, Direction::Upper).unwrap();
        assert_eq!(p1.problem.n_soc(), 12);
        assert!(p1.problem.soc_dims().iter().all(|&d| d == 3));
        let p1 = build_p1(&net, &m, &lin, &s1, BoundVariant::Conservative, Direction::Upper)
            .unwrap();
        assert_eq!(p1.problem.n_soc(), 8 * 3);
    }

    #[test]
    fn zero_demand_origin_feasible() {
        let (net, m) = setup();
        let lin = linearize(&net, &[0.0; 3], &[0.0; 3]).unwrap();
        let mut p1 = build_p1(
            &net,
            &m,
            &lin,
            &Scenario::preset("s1").unwrap(),
            BoundVariant::Soc,
            Direction::Upper,
        )
        .unwrap();
        for v in p1.vars.p_g.clone().vars() {
            p1.problem.fix(v, 0.0);
        }
        assert!(solve_p1(&p1, &lin, SOLVER_TOL).is_ok());
    }

    #[test]
    fn bounds_order_at_expansion_point() {
        let (net, m) = setup();
        let (pd, qd) = net.nominal_demand();
        let lin = linearize(&net, &pd, &qd).unwrap();
        let p: Vec<f64> = pd.iter().map(|d| -d).collect();
        let q: Vec<f64> = qd.iter().map(|d| -d).collect();
        for variant in [BoundVariant::Soc, BoundVariant::Conservative] {
            let env = envelope_at(&m, &lin, net.v0, &p, &q, &lin.l0, variant);
            assert!(env.converged);
            for k in 0..3 {
                assert!((env.l_plus[k] - lin.l0[k]).abs() < 1e-9);
                assert!((env.l_minus[k] - lin.l0[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_series_gives_identical_boxes() {
        let (net, m) = setup();
        let (pd, qd) = net.nominal_demand();
        let t0 = DateTime::parse_from_rfc3339("2023-06-01T12:00:00-05:00").unwrap();
        let ts = (0..3).map(|i| t0 + chrono::Duration::minutes(5 * i)).collect();
        let demand = DemandSeries::new(ts, vec![pd.clone(); 3], vec![qd.clone(); 3]).unwrap();
        let dhc = dhc_timeseries(
            &net,
            &m,
            &demand,
            &Scenario::preset("s1").unwrap(),
            BoundVariant::Soc,
            DaytimeWindow::default(),
            HcOptions::default(),
        )
        .unwrap();
        let rects: Vec<_> = dhc.solved().map(|(_, r)| r.clone()).collect();
        assert_eq!(rects.len(), 3);
        assert_eq!(rects[0], rects[1]);
        assert_eq!(rects[1], rects[2]);
    }
}
