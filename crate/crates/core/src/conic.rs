//! Small conic modeling layer: affine expressions over registered variables,
//! linear rows, second-order cones and logarithmic objective terms, solved
//! with the Clarabel interior point method.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, Mul, Neg, Sub};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::Serialize;
use thiserror::Error;

/// Floor applied to every variable that appears inside a log term.
pub const LOG_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("second-order cone needs a nonempty vector part")]
    EmptyCone,
    #[error("expression references unregistered variable {0}")]
    UnknownVariable(usize),
    #[error("log term on variable {0}: {1}")]
    InvalidLogTerm(usize, &'static str),
    #[error("non-finite coefficient in {0}")]
    NonFinite(&'static str),
    #[error("solver backend: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarBlock {
    pub name: String,
    start: usize,
    len: usize,
}

impl VarBlock {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> Var {
        assert!(i < self.len, "index {i} out of block {}", self.name);
        Var(self.start + i)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (self.start..self.start + self.len).map(Var)
    }
}

/// `sum(coef * x) + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn term(v: Var, c: f64) -> Self {
        Self {
            terms: vec![(v, c)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: Var, c: f64) -> &mut Self {
        if c != 0.0 {
            self.terms.push((v, c));
        }
        self
    }

    pub fn add_const(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Affine, c: f64) -> &mut Self {
        if c != 0.0 {
            self.terms
                .extend(other.terms.iter().map(|&(v, a)| (v, a * c)));
            self.constant += c * other.constant;
        }
        self
    }

    pub fn scaled(&self, c: f64) -> Affine {
        let mut out = Affine::zero();
        out.add_scaled(self, c);
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, &(v, c)| acc + c * x[v.0])
    }

    /// Merges repeated variables and drops zero coefficients.
    pub fn compact(&self) -> Affine {
        let mut map: BTreeMap<Var, f64> = BTreeMap::new();
        for &(v, c) in &self.terms {
            *map.entry(v).or_default() += c;
        }
        Affine {
            terms: map.into_iter().filter(|&(_, c)| c != 0.0).collect(),
            constant: self.constant,
        }
    }

    fn is_finite(&self) -> bool {
        self.constant.is_finite() && self.terms.iter().all(|(_, c)| c.is_finite())
    }
}

impl From<Var> for Affine {
    fn from(v: Var) -> Self {
        Affine::term(v, 1.0)
    }
}

impl From<f64> for Affine {
    fn from(c: f64) -> Self {
        Affine::constant(c)
    }
}

impl<T: Into<Affine>> Add<T> for Affine {
    type Output = Affine;
    fn add(mut self, rhs: T) -> Affine {
        let rhs = rhs.into();
        self.add_scaled(&rhs, 1.0);
        self
    }
}

impl<T: Into<Affine>> Sub<T> for Affine {
    type Output = Affine;
    fn sub(mut self, rhs: T) -> Affine {
        let rhs = rhs.into();
        self.add_scaled(&rhs, -1.0);
        self
    }
}

impl Mul<f64> for Affine {
    type Output = Affine;
    fn mul(self, c: f64) -> Affine {
        self.scaled(c)
    }
}

impl Neg for Affine {
    type Output = Affine;
    fn neg(self) -> Affine {
        self.scaled(-1.0)
    }
}

impl<T: Into<Affine>> Add<T> for Var {
    type Output = Affine;
    fn add(self, rhs: T) -> Affine {
        Affine::from(self) + rhs
    }
}

impl<T: Into<Affine>> Sub<T> for Var {
    type Output = Affine;
    fn sub(self, rhs: T) -> Affine {
        Affine::from(self) - rhs
    }
}

impl Mul<f64> for Var {
    type Output = Affine;
    fn mul(self, c: f64) -> Affine {
        Affine::term(self, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sense {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintId {
    Eq(usize),
    Le(usize),
    Soc(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Soc {
    t: Affine,
    u: Vec<Affine>,
}

#[derive(Debug, Clone, PartialEq)]
struct LogTerm {
    weight: f64,
    var: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProblem {
    blocks: Vec<VarBlock>,
    n_vars: usize,
    sense: Sense,
    objective: Affine,
    logs: Vec<LogTerm>,
    eqs: Vec<Affine>,
    les: Vec<Affine>,
    socs: Vec<Soc>,
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
}

impl Default for ConicProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl ConicProblem {
    pub fn new() -> Self {
        Self {
            blocks: Vec::new(),
            n_vars: 0,
            sense: Sense::Maximize,
            objective: Affine::zero(),
            logs: Vec::new(),
            eqs: Vec::new(),
            les: Vec::new(),
            socs: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }

    pub fn add_vars(&mut self, name: &str, len: usize) -> VarBlock {
        let block = VarBlock {
            name: name.to_string(),
            start: self.n_vars,
            len,
        };
        self.n_vars += len;
        self.lower.resize(self.n_vars, None);
        self.upper.resize(self.n_vars, None);
        self.blocks.push(block.clone());
        block
    }

    pub fn add_var(&mut self, name: &str) -> Var {
        self.add_vars(name, 1).get(0)
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_eq(&self) -> usize {
        self.eqs.len()
    }

    pub fn n_le(&self) -> usize {
        self.les.len()
    }

    pub fn n_soc(&self) -> usize {
        self.socs.len()
    }

    /// Vector-part lengths of the stored cones.
    pub fn soc_dims(&self) -> Vec<usize> {
        self.socs.iter().map(|s| s.u.len()).collect()
    }

    pub fn n_log(&self) -> usize {
        self.logs.len()
    }

    pub fn add_eq(&mut self, lhs: impl Into<Affine>, rhs: impl Into<Affine>) -> ConstraintId {
        self.eqs.push(lhs.into() - rhs.into());
        ConstraintId::Eq(self.eqs.len() - 1)
    }

    pub fn add_le(&mut self, lhs: impl Into<Affine>, rhs: impl Into<Affine>) -> ConstraintId {
        self.les.push(lhs.into() - rhs.into());
        ConstraintId::Le(self.les.len() - 1)
    }

    pub fn add_ge(&mut self, lhs: impl Into<Affine>, rhs: impl Into<Affine>) -> ConstraintId {
        self.add_le(rhs, lhs)
    }

    /// Enforces `||u||_2 <= t`.
    pub fn add_soc(&mut self, u: Vec<Affine>, t: impl Into<Affine>) -> Result<ConstraintId, ConicError> {
        if u.is_empty() {
            return Err(ConicError::EmptyCone);
        }
        self.socs.push(Soc { t: t.into(), u });
        Ok(ConstraintId::Soc(self.socs.len() - 1))
    }

    pub fn set_lower(&mut self, v: Var, lo: f64) {
        let slot = &mut self.lower[v.0];
        *slot = Some(slot.map_or(lo, |old| old.max(lo)));
    }

    pub fn set_upper(&mut self, v: Var, hi: f64) {
        let slot = &mut self.upper[v.0];
        *slot = Some(slot.map_or(hi, |old| old.min(hi)));
    }

    pub fn fix(&mut self, v: Var, value: f64) {
        self.set_lower(v, value);
        self.set_upper(v, value);
    }

    pub fn maximize(&mut self, obj: impl Into<Affine>) {
        self.sense = Sense::Maximize;
        self.objective = obj.into();
    }

    pub fn minimize(&mut self, obj: impl Into<Affine>) {
        self.sense = Sense::Minimize;
        self.objective = obj.into();
    }

    /// Adds `weight * log(v)` to a maximization objective. The variable is
    /// floored at [`LOG_FLOOR`].
    pub fn add_log_term(&mut self, weight: f64, v: Var) -> Result<(), ConicError> {
        if v.0 >= self.n_vars {
            return Err(ConicError::UnknownVariable(v.0));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(ConicError::InvalidLogTerm(v.0, "weight must be finite and nonnegative"));
        }
        self.set_lower(v, LOG_FLOOR);
        self.logs.push(LogTerm { weight, var: v });
        Ok(())
    }

    fn affines(&self) -> impl Iterator<Item = (&'static str, &Affine)> {
        std::iter::once(("objective", &self.objective))
            .chain(self.eqs.iter().map(|a| ("equality", a)))
            .chain(self.les.iter().map(|a| ("inequality", a)))
            .chain(
                self.socs
                    .iter()
                    .flat_map(|s| std::iter::once(&s.t).chain(&s.u))
                    .map(|a| ("cone", a)),
            )
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        for (what, a) in self.affines() {
            if !a.is_finite() {
                return Err(ConicError::NonFinite(what));
            }
            if let Some(&(v, _)) = a.terms.iter().find(|(v, _)| v.0 >= self.n_vars) {
                return Err(ConicError::UnknownVariable(v.0));
            }
        }
        if !self.logs.is_empty() && self.sense != Sense::Maximize {
            return Err(ConicError::InvalidLogTerm(
                self.logs[0].var.0,
                "log terms require a maximization objective",
            ));
        }
        if self
            .lower
            .iter()
            .chain(&self.upper)
            .flatten()
            .any(|b| b.is_nan())
        {
            return Err(ConicError::NonFinite("bound"));
        }
        Ok(())
    }

    /// Objective value at `x`, including log terms.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective.eval(x)
            + self
                .logs
                .iter()
                .map(|l| l.weight * x[l.var.0].ln())
                .sum::<f64>()
    }

    /// Largest violation of any stored row, cone or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for a in &self.eqs {
            worst = worst.max(a.eval(x).abs());
        }
        for a in &self.les {
            worst = worst.max(a.eval(x));
        }
        for s in &self.socs {
            let norm = s.u.iter().map(|a| a.eval(x).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(norm - s.t.eval(x));
        }
        for (i, &xi) in x.iter().enumerate() {
            if let Some(lo) = self.lower[i] {
                worst = worst.max(lo - xi);
            }
            if let Some(hi) = self.upper[i] {
                worst = worst.max(xi - hi);
            }
        }
        worst
    }

    /// Human-readable listing of variables, rows and cones.
    pub fn dump(&self) -> String {
        let names = self.var_names();
        let fmt = |a: &Affine| {
            let mut s = String::new();
            for &(v, c) in &a.compact().terms {
                let _ = write!(s, "{c:+} {} ", names[v.0]);
            }
            let _ = write!(s, "{:+}", a.constant);
            s
        };
        let mut out = String::new();
        let _ = writeln!(out, "variables {}", self.n_vars);
        for b in &self.blocks {
            let _ = writeln!(out, "  {}[{}]", b.name, b.len);
        }
        let sense = match self.sense {
            Sense::Maximize => "maximize",
            Sense::Minimize => "minimize",
        };
        let _ = writeln!(out, "{sense} {}", fmt(&self.objective));
        for l in &self.logs {
            let _ = writeln!(out, "  {:+} log({})", l.weight, names[l.var.0]);
        }
        for (i, a) in self.eqs.iter().enumerate() {
            let _ = writeln!(out, "eq{i}: {} == 0", fmt(a));
        }
        for (i, a) in self.les.iter().enumerate() {
            let _ = writeln!(out, "le{i}: {} <= 0", fmt(a));
        }
        for (i, s) in self.socs.iter().enumerate() {
            let u: Vec<String> = s.u.iter().map(fmt).collect();
            let _ = writeln!(out, "soc{i}: ||({})|| <= {}", u.join(", "), fmt(&s.t));
        }
        for i in 0..self.n_vars {
            if self.lower[i].is_some() || self.upper[i].is_some() {
                let _ = writeln!(
                    out,
                    "bound {}: [{}, {}]",
                    names[i],
                    self.lower[i].unwrap_or(f64::NEG_INFINITY),
                    self.upper[i].unwrap_or(f64::INFINITY)
                );
            }
        }
        out
    }

    fn var_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.n_vars];
        for b in &self.blocks {
            for i in 0..b.len {
                names[b.start + i] = if b.len == 1 {
                    b.name.clone()
                } else {
                    format!("{}[{i}]", b.name)
                };
            }
        }
        names
    }

    pub fn solve(&self, tol: f64) -> Result<ConicSolution, ConicError> {
        self.validate()?;
        let n_aux = self.logs.len();
        let n = self.n_vars + n_aux;
        let mut rows = Rows::default();

        // Clarabel form: A x + s = b, s in K, so an expression a.x + c maps to
        // row -a with b = c when s must equal it.
        for a in &self.eqs {
            rows.push_neg(a);
        }
        let n_zero = rows.b.len();
        for a in &self.les {
            rows.push_neg(&-a.clone());
        }
        for i in 0..self.n_vars {
            if let Some(lo) = self.lower[i] {
                rows.push_neg(&(Var(i) - lo));
            }
            if let Some(hi) = self.upper[i] {
                rows.push_neg(&(Affine::constant(hi) - Var(i)));
            }
        }
        let n_nonneg = rows.b.len() - n_zero;
        let mut cones = Vec::new();
        if n_zero > 0 {
            cones.push(SupportedConeT::ZeroConeT(n_zero));
        }
        if n_nonneg > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
        }
        for s in &self.socs {
            rows.push_neg(&s.t);
            for u in &s.u {
                rows.push_neg(u);
            }
            cones.push(SupportedConeT::SecondOrderConeT(s.u.len() + 1));
        }
        // t_j <= log x_j  <=>  (t_j, 1, x_j) in the exponential cone
        for (j, l) in self.logs.iter().enumerate() {
            let t = Var(self.n_vars + j);
            rows.push_neg(&Affine::from(t));
            rows.push_neg(&Affine::constant(1.0));
            rows.push_neg(&Affine::from(l.var));
            cones.push(SupportedConeT::ExponentialConeT());
        }

        let sign = match self.sense {
            Sense::Maximize => -1.0,
            Sense::Minimize => 1.0,
        };
        let mut q = vec![0.0; n];
        for &(v, c) in &self.objective.terms {
            q[v.0] += sign * c;
        }
        for (j, l) in self.logs.iter().enumerate() {
            q[self.n_vars + j] = -l.weight;
        }

        let m = rows.b.len();
        let a_mat = CscMatrix::new_from_triplets(m, n, rows.i, rows.j, rows.v);
        let p_mat = CscMatrix::<f64>::zeros((n, n));
        let settings = DefaultSettings {
            verbose: false,
            tol_gap_abs: tol,
            tol_gap_rel: tol,
            tol_feas: tol,
            max_iter: 400,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p_mat, &q, &a_mat, &rows.b, &cones, settings)
            .map_err(|e| ConicError::Backend(e.to_string()))?;
        solver.solve();

        let x: Vec<f64> = solver.solution.x[..self.n_vars].to_vec();
        let stats = SolveStats {
            iterations: solver.info.iterations,
            primal_residual: solver.info.res_primal,
            dual_residual: solver.info.res_dual,
            gap_rel: solver.info.gap_rel,
            solve_time: solver.info.solve_time,
            backend_status: format!("{:?}", solver.solution.status),
        };
        let finite = x.iter().all(|v| v.is_finite());
        let max_violation = if finite {
            self.max_violation(&x)
        } else {
            f64::INFINITY
        };
        let status = match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved
                if max_violation <= ACCEPT_VIOLATION.max(100.0 * tol) =>
            {
                Status::Optimal
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Status::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                Status::Unbounded
            }
            _ => Status::NumericalFailure,
        };
        let objective = if status == Status::Optimal {
            self.objective_at(&x)
        } else {
            f64::NAN
        };
        Ok(ConicSolution {
            status,
            x,
            objective,
            max_violation,
            stats,
        })
    }
}

/// Independent recheck threshold above which a reported solution is not
/// trusted.
const ACCEPT_VIOLATION: f64 = 1e-6;

#[derive(Default)]
struct Rows {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    /// Appends a row whose slack equals `a`.
    fn push_neg(&mut self, a: &Affine) {
        let row = self.b.len();
        for &(var, c) in &a.terms {
            self.i.push(row);
            self.j.push(var.0);
            self.v.push(-c);
        }
        self.b.push(a.constant);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveStats {
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap_rel: f64,
    pub solve_time: f64,
    pub backend_status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConicSolution {
    pub status: Status,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Largest constraint violation found by substituting `x` back into the
    /// stored problem.
    pub max_violation: f64,
    pub stats: SolveStats,
}

impl ConicSolution {
    pub fn value(&self, v: Var) -> f64 {
        self.x[v.0]
    }

    pub fn values(&self, b: &VarBlock) -> Vec<f64> {
        b.vars().map(|v| self.x[v.0]).collect()
    }

    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}
