//! Exact branch flow (DistFlow) solution by backward-forward sweep, and the
//! AC admissibility oracle built on it.
//!
//! Flows are measured at the downstream end of each branch and point toward
//! the substation, so a positive `P[n]` means bus `n + 1` and its subtree
//! export power upstream. `l[n] = (P[n]^2 + Q[n]^2) / v[n]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::Network;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadFlowError {
    #[error("expected vectors of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("load flow diverged after {iterations} iterations (residual {residual:e})")]
    Diverged { iterations: usize, residual: f64 },
    #[error("operating point did not converge")]
    NotConverged,
    #[error("sweep bus {0} is not a generation node")]
    NotGenerator(u32),
    #[error("sweep axis for bus {0} needs at least 2 points over a nonzero range")]
    Resolution(u32),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LoadFlowOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Full branch flow state, per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    /// Squared bus voltages (slot `n` is bus `n + 1`).
    pub v: Vec<f64>,
    /// Squared branch currents.
    pub l: Vec<f64>,
    /// Net injections `p_g - p_d`.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
}

/// Largest absolute residual over the four branch flow equations.
pub fn distflow_residual(net: &Network, op: &OperatingPoint) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, br) in net.branches().iter().enumerate() {
        let (mut p_in, mut q_in) = (op.p[k], op.q[k]);
        for &c in net.children(k + 1) {
            let child = &net.branches()[c];
            p_in += op.p_flow[c] - child.r * op.l[c];
            q_in += op.q_flow[c] - child.x * op.l[c];
        }
        let v_par = parent_voltage(net, &op.v, br.parent);
        let v_expect = v_par + 2.0 * (br.r * op.p_flow[k] + br.x * op.q_flow[k]) - br.z2() * op.l[k];
        let s2 = op.p_flow[k].powi(2) + op.q_flow[k].powi(2);
        worst = worst
            .max((op.p_flow[k] - p_in).abs())
            .max((op.q_flow[k] - q_in).abs())
            .max((op.v[k] - v_expect).abs())
            .max((op.l[k] * op.v[k] - s2).abs());
    }
    worst
}

fn parent_voltage(net: &Network, v: &[f64], parent: usize) -> f64 {
    if parent == 0 {
        net.v0
    } else {
        v[parent - 1]
    }
}

/// Backward-forward sweep on net injections `p`, `q`. Returns the last
/// iterate with `converged = false` when the tolerance is not reached or the
/// voltages collapse.
pub fn backward_forward_sweep(
    net: &Network,
    p: &[f64],
    q: &[f64],
    opts: LoadFlowOptions,
) -> Result<OperatingPoint, LoadFlowError> {
    let n = net.n();
    for len in [p.len(), q.len()] {
        if len != n {
            return Err(LoadFlowError::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    let branches = net.branches();
    let mut op = OperatingPoint {
        p_flow: vec![0.0; n],
        q_flow: vec![0.0; n],
        v: vec![net.v0; n],
        l: vec![0.0; n],
        p: p.to_vec(),
        q: q.to_vec(),
        converged: false,
        residual: f64::INFINITY,
        iterations: 0,
    };
    for it in 1..=opts.max_iter {
        op.iterations = it;
        for k in (0..n).rev() {
            let (mut pk, mut qk) = (p[k], q[k]);
            for &c in net.children(k + 1) {
                pk += op.p_flow[c] - branches[c].r * op.l[c];
                qk += op.q_flow[c] - branches[c].x * op.l[c];
            }
            op.p_flow[k] = pk;
            op.q_flow[k] = qk;
        }
        for (k, br) in branches.iter().enumerate() {
            let v_par = parent_voltage(net, &op.v, br.parent);
            let vk = v_par + 2.0 * (br.r * op.p_flow[k] + br.x * op.q_flow[k]) - br.z2() * op.l[k];
            if !(vk > 0.0 && vk.is_finite()) {
                op.residual = f64::INFINITY;
                return Ok(op);
            }
            op.v[k] = vk;
            op.l[k] = (op.p_flow[k].powi(2) + op.q_flow[k].powi(2)) / vk;
        }
        op.residual = distflow_residual(net, &op);
        if !op.residual.is_finite() {
            return Ok(op);
        }
        if op.residual < opts.tol {
            op.converged = true;
            return Ok(op);
        }
    }
    Ok(op)
}

/// Solves the branch flow equations for generation `p_g`, `q_g` and demand
/// `p_d`, `q_d` (all per-unit, one entry per slot).
pub fn solve_loadflow(
    net: &Network,
    p_g: &[f64],
    q_g: &[f64],
    p_d: &[f64],
    q_d: &[f64],
) -> Result<OperatingPoint, LoadFlowError> {
    solve_loadflow_with(net, p_g, q_g, p_d, q_d, LoadFlowOptions::default())
}

pub fn solve_loadflow_with(
    net: &Network,
    p_g: &[f64],
    q_g: &[f64],
    p_d: &[f64],
    q_d: &[f64],
    opts: LoadFlowOptions,
) -> Result<OperatingPoint, LoadFlowError> {
    let n = net.n();
    for len in [p_g.len(), q_g.len(), p_d.len(), q_d.len()] {
        if len != n {
            return Err(LoadFlowError::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    let p: Vec<f64> = p_g.iter().zip(p_d).map(|(g, d)| g - d).collect();
    let q: Vec<f64> = q_g.iter().zip(q_d).map(|(g, d)| g - d).collect();
    let op = backward_forward_sweep(net, &p, &q, opts)?;
    if op.converged {
        Ok(op)
    } else {
        Err(LoadFlowError::Diverged {
            iterations: op.iterations,
            residual: op.residual,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageViolation {
    pub bus_id: u32,
    /// Squared voltage.
    pub v: f64,
    /// The squared limit that was crossed.
    pub limit: f64,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentViolation {
    pub from_id: u32,
    pub to_id: u32,
    pub l: f64,
    pub limit: f64,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    pub voltage_violations: Vec<VoltageViolation>,
    pub current_violations: Vec<CurrentViolation>,
    pub worst_violation: f64,
}

/// Flags every squared voltage outside `[v_lo - slack, v_hi + slack]` and
/// every squared current above its limit plus `slack`.
pub fn check_admissible(
    net: &Network,
    op: &OperatingPoint,
    slack: f64,
) -> Result<AdmissibilityReport, LoadFlowError> {
    if !op.converged {
        return Err(LoadFlowError::NotConverged);
    }
    let mut voltage_violations = Vec::new();
    let mut current_violations = Vec::new();
    let mut worst: f64 = 0.0;
    for (k, br) in net.branches().iter().enumerate() {
        let v = op.v[k];
        let (excess, limit) = if v > net.v_hi {
            (v - net.v_hi, net.v_hi)
        } else if v < net.v_lo {
            (net.v_lo - v, net.v_lo)
        } else {
            (0.0, 0.0)
        };
        if excess > slack {
            worst = worst.max(excess);
            voltage_violations.push(VoltageViolation {
                bus_id: net.slot_id(k),
                v,
                limit,
                excess,
            });
        }
        let over = op.l[k] - br.l_max;
        if over > slack {
            worst = worst.max(over);
            current_violations.push(CurrentViolation {
                from_id: net.buses()[br.parent].id,
                to_id: net.slot_id(k),
                l: op.l[k],
                limit: br.l_max,
                excess: over,
            });
        }
    }
    Ok(AdmissibilityReport {
        admissible: voltage_violations.is_empty() && current_violations.is_empty(),
        voltage_violations,
        current_violations,
        worst_violation: worst,
    })
}

/// One axis of a two-dimensional injection sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub bus_id: u32,
    pub min_mw: f64,
    pub max_mw: f64,
    pub points: usize,
}

impl SweepAxis {
    fn values(&self) -> Vec<f64> {
        if self.min_mw == self.max_mw {
            return vec![self.min_mw];
        }
        let step = (self.max_mw - self.min_mw) / (self.points - 1) as f64;
        (0..self.points)
            .map(|i| self.min_mw + step * i as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellClass {
    Admissible,
    Violation,
    Nonconverged,
}

impl CellClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellClass::Admissible => "admissible",
            CellClass::Violation => "violation",
            CellClass::Nonconverged => "nonconverged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub pg_a_mw: f64,
    pub pg_b_mw: f64,
    pub class: CellClass,
}

/// Row-major raster: the first axis indexes rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRaster {
    pub axes: [SweepAxis; 2],
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<SweepCell>,
}

impl SweepRaster {
    pub fn cell(&self, row: usize, col: usize) -> &SweepCell {
        &self.cells[row * self.cols + col]
    }

    pub fn count(&self, class: CellClass) -> usize {
        self.cells.iter().filter(|c| c.class == class).count()
    }
}

/// Classifies every cell of a grid of injections at two generation buses.
/// Other buses inject nothing; demand is held at `p_d`, `q_d`.
pub fn sweep_admissible_set(
    net: &Network,
    axes: [SweepAxis; 2],
    p_d: &[f64],
    q_d: &[f64],
) -> Result<SweepRaster, LoadFlowError> {
    let mut slots = [0usize; 2];
    for (axis, slot) in axes.iter().zip(slots.iter_mut()) {
        *slot = net.slot(axis.bus_id)?;
        if !net.generator_slots().contains(slot) {
            return Err(LoadFlowError::NotGenerator(axis.bus_id));
        }
        if axis.min_mw != axis.max_mw && axis.points < 2 || axis.min_mw > axis.max_mw {
            return Err(LoadFlowError::Resolution(axis.bus_id));
        }
    }
    let n = net.n();
    if p_d.len() != n || q_d.len() != n {
        return Err(LoadFlowError::Dimension {
            expected: n,
            got: p_d.len().min(q_d.len()),
        });
    }
    let (va, vb) = (axes[0].values(), axes[1].values());
    let (rows, cols) = (va.len(), vb.len());
    let mw = net.mw_per_pu();
    let cells = (0..rows * cols)
        .into_par_iter()
        .map(|idx| {
            let (a, b) = (va[idx / cols], vb[idx % cols]);
            let mut p: Vec<f64> = p_d.iter().map(|d| -d).collect();
            let q: Vec<f64> = q_d.iter().map(|d| -d).collect();
            p[slots[0]] += a / mw;
            p[slots[1]] += b / mw;
            let op = backward_forward_sweep(net, &p, &q, LoadFlowOptions::default())
                .expect("dimensions checked");
            let class = if !op.converged {
                CellClass::Nonconverged
            } else if check_admissible(net, &op, 0.0)
                .expect("converged")
                .admissible
            {
                CellClass::Admissible
            } else {
                CellClass::Violation
            };
            SweepCell {
                pg_a_mw: a,
                pg_b_mw: b,
                class,
            }
        })
        .collect();
    Ok(SweepRaster {
        axes,
        rows,
        cols,
        cells,
    })
}
