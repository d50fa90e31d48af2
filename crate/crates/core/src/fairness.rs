//! Epsilon-fair allocation constraints and Jain fairness indices.
//!
//! The norm inequality `||w||_2 <= ||w||_1 <= sqrt(N) ||w||_2` for `w >= 0`
//! is tightened to `(1 - eps + eps sqrt(N)) ||w||_2 <= sum(w)`, which forces
//! the Jain index of `w` above `(1 - eps + eps sqrt(N))^2 / N`.

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{Affine, ConicProblem, ConstraintId, Var};
use crate::hc::{DhcSeries, StepOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FairnessError {
    #[error("epsilon {0} outside [0, 1]")]
    Epsilon(f64),
    #[error("proportional fairness needs a positive weight for every node (node index {0})")]
    ZeroWeight(usize),
    #[error("expected {expected} weights, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("negative entry {0} in fairness input")]
    Negative(f64),
    #[error("no allocation variables")]
    Empty,
    #[error(transparent)]
    Conic(#[from] crate::conic::ConicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessMode {
    /// Equal allocations.
    Uniform,
    /// Allocations proportional to demand.
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessSpec {
    pub epsilon: f64,
    pub mode: FairnessMode,
}

impl FairnessSpec {
    pub fn new(epsilon: f64, mode: FairnessMode) -> Result<Self, FairnessError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(FairnessError::Epsilon(epsilon));
        }
        Ok(Self { epsilon, mode })
    }

    /// Norm ratio `1 - eps + eps sqrt(N)`.
    pub fn coefficient(&self, n: usize) -> f64 {
        1.0 - self.epsilon + self.epsilon * (n as f64).sqrt()
    }
}

/// Adds the epsilon-fairness rows over the allocation variables `p`.
///
/// `alpha` is required in proportional mode and gives the normalized
/// demand shares. At `eps = 1` the cone has no interior, so the equivalent
/// equalities `w_i = w_0` are added instead.
pub fn epsilon_constraint(
    problem: &mut ConicProblem,
    spec: &FairnessSpec,
    p: &[Var],
    alpha: Option<&[f64]>,
) -> Result<Vec<ConstraintId>, FairnessError> {
    if !(0.0..=1.0).contains(&spec.epsilon) {
        return Err(FairnessError::Epsilon(spec.epsilon));
    }
    if p.is_empty() {
        return Err(FairnessError::Empty);
    }
    let scale: Vec<f64> = match spec.mode {
        FairnessMode::Uniform => vec![1.0; p.len()],
        FairnessMode::Proportional => {
            let alpha = alpha.ok_or(FairnessError::Dimension {
                expected: p.len(),
                got: 0,
            })?;
            if alpha.len() != p.len() {
                return Err(FairnessError::Dimension {
                    expected: p.len(),
                    got: alpha.len(),
                });
            }
            if let Some(i) = alpha.iter().position(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(FairnessError::ZeroWeight(i));
            }
            alpha.iter().map(|a| 1.0 / a).collect()
        }
    };
    let w: Vec<Affine> = p.iter().zip(&scale).map(|(&v, &s)| v * s).collect();
    if spec.epsilon == 1.0 {
        return Ok(w[1..]
            .iter()
            .map(|wi| problem.add_eq(wi.clone(), w[0].clone()))
            .collect());
    }
    let k = spec.coefficient(p.len());
    let mut total = Affine::zero();
    for wi in &w {
        total.add_scaled(wi, 1.0);
    }
    let u = w.iter().map(|wi| wi.scaled(k)).collect();
    Ok(vec![problem.add_soc(u, total)?])
}

/// Jain's index `||x||_1^2 / (N ||x||_2^2)`, with the all-zero vector mapped to 0.
pub fn jfi(values: &[f64]) -> Result<f64, FairnessError> {
    if let Some(&v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(FairnessError::Negative(v));
    }
    if values.is_empty() {
        return Err(FairnessError::Empty);
    }
    let s1: f64 = values.iter().sum();
    let s2: f64 = values.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        return Ok(0.0);
    }
    Ok(s1 * s1 / (values.len() as f64 * s2))
}

pub fn jfi_lower_bound(epsilon: f64, n: usize) -> f64 {
    let k = 1.0 - epsilon + epsilon * (n as f64).sqrt();
    k * k / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessReport {
    pub scenario: String,
    pub node_ids: Vec<u32>,
    /// Nodes left out because their demand is zero at some daytime step.
    pub excluded: Vec<bool>,
    pub timestamps: Vec<DateTime<FixedOffset>>,
    /// `rho[t][i] = p_plus / p_d`; `NaN` for excluded nodes.
    pub rho: Vec<Vec<f64>>,
    pub temporal_jfi: Vec<f64>,
    pub spatial_jfi: Vec<f64>,
}

/// Hosting-capacity-to-demand ratios and their temporal and spatial Jain
/// indices over the solved steps of `dhc`.
pub fn fairness_report(dhc: &DhcSeries) -> Result<FairnessReport, FairnessError> {
    let solved: Vec<_> = dhc
        .steps
        .iter()
        .filter_map(|s| match &s.outcome {
            StepOutcome::Solved(rect) => Some((s, rect)),
            _ => None,
        })
        .collect();
    let n = dhc.node_ids.len();
    let mut excluded = vec![false; n];
    for (step, _) in &solved {
        for (i, &slot) in dhc.generator_slots.iter().enumerate() {
            if !(step.p_demand[slot] > 0.0) {
                excluded[i] = true;
            }
        }
    }
    for (i, &e) in excluded.iter().enumerate() {
        if e {
            log::warn!("node {} has zero demand at some step and is excluded", dhc.node_ids[i]);
        }
    }
    let mw = dhc.mw_per_pu;
    let rho: Vec<Vec<f64>> = solved
        .iter()
        .map(|(step, rect)| {
            (0..n)
                .map(|i| {
                    if excluded[i] {
                        f64::NAN
                    } else {
                        rect.upper_mw[i] / (step.p_demand[dhc.generator_slots[i]] * mw)
                    }
                })
                .collect()
        })
        .collect();
    let mut temporal_jfi = vec![f64::NAN; n];
    for i in 0..n {
        if !excluded[i] && !rho.is_empty() {
            let col: Vec<f64> = rho.iter().map(|r| r[i].max(0.0)).collect();
            temporal_jfi[i] = jfi(&col)?;
        }
    }
    let mut spatial_jfi = Vec::with_capacity(rho.len());
    for r in &rho {
        let row: Vec<f64> = r
            .iter()
            .zip(&excluded)
            .filter(|(_, &e)| !e)
            .map(|(v, _)| v.max(0.0))
            .collect();
        spatial_jfi.push(if row.is_empty() { f64::NAN } else { jfi(&row)? });
    }
    Ok(FairnessReport {
        scenario: dhc.scenario.clone(),
        node_ids: dhc.node_ids.clone(),
        excluded,
        timestamps: solved.iter().map(|(s, _)| s.timestamp).collect(),
        rho,
        temporal_jfi,
        spatial_jfi,
    })
}
