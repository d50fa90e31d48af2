//! Curtailment, carbon and net-profit analysis of PV capacity beyond the
//! static (minimum) hosting capacity.
//!
//! A one-day hosting-capacity series is tiled over the PV year by time of
//! day. Power is in MW, energy in MWh, emission rates in gCO2/kWh.

use std::collections::BTreeMap;

use chrono::{DateTime, FixedOffset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hc::{DhcSeries, StepOutcome};
use crate::series::{seconds_of_day, DaytimeWindow, HeldSeries, ScalarSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EconomicsError {
    #[error("hosting capacity series has no solved steps")]
    EmptySeries,
    #[error("PV shape is zero everywhere inside the daytime window")]
    ZeroPv,
    #[error("no hosting capacity for time of day {0} where PV is producing")]
    Misaligned(String),
    #[error("capacity increase grid must be nonempty, nonnegative and sorted")]
    Grid,
    #[error("prices must be finite and nonnegative")]
    Prices,
}

/// Static limit per node: the smallest upper hosting capacity over the
/// solved daytime steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticLimits {
    pub node_ids: Vec<u32>,
    pub l_pv_mw: Vec<f64>,
    /// Nodes whose limit is zero and so cannot host any base PV.
    pub zero: Vec<bool>,
}

/// Threshold below which a hosting capacity counts as zero (MW).
pub const ZERO_HC_MW: f64 = 1e-4;

pub fn static_limits(dhc: &DhcSeries) -> Result<StaticLimits, EconomicsError> {
    let n = dhc.node_ids.len();
    let mut l = vec![f64::INFINITY; n];
    let mut any = false;
    for (_, rect) in dhc.solved() {
        any = true;
        for (li, &u) in l.iter_mut().zip(&rect.upper_mw) {
            *li = li.min(u);
        }
    }
    if !any {
        return Err(EconomicsError::EmptySeries);
    }
    let l_pv_mw: Vec<f64> = l.into_iter().map(|v| if v < ZERO_HC_MW { 0.0 } else { v }).collect();
    Ok(StaticLimits {
        node_ids: dhc.node_ids.clone(),
        zero: l_pv_mw.iter().map(|&v| v == 0.0).collect(),
        l_pv_mw,
    })
}

/// Upper hosting capacity per node keyed by time of day.
#[derive(Debug, Clone, PartialEq)]
pub struct DhcProfile {
    pub node_ids: Vec<u32>,
    step_seconds: u32,
    by_slot: BTreeMap<u32, Vec<f64>>,
}

impl DhcProfile {
    pub fn from_series(dhc: &DhcSeries) -> Result<Self, EconomicsError> {
        let step_seconds = (dhc.step_minutes * 60.0).round().max(1.0) as u32;
        let by_slot: BTreeMap<u32, Vec<f64>> = dhc
            .solved()
            .map(|(s, r)| (seconds_of_day(&s.timestamp) / step_seconds, r.upper_mw.clone()))
            .collect();
        if by_slot.is_empty() {
            return Err(EconomicsError::EmptySeries);
        }
        Ok(Self {
            node_ids: dhc.node_ids.clone(),
            step_seconds,
            by_slot,
        })
    }

    pub fn at(&self, t: &DateTime<FixedOffset>) -> Option<&[f64]> {
        self.by_slot
            .get(&(seconds_of_day(t) / self.step_seconds))
            .map(Vec::as_slice)
    }
}

/// Reference PV output normalized to a unit peak and zeroed outside the
/// daytime window.
#[derive(Debug, Clone, PartialEq)]
pub struct PvShape {
    pub timestamps: Vec<DateTime<FixedOffset>>,
    pub step_hours: f64,
    pub norm: Vec<f64>,
}

pub fn pv_shape(pv: &ScalarSeries, window: DaytimeWindow) -> Result<PvShape, EconomicsError> {
    let masked: Vec<f64> = pv
        .timestamps
        .iter()
        .zip(&pv.values)
        .map(|(t, &v)| if window.contains(t) { v.max(0.0) } else { 0.0 })
        .collect();
    let peak = masked.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(EconomicsError::ZeroPv);
    }
    Ok(PvShape {
        timestamps: pv.timestamps.clone(),
        step_hours: pv.step_hours(),
        norm: masked.into_iter().map(|v| v / peak).collect(),
    })
}

/// Base PV sized at the static limit of each node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseProfile {
    pub node_ids: Vec<u32>,
    pub l_pv_mw: Vec<f64>,
    pub e_base_mwh: Vec<f64>,
}

impl BaseProfile {
    /// Base PV power at node `i`, step `t` (MW).
    pub fn power(&self, shape: &PvShape, i: usize, t: usize) -> f64 {
        self.l_pv_mw[i] * shape.norm[t]
    }

    pub fn total_mwh(&self) -> f64 {
        self.e_base_mwh.iter().sum()
    }
}

pub fn base_profile(limits: &StaticLimits, shape: &PvShape) -> BaseProfile {
    let s: f64 = shape.norm.iter().sum();
    BaseProfile {
        node_ids: limits.node_ids.clone(),
        l_pv_mw: limits.l_pv_mw.clone(),
        e_base_mwh: limits
            .l_pv_mw
            .iter()
            .map(|l| l * s * shape.step_hours)
            .collect(),
    }
}

/// Upper limit on additional energy per node: all headroom between the
/// hosting capacity and the base PV wherever the base PV produces.
pub fn asymptote(
    profile: &DhcProfile,
    shape: &PvShape,
    base: &BaseProfile,
) -> Result<Vec<f64>, EconomicsError> {
    let n = base.node_ids.len();
    let mut out = vec![0.0; n];
    for (t, ts) in shape.timestamps.iter().enumerate() {
        if shape.norm[t] <= 0.0 {
            continue;
        }
        let cap = hosting_at(profile, ts)?;
        for i in 0..n {
            let pb = base.power(shape, i, t);
            if pb > 0.0 {
                out[i] += (cap[i] - pb).max(0.0) * shape.step_hours;
            }
        }
    }
    Ok(out)
}

fn hosting_at<'a>(
    profile: &'a DhcProfile,
    ts: &DateTime<FixedOffset>,
) -> Result<&'a [f64], EconomicsError> {
    profile
        .at(ts)
        .ok_or_else(|| EconomicsError::Misaligned(ts.time().format("%H:%M").to_string()))
}

/// Avoided emissions (tCO2) of `energy_mwh` displacing grid generation.
pub fn avoided_co2_t(energy_mwh: f64, m_grid: f64, m_pv: f64) -> f64 {
    // MWh * g/kWh = kg
    energy_mwh * (m_grid - m_pv) * 1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    /// $/kWh of curtailed energy.
    pub lambda_curt: f64,
    /// $/tCO2 avoided.
    pub lambda_co2: f64,
    /// Life-cycle PV emissions, gCO2/kWh.
    pub m_pv: f64,
}

impl Default for Prices {
    fn default() -> Self {
        Self {
            lambda_curt: 0.20,
            lambda_co2: 100.0,
            m_pv: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub dc: f64,
    pub e_new_mwh: Vec<f64>,
    pub e_curt_mwh: Vec<f64>,
    pub e_add_mwh: Vec<f64>,
    pub e_add_total_mwh: f64,
    pub e_curt_total_mwh: f64,
    /// Delivered energy above the common base.
    pub e_add_common_mwh: f64,
    /// Relative to this scenario's own base energy.
    pub e_add_pct: f64,
    pub e_curt_pct: f64,
    /// Relative to the common base energy.
    pub e_add_common_pct: f64,
    pub e_curt_common_pct: f64,
    pub co2_avoided_t: Option<f64>,
    pub c_rev: Option<f64>,
    pub c_curt: Option<f64>,
    pub np: Option<f64>,
}

fn check_grid(dc_grid: &[f64]) -> Result<(), EconomicsError> {
    if dc_grid.is_empty()
        || dc_grid.iter().any(|d| !(d.is_finite() && *d >= 0.0))
        || dc_grid.windows(2).any(|w| w[1] < w[0])
    {
        return Err(EconomicsError::Grid);
    }
    Ok(())
}

struct Eval<'a> {
    profile: &'a DhcProfile,
    shape: &'a PvShape,
    base: &'a BaseProfile,
    common_base_mwh: f64,
    moer: Option<(&'a HeldSeries, Prices)>,
}

impl Eval<'_> {
    fn point(&self, dc: f64) -> Result<(CurvePoint, usize), EconomicsError> {
        let n = self.base.node_ids.len();
        let dt = self.shape.step_hours;
        let mut e_new = vec![0.0; n];
        let mut e_curt = vec![0.0; n];
        let mut e_add = vec![0.0; n];
        let mut co2 = 0.0;
        let mut gaps = 0;
        for (t, ts) in self.shape.timestamps.iter().enumerate() {
            if self.shape.norm[t] <= 0.0 {
                continue;
            }
            let cap = hosting_at(self.profile, ts)?;
            let mut add_mw = 0.0;
            for i in 0..n {
                let pb = self.base.power(self.shape, i, t);
                let pn = (1.0 + dc) * pb;
                let curt = (pn - cap[i]).max(0.0);
                e_new[i] += pn * dt;
                e_curt[i] += curt * dt;
                let add = pn - curt - pb;
                e_add[i] += add * dt;
                add_mw += add;
            }
            if let Some((moer, prices)) = &self.moer {
                match moer.at(*ts) {
                    Some(m) => co2 += avoided_co2_t(add_mw * dt, m, prices.m_pv),
                    None => gaps += 1,
                }
            }
        }
        let own = self.base.total_mwh();
        let add_total: f64 = e_add.iter().sum();
        let curt_total: f64 = e_curt.iter().sum();
        let delivered: f64 = e_new.iter().zip(&e_curt).map(|(a, b)| a - b).sum();
        let add_common = delivered - self.common_base_mwh;
        let pct = |x: f64, base: f64| if base > 0.0 { 100.0 * x / base } else { f64::NAN };
        let (co2_avoided_t, c_rev, c_curt, np) = match &self.moer {
            Some((_, prices)) => {
                let rev = prices.lambda_co2 * co2;
                let cost = prices.lambda_curt * curt_total * 1000.0;
                (Some(co2), Some(rev), Some(cost), Some(rev - cost))
            }
            None => (None, None, None, None),
        };
        Ok((
            CurvePoint {
                dc,
                e_add_total_mwh: add_total,
                e_curt_total_mwh: curt_total,
                e_add_common_mwh: add_common,
                e_add_pct: pct(add_total, own),
                e_curt_pct: pct(curt_total, own),
                e_add_common_pct: pct(add_common, self.common_base_mwh),
                e_curt_common_pct: pct(curt_total, self.common_base_mwh),
                e_new_mwh: e_new,
                e_curt_mwh: e_curt,
                e_add_mwh: e_add,
                co2_avoided_t,
                c_rev,
                c_curt,
                np,
            },
            gaps,
        ))
    }

    fn curve(&self, dc_grid: &[f64]) -> Result<(Vec<CurvePoint>, usize), EconomicsError> {
        check_grid(dc_grid)?;
        let pts: Vec<(CurvePoint, usize)> = dc_grid
            .par_iter()
            .map(|&dc| self.point(dc))
            .collect::<Result<_, _>>()?;
        let gaps = pts.first().map_or(0, |p| p.1);
        Ok((pts.into_iter().map(|p| p.0).collect(), gaps))
    }
}

/// Energy curves over the capacity-increase grid `dc_grid` (fractions,
/// e.g. 0.3 for +30%). `common_base_mwh` defaults to this scenario's base.
pub fn curtailment_curves(
    profile: &DhcProfile,
    shape: &PvShape,
    base: &BaseProfile,
    dc_grid: &[f64],
    common_base_mwh: Option<f64>,
) -> Result<Vec<CurvePoint>, EconomicsError> {
    Eval {
        profile,
        shape,
        base,
        common_base_mwh: common_base_mwh.unwrap_or_else(|| base.total_mwh()),
        moer: None,
    }
    .curve(dc_grid)
    .map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EconomicsReport {
    pub scenario: String,
    pub node_ids: Vec<u32>,
    pub l_pv_mw: Vec<f64>,
    pub e_base_mwh: Vec<f64>,
    pub common_base_mwh: f64,
    pub asymptote_mwh: Vec<f64>,
    pub prices: Prices,
    pub curves: Vec<CurvePoint>,
    /// Capacity increase with the largest net profit.
    pub argmax_dc: f64,
    /// Producing PV steps without a usable emission rate.
    pub moer_gap_steps: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn carbon_and_profit(
    scenario: &str,
    profile: &DhcProfile,
    shape: &PvShape,
    base: &BaseProfile,
    moer: &HeldSeries,
    dc_grid: &[f64],
    prices: Prices,
    common_base_mwh: Option<f64>,
) -> Result<EconomicsReport, EconomicsError> {
    if [prices.lambda_co2, prices.lambda_curt, prices.m_pv]
        .iter()
        .any(|p| !(p.is_finite() && *p >= 0.0))
    {
        return Err(EconomicsError::Prices);
    }
    let common = common_base_mwh.unwrap_or_else(|| base.total_mwh());
    let (curves, gaps) = Eval {
        profile,
        shape,
        base,
        common_base_mwh: common,
        moer: Some((moer, prices)),
    }
    .curve(dc_grid)?;
    if gaps > 0 {
        log::warn!("{gaps} producing steps have no emission rate and were left out of the carbon sum");
    }
    let argmax_dc = argmax(&curves.iter().map(|c| c.np.unwrap_or(f64::NAN)).collect::<Vec<_>>())
        .map(|i| curves[i].dc)
        .unwrap_or(f64::NAN);
    Ok(EconomicsReport {
        scenario: scenario.to_string(),
        node_ids: base.node_ids.clone(),
        l_pv_mw: base.l_pv_mw.clone(),
        e_base_mwh: base.e_base_mwh.clone(),
        common_base_mwh: common,
        asymptote_mwh: asymptote(profile, shape, base)?,
        prices,
        curves,
        argmax_dc,
        moer_gap_steps: gaps,
    })
}

/// Index of the first maximum, ignoring NaN.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Timestamps of steps whose solve failed.
pub fn failed_steps(dhc: &DhcSeries) -> Vec<DateTime<FixedOffset>> {
    dhc.steps
        .iter()
        .filter(|s| matches!(s.outcome, StepOutcome::Failed(_)))
        .map(|s| s.timestamp)
        .collect()
}
