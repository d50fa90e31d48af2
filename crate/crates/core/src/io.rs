//! CSV and JSON ingestion and emission. Every CSV starts with a
//! `# schema: <name> v<version>` line followed by a header row.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, FixedOffset};
use serde::Serialize;
use thiserror::Error;

use crate::economics::EconomicsReport;
use crate::fairness::FairnessReport;
use crate::hc::{BoundVariant, DhcSeries, MaeReport, StepOutcome};
use crate::loadflow::{CellClass, SweepRaster};
use crate::network::Network;
use crate::series::{DemandSeries, HeldSeries, ScalarSeries, SeriesError};

pub const SCHEMA_VERSION: u32 = 1;

/// Pounds per MWh to grams per kWh.
pub const LBS_PER_MWH_TO_G_PER_KWH: f64 = 0.4536;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("{0}: no data rows")]
    Empty(PathBuf),
    #[error("{path}: {source}")]
    Series {
        path: PathBuf,
        source: SeriesError,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => IoError::File {
            path: path.to_path_buf(),
            source,
        },
        kind => IoError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Data rows with their 1-based line numbers.
fn rows(path: &Path, min_cols: usize) -> Result<Vec<(u64, csv::StringRecord)>, IoError> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < min_cols {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected {min_cols} columns, found {}", rec.len()),
            });
        }
        out.push((line, rec));
    }
    if out.is_empty() {
        return Err(IoError::Empty(path.to_path_buf()));
    }
    Ok(out)
}

struct Field<'a> {
    path: &'a Path,
    line: u64,
}

impl Field<'_> {
    fn err(&self, col: usize, msg: impl std::fmt::Display) -> IoError {
        IoError::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: format!("column {}: {msg}", col + 1),
        }
    }

    fn time(&self, rec: &csv::StringRecord, col: usize) -> Result<DateTime<FixedOffset>, IoError> {
        DateTime::parse_from_rfc3339(&rec[col]).map_err(|e| self.err(col, e))
    }

    fn num(&self, rec: &csv::StringRecord, col: usize) -> Result<f64, IoError> {
        let v: f64 = rec[col].parse().map_err(|e| self.err(col, e))?;
        if !v.is_finite() {
            return Err(self.err(col, "not a finite number"));
        }
        Ok(v)
    }

    fn opt_num(&self, rec: &csv::StringRecord, col: usize) -> Result<Option<f64>, IoError> {
        if rec[col].is_empty() {
            Ok(None)
        } else {
            self.num(rec, col).map(Some)
        }
    }

    fn id(&self, rec: &csv::StringRecord, col: usize) -> Result<u32, IoError> {
        rec[col].parse().map_err(|e| self.err(col, e))
    }
}

fn series_err(path: &Path) -> impl FnOnce(SeriesError) -> IoError + '_ {
    move |source| IoError::Series {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `path` and writes the schema line.
fn writer(path: &Path, schema: &str) -> Result<csv::Writer<File>, IoError> {
    let mut file = File::create(path).map_err(file_err(path))?;
    writeln!(file, "# schema: {schema} v{SCHEMA_VERSION}").map_err(file_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(path: &Path, mut w: csv::Writer<File>) -> Result<(), IoError> {
    w.flush().map_err(file_err(path))
}

fn write_row<const N: usize>(
    path: &Path,
    w: &mut csv::Writer<File>,
    row: [String; N],
) -> Result<(), IoError> {
    w.write_record(&row).map_err(|e| csv_err(path, e))
}

fn fmt_time(t: &DateTime<FixedOffset>) -> String {
    t.to_rfc3339()
}

/// Demand CSV `timestamp,node_id,p_kw`. Nodes absent at a timestamp carry no
/// load; reactive demand follows each node's nominal power factor.
pub fn read_demand_csv(path: impl AsRef<Path>, net: &Network) -> Result<DemandSeries, IoError> {
    let path = path.as_ref();
    let n = net.n();
    let (p_nom, q_nom) = net.nominal_demand();
    let ratio: Vec<f64> = p_nom
        .iter()
        .zip(&q_nom)
        .map(|(p, q)| if *p != 0.0 { q / p } else { 0.0 })
        .collect();
    let scale = 1.0 / (1000.0 * net.s_base_mva);
    let mut by_time: BTreeMap<DateTime<FixedOffset>, Vec<f64>> = BTreeMap::new();
    for (line, rec) in rows(path, 3)? {
        let f = Field { path, line };
        let t = f.time(&rec, 0)?;
        let id = f.id(&rec, 1)?;
        let kw = f.num(&rec, 2)?;
        let slot = net.slot(id).map_err(|e| f.err(1, e))?;
        by_time.entry(t).or_insert_with(|| vec![0.0; n])[slot] += kw * scale;
    }
    let timestamps: Vec<_> = by_time.keys().cloned().collect();
    let p: Vec<Vec<f64>> = by_time.into_values().collect();
    let q = p
        .iter()
        .map(|row| row.iter().zip(&ratio).map(|(v, r)| v * r).collect())
        .collect();
    DemandSeries::new(timestamps, p, q).map_err(series_err(path))
}

pub fn write_demand_csv(
    path: impl AsRef<Path>,
    net: &Network,
    demand: &DemandSeries,
) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = writer(path, "dhc-demand")?;
    write_row(path, &mut w, ["timestamp", "node_id", "p_kw"].map(String::from))?;
    let kw = 1000.0 * net.s_base_mva;
    for (t, row) in demand.timestamps.iter().zip(&demand.p) {
        for (slot, v) in row.iter().enumerate() {
            write_row(
                path,
                &mut w,
                [fmt_time(t), net.slot_id(slot).to_string(), (v * kw).to_string()],
            )?;
        }
    }
    finish(path, w)
}

/// Reference PV CSV `timestamp,p_kw`.
pub fn read_pv_csv(path: impl AsRef<Path>) -> Result<ScalarSeries, IoError> {
    let path = path.as_ref();
    let mut ts = Vec::new();
    let mut vals = Vec::new();
    for (line, rec) in rows(path, 2)? {
        let f = Field { path, line };
        ts.push(f.time(&rec, 0)?);
        vals.push(f.num(&rec, 1)?);
    }
    ScalarSeries::new(ts, vals).map_err(series_err(path))
}

pub fn write_pv_csv(path: impl AsRef<Path>, pv: &ScalarSeries) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = writer(path, "dhc-pv")?;
    write_row(path, &mut w, ["timestamp", "p_kw"].map(String::from))?;
    for (t, v) in pv.timestamps.iter().zip(&pv.values) {
        write_row(path, &mut w, [fmt_time(t), v.to_string()])?;
    }
    finish(path, w)
}

/// Marginal emission rate CSV `timestamp,moer_lbs_per_mwh`, converted to
/// gCO2/kWh. Each observation holds for at most one hour.
pub fn read_moer_csv(path: impl AsRef<Path>) -> Result<HeldSeries, IoError> {
    let path = path.as_ref();
    let mut ts = Vec::new();
    let mut vals = Vec::new();
    for (line, rec) in rows(path, 2)? {
        let f = Field { path, line };
        ts.push(f.time(&rec, 0)?);
        vals.push(f.num(&rec, 1)? * LBS_PER_MWH_TO_G_PER_KWH);
    }
    HeldSeries::new(ts, vals, Duration::hours(1)).map_err(series_err(path))
}

pub fn write_moer_csv(path: impl AsRef<Path>, moer: &HeldSeries) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = writer(path, "dhc-moer")?;
    write_row(path, &mut w, ["timestamp", "moer_lbs_per_mwh"].map(String::from))?;
    for (t, v) in moer.timestamps.iter().zip(&moer.values) {
        write_row(path, &mut w, [fmt_time(t), (v / LBS_PER_MWH_TO_G_PER_KWH).to_string()])?;
    }
    finish(path, w)
}

/// One row of the hosting-capacity series CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DhcRecord {
    pub timestamp: DateTime<FixedOffset>,
    pub node_id: u32,
    pub pg_minus_mw: Option<f64>,
    pub pg_plus_mw: Option<f64>,
    pub scenario: String,
    pub variant: BoundVariant,
    /// `solved`, `skipped` or `failed`.
    pub status: String,
}

pub fn dhc_records(dhc: &DhcSeries) -> Vec<DhcRecord> {
    let mut out = Vec::new();
    for step in &dhc.steps {
        for (i, &id) in dhc.node_ids.iter().enumerate() {
            let (lo, hi, status) = match &step.outcome {
                StepOutcome::Solved(r) => (Some(r.lower_mw[i]), Some(r.upper_mw[i]), "solved"),
                StepOutcome::Skipped => (None, None, "skipped"),
                StepOutcome::Failed(_) => (None, None, "failed"),
            };
            out.push(DhcRecord {
                timestamp: step.timestamp,
                node_id: id,
                pg_minus_mw: lo,
                pg_plus_mw: hi,
                scenario: dhc.scenario.clone(),
                variant: dhc.variant,
                status: status.to_string(),
            });
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_dhc_csv(path: impl AsRef<Path>, dhc: &DhcSeries) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = writer(path, "dhc-series")?;
    write_row(
        path,
        &mut w,
        [
            "timestamp",
            "node_id",
            "pg_minus_mw",
            "pg_plus_mw",
            "scenario",
            "variant",
            "status",
        ]
        .map(String::from),
    )?;
    for r in dhc_records(dhc) {
        write_row(
            path,
            &mut w,
            [
                fmt_time(&r.timestamp),
                r.node_id.to_string(),
                opt(r.pg_minus_mw),
                opt(r.pg_plus_mw),
                r.scenario,
                r.variant.to_string(),
                r.status,
            ],
        )?;
    }
    finish(path, w)
}

pub fn read_dhc_csv(path: impl AsRef<Path>) -> Result<Vec<DhcRecord>, IoError> {
    let path = path.as_ref();
    rows(path, 7)?
        .into_iter()
        .map(|(line, rec)| {
            let f = Field { path, line };
            Ok(DhcRecord {
                timestamp: f.time(&rec, 0)?,
                node_id: f.id(&rec, 1)?,
                pg_minus_mw: f.opt_num(&rec, 2)?,
                pg_plus_mw: f.opt_num(&rec, 3)?,
                scenario: rec[4].to_string(),
                variant: rec[5].parse().map_err(|e| f.err(5, e))?,
                status: rec[6].to_string(),
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: impl AsRef<Path>, raster: &SweepRaster) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = writer(path, "dhc-sweep")?;
    write_row(
        path,
        &mut w,
        ["pg_node_a_mw", "pg_node_b_mw", "class"].map(String::from),
    )?;
    for c in &raster.cells {
        write_row(
            path,
            &mut w,
            [
                c.pg_a_mw.to_string(),
                c.pg_b_mw.to_string(),
                c.class.as_str().to_string(),
            ],
        )?;
    }
    finish(path, w)
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, f64, CellClass)>, IoError> {
    let path = path.as_ref();
    rows(path, 3)?
        .into_iter()
        .map(|(line, rec)| {
            let f = Field { path, line };
            let class = match &rec[2] {
                "admissible" => CellClass::Admissible,
                "violation" => CellClass::Violation,
                "nonconverged" => CellClass::Nonconverged,
                other => return Err(f.err(2, format!("unknown class '{other}'"))),
            };
            Ok((f.num(&rec, 0)?, f.num(&rec, 1)?, class))
        })
        .collect()
}

pub fn write_mae_csv(path: impl AsRef<Path>, mae: &MaeReport) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = writer(path, "dhc-mae")?;
    write_row(
        path,
        &mut w,
        ["pg_mw", "mae_soc_pu", "mae_conservative_pu"].map(String::from),
    )?;
    for p in &mae.points {
        write_row(
            path,
            &mut w,
            [
                p.pg_mw.to_string(),
                p.mae_soc.to_string(),
                p.mae_conservative.to_string(),
            ],
        )?;
    }
    finish(path, w)
}

pub fn read_mae_csv(path: impl AsRef<Path>) -> Result<Vec<[f64; 3]>, IoError> {
    let path = path.as_ref();
    rows(path, 3)?
        .into_iter()
        .map(|(line, rec)| {
            let f = Field { path, line };
            Ok([f.num(&rec, 0)?, f.num(&rec, 1)?, f.num(&rec, 2)?])
        })
        .collect()
}

/// Writes `(node_id, temporal_jfi, excluded)` and `(timestamp, spatial_jfi)`.
pub fn write_fairness_csvs(
    temporal: impl AsRef<Path>,
    spatial: impl AsRef<Path>,
    report: &FairnessReport,
) -> Result<(), IoError> {
    let path = temporal.as_ref();
    let mut w = writer(path, "dhc-temporal-jfi")?;
    write_row(
        path,
        &mut w,
        ["node_id", "temporal_jfi", "excluded"].map(String::from),
    )?;
    for ((id, j), e) in report
        .node_ids
        .iter()
        .zip(&report.temporal_jfi)
        .zip(&report.excluded)
    {
        write_row(
            path,
            &mut w,
            [id.to_string(), opt((!j.is_nan()).then_some(*j)), e.to_string()],
        )?;
    }
    finish(path, w)?;
    let path = spatial.as_ref();
    let mut w = writer(path, "dhc-spatial-jfi")?;
    write_row(path, &mut w, ["timestamp", "spatial_jfi"].map(String::from))?;
    for (t, j) in report.timestamps.iter().zip(&report.spatial_jfi) {
        write_row(path, &mut w, [fmt_time(t), opt((!j.is_nan()).then_some(*j))])?;
    }
    finish(path, w)
}

pub fn read_temporal_jfi_csv(path: impl AsRef<Path>) -> Result<Vec<(u32, Option<f64>, bool)>, IoError> {
    let path = path.as_ref();
    rows(path, 3)?
        .into_iter()
        .map(|(line, rec)| {
            let f = Field { path, line };
            let excluded = rec[2].parse().map_err(|e| f.err(2, e))?;
            Ok((f.id(&rec, 0)?, f.opt_num(&rec, 1)?, excluded))
        })
        .collect()
}

pub fn read_spatial_jfi_csv(
    path: impl AsRef<Path>,
) -> Result<Vec<(DateTime<FixedOffset>, Option<f64>)>, IoError> {
    let path = path.as_ref();
    rows(path, 2)?
        .into_iter()
        .map(|(line, rec)| {
            let f = Field { path, line };
            Ok((f.time(&rec, 0)?, f.opt_num(&rec, 1)?))
        })
        .collect()
}

pub const ECONOMICS_HEADER: [&str; 13] = [
    "dc",
    "e_new_mwh",
    "e_curt_mwh",
    "e_add_mwh",
    "e_add_common_mwh",
    "e_add_pct",
    "e_curt_pct",
    "e_add_common_pct",
    "e_curt_common_pct",
    "co2_avoided_t",
    "c_rev_usd",
    "c_curt_usd",
    "np_usd",
];

pub fn write_economics_csv(path: impl AsRef<Path>, report: &EconomicsReport) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = writer(path, "dhc-economics")?;
    write_row(path, &mut w, ECONOMICS_HEADER.map(String::from))?;
    for c in &report.curves {
        let e_new: f64 = c.e_new_mwh.iter().sum();
        write_row(
            path,
            &mut w,
            [
                c.dc.to_string(),
                e_new.to_string(),
                c.e_curt_total_mwh.to_string(),
                c.e_add_total_mwh.to_string(),
                c.e_add_common_mwh.to_string(),
                c.e_add_pct.to_string(),
                c.e_curt_pct.to_string(),
                c.e_add_common_pct.to_string(),
                c.e_curt_common_pct.to_string(),
                opt(c.co2_avoided_t),
                opt(c.c_rev),
                opt(c.c_curt),
                opt(c.np),
            ],
        )?;
    }
    finish(path, w)
}

/// Economics rows as `[dc, e_new, ..., np]`, missing values as `NaN`.
pub fn read_economics_csv(path: impl AsRef<Path>) -> Result<Vec<[f64; 13]>, IoError> {
    let path = path.as_ref();
    rows(path, 13)?
        .into_iter()
        .map(|(line, rec)| {
            let f = Field { path, line };
            let mut out = [0.0; 13];
            for (i, o) in out.iter_mut().enumerate() {
                *o = if rec[i] == *"NaN" {
                    f64::NAN
                } else {
                    f.opt_num(&rec, i)?.unwrap_or(f64::NAN)
                };
            }
            Ok(out)
        })
        .collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(file_err(path))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    writeln!(file).map_err(file_err(path))
}
