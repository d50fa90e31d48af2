//! Uniformly sampled time series used by the DHC, fairness and economics
//! stages.

use chrono::{DateTime, Duration, FixedOffset, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("series is empty")]
    Empty,
    #[error("timestamps must be strictly increasing with a uniform step (at index {0})")]
    NonUniform(usize),
    #[error("row {row} has {got} values, expected {expected}")]
    Width { row: usize, got: usize, expected: usize },
    #[error("invalid daytime window {0}")]
    Window(String),
}

/// Checks that `ts` is nonempty, strictly increasing and uniform, returning
/// the step in minutes.
pub fn uniform_step(ts: &[DateTime<FixedOffset>]) -> Result<f64, SeriesError> {
    match ts.len() {
        0 => Err(SeriesError::Empty),
        1 => Ok(5.0),
        _ => {
            let step = ts[1] - ts[0];
            if step <= Duration::zero() {
                return Err(SeriesError::NonUniform(1));
            }
            for i in 2..ts.len() {
                if ts[i] - ts[i - 1] != step {
                    return Err(SeriesError::NonUniform(i));
                }
            }
            Ok(step.num_seconds() as f64 / 60.0)
        }
    }
}

/// Per-node demand in per-unit, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandSeries {
    pub timestamps: Vec<DateTime<FixedOffset>>,
    pub step_minutes: f64,
    /// `p[t][slot]`.
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

impl DemandSeries {
    pub fn new(
        timestamps: Vec<DateTime<FixedOffset>>,
        p: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
    ) -> Result<Self, SeriesError> {
        let step_minutes = uniform_step(&timestamps)?;
        let width = p.first().map_or(0, Vec::len);
        for (row, (pr, qr)) in p.iter().zip(&q).enumerate() {
            for got in [pr.len(), qr.len()] {
                if got != width {
                    return Err(SeriesError::Width {
                        row,
                        got,
                        expected: width,
                    });
                }
            }
        }
        if p.len() != timestamps.len() || q.len() != timestamps.len() {
            return Err(SeriesError::Width {
                row: p.len().min(q.len()),
                got: 0,
                expected: width,
            });
        }
        Ok(Self {
            timestamps,
            step_minutes,
            p,
            q,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Same series with every demand multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |m: &Vec<Vec<f64>>| {
            m.iter()
                .map(|r| r.iter().map(|v| v * factor).collect())
                .collect()
        };
        Self {
            timestamps: self.timestamps.clone(),
            step_minutes: self.step_minutes,
            p: scale(&self.p),
            q: scale(&self.q),
        }
    }
}

/// Scalar series such as the reference PV panel output (kW).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSeries {
    pub timestamps: Vec<DateTime<FixedOffset>>,
    pub step_minutes: f64,
    pub values: Vec<f64>,
}

impl ScalarSeries {
    pub fn new(timestamps: Vec<DateTime<FixedOffset>>, values: Vec<f64>) -> Result<Self, SeriesError> {
        let step_minutes = uniform_step(&timestamps)?;
        if values.len() != timestamps.len() {
            return Err(SeriesError::Width {
                row: 0,
                got: values.len(),
                expected: timestamps.len(),
            });
        }
        Ok(Self {
            timestamps,
            step_minutes,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step_hours(&self) -> f64 {
        self.step_minutes / 60.0
    }
}

/// Irregular observations held for at most `max_hold` after each timestamp,
/// e.g. hourly marginal emission rates.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldSeries {
    pub timestamps: Vec<DateTime<FixedOffset>>,
    pub values: Vec<f64>,
    pub max_hold: Duration,
}

impl HeldSeries {
    pub fn new(
        timestamps: Vec<DateTime<FixedOffset>>,
        values: Vec<f64>,
        max_hold: Duration,
    ) -> Result<Self, SeriesError> {
        if timestamps.is_empty() {
            return Err(SeriesError::Empty);
        }
        for i in 1..timestamps.len() {
            if timestamps[i] <= timestamps[i - 1] {
                return Err(SeriesError::NonUniform(i));
            }
        }
        Ok(Self {
            timestamps,
            values,
            max_hold,
        })
    }

    /// Latest value observed at or before `t`, if it is recent enough.
    pub fn at(&self, t: DateTime<FixedOffset>) -> Option<f64> {
        let idx = self.timestamps.partition_point(|&s| s <= t);
        if idx == 0 {
            return None;
        }
        let i = idx - 1;
        (t - self.timestamps[i] < self.max_hold).then_some(self.values[i])
    }
}

/// Half-open local time-of-day window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaytimeWindow {
    pub start: NaiveTime,
    pub end: NaiveTime,
}

impl Default for DaytimeWindow {
    fn default() -> Self {
        Self {
            start: NaiveTime::from_hms_opt(6, 0, 0).unwrap(),
            end: NaiveTime::from_hms_opt(20, 0, 0).unwrap(),
        }
    }
}

impl DaytimeWindow {
    /// Whole day.
    pub fn always() -> Self {
        let midnight = NaiveTime::from_hms_opt(0, 0, 0).unwrap();
        Self {
            start: midnight,
            end: midnight,
        }
    }

    pub fn contains(&self, t: &DateTime<FixedOffset>) -> bool {
        let tod = t.time();
        if self.start == self.end {
            true
        } else if self.start < self.end {
            tod >= self.start && tod < self.end
        } else {
            tod >= self.start || tod < self.end
        }
    }

    /// Parses `HH:MM-HH:MM`.
    pub fn parse(s: &str) -> Result<Self, SeriesError> {
        let err = || SeriesError::Window(s.to_string());
        let (a, b) = s.split_once('-').ok_or_else(err)?;
        let start = NaiveTime::parse_from_str(a.trim(), "%H:%M").map_err(|_| err())?;
        let end = NaiveTime::parse_from_str(b.trim(), "%H:%M").map_err(|_| err())?;
        Ok(Self { start, end })
    }
}

impl std::fmt::Display for DaytimeWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.start.format("%H:%M"), self.end.format("%H:%M"))
    }
}

/// Seconds since local midnight.
pub fn seconds_of_day(t: &DateTime<FixedOffset>) -> u32 {
    t.time().num_seconds_from_midnight()
}
