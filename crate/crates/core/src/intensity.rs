//! Grid carbon-intensity series and low-carbon window selection.
//!
//! A series is piecewise constant: `values[i]` holds on
//! `[start + i*step, start + (i+1)*step)`. The loaded series doubles as the
//! forecast.
//!
//! Trace file format:
//!
//! ```text
//! # comments and blank lines are ignored
//! start = 2026-01-01T00:00:00Z
//! step = 3600
//! 500
//! 400
//! ```

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntensityError {
    #[error("invalid intensity series: {0}")]
    InvalidSeries(String),
    #[error("{0} lies outside the intensity series coverage")]
    OutOfCoverage(DateTime<Utc>),
    #[error("no feasible window: {0}")]
    InfeasibleWindow(String),
    #[error("cannot read intensity trace {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensitySeries {
    start: DateTime<Utc>,
    /// Seconds per value.
    step: u64,
    /// gCO2e/kWh, each > 0.
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowChoice {
    /// Seconds from the series start.
    pub start_offset: u64,
    /// gCO2e/kWh, time-weighted over the window.
    pub mean_intensity: f64,
}

impl IntensitySeries {
    pub fn new(start: DateTime<Utc>, step: u64, values: Vec<f64>) -> Result<Self, IntensityError> {
        if step == 0 {
            return Err(IntensityError::InvalidSeries("step must be > 0".into()));
        }
        if values.is_empty() {
            return Err(IntensityError::InvalidSeries("series has no values".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(IntensityError::InvalidSeries(format!(
                "value {v} is not > 0"
            )));
        }
        Ok(Self {
            start,
            step,
            values,
        })
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Covered span in seconds.
    pub fn coverage(&self) -> u64 {
        self.step * self.values.len() as u64
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start + Duration::seconds(self.coverage() as i64)
    }

    fn index_at(&self, t: DateTime<Utc>) -> Result<usize, IntensityError> {
        if t < self.start || t >= self.end() {
            return Err(IntensityError::OutOfCoverage(t));
        }
        let ms = (t - self.start).num_milliseconds() as u64;
        Ok((ms / (self.step * 1000)) as usize)
    }

    pub fn intensity_at(&self, t: DateTime<Utc>) -> Result<f64, IntensityError> {
        Ok(self.values[self.index_at(t)?])
    }

    /// Inclusive threshold test on the current intensity.
    pub fn below_threshold_now(
        &self,
        threshold: f64,
        now: DateTime<Utc>,
    ) -> Result<bool, IntensityError> {
        Ok(self.intensity_at(now)? <= threshold)
    }

    /// The remainder of the series from the step containing `t`, and how far
    /// `t` lies into that step (seconds).
    pub fn from_step_at(&self, t: DateTime<Utc>) -> Result<(IntensitySeries, u64), IntensityError> {
        let idx = self.index_at(t)?;
        let boundary = self.start + Duration::seconds((idx as u64 * self.step) as i64);
        let lead = (t - boundary).num_seconds().max(0) as u64;
        let rest = IntensitySeries {
            start: boundary,
            step: self.step,
            values: self.values[idx..].to_vec(),
        };
        Ok((rest, lead))
    }

    pub fn parse_trace(text: &str) -> Result<Self, IntensityError> {
        let mut start = None;
        let mut step = None;
        let mut values = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| IntensityError::InvalidSeries(format!("line {}: {what}", n + 1));
            if let Some((key, value)) = line.split_once('=') {
                match key.trim() {
                    "start" => {
                        start = Some(
                            DateTime::parse_from_rfc3339(value.trim())
                                .map_err(|e| bad(&e.to_string()))?
                                .with_timezone(&Utc),
                        )
                    }
                    "step" => {
                        step = Some(
                            value
                                .trim()
                                .parse::<u64>()
                                .map_err(|e| bad(&e.to_string()))?,
                        )
                    }
                    other => return Err(bad(&format!("unknown header `{other}`"))),
                }
            } else {
                values.push(line.parse::<f64>().map_err(|e| bad(&e.to_string()))?);
            }
        }
        let start =
            start.ok_or_else(|| IntensityError::InvalidSeries("missing `start` header".into()))?;
        let step =
            step.ok_or_else(|| IntensityError::InvalidSeries("missing `step` header".into()))?;
        Self::new(start, step, values)
    }

    pub fn to_trace(&self) -> String {
        let mut out = format!(
            "start = {}\nstep = {}\n",
            self.start
                .to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            self.step
        );
        for v in &self.values {
            out.push_str(&format!("{v}\n"));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, IntensityError> {
        let text = std::fs::read_to_string(path).map_err(|e| IntensityError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse_trace(&text)
    }

    /// Integral of intensity over `[from, from + len)` seconds from the start,
    /// in (gCO2e/kWh)*s. Summed as value x seconds so integer-valued series
    /// integrate exactly.
    fn integral(&self, from: u64, len: u64) -> f64 {
        let mut acc = 0.0;
        let mut t = from;
        let end = from + len;
        while t < end {
            let idx = (t / self.step) as usize;
            let step_end = (idx as u64 + 1) * self.step;
            let span = step_end.min(end) - t;
            acc += self.values[idx] * span as f64;
            t += span;
        }
        acc
    }
}

/// Means closer than this (relative) count as ties.
const TIE_TOLERANCE: f64 = 1e-12;

/// Pick the step-aligned window of `duration` seconds, ending no later than
/// `deadline` seconds after the series start, with the lowest mean intensity.
/// Ties go to the earliest start.
pub fn best_window(
    series: &IntensitySeries,
    duration: u64,
    deadline: u64,
) -> Result<WindowChoice, IntensityError> {
    if duration == 0 {
        return Err(IntensityError::InfeasibleWindow(
            "duration must be > 0".into(),
        ));
    }
    if duration > deadline {
        return Err(IntensityError::InfeasibleWindow(format!(
            "duration {duration}s exceeds deadline {deadline}s"
        )));
    }
    if deadline > series.coverage() {
        return Err(IntensityError::InfeasibleWindow(format!(
            "deadline {deadline}s exceeds series coverage {}s",
            series.coverage()
        )));
    }
    let mut best: Option<(u64, f64)> = None;
    let mut start = 0;
    while start + duration <= deadline {
        let integral = series.integral(start, duration);
        match best {
            Some((_, b)) if integral >= b - TIE_TOLERANCE * b.abs() => {}
            _ => best = Some((start, integral)),
        }
        start += series.step;
    }
    let (start_offset, integral) = best.expect("window at offset 0 always fits");
    Ok(WindowChoice {
        start_offset,
        mean_intensity: integral / duration as f64,
    })
}

/// Supplier of fresh intensity series, e.g. a trace file or a live endpoint.
pub trait IntensitySource: Send + Sync {
    fn fetch(&self) -> Result<IntensitySeries, IntensityError>;
}

#[derive(Debug, Clone)]
pub struct TraceFileSource {
    pub path: PathBuf,
}

impl IntensitySource for TraceFileSource {
    fn fetch(&self) -> Result<IntensitySeries, IntensityError> {
        IntensitySeries::load(&self.path)
    }
}

/// Current series, swapped atomically on refresh.
#[derive(Debug)]
pub struct IntensityFeed {
    current: RwLock<Arc<IntensitySeries>>,
}

impl IntensityFeed {
    pub fn new(series: IntensitySeries) -> Self {
        Self {
            current: RwLock::new(Arc::new(series)),
        }
    }

    pub fn current(&self) -> Arc<IntensitySeries> {
        Arc::clone(&self.current.read().expect("intensity lock poisoned"))
    }

    pub fn replace(&self, series: IntensitySeries) {
        *self.current.write().expect("intensity lock poisoned") = Arc::new(series);
    }

    pub fn refresh(&self, source: &dyn IntensitySource) -> Result<(), IntensityError> {
        self.replace(source.fetch()?);
        Ok(())
    }
}
