//! Behavioral metrics over episode logs.
//!
//! Steps are addressed by position in the log. Durations come from
//! differences of the logged `t` values, so shifting every `t` by a constant
//! leaves all metrics unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: u64,
    pub pan: f64,
    pub tilt: f64,
    pub target_visible: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    GraspStart,
    GraspClose,
    GraspSuccess,
    EpisodeEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEvent {
    pub t: u64,
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepLog>,
    pub events: Vec<EpisodeEvent>,
    pub step_duration: f64,
}

impl EpisodeLog {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.steps.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::Format(format!("step t not strictly increasing ({} then {})", w[0].t, w[1].t)));
        }
        if self.events.iter().filter(|e| e.kind == EventKind::GraspSuccess).count() > 1 {
            return Err(Error::Format("more than one grasp_success event".into()));
        }
        if !(self.step_duration > 0.0) {
            return Err(Error::Format(format!("step_duration must be positive, got {}", self.step_duration)));
        }
        Ok(())
    }

    /// Index of the first step with the target visible.
    pub fn vis_index(&self) -> Option<usize> {
        self.steps.iter().position(|s| s.target_visible)
    }

    fn first_event(&self, kind: EventKind) -> Option<u64> {
        self.events.iter().filter(|e| e.kind == kind).map(|e| e.t).min()
    }

    /// The same log with every `t` shifted by `c`.
    pub fn shifted(&self, c: u64) -> Self {
        let mut out = self.clone();
        out.steps.iter_mut().for_each(|s| s.t += c);
        out.events.iter_mut().for_each(|e| e.t += c);
        out
    }
}

/// `Σ_{i=1}^{i_vis} (|ψ_i − ψ_{i−1}| + |φ_i − φ_{i−1}|)`; `None` if the
/// target is never visible.
pub fn head_path_length(log: &EpisodeLog) -> Option<f64> {
    let vis = log.vis_index()?;
    Some(log.steps[..=vis].windows(2).map(|w| (w[1].pan - w[0].pan).abs() + (w[1].tilt - w[0].tilt).abs()).sum())
}

/// `(t_grasp_start − t_vis) × step_duration`.
pub fn first_fixation_time(log: &EpisodeLog) -> Option<f64> {
    let t_vis = log.steps[log.vis_index()?].t;
    let start = log.events.iter().filter(|e| e.kind == EventKind::GraspStart && e.t >= t_vis).map(|e| e.t).min()?;
    Some((start - t_vis) as f64 * log.step_duration)
}

fn sign_changes(velocities: impl Iterator<Item = f64>, deadband: f64) -> u64 {
    let mut last = 0.0;
    let mut n = 0;
    for v in velocities {
        if v.abs() <= deadband {
            continue;
        }
        let s = v.signum();
        if last != 0.0 && s != last {
            n += 1;
        }
        last = s;
    }
    n
}

/// Direction reversals of pan and of tilt after the first visible step.
pub fn viewpoint_corrections(log: &EpisodeLog, deadband: f64) -> Option<u64> {
    let vis = log.vis_index()?;
    let tail = &log.steps[vis..];
    let pan = sign_changes(tail.windows(2).map(|w| w[1].pan - w[0].pan), deadband);
    let tilt = sign_changes(tail.windows(2).map(|w| w[1].tilt - w[0].tilt), deadband);
    Some(pan + tilt)
}

/// Completed closes up to and including the successful one (all closes when
/// the episode never succeeds).
pub fn grasp_attempts(log: &EpisodeLog) -> u64 {
    let limit = log.first_event(EventKind::GraspSuccess).unwrap_or(u64::MAX);
    log.events.iter().filter(|e| e.kind == EventKind::GraspClose && e.t <= limit).count() as u64
}

/// Time from the first logged step to the successful grasp.
pub fn time_to_grasp(log: &EpisodeLog) -> Option<f64> {
    let success = log.first_event(EventKind::GraspSuccess)?;
    let start = log.steps.first().map_or(success, |s| s.t);
    Some(success.saturating_sub(start) as f64 * log.step_duration)
}

pub const DEFAULT_DEADBAND: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub first_fixation_time: Option<f64>,
    pub head_search_path_length: Option<f64>,
    pub viewpoint_corrections: Option<u64>,
    pub grasp_attempts: u64,
    pub time_to_grasp: Option<f64>,
    /// Names of metrics that are undefined for this log.
    pub undefined: Vec<String>,
}

pub fn compute_metrics(log: &EpisodeLog, deadband: f64) -> Result<MetricsReport> {
    log.validate()?;
    let r = MetricsReport {
        first_fixation_time: first_fixation_time(log),
        head_search_path_length: head_path_length(log),
        viewpoint_corrections: viewpoint_corrections(log, deadband),
        grasp_attempts: grasp_attempts(log),
        time_to_grasp: time_to_grasp(log),
        undefined: Vec::new(),
    };
    let mut undefined = Vec::new();
    if r.first_fixation_time.is_none() {
        undefined.push("first_fixation_time".to_string());
    }
    if r.head_search_path_length.is_none() {
        undefined.push("head_search_path_length".to_string());
    }
    if r.viewpoint_corrections.is_none() {
        undefined.push("viewpoint_corrections".to_string());
    }
    if r.time_to_grasp.is_none() {
        undefined.push("time_to_grasp".to_string());
    }
    Ok(MetricsReport { undefined, ..r })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Episodes for which the metric is defined.
    pub defined: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        Self { defined: n, mean: Some(values.iter().sum::<f64>() / n as f64), median: Some(median) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub episodes: usize,
    pub first_fixation_time: Summary,
    pub head_search_path_length: Summary,
    pub viewpoint_corrections: Summary,
    pub grasp_attempts: Summary,
    pub time_to_grasp: Summary,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let collect = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Summary {
        Summary::of(&reports.iter().filter_map(f).collect::<Vec<_>>())
    };
    AggregateReport {
        episodes: reports.len(),
        first_fixation_time: collect(&|r| r.first_fixation_time),
        head_search_path_length: collect(&|r| r.head_search_path_length),
        viewpoint_corrections: collect(&|r| r.viewpoint_corrections.map(|v| v as f64)),
        grasp_attempts: collect(&|r| Some(r.grasp_attempts as f64)),
        time_to_grasp: collect(&|r| r.time_to_grasp),
    }
}

/// Column labels of the behavioral table.
pub const CSV_COLUMNS: [&str; 5] = [
    "First-Fixation Time (s)",
    "Head Search Path Length (deg)",
    "Viewpoint Correction Count",
    "Grasp Attempt Count",
    "Time-to-Grasp (s)",
];

/// One row per named aggregate holding the metric means; undefined means are
/// left empty.
pub fn to_csv(rows: &[(String, AggregateReport)]) -> String {
    let mut out = format!("Model,{}\n", CSV_COLUMNS.join(","));
    for (name, a) in rows {
        let cells: Vec<String> = [
            &a.first_fixation_time,
            &a.head_search_path_length,
            &a.viewpoint_corrections,
            &a.grasp_attempts,
            &a.time_to_grasp,
        ]
        .iter()
        .map(|s| s.mean.map(|m| format!("{m:.3}")).unwrap_or_default())
        .collect();
        out.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    out
}
