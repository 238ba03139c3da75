//! Offline trajectory preprocessing and data-quality validators.
//!
//! A trajectory file is JSONL. The first line is the header, followed by
//! frame lines and then event lines:
//!
//! ```text
//! {"type":"meta","fps":25.0,"gripper_range":[0.0,1000.0]}
//! {"type":"frame","phase":"scan","stamp":0.0,"frame":{...FrameRecord...}}
//! {"type":"event","t":1.25,"kind":"command","payload":{"id":3}}
//! ```
//!
//! `stamp` (seconds) is optional and defaults to `frame.t / fps`. Recognized
//! event kinds are `command` / `actuation` (paired by `payload.id`) and
//! `gripper` (`payload.value`); any other kind is carried but ignored.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::construct::{
    extract_triplets, fuse_instances, overview_interval, sample_overview, ConstructConfig, InstanceTriplet,
};
use crate::error::{Error, Result};
use crate::scene::FrameRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub fps: f64,
    #[serde(default = "default_gripper_range")]
    pub gripper_range: (f64, f64),
}

fn default_gripper_range() -> (f64, f64) {
    (0.0, 1000.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Scan,
    Manip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StampedFrame {
    pub stamp: Option<f64>,
    pub frame: FrameRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: String,
    #[serde(default)]
    pub payload: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFile {
    pub meta: TrajectoryMeta,
    pub scan_frames: Vec<StampedFrame>,
    pub manip_frames: Vec<StampedFrame>,
    pub events: Vec<Event>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Meta(TrajectoryMeta),
    Frame {
        phase: Phase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stamp: Option<f64>,
        frame: FrameRecord,
    },
    Event(Event),
}

impl TrajectoryFile {
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut meta = None;
        let mut scan_frames = Vec::new();
        let mut manip_frames = Vec::new();
        let mut events = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            match parsed {
                Line::Meta(m) if meta.is_none() => meta = Some(m),
                Line::Meta(_) => return Err(Error::Format(format!("line {}: duplicate meta header", n + 1))),
                Line::Frame { phase, stamp, frame } => {
                    let sf = StampedFrame { stamp, frame };
                    match phase {
                        Phase::Scan => scan_frames.push(sf),
                        Phase::Manip => manip_frames.push(sf),
                    }
                }
                Line::Event(e) => events.push(e),
            }
        }
        let meta = meta.ok_or_else(|| Error::Format("missing meta header line".into()))?;
        let traj = Self { meta, scan_frames, manip_frames, events };
        traj.validate()?;
        Ok(traj)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut put = |line: &Line| -> Result<()> {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        put(&Line::Meta(self.meta))?;
        for (phase, frames) in [(Phase::Scan, &self.scan_frames), (Phase::Manip, &self.manip_frames)] {
            for f in frames {
                put(&Line::Frame { phase, stamp: f.stamp, frame: f.frame.clone() })?;
            }
        }
        for e in &self.events {
            put(&Line::Event(e.clone()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, frames) in [("scan", &self.scan_frames), ("manip", &self.manip_frames)] {
            if let Some(w) = frames.windows(2).find(|w| w[1].frame.t <= w[0].frame.t) {
                return Err(Error::Format(format!(
                    "{name} frame t not strictly increasing ({} then {})",
                    w[0].frame.t, w[1].frame.t
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    /// Key of the sparse record this step reads.
    pub source_t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOutput {
    pub interval: usize,
    pub overview_interval: usize,
    pub sparse: BTreeMap<u64, Vec<InstanceTriplet>>,
    pub steps: Vec<StepRecord>,
}

impl PreprocessOutput {
    /// Evidence seen at step `t`.
    pub fn record_at(&self, t: u64) -> Option<&[InstanceTriplet]> {
        let s = self.steps.get(t as usize)?;
        self.sparse.get(&s.source_t).map(Vec::as_slice)
    }
}

/// `t′ = ⌊t/N⌋·N`
pub fn back_map(t: u64, n: u64) -> u64 {
    t / n * n
}

/// Overview fusion into key 0, sparse manipulation evidence at every positive
/// multiple of `N`, and back-mapping of every manipulation step. Step `t` is
/// the position of the frame within the manipulation phase.
pub fn preprocess_trajectory(traj: &TrajectoryFile, cfg: &ConstructConfig) -> Result<PreprocessOutput> {
    cfg.validate()?;
    if traj.scan_frames.is_empty() {
        return Err(Error::Format("trajectory has no scan phase".into()));
    }
    let n = cfg.interval;
    let scan: Vec<FrameRecord> = traj.scan_frames.iter().map(|f| f.frame.clone()).collect();
    let overview = sample_overview(&scan, n)?;
    let mut sparse = BTreeMap::new();
    sparse.insert(0, fuse_instances(overview.iter().flat_map(extract_triplets).collect(), cfg.tau, cfg.lambda)?);
    for (t, f) in traj.manip_frames.iter().enumerate().skip(n).step_by(n) {
        sparse.insert(t as u64, extract_triplets(&f.frame));
    }
    let steps =
        (0..traj.manip_frames.len() as u64).map(|t| StepRecord { t, source_t: back_map(t, n as u64) }).collect();
    Ok(PreprocessOutput { interval: n, overview_interval: overview_interval(n), sparse, steps })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidatorConfig {
    /// Seconds; a command/actuation gap at or above this fails.
    pub latency_threshold: f64,
    pub oscillation_reversals: usize,
    pub oscillation_window: usize,
    pub drop_threshold: f64,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        Self { latency_threshold: 0.3, oscillation_reversals: 4, oscillation_window: 20, drop_threshold: 2.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleStatus {
    Pass,
    Fail,
    ManualReview,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: String,
    pub status: RuleStatus,
    /// Timestamps (s) of the offending samples.
    pub offending: Vec<f64>,
    pub warnings: Vec<String>,
}

impl RuleResult {
    fn new(rule: &str, failed: bool, offending: Vec<f64>, warnings: Vec<String>) -> Self {
        let status = if failed { RuleStatus::Fail } else { RuleStatus::Pass };
        Self { rule: rule.into(), status, offending, warnings }
    }

    fn manual(rule: &str) -> Self {
        Self {
            rule: rule.into(),
            status: RuleStatus::ManualReview,
            offending: Vec::new(),
            warnings: vec!["requires visual inspection".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub rules: Vec<RuleResult>,
    pub passed: bool,
}

/// Absolute tolerance on timestamp arithmetic so a nominal 300 ms gap is not
/// read as 299.99... ms.
const TIME_EPS: f64 = 1e-9;

fn payload_f64(e: &Event, key: &str) -> Option<f64> {
    e.payload.get(key).and_then(serde_json::Value::as_f64)
}

fn payload_id(e: &Event) -> Option<String> {
    e.payload.get("id").map(|v| v.to_string())
}

/// Command-to-actuation latency.
pub fn validate_latency(traj: &TrajectoryFile, cfg: &ValidatorConfig) -> RuleResult {
    let mut commands: BTreeMap<String, f64> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut offending = Vec::new();
    let mut n_commands = 0;
    for e in traj.events.iter().filter(|e| e.kind == "command") {
        n_commands += 1;
        match payload_id(e) {
            Some(id) => {
                if commands.insert(id.clone(), e.t).is_some() {
                    warnings.push(format!("duplicate command id {id}"));
                }
            }
            None => warnings.push(format!("command at {} has no id", e.t)),
        }
    }
    if n_commands == 0 {
        warnings.push("no command events".into());
    }
    for e in traj.events.iter().filter(|e| e.kind == "actuation") {
        match payload_id(e).and_then(|id| commands.remove(&id).map(|t0| (id, t0))) {
            Some((_, t0)) => {
                if e.t - t0 >= cfg.latency_threshold - TIME_EPS {
                    offending.push(t0);
                }
            }
            None => warnings.push(format!("actuation at {} has no matching command", e.t)),
        }
    }
    for (id, t) in commands {
        warnings.push(format!("command {id} at {t} has no actuation"));
    }
    RuleResult::new("latency", !offending.is_empty(), offending, warnings)
}

fn gripper_series(traj: &TrajectoryFile) -> Vec<(f64, f64)> {
    let mut s: Vec<(f64, f64)> = traj
        .events
        .iter()
        .filter(|e| e.kind == "gripper")
        .filter_map(|e| payload_f64(e, "value").map(|v| (e.t, v)))
        .collect();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    s
}

/// Sample indices at which the open/close direction reverses. Flat segments
/// carry the previous direction forward.
pub fn reversal_indices(values: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last_sign = 0.0;
    for i in 1..values.len() {
        let d = values[i] - values[i - 1];
        if d == 0.0 {
            continue;
        }
        let s = d.signum();
        if last_sign != 0.0 && s != last_sign {
            out.push(i - 1);
        }
        last_sign = s;
    }
    out
}

/// Gripper oscillation and out-of-range spikes.
pub fn validate_gripper(traj: &TrajectoryFile, cfg: &ValidatorConfig) -> (RuleResult, RuleResult) {
    let series = gripper_series(traj);
    let mut warnings = Vec::new();
    if series.is_empty() {
        warnings.push("no gripper events".into());
    }
    let (lo, hi) = traj.meta.gripper_range;
    let spikes: Vec<f64> = series.iter().filter(|(_, v)| !(*v >= lo && *v <= hi)).map(|(t, _)| *t).collect();
    let values: Vec<f64> = series.iter().map(|s| s.1).collect();
    let rev = reversal_indices(&values);
    let (k, w) = (cfg.oscillation_reversals.max(1), cfg.oscillation_window.max(1));
    let mut offending = Vec::new();
    for (a, &start) in rev.iter().enumerate() {
        if let Some(&end) = rev.get(a + k - 1) {
            if end - start < w {
                offending.push(series[start].0);
            }
        }
    }
    offending.dedup();
    (
        RuleResult::new("gripper_oscillation", !offending.is_empty(), offending, warnings.clone()),
        RuleResult::new("gripper_spike", !spikes.is_empty(), spikes, warnings),
    )
}

/// Dropped-frame estimate per gap: `round(gap·fps) − 1`, floored at zero.
pub fn dropped_frames(gap: f64, fps: f64) -> u64 {
    ((gap * fps).round() - 1.0).max(0.0) as u64
}

/// Total dropped frames over both phases.
pub fn validate_frame_drop(traj: &TrajectoryFile, cfg: &ValidatorConfig) -> Result<(RuleResult, u64)> {
    let fps = traj.meta.fps;
    if !(fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let mut total = 0;
    let mut offending = Vec::new();
    for frames in [&traj.scan_frames, &traj.manip_frames] {
        let stamps: Vec<f64> = frames.iter().map(|f| f.stamp.unwrap_or(f.frame.t as f64 / fps)).collect();
        for w in stamps.windows(2) {
            let d = dropped_frames(w[1] - w[0], fps);
            if d > 0 {
                total += d;
                offending.push(w[1]);
            }
        }
    }
    let failed = total as f64 >= cfg.drop_threshold;
    Ok((RuleResult::new("frame_drop", failed, offending, Vec::new()), total))
}

pub fn quality_report(traj: &TrajectoryFile, cfg: &ValidatorConfig) -> Result<QualityReport> {
    let (osc, spike) = validate_gripper(traj, cfg);
    let (drop, _) = validate_frame_drop(traj, cfg)?;
    let rules = vec![
        validate_latency(traj, cfg),
        osc,
        spike,
        RuleResult::manual("camera_view"),
        RuleResult::manual("reach_strategy"),
        drop,
    ];
    let passed = rules.iter().all(|r| r.status != RuleStatus::Fail);
    Ok(QualityReport { rules, passed })
}
