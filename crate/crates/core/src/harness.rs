//! Out-of-view search-and-grasp episodes.
//!
//! A scene is generated with the target outside the initial field of view.
//! Depending on the memory mode the agent scans first, builds memory, and then
//! seeks the target with a memory-guided head policy, or falls back to a
//! raster sweep. The head moves on a 10° pan lattice until it is close to the
//! estimated bearing, then centers continuously; a grasp is attempted once the
//! target is centered and the estimate is trusted.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::construct::{build_memory, sample_overview, ConstructConfig, SceneMemory};
use crate::error::{Error, Result};
use crate::geometry::{corners_center, distance, Aabb};
use crate::metrics::{
    aggregate, compute_metrics, AggregateReport, EpisodeEvent, EpisodeLog, EventKind, MetricsReport, StepLog,
};
use crate::nets::{MlpStack, WeightMode};
use crate::numkern::Rng;
use crate::refine::{refine, RefineAudit, RefineConfig, UpdateStrategy};
use crate::retrieve::{retrieve, AttentionConfig, Booster, QueryConfig};
use crate::scene::{
    frame_rng, render_frame, scan_trajectory, visible, CameraPose, FrameRecord, Intrinsics, NoiseSpec, ObjectInstance,
    SceneSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// Scan, build memory, refine every step.
    Full,
    /// No scan; memory starts from the first live frame and is refined.
    NoScan,
    /// Scan and build memory, never refine.
    ScanOnly,
    /// No memory: raster search and live detections only.
    None,
}

impl MemoryMode {
    pub const ALL: [MemoryMode; 4] = [MemoryMode::Full, MemoryMode::ScanOnly, MemoryMode::NoScan, MemoryMode::None];

    pub fn name(&self) -> &'static str {
        match self {
            MemoryMode::Full => "full",
            MemoryMode::NoScan => "no_scan",
            MemoryMode::ScanOnly => "scan_only",
            MemoryMode::None => "none",
        }
    }

    fn scans(&self) -> bool {
        matches!(self, MemoryMode::Full | MemoryMode::ScanOnly)
    }

    fn refines(&self) -> bool {
        matches!(self, MemoryMode::Full | MemoryMode::NoScan)
    }
}

impl std::str::FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MemoryMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown memory mode `{s}` (expected full, scan_only, no_scan or none)"))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanSpec {
    pub start_pan: f64,
    pub end_pan: f64,
    pub steps: usize,
    pub tilt: f64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self { start_pan: -140.0, end_pan: 140.0, steps: 57, tilt: -15.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterSpec {
    pub pan_step: f64,
    pub pan_limit: f64,
    pub tilts: Vec<f64>,
}

impl Default for RasterSpec {
    fn default() -> Self {
        Self { pan_step: 10.0, pan_limit: 130.0, tilts: vec![0.0, -20.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenSpec {
    pub n_objects: usize,
    pub radius: (f64, f64),
    pub height: (f64, f64),
    pub half_extent: (f64, f64),
    pub min_separation: f64,
    /// Largest target bearing magnitude (deg).
    pub max_target_bearing: f64,
    /// Extra margin (deg) beyond hfov/2 for the target bearing.
    pub oov_margin: f64,
    pub categories: Vec<String>,
    /// Probability that the target is displaced after the scan.
    pub move_prob: f64,
    pub move_distance: (f64, f64),
}

impl Default for SceneGenSpec {
    fn default() -> Self {
        Self {
            n_objects: 5,
            radius: (0.5, 1.2),
            height: (-0.35, -0.05),
            half_extent: (0.03, 0.08),
            min_separation: 0.25,
            max_target_bearing: 135.0,
            oov_margin: 10.0,
            categories: ["mug", "bowl", "bottle", "apple", "can", "box", "sponge", "banana"].map(String::from).to_vec(),
            move_prob: 0.2,
            move_distance: (0.08, 0.25),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub seed: u64,
    pub scene: SceneGenSpec,
    pub camera: Intrinsics,
    pub noise: NoiseSpec,
    pub initial_pan: f64,
    pub initial_tilt: f64,
    pub scan: ScanSpec,
    pub construct: ConstructConfig,
    pub strategy: UpdateStrategy,
    pub nets: WeightMode,
    pub d_vlm: usize,
    pub attention: AttentionConfig,
    pub memory_mode: MemoryMode,
    pub max_steps: usize,
    /// Grasp tolerance ε (m).
    pub grasp_tolerance: f64,
    pub step_duration: f64,
    /// Maximum head speed (deg/step).
    pub omega_max: f64,
    pub raster: RasterSpec,
    pub max_attempts: usize,
    /// Consecutive centered steps without a target detection before an
    /// estimate is abandoned.
    pub stale_after: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneGenSpec::default(),
            camera: Intrinsics::default(),
            noise: NoiseSpec::default(),
            initial_pan: 0.0,
            initial_tilt: 0.0,
            scan: ScanSpec::default(),
            construct: ConstructConfig::default(),
            strategy: UpdateStrategy::Full,
            nets: WeightMode::Seeded(42),
            d_vlm: 64,
            attention: AttentionConfig::default(),
            memory_mode: MemoryMode::Full,
            max_steps: 36,
            grasp_tolerance: 0.05,
            step_duration: 0.1,
            omega_max: 15.0,
            raster: RasterSpec::default(),
            max_attempts: 3,
            stale_after: 3,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.noise.validate()?;
        self.construct.validate()?;
        self.strategy.validate()?;
        self.attention.validate()?;
        if self.d_vlm != self.attention.d_model() {
            return Err(Error::Config(format!(
                "d_vlm {} does not match attention width {}",
                self.d_vlm,
                self.attention.d_model()
            )));
        }
        let s = &self.scene;
        if s.n_objects == 0 {
            return Err(Error::Config("scene needs at least one object".into()));
        }
        if s.categories.is_empty() {
            return Err(Error::Config("category pool is empty".into()));
        }
        if !(s.radius.0 > 0.0 && s.radius.0 < s.radius.1) || !(s.height.0 <= s.height.1) {
            return Err(Error::Config("invalid radius or height range".into()));
        }
        if !(s.half_extent.0 > 0.0 && s.half_extent.0 <= s.half_extent.1) {
            return Err(Error::Config("invalid half extent range".into()));
        }
        let min_bearing = 0.5 * self.camera.hfov + s.oov_margin;
        if min_bearing >= s.max_target_bearing {
            return Err(Error::Config(format!(
                "target bearing range [{min_bearing}, {}] is empty",
                s.max_target_bearing
            )));
        }
        if self.max_steps == 0 || self.max_attempts == 0 {
            return Err(Error::Config("max_steps and max_attempts must be positive".into()));
        }
        if !(self.grasp_tolerance > 0.0 && self.step_duration > 0.0 && self.omega_max > 0.0) {
            return Err(Error::Config("grasp_tolerance, step_duration and omega_max must be positive".into()));
        }
        if self.raster.tilts.is_empty() || !(self.raster.pan_step > 0.0) || self.raster.pan_step > self.omega_max {
            return Err(Error::Config("raster needs tilt rows and a pan step in (0, omega_max]".into()));
        }
        if self.scan.steps < 2 {
            return Err(Error::Config("scan needs at least 2 poses".into()));
        }
        Ok(())
    }

    pub fn build_nets(&self) -> Result<(MlpStack, Booster)> {
        let nets = MlpStack::new(self.nets, self.d_vlm)?;
        let booster = Booster::new(self.attention)?;
        Ok((nets, booster))
    }

    fn initial_pose(&self) -> CameraPose {
        CameraPose::new(&self.camera, [0.0; 3], self.initial_pan, self.initial_tilt)
    }
}

/// A generated scene with its designated target and the post-scan layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScene {
    pub scene: SceneSpec,
    pub target_id: usize,
    /// Target center after the scan, when it was moved.
    pub moved_to: Option<[f64; 3]>,
    /// Base seed of the per-frame noise streams.
    pub frame_seed: u64,
}

impl EpisodeScene {
    pub fn target(&self) -> &ObjectInstance {
        self.scene.object(self.target_id).expect("target exists")
    }

    pub fn target_category(&self) -> &str {
        &self.target().category
    }

    /// Scene as it is during the episode (after any displacement).
    pub fn live_scene(&self) -> SceneSpec {
        let mut s = self.scene.clone();
        if let Some(c) = self.moved_to {
            s.object_mut(self.target_id).expect("target exists").center = c;
        }
        s
    }
}

fn bearing_point(bearing: f64, r: f64, z: f64) -> [f64; 3] {
    let b = bearing.to_radians();
    [r * libm::cos(b), r * libm::sin(b), z]
}

fn well_separated(p: [f64; 3], others: &[ObjectInstance], min_sep: f64) -> bool {
    others.iter().all(|o| distance(o.center, p) >= min_sep)
}

/// Generates the scene for `cfg.seed`. The target category is unique in the
/// scene; the target bearing magnitude lies in `[hfov/2 + margin, max]`.
pub fn generate_scene(cfg: &EpisodeConfig) -> Result<EpisodeScene> {
    cfg.validate()?;
    let s = &cfg.scene;
    let mut root = Rng::new(cfg.seed);
    let mut rng = root.fork();
    let mut move_rng = root.fork();
    let frame_seed = root.next_u64();
    let half = |rng: &mut Rng| {
        [
            rng.uniform(s.half_extent.0, s.half_extent.1 + f64::EPSILON),
            rng.uniform(s.half_extent.0, s.half_extent.1 + f64::EPSILON),
            rng.uniform(s.half_extent.0, s.half_extent.1 + f64::EPSILON),
        ]
    };
    let init = cfg.initial_pose();
    let target_cat = s.categories[rng.below(s.categories.len() as u64) as usize].clone();
    let others: Vec<&String> = s.categories.iter().filter(|c| **c != target_cat).collect();
    let min_bearing = 0.5 * cfg.camera.hfov + s.oov_margin;
    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(s.n_objects);
    let mut target = None;
    for _ in 0..1000 {
        let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let b = cfg.initial_pan + sign * rng.uniform(min_bearing, s.max_target_bearing);
        let r = rng.uniform(s.radius.0, s.radius.1);
        let z = rng.uniform(s.height.0, s.height.1 + f64::EPSILON);
        let h = half(&mut rng);
        let o = ObjectInstance::new(0, &target_cat, bearing_point(b, r, z), h, rng.next_u64())?;
        if !visible(&o, &init) {
            target = Some(o);
            break;
        }
    }
    objects.push(target.ok_or_else(|| Error::Config("could not place an out-of-view target".into()))?);
    let mut id = 1;
    let mut tries = 0;
    while objects.len() < s.n_objects && !others.is_empty() {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Config("could not place all objects; relax min_separation".into()));
        }
        let cat = others[rng.below(others.len() as u64) as usize];
        let b = rng.uniform(-150.0, 150.0);
        let r = rng.uniform(s.radius.0, s.radius.1);
        let z = rng.uniform(s.height.0, s.height.1 + f64::EPSILON);
        let h = half(&mut rng);
        let seed = rng.next_u64();
        let p = bearing_point(b, r, z);
        if well_separated(p, &objects, s.min_separation) {
            objects.push(ObjectInstance::new(id, cat, p, h, seed)?);
            id += 1;
        }
    }
    let scene = SceneSpec::new(objects, cfg.camera, cfg.noise)?;
    let mut moved_to = None;
    if move_rng.bernoulli(s.move_prob) {
        let t = &scene.objects[0];
        let rest = &scene.objects[1..];
        for _ in 0..50 {
            let theta = move_rng.uniform(-180.0, 180.0).to_radians();
            let d = move_rng.uniform(s.move_distance.0, s.move_distance.1 + f64::EPSILON);
            let c = [t.center[0] + d * libm::cos(theta), t.center[1] + d * libm::sin(theta), t.center[2]];
            let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
            let bearing = libm::atan2(c[1], c[0]).to_degrees();
            let mut probe = t.clone();
            probe.center = c;
            if r >= s.radius.0
                && r <= s.radius.1
                && (bearing - cfg.initial_pan).abs() >= min_bearing
                && bearing.abs() <= s.max_target_bearing
                && !visible(&probe, &init)
                && well_separated(c, rest, s.min_separation)
            {
                moved_to = Some(c);
                break;
            }
        }
    }
    Ok(EpisodeScene { scene, target_id: 0, moved_to, frame_seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentPhase {
    Scan,
    Seek,
    Grasp,
}

/// Mutable state of the head policy during one episode.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub memory: Option<SceneMemory>,
    pub pose: CameraPose,
    pub phase: AgentPhase,
    pub estimate: Option<[f64; 3]>,
    raster_row: usize,
    raster_dir: f64,
    stale: BTreeSet<usize>,
    centered_misses: usize,
    live_estimate: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub mode: MemoryMode,
    pub success: bool,
    pub target_category: String,
    pub target_moved: bool,
    pub log: EpisodeLog,
    pub memory: Option<SceneMemory>,
    pub audit: Vec<RefineAudit>,
}

fn bearing_of(p: [f64; 3], origin: [f64; 3]) -> (f64, f64) {
    let d = [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]];
    let pan = libm::atan2(d[1], d[0]).to_degrees();
    let tilt = libm::atan2(d[2], (d[0] * d[0] + d[1] * d[1]).sqrt()).to_degrees();
    (pan, tilt)
}

fn wrap_deg(a: f64) -> f64 {
    let mut x = a % 360.0;
    if x > 180.0 {
        x -= 360.0;
    } else if x < -180.0 {
        x += 360.0;
    }
    x
}

/// Tolerance (deg) within which the head counts as centered on the estimate.
const CENTER_TOL: f64 = 1.5;
/// Below this bearing error the lattice phase hands over to fine centering.
const LATTICE_CAPTURE: f64 = 5.0;

impl AgentState {
    fn new(pose: CameraPose) -> Self {
        Self {
            memory: None,
            pose,
            phase: AgentPhase::Scan,
            estimate: None,
            raster_row: 0,
            raster_dir: 1.0,
            stale: BTreeSet::new(),
            centered_misses: 0,
            live_estimate: None,
        }
    }

    fn offsets(&self, target: [f64; 3]) -> (f64, f64) {
        let (pan, tilt) = bearing_of(target, self.pose.position);
        (wrap_deg(pan - self.pose.pan), tilt - self.pose.tilt)
    }

    fn is_centered(&self, target: [f64; 3]) -> bool {
        let (dp, dt) = self.offsets(target);
        dp.abs() <= CENTER_TOL && dt.abs() <= CENTER_TOL
    }

    /// Pan-first move toward `target`: 10° lattice steps while far away, then
    /// bounded continuous correction, tilt before pan.
    fn step_toward(&mut self, target: [f64; 3], cfg: &EpisodeConfig) {
        let (dp, dt) = self.offsets(target);
        let lattice = cfg.raster.pan_step;
        if dp.abs() > LATTICE_CAPTURE {
            let on_lattice = (self.pose.pan / lattice).round() * lattice;
            let next = if (on_lattice - self.pose.pan).abs() > 1e-9 {
                on_lattice
            } else {
                self.pose.pan + lattice * dp.signum()
            };
            self.pose.pan = next;
            return;
        }
        let clamp = |v: f64| v.clamp(-cfg.omega_max, cfg.omega_max);
        if dt.abs() > CENTER_TOL {
            self.pose.tilt += clamp(dt);
        } else {
            self.pose.pan += clamp(dp);
            self.pose.tilt += dt;
        }
    }

    /// Boustrophedon sweep over the raster lattice.
    fn raster_step(&mut self, cfg: &EpisodeConfig) {
        let r = &cfg.raster;
        let snapped = (self.pose.pan / r.pan_step).round() * r.pan_step;
        if (snapped - self.pose.pan).abs() > 1e-9 {
            self.pose.pan = snapped;
            return;
        }
        let row_tilt = r.tilts[self.raster_row];
        if (self.pose.tilt - row_tilt).abs() > 1e-9 {
            self.pose.tilt += (row_tilt - self.pose.tilt).clamp(-cfg.omega_max, cfg.omega_max);
            return;
        }
        let next = self.pose.pan + r.pan_step * self.raster_dir;
        if next.abs() > r.pan_limit + 1e-9 {
            self.raster_row = (self.raster_row + 1) % r.tilts.len();
            self.raster_dir = -self.raster_dir;
            let row_tilt = r.tilts[self.raster_row];
            self.pose.tilt += (row_tilt - self.pose.tilt).clamp(-cfg.omega_max, cfg.omega_max);
        } else {
            self.pose.pan = next;
        }
    }
}

/// Runs one episode, generating the scene from `cfg.seed`.
pub fn run_episode(cfg: &EpisodeConfig, nets: &MlpStack, booster: &Booster) -> Result<EpisodeOutcome> {
    let scene = generate_scene(cfg)?;
    run_episode_in_scene(cfg, &scene, nets, booster)
}

/// Runs one episode in a given scene.
pub fn run_episode_in_scene(
    cfg: &EpisodeConfig,
    es: &EpisodeScene,
    nets: &MlpStack,
    booster: &Booster,
) -> Result<EpisodeOutcome> {
    rollout(cfg, es, nets, booster, false).map(|(o, _)| o)
}

/// Frames rendered during an episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Recording {
    pub scan: Vec<FrameRecord>,
    pub live: Vec<FrameRecord>,
}

/// [`run_episode_in_scene`] that also returns every rendered frame.
pub fn run_episode_recorded(
    cfg: &EpisodeConfig,
    es: &EpisodeScene,
    nets: &MlpStack,
    booster: &Booster,
) -> Result<(EpisodeOutcome, Recording)> {
    rollout(cfg, es, nets, booster, true)
}

fn rollout(
    cfg: &EpisodeConfig,
    es: &EpisodeScene,
    nets: &MlpStack,
    booster: &Booster,
    record: bool,
) -> Result<(EpisodeOutcome, Recording)> {
    cfg.validate()?;
    if nets.d_vlm != cfg.d_vlm || booster.cfg.d_model() != cfg.d_vlm {
        return Err(Error::Config("d_vlm does not match the attention width".into()));
    }
    let init = cfg.initial_pose();
    if visible(es.target(), &init) {
        return Err(Error::Config("target is visible from the initial pose".into()));
    }
    let live = es.live_scene();
    if visible(live.object(es.target_id).expect("target"), &init) {
        return Err(Error::Config("displaced target is visible from the initial pose".into()));
    }
    let category = es.target_category().to_string();
    let mode = cfg.memory_mode;
    let render = |scene: &SceneSpec, pose: &CameraPose, t: u64| -> FrameRecord {
        render_frame(scene, pose, t, &mut frame_rng(es.frame_seed, t), &cfg.noise)
    };

    // Scan phase: executed before the logged episode starts.
    let scan_len = if mode.scans() { cfg.scan.steps as u64 } else { 0 };
    let mut rec = Recording::default();
    let mut state = AgentState::new(init);
    if mode.scans() {
        let poses = scan_trajectory(
            &cfg.camera,
            [0.0; 3],
            cfg.scan.start_pan,
            cfg.scan.end_pan,
            cfg.scan.steps,
            cfg.scan.tilt,
        )?;
        let frames: Vec<FrameRecord> = poses.iter().enumerate().map(|(t, p)| render(&es.scene, p, t as u64)).collect();
        let sampled = sample_overview(&frames, cfg.construct.interval)?;
        state.memory = Some(build_memory(&sampled, nets, &cfg.construct, scan_len.saturating_sub(1))?);
        if record {
            rec.scan = frames;
        }
    }
    state.phase = AgentPhase::Seek;

    let refine_cfg = RefineConfig { strategy: cfg.strategy, tau: cfg.construct.tau, lambda: cfg.construct.lambda };
    let target_live = live.object(es.target_id).expect("target").clone();
    let mut steps = Vec::new();
    let mut events = Vec::new();
    let mut audit = Vec::new();
    let mut attempts = 0;
    let mut success = false;

    for step in 0..=cfg.max_steps as u64 {
        if step > 0 {
            // Decide and execute the head motion for this step.
            let est = current_estimate(&state, mode, &category, nets, booster)?.map(|(_, p)| p);
            state.estimate = est;
            match est {
                Some(p) => state.step_toward(p, cfg),
                None => state.raster_step(cfg),
            }
        }
        let frame_t = scan_len + step;
        let frame = render(&live, &state.pose, frame_t);
        let target_dets: Vec<usize> =
            frame.detections.iter().enumerate().filter(|(_, d)| d.category == category).map(|(j, _)| j).collect();
        if record {
            rec.live.push(frame.clone());
        }

        // Memory update from the live frame.
        let mut refreshed: Option<(usize, [f64; 3])> = None;
        match mode {
            MemoryMode::NoScan if step == 0 => {
                state.memory = Some(build_memory(std::slice::from_ref(&frame), nets, &cfg.construct, frame_t)?);
            }
            m if m.refines() => {
                let mem = state.memory.as_ref().expect("memory present");
                let (next, a) = refine(mem, &frame, nets, &refine_cfg, frame_t)?;
                for &(id, j, _) in &a.matched {
                    if target_dets.contains(&j) {
                        refreshed = Some((id, corners_center(&frame.detections[j].bbox3d_global)));
                    }
                }
                for (&id, &j) in a.appended.iter().zip(appended_obs(&a, &frame).iter()) {
                    if target_dets.contains(&j) {
                        refreshed = Some((id, corners_center(&frame.detections[j].bbox3d_global)));
                    }
                }
                state.memory = Some(next);
                audit.push(a);
            }
            _ => {}
        }
        // Without memory only the current frame informs the next action.
        state.live_estimate = target_dets.first().map(|&j| corners_center(&frame.detections[j].bbox3d_global));

        let visible_now = visible(&target_live, &state.pose);
        steps.push(StepLog { t: step, pan: state.pose.pan, tilt: state.pose.tilt, target_visible: visible_now });

        // Grasp decision on the current frame.
        let est = current_estimate(&state, mode, &category, nets, booster)?;
        let Some((token, p)) = est else { continue };
        if !state.is_centered(p) {
            state.centered_misses = 0;
            continue;
        }
        if target_dets.is_empty() {
            state.centered_misses += 1;
            if state.centered_misses >= cfg.stale_after {
                if let Some(id) = token {
                    state.stale.insert(id);
                } else {
                    state.live_estimate = None;
                }
                state.centered_misses = 0;
            }
            continue;
        }
        state.centered_misses = 0;
        let ready = match mode {
            MemoryMode::Full | MemoryMode::NoScan => match (token, refreshed) {
                (Some(id), Some((rid, obs_c))) if id == rid => distance(p, obs_c) <= 0.5 * cfg.grasp_tolerance,
                _ => false,
            },
            MemoryMode::ScanOnly | MemoryMode::None => true,
        };
        if !ready {
            continue;
        }
        state.phase = AgentPhase::Grasp;
        attempts += 1;
        events.push(EpisodeEvent { t: step, kind: EventKind::GraspStart });
        events.push(EpisodeEvent { t: step, kind: EventKind::GraspClose });
        if distance(p, target_live.center) <= cfg.grasp_tolerance && visible_now {
            events.push(EpisodeEvent { t: step, kind: EventKind::GraspSuccess });
            success = true;
            break;
        }
        if attempts >= cfg.max_attempts {
            break;
        }
    }
    let end = steps.last().map_or(0, |s| s.t);
    events.push(EpisodeEvent { t: end, kind: EventKind::EpisodeEnd });
    let outcome = EpisodeOutcome {
        seed: cfg.seed,
        mode,
        success,
        target_category: category,
        target_moved: es.moved_to.is_some(),
        log: EpisodeLog { steps, events, step_duration: cfg.step_duration },
        memory: state.memory,
        audit,
    };
    Ok((outcome, rec))
}

/// Observation indices of appended tokens, in append order.
fn appended_obs(a: &RefineAudit, frame: &FrameRecord) -> Vec<usize> {
    let matched: BTreeSet<usize> = a.matched.iter().map(|m| m.1).collect();
    (0..frame.detections.len()).filter(|j| !matched.contains(j)).collect()
}

/// Target-category token to pursue: most recently updated first, then the
/// highest retrieval attention, then the lowest id.
fn pick_token(
    state: &AgentState,
    category: &str,
    nets: &MlpStack,
    booster: &Booster,
) -> Result<Option<(usize, [f64; 3])>> {
    let Some(mem) = &state.memory else { return Ok(None) };
    let cands: Vec<_> = mem.tokens.iter().filter(|t| t.category == category && !state.stale.contains(&t.id)).collect();
    let Some(latest) = cands.iter().map(|t| t.last_update_t).max() else { return Ok(None) };
    let recent: Vec<_> = cands.into_iter().filter(|t| t.last_update_t == latest).collect();
    let chosen = if recent.len() == 1 {
        recent[0]
    } else {
        let r = retrieve(mem, category, nets, booster, &QueryConfig::default())?;
        let weight = |id: usize| {
            let k = mem.tokens.iter().position(|t| t.id == id).expect("token");
            r.attention.get(0, k)
        };
        recent
            .into_iter()
            .fold(None, |best: Option<&crate::construct::MemoryToken>, t| match best {
                Some(b) if weight(b.id) >= weight(t.id) => Some(b),
                _ => Some(t),
            })
            .expect("non-empty")
    };
    Ok(Some((chosen.id, Aabb::from_corners(&chosen.bbox3d).center())))
}

fn current_estimate(
    state: &AgentState,
    mode: MemoryMode,
    category: &str,
    nets: &MlpStack,
    booster: &Booster,
) -> Result<Option<(Option<usize>, [f64; 3])>> {
    Ok(match mode {
        MemoryMode::None => state.live_estimate.map(|p| (None, p)),
        _ => pick_token(state, category, nets, booster)?.map(|(id, p)| (Some(id), p)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: MemoryMode,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub metrics: AggregateReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub seed: u64,
    pub mode: MemoryMode,
    pub baseline: MemoryMode,
    /// `mode − baseline` head search path length, when both are defined.
    pub head_path_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub n_episodes: usize,
    pub base_seed: u64,
    pub modes: Vec<ModeSummary>,
    /// Deltas of every mode against the last listed mode, per seed.
    pub deltas: Vec<PairedDelta>,
    /// `median(full) / median(none)` head search path length.
    pub median_head_path_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SuiteRun {
    pub report: SuiteReport,
    pub outcomes: Vec<EpisodeOutcome>,
    pub metrics: Vec<MetricsReport>,
}

/// Runs `n` paired seeds (`base_seed + i`) under every listed mode.
pub fn run_suite(n: usize, base_seed: u64, template: &EpisodeConfig, modes: &[MemoryMode]) -> Result<SuiteRun> {
    if n == 0 {
        return Err(Error::Config("suite needs at least one episode".into()));
    }
    if modes.is_empty() {
        return Err(Error::Config("suite needs at least one mode".into()));
    }
    template.validate()?;
    let (nets, booster) = template.build_nets()?;
    let jobs: Vec<(usize, u64, MemoryMode)> =
        modes.iter().enumerate().flat_map(|(k, &m)| (0..n as u64).map(move |i| (k, base_seed + i, m))).collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(_, seed, mode)| {
            let cfg = EpisodeConfig { seed, memory_mode: mode, ..template.clone() };
            run_episode(&cfg, &nets, &booster)
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = outcomes
        .iter()
        .map(|o| compute_metrics(&o.log, crate::metrics::DEFAULT_DEADBAND))
        .collect::<Result<Vec<_>>>()?;
    let mut summaries = Vec::new();
    for (k, &mode) in modes.iter().enumerate() {
        let range = k * n..(k + 1) * n;
        let successes = outcomes[range.clone()].iter().filter(|o| o.success).count();
        summaries.push(ModeSummary {
            mode,
            episodes: n,
            successes,
            success_rate: successes as f64 / n as f64,
            metrics: aggregate(&metrics[range]),
        });
    }
    let base_k = modes.len() - 1;
    let mut deltas = Vec::new();
    for (k, &mode) in modes.iter().enumerate().take(base_k) {
        for i in 0..n {
            let a = metrics[k * n + i].head_search_path_length;
            let b = metrics[base_k * n + i].head_search_path_length;
            deltas.push(PairedDelta {
                seed: base_seed + i as u64,
                mode,
                baseline: modes[base_k],
                head_path_delta: a.zip(b).map(|(a, b)| a - b),
            });
        }
    }
    let median_of =
        |m: MemoryMode| summaries.iter().find(|s| s.mode == m).and_then(|s| s.metrics.head_search_path_length.median);
    let median_head_path_ratio = match (median_of(MemoryMode::Full), median_of(MemoryMode::None)) {
        (Some(f), Some(z)) if z > 0.0 => Some(f / z),
        _ => None,
    };
    Ok(SuiteRun {
        report: SuiteReport { n_episodes: n, base_seed, modes: summaries, deltas, median_head_path_ratio },
        outcomes,
        metrics,
    })
}
