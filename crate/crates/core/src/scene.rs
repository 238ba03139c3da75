//! Synthetic tabletop world viewed by a pan–tilt pinhole camera.
//!
//! World frame is z-up. At pan = tilt = 0 the camera looks along +x; positive
//! pan turns toward +y and positive tilt looks up. Detections are produced
//! directly in the world frame, so a detection's 3D box does not depend on the
//! pose it was seen from apart from the injected noise.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Corners};
use crate::nets::EMBED_DIM;
use crate::numkern::{normalized, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub hfov: f64,
    pub vfov: f64,
    pub image_size: (u32, u32),
    pub near: f64,
    pub far: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { hfov: 69.0, vfov: 42.0, image_size: (640, 480), near: 0.1, far: 5.0 }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let fov_ok = |f: f64| f > 0.0 && f < 180.0;
        if !fov_ok(self.hfov) || !fov_ok(self.vfov) {
            return Err(Error::Config(format!("fov out of (0, 180): {} x {}", self.hfov, self.vfov)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config(format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub pan: f64,
    pub tilt: f64,
    pub hfov: f64,
    pub vfov: f64,
    pub image_size: (u32, u32),
    pub near: f64,
    pub far: f64,
}

impl CameraPose {
    pub fn new(intr: &Intrinsics, position: [f64; 3], pan: f64, tilt: f64) -> Self {
        Self {
            position,
            pan,
            tilt,
            hfov: intr.hfov,
            vfov: intr.vfov,
            image_size: intr.image_size,
            near: intr.near,
            far: intr.far,
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { hfov: self.hfov, vfov: self.vfov, image_size: self.image_size, near: self.near, far: self.far }
    }

    /// Orthonormal (right, up, forward) axes in world coordinates.
    pub fn axes(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (sp, cp) = (libm::sin(self.pan.to_radians()), libm::cos(self.pan.to_radians()));
        let (st, ct) = (libm::sin(self.tilt.to_radians()), libm::cos(self.tilt.to_radians()));
        let forward = [ct * cp, ct * sp, st];
        let right = [sp, -cp, 0.0];
        let up = [-st * cp, -st * sp, ct];
        (right, up, forward)
    }

    /// World point to camera coordinates `(x right, y up, z depth)`.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.position[0], p[1] - self.position[1], p[2] - self.position[2]];
        let (r, u, f) = self.axes();
        let dot = |a: [f64; 3]| a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
        [dot(r), dot(u), dot(f)]
    }

    fn focal(&self) -> (f64, f64) {
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        (0.5 * w / libm::tan(0.5 * self.hfov.to_radians()), 0.5 * h / libm::tan(0.5 * self.vfov.to_radians()))
    }

    /// Pixel coordinates `(u, v)` with `v` growing downward. Points at or
    /// behind the image plane are pushed to a tiny positive depth, which sends
    /// them far outside the image where clipping takes over.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        let c = self.to_camera(p);
        let z = c[2].max(1e-6);
        let (fx, fy) = self.focal();
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        (0.5 * w + fx * c[0] / z, 0.5 * h - fy * c[1] / z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation (m) of each box face coordinate.
    pub sigma_geo: f64,
    /// Expected norm of the appearance perturbation before renormalizing.
    pub sigma_emb: f64,
    pub p_miss: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma_geo: 0.01, sigma_emb: 0.05, p_miss: 0.05 }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self { sigma_geo: 0.0, sigma_emb: 0.0, p_miss: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_geo >= 0.0 && self.sigma_emb >= 0.0) {
            return Err(Error::Config("noise deviations must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_miss) {
            return Err(Error::Config(format!("p_miss {} outside [0, 1]", self.p_miss)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: usize,
    pub category: String,
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub embedding_seed: u64,
    #[serde(skip)]
    pub canonical_embedding: Vec<f64>,
}

impl ObjectInstance {
    pub fn new(
        id: usize,
        category: &str,
        center: [f64; 3],
        half_extents: [f64; 3],
        embedding_seed: u64,
    ) -> Result<Self> {
        if half_extents.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Config(format!("object {id}: half extents must be positive")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("object {id} center")));
        }
        Ok(Self {
            id,
            category: category.to_string(),
            center,
            half_extents,
            embedding_seed,
            canonical_embedding: canonical_embedding(category, embedding_seed),
        })
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_center(self.center, self.half_extents)
    }
}

/// FNV-1a, used to give each category name a stable seed.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Unit vector shared by every instance of a category.
pub fn category_prototype(category: &str) -> Vec<f64> {
    normalized(&Rng::new(fnv1a(category)).gaussian_vec(EMBED_DIM))
}

/// `normalize(0.8·prototype + 0.6·instance direction)`: instances of one
/// category have cosine about 0.64 with each other and 0.8 with the prototype.
pub fn canonical_embedding(category: &str, embedding_seed: u64) -> Vec<f64> {
    let proto = category_prototype(category);
    let own = normalized(&Rng::new(embedding_seed).gaussian_vec(EMBED_DIM));
    normalized(&proto.iter().zip(&own).map(|(p, o)| 0.8 * p + 0.6 * o).collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneFile", into = "SceneFile")]
pub struct SceneSpec {
    pub objects: Vec<ObjectInstance>,
    pub camera: Intrinsics,
    pub noise: NoiseSpec,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    objects: Vec<ObjectInstance>,
    camera: Intrinsics,
    noise: NoiseSpec,
}

impl TryFrom<SceneFile> for SceneSpec {
    type Error = Error;

    fn try_from(f: SceneFile) -> Result<Self> {
        let objects = f
            .objects
            .into_iter()
            .map(|o| ObjectInstance::new(o.id, &o.category, o.center, o.half_extents, o.embedding_seed))
            .collect::<Result<Vec<_>>>()?;
        SceneSpec::new(objects, f.camera, f.noise)
    }
}

impl From<SceneSpec> for SceneFile {
    fn from(s: SceneSpec) -> Self {
        Self { objects: s.objects, camera: s.camera, noise: s.noise }
    }
}

impl SceneSpec {
    pub fn new(objects: Vec<ObjectInstance>, camera: Intrinsics, noise: NoiseSpec) -> Result<Self> {
        camera.validate()?;
        noise.validate()?;
        let ids: BTreeSet<usize> = objects.iter().map(|o| o.id).collect();
        if ids.len() != objects.len() {
            return Err(Error::Config("object ids must be unique".into()));
        }
        Ok(Self { objects, camera, noise })
    }

    pub fn object(&self, id: usize) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: usize) -> Option<&mut ObjectInstance> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn categories(&self) -> BTreeSet<String> {
        self.objects.iter().map(|o| o.category.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: String,
    pub bbox2d: [f64; 4],
    pub bbox3d_global: Corners,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: u64,
    pub camera: CameraPose,
    pub detections: Vec<Detection>,
}

/// Center-point frustum test; boundaries are inclusive.
pub fn visible(obj: &ObjectInstance, cam: &CameraPose) -> bool {
    visible_point(obj.center, cam)
}

pub fn visible_point(p: [f64; 3], cam: &CameraPose) -> bool {
    let [x, y, z] = cam.to_camera(p);
    if !(z >= cam.near && z <= cam.far) {
        return false;
    }
    let h = libm::atan2(x, z).abs().to_degrees();
    let v = libm::atan2(y, z).abs().to_degrees();
    h <= 0.5 * cam.hfov && v <= 0.5 * cam.vfov
}

/// Per-frame stream: `base_seed XOR t`.
pub fn frame_rng(base_seed: u64, t: u64) -> Rng {
    Rng::new(base_seed ^ t)
}

/// Enclosing image rectangle of the projected corners, clipped to the image
/// and widened to at least one pixel.
pub fn project_box(cam: &CameraPose, corners: &Corners) -> [f64; 4] {
    let (w, h) = (cam.image_size.0 as f64, cam.image_size.1 as f64);
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &c in corners {
        let (u, v) = cam.project(c);
        b[0] = b[0].min(u);
        b[1] = b[1].min(v);
        b[2] = b[2].max(u);
        b[3] = b[3].max(v);
    }
    let clip = |lo: f64, hi: f64, size: f64| {
        let lo = lo.clamp(0.0, size - 1.0);
        let hi = hi.clamp(lo + 1.0, size);
        (lo, hi)
    };
    let (u0, u1) = clip(b[0], b[2], w);
    let (v0, v1) = clip(b[1], b[3], h);
    [u0, v0, u1, v1]
}

pub fn render_frame(scene: &SceneSpec, cam: &CameraPose, t: u64, rng: &mut Rng, noise: &NoiseSpec) -> FrameRecord {
    let mut detections = Vec::new();
    for obj in &scene.objects {
        if !visible(obj, cam) {
            continue;
        }
        // Always consume the miss draw so the stream layout does not depend on p_miss.
        if rng.bernoulli(noise.p_miss) {
            continue;
        }
        let mut aabb = obj.aabb();
        if noise.sigma_geo > 0.0 {
            let mut lo = aabb.min;
            let mut hi = aabb.max;
            for a in 0..3 {
                lo[a] += noise.sigma_geo * rng.gaussian();
                hi[a] += noise.sigma_geo * rng.gaussian();
            }
            for a in 0..3 {
                aabb.min[a] = lo[a].min(hi[a]);
                aabb.max[a] = lo[a].max(hi[a]);
            }
        }
        let embedding = if noise.sigma_emb > 0.0 {
            let s = noise.sigma_emb / (EMBED_DIM as f64).sqrt();
            let noisy: Vec<f64> = obj.canonical_embedding.iter().map(|&c| c + s * rng.gaussian()).collect();
            normalized(&noisy)
        } else {
            obj.canonical_embedding.clone()
        };
        let corners = aabb.corners();
        detections.push(Detection {
            category: obj.category.clone(),
            bbox2d: project_box(cam, &obj.aabb().corners()),
            bbox3d_global: corners,
            embedding,
        });
    }
    FrameRecord { t, camera: *cam, detections }
}

/// Linear pan sweep with both endpoints included.
pub fn scan_trajectory(
    intr: &Intrinsics,
    position: [f64; 3],
    start_pan: f64,
    end_pan: f64,
    steps: usize,
    tilt: f64,
) -> Result<Vec<CameraPose>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("scan needs at least 2 steps, got {steps}")));
    }
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| {
            let pan = if i + 1 == steps { end_pan } else { start_pan + (end_pan - start_pan) * i as f64 / last };
            CameraPose::new(intr, position, pan, tilt)
        })
        .collect())
}

pub fn write_frames_jsonl<W: Write>(mut w: W, frames: &[FrameRecord]) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_frames_jsonl<R: BufRead>(r: R) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("frame line {}: {e}", n + 1)))?);
    }
    Ok(out)
}
