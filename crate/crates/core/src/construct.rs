//! Overview memory construction from sampled scan frames.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{flatten_corners, iou3d, Aabb, Corners};
use crate::nets::{MlpStack, BOX_DIM, EMBED_DIM};
use crate::numkern::{cosine, normalized, Matrix};
use crate::scene::{category_prototype, FrameRecord};

/// `(frame t, detection index)` identifying one detection.
pub type Provenance = (u64, usize);

pub const PLACEHOLDER_CATEGORY: &str = "none";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceTriplet {
    pub embedding: Vec<f64>,
    pub category: String,
    pub bbox3d: Corners,
    pub support_count: usize,
    pub provenance: Vec<Provenance>,
}

impl InstanceTriplet {
    fn key(&self) -> Provenance {
        self.provenance.iter().copied().min().unwrap_or((u64::MAX, usize::MAX))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryToken {
    pub id: usize,
    pub category: String,
    pub embedding: Vec<f64>,
    pub bbox3d: Corners,
    pub last_update_t: u64,
    pub provenance: Vec<Provenance>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMemory {
    pub created_t: u64,
    pub tokens: Vec<MemoryToken>,
}

impl SceneMemory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next unused id; ids are never reused.
    pub fn next_id(&self) -> usize {
        self.tokens.iter().map(|t| t.id + 1).max().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Option<&MemoryToken> {
        self.tokens.iter().find(|t| t.id == id)
    }

    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.tokens.iter().map(|t| t.category.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstructConfig {
    /// Manipulation-phase sampling interval `N`.
    pub interval: usize,
    pub tau: f64,
    pub lambda: f64,
}

impl Default for ConstructConfig {
    fn default() -> Self {
        Self { interval: 20, tau: 0.5, lambda: 0.5 }
    }
}

impl ConstructConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("interval N must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !self.tau.is_finite() {
            return Err(Error::Config("tau must be finite".into()));
        }
        Ok(())
    }
}

/// Overview sampling step `max(1, ⌊N/3⌋)`.
pub fn overview_interval(n: usize) -> usize {
    (n / 3).max(1)
}

/// Keeps frames whose list index is a multiple of the overview interval.
pub fn sample_overview(frames: &[FrameRecord], n: usize) -> Result<Vec<FrameRecord>> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let step = overview_interval(n);
    Ok(frames.iter().step_by(step).cloned().collect())
}

/// `lambda·cos(f_a, f_b) + (1 − lambda)·IoU3D(b_a, b_b)`.
pub fn pair_similarity(a: &InstanceTriplet, b: &InstanceTriplet, lambda: f64) -> Result<f64> {
    if a.category != b.category {
        return Err(Error::CategoryMismatch(a.category.clone(), b.category.clone()));
    }
    similarity(&a.embedding, &a.bbox3d, &b.embedding, &b.bbox3d, lambda)
}

/// Category-agnostic core of [`pair_similarity`].
pub fn similarity(fa: &[f64], ba: &Corners, fb: &[f64], bb: &Corners, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * cosine(fa, fb)? + (1.0 - lambda) * iou3d(ba, bb))
}

/// Greedy agglomerative association within one category. Returns groups of
/// input indices; each group is sorted by provenance and groups are ordered by
/// their earliest provenance.
pub fn associate_class(instances: &[InstanceTriplet], tau: f64, lambda: f64) -> Result<Vec<Vec<usize>>> {
    if let Some(first) = instances.first() {
        if let Some(other) = instances.iter().find(|t| t.category != first.category) {
            return Err(Error::CategoryMismatch(first.category.clone(), other.category.clone()));
        }
    }
    let order_key = |i: usize| (instances[i].key(), i);
    let mut groups: Vec<Vec<usize>> = (0..instances.len()).map(|i| vec![i]).collect();
    let mut reps: Vec<InstanceTriplet> = instances.to_vec();
    let n = instances.len();
    // Pairwise similarity between current groups; recomputed only for the merged row.
    let mut sim = vec![vec![f64::NEG_INFINITY; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = pair_similarity(&reps[i], &reps[j], lambda)?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let mut alive: Vec<bool> = vec![true; n];
    // Each group is identified by its earliest member; ties between equal
    // similarities go to the pair with the smallest identifying keys.
    let mut keys: Vec<(Provenance, usize)> = (0..n).map(order_key).collect();
    loop {
        let mut best: Option<(f64, (usize, usize))> = None;
        for i in 0..n {
            for j in i + 1..n {
                if !(alive[i] && alive[j]) || sim[i][j] < tau {
                    continue;
                }
                let pair = if keys[i] < keys[j] { (i, j) } else { (j, i) };
                let better = match best {
                    None => true,
                    Some((s, (a, b))) => {
                        sim[i][j] > s || (sim[i][j] == s && (keys[pair.0], keys[pair.1]) < (keys[a], keys[b]))
                    }
                };
                if better {
                    best = Some((sim[i][j], pair));
                }
            }
        }
        let Some((_, (keep, gone))) = best else { break };
        let moved = std::mem::take(&mut groups[gone]);
        groups[keep].extend(moved);
        groups[keep].sort_by_key(|&i| order_key(i));
        keys[keep] = keys[keep].min(keys[gone]);
        alive[gone] = false;
        let members: Vec<&InstanceTriplet> = groups[keep].iter().map(|&i| &instances[i]).collect();
        reps[keep] = mean_triplet(&members, false);
        for j in 0..n {
            if j != keep && alive[j] {
                let s = pair_similarity(&reps[keep], &reps[j], lambda)?;
                sim[keep][j] = s;
                sim[j][keep] = s;
            }
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_iter().zip(alive).filter(|(_, a)| *a).map(|(g, _)| g).collect();
    out.sort_by_key(|g| order_key(g[0]));
    Ok(out)
}

/// Mean embedding and mean corners over `members`, accumulated in provenance
/// order so the result does not depend on input order.
fn mean_triplet(members: &[&InstanceTriplet], renormalize: bool) -> InstanceTriplet {
    let mut sorted: Vec<&InstanceTriplet> = members.to_vec();
    sorted.sort_by_key(|t| t.key());
    let n = sorted.len() as f64;
    let dim = sorted[0].embedding.len();
    let mut emb = vec![0.0; dim];
    let mut corners = [[0.0; 3]; 8];
    for t in &sorted {
        for (e, v) in emb.iter_mut().zip(&t.embedding) {
            *e += v;
        }
        for (c, s) in corners.iter_mut().zip(&t.bbox3d) {
            for a in 0..3 {
                c[a] += s[a];
            }
        }
    }
    emb.iter_mut().for_each(|e| *e /= n);
    corners.iter_mut().flatten().for_each(|c| *c /= n);
    let mut provenance: Vec<Provenance> = sorted.iter().flat_map(|t| t.provenance.iter().copied()).collect();
    provenance.sort_unstable();
    InstanceTriplet {
        embedding: if renormalize { normalized(&emb) } else { emb },
        category: sorted[0].category.clone(),
        bbox3d: corners,
        support_count: sorted.iter().map(|t| t.support_count).sum(),
        provenance,
    }
}

/// Averages a group into one triplet with a unit-length embedding.
pub fn fuse_group(group: &[&InstanceTriplet]) -> Result<InstanceTriplet> {
    if group.is_empty() {
        return Err(Error::InvalidArgument("cannot fuse an empty group".into()));
    }
    Ok(mean_triplet(group, true))
}

pub fn extract_triplets(frame: &FrameRecord) -> Vec<InstanceTriplet> {
    frame
        .detections
        .iter()
        .enumerate()
        .map(|(j, d)| InstanceTriplet {
            embedding: d.embedding.clone(),
            category: d.category.clone(),
            bbox3d: d.bbox3d_global,
            support_count: 1,
            provenance: vec![(frame.t, j)],
        })
        .collect()
}

/// Token embeddings `phi_mem(f) + phi_refine_pos(phi_pos(b))` for a batch.
pub fn token_embeddings(tris: &[InstanceTriplet], nets: &MlpStack) -> Result<Matrix> {
    if tris.is_empty() {
        return Ok(Matrix::zeros(0, EMBED_DIM));
    }
    let mut f = Matrix::zeros(tris.len(), EMBED_DIM);
    let mut b = Matrix::zeros(tris.len(), BOX_DIM);
    for (i, t) in tris.iter().enumerate() {
        if t.embedding.len() != EMBED_DIM {
            return Err(Error::Shape(format!("embedding of length {} (expected {EMBED_DIM})", t.embedding.len())));
        }
        f.row_mut(i).copy_from_slice(&t.embedding);
        b.row_mut(i).copy_from_slice(&flatten_corners(&t.bbox3d));
    }
    nets.phi_mem.forward(&f)?.add(&nets.position_embedding(&b)?)
}

/// Builds tokens for `tris`, assigning ids from `first_id` upward.
pub fn make_tokens(tris: &[InstanceTriplet], nets: &MlpStack, t: u64, first_id: usize) -> Result<Vec<MemoryToken>> {
    let m = token_embeddings(tris, nets)?;
    Ok(tris
        .iter()
        .enumerate()
        .map(|(i, tri)| MemoryToken {
            id: first_id + i,
            category: tri.category.clone(),
            embedding: m.row(i).to_vec(),
            bbox3d: tri.bbox3d,
            last_update_t: t,
            provenance: tri.provenance.clone(),
        })
        .collect())
}

/// Single-triplet form of [`make_tokens`] (id 0).
pub fn make_token(tri: &InstanceTriplet, nets: &MlpStack, t: u64) -> Result<MemoryToken> {
    Ok(make_tokens(std::slice::from_ref(tri), nets, t, 0)?.remove(0))
}

/// Pseudo-instance used when a scan yields no detections.
pub fn placeholder_triplet() -> InstanceTriplet {
    InstanceTriplet {
        embedding: category_prototype(PLACEHOLDER_CATEGORY),
        category: PLACEHOLDER_CATEGORY.to_string(),
        bbox3d: Aabb::from_center([0.0; 3], [0.5; 3]).corners(),
        support_count: 1,
        provenance: Vec::new(),
    }
}

/// Associates and fuses triplets class by class. Output is ordered by
/// category name, then by earliest provenance within a category.
pub fn fuse_instances(triplets: Vec<InstanceTriplet>, tau: f64, lambda: f64) -> Result<Vec<InstanceTriplet>> {
    let mut by_cat: BTreeMap<String, Vec<InstanceTriplet>> = BTreeMap::new();
    for t in triplets {
        by_cat.entry(t.category.clone()).or_default().push(t);
    }
    let mut fused = Vec::new();
    for insts in by_cat.values() {
        for g in associate_class(insts, tau, lambda)? {
            let members: Vec<&InstanceTriplet> = g.iter().map(|&i| &insts[i]).collect();
            fused.push(fuse_group(&members)?);
        }
    }
    Ok(fused)
}

/// Builds the overview memory from already-sampled frames.
pub fn build_memory(
    frames: &[FrameRecord],
    nets: &MlpStack,
    cfg: &ConstructConfig,
    created_t: u64,
) -> Result<SceneMemory> {
    cfg.validate()?;
    let triplets: Vec<InstanceTriplet> = frames.iter().flat_map(extract_triplets).collect();
    let mut fused = fuse_instances(triplets, cfg.tau, cfg.lambda)?;
    if fused.is_empty() {
        fused.push(placeholder_triplet());
    }
    Ok(SceneMemory { created_t, tokens: make_tokens(&fused, nets, created_t, 0)? })
}
