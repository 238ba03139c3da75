//! Per-step memory refinement: observation tokens, one-to-one class-wise
//! matching, gated EMA update, append and retention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::construct::{extract_triplets, make_tokens, similarity, MemoryToken, SceneMemory};
use crate::error::{Error, Result};
use crate::geometry::Corners;
use crate::nets::{MlpStack, EMBED_DIM};
use crate::numkern::ops::sigmoid_scalar;
use crate::numkern::Matrix;
use crate::scene::FrameRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "variant", content = "alpha")]
pub enum UpdateStrategy {
    /// `α = g ⊙ s`
    #[default]
    Full,
    SimOnly,
    GateOnly,
    /// Constant `α` broadcast to every coordinate.
    SimEma(f64),
}

impl UpdateStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UpdateStrategy::SimEma(a) if !(a > 0.0 && a < 1.0) => {
                Err(Error::Config(format!("sim_ema alpha {a} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    /// `(memory token id, observation index)`
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_obs: Vec<usize>,
    pub unmatched_mem: Vec<usize>,
}

/// One line of the refinement audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineAudit {
    pub t: u64,
    /// `(memory id, observation index, mean α)`
    pub matched: Vec<(usize, usize, f64)>,
    pub appended: Vec<usize>,
    pub retained_count: usize,
}

/// Observation tokens for the current frame; token `j` has id `j`.
pub fn tokenize_observation(frame: &FrameRecord, nets: &MlpStack) -> Result<Vec<MemoryToken>> {
    make_tokens(&extract_triplets(frame), nets, frame.t, 0)
}

/// Greedy one-to-one assignment over a row-major similarity table: entries
/// `>= tau` are taken in descending order, ties broken by `(row, col)`.
pub fn greedy_assign(sim: &[Vec<f64>], tau: f64) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (r, row) in sim.iter().enumerate() {
        for (c, &s) in row.iter().enumerate() {
            if s >= tau {
                cand.push((s, r, c));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let cols = sim.first().map_or(0, |r| r.len());
    let mut row_used = vec![false; sim.len()];
    let mut col_used = vec![false; cols];
    let mut out = Vec::new();
    for (_, r, c) in cand {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            out.push((r, c));
        }
    }
    out.sort_unstable();
    out
}

/// Similarity used for refinement matching. A zero embedding (zero-weight
/// networks) contributes appearance similarity 0 instead of failing.
fn token_similarity(fa: &[f64], ba: &Corners, fb: &[f64], bb: &Corners, lambda: f64) -> Result<f64> {
    match similarity(fa, ba, fb, bb, lambda) {
        Err(Error::ZeroNorm) => similarity(&[1.0, 0.0], ba, &[0.0, 1.0], bb, lambda),
        other => other,
    }
}

/// Class-wise greedy one-to-one matching of observations to memory.
pub fn match_step(mem: &SceneMemory, obs: &[MemoryToken], tau: f64, lambda: f64) -> Result<MatchSet> {
    let mut mem_by_cat: BTreeMap<&str, Vec<&MemoryToken>> = BTreeMap::new();
    for tok in &mem.tokens {
        mem_by_cat.entry(tok.category.as_str()).or_default().push(tok);
    }
    let mut obs_by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, o) in obs.iter().enumerate() {
        obs_by_cat.entry(o.category.as_str()).or_default().push(j);
    }
    let mut pairs = Vec::new();
    for (cat, obs_idx) in &obs_by_cat {
        let Some(mems) = mem_by_cat.get_mut(cat) else { continue };
        mems.sort_by_key(|t| t.id);
        let table = mems
            .iter()
            .map(|m| {
                obs_idx
                    .iter()
                    .map(|&j| token_similarity(&m.embedding, &m.bbox3d, &obs[j].embedding, &obs[j].bbox3d, lambda))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (r, c) in greedy_assign(&table, tau) {
            pairs.push((mems[r].id, obs_idx[c]));
        }
    }
    pairs.sort_unstable();
    let matched_obs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let matched_mem: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    Ok(MatchSet {
        unmatched_obs: (0..obs.len()).filter(|j| !matched_obs.contains(j)).collect(),
        unmatched_mem: mem.tokens.iter().map(|t| t.id).filter(|id| !matched_mem.contains(id)).collect(),
        pairs,
    })
}

fn check_dims(m: &Matrix, what: &str) -> Result<()> {
    if m.cols() != EMBED_DIM {
        return Err(Error::Shape(format!("{what} has {} columns (expected {EMBED_DIM})", m.cols())));
    }
    Ok(())
}

/// Similarity score `s = σ(phi_sim([prev, obs, prev − obs]))` and gate
/// `g = σ(phi_fuse([prev, obs]))`, one row per pair.
pub fn alpha_parts(prev: &Matrix, obs: &Matrix, nets: &MlpStack) -> Result<(Matrix, Matrix)> {
    check_dims(prev, "prev")?;
    check_dims(obs, "obs")?;
    let diff = prev.zip_with(obs, |a, b| a - b)?;
    let s = nets.phi_sim.forward(&Matrix::hconcat(&[prev, obs, &diff])?)?.map(sigmoid_scalar);
    let g = nets.phi_fuse.forward(&Matrix::hconcat(&[prev, obs])?)?.map(sigmoid_scalar);
    Ok((s, g))
}

/// Batched update coefficients, one row per `(prev, obs)` pair.
pub fn alpha_batch(prev: &Matrix, obs: &Matrix, nets: &MlpStack, strat: UpdateStrategy) -> Result<Matrix> {
    strat.validate()?;
    if let UpdateStrategy::SimEma(a) = strat {
        check_dims(prev, "prev")?;
        check_dims(obs, "obs")?;
        return Ok(Matrix::filled(prev.rows(), EMBED_DIM, a));
    }
    let (s, g) = alpha_parts(prev, obs, nets)?;
    Ok(match strat {
        UpdateStrategy::Full => g.hadamard(&s)?,
        UpdateStrategy::SimOnly => s,
        UpdateStrategy::GateOnly => g,
        UpdateStrategy::SimEma(_) => unreachable!(),
    })
}

pub fn alpha(prev: &[f64], obs: &[f64], nets: &MlpStack, strat: UpdateStrategy) -> Result<Vec<f64>> {
    Ok(alpha_batch(&Matrix::row_vector(prev), &Matrix::row_vector(obs), nets, strat)?.into_data())
}

/// `α ⊙ obs + (1 − α) ⊙ prev`, kept inside `[min(prev, obs), max(prev, obs)]`
/// per coordinate.
pub fn ema_update(prev: &[f64], obs: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != obs.len() || prev.len() != alpha.len() {
        return Err(Error::Shape(format!(
            "ema_update lengths prev={} obs={} alpha={}",
            prev.len(),
            obs.len(),
            alpha.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::InvalidArgument(format!("alpha {a} outside (0, 1)")));
    }
    Ok(prev.iter().zip(obs).zip(alpha).map(|((&p, &o), &a)| convex(p, o, a)).collect())
}

fn convex(p: f64, o: f64, a: f64) -> f64 {
    (a * o + (1.0 - a) * p).clamp(p.min(o), p.max(o))
}

fn ema_corners(prev: &Corners, obs: &Corners, w: f64) -> Corners {
    let mut out = *prev;
    for (c, (p, o)) in out.iter_mut().zip(prev.iter().zip(obs)) {
        for a in 0..3 {
            c[a] = convex(p[a], o[a], w);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub strategy: UpdateStrategy,
    pub tau: f64,
    pub lambda: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { strategy: UpdateStrategy::Full, tau: 0.5, lambda: 0.5 }
    }
}

/// One refinement step against the live frame, stamped `t`.
pub fn refine(
    mem: &SceneMemory,
    frame: &FrameRecord,
    nets: &MlpStack,
    cfg: &RefineConfig,
    t: u64,
) -> Result<(SceneMemory, RefineAudit)> {
    let obs = tokenize_observation(frame, nets)?;
    refine_with_tokens(mem, &obs, nets, cfg, t)
}

/// [`refine`] on pre-computed observation tokens.
pub fn refine_with_tokens(
    mem: &SceneMemory,
    obs: &[MemoryToken],
    nets: &MlpStack,
    cfg: &RefineConfig,
    t: u64,
) -> Result<(SceneMemory, RefineAudit)> {
    let ms = match_step(mem, obs, cfg.tau, cfg.lambda)?;
    let mut next = mem.clone();
    let mut matched = Vec::with_capacity(ms.pairs.len());
    if !ms.pairs.is_empty() {
        let slots: Vec<usize> = ms
            .pairs
            .iter()
            .map(|(id, _)| next.tokens.iter().position(|tok| tok.id == *id).expect("matched id exists"))
            .collect();
        for &k in &slots {
            if next.tokens[k].last_update_t >= t {
                return Err(Error::InvalidArgument(format!(
                    "refine at t={t} but token {} was updated at t={}",
                    next.tokens[k].id, next.tokens[k].last_update_t
                )));
            }
        }
        let prev_rows: Vec<&[f64]> = slots.iter().map(|&k| next.tokens[k].embedding.as_slice()).collect();
        let obs_rows: Vec<&[f64]> = ms.pairs.iter().map(|&(_, j)| obs[j].embedding.as_slice()).collect();
        let a = alpha_batch(&Matrix::from_rows(&prev_rows)?, &Matrix::from_rows(&obs_rows)?, nets, cfg.strategy)?;
        for (row, (&k, &(id, j))) in slots.iter().zip(&ms.pairs).enumerate() {
            let alpha = a.row(row);
            let tok = &mut next.tokens[k];
            tok.embedding = ema_update(&tok.embedding, &obs[j].embedding, alpha)?;
            let w = alpha.iter().sum::<f64>() / alpha.len() as f64;
            tok.bbox3d = ema_corners(&tok.bbox3d, &obs[j].bbox3d, w);
            tok.last_update_t = t;
            tok.provenance.extend(obs[j].provenance.iter().copied());
            matched.push((id, j, w));
        }
    }
    let mut appended = Vec::with_capacity(ms.unmatched_obs.len());
    let mut id = next.next_id();
    for &j in &ms.unmatched_obs {
        let mut tok = obs[j].clone();
        tok.id = id;
        tok.last_update_t = t;
        appended.push(id);
        next.tokens.push(tok);
        id += 1;
    }
    let audit = RefineAudit { t, matched, appended, retained_count: ms.unmatched_mem.len() };
    Ok((next, audit))
}
