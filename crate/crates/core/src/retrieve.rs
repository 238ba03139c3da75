//! Memory retrieval: alignment into query space, single-head cross-attention
//! with queries attending over memory, and a residual multi-head
//! self-attention stack over the result.

use serde::{Deserialize, Serialize};

use crate::construct::SceneMemory;
use crate::error::{shape_err, Error, Result};
use crate::nets::MlpStack;
use crate::numkern::ops::{layer_norm_rows, softmax_rows, sum_order_invariant, LN_EPS};
use crate::numkern::{Matrix, Rng, ScalarFn, Tape, Var};
use crate::scene::category_prototype;

/// Stacks every token embedding and applies `phi_align` row-wise.
pub fn align_memory(mem: &SceneMemory, nets: &MlpStack) -> Result<Matrix> {
    if mem.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let rows: Vec<&[f64]> = mem.tokens.iter().map(|t| t.embedding.as_slice()).collect();
    nets.phi_align.forward(&Matrix::from_rows(&rows)?)
}

/// `A·V` where every output entry is summed in an order that does not depend
/// on the row order of `v`.
fn mix_rows(a: &Matrix, v: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), v.cols());
    let mut terms = Vec::with_capacity(v.rows());
    for i in 0..a.rows() {
        for j in 0..v.cols() {
            terms.clear();
            terms.extend((0..v.rows()).map(|k| a.get(i, k) * v.get(k, j)));
            out.set(i, j, sum_order_invariant(&mut terms));
        }
    }
    out
}

/// `softmax(Q·Kᵀ/√d)·V` with `K = V = kv`. Returns `(output, attention)`.
pub fn cross_attend(q: &Matrix, kv: &Matrix) -> Result<(Matrix, Matrix)> {
    if kv.rows() == 0 {
        return Err(Error::EmptyMemory);
    }
    if q.rows() == 0 {
        return Err(shape_err("no query rows"));
    }
    if q.cols() != kv.cols() {
        return Err(shape_err(format!("query width {} vs memory width {}", q.cols(), kv.cols())));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let attn = softmax_rows(&q.matmul_t(kv)?.scale(scale));
    Ok((mix_rows(&attn, kv), attn))
}

/// Records [`cross_attend`] on a tape; gradients flow to both operands.
pub fn record_cross_attend<'t>(tape: &mut Tape<'t>, q: Var, kv: Var) -> Result<Var> {
    let d = tape.value(q).cols();
    let scores = tape.matmul(q, kv, true, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax(scores);
    tape.matmul(attn, kv, false, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "seed")]
pub enum AttentionMode {
    Seeded(u64),
    /// Identity query/key/value slices and a zero output projection.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mode: AttentionMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { layers: 3, heads: 4, head_dim: 16, mode: AttentionMode::Seeded(7) }
    }
}

impl AttentionConfig {
    /// 32 heads of 64 dims over 2048-wide tokens.
    pub fn full_scale(mode: AttentionMode) -> Self {
        Self { layers: 3, heads: 32, head_dim: 64, mode }
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("layers, heads and head_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    wq: Vec<Matrix>,
    wk: Vec<Matrix>,
    wv: Vec<Matrix>,
    wo: Matrix,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    zero_head: Vec<f64>,
    zero_model: Vec<f64>,
    head_dim: usize,
}

impl AttentionBlock {
    fn new(heads: usize, head_dim: usize, rng: Option<&mut Rng>) -> Result<Self> {
        let d = heads * head_dim;
        let (wq, wk, wv, wo) = match rng {
            Some(r) => {
                let bound = 1.0 / (d as f64).sqrt();
                let mut draw = |rows: usize, cols: usize| {
                    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.uniform(-bound, bound)).collect())
                };
                let mut per_head = || (0..heads).map(|_| draw(d, head_dim)).collect::<Result<Vec<_>>>();
                let (q, k, v) = (per_head()?, per_head()?, per_head()?);
                (q, k, v, draw(d, d)?)
            }
            None => {
                let eye = Matrix::identity(d);
                let slices: Vec<Matrix> = (0..heads).map(|h| eye.columns(h * head_dim, head_dim)).collect();
                (slices.clone(), slices.clone(), slices, Matrix::zeros(d, d))
            }
        };
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            zero_head: vec![0.0; head_dim],
            zero_model: vec![0.0; d],
            head_dim,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wo.rows()
    }

    /// `x + MHA(LN(x))·W_o`
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_model() {
            return Err(shape_err(format!("block input width {} (expected {})", x.cols(), self.d_model())));
        }
        let h = layer_norm_rows(x, &self.gamma, &self.beta, LN_EPS)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.wq.len());
        for ((wq, wk), wv) in self.wq.iter().zip(&self.wk).zip(&self.wv) {
            let q = h.matmul(wq)?;
            let k = h.matmul(wk)?;
            let v = h.matmul(wv)?;
            let a = softmax_rows(&q.matmul_t(&k)?.scale(scale));
            heads.push(a.matmul(&v)?);
        }
        let refs: Vec<&Matrix> = heads.iter().collect();
        x.add(&Matrix::hconcat(&refs)?.matmul(&self.wo)?)
    }

    pub fn record<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, &self.gamma, &self.beta, LN_EPS)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.wq.len());
        for ((wq, wk), wv) in self.wq.iter().zip(&self.wk).zip(&self.wv) {
            let q = tape.linear(h, wq, &self.zero_head)?;
            let k = tape.linear(h, wk, &self.zero_head)?;
            let v = tape.linear(h, wv, &self.zero_head)?;
            let s = tape.matmul(q, k, true, scale)?;
            let a = tape.softmax(s);
            heads.push(tape.matmul(a, v, false, 1.0)?);
        }
        let cat = tape.concat(&heads)?;
        let out = tape.linear(cat, &self.wo, &self.zero_model)?;
        tape.add(x, out)
    }
}

/// Residual self-attention stack without feed-forward sublayers.
#[derive(Clone, Debug)]
pub struct Booster {
    pub cfg: AttentionConfig,
    pub blocks: Vec<AttentionBlock>,
}

impl Booster {
    pub fn new(cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = match cfg.mode {
            AttentionMode::Seeded(s) => Some(Rng::new(s)),
            AttentionMode::Identity => None,
        };
        let blocks = (0..cfg.layers)
            .map(|_| {
                let mut child = rng.as_mut().map(Rng::fork);
                AttentionBlock::new(cfg.heads, cfg.head_dim, child.as_mut())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, blocks })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

pub fn booster_transformer(x: &Matrix, booster: &Booster) -> Result<Matrix> {
    booster.forward(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub distractors: usize,
    /// Multiplier on the aligned query rows; `None` means `5·√d_vlm`.
    pub scale: Option<f64>,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { distractors: 2, scale: None }
    }
}

/// Query rows: the target category's prototype, then fixed distractor
/// prototypes, each passed through `phi_align` and scaled.
pub fn synthesize_queries(category: &str, nets: &MlpStack, qcfg: &QueryConfig) -> Result<Matrix> {
    let mut rows = vec![category_prototype(category)];
    rows.extend((0..qcfg.distractors).map(|i| category_prototype(&format!("distractor:{i}"))));
    let aligned = nets.phi_align.forward(&Matrix::from_rows(&rows)?)?;
    let scale = qcfg.scale.unwrap_or(5.0 * (nets.d_vlm as f64).sqrt());
    Ok(aligned.scale(scale))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub x_boost: Matrix,
    pub attention: Matrix,
    pub top1_token_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDump {
    pub query_category: String,
    pub attention: Vec<Vec<f64>>,
    pub top1_token_id: usize,
}

impl Retrieval {
    pub fn dump(&self, query_category: &str) -> RetrievalDump {
        RetrievalDump {
            query_category: query_category.to_string(),
            attention: self.attention.iter_rows().map(<[f64]>::to_vec).collect(),
            top1_token_id: self.top1_token_id,
        }
    }
}

/// Cross-attends synthesized queries for `category` over the aligned memory
/// and boosts the result. `top1_token_id` is the argmax of the target row
/// (first index on ties).
pub fn retrieve(
    mem: &SceneMemory,
    category: &str,
    nets: &MlpStack,
    booster: &Booster,
    qcfg: &QueryConfig,
) -> Result<Retrieval> {
    if mem.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if !mem.tokens.iter().any(|t| t.category == category) {
        return Err(Error::UnknownCategory { category: category.to_string(), known: mem.categories() });
    }
    if booster.cfg.d_model() != nets.d_vlm {
        return Err(Error::Config(format!(
            "booster width {} does not match d_vlm {}",
            booster.cfg.d_model(),
            nets.d_vlm
        )));
    }
    let kv = align_memory(mem, nets)?;
    let q = synthesize_queries(category, nets, qcfg)?;
    let (mixed, attention) = cross_attend(&q, &kv)?;
    let x_boost = booster.forward(&mixed)?;
    let row = attention.row(0);
    let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
    Ok(Retrieval { x_boost, attention, top1_token_id: mem.tokens[best].id })
}

/// Scalar probe `r · mean_rows(cross_attend(q, kv))` as a function of `q`.
pub struct CrossAttentionProbe {
    pub kv: Matrix,
    pub n_queries: usize,
    pub projection: Matrix,
}

impl ScalarFn for CrossAttentionProbe {
    fn input_shape(&self) -> (usize, usize) {
        (self.n_queries, self.kv.cols())
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        let q = Matrix::from_vec(self.n_queries, self.kv.cols(), x.to_vec())?;
        let (out, _) = cross_attend(&q, &self.kv)?;
        Ok(out.mean_rows().matmul(&self.projection)?.get(0, 0))
    }

    fn record<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<Var> {
        let kv = tape.leaf(self.kv.clone());
        let out = record_cross_attend(tape, x, kv)?;
        let pooled = tape.mean_pool(out);
        let r = tape.leaf(self.projection.clone());
        tape.matmul(pooled, r, false, 1.0)
    }
}

/// Scalar probe over one self-attention block, as a function of its input.
pub struct BlockProbe<'b> {
    pub block: &'b AttentionBlock,
    pub n_rows: usize,
    pub projection: Matrix,
}

impl ScalarFn for BlockProbe<'_> {
    fn input_shape(&self) -> (usize, usize) {
        (self.n_rows, self.block.d_model())
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        let m = Matrix::from_vec(self.n_rows, self.block.d_model(), x.to_vec())?;
        Ok(self.block.forward(&m)?.mean_rows().matmul(&self.projection)?.get(0, 0))
    }

    fn record<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<Var> {
        let out = self.block.record(tape, x)?;
        let pooled = tape.mean_pool(out);
        let r = tape.leaf(self.projection.clone());
        tape.matmul(pooled, r, false, 1.0)
    }
}

/// Unit-scale Gaussian projection for the probes above.
pub fn probe_projection(d: usize, rng: &mut Rng) -> Matrix {
    let s = 1.0 / (d as f64).sqrt();
    Matrix::from_vec(d, 1, (0..d).map(|_| s * rng.gaussian()).collect()).expect("d x 1")
}
