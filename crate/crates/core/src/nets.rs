//! Feed-forward networks for box embedding, memory projection, the gated
//! update scores and memory-to-query alignment.
//!
//! Layer stacks (LN = LayerNorm, L = Linear, G = GELU):
//!
//! | network          | layers                                                        |
//! |------------------|---------------------------------------------------------------|
//! | `phi_pos`        | LN 24, L 24→768, G, L 768→768, G, L 768→384, G, LN 384        |
//! | `phi_refine_pos` | LN 384, L 384→768, G, L 768→768, G, L 768→384, G, LN 384      |
//! | `phi_mem`        | LN 384, L 384→768, G, L 768→384, G, LN 384                    |
//! | `phi_sim`        | LN 1152, L 1152→768, G, L 768→384, G, LN 384                  |
//! | `phi_fuse`       | LN 768, L 768→384, G, L 384→384, G, LN 384                    |
//! | `phi_align`      | LN 384, L 384→768, G, L 768→d_vlm, G, LN d_vlm                |
//!
//! Weights are never trained. [`WeightMode::Seeded`] draws every linear
//! weight and bias from `U(-1/√fan_in, 1/√fan_in)`; [`WeightMode::Zero`]
//! zeroes them; [`WeightMode::Identity`] zeroes them and additionally makes
//! `phi_mem` and `phi_align` pass their input through unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numkern::ops::{gelu_scalar, layer_norm_rows, LN_EPS};
use crate::numkern::{Matrix, Rng, ScalarFn, Tape, Var};

pub const EMBED_DIM: usize = 384;
pub const BOX_DIM: usize = 24;
pub const HIDDEN_DIM: usize = 768;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "seed")]
pub enum WeightMode {
    Seeded(u64),
    Zero,
    Identity,
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::Seeded(42)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Norm(usize),
    Linear(usize, usize),
    Gelu,
}

use LayerSpec::{Gelu as G, Linear as L, Norm as N};

const PHI_POS: &[LayerSpec] = &[N(24), L(24, 768), G, L(768, 768), G, L(768, 384), G, N(384)];
const PHI_REFINE_POS: &[LayerSpec] = &[N(384), L(384, 768), G, L(768, 768), G, L(768, 384), G, N(384)];
const PHI_MEM: &[LayerSpec] = &[N(384), L(384, 768), G, L(768, 384), G, N(384)];
const PHI_SIM: &[LayerSpec] = &[N(1152), L(1152, 768), G, L(768, 384), G, N(384)];
const PHI_FUSE: &[LayerSpec] = &[N(768), L(768, 384), G, L(384, 384), G, N(384)];

fn phi_align_spec(d_vlm: usize) -> Vec<LayerSpec> {
    vec![N(384), L(384, 768), G, L(768, d_vlm), G, N(d_vlm)]
}

#[derive(Clone, Debug)]
enum Layer {
    Norm { gamma: Vec<f64>, beta: Vec<f64> },
    Linear { weight: Matrix, bias: Vec<f64> },
    Gelu,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    name: &'static str,
    layers: Vec<Layer>,
    in_dim: usize,
    out_dim: usize,
    passthrough: bool,
}

impl Mlp {
    /// Builds a stack from `spec`, checking that consecutive layer shapes chain.
    pub fn new(name: &'static str, spec: &[LayerSpec], rng: Option<&mut Rng>, passthrough: bool) -> Result<Self> {
        let in_dim = match spec.first() {
            Some(LayerSpec::Norm(d)) | Some(LayerSpec::Linear(d, _)) => *d,
            _ => return Err(shape_err(format!("{name}: must start with a norm or linear layer"))),
        };
        let mut width = in_dim;
        let mut rng = rng;
        let mut layers = Vec::with_capacity(spec.len());
        for s in spec {
            match *s {
                LayerSpec::Norm(d) => {
                    if d != width {
                        return Err(shape_err(format!("{name}: LayerNorm {d} after width {width}")));
                    }
                    layers.push(Layer::Norm { gamma: vec![1.0; d], beta: vec![0.0; d] });
                }
                LayerSpec::Linear(i, o) => {
                    if i != width {
                        return Err(shape_err(format!("{name}: Linear {i}->{o} after width {width}")));
                    }
                    let (weight, bias) = match rng.as_deref_mut() {
                        Some(r) => {
                            let bound = 1.0 / (i as f64).sqrt();
                            let w = (0..i * o).map(|_| r.uniform(-bound, bound)).collect();
                            let b = (0..o).map(|_| r.uniform(-bound, bound)).collect();
                            (Matrix::from_vec(i, o, w)?, b)
                        }
                        None => (Matrix::zeros(i, o), vec![0.0; o]),
                    };
                    layers.push(Layer::Linear { weight, bias });
                    width = o;
                }
                LayerSpec::Gelu => layers.push(Layer::Gelu),
            }
        }
        if passthrough && in_dim != width {
            return Err(shape_err(format!(
                "{name}: identity passthrough needs equal in/out dims, got {in_dim}->{width}"
            )));
        }
        Ok(Self { name, layers, in_dim, out_dim: width, passthrough })
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `(in, out)` of each linear layer, in order.
    pub fn linear_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear { weight, .. } => Some(weight.dims()),
                _ => None,
            })
            .collect()
    }

    /// Widths of each LayerNorm, in order.
    pub fn norm_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Norm { gamma, .. } => Some(gamma.len()),
                _ => None,
            })
            .collect()
    }

    /// Batched forward; each row of `x` is one input.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim {
            return Err(shape_err(format!("{}: input width {} (expected {})", self.name, x.cols(), self.in_dim)));
        }
        if self.passthrough {
            return Ok(x.clone());
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Norm { gamma, beta } => layer_norm_rows(&h, gamma, beta, LN_EPS)?,
                Layer::Linear { weight, bias } => {
                    let mut y = h.matmul(weight)?;
                    y.add_row_broadcast(bias);
                    y
                }
                Layer::Gelu => h.map(gelu_scalar),
            };
        }
        Ok(h)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(x))?.into_data())
    }

    /// Records the forward pass on a tape.
    pub fn record<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_dim {
            return Err(shape_err(format!("{}: recorded input width", self.name)));
        }
        if self.passthrough {
            return Ok(x);
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Norm { gamma, beta } => tape.layer_norm(h, gamma, beta, LN_EPS)?,
                Layer::Linear { weight, bias } => tape.linear(h, weight, bias)?,
                Layer::Gelu => tape.gelu(h),
            };
        }
        Ok(h)
    }
}

/// The full set of networks used by construction, refinement and retrieval.
#[derive(Clone, Debug)]
pub struct MlpStack {
    pub mode: WeightMode,
    pub d_vlm: usize,
    pub phi_pos: Mlp,
    pub phi_refine_pos: Mlp,
    pub phi_mem: Mlp,
    pub phi_sim: Mlp,
    pub phi_fuse: Mlp,
    pub phi_align: Mlp,
}

impl MlpStack {
    pub fn new(mode: WeightMode, d_vlm: usize) -> Result<Self> {
        if d_vlm == 0 {
            return Err(Error::Config("d_vlm must be positive".into()));
        }
        if mode == WeightMode::Identity && d_vlm != EMBED_DIM {
            return Err(Error::Config(format!("identity weights need d_vlm = {EMBED_DIM}, got {d_vlm}")));
        }
        let mut root = match mode {
            WeightMode::Seeded(seed) => Some(Rng::new(seed)),
            _ => None,
        };
        let identity = mode == WeightMode::Identity;
        let mut build = |name, spec: &[LayerSpec], passthrough| {
            let mut child = root.as_mut().map(Rng::fork);
            Mlp::new(name, spec, child.as_mut(), passthrough)
        };
        let stack = Self {
            mode,
            d_vlm,
            phi_pos: build("phi_pos", PHI_POS, false)?,
            phi_refine_pos: build("phi_refine_pos", PHI_REFINE_POS, false)?,
            phi_mem: build("phi_mem", PHI_MEM, identity)?,
            phi_sim: build("phi_sim", PHI_SIM, false)?,
            phi_fuse: build("phi_fuse", PHI_FUSE, false)?,
            phi_align: build("phi_align", &phi_align_spec(d_vlm), identity)?,
        };
        stack.assert_architecture()?;
        Ok(stack)
    }

    pub fn seeded(seed: u64, d_vlm: usize) -> Result<Self> {
        Self::new(WeightMode::Seeded(seed), d_vlm)
    }

    fn assert_architecture(&self) -> Result<()> {
        let expect = |m: &Mlp, input: usize, output: usize| -> Result<()> {
            if m.in_dim() != input || m.out_dim() != output {
                return Err(shape_err(format!(
                    "{} is {}->{}, expected {input}->{output}",
                    m.name(),
                    m.in_dim(),
                    m.out_dim()
                )));
            }
            Ok(())
        };
        expect(&self.phi_pos, BOX_DIM, EMBED_DIM)?;
        expect(&self.phi_refine_pos, EMBED_DIM, EMBED_DIM)?;
        expect(&self.phi_mem, EMBED_DIM, EMBED_DIM)?;
        expect(&self.phi_sim, 3 * EMBED_DIM, EMBED_DIM)?;
        expect(&self.phi_fuse, 2 * EMBED_DIM, EMBED_DIM)?;
        expect(&self.phi_align, EMBED_DIM, self.d_vlm)
    }

    pub fn networks(&self) -> [&Mlp; 6] {
        [&self.phi_pos, &self.phi_refine_pos, &self.phi_mem, &self.phi_sim, &self.phi_fuse, &self.phi_align]
    }

    /// Positional embedding `phi_refine_pos(phi_pos(corners))` for a batch of
    /// flattened 8x3 boxes.
    pub fn position_embedding(&self, boxes: &Matrix) -> Result<Matrix> {
        self.phi_refine_pos.forward(&self.phi_pos.forward(boxes)?)
    }
}

/// Scalar probe `r · mean_rows(net(x))` used by gradient checks.
pub struct MlpProbe<'n> {
    pub mlp: &'n Mlp,
    pub projection: Matrix,
}

impl<'n> MlpProbe<'n> {
    pub fn new(mlp: &'n Mlp, rng: &mut Rng) -> Self {
        let d = mlp.out_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let r = (0..d).map(|_| rng.gaussian() * scale).collect();
        Self { mlp, projection: Matrix::from_vec(d, 1, r).expect("projection shape") }
    }
}

impl ScalarFn for MlpProbe<'_> {
    fn input_shape(&self) -> (usize, usize) {
        (1, self.mlp.in_dim())
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval_batch(&Matrix::row_vector(x))?[0])
    }

    fn eval_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(xs)?.matmul(&self.projection)?.into_data())
    }

    fn record<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<Var> {
        let y = self.mlp.record(tape, x)?;
        let pooled = tape.mean_pool(y);
        let r = tape.leaf(self.projection.clone());
        tape.matmul(pooled, r, false, 1.0)
    }
}
