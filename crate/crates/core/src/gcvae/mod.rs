//! Graph-convolutional variational autoencoder over fixed-topology meshes.
//!
//! The building block is a feature-steered graph convolution: each neighbor
//! feature x_j is transformed by M weight matrices and the results blended by
//! a learned softmax assignment over the translation-invariant differences
//! x_j − x_i:
//!
//! ```text
//! y_i = b + (1/|N_i|) Σ_{j∈N_i} Σ_m q_m(x_i, x_j) W_m x_j
//! q_m(x_i, x_j) = softmax_m( u_mᵀ (x_j − x_i) + c_m )
//! ```
//!
//! The encoder maps vertex coordinates to a latent Gaussian (mean and
//! log-variance); the generator mirrors it back to coordinates. Training
//! minimizes a vertex-density-weighted reconstruction loss plus a KL term
//! against a standard normal prior.

mod checkpoint;
mod train;

pub use checkpoint::{load_model, save_model};
pub use train::{autoencode_loss, train, EpochRecord, OnlineAugment, SpectralAugmentCfg, TrainConfig};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{Mesh, MeshError, Topology};
use crate::numerics::{NumericsError, Tape, Tensor, VarId};
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("mesh fingerprint {mesh} does not match model fingerprint {model}")]
    FingerprintMismatch { mesh: String, model: String },
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupted checkpoint: {0}")]
    Corrupted(String),
    #[error("degenerate geometry: mean squared edge length is zero")]
    DegenerateGeometry,
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("dataset meshes have mixed topologies ({a} vs {b})")]
    MixedTopology { a: String, b: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// One feature-steered convolution layer. `weights` stores the M matrices
/// side by side: column block m holds W_m (in × out).
#[derive(Debug, Clone, PartialEq)]
pub struct FeastLayerParams {
    pub weights: Tensor,  // (in, m·out)
    pub assign_u: Tensor, // (in, m)
    pub assign_c: Tensor, // (1, m)
    pub bias: Tensor,     // (1, out)
    pub in_ch: usize,
    pub out_ch: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    fn new(c: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(vec![1, c], 1.0),
            beta: Tensor::zeros(vec![1, c]),
            running_mean: Tensor::zeros(vec![1, c]),
            running_var: Tensor::filled(vec![1, c], 1.0),
        }
    }
}

/// Architecture descriptor: channel ladder of the encoder conv stack
/// (mirrored by the generator), latent size, and assignment count M.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub channels: Vec<usize>,
    pub latent: usize,
    pub m: usize,
    pub leaky_slope: f64,
    pub use_batchnorm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            channels: vec![16, 32],
            latent: 128,
            m: 8,
            leaky_slope: 0.02,
            use_batchnorm: true,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

/// All learnable tensors of the encoder/generator pair, bound to one topology.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: Architecture,
    topology: Arc<Topology>,
    pub enc_feast: Vec<FeastLayerParams>,
    pub enc_bn: Vec<BatchNormParams>,
    pub enc_dense_w: Tensor,
    pub enc_dense_b: Tensor,
    pub gen_dense_w: Tensor,
    pub gen_dense_b: Tensor,
    pub gen_bn_in: BatchNormParams,
    pub gen_feast: Vec<FeastLayerParams>,
    pub gen_bn: Vec<BatchNormParams>,
}

fn xavier(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    use rand::Rng;
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-s..s)).collect(),
    )
    .unwrap()
}

impl FeastLayerParams {
    fn init(rng: &mut rand_chacha::ChaCha8Rng, in_ch: usize, out_ch: usize, m: usize) -> Self {
        FeastLayerParams {
            weights: xavier(rng, in_ch, m * out_ch, in_ch, out_ch),
            assign_u: xavier(rng, in_ch, m, in_ch, m),
            assign_c: Tensor::zeros(vec![1, m]),
            bias: Tensor::zeros(vec![1, out_ch]),
            in_ch,
            out_ch,
            m,
        }
    }
}

impl ModelParams {
    /// Fresh model with seeded Xavier initialization, bound to `topology`.
    pub fn init(arch: Architecture, topology: Arc<Topology>, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let n = topology.n_vertices();
        let mut enc_feast = Vec::new();
        let mut enc_bn = Vec::new();
        let mut prev = 3;
        for &c in &arch.channels {
            enc_feast.push(FeastLayerParams::init(&mut rng, prev, c, arch.m));
            enc_bn.push(BatchNormParams::new(c));
            prev = c;
        }
        let c_last = *arch.channels.last().expect("at least one channel");
        let flat = c_last * n;
        let enc_dense_w = xavier(&mut rng, flat, 2 * arch.latent, flat, 2 * arch.latent);
        let enc_dense_b = Tensor::zeros(vec![1, 2 * arch.latent]);
        let gen_dense_w = xavier(&mut rng, arch.latent, flat, arch.latent, flat);
        let gen_dense_b = Tensor::zeros(vec![1, flat]);
        let gen_bn_in = BatchNormParams::new(c_last);
        let mut gen_feast = Vec::new();
        let mut gen_bn = Vec::new();
        let mut ladder: Vec<usize> = arch.channels.iter().rev().skip(1).copied().collect();
        ladder.push(3);
        let mut prev = c_last;
        for (i, &c) in ladder.iter().enumerate() {
            gen_feast.push(FeastLayerParams::init(&mut rng, prev, c, arch.m));
            if i + 1 < ladder.len() {
                gen_bn.push(BatchNormParams::new(c));
            }
            prev = c;
        }
        ModelParams {
            arch,
            topology,
            enc_feast,
            enc_bn,
            enc_dense_w,
            enc_dense_b,
            gen_dense_w,
            gen_dense_b,
            gen_bn_in,
            gen_feast,
            gen_bn,
        }
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn fingerprint(&self) -> &str {
        self.topology.fingerprint()
    }

    pub fn n_vertices(&self) -> usize {
        self.topology.n_vertices()
    }

    pub fn latent(&self) -> usize {
        self.arch.latent
    }

    /// Trainable tensors in canonical (checkpoint and optimizer) order.
    pub fn trainable_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = Vec::new();
        for layer in &self.enc_feast {
            out.push(("enc.feast.weights", &layer.weights));
            out.push(("enc.feast.assign_u", &layer.assign_u));
            out.push(("enc.feast.assign_c", &layer.assign_c));
            out.push(("enc.feast.bias", &layer.bias));
        }
        for bn in &self.enc_bn {
            out.push(("enc.bn.gamma", &bn.gamma));
            out.push(("enc.bn.beta", &bn.beta));
        }
        out.push(("enc.dense.w", &self.enc_dense_w));
        out.push(("enc.dense.b", &self.enc_dense_b));
        out.push(("gen.dense.w", &self.gen_dense_w));
        out.push(("gen.dense.b", &self.gen_dense_b));
        out.push(("gen.bn_in.gamma", &self.gen_bn_in.gamma));
        out.push(("gen.bn_in.beta", &self.gen_bn_in.beta));
        for layer in &self.gen_feast {
            out.push(("gen.feast.weights", &layer.weights));
            out.push(("gen.feast.assign_u", &layer.assign_u));
            out.push(("gen.feast.assign_c", &layer.assign_c));
            out.push(("gen.feast.bias", &layer.bias));
        }
        for bn in &self.gen_bn {
            out.push(("gen.bn.gamma", &bn.gamma));
            out.push(("gen.bn.beta", &bn.beta));
        }
        out
    }

    pub(crate) fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.enc_feast {
            out.push(&mut layer.weights);
            out.push(&mut layer.assign_u);
            out.push(&mut layer.assign_c);
            out.push(&mut layer.bias);
        }
        for bn in &mut self.enc_bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(&mut self.enc_dense_w);
        out.push(&mut self.enc_dense_b);
        out.push(&mut self.gen_dense_w);
        out.push(&mut self.gen_dense_b);
        out.push(&mut self.gen_bn_in.gamma);
        out.push(&mut self.gen_bn_in.beta);
        for layer in &mut self.gen_feast {
            out.push(&mut layer.weights);
            out.push(&mut layer.assign_u);
            out.push(&mut layer.assign_c);
            out.push(&mut layer.bias);
        }
        for bn in &mut self.gen_bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    /// Running normalization statistics, in site order (encoder stack, then
    /// the generator input site, then the generator stack).
    pub(crate) fn bn_sites_mut(&mut self) -> Vec<&mut BatchNormParams> {
        let mut out: Vec<&mut BatchNormParams> = Vec::new();
        for bn in &mut self.enc_bn {
            out.push(bn);
        }
        out.push(&mut self.gen_bn_in);
        for bn in &mut self.gen_bn {
            out.push(bn);
        }
        out
    }

    pub(crate) fn bn_sites(&self) -> Vec<&BatchNormParams> {
        let mut out: Vec<&BatchNormParams> = Vec::new();
        for bn in &self.enc_bn {
            out.push(bn);
        }
        out.push(&self.gen_bn_in);
        for bn in &self.gen_bn {
            out.push(bn);
        }
        out
    }

    fn check_mesh(&self, mesh: &Mesh) -> Result<(), ModelError> {
        if mesh.fingerprint() != self.fingerprint() {
            return Err(ModelError::FingerprintMismatch {
                mesh: mesh.fingerprint().to_string(),
                model: self.fingerprint().to_string(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// graph context
// ---------------------------------------------------------------------------

/// Precomputed per-topology index arrays shared by every forward pass.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    pub inv_deg: Tensor,
    pub n: usize,
}

impl GraphContext {
    pub fn new(topology: &Topology) -> Self {
        let (src, dst) = topology.directed_edges();
        let n = topology.n_vertices();
        let inv_deg: Vec<f64> = (0..n).map(|v| 1.0 / topology.degree(v) as f64).collect();
        GraphContext {
            src,
            dst,
            inv_deg: Tensor::new(vec![n, 1], inv_deg).unwrap(),
            n,
        }
    }
}

// ---------------------------------------------------------------------------
// tape forward passes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Parameters are watched; normalization uses per-pass statistics.
    Training,
    /// Parameters are constants; normalization uses running statistics.
    Inference,
}

pub(crate) struct BoundFeast {
    weights: VarId,
    assign_u: VarId,
    assign_c: VarId,
    bias: VarId,
    m: usize,
}

pub(crate) struct BoundBn {
    gamma: VarId,
    beta: VarId,
}

/// Model parameters registered on a tape (watched leaves when training).
pub struct BoundModel {
    pass: Pass,
    enc_feast: Vec<BoundFeast>,
    enc_bn: Vec<BoundBn>,
    enc_dense_w: VarId,
    enc_dense_b: VarId,
    gen_dense_w: VarId,
    gen_dense_b: VarId,
    gen_bn_in: BoundBn,
    gen_feast: Vec<BoundFeast>,
    gen_bn: Vec<BoundBn>,
    trainables: Vec<VarId>,
}

impl BoundModel {
    /// Tape ids of the trainable tensors, in canonical order.
    pub fn trainables(&self) -> &[VarId] {
        &self.trainables
    }
}

/// Registers every model tensor on the tape.
pub fn bind_model(tape: &mut Tape, model: &ModelParams, pass: Pass) -> BoundModel {
    let mut trainables = Vec::new();
    let reg = |tape: &mut Tape, t: &Tensor, trainables: &mut Vec<VarId>| -> VarId {
        let id = match pass {
            Pass::Training => tape.var(t.clone()),
            Pass::Inference => tape.constant(t.clone()),
        };
        trainables.push(id);
        id
    };
    let mut enc_feast = Vec::new();
    for layer in &model.enc_feast {
        enc_feast.push(BoundFeast {
            weights: reg(tape, &layer.weights, &mut trainables),
            assign_u: reg(tape, &layer.assign_u, &mut trainables),
            assign_c: reg(tape, &layer.assign_c, &mut trainables),
            bias: reg(tape, &layer.bias, &mut trainables),
            m: layer.m,
        });
    }
    let mut enc_bn = Vec::new();
    for bn in &model.enc_bn {
        enc_bn.push(BoundBn {
            gamma: reg(tape, &bn.gamma, &mut trainables),
            beta: reg(tape, &bn.beta, &mut trainables),
        });
    }
    let enc_dense_w = reg(tape, &model.enc_dense_w, &mut trainables);
    let enc_dense_b = reg(tape, &model.enc_dense_b, &mut trainables);
    let gen_dense_w = reg(tape, &model.gen_dense_w, &mut trainables);
    let gen_dense_b = reg(tape, &model.gen_dense_b, &mut trainables);
    let gen_bn_in = BoundBn {
        gamma: reg(tape, &model.gen_bn_in.gamma, &mut trainables),
        beta: reg(tape, &model.gen_bn_in.beta, &mut trainables),
    };
    let mut gen_feast = Vec::new();
    for layer in &model.gen_feast {
        gen_feast.push(BoundFeast {
            weights: reg(tape, &layer.weights, &mut trainables),
            assign_u: reg(tape, &layer.assign_u, &mut trainables),
            assign_c: reg(tape, &layer.assign_c, &mut trainables),
            bias: reg(tape, &layer.bias, &mut trainables),
            m: layer.m,
        });
    }
    let mut gen_bn = Vec::new();
    for bn in &model.gen_bn {
        gen_bn.push(BoundBn {
            gamma: reg(tape, &bn.gamma, &mut trainables),
            beta: reg(tape, &bn.beta, &mut trainables),
        });
    }
    BoundModel {
        pass,
        enc_feast,
        enc_bn,
        enc_dense_w,
        enc_dense_b,
        gen_dense_w,
        gen_dense_b,
        gen_bn_in,
        gen_feast,
        gen_bn,
        trainables,
    }
}

fn feast_on_tape(
    tape: &mut Tape,
    x: VarId,
    layer: &BoundFeast,
    ctx: &GraphContext,
) -> Result<VarId, NumericsError> {
    let x_src = tape.gather_rows(x, ctx.src.clone())?;
    let x_dst = tape.gather_rows(x, ctx.dst.clone())?;
    let diff = tape.sub(x_src, x_dst)?;
    let lin = tape.matmul(diff, layer.assign_u)?;
    let logits = tape.add_row(lin, layer.assign_c)?;
    let q = tape.softmax_rows(logits)?;
    let transformed = tape.matmul(x_src, layer.weights)?;
    let msg = tape.group_weighted_sum(transformed, q, layer.m)?;
    let sums = tape.scatter_add_rows(msg, ctx.dst.clone(), ctx.n)?;
    let inv_deg = tape.constant(ctx.inv_deg.clone());
    let avg = tape.mul_col(sums, inv_deg)?;
    tape.add_row(avg, layer.bias)
}

/// Per-pass batch statistics of one normalization site (training only).
pub struct BnBatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

fn batchnorm_on_tape(
    tape: &mut Tape,
    x: VarId,
    bound: &BoundBn,
    params: &BatchNormParams,
    pass: Pass,
    eps: f64,
    stats_out: &mut Vec<BnBatchStats>,
) -> Result<VarId, NumericsError> {
    match pass {
        Pass::Training => {
            let mu = tape.mean_rows(x)?;
            let neg_mu = tape.scale(mu, -1.0)?;
            let xc = tape.add_row(x, neg_mu)?;
            let sq = tape.mul(xc, xc)?;
            let var = tape.mean_rows(sq)?;
            stats_out.push(BnBatchStats {
                mean: tape.value(mu).clone(),
                var: tape.value(var).clone(),
            });
            let shifted = tape.add_scalar(var, eps)?;
            let inv_std = tape.powf(shifted, -0.5)?;
            let xhat = tape.mul_row(xc, inv_std)?;
            let scaled = tape.mul_row(xhat, bound.gamma)?;
            tape.add_row(scaled, bound.beta)
        }
        Pass::Inference => {
            let neg_mean = tape.constant({
                let mut t = params.running_mean.clone();
                for v in t.data_mut() {
                    *v = -*v;
                }
                t
            });
            let inv_std = tape.constant({
                let mut t = params.running_var.clone();
                for v in t.data_mut() {
                    *v = 1.0 / (*v + eps).sqrt();
                }
                t
            });
            let xc = tape.add_row(x, neg_mean)?;
            let xhat = tape.mul_row(xc, inv_std)?;
            let scaled = tape.mul_row(xhat, bound.gamma)?;
            tape.add_row(scaled, bound.beta)
        }
    }
}

/// Encoder forward pass on the tape: mesh coordinates to (μ, log σ²).
pub fn encode_on_tape(
    tape: &mut Tape,
    bound: &BoundModel,
    model: &ModelParams,
    ctx: &GraphContext,
    x: VarId,
    stats_out: &mut Vec<BnBatchStats>,
) -> Result<(VarId, VarId), NumericsError> {
    let slope = model.arch.leaky_slope;
    let mut h = x;
    for (i, layer) in bound.enc_feast.iter().enumerate() {
        h = feast_on_tape(tape, h, layer, ctx)?;
        if model.arch.use_batchnorm {
            h = batchnorm_on_tape(
                tape,
                h,
                &bound.enc_bn[i],
                &model.enc_bn[i],
                bound.pass,
                model.arch.bn_eps,
                stats_out,
            )?;
        }
        h = tape.leaky_relu(h, slope)?;
    }
    let c_last = *model.arch.channels.last().unwrap();
    let flat = tape.reshape(h, vec![1, ctx.n * c_last])?;
    let lin = tape.matmul(flat, bound.enc_dense_w)?;
    let out = tape.add_row(lin, bound.enc_dense_b)?;
    let latent = model.arch.latent;
    let mu = tape.slice_cols(out, 0, latent)?;
    let logvar = tape.slice_cols(out, latent, latent)?;
    Ok((mu, logvar))
}

/// Generator forward pass on the tape: latent code to vertex coordinates.
pub fn generate_on_tape(
    tape: &mut Tape,
    bound: &BoundModel,
    model: &ModelParams,
    ctx: &GraphContext,
    z: VarId,
    stats_out: &mut Vec<BnBatchStats>,
) -> Result<VarId, NumericsError> {
    let slope = model.arch.leaky_slope;
    let c_last = *model.arch.channels.last().unwrap();
    let lin = tape.matmul(z, bound.gen_dense_w)?;
    let dense = tape.add_row(lin, bound.gen_dense_b)?;
    let mut h = tape.reshape(dense, vec![ctx.n, c_last])?;
    if model.arch.use_batchnorm {
        h = batchnorm_on_tape(
            tape,
            h,
            &bound.gen_bn_in,
            &model.gen_bn_in,
            bound.pass,
            model.arch.bn_eps,
            stats_out,
        )?;
    }
    h = tape.leaky_relu(h, slope)?;
    let n_layers = bound.gen_feast.len();
    for (i, layer) in bound.gen_feast.iter().enumerate() {
        h = feast_on_tape(tape, h, layer, ctx)?;
        if i + 1 < n_layers {
            if model.arch.use_batchnorm {
                h = batchnorm_on_tape(
                    tape,
                    h,
                    &bound.gen_bn[i],
                    &model.gen_bn[i],
                    bound.pass,
                    model.arch.bn_eps,
                    stats_out,
                )?;
            }
            h = tape.leaky_relu(h, slope)?;
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// public operations
// ---------------------------------------------------------------------------

/// One feature-steered convolution evaluated as a plain function.
pub fn feast_conv(
    features: &Tensor,
    topology: &Topology,
    layer: &FeastLayerParams,
) -> Result<Tensor, ModelError> {
    if features.rows() != topology.n_vertices() || features.cols() != layer.in_ch {
        return Err(ModelError::Numerics(NumericsError::ShapeMismatch {
            op: "feast_conv",
            detail: format!(
                "features {:?} vs {} vertices and {} input channels",
                features.shape(),
                topology.n_vertices(),
                layer.in_ch
            ),
        }));
    }
    let ctx = GraphContext::new(topology);
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let bound = BoundFeast {
        weights: tape.constant(layer.weights.clone()),
        assign_u: tape.constant(layer.assign_u.clone()),
        assign_c: tape.constant(layer.assign_c.clone()),
        bias: tape.constant(layer.bias.clone()),
        m: layer.m,
    };
    let y = feast_on_tape(&mut tape, x, &bound, &ctx)?;
    Ok(tape.value(y).clone())
}

/// The M soft-assignment probabilities for one neighbor pair.
pub fn assignment_weights(x_i: &[f64], x_j: &[f64], layer: &FeastLayerParams) -> Vec<f64> {
    let m = layer.m;
    let mut logits = vec![0.0f64; m];
    for (k, logit) in logits.iter_mut().enumerate() {
        let mut v = layer.assign_c.data()[k];
        for a in 0..layer.in_ch {
            v += layer.assign_u.at(a, k) * (x_j[a] - x_i[a]);
        }
        *logit = v;
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut denom = 0.0;
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&v| {
            let e = (v - max).exp();
            denom += e;
            e
        })
        .collect();
    for v in &mut out {
        *v /= denom;
    }
    out
}

/// Deterministic latent statistics of a mesh: (μ, log σ²).
pub fn encode(mesh: &Mesh, model: &ModelParams) -> Result<(Tensor, Tensor), ModelError> {
    model.check_mesh(mesh)?;
    let ctx = GraphContext::new(model.topology());
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model, Pass::Inference);
    let x = tape.constant(Tensor::from_rows3(mesh.vertices()));
    let mut stats = Vec::new();
    let (mu, logvar) = encode_on_tape(&mut tape, &bound, model, &ctx, x, &mut stats)?;
    Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
}

/// z = μ + exp(½ log σ²) ⊙ ε with ε drawn standard normal from the seed.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, seed: u64) -> Result<Tensor, ModelError> {
    if mu.shape() != logvar.shape() {
        return Err(ModelError::Numerics(NumericsError::ShapeMismatch {
            op: "reparameterize",
            detail: format!("{:?} vs {:?}", mu.shape(), logvar.shape()),
        }));
    }
    let mut rng = rng_from_seed(seed);
    let mut data = Vec::with_capacity(mu.len());
    for (m, lv) in mu.data().iter().zip(logvar.data()) {
        data.push(m + (0.5 * lv).exp() * crate::rng::standard_normal(&mut rng));
    }
    Ok(Tensor::new(mu.shape().to_vec(), data)?)
}

/// Decodes a latent code to a mesh on the model's topology.
pub fn generate(z: &Tensor, model: &ModelParams) -> Result<Mesh, ModelError> {
    if z.len() != model.arch.latent {
        return Err(ModelError::Numerics(NumericsError::ShapeMismatch {
            op: "generate",
            detail: format!("latent {:?} vs size {}", z.shape(), model.arch.latent),
        }));
    }
    let ctx = GraphContext::new(model.topology());
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model, Pass::Inference);
    let zr = z.reshaped(vec![1, model.arch.latent])?;
    let z_id = tape.constant(zr);
    let mut stats = Vec::new();
    let verts = generate_on_tape(&mut tape, &bound, model, &ctx, z_id, &mut stats)?;
    Ok(Mesh::new(
        tape.value(verts).to_rows3(),
        model.topology().clone(),
    )?)
}

/// Per-vertex density weights γ: neighborhood mean squared edge length,
/// normalized to mean one. Sparse regions weigh more.
pub fn density_weights(mesh: &Mesh) -> Result<Tensor, ModelError> {
    let verts = mesh.vertices();
    let n = verts.len();
    let mut s = vec![0.0f64; n];
    for (i, nbrs) in mesh.topology().neighbors().iter().enumerate() {
        let mut acc = 0.0;
        for &j in nbrs {
            let d = [
                verts[i][0] - verts[j][0],
                verts[i][1] - verts[j][1],
                verts[i][2] - verts[j][2],
            ];
            acc += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        }
        s[i] = acc / nbrs.len().max(1) as f64;
    }
    let mean: f64 = s.iter().sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return Err(ModelError::DegenerateGeometry);
    }
    for v in &mut s {
        *v /= mean;
    }
    Ok(Tensor::new(vec![n, 1], s)?)
}

/// Density-weighted reconstruction loss on the tape:
/// (1/N) Σ_i γ_i ‖x'_i − x_i‖².
pub fn recon_on_tape(
    tape: &mut Tape,
    pred: VarId,
    target: VarId,
    gamma: &Tensor,
) -> Result<VarId, NumericsError> {
    let n = gamma.rows();
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let g = tape.constant(gamma.clone());
    let w = tape.mul_col(sq, g)?;
    let s = tape.sum_all(w)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Plain evaluation of the reconstruction loss.
pub fn recon_loss(pred: &Tensor, target: &Tensor, gamma: &Tensor) -> Result<f64, ModelError> {
    if pred.shape() != target.shape() || pred.rows() != gamma.rows() {
        return Err(ModelError::Numerics(NumericsError::ShapeMismatch {
            op: "recon_loss",
            detail: format!(
                "pred {:?}, target {:?}, gamma {:?}",
                pred.shape(),
                target.shape(),
                gamma.shape()
            ),
        }));
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = recon_on_tape(&mut tape, p, t, gamma)?;
    Ok(tape.value(l).item())
}

/// KL divergence to the standard normal prior:
/// −½ Σ_d (1 + log σ²_d − μ_d² − σ²_d).
pub fn kl_on_tape(tape: &mut Tape, mu: VarId, logvar: VarId) -> Result<VarId, NumericsError> {
    let one_plus = tape.add_scalar(logvar, 1.0)?;
    let mu_sq = tape.mul(mu, mu)?;
    let t = tape.sub(one_plus, mu_sq)?;
    let var = tape.exp(logvar)?;
    let t = tape.sub(t, var)?;
    let s = tape.sum_all(t)?;
    tape.scale(s, -0.5)
}

/// Plain evaluation of the KL term.
pub fn kl_loss(mu: &Tensor, logvar: &Tensor) -> Result<f64, ModelError> {
    if mu.shape() != logvar.shape() {
        return Err(ModelError::Numerics(NumericsError::ShapeMismatch {
            op: "kl_loss",
            detail: format!("{:?} vs {:?}", mu.shape(), logvar.shape()),
        }));
    }
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone());
    let lv = tape.constant(logvar.clone());
    let l = kl_on_tape(&mut tape, m, lv)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests;
