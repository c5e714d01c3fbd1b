//! VAE training: density-weighted reconstruction plus KL regularization,
//! optional spectral dataset expansion and online rigid augmentation.
//!
//! Batch members run forward/backward in parallel; gradients and
//! normalization statistics are combined by an ordered reduction, so training
//! is bitwise reproducible for a given seed regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    bind_model, density_weights, encode, encode_on_tape, generate, generate_on_tape, kl_on_tape,
    recon_on_tape, Architecture, BnBatchStats, ModelError, ModelParams, Pass,
};
use crate::gcvae::GraphContext;
use crate::mesh::Mesh;
use crate::numerics::{AdamState, NumericsError, Tape, Tensor};
use crate::rng::{derive_seed, random_rotation, rng_from_seed, standard_normal};
use crate::spectral::{spectral_augment, spectral_basis, PerturbRanges, PerturbationSpec};

/// Online (per-sample, per-epoch) rigid augmentation ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineAugment {
    pub rotate: bool,
    /// Isotropic scale drawn uniformly from this range.
    pub scale: [f64; 2],
    /// Translation drawn uniformly from [−t, t] per axis.
    pub translate: f64,
}

impl Default for OnlineAugment {
    fn default() -> Self {
        OnlineAugment {
            rotate: true,
            scale: [0.9, 1.1],
            translate: 0.1,
        }
    }
}

/// Spectral dataset expansion: each training mesh contributes `variants`
/// frequency-domain deformations (plus the original).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralAugmentCfg {
    pub variants: usize,
    pub ranges: PerturbRanges,
}

impl Default for SpectralAugmentCfg {
    fn default() -> Self {
        SpectralAugmentCfg {
            variants: 100,
            ranges: PerturbRanges::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub batch_size: usize,
    pub architecture: Architecture,
    pub seed: u64,
    pub online_augment: Option<OnlineAugment>,
    pub spectral_augment: Option<SpectralAugmentCfg>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            kl_weight: 1e-6,
            batch_size: 20,
            architecture: Architecture::default(),
            seed: 0,
            online_augment: Some(OnlineAugment::default()),
            spectral_augment: None,
        }
    }
}

/// Per-epoch mean losses, serialized as one training-log line each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub wall_time: f64,
}

struct SampleOut {
    grads: Vec<Tensor>,
    stats: Vec<BnBatchStats>,
    recon: f64,
    kl: f64,
}

fn rigid_augment(mesh: &Mesh, aug: &OnlineAugment, seed: u64) -> Mesh {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let rot = if aug.rotate {
        random_rotation(&mut rng)
    } else {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    };
    let s = if aug.scale[0] == aug.scale[1] {
        aug.scale[0]
    } else {
        rng.random_range(aug.scale[0]..aug.scale[1])
    };
    let t = if aug.translate > 0.0 {
        [
            rng.random_range(-aug.translate..aug.translate),
            rng.random_range(-aug.translate..aug.translate),
            rng.random_range(-aug.translate..aug.translate),
        ]
    } else {
        [0.0; 3]
    };
    let verts = mesh
        .vertices()
        .iter()
        .map(|v| {
            let r = [
                rot[0][0] * v[0] + rot[0][1] * v[1] + rot[0][2] * v[2],
                rot[1][0] * v[0] + rot[1][1] * v[1] + rot[1][2] * v[2],
                rot[2][0] * v[0] + rot[2][1] * v[1] + rot[2][2] * v[2],
            ];
            [s * r[0] + t[0], s * r[1] + t[1], s * r[2] + t[2]]
        })
        .collect();
    mesh.with_vertices(verts).expect("rigid transform keeps the mesh valid")
}

fn sample_pass(
    model: &ModelParams,
    ctx: &GraphContext,
    mesh: &Mesh,
    kl_weight: f64,
    eps_seed: u64,
) -> Result<SampleOut, NumericsError> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model, Pass::Training);
    let x = tape.constant(Tensor::from_rows3(mesh.vertices()));
    let gamma = density_weights(mesh).map_err(|_| NumericsError::NonFinite {
        op: "density_weights",
    })?;
    let mut stats = Vec::new();
    let (mu, logvar) = encode_on_tape(&mut tape, &bound, model, ctx, x, &mut stats)?;
    let mut rng = rng_from_seed(eps_seed);
    let eps = Tensor::new(
        vec![1, model.arch.latent],
        (0..model.arch.latent).map(|_| standard_normal(&mut rng)).collect(),
    )?;
    let eps = tape.constant(eps);
    let half = tape.scale(logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let noise = tape.mul(sd, eps)?;
    let z = tape.add(mu, noise)?;
    let pred = generate_on_tape(&mut tape, &bound, model, ctx, z, &mut stats)?;
    let recon = recon_on_tape(&mut tape, pred, x, &gamma)?;
    let kl = kl_on_tape(&mut tape, mu, logvar)?;
    let kl_w = tape.scale(kl, kl_weight)?;
    let total = tape.add(recon, kl_w)?;
    let grads = tape.backward(total)?;
    let grad_tensors = bound
        .trainables()
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            grads
                .wrt(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(model.trainable_tensors()[i].1.shape().to_vec()))
        })
        .collect();
    Ok(SampleOut {
        grads: grad_tensors,
        stats,
        recon: tape.value(recon).item(),
        kl: tape.value(kl).item(),
    })
}

/// Trains a VAE on a shared-topology mesh population. Returns the trained
/// model and the per-epoch loss log.
pub fn train(dataset: &[Mesh], config: &TrainConfig) -> Result<(ModelParams, Vec<EpochRecord>), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let fp = dataset[0].fingerprint().to_string();
    for m in dataset {
        if m.fingerprint() != fp {
            return Err(ModelError::MixedTopology {
                a: fp,
                b: m.fingerprint().to_string(),
            });
        }
    }

    // Spectral expansion happens once, before the epoch loop.
    let mut pool: Vec<Mesh> = dataset.to_vec();
    if let Some(spectral) = &config.spectral_augment {
        let basis = spectral_basis(dataset[0].topology()).map_err(|e| {
            ModelError::Numerics(NumericsError::Contract(format!("spectral basis: {e}")))
        })?;
        let spectral_seed = derive_seed(config.seed, 0xa06);
        let jobs: Vec<(usize, u64)> = (0..dataset.len())
            .flat_map(|i| {
                (0..spectral.variants)
                    .map(move |k| (i, derive_seed(spectral_seed, (i * spectral.variants + k) as u64)))
            })
            .collect();
        let variants: Result<Vec<Mesh>, ModelError> = jobs
            .par_iter()
            .map(|&(i, s)| {
                let spec = PerturbationSpec::sample(dataset[i].n_vertices(), &spectral.ranges, s)
                    .map_err(|e| {
                        ModelError::Numerics(NumericsError::Contract(format!("perturbation: {e}")))
                    })?;
                spectral_augment(&dataset[i], &basis, &spec).map_err(|e| {
                    ModelError::Numerics(NumericsError::Contract(format!("augment: {e}")))
                })
            })
            .collect();
        pool.extend(variants?);
    }

    let topology = dataset[0].topology().clone();
    let ctx = GraphContext::new(&topology);
    let mut model = ModelParams::init(config.architecture.clone(), topology, derive_seed(config.seed, 0x1217));
    let shapes: Vec<Vec<usize>> = model
        .trainable_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut adam = AdamState::new(config.learning_rate, &shapes);
    let mut log = Vec::with_capacity(config.epochs);
    let started = std::time::Instant::now();

    for epoch in 0..config.epochs {
        let epoch_seed = derive_seed(config.seed, 0xe0000 + epoch as u64);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = rng_from_seed(derive_seed(epoch_seed, 0));
            order.shuffle(&mut rng);
        }
        let mut recon_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut counter = 0u64;
        for (batch_idx, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            let jobs: Vec<(usize, u64)> = batch
                .iter()
                .map(|&mesh_idx| {
                    let c = counter;
                    counter += 1;
                    (mesh_idx, c)
                })
                .collect();
            let outs: Result<Vec<SampleOut>, NumericsError> = jobs
                .par_iter()
                .map(|&(mesh_idx, c)| {
                    let mesh = match &config.online_augment {
                        Some(aug) => rigid_augment(&pool[mesh_idx], aug, derive_seed(epoch_seed, 2 * c + 1)),
                        None => pool[mesh_idx].clone(),
                    };
                    sample_pass(&model, &ctx, &mesh, config.kl_weight, derive_seed(epoch_seed, 2 * c + 2))
                })
                .collect();
            let outs = outs.map_err(|e| match e {
                NumericsError::NonFinite { .. } => ModelError::Diverged {
                    epoch,
                    batch: batch_idx,
                },
                other => ModelError::Numerics(other),
            })?;

            let k = outs.len() as f64;
            let mut grad_acc: Vec<Tensor> = outs[0].grads.clone();
            for out in &outs[1..] {
                for (acc, g) in grad_acc.iter_mut().zip(&out.grads) {
                    let ad = acc.data_mut();
                    for (a, b) in ad.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            for g in &mut grad_acc {
                for v in g.data_mut() {
                    *v /= k;
                }
            }

            let batch_loss: f64 = outs
                .iter()
                .map(|o| o.recon + config.kl_weight * o.kl)
                .sum::<f64>()
                / k;
            if !batch_loss.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            recon_sum += outs.iter().map(|o| o.recon).sum::<f64>();
            kl_sum += outs.iter().map(|o| o.kl).sum::<f64>();

            {
                let mut params = model.trainable_tensors_mut();
                let mut owned: Vec<Tensor> = params.iter().map(|p| (**p).clone()).collect();
                adam.step(&mut owned, &grad_acc)?;
                for (slot, new) in params.iter_mut().zip(owned) {
                    **slot = new;
                }
            }

            if model.arch.use_batchnorm && !outs[0].stats.is_empty() {
                let n_sites = outs[0].stats.len();
                let momentum = model.arch.bn_momentum;
                let mut sites = model.bn_sites_mut();
                debug_assert_eq!(sites.len(), n_sites);
                for (site_idx, site) in sites.iter_mut().enumerate() {
                    let width = site.running_mean.len();
                    let mut mean_avg = vec![0.0f64; width];
                    let mut var_avg = vec![0.0f64; width];
                    for out in &outs {
                        for (a, v) in mean_avg.iter_mut().zip(out.stats[site_idx].mean.data()) {
                            *a += v;
                        }
                        for (a, v) in var_avg.iter_mut().zip(out.stats[site_idx].var.data()) {
                            *a += v;
                        }
                    }
                    let rm = site.running_mean.data_mut();
                    let rv = site.running_var.data_mut();
                    for i in 0..width {
                        rm[i] = momentum * rm[i] + (1.0 - momentum) * mean_avg[i] / k;
                        rv[i] = momentum * rv[i] + (1.0 - momentum) * var_avg[i] / k;
                    }
                }
            }
        }

        let n = pool.len() as f64;
        let recon = recon_sum / n;
        let kl = kl_sum / n;
        log.push(EpochRecord {
            epoch,
            recon,
            kl,
            total: recon + config.kl_weight * kl,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, log))
}

/// Deterministic round-trip loss of a mesh through the model: encode to the
/// latent mean, decode, and evaluate the density-weighted reconstruction loss
/// against the input. Used for holdout evaluation.
pub fn autoencode_loss(model: &ModelParams, mesh: &Mesh) -> Result<f64, ModelError> {
    let (mu, _) = encode(mesh, model)?;
    let recon = generate(&mu, model)?;
    let gamma = density_weights(mesh)?;
    super::recon_loss(
        &Tensor::from_rows3(recon.vertices()),
        &Tensor::from_rows3(mesh.vertices()),
        &gamma,
    )
}
