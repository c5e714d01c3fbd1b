//! Shape completion: fit a generated mesh to a partial point cloud by
//! optimizing the generator's latent code jointly with a rigid transform of
//! the observation.
//!
//! The selected vertices of the generated mesh, `S ∘ G(z)`, are compared
//! against the rigidly moved cloud `R·P + t` with the symmetric Chamfer loss;
//! z, the axis-angle rotation r, and the translation t each get their own
//! Adam state and learning rate. Both point sets are centroid-centered once
//! at initialization, and the best iterate (not the last) is returned.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gcvae::{
    bind_model, encode, generate, generate_on_tape, GraphContext, ModelError, ModelParams, Pass,
};
use crate::mesh::{centroid, Mesh, MeshError, PointCloud};
use crate::numerics::{rodrigues, AdamState, NumericsError, Tape, Tensor, VarId};
use crate::remesh::chamfer_on_tape;
use crate::rng::{derive_seed, rng_from_seed, standard_normal};

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("selection mask is empty")]
    EmptyMask,
    #[error("selection mask index {index} out of range for {n} vertices")]
    MaskOutOfRange { index: usize, n: usize },
    #[error("selection mask has duplicate index {index}")]
    DuplicateMaskIndex { index: usize },
    #[error("mask fingerprint {mask} does not match topology fingerprint {topology}")]
    MaskFingerprint { mask: String, topology: String },
    #[error("farthest point sampling asked for {k} of {available} candidates")]
    SampleCount { k: usize, available: usize },
    #[error("objective diverged (non-finite) at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
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
// selection masks
// ---------------------------------------------------------------------------

/// Ordered vertex indices into the shared topology, with a provenance note.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectionMask {
    pub indices: Vec<usize>,
    pub provenance: String,
}

impl SelectionMask {
    pub fn validate(&self, n_vertices: usize) -> Result<(), CompletionError> {
        if self.indices.is_empty() {
            return Err(CompletionError::EmptyMask);
        }
        let mut seen = vec![false; n_vertices];
        for &i in &self.indices {
            if i >= n_vertices {
                return Err(CompletionError::MaskOutOfRange {
                    index: i,
                    n: n_vertices,
                });
            }
            if seen[i] {
                return Err(CompletionError::DuplicateMaskIndex { index: i });
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// On-disk mask file: the mask plus the fingerprint it belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskFile {
    pub topology_fingerprint: String,
    pub indices: Vec<usize>,
    pub provenance: String,
}

pub fn save_mask(
    mask: &SelectionMask,
    fingerprint: &str,
    path: impl AsRef<Path>,
) -> Result<(), CompletionError> {
    let path = path.as_ref();
    let file = MaskFile {
        topology_fingerprint: fingerprint.to_string(),
        indices: mask.indices.clone(),
        provenance: mask.provenance.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("mask serialization");
    crate::mesh::write_atomic(path, json.as_bytes()).map_err(|e| CompletionError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads a mask and checks it against the expected topology fingerprint.
pub fn load_mask(
    path: impl AsRef<Path>,
    expected_fingerprint: &str,
) -> Result<SelectionMask, CompletionError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CompletionError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: MaskFile = serde_json::from_str(&text).map_err(|e| CompletionError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    if file.topology_fingerprint != expected_fingerprint {
        return Err(CompletionError::MaskFingerprint {
            mask: file.topology_fingerprint,
            topology: expected_fingerprint.to_string(),
        });
    }
    Ok(SelectionMask {
        indices: file.indices,
        provenance: file.provenance,
    })
}

// ---------------------------------------------------------------------------
// farthest point sampling
// ---------------------------------------------------------------------------

/// Greedy max-min subsampling of `k` candidates. The first point is drawn
/// uniformly by the seed; every next point maximizes its distance to the
/// chosen set, ties broken by lowest vertex index.
pub fn farthest_point_sample(
    points: &[[f64; 3]],
    candidates: &[usize],
    k: usize,
    seed: u64,
) -> Result<SelectionMask, CompletionError> {
    if k > candidates.len() || k == 0 {
        return Err(CompletionError::SampleCount {
            k,
            available: candidates.len(),
        });
    }
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let start = rng.random_range(0..candidates.len());
    Ok(fps_from_start(points, candidates, k, start))
}

/// The greedy selection with an explicit start position in `candidates`.
pub fn fps_from_start(
    points: &[[f64; 3]],
    candidates: &[usize],
    k: usize,
    start: usize,
) -> SelectionMask {
    // candidates processed in ascending vertex order so strict comparisons
    // break ties toward the lowest index
    let mut order: Vec<usize> = candidates.to_vec();
    let start_vertex = candidates[start];
    order.sort_unstable();
    let mut chosen = vec![start_vertex];
    let mut min_d: Vec<f64> = order
        .iter()
        .map(|&c| dist2(points[c], points[start_vertex]))
        .collect();
    while chosen.len() < k {
        let mut best_pos = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (pos, (&c, &d)) in order.iter().zip(&min_d).enumerate() {
            if chosen.contains(&c) {
                continue;
            }
            if d > best_d {
                best_d = d;
                best_pos = pos;
            }
        }
        let next = order[best_pos];
        chosen.push(next);
        for (pos, &c) in order.iter().enumerate() {
            let d = dist2(points[c], points[next]);
            if d < min_d[pos] {
                min_d[pos] = d;
            }
        }
    }
    SelectionMask {
        indices: chosen,
        provenance: "farthest-point-sample".to_string(),
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Rows of the mesh gathered in mask order.
pub fn apply_selection(mesh: &Mesh, mask: &SelectionMask) -> Result<Vec<[f64; 3]>, CompletionError> {
    mask.validate(mesh.n_vertices())?;
    Ok(mask.indices.iter().map(|&i| mesh.vertices()[i]).collect())
}

/// Rotation matrix from an axis-angle vector (Rodrigues map).
pub fn rotation_from_axis_angle(r: [f64; 3]) -> [[f64; 3]; 3] {
    rodrigues(r)
}

// ---------------------------------------------------------------------------
// configuration and state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionConfig {
    pub iterations: usize,
    pub lr_z: f64,
    pub lr_rot: f64,
    pub lr_trans: f64,
    pub refine_iterations: usize,
    pub refine_lr: f64,
    pub hypothesis_count: usize,
    /// Per-coordinate variance Σ_ii of the latent initialization noise.
    pub noise_variance: f64,
    /// Farthest-point-sample size; `None` means min(200, candidate count).
    pub fps_count: Option<usize>,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            iterations: 100,
            lr_z: 5e-2,
            lr_rot: 1e-2,
            lr_trans: 5e-5,
            refine_iterations: 20,
            refine_lr: 5e-2,
            hypothesis_count: 1,
            noise_variance: 0.1,
            fps_count: None,
            seed: 0,
        }
    }
}

/// The rigid registration produced by a completion run. The optimization
/// moves the observation into the generator's canonical frame as
/// `φ(p) = R (p − c_P) + t + c_S`; meshes map back to the observation frame
/// through the inverse.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation_axis_angle: [f64; 3],
    pub translation: [f64; 3],
    pub centroid_cloud: [f64; 3],
    pub centroid_selection: [f64; 3],
}

impl RigidTransform {
    pub fn observation_to_model(&self, p: [f64; 3]) -> [f64; 3] {
        let r = rodrigues(self.rotation_axis_angle);
        let q = [
            p[0] - self.centroid_cloud[0],
            p[1] - self.centroid_cloud[1],
            p[2] - self.centroid_cloud[2],
        ];
        [
            r[0][0] * q[0] + r[0][1] * q[1] + r[0][2] * q[2]
                + self.translation[0]
                + self.centroid_selection[0],
            r[1][0] * q[0] + r[1][1] * q[1] + r[1][2] * q[2]
                + self.translation[1]
                + self.centroid_selection[1],
            r[2][0] * q[0] + r[2][1] * q[1] + r[2][2] * q[2]
                + self.translation[2]
                + self.centroid_selection[2],
        ]
    }

    pub fn model_to_observation(&self, x: [f64; 3]) -> [f64; 3] {
        let r = rodrigues(self.rotation_axis_angle);
        let q = [
            x[0] - self.translation[0] - self.centroid_selection[0],
            x[1] - self.translation[1] - self.centroid_selection[1],
            x[2] - self.translation[2] - self.centroid_selection[2],
        ];
        // transpose of R
        [
            r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2] + self.centroid_cloud[0],
            r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2] + self.centroid_cloud[1],
            r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2] + self.centroid_cloud[2],
        ]
    }

    /// The completed mesh expressed in the observation frame.
    pub fn mesh_to_observation(&self, mesh: &Mesh) -> Mesh {
        let verts = mesh
            .vertices()
            .iter()
            .map(|&v| self.model_to_observation(v))
            .collect();
        mesh.with_vertices(verts).expect("rigid map keeps the mesh valid")
    }
}

/// Outcome of one completion run.
#[derive(Debug, Clone)]
pub struct CompletionResult {
    /// Completed mesh in the generator's canonical frame.
    pub mesh: Mesh,
    pub transform: RigidTransform,
    /// Latent code of the best iterate.
    pub latent: Tensor,
    /// Objective value per iteration (index 0 is the initial objective).
    pub history: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
}

// ---------------------------------------------------------------------------
// objective
// ---------------------------------------------------------------------------

struct ObjectivePieces {
    z: VarId,
    rot: VarId,
    trans: VarId,
    objective: VarId,
}

/// Builds the Chamfer objective between the (optionally shifted) selected
/// generated vertices and the rigidly transformed cloud.
fn objective_on_tape(
    tape: &mut Tape,
    model: &ModelParams,
    ctx: &GraphContext,
    mask: &SelectionMask,
    cloud: &Tensor,
    selection_offset: [f64; 3],
    z0: &Tensor,
    r0: &Tensor,
    t0: &Tensor,
) -> Result<ObjectivePieces, NumericsError> {
    let bound = bind_model(tape, model, Pass::Inference);
    let z = tape.var(z0.clone());
    let rot = tape.var(r0.clone());
    let trans = tape.var(t0.clone());
    let mut stats = Vec::new();
    let verts = generate_on_tape(tape, &bound, model, ctx, z, &mut stats)?;
    let idx = Arc::new(mask.indices.clone());
    let sel = tape.gather_rows(verts, idx)?;
    let sel = if selection_offset == [0.0; 3] {
        sel
    } else {
        let off = tape.constant(Tensor::new(vec![1, 3], selection_offset.to_vec())?);
        tape.add_row(sel, off)?
    };
    let cloud_id = tape.constant(cloud.clone());
    let rotated = tape.rotate_points(rot, cloud_id)?;
    let moved = tape.add_row(rotated, trans)?;
    let objective = chamfer_on_tape(tape, sel, moved)?;
    Ok(ObjectivePieces {
        z,
        rot,
        trans,
        objective,
    })
}

/// Eq-style objective value and gradients: Chamfer between `S ∘ G(z)` and
/// `R·P + t`, differentiable in z, r, t with the model weights frozen.
pub fn completion_objective(
    z: &Tensor,
    r: &Tensor,
    t: &Tensor,
    model: &ModelParams,
    mask: &SelectionMask,
    cloud: &PointCloud,
) -> Result<(f64, Tensor, Tensor, Tensor), CompletionError> {
    mask.validate(model.n_vertices())?;
    let ctx = GraphContext::new(model.topology());
    let cloud_t = Tensor::from_rows3(cloud.points());
    let mut tape = Tape::new();
    let pieces = objective_on_tape(
        &mut tape,
        model,
        &ctx,
        mask,
        &cloud_t,
        [0.0; 3],
        z,
        r,
        t,
    )?;
    let value = tape.value(pieces.objective).item();
    let grads = tape.backward(pieces.objective)?;
    let gz = grads.wrt(pieces.z).cloned().unwrap_or_else(|| Tensor::zeros(z.shape().to_vec()));
    let gr = grads.wrt(pieces.rot).cloned().unwrap_or_else(|| Tensor::zeros(vec![1, 3]));
    let gt = grads
        .wrt(pieces.trans)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(vec![1, 3]));
    Ok((value, gz, gr, gt))
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

/// Latent initialization from the preoperative mesh: the encoder mean,
/// optionally refined by a few iterations minimizing the worst per-vertex
/// squared error of the reconstruction (best iterate returned).
pub fn initialize(
    preop: &Mesh,
    model: &ModelParams,
    refine: bool,
    config: &CompletionConfig,
) -> Result<Tensor, CompletionError> {
    let (mu, _) = encode(preop, model)?;
    let mut z = mu.reshaped(vec![1, model.latent()])?;
    if !refine {
        return Ok(z);
    }
    let ctx = GraphContext::new(model.topology());
    let preop_t = Tensor::from_rows3(preop.vertices());
    let mut adam = AdamState::new(config.refine_lr, &[z.shape().to_vec()]);
    let mut best = z.clone();
    let mut best_obj = f64::INFINITY;
    for _ in 0..=config.refine_iterations {
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, model, Pass::Inference);
        let z_id = tape.var(z.clone());
        let mut stats = Vec::new();
        let verts = generate_on_tape(&mut tape, &bound, model, &ctx, z_id, &mut stats)?;
        // worst vertex by current values, held fixed in backward
        let worst = {
            let v = tape.value(verts);
            let mut arg = 0usize;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..v.rows() {
                let d = (0..3)
                    .map(|k| (v.at(i, k) - preop_t.at(i, k)).powi(2))
                    .sum::<f64>();
                if d > best_d {
                    best_d = d;
                    arg = i;
                }
            }
            arg
        };
        let idx = Arc::new(vec![worst]);
        let row = tape.gather_rows(verts, idx.clone())?;
        let target = tape.constant(Tensor::new(
            vec![1, 3],
            (0..3).map(|k| preop_t.at(worst, k)).collect(),
        )?);
        let d = tape.sub(row, target)?;
        let sq = tape.mul(d, d)?;
        let obj = tape.sum_all(sq)?;
        let val = tape.value(obj).item();
        if val < best_obj {
            best_obj = val;
            best = z.clone();
        }
        let grads = tape.backward(obj)?;
        let g = grads
            .wrt(z_id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(z.shape().to_vec()));
        let mut params = vec![z];
        adam.step(&mut params, &[g])?;
        z = params.pop().unwrap();
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// the completion optimization
// ---------------------------------------------------------------------------

/// Runs the joint optimization from an explicit latent initialization.
pub fn complete_with_init(
    z_init: &Tensor,
    cloud: &PointCloud,
    mask: &SelectionMask,
    model: &ModelParams,
    config: &CompletionConfig,
) -> Result<CompletionResult, CompletionError> {
    mask.validate(model.n_vertices())?;
    let ctx = GraphContext::new(model.topology());
    let mut z = z_init.reshaped(vec![1, model.latent()])?;

    // center the cloud and the initial selection once
    let (cloud_centered, c_p) = crate::mesh::centroid_center(cloud.points());
    let cloud_t = Tensor::from_rows3(&cloud_centered);
    let init_mesh = generate(&z, model)?;
    let init_sel = apply_selection(&init_mesh, mask)?;
    let c_s = centroid(&init_sel);
    let sel_offset = [-c_s[0], -c_s[1], -c_s[2]];

    let mut rot = Tensor::zeros(vec![1, 3]);
    let mut trans = Tensor::zeros(vec![1, 3]);
    let mut adam_z = AdamState::new(config.lr_z, &[z.shape().to_vec()]);
    let mut adam_r = AdamState::new(config.lr_rot, &[vec![1, 3]]);
    let mut adam_t = AdamState::new(config.lr_trans, &[vec![1, 3]]);

    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(f64, Tensor, Tensor, Tensor)> = None;

    for step in 0..=config.iterations {
        let mut tape = Tape::new();
        let pieces = objective_on_tape(
            &mut tape, model, &ctx, mask, &cloud_t, sel_offset, &z, &rot, &trans,
        )?;
        let value = tape.value(pieces.objective).item();
        if !value.is_finite() {
            return Err(CompletionError::Diverged { iteration: step });
        }
        history.push(value);
        if best.as_ref().map_or(true, |(b, ..)| value < *b) {
            best = Some((value, z.clone(), rot.clone(), trans.clone()));
        }
        if step == config.iterations {
            break;
        }
        let grads = tape.backward(pieces.objective)?;
        let gz = grads
            .wrt(pieces.z)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(z.shape().to_vec()));
        let gr = grads
            .wrt(pieces.rot)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(vec![1, 3]));
        let gt = grads
            .wrt(pieces.trans)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(vec![1, 3]));
        let mut zs = vec![z];
        adam_z.step(&mut zs, &[gz])?;
        z = zs.pop().unwrap();
        let mut rs = vec![rot];
        adam_r.step(&mut rs, &[gr])?;
        rot = rs.pop().unwrap();
        let mut ts = vec![trans];
        adam_t.step(&mut ts, &[gt])?;
        trans = ts.pop().unwrap();
    }

    let (final_objective, z_best, r_best, t_best) = best.expect("at least one iterate");
    let mesh = generate(&z_best, model)?;
    let transform = RigidTransform {
        rotation_axis_angle: [r_best.data()[0], r_best.data()[1], r_best.data()[2]],
        translation: [t_best.data()[0], t_best.data()[1], t_best.data()[2]],
        centroid_cloud: c_p,
        centroid_selection: c_s,
    };
    Ok(CompletionResult {
        mesh,
        transform,
        latent: z_best,
        initial_objective: history[0],
        final_objective,
        history,
    })
}

/// Full completion: latent initialization from the preoperative mesh
/// (optionally refined), then the joint optimization against the cloud.
pub fn complete(
    preop: &Mesh,
    cloud: &PointCloud,
    mask: &SelectionMask,
    model: &ModelParams,
    config: &CompletionConfig,
    refine: bool,
) -> Result<CompletionResult, CompletionError> {
    if preop.fingerprint() != model.fingerprint() {
        return Err(CompletionError::Model(ModelError::FingerprintMismatch {
            mesh: preop.fingerprint().to_string(),
            model: model.fingerprint().to_string(),
        }));
    }
    let z0 = initialize(preop, model, refine, config)?;
    complete_with_init(&z0, cloud, mask, model, config)
}

/// Runs `count` completions from noise-perturbed copies of the latent
/// initialization (η i.i.d. zero-mean, per-coordinate variance Σ_ii).
/// Hypotheses run independently with derived seeds.
pub fn multi_hypothesis(
    z_init: &Tensor,
    count: usize,
    noise_variance: f64,
    seed: u64,
    cloud: &PointCloud,
    mask: &SelectionMask,
    model: &ModelParams,
    config: &CompletionConfig,
) -> Result<Vec<CompletionResult>, CompletionError> {
    use rayon::prelude::*;
    let sigma = noise_variance.sqrt();
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(seed, k as u64));
            let mut z = z_init.clone();
            for v in z.data_mut() {
                *v += sigma * standard_normal(&mut rng);
            }
            complete_with_init(&z, cloud, mask, model, config)
        })
        .collect()
}
