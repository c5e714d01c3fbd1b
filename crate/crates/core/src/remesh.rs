//! Topology-consistent remeshing: an icosphere template is deformed onto a
//! target surface by minimizing a weighted sum of Chamfer, normal,
//! Laplacian-smoothness, and edge-length terms, so every remeshed surface
//! shares the template's connectivity and vertex indexing.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{icosphere, vertex_normals, Mesh, MeshError, Topology};
use crate::numerics::{AdamState, NumericsError, Tape, Tensor, VarId};

#[derive(Debug, Error)]
pub enum RemeshError {
    #[error("loss diverged (non-finite) at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Remeshing hyperparameters. The weights follow the convention
/// `total = λ₀·chamfer + λ₁·normal + λ₂·laplacian + λ₃·edge`
/// with every term normalized to a mean over its elements.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemeshConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda_chamfer: f64,
    pub lambda_normal: f64,
    pub lambda_laplacian: f64,
    pub lambda_edge: f64,
    pub template_level: u32,
    pub seed: u64,
}

impl Default for RemeshConfig {
    fn default() -> Self {
        RemeshConfig {
            iterations: 500,
            learning_rate: 5e-3,
            lambda_chamfer: 5.0,
            lambda_normal: 0.2,
            lambda_laplacian: 0.3,
            lambda_edge: 15.0,
            template_level: 4,
            seed: 0,
        }
    }
}

/// Per-iteration loss record; serialized as the remeshing log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub step: usize,
    #[serde(rename = "L_Ch")]
    pub chamfer: f64,
    #[serde(rename = "L_n")]
    pub normal: f64,
    #[serde(rename = "L_L")]
    pub laplacian: f64,
    #[serde(rename = "L_E")]
    pub edge: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// closest points
// ---------------------------------------------------------------------------

/// For each row of `from`, the index of the nearest row of `to` (squared
/// Euclidean distance, ties broken by lowest index). Brute force, parallel
/// over query points.
pub fn closest_indices(from: &Tensor, to: &Tensor) -> Vec<usize> {
    use rayon::prelude::*;
    let n_to = to.rows();
    let td = to.data();
    (0..from.rows())
        .into_par_iter()
        .map(|i| {
            let p = [from.at(i, 0), from.at(i, 1), from.at(i, 2)];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, q) in td.chunks_exact(3).enumerate().take(n_to) {
                let dx = p[0] - q[0];
                let dy = p[1] - q[1];
                let dz = p[2] - q[2];
                let d = dx * dx + dy * dy + dz * dz;
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// loss terms on the tape
// ---------------------------------------------------------------------------

/// Symmetric Chamfer loss between two point sets (n×3 nodes):
/// mean over each set of the squared distance to the nearest point of the
/// other set. Nearest-point assignments are taken from the current values and
/// held fixed in the backward pass.
pub fn chamfer_on_tape(tape: &mut Tape, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
    let idx_ab = Arc::new(closest_indices(tape.value(a), tape.value(b)));
    let idx_ba = Arc::new(closest_indices(tape.value(b), tape.value(a)));
    let nb = tape.gather_rows(b, idx_ab)?;
    let d1 = tape.sub(a, nb)?;
    let s1 = tape.mul(d1, d1)?;
    let m1 = tape.mean_all(s1)?;
    let t1 = tape.scale(m1, 3.0)?;
    let na = tape.gather_rows(a, idx_ba)?;
    let d2 = tape.sub(b, na)?;
    let s2 = tape.mul(d2, d2)?;
    let m2 = tape.mean_all(s2)?;
    let t2 = tape.scale(m2, 3.0)?;
    tape.add(t1, t2)
}

/// Normal term: mean over directed edges (j → i) of
/// ⟨x_i − x_j, n_q(i)⟩² where q(i) is the target vertex nearest to x_i.
pub fn normal_term_on_tape(
    tape: &mut Tape,
    pred: VarId,
    target_normals: &Tensor,
    target_verts: &Tensor,
    topology: &Topology,
) -> Result<VarId, NumericsError> {
    let nearest = closest_indices(tape.value(pred), target_verts);
    let (src, dst) = topology.directed_edges();
    let mut edge_normals = Vec::with_capacity(dst.len() * 3);
    for &i in dst.iter() {
        let q = nearest[i];
        edge_normals.extend_from_slice(&target_normals.data()[q * 3..q * 3 + 3]);
    }
    let n_const = tape.constant(Tensor::new(vec![dst.len(), 3], edge_normals)?);
    let xi = tape.gather_rows(pred, dst)?;
    let xj = tape.gather_rows(pred, src)?;
    let d = tape.sub(xi, xj)?;
    let prod = tape.mul(d, n_const)?;
    let ones = tape.constant(Tensor::filled(vec![3, 1], 1.0));
    let dots = tape.matmul(prod, ones)?;
    let sq = tape.mul(dots, dots)?;
    tape.mean_all(sq)
}

/// Laplacian smoothness term: mean over vertices of
/// ‖x_i − mean_{j∈N_i}(x_j)‖² (uniform umbrella coordinates).
pub fn laplacian_term_on_tape(
    tape: &mut Tape,
    pred: VarId,
    topology: &Topology,
) -> Result<VarId, NumericsError> {
    let n = topology.n_vertices();
    let (src, dst) = topology.directed_edges();
    let inv_deg: Vec<f64> = (0..n).map(|v| 1.0 / topology.degree(v) as f64).collect();
    let inv_deg = tape.constant(Tensor::new(vec![n, 1], inv_deg)?);
    let gathered = tape.gather_rows(pred, src)?;
    let sums = tape.scatter_add_rows(gathered, dst, n)?;
    let means = tape.mul_col(sums, inv_deg)?;
    let d = tape.sub(pred, means)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean_all(sq)?;
    tape.scale(m, 3.0)
}

/// Edge term: mean over (undirected) edges of ‖x_i − x_j‖².
pub fn edge_term_on_tape(
    tape: &mut Tape,
    pred: VarId,
    topology: &Topology,
) -> Result<VarId, NumericsError> {
    let edges = topology.edges();
    let ei: Arc<Vec<usize>> = Arc::new(edges.iter().map(|e| e[0]).collect());
    let ej: Arc<Vec<usize>> = Arc::new(edges.iter().map(|e| e[1]).collect());
    let xi = tape.gather_rows(pred, ei)?;
    let xj = tape.gather_rows(pred, ej)?;
    let d = tape.sub(xi, xj)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean_all(sq)?;
    tape.scale(m, 3.0)
}

// ---------------------------------------------------------------------------
// plain evaluations
// ---------------------------------------------------------------------------

/// Chamfer loss between two point sets.
pub fn chamfer_loss(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mut tape = Tape::new();
    let av = tape.constant(Tensor::from_rows3(a));
    let bv = tape.constant(Tensor::from_rows3(b));
    let l = chamfer_on_tape(&mut tape, av, bv).expect("chamfer construction");
    tape.value(l).item()
}

/// Normal loss of a predicted mesh against a target mesh (target normals are
/// computed from the target's face winding).
pub fn normal_loss(pred: &Mesh, target: &Mesh) -> Result<f64, RemeshError> {
    let normals = Tensor::from_rows3(&vertex_normals(target)?);
    let tv = Tensor::from_rows3(target.vertices());
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows3(pred.vertices()));
    let l = normal_term_on_tape(&mut tape, p, &normals, &tv, pred.topology())?;
    Ok(tape.value(l).item())
}

/// Uniform-umbrella Laplacian regularization loss.
pub fn laplacian_reg_loss(mesh: &Mesh) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows3(mesh.vertices()));
    let l = laplacian_term_on_tape(&mut tape, p, mesh.topology()).expect("laplacian construction");
    tape.value(l).item()
}

/// Mean squared edge length.
pub fn edge_loss(mesh: &Mesh) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows3(mesh.vertices()));
    let l = edge_term_on_tape(&mut tape, p, mesh.topology()).expect("edge construction");
    tape.value(l).item()
}

// ---------------------------------------------------------------------------
// the remeshing optimization
// ---------------------------------------------------------------------------

/// Deforms an icosphere template (centered on the target centroid and scaled
/// to its bounding-sphere radius) onto the target surface. Returns the
/// remeshed mesh and the per-iteration loss log.
pub fn remesh(
    target: &Mesh,
    config: &RemeshConfig,
) -> Result<(Mesh, Vec<IterationRecord>), RemeshError> {
    let template = icosphere(config.template_level)?;
    let center = crate::mesh::centroid(target.vertices());
    let radius = target
        .vertices()
        .iter()
        .map(|v| {
            let d = [v[0] - center[0], v[1] - center[1], v[2] - center[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let init: Vec<[f64; 3]> = template
        .vertices()
        .iter()
        .map(|v| {
            [
                v[0] * radius + center[0],
                v[1] * radius + center[1],
                v[2] * radius + center[2],
            ]
        })
        .collect();

    let target_verts = Tensor::from_rows3(target.vertices());
    let target_normals = Tensor::from_rows3(&vertex_normals(target)?);
    let topology = template.topology().clone();

    let mut x = Tensor::from_rows3(&init);
    let mut adam = AdamState::new(config.learning_rate, &[x.shape().to_vec()]);
    let mut log = Vec::with_capacity(config.iterations);

    for step in 0..config.iterations {
        let mut tape = Tape::new();
        let pred = tape.var(x.clone());
        let tv = tape.constant(target_verts.clone());
        let ch = chamfer_on_tape(&mut tape, pred, tv)?;
        let nl = normal_term_on_tape(&mut tape, pred, &target_normals, &target_verts, &topology)?;
        let ll = laplacian_term_on_tape(&mut tape, pred, &topology)?;
        let el = edge_term_on_tape(&mut tape, pred, &topology)?;
        let ch_w = tape.scale(ch, config.lambda_chamfer)?;
        let nl_w = tape.scale(nl, config.lambda_normal)?;
        let ll_w = tape.scale(ll, config.lambda_laplacian)?;
        let el_w = tape.scale(el, config.lambda_edge)?;
        let s1 = tape.add(ch_w, nl_w)?;
        let s2 = tape.add(s1, ll_w)?;
        let total = tape.add(s2, el_w)?;

        let total_val = tape.value(total).item();
        if !total_val.is_finite() {
            return Err(RemeshError::Diverged { iteration: step });
        }
        log.push(IterationRecord {
            step,
            chamfer: tape.value(ch).item(),
            normal: tape.value(nl).item(),
            laplacian: tape.value(ll).item(),
            edge: tape.value(el).item(),
            total: total_val,
        });

        let grads = tape.backward(total)?;
        let g = grads.wrt(pred).expect("template is watched").clone();
        let mut params = vec![x];
        adam.step(&mut params, &[g])?;
        x = params.pop().expect("one parameter");
    }

    let out = Mesh::new(x.to_rows3(), topology)?;
    Ok((out, log))
}
