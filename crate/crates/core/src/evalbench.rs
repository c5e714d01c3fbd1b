//! Synthetic evaluation benchmark: seeded deformed ground truths with partial
//! clouds, a vertex-wise locally-averaged distance metric split into visible
//! and invisible regions, and a multi-start point-to-point ICP baseline.
//!
//! The baseline is plain multi-start local ICP (closed-form orthogonal
//! alignment per iteration) and is labeled "ICP (multi-start)" in every
//! report; it is not a globally optimal search.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::{
    complete, farthest_point_sample, CompletionConfig, CompletionError, SelectionMask,
};
use crate::gcvae::{ModelError, ModelParams};
use crate::mesh::{centroid, vertex_normals, Mesh, MeshError, PointCloud};
use crate::numerics::{symmetric_eig, NumericsError, Tensor};
use crate::remesh::closest_indices;
use crate::rng::{derive_seed, random_rotation, rng_from_seed};
use crate::spectral::{spectral_augment, spectral_basis, PerturbRanges, PerturbationSpec, SpectralError};

pub const BASELINE_LABEL: &str = "ICP (multi-start)";
pub const PROPOSED_LABEL: &str = "latent completion";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("region {region} selected no vertices (rule: {rule})")]
    EmptyRegion { region: Region, rule: String },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Completion(#[from] CompletionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Partial-view region on the preoperative mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "F")]
    Front,
    #[serde(rename = "R")]
    RightLobe,
    #[serde(rename = "L")]
    LeftLobe,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Front, Region::RightLobe, Region::LeftLobe];

    pub fn label(&self) -> &'static str {
        match self {
            Region::Front => "F",
            Region::RightLobe => "R",
            Region::LeftLobe => "L",
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One benchmark case: the undeformed mesh, its deformed ground truth, and a
/// partial cloud sampled from the deformed positions of masked vertices.
#[derive(Debug, Clone)]
pub struct BenchmarkCase {
    pub id: String,
    pub preop: Mesh,
    pub ground_truth: Mesh,
    pub region: Region,
    pub cloud: PointCloud,
    pub mask: SelectionMask,
    pub seed: u64,
}

/// Front-facing rule: vertices whose normal has positive dot with +z.
/// Lobes split the front set at the median x of its members.
fn region_candidates(preop: &Mesh, region: Region) -> Result<Vec<usize>, BenchError> {
    let normals = vertex_normals(preop)?;
    let front: Vec<usize> = (0..preop.n_vertices())
        .filter(|&i| normals[i][2] > 0.0)
        .collect();
    if front.is_empty() {
        return Err(BenchError::EmptyRegion {
            region,
            rule: "normal·(0,0,1) > 0".to_string(),
        });
    }
    let result = match region {
        Region::Front => front,
        Region::RightLobe | Region::LeftLobe => {
            let mut xs: Vec<f64> = front.iter().map(|&i| preop.vertices()[i][0]).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = xs[xs.len() / 2];
            let keep_right = region == Region::RightLobe;
            front
                .into_iter()
                .filter(|&i| {
                    let x = preop.vertices()[i][0];
                    if keep_right {
                        x > median
                    } else {
                        x < median
                    }
                })
                .collect()
        }
    };
    if result.is_empty() {
        return Err(BenchError::EmptyRegion {
            region,
            rule: "front ∩ median-x split".to_string(),
        });
    }
    Ok(result)
}

/// Generates one case per (mesh, region): the mesh is spectrally deformed
/// into the ground truth, the region is selected and farthest-point sampled
/// on the preoperative mesh, and the cloud takes the deformed positions of
/// the selected vertices.
pub fn make_benchmark(
    test_meshes: &[Mesh],
    deform: &PerturbRanges,
    seed: u64,
    fps_cap: usize,
) -> Result<Vec<BenchmarkCase>, BenchError> {
    let mut cases = Vec::new();
    for (mi, preop) in test_meshes.iter().enumerate() {
        let basis = spectral_basis(preop.topology())?;
        for (ri, &region) in Region::ALL.iter().enumerate() {
            let case_seed = derive_seed(seed, (mi * 3 + ri) as u64);
            let spec = PerturbationSpec::sample(preop.n_vertices(), deform, case_seed)?;
            let ground_truth = spectral_augment(preop, &basis, &spec)?;
            let candidates = region_candidates(preop, region)?;
            let k = fps_cap.min(candidates.len());
            let mut mask = farthest_point_sample(
                preop.vertices(),
                &candidates,
                k,
                derive_seed(case_seed, 0xf5),
            )?;
            mask.provenance = format!("region {region} on case {mi}");
            let points: Vec<[f64; 3]> = mask
                .indices
                .iter()
                .map(|&i| ground_truth.vertices()[i])
                .collect();
            cases.push(BenchmarkCase {
                id: format!("case-{mi:02}-{region}"),
                preop: preop.clone(),
                ground_truth,
                region,
                cloud: PointCloud::new(points)?,
                mask,
                seed: case_seed,
            });
        }
    }
    Ok(cases)
}

// ---------------------------------------------------------------------------
// vertex-wise error metric
// ---------------------------------------------------------------------------

/// Vertex-wise distances of a predicted mesh against a ground-truth mesh,
/// with no correspondence assumed.
///
/// Each predicted vertex records its distance to the nearest ground-truth
/// vertex; each ground-truth vertex adds its distance to the nearest
/// predicted vertex onto that predicted vertex. Per-vertex values are the
/// mean of their assigned distances, then averaged over the closed 1-ring.
pub fn vertexwise_error(predicted: &Mesh, ground_truth: &Mesh) -> Vec<f64> {
    let pv = Tensor::from_rows3(predicted.vertices());
    let gv = Tensor::from_rows3(ground_truth.vertices());
    let nearest_gt = closest_indices(&pv, &gv);
    let nearest_pred = closest_indices(&gv, &pv);

    let n = predicted.n_vertices();
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0usize; n];
    for (i, &j) in nearest_gt.iter().enumerate() {
        let d = dist(predicted.vertices()[i], ground_truth.vertices()[j]);
        sums[i] += d;
        counts[i] += 1;
    }
    for (j, &i) in nearest_pred.iter().enumerate() {
        let d = dist(ground_truth.vertices()[j], predicted.vertices()[i]);
        sums[i] += d;
        counts[i] += 1;
    }
    let values: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c.max(1) as f64)
        .collect();

    // closed 1-ring average
    let mut out = vec![0.0f64; n];
    for (i, nbrs) in predicted.topology().neighbors().iter().enumerate() {
        let mut acc = values[i];
        for &j in nbrs {
            acc += values[j];
        }
        out[i] = acc / (nbrs.len() + 1) as f64;
    }
    out
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Distance statistics of one method over the visible/invisible partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub visible_mean: f64,
    pub visible_max: f64,
    pub invisible_mean: f64,
    pub invisible_max: f64,
    pub per_vertex: Vec<f64>,
    pub seconds: f64,
}

/// Means and maxima over mask (visible) and complement (invisible).
pub fn region_report(distances: &[f64], mask: &SelectionMask) -> (f64, f64, f64, f64) {
    let visible: Vec<bool> = {
        let mut v = vec![false; distances.len()];
        for &i in &mask.indices {
            v[i] = true;
        }
        v
    };
    let mut vis = (0.0f64, 0.0f64, 0usize);
    let mut inv = (0.0f64, 0.0f64, 0usize);
    for (d, &is_vis) in distances.iter().zip(&visible) {
        let slot = if is_vis { &mut vis } else { &mut inv };
        slot.0 += d;
        slot.1 = slot.1.max(*d);
        slot.2 += 1;
    }
    let vis_mean = if vis.2 > 0 { vis.0 / vis.2 as f64 } else { 0.0 };
    let inv_mean = if inv.2 > 0 { inv.0 / inv.2 as f64 } else { 0.0 };
    (vis_mean, vis.1, inv_mean, inv.1)
}

// ---------------------------------------------------------------------------
// ICP baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub rel_tolerance: f64,
    pub seed: u64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            restarts: 16,
            max_iterations: 200,
            rel_tolerance: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    /// Mean squared assignment error per iteration of the winning restart.
    pub history: Vec<f64>,
    pub final_error: f64,
    pub restart_index: usize,
}

/// Multi-start point-to-point ICP aligning `source` onto `target`:
/// restart 0 starts from the identity (centroid-aligned), later restarts from
/// random rotations. Within a restart the error sequence never increases.
pub fn icp_baseline(source: &[[f64; 3]], target: &[[f64; 3]], config: &IcpConfig) -> IcpResult {
    let c_s = centroid(source);
    let c_t = centroid(target);
    let mut rng = rng_from_seed(config.seed);
    let inits: Vec<[[f64; 3]; 3]> = (0..config.restarts.max(1))
        .map(|k| {
            if k == 0 {
                [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
            } else {
                random_rotation(&mut rng)
            }
        })
        .collect();

    let runs: Vec<IcpResult> = inits
        .par_iter()
        .enumerate()
        .map(|(restart_index, &r0)| {
            let t0 = [
                c_t[0] - (r0[0][0] * c_s[0] + r0[0][1] * c_s[1] + r0[0][2] * c_s[2]),
                c_t[1] - (r0[1][0] * c_s[0] + r0[1][1] * c_s[1] + r0[1][2] * c_s[2]),
                c_t[2] - (r0[2][0] * c_s[0] + r0[2][1] * c_s[1] + r0[2][2] * c_s[2]),
            ];
            let (rotation, translation, history) =
                icp_single(source, target, r0, t0, config.max_iterations, config.rel_tolerance);
            let final_error = *history.last().unwrap_or(&f64::INFINITY);
            IcpResult {
                rotation,
                translation,
                history,
                final_error,
                restart_index,
            }
        })
        .collect();

    runs.into_iter()
        .min_by(|a, b| {
            a.final_error
                .partial_cmp(&b.final_error)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.restart_index.cmp(&b.restart_index))
        })
        .expect("at least one restart")
}

fn apply_rt(r: &[[f64; 3]; 3], t: &[f64; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
    ]
}

fn icp_single(
    source: &[[f64; 3]],
    target: &[[f64; 3]],
    mut r: [[f64; 3]; 3],
    mut t: [f64; 3],
    max_iterations: usize,
    rel_tolerance: f64,
) -> ([[f64; 3]; 3], [f64; 3], Vec<f64>) {
    let target_t = Tensor::from_rows3(target);
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..max_iterations {
        let moved: Vec<[f64; 3]> = source.iter().map(|&p| apply_rt(&r, &t, p)).collect();
        let idx = closest_indices(&Tensor::from_rows3(&moved), &target_t);
        let pairs: Vec<([f64; 3], [f64; 3])> = source
            .iter()
            .zip(&idx)
            .map(|(&s, &j)| (s, target[j]))
            .collect();
        let (nr, nt) = orthogonal_fit(&pairs);
        r = nr;
        t = nt;
        let err: f64 = source
            .iter()
            .zip(&idx)
            .map(|(&s, &j)| {
                let m = apply_rt(&r, &t, s);
                dist(m, target[j]).powi(2)
            })
            .sum::<f64>()
            / source.len() as f64;
        history.push(err);
        if prev.is_finite() && (prev - err).abs() <= rel_tolerance * prev.max(1e-300) {
            break;
        }
        prev = err;
    }
    (r, t, history)
}

/// Closed-form least-squares rigid fit of paired points via the quaternion
/// eigenvector method; always yields a proper rotation (det +1), including
/// for degenerate (coplanar or collinear) configurations.
fn orthogonal_fit(pairs: &[([f64; 3], [f64; 3])]) -> ([[f64; 3]; 3], [f64; 3]) {
    let n = pairs.len() as f64;
    let mut c_s = [0.0f64; 3];
    let mut c_t = [0.0f64; 3];
    for (s, q) in pairs {
        for k in 0..3 {
            c_s[k] += s[k] / n;
            c_t[k] += q[k] / n;
        }
    }
    let mut h = [[0.0f64; 3]; 3];
    for (s, q) in pairs {
        let a = [s[0] - c_s[0], s[1] - c_s[1], s[2] - c_s[2]];
        let b = [q[0] - c_t[0], q[1] - c_t[1], q[2] - c_t[2]];
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += a[i] * b[j];
            }
        }
    }
    let (sxx, sxy, sxz) = (h[0][0], h[0][1], h[0][2]);
    let (syx, syy, syz) = (h[1][0], h[1][1], h[1][2]);
    let (szx, szy, szz) = (h[2][0], h[2][1], h[2][2]);
    let nmat = Tensor::new(
        vec![4, 4],
        vec![
            sxx + syy + szz,
            syz - szy,
            szx - sxz,
            sxy - syx,
            syz - szy,
            sxx - syy - szz,
            sxy + syx,
            szx + sxz,
            szx - sxz,
            sxy + syx,
            -sxx + syy - szz,
            syz + szy,
            sxy - syx,
            szx + sxz,
            syz + szy,
            -sxx - syy + szz,
        ],
    )
    .unwrap();
    let (vals, vecs) = symmetric_eig(&nmat).expect("4x4 quaternion matrix");
    let top = vals.len() - 1;
    let q = [vecs.at(0, top), vecs.at(1, top), vecs.at(2, top), vecs.at(3, top)];
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let r = [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ];
    let t = [
        c_t[0] - (r[0][0] * c_s[0] + r[0][1] * c_s[1] + r[0][2] * c_s[2]),
        c_t[1] - (r[1][0] * c_s[0] + r[1][1] * c_s[1] + r[1][2] * c_s[2]),
        c_t[2] - (r[2][0] * c_s[0] + r[2][1] * c_s[1] + r[2][2] * c_s[2]),
    ];
    (r, t)
}

// ---------------------------------------------------------------------------
// full benchmark run
// ---------------------------------------------------------------------------

/// Per-case evaluation of both methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub case_id: String,
    pub region: Region,
    pub proposed: MethodReport,
    pub baseline: MethodReport,
    pub wins_proposed: usize,
    pub wins_baseline: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub total_cases: usize,
    /// Cases where the proposed method's visible-region mean is ≤ the
    /// baseline's.
    pub proposed_wins_visible: usize,
    pub mean_visible_proposed: f64,
    pub mean_visible_baseline: f64,
    pub mean_invisible_proposed: f64,
    pub mean_invisible_baseline: f64,
}

/// Runs completion (with refined initialization) and the ICP baseline on each
/// case and reports vertex-wise errors for both.
pub fn run_benchmark(
    model: &ModelParams,
    cases: &[BenchmarkCase],
    completion_config: &CompletionConfig,
    baseline_config: &IcpConfig,
) -> Result<(Vec<EvalReport>, BenchmarkSummary), BenchError> {
    let reports: Result<Vec<EvalReport>, BenchError> = cases
        .par_iter()
        .map(|case| evaluate_case(model, case, completion_config, baseline_config))
        .collect();
    let reports = reports?;
    let n = reports.len();
    let wins = reports
        .iter()
        .filter(|r| r.proposed.visible_mean <= r.baseline.visible_mean)
        .count();
    let avg = |f: &dyn Fn(&EvalReport) -> f64| -> f64 {
        if n == 0 {
            0.0
        } else {
            reports.iter().map(|r| f(r)).sum::<f64>() / n as f64
        }
    };
    let summary = BenchmarkSummary {
        total_cases: n,
        proposed_wins_visible: wins,
        mean_visible_proposed: avg(&|r| r.proposed.visible_mean),
        mean_visible_baseline: avg(&|r| r.baseline.visible_mean),
        mean_invisible_proposed: avg(&|r| r.proposed.invisible_mean),
        mean_invisible_baseline: avg(&|r| r.baseline.invisible_mean),
    };
    Ok((reports, summary))
}

fn evaluate_case(
    model: &ModelParams,
    case: &BenchmarkCase,
    completion_config: &CompletionConfig,
    baseline_config: &IcpConfig,
) -> Result<EvalReport, BenchError> {
    // proposed: latent completion, mapped back to the observation frame
    let t0 = std::time::Instant::now();
    let mut config = completion_config.clone();
    config.seed = derive_seed(completion_config.seed, case.seed);
    let result = complete(&case.preop, &case.cloud, &case.mask, model, &config, true)?;
    let completed_obs = result.transform.mesh_to_observation(&result.mesh);
    let proposed_dist = vertexwise_error(&completed_obs, &case.ground_truth);
    let seconds_completion = t0.elapsed().as_secs_f64();

    // baseline: align the cloud onto the preoperative mesh, then carry the
    // mesh into the observation frame through the inverse transform
    let t1 = std::time::Instant::now();
    let mut icp_cfg = baseline_config.clone();
    icp_cfg.seed = derive_seed(baseline_config.seed, case.seed);
    let icp = icp_baseline(case.cloud.points(), case.preop.vertices(), &icp_cfg);
    let inv = |x: [f64; 3]| -> [f64; 3] {
        let q = [
            x[0] - icp.translation[0],
            x[1] - icp.translation[1],
            x[2] - icp.translation[2],
        ];
        [
            icp.rotation[0][0] * q[0] + icp.rotation[1][0] * q[1] + icp.rotation[2][0] * q[2],
            icp.rotation[0][1] * q[0] + icp.rotation[1][1] * q[1] + icp.rotation[2][1] * q[2],
            icp.rotation[0][2] * q[0] + icp.rotation[1][2] * q[1] + icp.rotation[2][2] * q[2],
        ]
    };
    let registered = case
        .preop
        .with_vertices(case.preop.vertices().iter().map(|&v| inv(v)).collect())?;
    let baseline_dist = vertexwise_error(&registered, &case.ground_truth);
    let seconds_baseline = t1.elapsed().as_secs_f64();

    let (pv_mean, pv_max, pi_mean, pi_max) = region_report(&proposed_dist, &case.mask);
    let (bv_mean, bv_max, bi_mean, bi_max) = region_report(&baseline_dist, &case.mask);
    let mut wins_proposed = 0;
    let mut wins_baseline = 0;
    let mut ties = 0;
    for (a, b) in proposed_dist.iter().zip(&baseline_dist) {
        match a.partial_cmp(b).unwrap() {
            std::cmp::Ordering::Less => wins_proposed += 1,
            std::cmp::Ordering::Greater => wins_baseline += 1,
            std::cmp::Ordering::Equal => ties += 1,
        }
    }
    Ok(EvalReport {
        case_id: case.id.clone(),
        region: case.region,
        proposed: MethodReport {
            method: PROPOSED_LABEL.to_string(),
            visible_mean: pv_mean,
            visible_max: pv_max,
            invisible_mean: pi_mean,
            invisible_max: pi_max,
            per_vertex: proposed_dist,
            seconds: seconds_completion,
        },
        baseline: MethodReport {
            method: BASELINE_LABEL.to_string(),
            visible_mean: bv_mean,
            visible_max: bv_max,
            invisible_mean: bi_mean,
            invisible_max: bi_max,
            per_vertex: baseline_dist,
            seconds: seconds_baseline,
        },
        wins_proposed,
        wins_baseline,
        ties,
    })
}

/// The summary table as CSV:
/// `case,region,method,visible_mean,visible_max,invisible_mean,invisible_max,seconds`.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "case,region,method,visible_mean,visible_max,invisible_mean,invisible_max,seconds\n",
    );
    for r in reports {
        for m in [&r.proposed, &r.baseline] {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.case_id,
                r.region,
                m.method,
                m.visible_mean,
                m.visible_max,
                m.invisible_mean,
                m.invisible_max,
                m.seconds
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// case persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFiles {
    pub id: String,
    pub region: Region,
    pub preop: String,
    pub ground_truth: String,
    pub cloud: String,
    pub mask: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CasesManifest {
    pub fingerprint: String,
    pub cases: Vec<CaseFiles>,
}

/// Writes every case's meshes, cloud, and mask into `dir` and returns the
/// manifest (also written as `cases.json`).
pub fn save_cases(cases: &[BenchmarkCase], dir: impl AsRef<Path>) -> Result<CasesManifest, BenchError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| BenchError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut files = Vec::new();
    for case in cases {
        let preop = format!("{}-preop.off", case.id);
        let gt = format!("{}-gt.off", case.id);
        let cloud = format!("{}-cloud.xyz", case.id);
        let mask = format!("{}-mask.json", case.id);
        crate::mesh::save_mesh(&case.preop, dir.join(&preop))?;
        crate::mesh::save_mesh(&case.ground_truth, dir.join(&gt))?;
        crate::mesh::save_pointcloud(&case.cloud, dir.join(&cloud))?;
        crate::completion::save_mask(&case.mask, case.preop.fingerprint(), dir.join(&mask))?;
        files.push(CaseFiles {
            id: case.id.clone(),
            region: case.region,
            preop,
            ground_truth: gt,
            cloud,
            mask,
            seed: case.seed,
        });
    }
    let manifest = CasesManifest {
        fingerprint: cases
            .first()
            .map(|c| c.preop.fingerprint().to_string())
            .unwrap_or_default(),
        cases: files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    crate::mesh::write_atomic(&dir.join("cases.json"), json.as_bytes()).map_err(|e| {
        BenchError::Io {
            path: dir.join("cases.json").display().to_string(),
            source: e,
        }
    })?;
    Ok(manifest)
}

/// Loads a benchmark back from a `cases.json` manifest.
pub fn load_cases(manifest_path: impl AsRef<Path>) -> Result<Vec<BenchmarkCase>, BenchError> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(manifest_path).map_err(|e| BenchError::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    let manifest: CasesManifest =
        serde_json::from_str(&text).map_err(|e| BenchError::Manifest(e.to_string()))?;
    let mut cases = Vec::new();
    for f in &manifest.cases {
        let preop = crate::mesh::load_mesh(dir.join(&f.preop))?;
        let ground_truth = crate::mesh::load_mesh(dir.join(&f.ground_truth))?;
        if ground_truth.fingerprint() != preop.fingerprint() {
            return Err(BenchError::Manifest(format!(
                "case {}: ground truth topology differs from preop",
                f.id
            )));
        }
        let cloud = crate::mesh::load_pointcloud(dir.join(&f.cloud))?;
        let mask = crate::completion::load_mask(dir.join(&f.mask), preop.fingerprint())?;
        cases.push(BenchmarkCase {
            id: f.id.clone(),
            preop,
            ground_truth,
            region: f.region,
            cloud,
            mask,
            seed: f.seed,
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcvae::Architecture;
    use crate::mesh::icosphere;
    use crate::rng::standard_normal;

    #[test]
    fn vertexwise_identical_is_zero() {
        let m = icosphere(1).unwrap();
        for v in vertexwise_error(&m, &m) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn vertexwise_uniform_offset() {
        let m = icosphere(1).unwrap();
        let d = 0.1;
        let moved = m
            .with_vertices(m.vertices().iter().map(|v| [v[0] + d, v[1], v[2]]).collect())
            .unwrap();
        for v in vertexwise_error(&m, &moved) {
            assert!((v - d).abs() < 1e-12, "value {v}");
        }
    }

    #[test]
    fn vertexwise_matches_double_loop_oracle() {
        let mut rng = rng_from_seed(61);
        let base = icosphere(0).unwrap();
        let bump = |rng: &mut rand_chacha::ChaCha8Rng, m: &Mesh| -> Mesh {
            m.with_vertices(
                m.vertices()
                    .iter()
                    .map(|v| {
                        [
                            v[0] + 0.2 * standard_normal(rng),
                            v[1] + 0.2 * standard_normal(rng),
                            v[2] + 0.2 * standard_normal(rng),
                        ]
                    })
                    .collect(),
            )
            .unwrap()
        };
        for _ in 0..5 {
            let a = bump(&mut rng, &base);
            let b = bump(&mut rng, &base);
            let fast = vertexwise_error(&a, &b);

            // oracle, straight from the stated rule
            let n = a.n_vertices();
            let mut sums = vec![0.0f64; n];
            let mut counts = vec![0usize; n];
            for i in 0..n {
                let mut best = f64::INFINITY;
                for j in 0..b.n_vertices() {
                    best = best.min(dist(a.vertices()[i], b.vertices()[j]));
                }
                sums[i] += best;
                counts[i] += 1;
            }
            for j in 0..b.n_vertices() {
                let mut best = f64::INFINITY;
                let mut arg = 0usize;
                for i in 0..n {
                    let d = dist(b.vertices()[j], a.vertices()[i]);
                    if d < best {
                        best = d;
                        arg = i;
                    }
                }
                sums[arg] += best;
                counts[arg] += 1;
            }
            let values: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
            for (i, nbrs) in a.topology().neighbors().iter().enumerate() {
                let mut acc = values[i];
                for &j in nbrs {
                    acc += values[j];
                }
                let expect = acc / (nbrs.len() + 1) as f64;
                assert!((fast[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vertexwise_rigid_invariance() {
        let mut rng = rng_from_seed(62);
        let a = icosphere(1).unwrap();
        let b = a
            .with_vertices(
                a.vertices()
                    .iter()
                    .map(|v| [v[0] * 1.2, v[1] * 0.9, v[2] + 0.05])
                    .collect(),
            )
            .unwrap();
        let base = vertexwise_error(&a, &b);
        let rot = random_rotation(&mut rng);
        let shift = [0.4, -0.6, 1.0];
        let xf = |m: &Mesh| -> Mesh {
            m.with_vertices(
                m.vertices()
                    .iter()
                    .map(|v| {
                        let r = apply_rt(&rot, &shift, *v);
                        r
                    })
                    .collect(),
            )
            .unwrap()
        };
        let moved = vertexwise_error(&xf(&a), &xf(&b));
        for (x, y) in base.iter().zip(&moved) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn region_report_examples() {
        let mask = SelectionMask {
            indices: vec![0, 1, 2],
            provenance: "t".into(),
        };
        let constant = vec![0.7; 10];
        let (vm, vx, im, ix) = region_report(&constant, &mask);
        for v in [vm, vx, im, ix] {
            assert!((v - 0.7).abs() < 1e-15);
        }

        let mut field = vec![1.0; 10];
        for &i in &mask.indices {
            field[i] = 0.0;
        }
        let (vm, _, im, _) = region_report(&field, &mask);
        assert_eq!((vm, im), (0.0, 1.0));

        // partition means recombine into the global mean
        let mut rng = rng_from_seed(9);
        let field: Vec<f64> = (0..10).map(|_| standard_normal(&mut rng).abs()).collect();
        let (vm, _, im, _) = region_report(&field, &mask);
        let global: f64 = field.iter().sum::<f64>() / 10.0;
        let recombined = (vm * 3.0 + im * 7.0) / 10.0;
        assert!((global - recombined).abs() < 1e-12);
    }

    #[test]
    fn icp_identity_case() {
        let m = icosphere(1).unwrap();
        let cfg = IcpConfig {
            restarts: 1,
            ..IcpConfig::default()
        };
        let result = icp_baseline(m.vertices(), m.vertices(), &cfg);
        assert!(result.final_error < 1e-20);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((result.rotation[i][j] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn orthogonal_fit_recovers_exact_rotation() {
        let mut rng = rng_from_seed(70);
        for _ in 0..10 {
            let q = random_rotation(&mut rng);
            let shift = [
                standard_normal(&mut rng),
                standard_normal(&mut rng),
                standard_normal(&mut rng),
            ];
            let pairs: Vec<([f64; 3], [f64; 3])> = (0..20)
                .map(|_| {
                    let p = [
                        standard_normal(&mut rng),
                        standard_normal(&mut rng),
                        standard_normal(&mut rng),
                    ];
                    (p, apply_rt(&q, &shift, p))
                })
                .collect();
            let (r, t) = orthogonal_fit(&pairs);
            for i in 0..3 {
                assert!((t[i] - shift[i]).abs() < 1e-9);
                for j in 0..3 {
                    assert!((r[i][j] - q[i][j]).abs() < 1e-9, "rotation mismatch");
                }
            }
        }
    }

    #[test]
    fn icp_recovers_known_rotation() {
        let mut rng = rng_from_seed(71);
        let m = icosphere(1).unwrap();
        // strongly asymmetric shape: anisotropic scaling plus a one-sided bulge
        // so flipped alignments are clearly worse
        let src: Vec<[f64; 3]> = m
            .vertices()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let s = 1.0 + 0.3 * ((i * 37 % 11) as f64 / 11.0);
                let bulge = 1.0 + 1.2 * (v[0].max(0.0)).powi(2) + 0.6 * (v[1].max(0.0));
                [v[0] * s * 1.4 * bulge, v[1] * s * bulge, v[2] * s * 0.7]
            })
            .collect();
        let q = random_rotation(&mut rng);
        let shift = [0.2, -0.5, 0.8];
        let tgt: Vec<[f64; 3]> = src.iter().map(|&p| apply_rt(&q, &shift, p)).collect();
        let cfg = IcpConfig {
            restarts: 32,
            seed: 5,
            ..IcpConfig::default()
        };
        let result = icp_baseline(&src, &tgt, &cfg);
        assert!(result.final_error < 1e-12, "error {:e}", result.final_error);
        // angular deviation of recovered rotation from the true one
        let mut trace = 0.0;
        for i in 0..3 {
            for k in 0..3 {
                trace += result.rotation[i][k] * q[i][k];
            }
        }
        let angle = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-6, "angle {angle}");
        for h in result.history.windows(2) {
            assert!(h[1] <= h[0] + 1e-12, "error increased: {h:?}");
        }
    }

    #[test]
    fn icp_handles_coplanar_points() {
        // coplanar source/target, rotation in-plane
        let src: Vec<[f64; 3]> = (0..12)
            .map(|i| {
                let a = i as f64 * 0.5;
                [a.cos() * (1.0 + 0.1 * i as f64), a.sin(), 0.0]
            })
            .collect();
        let q = rotation_z(0.4);
        let tgt: Vec<[f64; 3]> = src.iter().map(|&p| apply_rt(&q, &[0.1, 0.2, 0.0], p)).collect();
        let cfg = IcpConfig {
            restarts: 8,
            seed: 3,
            ..IcpConfig::default()
        };
        let result = icp_baseline(&src, &tgt, &cfg);
        assert!(result.final_error < 1e-12);
        let det = det3(&result.rotation);
        assert!((det - 1.0).abs() < 1e-9, "det {det}");
    }

    fn rotation_z(a: f64) -> [[f64; 3]; 3] {
        [
            [a.cos(), -a.sin(), 0.0],
            [a.sin(), a.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ]
    }

    fn det3(m: &[[f64; 3]; 3]) -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[test]
    fn benchmark_generation() {
        let base = icosphere(1).unwrap();
        let pop = crate::spectral::synth_population(&base, 5, &PerturbRanges::default(), 77).unwrap();
        let deform = PerturbRanges {
            low: [0.9, 1.1],
            high: [0.85, 1.15],
            high_index_cap: 30,
        };
        let cases = make_benchmark(&pop, &deform, 123, 40).unwrap();
        assert_eq!(cases.len(), 15);
        for case in &cases {
            assert_eq!(case.cloud.len(), case.mask.len());
            // cloud points lie exactly on ground-truth vertices
            for (p, &i) in case.cloud.points().iter().zip(&case.mask.indices) {
                assert_eq!(*p, case.ground_truth.vertices()[i]);
            }
        }
        let again = make_benchmark(&pop, &deform, 123, 40).unwrap();
        for (a, b) in cases.iter().zip(&again) {
            assert_eq!(a.ground_truth.vertices(), b.ground_truth.vertices());
            assert_eq!(a.mask.indices, b.mask.indices);
        }

        // zero-magnitude deformation → ground truth equals preop
        let identity = PerturbRanges {
            low: [1.0, 1.0],
            high: [1.0, 1.0],
            high_index_cap: 30,
        };
        let cases = make_benchmark(&pop[..1], &identity, 5, 40).unwrap();
        for case in &cases {
            for (a, b) in case.preop.vertices().iter().zip(case.ground_truth.vertices()) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cases_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let base = icosphere(1).unwrap();
        let pop = crate::spectral::synth_population(&base, 1, &PerturbRanges::default(), 3).unwrap();
        let deform = PerturbRanges {
            low: [0.92, 1.08],
            high: [0.9, 1.1],
            high_index_cap: 30,
        };
        let cases = make_benchmark(&pop, &deform, 9, 25).unwrap();
        save_cases(&cases, dir.path()).unwrap();
        let back = load_cases(dir.path().join("cases.json")).unwrap();
        assert_eq!(back.len(), cases.len());
        for (a, b) in cases.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask.indices, b.mask.indices);
            assert_eq!(a.cloud.points(), b.cloud.points());
            assert_eq!(a.ground_truth.vertices(), b.ground_truth.vertices());
        }
    }

    #[test]
    fn run_benchmark_accounting() {
        let base = icosphere(1).unwrap();
        let model = crate::gcvae::ModelParams::init(
            Architecture {
                channels: vec![6, 8],
                latent: 4,
                m: 2,
                ..Architecture::default()
            },
            base.topology().clone(),
            17,
        );
        let deform = PerturbRanges {
            low: [0.95, 1.05],
            high: [0.95, 1.05],
            high_index_cap: 30,
        };
        let cases = make_benchmark(&[base.clone()], &deform, 31, 20).unwrap();
        let completion = CompletionConfig {
            iterations: 10,
            refine_iterations: 3,
            ..CompletionConfig::default()
        };
        let icp = IcpConfig {
            restarts: 2,
            max_iterations: 30,
            ..IcpConfig::default()
        };
        let (reports, summary) = run_benchmark(&model, &cases, &completion, &icp).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(summary.total_cases, 3);
        for r in &reports {
            assert_eq!(
                r.wins_proposed + r.wins_baseline + r.ties,
                base.n_vertices(),
                "win accounting must partition the vertex set"
            );
            assert!(r.proposed.per_vertex.iter().all(|v| *v >= 0.0));
            assert!(r.baseline.per_vertex.iter().all(|v| *v >= 0.0));
        }
        let csv = summary_csv(&reports);
        assert!(csv.lines().count() == 1 + 2 * reports.len());
        assert!(csv.contains(BASELINE_LABEL));
    }
}
