//! Finite-difference verification of every differentiable component, with a
//! fixed seed per component so results are reproducible. Used by the
//! `gradcheck` CLI subcommand and the acceptance suite.

use std::sync::Arc;

use crate::completion::{completion_objective, SelectionMask};
use crate::gcvae::{density_weights, Architecture, GraphContext, ModelParams};
use crate::mesh::{icosphere, vertex_normals, Mesh, PointCloud};
use crate::numerics::{finite_diff_check, relative_error, NumericsError, Tensor};
use crate::remesh::{chamfer_on_tape, edge_term_on_tape, laplacian_term_on_tape, normal_term_on_tape};
use crate::rng::{rng_from_seed, standard_normal};

#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

pub const COMPONENTS: [&str; 10] = [
    "primitives",
    "feast",
    "recon",
    "kl",
    "chamfer",
    "normal",
    "laplacian",
    "edge",
    "objective",
    "rodrigues",
];

/// Runs one named component check, or all of them for `"all"`.
pub fn run(component: &str) -> Result<Vec<ComponentCheck>, NumericsError> {
    let names: Vec<&str> = if component == "all" {
        COMPONENTS.to_vec()
    } else {
        vec![COMPONENTS
            .iter()
            .find(|c| **c == component)
            .copied()
            .ok_or_else(|| {
                NumericsError::Contract(format!(
                    "unknown gradcheck component '{component}' (expected one of {COMPONENTS:?} or 'all')"
                ))
            })?]
    };
    names.into_iter().map(run_one).collect()
}

fn random_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| standard_normal(rng).tanh()).collect()).unwrap()
}

fn bumpy_mesh(seed: u64) -> Mesh {
    let base = icosphere(1).unwrap();
    let mut rng = rng_from_seed(seed);
    let verts = base
        .vertices()
        .iter()
        .map(|v| {
            let s = 1.0 + 0.25 * standard_normal(&mut rng).tanh();
            [v[0] * s, v[1] * s, v[2] * s]
        })
        .collect();
    base.with_vertices(verts).unwrap()
}

fn run_one(name: &'static str) -> Result<ComponentCheck, NumericsError> {
    let err = match name {
        "primitives" => check_primitives()?,
        "feast" => check_feast()?,
        "recon" => check_recon()?,
        "kl" => check_kl()?,
        "chamfer" => check_mesh_term(name)?,
        "normal" => check_mesh_term(name)?,
        "laplacian" => check_mesh_term(name)?,
        "edge" => check_mesh_term(name)?,
        "objective" => check_objective()?,
        "rodrigues" => check_rodrigues()?,
        _ => unreachable!(),
    };
    let tolerance = match name {
        "recon" => 1e-6,
        "objective" => 1e-4,
        _ => 1e-5,
    };
    Ok(ComponentCheck {
        name,
        max_relative_error: err,
        tolerance,
    })
}

fn check_primitives() -> Result<f64, NumericsError> {
    let mut rng = rng_from_seed(101);
    let mut worst = 0.0f64;
    // one composite program touching every elementwise / reduction / shaping
    // primitive at once
    let a = random_tensor(&mut rng, vec![3, 4]);
    let b = random_tensor(&mut rng, vec![3, 4]);
    let row = random_tensor(&mut rng, vec![1, 4]);
    let col = random_tensor(&mut rng, vec![3, 1]);
    worst = worst.max(finite_diff_check(
        &[a.clone(), b.clone(), row.clone(), col.clone()],
        1e-5,
        |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let d = t.sub(s, ids[1])?;
            let m = t.mul(d, ids[0])?;
            let sc = t.scale(m, 0.7)?;
            let sh = t.add_scalar(sc, 0.2)?;
            let lr = t.leaky_relu(sh, 0.02)?;
            let ar = t.add_row(lr, ids[2])?;
            let mr = t.mul_row(ar, ids[2])?;
            let mc = t.mul_col(mr, ids[3])?;
            let e = t.exp(mc)?;
            let l = t.ln(e)?;
            let p = t.add_scalar(l, 3.0)?;
            let pw = t.powf(p, 0.5)?;
            let soft = t.softmax_rows(pw)?;
            let re = t.reshape(soft, vec![2, 6])?;
            let sl = t.slice_cols(re, 1, 4)?;
            let mr2 = t.mean_rows(sl)?;
            let su = t.sum_all(mr2)?;
            let me = t.mean_all(sl)?;
            t.add(su, me)
        },
    )?);
    // matmul, gather/scatter, grouped sum
    let w = random_tensor(&mut rng, vec![4, 6]);
    let q = random_tensor(&mut rng, vec![5, 2]);
    let x = random_tensor(&mut rng, vec![4, 4]);
    let idx = Arc::new(vec![0usize, 2, 3, 1, 2]);
    let dst = Arc::new(vec![1usize, 0, 2, 2, 1]);
    worst = worst.max(finite_diff_check(
        &[x.clone(), w.clone(), q.clone()],
        1e-5,
        |t, ids| {
            let g = t.gather_rows(ids[0], idx.clone())?;
            let mm = t.matmul(g, ids[1])?;
            let qs = t.softmax_rows(ids[2])?;
            let gw = t.group_weighted_sum(mm, qs, 2)?;
            let sc = t.scatter_add_rows(gw, dst.clone(), 3)?;
            let sq = t.mul(sc, sc)?;
            t.mean_all(sq)
        },
    )?);
    Ok(worst)
}

fn check_feast() -> Result<f64, NumericsError> {
    let mut rng = rng_from_seed(211);
    let mesh = icosphere(0).unwrap();
    let ctx = GraphContext::new(mesh.topology());
    let (cin, cout, m) = (3usize, 4usize, 3usize);
    let x = random_tensor(&mut rng, vec![12, cin]);
    let weights = random_tensor(&mut rng, vec![cin, m * cout]);
    let u = random_tensor(&mut rng, vec![cin, m]);
    let c = random_tensor(&mut rng, vec![1, m]);
    let bias = random_tensor(&mut rng, vec![1, cout]);
    let probe = random_tensor(&mut rng, vec![12, cout]);
    finite_diff_check(&[x, weights, u, c, bias], 1e-5, |t, ids| {
        let x_src = t.gather_rows(ids[0], ctx.src.clone())?;
        let x_dst = t.gather_rows(ids[0], ctx.dst.clone())?;
        let diff = t.sub(x_src, x_dst)?;
        let lin = t.matmul(diff, ids[2])?;
        let logits = t.add_row(lin, ids[3])?;
        let q = t.softmax_rows(logits)?;
        let transformed = t.matmul(x_src, ids[1])?;
        let msg = t.group_weighted_sum(transformed, q, m)?;
        let sums = t.scatter_add_rows(msg, ctx.dst.clone(), ctx.n)?;
        let inv = t.constant(ctx.inv_deg.clone());
        let avg = t.mul_col(sums, inv)?;
        let y = t.add_row(avg, ids[4])?;
        let p = t.constant(probe.clone());
        let weighted = t.mul(y, p)?;
        t.sum_all(weighted)
    })
}

fn check_recon() -> Result<f64, NumericsError> {
    let mesh = bumpy_mesh(303);
    let gamma = density_weights(&mesh).map_err(|e| NumericsError::Contract(e.to_string()))?;
    let target = Tensor::from_rows3(bumpy_mesh(304).vertices());
    let pred = Tensor::from_rows3(mesh.vertices());
    finite_diff_check(&[pred], 1e-5, |t, ids| {
        let tgt = t.constant(target.clone());
        crate::gcvae::recon_on_tape(t, ids[0], tgt, &gamma)
    })
}

fn check_kl() -> Result<f64, NumericsError> {
    let mut rng = rng_from_seed(404);
    let mu = random_tensor(&mut rng, vec![1, 8]);
    let logvar = random_tensor(&mut rng, vec![1, 8]);
    finite_diff_check(&[mu, logvar], 1e-5, |t, ids| {
        crate::gcvae::kl_on_tape(t, ids[0], ids[1])
    })
}

fn check_mesh_term(which: &str) -> Result<f64, NumericsError> {
    let pred = bumpy_mesh(505);
    let target = bumpy_mesh(506);
    let topo = pred.topology().clone();
    let t_verts = Tensor::from_rows3(target.vertices());
    let t_normals = Tensor::from_rows3(
        &vertex_normals(&target).map_err(|e| NumericsError::Contract(e.to_string()))?,
    );
    let x = Tensor::from_rows3(pred.vertices());
    match which {
        "chamfer" => finite_diff_check(&[x], 1e-5, |t, ids| {
            let tv = t.constant(t_verts.clone());
            chamfer_on_tape(t, ids[0], tv)
        }),
        "normal" => finite_diff_check(&[x], 1e-5, |t, ids| {
            normal_term_on_tape(t, ids[0], &t_normals, &t_verts, &topo)
        }),
        "laplacian" => finite_diff_check(&[x], 1e-5, |t, ids| laplacian_term_on_tape(t, ids[0], &topo)),
        "edge" => finite_diff_check(&[x], 1e-5, |t, ids| edge_term_on_tape(t, ids[0], &topo)),
        _ => unreachable!(),
    }
}

fn check_objective() -> Result<f64, NumericsError> {
    let mesh = icosphere(1).unwrap();
    let arch = Architecture {
        channels: vec![6, 8],
        latent: 4,
        m: 2,
        ..Architecture::default()
    };
    let model = ModelParams::init(arch, mesh.topology().clone(), 606);
    let mask = SelectionMask {
        indices: vec![0, 2, 5, 11, 19, 27, 33, 40],
        provenance: "gradcheck".into(),
    };
    let mut rng = rng_from_seed(607);
    let cloud = PointCloud::new(
        (0..10)
            .map(|_| {
                [
                    1.5 * standard_normal(&mut rng),
                    1.5 * standard_normal(&mut rng),
                    1.5 * standard_normal(&mut rng),
                ]
            })
            .collect(),
    )
    .map_err(|e| NumericsError::Contract(e.to_string()))?;
    let z = Tensor::new(vec![1, 4], vec![0.15, -0.3, 0.45, 0.2])?;
    let r = Tensor::new(vec![1, 3], vec![0.2, -0.1, 0.3])?;
    let t = Tensor::new(vec![1, 3], vec![0.05, 0.1, -0.2])?;
    let (_, gz, gr, gt) = completion_objective(&z, &r, &t, &model, &mask, &cloud)
        .map_err(|e| NumericsError::Contract(e.to_string()))?;
    let eval = |z: &Tensor, r: &Tensor, t: &Tensor| -> f64 {
        completion_objective(z, r, t, &model, &mask, &cloud).unwrap().0
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let blocks: [(&Tensor, &Tensor); 3] = [(&z, &gz), (&r, &gr), (&t, &gt)];
    for (which, (base, grad)) in blocks.into_iter().enumerate() {
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += h;
            let mut minus = base.clone();
            minus.data_mut()[k] -= h;
            let (fp, fm) = match which {
                0 => (eval(&plus, &r, &t), eval(&minus, &r, &t)),
                1 => (eval(&z, &plus, &t), eval(&z, &minus, &t)),
                _ => (eval(&z, &r, &plus), eval(&z, &r, &minus)),
            };
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[k], fd));
        }
    }
    Ok(worst)
}

fn check_rodrigues() -> Result<f64, NumericsError> {
    let mut rng = rng_from_seed(707);
    let mut worst = 0.0f64;
    for scale in [1.0, 1e-5] {
        let mut r = random_tensor(&mut rng, vec![1, 3]);
        for v in r.data_mut() {
            *v *= scale;
        }
        let points = random_tensor(&mut rng, vec![6, 3]);
        let probe = random_tensor(&mut rng, vec![6, 3]);
        worst = worst.max(finite_diff_check(&[r, points], 1e-6, |t, ids| {
            let y = t.rotate_points(ids[0], ids[1])?;
            let p = t.constant(probe.clone());
            let w = t.mul(y, p)?;
            t.sum_all(w)
        })?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_components_pass() {
        for check in run("all").unwrap() {
            assert!(
                check.passed(),
                "{}: {:e} >= {:e}",
                check.name,
                check.max_relative_error,
                check.tolerance
            );
        }
    }

    #[test]
    fn unknown_component_rejected() {
        assert!(run("nope").is_err());
    }
}
