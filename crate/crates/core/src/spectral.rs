//! Graph-Laplacian Fourier analysis of meshes and randomized frequency-domain
//! augmentation.
//!
//! The un-normalized Laplacian `L = D − A` of a connected mesh has orthonormal
//! eigenvectors (columns of `U`) that act as the mesh's Fourier basis: vertex
//! coordinates transform as `X̂ = UᵀX` and back as `X = UX̂`. Deforming a shape
//! amounts to scaling a few rows of `X̂` and transforming back. The basis
//! depends only on connectivity, so it is computed once per topology
//! fingerprint and cached.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{Mesh, MeshError, Topology};
use crate::numerics::{matmul, symmetric_eig, NumericsError, Tensor};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Error)]
pub enum SpectralError {
    #[error("mesh is disconnected ({reached} of {total} vertices reachable)")]
    Disconnected { reached: usize, total: usize },
    #[error("basis fingerprint {basis} does not match topology fingerprint {topology}")]
    FingerprintMismatch { basis: String, topology: String },
    #[error("augmented mesh has non-finite coordinates")]
    DegenerateOutput,
    #[error(
        "topology with {n} vertices is too small for four perturbed frequencies (need at least {min})"
    )]
    TooSmall { n: usize, min: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Cached eigendecomposition of one topology's graph Laplacian.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    fingerprint: String,
    eigenvectors: Tensor,
    eigenvalues: Vec<f64>,
}

impl SpectralBasis {
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// `U`: columns are eigenvectors, ordered by ascending eigenvalue.
    pub fn eigenvectors(&self) -> &Tensor {
        &self.eigenvectors
    }

    /// Eigenvalues ascending; the first is ~0 with a constant eigenvector.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Un-normalized graph Laplacian `L = D − A` as a dense symmetric tensor.
///
/// Rejects disconnected meshes: a repeated near-zero eigenvalue would make
/// the lowest-frequency component ambiguous.
pub fn graph_laplacian(topology: &Topology) -> Result<Tensor, SpectralError> {
    check_connected(topology)?;
    let n = topology.n_vertices();
    let mut data = vec![0.0f64; n * n];
    for &[i, j] in topology.edges() {
        data[i * n + i] += 1.0;
        data[j * n + j] += 1.0;
        data[i * n + j] = -1.0;
        data[j * n + i] = -1.0;
    }
    Ok(Tensor::new(vec![n, n], data)?)
}

fn check_connected(topology: &Topology) -> Result<(), SpectralError> {
    let n = topology.n_vertices();
    if n == 0 {
        return Err(SpectralError::Disconnected {
            reached: 0,
            total: 0,
        });
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut reached = 1;
    while let Some(v) = stack.pop() {
        for &w in &topology.neighbors()[v] {
            if !seen[w] {
                seen[w] = true;
                reached += 1;
                stack.push(w);
            }
        }
    }
    if reached != n {
        return Err(SpectralError::Disconnected { reached, total: n });
    }
    Ok(())
}

/// Computes the basis directly, bypassing the cache. This is the slow path
/// that the cache exists to avoid; it is public so callers can compare the
/// two paths.
pub fn compute_basis(topology: &Topology) -> Result<SpectralBasis, SpectralError> {
    let lap = graph_laplacian(topology)?;
    let (eigenvalues, eigenvectors) = symmetric_eig(&lap)?;
    Ok(SpectralBasis {
        fingerprint: topology.fingerprint().to_string(),
        eigenvectors,
        eigenvalues,
    })
}

type CacheSlot = Arc<OnceLock<Result<Arc<SpectralBasis>, SpectralError>>>;

fn basis_cache() -> &'static Mutex<HashMap<String, CacheSlot>> {
    static CACHE: OnceLock<Mutex<HashMap<String, CacheSlot>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Basis for a topology, cached by fingerprint. Concurrent misses for the
/// same topology compute the decomposition once.
pub fn spectral_basis(topology: &Topology) -> Result<Arc<SpectralBasis>, SpectralError> {
    let slot = {
        let mut map = basis_cache().lock().expect("basis cache poisoned");
        map.entry(topology.fingerprint().to_string())
            .or_default()
            .clone()
    };
    slot.get_or_init(|| compute_basis(topology).map(Arc::new))
        .clone()
}

/// Fourier transform of the vertex coordinates: `X̂ = UᵀX`, one coefficient
/// row per frequency.
pub fn fourier(mesh: &Mesh, basis: &SpectralBasis) -> Result<Tensor, SpectralError> {
    check_basis(mesh.topology(), basis)?;
    let x = Tensor::from_rows3(mesh.vertices());
    let ut = basis.eigenvectors().transposed();
    matmul_checked(&ut, &x)
}

/// Inverse Fourier transform: `X = UX̂` on the basis's topology.
pub fn inverse_fourier(
    coeffs: &Tensor,
    basis: &SpectralBasis,
    topology: &Arc<Topology>,
) -> Result<Mesh, SpectralError> {
    check_basis(topology, basis)?;
    let x = matmul_checked(basis.eigenvectors(), coeffs)?;
    mesh_from_tensor(&x, topology)
}

fn matmul_checked(a: &Tensor, b: &Tensor) -> Result<Tensor, SpectralError> {
    Ok(matmul(a, b)?)
}

fn mesh_from_tensor(x: &Tensor, topology: &Arc<Topology>) -> Result<Mesh, SpectralError> {
    let rows = x.to_rows3();
    Mesh::new(rows, topology.clone()).map_err(|e| match e {
        MeshError::NonFiniteCoordinate { .. } => SpectralError::DegenerateOutput,
        other => panic!("internal mesh construction error: {other}"),
    })
}

fn check_basis(topology: &Topology, basis: &SpectralBasis) -> Result<(), SpectralError> {
    if topology.fingerprint() != basis.fingerprint() {
        return Err(SpectralError::FingerprintMismatch {
            basis: basis.fingerprint().to_string(),
            topology: topology.fingerprint().to_string(),
        });
    }
    Ok(())
}

/// Multiplier ranges for the four perturbed frequencies; part of dataset
/// manifests, hence serializable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerturbRanges {
    /// Uniform range for the one perturbed low frequency (index 1, 2, or 3).
    pub low: [f64; 2],
    /// Uniform range for the three perturbed high frequencies.
    pub high: [f64; 2],
    /// Highest spectral index eligible for high-frequency perturbation
    /// (clamped to n − 1). Extreme frequencies produce spiky artifacts.
    pub high_index_cap: usize,
}

impl Default for PerturbRanges {
    fn default() -> Self {
        PerturbRanges {
            low: [0.7, 1.3],
            high: [0.5, 1.5],
            high_index_cap: 300,
        }
    }
}

/// One concrete augmentation: which four frequencies move and by how much.
///
/// Index 0 (the constant component) is never perturbed; the seed fixes the
/// multipliers drawn from the ranges, so applying the same spec twice yields
/// bitwise-identical meshes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerturbationSpec {
    pub low_index: usize,
    pub low_range: [f64; 2],
    pub high_indices: [usize; 3],
    pub high_range: [f64; 2],
    pub seed: u64,
}

impl PerturbationSpec {
    /// Draws the perturbed indices for a topology with `n` vertices: the low
    /// index uniformly from {1, 2, 3} and three distinct high indices from
    /// `[4, min(n − 1, cap)]`.
    pub fn sample(n: usize, ranges: &PerturbRanges, seed: u64) -> Result<Self, SpectralError> {
        let hi = ranges.high_index_cap.min(n.saturating_sub(1));
        if n < 8 || hi < 6 {
            return Err(SpectralError::TooSmall { n, min: 8 });
        }
        let mut rng = rng_from_seed(seed);
        let low_index = rng.random_range(1..=3usize);
        let mut high_indices = [0usize; 3];
        let mut drawn = 0;
        while drawn < 3 {
            let cand = rng.random_range(4..=hi);
            if !high_indices[..drawn].contains(&cand) {
                high_indices[drawn] = cand;
                drawn += 1;
            }
        }
        Ok(PerturbationSpec {
            low_index,
            low_range: ranges.low,
            high_indices,
            high_range: ranges.high,
            seed: derive_seed(seed, 0x5eed),
        })
    }

    fn validate(&self, n: usize) -> Result<(), SpectralError> {
        let mut all = vec![self.low_index];
        all.extend_from_slice(&self.high_indices);
        for &i in &all {
            if i == 0 || i >= n {
                return Err(SpectralError::TooSmall { n, min: 8 });
            }
        }
        Ok(())
    }

    /// The per-frequency multiplier vector ξ (all ones except four entries).
    pub fn xi(&self, n: usize) -> Result<Vec<f64>, SpectralError> {
        self.validate(n)?;
        let mut rng = rng_from_seed(self.seed);
        let mut xi = vec![1.0f64; n];
        xi[self.low_index] = draw_uniform(&mut rng, self.low_range);
        for &i in &self.high_indices {
            xi[i] = draw_uniform(&mut rng, self.high_range);
        }
        Ok(xi)
    }
}

fn draw_uniform(rng: &mut rand_chacha::ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Applies `X† = U ξ UᵀX` with the spec's four perturbed frequencies.
pub fn spectral_augment(
    mesh: &Mesh,
    basis: &SpectralBasis,
    spec: &PerturbationSpec,
) -> Result<Mesh, SpectralError> {
    let mut coeffs = fourier(mesh, basis)?;
    let xi = spec.xi(basis.n())?;
    {
        let data = coeffs.data_mut();
        for (i, &scale) in xi.iter().enumerate() {
            if scale != 1.0 {
                for j in 0..3 {
                    data[i * 3 + j] *= scale;
                }
            }
        }
    }
    inverse_fourier(&coeffs, basis, mesh.topology())
}

/// The no-cache path: recomputes the Fourier operators for this one call.
pub fn spectral_augment_recompute(
    mesh: &Mesh,
    spec: &PerturbationSpec,
) -> Result<Mesh, SpectralError> {
    let basis = compute_basis(mesh.topology())?;
    spectral_augment(mesh, &basis, spec)
}

/// `count` independent augmentations of `base`, with per-sample seeds derived
/// from `seed`. Deterministic regardless of thread scheduling.
pub fn synth_population(
    base: &Mesh,
    count: usize,
    ranges: &PerturbRanges,
    seed: u64,
) -> Result<Vec<Mesh>, SpectralError> {
    let basis = spectral_basis(base.topology())?;
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = PerturbationSpec::sample(base.n_vertices(), ranges, derive_seed(seed, i as u64))?;
            spectral_augment(base, &basis, &spec)
        })
        .collect()
}

/// Manifest describing a synthesized mesh population on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub base_mesh: String,
    pub seed: u64,
    pub count: usize,
    pub ranges: PerturbRanges,
    pub samples: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{centroid, icosphere, Topology};
    use std::time::Instant;

    fn triangle() -> Arc<Topology> {
        Arc::new(Topology::build(3, vec![[0, 1, 2]]).unwrap())
    }

    #[test]
    fn triangle_laplacian() {
        let l = graph_laplacian(&triangle()).unwrap();
        assert_eq!(
            l.data(),
            &[2., -1., -1., -1., 2., -1., -1., -1., 2.]
        );
    }

    #[test]
    fn icosahedron_laplacian_diagonal() {
        let m = icosphere(0).unwrap();
        let l = graph_laplacian(m.topology()).unwrap();
        for i in 0..12 {
            assert_eq!(l.at(i, i), 5.0);
        }
    }

    #[test]
    fn laplacian_annihilates_constants() {
        let m = icosphere(1).unwrap();
        let l = graph_laplacian(m.topology()).unwrap();
        let n = m.n_vertices();
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| l.at(i, j)).sum();
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn disconnected_rejected() {
        let topo = Topology::build(6, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        assert!(matches!(
            graph_laplacian(&topo),
            Err(SpectralError::Disconnected { .. })
        ));
    }

    #[test]
    fn zero_eigenvalue_simple_with_constant_vector() {
        let m = icosphere(2).unwrap();
        let basis = spectral_basis(m.topology()).unwrap();
        assert!(basis.eigenvalues()[0].abs() <= 1e-9);
        assert!(basis.eigenvalues()[1] > 1e-6, "second eigenvalue should be positive");
        let n = basis.n();
        let expect = 1.0 / (n as f64).sqrt();
        let first: Vec<f64> = (0..n).map(|i| basis.eigenvectors().at(i, 0).abs()).collect();
        for v in first {
            assert!((v - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn fourier_round_trip() {
        let m = icosphere(3).unwrap();
        let basis = spectral_basis(m.topology()).unwrap();
        let coeffs = fourier(&m, &basis).unwrap();
        let back = inverse_fourier(&coeffs, &basis, m.topology()).unwrap();
        let mut max_delta = 0.0f64;
        for (a, b) in m.vertices().iter().zip(back.vertices()) {
            for k in 0..3 {
                max_delta = max_delta.max((a[k] - b[k]).abs());
            }
        }
        assert!(max_delta < 1e-9, "round-trip error {max_delta:e}");
    }

    #[test]
    fn centered_mesh_has_zero_dc_row() {
        let m = icosphere(2).unwrap();
        let (centered, _) = crate::mesh::centroid_center(m.vertices());
        let m = m.with_vertices(centered).unwrap();
        let basis = spectral_basis(m.topology()).unwrap();
        let coeffs = fourier(&m, &basis).unwrap();
        for j in 0..3 {
            assert!(coeffs.at(0, j).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_touches_only_dc_row() {
        let m = icosphere(2).unwrap();
        let basis = spectral_basis(m.topology()).unwrap();
        let c0 = fourier(&m, &basis).unwrap();
        let shifted = m
            .with_vertices(
                m.vertices()
                    .iter()
                    .map(|v| [v[0] + 0.3, v[1] - 1.2, v[2] + 0.05])
                    .collect(),
            )
            .unwrap();
        let c1 = fourier(&shifted, &basis).unwrap();
        for i in 1..basis.n() {
            for j in 0..3 {
                assert!(
                    (c0.at(i, j) - c1.at(i, j)).abs() < 1e-9,
                    "row {i} changed under translation"
                );
            }
        }
        let dc_moved: f64 = (0..3).map(|j| (c0.at(0, j) - c1.at(0, j)).abs()).sum();
        assert!(dc_moved > 1e-3);
    }

    fn identity_ranges() -> PerturbRanges {
        PerturbRanges {
            low: [1.0, 1.0],
            high: [1.0, 1.0],
            high_index_cap: 300,
        }
    }

    #[test]
    fn identity_xi_is_identity() {
        let m = icosphere(2).unwrap();
        let basis = spectral_basis(m.topology()).unwrap();
        let spec = PerturbationSpec::sample(m.n_vertices(), &identity_ranges(), 1).unwrap();
        let out = spectral_augment(&m, &basis, &spec).unwrap();
        for (a, b) in m.vertices().iter().zip(out.vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn augment_preserves_centroid_of_centered_input() {
        let m = icosphere(2).unwrap();
        let (centered, _) = crate::mesh::centroid_center(m.vertices());
        let m = m.with_vertices(centered).unwrap();
        let basis = spectral_basis(m.topology()).unwrap();
        let spec = PerturbationSpec::sample(m.n_vertices(), &PerturbRanges::default(), 7).unwrap();
        let out = spectral_augment(&m, &basis, &spec).unwrap();
        let c = centroid(out.vertices());
        assert!((c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() < 1e-9);
        assert_eq!(out.fingerprint(), m.fingerprint());
    }

    #[test]
    fn augment_deterministic_and_linear() {
        let m = icosphere(2).unwrap();
        let basis = spectral_basis(m.topology()).unwrap();
        let spec = PerturbationSpec::sample(m.n_vertices(), &PerturbRanges::default(), 3).unwrap();
        let a = spectral_augment(&m, &basis, &spec).unwrap();
        let b = spectral_augment(&m, &basis, &spec).unwrap();
        assert_eq!(a.vertices(), b.vertices(), "same seed must be bitwise equal");

        let alpha = 2.5;
        let scaled = m
            .with_vertices(m.vertices().iter().map(|v| [v[0] * alpha, v[1] * alpha, v[2] * alpha]).collect())
            .unwrap();
        let a_scaled = spectral_augment(&scaled, &basis, &spec).unwrap();
        for (u, v) in a.vertices().iter().zip(a_scaled.vertices()) {
            for k in 0..3 {
                assert!((u[k] * alpha - v[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cached_equals_recompute() {
        let m = icosphere(1).unwrap();
        let basis = spectral_basis(m.topology()).unwrap();
        let spec = PerturbationSpec::sample(m.n_vertices(), &PerturbRanges::default(), 11).unwrap();
        let cached = spectral_augment(&m, &basis, &spec).unwrap();
        let recomputed = spectral_augment_recompute(&m, &spec).unwrap();
        assert_eq!(cached.vertices(), recomputed.vertices());
    }

    #[test]
    fn cache_hit_is_fast() {
        let m = icosphere(3).unwrap();
        let t0 = Instant::now();
        let _ = spectral_basis(m.topology()).unwrap();
        let cold = t0.elapsed();
        let t1 = Instant::now();
        let _ = spectral_basis(m.topology()).unwrap();
        let warm = t1.elapsed();
        assert!(
            warm.as_secs_f64() < 0.01 * cold.as_secs_f64().max(1e-3),
            "warm {warm:?} vs cold {cold:?}"
        );
    }

    #[test]
    fn population_examples() {
        let m = icosphere(1).unwrap();
        assert!(synth_population(&m, 0, &PerturbRanges::default(), 5)
            .unwrap()
            .is_empty());
        let pop = synth_population(&m, 20, &PerturbRanges::default(), 5).unwrap();
        assert_eq!(pop.len(), 20);
        for s in &pop {
            assert_eq!(s.fingerprint(), m.fingerprint());
        }
        // pairwise distinct
        for i in 0..pop.len() {
            for j in (i + 1)..pop.len() {
                let max_d: f64 = pop[i]
                    .vertices()
                    .iter()
                    .zip(pop[j].vertices())
                    .map(|(a, b)| {
                        let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                    })
                    .fold(0.0, f64::max);
                assert!(max_d > 0.0, "samples {i} and {j} coincide");
            }
        }
        let again = synth_population(&m, 20, &PerturbRanges::default(), 5).unwrap();
        for (a, b) in pop.iter().zip(&again) {
            assert_eq!(a.vertices(), b.vertices());
        }
    }
}
