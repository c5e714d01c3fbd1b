//! Surface completion from partial point clouds.
//!
//! A fixed-topology triangle-mesh pipeline: meshes are brought onto a shared
//! icosphere topology by an optimization-based remesher, a graph-convolutional
//! variational autoencoder is trained on the resulting population (with
//! frequency-domain data augmentation), and a partial point cloud is completed
//! by optimizing the latent code of the generator jointly with a rigid
//! transform of the observation.
//!
//! Modules:
//! - [`mesh`]: mesh/point-cloud types, icosphere construction, OFF/XYZ I/O
//! - [`numerics`]: tensors, reverse-mode gradients, symmetric eigensolver, Adam
//! - [`spectral`]: graph-Laplacian Fourier analysis and spectral augmentation
//! - [`remesh`]: topology-consistent remeshing onto an icosphere template
//! - [`gcvae`]: the graph-convolutional VAE (model, losses, training, checkpoints)
//! - [`completion`]: latent + rigid-transform optimization against a point cloud
//! - [`evalbench`]: synthetic benchmark, vertex-wise error metric, ICP baseline

pub mod completion;
pub mod evalbench;
pub mod gcvae;
pub mod gradcheck;
pub mod mesh;
pub mod numerics;
pub mod remesh;
pub mod rng;
pub mod spectral;

pub use mesh::{Mesh, PointCloud, Topology};
pub use numerics::{AdamState, Tape, Tensor, VarId};
pub use spectral::{PerturbationSpec, SpectralBasis};
