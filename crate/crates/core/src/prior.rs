//! Edge-preferring penalty functions and the conductivity-dependent prior
//! matrix H(sigma).
//!
//! H is the stiffness matrix of the diffusion operator with coefficient
//! c(|grad sigma|) = r'(t)/t, assembled element by element (sigma is
//! piecewise linear, so the gradient is constant per tet). The un-eliminated
//! matrix satisfies grad R(sigma) = H(sigma) sigma for the penalty
//! R(sigma) = sum_K vol(K) r(|grad sigma|_K); invertibility comes from a
//! homogeneous Dirichlet condition on the electrode nodes.

use std::sync::OnceLock;

use nalgebra::DVector;

use crate::error::{EitError, Result};
use crate::fem_cem::{stiffness_triplets, Conductivity, ElementGeometry};
use crate::mesh::TetMesh;
use crate::sparse::{SparseCholesky, SparseMat};

/// Default edge threshold for total variation.
pub const DEFAULT_TV_THRESHOLD: f64 = 1e-6;
/// Default edge threshold for Perona-Malik.
pub const DEFAULT_PM_THRESHOLD: f64 = 5e-3;

/// Edge-preferring penalty r(t) on the gradient magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EdgeFunction {
    /// Smoothed total variation, r(t) = sqrt(T^2 + t^2).
    TotalVariation { threshold: f64 },
    /// Perona-Malik, r(t) = T^2/2 log(1 + (t/T)^2).
    PeronaMalik { threshold: f64 },
    /// Quadratic penalty r(t) = t^2/2; weight identically one. Testing aid.
    Quadratic,
}

impl EdgeFunction {
    pub fn total_variation() -> Self {
        EdgeFunction::TotalVariation {
            threshold: DEFAULT_TV_THRESHOLD,
        }
    }

    pub fn perona_malik() -> Self {
        EdgeFunction::PeronaMalik {
            threshold: DEFAULT_PM_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EdgeFunction::TotalVariation { threshold } | EdgeFunction::PeronaMalik { threshold } => {
                if !(threshold > 0.0) {
                    return Err(EitError::InvalidParameter(format!(
                        "edge threshold must be positive, got {threshold}"
                    )));
                }
            }
            EdgeFunction::Quadratic => {}
        }
        Ok(())
    }

    /// Penalty value r(t), t >= 0.
    pub fn penalty(&self, t: f64) -> f64 {
        match *self {
            EdgeFunction::TotalVariation { threshold } => (threshold * threshold + t * t).sqrt(),
            EdgeFunction::PeronaMalik { threshold } => {
                0.5 * threshold * threshold * (t / threshold).powi(2).ln_1p()
            }
            EdgeFunction::Quadratic => 0.5 * t * t,
        }
    }

    /// Diffusion weight c(t) = r'(t)/t, extended by its limit at t = 0.
    pub fn weight(&self, t: f64) -> f64 {
        match *self {
            EdgeFunction::TotalVariation { threshold } => {
                1.0 / (threshold * threshold + t * t).sqrt()
            }
            EdgeFunction::PeronaMalik { threshold } => 1.0 / (1.0 + (t / threshold).powi(2)),
            EdgeFunction::Quadratic => 1.0,
        }
    }
}

/// Weight c(|grad sigma|) on the gradient magnitude `t`.
pub fn edge_weight(edge_fn: &EdgeFunction, t: f64) -> f64 {
    edge_fn.weight(t)
}

/// Total penalty R(sigma) = sum_K vol(K) r(|grad sigma|_K); the independent
/// scalar whose gradient the prior matrix reproduces.
pub fn penalty_value(mesh: &TetMesh, sigma: &DVector<f64>, edge_fn: &EdgeFunction) -> f64 {
    let geom = ElementGeometry::new(mesh);
    let mut total = 0.0;
    for k in 0..mesh.num_tets() {
        let t = gradient_magnitude(mesh, &geom, sigma, k);
        total += geom.volumes[k] * edge_fn.penalty(t);
    }
    total
}

fn gradient_magnitude(
    mesh: &TetMesh,
    geom: &ElementGeometry,
    sigma: &DVector<f64>,
    k: usize,
) -> f64 {
    let tet = mesh.tet(k);
    let g = &geom.grads[k];
    let mut grad = [0.0; 3];
    for a in 0..4 {
        let s = sigma[tet[a]];
        for d in 0..3 {
            grad[d] += s * g[a][d];
        }
    }
    (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt()
}

/// Un-eliminated prior matrix H(sigma): singular (constants are in the null
/// space) but exactly the gradient map of the penalty.
pub fn assemble_h_raw(
    mesh: &TetMesh,
    sigma: &Conductivity,
    edge_fn: &EdgeFunction,
) -> Result<SparseMat> {
    edge_fn.validate()?;
    if sigma.len() != mesh.num_nodes() {
        return Err(EitError::Mismatch(format!(
            "conductivity has {} values for {} mesh nodes",
            sigma.len(),
            mesh.num_nodes()
        )));
    }
    let geom = ElementGeometry::new(mesh);
    let s = sigma.values();
    let triplets = stiffness_triplets(mesh, &geom, |k| {
        edge_fn.weight(gradient_magnitude(mesh, &geom, s, k))
    });
    SparseMat::from_triplets(mesh.num_nodes(), mesh.num_nodes(), &triplets)
}

/// Sparse symmetric positive definite prior matrix with homogeneous
/// Dirichlet elimination (identity rows/columns) on the given node set.
pub struct PriorMatrix {
    matrix: SparseMat,
    dirichlet: Vec<usize>,
    factor: OnceLock<SparseCholesky>,
}

impl PriorMatrix {
    pub fn matrix(&self) -> &SparseMat {
        &self.matrix
    }

    pub fn dirichlet_nodes(&self) -> &[usize] {
        &self.dirichlet
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn factorize(&self) -> Result<&SparseCholesky> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let f = self.matrix.cholesky().map_err(|e| {
            EitError::Solve(format!(
                "prior matrix factorization failed (invalid sigma or empty Dirichlet set?): {e}"
            ))
        })?;
        let _ = self.factor.set(f);
        Ok(self.factor.get().unwrap())
    }

    /// w = H^-1 v through the cached sparse factorization.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(EitError::Mismatch(format!(
                "vector of length {} against prior matrix of size {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(self.factorize()?.solve_vec(v))
    }
}

/// Assemble H(sigma) and eliminate the Dirichlet rows/columns.
pub fn assemble_h(
    mesh: &TetMesh,
    sigma: &Conductivity,
    edge_fn: &EdgeFunction,
    dirichlet_nodes: &[usize],
) -> Result<PriorMatrix> {
    if dirichlet_nodes.is_empty() {
        return Err(EitError::InvalidParameter(
            "empty Dirichlet set: H(sigma) would be singular".into(),
        ));
    }
    let n = mesh.num_nodes();
    let mut is_dirichlet = vec![false; n];
    for &j in dirichlet_nodes {
        if j >= n {
            return Err(EitError::InvalidParameter(format!(
                "Dirichlet node {j} out of range for {n} nodes"
            )));
        }
        is_dirichlet[j] = true;
    }
    let raw = assemble_h_raw(mesh, sigma, edge_fn)?;
    let mut triplets: Vec<(usize, usize, f64)> = raw
        .triplets()
        .into_iter()
        .filter(|&(i, j, _)| !is_dirichlet[i] && !is_dirichlet[j])
        .collect();
    for (j, &d) in is_dirichlet.iter().enumerate() {
        if d {
            triplets.push((j, j, 1.0));
        }
    }
    let matrix = SparseMat::from_triplets(n, n, &triplets)?;
    let mut dirichlet: Vec<usize> = dirichlet_nodes.to_vec();
    dirichlet.sort_unstable();
    dirichlet.dedup();
    Ok(PriorMatrix {
        matrix,
        dirichlet,
        factor: OnceLock::new(),
    })
}

/// Convenience: H(sigma) with the Dirichlet set fixed to the electrode
/// nodes, the choice used by the reconstruction loop.
pub fn assemble_h_on_electrodes(
    mesh: &TetMesh,
    sigma: &Conductivity,
    edge_fn: &EdgeFunction,
) -> Result<PriorMatrix> {
    assemble_h(mesh, sigma, edge_fn, &mesh.all_electrode_nodes())
}
