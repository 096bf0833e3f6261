//! Complete electrode model forward solver.
//!
//! The discrete unknowns are the interior nodal potential u together with
//! the mean-free electrode potentials written in the basis
//! {e_1 - e_m}_{m=2..M}. For conductivity sigma (piecewise linear, nodal),
//! contact resistances z and a mean-free current pattern I the system reads
//!
//!   [ K(sigma) + B(z)   -D(z) C ] [u]     [  0  ]
//!   [    -C^T D(z)^T   C^T E(z) C ] [beta] = [C^T I]
//!
//! with K the stiffness matrix, B/D/E the electrode boundary mass, load and
//! area terms weighted by 1/z_m, and C the electrode basis matrix. All
//! element integrals of piecewise linear quantities are evaluated exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{EitError, Result};
use crate::mesh::TetMesh;
use crate::sparse::{SparseCholesky, SparseMat};

/// Nodal conductivity, strictly positive everywhere.
#[derive(Clone, Debug)]
pub struct Conductivity {
    values: DVector<f64>,
}

impl Conductivity {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some((j, &v)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(EitError::InvalidParameter(format!(
                "conductivity must be strictly positive; entry {j} is {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(num_nodes: usize, value: f64) -> Result<Self> {
        Self::new(DVector::from_element(num_nodes, value))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }
}

/// Per-electrode contact resistances, strictly positive.
#[derive(Clone, Debug)]
pub struct ContactResistances {
    values: DVector<f64>,
}

impl ContactResistances {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some((m, &v)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(EitError::InvalidParameter(format!(
                "contact resistances must be strictly positive; entry {m} is {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(m: usize, value: f64) -> Result<Self> {
        Self::new(DVector::from_element(m, value))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }
}

/// A set of M-1 linearly independent mean-free current patterns.
#[derive(Clone, Debug)]
pub struct CurrentPatterns {
    m: usize,
    patterns: Vec<DVector<f64>>,
}

impl CurrentPatterns {
    pub fn new(patterns: Vec<DVector<f64>>) -> Result<Self> {
        if patterns.is_empty() {
            return Err(EitError::InvalidParameter("no current patterns given".into()));
        }
        let m = patterns[0].len();
        if patterns.len() + 1 != m {
            return Err(EitError::InvalidParameter(format!(
                "expected M-1 = {} patterns for M = {m} electrodes, got {}",
                m - 1,
                patterns.len()
            )));
        }
        for (i, p) in patterns.iter().enumerate() {
            if p.len() != m {
                return Err(EitError::InvalidParameter(format!(
                    "pattern {i} has length {} instead of {m}",
                    p.len()
                )));
            }
            let scale = p.amax().max(1e-300);
            if p.sum().abs() > 1e-12 * scale {
                return Err(EitError::InvalidParameter(format!(
                    "pattern {i} is not mean-free (sum {})",
                    p.sum()
                )));
            }
        }
        // Linear independence via the rank of the pattern matrix.
        let mat = DMatrix::from_fn(m, m - 1, |r, c| patterns[c][r]);
        let svd = mat.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-12 * smax) {
            return Err(EitError::InvalidParameter(
                "current patterns are linearly dependent".into(),
            ));
        }
        Ok(Self { m, patterns })
    }

    pub fn num_electrodes(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn pattern(&self, i: usize) -> &DVector<f64> {
        &self.patterns[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.patterns.iter()
    }

    /// M x (M-1) matrix with the patterns as columns.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m - 1, |r, c| self.patterns[c][r])
    }
}

/// Interior and electrode potentials for one current pattern.
#[derive(Clone, Debug)]
pub struct ForwardSolution {
    /// Nodal interior potential u.
    pub interior: DVector<f64>,
    /// Mean-free electrode potentials U.
    pub electrode: DVector<f64>,
}

// ---------------------------------------------------------------------------
// Element geometry cache
// ---------------------------------------------------------------------------

/// Per-tet volume and constant P1 basis gradients. The gradient of basis 0
/// is formed as minus the sum of the others, so constants are annihilated
/// exactly.
pub(crate) struct ElementGeometry {
    pub volumes: Vec<f64>,
    pub grads: Vec<[[f64; 3]; 4]>,
}

impl ElementGeometry {
    pub fn new(mesh: &TetMesh) -> Self {
        let nt = mesh.num_tets();
        let mut volumes = Vec::with_capacity(nt);
        let mut grads = Vec::with_capacity(nt);
        for k in 0..nt {
            let [a, b, c, d] = mesh.tet(k);
            let pa = mesh.vertex(a);
            let pb = mesh.vertex(b);
            let pc = mesh.vertex(c);
            let pd = mesh.vertex(d);
            let e1 = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
            let e2 = [pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]];
            let e3 = [pd[0] - pa[0], pd[1] - pa[1], pd[2] - pa[2]];
            let cross = |u: [f64; 3], v: [f64; 3]| {
                [
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ]
            };
            let det = e1[0] * (e2[1] * e3[2] - e2[2] * e3[1])
                - e1[1] * (e2[0] * e3[2] - e2[2] * e3[0])
                + e1[2] * (e2[0] * e3[1] - e2[1] * e3[0]);
            let vol = det / 6.0;
            // grad(lambda_i) = (e_j x e_k) / det for cyclic (i, j, k):
            // normal to the opposite face, scaled so grad(lambda_i).e_i = 1.
            let scale = |v: [f64; 3]| [v[0] / det, v[1] / det, v[2] / det];
            let g1 = scale(cross(e2, e3));
            let g2 = scale(cross(e3, e1));
            let g3 = scale(cross(e1, e2));
            let g0 = [
                -(g1[0] + g2[0] + g3[0]),
                -(g1[1] + g2[1] + g3[1]),
                -(g1[2] + g2[2] + g3[2]),
            ];
            volumes.push(vol);
            grads.push([g0, g1, g2, g3]);
        }
        Self { volumes, grads }
    }
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Stiffness matrix K(sigma), N x N, with the conductivity interpolated
/// linearly on each element (exact one-point quadrature).
pub fn assemble_stiffness(mesh: &TetMesh, sigma: &Conductivity) -> Result<SparseMat> {
    check_sigma(mesh, sigma)?;
    let geom = ElementGeometry::new(mesh);
    let triplets = stiffness_triplets(mesh, &geom, |k| {
        let t = mesh.tet(k);
        let s = sigma.values();
        0.25 * (s[t[0]] + s[t[1]] + s[t[2]] + s[t[3]])
    });
    SparseMat::from_triplets(mesh.num_nodes(), mesh.num_nodes(), &triplets)
}

/// Element-weighted stiffness triplets; `weight(k)` multiplies tet k's
/// unit stiffness contribution.
pub(crate) fn stiffness_triplets(
    mesh: &TetMesh,
    geom: &ElementGeometry,
    weight: impl Fn(usize) -> f64,
) -> Vec<(usize, usize, f64)> {
    let mut triplets = Vec::with_capacity(16 * mesh.num_tets());
    for k in 0..mesh.num_tets() {
        let tet = mesh.tet(k);
        let w = weight(k) * geom.volumes[k];
        let g = &geom.grads[k];
        for a in 0..4 {
            for b in 0..4 {
                let s = w * (g[a][0] * g[b][0] + g[a][1] * g[b][1] + g[a][2] * g[b][2]);
                triplets.push((tet[a], tet[b], s));
            }
        }
    }
    triplets
}

/// P1 mass matrix, N x N. Row sums give each node's volume share, so the
/// total sum reproduces the mesh volume (partition of unity).
pub fn assemble_mass(mesh: &TetMesh) -> Result<SparseMat> {
    let mut triplets = Vec::with_capacity(16 * mesh.num_tets());
    for k in 0..mesh.num_tets() {
        let tet = mesh.tet(k);
        let v = mesh.tet_volume(k);
        for a in 0..4 {
            for b in 0..4 {
                let s = if a == b { v / 10.0 } else { v / 20.0 };
                triplets.push((tet[a], tet[b], s));
            }
        }
    }
    SparseMat::from_triplets(mesh.num_nodes(), mesh.num_nodes(), &triplets)
}

/// Per-electrode boundary data used by assembly and the Jacobian.
pub(crate) struct ElectrodeData {
    /// For each electrode: (triangle nodes, area) per covered triangle.
    pub tris: Vec<Vec<([usize; 3], f64)>>,
    pub areas: Vec<f64>,
}

impl ElectrodeData {
    pub fn new(mesh: &TetMesh) -> Self {
        let m = mesh.num_electrodes();
        let mut tris = Vec::with_capacity(m);
        let mut areas = Vec::with_capacity(m);
        for e in 0..m {
            let list: Vec<([usize; 3], f64)> = mesh
                .electrode(e)
                .iter()
                .map(|&t| (mesh.boundary_tri(t), mesh.boundary_tri_area(t)))
                .collect();
            areas.push(list.iter().map(|(_, a)| a).sum());
            tris.push(list);
        }
        Self { tris, areas }
    }
}

/// Electrode basis coefficient C[m][q] for the basis {e_1 - e_{q+2}}:
/// +1 on electrode 0, -1 on electrode q+1.
#[inline]
pub(crate) fn electrode_basis(m_idx: usize, q: usize) -> f64 {
    let mut c = 0.0;
    if m_idx == 0 {
        c += 1.0;
    }
    if m_idx == q + 1 {
        c -= 1.0;
    }
    c
}

/// The assembled CEM system of size (N + M - 1).
pub struct CemSystem {
    pub matrix: SparseMat,
    pub num_nodes: usize,
    pub num_electrodes: usize,
}

/// Assemble the symmetric positive definite CEM block system.
pub fn assemble_cem_system(
    mesh: &TetMesh,
    sigma: &Conductivity,
    z: &ContactResistances,
) -> Result<CemSystem> {
    check_sigma(mesh, sigma)?;
    check_z(mesh, z)?;
    let n = mesh.num_nodes();
    let m = mesh.num_electrodes();
    if m < 2 {
        return Err(EitError::InvalidParameter(format!(
            "the complete electrode model needs at least 2 electrodes, got {m}"
        )));
    }
    let geom = ElementGeometry::new(mesh);
    let electrodes = ElectrodeData::new(mesh);
    let s = sigma.values();
    let mut triplets = stiffness_triplets(mesh, &geom, |k| {
        let t = mesh.tet(k);
        0.25 * (s[t[0]] + s[t[1]] + s[t[2]] + s[t[3]])
    });

    for e in 0..m {
        let zi = 1.0 / z.values()[e];
        for (nodes, area) in &electrodes.tris[e] {
            // Boundary mass on the electrode.
            for a in 0..3 {
                for b in 0..3 {
                    let w = if a == b { area / 6.0 } else { area / 12.0 };
                    triplets.push((nodes[a], nodes[b], zi * w));
                }
            }
            // Coupling to the electrode basis columns.
            for &node in nodes {
                let g = area / 3.0;
                for q in 0..m - 1 {
                    let c = electrode_basis(e, q);
                    if c != 0.0 {
                        let v = -zi * g * c;
                        triplets.push((node, n + q, v));
                        triplets.push((n + q, node, v));
                    }
                }
            }
        }
    }
    // Electrode block C^T E C.
    for p in 0..m - 1 {
        for q in 0..m - 1 {
            let mut v = 0.0;
            for e in 0..m {
                let c = electrode_basis(e, p) * electrode_basis(e, q);
                if c != 0.0 {
                    v += c * electrodes.areas[e] / z.values()[e];
                }
            }
            triplets.push((n + p, n + q, v));
        }
    }

    let matrix = SparseMat::from_triplets(n + m - 1, n + m - 1, &triplets)?;
    Ok(CemSystem {
        matrix,
        num_nodes: n,
        num_electrodes: m,
    })
}

fn check_sigma(mesh: &TetMesh, sigma: &Conductivity) -> Result<()> {
    if sigma.len() != mesh.num_nodes() {
        return Err(EitError::Mismatch(format!(
            "conductivity has {} values for {} mesh nodes",
            sigma.len(),
            mesh.num_nodes()
        )));
    }
    Ok(())
}

fn check_z(mesh: &TetMesh, z: &ContactResistances) -> Result<()> {
    if z.len() != mesh.num_electrodes() {
        return Err(EitError::Mismatch(format!(
            "{} contact resistances for {} electrodes",
            z.len(),
            mesh.num_electrodes()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward operator
// ---------------------------------------------------------------------------

/// Factorized CEM system at a fixed (sigma, z); the factorization is reused
/// across all current patterns (and by the Jacobian assembly downstream).
pub struct ForwardOperator<'a> {
    mesh: &'a TetMesh,
    factor: SparseCholesky,
    num_nodes: usize,
    num_electrodes: usize,
}

impl<'a> ForwardOperator<'a> {
    pub fn new(mesh: &'a TetMesh, sigma: &Conductivity, z: &ContactResistances) -> Result<Self> {
        let system = assemble_cem_system(mesh, sigma, z)?;
        let factor = system.matrix.cholesky().map_err(|e| {
            EitError::Solve(format!(
                "CEM factorization failed for N={} M={}: {e}",
                system.num_nodes, system.num_electrodes
            ))
        })?;
        Ok(Self {
            mesh,
            factor,
            num_nodes: system.num_nodes,
            num_electrodes: system.num_electrodes,
        })
    }

    pub fn mesh(&self) -> &TetMesh {
        self.mesh
    }

    pub fn num_electrodes(&self) -> usize {
        self.num_electrodes
    }

    /// Solve for one mean-free current pattern.
    pub fn solve(&self, pattern: &DVector<f64>) -> Result<ForwardSolution> {
        Ok(self.solve_many(std::slice::from_ref(pattern))?.pop().unwrap())
    }

    /// Solve several patterns against the shared factorization.
    pub fn solve_many(&self, patterns: &[DVector<f64>]) -> Result<Vec<ForwardSolution>> {
        let (n, m) = (self.num_nodes, self.num_electrodes);
        let dim = n + m - 1;
        for (i, p) in patterns.iter().enumerate() {
            if p.len() != m {
                return Err(EitError::Mismatch(format!(
                    "pattern {i} has length {} for {m} electrodes",
                    p.len()
                )));
            }
            if p.sum().abs() > 1e-12 * p.amax().max(1e-300) {
                return Err(EitError::InvalidParameter(format!(
                    "pattern {i} is not mean-free"
                )));
            }
        }
        let mut rhs = vec![0.0; dim * patterns.len()];
        for (col, p) in patterns.iter().enumerate() {
            for q in 0..m - 1 {
                // (C^T I)_q = I_0 - I_{q+1}
                rhs[col * dim + n + q] = p[0] - p[q + 1];
            }
        }
        self.factor.solve_in_place(&mut rhs);
        let mut out = Vec::with_capacity(patterns.len());
        for col in 0..patterns.len() {
            let x = &rhs[col * dim..(col + 1) * dim];
            if x.iter().any(|v| !v.is_finite()) {
                return Err(EitError::Solve(
                    "forward solve produced non-finite values".into(),
                ));
            }
            let interior = DVector::from_column_slice(&x[..n]);
            let beta = &x[n..];
            let mut electrode = DVector::zeros(m);
            electrode[0] = beta.iter().sum();
            for q in 0..m - 1 {
                electrode[q + 1] = -beta[q];
            }
            let mean = electrode.mean();
            electrode.add_scalar_mut(-mean);
            out.push(ForwardSolution { interior, electrode });
        }
        Ok(out)
    }

    pub fn solve_all(&self, patterns: &CurrentPatterns) -> Result<Vec<ForwardSolution>> {
        if patterns.num_electrodes() != self.num_electrodes {
            return Err(EitError::Mismatch(format!(
                "patterns are for {} electrodes, mesh has {}",
                patterns.num_electrodes(),
                self.num_electrodes
            )));
        }
        self.solve_many(&patterns.patterns)
    }
}

/// Solve the CEM for all patterns at (sigma, z).
pub fn solve_forward(
    mesh: &TetMesh,
    sigma: &Conductivity,
    z: &ContactResistances,
    patterns: &CurrentPatterns,
) -> Result<Vec<ForwardSolution>> {
    ForwardOperator::new(mesh, sigma, z)?.solve_all(patterns)
}

/// Stack the electrode potentials of M-1 solutions into the measurement
/// vector of length M(M-1), pattern-major and electrode-minor.
pub fn measurement_vector(solutions: &[ForwardSolution]) -> Result<DVector<f64>> {
    if solutions.is_empty() {
        return Err(EitError::InvalidParameter("no forward solutions".into()));
    }
    let m = solutions[0].electrode.len();
    if solutions.len() != m - 1 {
        return Err(EitError::Mismatch(format!(
            "expected M-1 = {} solutions for M = {m}, got {}",
            m - 1,
            solutions.len()
        )));
    }
    let mut out = DVector::zeros(m * (m - 1));
    for (i, sol) in solutions.iter().enumerate() {
        if sol.electrode.len() != m {
            return Err(EitError::Mismatch("inconsistent electrode counts".into()));
        }
        out.rows_mut(i * m, m).copy_from(&sol.electrode);
    }
    Ok(out)
}

/// Electrode currents recovered from a solution via the Robin condition:
/// I_m = (1/z_m) * integral over E_m of (U_m - u) dS. Matches the injected
/// pattern up to solver accuracy.
pub fn recovered_currents(
    mesh: &TetMesh,
    z: &ContactResistances,
    solution: &ForwardSolution,
) -> DVector<f64> {
    let electrodes = ElectrodeData::new(mesh);
    let m = mesh.num_electrodes();
    let mut currents = DVector::zeros(m);
    for e in 0..m {
        let mut flux = solution.electrode[e] * electrodes.areas[e];
        for (nodes, area) in &electrodes.tris[e] {
            for &node in nodes {
                flux -= area / 3.0 * solution.interior[node];
            }
        }
        currents[e] = flux / z.values()[e];
    }
    currents
}
