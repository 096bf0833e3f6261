//! Jacobian of the measurement map (sigma, z) -> U.
//!
//! Adjoint sampling: with drive solutions (u_i, U_i), the sensitivity of the
//! potential on electrode m needs the CEM solution for the measurement
//! current e_m - 1/M. That current lies in the span of the drive patterns,
//! so the adjoint fields are linear combinations of the forward solutions
//! already at hand and no extra solves are performed:
//!
//!   dU_im / dsigma_k = -int_Omega phi_k grad(u_i) . grad(w_m) dx
//!   dU_im / dz_n     = z_n^-2 int_{E_n} (u_i - U_in)(w_m - W_mn) dS
//!
//! Both integrands are piecewise polynomial and integrated exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{EitError, Result};
use crate::fem_cem::{
    electrode_basis, ContactResistances, Conductivity, CurrentPatterns, ElectrodeData,
    ElementGeometry, ForwardOperator, ForwardSolution,
};
use crate::mesh::TetMesh;

/// Dense Jacobian blocks at a linearization point, together with the
/// forward measurement there.
#[derive(Clone, Debug)]
pub struct JacobianPair {
    /// M(M-1) x N derivative w.r.t. nodal conductivities.
    pub j_sigma: DMatrix<f64>,
    /// M(M-1) x M derivative w.r.t. contact resistances.
    pub j_z: DMatrix<f64>,
    /// sigma at the linearization point.
    pub sigma: DVector<f64>,
    /// z at the linearization point.
    pub z: DVector<f64>,
    /// Measurement vector at the linearization point.
    pub measurement: DVector<f64>,
}

/// Assemble the Jacobian, running the forward solves internally.
pub fn assemble_jacobian(
    mesh: &TetMesh,
    sigma: &Conductivity,
    z: &ContactResistances,
    patterns: &CurrentPatterns,
) -> Result<JacobianPair> {
    let op = ForwardOperator::new(mesh, sigma, z)?;
    let solutions = op.solve_all(patterns)?;
    assemble_jacobian_from_solutions(mesh, sigma, z, patterns, &solutions)
}

/// Assemble the Jacobian from forward solutions already computed at
/// (sigma, z); shares work with the surrounding outer iteration.
pub fn assemble_jacobian_from_solutions(
    mesh: &TetMesh,
    sigma: &Conductivity,
    z: &ContactResistances,
    patterns: &CurrentPatterns,
    solutions: &[ForwardSolution],
) -> Result<JacobianPair> {
    let n = mesh.num_nodes();
    let m = mesh.num_electrodes();
    if patterns.num_electrodes() != m || z.len() != m || sigma.len() != n {
        return Err(EitError::Mismatch(
            "jacobian inputs do not match the mesh".into(),
        ));
    }
    if solutions.len() != m - 1 {
        return Err(EitError::Mismatch(format!(
            "expected {} forward solutions, got {}",
            m - 1,
            solutions.len()
        )));
    }
    let rows = m * (m - 1);

    // Expansion coefficients of the measurement currents in the drive
    // pattern basis: solve (C^T P) coef_m = C^T e_m for each electrode m.
    let cp = DMatrix::from_fn(m - 1, m - 1, |q, i| {
        let p = patterns.pattern(i);
        p[0] - p[q + 1]
    });
    let lu = cp.lu();
    let mut coef = DMatrix::zeros(m - 1, m);
    for e in 0..m {
        let rhs = DVector::from_fn(m - 1, |q, _| electrode_basis(e, q));
        let c = lu.solve(&rhs).ok_or_else(|| {
            EitError::Solve("current patterns are numerically dependent".into())
        })?;
        coef.set_column(e, &c);
    }

    // Adjoint interior fields and electrode potentials by combination.
    let u_int = DMatrix::from_fn(n, m - 1, |j, i| solutions[i].interior[j]);
    let u_el = DMatrix::from_fn(m, m - 1, |e, i| solutions[i].electrode[e]);
    let w_int = &u_int * &coef; // N x M
    let w_el = &u_el * &coef; // M x M

    // Conductivity block.
    let geom = ElementGeometry::new(mesh);
    let mut j_sigma = DMatrix::zeros(rows, n);
    let mut gu = vec![[0.0; 3]; m - 1];
    let mut gw = vec![[0.0; 3]; m];
    let mut entry = vec![0.0; rows];
    for k in 0..mesh.num_tets() {
        let tet = mesh.tet(k);
        let g = &geom.grads[k];
        for (i, gi) in gu.iter_mut().enumerate() {
            *gi = [0.0; 3];
            for a in 0..4 {
                let val = u_int[(tet[a], i)];
                for d in 0..3 {
                    gi[d] += val * g[a][d];
                }
            }
        }
        for (e, ge) in gw.iter_mut().enumerate() {
            *ge = [0.0; 3];
            for a in 0..4 {
                let val = w_int[(tet[a], e)];
                for d in 0..3 {
                    ge[d] += val * g[a][d];
                }
            }
        }
        let quarter_vol = 0.25 * geom.volumes[k];
        for i in 0..m - 1 {
            for e in 0..m {
                entry[i * m + e] = -quarter_vol
                    * (gu[i][0] * gw[e][0] + gu[i][1] * gw[e][1] + gu[i][2] * gw[e][2]);
            }
        }
        for a in 0..4 {
            let mut col = j_sigma.column_mut(tet[a]);
            for r in 0..rows {
                col[r] += entry[r];
            }
        }
    }

    // Contact resistance block.
    let electrodes = ElectrodeData::new(mesh);
    let mut j_z = DMatrix::zeros(rows, m);
    for nn in 0..m {
        let zi2 = 1.0 / (z.values()[nn] * z.values()[nn]);
        for (nodes, area) in &electrodes.tris[nn] {
            for i in 0..m - 1 {
                let ua = [
                    u_int[(nodes[0], i)] - u_el[(nn, i)],
                    u_int[(nodes[1], i)] - u_el[(nn, i)],
                    u_int[(nodes[2], i)] - u_el[(nn, i)],
                ];
                for e in 0..m {
                    let wb = [
                        w_int[(nodes[0], e)] - w_el[(nn, e)],
                        w_int[(nodes[1], e)] - w_el[(nn, e)],
                        w_int[(nodes[2], e)] - w_el[(nn, e)],
                    ];
                    // a^T M_tri b with M = area/12 (1 + delta).
                    let sum_a = ua[0] + ua[1] + ua[2];
                    let sum_b = wb[0] + wb[1] + wb[2];
                    let dot = ua[0] * wb[0] + ua[1] * wb[1] + ua[2] * wb[2];
                    let integral = area / 12.0 * (sum_a * sum_b + dot);
                    j_z[(i * m + e, nn)] += zi2 * integral;
                }
            }
        }
    }

    let measurement = crate::fem_cem::measurement_vector(solutions)?;
    Ok(JacobianPair {
        j_sigma,
        j_z,
        sigma: sigma.values().clone(),
        z: z.values().clone(),
        measurement,
    })
}
