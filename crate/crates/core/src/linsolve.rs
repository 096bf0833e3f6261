//! Whitened, projected linear system for one linearization step and the
//! priorconditioned Krylov inner solver.
//!
//! With B1 = G^-1/2 J1 and B2 = G^-1/2 J2 (G the noise covariance), the
//! contact resistances are eliminated through the orthogonal projection
//! Q onto the complement of range(B2), leaving
//!
//!   A sigma = b,   A = Q B1,   b = Q G^-1/2 y,
//!
//! and z is recovered afterwards from the normal equations of B2. The inner
//! solver runs conjugate gradients on the normal equations of A
//! preconditioned by the prior matrix H: in exact arithmetic this produces
//! the LSQR iterates of A L^-1 (H = L^T L) while touching H only through
//! applications of H^-1. Updates are confined to the non-Dirichlet nodes,
//! so every iterate keeps sigma = sigma0 on the electrode nodes exactly.
//! The iteration stops at the Morozov discrepancy target.

use nalgebra::{DMatrix, DVector};

use crate::error::{EitError, Result};
use crate::jacobian::JacobianPair;
use crate::prior::PriorMatrix;

/// Diagonal Gaussian noise covariance and its inverse square root.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    diag: DVector<f64>,
    inv_sqrt: DVector<f64>,
}

impl NoiseModel {
    pub fn from_diagonal(diag: DVector<f64>) -> Result<Self> {
        if let Some((i, &v)) = diag.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite())
        {
            return Err(EitError::InvalidParameter(format!(
                "noise covariance diagonal must be positive and finite; entry {i} is {v}"
            )));
        }
        let inv_sqrt = diag.map(|v| 1.0 / v.sqrt());
        Ok(Self { diag, inv_sqrt })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn inv_sqrt_diagonal(&self) -> &DVector<f64> {
        &self.inv_sqrt
    }

    /// Componentwise G^-1/2 v.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        v.component_mul(&self.inv_sqrt)
    }

    /// Componentwise G^1/2 v (noise synthesis).
    pub fn color(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| v[i] * self.diag[i].sqrt())
    }
}

/// Whitened Jacobian blocks, data and projector for one linearization.
pub struct LinearizedSystem {
    b1: DMatrix<f64>,
    b2: DMatrix<f64>,
    /// Orthonormal basis of range(B2) (thin QR factor).
    q_basis: DMatrix<f64>,
    /// Upper-triangular factor of the thin QR of B2.
    r_factor: DMatrix<f64>,
    /// Whitened right-hand side G^-1/2 y.
    whitened_y: DVector<f64>,
    /// b = Q G^-1/2 y.
    b: DVector<f64>,
    /// b~ = b - A sigma0.
    b_tilde: DVector<f64>,
    /// Linearization offset sigma0 (the homogeneous background level).
    sigma0: DVector<f64>,
}

impl LinearizedSystem {
    /// Build the system from the Jacobian at (sigma_j, z_j), the measured
    /// data and the background offset:
    /// y = V - U(sigma_j, z_j) + J1 sigma_j + J2 z_j.
    pub fn new(
        jac: &JacobianPair,
        data: &DVector<f64>,
        sigma0: &DVector<f64>,
        noise: &NoiseModel,
    ) -> Result<Self> {
        let rows = jac.j_sigma.nrows();
        let n = jac.j_sigma.ncols();
        let m = jac.j_z.ncols();
        if jac.j_z.nrows() != rows || data.len() != rows || noise.dim() != rows {
            return Err(EitError::Mismatch(format!(
                "linearized system dimensions disagree: J1 {}x{}, J2 {}x{}, data {}, noise {}",
                rows,
                n,
                jac.j_z.nrows(),
                m,
                data.len(),
                noise.dim()
            )));
        }
        if sigma0.len() != n || jac.sigma.len() != n || jac.z.len() != m {
            return Err(EitError::Mismatch(
                "offset or linearization point has the wrong length".into(),
            ));
        }
        let y = data - &jac.measurement + &jac.j_sigma * &jac.sigma + &jac.j_z * &jac.z;

        let inv_sqrt = noise.inv_sqrt_diagonal();
        let mut b1 = jac.j_sigma.clone();
        for (r, mut row) in b1.row_iter_mut().enumerate() {
            row *= inv_sqrt[r];
        }
        let mut b2 = jac.j_z.clone();
        for (r, mut row) in b2.row_iter_mut().enumerate() {
            row *= inv_sqrt[r];
        }
        let whitened_y = noise.whiten(&y);

        let qr = b2.clone().qr();
        let q_basis = qr.q();
        let r_factor = qr.r();
        let rmax = (0..m).map(|i| r_factor[(i, i)].abs()).fold(0.0, f64::max);
        if !(rmax > 0.0) || (0..m).any(|i| r_factor[(i, i)].abs() < 1e-12 * rmax) {
            return Err(EitError::Solve(
                "B2 is rank deficient: degenerate electrode configuration".into(),
            ));
        }

        let mut sys = Self {
            b1,
            b2,
            q_basis,
            r_factor,
            whitened_y,
            b: DVector::zeros(rows),
            b_tilde: DVector::zeros(rows),
            sigma0: sigma0.clone(),
        };
        sys.b = sys.project(&sys.whitened_y);
        sys.b_tilde = &sys.b - sys.a_mul(sigma0);
        Ok(sys)
    }

    pub fn num_rows(&self) -> usize {
        self.b1.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.b1.ncols()
    }

    pub fn num_electrodes(&self) -> usize {
        self.b2.ncols()
    }

    pub fn b1(&self) -> &DMatrix<f64> {
        &self.b1
    }

    pub fn b2(&self) -> &DMatrix<f64> {
        &self.b2
    }

    pub fn whitened_data(&self) -> &DVector<f64> {
        &self.whitened_y
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn rhs_shifted(&self) -> &DVector<f64> {
        &self.b_tilde
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.sigma0
    }

    /// Q v = v - Q1 (Q1^T v): projection onto the complement of range(B2).
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.q_basis * (self.q_basis.tr_mul(v))
    }

    /// A sigma = Q B1 sigma.
    pub fn a_mul(&self, sigma: &DVector<f64>) -> DVector<f64> {
        self.project(&(&self.b1 * sigma))
    }

    /// A^T r = B1^T Q r.
    pub fn a_tr_mul(&self, r: &DVector<f64>) -> DVector<f64> {
        self.b1.tr_mul(&self.project(r))
    }

    /// Monitored residual ||A sigma - b||.
    pub fn residual_norm(&self, sigma: &DVector<f64>) -> f64 {
        (self.a_mul(sigma) - &self.b).norm()
    }

    /// Contact resistances for a given conductivity:
    /// z = (B2^T B2)^-1 B2^T (G^-1/2 y - B1 sigma), via the thin QR of B2.
    pub fn recover_contact_resistances(&self, sigma: &DVector<f64>) -> Result<DVector<f64>> {
        if sigma.len() != self.num_nodes() {
            return Err(EitError::Mismatch(format!(
                "sigma has length {}, expected {}",
                sigma.len(),
                self.num_nodes()
            )));
        }
        let resid = &self.whitened_y - &self.b1 * sigma;
        let rhs = self.q_basis.tr_mul(&resid);
        self.r_factor
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| EitError::Solve("singular R factor in contact recovery".into()))
    }

    /// Full-system whitened residual ||B1 sigma + B2 z - G^-1/2 y||.
    pub fn full_residual_norm(&self, sigma: &DVector<f64>, z: &DVector<f64>) -> f64 {
        (&self.b1 * sigma + &self.b2 * z - &self.whitened_y).norm()
    }
}

/// Why the inner iteration returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Residual reached the discrepancy target.
    DiscrepancyReached,
    /// Residual decrease fell below 1e-12 before the target.
    Stagnated,
    /// Iteration budget exhausted before the target.
    MaxIterations,
}

/// Result of one priorconditioned inner solve.
#[derive(Clone, Debug)]
pub struct InnerSolveResult {
    pub sigma: DVector<f64>,
    pub iterations: usize,
    /// ||A sigma_k - b|| for k = 0..=iterations; nonincreasing.
    pub residuals: Vec<f64>,
    pub stop: StopReason,
}

/// Options for the inner solve.
#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// Morozov discrepancy target for ||A sigma - b||.
    pub target_residual: f64,
    pub max_iterations: usize,
}

impl SolveOptions {
    pub fn new(target_residual: f64, max_iterations: usize) -> Self {
        Self {
            target_residual,
            max_iterations,
        }
    }
}

const STAGNATION_DECREASE: f64 = 1e-12;

/// Priorconditioned conjugate gradient iteration on the normal equations of
/// A, equivalent in exact arithmetic to LSQR applied to A L^-1 with
/// H = L^T L. The prior enters only through `PriorMatrix::apply_inverse`;
/// descent directions vanish on the Dirichlet nodes, so the returned sigma
/// agrees with sigma0 there exactly.
pub fn priorconditioned_solve(
    system: &LinearizedSystem,
    prior: &PriorMatrix,
    options: SolveOptions,
) -> Result<InnerSolveResult> {
    if prior.dim() != system.num_nodes() {
        return Err(EitError::Mismatch(format!(
            "prior matrix of size {} for {} nodes",
            prior.dim(),
            system.num_nodes()
        )));
    }
    if !(options.target_residual >= 0.0) {
        return Err(EitError::InvalidParameter(
            "discrepancy target must be nonnegative".into(),
        ));
    }
    let n = system.num_nodes();
    let dirichlet = prior.dirichlet_nodes();
    let restrict = |v: &mut DVector<f64>| {
        for &d in dirichlet {
            v[d] = 0.0;
        }
    };

    // delta = sigma - sigma0, kept zero on the Dirichlet nodes.
    let mut delta = DVector::zeros(n);
    let mut residual = system.rhs_shifted().clone();
    let mut res_norm = residual.norm();
    let mut trace = vec![res_norm];

    if res_norm <= options.target_residual {
        return Ok(InnerSolveResult {
            sigma: system.offset().clone(),
            iterations: 0,
            residuals: trace,
            stop: StopReason::DiscrepancyReached,
        });
    }

    let mut s = system.a_tr_mul(&residual);
    restrict(&mut s);
    let mut t = prior.apply_inverse(&s)?;
    let mut gamma = s.dot(&t);
    let mut direction = t.clone();
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    for _k in 1..=options.max_iterations {
        if !(gamma > 0.0) || !gamma.is_finite() {
            // A^T r vanished on the free nodes: the least squares limit of
            // the restricted problem is reached.
            stop = StopReason::Stagnated;
            break;
        }
        let q = system.a_mul(&direction);
        let qq = q.norm_squared();
        if !(qq > 0.0) || !qq.is_finite() {
            stop = StopReason::Stagnated;
            break;
        }
        let alpha = gamma / qq;
        let new_delta = &delta + alpha * &direction;
        let new_residual = &residual - alpha * &q;
        let new_norm = new_residual.norm();
        if new_norm > res_norm {
            // Numerical floor: accepting would break the monotone residual
            // guarantee of the minimal-residual iteration.
            stop = StopReason::Stagnated;
            break;
        }
        let decrease = res_norm - new_norm;
        delta = new_delta;
        residual = new_residual;
        res_norm = new_norm;
        trace.push(res_norm);
        iterations += 1;
        if res_norm <= options.target_residual {
            stop = StopReason::DiscrepancyReached;
            break;
        }
        if decrease < STAGNATION_DECREASE {
            stop = StopReason::Stagnated;
            break;
        }
        s = system.a_tr_mul(&residual);
        restrict(&mut s);
        t = prior.apply_inverse(&s)?;
        let gamma_new = s.dot(&t);
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        direction = &t + beta * &direction;
    }

    let sigma = system.offset() + &delta;
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(EitError::Solve("inner solve produced non-finite sigma".into()));
    }
    Ok(InnerSolveResult {
        sigma,
        iterations,
        residuals: trace,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem_cem::Conductivity;
    use crate::mesh::{generate_box_mesh, BoxFace, BoxPatch, TetMesh};
    use crate::prior::{assemble_h, EdgeFunction};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Synthetic Jacobian-shaped data for projector algebra tests.
    fn random_system(
        rows: usize,
        n: usize,
        m: usize,
        seed: u64,
    ) -> (JacobianPair, DVector<f64>, DVector<f64>, NoiseModel) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut r = move || -> f64 { rng.random_range(-1.0..1.0) };
        let jac = JacobianPair {
            j_sigma: DMatrix::from_fn(rows, n, |_, _| r()),
            j_z: DMatrix::from_fn(rows, m, |_, _| r()),
            sigma: DVector::from_fn(n, |_, _| 1.0 + r().abs()),
            z: DVector::from_fn(m, |_, _| 0.1 + r().abs()),
            measurement: DVector::from_fn(rows, |_, _| r()),
        };
        let data = DVector::from_fn(rows, |_, _| r());
        let sigma0 = DVector::from_element(n, 1.0);
        let noise =
            NoiseModel::from_diagonal(DVector::from_fn(rows, |_, _| 0.5 + r().abs())).unwrap();
        (jac, data, sigma0, noise)
    }

    #[test]
    fn projector_kills_range_of_b2_and_is_idempotent() {
        let (jac, data, sigma0, noise) = random_system(30, 12, 4, 1);
        let sys = LinearizedSystem::new(&jac, &data, &sigma0, &noise).unwrap();
        for c in 0..4 {
            let col: DVector<f64> = sys.b2().column(c).into();
            let proj = sys.project(&col);
            assert!(proj.norm() <= 1e-10 * col.norm().max(1.0), "column {c}");
        }
        let v = DVector::from_fn(30, |i, _| ((i * i) as f64 * 0.13).sin());
        let once = sys.project(&v);
        let twice = sys.project(&once);
        assert!((&once - &twice).norm() <= 1e-12 * v.norm());
        // Q^T = Q on random vector pairs: <Qu, w> = <u, Qw>.
        let w = DVector::from_fn(30, |i, _| ((i + 3) as f64 * 0.29).cos());
        let lhs = sys.project(&v).dot(&w);
        let rhs = v.dot(&sys.project(&w));
        assert!((lhs - rhs).abs() <= 1e-10 * v.norm() * w.norm());
    }

    #[test]
    fn self_consistent_data_gives_projected_offset_rhs() {
        // With V = U the shifted rhs is Q B1 (sigma_j - sigma0).
        let (mut jac, _, sigma0, noise) = random_system(30, 12, 4, 2);
        let data = jac.measurement.clone();
        jac.z = DVector::from_element(4, 0.05);
        let sys = LinearizedSystem::new(&jac, &data, &sigma0, &noise).unwrap();
        let expect = sys.a_mul(&(&jac.sigma - &sigma0));
        assert!((&expect - sys.rhs_shifted()).norm() <= 1e-10 * expect.norm().max(1.0));
    }

    #[test]
    fn rank_deficient_b2_rejected() {
        let (mut jac, data, sigma0, noise) = random_system(30, 12, 4, 3);
        let col: DVector<f64> = jac.j_z.column(0).into();
        jac.j_z.set_column(1, &col);
        assert!(LinearizedSystem::new(&jac, &data, &sigma0, &noise).is_err());
    }

    #[test]
    fn contact_recovery_identities() {
        let (jac, data, sigma0, noise) = random_system(40, 15, 5, 4);
        let sys = LinearizedSystem::new(&jac, &data, &sigma0, &noise).unwrap();
        // Residual identity ||B1 s + B2 z(s) - w|| = ||A s - b|| for any s.
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..5 {
            let sigma = DVector::from_fn(15, |_, _| rng.random_range(-2.0..2.0));
            let z = sys.recover_contact_resistances(&sigma).unwrap();
            let full = sys.full_residual_norm(&sigma, &z);
            let proj = sys.residual_norm(&sigma);
            assert!((full - proj).abs() <= 1e-8, "{full} vs {proj}");
        }
        // Zero sigma and zero data -> zero z.
        let zero_data = DVector::zeros(40);
        let mut jac0 = jac.clone();
        jac0.measurement = DVector::zeros(40);
        jac0.sigma = DVector::zeros(15);
        jac0.z = DVector::zeros(5);
        let sys0 = LinearizedSystem::new(&jac0, &zero_data, &DVector::zeros(15), &noise).unwrap();
        let z0 = sys0
            .recover_contact_resistances(&DVector::zeros(15))
            .unwrap();
        assert!(z0.norm() <= 1e-12);
    }

    #[test]
    fn self_consistent_point_recovers_z_exactly() {
        let (mut jac, _, sigma0, noise) = random_system(30, 12, 4, 6);
        let data = jac.measurement.clone();
        jac.z = DVector::from_fn(4, |i, _| 0.01 + 0.01 * i as f64);
        let sys = LinearizedSystem::new(&jac, &data, &sigma0, &noise).unwrap();
        let z = sys.recover_contact_resistances(&jac.sigma).unwrap();
        assert!((&z - &jac.z).norm() <= 1e-8 * jac.z.norm());
    }

    fn electrode_mesh() -> TetMesh {
        let patches = vec![
            BoxPatch {
                face: BoxFace::XMin,
                min: [-0.1, -0.1],
                max: [1.1, 1.1],
            },
            BoxPatch {
                face: BoxFace::XMax,
                min: [-0.1, -0.1],
                max: [1.1, 1.1],
            },
        ];
        generate_box_mesh([1.0, 1.0, 1.0], [2; 3], &patches).unwrap()
    }

    /// Dense oracle on a small instance: the converged inner solve matches
    /// the pseudoinverse solution of the priorconditioned operator on the
    /// free nodes, and iterates keep the Dirichlet trace exactly.
    #[test]
    fn converged_limit_matches_dense_oracle() {
        let mesh = electrode_mesh();
        let n = mesh.num_nodes();
        let (jac, data, _, noise) = random_system(20, n, 4, 7);
        let sigma0 = DVector::from_element(n, 1.0);
        let sys = LinearizedSystem::new(&jac, &data, &sigma0, &noise).unwrap();
        let sigma_lin = Conductivity::new(DVector::from_fn(n, |j, _| {
            1.0 + 0.2 * ((j as f64) * 0.91).sin()
        }))
        .unwrap();
        let dirichlet = mesh.all_electrode_nodes();
        let prior = assemble_h(&mesh, &sigma_lin, &EdgeFunction::perona_malik(), &dirichlet)
            .unwrap();

        let result =
            priorconditioned_solve(&sys, &prior, SolveOptions::new(0.0, 500)).unwrap();

        // Dirichlet trace is exact.
        for &d in prior.dirichlet_nodes() {
            assert_eq!(result.sigma[d], sigma0[d]);
        }
        // Residual trace is nonincreasing.
        for w in result.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-14);
        }

        // Dense oracle: Cholesky of H restricted to free nodes, pseudoinverse
        // of A L^-1 on that subspace.
        let free: Vec<usize> = (0..n).filter(|j| !dirichlet.contains(j)).collect();
        let h_dense = prior.matrix().to_dense();
        let h_ff = DMatrix::from_fn(free.len(), free.len(), |a, b| h_dense[(free[a], free[b])]);
        let chol = h_ff.cholesky().expect("H_ff SPD");
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(free.len(), free.len()))
            .unwrap();
        // Columns of A restricted to the free nodes.
        let mut a_free = DMatrix::zeros(20, free.len());
        for (c, &j) in free.iter().enumerate() {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            a_free.set_column(c, &sys.a_mul(&e));
        }
        let a_bar = &a_free * l_inv.transpose();
        let pinv = a_bar.clone().svd(true, true).pseudo_inverse(1e-12).unwrap();
        let tilde = pinv * sys.rhs_shifted();
        let delta_free = l_inv.transpose() * tilde;
        let mut oracle = sigma0.clone();
        for (c, &j) in free.iter().enumerate() {
            oracle[j] += delta_free[c];
        }
        let diff = (&oracle - &result.sigma).norm() / oracle.norm();
        assert!(diff <= 1e-8, "oracle mismatch {diff}");
    }

    #[test]
    fn zero_rhs_returns_offset_immediately() {
        let mesh = electrode_mesh();
        let n = mesh.num_nodes();
        let (mut jac, _, sigma0, noise) = random_system(20, n, 4, 8);
        // V = U and sigma_j = sigma0, z arbitrary: b~ = 0.
        let data = jac.measurement.clone();
        jac.sigma = sigma0.clone();
        let sys = LinearizedSystem::new(&jac, &data, &sigma0, &noise).unwrap();
        assert!(sys.rhs_shifted().norm() <= 1e-10);
        let sigma_lin = Conductivity::new(DVector::from_element(n, 1.0)).unwrap();
        let prior = assemble_h(
            &mesh,
            &sigma_lin,
            &EdgeFunction::Quadratic,
            &mesh.all_electrode_nodes(),
        )
        .unwrap();
        let result = priorconditioned_solve(&sys, &prior, SolveOptions::new(1e-9, 50)).unwrap();
        assert_eq!(result.iterations, 0);
        assert_eq!(result.stop, StopReason::DiscrepancyReached);
        assert_eq!(result.sigma, sigma0);
    }

    #[test]
    fn krylov_membership_of_iterates() {
        // H (sigma_k - sigma0) lies in the range of the restricted A^T.
        let mesh = electrode_mesh();
        let n = mesh.num_nodes();
        let (jac, data, sigma0, noise) = random_system(20, n, 4, 9);
        let sys = LinearizedSystem::new(&jac, &data, &sigma0, &noise).unwrap();
        let sigma_lin = Conductivity::new(DVector::from_fn(n, |j, _| {
            1.0 + 0.1 * (j as f64).cos()
        }))
        .unwrap();
        let dirichlet = mesh.all_electrode_nodes();
        let prior =
            assemble_h(&mesh, &sigma_lin, &EdgeFunction::perona_malik(), &dirichlet).unwrap();
        for iters in [1, 3, 7] {
            let result =
                priorconditioned_solve(&sys, &prior, SolveOptions::new(0.0, iters)).unwrap();
            let delta = &result.sigma - &sigma0;
            let a_k = prior.matrix().mul_vec(&delta);
            // Basis of range(Z A^T), Z zeroing the Dirichlet rows.
            let mut basis = DMatrix::zeros(n, 20);
            for c in 0..20 {
                let mut e = DVector::zeros(20);
                e[c] = 1.0;
                let mut col = sys.a_tr_mul(&e);
                for &d in &dirichlet {
                    col[d] = 0.0;
                }
                basis.set_column(c, &col);
            }
            let qr = basis.qr();
            let q = qr.q();
            let in_range = &q * q.tr_mul(&a_k);
            let out = (&a_k - in_range).norm();
            assert!(out <= 1e-8 * a_k.norm().max(1e-30), "iters {iters}: {out}");
        }
    }

    #[test]
    fn discrepancy_stop_is_first_hit() {
        let mesh = electrode_mesh();
        let n = mesh.num_nodes();
        let (jac, data, sigma0, noise) = random_system(20, n, 4, 10);
        let sys = LinearizedSystem::new(&jac, &data, &sigma0, &noise).unwrap();
        let sigma_lin = Conductivity::new(DVector::from_element(n, 1.0)).unwrap();
        let prior = assemble_h(
            &mesh,
            &sigma_lin,
            &EdgeFunction::Quadratic,
            &mesh.all_electrode_nodes(),
        )
        .unwrap();
        let full = priorconditioned_solve(&sys, &prior, SolveOptions::new(0.0, 100)).unwrap();
        let target = 0.5 * (full.residuals[0] + full.residuals[full.residuals.len() - 1]);
        let stopped =
            priorconditioned_solve(&sys, &prior, SolveOptions::new(target, 100)).unwrap();
        assert_eq!(stopped.stop, StopReason::DiscrepancyReached);
        let k = stopped.iterations;
        assert!(stopped.residuals[k] <= target);
        if k > 0 {
            assert!(stopped.residuals[k - 1] > target);
        }
    }
}
