//! Piecewise-constant conductivity phantoms, contact resistance draws,
//! current patterns and noisy measurement simulation.
//!
//! Simulation is meant to run on a strictly finer mesh than the inversion
//! mesh (node-count ratio at least 2); the dataset file records the
//! simulation mesh hash and node count so the reconstruction front end can
//! refuse same-mesh "inverse crime" runs unless explicitly overridden.

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::error::{EitError, Result};
use crate::fem_cem::{
    measurement_vector, solve_forward, Conductivity, ContactResistances, CurrentPatterns,
};
use crate::linsolve::NoiseModel;
use crate::mesh::TetMesh;
use crate::textio::{fmt_f64, json_f64_array};

/// Inclusion shapes. Cylinders are axis-aligned with the z axis; unions of
/// boxes express L-shapes.
#[derive(Clone, Debug, serde::Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Ball {
        center: [f64; 3],
        radius: f64,
    },
    Cylinder {
        base_center: [f64; 3],
        radius: f64,
        height: f64,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Ball { center, radius } => {
                let d2 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum::<f64>();
                d2 <= radius * radius
            }
            Shape::Cylinder {
                base_center,
                radius,
                height,
            } => {
                let r2 = (p[0] - base_center[0]).powi(2) + (p[1] - base_center[1]).powi(2);
                r2 <= radius * radius
                    && p[2] >= base_center[2]
                    && p[2] <= base_center[2] + height
            }
            Shape::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Ball { radius, .. } => radius > 0.0,
            Shape::Cylinder { radius, height, .. } => radius > 0.0 && height > 0.0,
            Shape::Box { min, max } => (0..3).all(|i| max[i] > min[i]),
        };
        if ok {
            Ok(())
        } else {
            Err(EitError::InvalidParameter(format!("degenerate shape {self:?}")))
        }
    }
}

/// One inclusion: a shape and the conductivity inside it.
#[derive(Clone, Debug, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub shape: Shape,
    pub conductivity: f64,
}

/// Piecewise-constant phantom: positive background plus inclusions.
/// Overlapping shapes are allowed; later entries win.
#[derive(Clone, Debug, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phantom {
    pub background: f64,
    pub inclusions: Vec<Inclusion>,
}

impl Phantom {
    pub fn validate(&self) -> Result<()> {
        if !(self.background > 0.0) {
            return Err(EitError::InvalidParameter(format!(
                "phantom background must be positive, got {}",
                self.background
            )));
        }
        for (i, inc) in self.inclusions.iter().enumerate() {
            inc.shape.validate()?;
            if !(inc.conductivity > 0.0) {
                return Err(EitError::InvalidParameter(format!(
                    "inclusion {i} has nonpositive conductivity {}",
                    inc.conductivity
                )));
            }
        }
        Ok(())
    }

    pub fn value_at(&self, p: [f64; 3]) -> f64 {
        let mut v = self.background;
        for inc in &self.inclusions {
            if inc.shape.contains(p) {
                v = inc.conductivity;
            }
        }
        v
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let phantom: Phantom = serde_json::from_str(&text)
            .map_err(|e| EitError::format(path.display().to_string(), e.to_string()))?;
        phantom.validate()?;
        Ok(phantom)
    }
}

/// Sample the phantom at the mesh nodes.
pub fn rasterize_phantom(mesh: &TetMesh, phantom: &Phantom) -> Result<Conductivity> {
    phantom.validate()?;
    let values = DVector::from_fn(mesh.num_nodes(), |j, _| phantom.value_at(mesh.vertex(j)));
    Conductivity::new(values)
}

/// Contact resistances z_m = z_mean + v_m with v_m ~ N(0, std^2), seeded.
/// Nonpositive draws are redrawn (they must be positive and are vanishingly
/// rare at the parameters of interest).
pub fn draw_contact_resistances(
    z_mean: f64,
    std: f64,
    m: usize,
    seed: u64,
) -> Result<ContactResistances> {
    if !(z_mean > 0.0) {
        return Err(EitError::InvalidParameter(format!(
            "mean contact resistance must be positive, got {z_mean}"
        )));
    }
    if !(std >= 0.0) {
        return Err(EitError::InvalidParameter(format!(
            "contact resistance spread must be nonnegative, got {std}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut values = DVector::zeros(m);
    for v in values.iter_mut() {
        loop {
            let draw: f64 = normal.sample(&mut rng);
            let z = z_mean + std * draw;
            if z > 0.0 {
                *v = z;
                break;
            }
        }
    }
    ContactResistances::new(values)
}

/// The paper's current patterns I^m = e_1 - e_{m+1}: one fixed feeding
/// electrode, the current exits in turns through the remaining ones.
pub fn standard_patterns(m: usize) -> Result<CurrentPatterns> {
    if m < 2 {
        return Err(EitError::InvalidParameter(format!(
            "need at least 2 electrodes for current patterns, got {m}"
        )));
    }
    let mut patterns = Vec::with_capacity(m - 1);
    for q in 0..m - 1 {
        let mut v = DVector::zeros(m);
        v[0] = 1.0;
        v[q + 1] = -1.0;
        patterns.push(v);
    }
    CurrentPatterns::new(patterns)
}

/// Name recorded in dataset files for [`standard_patterns`].
pub const PATTERN_CONVENTION: &str = "fixed-feed-e1";

/// Homogeneous diagonal covariance with standard deviation equal to
/// `gamma` times the mean absolute exact measurement.
pub fn noise_covariance_relative(exact: &DVector<f64>, gamma: f64) -> Result<NoiseModel> {
    if !(gamma > 0.0) {
        return Err(EitError::InvalidParameter(format!(
            "noise level gamma must be positive, got {gamma}"
        )));
    }
    let mean_abs = exact.iter().map(|v| v.abs()).sum::<f64>() / exact.len() as f64;
    if !(mean_abs > 0.0) {
        return Err(EitError::InvalidParameter(
            "exact measurement vector is identically zero".into(),
        ));
    }
    let std = gamma * mean_abs;
    NoiseModel::from_diagonal(DVector::from_element(exact.len(), std * std))
}

/// Homogeneous diagonal covariance with standard deviation equal to
/// `gamma` times the spread between the smallest and largest measurement.
pub fn noise_covariance_range(data: &DVector<f64>, gamma: f64) -> Result<NoiseModel> {
    if !(gamma > 0.0) {
        return Err(EitError::InvalidParameter(format!(
            "noise level gamma must be positive, got {gamma}"
        )));
    }
    let max = data.max();
    let min = data.min();
    let spread = max - min;
    if !(spread > 0.0) {
        return Err(EitError::InvalidParameter(
            "measurement range is zero; cannot scale noise to it".into(),
        ));
    }
    let std = gamma * spread;
    NoiseModel::from_diagonal(DVector::from_element(data.len(), std * std))
}

/// Draw one Gaussian noise realization with the given covariance and add it
/// to the exact measurement.
pub fn apply_noise(exact: &DVector<f64>, noise: &NoiseModel, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let xi = DVector::from_fn(exact.len(), |_, _| normal.sample(&mut rng));
    exact + noise.color(&xi)
}

/// Simulated noisy dataset: data vector, covariance and the exact forward
/// measurement it was built from.
pub struct SimulatedData {
    pub data: DVector<f64>,
    pub noise: NoiseModel,
    pub exact: DVector<f64>,
}

/// Forward-solve the phantom on the (fine) mesh and add relative Gaussian
/// noise at level `gamma`.
pub fn simulate_measurements(
    fine_mesh: &TetMesh,
    phantom: &Phantom,
    z: &ContactResistances,
    patterns: &CurrentPatterns,
    gamma: f64,
    seed: u64,
) -> Result<SimulatedData> {
    let sigma = rasterize_phantom(fine_mesh, phantom)?;
    let solutions = solve_forward(fine_mesh, &sigma, z, patterns)?;
    let exact = measurement_vector(&solutions)?;
    let noise = noise_covariance_relative(&exact, gamma)?;
    let data = apply_noise(&exact, &noise, seed);
    Ok(SimulatedData { data, noise, exact })
}

// ---------------------------------------------------------------------------
// Dataset file
// ---------------------------------------------------------------------------

/// Measurement dataset file: data, covariance diagonal and the provenance
/// needed by the inverse-crime guard.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub m: usize,
    pub pattern_convention: String,
    pub gamma: f64,
    pub seed: u64,
    pub mesh_hash: String,
    pub mesh_nodes: usize,
    pub voltages: DVector<f64>,
    pub covariance_diagonal: DVector<f64>,
    /// Exact (noise free) measurement, when the dataset is simulated.
    pub exact: Option<DVector<f64>>,
}

impl Dataset {
    pub fn from_simulation(
        fine_mesh: &TetMesh,
        sim: &SimulatedData,
        m: usize,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            m,
            pattern_convention: PATTERN_CONVENTION.to_string(),
            gamma,
            seed,
            mesh_hash: fine_mesh.content_hash()?,
            mesh_nodes: fine_mesh.num_nodes(),
            voltages: sim.data.clone(),
            covariance_diagonal: sim.noise.diagonal().clone(),
            exact: Some(sim.exact.clone()),
        })
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        NoiseModel::from_diagonal(self.covariance_diagonal.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.m * (self.m - 1);
        if self.m < 2 {
            return Err(EitError::InvalidParameter("dataset needs M >= 2".into()));
        }
        if self.voltages.len() != len || self.covariance_diagonal.len() != len {
            return Err(EitError::Mismatch(format!(
                "dataset arrays must have length M(M-1) = {len}; got {} and {}",
                self.voltages.len(),
                self.covariance_diagonal.len()
            )));
        }
        if let Some(exact) = &self.exact {
            if exact.len() != len {
                return Err(EitError::Mismatch(
                    "exact measurement has the wrong length".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let mut s = String::new();
        s.push_str("{\"m\":");
        s.push_str(&self.m.to_string());
        s.push_str(",\"pattern_convention\":");
        s.push_str(&crate::textio::json_escape(&self.pattern_convention));
        s.push_str(",\"gamma\":");
        s.push_str(&fmt_f64(self.gamma));
        s.push_str(",\"seed\":");
        s.push_str(&self.seed.to_string());
        s.push_str(",\"mesh_hash\":");
        s.push_str(&crate::textio::json_escape(&self.mesh_hash));
        s.push_str(",\"mesh_nodes\":");
        s.push_str(&self.mesh_nodes.to_string());
        s.push_str(",\"voltages\":");
        s.push_str(&json_f64_array(self.voltages.as_slice()));
        s.push_str(",\"covariance_diagonal\":");
        s.push_str(&json_f64_array(self.covariance_diagonal.as_slice()));
        if let Some(exact) = &self.exact {
            s.push_str(",\"exact\":");
            s.push_str(&json_f64_array(exact.as_slice()));
        }
        s.push('}');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct DatasetFile {
            m: usize,
            pattern_convention: String,
            gamma: f64,
            seed: u64,
            mesh_hash: String,
            mesh_nodes: usize,
            voltages: Vec<f64>,
            covariance_diagonal: Vec<f64>,
            #[serde(default)]
            exact: Option<Vec<f64>>,
        }
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let file: DatasetFile = serde_json::from_str(&text)
            .map_err(|e| EitError::format(path.display().to_string(), e.to_string()))?;
        let dataset = Dataset {
            m: file.m,
            pattern_convention: file.pattern_convention,
            gamma: file.gamma,
            seed: file.seed,
            mesh_hash: file.mesh_hash,
            mesh_nodes: file.mesh_nodes,
            voltages: DVector::from_vec(file.voltages),
            covariance_diagonal: DVector::from_vec(file.covariance_diagonal),
            exact: file.exact.map(DVector::from_vec),
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_box_mesh, generate_cylinder_mesh, BoxFace, BoxPatch, CylinderResolution};

    fn small_cylinder() -> TetMesh {
        generate_cylinder_mesh(
            1.0,
            1.0,
            CylinderResolution {
                radial: 2,
                angular: 12,
                vertical: 3,
            },
            4,
            [0.5, 0.3],
        )
        .unwrap()
    }

    #[test]
    fn empty_phantom_is_background() {
        let mesh = small_cylinder();
        let phantom = Phantom {
            background: 1.5,
            inclusions: vec![],
        };
        let sigma = rasterize_phantom(&mesh, &phantom).unwrap();
        assert!(sigma.values().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn covering_ball_wins_everywhere() {
        let mesh = small_cylinder();
        let phantom = Phantom {
            background: 1.0,
            inclusions: vec![Inclusion {
                shape: Shape::Ball {
                    center: [0.0, 0.0, 0.5],
                    radius: 10.0,
                },
                conductivity: 2.0,
            }],
        };
        let sigma = rasterize_phantom(&mesh, &phantom).unwrap();
        assert!(sigma.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn later_inclusions_take_precedence() {
        let mesh = small_cylinder();
        let phantom = Phantom {
            background: 1.0,
            inclusions: vec![
                Inclusion {
                    shape: Shape::Ball {
                        center: [0.0, 0.0, 0.5],
                        radius: 10.0,
                    },
                    conductivity: 2.0,
                },
                Inclusion {
                    shape: Shape::Ball {
                        center: [0.0, 0.0, 0.5],
                        radius: 10.0,
                    },
                    conductivity: 0.5,
                },
            ],
        };
        let sigma = rasterize_phantom(&mesh, &phantom).unwrap();
        assert!(sigma.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn case_one_style_phantom_rasterizes() {
        let mesh = small_cylinder();
        let phantom = Phantom {
            background: 1.0,
            inclusions: vec![
                Inclusion {
                    shape: Shape::Cylinder {
                        base_center: [-0.45, 0.0, 0.0],
                        radius: 0.4,
                        height: 0.6,
                    },
                    conductivity: 0.5,
                },
                Inclusion {
                    shape: Shape::Cylinder {
                        base_center: [0.45, 0.0, 0.4],
                        radius: 0.3,
                        height: 0.6,
                    },
                    conductivity: 2.0,
                },
            ],
        };
        let sigma = rasterize_phantom(&mesh, &phantom).unwrap();
        let vals = sigma.values();
        let distinct: std::collections::BTreeSet<u64> =
            vals.iter().map(|v| v.to_bits()).collect();
        assert_eq!(distinct.len(), 3);
        // Bottom inclusion is resistive, hanging one conductive.
        assert!(vals.iter().any(|&v| v == 0.5));
        assert!(vals.iter().any(|&v| v == 2.0));
    }

    #[test]
    fn contact_draws_deterministic_and_positive() {
        let a = draw_contact_resistances(2e-3, 5e-4, 16, 7).unwrap();
        let b = draw_contact_resistances(2e-3, 5e-4, 16, 7).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().all(|&z| z > 0.0));
        let c = draw_contact_resistances(2e-3, 0.0, 4, 1).unwrap();
        assert!(c.values().iter().all(|&z| z == 2e-3));
    }

    #[test]
    fn contact_draw_mean_is_unbiased() {
        // 1e5 draws: empirical mean within 3 standard errors of the target.
        let n = 100_000;
        let (z_mean, std) = (2e-3, 5e-4);
        let z = draw_contact_resistances(z_mean, std, n, 123).unwrap();
        let emp = z.values().mean();
        let se = std / (n as f64).sqrt();
        assert!(
            (emp - z_mean).abs() <= 3.0 * se,
            "mean {emp}, target {z_mean}, 3se {}",
            3.0 * se
        );
    }

    #[test]
    fn standard_patterns_shape() {
        assert!(standard_patterns(0).is_err());
        assert!(standard_patterns(1).is_err());
        let p2 = standard_patterns(2).unwrap();
        assert_eq!(p2.len(), 1);
        assert_eq!(p2.pattern(0).as_slice(), &[1.0, -1.0]);
        let p4 = standard_patterns(4).unwrap();
        assert_eq!(p4.len(), 3);
        for p in p4.iter() {
            assert_eq!(p.sum(), 0.0);
        }
        // Rank check happens in CurrentPatterns::new; reaching here means
        // the patterns are independent.
    }

    #[test]
    fn relative_covariance_formula() {
        let exact = DVector::from_vec(vec![1.0, -1.0]);
        let noise = noise_covariance_relative(&exact, 0.1).unwrap();
        for &d in noise.diagonal().iter() {
            assert!((d - 0.01).abs() < 1e-15);
        }
        // Scaling the measurement by c scales the covariance by c^2.
        let scaled = noise_covariance_relative(&(exact * 3.0), 0.1).unwrap();
        for &d in scaled.diagonal().iter() {
            assert!((d - 0.09).abs() < 1e-14);
        }
        assert!(noise_covariance_relative(&DVector::zeros(2), 0.1).is_err());
    }

    #[test]
    fn range_covariance_formula() {
        let data = DVector::from_vec(vec![0.0, 2.0]);
        let gamma = 6e-4;
        let noise = noise_covariance_range(&data, gamma).unwrap();
        let expect = (2.0 * gamma) * (2.0 * gamma);
        for &d in noise.diagonal().iter() {
            assert!((d - expect).abs() < 1e-18);
        }
        assert!(noise_covariance_range(&DVector::from_element(4, 1.0), gamma).is_err());
    }

    #[test]
    fn simulation_deterministic_and_noise_free_limit() {
        let mesh = small_cylinder();
        let phantom = Phantom {
            background: 1.0,
            inclusions: vec![],
        };
        let z = ContactResistances::constant(4, 2e-3).unwrap();
        let patterns = standard_patterns(4).unwrap();
        let a = simulate_measurements(&mesh, &phantom, &z, &patterns, 4e-3, 11).unwrap();
        let b = simulate_measurements(&mesh, &phantom, &z, &patterns, 4e-3, 11).unwrap();
        assert_eq!(a.data, b.data);
        assert!((&a.data - &a.exact).norm() > 0.0);
        // gamma -> 0: the noise underflows against the measurement scale.
        let c = simulate_measurements(&mesh, &phantom, &z, &patterns, 1e-120, 11).unwrap();
        assert_eq!(c.data, c.exact);
    }

    #[test]
    fn dataset_round_trip() {
        let mesh = small_cylinder();
        let phantom = Phantom {
            background: 1.0,
            inclusions: vec![],
        };
        let z = ContactResistances::constant(4, 2e-3).unwrap();
        let patterns = standard_patterns(4).unwrap();
        let sim = simulate_measurements(&mesh, &phantom, &z, &patterns, 4e-3, 3).unwrap();
        let dataset = Dataset::from_simulation(&mesh, &sim, 4, 4e-3, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.json");
        dataset.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.voltages, dataset.voltages);
        assert_eq!(loaded.covariance_diagonal, dataset.covariance_diagonal);
        assert_eq!(loaded.mesh_hash, dataset.mesh_hash);
        assert_eq!(loaded.exact.clone().unwrap(), sim.exact);
        // Re-saving the loaded dataset must reproduce the bytes.
        let path2 = dir.path().join("dataset2.json");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn dataset_rejects_bad_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            "{\"m\":2,\"pattern_convention\":\"fixed-feed-e1\",\"gamma\":1e-3,\"seed\":0,\
             \"mesh_hash\":\"x\",\"mesh_nodes\":10,\"voltages\":[1.0],\
             \"covariance_diagonal\":[1.0,1.0]}",
        )
        .unwrap();
        assert!(Dataset::load(&path).is_err());
    }

    #[test]
    fn phantom_file_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phantom.json");
        std::fs::write(
            &path,
            "{\"background\":1.0,\"inclusions\":[{\"shape\":{\"type\":\"ball\",\
             \"center\":[0,0,0.5],\"radius\":0.3},\"conductivity\":2.0}]}",
        )
        .unwrap();
        let phantom = Phantom::load(&path).unwrap();
        assert_eq!(phantom.inclusions.len(), 1);

        std::fs::write(
            &path,
            "{\"background\":-1.0,\"inclusions\":[]}",
        )
        .unwrap();
        assert!(Phantom::load(&path).is_err());
    }

    #[test]
    fn box_mesh_simulation_runs() {
        // Exercises the path used by the slab-based tests elsewhere.
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
        let mesh = generate_box_mesh([1.0, 1.0, 1.0], [2; 3], &patches).unwrap();
        let phantom = Phantom {
            background: 1.0,
            inclusions: vec![],
        };
        let z = ContactResistances::constant(2, 0.1).unwrap();
        let patterns = standard_patterns(2).unwrap();
        let sim = simulate_measurements(&mesh, &phantom, &z, &patterns, 1e-6, 0).unwrap();
        assert!((sim.exact[0] - 0.6).abs() < 1e-10);
    }
}
