//! Tetrahedral meshes with tagged electrode boundary patches.
//!
//! The mesh owns the piecewise linear basis bookkeeping: vertices, positively
//! oriented tetrahedra, outward oriented boundary triangles and, per
//! electrode, the set of boundary triangles it covers. Structured generators
//! for boxes and cylinders are provided for test geometries; everything else
//! is expected to arrive through the JSON mesh format.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{EitError, Result};
use crate::textio::{fmt_f64, json_usize_array};

/// Immutable tetrahedral mesh. All indices are 0-based.
#[derive(Clone, Debug)]
pub struct TetMesh {
    vertices: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
    boundary_tris: Vec<[usize; 3]>,
    electrodes: Vec<Vec<usize>>,
}

impl TetMesh {
    /// Build a mesh and run the full validity check.
    pub fn new(
        vertices: Vec<[f64; 3]>,
        tets: Vec<[usize; 4]>,
        boundary_tris: Vec<[usize; 3]>,
        electrodes: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            tets,
            boundary_tris,
            electrodes,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn num_nodes(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn num_boundary_tris(&self) -> usize {
        self.boundary_tris.len()
    }

    pub fn num_electrodes(&self) -> usize {
        self.electrodes.len()
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        self.vertices[i]
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn tet(&self, k: usize) -> [usize; 4] {
        self.tets[k]
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn boundary_tri(&self, t: usize) -> [usize; 3] {
        self.boundary_tris[t]
    }

    pub fn boundary_tris(&self) -> &[[usize; 3]] {
        &self.boundary_tris
    }

    /// Boundary-triangle indices of electrode `m`.
    pub fn electrode(&self, m: usize) -> &[usize] {
        &self.electrodes[m]
    }

    pub fn tet_volume(&self, k: usize) -> f64 {
        let [a, b, c, d] = self.tets[k];
        signed_tet_volume(
            self.vertices[a],
            self.vertices[b],
            self.vertices[c],
            self.vertices[d],
        )
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.num_tets()).map(|k| self.tet_volume(k)).sum()
    }

    pub fn boundary_tri_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.boundary_tris[t];
        triangle_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn electrode_area(&self, m: usize) -> f64 {
        self.electrodes[m]
            .iter()
            .map(|&t| self.boundary_tri_area(t))
            .sum()
    }

    /// Sorted vertex indices lying on electrode `m`.
    pub fn electrode_nodes(&self, m: usize) -> Vec<usize> {
        let mut set = BTreeSet::new();
        for &t in &self.electrodes[m] {
            set.extend(self.boundary_tris[t]);
        }
        set.into_iter().collect()
    }

    /// Sorted vertex indices lying on any electrode (the Dirichlet set used
    /// by the prior matrix).
    pub fn all_electrode_nodes(&self) -> Vec<usize> {
        let mut set = BTreeSet::new();
        for tris in &self.electrodes {
            for &t in tris {
                set.extend(self.boundary_tris[t]);
            }
        }
        set.into_iter().collect()
    }

    fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        if nv < 4 {
            return Err(EitError::Mesh("mesh needs at least 4 vertices".into()));
        }
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(EitError::Mesh(format!("vertex {i} has non-finite coordinates")));
            }
        }
        for (k, t) in self.tets.iter().enumerate() {
            for &j in t {
                if j >= nv {
                    return Err(EitError::Mesh(format!(
                        "tet {k} references vertex {j} but the mesh has {nv} vertices"
                    )));
                }
            }
            let vol = self.tet_volume(k);
            if !(vol > 0.0) {
                return Err(EitError::Mesh(format!(
                    "tet {k} has non-positive signed volume {vol}"
                )));
            }
        }
        for (t, tri) in self.boundary_tris.iter().enumerate() {
            for &j in tri {
                if j >= nv {
                    return Err(EitError::Mesh(format!(
                        "boundary triangle {t} references vertex {j} out of range"
                    )));
                }
            }
        }

        // The listed boundary triangulation must coincide with the tet
        // surface, outward oriented.
        let mut face_count: HashMap<[usize; 3], (usize, [usize; 3])> = HashMap::new();
        for (k, _) in self.tets.iter().enumerate() {
            for face in outward_faces(self.tets[k]) {
                let key = sorted3(face);
                face_count
                    .entry(key)
                    .and_modify(|e| e.0 += 1)
                    .or_insert((1, face));
            }
        }
        let surface: HashMap<[usize; 3], [usize; 3]> = face_count
            .iter()
            .filter(|(_, (c, _))| *c == 1)
            .map(|(k, (_, f))| (*k, *f))
            .collect();
        if surface.len() != self.boundary_tris.len() {
            return Err(EitError::Mesh(format!(
                "boundary triangulation lists {} triangles but the tet surface has {}",
                self.boundary_tris.len(),
                surface.len()
            )));
        }
        for (t, tri) in self.boundary_tris.iter().enumerate() {
            match surface.get(&sorted3(*tri)) {
                None => {
                    return Err(EitError::Mesh(format!(
                        "boundary triangle {t} is not a surface face of any tet"
                    )))
                }
                Some(outward) => {
                    if !same_orientation(*tri, *outward) {
                        return Err(EitError::Mesh(format!(
                            "boundary triangle {t} is not outward oriented"
                        )));
                    }
                }
            }
        }
        // Consistent orientation <=> no directed edge appears twice.
        let mut directed = BTreeSet::new();
        for tri in &self.boundary_tris {
            for e in [[tri[0], tri[1]], [tri[1], tri[2]], [tri[2], tri[0]]] {
                if !directed.insert(e) {
                    return Err(EitError::Mesh(format!(
                        "boundary orientation inconsistent at edge {e:?}"
                    )));
                }
            }
        }

        // Electrodes: in-range, nonempty, pairwise disjoint.
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        for (m, tris) in self.electrodes.iter().enumerate() {
            if tris.is_empty() {
                return Err(EitError::Mesh(format!("electrode {m} covers no boundary triangles")));
            }
            for &t in tris {
                if t >= self.boundary_tris.len() {
                    return Err(EitError::Mesh(format!(
                        "electrode {m} references boundary triangle {t} out of range"
                    )));
                }
                if let Some(&prev) = owner.get(&t) {
                    return Err(EitError::Mesh(format!(
                        "electrodes {prev} and {m} overlap on boundary triangle {t}"
                    )));
                }
                owner.insert(t, m);
            }
        }

        self.check_connected()?;
        Ok(())
    }

    fn check_connected(&self) -> Result<()> {
        let nv = self.vertices.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for t in &self.tets {
            for i in 0..4 {
                for j in (i + 1)..4 {
                    adj[t[i]].push(t[j]);
                    adj[t[j]].push(t[i]);
                }
            }
        }
        let mut seen = vec![false; nv];
        let mut queue = VecDeque::new();
        seen[0] = true;
        queue.push_back(0);
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        if count != nv {
            return Err(EitError::Mesh(format!(
                "mesh is not connected ({count} of {nv} vertices reachable)"
            )));
        }
        Ok(())
    }

    /// Canonical JSON serialization; also the byte stream that is hashed.
    pub fn to_json_string(&self) -> Result<String> {
        for v in &self.vertices {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(EitError::Mesh("cannot serialize non-finite coordinates".into()));
            }
        }
        let mut s = String::new();
        s.push_str("{\"vertices\":[");
        for (i, v) in self.vertices.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&format!("[{},{},{}]", fmt_f64(v[0]), fmt_f64(v[1]), fmt_f64(v[2])));
        }
        s.push_str("],\"tets\":[");
        for (i, t) in self.tets.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&format!("[{},{},{},{}]", t[0], t[1], t[2], t[3]));
        }
        s.push_str("],\"boundary_tris\":[");
        for (i, t) in self.boundary_tris.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&format!("[{},{},{}]", t[0], t[1], t[2]));
        }
        s.push_str("],\"electrodes\":[");
        for (i, e) in self.electrodes.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&json_usize_array(e));
        }
        s.push_str("]}");
        Ok(s)
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn content_hash(&self) -> Result<String> {
        let json = self.to_json_string()?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json_string()?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct MeshFile {
            vertices: Vec<[f64; 3]>,
            tets: Vec<[usize; 4]>,
            boundary_tris: Vec<[usize; 3]>,
            electrodes: Vec<Vec<usize>>,
        }
        let file: MeshFile = serde_json::from_str(text)
            .map_err(|e| EitError::format(origin, e.to_string()))?;
        Self::new(file.vertices, file.tets, file.boundary_tris, file.electrodes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Legacy ASCII VTK export of the mesh with optional nodal scalar fields.
    pub fn export_vtk(&self, path: impl AsRef<Path>, fields: &[(&str, &[f64])]) -> Result<()> {
        for (name, f) in fields {
            if f.len() != self.num_nodes() {
                return Err(EitError::Mismatch(format!(
                    "field '{name}' has {} values for {} nodes",
                    f.len(),
                    self.num_nodes()
                )));
            }
        }
        let mut s = String::new();
        s.push_str("# vtk DataFile Version 3.0\n");
        s.push_str("eit unstructured mesh\n");
        s.push_str("ASCII\n");
        s.push_str("DATASET UNSTRUCTURED_GRID\n");
        s.push_str(&format!("POINTS {} double\n", self.num_nodes()));
        for v in &self.vertices {
            s.push_str(&format!("{} {} {}\n", fmt_f64(v[0]), fmt_f64(v[1]), fmt_f64(v[2])));
        }
        s.push_str(&format!("CELLS {} {}\n", self.num_tets(), 5 * self.num_tets()));
        for t in &self.tets {
            s.push_str(&format!("4 {} {} {} {}\n", t[0], t[1], t[2], t[3]));
        }
        s.push_str(&format!("CELL_TYPES {}\n", self.num_tets()));
        for _ in &self.tets {
            s.push_str("10\n");
        }
        if !fields.is_empty() {
            s.push_str(&format!("POINT_DATA {}\n", self.num_nodes()));
            for (name, f) in fields {
                s.push_str(&format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n"));
                for x in *f {
                    s.push_str(&fmt_f64(*x));
                    s.push('\n');
                }
            }
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

fn sorted3(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

/// True when `a` is an even (cyclic) permutation of `b`.
fn same_orientation(a: [usize; 3], b: [usize; 3]) -> bool {
    a == b || a == [b[1], b[2], b[0]] || a == [b[2], b[0], b[1]]
}

/// The four faces of a positively oriented tet, each oriented outward.
fn outward_faces([a, b, c, d]: [usize; 4]) -> [[usize; 3]; 4] {
    [[a, c, b], [a, b, d], [b, c, d], [a, d, c]]
}

pub(crate) fn signed_tet_volume(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]) -> f64 {
    let u = sub(b, a);
    let v = sub(c, a);
    let w = sub(d, a);
    dot(u, cross(v, w)) / 6.0
}

pub(crate) fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let n = cross(sub(b, a), sub(c, a));
    0.5 * dot(n, n).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

// ---------------------------------------------------------------------------
// Box generator
// ---------------------------------------------------------------------------

/// One of the six axis-aligned faces of a box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxFace {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

/// Rectangular electrode patch on a box face, in face-local 2D coordinates
/// (the two axes other than the face normal, in x→y→z order).
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct BoxPatch {
    pub face: BoxFace,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BoxPatch {
    fn overlaps(&self, other: &BoxPatch) -> bool {
        self.face == other.face
            && self.min[0] < other.max[0]
            && other.min[0] < self.max[0]
            && self.min[1] < other.max[1]
            && other.min[1] < self.max[1]
    }

    fn contains(&self, uv: [f64; 2]) -> bool {
        uv[0] >= self.min[0] && uv[0] <= self.max[0] && uv[1] >= self.min[1] && uv[1] <= self.max[1]
    }
}

/// Structured box mesh: each hex cell is split into six positively oriented
/// tets with globally consistent diagonals, so neighboring cells conform.
pub fn generate_box_mesh(
    dimensions: [f64; 3],
    resolution: [usize; 3],
    patches: &[BoxPatch],
) -> Result<TetMesh> {
    if dimensions.iter().any(|&d| !(d > 0.0)) {
        return Err(EitError::InvalidParameter(format!(
            "box dimensions must be positive, got {dimensions:?}"
        )));
    }
    if resolution.iter().any(|&r| r < 2) {
        return Err(EitError::InvalidParameter(format!(
            "box resolution must be at least 2 cells per axis, got {resolution:?}"
        )));
    }
    for (i, a) in patches.iter().enumerate() {
        for (j, b) in patches.iter().enumerate().skip(i + 1) {
            if a.overlaps(b) {
                return Err(EitError::InvalidParameter(format!(
                    "electrode patches {i} and {j} overlap on face {:?}",
                    a.face
                )));
            }
        }
    }

    let [nx, ny, nz] = resolution;
    let [lx, ly, lz] = dimensions;
    let vid = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([
                    lx * i as f64 / nx as f64,
                    ly * j as f64 / ny as f64,
                    lz * k as f64 / nz as f64,
                ]);
            }
        }
    }

    // Kuhn subdivision: one tet per permutation of the axes, walking from
    // corner (0,0,0) to (1,1,1). Even permutations are already positively
    // oriented, odd ones need a swap.
    const PERMS: [([usize; 3], bool); 6] = [
        ([0, 1, 2], true),
        ([0, 2, 1], false),
        ([1, 0, 2], false),
        ([1, 2, 0], true),
        ([2, 0, 1], true),
        ([2, 1, 0], false),
    ];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let corner = |bits: [usize; 3]| vid(i + bits[0], j + bits[1], k + bits[2]);
                for (perm, even) in PERMS {
                    let mut bits = [0usize; 3];
                    let v0 = corner(bits);
                    bits[perm[0]] = 1;
                    let v1 = corner(bits);
                    bits[perm[1]] = 1;
                    let v2 = corner(bits);
                    let v3 = corner([1, 1, 1]);
                    if even {
                        tets.push([v0, v1, v2, v3]);
                    } else {
                        tets.push([v0, v2, v1, v3]);
                    }
                }
            }
        }
    }

    let boundary_tris = extract_boundary(&tets);

    // Snap each patch to the boundary triangles whose centroid lies inside
    // its rectangle on the correct face plane.
    let tol = 1e-9 * dimensions.iter().cloned().fold(f64::MIN, f64::max);
    let mut electrodes = vec![Vec::new(); patches.len()];
    for (t, tri) in boundary_tris.iter().enumerate() {
        let pts = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
        for (m, patch) in patches.iter().enumerate() {
            let (axis, plane) = match patch.face {
                BoxFace::XMin => (0, 0.0),
                BoxFace::XMax => (0, lx),
                BoxFace::YMin => (1, 0.0),
                BoxFace::YMax => (1, ly),
                BoxFace::ZMin => (2, 0.0),
                BoxFace::ZMax => (2, lz),
            };
            if pts.iter().all(|p| (p[axis] - plane).abs() <= tol) {
                let (u, v) = match axis {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let centroid = [
                    (pts[0][u] + pts[1][u] + pts[2][u]) / 3.0,
                    (pts[0][v] + pts[1][v] + pts[2][v]) / 3.0,
                ];
                if patch.contains(centroid) {
                    electrodes[m].push(t);
                    break;
                }
            }
        }
    }
    for (m, e) in electrodes.iter().enumerate() {
        if e.is_empty() {
            return Err(EitError::InvalidParameter(format!(
                "electrode patch {m} snapped to an empty triangle set; enlarge it or refine the mesh"
            )));
        }
    }

    TetMesh::new(vertices, tets, boundary_tris, electrodes)
}

/// Faces that occur exactly once across all tets, outward oriented.
fn extract_boundary(tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    let mut count: HashMap<[usize; 3], (usize, [usize; 3])> = HashMap::new();
    for &tet in tets {
        for face in outward_faces(tet) {
            count
                .entry(sorted3(face))
                .and_modify(|e| e.0 += 1)
                .or_insert((1, face));
        }
    }
    let mut tris: Vec<[usize; 3]> = count
        .into_iter()
        .filter(|(_, (c, _))| *c == 1)
        .map(|(_, (_, f))| f)
        .collect();
    // Deterministic ordering independent of hash-map iteration.
    tris.sort_unstable();
    tris
}

// ---------------------------------------------------------------------------
// Cylinder generator
// ---------------------------------------------------------------------------

/// Cells per direction for the structured cylinder mesh.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct CylinderResolution {
    /// Rings between the axis and the lateral surface.
    pub radial: usize,
    /// Angular sectors.
    pub angular: usize,
    /// Layers along the axis.
    pub vertical: usize,
}

/// Structured cylinder mesh (axis along z, base at z = 0) with `m`
/// rectangular electrodes equispaced on the lateral surface in one ring
/// (two rings when `m` > 24). `electrode_size` is (arc width, height) in
/// physical units.
pub fn generate_cylinder_mesh(
    radius: f64,
    height: f64,
    resolution: CylinderResolution,
    m: usize,
    electrode_size: [f64; 2],
) -> Result<TetMesh> {
    if !(radius > 0.0) || !(height > 0.0) {
        return Err(EitError::InvalidParameter(
            "cylinder radius and height must be positive".into(),
        ));
    }
    if m < 2 {
        return Err(EitError::InvalidParameter(format!(
            "the complete electrode model needs at least 2 electrodes, got {m}"
        )));
    }
    let (nr, na, nv) = (resolution.radial, resolution.angular, resolution.vertical);
    if nr < 1 || na < 3 || nv < 1 {
        return Err(EitError::InvalidParameter(format!(
            "cylinder resolution too coarse: {resolution:?}"
        )));
    }
    let [width, e_height] = electrode_size;
    if !(width > 0.0) || !(e_height > 0.0) {
        return Err(EitError::InvalidParameter(
            "electrode size must be positive".into(),
        ));
    }
    let rings: usize = if m <= 24 { 1 } else { 2 };
    let per_ring = m.div_ceil(rings);
    let angular_width = width / radius;
    if angular_width >= 2.0 * std::f64::consts::PI / per_ring as f64 {
        return Err(EitError::InvalidParameter(format!(
            "electrode arc width {width} does not leave gaps between {per_ring} electrodes per ring"
        )));
    }
    if e_height >= height {
        return Err(EitError::InvalidParameter(
            "electrode height must be smaller than the cylinder height".into(),
        ));
    }

    // Disk vertices: center point plus `nr` rings of `na` points.
    let per_layer = 1 + nr * na;
    let disk_id = |ring: usize, k: usize| {
        if ring == 0 {
            0
        } else {
            1 + (ring - 1) * na + (k % na)
        }
    };
    let mut vertices = Vec::with_capacity(per_layer * (nv + 1));
    for layer in 0..=nv {
        let z = height * layer as f64 / nv as f64;
        vertices.push([0.0, 0.0, z]);
        for ring in 1..=nr {
            let r = radius * ring as f64 / nr as f64;
            for k in 0..na {
                let theta = 2.0 * std::f64::consts::PI * k as f64 / na as f64;
                vertices.push([r * theta.cos(), r * theta.sin(), z]);
            }
        }
    }

    // Disk triangulation (counterclockwise seen from +z).
    let mut disk_tris: Vec<[usize; 3]> = Vec::with_capacity(na * (2 * nr - 1));
    for k in 0..na {
        disk_tris.push([disk_id(0, 0), disk_id(1, k), disk_id(1, k + 1)]);
    }
    for ring in 1..nr {
        for k in 0..na {
            let (a, b) = (disk_id(ring, k), disk_id(ring, k + 1));
            let (c, d) = (disk_id(ring + 1, k), disk_id(ring + 1, k + 1));
            disk_tris.push([a, c, d]);
            disk_tris.push([a, d, b]);
        }
    }

    // Extrude each disk triangle into prisms and split with the min-vertex
    // rule, which picks quad diagonals consistently across neighbors.
    let mut tets = Vec::with_capacity(disk_tris.len() * nv * 3);
    for layer in 0..nv {
        let lo = layer * per_layer;
        let hi = (layer + 1) * per_layer;
        for tri in &disk_tris {
            let prism = [
                tri[0] + lo,
                tri[1] + lo,
                tri[2] + lo,
                tri[0] + hi,
                tri[1] + hi,
                tri[2] + hi,
            ];
            for tet in split_prism(prism) {
                let vol = signed_tet_volume(
                    vertices[tet[0]],
                    vertices[tet[1]],
                    vertices[tet[2]],
                    vertices[tet[3]],
                );
                if vol < 0.0 {
                    tets.push([tet[0], tet[1], tet[3], tet[2]]);
                } else {
                    tets.push(tet);
                }
            }
        }
    }

    let boundary_tris = extract_boundary(&tets);

    // Electrode windows on the lateral surface, centroid-snapped.
    let ring_heights: Vec<f64> = match rings {
        1 => vec![height / 2.0],
        _ => vec![height / 3.0, 2.0 * height / 3.0],
    };
    let lateral_tol = 1e-9 * radius;
    let inner_radius_of = |tri: &[usize; 3]| {
        tri.iter()
            .map(|&v| (vertices[v][0].powi(2) + vertices[v][1].powi(2)).sqrt())
            .fold(f64::MAX, f64::min)
    };
    let mut electrodes = vec![Vec::new(); m];
    for (t, tri) in boundary_tris.iter().enumerate() {
        if inner_radius_of(tri) < radius * (1.0 - 1e-6) - lateral_tol {
            continue; // not on the lateral surface
        }
        let centroid = centroid3(&vertices, tri);
        let theta_c = centroid[1].atan2(centroid[0]);
        for e in 0..m {
            let ring = e / per_ring;
            let slot = e % per_ring;
            let theta_e = 2.0 * std::f64::consts::PI * slot as f64 / per_ring as f64;
            let dtheta = wrap_angle(theta_c - theta_e);
            if dtheta.abs() <= angular_width / 2.0
                && (centroid[2] - ring_heights[ring]).abs() <= e_height / 2.0
            {
                electrodes[e].push(t);
                break;
            }
        }
    }
    for (e, tris) in electrodes.iter().enumerate() {
        if tris.is_empty() {
            return Err(EitError::InvalidParameter(format!(
                "electrode {e} snapped to an empty triangle set; enlarge it or refine the mesh"
            )));
        }
    }

    TetMesh::new(vertices, tets, boundary_tris, electrodes)
}

fn centroid3(vertices: &[[f64; 3]], tri: &[usize; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for &v in tri {
        for d in 0..3 {
            c[d] += vertices[v][d] / 3.0;
        }
    }
    c
}

fn wrap_angle(mut a: f64) -> f64 {
    use std::f64::consts::PI;
    while a > PI {
        a -= 2.0 * PI;
    }
    while a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Split a prism (bottom v0 v1 v2, top v3 v4 v5, vi+3 above vi) into three
/// tets whose quad-face diagonals all pass through each face's smallest
/// vertex index, making neighboring prisms conform.
fn split_prism(p: [usize; 6]) -> [[usize; 4]; 3] {
    // Rotations of the prism symmetry group that keep the vertical edge
    // pairing; indices select from the input prism.
    const ROTATIONS: [[usize; 6]; 6] = [
        [0, 1, 2, 3, 4, 5],
        [1, 2, 0, 4, 5, 3],
        [2, 0, 1, 5, 3, 4],
        [3, 5, 4, 0, 2, 1],
        [4, 3, 5, 1, 0, 2],
        [5, 4, 3, 2, 1, 0],
    ];
    let min_pos = (0..6).min_by_key(|&i| p[i]).unwrap();
    let rot = ROTATIONS
        .iter()
        .find(|r| r[0] == min_pos)
        .expect("rotation table covers all positions");
    let q: Vec<usize> = rot.iter().map(|&i| p[i]).collect();
    if q[1].min(q[5]) < q[2].min(q[4]) {
        [[q[0], q[1], q[2], q[5]], [q[0], q[1], q[5], q[4]], [q[0], q[4], q[5], q[3]]]
    } else {
        [[q[0], q[1], q[2], q[4]], [q[0], q[4], q[2], q[5]], [q[0], q[4], q[5], q[3]]]
    }
}

// ---------------------------------------------------------------------------
// Point location for cross-section sampling
// ---------------------------------------------------------------------------

/// Uniform-grid accelerated point-in-tet lookup for nodal field sampling.
pub struct PointLocator<'a> {
    mesh: &'a TetMesh,
    lo: [f64; 3],
    hi: [f64; 3],
    cells: [usize; 3],
    buckets: Vec<Vec<usize>>,
}

impl<'a> PointLocator<'a> {
    pub fn new(mesh: &'a TetMesh) -> Self {
        let mut lo = [f64::MAX; 3];
        let mut hi = [f64::MIN; 3];
        for v in mesh.vertices() {
            for d in 0..3 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        let n = ((mesh.num_tets() as f64).powf(1.0 / 3.0).ceil() as usize).clamp(1, 32);
        let cells = [n, n, n];
        let mut buckets = vec![Vec::new(); n * n * n];
        let span = |d: usize| (hi[d] - lo[d]).max(1e-300);
        for (k, tet) in mesh.tets().iter().enumerate() {
            let mut tlo = [f64::MAX; 3];
            let mut thi = [f64::MIN; 3];
            for &v in tet {
                let p = mesh.vertex(v);
                for d in 0..3 {
                    tlo[d] = tlo[d].min(p[d]);
                    thi[d] = thi[d].max(p[d]);
                }
            }
            let idx = |x: f64, d: usize| {
                (((x - lo[d]) / span(d) * n as f64).floor() as isize).clamp(0, n as isize - 1)
                    as usize
            };
            let (i0, i1) = (idx(tlo[0], 0), idx(thi[0], 0));
            let (j0, j1) = (idx(tlo[1], 1), idx(thi[1], 1));
            let (k0, k1) = (idx(tlo[2], 2), idx(thi[2], 2));
            for i in i0..=i1 {
                for j in j0..=j1 {
                    for kk in k0..=k1 {
                        buckets[(kk * n + j) * n + i].push(k);
                    }
                }
            }
        }
        Self {
            mesh,
            lo,
            hi,
            cells,
            buckets,
        }
    }

    /// Containing tet and barycentric coordinates, if inside the mesh.
    pub fn locate(&self, p: [f64; 3]) -> Option<(usize, [f64; 4])> {
        let n = self.cells[0];
        for d in 0..3 {
            if p[d] < self.lo[d] - 1e-12 || p[d] > self.hi[d] + 1e-12 {
                return None;
            }
        }
        let idx = |x: f64, d: usize| {
            (((x - self.lo[d]) / (self.hi[d] - self.lo[d]).max(1e-300) * n as f64).floor()
                as isize)
                .clamp(0, n as isize - 1) as usize
        };
        let bucket = &self.buckets[(idx(p[2], 2) * n + idx(p[1], 1)) * n + idx(p[0], 0)];
        for &k in bucket {
            if let Some(bary) = self.barycentric(k, p) {
                return Some((k, bary));
            }
        }
        None
    }

    /// Linear interpolation of a nodal field at a point.
    pub fn interpolate(&self, field: &[f64], p: [f64; 3]) -> Option<f64> {
        let (k, bary) = self.locate(p)?;
        let tet = self.mesh.tet(k);
        Some((0..4).map(|i| bary[i] * field[tet[i]]).sum())
    }

    fn barycentric(&self, k: usize, p: [f64; 3]) -> Option<[f64; 4]> {
        let tet = self.mesh.tet(k);
        let a = self.mesh.vertex(tet[0]);
        let b = self.mesh.vertex(tet[1]);
        let c = self.mesh.vertex(tet[2]);
        let d = self.mesh.vertex(tet[3]);
        let vol = signed_tet_volume(a, b, c, d);
        let l1 = signed_tet_volume(a, p, c, d) / vol;
        let l2 = signed_tet_volume(a, b, p, d) / vol;
        let l3 = signed_tet_volume(a, b, c, p) / vol;
        let l0 = 1.0 - l1 - l2 - l3;
        let eps = -1e-10;
        if l0 >= eps && l1 >= eps && l2 >= eps && l3 >= eps {
            Some([l0, l1, l2, l3])
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(res: usize) -> TetMesh {
        generate_box_mesh([1.0, 1.0, 1.0], [res; 3], &[]).unwrap()
    }

    /// Two full opposite faces of the unit box as electrodes.
    pub(crate) fn slab_patches() -> Vec<BoxPatch> {
        vec![
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
        ]
    }

    #[test]
    fn box_counts_match_hand_count() {
        let mesh = unit_box(2);
        assert_eq!(mesh.num_nodes(), 27);
        assert_eq!(mesh.num_tets(), 48);
    }

    #[test]
    fn full_face_electrodes_have_expected_triangles() {
        let mesh = generate_box_mesh([1.0, 1.0, 1.0], [2, 2, 2], &slab_patches()).unwrap();
        assert_eq!(mesh.num_electrodes(), 2);
        assert_eq!(mesh.electrode(0).len(), 8);
        assert_eq!(mesh.electrode(1).len(), 8);
    }

    #[test]
    fn box_volume_is_exact() {
        for res in [[2, 2, 2], [3, 2, 4]] {
            let mesh = generate_box_mesh([1.5, 0.7, 2.0], res, &[]).unwrap();
            let expect = 1.5 * 0.7 * 2.0;
            assert!((mesh.total_volume() - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn all_tets_positive_and_surface_closed() {
        let mesh = unit_box(3);
        for k in 0..mesh.num_tets() {
            assert!(mesh.tet_volume(k) > 0.0);
        }
        // validation already checks closure + orientation; spot check Euler
        // via the directed-edge argument: every boundary edge appears twice,
        // once per direction.
        let mut undirected = std::collections::BTreeMap::new();
        for tri in mesh.boundary_tris() {
            for e in [[tri[0], tri[1]], [tri[1], tri[2]], [tri[2], tri[0]]] {
                let key = if e[0] < e[1] { [e[0], e[1]] } else { [e[1], e[0]] };
                *undirected.entry(key).or_insert(0usize) += 1;
            }
        }
        assert!(undirected.values().all(|&c| c == 2));
    }

    #[test]
    fn overlapping_patches_rejected_with_pair() {
        let patches = vec![
            BoxPatch {
                face: BoxFace::ZMax,
                min: [0.0, 0.0],
                max: [0.6, 0.6],
            },
            BoxPatch {
                face: BoxFace::ZMax,
                min: [0.5, 0.5],
                max: [1.0, 1.0],
            },
        ];
        let err = generate_box_mesh([1.0, 1.0, 1.0], [4, 4, 4], &patches).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0") && msg.contains("1"), "{msg}");
    }

    #[test]
    fn cylinder_volume_matches_inscribed_polygon_prism() {
        let (radius, height, na) = (1.0, 1.0, 32usize);
        let mesh = generate_cylinder_mesh(
            radius,
            height,
            CylinderResolution {
                radial: 3,
                angular: na,
                vertical: 4,
            },
            16,
            [0.15, 0.2],
        )
        .unwrap();
        // Exact volume of the polygonal prism the triangulation fills.
        let polygon_area = 0.5 * na as f64 * radius * radius * (2.0 * std::f64::consts::PI / na as f64).sin();
        let exact = polygon_area * height;
        assert!((mesh.total_volume() - exact).abs() <= 1e-12 * exact);
        // ... which itself approximates the cylinder to better than 2%.
        let cyl = std::f64::consts::PI * radius * radius * height;
        assert!((mesh.total_volume() - cyl).abs() / cyl < 0.02);
    }

    #[test]
    fn cylinder_has_m_disjoint_electrodes() {
        let mesh = generate_cylinder_mesh(
            1.0,
            1.0,
            CylinderResolution {
                radial: 2,
                angular: 32,
                vertical: 4,
            },
            16,
            [0.2, 0.25],
        )
        .unwrap();
        assert_eq!(mesh.num_electrodes(), 16);
        let mut seen = std::collections::BTreeSet::new();
        for m in 0..16 {
            assert!(!mesh.electrode(m).is_empty());
            for &t in mesh.electrode(m) {
                assert!(seen.insert(t), "triangle {t} in two electrodes");
            }
        }
    }

    #[test]
    fn cylinder_rejects_too_few_electrodes() {
        let res = CylinderResolution {
            radial: 2,
            angular: 16,
            vertical: 2,
        };
        assert!(generate_cylinder_mesh(1.0, 1.0, res, 0, [0.2, 0.2]).is_err());
        assert!(generate_cylinder_mesh(1.0, 1.0, res, 1, [0.2, 0.2]).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.json");
        let mesh = generate_box_mesh([1.0, 2.0, 3.0], [2, 3, 2], &slab_patches()).unwrap();
        mesh.save(&path).unwrap();
        let loaded = TetMesh::load(&path).unwrap();
        assert_eq!(mesh.vertices(), loaded.vertices());
        assert_eq!(mesh.tets(), loaded.tets());
        assert_eq!(mesh.boundary_tris(), loaded.boundary_tris());
        assert_eq!(mesh.electrodes, loaded.electrodes);
        assert_eq!(mesh.content_hash().unwrap(), loaded.content_hash().unwrap());
    }

    #[test]
    fn load_rejects_dangling_vertex_index() {
        let mesh = unit_box(2);
        let mut json: serde_json::Value =
            serde_json::from_str(&mesh.to_json_string().unwrap()).unwrap();
        json["tets"][0][0] = serde_json::json!(mesh.num_nodes());
        let err = TetMesh::from_json_str(&json.to_string(), "test").unwrap_err();
        assert!(err.to_string().contains("references vertex"), "{err}");
    }

    #[test]
    fn load_rejects_zero_volume_tet() {
        let mesh = unit_box(2);
        let mut json: serde_json::Value =
            serde_json::from_str(&mesh.to_json_string().unwrap()).unwrap();
        // Repeat a vertex: volume becomes zero.
        let first = json["tets"][0][0].clone();
        json["tets"][0][1] = first;
        let err = TetMesh::from_json_str(&json.to_string(), "test").unwrap_err();
        assert!(err.to_string().contains("volume"), "{err}");
    }

    #[test]
    fn load_rejects_malformed_json() {
        assert!(TetMesh::from_json_str("{\"vertices\": []", "test").is_err());
        assert!(TetMesh::from_json_str("{\"vertices\": [], \"unknown\": 1}", "test").is_err());
    }

    #[test]
    fn point_locator_interpolates_linear_field_exactly() {
        let mesh = unit_box(3);
        let field: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|v| 2.0 * v[0] - 0.5 * v[1] + v[2] + 1.0)
            .collect();
        let locator = PointLocator::new(&mesh);
        for p in [[0.1, 0.2, 0.3], [0.99, 0.01, 0.5], [0.5, 0.5, 0.5]] {
            let got = locator.interpolate(&field, p).unwrap();
            let expect = 2.0 * p[0] - 0.5 * p[1] + p[2] + 1.0;
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
        assert!(locator.locate([2.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn prism_split_conforms_on_shared_quads() {
        // Interior faces of the cylinder mesh must be shared by exactly two
        // tets; a bad diagonal choice between neighboring prisms breaks this.
        let mesh = generate_cylinder_mesh(
            1.0,
            1.0,
            CylinderResolution {
                radial: 3,
                angular: 12,
                vertical: 3,
            },
            4,
            [0.5, 0.3],
        )
        .unwrap();
        let mut count: HashMap<[usize; 3], usize> = HashMap::new();
        for &tet in mesh.tets() {
            for face in outward_faces(tet) {
                *count.entry(sorted3(face)).or_insert(0) += 1;
            }
        }
        assert!(count.values().all(|&c| c == 1 || c == 2));
        let boundary = count.values().filter(|&&c| c == 1).count();
        assert_eq!(boundary, mesh.num_boundary_tris());
    }
}
