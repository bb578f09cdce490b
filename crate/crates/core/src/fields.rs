//! Displacement fields of the particle layer: uniform sampling lattice,
//! scattered FEM-style nodes with inverse-distance-weighted interpolation,
//! CSV ingest, and a linear-elastic half-space generator for tests and demos.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Vec3};

/// Geometry of the particle-bearing gel volume (gel frame, mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParticleLayerSpec {
    pub origin_mm: [f64; 3],
    pub extent_mm: [f64; 3],
    pub particle_radius_range_mm: [f64; 2],
    pub particle_volume_ratio: f64,
}

impl Default for ParticleLayerSpec {
    fn default() -> Self {
        Self {
            origin_mm: [0.0, 0.0, 0.0],
            extent_mm: [30.0, 30.0, 4.5],
            // 150-180 µm diameter microspheres
            particle_radius_range_mm: [0.075, 0.09],
            // not stated in the source material; same value as the worked count example
            particle_volume_ratio: 0.002,
        }
    }
}

impl ParticleLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.extent_mm.iter().all(|e| *e > 0.0 && e.is_finite()) {
            return Err(Error::invalid("layer extents must be positive"));
        }
        if !self.origin_mm.iter().all(|o| o.is_finite()) {
            return Err(Error::NonFinite("layer origin".into()));
        }
        let [lo, hi] = self.particle_radius_range_mm;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(
                "particle radius range must satisfy 0 < min <= max",
            ));
        }
        let ratio = self.particle_volume_ratio;
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid("particle volume ratio must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn origin(&self) -> Point3 {
        Point3::from(self.origin_mm)
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::from(self.extent_mm)
    }

    pub fn volume(&self) -> f64 {
        self.extent_mm.iter().product()
    }

    /// Height of the contact surface (top of the layer).
    pub fn surface_z(&self) -> f64 {
        self.origin_mm[2] + self.extent_mm[2]
    }

    /// Volume of a sphere with the mean particle radius.
    pub fn mean_particle_volume(&self) -> f64 {
        let r = 0.5 * (self.particle_radius_range_mm[0] + self.particle_radius_range_mm[1]);
        4.0 / 3.0 * PI * r * r * r
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.origin_mm[i] && p[i] <= self.origin_mm[i] + self.extent_mm[i])
    }
}

/// Axis-aligned lattice of points, x varying fastest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub first: Point3,
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> Point3 {
        Point3::new(
            self.first.x + i as f64 * self.spacing,
            self.first.y + j as f64 * self.spacing,
            self.first.z + k as f64 * self.spacing,
        )
    }

    pub fn points(&self) -> Vec<Point3> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(self.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(self.point(i, j, k));
                }
            }
        }
        out
    }
}

/// Cell-centred lattice with the given spacing covering the layer volume.
pub fn sample_lattice(layer: &ParticleLayerSpec, spacing: f64) -> Result<Lattice> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::invalid("grid spacing must be positive"));
    }
    let min_extent = layer
        .extent_mm
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if spacing > min_extent {
        return Err(Error::invalid(format!(
            "grid spacing {spacing} mm exceeds the smallest layer extent {min_extent} mm"
        )));
    }
    let mut dims = [0usize; 3];
    let mut first = [0.0; 3];
    for a in 0..3 {
        let e = layer.extent_mm[a];
        let n = ((e / spacing) * (1.0 + 1e-12)).floor().max(1.0) as usize;
        dims[a] = n;
        // centre the lattice; equals cell centres when spacing divides the extent
        first[a] = layer.origin_mm[a] + 0.5 * (e - (n as f64 - 1.0) * spacing);
    }
    Ok(Lattice {
        first: Point3::from(first),
        spacing,
        dims,
    })
}

/// Undeformed sample locations on a uniform grid over the layer.
pub fn sample_grid(layer: &ParticleLayerSpec, spacing: f64) -> Result<Vec<Point3>> {
    Ok(sample_lattice(layer, spacing)?.points())
}

/// Displacements attached to the points of a [`Lattice`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    lattice: Lattice,
    displacements: Vec<Vec3>,
}

impl GridField {
    pub fn new(lattice: Lattice, displacements: Vec<Vec3>) -> Result<Self> {
        if displacements.len() != lattice.len() {
            return Err(Error::Shape {
                expected: format!("{} displacements", lattice.len()),
                found: displacements.len().to_string(),
            });
        }
        if displacements
            .iter()
            .any(|d| !d.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite("grid displacement".into()));
        }
        Ok(Self {
            lattice,
            displacements,
        })
    }

    pub fn zeros(lattice: Lattice) -> Self {
        Self {
            displacements: vec![Vec3::zeros(); lattice.len()],
            lattice,
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn displacements(&self) -> &[Vec3] {
        &self.displacements
    }

    /// `(undeformed location, displacement)` pairs in lattice order.
    pub fn iter(&self) -> impl Iterator<Item = (Point3, Vec3)> + '_ {
        let [nx, ny, _] = self.lattice.dims;
        self.displacements.iter().enumerate().map(move |(idx, d)| {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / (nx * ny);
            (self.lattice.point(i, j, k), *d)
        })
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldBounds {
    pub origin_mm: [f64; 3],
    pub extent_mm: [f64; 3],
}

impl FieldBounds {
    fn contains(&self, p: &Point3, tol: f64) -> bool {
        (0..3).all(|i| {
            p[i] >= self.origin_mm[i] - tol && p[i] <= self.origin_mm[i] + self.extent_mm[i] + tol
        })
    }

    fn enclosing(points: &[Point3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Self {
            origin_mm: lo,
            extent_mm: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        }
    }
}

/// Uniform hash grid over node positions, stored CSR-style.
#[derive(Debug, Clone)]
struct SpatialHash {
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    members: Vec<u32>,
}

impl SpatialHash {
    fn build(positions: &[Point3], bounds: &FieldBounds) -> Self {
        let n = positions.len();
        // cell edge ≈ mean node spacing; flat boxes fall back to the 2D/1D spacing
        let ext: Vec<f64> = bounds.extent_mm.to_vec();
        let active: Vec<f64> = ext.iter().cloned().filter(|e| *e > 1e-9).collect();
        let cell = if active.is_empty() {
            1.0
        } else {
            let vol: f64 = active.iter().product();
            (vol / n as f64).powf(1.0 / active.len() as f64).max(1e-6)
        };
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = ((ext[a] / cell).floor() as usize + 1).clamp(1, 1 << 10);
        }
        let origin = Point3::from(bounds.origin_mm);
        let mut hash = Self {
            origin,
            cell,
            dims,
            starts: Vec::new(),
            members: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let cells: Vec<usize> = positions
            .iter()
            .map(|p| {
                let c = hash.cell_of(p);
                hash.flat(c)
            })
            .collect();
        let mut counts = vec![0u32; ncells + 1];
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut members = vec![0u32; n];
        for (idx, &c) in cells.iter().enumerate() {
            members[fill[c] as usize] = idx as u32;
            fill[c] += 1;
        }
        hash.starts = counts;
        hash.members = members;
        hash
    }

    #[inline]
    fn cell_of(&self, p: &Point3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = if f <= 0.0 {
                0
            } else {
                (f as usize).min(self.dims[a] - 1)
            };
        }
        c
    }

    #[inline]
    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    fn cell_members(&self, c: [usize; 3]) -> &[u32] {
        let f = self.flat(c);
        &self.members[self.starts[f] as usize..self.starts[f + 1] as usize]
    }

    /// k nearest nodes as `(distance, index)`, ascending, ties by index.
    fn nearest(&self, positions: &[Point3], q: &Point3, k: usize, out: &mut Vec<(f64, u32)>) {
        out.clear();
        let center = self.cell_of(q);
        let max_ring = *self.dims.iter().max().unwrap();
        for ring in 0..=max_ring {
            let lo: [i64; 3] = std::array::from_fn(|a| center[a] as i64 - ring as i64);
            let hi: [i64; 3] = std::array::from_fn(|a| center[a] as i64 + ring as i64);
            for cz in lo[2].max(0)..=hi[2].min(self.dims[2] as i64 - 1) {
                for cy in lo[1].max(0)..=hi[1].min(self.dims[1] as i64 - 1) {
                    for cx in lo[0].max(0)..=hi[0].min(self.dims[0] as i64 - 1) {
                        let on_shell = cx == lo[0]
                            || cx == hi[0]
                            || cy == lo[1]
                            || cy == hi[1]
                            || cz == lo[2]
                            || cz == hi[2];
                        if !on_shell {
                            continue;
                        }
                        for &idx in self.cell_members([cx as usize, cy as usize, cz as usize]) {
                            let d = (positions[idx as usize] - q).norm();
                            push_candidate(out, k, (d, idx));
                        }
                    }
                }
            }
            // every unvisited cell is at least `ring` cells away
            if out.len() == k && out[k - 1].0 <= ring as f64 * self.cell {
                break;
            }
        }
    }
}

#[inline]
fn cmp_candidate(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn push_candidate(out: &mut Vec<(f64, u32)>, k: usize, cand: (f64, u32)) {
    if out.len() == k && cmp_candidate(&cand, &out[k - 1]) != Ordering::Less {
        return;
    }
    let pos = out
        .binary_search_by(|probe| cmp_candidate(probe, &cand))
        .unwrap_or_else(|e| e);
    out.insert(pos, cand);
    if out.len() > k {
        out.pop();
    }
}

/// Displacements known at scattered nodes (gel frame, mm).
#[derive(Debug, Clone)]
pub struct ScatteredField {
    positions: Vec<Point3>,
    displacements: Vec<Vec3>,
    bounds: FieldBounds,
    index: SpatialHash,
}

/// Distance below which a query is treated as sitting on a node.
pub const IDW_EXACT_HIT_MM: f64 = 1e-9;

impl ScatteredField {
    /// Builds the field, using the nodes' bounding box as declared bounds.
    pub fn new(positions: Vec<Point3>, displacements: Vec<Vec3>) -> Result<Self> {
        let bounds = FieldBounds::enclosing(&positions);
        Self::with_bounds(positions, displacements, bounds)
    }

    pub fn with_bounds(
        positions: Vec<Point3>,
        displacements: Vec<Vec3>,
        bounds: FieldBounds,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyField);
        }
        if positions.len() != displacements.len() {
            return Err(Error::Shape {
                expected: format!("{} displacements", positions.len()),
                found: displacements.len().to_string(),
            });
        }
        for (i, (p, d)) in positions.iter().zip(&displacements).enumerate() {
            if !p.iter().chain(d.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("field node {i}")));
            }
            if !bounds.contains(p, 1e-9) {
                return Err(Error::OutOfExtent { index: i });
            }
        }
        let index = SpatialHash::build(&positions, &bounds);
        Ok(Self {
            positions,
            displacements,
            bounds,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn displacements(&self) -> &[Vec3] {
        &self.displacements
    }

    pub fn bounds(&self) -> &FieldBounds {
        &self.bounds
    }

    /// Indices and distances of the `k` nearest nodes, nearest first.
    pub fn nearest(&self, q: &Point3, k: usize) -> Vec<(f64, usize)> {
        let mut out = Vec::with_capacity(k + 1);
        self.index
            .nearest(&self.positions, q, k.min(self.len()), &mut out);
        out.into_iter().map(|(d, i)| (d, i as usize)).collect()
    }
}

/// Parameters of inverse-distance-weighted interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdwParams {
    pub power: f64,
    pub k_neighbors: usize,
}

impl Default for IdwParams {
    fn default() -> Self {
        Self {
            power: 2.0,
            k_neighbors: 8,
        }
    }
}

/// Shepard interpolation over the `k` nearest nodes with weights `d^-power`.
pub fn idw_interpolate(
    field: &ScatteredField,
    queries: &[Point3],
    params: IdwParams,
) -> Result<Vec<Vec3>> {
    if field.is_empty() {
        return Err(Error::EmptyField);
    }
    if !(params.power > 0.0) {
        return Err(Error::invalid("IDW power must be positive"));
    }
    let k = params.k_neighbors;
    if k == 0 || k > field.len() {
        return Err(Error::invalid(format!(
            "k_neighbors = {k} must lie in [1, {}]",
            field.len()
        )));
    }
    Ok(queries
        .par_iter()
        .map_init(
            || Vec::with_capacity(k + 1),
            |buf, q| {
                field.index.nearest(&field.positions, q, k, buf);
                let (d0, i0) = buf[0];
                if d0 < IDW_EXACT_HIT_MM {
                    return field.displacements[i0 as usize];
                }
                let mut acc = Vec3::zeros();
                let mut wsum = 0.0;
                for &(d, i) in buf.iter() {
                    let w = if params.power == 2.0 {
                        1.0 / (d * d)
                    } else {
                        d.powf(-params.power)
                    };
                    acc += w * field.displacements[i as usize];
                    wsum += w;
                }
                acc / wsum
            },
        )
        .collect())
}

/// Interpolates a scattered field onto a lattice.
pub fn interpolate_to_grid(
    field: &ScatteredField,
    lattice: Lattice,
    params: IdwParams,
) -> Result<GridField> {
    let disp = idw_interpolate(field, &lattice.points(), params)?;
    GridField::new(lattice, disp)
}

/// Isotropic linear-elastic material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticMaterial {
    pub shear_modulus_mpa: f64,
    pub poisson: f64,
}

impl Default for ElasticMaterial {
    fn default() -> Self {
        Self {
            shear_modulus_mpa: 0.005,
            poisson: 0.45,
        }
    }
}

impl ElasticMaterial {
    pub fn validate(&self) -> Result<()> {
        if !(self.shear_modulus_mpa > 0.0) {
            return Err(Error::invalid("shear modulus must be positive"));
        }
        if !(self.poisson > 0.0 && self.poisson < 0.5) {
            return Err(Error::invalid("Poisson ratio must lie in (0, 0.5)"));
        }
        Ok(())
    }

    /// Plane-strain modulus E / (1 - ν²).
    pub fn plane_strain_modulus(&self) -> f64 {
        let e = 2.0 * self.shear_modulus_mpa * (1.0 + self.poisson);
        e / (1.0 - self.poisson * self.poisson)
    }
}

/// Normal load on the half-space surface. `radius_mm == 0` is a point load;
/// otherwise the force is spread over a disc with a Hertzian pressure profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub center_mm: [f64; 2],
    pub normal_force_n: f64,
    pub radius_mm: f64,
}

impl Contact {
    /// Hertz contact of a rigid sphere pressed `depth` mm into the material.
    pub fn hertz(
        center_mm: [f64; 2],
        depth_mm: f64,
        indenter_radius_mm: f64,
        material: &ElasticMaterial,
    ) -> Self {
        let depth = depth_mm.max(0.0);
        let radius = (indenter_radius_mm * depth).sqrt();
        let force = 4.0 / 3.0
            * material.plane_strain_modulus()
            * indenter_radius_mm.sqrt()
            * depth.powf(1.5);
        Self {
            center_mm,
            normal_force_n: force,
            radius_mm: radius,
        }
    }
}

/// Discretisation of distributed contact loads into point loads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadQuadrature {
    pub rings: usize,
    pub spokes: usize,
}

impl Default for LoadQuadrature {
    fn default() -> Self {
        Self {
            rings: 8,
            spokes: 16,
        }
    }
}

impl LoadQuadrature {
    /// Point loads `(x, y, force)` whose forces sum to the contact force.
    pub fn point_loads(&self, contact: &Contact) -> Vec<(f64, f64, f64)> {
        let [cx, cy] = contact.center_mm;
        let a = contact.radius_mm;
        if a <= 0.0 || self.rings == 0 || self.spokes == 0 {
            return vec![(cx, cy, contact.normal_force_n)];
        }
        // force fraction of the annulus [s0, s1] under p ∝ sqrt(1 - s²)
        let cum = |s: f64| 1.0 - (1.0 - s * s).max(0.0).powf(1.5);
        let nr = self.rings;
        let mut loads = Vec::with_capacity(nr * self.spokes);
        for ring in 0..nr {
            let s0 = ring as f64 / nr as f64;
            let s1 = (ring + 1) as f64 / nr as f64;
            let frac = cum(s1) - cum(s0);
            let rho = a * 0.5 * (s0 + s1);
            let per = contact.normal_force_n * frac / self.spokes as f64;
            let offset = if ring % 2 == 0 { 0.0 } else { 0.5 };
            for k in 0..self.spokes {
                let th = 2.0 * PI * (k as f64 + offset) / self.spokes as f64;
                loads.push((cx + rho * th.cos(), cy + rho * th.sin(), per));
            }
        }
        loads
    }
}

/// Linear-elastic half-space below the plane `z = surface_z` (gel frame).
///
/// A synthetic stand-in for FEM output: Boussinesq's point-load solution,
/// superposed over point loads. Not a hyperelastic model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace {
    pub surface_z: f64,
    pub material: ElasticMaterial,
    pub quadrature: LoadQuadrature,
}

impl HalfSpace {
    /// Displacement at `q` due to a normal point force `force` (N, positive
    /// pressing into the material) applied at `(x, y)` on the surface.
    #[inline]
    fn point_load(&self, x: f64, y: f64, force: f64, q: &Point3) -> Result<Vec3> {
        let depth = self.surface_z - q.z;
        let dx = q.x - x;
        let dy = q.y - y;
        let r2 = dx * dx + dy * dy;
        let rho = (r2 + depth * depth).sqrt();
        if rho < 1e-12 {
            return Err(Error::Geometry(format!(
                "query ({}, {}, {}) coincides with a point load",
                q.x, q.y, q.z
            )));
        }
        let g = self.material.shear_modulus_mpa;
        let nu = self.material.poisson;
        let c = force / (4.0 * PI * g);
        let rho3 = rho * rho * rho;
        // displacement into the solid (positive downwards)
        let w = c * (depth * depth / rho3 + 2.0 * (1.0 - nu) / rho);
        // radial factor u_r / r
        let ur_over_r = c * (depth / rho3 - (1.0 - 2.0 * nu) / (rho * (rho + depth)));
        Ok(Vec3::new(ur_over_r * dx, ur_over_r * dy, -w))
    }

    /// Displacements at `queries` for the superposition of `contacts`.
    pub fn field(&self, contacts: &[Contact], queries: &[Point3]) -> Result<Vec<Vec3>> {
        self.material.validate()?;
        for (i, q) in queries.iter().enumerate() {
            if !(q.z <= self.surface_z) {
                return Err(Error::invalid(format!(
                    "query {i} at z = {} lies above the surface z = {}",
                    q.z, self.surface_z
                )));
            }
        }
        let loads: Vec<(f64, f64, f64)> = contacts
            .iter()
            .flat_map(|c| self.quadrature.point_loads(c))
            .collect();
        queries
            .par_iter()
            .map(|q| {
                let mut acc = Vec3::zeros();
                for &(x, y, f) in &loads {
                    acc += self.point_load(x, y, f, q)?;
                }
                Ok(acc)
            })
            .collect()
    }
}

/// Convenience wrapper over [`HalfSpace::field`] for one contact.
pub fn halfspace_field(
    contact: &Contact,
    material: &ElasticMaterial,
    surface_z: f64,
    queries: &[Point3],
) -> Result<Vec<Vec3>> {
    HalfSpace {
        surface_z,
        material: *material,
        quadrature: LoadQuadrature::default(),
    }
    .field(std::slice::from_ref(contact), queries)
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldRow {
    x: f64,
    y: f64,
    z: f64,
    dx: f64,
    dy: f64,
    dz: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Reads `x,y,z,dx,dy,dz` rows (mm). If `<path>.json` exists it supplies the
/// declared bounding box.
pub fn load_field(path: &Path) -> Result<ScatteredField> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let bytes = fs::read(path)?;
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(parse_err(1, "empty field file".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let expected = ["x", "y", "z", "dx", "dy", "dz"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(
            1,
            format!("expected header {}", expected.join(",")),
        ));
    }
    let mut positions = Vec::new();
    let mut displacements = Vec::new();
    for (i, row) in reader.deserialize::<FieldRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        let vals = [row.x, row.y, row.z, row.dx, row.dy, row.dz];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(parse_err(line, "non-finite value".into()));
        }
        positions.push(Point3::new(row.x, row.y, row.z));
        displacements.push(Vec3::new(row.dx, row.dy, row.dz));
    }
    if positions.is_empty() {
        return Err(parse_err(2, "no nodes".into()));
    }
    let side = sidecar_path(path);
    if side.exists() {
        let bounds: FieldBounds = serde_json::from_slice(&fs::read(&side)?)?;
        ScatteredField::with_bounds(positions, displacements, bounds)
    } else {
        ScatteredField::new(positions, displacements)
    }
}

/// Writes the field as CSV plus its bounding box sidecar.
pub fn save_field(field: &ScatteredField, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "x,y,z,dx,dy,dz")?;
    for (p, d) in field.positions.iter().zip(&field.displacements) {
        // shortest round-trip representation
        writeln!(out, "{},{},{},{},{},{}", p.x, p.y, p.z, d.x, d.y, d.z)?;
    }
    out.flush()?;
    fs::write(
        sidecar_path(path),
        serde_json::to_vec_pretty(&field.bounds)?,
    )?;
    Ok(())
}
