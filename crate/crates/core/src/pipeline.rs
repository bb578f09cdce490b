//! Dataset orchestration: configuration, per-record sample generation,
//! elastic-deformation augmentation, dataset manifests and validation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    interpolate_to_grid, load_field, sample_lattice, Contact, ElasticMaterial, GridField,
    HalfSpace, IdwParams, Lattice, LoadQuadrature, ParticleLayerSpec, ScatteredField,
};
use crate::flow::{
    bin_forces, total_force, FeatureImage, FlowSynthesizer, ForceDistribution, NodalForces,
    SurfaceExtent,
};
use crate::geometry::{CameraSpec, PinholeCamera, Point3, RigidTransform, Vec3};
use crate::visibility::{estimate_visibility_grid, VisibilityGrid, VisibilityParams};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityConfig {
    pub n_configs: usize,
    pub bin_dims: [usize; 3],
    /// Precomputed grid file; estimated from `seed` when absent.
    pub grid_path: Option<PathBuf>,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        let p = VisibilityParams::default();
        Self {
            n_configs: p.n_configs,
            bin_dims: p.bin_dims,
            grid_path: None,
        }
    }
}

impl VisibilityConfig {
    pub fn params(&self) -> VisibilityParams {
        VisibilityParams {
            n_configs: self.n_configs,
            bin_dims: self.bin_dims,
        }
    }
}

/// Settings of the analytic half-space field source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticConfig {
    pub material: ElasticMaterial,
    pub indenter_radius_mm: f64,
    /// Spacing of the scattered pseudo-FEM nodes.
    pub node_spacing_mm: f64,
    /// Random node offset as a fraction of the node spacing.
    pub node_jitter: f64,
    pub quadrature: LoadQuadrature,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self {
            material: ElasticMaterial::default(),
            // 10 mm diameter spherical-ended indenter
            indenter_radius_mm: 5.0,
            node_spacing_mm: 1.0,
            node_jitter: 0.25,
            quadrature: LoadQuadrature::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum displacement of the deformation field, in regions.
    pub alpha: f64,
    /// Gaussian smoothing std of the deformation field, in regions.
    pub sigma: f64,
    /// Augmented copies written per sample (0: store clean data only).
    pub copies: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            sigma: 4.0,
            copies: 0,
        }
    }
}

/// Reference indentation used for extrinsic refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub radius_mm: f64,
    pub step_mm: f64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub depth_mm: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            radius_mm: 2.0,
            step_mm: 0.05,
            x_mm: 15.0,
            y_mm: 15.0,
            depth_mm: 1.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RemapConfig {
    /// Depth of the back-projection plane in the pinhole frame; defaults to
    /// the pinhole translation's z (bottom of the particle layer).
    pub z_plane_mm: Option<f64>,
    pub nearest: bool,
}

/// Every tunable of the pipeline. Serialized in full as the effective config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub layer: ParticleLayerSpec,
    pub camera: CameraSpec,
    pub grid_spacing_mm: f64,
    pub idw: IdwParams,
    pub visibility: VisibilityConfig,
    pub features_m: usize,
    pub labels_n: usize,
    pub surface: SurfaceExtent,
    pub analytic: AnalyticConfig,
    pub augmentation: AugmentConfig,
    pub refinement: RefineConfig,
    pub remap: RemapConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layer: ParticleLayerSpec::default(),
            camera: CameraSpec::default(),
            grid_spacing_mm: 0.5,
            idw: IdwParams::default(),
            visibility: VisibilityConfig::default(),
            features_m: 40,
            labels_n: 20,
            surface: SurfaceExtent::default(),
            analytic: AnalyticConfig::default(),
            augmentation: AugmentConfig::default(),
            refinement: RefineConfig::default(),
            remap: RemapConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        self.analytic.material.validate()?;
        self.camera.camera()?;
        self.camera.transform()?;
        if self.features_m == 0 || self.labels_n == 0 {
            return Err(Error::invalid("features_m and labels_n must be positive"));
        }
        if !(self.analytic.node_jitter >= 0.0 && self.analytic.node_jitter < 0.5) {
            return Err(Error::invalid("node_jitter must lie in [0, 0.5)"));
        }
        sample_lattice(&self.layer, self.grid_spacing_mm)?;
        Ok(())
    }
}

/// One simulated indentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndentationRecord {
    pub id: String,
    pub x_mm: f64,
    pub y_mm: f64,
    pub depth_mm: f64,
    /// FEM displacement field (CSV); the analytic source is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_path: Option<PathBuf>,
    /// FEM nodal forces (CSV); required together with `field_path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forces_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl IndentationRecord {
    pub fn analytic(id: impl Into<String>, x_mm: f64, y_mm: f64, depth_mm: f64) -> Self {
        Self {
            id: id.into(),
            x_mm,
            y_mm,
            depth_mm,
            field_path: None,
            forces_path: None,
            seed: None,
        }
    }

    fn validate(&self, surface: &SurfaceExtent) -> Result<()> {
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        {
            return Err(Error::invalid(format!(
                "record id {:?} is not file-name safe",
                self.id
            )));
        }
        if !(self.depth_mm >= 0.0) {
            return Err(Error::invalid("indentation depth must be non-negative"));
        }
        if !surface.contains(self.x_mm, self.y_mm) {
            return Err(Error::invalid("indenter position lies outside the surface"));
        }
        Ok(())
    }

    /// Seed used for this record: the explicit one, or one derived from the
    /// master seed and the record id.
    pub fn effective_seed(&self, master_seed: u64) -> u64 {
        self.seed
            .unwrap_or_else(|| derive_seed(master_seed, &self.id))
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Child seed: first word of the ChaCha8 stream `fnv1a(tag)` keyed by `master`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(fnv1a(tag.as_bytes()));
    rng.gen()
}

/// Reads records from a JSON array or a CSV file with the record's field
/// names as header (`id,x_mm,y_mm,depth_mm[,seed,field_path,forces_path]`).
pub fn load_records(path: &Path) -> Result<Vec<IndentationRecord>> {
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    if is_json {
        return Ok(serde_json::from_slice(&fs::read(path)?)?);
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<IndentationRecord>().enumerate() {
        out.push(row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Shared, immutable state for generating samples.
#[derive(Debug, Clone)]
pub struct SampleContext {
    pub config: PipelineConfig,
    pub camera: PinholeCamera,
    pub gel_to_pinhole: RigidTransform,
    pub lattice: Lattice,
    pub visibility: VisibilityGrid,
}

impl SampleContext {
    pub fn new(config: PipelineConfig, visibility: VisibilityGrid) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            camera: config.camera.camera()?,
            gel_to_pinhole: config.camera.transform()?,
            lattice: sample_lattice(&config.layer, config.grid_spacing_mm)?,
            visibility,
            config,
        })
    }

    /// Loads the configured visibility grid, or estimates it.
    pub fn visibility_for(config: &PipelineConfig) -> Result<VisibilityGrid> {
        match &config.visibility.grid_path {
            Some(p) => VisibilityGrid::load(p),
            None => estimate_visibility_grid(
                &config.layer,
                &config.camera.camera()?,
                &config.camera.transform()?,
                &config.visibility.params(),
                config.seed,
            ),
        }
    }

    pub fn from_config(config: PipelineConfig) -> Result<Self> {
        let vis = Self::visibility_for(&config)?;
        Self::new(config, vis)
    }

    fn half_space(&self) -> HalfSpace {
        HalfSpace {
            surface_z: self.config.layer.surface_z(),
            material: self.config.analytic.material,
            quadrature: self.config.analytic.quadrature,
        }
    }

    /// Hertz contact of the configured indenter for a record.
    pub fn contact_for(&self, rec: &IndentationRecord) -> Contact {
        Contact::hertz(
            [rec.x_mm, rec.y_mm],
            rec.depth_mm,
            self.config.analytic.indenter_radius_mm,
            &self.config.analytic.material,
        )
    }

    /// Jittered lattice of pseudo-FEM nodes strictly inside the layer.
    pub fn analytic_nodes(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Point3>> {
        let a = &self.config.analytic;
        let lattice = sample_lattice(&self.config.layer, a.node_spacing_mm)?;
        let amp = a.node_jitter * a.node_spacing_mm;
        Ok(lattice
            .points()
            .into_iter()
            .map(|p| {
                let j: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * amp);
                Point3::new(p.x + j[0], p.y + j[1], p.z + j[2])
            })
            .collect())
    }

    /// Scattered field and nodal forces of a record.
    pub fn record_sources(&self, rec: &IndentationRecord) -> Result<(ScatteredField, NodalForces)> {
        rec.validate(&self.config.surface)?;
        if let Some(field_path) = &rec.field_path {
            let forces_path = rec.forces_path.as_ref().ok_or_else(|| {
                Error::invalid("records with a field file need a nodal forces file")
            })?;
            return Ok((load_field(field_path)?, NodalForces::load(forces_path)?));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rec.effective_seed(self.config.seed));
        let nodes = self.analytic_nodes(&mut rng)?;
        let contact = self.contact_for(rec);
        let half_space = self.half_space();
        let loads = half_space.quadrature.point_loads(&contact);
        let surface_z = half_space.surface_z;
        if loads
            .iter()
            .any(|l| !self.config.surface.contains(l.0, l.1))
        {
            return Err(Error::invalid(
                "contact area extends beyond the sensing surface",
            ));
        }
        let displacements = half_space.field(&[contact], &nodes)?;
        let forces = NodalForces {
            nodes: loads
                .into_iter()
                .map(|(x, y, f)| (Point3::new(x, y, surface_z), Vec3::new(0.0, 0.0, -f)))
                .collect(),
        };
        Ok((ScatteredField::new(nodes, displacements)?, forces))
    }

    /// Displacements interpolated onto the sampling lattice.
    pub fn grid_field(&self, field: &ScatteredField) -> Result<GridField> {
        interpolate_to_grid(field, self.lattice, self.config.idw)
    }

    pub fn features(&self, grid: &GridField) -> Result<FeatureImage> {
        FlowSynthesizer::new(grid, self.gel_to_pinhole.rotation(), &self.visibility).features(
            &self.camera,
            self.gel_to_pinhole.translation(),
            self.config.features_m,
        )
    }

    pub fn labels(&self, forces: &NodalForces) -> Result<ForceDistribution> {
        bin_forces(forces, self.config.labels_n, &self.config.surface)
    }
}

/// Features and labels of one indentation.
pub fn generate_sample(
    rec: &IndentationRecord,
    ctx: &SampleContext,
) -> Result<(FeatureImage, ForceDistribution)> {
    let run = || -> Result<(FeatureImage, ForceDistribution)> {
        let (field, forces) = ctx.record_sources(rec)?;
        let grid = ctx.grid_field(&field)?;
        Ok((ctx.features(&grid)?, ctx.labels(&forces)?))
    };
    run().map_err(|e| Error::Record {
        id: rec.id.clone(),
        source: Box::new(e),
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
fn blur(field: &[f64], m: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let clamp = |i: i64| i.clamp(0, m as i64 - 1) as usize;
    let mut tmp = vec![0.0; m * m];
    for row in 0..m {
        for col in 0..m {
            tmp[row * m + col] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * field[row * m + clamp(col as i64 + k as i64 - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for row in 0..m {
        for col in 0..m {
            out[row * m + col] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(row as i64 + k as i64 - r) * m + col])
                .sum();
        }
    }
    out
}

fn bilinear_clamped(ch: &[f64], m: usize, row: f64, col: f64) -> f64 {
    let maxc = (m - 1) as f64;
    let r = row.clamp(0.0, maxc);
    let c = col.clamp(0.0, maxc);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(m - 1);
    let c1 = (c0 + 1).min(m - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let top = ch[r0 * m + c0] * (1.0 - fc) + ch[r0 * m + c1] * fc;
    let bottom = ch[r1 * m + c0] * (1.0 - fc) + ch[r1 * m + c1] * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Random smooth warp of a feature image: a per-region displacement field is
/// drawn uniformly in [-1, 1], Gaussian-smoothed with std `sigma`, scaled so
/// its largest magnitude is `alpha`, and applied to both channels by bilinear
/// resampling with clamped borders.
pub fn elastic_deform(
    img: &FeatureImage,
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> Result<FeatureImage> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha must be non-negative"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("sigma must be positive"));
    }
    if alpha == 0.0 {
        return Ok(img.clone());
    }
    let m = img.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_r: Vec<f64> = (0..m * m).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let raw_c: Vec<f64> = (0..m * m).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let kernel = gaussian_kernel(sigma);
    let dr = blur(&raw_r, m, &kernel);
    let dc = blur(&raw_c, m, &kernel);
    let peak = dr
        .iter()
        .zip(&dc)
        .map(|(a, b)| a.hypot(*b))
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { alpha / peak } else { 0.0 };
    let mut data = vec![0.0; 2 * m * m];
    for c in 0..2 {
        let ch = img.channel(c);
        for row in 0..m {
            for col in 0..m {
                let i = row * m + col;
                data[c * m * m + i] = bilinear_clamped(
                    ch,
                    m,
                    row as f64 + scale * dr[i],
                    col as f64 + scale * dc[i],
                );
            }
        }
    }
    FeatureImage::from_data(m, data)
}

/// Manifest entry of one generated sample. Paths are relative to the dataset
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub features: String,
    pub labels: String,
    #[serde(default)]
    pub augmented: Vec<String>,
    pub total_force_n: [f64; 3],
    pub record: IndentationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: String,
    pub visibility: String,
    pub m: usize,
    pub n: usize,
    pub samples: Vec<SampleEntry>,
    pub failures: Vec<FailureEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "effective_config.json";
pub const VISIBILITY_FILE: &str = "visibility.grid";

/// Generates every record into `out_dir` with `jobs` worker threads.
///
/// Per-record math errors are recorded in the manifest's `failures`; I/O
/// errors abort. Output bytes do not depend on `jobs`.
pub fn generate_dataset(
    records: &[IndentationRecord],
    config: &PipelineConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<DatasetManifest> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::invalid(format!("duplicate record id {:?}", r.id)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| generate_dataset_inner(records, config, out_dir))
}

fn generate_dataset_inner(
    records: &[IndentationRecord],
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), config.to_json()?)?;

    let vis = SampleContext::visibility_for(config)?;
    vis.save(&out_dir.join(VISIBILITY_FILE))?;
    let ctx = SampleContext::new(config.clone(), vis)?;

    let outcomes: Vec<Result<std::result::Result<SampleEntry, FailureEntry>>> = records
        .par_iter()
        .map(|rec| {
            let (features, labels) = match generate_sample(rec, &ctx) {
                Ok(s) => s,
                Err(e) if e.is_math() => {
                    log::warn!("skipping {e}");
                    return Ok(Err(FailureEntry {
                        id: rec.id.clone(),
                        error: e.to_string(),
                    }));
                }
                Err(e) => return Err(e),
            };
            let feat_rel = format!("samples/{}.features.f32", rec.id);
            let label_rel = format!("samples/{}.labels.f32", rec.id);
            features.save(&out_dir.join(&feat_rel))?;
            labels.save(&out_dir.join(&label_rel))?;
            let aug = &config.augmentation;
            let record_seed = rec.effective_seed(config.seed);
            let mut augmented = Vec::with_capacity(aug.copies);
            for k in 0..aug.copies {
                let seed = derive_seed(record_seed, &format!("augment-{k}"));
                let warped = elastic_deform(&features, aug.alpha, aug.sigma, seed)?;
                let rel = format!("samples/{}.aug{k}.features.f32", rec.id);
                warped.save(&out_dir.join(&rel))?;
                augmented.push(rel);
            }
            let t = total_force(&labels);
            log::debug!("generated {}", rec.id);
            Ok(Ok(SampleEntry {
                id: rec.id.clone(),
                features: feat_rel,
                labels: label_rel,
                augmented,
                total_force_n: [t.x, t.y, t.z],
                record: rec.clone(),
            }))
        })
        .collect();

    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o? {
            Ok(s) => samples.push(s),
            Err(f) => failures.push(f),
        }
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: CONFIG_FILE.into(),
        visibility: VISIBILITY_FILE.into(),
        m: config.features_m,
        n: config.labels_n,
        samples,
        failures,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleCheck {
    pub id: String,
    pub ok: bool,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: Vec<SampleCheck>,
}

impl ValidationReport {
    pub fn all_ok(&self) -> bool {
        self.samples.iter().all(|s| s.ok)
    }

    pub fn failed(&self) -> impl Iterator<Item = &SampleCheck> {
        self.samples.iter().filter(|s| !s.ok)
    }
}

fn check_features(path: &Path, m: usize, problems: &mut Vec<String>) {
    match FeatureImage::load(path) {
        Ok(f) if f.m() != m => {
            problems.push(format!("{}: m = {}, expected {m}", path.display(), f.m()))
        }
        Ok(f) if !f.is_finite() => {
            problems.push(format!("{}: non-finite feature value", path.display()))
        }
        Ok(_) => {}
        Err(e) => problems.push(format!("{}: {e}", path.display())),
    }
}

/// Checks every sample of a dataset: files present, shapes, finiteness, and
/// that the label total matches the force total recorded at generation.
pub fn validate_manifest(path: &Path) -> Result<ValidationReport> {
    let manifest = DatasetManifest::load(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .samples
        .iter()
        .map(|s| {
            let mut problems = Vec::new();
            check_features(&root.join(&s.features), manifest.m, &mut problems);
            for a in &s.augmented {
                check_features(&root.join(a), manifest.m, &mut problems);
            }
            match ForceDistribution::load(&root.join(&s.labels)) {
                Ok(l) if l.n() != manifest.n => {
                    problems.push(format!("labels: n = {}, expected {}", l.n(), manifest.n))
                }
                Ok(l) if !l.is_finite() => problems.push("labels: non-finite value".into()),
                Ok(l) => {
                    let t = total_force(&l);
                    let scale: f64 = l.data().iter().map(|v| v.abs()).sum();
                    // labels are stored as f32
                    let tol = 1e-6 * scale + 1e-12;
                    for c in 0..3 {
                        if (t[c] - s.total_force_n[c]).abs() > tol {
                            problems.push(format!(
                                "labels: channel {c} sums to {}, manifest records {}",
                                t[c], s.total_force_n[c]
                            ));
                        }
                    }
                }
                Err(e) => problems.push(format!("labels: {e}")),
            }
            SampleCheck {
                id: s.id.clone(),
                ok: problems.is_empty(),
                problems,
            }
        })
        .collect();
    Ok(ValidationReport { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            grid_spacing_mm: 1.5,
            visibility: VisibilityConfig {
                n_configs: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_defaults_are_explicit() {
        let json: serde_json::Value =
            serde_json::from_str(&PipelineConfig::default().to_json().unwrap()).unwrap();
        assert_eq!(json["features_m"], 40);
        assert_eq!(json["labels_n"], 20);
        assert_eq!(json["idw"]["power"], 2.0);
        assert_eq!(json["idw"]["k_neighbors"], 8);
        assert_eq!(json["visibility"]["n_configs"], 100);
        assert_eq!(
            json["visibility"]["bin_dims"],
            serde_json::json!([15, 15, 9])
        );
        assert_eq!(json["augmentation"]["alpha"], 2.0);
        assert_eq!(json["augmentation"]["sigma"], 4.0);
        assert_eq!(json["refinement"]["radius_mm"], 2.0);
        assert_eq!(json["refinement"]["step_mm"], 0.05);
        assert_eq!(json["grid_spacing_mm"], 0.5);
        // partial configs fill in defaults
        let partial: PipelineConfig =
            serde_json::from_str(r#"{"features_m": 10, "idw": {"power": 3}}"#).unwrap();
        assert_eq!(partial.features_m, 10);
        assert_eq!(partial.idw.power, 3.0);
        assert_eq!(partial.idw.k_neighbors, 8);
    }

    #[test]
    fn seed_derivation_is_stable() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        let mut r = IndentationRecord::analytic("x", 1.0, 1.0, 0.0);
        assert_eq!(r.effective_seed(5), derive_seed(5, "x"));
        r.seed = Some(9);
        assert_eq!(r.effective_seed(5), 9);
    }

    #[test]
    fn zero_depth_gives_zero_sample() {
        let cfg = small_config();
        let vis = VisibilityGrid::uniform(&cfg.layer, cfg.visibility.bin_dims, 1.0).unwrap();
        let ctx = SampleContext::new(cfg, vis).unwrap();
        let (f, l) =
            generate_sample(&IndentationRecord::analytic("z", 15.0, 15.0, 0.0), &ctx).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
        assert!(l.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn record_errors_carry_the_id() {
        let cfg = small_config();
        let vis = VisibilityGrid::uniform(&cfg.layer, cfg.visibility.bin_dims, 1.0).unwrap();
        let ctx = SampleContext::new(cfg, vis).unwrap();
        let err = generate_sample(&IndentationRecord::analytic("edge", 0.5, 15.0, 1.0), &ctx)
            .unwrap_err();
        assert!(err.to_string().starts_with("record edge:"), "{err}");
        assert!(err.is_math());
        assert!(
            generate_sample(&IndentationRecord::analytic("neg", 5.0, 5.0, -1.0), &ctx).is_err()
        );
        assert!(
            generate_sample(&IndentationRecord::analytic("bad/id", 5.0, 5.0, 1.0), &ctx).is_err()
        );
    }

    #[test]
    fn elastic_deform_basics() {
        let img = FeatureImage::from_data(8, (0..128).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        assert_eq!(elastic_deform(&img, 0.0, 4.0, 3).unwrap(), img);
        let warped = elastic_deform(&img, 2.0, 1.5, 3).unwrap();
        assert_ne!(warped, img);
        assert_eq!(warped, elastic_deform(&img, 2.0, 1.5, 3).unwrap());
        let (lo, hi) = img
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(warped
            .data()
            .iter()
            .all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));

        let flat = FeatureImage::from_data(8, vec![0.75; 128]).unwrap();
        let out = elastic_deform(&flat, 3.0, 2.0, 11).unwrap();
        assert!(out.data().iter().all(|v| (*v - 0.75).abs() < 1e-15));
        assert!(elastic_deform(&img, 1.0, 0.0, 1).is_err());
    }

    #[test]
    fn records_from_csv_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("r.csv");
        fs::write(
            &csv_path,
            "id,x_mm,y_mm,depth_mm,seed\na,15,15,1.0,\nb,10,12,0.5,42\n",
        )
        .unwrap();
        let recs = load_records(&csv_path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].seed, None);
        assert_eq!(recs[1].seed, Some(42));
        let json_path = dir.path().join("r.json");
        fs::write(&json_path, serde_json::to_vec(&recs).unwrap()).unwrap();
        assert_eq!(load_records(&json_path).unwrap(), recs);
    }
}
