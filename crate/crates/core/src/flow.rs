//! Synthetic optical-flow feature images and binned force labels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::GridField;
use crate::geometry::{PinholeCamera, Pixel, PixelDisplacement, Point3, RigidTransform, Vec3};
use crate::visibility::VisibilityGrid;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Two-channel `m × m` image of mean pixel displacements (Δu, Δv).
/// Layout: channel-first, then region row (from v), then region column (from u).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    m: usize,
    data: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(m: usize) -> Self {
        Self {
            m,
            data: vec![0.0; 2 * m * m],
        }
    }

    pub fn from_data(m: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || data.len() != 2 * m * m {
            return Err(Error::Shape {
                expected: format!("2x{m}x{m}"),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Self { m, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `(Δu, Δv)` of region `(row, col)`.
    pub fn get(&self, row: usize, col: usize) -> (f64, f64) {
        let i = row * self.m + col;
        (self.data[i], self.data[self.m * self.m + i])
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let mm = self.m * self.m;
        &self.data[c * mm..(c + 1) * mm]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            m: self.m,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor(
            path,
            &self.data,
            &TensorMeta {
                m: Some(self.m),
                n: None,
                channels: vec!["du".into(), "dv".into()],
                units: "px".into(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, data) = read_tensor(path)?;
        let m = meta.m.ok_or_else(|| Error::Shape {
            expected: "feature sidecar with \"m\"".into(),
            found: "none".into(),
        })?;
        Self::from_data(m, data)
    }
}

/// Three-channel `n × n` grid of per-bin contact force (N).
/// Layout: channel (Fx, Fy, Fz), then bin row (from y), then bin column (from x).
#[derive(Debug, Clone, PartialEq)]
pub struct ForceDistribution {
    n: usize,
    data: Vec<f64>,
}

impl ForceDistribution {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; 3 * n * n],
        }
    }

    pub fn from_data(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != 3 * n * n {
            return Err(Error::Shape {
                expected: format!("3x{n}x{n}"),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[channel * self.n * self.n + row * self.n + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor(
            path,
            &self.data,
            &TensorMeta {
                m: None,
                n: Some(self.n),
                channels: vec!["fx".into(), "fy".into(), "fz".into()],
                units: "N".into(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, data) = read_tensor(path)?;
        let n = meta.n.ok_or_else(|| Error::Shape {
            expected: "label sidecar with \"n\"".into(),
            found: "none".into(),
        })?;
        Self::from_data(n, data)
    }
}

/// JSON sidecar written next to every raw tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n: Option<usize>,
    pub channels: Vec<String>,
    pub units: String,
}

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_tensor(path: &Path, data: &[f64], meta: &TensorMeta) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * data.len());
    for v in data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

/// Reads a raw little-endian f32 tensor and its sidecar. Byte counts that are
/// not a multiple of four are reported as shape errors.
pub fn read_tensor(path: &Path) -> Result<(TensorMeta, Vec<f64>)> {
    let meta: TensorMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let raw = fs::read(path)?;
    if raw.len() % 4 != 0 {
        return Err(Error::Shape {
            expected: "whole f32 values".into(),
            found: format!("{} bytes", raw.len()),
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((meta, data))
}

/// One projected displacement: undeformed pixel, pixel motion, weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSample {
    pub pixel: Pixel,
    pub displacement: PixelDisplacement,
    pub weight: f64,
}

/// Weighted accumulation of pixel displacements into `m × m` regions.
#[derive(Debug, Clone)]
pub struct RegionAccumulator {
    m: usize,
    width: f64,
    height: f64,
    du: Vec<CompensatedSum>,
    dv: Vec<CompensatedSum>,
    w: Vec<CompensatedSum>,
}

/// Regions whose total weight is below this emit zero motion.
pub const EMPTY_REGION_WEIGHT: f64 = 1e-12;

impl RegionAccumulator {
    pub fn new(m: usize, image_size: (u32, u32)) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("feature side m must be at least 1"));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        let mm = m * m;
        Ok(Self {
            m,
            width: image_size.0 as f64,
            height: image_size.1 as f64,
            du: vec![CompensatedSum::default(); mm],
            dv: vec![CompensatedSum::default(); mm],
            w: vec![CompensatedSum::default(); mm],
        })
    }

    fn reset(&mut self) {
        for s in self.du.iter_mut().chain(&mut self.dv).chain(&mut self.w) {
            *s = CompensatedSum::default();
        }
    }

    /// Region of a pixel using half-open intervals; the far border belongs to
    /// the last region. Pixels outside the image have no region.
    #[inline]
    pub fn region_of(&self, p: &Pixel) -> Option<usize> {
        let m = self.m as f64;
        let cu = p.x * m / self.width;
        let cv = p.y * m / self.height;
        if !(cu >= 0.0 && cu <= m && cv >= 0.0 && cv <= m) {
            return None;
        }
        let col = (cu as usize).min(self.m - 1);
        let row = (cv as usize).min(self.m - 1);
        Some(row * self.m + col)
    }

    #[inline]
    pub fn add(&mut self, p: &Pixel, dp: &PixelDisplacement, weight: f64) {
        if let Some(r) = self.region_of(p) {
            self.du[r].add(weight * dp.x);
            self.dv[r].add(weight * dp.y);
            self.w[r].add(weight);
        }
    }

    pub fn finish(&self) -> FeatureImage {
        let mm = self.m * self.m;
        let mut data = vec![0.0; 2 * mm];
        for r in 0..mm {
            let w = self.w[r].value();
            if w >= EMPTY_REGION_WEIGHT {
                data[r] = self.du[r].value() / w;
                data[mm + r] = self.dv[r].value() / w;
            }
        }
        FeatureImage { m: self.m, data }
    }
}

/// Weighted mean displacement per image region.
pub fn bin_displacements(
    samples: &[FlowSample],
    m: usize,
    image_size: (u32, u32),
) -> Result<FeatureImage> {
    let mut acc = RegionAccumulator::new(m, image_size)?;
    for s in samples {
        if !(s.weight >= 0.0) {
            return Err(Error::invalid(format!(
                "negative sample weight {}",
                s.weight
            )));
        }
        acc.add(&s.pixel, &s.displacement, s.weight);
    }
    Ok(acc.finish())
}

/// Projected samples of a gridded field: transform to the pinhole frame,
/// project undeformed and deformed locations, weight by visibility.
pub fn flow_samples(
    field: &GridField,
    cam: &PinholeCamera,
    gel_to_pinhole: &RigidTransform,
    vis: &VisibilityGrid,
) -> Result<Vec<FlowSample>> {
    field
        .iter()
        .map(|(s, ds)| {
            let sp = gel_to_pinhole.transform_point(&s);
            let dsp = gel_to_pinhole.transform_vector(&ds);
            Ok(FlowSample {
                pixel: cam.project(&sp)?,
                displacement: cam.project_pair(&sp, &dsp)?,
                weight: vis.weight(&s, &ds),
            })
        })
        .collect()
}

/// Synthetic optical-flow features of one gridded displacement field.
pub fn synth_optical_flow(
    field: &GridField,
    cam: &PinholeCamera,
    gel_to_pinhole: &RigidTransform,
    vis: &VisibilityGrid,
    m: usize,
) -> Result<FeatureImage> {
    FlowSynthesizer::new(field, gel_to_pinhole.rotation(), vis).features(
        cam,
        gel_to_pinhole.translation(),
        m,
    )
}

/// Precomputes the translation-independent part of [`synth_optical_flow`]
/// so that features can be re-rendered cheaply for many camera translations.
#[derive(Debug, Clone)]
pub struct FlowSynthesizer {
    rotated: Vec<(Vec3, Vec3, f64)>,
}

impl FlowSynthesizer {
    pub fn new(field: &GridField, rotation: &Matrix3<f64>, vis: &VisibilityGrid) -> Self {
        let rotated = field
            .iter()
            .map(|(s, ds)| (rotation * s.coords, rotation * ds, vis.weight(&s, &ds)))
            .collect();
        Self { rotated }
    }

    pub fn len(&self) -> usize {
        self.rotated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotated.is_empty()
    }

    /// Features for a camera with the given gel→pinhole translation.
    pub fn features(
        &self,
        cam: &PinholeCamera,
        translation: &Vec3,
        m: usize,
    ) -> Result<FeatureImage> {
        let mut acc = RegionAccumulator::new(m, cam.image_size())?;
        self.accumulate(cam, translation, &mut acc)?;
        Ok(acc.finish())
    }

    /// Same as [`features`](Self::features), reusing an accumulator.
    pub fn features_into(
        &self,
        cam: &PinholeCamera,
        translation: &Vec3,
        acc: &mut RegionAccumulator,
    ) -> Result<FeatureImage> {
        acc.reset();
        self.accumulate(cam, translation, acc)?;
        Ok(acc.finish())
    }

    fn accumulate(&self, cam: &PinholeCamera, t: &Vec3, acc: &mut RegionAccumulator) -> Result<()> {
        for (rs, rds, w) in &self.rotated {
            let sp = Point3::from(rs + t);
            let p = cam.project(&sp)?;
            let dp = cam.project_pair(&sp, rds)?;
            acc.add(&p, &dp, *w);
        }
        Ok(())
    }
}

/// Surface forces at FEM nodes (gel frame, N).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodalForces {
    pub nodes: Vec<(Point3, Vec3)>,
}

impl NodalForces {
    pub fn total(&self) -> Vec3 {
        let mut acc = [CompensatedSum::default(); 3];
        for (_, f) in &self.nodes {
            for c in 0..3 {
                acc[c].add(f[c]);
            }
        }
        Vec3::new(acc[0].value(), acc[1].value(), acc[2].value())
    }

    /// Reads `x,y,z,fx,fy,fz` CSV rows.
    pub fn load(path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| parse_err(1, e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        let expected = ["x", "y", "z", "fx", "fy", "fz"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(parse_err(
                1,
                format!("expected header {}", expected.join(",")),
            ));
        }
        let mut nodes = Vec::new();
        for (i, row) in reader.deserialize::<[f64; 6]>().enumerate() {
            let row = row.map_err(|e| parse_err(i + 2, e.to_string()))?;
            if !row.iter().all(|v| v.is_finite()) {
                return Err(parse_err(i + 2, "non-finite value".into()));
            }
            nodes.push((
                Point3::new(row[0], row[1], row[2]),
                Vec3::new(row[3], row[4], row[5]),
            ));
        }
        Ok(Self { nodes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "x,y,z,fx,fy,fz")?;
        for (p, f) in &self.nodes {
            writeln!(out, "{},{},{},{},{},{}", p.x, p.y, p.z, f.x, f.y, f.z)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Horizontal extent of the sensing surface (gel frame, mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceExtent {
    pub origin_mm: [f64; 2],
    pub size_mm: [f64; 2],
}

impl Default for SurfaceExtent {
    fn default() -> Self {
        Self {
            origin_mm: [0.0, 0.0],
            size_mm: [30.0, 30.0],
        }
    }
}

impl SurfaceExtent {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.origin_mm[0]
            && x <= self.origin_mm[0] + self.size_mm[0]
            && y >= self.origin_mm[1]
            && y <= self.origin_mm[1] + self.size_mm[1]
    }
}

/// Sums nodal forces into an `n × n` grid over the surface.
pub fn bin_forces(
    nf: &NodalForces,
    n: usize,
    surface: &SurfaceExtent,
) -> Result<ForceDistribution> {
    if n == 0 {
        return Err(Error::invalid("label side n must be at least 1"));
    }
    if !(surface.size_mm[0] > 0.0 && surface.size_mm[1] > 0.0) {
        return Err(Error::invalid("surface extent must be positive"));
    }
    let nn = n * n;
    let mut acc = vec![CompensatedSum::default(); 3 * nn];
    let nf64 = n as f64;
    for (index, (p, f)) in nf.nodes.iter().enumerate() {
        if !surface.contains(p.x, p.y) {
            return Err(Error::OutOfExtent { index });
        }
        // q * n keeps the n and 2n bin assignments nested exactly
        let qx = (p.x - surface.origin_mm[0]) / surface.size_mm[0];
        let qy = (p.y - surface.origin_mm[1]) / surface.size_mm[1];
        let col = ((qx * nf64) as usize).min(n - 1);
        let row = ((qy * nf64) as usize).min(n - 1);
        let b = row * n + col;
        for c in 0..3 {
            acc[c * nn + b].add(f[c]);
        }
    }
    Ok(ForceDistribution {
        n,
        data: acc.iter().map(|s| s.value()).collect(),
    })
}

/// Per-channel sum of a force distribution.
pub fn total_force(dist: &ForceDistribution) -> Vec3 {
    let nn = dist.n * dist.n;
    let mut out = Vec3::zeros();
    for c in 0..3 {
        let mut s = CompensatedSum::default();
        for v in &dist.data[c * nn..(c + 1) * nn] {
            s.add(*v);
        }
        out[c] = s.value();
    }
    out
}
