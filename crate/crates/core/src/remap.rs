//! Real-image adjustment: fisheye camera model, remap tables into the
//! reference pinhole view, image remapping and extrinsic translation search.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FeatureImage;
use crate::geometry::{PinholeCamera, Pixel, Point3, RigidTransform, Vec3};

/// Radial profile: image distance from the centre as a function of the
/// incidence angle θ between a ray and the optical axis.
#[derive(Debug, Clone, PartialEq)]
pub enum RadialProfile {
    /// `ρ(θ) = Σ_k b_k θ^k`, `k = 1..`.
    Polynomial(Vec<f64>),
    /// `ρ(θ) = |f| tan θ`, an ideal pinhole.
    Perspective { focal_px: f64 },
}

impl RadialProfile {
    #[inline]
    pub fn radius(&self, theta: f64) -> f64 {
        match self {
            RadialProfile::Polynomial(b) => {
                // Horner on θ(b1 + θ(b2 + ...))
                let mut acc = 0.0;
                for c in b.iter().rev() {
                    acc = acc * theta + c;
                }
                acc * theta
            }
            RadialProfile::Perspective { focal_px } => focal_px.abs() * theta.tan(),
        }
    }

    fn derivative(&self, theta: f64) -> f64 {
        match self {
            RadialProfile::Polynomial(b) => b
                .iter()
                .enumerate()
                .map(|(i, c)| (i + 1) as f64 * c * theta.powi(i as i32))
                .sum(),
            RadialProfile::Perspective { focal_px } => {
                let c = theta.cos();
                focal_px.abs() / (c * c)
            }
        }
    }

    /// Largest angle up to which ρ keeps increasing (searched on `[0, limit]`).
    fn monotone_limit(&self, limit: f64) -> f64 {
        const STEPS: usize = 4096;
        let mut last = 0.0;
        for i in 1..=STEPS {
            let th = limit * i as f64 / STEPS as f64;
            if !(self.derivative(th) > 0.0) {
                return last;
            }
            last = th;
        }
        limit
    }
}

/// Fisheye intrinsics. Camera frame follows the pinhole convention: the
/// optical axis points towards `-z`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisheyeModel {
    radial: RadialProfile,
    affine: Matrix2<f64>,
    center: Pixel,
    image_size: (u32, u32),
    theta_max: f64,
}

impl FisheyeModel {
    /// `theta_max = None` uses the widest angle on which ρ is increasing
    /// (capped just below π, or π/2 for the perspective profile).
    pub fn new(
        radial: RadialProfile,
        affine: Matrix2<f64>,
        center: Pixel,
        image_size: (u32, u32),
        theta_max: Option<f64>,
    ) -> Result<Self> {
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::invalid("fisheye image size must be positive"));
        }
        if affine.determinant().abs() < 1e-12 || !affine.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("fisheye affine matrix must be invertible"));
        }
        let cap = match &radial {
            RadialProfile::Polynomial(b) => {
                if b.is_empty() || b.len() > 4 || !b.iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid(
                        "fisheye polynomial needs 1 to 4 finite coefficients",
                    ));
                }
                std::f64::consts::PI * 0.999
            }
            RadialProfile::Perspective { focal_px } => {
                if *focal_px == 0.0 || !focal_px.is_finite() {
                    return Err(Error::invalid("perspective focal length must be non-zero"));
                }
                std::f64::consts::FRAC_PI_2 * 0.999
            }
        };
        let monotone = radial.monotone_limit(cap);
        let theta_max = match theta_max {
            Some(t) if t > 0.0 && t <= monotone => t,
            Some(t) => {
                return Err(Error::invalid(format!(
                    "theta_max {t} rad exceeds the monotone range {monotone} rad"
                )))
            }
            None => monotone,
        };
        if theta_max <= 0.0 {
            return Err(Error::invalid("radial profile is not increasing at θ = 0"));
        }
        Ok(Self {
            radial,
            affine,
            center,
            image_size,
            theta_max,
        })
    }

    /// Fisheye that reproduces a pinhole camera exactly.
    pub fn from_pinhole(cam: &PinholeCamera) -> Result<Self> {
        Self::new(
            RadialProfile::Perspective {
                focal_px: cam.focal(),
            },
            Matrix2::identity(),
            cam.center(),
            cam.image_size(),
            None,
        )
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    /// Projects a point given in the camera frame to a pixel.
    #[inline]
    pub fn world2cam(&self, s: &Point3) -> Result<Pixel> {
        let radial = s.x.hypot(s.y);
        let theta = radial.atan2(-s.z);
        if !(theta <= self.theta_max) || (radial == 0.0 && s.z >= 0.0) {
            return Err(Error::Geometry(format!(
                "point ({}, {}, {}) lies outside the field of view",
                s.x, s.y, s.z
            )));
        }
        if radial == 0.0 {
            return Ok(self.center);
        }
        let rho = self.radial.radius(theta);
        let d = nalgebra::Vector2::new(s.x / radial, s.y / radial) * rho;
        Ok(self.center + self.affine * d)
    }
}

/// JSON calibration of a fisheye camera with gel→camera extrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisheyeCalibration {
    #[serde(default)]
    pub poly: Vec<f64>,
    pub affine: [f64; 4],
    pub center_px: [f64; 2],
    pub image_size_px: [u32; 2],
    pub rotation: [f64; 9],
    pub translation_mm: [f64; 3],
    /// Optional field-of-view limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_max_rad: Option<f64>,
    /// Replaces `poly` with an exact pinhole profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perspective_focal_px: Option<f64>,
}

impl FisheyeCalibration {
    pub fn model(&self) -> Result<FisheyeModel> {
        let radial = match self.perspective_focal_px {
            Some(f) => RadialProfile::Perspective { focal_px: f },
            None => RadialProfile::Polynomial(self.poly.clone()),
        };
        let a = self.affine;
        FisheyeModel::new(
            radial,
            Matrix2::new(a[0], a[1], a[2], a[3]),
            Pixel::new(self.center_px[0], self.center_px[1]),
            (self.image_size_px[0], self.image_size_px[1]),
            self.theta_max_rad,
        )
    }

    pub fn transform(&self) -> Result<RigidTransform> {
        RigidTransform::from_row_major(&self.rotation, self.translation_mm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// For every destination (pinhole) pixel, the source (fisheye) coordinates,
/// or NaN when the pixel has no source.
#[derive(Debug, Clone, PartialEq)]
pub struct RemapTable {
    dst_size: (u32, u32),
    src_size: (u32, u32),
    coords: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableHeader {
    dst_size: [u32; 2],
    src_size: [u32; 2],
    sentinel: String,
}

impl RemapTable {
    pub fn new(dst_size: (u32, u32), src_size: (u32, u32), coords: Vec<[f64; 2]>) -> Result<Self> {
        let n = dst_size.0 as usize * dst_size.1 as usize;
        if coords.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} table entries"),
                found: coords.len().to_string(),
            });
        }
        let (w, h) = (src_size.0 as f64 - 1.0, src_size.1 as f64 - 1.0);
        for c in &coords {
            let mapped = !c[0].is_nan();
            if mapped && !(c[0] >= 0.0 && c[0] <= w && c[1] >= 0.0 && c[1] <= h) {
                return Err(Error::invalid("remap entry outside the source image"));
            }
        }
        Ok(Self {
            dst_size,
            src_size,
            coords,
        })
    }

    /// Identity map on a `w × h` image.
    pub fn identity(w: u32, h: u32) -> Self {
        let coords = (0..h)
            .flat_map(|y| (0..w).map(move |x| [x as f64, y as f64]))
            .collect();
        Self {
            dst_size: (w, h),
            src_size: (w, h),
            coords,
        }
    }

    pub fn dst_size(&self) -> (u32, u32) {
        self.dst_size
    }

    pub fn src_size(&self) -> (u32, u32) {
        self.src_size
    }

    /// Source coordinates of destination pixel `(x, y)`.
    pub fn get(&self, x: u32, y: u32) -> Option<Pixel> {
        let c = self.coords[(y * self.dst_size.0 + x) as usize];
        (!c[0].is_nan()).then(|| Pixel::new(c[0], c[1]))
    }

    pub fn mapped_count(&self) -> usize {
        self.coords.iter().filter(|c| !c[0].is_nan()).count()
    }

    /// JSON header line followed by little-endian f64 `(x, y)` pairs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = TableHeader {
            dst_size: [self.dst_size.0, self.dst_size.1],
            src_size: [self.src_size.0, self.src_size.1],
            sentinel: "NaN".into(),
        };
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for c in &self.coords {
            out.write_all(&c[0].to_le_bytes())?;
            out.write_all(&c[1].to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: TableHeader = serde_json::from_str(line.trim_end())?;
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw)?;
        let coords = raw
            .chunks_exact(16)
            .map(|c| {
                [
                    f64::from_le_bytes(c[0..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..16].try_into().unwrap()),
                ]
            })
            .collect();
        if raw.len() % 16 != 0 {
            return Err(Error::Shape {
                expected: "whole (f64, f64) pairs".into(),
                found: format!("{} bytes", raw.len()),
            });
        }
        Self::new(
            (header.dst_size[0], header.dst_size[1]),
            (header.src_size[0], header.src_size[1]),
            coords,
        )
    }
}

/// Roundoff allowance (px) when deciding whether a source lies in the image.
const EDGE_TOL: f64 = 1e-9;

/// Builds the pinhole→fisheye lookup: each pinhole pixel is back-projected
/// onto the plane `z = z_plane` of the pinhole frame, carried into the real
/// camera frame through the gel frame, and projected by the fisheye model.
pub fn build_remap_table(
    model: &FisheyeModel,
    gel_to_cam: &RigidTransform,
    pinhole: &PinholeCamera,
    gel_to_pinhole: &RigidTransform,
    z_plane: f64,
) -> Result<RemapTable> {
    if z_plane == 0.0 || !z_plane.is_finite() {
        return Err(Error::invalid("remap plane depth must be non-zero"));
    }
    let pinhole_to_cam = gel_to_cam.compose(&gel_to_pinhole.inverse());
    let (w, h) = pinhole.image_size();
    let (sw, sh) = model.image_size();
    let (maxx, maxy) = (sw as f64 - 1.0, sh as f64 - 1.0);
    let coords: Vec<[f64; 2]> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let pinhole_to_cam = &pinhole_to_cam;
            (0..w).map(move |x| {
                let sp = match pinhole.unproject(&Pixel::new(x as f64, y as f64), z_plane) {
                    Ok(p) => p,
                    Err(_) => return [f64::NAN; 2],
                };
                match model.world2cam(&pinhole_to_cam.transform_point(&sp)) {
                    Ok(p)
                        if p.x >= -EDGE_TOL
                            && p.x <= maxx + EDGE_TOL
                            && p.y >= -EDGE_TOL
                            && p.y <= maxy + EDGE_TOL =>
                    {
                        [p.x.clamp(0.0, maxx), p.y.clamp(0.0, maxy)]
                    }
                    _ => [f64::NAN; 2],
                }
            })
        })
        .collect();
    RemapTable::new((w, h), (sw, sh), coords)
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape {
                expected: format!("{width}x{height} pixels"),
                found: data.len().to_string(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    /// Binary PGM (P5, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let out = std::io::BufWriter::new(fs::File::create(path)?);
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.data, self.width, self.height, ExtendedColorType::L8)
            .map_err(|e| pgm_error(path, e))
    }

    /// Reads any PNM file; colour or 16-bit input is converted to 8-bit gray.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let img = image::ImageReader::with_format(
            BufReader::new(fs::File::open(path)?),
            image::ImageFormat::Pnm,
        )
        .decode()
        .map_err(|e| pgm_error(path, e))?
        .into_luma8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }
}

fn pgm_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: other.to_string(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    #[default]
    Bilinear,
    Nearest,
}

/// Applies a remap table; unmapped destination pixels are 0.
pub fn remap_image(table: &RemapTable, src: &GrayImage, sampling: Sampling) -> Result<GrayImage> {
    if (src.width, src.height) != table.src_size {
        return Err(Error::Shape {
            expected: format!("{}x{} source image", table.src_size.0, table.src_size.1),
            found: format!("{}x{}", src.width, src.height),
        });
    }
    let sw = src.width as usize;
    let (maxx, maxy) = (src.width as usize - 1, src.height as usize - 1);
    let px = &src.data;
    let data = table
        .coords
        .iter()
        .map(|c| {
            let (x, y) = (c[0], c[1]);
            if x.is_nan() {
                return 0;
            }
            match sampling {
                Sampling::Nearest => {
                    let xi = ((x + 0.5) as usize).min(maxx);
                    let yi = ((y + 0.5) as usize).min(maxy);
                    px[yi * sw + xi]
                }
                Sampling::Bilinear => {
                    let x0 = x as usize;
                    let y0 = y as usize;
                    let fx = x - x0 as f64;
                    let fy = y - y0 as f64;
                    let x1 = (x0 + 1).min(maxx);
                    let y1 = (y0 + 1).min(maxy);
                    let a = px[y0 * sw + x0] as f64;
                    let b = px[y0 * sw + x1] as f64;
                    let c = px[y1 * sw + x0] as f64;
                    let d = px[y1 * sw + x1] as f64;
                    let top = a + (b - a) * fx;
                    let bottom = c + (d - c) * fx;
                    (top + (bottom - top) * fy + 0.5) as u8
                }
            }
        })
        .collect();
    GrayImage::new(table.dst_size.0, table.dst_size.1, data)
}

/// Mean squared difference over all `2 m²` entries.
pub fn feature_mse(a: &FeatureImage, b: &FeatureImage) -> Result<f64> {
    if a.m() != b.m() {
        return Err(Error::Shape {
            expected: format!("m = {}", a.m()),
            found: format!("m = {}", b.m()),
        });
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Outcome of [`refine_translation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub translation: Vec3,
    pub mse: f64,
    pub candidates: usize,
}

/// Exhaustive search over the cube `t_init ± radius` with stride `step` for the
/// translation whose synthetic features best match `real` in MSE. Ties go to
/// the candidate nearest `t_init`, then to the lexicographically smallest.
pub fn refine_translation<F>(
    make_features: F,
    real: &FeatureImage,
    t_init: Vec3,
    radius: f64,
    step: f64,
) -> Result<Refinement>
where
    F: Fn(&Vec3) -> Result<FeatureImage> + Sync,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid("refinement step must be positive"));
    }
    if !(radius >= step) || !radius.is_finite() {
        return Err(Error::invalid(
            "refinement radius must be at least one step",
        ));
    }
    if !real.is_finite() {
        return Err(Error::NonFinite("real feature image".into()));
    }
    let k = (radius / step * (1.0 + 1e-9)).floor() as i64;
    let side = (2 * k + 1) as usize;
    let total = side * side * side;
    let best = (0..total)
        .into_par_iter()
        .map(|idx| {
            let i = (idx / (side * side)) as i64 - k;
            let j = ((idx / side) % side) as i64 - k;
            let l = (idx % side) as i64 - k;
            let offset = Vec3::new(i as f64 * step, j as f64 * step, l as f64 * step);
            let t = t_init + offset;
            let features = make_features(&t)?;
            if !features.is_finite() {
                return Err(Error::NonFinite(format!(
                    "synthetic features at t = ({}, {}, {})",
                    t.x, t.y, t.z
                )));
            }
            Ok((feature_mse(&features, real)?, offset.norm(), t))
        })
        .try_reduce_with(|a, b| Ok(if better(&b, &a) { b } else { a }))
        .expect("search grid is never empty")?;
    Ok(Refinement {
        translation: best.2,
        mse: best.0,
        candidates: total,
    })
}

/// Total order on `(mse, distance from start, t)`; independent of the
/// evaluation order.
fn better(a: &(f64, f64, Vec3), b: &(f64, f64, Vec3)) -> bool {
    a.0.total_cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.x.total_cmp(&b.2.x))
        .then(a.2.y.total_cmp(&b.2.y))
        .then(a.2.z.total_cmp(&b.2.z))
        .is_lt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> PinholeCamera {
        PinholeCamera::centered(-220.0, 440).unwrap()
    }

    #[test]
    fn world2cam_basics() {
        let m = FisheyeModel::new(
            RadialProfile::Polynomial(vec![200.0]),
            Matrix2::identity(),
            Pixel::new(320.0, 240.0),
            (640, 480),
            None,
        )
        .unwrap();
        assert_eq!(
            m.world2cam(&Point3::new(0.0, 0.0, -10.0)).unwrap(),
            Pixel::new(320.0, 240.0)
        );
        let s = Point3::new(3.0, 4.0, -5.0);
        let theta = 5.0f64.atan2(5.0);
        let p = m.world2cam(&s).unwrap();
        assert!((p.x - (320.0 + 200.0 * theta * 0.6)).abs() < 1e-12);
        assert!((p.y - (240.0 + 200.0 * theta * 0.8)).abs() < 1e-12);

        let mut prev = 0.0;
        for i in 1..100 {
            let th = i as f64 * 0.015;
            let p = m.world2cam(&Point3::new(th.sin(), 0.0, -th.cos())).unwrap();
            let r = (p - Pixel::new(320.0, 240.0)).norm();
            assert!(r > prev);
            prev = r;
        }
        assert!(m.world2cam(&Point3::new(0.0, 0.0, 1.0)).is_err());
        let narrow = FisheyeModel::new(
            RadialProfile::Polynomial(vec![200.0]),
            Matrix2::identity(),
            Pixel::new(320.0, 240.0),
            (640, 480),
            Some(0.5),
        )
        .unwrap();
        assert!(narrow.world2cam(&Point3::new(1.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn non_monotone_polynomial_limits_theta() {
        // ρ'(θ) = 100 - 300 θ² vanishes at θ = 1/√3
        let m = FisheyeModel::new(
            RadialProfile::Polynomial(vec![100.0, 0.0, -100.0]),
            Matrix2::identity(),
            Pixel::new(10.0, 10.0),
            (20, 20),
            None,
        )
        .unwrap();
        assert!((m.theta_max() - 1.0 / 3f64.sqrt()).abs() < 1e-3);
        assert!(m.theta_max() <= 1.0 / 3f64.sqrt());
    }

    #[test]
    fn identity_table_for_pinhole_fisheye() {
        let c = cam();
        let tf = crate::geometry::CameraSpec::default().transform().unwrap();
        let m = FisheyeModel::from_pinhole(&c).unwrap();
        let t = build_remap_table(&m, &tf, &c, &tf, tf.translation().z).unwrap();
        for y in 0..440 {
            for x in 0..440 {
                let p = t.get(x, y).unwrap_or_else(|| panic!("unmapped {x} {y}"));
                assert!((p.x - x as f64).abs() < 1e-6 && (p.y - y as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn translation_shifts_table_uniformly() {
        let c = cam();
        let tf = crate::geometry::CameraSpec::default().transform().unwrap();
        let delta = 0.3;
        let moved = tf.with_translation(tf.translation() + Vec3::new(delta, 0.0, 0.0));
        let m = FisheyeModel::from_pinhole(&c).unwrap();
        let z = tf.translation().z;
        let t = build_remap_table(&m, &moved, &c, &tf, z).unwrap();
        let shift = c.focal() * delta / z;
        for (x, y) in [(50, 50), (220, 220), (100, 400)] {
            let p = t.get(x, y).unwrap();
            assert!((p.x - x as f64 - shift).abs() < 1e-9);
            assert!((p.y - y as f64).abs() < 1e-9);
        }
        // the columns shifted past the right border are unmapped
        assert!(t.get(439, 10).is_none());
    }

    #[test]
    fn remap_identity_constant_and_shift() {
        let img = GrayImage::from_fn(13, 7, |x, y| (x * 17 + y * 31) as u8).unwrap();
        let id = RemapTable::identity(13, 7);
        assert_eq!(remap_image(&id, &img, Sampling::Bilinear).unwrap(), img);
        assert_eq!(remap_image(&id, &img, Sampling::Nearest).unwrap(), img);

        let flat = GrayImage::new(13, 7, vec![77; 91]).unwrap();
        let half = RemapTable::new(
            (13, 7),
            (13, 7),
            (0..91)
                .map(|i| {
                    if i % 3 == 0 {
                        [f64::NAN; 2]
                    } else {
                        [(i % 13) as f64 * 0.9 + 0.3, (i / 13) as f64 * 0.8]
                    }
                })
                .collect(),
        )
        .unwrap();
        let out = remap_image(&half, &flat, Sampling::Bilinear).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, if i % 3 == 0 { 0 } else { 77 });
        }

        // shift right by 2: dst(x) = src(x - 2)
        let shift = RemapTable::new(
            (13, 7),
            (13, 7),
            (0..7)
                .flat_map(|y| {
                    (0..13).map(move |x| {
                        if x >= 2 {
                            [(x - 2) as f64, y as f64]
                        } else {
                            [f64::NAN; 2]
                        }
                    })
                })
                .collect(),
        )
        .unwrap();
        let out = remap_image(&shift, &img, Sampling::Bilinear).unwrap();
        for y in 0..7 {
            for x in 0..13 {
                let expect = if x >= 2 { img.get(x - 2, y) } else { 0 };
                assert_eq!(out.get(x, y), expect);
            }
        }
        let small = GrayImage::new(3, 3, vec![0; 9]).unwrap();
        assert!(remap_image(&id, &small, Sampling::Bilinear).is_err());
    }

    #[test]
    fn pgm_and_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(5, 3, |x, y| (x * 50 + y) as u8).unwrap();
        let p = dir.path().join("a.pgm");
        img.write_pgm(&p).unwrap();
        assert_eq!(GrayImage::read_pgm(&p).unwrap(), img);
        fs::write(&p, b"P5\n# comment\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!(GrayImage::read_pgm(&p).unwrap().data(), &[1, 2]);
        fs::write(&p, b"P2\n2 1\n255\n1 2\n").unwrap();
        assert_eq!(GrayImage::read_pgm(&p).unwrap().data(), &[1, 2]);
        fs::write(&p, b"P5\n2 1\n255\n\x01").unwrap();
        assert!(GrayImage::read_pgm(&p).is_err());

        let mut coords: Vec<[f64; 2]> = (0..15)
            .map(|i| [(i % 5) as f64 * 0.5, (i / 5) as f64])
            .collect();
        coords[4] = [f64::NAN; 2];
        let t = RemapTable::new((5, 3), (5, 3), coords).unwrap();
        let q = dir.path().join("t.bin");
        t.save(&q).unwrap();
        let back = RemapTable::load(&q).unwrap();
        assert_eq!(back.get(1, 2), t.get(1, 2));
        assert!(back.get(4, 0).is_none());
        assert_eq!(back.mapped_count(), 14);
    }

    #[test]
    fn mse_examples() {
        let a = FeatureImage::from_data(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let b = FeatureImage::from_data(2, a.data().iter().map(|v| v + 1.0).collect()).unwrap();
        assert_eq!(feature_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_mse(&a, &b).unwrap(), 1.0);
        assert_eq!(feature_mse(&b, &a).unwrap(), feature_mse(&a, &b).unwrap());
        assert!(feature_mse(&a, &FeatureImage::zeros(3)).is_err());
    }

    #[test]
    fn refinement_on_a_quadratic_bowl() {
        // features encode the translation directly
        let target = Vec3::new(0.2, -0.1, 0.3);
        let encode = |t: &Vec3| vec![t.x, t.y, t.z, t.x - t.y, 0.0, 0.0, 0.0, 0.0];
        let make = |t: &Vec3| FeatureImage::from_data(2, encode(t));
        let real = FeatureImage::from_data(2, encode(&target)).unwrap();
        let r = refine_translation(make, &real, Vec3::zeros(), 0.5, 0.1).unwrap();
        assert!((r.translation - target).norm() < 1e-12);
        assert_eq!(r.candidates, 11 * 11 * 11);

        // flat objective: ties resolve to the start point
        let flat = |_: &Vec3| Ok(FeatureImage::zeros(1));
        let r = refine_translation(
            flat,
            &FeatureImage::zeros(1),
            Vec3::new(1.0, 2.0, 3.0),
            0.3,
            0.1,
        )
        .unwrap();
        assert_eq!(r.translation, Vec3::new(1.0, 2.0, 3.0));

        assert!(refine_translation(make, &real, Vec3::zeros(), 0.05, 0.1).is_err());
        let mut nan = FeatureImage::zeros(2);
        nan.data_mut()[3] = f64::NAN;
        assert!(refine_translation(make, &nan, Vec3::zeros(), 0.5, 0.1).is_err());
    }
}
