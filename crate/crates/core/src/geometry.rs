//! Coordinate frames, rigid transforms and the reference pinhole camera.
//!
//! Frames:
//! - gel frame: fixed to the particle layer, origin at the bottom corner of
//!   the layer, `z` pointing towards the contact surface;
//! - pinhole frame: ideal reference camera looking at the layer. Scene points
//!   have negative `z` and the focal length is negative, so that
//!   `u = f x / z + u_c` keeps the image upright.

use nalgebra::{Matrix3, Point2, Point3 as NPoint3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = NPoint3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Pixel = Point2<f64>;
pub type PixelDisplacement = Vector2<f64>;

/// Side length of the square reference image, in pixels.
pub const REFERENCE_IMAGE_PX: f64 = 440.0;
/// Side length of the square particle layer, in millimetres.
pub const REFERENCE_GEL_SIDE_MM: f64 = 30.0;

const ORTHO_TOL: f64 = 1e-9;

/// Rotation followed by translation: `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    /// Builds a transform, rejecting rotations that are not proper orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("rigid transform".into()));
        }
        let gram = rotation.transpose() * rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > ORTHO_TOL {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {off:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Result<Self> {
        let axis = nalgebra::Unit::try_new(axis, 1e-12)
            .ok_or_else(|| Error::invalid("rotation axis has zero length"))?;
        let rotation = *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix();
        Self::new(rotation, translation)
    }

    /// Builds from a row-major 3×3 rotation.
    pub fn from_row_major(rotation: &[f64; 9], translation: [f64; 3]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(rotation), Vec3::from(translation))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    /// Same rotation, different translation.
    pub fn with_translation(&self, translation: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Applies only the rotation; displacements are free vectors.
    #[inline]
    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Focal length that makes a `gel_side` square at depth `t_z` exactly fill an
/// `image_px` wide image. Negative whenever `t_z` is.
pub fn default_focal(t_z: f64, image_px: f64, gel_side: f64) -> Result<f64> {
    if t_z == 0.0 || !t_z.is_finite() {
        return Err(Error::invalid("t_z must be finite and non-zero"));
    }
    if !(image_px > 0.0 && gel_side > 0.0) {
        return Err(Error::invalid("image size and gel side must be positive"));
    }
    Ok(image_px / gel_side * t_z)
}

/// Ideal pinhole camera with square pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    focal: f64,
    center: Pixel,
    image_size: (u32, u32),
}

impl PinholeCamera {
    pub fn new(focal: f64, center: Pixel, image_size: (u32, u32)) -> Result<Self> {
        if focal == 0.0 || !focal.is_finite() {
            return Err(Error::invalid("focal length must be finite and non-zero"));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        if !(center.x >= 0.0 && center.x <= w && center.y >= 0.0 && center.y <= h) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside the {}x{} image",
                center.x, center.y, image_size.0, image_size.1
            )));
        }
        Ok(Self {
            focal,
            center,
            image_size,
        })
    }

    /// Square camera with the principal point at the image centre.
    pub fn centered(focal: f64, side_px: u32) -> Result<Self> {
        let c = side_px as f64 / 2.0;
        Self::new(focal, Pixel::new(c, c), (side_px, side_px))
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn center(&self) -> Pixel {
        self.center
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    #[inline]
    fn check_depth(&self, z: f64) -> Result<()> {
        if z == 0.0 || z.is_sign_negative() != self.focal.is_sign_negative() || !z.is_finite() {
            return Err(Error::ProjectionSingular { depth: z });
        }
        Ok(())
    }

    /// `u = f x / z + u_c`, `v = f y / z + v_c`.
    #[inline]
    pub fn project(&self, s: &Point3) -> Result<Pixel> {
        self.check_depth(s.z)?;
        Ok(Pixel::new(
            self.focal * s.x / s.z + self.center.x,
            self.focal * s.y / s.z + self.center.y,
        ))
    }

    /// Pixel displacement of a point moving from `s` to `s + ds`; each end
    /// is projected with its own depth.
    #[inline]
    pub fn project_pair(&self, s: &Point3, ds: &Vec3) -> Result<PixelDisplacement> {
        let before = self.project(s)?;
        let after = self.project(&(s + ds))?;
        Ok(after - before)
    }

    /// Back-projects a pixel onto the plane `z = z_plane`.
    pub fn unproject(&self, p: &Pixel, z_plane: f64) -> Result<Point3> {
        if z_plane == 0.0 || !z_plane.is_finite() {
            return Err(Error::ProjectionSingular { depth: z_plane });
        }
        Ok(Point3::new(
            z_plane * (p.x - self.center.x) / self.focal,
            z_plane * (p.y - self.center.y) / self.focal,
            z_plane,
        ))
    }

    /// Radius in pixels of the circle used as the image footprint of a sphere
    /// of radius `radius` centred at `s` (pinhole frame).
    ///
    /// The analysis happens in the plane spanned by the optical axis and the
    /// ray through the sphere centre. The returned value is the image distance
    /// between the projected centre and the projection of the outer tangent
    /// point, i.e. where the ray at angle `α - β` from the radial axis touches
    /// the sphere.
    pub fn particle_projected_radius(&self, s: &Point3, radius: f64) -> Result<f64> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::invalid("particle radius must be non-negative"));
        }
        self.check_depth(s.z)?;
        let radial = s.x.hypot(s.y);
        let dist = radial.hypot(s.z);
        let ratio = radius / dist;
        if ratio >= 1.0 {
            return Err(Error::Geometry(format!(
                "particle of radius {radius} mm at distance {dist} mm encloses the camera"
            )));
        }
        // Elevation of the centre ray above the radial axis. atan2 yields the
        // exact π/2 limit for on-axis particles.
        let alpha = (-s.z).atan2(radial);
        let beta = ratio.asin();
        let gamma = alpha - beta;
        let radial_t = radial + radius * gamma.sin();
        let z_t = s.z + radius * gamma.cos();
        self.check_depth(z_t).map_err(|_| {
            Error::Geometry("tangent point of the particle lies behind the camera".into())
        })?;
        Ok((self.focal * (radial_t / z_t - radial / s.z)).abs())
    }
}

/// JSON form of a camera together with its gel→camera extrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub rotation: [f64; 9],
    pub translation_mm: [f64; 3],
    pub focal_px: f64,
    pub center_px: [f64; 2],
    pub image_size_px: [u32; 2],
}

impl Default for CameraSpec {
    /// Reference camera 15 mm below the layer centre, focal length chosen so
    /// the 30 mm layer bottom fills the 440 px image.
    fn default() -> Self {
        let t_z = -15.0;
        Self {
            // 180° about x: gel z (towards the surface) maps to pinhole -z.
            rotation: [1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0],
            translation_mm: [-15.0, 15.0, t_z],
            focal_px: REFERENCE_IMAGE_PX / REFERENCE_GEL_SIDE_MM * t_z,
            center_px: [220.0, 220.0],
            image_size_px: [440, 440],
        }
    }
}

impl CameraSpec {
    pub fn camera(&self) -> Result<PinholeCamera> {
        PinholeCamera::new(
            self.focal_px,
            Pixel::new(self.center_px[0], self.center_px[1]),
            (self.image_size_px[0], self.image_size_px[1]),
        )
    }

    pub fn transform(&self) -> Result<RigidTransform> {
        RigidTransform::from_row_major(&self.rotation, self.translation_mm)
    }

    pub fn from_parts(cam: &PinholeCamera, gel_to_pinhole: &RigidTransform) -> Self {
        let t = gel_to_pinhole.translation();
        Self {
            rotation: gel_to_pinhole.rotation_row_major(),
            translation_mm: [t.x, t.y, t.z],
            focal_px: cam.focal(),
            center_px: [cam.center().x, cam.center().y],
            image_size_px: [cam.image_size().0, cam.image_size().1],
        }
    }
}
