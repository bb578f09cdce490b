mod common;

use nalgebra::Vector3;
use proptest::prelude::*;
use tactile_synth::geometry::{CameraSpec, PinholeCamera, Pixel, Point3, RigidTransform, Vec3};

fn default_camera() -> PinholeCamera {
    CameraSpec::default().camera().unwrap()
}

proptest! {
    #[test]
    fn unproject_then_project_is_identity(
        u in -200.0..640.0f64,
        v in -200.0..640.0f64,
        z in -60.0..-0.5f64,
    ) {
        let cam = default_camera();
        let p = Pixel::new(u, v);
        let back = cam.project(&cam.unproject(&p, z).unwrap()).unwrap();
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn project_pair_matches_two_projections(
        x in -20.0..20.0f64,
        y in -20.0..20.0f64,
        z in -30.0..-10.0f64,
        dx in -1.0..1.0f64,
        dy in -1.0..1.0f64,
        dz in -1.0..1.0f64,
    ) {
        let cam = default_camera();
        let s = Point3::new(x, y, z);
        let ds = Vec3::new(dx, dy, dz);
        let pair = cam.project_pair(&s, &ds).unwrap();
        let direct = cam.project(&(s + ds)).unwrap() - cam.project(&s).unwrap();
        prop_assert!((pair - direct).norm() <= 1e-12);
    }

    #[test]
    fn wrong_side_points_are_rejected(x in -5.0..5.0f64, y in -5.0..5.0f64, z in 0.0..30.0f64) {
        prop_assert!(default_camera().project(&Point3::new(x, y, z)).is_err());
    }

    #[test]
    fn rigid_inverse_round_trips(
        ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in 0.1..1.0f64,
        angle in -3.1..3.1f64,
        t in prop::array::uniform3(-50.0..50.0f64),
        p in prop::array::uniform3(-50.0..50.0f64),
    ) {
        let tf = RigidTransform::from_axis_angle(Vector3::new(ax, ay, az), angle, Vec3::from(t)).unwrap();
        let q = Point3::from(p);
        let back = tf.inverse().transform_point(&tf.transform_point(&q));
        prop_assert!((back - q).norm() < 1e-10);
        let id = tf.compose(&tf.inverse());
        prop_assert!((id.transform_point(&q) - q).norm() < 1e-10);
    }

    #[test]
    fn projected_radius_matches_tangent_oracle(
        x in -15.0..15.0f64,
        y in -15.0..15.0f64,
        z in -25.0..-10.0f64,
        radius in 0.01..1.5f64,
    ) {
        let cam = default_camera();
        let s = Point3::new(x, y, z);
        let got = cam.particle_projected_radius(&s, radius).unwrap();
        let want = common::projected_radius_oracle(cam.focal(), &s, radius);
        prop_assert!((got - want).abs() < 1e-6, "got {got}, oracle {want}");
    }

    #[test]
    fn projected_radius_shrinks_with_distance(
        x in -5.0..5.0f64,
        y in -5.0..5.0f64,
        z in -25.0..-10.0f64,
        radius in 0.05..0.5f64,
        scale in 1.1..3.0f64,
    ) {
        // moving along the viewing ray keeps the angle and shrinks the disc
        let cam = default_camera();
        let near = Point3::new(x, y, z);
        let far = Point3::from(near.coords * scale);
        let rn = cam.particle_projected_radius(&near, radius).unwrap();
        let rf = cam.particle_projected_radius(&far, radius).unwrap();
        prop_assert!(rf < rn);
    }
}

#[test]
fn default_camera_frames_the_gel() {
    let spec = CameraSpec::default();
    let cam = spec.camera().unwrap();
    let tf = spec.transform().unwrap();
    // the bottom face of the layer spans the full image
    let a = cam
        .project(&tf.transform_point(&Point3::new(0.0, 0.0, 0.0)))
        .unwrap();
    let b = cam
        .project(&tf.transform_point(&Point3::new(30.0, 30.0, 0.0)))
        .unwrap();
    assert!((a - Pixel::new(0.0, 440.0)).norm() < 1e-9, "{a}");
    assert!((b - Pixel::new(440.0, 0.0)).norm() < 1e-9, "{b}");
    // the gel centre sits on the optical axis
    let c = cam
        .project(&tf.transform_point(&Point3::new(15.0, 15.0, 2.0)))
        .unwrap();
    assert!((c - cam.center()).norm() < 1e-12);
}

#[test]
fn on_axis_radius_is_the_tangent_cone() {
    // on-axis sphere: tangent cone half-angle asin(R/d)
    let cam = default_camera();
    let (r, d) = (0.5, 16.0);
    let got = cam
        .particle_projected_radius(&Point3::new(0.0, 0.0, -d), r)
        .unwrap();
    let beta = (r / d).asin();
    assert!((got - cam.focal().abs() * beta.tan()).abs() < 1e-9);
}
