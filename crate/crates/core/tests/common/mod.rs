//! Independent reference implementations used as test oracles. They share
//! no code paths with the library beyond its public projection API.

#![allow(dead_code)]

use tactile_synth::geometry::{PinholeCamera, Point3, RigidTransform};
use tactile_synth::visibility::ParticleConfig;

/// Signed radial image coordinate of a point given by its radial distance
/// from the optical axis and its depth.
fn radial_image(f: f64, r: f64, z: f64) -> f64 {
    f * r / z
}

/// Projected footprint radius by brute force: sweeps the silhouette of the
/// sphere in the plane containing the optical axis and the sphere centre,
/// finds the boundary point whose image lies furthest out along the radial
/// direction, and returns its image distance from the projected centre.
pub fn projected_radius_oracle(f: f64, s: &Point3, radius: f64) -> f64 {
    let rc = s.x.hypot(s.y);
    let u = |phi: f64| radial_image(f, rc + radius * phi.cos(), s.z + radius * phi.sin());
    // coarse scan for the bracket holding the maximum
    const N: usize = 20_000;
    let step = std::f64::consts::TAU / N as f64;
    let mut best = 0usize;
    let mut best_u = f64::NEG_INFINITY;
    for i in 0..N {
        let v = u(i as f64 * step);
        if v > best_u {
            best_u = v;
            best = i;
        }
    }
    let (mut a, mut b) = ((best as f64 - 1.0) * step, (best as f64 + 1.0) * step);
    // golden-section refinement
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..200 {
        if u(c) > u(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
        if (b - a).abs() < 1e-15 {
            break;
        }
    }
    let phi = 0.5 * (a + b);
    (u(phi) - radial_image(f, rc, s.z)).abs()
}

/// All-pairs occlusion: particle `i` is hidden iff some strictly closer
/// particle's projected disc strictly contains `i`'s projected centre.
pub fn brute_force_visible(
    config: &ParticleConfig,
    cam: &PinholeCamera,
    tf: &RigidTransform,
) -> Vec<bool> {
    let fp: Vec<(f64, f64, f64, f64)> = config
        .particles
        .iter()
        .map(|p| {
            let s = tf.transform_point(&p.center);
            let px = cam.project(&s).unwrap();
            let r = cam.particle_projected_radius(&s, p.radius).unwrap();
            (px.x, px.y, r, s.coords.norm())
        })
        .collect();
    (0..fp.len())
        .map(|i| {
            !(0..fp.len()).any(|j| {
                let du = fp[i].0 - fp[j].0;
                let dv = fp[i].1 - fp[j].1;
                fp[j].3 < fp[i].3 && du * du + dv * dv < fp[j].2 * fp[j].2
            })
        })
        .collect()
}

/// Two-slab scene: `count` spheres of radius `radius` whose centres are
/// uniform over the square `[0, side]²` at height `z_front`, and one probe on
/// the optical axis further from the camera. Returns the probability that
/// none of the front spheres hides the probe, `(1 - π ρ*² / side²)^count`,
/// where `ρ*` is the off-axis distance at which a front sphere's projected
/// disc just reaches the principal point.
pub fn two_slab_visibility(
    cam: &PinholeCamera,
    tf: &RigidTransform,
    axis_xy: [f64; 2],
    z_front: f64,
    radius: f64,
    side: f64,
    count: usize,
) -> f64 {
    // covers(ρ): front sphere centred ρ off-axis hides the on-axis probe
    let covers = |rho: f64| {
        let s = tf.transform_point(&Point3::new(axis_xy[0] + rho, axis_xy[1], z_front));
        let px = cam.project(&s).unwrap();
        let c = cam.center();
        let r = cam.particle_projected_radius(&s, radius).unwrap();
        (px.x - c.x).powi(2) + (px.y - c.y).powi(2) < r * r
    };
    let (mut lo, mut hi) = (0.0, 10.0 * radius);
    assert!(covers(lo) && !covers(hi));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if covers(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rho = 0.5 * (lo + hi);
    let p_hit = std::f64::consts::PI * rho * rho / (side * side);
    (1.0 - p_hit).powi(count as i32)
}
