use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tactile_synth::fields::{GridField, Lattice, ParticleLayerSpec};
use tactile_synth::flow::{
    bin_displacements, bin_forces, flow_samples, synth_optical_flow, total_force, FlowSample,
    NodalForces, SurfaceExtent,
};
use tactile_synth::geometry::{CameraSpec, Pixel, PixelDisplacement, Point3, Vec3};
use tactile_synth::visibility::VisibilityGrid;

fn random_samples(seed: u64, n: usize) -> Vec<FlowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| FlowSample {
            pixel: Pixel::new(rng.gen_range(0.0..440.0), rng.gen_range(0.0..440.0)),
            displacement: PixelDisplacement::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ),
            weight: rng.gen_range(0.0..1.0),
        })
        .collect()
}

fn random_forces(seed: u64, n: usize) -> NodalForces {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NodalForces {
        nodes: (0..n)
            .map(|_| {
                (
                    Point3::new(rng.gen_range(0.0..=30.0), rng.gen_range(0.0..=30.0), 4.5),
                    Vec3::new(
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-1.0..0.0),
                    ),
                )
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn features_ignore_weight_scale(seed in any::<u64>(), m in 1usize..45) {
        let samples = random_samples(seed, 500);
        let base = bin_displacements(&samples, m, (440, 440)).unwrap();
        for c in [1e-3, 1.0, 1e3] {
            let scaled: Vec<FlowSample> = samples.iter().map(|s| FlowSample { weight: s.weight * c, ..*s }).collect();
            let f = bin_displacements(&scaled, m, (440, 440)).unwrap();
            for (a, b) in f.data().iter().zip(base.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn features_are_linear_in_uniform_motion(seed in any::<u64>(), k in -5.0..5.0f64) {
        let samples = random_samples(seed, 300);
        let base = bin_displacements(&samples, 10, (440, 440)).unwrap();
        let scaled: Vec<FlowSample> = samples
            .iter()
            .map(|s| FlowSample { displacement: s.displacement * k, ..*s })
            .collect();
        let f = bin_displacements(&scaled, 10, (440, 440)).unwrap();
        for (a, b) in f.data().iter().zip(base.scaled(k).data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn binning_conserves_force(seed in any::<u64>(), count in 0usize..400) {
        let nf = random_forces(seed, count);
        let surface = SurfaceExtent::default();
        let total = nf.total();
        for n in [1usize, 5, 20] {
            let t = total_force(&bin_forces(&nf, n, &surface).unwrap());
            prop_assert!((t - total).norm() <= 1e-9 * (1.0 + total.norm()));
        }
    }

    #[test]
    fn coarse_bins_are_pooled_fine_bins(seed in any::<u64>(), count in 0usize..400) {
        let nf = random_forces(seed, count);
        let surface = SurfaceExtent::default();
        let coarse = bin_forces(&nf, 20, &surface).unwrap();
        let fine = bin_forces(&nf, 40, &surface).unwrap();
        for c in 0..3 {
            for r in 0..20 {
                for q in 0..20 {
                    let pooled = fine.get(c, 2 * r, 2 * q)
                        + fine.get(c, 2 * r + 1, 2 * q)
                        + fine.get(c, 2 * r, 2 * q + 1)
                        + fine.get(c, 2 * r + 1, 2 * q + 1);
                    prop_assert!((pooled - coarse.get(c, r, q)).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn weighted_mean_hand_cases() {
    let s = |x: f64, y: f64, du: f64, dv: f64, w: f64| FlowSample {
        pixel: Pixel::new(x, y),
        displacement: PixelDisplacement::new(du, dv),
        weight: w,
    };
    // two regions of a 2x2 grid over a 10x10 image
    let f = bin_displacements(
        &[
            s(1.0, 1.0, 1.0, 0.0, 1.0),
            s(2.0, 2.0, 3.0, 2.0, 3.0),
            s(7.0, 1.0, -1.0, 4.0, 0.5),
            // far border belongs to the last region
            s(10.0, 10.0, 5.0, 5.0, 1.0),
            // outside the image: dropped
            s(-0.1, 3.0, 100.0, 100.0, 1.0),
            // zero weight: ignored
            s(8.0, 8.0, 50.0, 50.0, 0.0),
        ],
        2,
        (10, 10),
    )
    .unwrap();
    assert_eq!(f.get(0, 0), (2.5, 1.5));
    assert_eq!(f.get(0, 1), (-1.0, 4.0));
    assert_eq!(f.get(1, 0), (0.0, 0.0));
    assert_eq!(f.get(1, 1), (5.0, 5.0));
}

/// Features computed straight from the projection formula and the region
/// rule, with no shared code beyond the visibility lookup.
#[test]
fn synthesis_matches_naive_reference() {
    let spec = CameraSpec::default();
    let (cam, tf) = (spec.camera().unwrap(), spec.transform().unwrap());
    let lattice = Lattice {
        first: Point3::new(3.0, 3.0, 1.0),
        spacing: 6.0,
        dims: [5, 5, 2],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let disp: Vec<Vec3> = (0..lattice.len())
        .map(|_| {
            Vec3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.0),
            )
        })
        .collect();
    let field = GridField::new(lattice, disp.clone()).unwrap();
    let layer = ParticleLayerSpec::default();
    let probs: Vec<f64> = (0..27).map(|i| 0.4 + 0.02 * i as f64).collect();
    let vis = VisibilityGrid::new([3, 3, 3], layer.origin(), layer.extent(), probs).unwrap();
    let m = 4;
    let got = synth_optical_flow(&field, &cam, &tf, &vis, m).unwrap();

    let (f, cx, cy) = (cam.focal(), cam.center().x, cam.center().y);
    let proj = |p: [f64; 3]| {
        // gel -> pinhole: x' = x - 15, y' = 15 - y, z' = -z - 15
        let (x, y, z) = (p[0] - 15.0, 15.0 - p[1], -p[2] - 15.0);
        (f * x / z + cx, f * y / z + cy)
    };
    let mut du = vec![0.0; m * m];
    let mut dv = vec![0.0; m * m];
    let mut w = vec![0.0; m * m];
    for (idx, d) in disp.iter().enumerate() {
        let (i, j, k) = (idx % 5, (idx / 5) % 5, idx / 25);
        let s = [
            3.0 + 6.0 * i as f64,
            3.0 + 6.0 * j as f64,
            1.0 + 6.0 * k as f64,
        ];
        let moved = [s[0] + d.x, s[1] + d.y, s[2] + d.z];
        let (u0, v0) = proj(s);
        let (u1, v1) = proj(moved);
        let weight = vis.lookup(&Point3::from(s)) * vis.lookup(&Point3::from(moved));
        if !(0.0..=440.0).contains(&u0) || !(0.0..=440.0).contains(&v0) {
            continue;
        }
        let col = ((u0 * m as f64 / 440.0) as usize).min(m - 1);
        let row = ((v0 * m as f64 / 440.0) as usize).min(m - 1);
        du[row * m + col] += weight * (u1 - u0);
        dv[row * m + col] += weight * (v1 - v0);
        w[row * m + col] += weight;
    }
    for r in 0..m * m {
        let (eu, ev) = if w[r] > 0.0 {
            (du[r] / w[r], dv[r] / w[r])
        } else {
            (0.0, 0.0)
        };
        let (gu, gv) = got.get(r / m, r % m);
        assert!(
            (gu - eu).abs() < 1e-9 && (gv - ev).abs() < 1e-9,
            "region {r}: {gu},{gv} vs {eu},{ev}"
        );
    }
    // the naive path through explicit samples agrees as well
    let samples = flow_samples(&field, &cam, &tf, &vis).unwrap();
    assert_eq!(
        bin_displacements(&samples, m, cam.image_size()).unwrap(),
        got
    );
}

#[test]
fn zero_field_gives_zero_features() {
    let spec = CameraSpec::default();
    let layer = ParticleLayerSpec::default();
    let lattice = tactile_synth::fields::sample_lattice(&layer, 1.5).unwrap();
    let vis = VisibilityGrid::uniform(&layer, [15, 15, 9], 0.7).unwrap();
    let f = synth_optical_flow(
        &GridField::zeros(lattice),
        &spec.camera().unwrap(),
        &spec.transform().unwrap(),
        &vis,
        40,
    )
    .unwrap();
    assert!(f.data().iter().all(|v| *v == 0.0));
}

#[test]
fn out_of_extent_node_is_reported() {
    let mut nf = random_forces(1, 5);
    nf.nodes[3].0.x = 31.0;
    let err = bin_forces(&nf, 20, &SurfaceExtent::default()).unwrap_err();
    assert!(matches!(
        err,
        tactile_synth::Error::OutOfExtent { index: 3 }
    ));
}
