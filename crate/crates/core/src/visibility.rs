//! Monte Carlo estimate of the probability that a particle at a given gel
//! location is visible to the camera, binned on a 3D grid.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::ParticleLayerSpec;
use crate::geometry::{PinholeCamera, Point3, RigidTransform, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub center: Point3,
    pub radius: f64,
}

/// One random draw of the particle layer (gel frame).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticleConfig {
    pub particles: Vec<Particle>,
}

/// Number of particles implied by the layer's volume ratio.
pub fn particle_count(layer: &ParticleLayerSpec) -> usize {
    (layer.particle_volume_ratio * layer.volume() / layer.mean_particle_volume()).round() as usize
}

/// Draws `particle_count(layer)` particles with i.i.d. uniform centres and radii.
pub fn sample_particles_with<R: Rng>(
    layer: &ParticleLayerSpec,
    rng: &mut R,
) -> Result<ParticleConfig> {
    layer.validate()?;
    let count = particle_count(layer);
    if count == 0 {
        return Err(Error::invalid(
            "particle volume ratio yields zero particles",
        ));
    }
    let o = layer.origin_mm;
    let e = layer.extent_mm;
    let [rlo, rhi] = layer.particle_radius_range_mm;
    let particles = (0..count)
        .map(|_| {
            let center = Point3::new(
                o[0] + e[0] * rng.gen::<f64>(),
                o[1] + e[1] * rng.gen::<f64>(),
                o[2] + e[2] * rng.gen::<f64>(),
            );
            let radius = if rhi > rlo {
                rng.gen_range(rlo..=rhi)
            } else {
                rlo
            };
            Particle { center, radius }
        })
        .collect();
    Ok(ParticleConfig { particles })
}

pub fn sample_particles(layer: &ParticleLayerSpec, seed: u64) -> Result<ParticleConfig> {
    sample_particles_with(layer, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Image-space footprint of one particle.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    u: f64,
    v: f64,
    radius: f64,
    distance: f64,
}

fn footprints(
    config: &ParticleConfig,
    cam: &PinholeCamera,
    gel_to_pinhole: &RigidTransform,
) -> Result<Vec<Footprint>> {
    config
        .particles
        .iter()
        .map(|p| {
            let s = gel_to_pinhole.transform_point(&p.center);
            let px = cam.project(&s)?;
            Ok(Footprint {
                u: px.x,
                v: px.y,
                radius: cam.particle_projected_radius(&s, p.radius)?,
                distance: s.coords.norm(),
            })
        })
        .collect()
}

/// Occlusion flags: a particle is hidden when its projected centre falls
/// strictly inside the projected circle of a particle strictly closer to the
/// camera.
pub fn visible_flags(
    config: &ParticleConfig,
    cam: &PinholeCamera,
    gel_to_pinhole: &RigidTransform,
) -> Result<Vec<bool>> {
    let fp = footprints(config, cam, gel_to_pinhole)?;
    Ok(occlusion_sweep(&fp))
}

/// Front-to-back sweep with a uniform image-space bucket grid.
fn occlusion_sweep(fp: &[Footprint]) -> Vec<bool> {
    let n = fp.len();
    let mut visible = vec![true; n];
    if n == 0 {
        return visible;
    }
    let (mut umin, mut umax, mut vmin, mut vmax, mut rmax) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        0.0f64,
    );
    for f in fp {
        umin = umin.min(f.u);
        umax = umax.max(f.u);
        vmin = vmin.min(f.v);
        vmax = vmax.max(f.v);
        rmax = rmax.max(f.radius);
    }
    let cell = (2.0 * rmax).max(1e-3);
    let cols = (((umax - umin) / cell).floor() as usize + 1).min(4096);
    let rows = (((vmax - vmin) / cell).floor() as usize + 1).min(4096);
    let cell_u = ((umax - umin) / cols as f64).max(cell);
    let cell_v = ((vmax - vmin) / rows as f64).max(cell);
    let col_of = |u: f64| (((u - umin) / cell_u).floor().max(0.0) as usize).min(cols - 1);
    let row_of = |v: f64| (((v - vmin) / cell_v).floor().max(0.0) as usize).min(rows - 1);
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); cols * rows];

    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        fp[a as usize]
            .distance
            .total_cmp(&fp[b as usize].distance)
            .then(a.cmp(&b))
    });

    let mut start = 0;
    while start < n {
        // particles at identical distance never occlude each other
        let d = fp[order[start] as usize].distance;
        let mut end = start + 1;
        while end < n && fp[order[end] as usize].distance == d {
            end += 1;
        }
        for &idx in &order[start..end] {
            let f = &fp[idx as usize];
            let bucket = &buckets[row_of(f.v) * cols + col_of(f.u)];
            let hidden = bucket.iter().any(|&j| {
                let o = &fp[j as usize];
                let du = f.u - o.u;
                let dv = f.v - o.v;
                du * du + dv * dv < o.radius * o.radius
            });
            visible[idx as usize] = !hidden;
        }
        for &idx in &order[start..end] {
            let f = &fp[idx as usize];
            if f.radius <= 0.0 {
                continue;
            }
            let (c0, c1) = (col_of(f.u - f.radius), col_of(f.u + f.radius));
            let (r0, r1) = (row_of(f.v - f.radius), row_of(f.v + f.radius));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    buckets[r * cols + c].push(idx);
                }
            }
        }
        start = end;
    }
    visible
}

/// Probability of visibility on a regular 3D grid of bins, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityGrid {
    bin_dims: [usize; 3],
    origin: Point3,
    extent: Vec3,
    probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GridHeader {
    bin_dims: [usize; 3],
    origin_mm: [f64; 3],
    extent_mm: [f64; 3],
}

impl VisibilityGrid {
    pub fn new(
        bin_dims: [usize; 3],
        origin: Point3,
        extent: Vec3,
        probabilities: Vec<f64>,
    ) -> Result<Self> {
        if bin_dims.contains(&0) {
            return Err(Error::invalid("visibility bin dims must be positive"));
        }
        if !extent.iter().all(|e| *e > 0.0) {
            return Err(Error::invalid("visibility grid extent must be positive"));
        }
        let len = bin_dims.iter().product::<usize>();
        if probabilities.len() != len {
            return Err(Error::Shape {
                expected: format!("{len} bins"),
                found: probabilities.len().to_string(),
            });
        }
        if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            bin_dims,
            origin,
            extent,
            probabilities,
        })
    }

    /// Grid over the layer holding the same value everywhere.
    pub fn uniform(layer: &ParticleLayerSpec, bin_dims: [usize; 3], value: f64) -> Result<Self> {
        let len = bin_dims.iter().product();
        Self::new(bin_dims, layer.origin(), layer.extent(), vec![value; len])
    }

    pub fn bin_dims(&self) -> [usize; 3] {
        self.bin_dims
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn extent(&self) -> Vec3 {
        self.extent
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    #[inline]
    fn flat(&self, b: [usize; 3]) -> usize {
        b[0] + self.bin_dims[0] * (b[1] + self.bin_dims[1] * b[2])
    }

    /// Bin holding `p` with half-open intervals `[lo, hi)`; `None` outside.
    pub fn bin_of(&self, p: &Point3) -> Option<[usize; 3]> {
        let mut b = [0usize; 3];
        for a in 0..3 {
            let t = (p[a] - self.origin[a]) / self.extent[a] * self.bin_dims[a] as f64;
            if !(t >= 0.0) || t >= self.bin_dims[a] as f64 {
                return None;
            }
            b[a] = t as usize;
        }
        Some(b)
    }

    /// Bin holding `p`, clamping outside points to the nearest bin.
    #[inline]
    pub fn clamped_bin(&self, p: &Point3) -> [usize; 3] {
        std::array::from_fn(|a| {
            let t = (p[a] - self.origin[a]) / self.extent[a] * self.bin_dims[a] as f64;
            if t >= 0.0 {
                (t as usize).min(self.bin_dims[a] - 1)
            } else {
                0
            }
        })
    }

    #[inline]
    pub fn lookup(&self, p: &Point3) -> f64 {
        self.probabilities[self.flat(self.clamped_bin(p))]
    }

    /// Averaging weight of a displacement: visibility of the undeformed
    /// location times visibility of the deformed one, taken as independent.
    #[inline]
    pub fn weight(&self, s: &Point3, ds: &Vec3) -> f64 {
        self.lookup(s) * self.lookup(&(s + ds))
    }

    pub fn bin_center(&self, b: [usize; 3]) -> Point3 {
        Point3::from(std::array::from_fn::<f64, 3, _>(|a| {
            self.origin[a] + (b[a] as f64 + 0.5) * self.extent[a] / self.bin_dims[a] as f64
        }))
    }

    /// JSON header line, then little-endian f64 probabilities (x fastest). Lossless,
    /// so a reloaded grid reproduces features bit for bit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = GridHeader {
            bin_dims: self.bin_dims,
            origin_mm: [self.origin.x, self.origin.y, self.origin.z],
            extent_mm: [self.extent.x, self.extent.y, self.extent.z],
        };
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for p in &self.probabilities {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: GridHeader = serde_json::from_str(line.trim_end())?;
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw)?;
        let len: usize = header.bin_dims.iter().product();
        if raw.len() != 8 * len {
            return Err(Error::Shape {
                expected: format!("{} bytes", 8 * len),
                found: format!("{} bytes", raw.len()),
            });
        }
        let probabilities = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(
            header.bin_dims,
            Point3::from(header.origin_mm),
            Vec3::from(header.extent_mm),
            probabilities,
        )
    }
}

/// Monte Carlo parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityParams {
    pub n_configs: usize,
    pub bin_dims: [usize; 3],
}

impl Default for VisibilityParams {
    fn default() -> Self {
        Self {
            n_configs: 100,
            bin_dims: [15, 15, 9],
        }
    }
}

/// RNG for configuration `index`: a ChaCha8 stream selected by the index,
/// keyed by the master seed.
pub fn config_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Estimates the grid from `n_configs` random layers.
pub fn estimate_visibility_grid(
    layer: &ParticleLayerSpec,
    cam: &PinholeCamera,
    gel_to_pinhole: &RigidTransform,
    params: &VisibilityParams,
    seed: u64,
) -> Result<VisibilityGrid> {
    layer.validate()?;
    if particle_count(layer) == 0 {
        return Err(Error::invalid(
            "particle volume ratio yields zero particles",
        ));
    }
    estimate_visibility_grid_with(
        layer.origin(),
        layer.extent(),
        cam,
        gel_to_pinhole,
        params,
        seed,
        |rng| sample_particles_with(layer, rng),
    )
}

/// Same estimator with a caller-supplied configuration sampler.
///
/// Per configuration and bin the visible fraction is computed; the grid value
/// is the mean of those fractions over the configurations in which the bin
/// held at least one particle. Bins that never hold a particle read 1.
pub fn estimate_visibility_grid_with<F>(
    origin: Point3,
    extent: Vec3,
    cam: &PinholeCamera,
    gel_to_pinhole: &RigidTransform,
    params: &VisibilityParams,
    seed: u64,
    sampler: F,
) -> Result<VisibilityGrid>
where
    F: Fn(&mut ChaCha8Rng) -> Result<ParticleConfig> + Sync,
{
    if params.n_configs == 0 {
        return Err(Error::invalid("n_configs must be at least 1"));
    }
    let len: usize = params.bin_dims.iter().product();
    let shape = VisibilityGrid::new(params.bin_dims, origin, extent, vec![1.0; len])?;

    let per_config: Vec<Vec<(u32, u32)>> = (0..params.n_configs as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = config_rng(seed, k);
            let config = sampler(&mut rng)?;
            let flags = visible_flags(&config, cam, gel_to_pinhole)?;
            let mut counts = vec![(0u32, 0u32); len];
            for (p, vis) in config.particles.iter().zip(flags) {
                if let Some(b) = shape.bin_of(&p.center) {
                    let c = &mut counts[shape.flat(b)];
                    c.1 += 1;
                    if vis {
                        c.0 += 1;
                    }
                }
            }
            Ok(counts)
        })
        .collect::<Result<_>>()?;

    let mut sum = vec![0.0f64; len];
    let mut populated = vec![0u32; len];
    for counts in &per_config {
        for (b, &(vis, total)) in counts.iter().enumerate() {
            if total > 0 {
                sum[b] += vis as f64 / total as f64;
                populated[b] += 1;
            }
        }
    }
    let probabilities = sum
        .iter()
        .zip(&populated)
        .map(|(s, &n)| {
            if n == 0 {
                1.0
            } else {
                (s / n as f64).clamp(0.0, 1.0)
            }
        })
        .collect();
    VisibilityGrid::new(params.bin_dims, origin, extent, probabilities)
}
