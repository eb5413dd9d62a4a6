//! Synthetic multispectral scenes: smooth-noise terrain with per-band
//! spectral profiles, plus soft elliptical cloud blobs that are brighter
//! than the terrain in the cloud-sensitive bands. The alpha>0.5 footprint
//! of the blobs is the ground-truth cloud mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::cubes::{CloudMask, DataCube, DEFAULT_GROUND_RESOLUTION_M};
use crate::rng::{self, Domain};
use crate::spectra::NUM_BANDS;
use crate::{Error, Result};

/// Terrain family, fixing the per-band mean reflectance profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    /// Vegetated: strong NIR plateau, low visible.
    Hills,
    /// Bright soil: elevated red and SWIR.
    Desert,
    /// Noise-blended mixture of the two.
    Mixed,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 3] = [TerrainKind::Hills, TerrainKind::Desert, TerrainKind::Mixed];

    pub fn name(&self) -> &'static str {
        match self {
            TerrainKind::Hills => "hills",
            TerrainKind::Desert => "desert",
            TerrainKind::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hills" => Ok(TerrainKind::Hills),
            "desert" => Ok(TerrainKind::Desert),
            "mixed" => Ok(TerrainKind::Mixed),
            other => Err(Error::invalid(format!("unknown terrain kind '{other}'"))),
        }
    }
}

/// Terrain selection for a scene set: one fixed kind, or rotate through all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainChoice {
    Hills,
    Desert,
    Mixed,
    /// Round-robin over hills/desert/mixed by scene index.
    Variety,
}

impl TerrainChoice {
    pub fn resolve(&self, scene_index: u64) -> TerrainKind {
        match self {
            TerrainChoice::Hills => TerrainKind::Hills,
            TerrainChoice::Desert => TerrainKind::Desert,
            TerrainChoice::Mixed => TerrainKind::Mixed,
            TerrainChoice::Variety => TerrainKind::ALL[(scene_index % 3) as usize],
        }
    }
}

/// Cloud-density policy for a scene set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DensitySpec {
    /// Same density for every scene.
    Fixed(f64),
    /// Per-scene density from a named distribution.
    Uniform { uniform: [f64; 2] },
    /// Beta-distributed density; (0.5, 0.5) gives the U-shaped coverage
    /// profile typical of mostly-clear or mostly-overcast scenes.
    Beta { beta: [f64; 2] },
}

impl DensitySpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            DensitySpec::Fixed(d) => (0.0..=1.0).contains(d),
            DensitySpec::Uniform { uniform: [lo, hi] } => {
                (0.0..=1.0).contains(lo) && (0.0..=1.0).contains(hi) && lo <= hi
            }
            DensitySpec::Beta { beta: [a, b] } => *a > 0.0 && *b > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad cloud_density spec {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            DensitySpec::Fixed(d) => *d,
            DensitySpec::Uniform { uniform: [lo, hi] } => {
                if lo == hi {
                    *lo
                } else {
                    rng.random_range(*lo..*hi)
                }
            }
            DensitySpec::Beta { beta: [a, b] } => {
                Beta::new(*a, *b).expect("validated").sample(rng)
            }
        }
    }
}

/// Scene generator settings (JSON on disk).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenegenConfig {
    /// Square scene side in pixels.
    pub size: usize,
    pub cloud_density: DensitySpec,
    pub terrain: TerrainChoice,
    pub seed: u64,
    pub counts: SplitCounts,
    /// Minimum brightness gap between cloud and terrain in the
    /// cloud-sensitive bands.
    #[serde(default = "default_cloud_margin")]
    pub cloud_margin: f64,
}

fn default_cloud_margin() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl ScenegenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::invalid("scene size must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.cloud_margin) {
            return Err(Error::invalid(format!(
                "cloud_margin {} outside [0,1]",
                self.cloud_margin
            )));
        }
        self.cloud_density.validate()
    }
}

/// A generated scene plus its provenance.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub cube: DataCube,
    pub mask: CloudMask,
    pub terrain: TerrainKind,
    pub cloud_density: f64,
}

// Per-band mean reflectance profiles. Band order: B1..B8, B8A, B9..B12.
const HILLS_PROFILE: [f64; NUM_BANDS] = [
    0.045, 0.055, 0.085, 0.065, 0.13, 0.24, 0.30, 0.33, 0.34, 0.30, 0.025, 0.19, 0.11,
];
const DESERT_PROFILE: [f64; NUM_BANDS] = [
    0.13, 0.17, 0.23, 0.31, 0.34, 0.36, 0.37, 0.39, 0.40, 0.37, 0.035, 0.46, 0.41,
];
const CLOUD_PROFILE: [f64; NUM_BANDS] = [
    0.66, 0.69, 0.72, 0.74, 0.74, 0.73, 0.72, 0.70, 0.69, 0.58, 0.14, 0.36, 0.26,
];
/// The cloud-sensitive bands as 0-based offsets.
const CLOUD_BANDS_0: [usize; 3] = [0, 1, 7];

/// Multi-octave value noise in [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, base_period: usize) -> Vec<f64> {
    let octaves = 4;
    let mut out = vec![0.0f64; h * w];
    let mut amplitude = 1.0f64;
    let mut period = base_period.max(2);
    let mut total = 0.0f64;
    for _ in 0..octaves {
        let gh = h / period + 2;
        let gw = w / period + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(0.0..1.0)).collect();
        for y in 0..h {
            let fy = y as f64 / period as f64;
            let (y0, ty) = (fy as usize, fy.fract());
            for x in 0..w {
                let fx = x as f64 / period as f64;
                let (x0, tx) = (fx as usize, fx.fract());
                let v00 = lattice[y0 * gw + x0];
                let v01 = lattice[y0 * gw + x0 + 1];
                let v10 = lattice[(y0 + 1) * gw + x0];
                let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                // Smoothstep weights avoid lattice-aligned creases.
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let sy = ty * ty * (3.0 - 2.0 * ty);
                let v = v00 * (1.0 - sx) * (1.0 - sy)
                    + v01 * sx * (1.0 - sy)
                    + v10 * (1.0 - sx) * sy
                    + v11 * sx * sy;
                out[y * w + x] += amplitude * v;
            }
        }
        total += amplitude;
        amplitude *= 0.5;
        period = (period / 2).max(2);
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

struct CloudField {
    /// Per-pixel cloud opacity in [0, 1].
    alpha: Vec<f64>,
    coverage: f64,
}

/// Accumulate soft elliptical blobs until the alpha>0.5 footprint reaches
/// the target coverage (or the blob budget runs out, which only matters for
/// targets above ~0.99).
fn cloud_field(rng: &mut ChaCha8Rng, size: usize, density: f64) -> CloudField {
    let n = size * size;
    let mut alpha = vec![0.0f64; n];
    if density <= 0.0 {
        return CloudField {
            alpha,
            coverage: 0.0,
        };
    }
    let target = if density >= 1.0 { 0.97 } else { density };
    let mut covered = 0usize;
    let max_blobs = 600;
    for _ in 0..max_blobs {
        if covered as f64 / n as f64 >= target {
            break;
        }
        let cy = rng.random_range(0.0..size as f64);
        let cx = rng.random_range(0.0..size as f64);
        let ry = rng.random_range(0.10..0.28) * size as f64;
        let rx = rng.random_range(0.10..0.28) * size as f64;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sin_t, cos_t) = theta.sin_cos();
        let y_lo = ((cy - ry.max(rx) - 1.0).floor().max(0.0)) as usize;
        let y_hi = ((cy + ry.max(rx) + 1.0).ceil().min(size as f64)) as usize;
        let x_lo = ((cx - ry.max(rx) - 1.0).floor().max(0.0)) as usize;
        let x_hi = ((cx + ry.max(rx) + 1.0).ceil().min(size as f64)) as usize;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = (dx * cos_t + dy * sin_t) / rx;
                let v = (-dx * sin_t + dy * cos_t) / ry;
                let r = (u * u + v * v).sqrt();
                let a = (1.5 * (1.0 - r)).clamp(0.0, 1.0);
                if a > 0.0 {
                    let cell = &mut alpha[y * size + x];
                    let before = *cell > 0.5;
                    *cell = cell.max(a);
                    if !before && *cell > 0.5 {
                        covered += 1;
                    }
                }
            }
        }
    }
    CloudField {
        coverage: covered as f64 / n as f64,
        alpha,
    }
}

/// Generate one scene. Deterministic in `seed`; the config's own seed is not
/// consulted here (scene sets pass one derived seed per scene).
pub fn synth_scene(seed: u64, cfg: &ScenegenConfig) -> Result<(DataCube, CloudMask)> {
    let s = synth_scene_full(seed, cfg)?;
    Ok((s.cube, s.mask))
}

pub fn synth_scene_full(seed: u64, cfg: &ScenegenConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let size = cfg.size;

    let density = cfg
        .cloud_density
        .sample(&mut rng::stream(seed, Domain::Scene, 0));
    let terrain = match cfg.terrain {
        TerrainChoice::Variety => {
            let k = rng::stream(seed, Domain::Scene, 1).random_range(0..3usize);
            TerrainKind::ALL[k]
        }
        fixed => fixed.resolve(0),
    };

    let mut terrain_rng = rng::stream(seed, Domain::Scene, 2);
    let elevation = value_noise(&mut terrain_rng, size, size, size / 2);
    let blend = value_noise(&mut terrain_rng, size, size, size / 2);
    let texture = value_noise(&mut terrain_rng, size, size, size / 8);

    let mut cloud_rng = rng::stream(seed, Domain::Scene, 3);
    let clouds = cloud_field(&mut cloud_rng, size, density);
    let cloud_tex = value_noise(&mut cloud_rng, size, size, size / 4);

    let mut values = vec![0.0f32; size * size * NUM_BANDS];
    let mut mask_bits = vec![false; size * size];
    for p in 0..size * size {
        let e = elevation[p];
        let t = texture[p];
        let mix = match terrain {
            TerrainKind::Hills => 1.0,
            TerrainKind::Desert => 0.0,
            TerrainKind::Mixed => {
                let m = blend[p];
                // Sharpen the blend field into patches.
                (3.0 * (m - 0.5)).tanh() * 0.5 + 0.5
            }
        };
        let a = clouds.alpha[p];
        mask_bits[p] = a > 0.5;
        let shade = 0.75 + 0.5 * e;
        let grain = 0.9 + 0.2 * t;
        let cloud_shade = 0.85 + 0.3 * cloud_tex[p];
        for b in 0..NUM_BANDS {
            let ground =
                (mix * HILLS_PROFILE[b] + (1.0 - mix) * DESERT_PROFILE[b]) * shade * grain;
            let mut cloud = CLOUD_PROFILE[b] * cloud_shade;
            if CLOUD_BANDS_0.contains(&b) {
                cloud = cloud.max(ground + cfg.cloud_margin);
            }
            let v = (1.0 - a) * ground + a * cloud;
            values[p * NUM_BANDS + b] = v.clamp(0.0, 1.0) as f32;
        }
    }

    Ok(SynthScene {
        cube: DataCube::new(
            crate::grad::Tensor::new(vec![size, size, NUM_BANDS], values)?,
            DEFAULT_GROUND_RESOLUTION_M,
        )?,
        mask: CloudMask::new(size, size, mask_bits)?,
        terrain,
        cloud_density: density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize, density: f64) -> ScenegenConfig {
        ScenegenConfig {
            size,
            cloud_density: DensitySpec::Fixed(density),
            terrain: TerrainChoice::Variety,
            seed: 0,
            counts: SplitCounts {
                train: 1,
                val: 0,
                test: 0,
            },
            cloud_margin: 0.25,
        }
    }

    #[test]
    fn zero_density_means_empty_mask() {
        let (_, mask) = synth_scene(11, &cfg(48, 0.0)).unwrap();
        assert_eq!(mask.cloud_fraction(), 0.0);
    }

    #[test]
    fn full_density_covers_nearly_everything() {
        for seed in 0..100 {
            let (_, mask) = synth_scene(seed, &cfg(48, 1.0)).unwrap();
            assert!(
                mask.cloud_fraction() >= 0.95,
                "seed {seed}: fraction {}",
                mask.cloud_fraction()
            );
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_scene(42, &cfg(32, 0.5)).unwrap();
        let b = synth_scene(42, &cfg(32, 0.5)).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.bits(), b.1.bits());
        let c = synth_scene(43, &cfg(32, 0.5)).unwrap();
        assert_ne!(a.0.data(), c.0.data());
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(synth_scene(1, &cfg(0, 0.5)).is_err());
    }

    #[test]
    fn values_stay_in_unit_range() {
        for seed in [1, 7, 23] {
            let (cube, _) = synth_scene(seed, &cfg(40, 0.7)).unwrap();
            assert!(cube.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn coverage_tracks_density_in_expectation() {
        let mut last = 0.0f64;
        for density in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mean: f64 = (0..50)
                .map(|s| {
                    synth_scene(1000 + s, &cfg(40, density))
                        .unwrap()
                        .1
                        .cloud_fraction()
                })
                .sum::<f64>()
                / 50.0;
            assert!(
                mean + 1e-9 >= last,
                "coverage not monotone: {mean} after {last} at density {density}"
            );
            last = mean;
        }
    }

    #[test]
    fn clouds_outshine_terrain_in_cloud_bands() {
        let (cube, mask) = synth_scene(5, &cfg(48, 0.4)).unwrap();
        let mut cloud_mean = [0.0f64; 3];
        let mut clear_mean = [0.0f64; 3];
        let (mut nc, mut ncl) = (0usize, 0usize);
        for y in 0..48 {
            for x in 0..48 {
                for (i, b) in CLOUD_BANDS_0.iter().enumerate() {
                    let v = cube.get(y, x, *b) as f64;
                    if mask.is_cloud(y, x) {
                        cloud_mean[i] += v;
                    } else {
                        clear_mean[i] += v;
                    }
                }
                if mask.is_cloud(y, x) {
                    nc += 1;
                } else {
                    ncl += 1;
                }
            }
        }
        assert!(nc > 0 && ncl > 0);
        for i in 0..3 {
            cloud_mean[i] /= nc as f64;
            clear_mean[i] /= ncl as f64;
            assert!(
                cloud_mean[i] > clear_mean[i] + 0.15,
                "band {i}: cloud {} vs clear {}",
                cloud_mean[i],
                clear_mean[i]
            );
        }
    }
}
