//! Synthetic exterior-paint library generator.
//!
//! Produces smooth reflectance spectra on a 350–2500 nm grid in three rough
//! families — near-white, near-black, and pigmented (Gaussian bumps, an
//! optional NIR step, and a gentle SWIR roll-off) — so the resulting
//! spectral index has bright, dark, and colored corners to mix between.
//! The committed `data/materials_80.csv` fixture is exactly the output of
//! `gen_material_library(2024, 80)`.

use rand::Rng;

use crate::rng::{self, Domain};
use crate::spectra::{Material, Spectrum};

const GRID_START_NM: f64 = 350.0;
const GRID_END_NM: f64 = 2500.0;
const GRID_STEP_NM: f64 = 10.0;

fn wavelength_grid() -> Vec<f64> {
    let n = ((GRID_END_NM - GRID_START_NM) / GRID_STEP_NM) as usize + 1;
    (0..n).map(|i| GRID_START_NM + i as f64 * GRID_STEP_NM).collect()
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Generate `count` paint spectra, deterministic in `seed`.
pub fn gen_material_library(seed: u64, count: usize) -> Vec<Material> {
    let grid = wavelength_grid();
    (0..count)
        .map(|q| {
            let mut r = rng::stream(seed, Domain::Material, q as u64);
            let family: f64 = r.random_range(0.0..1.0);
            let values: Vec<f64> = if family < 0.15 {
                // Near-white: high flat level with a slight downward slope.
                let base = r.random_range(0.78..0.93);
                let slope = r.random_range(0.02..0.12);
                grid.iter()
                    .map(|&nm| {
                        let t = (nm - GRID_START_NM) / (GRID_END_NM - GRID_START_NM);
                        base - slope * t
                    })
                    .collect()
            } else if family < 0.30 {
                // Near-black: low flat level with one faint bump.
                let base = r.random_range(0.03..0.10);
                let center = r.random_range(500.0..1500.0);
                let width = r.random_range(100.0..400.0);
                let amp = r.random_range(0.0..0.05);
                grid.iter()
                    .map(|&nm| {
                        let d = (nm - center) / width;
                        base + amp * (-0.5 * d * d).exp()
                    })
                    .collect()
            } else {
                // Pigmented: bumps + optional NIR step + SWIR roll-off.
                let base = r.random_range(0.08..0.32);
                let n_bumps = r.random_range(2..=4);
                let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
                    .map(|_| {
                        (
                            r.random_range(380.0..1300.0),
                            r.random_range(30.0..180.0),
                            r.random_range(-0.25..0.45),
                        )
                    })
                    .collect();
                let nir_step = if r.random_bool(0.5) {
                    Some((r.random_range(680.0..820.0), r.random_range(0.05..0.35)))
                } else {
                    None
                };
                let swir_drop = r.random_range(0.0..0.5);
                grid.iter()
                    .map(|&nm| {
                        let mut v = base;
                        for &(c, w, a) in &bumps {
                            let d = (nm - c) / w;
                            v += a * (-0.5 * d * d).exp();
                        }
                        if let Some((edge, step)) = nir_step {
                            v += step * smoothstep((nm - edge) / 80.0);
                        }
                        v *= 1.0 - swir_drop * smoothstep((nm - 1300.0) / 1200.0);
                        v
                    })
                    .collect()
            };
            let values = values.iter().map(|v| v.clamp(0.01, 0.97)).collect();
            Material {
                name: format!("paint_{q:02}"),
                spectrum: Spectrum::reflectance(grid.clone(), values)
                    .expect("generated spectrum satisfies invariants"),
            }
        })
        .collect()
}

/// Serialize a library in the loader's CSV format
/// (`wavelength_nm,<names...>`; one sample row per grid point).
pub fn material_library_csv(materials: &[Material]) -> String {
    let grid = materials[0].spectrum.wavelengths();
    let mut out = String::from("wavelength_nm");
    for m in materials {
        out.push(',');
        out.push_str(&m.name);
    }
    out.push('\n');
    for (i, nm) in grid.iter().enumerate() {
        out.push_str(&format!("{nm}"));
        for m in materials {
            out.push_str(&format!(",{:.6}", m.spectrum.values()[i]));
        }
        out.push('\n');
    }
    out
}
