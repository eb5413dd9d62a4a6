//! Embedding transforms: placement, rotation, and spectral-intensity
//! augmentations sampled per optimization step to mimic capture variation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grad::Tensor;
use crate::spectra::NUM_BANDS;
use crate::{Error, Result};

/// Augmentation magnitudes (all config-exposed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Intensity scale drawn from `[1 - scale_delta, 1 + scale_delta]`.
    pub scale_delta: f64,
    /// Per-element Gaussian noise sigma.
    pub noise_sigma: f64,
    /// Noise clipped to `[-noise_clip, +noise_clip]`.
    pub noise_clip: f64,
    /// Probability that a band's perturbation is dropped back to the scene.
    pub corruption_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_delta: 0.1,
            noise_sigma: 0.02,
            noise_clip: 0.05,
            corruption_prob: 0.05,
        }
    }
}

/// Identity augmentations (exact placement testing).
impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            scale_delta: 0.0,
            noise_sigma: 0.0,
            noise_clip: 0.0,
            corruption_prob: 0.0,
        }
    }
}

/// One sampled embedding: quarter-turn rotation, placement of the rotated
/// footprint, intensity scale, additive noise, and per-band corruption.
#[derive(Debug, Clone)]
pub struct Transform {
    pub rotation_quarters: u8,
    pub row: usize,
    pub col: usize,
    pub scale: f32,
    /// Noise over the rotated footprint, `[fh, fw, 13]`.
    pub noise: Tensor,
    /// Bands whose perturbation reverts to the host scene.
    pub corrupted_bands: [bool; NUM_BANDS],
}

impl Transform {
    /// Identity transform at a fixed position.
    pub fn identity(patch_rows: usize, patch_cols: usize, row: usize, col: usize) -> Self {
        Self::with_rotation(patch_rows, patch_cols, 0, row, col)
    }

    /// No-augmentation transform with a quarter-turn rotation; the zero
    /// noise tensor is sized to the rotated footprint.
    pub fn with_rotation(
        patch_rows: usize,
        patch_cols: usize,
        rotation_quarters: u8,
        row: usize,
        col: usize,
    ) -> Self {
        let (fh, fw) = if rotation_quarters % 2 == 0 {
            (patch_rows, patch_cols)
        } else {
            (patch_cols, patch_rows)
        };
        Transform {
            rotation_quarters,
            row,
            col,
            scale: 1.0,
            noise: Tensor::zeros(vec![fh, fw, NUM_BANDS]),
            corrupted_bands: [false; NUM_BANDS],
        }
    }

    /// Footprint dims of a `rows x cols` patch under this rotation.
    pub fn footprint(&self, rows: usize, cols: usize) -> (usize, usize) {
        if self.rotation_quarters % 2 == 0 {
            (rows, cols)
        } else {
            (cols, rows)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proximity {
    /// Anchors drawn uniformly over the whole host.
    Low,
    /// Anchors confined to a random box of side 2.5x the patch side.
    High,
}

fn rects_overlap(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    let (ar, ac, ah, aw) = a;
    let (br, bc, bh, bw) = b;
    ar < br + bh && br < ar + ah && ac < bc + bw && bc < ac + aw
}

/// Sample one transform per patch in `layout`, guaranteeing in-bounds
/// placement and pairwise non-overlap. High proximity first draws a bounding
/// box of side `2.5 * max patch side` and keeps every anchor inside it.
/// Fails when the layout cannot be placed within the retry budget.
pub fn sample_transforms(
    rng: &mut ChaCha8Rng,
    aug: &AugmentConfig,
    host: (usize, usize),
    layout: &[(usize, usize)],
    proximity: Proximity,
) -> Result<Vec<Transform>> {
    const LAYOUT_RESTARTS: usize = 200;
    const PLACE_TRIES: usize = 60;
    let (hh, hw) = host;

    // Rotations + footprints first: placement feasibility depends on them.
    'layouts: for _ in 0..LAYOUT_RESTARTS {
        let rotations: Vec<u8> = layout.iter().map(|_| rng.random_range(0..4u8)).collect();
        let feet: Vec<(usize, usize)> = layout
            .iter()
            .zip(&rotations)
            .map(|(&(m, n), r)| if r % 2 == 0 { (m, n) } else { (n, m) })
            .collect();
        for &(fh, fw) in &feet {
            if fh > hh || fw > hw {
                return Err(Error::invalid(format!(
                    "patch footprint {fh}x{fw} larger than host {hh}x{hw}"
                )));
            }
        }

        // Anchor region, possibly restricted by the proximity box.
        let max_side = feet.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(1);
        let (row_lo, row_hi_of, col_lo, col_hi_of): (usize, _, usize, _) = match proximity {
            Proximity::Low => (
                0usize,
                Box::new(move |fh: usize| hh - fh) as Box<dyn Fn(usize) -> usize>,
                0usize,
                Box::new(move |fw: usize| hw - fw) as Box<dyn Fn(usize) -> usize>,
            ),
            Proximity::High => {
                let side = ((2.5 * max_side as f64).ceil() as usize).min(hh).min(hw);
                let br = rng.random_range(0..=hh - side);
                let bc = rng.random_range(0..=hw - side);
                let (br2, bc2, side2) = (br, bc, side);
                (
                    br,
                    Box::new(move |fh: usize| (br2 + side2 - fh).min(hh - fh))
                        as Box<dyn Fn(usize) -> usize>,
                    bc,
                    Box::new(move |fw: usize| (bc2 + side2 - fw).min(hw - fw))
                        as Box<dyn Fn(usize) -> usize>,
                )
            }
        };

        let mut placed: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(layout.len());
        for &(fh, fw) in &feet {
            let mut ok = false;
            for _ in 0..PLACE_TRIES {
                let row_hi = row_hi_of(fh);
                let col_hi = col_hi_of(fw);
                if row_hi < row_lo || col_hi < col_lo {
                    break;
                }
                let r = rng.random_range(row_lo..=row_hi);
                let c = rng.random_range(col_lo..=col_hi);
                let rect = (r, c, fh, fw);
                if placed.iter().all(|p| !rects_overlap(*p, rect)) {
                    placed.push(rect);
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'layouts;
            }
        }

        let noise_dist = Normal::new(0.0f64, aug.noise_sigma.max(f64::MIN_POSITIVE))
            .expect("valid sigma");
        let transforms = placed
            .iter()
            .zip(&rotations)
            .map(|(&(row, col, fh, fw), &rotation_quarters)| {
                let scale = if aug.scale_delta == 0.0 {
                    1.0
                } else {
                    rng.random_range(1.0 - aug.scale_delta..=1.0 + aug.scale_delta) as f32
                };
                let noise = if aug.noise_sigma == 0.0 {
                    Tensor::zeros(vec![fh, fw, NUM_BANDS])
                } else {
                    let clip = aug.noise_clip;
                    Tensor::from_fn(vec![fh, fw, NUM_BANDS], |_| {
                        noise_dist.sample(rng).clamp(-clip, clip) as f32
                    })
                };
                let mut corrupted_bands = [false; NUM_BANDS];
                if aug.corruption_prob > 0.0 {
                    for band in corrupted_bands.iter_mut() {
                        *band = rng.random_bool(aug.corruption_prob);
                    }
                }
                Transform {
                    rotation_quarters,
                    row,
                    col,
                    scale,
                    noise,
                    corrupted_bands,
                }
            })
            .collect();
        return Ok(transforms);
    }
    Err(Error::RetryBudget(format!(
        "could not place {} patches without overlap in a {hh}x{hw} host",
        layout.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Domain};

    #[test]
    fn single_patch_positions_cover_the_valid_range_uniformly() {
        let mut rng = rng::stream(1, Domain::Transform, 0);
        let aug = AugmentConfig::default();
        let mut min_r = usize::MAX;
        let mut max_r = 0usize;
        let mut min_c = usize::MAX;
        let mut max_c = 0usize;
        for _ in 0..4000 {
            let t = &sample_transforms(&mut rng, &aug, (128, 128), &[(25, 25)], Proximity::Low)
                .unwrap()[0];
            assert!(t.row <= 103 && t.col <= 103);
            min_r = min_r.min(t.row);
            max_r = max_r.max(t.row);
            min_c = min_c.min(t.col);
            max_c = max_c.max(t.col);
        }
        assert_eq!((min_r, max_r), (0, 103));
        assert_eq!((min_c, max_c), (0, 103));
    }

    #[test]
    fn high_proximity_bounds_pairwise_anchor_distance() {
        let mut rng = rng::stream(2, Domain::Transform, 0);
        let aug = AugmentConfig::default();
        let side = 12.0f64;
        let bound = (2.5 * side * 2.0f64.sqrt()).ceil();
        for _ in 0..1000 {
            let ts = sample_transforms(
                &mut rng,
                &aug,
                (128, 128),
                &[(12, 12); 4],
                Proximity::High,
            )
            .unwrap();
            for a in 0..4 {
                for b in a + 1..4 {
                    let dr = ts[a].row as f64 - ts[b].row as f64;
                    let dc = ts[a].col as f64 - ts[b].col as f64;
                    let d = (dr * dr + dc * dc).sqrt();
                    assert!(d <= bound, "anchor distance {d} exceeds {bound}");
                }
            }
        }
    }

    #[test]
    fn patches_never_overlap() {
        let mut rng = rng::stream(3, Domain::Transform, 0);
        let aug = AugmentConfig::default();
        for i in 0..10_000 {
            let prox = if i % 2 == 0 {
                Proximity::Low
            } else {
                Proximity::High
            };
            let ts =
                sample_transforms(&mut rng, &aug, (96, 96), &[(12, 12), (12, 18), (18, 12)], prox)
                    .unwrap();
            for a in 0..ts.len() {
                for b in a + 1..ts.len() {
                    let fa = ts[a].footprint(
                        [12, 12, 18][a],
                        [12, 18, 12][a],
                    );
                    let fb = ts[b].footprint(
                        [12, 12, 18][b],
                        [12, 18, 12][b],
                    );
                    assert!(
                        !rects_overlap(
                            (ts[a].row, ts[a].col, fa.0, fa.1),
                            (ts[b].row, ts[b].col, fb.0, fb.1)
                        ),
                        "overlap at sample {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_layout_errors_out() {
        let mut rng = rng::stream(4, Domain::Transform, 0);
        let aug = AugmentConfig::default();
        // Nine 30x30 patches cannot fit in a 64x64 host without overlap.
        let err = sample_transforms(
            &mut rng,
            &aug,
            (64, 64),
            &[(30, 30); 9],
            Proximity::Low,
        )
        .unwrap_err();
        assert!(err.to_string().contains("overlap"));
    }

    #[test]
    fn oversized_patch_is_rejected_outright() {
        let mut rng = rng::stream(5, Domain::Transform, 0);
        let err = sample_transforms(
            &mut rng,
            &AugmentConfig::default(),
            (32, 32),
            &[(40, 8)],
            Proximity::Low,
        )
        .unwrap_err();
        assert!(err.to_string().contains("larger than host"));
    }

    #[test]
    fn sampling_is_deterministic_in_rng_state() {
        let aug = AugmentConfig::default();
        let mut a = rng::stream(6, Domain::Transform, 9);
        let mut b = rng::stream(6, Domain::Transform, 9);
        let ta = sample_transforms(&mut a, &aug, (64, 64), &[(10, 10)], Proximity::Low).unwrap();
        let tb = sample_transforms(&mut b, &aug, (64, 64), &[(10, 10)], Proximity::Low).unwrap();
        assert_eq!(ta[0].row, tb[0].row);
        assert_eq!(ta[0].scale, tb[0].scale);
        assert_eq!(ta[0].noise, tb[0].noise);
    }
}
