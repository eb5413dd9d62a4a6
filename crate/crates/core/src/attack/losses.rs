//! The three attack loss terms and their weighted total.
//!
//! Bias pushes the detector's cloud confidence up on embedded scenes,
//! non-printability pulls rendered pixels toward actual material columns,
//! and cloaking pulls the visible bands toward a random window of the
//! region of attack. The optimizer composes the same terms in-graph; these
//! scalar forms are the reporting/oracle path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cubes::{extract_bands, BandSubset, DataCube};
use crate::detector::DetectorModel;
use crate::grad::Tensor;
use crate::spectra::{SpectralIndex, NUM_BANDS};
use crate::{Error, Result};

/// Per-step loss record. `total` always equals `psi + alpha*phi +
/// beta*omega` recomputed in f64.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub psi: f64,
    pub phi: f64,
    pub omega: f64,
    pub total: f64,
}

/// Weighted total of the three terms.
pub fn loss_total(psi: f64, phi: f64, omega: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::invalid(format!(
            "loss weights must be non-negative, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(LossBreakdown {
        psi,
        phi,
        omega,
        total: psi + alpha * phi + beta * omega,
    })
}

/// Bias term: sum over the batch of `-log f(cube^c)`.
pub fn loss_bias(detector: &DetectorModel, embedded: &[DataCube]) -> Result<f64> {
    let mut total = 0.0f64;
    for cube in embedded {
        let sub = extract_bands(cube, &detector.arch().input_bands);
        let conf = detector.forward(&sub)?;
        total += -conf.ln();
    }
    Ok(total)
}

/// Non-printability score: mean over pixels of the L2 distance to the
/// nearest spectral-index column. Zero iff every pixel sits on a column.
pub fn loss_nps(patch: &Tensor, index: &SpectralIndex) -> Result<f64> {
    let shape = patch.shape();
    if shape.len() != 3 || shape[2] != NUM_BANDS {
        return Err(Error::shape(format!(
            "nps expects an [M,N,{NUM_BANDS}] patch, got {shape:?}"
        )));
    }
    let q = index.material_count();
    let pixels = shape[0] * shape[1];
    // Columns at the patch's own f32 precision, so a pixel that renders
    // exactly onto a material scores exactly zero.
    let cols = index.to_tensor();
    let mut acc = 0.0f64;
    for p in 0..pixels {
        let px = &patch.data()[p * NUM_BANDS..(p + 1) * NUM_BANDS];
        let mut best = f64::INFINITY;
        for qi in 0..q {
            let mut d2 = 0.0f64;
            for (b, &v) in px.iter().enumerate() {
                let d = v as f64 - cols.data()[b * q + qi] as f64;
                d2 += d * d;
            }
            best = best.min(d2);
        }
        acc += best.sqrt();
    }
    Ok(acc / pixels as f64)
}

/// Cloaking term at a fixed crop: L2 distance between the patch's visible
/// bands and the same-size window of the region of attack.
pub fn loss_cloak_at(patch: &Tensor, roa: &DataCube, row: usize, col: usize) -> Result<f64> {
    let (m, n) = (patch.shape()[0], patch.shape()[1]);
    if row + m > roa.height() || col + n > roa.width() {
        return Err(Error::invalid(format!(
            "crop {m}x{n} at ({row},{col}) outside the {}x{} region of attack",
            roa.height(),
            roa.width()
        )));
    }
    let visible = BandSubset::visible().zero_based();
    let mut acc = 0.0f64;
    for y in 0..m {
        for x in 0..n {
            for &b in &visible {
                let pv = patch.data()[(y * n + x) * NUM_BANDS + b] as f64;
                let rv = roa.get(row + y, col + x, b) as f64;
                acc += (pv - rv) * (pv - rv);
            }
        }
    }
    Ok(acc.sqrt())
}

/// Pick a uniform crop of the region of attack for an `m x n` patch.
pub fn sample_crop(
    rng: &mut ChaCha8Rng,
    roa: &DataCube,
    m: usize,
    n: usize,
) -> Result<(usize, usize)> {
    if m > roa.height() || n > roa.width() {
        return Err(Error::invalid(format!(
            "region of attack {}x{} smaller than patch {m}x{n}",
            roa.height(),
            roa.width()
        )));
    }
    let row = rng.random_range(0..=roa.height() - m);
    let col = rng.random_range(0..=roa.width() - n);
    Ok((row, col))
}

/// Cloaking term with a freshly sampled crop.
pub fn loss_cloak(patch: &Tensor, roa: &DataCube, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (row, col) = sample_crop(rng, roa, patch.shape()[0], patch.shape()[1])?;
    loss_cloak_at(patch, roa, row, col)
}

/// The visible-band window of the region of attack as a `[m, n, 3]` tensor
/// (the in-graph cloak target).
pub(crate) fn roa_visible_window(roa: &DataCube, row: usize, col: usize, m: usize, n: usize) -> Tensor {
    let visible = BandSubset::visible().zero_based();
    Tensor::from_fn(vec![m, n, visible.len()], |i| {
        let k = visible.len();
        let (pos, vi) = (i / k, i % k);
        let (y, x) = (pos / n, pos % n);
        roa.get(row + y, col + x, visible[vi])
    })
}
