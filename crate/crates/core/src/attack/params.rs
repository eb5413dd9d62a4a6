//! Adversarial cube parametrizations.
//!
//! The hull parametrization keeps every rendered pixel inside the convex
//! hull of the spectral index: a per-pixel logit vector is softmaxed into
//! mixing weights over the Q material columns, so the pixel is `C·w` with
//! `w >= 0, sum w = 1` by construction. The free parametrization (used by
//! the no-hull ablation) drives each of the 13 channels through a sigmoid
//! instead, constrained only to the unit box.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grad::{Graph, NodeId, Tensor};
use crate::rng::{self, Domain};
use crate::spectra::{SpectralIndex, NUM_BANDS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    Hull,
    Free,
}

/// Hull-constrained cube parameters: an `[M, N, Q]` logit tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeParams {
    logits: Tensor,
}

/// Small-scale Gaussian logits (sigma 0.01), giving near-uniform mixtures.
pub fn init_params(m: usize, n: usize, q: usize, seed: u64) -> Result<CubeParams> {
    if m == 0 || n == 0 || q == 0 {
        return Err(Error::invalid(format!("bad cube dims {m}x{n}x{q}")));
    }
    let mut r = rng::stream(seed, Domain::Init, 0);
    let normal = Normal::new(0.0f32, 0.01).expect("valid sigma");
    Ok(CubeParams {
        logits: Tensor::from_fn(vec![m, n, q], |_| normal.sample(&mut r)),
    })
}

impl CubeParams {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 3 {
            return Err(Error::shape(format!(
                "cube params must be [M,N,Q], got {:?}",
                logits.shape()
            )));
        }
        if !logits.all_finite() {
            return Err(Error::invalid("cube logits must be finite".to_string()));
        }
        Ok(CubeParams { logits })
    }

    pub fn zeros(m: usize, n: usize, q: usize) -> Self {
        CubeParams {
            logits: Tensor::zeros(vec![m, n, q]),
        }
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn rows(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn material_count(&self) -> usize {
        self.logits.shape()[2]
    }

    /// Mixing weights of one pixel in f64 (softmax with max subtraction).
    pub fn weights_f64(&self, i: usize, j: usize) -> Vec<f64> {
        let q = self.material_count();
        let base = (i * self.cols() + j) * q;
        let row = &self.logits.data()[base..base + q];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// One rendered pixel in full precision: `C · softmax(a_ij)`.
    pub fn realize_pixel(&self, index: &SpectralIndex, i: usize, j: usize) -> [f64; NUM_BANDS] {
        let w = self.weights_f64(i, j);
        let mut out = [0.0f64; NUM_BANDS];
        for (b, o) in out.iter_mut().enumerate() {
            for (q, wq) in w.iter().enumerate() {
                *o += index.entry(b, q) * wq;
            }
        }
        out
    }
}

/// Box-constrained parameters for the no-hull ablation: `[M, N, 13]` logits
/// rendered through a per-channel sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeParams {
    logits: Tensor,
}

impl FreeParams {
    pub fn init(m: usize, n: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::invalid(format!("bad cube dims {m}x{n}")));
        }
        let mut r = rng::stream(seed, Domain::Init, 1);
        let normal = Normal::new(0.0f32, 0.01).expect("valid sigma");
        Ok(FreeParams {
            logits: Tensor::from_fn(vec![m, n, NUM_BANDS], |_| normal.sample(&mut r)),
        })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn rows(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.logits.shape()[1]
    }
}

/// One optimizable patch under either parametrization.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchParams {
    Hull(CubeParams),
    Free(FreeParams),
}

impl PatchParams {
    pub fn init(
        parametrization: Parametrization,
        m: usize,
        n: usize,
        q: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(match parametrization {
            Parametrization::Hull => PatchParams::Hull(init_params(m, n, q, seed)?),
            Parametrization::Free => PatchParams::Free(FreeParams::init(m, n, seed)?),
        })
    }

    pub fn rows(&self) -> usize {
        match self {
            PatchParams::Hull(p) => p.rows(),
            PatchParams::Free(p) => p.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            PatchParams::Hull(p) => p.cols(),
            PatchParams::Free(p) => p.cols(),
        }
    }

    pub fn logits(&self) -> &Tensor {
        match self {
            PatchParams::Hull(p) => p.logits(),
            PatchParams::Free(p) => p.logits(),
        }
    }

    pub fn with_logits(&self, logits: Tensor) -> Result<Self> {
        Ok(match self {
            PatchParams::Hull(_) => PatchParams::Hull(CubeParams::new(logits)?),
            PatchParams::Free(_) => PatchParams::Free(FreeParams { logits }),
        })
    }

    /// Graph nodes from a logits leaf to the rendered `[M, N, 13]` patch.
    pub fn realize_graph(
        &self,
        g: &mut Graph,
        logits: NodeId,
        index: &SpectralIndex,
    ) -> Result<NodeId> {
        match self {
            PatchParams::Hull(_) => {
                let weights = g.softmax_last(logits)?;
                let cols = g.constant(index.to_tensor());
                g.project_cols(cols, weights)
            }
            PatchParams::Free(_) => g.sigmoid(logits),
        }
    }

    /// Eagerly rendered patch tensor.
    pub fn realize(&self, index: &SpectralIndex) -> Result<Tensor> {
        let mut g = Graph::new();
        let leaf = g.leaf("logits", self.logits().shape().to_vec())?;
        let patch = self.realize_graph(&mut g, leaf, index)?;
        g.output("patch", patch)?;
        let mut b = crate::grad::Bindings::new();
        b.insert("logits", self.logits());
        Ok(g.evaluate(&b)?.remove("patch").expect("patch output"))
    }
}

/// Eagerly rendered hull patch (`realize_cube` in f32; see
/// [`CubeParams::realize_pixel`] for the f64 per-pixel path).
pub fn realize_cube(params: &CubeParams, index: &SpectralIndex) -> Result<Tensor> {
    if params.material_count() != index.material_count() {
        return Err(Error::shape(format!(
            "params expect {} materials, index has {}",
            params.material_count(),
            index.material_count()
        )));
    }
    PatchParams::Hull(params.clone()).realize(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubes::gen_material_library;
    use crate::spectra::{build_spectral_index, solar_reference, BandTable};

    fn small_index(q: usize) -> SpectralIndex {
        build_spectral_index(
            &gen_material_library(19, q),
            &solar_reference(),
            &BandTable::sentinel2a(),
        )
        .unwrap()
    }

    #[test]
    fn zero_logits_give_uniform_weights() {
        let p = CubeParams::zeros(2, 3, 5);
        for i in 0..2 {
            for j in 0..3 {
                for w in p.weights_f64(i, j) {
                    assert!((w - 0.2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_material_hull_renders_that_column() {
        let index = small_index(1);
        let p = CubeParams::zeros(2, 2, 1);
        let col = index.column(0);
        for i in 0..2 {
            for j in 0..2 {
                let px = p.realize_pixel(&index, i, j);
                for b in 0..NUM_BANDS {
                    assert_eq!(px[b], col[b]);
                }
            }
        }
    }

    #[test]
    fn dominant_logit_saturates_to_its_column() {
        let index = small_index(6);
        let mut logits = Tensor::zeros(vec![1, 1, 6]);
        logits.data_mut()[3] = 30.0;
        let p = CubeParams::new(logits).unwrap();
        let px = p.realize_pixel(&index, 0, 0);
        let col = index.column(3);
        for b in 0..NUM_BANDS {
            assert!(
                (px[b] - col[b]).abs() < 1e-9,
                "band {b}: {} vs {}",
                px[b],
                col[b]
            );
        }
    }

    #[test]
    fn uniform_mixture_of_opposite_columns_is_midpoint() {
        let index = SpectralIndex::new(
            vec!["black".into(), "white".into()],
            (0..NUM_BANDS)
                .flat_map(|_| [0.0f64, 1.0])
                .collect(),
        )
        .unwrap();
        let p = CubeParams::zeros(1, 1, 2);
        let px = p.realize_pixel(&index, 0, 0);
        for b in 0..NUM_BANDS {
            assert!((px[b] - 0.5).abs() < 1e-12);
        }
        let rendered = realize_cube(&p, &index).unwrap();
        for v in rendered.iter() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn init_is_deterministic_and_near_uniform() {
        let a = init_params(4, 4, 10, 77).unwrap();
        let b = init_params(4, 4, 10, 77).unwrap();
        assert_eq!(a, b);
        let c = init_params(4, 4, 10, 78).unwrap();
        assert_ne!(a, c);
        for w in a.weights_f64(2, 2) {
            assert!((w - 0.1).abs() < 0.02, "weight {w} far from uniform");
        }
    }

    #[test]
    fn rendered_pixels_stay_in_unit_range() {
        let index = small_index(12);
        let p = init_params(3, 3, 12, 5).unwrap();
        let rendered = realize_cube(&p, &index).unwrap();
        assert!(rendered.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
