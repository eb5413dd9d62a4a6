//! Multispectral data cubes, their file format, synthetic scene generation,
//! and dataset assembly.

use serde::{Deserialize, Serialize};

use crate::grad::Tensor;
use crate::spectra::NUM_BANDS;
use crate::{Error, Result};

mod dataset;
mod format;
mod materials;
mod scenegen;

pub use dataset::{
    assemble_bundle, build_attack_sets, gen_scene_set, AttackCube, AttackSets, DatasetBundle,
    LabeledCube, LabeledDataset, SceneRecord, Split,
};
pub use format::{cube_from_bytes, cube_to_bytes, read_cube, write_cube};
pub use materials::{gen_material_library, material_library_csv};
pub use scenegen::{
    synth_scene, synth_scene_full, DensitySpec, ScenegenConfig, SplitCounts, SynthScene,
    TerrainChoice, TerrainKind,
};

/// An H×W×13 reflectance cube with every value in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DataCube {
    data: Tensor,
    ground_resolution_m: f32,
}

/// Default ground resolution in meters per pixel.
pub const DEFAULT_GROUND_RESOLUTION_M: f32 = 20.0;

impl DataCube {
    pub fn new(data: Tensor, ground_resolution_m: f32) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[2] != NUM_BANDS {
            return Err(Error::shape(format!(
                "data cube must be [H, W, {NUM_BANDS}], got {shape:?}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("cube value {v} outside [0,1]")));
        }
        Ok(DataCube {
            data,
            ground_resolution_m,
        })
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(
            Tensor::new(vec![height, width, NUM_BANDS], values)?,
            DEFAULT_GROUND_RESOLUTION_M,
        )
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bands(&self) -> usize {
        NUM_BANDS
    }

    pub fn ground_resolution_m(&self) -> f32 {
        self.ground_resolution_m
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, band: usize) -> f32 {
        self.data.data()[(y * self.width() + x) * NUM_BANDS + band]
    }
}

/// A binary cloud mask aligned with a cube's pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl CloudMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask has {} bits for {height}x{width}",
                bits.len()
            )));
        }
        Ok(CloudMask {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_cloud(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Fraction of cloud pixels.
    pub fn cloud_fraction(&self) -> f64 {
        self.bits.iter().filter(|b| **b).count() as f64 / self.bits.len() as f64
    }
}

/// Binary scene label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Cloudy,
    NotCloudy,
}

/// Cloudy iff the cloud fraction strictly exceeds the threshold.
///
/// The threshold must lie in (0, 1); boundary fractions equal to the
/// threshold label as not cloudy.
pub fn label_by_threshold(mask: &CloudMask, threshold: f64) -> Label {
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "threshold {threshold} outside (0,1)"
    );
    if mask.cloud_fraction() > threshold {
        Label::Cloudy
    } else {
        Label::NotCloudy
    }
}

/// A sorted set of 1-based band indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BandSubset(Vec<usize>);

impl BandSubset {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("band subset cannot be empty".to_string()));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!(
                "band subset has duplicates: {indices:?}"
            )));
        }
        if indices[0] < 1 || *indices.last().unwrap() > NUM_BANDS {
            return Err(Error::invalid(format!(
                "band indices must lie in 1..={NUM_BANDS}: {indices:?}"
            )));
        }
        Ok(BandSubset(indices))
    }

    /// The cloud-sensitive bands {1, 2, 8} the detector reads by default.
    pub fn cloud_sensitive() -> Self {
        BandSubset(vec![1, 2, 8])
    }

    /// The visible bands {2, 3, 4} used for camouflage.
    pub fn visible() -> Self {
        BandSubset(vec![2, 3, 4])
    }

    pub fn all() -> Self {
        BandSubset((1..=NUM_BANDS).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 0-based indices for tensor slicing.
    pub fn zero_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i - 1).collect()
    }
}

impl TryFrom<Vec<usize>> for BandSubset {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        BandSubset::new(v)
    }
}

impl From<BandSubset> for Vec<usize> {
    fn from(b: BandSubset) -> Vec<usize> {
        b.0
    }
}

/// Extract the named bands: an `[H, W, |subset|]` tensor in sorted band order.
pub fn extract_bands(cube: &DataCube, subset: &BandSubset) -> Tensor {
    let (h, w) = (cube.height(), cube.width());
    let keep = subset.zero_based();
    let k = keep.len();
    let src = cube.data().data();
    Tensor::from_fn(vec![h, w, k], |i| {
        let (pos, j) = (i / k, i % k);
        src[pos * NUM_BANDS + keep[j]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_cube(h: usize, w: usize) -> DataCube {
        let values = (0..h * w * NUM_BANDS)
            .map(|i| {
                let b = i % NUM_BANDS;
                (b as f32) / (NUM_BANDS as f32)
            })
            .collect();
        DataCube::from_values(h, w, values).unwrap()
    }

    #[test]
    fn cube_rejects_out_of_range_values() {
        let mut values = vec![0.5f32; 2 * 2 * NUM_BANDS];
        values[5] = 1.5;
        assert!(DataCube::from_values(2, 2, values).is_err());
    }

    #[test]
    fn cube_rejects_wrong_band_count() {
        let t = Tensor::zeros(vec![2, 2, 4]);
        assert!(DataCube::new(t, 20.0).is_err());
    }

    #[test]
    fn mask_fraction() {
        let mask = CloudMask::new(2, 2, vec![true, false, true, false]).unwrap();
        assert_eq!(mask.cloud_fraction(), 0.5);
    }

    #[test]
    fn threshold_is_strict() {
        let bits = |n: usize| -> Vec<bool> {
            (0..100).map(|i| i < n).collect()
        };
        let m71 = CloudMask::new(10, 10, bits(71)).unwrap();
        let m70 = CloudMask::new(10, 10, bits(70)).unwrap();
        let m31 = CloudMask::new(10, 10, bits(31)).unwrap();
        assert_eq!(label_by_threshold(&m71, 0.70), Label::Cloudy);
        assert_eq!(label_by_threshold(&m70, 0.70), Label::NotCloudy);
        assert_eq!(label_by_threshold(&m31, 0.30), Label::Cloudy);
        assert_eq!(label_by_threshold(&m31, 0.70), Label::NotCloudy);
    }

    #[test]
    fn band_subset_validation() {
        assert!(BandSubset::new(vec![]).is_err());
        assert!(BandSubset::new(vec![0, 1]).is_err());
        assert!(BandSubset::new(vec![1, 14]).is_err());
        assert!(BandSubset::new(vec![3, 3]).is_err());
        assert_eq!(BandSubset::new(vec![8, 1, 2]).unwrap().indices(), &[1, 2, 8]);
    }

    #[test]
    fn extract_full_subset_is_identity() {
        let cube = gradient_cube(3, 4);
        let sub = extract_bands(&cube, &BandSubset::all());
        assert_eq!(&sub, cube.data());
    }

    #[test]
    fn extract_named_band() {
        // Band 8 all ones: channel 2 of the {1,2,8} subcube picks it up.
        let mut values = vec![0.25f32; 4 * 4 * NUM_BANDS];
        for p in 0..16 {
            values[p * NUM_BANDS + 7] = 1.0;
        }
        let cube = DataCube::from_values(4, 4, values).unwrap();
        let sub = extract_bands(&cube, &BandSubset::cloud_sensitive());
        assert_eq!(sub.shape(), &[4, 4, 3]);
        for p in 0..16 {
            assert_eq!(sub.data()[p * 3 + 2], 1.0);
            assert_eq!(sub.data()[p * 3 + 0], 0.25);
        }
    }

    #[test]
    fn extraction_composes() {
        let cube = gradient_cube(2, 2);
        let v = extract_bands(&cube, &BandSubset::visible());
        // First channel of the visible subcube is band 2 of the original.
        let direct = extract_bands(&cube, &BandSubset::new(vec![2]).unwrap());
        let composed: Vec<f32> = (0..4).map(|p| v.data()[p * 3]).collect();
        assert_eq!(composed, direct.data());
    }
}
