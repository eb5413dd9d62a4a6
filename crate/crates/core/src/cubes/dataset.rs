//! Scene sets, threshold labeling into train/val/test bundles, and
//! detector-filtered attack sets.

use serde::{Deserialize, Serialize};

use crate::cubes::scenegen::{synth_scene_full, ScenegenConfig, SplitCounts, TerrainKind};
use crate::cubes::{label_by_threshold, DataCube, Label};
use crate::rng;
use crate::{Error, Result};

/// One generated scene with its provenance (the mask itself is reduced to
/// its cloud fraction).
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub cube: DataCube,
    pub cloud_fraction: f64,
    pub terrain: TerrainKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct LabeledCube {
    pub cube: DataCube,
    pub label: Label,
    pub cloud_fraction: f64,
    pub terrain: TerrainKind,
    pub seed: u64,
}

/// Scenes labeled under one cloud-fraction threshold, for one split.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub items: Vec<LabeledCube>,
    pub threshold: f64,
    pub split: Split,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.items.iter().filter(|i| i.label == label).count()
    }

    pub fn has_both_classes(&self) -> bool {
        self.count_label(Label::Cloudy) > 0 && self.count_label(Label::NotCloudy) > 0
    }
}

/// Train/val/test datasets sharing one threshold.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl DatasetBundle {
    pub fn threshold(&self) -> f64 {
        self.train.threshold
    }
}

/// Generate `counts.total()` scenes with per-index derived seeds and
/// round-robin terrain when the config asks for variety.
pub fn gen_scene_set(cfg: &ScenegenConfig) -> Result<Vec<SceneRecord>> {
    cfg.validate()?;
    let total = cfg.counts.total();
    if total == 0 {
        return Err(Error::invalid("scene set counts sum to zero".to_string()));
    }
    (0..total as u64)
        .map(|i| {
            let mut scene_cfg = cfg.clone();
            scene_cfg.terrain = match cfg.terrain.resolve(i) {
                TerrainKind::Hills => super::TerrainChoice::Hills,
                TerrainKind::Desert => super::TerrainChoice::Desert,
                TerrainKind::Mixed => super::TerrainChoice::Mixed,
            };
            let seed = rng::derive(cfg.seed, i);
            let scene = synth_scene_full(seed, &scene_cfg)?;
            Ok(SceneRecord {
                cloud_fraction: scene.mask.cloud_fraction(),
                cube: scene.cube,
                terrain: scene.terrain,
                seed,
            })
        })
        .collect()
}

/// Label scenes under `threshold` and split them into train/val/test in
/// generation order.
pub fn assemble_bundle(
    scenes: &[SceneRecord],
    threshold: f64,
    counts: &SplitCounts,
) -> Result<DatasetBundle> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0,1)")));
    }
    if scenes.len() < counts.total() {
        return Err(Error::invalid(format!(
            "need {} scenes for splits, have {}",
            counts.total(),
            scenes.len()
        )));
    }
    let labeled = |range: std::ops::Range<usize>, split: Split| -> LabeledDataset {
        LabeledDataset {
            items: scenes[range]
                .iter()
                .map(|s| LabeledCube {
                    cube: s.cube.clone(),
                    label: if s.cloud_fraction > threshold {
                        Label::Cloudy
                    } else {
                        Label::NotCloudy
                    },
                    cloud_fraction: s.cloud_fraction,
                    terrain: s.terrain,
                    seed: s.seed,
                })
                .collect(),
            threshold,
            split,
        }
    };
    let t = counts.train;
    let v = counts.train + counts.val;
    let e = counts.total();
    Ok(DatasetBundle {
        train: labeled(0..t, Split::Train),
        val: labeled(t..v, Split::Val),
        test: labeled(v..e, Split::Test),
    })
}

/// A scene accepted into an attack set, with the detector's clean-scene
/// confidence at generation time.
#[derive(Debug, Clone)]
pub struct AttackCube {
    pub cube: DataCube,
    pub terrain: TerrainKind,
    pub seed: u64,
    pub baseline_confidence: f64,
}

/// Detector-screened non-cloudy scenes: the attack's training cubes, held-out
/// test cubes, and the regions of attack drawn from the training side.
#[derive(Debug, Clone)]
pub struct AttackSets {
    pub train: Vec<AttackCube>,
    pub test: Vec<AttackCube>,
}

impl AttackSets {
    /// The region of attack: the first training cube of the requested kind.
    pub fn roa(&self, kind: TerrainKind) -> Result<&AttackCube> {
        self.train
            .iter()
            .find(|c| c.terrain == kind)
            .ok_or_else(|| {
                Error::invalid(format!("no {} cube available as ROA", kind.name()))
            })
    }

    pub fn train_cubes(&self) -> Vec<&DataCube> {
        self.train.iter().map(|c| &c.cube).collect()
    }

    pub fn test_cubes(&self) -> Vec<&DataCube> {
        self.test.iter().map(|c| &c.cube).collect()
    }
}

/// Generate attack sets: scenes that are truly non-cloudy at the 0.70
/// threshold *and* scored non-cloudy (confidence <= 0.5) by the detector.
/// Training and test sets take disjoint derived-seed ranges. Fails after
/// 10x the requested count of attempts.
pub fn build_attack_sets(
    cfg: &ScenegenConfig,
    mut score: impl FnMut(&DataCube) -> Result<f64>,
    train_size: usize,
    test_size: usize,
) -> Result<AttackSets> {
    if train_size == 0 || test_size == 0 {
        return Err(Error::invalid("attack set sizes must be positive".to_string()));
    }
    let wanted = train_size + test_size;
    let budget = 10 * wanted;
    let mut train = Vec::with_capacity(train_size);
    let mut test = Vec::with_capacity(test_size);
    for attempt in 0..budget as u64 {
        if train.len() + test.len() == wanted {
            break;
        }
        let mut scene_cfg = cfg.clone();
        scene_cfg.terrain = match cfg.terrain.resolve(attempt) {
            TerrainKind::Hills => super::TerrainChoice::Hills,
            TerrainKind::Desert => super::TerrainChoice::Desert,
            TerrainKind::Mixed => super::TerrainChoice::Mixed,
        };
        let seed = rng::derive(cfg.seed, attempt);
        let scene = synth_scene_full(seed, &scene_cfg)?;
        if label_by_threshold(&scene.mask, 0.70) == Label::Cloudy {
            continue;
        }
        let confidence = score(&scene.cube)?;
        if confidence > 0.5 {
            continue;
        }
        let cube = AttackCube {
            cube: scene.cube,
            terrain: scene.terrain,
            seed,
            baseline_confidence: confidence,
        };
        if train.len() < train_size {
            train.push(cube);
        } else {
            test.push(cube);
        }
    }
    if train.len() + test.len() < wanted {
        return Err(Error::RetryBudget(format!(
            "attack set generation got {}/{} train and {}/{} test cubes after {budget} attempts",
            train.len(),
            train_size,
            test.len(),
            test_size
        )));
    }
    Ok(AttackSets { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubes::scenegen::{DensitySpec, TerrainChoice};

    fn cfg(seed: u64) -> ScenegenConfig {
        ScenegenConfig {
            size: 32,
            cloud_density: DensitySpec::Uniform { uniform: [0.0, 0.6] },
            terrain: TerrainChoice::Variety,
            seed,
            counts: SplitCounts {
                train: 6,
                val: 2,
                test: 2,
            },
            cloud_margin: 0.25,
        }
    }

    #[test]
    fn scene_set_is_deterministic_and_split_sizes_hold() {
        let c = cfg(9);
        let scenes = gen_scene_set(&c).unwrap();
        let scenes2 = gen_scene_set(&c).unwrap();
        assert_eq!(scenes.len(), 10);
        assert_eq!(scenes[3].cube.data(), scenes2[3].cube.data());

        let bundle = assemble_bundle(&scenes, 0.3, &c.counts).unwrap();
        assert_eq!(bundle.train.len(), 6);
        assert_eq!(bundle.val.len(), 2);
        assert_eq!(bundle.test.len(), 2);
        for item in &bundle.train.items {
            let expect = if item.cloud_fraction > 0.3 {
                Label::Cloudy
            } else {
                Label::NotCloudy
            };
            assert_eq!(item.label, expect);
        }
    }

    #[test]
    fn terrain_rotates_under_variety() {
        let scenes = gen_scene_set(&cfg(3)).unwrap();
        assert_eq!(scenes[0].terrain, TerrainKind::Hills);
        assert_eq!(scenes[1].terrain, TerrainKind::Desert);
        assert_eq!(scenes[2].terrain, TerrainKind::Mixed);
        assert_eq!(scenes[3].terrain, TerrainKind::Hills);
    }

    #[test]
    fn attack_sets_respect_filter_and_sizes() {
        let mut c = cfg(77);
        c.cloud_density = DensitySpec::Uniform { uniform: [0.0, 0.3] };
        let sets = build_attack_sets(&c, |cube| Ok(cube.get(0, 0, 0) as f64 * 0.5), 8, 3).unwrap();
        assert_eq!(sets.train.len(), 8);
        assert_eq!(sets.test.len(), 3);
        for c in sets.train.iter().chain(&sets.test) {
            assert!(c.baseline_confidence <= 0.5);
        }
        // Seed ranges are disjoint.
        let mut seeds: Vec<u64> = sets.train.iter().chain(&sets.test).map(|c| c.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 11);
        // An ROA exists for every kind under variety generation.
        sets.roa(TerrainKind::Hills).unwrap();
        sets.roa(TerrainKind::Desert).unwrap();
    }

    #[test]
    fn always_cloudy_scorer_exhausts_budget() {
        let c = cfg(5);
        let err = build_attack_sets(&c, |_| Ok(1.0), 4, 2).unwrap_err();
        match err {
            Error::RetryBudget(msg) => assert!(msg.contains("0/4")),
            other => panic!("unexpected error {other}"),
        }
    }
}
