//! Two-stage detector training.
//!
//! Stage 1 trains every weight on the 30%-threshold dataset so the conv
//! stack learns cloud shapes; stage 2 fine-tunes only the dense head on the
//! 70%-threshold dataset with the conv weights frozen (bitwise). Both stages
//! use Adam, the exponentially decayed learning rate, and the
//! false-positive-weighted cross entropy.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cubes::{extract_bands, DatasetBundle, Label, LabeledDataset};
use crate::detector::model::{DetectorModel, WeightMode};
use crate::grad::{adam_step, AdamHyper, AdamState, Bindings, Graph, Tensor};
use crate::rng::{self, Domain};
use crate::{Error, Result};

/// Learning-rate decay constant per epoch.
pub const LR_DECAY_RATE: f64 = 0.6;
/// Weight applied to the false-positive branch of the loss.
pub const FALSE_POSITIVE_WEIGHT: f64 = 2.0;
/// Confidence clamp inside the scalar loss.
pub const CONFIDENCE_EPSILON: f64 = 1e-7;

/// Exponentially decayed learning rate: `eta0 * exp(-0.6 k)` at epoch `k`.
pub fn lr_schedule(eta0: f64, epoch: usize) -> f64 {
    eta0 * (-LR_DECAY_RATE * epoch as f64).exp()
}

/// Binary cross entropy with the false-positive branch doubled:
/// `-y log(p) - 2 (1-y) log(1-p)`, with `p` clamped away from {0, 1}.
pub fn loss_weighted_bce(y: f64, y_hat: f64) -> f64 {
    let p = y_hat.clamp(CONFIDENCE_EPSILON, 1.0 - CONFIDENCE_EPSILON);
    -y * p.ln() - FALSE_POSITIVE_WEIGHT * (1.0 - y) * (1.0 - p).ln()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub initial_lr: f64,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub fp_weight: f64,
    /// Stop a stage early once validation accuracy reaches this level.
    #[serde(default)]
    pub early_stop_val_accuracy: Option<f64>,
    /// Random flips plus faint pixel noise on training inputs.
    #[serde(default = "default_true")]
    pub augment: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 30,
            stage2_epochs: 30,
            initial_lr: 0.01,
            decay_rate: LR_DECAY_RATE,
            batch_size: 8,
            seed: 0,
            fp_weight: FALSE_POSITIVE_WEIGHT,
            early_stop_val_accuracy: Some(0.99),
            augment: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,epoch,lr,mean_loss,val_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.stage, e.epoch, e.lr, e.mean_loss, e.val_accuracy
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub model: DetectorModel,
    pub history: TrainingHistory,
}

struct PreparedItem {
    subcube: Tensor,
    target: f32,
}

fn prepare(dataset: &LabeledDataset, model: &DetectorModel) -> Vec<PreparedItem> {
    dataset
        .items
        .iter()
        .map(|item| PreparedItem {
            subcube: extract_bands(&item.cube, &model.arch().input_bands),
            target: match item.label {
                Label::Cloudy => 1.0,
                Label::NotCloudy => 0.0,
            },
        })
        .collect()
}

fn flip_tensor(t: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let (pos, ch) = (i / c, i % c);
        let (y, x) = (pos / w, pos % w);
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        src[(sy * w + sx) * c + ch]
    })
}

fn augment_item(t: &Tensor, seed: u64, index: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng::stream(seed, Domain::Augment, index);
    let horizontal = r.random_bool(0.5);
    let vertical = r.random_bool(0.5);
    let mut out = if horizontal || vertical {
        flip_tensor(t, horizontal, vertical)
    } else {
        t.clone()
    };
    let noise: rand_distr::Normal<f32> = rand_distr::Normal::new(0.0, 0.005).unwrap();
    for v in out.data_mut() {
        *v = (*v + rand_distr::Distribution::sample(&noise, &mut r)).clamp(0.0, 1.0);
    }
    out
}

/// Mean gradient and loss of one minibatch. Items evaluate in parallel;
/// accumulation runs in item order so results never depend on thread count.
fn batch_gradients(
    model: &DetectorModel,
    items: &[(&PreparedItem, Option<Tensor>)],
    trainable: &[String],
    fp_weight: f64,
) -> Result<(HashMap<String, Tensor>, f64)> {
    let per_item: Vec<Result<(HashMap<String, Tensor>, f64)>> = items
        .par_iter()
        .map(|(item, augmented)| {
            let input_tensor = augmented.as_ref().unwrap_or(&item.subcube);
            let mut g = Graph::new();
            let input = g.leaf("input", input_tensor.shape().to_vec())?;
            let z = model.forward_graph(&mut g, input, WeightMode::Leaves)?;
            let loss = g.bce_logit(z, item.target, fp_weight as f32)?;
            g.output("loss", loss)?;
            let mut bindings: Bindings = Bindings::new();
            bindings.insert("input", input_tensor);
            for (name, tensor) in model.weights() {
                bindings.insert(name, tensor);
            }
            let wrt: Vec<&str> = trainable.iter().map(String::as_str).collect();
            let (grads, outputs) = g.gradient_with_outputs(&bindings, &wrt, "loss")?;
            Ok((grads, outputs["loss"].data()[0] as f64))
        })
        .collect();

    let scale = 1.0 / items.len() as f32;
    let mut total: HashMap<String, Tensor> = HashMap::new();
    let mut loss_sum = 0.0f64;
    for r in per_item {
        let (grads, loss) = r?;
        loss_sum += loss;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *v;
                    }
                }
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    for g in total.values_mut() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok((total, loss_sum / items.len() as f64))
}

fn validation_accuracy(model: &DetectorModel, items: &[PreparedItem]) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let hits: Vec<Result<bool>> = items
        .par_iter()
        .map(|item| {
            let conf = model.forward(&item.subcube)?;
            Ok((conf > 0.5) == (item.target > 0.5))
        })
        .collect();
    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

fn run_stage(
    model: &mut DetectorModel,
    bundle: &DatasetBundle,
    trainable: &[String],
    stage: u8,
    epochs: usize,
    cfg: &TrainConfig,
    history: &mut TrainingHistory,
) -> Result<()> {
    if bundle.train.is_empty() {
        return Err(Error::invalid(format!("stage {stage}: empty training set")));
    }
    if !bundle.train.has_both_classes() {
        return Err(Error::invalid(format!(
            "stage {stage}: training set contains a single class"
        )));
    }
    let train_items = prepare(&bundle.train, model);
    let val_items = prepare(&bundle.val, model);

    let mut adam: HashMap<String, AdamState> = trainable
        .iter()
        .map(|name| {
            let shape = model.weight(name).expect("trainable weight").shape().to_vec();
            (name.clone(), AdamState::new(shape, AdamHyper::default()))
        })
        .collect();

    for epoch in 0..epochs {
        let lr = cfg.initial_lr * (-cfg.decay_rate * epoch as f64).exp();
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        shuffle(&mut order, cfg.seed, stage as u64 * 10_000 + epoch as u64);

        let mut loss_acc = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let items: Vec<(&PreparedItem, Option<Tensor>)> = chunk
                .iter()
                .map(|&i| {
                    let item = &train_items[i];
                    let augmented = if cfg.augment {
                        let tag = (stage as u64) << 40
                            | (epoch as u64) << 20
                            | i as u64;
                        Some(augment_item(&item.subcube, cfg.seed, tag))
                    } else {
                        None
                    };
                    (item, augmented)
                })
                .collect();
            let (grads, loss) = batch_gradients(model, &items, trainable, cfg.fp_weight)?;
            if !loss.is_finite() {
                return Err(Error::Aborted(format!(
                    "NaN loss in stage {stage}, epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_acc += loss;
            batches += 1;
            for name in trainable {
                let grad = grads.get(name).expect("gradient for trainable");
                let state = adam.get_mut(name).expect("adam state");
                let mut hyper = state.hyper;
                hyper.lr = lr;
                state.hyper = hyper;
                let (new_param, new_state) =
                    adam_step(model.weight(name).expect("weight"), grad, state)?;
                *state = new_state;
                model.set_weight(name, new_param);
            }
        }

        let val_accuracy = validation_accuracy(model, &val_items)?;
        history.epochs.push(EpochStats {
            stage,
            epoch,
            lr,
            mean_loss: loss_acc / batches.max(1) as f64,
            val_accuracy,
        });
        if let Some(target) = cfg.early_stop_val_accuracy {
            if val_accuracy >= target {
                break;
            }
            // Below this the schedule has decayed past any useful update.
            if lr < 1e-6 {
                break;
            }
        }
    }
    Ok(())
}

fn shuffle(order: &mut [usize], seed: u64, tag: u64) {
    use rand::Rng;
    let mut r = rng::stream(seed, Domain::Shuffle, tag);
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
}

/// Stage 1 on the 30%-threshold data (all weights), stage 2 on the
/// 70%-threshold data (dense head only; conv weights bitwise frozen).
pub fn train_two_stage(
    model: DetectorModel,
    th30: &DatasetBundle,
    th70: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<TrainedDetector> {
    let mut model = model;
    let mut history = TrainingHistory::default();

    let all = model.all_weight_names();
    run_stage(&mut model, th30, &all, 1, cfg.stage1_epochs, cfg, &mut history)?;

    model.feature_frozen = true;
    if cfg.stage2_epochs > 0 {
        let dense = model.dense_weight_names();
        run_stage(&mut model, th70, &dense, 2, cfg.stage2_epochs, cfg, &mut history)?;
    }

    Ok(TrainedDetector { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubes::{
        assemble_bundle, gen_scene_set, DensitySpec, ScenegenConfig, SplitCounts, TerrainChoice,
    };
    use crate::detector::{build_detector, ArchConfig};

    fn tiny_arch() -> ArchConfig {
        let conv = |out_channels: usize| crate::detector::ConvSpec {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: true,
        };
        ArchConfig {
            input_bands: crate::cubes::BandSubset::cloud_sensitive(),
            input_size: [32, 32],
            conv_specs: vec![conv(6), conv(8)],
            dense_specs: vec![16, 1],
            width_multiplier: 1.0,
            extra_conv_layers: 0,
        }
    }

    fn tiny_bundles(seed: u64) -> (DatasetBundle, DatasetBundle) {
        let cfg = ScenegenConfig {
            size: 32,
            cloud_density: DensitySpec::Beta { beta: [0.5, 0.5] },
            terrain: TerrainChoice::Variety,
            seed,
            counts: SplitCounts {
                train: 24,
                val: 8,
                test: 8,
            },
            cloud_margin: 0.25,
        };
        let scenes = gen_scene_set(&cfg).unwrap();
        (
            assemble_bundle(&scenes, 0.30, &cfg.counts).unwrap(),
            assemble_bundle(&scenes, 0.70, &cfg.counts).unwrap(),
        )
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            stage1_epochs: 2,
            stage2_epochs: 2,
            batch_size: 6,
            seed: 11,
            early_stop_val_accuracy: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_schedule(0.01, 0), 0.01);
        assert!((lr_schedule(0.01, 1) - 0.0054881163609402635).abs() < 1e-7);
        assert!((lr_schedule(0.01, 10) - 2.4787521766663585e-5).abs() < 1e-9);
    }

    #[test]
    fn lr_schedule_is_strictly_decreasing() {
        for k in 0..20 {
            assert!(lr_schedule(0.01, k + 1) < lr_schedule(0.01, k));
        }
    }

    #[test]
    fn weighted_bce_reference_values() {
        assert!((loss_weighted_bce(1.0, 0.5) - 0.6931471805599453).abs() < 1e-4);
        assert!((loss_weighted_bce(0.0, 0.5) - 1.3862943611198906).abs() < 1e-4);
        assert!(loss_weighted_bce(1.0, 1.0) < 1e-6);
        // Exact 0 and 1 are clamped rather than infinite.
        assert!(loss_weighted_bce(1.0, 0.0).is_finite());
        assert!(loss_weighted_bce(0.0, 1.0).is_finite());
    }

    #[test]
    fn stage2_freezes_conv_weights_bitwise() {
        let (th30, th70) = tiny_bundles(21);
        let model = build_detector(&tiny_arch(), 3).unwrap();
        let cfg = quick_cfg();
        let stage1 = train_two_stage(
            model.clone(),
            &th30,
            &th70,
            &TrainConfig {
                stage2_epochs: 0,
                ..cfg.clone()
            },
        )
        .unwrap();
        let full = train_two_stage(model, &th30, &th70, &cfg).unwrap();
        for (name, tensor) in stage1.model.weights() {
            if name.starts_with("conv") {
                assert_eq!(
                    Some(tensor),
                    full.model.weight(name),
                    "{name} changed during stage 2"
                );
            }
        }
        assert!(full.model.feature_frozen());
    }

    #[test]
    fn zero_stage2_epochs_returns_stage1_model() {
        let (th30, th70) = tiny_bundles(22);
        let model = build_detector(&tiny_arch(), 4).unwrap();
        let cfg = TrainConfig {
            stage2_epochs: 0,
            ..quick_cfg()
        };
        let once = train_two_stage(model.clone(), &th30, &th70, &cfg).unwrap();
        let twice = train_two_stage(model, &th30, &th70, &cfg).unwrap();
        assert_eq!(once.model.weight_hash(), twice.model.weight_hash());
        // Only the frozen flag differs from a pure stage-1 run.
        assert!(once.model.feature_frozen());
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let (th30, th70) = tiny_bundles(23);
        let model = build_detector(&tiny_arch(), 5).unwrap();
        let cfg = quick_cfg();
        let a = train_two_stage(model.clone(), &th30, &th70, &cfg).unwrap();
        let b = train_two_stage(model, &th30, &th70, &cfg).unwrap();
        assert_eq!(a.model.weight_hash(), b.model.weight_hash());
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let (th30, _) = tiny_bundles(24);
        let mut all_cloudy = th30.clone();
        for item in &mut all_cloudy.train.items {
            item.label = crate::cubes::Label::Cloudy;
        }
        let model = build_detector(&tiny_arch(), 6).unwrap();
        let err = train_two_stage(model, &all_cloudy, &th30, &quick_cfg()).unwrap_err();
        assert!(err.to_string().contains("single class"));
    }
}
