//! Adversarial cube optimization.
//!
//! Each step samples a minibatch of host cubes and fresh transforms, renders
//! the patches from their logits, embeds them, and backpropagates the
//! combined loss to the logits only — the detector and the spectral index
//! stay constant. The non-printability and cloaking terms are evaluated once
//! per step on the canonical (unembedded) patches.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::embed::embed_graph;
use crate::attack::losses::{loss_total, roa_visible_window, LossBreakdown};
use crate::attack::params::{Parametrization, PatchParams};
use crate::attack::transform::{sample_transforms, AugmentConfig, Proximity, Transform};
use crate::cubes::{BandSubset, DataCube};
use crate::detector::DetectorModel;
use crate::grad::{adam_step, AdamHyper, AdamState, Bindings, Graph, Tensor};
use crate::rng::{self, Domain};
use crate::spectra::SpectralIndex;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeSize {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Non-printability weight.
    pub alpha: f64,
    /// Cloaking weight.
    pub beta: f64,
    pub steps: usize,
    pub adam: AdamHyper,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    /// One entry per patch; several entries form a multi-cube attack.
    pub layout: Vec<CubeSize>,
    pub proximity: Proximity,
    pub parametrization: Parametrization,
    pub seed: u64,
    /// Running-mean window (in steps) for best-checkpoint selection.
    #[serde(default = "default_best_window")]
    pub best_window: usize,
}

fn default_best_window() -> usize {
    50
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha: 5.0,
            beta: 0.05,
            steps: 500,
            adam: AdamHyper::with_lr(0.02),
            batch_size: 8,
            augment: AugmentConfig::default(),
            layout: vec![CubeSize { rows: 25, cols: 25 }],
            proximity: Proximity::Low,
            parametrization: Parametrization::Hull,
            seed: 0,
            best_window: 50,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative: alpha={}, beta={}",
                self.alpha, self.beta
            )));
        }
        if self.layout.is_empty() {
            return Err(Error::invalid("attack layout is empty".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive".to_string()));
        }
        Ok(())
    }

    /// Stable hash of the serialized config, for run manifests and reports.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn fresh_params(&self, material_count: usize) -> Result<Vec<PatchParams>> {
        self.layout
            .iter()
            .enumerate()
            .map(|(i, size)| {
                PatchParams::init(
                    self.parametrization,
                    size.rows,
                    size.cols,
                    material_count,
                    rng::derive(self.seed, i as u64),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub psi: f64,
    pub phi: f64,
    pub omega: f64,
    pub total: f64,
    pub mean_conf: f64,
}

/// CSV with header `step,psi,phi,omega,total,mean_conf`.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,psi,phi,omega,total,mean_conf\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.psi, r.phi, r.omega, r.total, r.mean_conf
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    /// Parameters with the lowest running-mean bias loss.
    pub best: Vec<PatchParams>,
    /// Parameters after the final step.
    pub last: Vec<PatchParams>,
    pub trace: Vec<TraceRow>,
    /// Set when a non-finite loss stopped the run early; `best`/`last` hold
    /// the last good state.
    pub aborted_at: Option<usize>,
}

struct ItemOutcome {
    grads: Vec<Tensor>,
    psi: f64,
    conf: f64,
}

fn logits_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("logits{i}")).collect()
}

/// The per-item bias-loss graph: render each patch from its logits leaf
/// (`logits0`, `logits1`, ...), embed with the given transforms, extract the
/// detector's input bands, and score. Outputs: `psi` (scalar `-log f`) and
/// `conf` (the detector confidence). Returned alongside the leaf names.
///
/// This is the exact graph the optimizer differentiates, so gradient
/// checks against it exercise the production path end to end.
pub fn build_attack_graph(
    params: &[PatchParams],
    host: &DataCube,
    transforms: &[Transform],
    detector: &DetectorModel,
    index: &SpectralIndex,
) -> Result<(Graph, Vec<String>)> {
    if params.len() != transforms.len() {
        return Err(Error::invalid(format!(
            "{} params for {} transforms",
            params.len(),
            transforms.len()
        )));
    }
    let names = logits_names(params.len());
    let mut g = Graph::new();
    let mut host_node = g.constant(host.data().clone());
    for ((p, t), name) in params.iter().zip(transforms).zip(&names) {
        let leaf = g.leaf(name, p.logits().shape().to_vec())?;
        let rendered = p.realize_graph(&mut g, leaf, index)?;
        host_node = embed_graph(&mut g, host_node, host, rendered, (p.rows(), p.cols()), t)?;
    }
    let keep = detector.arch().input_bands.zero_based();
    let subcube = g.slice_bands(host_node, &keep)?;
    let z = detector.forward_graph(&mut g, subcube, crate::detector::WeightMode::Constants)?;
    let nls = g.neg_log_sigmoid(z)?;
    let psi = g.mean(nls)?;
    let conf = g.sigmoid(z)?;
    g.output("psi", psi)?;
    g.output("conf", conf)?;
    Ok((g, names))
}

/// One minibatch item: embed every patch with its transform, score the
/// cloud-sensitive bands, and differentiate the bias loss back to the logits.
fn item_pass(
    params: &[PatchParams],
    host: &DataCube,
    transforms: &[Transform],
    detector: &DetectorModel,
    index: &SpectralIndex,
) -> Result<ItemOutcome> {
    let (g, names) = build_attack_graph(params, host, transforms, detector, index)?;
    let mut bindings = Bindings::new();
    for (name, p) in names.iter().zip(params) {
        bindings.insert(name, p.logits());
    }
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let (mut grads, outputs) = g.gradient_with_outputs(&bindings, &wrt, "psi")?;
    Ok(ItemOutcome {
        grads: names
            .iter()
            .map(|n| grads.remove(n).expect("gradient present"))
            .collect(),
        psi: outputs["psi"].data()[0] as f64,
        conf: outputs["conf"].data()[0] as f64,
    })
}

/// Per-step regularizer pass: non-printability and cloaking on the
/// canonical patches, differentiated once with combined weights.
fn regularizer_pass(
    params: &[PatchParams],
    index: &SpectralIndex,
    crops: Option<&[(usize, usize)]>,
    roa: Option<&DataCube>,
    alpha: f64,
    beta: f64,
) -> Result<(Vec<Tensor>, f64, f64)> {
    let names = logits_names(params.len());
    let mut g = Graph::new();
    let mut phi_nodes = Vec::new();
    let mut omega_nodes = Vec::new();
    for ((p, name), ci) in params.iter().zip(&names).zip(0..) {
        let leaf = g.leaf(name, p.logits().shape().to_vec())?;
        let rendered = p.realize_graph(&mut g, leaf, index)?;
        if alpha > 0.0 {
            let cols = g.constant(index.to_tensor());
            let dist = g.min_dist_cols(rendered, cols)?;
            phi_nodes.push(g.mean(dist)?);
        }
        if beta > 0.0 {
            let roa = roa.expect("validated: cloaking needs a region of attack");
            let crops = crops.expect("validated: cloaking needs crops");
            let (row, col) = crops[ci];
            let visible = g.slice_bands(rendered, &BandSubset::visible().zero_based())?;
            let window = roa_visible_window(roa, row, col, p.rows(), p.cols());
            let neg = Tensor::from_fn(window.shape().to_vec(), |i| -window.data()[i]);
            let neg_node = g.constant(neg);
            let diff = g.add(visible, neg_node)?;
            omega_nodes.push(g.l2_norm(diff)?);
        }
    }
    let sum_nodes = |g: &mut Graph, nodes: &[crate::grad::NodeId]| -> Result<Option<crate::grad::NodeId>> {
        let mut it = nodes.iter().copied();
        let first = match it.next() {
            Some(n) => n,
            None => return Ok(None),
        };
        let mut acc = first;
        for n in it {
            acc = g.add(acc, n)?;
        }
        Ok(Some(acc))
    };
    let phi_total = sum_nodes(&mut g, &phi_nodes)?;
    let omega_total = sum_nodes(&mut g, &omega_nodes)?;

    // Single weighted seed so one backward pass yields alpha*dPhi + beta*dOmega.
    let mut seed_node = None;
    if let Some(phi) = phi_total {
        g.output("phi", phi)?;
        seed_node = Some(g.scale(phi, alpha as f32)?);
    }
    if let Some(omega) = omega_total {
        g.output("omega", omega)?;
        let weighted = g.scale(omega, beta as f32)?;
        seed_node = Some(match seed_node {
            Some(s) => g.add(s, weighted)?,
            None => weighted,
        });
    }
    let seed_node = match seed_node {
        Some(s) => s,
        None => {
            return Ok((
                params
                    .iter()
                    .map(|p| Tensor::zeros(p.logits().shape().to_vec()))
                    .collect(),
                0.0,
                0.0,
            ))
        }
    };
    g.output("reg", seed_node)?;

    let mut bindings = Bindings::new();
    for (name, p) in names.iter().zip(params) {
        bindings.insert(name, p.logits());
    }
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let (mut grads, outputs) = g.gradient_with_outputs(&bindings, &wrt, "reg")?;
    let phi = outputs.get("phi").map_or(0.0, |t| t.data()[0] as f64);
    let omega = outputs.get("omega").map_or(0.0, |t| t.data()[0] as f64);
    Ok((
        names
            .iter()
            .map(|n| grads.remove(n).expect("gradient present"))
            .collect(),
        phi,
        omega,
    ))
}

/// Optimize adversarial cube logits against a frozen detector.
///
/// Returns the best-by-running-mean-bias parameters with the full loss
/// trace. A non-finite loss stops the run and returns the last good state
/// with `aborted_at` set. An empty training set is an error, as is a missing
/// region of attack when `beta > 0`.
pub fn optimize_cube(
    params0: Vec<PatchParams>,
    train: &[&DataCube],
    roa: Option<&DataCube>,
    detector: &DetectorModel,
    index: &SpectralIndex,
    cfg: &AttackConfig,
) -> Result<AttackRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("attack training set is empty".to_string()));
    }
    if params0.len() != cfg.layout.len() {
        return Err(Error::invalid(format!(
            "{} parameter tensors for {} layout entries",
            params0.len(),
            cfg.layout.len()
        )));
    }
    for (p, size) in params0.iter().zip(&cfg.layout) {
        if p.rows() != size.rows || p.cols() != size.cols {
            return Err(Error::shape(format!(
                "params {}x{} do not match layout {}x{}",
                p.rows(),
                p.cols(),
                size.rows,
                size.cols
            )));
        }
    }
    if cfg.beta > 0.0 && roa.is_none() {
        return Err(Error::invalid(
            "cloaking weight is positive but no region of attack was given".to_string(),
        ));
    }
    let host_dims = (train[0].height(), train[0].width());
    for cube in train {
        if (cube.height(), cube.width()) != host_dims {
            return Err(Error::invalid(
                "attack training cubes must share one size".to_string(),
            ));
        }
    }
    let layout_dims: Vec<(usize, usize)> =
        cfg.layout.iter().map(|s| (s.rows, s.cols)).collect();

    let mut params = params0;
    let mut best = params.clone();
    let mut best_score = f64::INFINITY;
    let mut psi_window: Vec<f64> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut adam: Vec<AdamState> = params
        .iter()
        .map(|p| AdamState::new(p.logits().shape().to_vec(), cfg.adam))
        .collect();

    for step in 0..cfg.steps {
        // Minibatch without replacement when the pool allows it.
        let mut batch_rng = rng::stream(cfg.seed, Domain::Shuffle, step as u64);
        let batch: Vec<usize> = if cfg.batch_size <= train.len() {
            sample(&mut batch_rng, train.len(), cfg.batch_size).into_iter().collect()
        } else {
            use rand::Rng;
            (0..cfg.batch_size)
                .map(|_| batch_rng.random_range(0..train.len()))
                .collect()
        };

        let transforms: Vec<Vec<Transform>> = batch
            .iter()
            .enumerate()
            .map(|(bi, _)| {
                let mut t_rng = rng::stream(
                    cfg.seed,
                    Domain::Transform,
                    (step * cfg.batch_size + bi) as u64,
                );
                sample_transforms(&mut t_rng, &cfg.augment, host_dims, &layout_dims, cfg.proximity)
            })
            .collect::<Result<_>>()?;

        let crops: Option<Vec<(usize, usize)>> = if cfg.beta > 0.0 {
            let roa = roa.expect("validated above");
            let mut crop_rng = rng::stream(cfg.seed, Domain::Crop, step as u64);
            Some(
                cfg.layout
                    .iter()
                    .map(|s| crate::attack::losses::sample_crop(&mut crop_rng, roa, s.rows, s.cols))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };

        let outcomes: Vec<Result<ItemOutcome>> = batch
            .par_iter()
            .zip(&transforms)
            .map(|(&idx, t)| item_pass(&params, train[idx], t, detector, index))
            .collect();

        let (reg_grads, phi, omega) = regularizer_pass(
            &params,
            index,
            crops.as_deref(),
            roa,
            cfg.alpha,
            cfg.beta,
        )?;

        let mut grads: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.logits().shape().to_vec()))
            .collect();
        let mut psi_sum = 0.0f64;
        let mut conf_sum = 0.0f64;
        for outcome in outcomes {
            let o = outcome?;
            psi_sum += o.psi;
            conf_sum += o.conf;
            for (acc, g) in grads.iter_mut().zip(&o.grads) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *v;
                }
            }
        }
        for (acc, rg) in grads.iter_mut().zip(&reg_grads) {
            for (a, v) in acc.data_mut().iter_mut().zip(rg.data()) {
                *a += *v;
            }
        }

        let breakdown: LossBreakdown = loss_total(psi_sum, phi, omega, cfg.alpha, cfg.beta)?;
        let mean_conf = conf_sum / batch.len() as f64;
        if !breakdown.total.is_finite() {
            return Ok(AttackRun {
                best,
                last: params,
                trace,
                aborted_at: Some(step),
            });
        }
        trace.push(TraceRow {
            step,
            psi: breakdown.psi,
            phi: breakdown.phi,
            omega: breakdown.omega,
            total: breakdown.total,
            mean_conf,
        });

        // Best checkpoint: lowest running-mean bias loss over the window,
        // snapshotting the parameters that produced the current losses.
        psi_window.push(breakdown.psi);
        let win = cfg.best_window.max(1);
        if psi_window.len() > win {
            let drop = psi_window.len() - win;
            psi_window.drain(0..drop);
        }
        let window_mean: f64 = psi_window.iter().sum::<f64>() / psi_window.len() as f64;
        if window_mean < best_score {
            best_score = window_mean;
            best = params.clone();
        }

        for ((p, g), state) in params.iter_mut().zip(&grads).zip(adam.iter_mut()) {
            let (new_logits, new_state) = adam_step(p.logits(), g, state)?;
            *state = new_state;
            *p = p.with_logits(new_logits)?;
        }
    }

    Ok(AttackRun {
        best,
        last: params,
        trace,
        aborted_at: None,
    })
}
