//! Detector weights, initialization, and forward scoring.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::detector::arch::ArchConfig;
use crate::grad::{Bindings, Graph, NodeId, Tensor};
use crate::rng::{self, Domain};
use crate::{Error, Result};

/// A built detector: architecture plus named weight tensors. `feature_frozen`
/// records that the conv stack was held fixed during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub(crate) arch: ArchConfig,
    pub(crate) weights: Vec<(String, Tensor)>,
    pub(crate) feature_frozen: bool,
}

/// How `forward_graph` wires the weights in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum WeightMode {
    /// Named leaves, bound per evaluation (training).
    Leaves,
    /// Baked-in constants (scoring, attack optimization).
    Constants,
}

/// He-uniform initialized detector, deterministic in `seed`.
pub fn build_detector(arch: &ArchConfig, seed: u64) -> Result<DetectorModel> {
    arch.validate()?;
    let mut weights = Vec::new();
    let mut layer = 0u64;
    let mut he_uniform = |shape: Vec<usize>, fan_in: usize| -> Tensor {
        let limit = (6.0 / fan_in as f64).sqrt() as f32;
        let mut r = rng::stream(seed, Domain::Init, layer);
        layer += 1;
        Tensor::from_fn(shape, |_| r.random_range(-limit..limit))
    };

    let mut cin = arch.input_bands.len();
    for (i, c) in arch.effective_convs().iter().enumerate() {
        let fan_in = c.kernel * c.kernel * cin;
        weights.push((
            format!("conv{i}.w"),
            he_uniform(vec![c.kernel, c.kernel, cin, c.out_channels], fan_in),
        ));
        weights.push((format!("conv{i}.b"), Tensor::zeros(vec![c.out_channels])));
        cin = c.out_channels;
    }
    let (h, w, ch) = arch.feature_dims()?;
    let mut fan_in = h * w * ch;
    for (i, width) in arch.effective_denses().iter().enumerate() {
        weights.push((
            format!("fc{i}.w"),
            he_uniform(vec![*width, fan_in], fan_in),
        ));
        weights.push((format!("fc{i}.b"), Tensor::zeros(vec![*width])));
        fan_in = *width;
    }

    Ok(DetectorModel {
        arch: arch.clone(),
        weights,
        feature_frozen: false,
    })
}

impl DetectorModel {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn feature_frozen(&self) -> bool {
        self.feature_frozen
    }

    pub fn weights(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.weights.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub(crate) fn set_weight(&mut self, name: &str, value: Tensor) {
        let slot = self
            .weights
            .iter_mut()
            .find(|(n, _)| n == name)
            .expect("known weight name");
        slot.1 = value;
    }

    /// Names of the dense-head weights (the only trainable set in stage 2).
    pub fn dense_weight_names(&self) -> Vec<String> {
        self.weights
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| n.starts_with("fc"))
            .collect()
    }

    pub fn all_weight_names(&self) -> Vec<String> {
        self.weights.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads, in layer order.
    pub fn weight_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.weights {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Append the conv stack + dense head to `g`, returning the scalar logit
    /// node. With `WeightMode::Leaves` the caller must bind every weight by
    /// name; with `Constants` the current weights are baked in.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        input: NodeId,
        mode: WeightMode,
    ) -> Result<NodeId> {
        let mut node = |name: &str, g: &mut Graph| -> Result<NodeId> {
            let tensor = self.weight(name).expect("weight exists");
            match mode {
                WeightMode::Leaves => g.leaf(name, tensor.shape().to_vec()),
                WeightMode::Constants => Ok(g.constant(tensor.clone())),
            }
        };
        let mut x = input;
        for (i, c) in self.arch.effective_convs().iter().enumerate() {
            let w = node(&format!("conv{i}.w"), g)?;
            let b = node(&format!("conv{i}.b"), g)?;
            x = g.conv2d(x, w, b, c.stride, c.padding)?;
            x = g.relu(x)?;
            if c.pool {
                x = g.max_pool2(x)?;
            }
        }
        let denses = self.arch.effective_denses();
        for (i, _) in denses.iter().enumerate() {
            let w = node(&format!("fc{i}.w"), g)?;
            let b = node(&format!("fc{i}.b"), g)?;
            x = g.dense(x, w, b)?;
            if i + 1 < denses.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Validate that `subcube` matches the configured band count and spatial
    /// size. This band-count guard is what forces callers to extract the
    /// detector's input bands before scoring.
    pub(crate) fn check_input(&self, subcube: &Tensor) -> Result<()> {
        let shape = subcube.shape();
        if shape.len() != 3 || shape[2] != self.arch.input_bands.len() {
            return Err(Error::shape(format!(
                "detector expects {} input bands, got shape {:?}",
                self.arch.input_bands.len(),
                shape
            )));
        }
        if shape[0] != self.arch.input_size[0] || shape[1] != self.arch.input_size[1] {
            return Err(Error::shape(format!(
                "detector expects {}x{} input, got {}x{}",
                self.arch.input_size[0], self.arch.input_size[1], shape[0], shape[1]
            )));
        }
        Ok(())
    }

    /// Raw pre-sigmoid score of a band-extracted subcube.
    pub fn logit(&self, subcube: &Tensor) -> Result<f64> {
        self.check_input(subcube)?;
        let mut g = Graph::new();
        let input = g.leaf("input", subcube.shape().to_vec())?;
        let z = self.forward_graph(&mut g, input, WeightMode::Constants)?;
        g.output("logit", z)?;
        let mut bindings: Bindings = Bindings::new();
        bindings.insert("input", subcube);
        let out = g.evaluate(&bindings)?;
        Ok(out["logit"].data()[0] as f64)
    }

    /// Cloud confidence in the open interval (0, 1).
    pub fn forward(&self, subcube: &Tensor) -> Result<f64> {
        let z = self.logit(subcube)?;
        let conf = crate::grad::stable_sigmoid(z);
        Ok(conf.clamp(1e-12, 1.0 - 1e-12))
    }

    /// Convenience: extract this model's input bands from a full cube and
    /// score it.
    pub fn confidence_cube(&self, cube: &crate::cubes::DataCube) -> Result<f64> {
        let sub = crate::cubes::extract_bands(cube, &self.arch.input_bands);
        self.forward(&sub)
    }
}
