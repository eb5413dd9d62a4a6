//! Central-difference gradient checking.
//!
//! The reverse-mode gradient of a scalar graph output is compared against
//! `(f(x+h) - f(x-h)) / (x⁺ - x⁻)` per coordinate. Coordinates whose
//! perturbation (out to 10·h) flips any branch decision — a relu sign, a
//! pooling or nearest-column argselect, a clamp saturation — sit next to a
//! kink where central differences are meaningless; they are reported as
//! skipped rather than checked.

use rand::seq::index::sample;

use crate::grad::graph::{Bindings, Graph};
use crate::grad::tensor::Tensor;
use crate::rng::{self, Domain};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct FdConfig {
    /// Central-difference step, applied per coordinate.
    pub step: f64,
    /// Relative tolerance on |analytic - numeric|.
    pub rel_tol: f64,
    /// Absolute floor below which disagreement is ignored.
    pub abs_tol: f64,
    /// Cap on checked coordinates per leaf (random sample when exceeded).
    pub max_coords_per_leaf: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-3,
            rel_tol: 1e-3,
            abs_tol: 1e-6,
            max_coords_per_leaf: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordStatus {
    Checked,
    KinkSkipped,
}

#[derive(Debug, Clone)]
pub struct FdEntry {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub status: CoordStatus,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub pass: bool,
    /// Tolerances the pass/fail verdict was computed with.
    pub rel_tol_used: f64,
    pub abs_tol_used: f64,
}

impl FdReport {
    pub fn failures(&self) -> impl Iterator<Item = &FdEntry> {
        let (rt, at) = (self.rel_tol_used, self.abs_tol_used);
        self.entries.iter().filter(move |e| {
            e.status == CoordStatus::Checked && !within_tol(e.analytic, e.numeric, rt, at)
        })
    }
}

fn within_tol(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_tol + rel_tol * analytic.abs().max(numeric.abs())
}

fn rel_err(analytic: f64, numeric: f64, abs_tol: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(abs_tol);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients with central differences.
///
/// `wrt` names the leaves to perturb; the seed output must be scalar.
pub fn finite_difference_check(
    graph: &Graph,
    bindings: &Bindings,
    wrt: &[&str],
    seed_output: &str,
    cfg: &FdConfig,
) -> Result<FdReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::invalid(format!("fd step must be > 0, got {}", cfg.step)));
    }
    let analytic = graph.gradient(bindings, wrt, seed_output)?;
    let base = graph.forward_f64(bindings, true)?;
    let base_sig = base.signature;

    let mut entries = Vec::new();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut pass = true;

    for (leaf_idx, leaf) in wrt.iter().enumerate() {
        let bound = *bindings
            .get(*leaf)
            .ok_or_else(|| Error::graph(format!("leaf '{leaf}' not bound")))?;
        let n = bound.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_leaf {
            Some(cap) if cap < n => {
                let mut rng = rng::stream(cfg.seed, Domain::Eval, leaf_idx as u64);
                let mut v: Vec<usize> = sample(&mut rng, n, cap).into_iter().collect();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };

        for &i in &coords {
            let mut probe = |delta: f64, with_sig: bool| -> Result<(f64, u64, f32)> {
                let mut t = bound.clone();
                let perturbed = (t.data()[i] as f64 + delta) as f32;
                t.data_mut()[i] = perturbed;
                let mut b: Bindings = bindings.clone();
                b.insert(leaf, &t);
                let pass = graph.forward_f64(&b, with_sig)?;
                let out_id = graph
                    .output_id(seed_output)
                    .ok_or_else(|| Error::graph(format!("unknown output '{seed_output}'")))?;
                let out = &pass.values[out_id.0];
                if out.len() != 1 {
                    return Err(Error::graph(format!(
                        "output '{seed_output}' is not scalar"
                    )));
                }
                Ok((out[0], pass.signature, perturbed))
            };

            let (f_plus, sig_plus, x_plus) = probe(cfg.step, true)?;
            let (f_minus, sig_minus, x_minus) = probe(-cfg.step, true)?;
            let (_, sig_far_plus, _) = probe(10.0 * cfg.step, true)?;
            let (_, sig_far_minus, _) = probe(-10.0 * cfg.step, true)?;

            let a = analytic[*leaf].data()[i] as f64;
            let kink = sig_plus != base_sig
                || sig_minus != base_sig
                || sig_far_plus != base_sig
                || sig_far_minus != base_sig;
            if kink {
                skipped += 1;
                entries.push(FdEntry {
                    leaf: leaf.to_string(),
                    index: i,
                    analytic: a,
                    numeric: f64::NAN,
                    rel_err: f64::NAN,
                    status: CoordStatus::KinkSkipped,
                });
                continue;
            }

            let denom = x_plus as f64 - x_minus as f64;
            let numeric = (f_plus - f_minus) / denom;
            let re = rel_err(a, numeric, cfg.abs_tol);
            if !within_tol(a, numeric, cfg.rel_tol, cfg.abs_tol) {
                pass = false;
            }
            max_rel = max_rel.max(re);
            checked += 1;
            entries.push(FdEntry {
                leaf: leaf.to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_err: re,
                status: CoordStatus::Checked,
            });
        }
    }

    Ok(FdReport {
        entries,
        max_rel_err: max_rel,
        checked,
        skipped,
        pass,
        rel_tol_used: cfg.rel_tol,
        abs_tol_used: cfg.abs_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn bind<'a>(pairs: &[(&'a str, &'a Tensor)]) -> Bindings<'a> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn quadratic_passes_tightly() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1]).unwrap();
        let y = g.mul(x, x).unwrap();
        let f = g.mean(y).unwrap();
        g.output("f", f).unwrap();
        let t = Tensor::new(vec![1], vec![3.0]).unwrap();
        let report =
            finite_difference_check(&g, &bind(&[("x", &t)]), &["x"], "f", &FdConfig::default())
                .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-3);
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn relu_kink_at_zero_is_skipped() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1]).unwrap();
        let y = g.relu(x).unwrap();
        let f = g.mean(y).unwrap();
        g.output("f", f).unwrap();
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let report =
            finite_difference_check(&g, &bind(&[("x", &t)]), &["x"], "f", &FdConfig::default())
                .unwrap();
        assert_eq!(report.checked, 0);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.entries[0].status, CoordStatus::KinkSkipped);
        assert!(report.pass, "skipped coordinates do not fail the check");
    }

    #[test]
    fn coordinates_near_a_kink_are_also_skipped() {
        // x = 5h sits within the 10h guard band of the relu kink.
        let cfg = FdConfig::default();
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1]).unwrap();
        let y = g.relu(x).unwrap();
        let f = g.mean(y).unwrap();
        g.output("f", f).unwrap();
        let t = Tensor::new(vec![1], vec![(5.0 * cfg.step) as f32]).unwrap();
        let report = finite_difference_check(&g, &bind(&[("x", &t)]), &["x"], "f", &cfg).unwrap();
        assert_eq!(report.skipped, 1);
    }

    #[test]
    fn bad_step_rejected() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1]).unwrap();
        let f = g.mean(x).unwrap();
        g.output("f", f).unwrap();
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let cfg = FdConfig {
            step: 0.0,
            ..FdConfig::default()
        };
        let b: HashMap<&str, &Tensor> = bind(&[("x", &t)]);
        assert!(finite_difference_check(&g, &b, &["x"], "f", &cfg).is_err());
    }
}
