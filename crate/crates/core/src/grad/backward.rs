//! Reverse accumulation over the graph tape.

use std::collections::HashMap;

use crate::grad::graph::{min_dist_argmin, sigmoid, Bindings, Graph, Op};
use crate::grad::tensor::Tensor;
use crate::{Error, Result};

impl Graph {
    /// Gradient of the named scalar output with respect to the named leaves.
    ///
    /// Leaves the output does not depend on get zero gradients. Fails when
    /// the seed output is not scalar or a requested leaf does not exist.
    pub fn gradient(
        &self,
        bindings: &Bindings,
        wrt: &[&str],
        seed_output: &str,
    ) -> Result<HashMap<String, Tensor>> {
        Ok(self.gradient_with_outputs(bindings, wrt, seed_output)?.0)
    }

    /// [`Graph::gradient`] plus every registered output from the same
    /// forward pass, so callers logging the loss don't pay for a second one.
    pub fn gradient_with_outputs(
        &self,
        bindings: &Bindings,
        wrt: &[&str],
        seed_output: &str,
    ) -> Result<(HashMap<String, Tensor>, HashMap<String, Tensor>)> {
        let seed = self
            .output_id(seed_output)
            .ok_or_else(|| Error::graph(format!("unknown output '{seed_output}'")))?;
        let mut wrt_ids = Vec::with_capacity(wrt.len());
        for name in wrt {
            let id = self
                .leaf_id(name)
                .ok_or_else(|| Error::graph(format!("unknown leaf '{name}'")))?;
            wrt_ids.push((name.to_string(), id));
        }
        if self.nodes[seed.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::graph(format!(
                "seed output '{seed_output}' is not scalar (shape {:?})",
                self.nodes[seed.0].shape
            )));
        }

        let pass = self.forward(bindings, false)?;
        let values = &pass.values;

        // Only nodes that some requested leaf can reach need adjoints.
        let mut needs = vec![false; self.nodes.len()];
        for (_, id) in &wrt_ids {
            needs[id.0] = true;
        }
        for i in 0..self.nodes.len() {
            if !needs[i] {
                needs[i] = self.nodes[i].inputs.iter().any(|inp| needs[inp.0]);
            }
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[seed.0] = Some(if self.nodes[seed.0].shape.is_empty() {
            Tensor::scalar(1.0)
        } else {
            Tensor::filled(self.nodes[seed.0].shape.clone(), 1.0)
        });

        for idx in (0..=seed.0).rev() {
            if !needs[idx] {
                continue;
            }
            let upstream = match adjoints[idx].take() {
                Some(a) => a,
                None => continue,
            };
            self.backprop_node(idx, &upstream, values, &mut adjoints, &needs)?;
            if self.leaf_name_of(idx).is_some() {
                adjoints[idx] = Some(upstream);
            }
        }

        let mut out = HashMap::with_capacity(wrt_ids.len());
        for (name, id) in wrt_ids {
            let grad = adjoints[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].shape.clone()));
            out.insert(name, grad);
        }
        let outputs = self
            .output_names()
            .map(|n| {
                let id = self.output_id(n).expect("registered output");
                (n.to_string(), values[id.0].clone())
            })
            .collect();
        Ok((out, outputs))
    }

    fn leaf_name_of(&self, idx: usize) -> Option<&str> {
        match &self.nodes[idx].op {
            Op::Leaf { name } => Some(name),
            _ => None,
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        upstream: &Tensor,
        values: &[Tensor],
        adjoints: &mut [Option<Tensor>],
        needs: &[bool],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let input_val = |i: usize| -> &Tensor { &values[node.inputs[i].0] };
        let mut add_to = |slot: usize, contribution: Tensor, adjoints: &mut [Option<Tensor>]| {
            let target = node.inputs[slot].0;
            match &mut adjoints[target] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                        *e += *c;
                    }
                }
                slot_ref @ None => *slot_ref = Some(contribution),
            }
        };
        let want = |slot: usize| -> bool { needs[node.inputs[slot].0] };

        match &node.op {
            Op::Leaf { .. } | Op::Const(_) => {}
            Op::Conv2d { stride, padding } => {
                let (dx, dw, db) = vjp_conv2d(
                    input_val(0),
                    input_val(1),
                    upstream,
                    *stride,
                    *padding,
                    want(0),
                    want(1),
                    want(2),
                );
                if let Some(dx) = dx {
                    add_to(0, dx, adjoints);
                }
                if let Some(dw) = dw {
                    add_to(1, dw, adjoints);
                }
                if let Some(db) = db {
                    add_to(2, db, adjoints);
                }
            }
            Op::Dense => {
                let x = input_val(0);
                let w = input_val(1);
                let n = x.numel();
                let m = w.shape()[0];
                let g = upstream.data();
                if want(0) {
                    let mut dx = vec![0.0f64; n];
                    for mi in 0..m {
                        let gv = g[mi] as f64;
                        let row = &w.data()[mi * n..(mi + 1) * n];
                        for (d, wv) in dx.iter_mut().zip(row) {
                            *d += gv * (*wv as f64);
                        }
                    }
                    add_to(
                        0,
                        Tensor::from_fn(x.shape().to_vec(), |i| dx[i] as f32),
                        adjoints,
                    );
                }
                if want(1) {
                    let mut dw = vec![0.0f32; m * n];
                    for mi in 0..m {
                        let gv = g[mi];
                        let row = &mut dw[mi * n..(mi + 1) * n];
                        for (d, xv) in row.iter_mut().zip(x.data()) {
                            *d = gv * *xv;
                        }
                    }
                    add_to(1, Tensor::new(w.shape().to_vec(), dw)?, adjoints);
                }
                if want(2) {
                    add_to(2, upstream.clone(), adjoints);
                }
            }
            Op::MaxPool2 => {
                let x = input_val(0);
                let (w, c) = (x.shape()[1], x.shape()[2]);
                let (ho, wo) = (node.shape[0], node.shape[1]);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ch in 0..c {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_at = 0usize;
                            for k in 0..4 {
                                let (dy, dxx) = (k / 2, k % 2);
                                let at = ((2 * oy + dy) * w + 2 * ox + dxx) * c + ch;
                                let v = x.data()[at];
                                if v > best {
                                    best = v;
                                    best_at = at;
                                }
                            }
                            dx.data_mut()[best_at] += upstream.data()[(oy * wo + ox) * c + ch];
                        }
                    }
                }
                add_to(0, dx, adjoints);
            }
            Op::Relu => {
                let x = input_val(0);
                let dx = Tensor::from_fn(x.shape().to_vec(), |i| {
                    if x.data()[i] > 0.0 {
                        upstream.data()[i]
                    } else {
                        0.0
                    }
                });
                add_to(0, dx, adjoints);
            }
            Op::Sigmoid => {
                let y = &values[idx];
                let dx = Tensor::from_fn(y.shape().to_vec(), |i| {
                    let yv = y.data()[i] as f64;
                    (upstream.data()[i] as f64 * yv * (1.0 - yv)) as f32
                });
                add_to(0, dx, adjoints);
            }
            Op::Ln => {
                let x = input_val(0);
                let dx = Tensor::from_fn(x.shape().to_vec(), |i| {
                    (upstream.data()[i] as f64 / x.data()[i] as f64) as f32
                });
                add_to(0, dx, adjoints);
            }
            Op::SoftmaxLast => {
                let y = &values[idx];
                let q = *y.shape().last().unwrap();
                let rows = y.numel() / q;
                let mut dx = vec![0.0f32; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * q..(r + 1) * q];
                    let gr = &upstream.data()[r * q..(r + 1) * q];
                    let dot: f64 = yr
                        .iter()
                        .zip(gr)
                        .map(|(&yv, &gv)| yv as f64 * gv as f64)
                        .sum();
                    for i in 0..q {
                        dx[r * q + i] = ((gr[i] as f64 - dot) * yr[i] as f64) as f32;
                    }
                }
                add_to(0, Tensor::new(y.shape().to_vec(), dx)?, adjoints);
            }
            Op::Add => {
                if want(0) {
                    add_to(0, upstream.clone(), adjoints);
                }
                if want(1) {
                    add_to(1, upstream.clone(), adjoints);
                }
            }
            Op::Mul => {
                let (a, b) = (input_val(0), input_val(1));
                if want(0) {
                    let da = Tensor::from_fn(a.shape().to_vec(), |i| {
                        upstream.data()[i] * b.data()[i]
                    });
                    add_to(0, da, adjoints);
                }
                if want(1) {
                    let db = Tensor::from_fn(b.shape().to_vec(), |i| {
                        upstream.data()[i] * a.data()[i]
                    });
                    add_to(1, db, adjoints);
                }
            }
            Op::Affine { mul, .. } => {
                let m = *mul;
                let dx = Tensor::from_fn(node.shape.clone(), |i| m * upstream.data()[i]);
                add_to(0, dx, adjoints);
            }
            Op::SqNorm => {
                let x = input_val(0);
                let g = upstream.data()[0] as f64;
                let dx = Tensor::from_fn(x.shape().to_vec(), |i| {
                    (2.0 * g * x.data()[i] as f64) as f32
                });
                add_to(0, dx, adjoints);
            }
            Op::Mean => {
                let x = input_val(0);
                let g = upstream.data()[0] as f64 / x.numel() as f64;
                let dx = Tensor::filled(x.shape().to_vec(), g as f32);
                add_to(0, dx, adjoints);
            }
            Op::L2Norm => {
                let x = input_val(0);
                let norm = values[idx].data()[0] as f64;
                let g = upstream.data()[0] as f64;
                let dx = if norm == 0.0 {
                    Tensor::zeros(x.shape().to_vec())
                } else {
                    Tensor::from_fn(x.shape().to_vec(), |i| {
                        (g * x.data()[i] as f64 / norm) as f32
                    })
                };
                add_to(0, dx, adjoints);
            }
            Op::MinDistCols => {
                let x = input_val(0);
                let cols = input_val(1);
                let b = *x.shape().last().unwrap();
                let nq = cols.shape()[1];
                let positions = x.numel() / b;
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let mut dcols = Tensor::zeros(cols.shape().to_vec());
                for p in 0..positions {
                    let xv = &x.data()[p * b..(p + 1) * b];
                    let (q, d2) = min_dist_argmin(xv, cols);
                    if d2 == 0.0 {
                        continue;
                    }
                    let d = d2.sqrt();
                    let g = upstream.data()[p] as f64;
                    for bi in 0..b {
                        let diff = xv[bi] as f64 - cols.data()[bi * nq + q] as f64;
                        let contrib = (g * diff / d) as f32;
                        dx.data_mut()[p * b + bi] += contrib;
                        dcols.data_mut()[bi * nq + q] -= contrib;
                    }
                }
                if want(0) {
                    add_to(0, dx, adjoints);
                }
                if want(1) {
                    add_to(1, dcols, adjoints);
                }
            }
            Op::ProjectCols => {
                let cols = input_val(0);
                let x = input_val(1);
                let (b, q) = (cols.shape()[0], cols.shape()[1]);
                let positions = x.numel() / q;
                if want(1) {
                    let mut dx = vec![0.0f64; x.numel()];
                    for p in 0..positions {
                        let gr = &upstream.data()[p * b..(p + 1) * b];
                        for bi in 0..b {
                            let gv = gr[bi] as f64;
                            let row = &cols.data()[bi * q..(bi + 1) * q];
                            let dst = &mut dx[p * q..(p + 1) * q];
                            for (d, cv) in dst.iter_mut().zip(row) {
                                *d += gv * (*cv as f64);
                            }
                        }
                    }
                    add_to(
                        1,
                        Tensor::from_fn(x.shape().to_vec(), |i| dx[i] as f32),
                        adjoints,
                    );
                }
                if want(0) {
                    let mut dc = vec![0.0f64; cols.numel()];
                    for p in 0..positions {
                        let xr = &x.data()[p * q..(p + 1) * q];
                        let gr = &upstream.data()[p * b..(p + 1) * b];
                        for bi in 0..b {
                            let gv = gr[bi] as f64;
                            let dst = &mut dc[bi * q..(bi + 1) * q];
                            for (d, xv) in dst.iter_mut().zip(xr) {
                                *d += gv * (*xv as f64);
                            }
                        }
                    }
                    add_to(
                        0,
                        Tensor::from_fn(cols.shape().to_vec(), |i| dc[i] as f32),
                        adjoints,
                    );
                }
            }
            Op::Rot90 { quarter_turns } => {
                // Adjoint of a rotation is the inverse rotation.
                let inverse = (4 - quarter_turns) % 4;
                let mut g = Graph::new();
                let leaf = g.leaf("g", upstream.shape().to_vec())?;
                let rot = g.rot90(leaf, inverse)?;
                g.output("r", rot)?;
                let mut b: Bindings = HashMap::new();
                b.insert("g", upstream);
                let rotated = g.evaluate(&b)?.remove("r").expect("rot output");
                add_to(0, rotated, adjoints);
            }
            Op::ClampSt { .. } => {
                // Straight-through: saturation does not block the gradient.
                add_to(0, upstream.clone(), adjoints);
            }
            Op::EmbedPatch { row, col } => {
                let host = input_val(0);
                let patch = input_val(1);
                let (hw, b) = (host.shape()[1], host.shape()[2]);
                let (pm, pn) = (patch.shape()[0], patch.shape()[1]);
                if want(0) {
                    let mut dh = upstream.clone();
                    for i in 0..pm {
                        let dst = ((row + i) * hw + col) * b;
                        dh.data_mut()[dst..dst + pn * b].fill(0.0);
                    }
                    add_to(0, dh, adjoints);
                }
                if want(1) {
                    let mut dp = Tensor::zeros(patch.shape().to_vec());
                    for i in 0..pm {
                        let src = ((row + i) * hw + col) * b;
                        let dst = i * pn * b;
                        dp.data_mut()[dst..dst + pn * b]
                            .copy_from_slice(&upstream.data()[src..src + pn * b]);
                    }
                    add_to(1, dp, adjoints);
                }
            }
            Op::SliceBands { keep } => {
                let x = input_val(0);
                let b = *x.shape().last().unwrap();
                let k = keep.len();
                let positions = x.numel() / b;
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for p in 0..positions {
                    for (j, &band) in keep.iter().enumerate() {
                        dx.data_mut()[p * b + band] += upstream.data()[p * k + j];
                    }
                }
                add_to(0, dx, adjoints);
            }
            Op::NegLogSigmoid => {
                let x = input_val(0);
                let dx = Tensor::from_fn(x.shape().to_vec(), |i| {
                    let s = sigmoid(x.data()[i] as f64);
                    (upstream.data()[i] as f64 * (s - 1.0)) as f32
                });
                add_to(0, dx, adjoints);
            }
            Op::BceLogit { target, fp_weight } => {
                let z = input_val(0).data()[0] as f64;
                let y = *target as f64;
                let w = *fp_weight as f64;
                let s = sigmoid(z);
                let dz = -y * (1.0 - s) + (1.0 - y) * w * s;
                let g = upstream.data()[0] as f64;
                add_to(
                    0,
                    Tensor::from_fn(input_val(0).shape().to_vec(), |_| (g * dz) as f32),
                    adjoints,
                );
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn vjp_conv2d(
    x: &Tensor,
    w: &Tensor,
    upstream: &Tensor,
    stride: usize,
    padding: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (upstream.shape()[0], upstream.shape()[1]);
    let g = upstream.data();

    let mut dx = if want_x {
        Some(vec![0.0f64; x.numel()])
    } else {
        None
    };
    let mut dw = if want_w {
        Some(vec![0.0f64; w.numel()])
    } else {
        None
    };
    let mut db = if want_b {
        Some(vec![0.0f64; cout])
    } else {
        None
    };

    for oy in 0..ho {
        for ox in 0..wo {
            let o_base = (oy * wo + ox) * cout;
            let gr = &g[o_base..o_base + cout];
            if let Some(db) = db.as_mut() {
                for (d, gv) in db.iter_mut().zip(gr) {
                    *d += *gv as f64;
                }
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let x_base = ((iy as usize) * wd + ix as usize) * cin;
                    let w_base = (ky * kw + kx) * cin * cout;
                    if let Some(dx) = dx.as_mut() {
                        for ci in 0..cin {
                            let wr = &w.data()[w_base + ci * cout..w_base + (ci + 1) * cout];
                            let mut acc = 0.0f64;
                            for (gv, wv) in gr.iter().zip(wr) {
                                acc += (*gv as f64) * (*wv as f64);
                            }
                            dx[x_base + ci] += acc;
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        for ci in 0..cin {
                            let xv = x.data()[x_base + ci] as f64;
                            let dst = &mut dw[w_base + ci * cout..w_base + (ci + 1) * cout];
                            for (d, gv) in dst.iter_mut().zip(gr) {
                                *d += xv * (*gv as f64);
                            }
                        }
                    }
                }
            }
        }
    }

    (
        dx.map(|v| Tensor::from_fn(x.shape().to_vec(), |i| v[i] as f32)),
        dw.map(|v| Tensor::from_fn(w.shape().to_vec(), |i| v[i] as f32)),
        db.map(|v| Tensor::from_fn(vec![cout], |i| v[i] as f32)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind<'a>(pairs: &[(&'a str, &'a Tensor)]) -> Bindings<'a> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn square_gradient() {
        // f(x) = x^2 via mul; grad at 3 is 6.
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1]).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.mean(y).unwrap();
        g.output("f", s).unwrap();
        let t = Tensor::new(vec![1], vec![3.0]).unwrap();
        let grads = g.gradient(&bind(&[("x", &t)]), &["x"], "f").unwrap();
        assert!((grads["x"].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relu_dead_region_gradient_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1]).unwrap();
        let y = g.relu(x).unwrap();
        let s = g.mean(y).unwrap();
        g.output("f", s).unwrap();
        let t = Tensor::new(vec![1], vec![-1.0]).unwrap();
        let grads = g.gradient(&bind(&[("x", &t)]), &["x"], "f").unwrap();
        assert_eq!(grads["x"].data()[0], 0.0);

        // Exactly at the kink the chosen subgradient is also 0.
        let t0 = Tensor::new(vec![1], vec![0.0]).unwrap();
        let grads = g.gradient(&bind(&[("x", &t0)]), &["x"], "f").unwrap();
        assert_eq!(grads["x"].data()[0], 0.0);
    }

    #[test]
    fn weighted_bce_gradient_at_zero_logit() {
        // Doubled false-positive branch: y=0, z=0 gives dL/dz = 2*sigmoid(0) = 1.
        let mut g = Graph::new();
        let z = g.leaf("z", vec![1]).unwrap();
        let l = g.bce_logit(z, 0.0, 2.0).unwrap();
        g.output("loss", l).unwrap();
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let grads = g.gradient(&bind(&[("z", &t)]), &["z"], "loss").unwrap();
        assert!((grads["z"].data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![2]).unwrap();
        let unused = g.leaf("unused", vec![3]).unwrap();
        let _ = unused;
        let n = g.sq_norm(x).unwrap();
        g.output("f", n).unwrap();
        let tx = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let tu = Tensor::new(vec![3], vec![5.0; 3]).unwrap();
        let grads = g
            .gradient(&bind(&[("x", &tx), ("unused", &tu)]), &["x", "unused"], "f")
            .unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_seed_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![2]).unwrap();
        let y = g.relu(x).unwrap();
        g.output("y", y).unwrap();
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = g.gradient(&bind(&[("x", &t)]), &["x"], "y").unwrap_err();
        assert!(err.to_string().contains("not scalar"));
    }

    #[test]
    fn unknown_wrt_name_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1]).unwrap();
        let s = g.mean(x).unwrap();
        g.output("f", s).unwrap();
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(g.gradient(&bind(&[("x", &t)]), &["nope"], "f").is_err());
    }

    #[test]
    fn min_dist_ties_break_to_lowest_index() {
        // Two identical columns: the gradient must flow to column 0 only.
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1, 1, 2]).unwrap();
        let cols = g.leaf("cols", vec![2, 2]).unwrap();
        let d = g.min_dist_cols(x, cols).unwrap();
        let m = g.mean(d).unwrap();
        g.output("f", m).unwrap();
        let tx = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let tc = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let grads = g
            .gradient(&bind(&[("x", &tx), ("cols", &tc)]), &["cols"], "f")
            .unwrap();
        let dc = grads["cols"].data();
        assert!(dc[0] != 0.0 && dc[2] != 0.0, "column 0 receives gradient");
        assert_eq!(dc[1], 0.0);
        assert_eq!(dc[3], 0.0);
    }
}
