//! Property suite for the differentiation engine: every primitive's
//! reverse-mode gradient agrees with central differences at random
//! non-kink points, and evaluation is pure.

use std::collections::HashMap;

use cloudcube::grad::{finite_difference_check, Bindings, FdConfig, Graph, Tensor};
use cloudcube::rng::{self, Domain};
use rand::Rng;

fn random_tensor(shape: Vec<usize>, lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, Domain::Eval, 0);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Random values bounded away from zero, for ops with a kink there.
fn random_nonkink(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, Domain::Eval, 1);
    Tensor::from_fn(shape, |_| {
        let mag: f32 = r.random_range(0.1..1.0);
        if r.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn fd_cfg(seed: u64) -> FdConfig {
    FdConfig {
        step: 1e-3,
        rel_tol: 1e-3,
        abs_tol: 1e-6,
        max_coords_per_leaf: Some(100),
        seed,
    }
}

fn check(graph: &Graph, bindings: &Bindings, wrt: &[&str], seed: u64) {
    let report = finite_difference_check(graph, bindings, wrt, "f", &fd_cfg(seed)).unwrap();
    assert!(
        report.pass,
        "fd mismatch (max rel err {:.3e}): {:?}",
        report.max_rel_err,
        report.failures().take(3).collect::<Vec<_>>()
    );
    assert!(
        report.checked >= 50,
        "too few checked coordinates: {} checked, {} skipped",
        report.checked,
        report.skipped
    );
}

#[test]
fn fd_conv2d() {
    for (seed, stride, padding) in [(1u64, 1usize, 1usize), (2, 2, 0), (3, 1, 0)] {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![6, 6, 3]).unwrap();
        let w = g.leaf("w", vec![3, 3, 3, 4]).unwrap();
        let b = g.leaf("b", vec![4]).unwrap();
        let y = g.conv2d(x, w, b, stride, padding).unwrap();
        let f = g.sq_norm(y).unwrap();
        g.output("f", f).unwrap();
        let tx = random_tensor(vec![6, 6, 3], -1.0, 1.0, seed * 10);
        let tw = random_tensor(vec![3, 3, 3, 4], -0.5, 0.5, seed * 10 + 1);
        let tb = random_tensor(vec![4], -0.5, 0.5, seed * 10 + 2);
        let bindings: Bindings = [("x", &tx), ("w", &tw), ("b", &tb)].into_iter().collect();
        check(&g, &bindings, &["x", "w", "b"], seed);
    }
}

#[test]
fn fd_dense() {
    let mut g = Graph::new();
    let x = g.leaf("x", vec![12]).unwrap();
    let w = g.leaf("w", vec![5, 12]).unwrap();
    let b = g.leaf("b", vec![5]).unwrap();
    let y = g.dense(x, w, b).unwrap();
    let f = g.sq_norm(y).unwrap();
    g.output("f", f).unwrap();
    let tx = random_tensor(vec![12], -1.0, 1.0, 20);
    let tw = random_tensor(vec![5, 12], -0.5, 0.5, 21);
    let tb = random_tensor(vec![5], -0.5, 0.5, 22);
    let bindings: Bindings = [("x", &tx), ("w", &tw), ("b", &tb)].into_iter().collect();
    check(&g, &bindings, &["x", "w", "b"], 23);
}

#[test]
fn fd_max_pool2() {
    let mut g = Graph::new();
    let x = g.leaf("x", vec![6, 6, 2]).unwrap();
    let y = g.max_pool2(x).unwrap();
    let f = g.sq_norm(y).unwrap();
    g.output("f", f).unwrap();
    // Well-separated values keep pooling away from argmax ties.
    let mut r = rng::stream(30, Domain::Eval, 0);
    let mut vals: Vec<f32> = (0..72).map(|i| i as f32 * 0.05 - 1.8).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let tx = Tensor::new(vec![6, 6, 2], vals).unwrap();
    let bindings: Bindings = [("x", &tx)].into_iter().collect();
    check(&g, &bindings, &["x"], 31);
}

#[test]
fn fd_relu() {
    let mut g = Graph::new();
    let x = g.leaf("x", vec![64]).unwrap();
    let y = g.relu(x).unwrap();
    let f = g.sq_norm(y).unwrap();
    g.output("f", f).unwrap();
    let tx = random_nonkink(vec![64], 40);
    let bindings: Bindings = [("x", &tx)].into_iter().collect();
    check(&g, &bindings, &["x"], 41);
}

#[test]
fn fd_sigmoid_and_neg_log_sigmoid() {
    let mut g = Graph::new();
    let x = g.leaf("x", vec![64]).unwrap();
    let s = g.sigmoid(x).unwrap();
    let nls = g.neg_log_sigmoid(x).unwrap();
    let sum = g.add(s, nls).unwrap();
    let f = g.sq_norm(sum).unwrap();
    g.output("f", f).unwrap();
    let tx = random_tensor(vec![64], -4.0, 4.0, 50);
    let bindings: Bindings = [("x", &tx)].into_iter().collect();
    check(&g, &bindings, &["x"], 51);
}

#[test]
fn fd_softmax() {
    let mut g = Graph::new();
    let x = g.leaf("x", vec![8, 8]).unwrap();
    let y = g.softmax_last(x).unwrap();
    let f = g.sq_norm(y).unwrap();
    g.output("f", f).unwrap();
    let tx = random_tensor(vec![8, 8], -2.0, 2.0, 60);
    let bindings: Bindings = [("x", &tx)].into_iter().collect();
    check(&g, &bindings, &["x"], 61);
}

#[test]
fn fd_elementwise_and_reductions() {
    let mut g = Graph::new();
    let a = g.leaf("a", vec![25]).unwrap();
    let b = g.leaf("b", vec![25]).unwrap();
    let sum = g.add(a, b).unwrap();
    let prod = g.mul(sum, a).unwrap();
    let scaled = g.affine(prod, 0.7, 0.1).unwrap();
    let m = g.mean(scaled).unwrap();
    let n2 = g.sq_norm(scaled).unwrap();
    let l2 = g.l2_norm(scaled).unwrap();
    let t1 = g.add(m, n2).unwrap();
    let f = g.add(t1, l2).unwrap();
    g.output("f", f).unwrap();
    let ta = random_tensor(vec![25], -1.0, 1.0, 70);
    let tb = random_tensor(vec![25], -1.0, 1.0, 71);
    let bindings: Bindings = [("a", &ta), ("b", &tb)].into_iter().collect();
    check(&g, &bindings, &["a", "b"], 72);
}

#[test]
fn fd_ln() {
    let mut g = Graph::new();
    let x = g.leaf("x", vec![64]).unwrap();
    let y = g.ln(x).unwrap();
    let f = g.sq_norm(y).unwrap();
    g.output("f", f).unwrap();
    let tx = random_tensor(vec![64], 0.1, 2.0, 80);
    let bindings: Bindings = [("x", &tx)].into_iter().collect();
    check(&g, &bindings, &["x"], 81);
}

#[test]
fn fd_min_dist_cols() {
    let mut g = Graph::new();
    let x = g.leaf("x", vec![4, 4, 3]).unwrap();
    let c = g.leaf("c", vec![3, 5]).unwrap();
    let d = g.min_dist_cols(x, c).unwrap();
    let f = g.mean(d).unwrap();
    g.output("f", f).unwrap();
    let tx = random_tensor(vec![4, 4, 3], 0.0, 1.0, 90);
    let tc = random_tensor(vec![3, 5], 0.0, 1.0, 91);
    let bindings: Bindings = [("x", &tx), ("c", &tc)].into_iter().collect();
    check(&g, &bindings, &["x", "c"], 92);
}

#[test]
fn fd_project_cols() {
    let mut g = Graph::new();
    let c = g.leaf("c", vec![6, 4]).unwrap();
    let x = g.leaf("x", vec![3, 3, 4]).unwrap();
    let y = g.project_cols(c, x).unwrap();
    let f = g.sq_norm(y).unwrap();
    g.output("f", f).unwrap();
    let tc = random_tensor(vec![6, 4], 0.0, 1.0, 100);
    let tx = random_tensor(vec![3, 3, 4], -1.0, 1.0, 101);
    let bindings: Bindings = [("c", &tc), ("x", &tx)].into_iter().collect();
    check(&g, &bindings, &["c", "x"], 102);
}

#[test]
fn fd_data_movement_ops() {
    // rot90 + slice_bands + embed_patch chained into one scalar.
    let mut g = Graph::new();
    let host = g.leaf("host", vec![6, 6, 4]).unwrap();
    let patch = g.leaf("patch", vec![3, 3, 4]).unwrap();
    let rotated = g.rot90(patch, 1).unwrap();
    let embedded = g.embed_patch(host, rotated, 2, 1).unwrap();
    let sliced = g.slice_bands(embedded, &[0, 2]).unwrap();
    let f = g.sq_norm(sliced).unwrap();
    g.output("f", f).unwrap();
    let th = random_tensor(vec![6, 6, 4], 0.0, 1.0, 110);
    let tp = random_tensor(vec![3, 3, 4], 0.0, 1.0, 111);
    let bindings: Bindings = [("host", &th), ("patch", &tp)].into_iter().collect();
    check(&g, &bindings, &["host", "patch"], 112);
}

#[test]
fn fd_clamp_st_in_range() {
    let mut g = Graph::new();
    let x = g.leaf("x", vec![64]).unwrap();
    let y = g.clamp_st(x, 0.0, 1.0).unwrap();
    let f = g.sq_norm(y).unwrap();
    g.output("f", f).unwrap();
    let tx = random_tensor(vec![64], 0.1, 0.9, 120);
    let bindings: Bindings = [("x", &tx)].into_iter().collect();
    check(&g, &bindings, &["x"], 121);
}

#[test]
fn fd_bce_logit() {
    for (seed, target) in [(130u64, 0.0f32), (131, 1.0)] {
        let mut g = Graph::new();
        let z = g.leaf("z", vec![1]).unwrap();
        let f = g.bce_logit(z, target, 2.0).unwrap();
        g.output("f", f).unwrap();
        let tz = random_tensor(vec![1], -3.0, 3.0, seed);
        let bindings: Bindings = [("z", &tz)].into_iter().collect();
        let report =
            finite_difference_check(&g, &bindings, &["z"], "f", &fd_cfg(seed)).unwrap();
        assert!(report.pass, "bce fd failed: {:?}", report.entries);
        assert_eq!(report.checked, 1);
    }
}

#[test]
fn evaluate_and_gradient_are_pure() {
    let mut g = Graph::new();
    let x = g.leaf("x", vec![4, 4, 3]).unwrap();
    let w = g.leaf("w", vec![2, 2, 3, 2]).unwrap();
    let b = g.leaf("b", vec![2]).unwrap();
    let c = g.conv2d(x, w, b, 1, 0).unwrap();
    let r = g.relu(c).unwrap();
    let f = g.sq_norm(r).unwrap();
    g.output("f", f).unwrap();
    let tx = random_tensor(vec![4, 4, 3], -1.0, 1.0, 140);
    let tw = random_tensor(vec![2, 2, 3, 2], -1.0, 1.0, 141);
    let tb = random_tensor(vec![2], -1.0, 1.0, 142);
    let bindings: Bindings = [("x", &tx), ("w", &tw), ("b", &tb)].into_iter().collect();

    let e1 = g.evaluate(&bindings).unwrap();
    let e2 = g.evaluate(&bindings).unwrap();
    assert_eq!(e1["f"], e2["f"], "evaluate must be bitwise deterministic");

    let g1 = g.gradient(&bindings, &["x", "w"], "f").unwrap();
    let g2 = g.gradient(&bindings, &["x", "w"], "f").unwrap();
    assert_eq!(g1["x"], g2["x"]);
    assert_eq!(g1["w"], g2["w"]);
}

#[test]
fn softmax_simplex_property_random_logits() {
    let mut r = rng::stream(150, Domain::Eval, 0);
    for case in 0..200 {
        let q = r.random_range(2..12);
        let scale = 10f32.powi(r.random_range(-2..4));
        let t = Tensor::from_fn(vec![q], |_| r.random_range(-1.0f32..1.0) * scale);
        let mut g = Graph::new();
        let x = g.leaf("x", vec![q]).unwrap();
        let s = g.softmax_last(x).unwrap();
        g.output("s", s).unwrap();
        let mut b: Bindings = HashMap::new();
        b.insert("x", &t);
        let out = g.evaluate(&b).unwrap();
        let sum: f64 = out["s"].iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6, "case {case}: sum {sum}");
        assert!(out["s"].iter().all(|&v| v >= 0.0), "case {case}");
    }
}
