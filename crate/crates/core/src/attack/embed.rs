//! Patch embedding: rotate, scale, perturb, clamp, corrupt, and write the
//! rendered patch into a host cube. One graph construction serves both the
//! optimizer (for gradients) and eager evaluation, so the semantics cannot
//! drift between training and scoring.

use crate::attack::transform::Transform;
use crate::cubes::DataCube;
use crate::grad::{Bindings, Graph, NodeId, Tensor};
use crate::spectra::NUM_BANDS;
use crate::Result;

/// Extract the `[fh, fw, 13]` host window a transform writes into.
fn host_window(host: &DataCube, t: &Transform, fh: usize, fw: usize) -> Tensor {
    let w = host.width();
    let src = host.data().data();
    Tensor::from_fn(vec![fh, fw, NUM_BANDS], |i| {
        let (pos, b) = (i / NUM_BANDS, i % NUM_BANDS);
        let (y, x) = (pos / fw, pos % fw);
        src[((t.row + y) * w + (t.col + x)) * NUM_BANDS + b]
    })
}

/// Append the embedding of one patch node into a host node.
///
/// Pixelwise: `clamp(scale * rotated_patch + noise, 0, 1)`, with corrupted
/// bands reverting to host values, written at the transform's position. The
/// clamp is straight-through for gradients.
pub(crate) fn embed_graph(
    g: &mut Graph,
    host_node: NodeId,
    host: &DataCube,
    patch_node: NodeId,
    patch_dims: (usize, usize),
    t: &Transform,
) -> Result<NodeId> {
    let (fh, fw) = t.footprint(patch_dims.0, patch_dims.1);
    let rotated = g.rot90(patch_node, t.rotation_quarters)?;
    let scaled = g.scale(rotated, t.scale)?;
    let noise = g.constant(t.noise.clone());
    let noised = g.add(scaled, noise)?;
    let clamped = g.clamp_st(noised, 0.0, 1.0)?;

    let value = if t.corrupted_bands.iter().any(|&c| c) {
        let window = g.constant(host_window(host, t, fh, fw));
        let mask = Tensor::from_fn(vec![fh, fw, NUM_BANDS], |i| {
            if t.corrupted_bands[i % NUM_BANDS] {
                1.0
            } else {
                0.0
            }
        });
        let inv = Tensor::from_fn(vec![fh, fw, NUM_BANDS], |i| {
            if t.corrupted_bands[i % NUM_BANDS] {
                0.0
            } else {
                1.0
            }
        });
        let mask_node = g.constant(mask);
        let inv_node = g.constant(inv);
        let kept = g.mul(inv_node, clamped)?;
        let reverted = g.mul(mask_node, window)?;
        g.add(kept, reverted)?
    } else {
        clamped
    };
    g.embed_patch(host_node, value, t.row, t.col)
}

/// Eagerly embed one rendered patch.
pub fn embed(host: &DataCube, patch: &Tensor, t: &Transform) -> Result<DataCube> {
    embed_all(host, &[(patch, t)])
}

/// Eagerly embed several patches in order.
pub fn embed_all(host: &DataCube, patches: &[(&Tensor, &Transform)]) -> Result<DataCube> {
    let mut g = Graph::new();
    let mut node = g.constant(host.data().clone());
    for (i, (patch, t)) in patches.iter().enumerate() {
        let leaf = g.leaf(&format!("patch{i}"), patch.shape().to_vec())?;
        node = embed_graph(
            &mut g,
            node,
            host,
            leaf,
            (patch.shape()[0], patch.shape()[1]),
            t,
        )?;
    }
    g.output("embedded", node)?;
    let mut bindings = Bindings::new();
    let names: Vec<String> = (0..patches.len()).map(|i| format!("patch{i}")).collect();
    for (name, (patch, _)) in names.iter().zip(patches) {
        bindings.insert(name, patch);
    }
    let out = g.evaluate(&bindings)?.remove("embedded").expect("output");
    DataCube::new(out, host.ground_resolution_m())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubes::{synth_scene, DensitySpec, ScenegenConfig, SplitCounts, TerrainChoice};
    use crate::rng::{self, Domain};
    use rand::Rng;

    fn host() -> DataCube {
        let cfg = ScenegenConfig {
            size: 32,
            cloud_density: DensitySpec::Fixed(0.0),
            terrain: TerrainChoice::Hills,
            seed: 0,
            counts: SplitCounts {
                train: 1,
                val: 0,
                test: 0,
            },
            cloud_margin: 0.25,
        };
        synth_scene(3, &cfg).unwrap().0
    }

    fn random_patch(m: usize, n: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, Domain::Init, 0);
        Tensor::from_fn(vec![m, n, NUM_BANDS], |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn identity_transform_writes_the_patch_exactly() {
        let host = host();
        let patch = random_patch(5, 5, 1);
        let t = Transform::identity(5, 5, 4, 7);
        let out = embed(&host, &patch, &t).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                for b in 0..NUM_BANDS {
                    assert_eq!(
                        out.get(4 + y, 7 + x, b),
                        patch.data()[(y * 5 + x) * NUM_BANDS + b]
                    );
                }
            }
        }
    }

    #[test]
    fn pixels_outside_the_patch_are_bitwise_host() {
        let host = host();
        let patch = random_patch(6, 4, 2);
        let mut t = Transform::identity(6, 4, 10, 20);
        t.scale = 1.07;
        let out = embed(&host, &patch, &t).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside = (10..16).contains(&y) && (20..24).contains(&x);
                if !inside {
                    for b in 0..NUM_BANDS {
                        assert_eq!(out.get(y, x, b), host.get(y, x, b), "pixel ({y},{x})");
                    }
                }
            }
        }
    }

    #[test]
    fn full_corruption_reproduces_the_host_everywhere() {
        let host = host();
        let patch = random_patch(5, 5, 3);
        let mut t = Transform::identity(5, 5, 2, 2);
        t.corrupted_bands = [true; NUM_BANDS];
        let out = embed(&host, &patch, &t).unwrap();
        assert_eq!(out.data(), host.data());
    }

    #[test]
    fn two_quarter_turns_equal_a_half_turn() {
        let host = host();
        let patch = random_patch(4, 7, 4);

        // Rotate the patch by one quarter eagerly, then embed with one more.
        let mut g = Graph::new();
        let leaf = g.leaf("p", vec![4, 7, NUM_BANDS]).unwrap();
        let rot = g.rot90(leaf, 1).unwrap();
        g.output("r", rot).unwrap();
        let mut b = Bindings::new();
        b.insert("p", &patch);
        let rotated = g.evaluate(&b).unwrap().remove("r").unwrap();

        let via_two = embed(&host, &rotated, &Transform::with_rotation(7, 4, 1, 3, 3)).unwrap();
        let direct = embed(&host, &patch, &Transform::with_rotation(4, 7, 2, 3, 3)).unwrap();
        assert_eq!(via_two.data(), direct.data());
    }

    #[test]
    fn scaled_noised_values_stay_clamped() {
        let host = host();
        let patch = random_patch(5, 5, 5);
        let mut t = Transform::identity(5, 5, 0, 0);
        t.scale = 1.1;
        t.noise = Tensor::filled(vec![5, 5, NUM_BANDS], 0.05);
        let out = embed(&host, &patch, &t).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
