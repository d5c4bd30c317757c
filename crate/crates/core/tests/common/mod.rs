#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use structprune::datasets::{encode_idx_images, encode_idx_labels, DatasetId};
use structprune::harness::DATA_DIR_ENV;
use structprune::models::{LayerKind, LayerSpec, ModelId, ModelSpec};
use structprune::numerics::{Tape, Tensor, Var};
use structprune::pruning::{MaskRegistry, Policy, PruneDecision};

/// Data root: `$STRUCTPRUNE_DATA_DIR`, else `<workspace>/data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn has_dataset(id: DatasetId) -> bool {
    let dir = id.resolve_dir(&data_root());
    match id {
        DatasetId::Mnist => dir.join("train-images-idx3-ubyte").is_file(),
        DatasetId::Cifar10 => dir.join("data_batch_1.bin").is_file(),
    }
}

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Learnable 28x28 images: class `k` lights up a horizontal band at a
/// class-specific row, plus noise.
pub fn synthetic_images(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k: u8 = rng.random_range(0..10);
        for y in 0..28 {
            for _x in 0..28 {
                let band = y >= 2 + 2 * k as usize && y < 4 + 2 * k as usize;
                let base: u8 = if band { 200 } else { 10 };
                pixels.push(base.saturating_add(rng.random_range(0..50)));
            }
        }
        labels.push(k);
    }
    (pixels, labels)
}

/// Writes a small MNIST-layout dataset under `root/mnist`.
pub fn write_synthetic_mnist(root: &Path, n_train: usize, n_test: usize) {
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    for (n, seed, img, lab) in [
        (n_train, 1, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (n_test, 2, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let (p, l) = synthetic_images(n, seed);
        std::fs::write(dir.join(img), encode_idx_images(n, 28, 28, &p)).unwrap();
        std::fs::write(dir.join(lab), encode_idx_labels(&l)).unwrap();
    }
}

/// A small random conv/dense network; every weighted layer but the last is
/// prunable.
pub fn random_toy_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let c = rng.random_range(1..=3);
    let hw = rng.random_range(6..=10);
    let mut layers = Vec::new();
    let mut cur = (c, hw);
    let convs = rng.random_range(0..=2);
    for i in 0..convs {
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let c_out = rng.random_range(2..=5);
        let out = (cur.1 + 2 * pad - k) / stride + 1;
        if out < 2 {
            break;
        }
        layers.push(layer(
            &format!("conv{i}"),
            LayerKind::Conv2d {
                c_in: cur.0,
                c_out,
                k,
                stride,
                pad,
            },
            true,
        ));
        layers.push(layer(&format!("relu_c{i}"), LayerKind::Relu, false));
        cur = (c_out, out);
        if cur.1 >= 4 && rng.random_bool(0.5) {
            layers.push(layer(
                &format!("pool{i}"),
                LayerKind::MaxPool { k: 2, stride: 2 },
                false,
            ));
            cur.1 /= 2;
        }
    }
    layers.push(layer("flatten", LayerKind::Flatten, false));
    let mut feat = cur.0 * cur.1 * cur.1;
    for i in 0..rng.random_range(1..=2) {
        let out = rng.random_range(2..=8);
        layers.push(layer(
            &format!("fc{i}"),
            LayerKind::Dense { inp: feat, out },
            true,
        ));
        layers.push(layer(&format!("relu_f{i}"), LayerKind::Relu, false));
        feat = out;
    }
    layers.push(layer("head", LayerKind::Dense { inp: feat, out: 3 }, false));
    ModelSpec {
        id: ModelId::Lenet300,
        input: (c, hw, hw),
        layers,
        seed: 0,
    }
}

fn layer(name: &str, kind: LayerKind, prunable: bool) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind,
        prunable,
    }
}

/// Drops a random subset of units (never a whole layer).
pub fn random_masks(spec: &ModelSpec, rng: &mut ChaCha8Rng, cascade: bool) -> MaskRegistry {
    let mut m = MaskRegistry::new(spec, cascade);
    let layers = spec.weighted_specs();
    let mut units = Vec::new();
    for wl in m.prunable_layers() {
        let n = layers[wl].units();
        let drop = rng.random_range(0..n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..drop {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        units.extend(idx[..drop].iter().map(|&u| (wl, u)));
    }
    m.apply_decision(&PruneDecision {
        policy: Policy::Ilp,
        round: 1,
        units,
    })
    .unwrap();
    m
}

/// Runs `spec` on an all-ones input with all-ones parameters, zeroing only
/// the weights and biases of dropped units, and returns every layer's
/// output in order. Structurally dead elements come out exactly 0, live
/// ones strictly positive.
pub fn probe_activations(spec: &ModelSpec, masks: &MaskRegistry) -> Vec<Tensor<f64>> {
    let (c, h, w) = spec.input;
    let mut tape: Tape<f64> = Tape::new();
    let mut cur: Var = tape.constant(Tensor::ones(&[1, c, h, w]));
    let mut outs = Vec::new();
    let mut wl = 0;
    for l in &spec.layers {
        cur = match l.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                let ul = l.unit_len();
                let mut wt = vec![1.0; l.units() * ul];
                let mut b = vec![1.0; l.units()];
                for u in 0..l.units() {
                    if !masks.is_alive(wl, u) {
                        wt[u * ul..(u + 1) * ul].iter_mut().for_each(|v| *v = 0.0);
                        b[u] = 0.0;
                    }
                }
                let wv = tape.constant(Tensor::new(l.weight_shape(), wt).unwrap());
                let bv = tape.constant(Tensor::new(vec![l.units()], b).unwrap());
                wl += 1;
                match l.kind {
                    LayerKind::Dense { .. } => tape.linear(cur, wv, bv).unwrap(),
                    LayerKind::Conv2d { stride, pad, .. } => tape.conv2d(cur, wv, bv, stride, pad).unwrap(),
                    _ => unreachable!(),
                }
            }
            LayerKind::Relu => tape.relu(cur),
            LayerKind::MaxPool { k, stride } => tape.maxpool2d(cur, k, stride).unwrap(),
            LayerKind::Flatten => tape.flatten(cur).unwrap(),
        };
        outs.push(tape.value(cur).clone());
    }
    outs
}
