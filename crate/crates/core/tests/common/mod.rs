//! Random small networks and a finite-difference gradient checker.
//!
//! The networks are piecewise polynomial: between ReLU sign changes and
//! max-pool winner changes, logits are affine in any single parameter or
//! input pixel. A central difference is only an oracle when `x - h`, `x`
//! and `x + h` share one piece, so the checker compares the full
//! activation pattern of all three traces and skips straddling
//! coordinates (counted in [`GradCheck::kinks`]).

#![allow(dead_code)]

use cavlens::model::{Activation, LayerKind, LayerSpec, Trace};
use cavlens::tensor::OpKind;
use cavlens::{ArchitectureSpec, Model, Tensor};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cavlens::tensor::Padding;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, far above central-difference
/// rounding noise (`~1e-11 / FD_STEP`).
pub const REL_FLOOR: f64 = 1e-6;

pub fn class_names() -> Vec<String> {
    ["a", "b", "c"].iter().map(|s| s.to_string()).collect()
}

/// 1-4 conv layers of 1-16 filters with optional 2x2 pooling, GAP and a
/// three-way dense head. Input side 6-10, 1-3 channels.
pub fn random_arch(rng: &mut ChaCha8Rng) -> ArchitectureSpec {
    let mut side = rng.random_range(6..=10usize);
    let channels = rng.random_range(1..=3usize);
    let input_shape = [side, side, channels];
    let n_conv = rng.random_range(1..=4usize);
    let mut layers = Vec::new();
    for i in 0..n_conv {
        let kernel = *[1usize, 3].choose(rng).expect("non-empty");
        let padding = if side >= kernel + 2 && rng.random_bool(0.3) {
            Padding::Valid
        } else {
            Padding::Same
        };
        if padding == Padding::Valid {
            side -= kernel - 1;
        }
        let activation = if rng.random_bool(0.85) {
            Activation::Relu
        } else {
            Activation::None
        };
        layers.push(LayerSpec {
            name: format!("conv{}", i + 1),
            kind: LayerKind::Conv {
                filters: rng.random_range(1..=16),
                kernel,
                stride: 1,
                padding,
                activation,
            },
        });
        if i + 1 < n_conv && side >= 4 && rng.random_bool(0.3) {
            layers.push(LayerSpec {
                name: format!("pool{}", i + 1),
                kind: LayerKind::MaxPool { size: 2, stride: 2 },
            });
            side = (side - 2) / 2 + 1;
        }
    }
    layers.push(LayerSpec {
        name: "gap".into(),
        kind: LayerKind::Gap,
    });
    layers.push(LayerSpec {
        name: "logits".into(),
        kind: LayerKind::Dense {
            units: 3,
            activation: Activation::None,
        },
    });
    ArchitectureSpec {
        input_shape,
        class_names: class_names(),
        layers,
    }
}

/// He-initialised model with every parameter (biases included) jittered,
/// so no coordinate is structurally zero.
pub fn random_model(arch: ArchitectureSpec, rng: &mut ChaCha8Rng) -> Model {
    let base = Model::init(arch.clone(), rng.random()).expect("valid architecture");
    let jitter = Normal::new(0.0, 0.1).expect("positive std");
    let params = base
        .params()
        .iter()
        .map(|p| {
            let data = p.data().iter().map(|v| v + jitter.sample(rng)).collect();
            Tensor::new(p.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    Model::from_parts(arch, params, base.metadata.clone()).expect("same shapes")
}

pub fn random_image(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).expect("shape matches")
}

/// ReLU input signs and max-pool winners of every node in the trace.
pub fn pattern(trace: &Trace) -> Vec<usize> {
    let g = &trace.graph;
    let mut out = Vec::new();
    for id in g.ids() {
        match g.op(id) {
            OpKind::Relu(a) => out.extend(g.value(*a).data().iter().map(|&v| usize::from(v > 0.0))),
            OpKind::MaxPool { .. } => out.extend_from_slice(g.pool_winners(id).expect("pool records winners")),
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

fn sample_coords(n: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, limit).into_vec()
    }
}

/// Checks the cross-entropy parameter gradients and one logit's input
/// gradient against central differences on up to `per_tensor` random
/// coordinates of each tensor.
pub fn check_model(model: &Model, image: &Tensor, per_tensor: usize, rng: &mut ChaCha8Rng) -> GradCheck {
    let label = rng.random_range(0..model.num_classes());
    let base = pattern(&model.trace(image).expect("forward"));
    let (_, grads) = model.loss_gradients(image, label).expect("backward");
    let mut check = GradCheck::default();

    let params: Vec<Tensor> = model.params().iter().map(|p| (**p).clone()).collect();
    for (t, grad) in grads.iter().enumerate() {
        for i in sample_coords(grad.len(), per_tensor, rng) {
            let eval = |delta: f64| {
                let mut ps = params.clone();
                ps[t].data_mut()[i] += delta;
                let m = Model::from_parts(model.architecture().clone(), ps, model.metadata.clone()).expect("shapes");
                let same = pattern(&m.trace(image).expect("forward")) == base;
                (m.loss(image, label).expect("loss"), same)
            };
            let (up, same_up) = eval(FD_STEP);
            let (down, same_down) = eval(-FD_STEP);
            if !(same_up && same_down) {
                check.kinks += 1;
                continue;
            }
            check.record(grad.data()[i], (up - down) / (2.0 * FD_STEP));
        }
    }

    let class = rng.random_range(0..model.num_classes());
    let grad = model.input_gradient(image, class).expect("input gradient");
    for i in sample_coords(image.len(), per_tensor, rng) {
        let eval = |delta: f64| {
            let mut x = image.clone();
            x.data_mut()[i] += delta;
            let trace = model.trace(&x).expect("forward");
            (trace.logits().data()[class], pattern(&trace) == base)
        };
        let (up, same_up) = eval(FD_STEP);
        let (down, same_down) = eval(-FD_STEP);
        if !(same_up && same_down) {
            check.kinks += 1;
            continue;
        }
        check.record(grad.data()[i], (up - down) / (2.0 * FD_STEP));
    }
    check
}
