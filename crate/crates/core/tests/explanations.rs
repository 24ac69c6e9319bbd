mod common;

use cavlens::attribution::{self, ConceptProbe, HeadMode};
use cavlens::cav::{self, PooledCav};
use cavlens::conceptmap::{self, ConceptMap, NormalizationRange};
use cavlens::model::{Activation, LayerKind};
use cavlens::tensor::ops;
use cavlens::{Model, Tensor};
use common::{random_arch, random_image, random_model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (Model, Tensor, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(random_arch(&mut rng), &mut rng);
    let image = random_image(&model.architecture().input_shape, &mut rng);
    (model, image, rng)
}

/// Last conv layer, when it has a ReLU and is followed only by GAP and the
/// dense head.
fn relu_tail(model: &Model) -> Option<String> {
    let layers = &model.architecture().layers;
    let l = &layers[layers.len() - 3];
    matches!(
        l.kind,
        LayerKind::Conv {
            activation: Activation::Relu,
            ..
        }
    )
    .then(|| l.name.clone())
}

fn tensor_strategy(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ig_is_exact_on_an_affine_suffix(seed in any::<u64>(), steps in 2usize..40) {
        let (model, image, _) = setup(seed);
        let Some(conv) = relu_tail(&model) else { return Ok(()) };
        let layer = format!("{conv}_act");
        let weights = &model.params()[model.params().len() - 2];
        let classes = weights.shape()[1];
        let trace = model.trace(&image).unwrap();
        let x = trace.activation(&layer).unwrap();
        let (h, w, k) = x.hwc().unwrap();
        for c in 0..classes {
            let ig = attribution::layer_ig(&model, &image, &layer, c, steps).unwrap();
            prop_assert!(ig.residual.abs() <= 1e-12 * (1.0 + ig.logit_delta.abs()));
            for (i, a) in ig.attributions.data().iter().enumerate() {
                let expect = x.data()[i] * weights.data()[(i % k) * classes + c] / (h * w) as f64;
                prop_assert!((a - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ig_before_the_last_relu_misses_exactly_the_first_half_step(seed in any::<u64>(), steps in 2usize..40) {
        // Behind a ReLU the path is linear for alpha > 0 and the ReLU
        // gradient at alpha = 0 is zero, so the trapezoid rule drops exactly
        // the first half step of a constant integrand.
        let (model, image, _) = setup(seed);
        let Some(layer) = relu_tail(&model) else { return Ok(()) };
        for ig in attribution::layer_ig_all_classes(&model, &image, &layer, steps).unwrap() {
            let expect = -0.5 / (steps - 1) as f64 * ig.logit_delta;
            prop_assert!((ig.residual - expect).abs() <= 1e-12 * (1.0 + ig.logit_delta.abs()));
        }
    }

    #[test]
    fn gradcam_is_the_concept_map_of_pooled_gradients(seed in any::<u64>()) {
        let (model, image, mut rng) = setup(seed);
        let layers = model.architecture().explainable_layers().unwrap();
        let layer = &layers[rng.random_range(0..layers.len())];
        let class = rng.random_range(0..model.num_classes());
        let grads = model.logit_gradients(&image, layer, class).unwrap();
        let pooled = PooledCav { layer: layer.clone(), values: ops::gap(&grads).unwrap().into_data() };
        let (_, cap) = model.forward_with_capture(&image, &[layer]).unwrap();
        let via_cav = conceptmap::raw_concept_map(&pooled, &cap[layer.as_str()]).unwrap();
        prop_assert_eq!(via_cav, attribution::gradcam_map(&model, &image, layer, class).unwrap());
    }

    #[test]
    fn cav_is_antisymmetric(
        pos in prop::collection::vec(tensor_strategy(vec![3, 3, 4], -2.0, 2.0), 1..5),
        neg in prop::collection::vec(tensor_strategy(vec![3, 3, 4], -2.0, 2.0), 1..5),
    ) {
        let a = cav::compute_cav("l", "c", &pos, &neg).unwrap();
        let b = cav::compute_cav("l", "c", &neg, &pos).unwrap();
        for (x, y) in a.direction.data().iter().zip(b.direction.data()) {
            prop_assert!((x + y).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalized_weights_ignore_positive_scale(values in prop::collection::vec(-3.0f64..3.0, 1..12), s in 0.01f64..100.0) {
        let p = PooledCav { layer: "l".into(), values: values.clone() };
        let q = PooledCav { layer: "l".into(), values: values.iter().map(|v| v * s).collect() };
        let (a, b) = (cav::normalize_pooled(&p), cav::normalize_pooled(&q));
        prop_assert_eq!(a.inactive, b.inactive);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn pooling_is_linear(
        d1 in tensor_strategy(vec![4, 3, 5], -2.0, 2.0),
        d2 in tensor_strategy(vec![4, 3, 5], -2.0, 2.0),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mk = |d: Tensor| cav::Cav { layer: "l".into(), concept: "c".into(), direction: d, positives: 1, negatives: 1 };
        let mixed = d1.scale(a).add(&d2.scale(b)).unwrap();
        let p1 = cav::pool_cav(&mk(d1)).unwrap();
        let p2 = cav::pool_cav(&mk(d2)).unwrap();
        let pm = cav::pool_cav(&mk(mixed)).unwrap();
        for ((m, x), y) in pm.values.iter().zip(&p1.values).zip(&p2.values) {
            prop_assert!((m - (a * x + b * y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalization_is_monotone_and_bounded(
        base in tensor_strategy(vec![5, 5], 0.0, 3.0),
        bump in tensor_strategy(vec![5, 5], 0.0, 1.0),
        lower in 0.0f64..1.0,
        width in 0.01f64..2.0,
    ) {
        let range = NormalizationRange { lower, upper: lower + width };
        let small = ConceptMap { layer: "l".into(), values: base.clone() };
        let large = ConceptMap { layer: "l".into(), values: base.add(&bump).unwrap() };
        let a = conceptmap::normalize_map(&small, range).unwrap();
        let b = conceptmap::normalize_map(&large, range).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            prop_assert!((0.0..=1.0).contains(x) && (0.0..=1.0).contains(y));
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn larger_mask_never_lowers_the_attribution(
        ig in tensor_strategy(vec![4, 4, 3], 0.0, 1.0),
        mask in tensor_strategy(vec![4, 4], 0.0, 1.0),
        bump in tensor_strategy(vec![4, 4], 0.0, 1.0),
        weights in prop::collection::vec(0.0f64..1.0, 3),
    ) {
        let bigger = mask.add(&bump).unwrap().map(|v| v.min(1.0));
        let a = attribution::masked_weighted_sum(&mask, &weights, &ig).unwrap();
        let b = attribution::masked_weighted_sum(&bigger, &weights, &ig).unwrap();
        prop_assert!(a <= b + 1e-12);
    }

    #[test]
    fn attributions_stay_within_the_normalized_logit_delta(seed in any::<u64>(), lower in 0.0f64..0.5, width in 0.1f64..2.0) {
        let (model, image, mut rng) = setup(seed);
        let layers = model.architecture().explainable_layers().unwrap();
        let layer = layers[rng.random_range(0..layers.len())].clone();
        let (_, cap) = model.forward_with_capture(&image, &[&layer]).unwrap();
        let k = cap[&layer].hwc().unwrap().2;
        let probes: Vec<ConceptProbe> = (0..3)
            .map(|i| {
                let values = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                ConceptProbe::new(format!("c{i}"), PooledCav { layer: layer.clone(), values }, NormalizationRange { lower, upper: lower + width })
            })
            .collect();
        let out = attribution::explain_image(&model, &image, &probes, &[0, 1, 2], 20, HeadMode::Multiclass).unwrap();
        for l in &out {
            for a in &l.attributions {
                let n = l.normalized.normalization.normalized[a.class_index];
                prop_assert!((0.0..=1.0).contains(&a.value));
                prop_assert!(a.value <= n + 1e-12, "{} > {n}", a.value);
            }
        }
    }
}

#[test]
fn zero_feature_maps_give_zero_attributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = loop {
        let m = random_model(random_arch(&mut rng), &mut rng);
        if relu_tail(&m).is_some() {
            break m;
        }
    };
    let layer = format!("{}_act", relu_tail(&model).unwrap());
    // Zero the last conv's kernels and bias (the two tensors before the
    // dense head) so its maps vanish for every input.
    let mut params: Vec<Tensor> = model.params().iter().map(|p| (**p).clone()).collect();
    let n = params.len();
    for p in &mut params[n - 4..n - 2] {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let zeroed = Model::from_parts(model.architecture().clone(), params, model.metadata.clone()).unwrap();
    let image = random_image(&model.architecture().input_shape, &mut rng);
    for ig in attribution::layer_ig_all_classes(&zeroed, &image, &layer, 30).unwrap() {
        assert_eq!(ig.logit_delta, 0.0);
        assert!(ig.attributions.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn residual_shrinks_as_steps_grow_before_the_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = loop {
        let m = random_model(random_arch(&mut rng), &mut rng);
        if relu_tail(&m).is_some() {
            break m;
        }
    };
    let layer = relu_tail(&model).unwrap();
    let image = random_image(&model.architecture().input_shape, &mut rng);
    let residuals: Vec<f64> = [50, 100, 200, 400, 800]
        .iter()
        .map(|&s| attribution::layer_ig(&model, &image, &layer, 0, s).unwrap().relative_residual())
        .collect();
    for w in residuals.windows(2) {
        assert!(w[1] < w[0], "{residuals:?}");
    }
    assert!(residuals[0] <= 0.05);
}
