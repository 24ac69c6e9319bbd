use cavlens::model::{train, Activation, LayerKind, LayerSpec};
use cavlens::{ArchitectureSpec, Error, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch() -> ArchitectureSpec {
    let conv = |name: &str, filters| LayerSpec {
        name: name.into(),
        kind: LayerKind::Conv {
            filters,
            kernel: 3,
            stride: 1,
            padding: cavlens::tensor::Padding::Same,
            activation: Activation::Relu,
        },
    };
    ArchitectureSpec {
        input_shape: [8, 8, 3],
        class_names: vec!["red".into(), "blue".into()],
        layers: vec![
            conv("conv1", 4),
            conv("conv2", 4),
            LayerSpec {
                name: "gap".into(),
                kind: LayerKind::Gap,
            },
            LayerSpec {
                name: "logits".into(),
                kind: LayerKind::Dense {
                    units: 2,
                    activation: Activation::None,
                },
            },
        ],
    }
}

/// Noise images with a vertical bar, red for class 0 and blue for class 1.
fn bars(n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut data: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random_range(0.0..0.3)).collect();
            let x = rng.random_range(0..8);
            for y in 0..8 {
                data[(y * 8 + x) * 3 + 2 * label] = 1.0;
            }
            (Tensor::new(vec![8, 8, 3], data).unwrap(), label)
        })
        .unzip()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        batch_size: 8,
        epochs,
        seed: 4,
    }
}

#[test]
fn learns_a_separable_task_and_loss_falls() {
    let (x, y) = bars(64, 1);
    let (vx, vy) = bars(32, 2);
    let model = train(arch(), &x, &y, &vx, &vy, &config(25)).unwrap();
    let losses = &model.metadata.epoch_losses;
    assert_eq!(losses.len(), 25);
    assert!(losses[24] < 0.5 * losses[0], "{losses:?}");
    assert!(model.metadata.val_accuracy >= 0.9, "{:?}", model.metadata);
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let (x, y) = bars(24, 3);
    let a = train(arch(), &x, &y, &x, &y, &config(3)).unwrap();
    let b = train(arch(), &x, &y, &x, &y, &config(3)).unwrap();
    assert_eq!(a, b);
    let c = train(arch(), &x, &y, &x, &y, &TrainConfig { seed: 5, ..config(3) }).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let (x, y) = bars(24, 3);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..config(5)
    };
    match train(arch(), &x, &y, &x, &y, &cfg) {
        Err(Error::Divergence { lr, .. }) => assert_eq!(lr, 1e300),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn bad_inputs_are_rejected_before_training() {
    let (x, y) = bars(4, 3);
    assert!(matches!(train(arch(), &x, &[0, 1, 2, 0], &x, &y, &config(1)), Err(Error::UnknownClass { .. })));
    assert!(matches!(train(arch(), &[], &[], &x, &y, &config(1)), Err(Error::Empty(_))));
    let bad = TrainConfig { momentum: 1.0, ..config(1) };
    assert!(matches!(train(arch(), &x, &y, &x, &y, &bad), Err(Error::Config(_))));
}
