//! Parallel (rayon) against sequential execution of the per-image loops.
//!
//! `exec::map_slice` is the rayon path when the `parallel` feature is on;
//! `exec::seq::map_slice` is always sequential. Both produce identical
//! results, so only wall time differs.

use std::hint::black_box;

use cavlens::attribution::{self, ConceptProbe, HeadMode};
use cavlens::conceptmap::NormalizationRange;
use cavlens::synthdata::{self, Entity};
use cavlens::{cav, exec, ArchitectureSpec, Model, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 32;

fn setup(n: usize) -> (Model, Vec<Tensor>) {
    let arch = ArchitectureSpec::validation_with_widths(SIDE, synthdata::class_names(), [8, 16, 32]);
    let model = Model::init(arch, 3).expect("model");
    let images = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            synthdata::render_entity(Entity::ALL[i % 3], SIDE, &mut rng).0
        })
        .collect();
    (model, images)
}

fn batch_forward(c: &mut Criterion) {
    let (model, images) = setup(32);
    let mut g = c.benchmark_group("batch_forward_32");
    g.bench_function("parallel", |b| {
        b.iter(|| exec::map_slice(&images, |img| model.logits(black_box(img)).expect("forward")))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| exec::seq::map_slice(&images, |img| model.logits(black_box(img)).expect("forward")))
    });
    g.finish();
}

fn integrated_gradients(c: &mut Criterion) {
    let (model, images) = setup(8);
    let mut g = c.benchmark_group("layer_ig_8_images_300_steps");
    g.sample_size(10);
    let ig = |img: &Tensor| attribution::layer_ig_all_classes(&model, img, "conv6", 300).expect("ig");
    g.bench_function("parallel", |b| b.iter(|| exec::map_slice(&images, ig)));
    g.bench_function("sequential", |b| b.iter(|| exec::seq::map_slice(&images, ig)));
    g.finish();
}

fn concept_attribution(c: &mut Criterion) {
    let (model, images) = setup(8);
    let acts = cav::collect_activations(&model, &images, "conv6").expect("activations");
    let probes: Vec<ConceptProbe> = (0..3)
        .map(|k| {
            let pos: Vec<Tensor> = acts.iter().skip(k).step_by(3).cloned().collect();
            let c = cav::compute_cav("conv6", &format!("c{k}"), &pos, &acts).expect("cav");
            ConceptProbe::new(
                c.concept.clone(),
                cav::pool_cav(&c).expect("pool"),
                NormalizationRange { lower: 0.0, upper: 1.0 },
            )
        })
        .collect();
    let explain = |img: &Tensor| {
        attribution::explain_image(&model, img, &probes, &[0, 1, 2], 300, HeadMode::Multiclass).expect("explain")
    };
    let mut g = c.benchmark_group("explain_8_images_3_concepts");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| exec::map_slice(&images, explain)));
    g.bench_function("sequential", |b| b.iter(|| exec::seq::map_slice(&images, explain)));
    g.finish();
}

criterion_group!(benches, batch_forward, integrated_gradients, concept_attribution);
criterion_main!(benches);
