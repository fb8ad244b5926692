use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use weave_bench::{attention_inputs, toy};
use weave_core::conditioning::masked_cross_attention;
use weave_core::distillation::{DistillConfig, Particle, SceneParticle};
use weave_core::geometry::{sample_viewpoints, ViewpointConfig};
use weave_core::raster::{rasterize, shade};
use weave_core::score_models::{ScoreModel, TrainableScore, UNet, UNetAdapter, UNetConfig};
use weave_core::TextureField;

fn raster(c: &mut Criterion) {
    let (scene, _) = toy();
    let cam = sample_viewpoints(&scene, 1, 0, &ViewpointConfig::default()).unwrap().remove(0);
    let field = TextureField::with_defaults(0);
    c.bench_function("rasterize_64", |b| b.iter(|| rasterize(&scene.mesh, &cam, (64, 64)).unwrap()));
    let gb = rasterize(&scene.mesh, &cam, (64, 64)).unwrap();
    c.bench_function("shade_64", |b| b.iter(|| shade(&gb, &field)));
}

fn attention(c: &mut Criterion) {
    let a = attention_inputs(0);
    c.bench_function("masked_cross_attention_256x2", |b| {
        b.iter(|| masked_cross_attention(&a.queries, &a.tokens, &a.masks, &a.weights, false).unwrap())
    });
}

fn denoisers(c: &mut Criterion) {
    let (scene, refs) = toy();
    let mut net = UNet::new(UNetConfig::teacher(), 0).unwrap();
    net.pretrained = true;
    let net = Arc::new(net);
    let config = DistillConfig {
        viewpoints: 4,
        ..DistillConfig::scaled(100)
    };
    let particle = SceneParticle::new(scene, &refs, &config).unwrap();
    let r = particle.render(0).unwrap();
    let adapter = UNetAdapter::new(net.clone(), 4, 1e-4, 0).unwrap();
    let mut group = c.benchmark_group("denoiser");
    group.sample_size(10);
    group.bench_function("render_step_inputs", |b| b.iter(|| particle.render(0).unwrap()));
    group.bench_function("teacher_forward", |b| b.iter(|| net.predict(&r.latent, 0.5, &r.cond).unwrap()));
    group.bench_function("adapter_loss_and_grad", |b| {
        b.iter(|| adapter.loss_and_grad(&r.latent, 0.5, &r.latent, &r.cond).unwrap())
    });
    group.finish();
}

criterion_group!(benches, raster, attention, denoisers);
criterion_main!(benches);
