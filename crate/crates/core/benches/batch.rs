use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ddit::conditioning::Modality;
use ddit::dit::{DiT, ModelConfig};
use ddit::objectives::{loss_and_grad, DrawKey, LossConfig, Objective, TrainSample};
use ddit::par::Exec;
use ddit::raster::Planar;
use ddit::rng::{self, Stream};

fn latents(n: usize, c: usize) -> Vec<Planar<f32>> {
    (0..n)
        .map(|k| {
            let mut r = rng::keyed(1, Stream::Eval, k as u64, 0);
            Planar::from_vec(c, 8, 8, rng::normal_vec(&mut r, c * 64)).unwrap()
        })
        .collect()
}

fn train_batch(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let z = latents(32, cfg.latent_channels);
    let cap = [1u32, 4, 8, 12, 15];
    let batch: Vec<TrainSample<'_, f32>> = z
        .iter()
        .enumerate()
        .map(|(i, z0)| TrainSample {
            z0,
            z_c: &z[(i + 1) % z.len()],
            caption: &cap,
            modality: Modality::Mask,
        })
        .collect();
    let loss = LossConfig::new(Objective::Ddpm);
    let key = DrawKey {
        seed: 0,
        step: 0,
        first_index: 0,
    };
    let mut group = c.benchmark_group("loss_and_grad_toy_b32");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let model = DiT::new(cfg.clone()).unwrap().with_exec(exec);
        let params: Vec<f32> = model.init_params();
        let label = format!("{exec:?}").to_lowercase();
        group.bench_with_input(BenchmarkId::from_parameter(label), &exec, |b, _| {
            b.iter(|| loss_and_grad(&loss, &model, &params, &batch, key, 1.0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_batch);
criterion_main!(benches);
