use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srf_core::capsulation::CapsulationConfig;
use srf_core::data::{generate_synthetic, normalize_corpus, Normalization, SyntheticConfig, Utterance};
use srf_core::exec::Execution;
use srf_core::model::{ModelConfig, SrfModel};
use srf_core::routing::{LayerConfig, Method, WindowConfig};
use srf_core::tensor::MaskMode;
use srf_core::trainer::{evaluate, utterance_gradient, utterance_rng};

fn setup() -> (SrfModel, Vec<Utterance>) {
    let layer = |in_height, in_depth, height, depth| LayerConfig {
        in_height,
        in_depth,
        height,
        depth,
        window: WindowConfig::new(2, 2),
        iterations: 1,
        method: Method::Sdr,
        mask_padding: None,
        mask_mode: MaskMode::Renormalize,
    };
    let config = ModelConfig {
        capsulation: CapsulationConfig::standard(16, 8, 16, 4),
        layers: vec![layer(16, 4, 12, 4), layer(12, 4, 7, 4)],
        layer_norm: true,
        output_scale: 10.0,
        norm_momentum: 0.1,
    };
    let model = SrfModel::new(config, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut data = generate_synthetic(&SyntheticConfig::new(6, 16, 7), 32).unwrap();
    normalize_corpus(&mut data, Normalization::Utterance).unwrap();
    (model, data)
}

fn bench(c: &mut Criterion) {
    let (model, data) = setup();
    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let name = format!("{exec:?}").to_lowercase();
        group.bench_with_input(BenchmarkId::new("gradient", &name), &exec, |b, &exec| {
            b.iter(|| {
                exec.map(&data, |i, u| {
                    let mut rng = utterance_rng(3, 0, i);
                    utterance_gradient(&model, u, 0, &mut rng).unwrap().loss
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("evaluate", &name), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, &data, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
