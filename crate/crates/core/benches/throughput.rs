use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qcmm::ansatz::KernelName;
use qcmm::data::{synth_generate, Sample, SynthSpec};
use qcmm::exec::Exec;
use qcmm::grad::backward;
use qcmm::harness::{evaluate, TrainConfig};
use qcmm::model::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn setup() -> (qcmm::data::DatasetBundle, ParamStore) {
    let spec = SynthSpec {
        n_per_class: 20,
        ..SynthSpec::default()
    };
    let bundle = synth_generate(&spec, 7).unwrap();
    let config = TrainConfig {
        kernel_name: KernelName::SO4,
        ..TrainConfig::default()
    };
    let model = config.model_spec(&bundle);
    let store = ParamStore::init(&model, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    (bundle, store)
}

fn throughput(c: &mut Criterion) {
    let (bundle, store) = setup();
    let batch: Vec<&Sample> = bundle.subset(&bundle.split.train).into_iter().take(16).collect();
    let mut group = c.benchmark_group("backward_batch16");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| backward(&batch, &store, e).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate_test_split");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| evaluate(&store, &bundle, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, throughput);
criterion_main!(benches);
