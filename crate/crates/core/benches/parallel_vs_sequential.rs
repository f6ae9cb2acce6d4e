use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sart_core::data::{generate_dataset, LabelMode, Task, TaskSpec};
use sart_core::diagnostics::{score_dataset, validation_gradient};
use sart_core::model::{init_params, predict_answers, ModelConfig};
use sart_core::numeric::{Rng, Stream};
use sart_core::par::Exec;
use sart_core::surgery::SartConfig;

fn bench(c: &mut Criterion) {
    let data = generate_dataset(&TaskSpec::new(Task::MathArithmetic).with_label_mode(LabelMode::ShortcutLabels), 0).unwrap();
    let params = init_params(ModelConfig::small(), &mut Rng::new(0, Stream::Init)).unwrap();
    let val = &data.val[..256];
    let train = &data.train[..128];
    let g_v = validation_gradient(&params, val, Exec::Sequential).unwrap();
    let cfg = SartConfig::default();

    let mut group = c.benchmark_group("exec");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let name = format!("{exec:?}").to_lowercase();
        group.bench_with_input(BenchmarkId::new("validation_gradient", &name), &exec, |b, &e| {
            b.iter(|| validation_gradient(&params, val, e).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("predict_answers", &name), &exec, |b, &e| {
            b.iter(|| predict_answers(&params, &data.test_clean, e).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("score_dataset", &name), &exec, |b, &e| {
            b.iter(|| score_dataset(&params, train, &g_v, &cfg, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
