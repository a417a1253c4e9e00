use criterion::{criterion_group, criterion_main, Criterion};

use taskmap::scheduler::{matmul_space, ScheduleConfig};
use taskmap::tuner::{tune, TuneOptions, Workload};

fn tune_matmul(c: &mut Criterion) {
    let workload = Workload::Matmul { m: 48, n: 40, k: 32 };
    // every 8th point keeps one sample under a few seconds
    let configs: Vec<ScheduleConfig> = matmul_space()
        .into_iter()
        .step_by(8)
        .map(ScheduleConfig::Matmul)
        .collect();
    let mut group = c.benchmark_group("tune_matmul_48x40x32");
    group.sample_size(10);
    for parallel in [true, false] {
        let opts = TuneOptions {
            parallel,
            configs: Some(configs.clone()),
            ..TuneOptions::default()
        };
        let name = if parallel { "parallel" } else { "sequential" };
        group.bench_function(name, |b| b.iter(|| tune(&workload, &opts).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, tune_matmul);
criterion_main!(benches);
