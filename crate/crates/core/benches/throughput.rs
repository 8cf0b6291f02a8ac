use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mixfunn::exec::Exec;
use mixfunn::funn::{build_model, ArchSpec};
use mixfunn::physics::{loss_and_grad, sample_collocation, LossOptions};
use mixfunn::problems::{burgers, damped_oscillator, BurgersParams, OscillatorParams};

fn modes(c: &mut Criterion) {
    let osc = damped_oscillator(&OscillatorParams::damped(), 20.0).unwrap();
    let bur = burgers(&BurgersParams::default()).unwrap();
    let cases = [
        ("oscillator_mix2funn", ArchSpec::oscillator_mix2funn().with_input_scale(vec![0.25]).unwrap(), &osc, 2048),
        ("burgers_mix2funn", ArchSpec::burgers_mix2funn(), &bur, 2048),
        ("oscillator_mlp", ArchSpec::oscillator_mlp(), &osc, 256),
    ];
    let mut group = c.benchmark_group("loss_and_grad");
    group.sample_size(10);
    for (name, spec, prob, n) in cases {
        let model = build_model(&spec, 0).unwrap();
        let batch = sample_collocation(&prob.domain, n, 1).unwrap();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let opts = LossOptions { exec, chunk: 128 };
            group.bench_with_input(BenchmarkId::new(name, format!("{exec:?}")), &opts, |b, opts| {
                b.iter(|| loss_and_grad(&model, prob, &batch, 1.0, None, opts).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, modes);
criterion_main!(benches);
