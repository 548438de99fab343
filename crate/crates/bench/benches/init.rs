use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qwha_bench::synthetic_layer;
use qwha_core::init::{initialize_on_basis, rank_equivalent_budget, AllocConfig, Basis, InitOptions};
use qwha_core::quantizer::{quant_error, quantize};
use qwha_core::{build_plan, GramAccumulator, QuantConfig, Strategy, TransformKind};
use std::hint::black_box;

fn initialization(c: &mut Criterion) {
    let mut group = c.benchmark_group("initialize");
    group.sample_size(10);
    for d in [128usize, 256] {
        let (w, x) = synthetic_layer(d, 1);
        let q = quantize(&w, QuantConfig::new(2, 64).unwrap()).unwrap();
        let dw = quant_error(&w, &q).unwrap();
        let mut acc = GramAccumulator::new(d);
        acc.accumulate(&x).unwrap();
        let calib = acc.factorize().unwrap();
        let plan = build_plan(TransformKind::Wht, d).unwrap();
        let basis = Basis::new(&calib, &plan).unwrap();
        let p = rank_equivalent_budget(d, d, 8);
        for strategy in [Strategy::AdaAlloc, Strategy::Magnitude] {
            let cfg = AllocConfig::with_strategy(strategy, 0);
            group.bench_with_input(BenchmarkId::new(strategy.as_str(), d), &d, |b, _| {
                b.iter(|| {
                    initialize_on_basis(black_box(&dw), &calib, &basis, &plan, p, &cfg, &InitOptions::default())
                        .unwrap()
                })
            });
        }
        group.bench_with_input(BenchmarkId::new("basis", d), &d, |b, _| {
            b.iter(|| Basis::new(black_box(&calib), &plan).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, initialization);
criterion_main!(benches);
