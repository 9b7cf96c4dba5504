use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use iss_bench::gemm_operands;
use iss_core::bench::spmm_csr;
use iss_core::numerics::gemm;

fn products(c: &mut Criterion) {
    for hidden in [256, 512] {
        let mut g = c.benchmark_group(format!("lstm_product_h{hidden}"));
        g.sample_size(20);
        let dense = gemm_operands(hidden, 10, 0.0);
        g.bench_function("dense", |b| b.iter(|| gemm(&dense.dense, &dense.x).unwrap()));
        for s in [0.5, 0.8, 0.9, 0.95] {
            let ops = gemm_operands(hidden, 10, s);
            g.bench_with_input(BenchmarkId::new("csr", s), &ops, |b, o| b.iter(|| spmm_csr(&o.csr, &o.x).unwrap()));
            g.bench_with_input(BenchmarkId::new("structured", s), &ops, |b, o| {
                b.iter(|| gemm(&o.shrunk, &o.x_shrunk).unwrap())
            });
        }
        g.finish();
    }
}

criterion_group!(benches, products);
criterion_main!(benches);
