use criterion::{criterion_group, criterion_main, Criterion};
use funcnet::tensor::Graph;
use funcnet_bench::random_tensor;

fn conv(c: &mut Criterion) {
    let x = random_tensor(&[8, 8, 16, 16, 16], 1);
    let w = random_tensor(&[16, 8, 4, 4, 4], 2);
    let b = random_tensor(&[16], 3);
    c.bench_function("conv3d forward 8x8x16^3", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
            let y = g.conv3d(xv, wv, bv, 2, 1).unwrap();
            g.value(y).numel()
        })
    });
    c.bench_function("conv3d forward+backward 8x8x16^3", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let bv = g.leaf(b.clone(), true);
            let y = g.conv3d(xv, wv, bv, 2, 1).unwrap();
            let l = g.sum(y);
            g.backward(l).unwrap();
        })
    });
    let h = random_tensor(&[8, 16, 8, 8, 8], 4);
    let wt = random_tensor(&[16, 8, 4, 4, 4], 5);
    let bt = random_tensor(&[8], 6);
    c.bench_function("conv_transpose3d forward 8x16x8^3", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (hv, wv, bv) = (g.input(h.clone()), g.input(wt.clone()), g.input(bt.clone()));
            let y = g.conv_transpose3d(hv, wv, bv, 2, 1).unwrap();
            g.value(y).numel()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv
}
criterion_main!(benches);
