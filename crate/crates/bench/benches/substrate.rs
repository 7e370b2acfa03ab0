use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion as Bench};
use iceprune::data::{generate_synthetic, Split, SyntheticSpec};
use iceprune::pruning::score_structures;
use iceprune::{max_lr, reference_cnn, Criterion, LrHyper, Network};

fn desk() -> (Network, iceprune::Dataset) {
    let spec = SyntheticSpec {
        per_class: 13,
        ..Default::default()
    };
    let data = generate_synthetic(&spec, Split::Train).unwrap();
    (Network::new(vec![3, 16, 16], &reference_cnn(10), 1).unwrap(), data)
}

fn forward_backward(c: &mut Bench) {
    let (net, data) = desk();
    let idx: Vec<usize> = (0..128).collect();
    let (x, y) = data.batch(&idx);
    c.bench_function("forward_128", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    c.bench_function("loss_and_grad_128", |b| b.iter(|| net.loss_and_grad(black_box(&x), &y).unwrap()));
    let mut frozen = net.clone();
    frozen.set_frozen(0, true);
    frozen.set_frozen(3, true);
    c.bench_function("loss_and_grad_128_conv_frozen", |b| b.iter(|| frozen.loss_and_grad(black_box(&x), &y).unwrap()));
}

fn scheduler(c: &mut Bench) {
    let h = LrHyper::new(0.001, 0.0005, 0.35, 2.0).unwrap();
    c.bench_function("max_lr", |b| b.iter(|| max_lr(black_box(0.42), &h).unwrap()));
}

fn scoring(c: &mut Bench) {
    let (net, data) = desk();
    for crit in [
        Criterion::L1Norm,
        Criterion::Entropy {
            calib_batch_size: 128,
            histogram_bins: 32,
        },
        Criterion::MeanActivation { calib_batch_size: 128 },
    ] {
        c.bench_function(&format!("score_{}_conv16", crit.name()), |b| {
            b.iter(|| score_structures(&net, 3, &crit, Some(&data)).unwrap())
        });
    }
}

criterion_group!(benches, forward_backward, scheduler, scoring);
criterion_main!(benches);
