//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod gradcheck;

use iceprune::data::Split;
use iceprune::layer::LayerKind;
use iceprune::{Dataset, LayerSpec, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_cnn(filters: usize, units: usize, classes: usize, seed: u64) -> Network {
    Network::new(
        vec![2, 6, 6],
        &[
            LayerSpec::Conv2d { filters, kernel: 3, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units },
            LayerSpec::Relu,
            LayerSpec::Dense { units: classes },
        ],
        seed,
    )
    .unwrap()
}

pub fn random_masks(net: &mut Network, p: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in net.prunable_indices() {
        for s in 0..net.layer(l).structure_count() {
            if rng.random_bool(p) {
                net.mask_structure(l, s).unwrap();
            }
        }
    }
}

pub fn random_batch(net: &Network, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = net.input_shape().iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(net.input_shape());
    let x = Tensor::new(shape, (0..n * per).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..net.num_classes())).collect();
    (x, labels)
}

pub fn random_dataset(net: &Network, n: usize, seed: u64) -> Dataset {
    let (x, labels) = random_batch(net, n, seed);
    Dataset::new(net.input_shape().to_vec(), x.into_data(), labels, net.num_classes(), Split::Train).unwrap()
}

/// Per-weight retained flags derived from masks and the feeding layer's channels.
pub fn retained_oracle(net: &Network, layer: usize) -> Vec<bool> {
    let w = net.layer(layer).weight().unwrap();
    let out = w.shape()[0];
    let fan_in = w.len() / out;
    let mask = net.mask(layer).unwrap();
    let src = net.prunable_indices().into_iter().filter(|&s| s < layer).last();
    let src_mask = src.map(|s| net.mask(s).unwrap());
    (0..w.len())
        .map(|e| {
            let (o, j) = (e / fan_in, e % fan_in);
            let ch = src_mask.map_or(true, |m| m[j / (fan_in / m.len())]);
            mask[o] && ch
        })
        .collect()
}

pub fn l1_oracle(net: &Network, l: usize) -> Vec<f64> {
    let w = net.layer(l).weight().unwrap();
    let keep = retained_oracle(net, l);
    let fan_in = w.len() / w.shape()[0];
    (0..w.shape()[0])
        .map(|o| (0..fan_in).filter(|&j| keep[o * fan_in + j]).map(|j| w.data()[o * fan_in + j].abs() as f64).sum())
        .collect()
}

pub fn pooled_oracle(net: &Network, l: usize, calib: &Dataset, n: usize) -> Vec<Vec<f64>> {
    let tap = if net.layers().get(l + 1).map(|x| x.kind()) == Some(LayerKind::Relu) { l + 1 } else { l };
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = calib.batch(&idx);
    let acts = net.activations(&x, tap).unwrap();
    let s = net.layer(l).structure_count();
    let per = acts.row_len() / s;
    (0..s)
        .map(|f| (0..n).map(|i| acts.row(i)[f * per..(f + 1) * per].iter().map(|&v| v as f64).sum::<f64>() / per as f64).collect())
        .collect()
}

pub fn entropy_oracle(v: &[f64], bins: usize) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return 0.0;
    }
    let mut h = vec![0.0; bins];
    for &x in v {
        let b = (((x - lo) / (hi - lo)) * bins as f64) as usize;
        h[b.min(bins - 1)] += 1.0;
    }
    h.iter().filter(|&&c| c > 0.0).map(|&c| -(c / v.len() as f64) * (c / v.len() as f64).ln()).sum()
}

/// Counts retained parameters one element at a time.
pub fn enumerate_params(net: &Network) -> u64 {
    let mut n = 0;
    for (i, l) in net.layers().iter().enumerate() {
        if !l.prunable() {
            n += l.params().iter().map(|(_, t)| t.len() as u64).sum::<u64>();
            continue;
        }
        n += retained_oracle(net, i).iter().filter(|k| **k).count() as u64;
        n += net.mask(i).unwrap().iter().filter(|k| **k).count() as u64;
    }
    n
}

/// Structures a prune to `ratio` should newly mask: live structures sorted by
/// (score, index), topping the masked count up to floor(ratio * n).
pub fn sort_oracle(scores: &[f64], mask: &[bool], ratio: f64) -> Vec<usize> {
    let n = mask.len();
    let k = ((ratio * n as f64) + 1e-9).floor() as usize;
    let already = mask.iter().filter(|m| !**m).count();
    let mut live: Vec<usize> = (0..n).filter(|&s| mask[s]).collect();
    live.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut out: Vec<usize> = live.into_iter().take(k.saturating_sub(already)).collect();
    out.sort();
    out
}
