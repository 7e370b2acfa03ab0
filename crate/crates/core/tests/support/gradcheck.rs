//! Backprop vs central finite differences of an independent f64 forward pass.

use iceprune::layer::LayerKind;
use iceprune::{LayerSpec, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-3;
pub const STEP: f64 = 1e-6;
pub const SEEDS: u64 = 24;

/// f64 copy of the parameters with masks resolved independently of the library.
pub struct Oracle {
    input: Vec<usize>,
    kinds: Vec<(LayerKind, usize)>,
    shapes: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    wshape: Vec<Vec<usize>>,
    biases: Vec<Vec<f64>>,
    keep_w: Vec<Vec<bool>>,
    keep_b: Vec<Vec<bool>>,
}

impl Oracle {
    fn new(net: &Network) -> Self {
        let mut shape = net.input_shape().to_vec();
        let mut o = Oracle {
            input: shape.clone(),
            kinds: vec![],
            shapes: vec![],
            weights: vec![],
            wshape: vec![],
            biases: vec![],
            keep_w: vec![],
            keep_b: vec![],
        };
        let mut last_prunable: Option<usize> = None;
        for (i, l) in net.layers().iter().enumerate() {
            let geom = match l.kind() {
                LayerKind::Conv2d => l.padding(),
                LayerKind::MaxPool2d => l.pool_size(),
                _ => 0,
            };
            o.kinds.push((l.kind(), geom));
            let (w, ws, b) = match (l.weight(), l.bias()) {
                (Some(w), Some(b)) => (
                    w.data().iter().map(|&v| v as f64).collect(),
                    w.shape().to_vec(),
                    b.data().iter().map(|&v| v as f64).collect(),
                ),
                _ => (vec![], vec![], vec![]),
            };
            let (mut kw, mut kb) = (vec![true; w.len()], vec![true; b.len()]);
            if l.prunable() {
                let mask = net.mask(i).unwrap();
                let fan_in = w.len() / ws[0];
                // channels of the feeding prunable layer, if nothing parameterized sits between
                let src_mask = last_prunable.map(|s| net.mask(s).unwrap().to_vec());
                for oi in 0..ws[0] {
                    kb[oi] = mask[oi];
                    for j in 0..fan_in {
                        let ch_alive = match &src_mask {
                            Some(sm) => sm[j / (fan_in / sm.len())],
                            None => true,
                        };
                        kw[oi * fan_in + j] = mask[oi] && ch_alive;
                    }
                }
                last_prunable = Some(i);
            }
            shape = match l.kind() {
                LayerKind::Dense => vec![ws[0]],
                LayerKind::Conv2d => vec![ws[0], shape[1] + 2 * geom - ws[2] + 1, shape[2] + 2 * geom - ws[3] + 1],
                LayerKind::MaxPool2d => vec![shape[0], shape[1] / geom, shape[2] / geom],
                LayerKind::Flatten => vec![shape.iter().product()],
                LayerKind::Relu => shape,
            };
            o.shapes.push(shape.clone());
            o.weights.push(w);
            o.wshape.push(ws);
            o.biases.push(b);
            o.keep_w.push(kw);
            o.keep_b.push(kb);
        }
        o
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut shape = self.input.clone();
        for (i, &(kind, geom)) in self.kinds.iter().enumerate() {
            let w: Vec<f64> = self.weights[i]
                .iter()
                .zip(&self.keep_w[i])
                .map(|(&v, &k)| if k { v } else { 0.0 })
                .collect();
            let b: Vec<f64> = self.biases[i]
                .iter()
                .zip(&self.keep_b[i])
                .map(|(&v, &k)| if k { v } else { 0.0 })
                .collect();
            a = match kind {
                LayerKind::Dense => {
                    let n = a.len();
                    (0..b.len())
                        .map(|o| b[o] + (0..n).map(|j| w[o * n + j] * a[j]).sum::<f64>())
                        .collect()
                }
                LayerKind::Conv2d => {
                    let (c, h, wd) = (shape[0], shape[1], shape[2]);
                    let ws = &self.wshape[i];
                    let (k, pad) = (ws[2], geom as isize);
                    let out = &self.shapes[i];
                    let mut y = vec![0.0; out.iter().product()];
                    for o in 0..out[0] {
                        for oy in 0..out[1] {
                            for ox in 0..out[2] {
                                let mut s = b[o];
                                for ci in 0..c {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy = oy as isize + ky as isize - pad;
                                            let ix = ox as isize + kx as isize - pad;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            s += w[((o * c + ci) * k + ky) * k + kx]
                                                * a[(ci * h + iy as usize) * wd + ix as usize];
                                        }
                                    }
                                }
                                y[(o * out[1] + oy) * out[2] + ox] = s;
                            }
                        }
                    }
                    y
                }
                LayerKind::Relu => a.iter().map(|&v| v.max(0.0)).collect(),
                LayerKind::MaxPool2d => {
                    let (h, wd) = (shape[1], shape[2]);
                    let out = &self.shapes[i];
                    let mut y = vec![f64::NEG_INFINITY; out.iter().product()];
                    for c in 0..out[0] {
                        for oy in 0..out[1] {
                            for ox in 0..out[2] {
                                for dy in 0..geom {
                                    for dx in 0..geom {
                                        let v = a[(c * h + oy * geom + dy) * wd + ox * geom + dx];
                                        let t = &mut y[(c * out[1] + oy) * out[2] + ox];
                                        *t = t.max(v);
                                    }
                                }
                            }
                        }
                    }
                    y
                }
                LayerKind::Flatten => a,
            };
            shape = self.shapes[i].clone();
        }
        a
    }

    fn param(&mut self, layer: usize, which: usize, e: usize) -> &mut f64 {
        if which == 0 {
            &mut self.weights[layer][e]
        } else {
            &mut self.biases[layer][e]
        }
    }

    fn loss(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            let z = self.forward(x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / xs.len() as f64
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst per-tensor relative error between backprop and finite differences.
pub fn check(net: &Network, batch: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = net.input_shape().iter().product();
    let classes = net.num_classes();
    let xs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..per).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect())
        .collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let mut shape = vec![batch];
    shape.extend_from_slice(net.input_shape());
    let flat: Vec<f32> = xs.iter().flatten().map(|&v| v as f32).collect();
    let x = Tensor::new(shape, flat).unwrap();
    let (_, grads) = net.loss_and_grad(&x, &labels).unwrap();

    let mut oracle = Oracle::new(net);
    let mut worst: f64 = 0.0;
    for i in 0..net.layers().len() {
        let Some(g) = grads.layer(i) else { continue };
        for which in 0..2 {
            let bp: Vec<f64> = if which == 0 { &g.weight } else { &g.bias }.iter().map(|&v| v as f64).collect();
            let n = if which == 0 { oracle.weights[i].len() } else { oracle.biases[i].len() };
            let mut fd = Vec::with_capacity(n);
            for e in 0..n {
                let orig = *oracle.param(i, which, e);
                *oracle.param(i, which, e) = orig + STEP;
                let up = oracle.loss(&xs, &labels);
                *oracle.param(i, which, e) = orig - STEP;
                let down = oracle.loss(&xs, &labels);
                *oracle.param(i, which, e) = orig;
                fd.push((up - down) / (2.0 * STEP));
            }
            worst = worst.max(rel_err(&bp, &fd));
        }
    }
    worst
}

pub fn conv_net(seed: u64) -> Network {
    Network::new(
        vec![2, 6, 6],
        &[
            LayerSpec::Conv2d { filters: 3, kernel: 3, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Conv2d { filters: 4, kernel: 2, padding: 0 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 5 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 3 },
        ],
        seed,
    )
    .unwrap()
}
