//! Backprop vs central finite differences of an independent f64 forward pass.

mod support;

use iceprune::{LayerSpec, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::gradcheck::{check, conv_net, SEEDS, TOL};

#[test]
fn every_layer_kind_matches_finite_differences() {
    for seed in 0..SEEDS {
        let net = conv_net(seed);
        let e = check(&net, 4, seed + 100);
        assert!(e <= TOL, "seed {seed}: relative error {e:.3e}");
    }
}

#[test]
fn masked_networks_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut net = conv_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in net.prunable_indices() {
            let n = net.layer(l).structure_count();
            // leave at least one structure alive in every layer
            for s in 0..n - 1 {
                if rng.random_bool(0.3) {
                    net.mask_structure(l, s).unwrap();
                }
            }
        }
        let e = check(&net, 3, seed + 200);
        assert!(e <= TOL, "seed {seed}: relative error {e:.3e}");
    }
}

#[test]
fn dense_chain_and_unpadded_pooling() {
    for seed in 0..SEEDS {
        let net = Network::new(
            vec![1, 5, 5],
            &[
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 6 },
                LayerSpec::Dense { units: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 2 },
            ],
            seed,
        )
        .unwrap();
        let e = check(&net, 5, seed + 300);
        assert!(e <= TOL, "seed {seed}: relative error {e:.3e}");
    }
}
