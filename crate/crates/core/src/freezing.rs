//! Layer freezing from normalized weight movement during a probe step.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::network::Network;
use crate::pruning::prune_order;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer_index: usize,
    /// L1 norm of the weight change over the probe.
    pub l1_change: f64,
    /// L2 norm of the weights at probe start.
    pub init_l2: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeSet {
    pub frozen_layer_indices: Vec<usize>,
    pub eta: f64,
}

pub fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(invalid(format!("freezing fraction {eta} outside [0, 1)")));
    }
    Ok(())
}

pub fn freeze_count(eta: f64, layers: usize) -> usize {
    ((eta * layers as f64) + 1e-9).floor() as usize
}

/// `||W_after - W_before||_1 / ||W_before||_2` for every parameterized layer.
/// Biases are ignored. A layer with all-zero starting weights scores +inf.
pub fn layer_scores(before: &Network, after: &Network) -> Result<Vec<LayerDelta>> {
    if before.specs() != after.specs() || before.input_shape() != after.input_shape() {
        return Err(invalid("weight-change scores need two snapshots of one architecture"));
    }
    let mut out = Vec::new();
    for (i, (b, a)) in before.layers().iter().zip(after.layers()).enumerate() {
        let (Some(wb), Some(wa)) = (b.weight(), a.weight()) else {
            continue;
        };
        let l1_change: f64 = wb
            .data()
            .iter()
            .zip(wa.data())
            .map(|(&x, &y)| (y as f64 - x as f64).abs())
            .sum();
        let init_l2 = wb.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let score = if init_l2 > 0.0 {
            l1_change / init_l2
        } else {
            log::warn!("layer {i} has zero initial weight norm; it will not be frozen");
            f64::INFINITY
        };
        out.push(LayerDelta {
            layer_index: i,
            l1_change,
            init_l2,
            score,
        });
    }
    Ok(out)
}

/// The `floor(eta * L)` lowest-scoring layers, lower index first on ties.
pub fn select_frozen(deltas: &[LayerDelta], eta: f64) -> Result<FreezeSet> {
    check_eta(eta)?;
    let k = freeze_count(eta, deltas.len());
    let scores: Vec<f64> = deltas.iter().map(|d| d.score).collect();
    let mut frozen: Vec<usize> = prune_order(&scores)
        .into_iter()
        .take(k)
        .map(|j| deltas[j].layer_index)
        .collect();
    frozen.sort_unstable();
    Ok(FreezeSet {
        frozen_layer_indices: frozen,
        eta,
    })
}

/// Outcome of the probe: the frozen set and the scores it was chosen from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub freeze: FreezeSet,
    pub deltas: Vec<LayerDelta>,
}

/// Runs `probe` (the first prune + fine-tune step) on `net`, scores each
/// layer's weight movement, and freezes the least-moving fraction `eta`.
/// The probe's updates are kept.
pub fn probe_and_freeze<F>(net: &mut Network, eta: f64, probe: F) -> Result<ProbeOutcome>
where
    F: FnOnce(&mut Network) -> Result<()>,
{
    check_eta(eta)?;
    let before = net.clone();
    probe(net)?;
    let deltas = layer_scores(&before, net)?;
    let freeze = select_frozen(&deltas, eta)?;
    for &i in &freeze.frozen_layer_indices {
        net.set_frozen(i, true);
    }
    Ok(ProbeOutcome { freeze, deltas })
}
