use crate::error::{invalid, Error, Result};
use crate::network::{Gradients, Network};

/// Momentum SGD state. Weight decay is added to the gradient before the momentum update.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl OptimizerState {
    pub fn new(net: &Network, momentum: f32, weight_decay: f32) -> Self {
        let buffers = net
            .layers()
            .iter()
            .map(|l| match (l.weight(), l.bias()) {
                (Some(w), Some(b)) => Some((vec![0.0; w.len()], vec![0.0; b.len()])),
                _ => None,
            })
            .collect();
        Self {
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn weight_buffer(&self, layer: usize) -> Option<&[f32]> {
        self.buffers.get(layer)?.as_ref().map(|(w, _)| w.as_slice())
    }
}

/// One optimizer update. Frozen layers and masked elements are left untouched.
pub fn sgd_step(net: &mut Network, grads: &Gradients, state: &mut OptimizerState, lr: f32) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(invalid(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != net.layers().len() || state.buffers.len() != net.layers().len() {
        return Err(invalid("gradient/optimizer state does not match network"));
    }
    for (i, g) in grads.layers.iter().enumerate() {
        if let Some(g) = g {
            if let Some(j) = g.weight.iter().chain(&g.bias).position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i}, element {j}")));
            }
        }
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for i in 0..net.layers().len() {
        if net.layer(i).frozen() {
            continue;
        }
        let (Some(g), Some((bw, bb))) = (grads.layers[i].as_ref(), state.buffers[i].as_mut()) else {
            continue;
        };
        let retained = net.weight_retained(i);
        let out_mask = net.mask(i).map(|m| m.to_vec());
        let layer = net.layer_mut(i);
        let w = layer.weight_mut().expect("parameterized").data_mut();
        for e in 0..w.len() {
            if retained.as_ref().is_some_and(|r| !r[e]) {
                continue;
            }
            let d = g.weight[e] + wd * w[e];
            bw[e] = mu * bw[e] + d;
            w[e] -= lr * bw[e];
        }
        let b = layer.bias_mut().expect("parameterized").data_mut();
        for e in 0..b.len() {
            if out_mask.as_ref().is_some_and(|m| !m[e]) {
                continue;
            }
            let d = g.bias[e] + wd * b[e];
            bb[e] = mu * bb[e] + d;
            b[e] -= lr * bb[e];
        }
    }
    Ok(())
}
