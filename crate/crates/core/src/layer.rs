use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    MaxPool2d,
    Flatten,
}

impl LayerKind {
    pub fn is_prunable(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d)
    }
}

/// Architecture description used to build a [`crate::Network`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) kind: LayerKind,
    pub(crate) weight: Option<Tensor>,
    pub(crate) bias: Option<Tensor>,
    /// Convolution zero padding, or pooling window for max-pool.
    pub(crate) geometry: usize,
    pub(crate) frozen: bool,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn prunable(&self) -> bool {
        self.kind.is_prunable()
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        self.weight.as_mut()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    /// Named parameter tensors in declaration order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::new();
        if let Some(w) = &self.weight {
            out.push(("weight", w));
        }
        if let Some(b) = &self.bias {
            out.push(("bias", b));
        }
        out
    }

    pub fn padding(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => self.geometry,
            _ => 0,
        }
    }

    pub fn pool_size(&self) -> usize {
        match self.kind {
            LayerKind::MaxPool2d => self.geometry,
            _ => 0,
        }
    }

    /// Number of output structures (filters or units) for prunable layers.
    pub fn structure_count(&self) -> usize {
        self.weight.as_ref().map(|w| w.shape()[0]).unwrap_or(0)
    }

    /// Weights per output structure.
    pub fn fan_in(&self) -> usize {
        self.weight.as_ref().map(|w| w.row_len()).unwrap_or(0)
    }

    pub(crate) fn from_parts(
        kind: LayerKind,
        weight: Option<Tensor>,
        bias: Option<Tensor>,
        geometry: usize,
        frozen: bool,
    ) -> Self {
        Self {
            kind,
            weight,
            bias,
            geometry,
            frozen,
        }
    }

    /// Builds a layer for the given per-sample input shape, returning it with its output shape.
    pub(crate) fn build<R: Rng>(
        spec: LayerSpec,
        input: &[usize],
        rng: &mut R,
    ) -> Result<(Self, Vec<usize>)> {
        match spec {
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(invalid("dense layer needs at least one unit"));
                }
                let fan_in: usize = input.iter().product();
                let weight = kaiming(vec![units, fan_in], fan_in, rng);
                let bias = bias_init(units, fan_in, rng);
                Ok((
                    Self::from_parts(LayerKind::Dense, Some(weight), Some(bias), 0, false),
                    vec![units],
                ))
            }
            LayerSpec::Conv2d {
                filters,
                kernel,
                padding,
            } => {
                let [c, h, w] = as_chw(input, "conv2d")?;
                if filters == 0 || kernel == 0 {
                    return Err(invalid("conv2d needs filters > 0 and kernel > 0"));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(invalid(format!(
                        "conv2d kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                let fan_in = c * kernel * kernel;
                let weight = kaiming(vec![filters, c, kernel, kernel], fan_in, rng);
                let bias = bias_init(filters, fan_in, rng);
                let out = vec![
                    filters,
                    h + 2 * padding - kernel + 1,
                    w + 2 * padding - kernel + 1,
                ];
                Ok((
                    Self::from_parts(LayerKind::Conv2d, Some(weight), Some(bias), padding, false),
                    out,
                ))
            }
            LayerSpec::Relu => Ok((
                Self::from_parts(LayerKind::Relu, None, None, 0, false),
                input.to_vec(),
            )),
            LayerSpec::MaxPool2d { size } => {
                let [c, h, w] = as_chw(input, "maxpool2d")?;
                if size == 0 || h < size || w < size {
                    return Err(invalid(format!("maxpool size {size} invalid for {h}x{w}")));
                }
                Ok((
                    Self::from_parts(LayerKind::MaxPool2d, None, None, size, false),
                    vec![c, h / size, w / size],
                ))
            }
            LayerSpec::Flatten => Ok((
                Self::from_parts(LayerKind::Flatten, None, None, 0, false),
                vec![input.iter().product()],
            )),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self.kind {
            LayerKind::Dense => LayerSpec::Dense {
                units: self.structure_count(),
            },
            LayerKind::Conv2d => LayerSpec::Conv2d {
                filters: self.structure_count(),
                kernel: self.weight.as_ref().map(|w| w.shape()[2]).unwrap_or(0),
                padding: self.geometry,
            },
            LayerKind::Relu => LayerSpec::Relu,
            LayerKind::MaxPool2d => LayerSpec::MaxPool2d {
                size: self.geometry,
            },
            LayerKind::Flatten => LayerSpec::Flatten,
        }
    }
}

pub(crate) fn as_chw(shape: &[usize], context: &str) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(crate::Error::Shape {
            context: format!("{context} expects (channels, height, width) input"),
            expected: vec![0, 0, 0],
            actual: shape.to_vec(),
        }),
    }
}

fn kaiming<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

fn bias_init<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![n], data).expect("shape product matches")
}

// Per-sample kernels. Inputs and outputs are flat slices in (C, H, W) order.

pub(crate) fn dense_forward(w: &[f32], b: &[f32], x: &[f32], out: &mut [f32]) {
    let fan_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * fan_in..(o + 1) * fan_in];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *y = acc;
    }
}

pub(crate) fn dense_backward(
    w: &[f32],
    x: &[f32],
    dout: &[f32],
    dw: Option<(&mut [f32], &mut [f32])>,
    dx: Option<&mut [f32]>,
) {
    let fan_in = x.len();
    if let Some((dw, db)) = dw {
        for (o, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let row = &mut dw[o * fan_in..(o + 1) * fan_in];
            for (d, xi) in row.iter_mut().zip(x) {
                *d += g * xi;
            }
        }
    }
    if let Some(dx) = dx {
        for (o, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * fan_in..(o + 1) * fan_in];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad - self.k + 1
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad - self.k + 1
    }

    /// Output columns `ox` for kernel column `kw` such that the input column is in range.
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let ow = self.out_w();
        let lo = self.pad.saturating_sub(kw);
        let hi = (self.w + self.pad).saturating_sub(kw).min(ow);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv_forward(
    g: ConvGeom,
    w: &[f32],
    b: &[f32],
    x: &[f32],
    out: &mut [f32],
    active_out: &[bool],
    active_in: &[bool],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let in_plane = g.h * g.w;
    for o in 0..g.o {
        let dst = &mut out[o * plane..(o + 1) * plane];
        if !active_out[o] {
            dst.fill(0.0);
            continue;
        }
        dst.fill(b[o]);
        for c in 0..g.c {
            if !active_in[c] {
                continue;
            }
            let src = &x[c * in_plane..(c + 1) * in_plane];
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let wv = w[((o * g.c + c) * g.k + kh) * g.k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.col_range(kw);
                    for oy in 0..oh {
                        let iy = oy + kh;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let srow = &src[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            drow[ox] += wv * srow[ox + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: ConvGeom,
    w: &[f32],
    x: &[f32],
    dout: &[f32],
    dw: Option<(&mut [f32], &mut [f32])>,
    mut dx: Option<&mut [f32]>,
    active_out: &[bool],
    active_in: &[bool],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let in_plane = g.h * g.w;
    let (mut dw, mut db) = match dw {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    for o in 0..g.o {
        if !active_out[o] {
            continue;
        }
        let gout = &dout[o * plane..(o + 1) * plane];
        if let Some(db) = db.as_deref_mut() {
            db[o] += gout.iter().sum::<f32>();
        }
        for c in 0..g.c {
            if !active_in[c] {
                continue;
            }
            let src = &x[c * in_plane..(c + 1) * in_plane];
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let widx = ((o * g.c + c) * g.k + kh) * g.k + kw;
                    let wv = w[widx];
                    let (lo, hi) = g.col_range(kw);
                    let mut acc = 0.0f32;
                    for oy in 0..oh {
                        let iy = oy + kh;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let row_off = (iy - g.pad) * g.w;
                        let grow = &gout[oy * ow..(oy + 1) * ow];
                        if dw.is_some() {
                            let srow = &src[row_off..row_off + g.w];
                            for ox in lo..hi {
                                acc += grow[ox] * srow[ox + kw - g.pad];
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[c * in_plane + row_off..c * in_plane + row_off + g.w];
                            for ox in lo..hi {
                                drow[ox + kw - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn maxpool_forward(c: usize, h: usize, w: usize, size: usize, x: &[f32], out: &mut [f32], arg: &mut [u32]) {
    let (oh, ow) = (h / size, w / size);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = ch * h * w + oy * size * w + ox * size;
                let mut best = x[best_idx];
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = ch * h * w + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
}
