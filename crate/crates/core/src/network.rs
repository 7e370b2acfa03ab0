//! Layer stack with structure masks, forward evaluation and reverse-mode gradients.
//!
//! Batches are processed in fixed chunks of [`CHUNK`] samples. Chunks run in
//! parallel, and their gradient sums are combined in chunk order, so results are
//! bit-identical regardless of the thread count.

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::layer::{self, as_chw, ConvGeom, Layer, LayerKind, LayerSpec};
use crate::tensor::Tensor;

pub const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Per-sample output shape of each layer.
    shapes: Vec<Vec<usize>>,
    masks: Vec<Option<Vec<bool>>>,
    /// For prunable layers fed by another prunable layer: index of that source.
    links: Vec<Option<usize>>,
}

/// Gradients for each layer; `None` for parameter-free or frozen layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) layers: Vec<Option<ParamGrads>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Gradients {
    pub fn layer(&self, index: usize) -> Option<&ParamGrads> {
        self.layers.get(index).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| {
            g.weight.iter().all(|v| v.is_finite()) && g.bias.iter().all(|v| v.is_finite())
        })
    }
}

/// Activations recorded by [`Network::forward_trace`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    chunks: Vec<ChunkTrace>,
    logits: Tensor,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

#[derive(Debug, Clone)]
struct ChunkTrace {
    n: usize,
    /// acts[0] is the input; acts[l + 1] is the output of layer l.
    acts: Vec<Vec<f32>>,
    argmax: Vec<Option<Vec<u32>>>,
}

/// Mask-resolved view of one prunable layer.
struct Active {
    out: Vec<bool>,
    /// Per input structure (conv channel, or dense input group).
    input: Vec<bool>,
    /// Fan-in elements per input structure.
    per_input: usize,
}

impl Active {
    fn weight(&self, o: usize, j: usize) -> bool {
        self.out[o] && self.input[j / self.per_input]
    }
}

struct Prepared<'a> {
    active: Vec<Option<Active>>,
    weights: Vec<Option<Cow<'a, [f32]>>>,
    biases: Vec<Option<Cow<'a, [f32]>>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(invalid(format!("bad input shape {input_shape:?}")));
        }
        if specs.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.clone();
        for spec in specs {
            let (l, out) = Layer::build(*spec, &shape, &mut rng)?;
            layers.push(l);
            shape = out;
        }
        let masks = layers
            .iter()
            .map(|l| l.prunable().then(|| vec![true; l.structure_count()]))
            .collect();
        Self::from_parts(input_shape, layers, masks)
    }

    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        masks: Vec<Option<Vec<bool>>>,
    ) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut links = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        let mut source: Option<usize> = None;
        for (i, l) in layers.iter().enumerate() {
            let out = match l.kind {
                LayerKind::Dense => {
                    let w = l.weight.as_ref().ok_or_else(|| invalid("dense without weight"))?;
                    let fan_in: usize = shape.iter().product();
                    if w.shape().len() != 2 || w.shape()[1] != fan_in {
                        return Err(Error::Shape {
                            context: format!("layer {i} dense weight"),
                            expected: vec![w.shape()[0], fan_in],
                            actual: w.shape().to_vec(),
                        });
                    }
                    vec![w.shape()[0]]
                }
                LayerKind::Conv2d => {
                    let [c, h, wd] = as_chw(&shape, "conv2d")?;
                    let w = l.weight.as_ref().ok_or_else(|| invalid("conv2d without weight"))?;
                    let ws = w.shape();
                    if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
                        return Err(Error::Shape {
                            context: format!("layer {i} conv2d weight"),
                            expected: vec![ws[0], c, ws[2], ws[2]],
                            actual: ws.to_vec(),
                        });
                    }
                    let (k, p) = (ws[2], l.geometry);
                    if h + 2 * p < k || wd + 2 * p < k {
                        return Err(invalid(format!("layer {i}: kernel exceeds padded input")));
                    }
                    vec![ws[0], h + 2 * p - k + 1, wd + 2 * p - k + 1]
                }
                LayerKind::Relu => shape.clone(),
                LayerKind::MaxPool2d => {
                    let [c, h, w] = as_chw(&shape, "maxpool2d")?;
                    let s = l.geometry;
                    if s == 0 || h < s || w < s {
                        return Err(invalid(format!("layer {i}: bad pool size {s}")));
                    }
                    vec![c, h / s, w / s]
                }
                LayerKind::Flatten => vec![shape.iter().product()],
            };
            if l.prunable() {
                let b = l.bias.as_ref().ok_or_else(|| invalid("prunable layer without bias"))?;
                if b.len() != l.structure_count() {
                    return Err(invalid(format!("layer {i}: bias length mismatch")));
                }
                match &masks[i] {
                    Some(m) if m.len() == l.structure_count() => {}
                    _ => return Err(invalid(format!("layer {i}: mask length mismatch"))),
                }
                links.push(source);
                source = Some(i);
            } else {
                if masks[i].is_some() {
                    return Err(invalid(format!("layer {i}: mask on a non-prunable layer")));
                }
                links.push(None);
            }
            shapes.push(out.clone());
            shape = out;
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            masks,
            links,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &Layer {
        &self.layers[index]
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        &mut self.layers[index]
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn output_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s.iter().product()).unwrap_or(0)
    }

    /// Maskable layers other than the output layer, whose structures are the
    /// classes. Default schedules target exactly these.
    pub fn prunable_indices(&self) -> Vec<usize> {
        let out = self.output_layer();
        (0..self.layers.len())
            .filter(|&i| self.layers[i].prunable() && Some(i) != out)
            .collect()
    }

    /// Index of the last parameterized layer.
    pub fn output_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.weight.is_some())
    }

    pub fn mask(&self, index: usize) -> Option<&[bool]> {
        self.masks.get(index).and_then(|m| m.as_deref())
    }

    pub fn masks(&self) -> &[Option<Vec<bool>>] {
        &self.masks
    }

    /// Prunable layer feeding `index`, if any.
    pub fn input_source(&self, index: usize) -> Option<usize> {
        self.links.get(index).copied().flatten()
    }

    /// Marks one output structure of a prunable layer as removed.
    pub fn mask_structure(&mut self, layer: usize, structure: usize) -> Result<()> {
        let mask = self
            .masks
            .get_mut(layer)
            .and_then(|m| m.as_mut())
            .ok_or_else(|| invalid(format!("layer {layer} is not prunable")))?;
        let slot = mask
            .get_mut(structure)
            .ok_or_else(|| invalid(format!("structure {structure} out of range")))?;
        *slot = false;
        Ok(())
    }

    pub fn set_frozen(&mut self, index: usize, frozen: bool) {
        self.layers[index].frozen = frozen;
    }

    pub fn frozen_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].frozen).collect()
    }

    /// Per-element retained flags for a prunable layer's weight tensor.
    pub fn weight_retained(&self, index: usize) -> Option<Vec<bool>> {
        let a = self.active(index)?;
        let w = self.layers[index].weight.as_ref()?;
        let fan_in = w.row_len();
        Some(
            (0..w.len())
                .map(|e| a.weight(e / fan_in, e % fan_in))
                .collect(),
        )
    }

    fn active(&self, index: usize) -> Option<Active> {
        let layer = &self.layers[index];
        let out = self.masks[index].clone()?;
        let fan_in = layer.fan_in();
        let (input, per_input) = match self.links[index] {
            Some(src) => {
                let m = self.masks[src].as_ref().expect("source is prunable");
                let in_structs = match layer.kind {
                    LayerKind::Conv2d => layer.weight.as_ref().unwrap().shape()[1],
                    _ => m.len(),
                };
                debug_assert_eq!(in_structs, m.len());
                (m.clone(), fan_in / in_structs.max(1))
            }
            None => (vec![true], fan_in.max(1)),
        };
        Some(Active {
            out,
            input,
            per_input,
        })
    }

    fn prepare(&self) -> Prepared<'_> {
        let mut active = Vec::with_capacity(self.layers.len());
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let a = self.active(i);
            match (&a, &l.weight, &l.bias) {
                (Some(a), Some(w), Some(b)) => {
                    let all = a.out.iter().all(|&x| x) && a.input.iter().all(|&x| x);
                    if all {
                        weights.push(Some(Cow::Borrowed(w.data())));
                        biases.push(Some(Cow::Borrowed(b.data())));
                    } else {
                        let fan_in = w.row_len();
                        let we: Vec<f32> = w
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(e, &v)| if a.weight(e / fan_in, e % fan_in) { v } else { 0.0 })
                            .collect();
                        let be: Vec<f32> = b
                            .data()
                            .iter()
                            .zip(&a.out)
                            .map(|(&v, &on)| if on { v } else { 0.0 })
                            .collect();
                        weights.push(Some(Cow::Owned(we)));
                        biases.push(Some(Cow::Owned(be)));
                    }
                }
                _ => {
                    weights.push(None);
                    biases.push(None);
                }
            }
            active.push(a);
        }
        Prepared {
            active,
            weights,
            biases,
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let per: usize = self.input_shape.iter().product();
        if batch.shape().len() < 2 || batch.row_len() != per || batch.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![batch.batch()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::Shape {
                context: "network input batch".into(),
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        Ok(batch.batch())
    }

    /// Logits of shape (batch, classes).
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let upto = self.layers.len() - 1;
        self.activations(batch, upto)
    }

    /// Output of layer `upto` for every sample, shape (batch, ...output shape).
    pub fn activations(&self, batch: &Tensor, upto: usize) -> Result<Tensor> {
        if upto >= self.layers.len() {
            return Err(invalid(format!("layer {upto} out of range")));
        }
        let n = self.check_batch(batch)?;
        let prep = self.prepare();
        let per_in = batch.row_len();
        let per_out: usize = self.shapes[upto].iter().product();
        let outs: Vec<Vec<f32>> = batch
            .data()
            .par_chunks(CHUNK * per_in)
            .map(|x| {
                let mut t = self.forward_chunk(&prep, x, x.len() / per_in, upto, false);
                t.acts.pop().unwrap()
            })
            .collect();
        let mut data = Vec::with_capacity(n * per_out);
        outs.into_iter().for_each(|o| data.extend(o));
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shapes[upto]);
        Tensor::new(shape, data)
    }

    pub fn forward_trace(&self, batch: &Tensor) -> Result<Trace> {
        let n = self.check_batch(batch)?;
        let prep = self.prepare();
        let per_in = batch.row_len();
        let last = self.layers.len() - 1;
        let chunks: Vec<ChunkTrace> = batch
            .data()
            .par_chunks(CHUNK * per_in)
            .map(|x| self.forward_chunk(&prep, x, x.len() / per_in, last, true))
            .collect();
        let classes = self.num_classes();
        let mut data = Vec::with_capacity(n * classes);
        for c in &chunks {
            data.extend_from_slice(c.acts.last().unwrap());
        }
        Ok(Trace {
            chunks,
            logits: Tensor::new(vec![n, classes], data)?,
        })
    }

    fn forward_chunk(&self, prep: &Prepared<'_>, x: &[f32], n: usize, upto: usize, keep: bool) -> ChunkTrace {
        let mut acts: Vec<Vec<f32>> = vec![x.to_vec()];
        let mut argmax = Vec::new();
        let mut in_shape = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate().take(upto + 1) {
            let input = acts.last().unwrap();
            let in_len: usize = in_shape.iter().product();
            let out_len: usize = self.shapes[i].iter().product();
            let mut out = vec![0.0f32; n * out_len];
            let mut arg = None;
            match l.kind {
                LayerKind::Dense => {
                    let w = prep.weights[i].as_deref().unwrap();
                    let b = prep.biases[i].as_deref().unwrap();
                    for s in 0..n {
                        layer::dense_forward(
                            w,
                            b,
                            &input[s * in_len..(s + 1) * in_len],
                            &mut out[s * out_len..(s + 1) * out_len],
                        );
                    }
                }
                LayerKind::Conv2d => {
                    let g = self.geom(i, &in_shape);
                    let a = prep.active[i].as_ref().unwrap();
                    let active_in = conv_active_in(a, g.c);
                    let w = prep.weights[i].as_deref().unwrap();
                    let b = prep.biases[i].as_deref().unwrap();
                    for s in 0..n {
                        layer::conv_forward(
                            g,
                            w,
                            b,
                            &input[s * in_len..(s + 1) * in_len],
                            &mut out[s * out_len..(s + 1) * out_len],
                            &a.out,
                            &active_in,
                        );
                    }
                }
                LayerKind::Relu => {
                    for (o, &v) in out.iter_mut().zip(input.iter()) {
                        *o = if v > 0.0 { v } else { 0.0 };
                    }
                }
                LayerKind::MaxPool2d => {
                    let [c, h, w] = [in_shape[0], in_shape[1], in_shape[2]];
                    let mut idx = vec![0u32; n * out_len];
                    for s in 0..n {
                        layer::maxpool_forward(
                            c,
                            h,
                            w,
                            l.geometry,
                            &input[s * in_len..(s + 1) * in_len],
                            &mut out[s * out_len..(s + 1) * out_len],
                            &mut idx[s * out_len..(s + 1) * out_len],
                        );
                    }
                    arg = Some(idx);
                }
                LayerKind::Flatten => out.copy_from_slice(input),
            }
            if !keep {
                acts.clear();
            }
            acts.push(out);
            argmax.push(arg);
            in_shape = self.shapes[i].clone();
        }
        ChunkTrace { n, acts, argmax }
    }

    fn geom(&self, i: usize, in_shape: &[usize]) -> ConvGeom {
        let w = self.layers[i].weight.as_ref().unwrap().shape();
        ConvGeom {
            c: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            o: w[0],
            k: w[2],
            pad: self.layers[i].geometry,
        }
    }

    fn in_shape_of(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    /// Gradients of the mean cross-entropy loss with respect to all trainable
    /// parameters. Frozen layers get no gradient; masked structures get zeros.
    pub fn backward(&self, trace: &Trace, labels: &[usize]) -> Result<Gradients> {
        let (_, dlogits) = softmax_cross_entropy(&trace.logits, labels)?;
        self.backward_from(trace, &dlogits)
    }

    /// Backward pass from an arbitrary upstream gradient on the logits.
    pub fn backward_from(&self, trace: &Trace, dlogits: &[f32]) -> Result<Gradients> {
        let classes = self.num_classes();
        if dlogits.len() != trace.logits.len() {
            return Err(Error::Shape {
                context: "logit gradient".into(),
                expected: trace.logits.shape().to_vec(),
                actual: vec![dlogits.len()],
            });
        }
        let prep = self.prepare();
        let mut offsets = Vec::with_capacity(trace.chunks.len());
        let mut off = 0;
        for c in &trace.chunks {
            offsets.push(off);
            off += c.n * classes;
        }
        let parts: Vec<Gradients> = trace
            .chunks
            .par_iter()
            .zip(offsets.par_iter())
            .map(|(c, &o)| self.backward_chunk(&prep, c, &dlogits[o..o + c.n * classes]))
            .collect();
        let mut total = self.zero_grads();
        for p in &parts {
            total.add_assign(p);
        }
        self.zero_masked_grads(&mut total, &prep);
        Ok(total)
    }

    fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| match (&l.weight, &l.bias, l.frozen) {
                    (Some(w), Some(b), false) => Some(ParamGrads {
                        weight: vec![0.0; w.len()],
                        bias: vec![0.0; b.len()],
                    }),
                    _ => None,
                })
                .collect(),
        }
    }

    fn zero_masked_grads(&self, g: &mut Gradients, prep: &Prepared<'_>) {
        for (i, slot) in g.layers.iter_mut().enumerate() {
            let (Some(pg), Some(a)) = (slot.as_mut(), prep.active[i].as_ref()) else {
                continue;
            };
            let fan_in = self.layers[i].fan_in();
            for (e, v) in pg.weight.iter_mut().enumerate() {
                if !a.weight(e / fan_in, e % fan_in) {
                    *v = 0.0;
                }
            }
            for (v, &on) in pg.bias.iter_mut().zip(&a.out) {
                if !on {
                    *v = 0.0;
                }
            }
        }
    }

    fn backward_chunk(&self, prep: &Prepared<'_>, t: &ChunkTrace, dlogits: &[f32]) -> Gradients {
        let mut grads = self.zero_grads();
        let lowest = match grads.layers.iter().position(|g| g.is_some()) {
            Some(i) => i,
            None => return grads,
        };
        let n = t.n;
        let mut dout = dlogits.to_vec();
        for i in (lowest..self.layers.len()).rev() {
            let l = &self.layers[i];
            let in_shape = self.in_shape_of(i);
            let in_len: usize = in_shape.iter().product();
            let out_len: usize = self.shapes[i].iter().product();
            let x = &t.acts[i];
            let need_dx = i > lowest;
            let mut dx = if need_dx { vec![0.0f32; n * in_len] } else { Vec::new() };
            match l.kind {
                LayerKind::Dense => {
                    let w = prep.weights[i].as_deref().unwrap();
                    let mut pg = grads.layers[i].take();
                    for s in 0..n {
                        let dw = pg.as_mut().map(|p| (p.weight.as_mut_slice(), p.bias.as_mut_slice()));
                        let dxs = need_dx.then(|| &mut dx[s * in_len..(s + 1) * in_len]);
                        layer::dense_backward(
                            w,
                            &x[s * in_len..(s + 1) * in_len],
                            &dout[s * out_len..(s + 1) * out_len],
                            dw,
                            dxs,
                        );
                    }
                    grads.layers[i] = pg;
                }
                LayerKind::Conv2d => {
                    let g = self.geom(i, in_shape);
                    let a = prep.active[i].as_ref().unwrap();
                    let active_in = conv_active_in(a, g.c);
                    let w = prep.weights[i].as_deref().unwrap();
                    let mut pg = grads.layers[i].take();
                    for s in 0..n {
                        let dw = pg.as_mut().map(|p| (p.weight.as_mut_slice(), p.bias.as_mut_slice()));
                        let dxs = need_dx.then(|| &mut dx[s * in_len..(s + 1) * in_len]);
                        layer::conv_backward(
                            g,
                            w,
                            &x[s * in_len..(s + 1) * in_len],
                            &dout[s * out_len..(s + 1) * out_len],
                            dw,
                            dxs,
                            &a.out,
                            &active_in,
                        );
                    }
                    grads.layers[i] = pg;
                }
                LayerKind::Relu => {
                    if need_dx {
                        for ((d, &g), &v) in dx.iter_mut().zip(&dout).zip(x.iter()) {
                            *d = if v > 0.0 { g } else { 0.0 };
                        }
                    }
                }
                LayerKind::MaxPool2d => {
                    if need_dx {
                        let idx = t.argmax[i].as_ref().unwrap();
                        for s in 0..n {
                            for k in 0..out_len {
                                let src = idx[s * out_len + k] as usize;
                                dx[s * in_len + src] += dout[s * out_len + k];
                            }
                        }
                    }
                }
                LayerKind::Flatten => {
                    if need_dx {
                        dx.copy_from_slice(&dout);
                    }
                }
            }
            dout = dx;
        }
        grads
    }

    /// Mean cross-entropy loss and its gradients for one batch.
    pub fn loss_and_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(f32, Gradients)> {
        let trace = self.forward_trace(batch)?;
        let (loss, dlogits) = softmax_cross_entropy(&trace.logits, labels)?;
        let g = self.backward_from(&trace, &dlogits)?;
        Ok((loss, g))
    }
}

fn conv_active_in(a: &Active, channels: usize) -> Vec<bool> {
    if a.input.len() == channels {
        a.input.clone()
    } else {
        vec![true; channels]
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let n = logits.batch();
    let c = logits.row_len();
    if labels.len() != n {
        return Err(Error::Shape {
            context: "labels".into(),
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    let mut grad = vec![0.0f32; n * c];
    let mut loss = 0.0f64;
    for (s, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let row = logits.row(s);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += (log_sum - row[y]) as f64;
        let g = &mut grad[s * c..(s + 1) * c];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - log_sum).exp();
            *gj = (p - if j == y { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    let loss = (loss / n.max(1) as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}
