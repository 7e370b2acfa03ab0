//! Datasets, file loaders and the stratified subsampler used for auto-tuning.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
const SYNTH_MAGIC: &[u8; 4] = b"ICED";
const SYNTH_HEADER: usize = 4 + 4 + 4 + 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Cifar10,
    Synthetic,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(invalid(format!("unknown data format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    inputs: Vec<f32>,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        inputs: Vec<f32>,
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || inputs.len() != per * labels.len() {
            return Err(Error::Shape {
                context: "dataset inputs".into(),
                expected: vec![labels.len(), per],
                actual: vec![inputs.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: class_count,
            });
        }
        Ok(Self {
            sample_shape,
            inputs,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let per = self.per_sample();
        &self.inputs[i * per..(i + 1) * per]
    }

    fn per_sample(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Gathers the given samples into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.per_sample();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        (Tensor::new(shape, data).expect("consistent sizes"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (t, labels) = self.batch(indices);
        Dataset {
            sample_shape: self.sample_shape.clone(),
            inputs: t.into_data(),
            labels,
            class_count: self.class_count,
            split: self.split,
        }
    }

    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let mut it = parts.into_iter();
        let mut first = it.next().ok_or(Error::EmptyDataset)?;
        for p in it {
            if p.sample_shape != first.sample_shape || p.class_count != first.class_count {
                return Err(invalid("cannot concatenate datasets with different shapes"));
            }
            first.inputs.extend(p.inputs);
            first.labels.extend(p.labels);
        }
        Ok(first)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Writes the self-describing synthetic (`ICED`) format.
    pub fn save_synthetic(&self, path: &Path) -> Result<()> {
        if self.sample_shape.len() != 3 {
            return Err(invalid("ICED files require a (c, h, w) sample shape"));
        }
        let mut buf = Vec::with_capacity(SYNTH_HEADER + self.len() * (1 + 4 * self.per_sample()));
        buf.extend_from_slice(SYNTH_MAGIC);
        buf.extend_from_slice(&(self.class_count as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for &d in &self.sample_shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for i in 0..self.len() {
            buf.push(self.labels[i] as u8);
            for v in self.input(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }
}

pub fn load(path: &Path, format: DataFormat, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    match format {
        DataFormat::Cifar10 => parse_cifar10(&bytes, split),
        DataFormat::Synthetic => parse_synthetic(&bytes, split),
    }
}

pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            message: "empty CIFAR-10 file".into(),
        });
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Parse {
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            message: format!("truncated record ({} trailing bytes)", bytes.len() % CIFAR_RECORD),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut inputs = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Parse {
                offset: (r * CIFAR_RECORD) as u64,
                message: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        inputs.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new(CIFAR_SHAPE.to_vec(), inputs, labels, 10, split)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(Error::Parse {
            offset: at as u64,
            message: "truncated header".into(),
        })
}

pub fn parse_synthetic(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != SYNTH_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "missing ICED magic".into(),
        });
    }
    let classes = read_u32(bytes, 4)? as usize;
    let count = read_u32(bytes, 8)? as usize;
    let shape: Vec<usize> = (0..3)
        .map(|i| read_u32(bytes, 12 + 4 * i).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let per: usize = shape.iter().product();
    if classes == 0 || per == 0 {
        return Err(Error::Parse {
            offset: 4,
            message: "zero class count or sample shape".into(),
        });
    }
    let rec = 1 + 4 * per;
    let mut inputs = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for s in 0..count {
        let at = SYNTH_HEADER + s * rec;
        let Some(r) = bytes.get(at..at + rec) else {
            return Err(Error::Parse {
                offset: at as u64,
                message: format!("truncated payload at sample {s}"),
            });
        };
        let label = r[0] as usize;
        if label >= classes {
            return Err(Error::Parse {
                offset: at as u64,
                message: format!("label {label} out of range for {classes} classes"),
            });
        }
        labels.push(label);
        inputs.extend(
            r[1..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
    }
    let end = SYNTH_HEADER + count * rec;
    if bytes.len() != end {
        return Err(Error::Parse {
            offset: end as u64,
            message: format!("{} unexpected trailing bytes", bytes.len() - end),
        });
    }
    Dataset::new(shape, inputs, labels, classes, split)
}

/// Parameters of the class-prototype image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f32,
    /// Maximum random translation in pixels.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            shape: [3, 16, 16],
            noise: 0.35,
            max_shift: 2,
            seed: 0,
        }
    }
}

/// Class prototypes (a few Gaussian blobs per channel) perturbed by shifts,
/// contrast jitter and pixel noise. Prototypes depend only on `spec.seed`, so
/// train and test splits share them; samples are drawn from a split-specific stream.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    let [c, h, w] = spec.shape;
    if spec.classes == 0 || spec.per_class == 0 || c * h * w == 0 {
        return Err(invalid("synthetic generator needs classes, samples and a non-empty shape"));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| prototype(&mut proto_rng, c, h, w))
        .collect();
    let stream = match split {
        Split::Train => 0x7472_6169_6e00_0001,
        Split::Test => 0x7465_7374_0000_0002,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stream);
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let n = spec.classes * spec.per_class;
    let mut order: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    order.shuffle(&mut rng);
    let shift = spec.max_shift as i64;
    let mut inputs = Vec::with_capacity(n * c * h * w);
    for &label in &order {
        let p = &protos[label];
        let dy = rng.random_range(-shift..=shift);
        let dx = rng.random_range(-shift..=shift);
        let gain = rng.random_range(0.8f32..1.2);
        for ch in 0..c {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let sy = (y - dy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x - dx).clamp(0, w as i64 - 1) as usize;
                    let v = gain * p[(ch * h + sy) * w + sx] + noise.sample(&mut rng);
                    inputs.push(v);
                }
            }
        }
    }
    Dataset::new(spec.shape.to_vec(), inputs, order, spec.classes, split)
}

fn prototype<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            let cy = rng.random_range(0.0..h as f32);
            let cx = rng.random_range(0.0..w as f32);
            let sigma = rng.random_range(1.0..(h.max(w) as f32 / 4.0).max(1.5));
            let amp = rng.random_range(-1.0f32..1.0);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    out[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    out
}

/// Two well-separated classes: every feature of class 1 sits at +`margin`,
/// class 0 at -`margin`, plus small noise.
pub fn generate_separable(per_class: usize, shape: [usize; 3], margin: f32, seed: u64) -> Result<Dataset> {
    let per: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..2 * per_class).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(labels.len() * per);
    for &l in &labels {
        let sign = if l == 1 { 1.0 } else { -1.0 };
        for _ in 0..per {
            inputs.push(sign * margin + rng.random_range(-0.1f32..0.1));
        }
    }
    Dataset::new(shape.to_vec(), inputs, labels, 2, Split::Train)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub fraction: f64,
    pub seed: u64,
    #[serde(default = "yes")]
    pub stratified: bool,
}

fn yes() -> bool {
    true
}

impl SubsampleSpec {
    pub fn new(fraction: f64, seed: u64) -> Self {
        Self {
            fraction,
            seed,
            stratified: true,
        }
    }
}

/// Indices drawn by [`subsample`], in output order.
pub fn subsample_indices(d: &Dataset, spec: &SubsampleSpec) -> Result<Vec<usize>> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(invalid(format!("subsample fraction {} outside (0, 1]", spec.fraction)));
    }
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = d.len();
    let target = (spec.fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = if spec.stratified {
        if target < d.class_count() {
            return Err(invalid(format!(
                "stratified subsample of {target} samples cannot cover {} classes",
                d.class_count()
            )));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.class_count()];
        for (i, &l) in d.labels().iter().enumerate() {
            by_class[l].push(i);
        }
        let quotas = stratified_quotas(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), spec.fraction, target);
        let mut picked = Vec::with_capacity(target);
        for (members, q) in by_class.iter_mut().zip(quotas) {
            members.shuffle(&mut rng);
            picked.extend_from_slice(&members[..q]);
        }
        picked
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all.truncate(target);
        all
    };
    picked.shuffle(&mut rng);
    Ok(picked)
}

/// Largest-remainder allocation: each class gets floor or ceil of its exact
/// share, and the quotas sum to `target`. Remainder ties go to lower class index.
fn stratified_quotas(counts: &[usize], fraction: f64, target: usize) -> Vec<usize> {
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut quotas: Vec<usize> = exact
        .iter()
        .zip(counts)
        .map(|(&e, &c)| (e.floor() as usize).min(c))
        .collect();
    let mut short = target.saturating_sub(quotas.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(counts.len() * 2) {
        if short == 0 {
            break;
        }
        if quotas[k] < counts[k] {
            quotas[k] += 1;
            short -= 1;
        }
    }
    quotas
}

pub fn subsample(d: &Dataset, spec: &SubsampleSpec) -> Result<Dataset> {
    let idx = subsample_indices(d, spec)?;
    Ok(d.subset(&idx))
}
