//! Structure scoring, mask updates and parameter accounting.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::layer::LayerKind;
use crate::network::Network;

pub const DEFAULT_CALIB_BATCH: usize = 128;
pub const DEFAULT_HISTOGRAM_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    L1Norm,
    Random { seed: u64 },
    Entropy { calib_batch_size: usize, histogram_bins: usize },
    MeanActivation { calib_batch_size: usize },
}

impl Criterion {
    /// Parses the CLI names `l1`, `random`, `entropy` and `mean_act`.
    pub fn from_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "l1" | "l1_norm" => Ok(Self::L1Norm),
            "random" => Ok(Self::Random { seed }),
            "entropy" => Ok(Self::Entropy {
                calib_batch_size: DEFAULT_CALIB_BATCH,
                histogram_bins: DEFAULT_HISTOGRAM_BINS,
            }),
            "mean_act" | "mean_activation" => Ok(Self::MeanActivation {
                calib_batch_size: DEFAULT_CALIB_BATCH,
            }),
            other => Err(invalid(format!("unknown criterion '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::L1Norm => "l1",
            Self::Random { .. } => "random",
            Self::Entropy { .. } => "entropy",
            Self::MeanActivation { .. } => "mean_act",
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(self, Self::Entropy { .. } | Self::MeanActivation { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Entropy {
                calib_batch_size,
                histogram_bins,
            } => {
                if histogram_bins < 2 || calib_batch_size < 1 {
                    return Err(invalid("entropy criterion needs bins >= 2 and batch >= 1"));
                }
            }
            Self::MeanActivation { calib_batch_size } if calib_batch_size < 1 => {
                return Err(invalid("mean-activation criterion needs batch >= 1"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// One score per output structure of `layer`. Lower scores are pruned first;
/// structures that are already masked score negative infinity.
pub fn score_structures(
    net: &Network,
    layer: usize,
    criterion: &Criterion,
    calib: Option<&Dataset>,
) -> Result<Vec<f64>> {
    criterion.validate()?;
    let l = net
        .layers()
        .get(layer)
        .filter(|l| l.prunable())
        .ok_or_else(|| invalid(format!("layer {layer} is not prunable")))?;
    let n = l.structure_count();
    let mut scores: Vec<f64> = match *criterion {
        Criterion::L1Norm => {
            let w = l.weight().unwrap().data();
            let fan_in = l.fan_in();
            let keep = net.weight_retained(layer).unwrap();
            (0..n)
                .map(|o| {
                    (0..fan_in)
                        .filter(|&j| keep[o * fan_in + j])
                        .map(|j| w[o * fan_in + j].abs() as f64)
                        .sum()
                })
                .collect()
        }
        Criterion::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (layer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            (0..n).map(|_| rng.random::<f64>()).collect()
        }
        Criterion::Entropy {
            calib_batch_size,
            histogram_bins,
        } => {
            let pooled = pooled_activations(net, layer, calib, calib_batch_size)?;
            pooled.iter().map(|v| histogram_entropy(v, histogram_bins)).collect()
        }
        Criterion::MeanActivation { calib_batch_size } => {
            let pooled = pooled_activations(net, layer, calib, calib_batch_size)?;
            pooled
                .iter()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect()
        }
    };
    let mask = net.mask(layer).unwrap();
    for (s, &keep) in scores.iter_mut().zip(mask) {
        if !keep {
            *s = f64::NEG_INFINITY;
        }
    }
    Ok(scores)
}

/// Per structure, the spatially averaged activation of each calibration sample.
/// Uses the output of the ReLU directly after `layer` when there is one.
fn pooled_activations(
    net: &Network,
    layer: usize,
    calib: Option<&Dataset>,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let calib = calib.ok_or_else(|| invalid("activation-based criterion requires calibration data"))?;
    if calib.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tap = match net.layers().get(layer + 1) {
        Some(next) if next.kind() == LayerKind::Relu => layer + 1,
        _ => layer,
    };
    let take: Vec<usize> = (0..batch_size.min(calib.len())).collect();
    let (x, _) = calib.batch(&take);
    let acts = net.activations(&x, tap)?;
    let structs = net.layer(layer).structure_count();
    let per = acts.row_len() / structs;
    let mut out = vec![Vec::with_capacity(take.len()); structs];
    for s in 0..take.len() {
        let row = acts.row(s);
        for (f, col) in out.iter_mut().enumerate() {
            let sum: f64 = row[f * per..(f + 1) * per].iter().map(|&v| v as f64).sum();
            col.push(sum / per as f64);
        }
    }
    Ok(out)
}

/// Shannon entropy (nats) of a `bins`-bucket histogram over [min, max].
pub fn histogram_entropy(values: &[f64], bins: usize) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || !(hi > lo) {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneAction {
    pub layer_index: usize,
    pub target_ratio: f64,
}

/// Number of structures removed for a cumulative ratio over `count` structures.
pub fn prune_target(ratio: f64, count: usize) -> usize {
    // small slack so that e.g. 0.6 * 10 lands on 6 rather than 5.999...
    ((ratio * count as f64) + 1e-9).floor() as usize
}

/// Ascending by score, lower index first on ties.
pub fn prune_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[a].total_cmp(&scores[b]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx
}

/// Masks the lowest-scored retained structures so that `target_ratio` of the
/// layer's original structures are removed. Returns the newly masked indices.
pub fn apply_prune(net: &mut Network, action: &PruneAction, scores: &[f64]) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&action.target_ratio) {
        return Err(invalid(format!("target ratio {} outside [0, 1)", action.target_ratio)));
    }
    let mask = net
        .mask(action.layer_index)
        .ok_or_else(|| invalid(format!("layer {} is not prunable", action.layer_index)))?
        .to_vec();
    if scores.len() != mask.len() {
        return Err(invalid(format!(
            "{} scores for {} structures",
            scores.len(),
            mask.len()
        )));
    }
    let k = prune_target(action.target_ratio, mask.len());
    let already = mask.iter().filter(|&&m| !m).count();
    if k <= already {
        return Ok(Vec::new());
    }
    let mut newly = Vec::new();
    let mut removed = already;
    for s in prune_order(scores) {
        if removed == k {
            break;
        }
        if mask[s] {
            net.mask_structure(action.layer_index, s)?;
            newly.push(s);
            removed += 1;
        }
    }
    Ok(newly)
}

/// Count of retained parameters, including the input columns removed from a
/// layer when the structures feeding it are masked.
pub fn param_count(net: &Network) -> u64 {
    let mut total = 0u64;
    for (i, l) in net.layers().iter().enumerate() {
        match net.weight_retained(i) {
            Some(keep) => {
                total += keep.iter().filter(|&&k| k).count() as u64;
                total += net.mask(i).unwrap().iter().filter(|&&k| k).count() as u64;
            }
            None => {
                total += l.params().iter().map(|(_, t)| t.len() as u64).sum::<u64>();
            }
        }
    }
    total
}

/// Total parameters ignoring masks.
pub fn dense_param_count(net: &Network) -> u64 {
    net.layers()
        .iter()
        .flat_map(|l| l.params())
        .map(|(_, t)| t.len() as u64)
        .sum()
}

/// Fraction of parameters retained, kept as an exact integer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alpha {
    pub retained: u64,
    pub original: u64,
}

impl Alpha {
    pub fn value(&self) -> f64 {
        self.retained as f64 / self.original as f64
    }
}

pub fn alpha(net: &Network, original_count: u64) -> Result<Alpha> {
    if original_count == 0 {
        return Err(invalid("original parameter count must be positive"));
    }
    let retained = param_count(net);
    if retained > original_count {
        return Err(invalid(format!(
            "retained count {retained} exceeds original {original_count}"
        )));
    }
    Ok(Alpha {
        retained,
        original: original_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    actions: Vec<PruneAction>,
}

impl PruneSchedule {
    pub fn new(actions: Vec<PruneAction>) -> Result<Self> {
        if actions.is_empty() {
            return Err(invalid("pruning schedule is empty"));
        }
        for a in &actions {
            if !(0.0..1.0).contains(&a.target_ratio) {
                return Err(invalid(format!(
                    "ratio {} for layer {} outside [0, 1)",
                    a.target_ratio, a.layer_index
                )));
            }
        }
        Ok(Self { actions })
    }

    /// One step per prunable layer, front to back, all at `ratio`.
    pub fn uniform(net: &Network, ratio: f64) -> Result<Self> {
        Self::new(
            net.prunable_indices()
                .into_iter()
                .map(|layer_index| PruneAction {
                    layer_index,
                    target_ratio: ratio,
                })
                .collect(),
        )
    }

    pub fn actions(&self) -> &[PruneAction] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks the schedule against a network: prunable targets, and no layer
    /// listed twice unless `allow_repeats`.
    pub fn validate(&self, net: &Network, allow_repeats: bool) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for a in &self.actions {
            if net.mask(a.layer_index).is_none() {
                return Err(invalid(format!("schedule targets non-prunable layer {}", a.layer_index)));
            }
            if !seen.insert(a.layer_index) && !allow_repeats {
                return Err(invalid(format!("layer {} appears twice in schedule", a.layer_index)));
            }
        }
        Ok(())
    }

    /// Parses `layer_index,ratio` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut actions = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (l, r) = line
                .split_once(',')
                .ok_or_else(|| invalid(format!("schedule line {}: expected 'layer,ratio'", n + 1)))?;
            let layer_index = l
                .trim()
                .parse()
                .map_err(|_| invalid(format!("schedule line {}: bad layer index", n + 1)))?;
            let target_ratio = r
                .trim()
                .parse()
                .map_err(|_| invalid(format!("schedule line {}: bad ratio", n + 1)))?;
            actions.push(PruneAction {
                layer_index,
                target_ratio,
            });
        }
        Self::new(actions)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.actions
            .iter()
            .map(|a| format!("{},{}\n", a.layer_index, a.target_ratio))
            .collect()
    }
}

/// Scores `action`'s layer and applies the mask update.
pub fn prune_step(
    net: &mut Network,
    action: &PruneAction,
    criterion: &Criterion,
    calib: Option<&Dataset>,
) -> Result<Vec<usize>> {
    let scores = score_structures(net, action.layer_index, criterion, calib)?;
    apply_prune(net, action, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerSpec;

    fn conv_dense() -> Network {
        // conv 4 filters of 1x3x3 on a 1x3x3 input -> 4x1x1, flatten, dense 2x4
        Network::new(
            vec![1, 3, 3],
            &[
                LayerSpec::Conv2d { filters: 4, kernel: 3, padding: 0 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
            ],
            1,
        )
        .unwrap()
    }

    fn dense_with_l1(rows: &[f32]) -> Network {
        let mut net = Network::new(vec![2], &[LayerSpec::Dense { units: rows.len() }], 0).unwrap();
        let w = net.layer_mut(0).weight_mut().unwrap().data_mut();
        for (o, &s) in rows.iter().enumerate() {
            w[2 * o] = s / 2.0;
            w[2 * o + 1] = -s / 2.0;
        }
        net
    }

    #[test]
    fn l1_scores_are_row_sums() {
        let net = dense_with_l1(&[3.0, 1.0, 2.0]);
        let s = score_structures(&net, 0, &Criterion::L1Norm, None).unwrap();
        assert_eq!(s, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn sort_oracle_examples() {
        let mut net = dense_with_l1(&[3.0, 1.0, 2.0]);
        let scores = [3.0, 1.0, 2.0];
        apply_prune(&mut net, &PruneAction { layer_index: 0, target_ratio: 1.0 / 3.0 }, &scores).unwrap();
        assert_eq!(net.mask(0).unwrap(), &[true, false, true]);

        let mut net = dense_with_l1(&[3.0, 1.0, 2.0]);
        apply_prune(&mut net, &PruneAction { layer_index: 0, target_ratio: 2.0 / 3.0 }, &scores).unwrap();
        assert_eq!(net.mask(0).unwrap(), &[true, false, false]);

        let before = net.clone();
        apply_prune(&mut net, &PruneAction { layer_index: 0, target_ratio: 0.0 }, &scores).unwrap();
        assert_eq!(net, before);
        assert!(apply_prune(&mut net, &PruneAction { layer_index: 0, target_ratio: 1.0 }, &scores).is_err());
    }

    #[test]
    fn masked_score_negative_infinity() {
        let mut net = dense_with_l1(&[3.0, 1.0, 2.0]);
        net.mask_structure(0, 0).unwrap();
        let s = score_structures(&net, 0, &Criterion::L1Norm, None).unwrap();
        assert_eq!(s[0], f64::NEG_INFINITY);
    }

    #[test]
    fn random_is_seeded() {
        let net = conv_dense();
        let c = Criterion::Random { seed: 42 };
        assert_eq!(
            score_structures(&net, 0, &c, None).unwrap(),
            score_structures(&net, 0, &c, None).unwrap()
        );
    }

    #[test]
    fn activation_criteria_need_data() {
        let net = conv_dense();
        let c = Criterion::from_name("entropy", 0).unwrap();
        assert!(score_structures(&net, 0, &c, None).is_err());
    }

    #[test]
    fn constant_values_have_zero_entropy() {
        assert_eq!(histogram_entropy(&[0.4; 10], 32), 0.0);
        let two = histogram_entropy(&[0.0, 1.0, 0.0, 1.0], 2);
        assert!((two - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn param_counts() {
        let mut net = Network::new(vec![4], &[LayerSpec::Dense { units: 3 }], 0).unwrap();
        assert_eq!(param_count(&net), 15);
        net.mask_structure(0, 1).unwrap();
        assert_eq!(param_count(&net), 10);

        let mut net = conv_dense();
        assert_eq!(param_count(&net), 50);
        net.mask_structure(0, 2).unwrap();
        assert_eq!(param_count(&net), 38);
        let a = alpha(&net, 50).unwrap();
        assert_eq!(a.retained, 38);
        assert!((a.value() - 0.76).abs() < 1e-15);
    }

    #[test]
    fn alpha_of_unpruned_is_one() {
        let net = conv_dense();
        assert_eq!(alpha(&net, dense_param_count(&net)).unwrap().value(), 1.0);
        assert!(alpha(&net, 0).is_err());
    }

    #[test]
    fn schedule_text() {
        let s = PruneSchedule::parse("# layers\n0,0.6\n2, 0.5\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(PruneSchedule::parse(&s.to_text()).unwrap(), s);
        assert!(PruneSchedule::parse("").is_err());
        assert!(PruneSchedule::parse("0;0.5").is_err());
        let net = conv_dense();
        assert!(s.validate(&net, false).is_ok());
        assert!(PruneSchedule::parse("1,0.5").unwrap().validate(&net, false).is_err());
        assert!(PruneSchedule::parse("0,0.2\n0,0.4").unwrap().validate(&net, false).is_err());
    }

    #[test]
    fn uniform_ratio_target() {
        assert_eq!(prune_target(0.6, 10), 6);
        assert_eq!(prune_target(0.6, 8), 4);
        assert_eq!(prune_target(1.0 / 3.0, 3), 1);
    }
}
