//! Pruning-fine-tuning runs: the gated, freeze-aware operator, the plain
//! iterative baseline, and the two-stage tune-then-apply pipeline.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autotune::{grid_search, HyperParams, SearchSpace, TuneResult};
use crate::data::{subsample, Dataset, SubsampleSpec};
use crate::error::{invalid, Error, Result};
use crate::freezing::{probe_and_freeze, FreezeSet, LayerDelta};
use crate::network::Network;
use crate::optim::{sgd_step, OptimizerState};
use crate::pruning::{alpha, param_count, prune_step, Criterion, PruneAction, PruneSchedule};
use crate::scheduler::{epoch_lr, max_lr, InnerKind, InnerSchedule};

/// Train/test pair a run operates on.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    pub fn subsample(&self, spec: &SubsampleSpec) -> Result<DataSplits> {
        Ok(DataSplits {
            train: subsample(&self.train, spec)?,
            test: subsample(&self.test, spec)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineToggles {
    pub use_threshold: bool,
    pub use_freezing: bool,
    pub use_scheduler: bool,
}

impl PipelineToggles {
    pub const ALL: Self = Self {
        use_threshold: true,
        use_freezing: true,
        use_scheduler: true,
    };
    pub const NONE: Self = Self {
        use_threshold: false,
        use_freezing: false,
        use_scheduler: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs_per_trigger: usize,
    pub final_extra_epochs: usize,
    pub inner: InnerKind,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs_per_trigger: 1,
            final_extra_epochs: 0,
            inner: InnerKind::Constant,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub layer_index: usize,
    pub target_ratio: f64,
    pub alpha: f64,
    pub acc_before_ft: f64,
    pub triggered: bool,
    /// The freeze-selection probe always fine-tunes, outside the gate.
    pub probe: bool,
    pub lr_max_used: Option<f64>,
    pub acc_after: f64,
    pub step_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub freeze: FreezeSet,
    pub deltas: Vec<LayerDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub pipeline: String,
    pub criterion: Criterion,
    pub toggles: PipelineToggles,
    pub hyper: HyperParams,
    pub fine_tune: FineTuneConfig,
    pub acc_orig: f64,
    pub original_params: u64,
    pub final_params: u64,
    pub records: Vec<StepRecord>,
    pub freeze: Option<FreezeReport>,
    pub fine_tune_epochs: usize,
    pub final_accuracy: f64,
    pub total_seconds: f64,
}

impl RunReport {
    pub fn triggered_count(&self) -> usize {
        self.records.iter().filter(|r| r.triggered).count()
    }
}

/// Top-1 accuracy of `net` on `data`.
pub fn test(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = data.batch(chunk);
        let pred = net.forward(&x)?.argmax_rows();
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Derives an independent seed for stream `index` of a master seed (SplitMix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains `net` for `epochs` epochs at a learning rate capped by `lr_max`.
/// A fresh optimizer state is used per call; `stream` selects the shuffle seed.
pub fn fine_tune(
    net: &mut Network,
    data: &Dataset,
    lr_max: f64,
    epochs: usize,
    cfg: &FineTuneConfig,
    stream: u64,
) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut state = OptimizerState::new(net, cfg.momentum, cfg.weight_decay);
    let steps = data.len().div_ceil(cfg.batch_size);
    let inner = InnerSchedule {
        kind: cfg.inner,
        steps_per_epoch: steps,
    };
    let mut last = 0.0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, stream), epoch as u64));
        order.shuffle(&mut rng);
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.batch(chunk);
            let (loss, grads) = net.loss_and_grad(&x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {s}")));
            }
            let lr = epoch_lr(s, lr_max, &inner) as f32;
            if lr > 0.0 {
                sgd_step(net, &grads, &mut state, lr)?;
            }
            last = loss;
        }
    }
    Ok(last)
}

struct Run<'a> {
    net: Network,
    data: &'a DataSplits,
    criterion: Criterion,
    ft: &'a FineTuneConfig,
    report: RunReport,
    started: Instant,
}

impl Run<'_> {
    fn abort(mut self, step: usize, err: Error) -> Error {
        self.report.total_seconds = self.started.elapsed().as_secs_f64();
        self.report.final_params = param_count(&self.net);
        Error::RunAborted {
            step,
            reason: err.to_string(),
            partial: Box::new(self.report),
        }
    }

    fn prune(&mut self, action: &PruneAction) -> Result<()> {
        let calib = self.criterion.needs_calibration().then_some(&self.data.train);
        prune_step(&mut self.net, action, &self.criterion, calib)?;
        Ok(())
    }

    fn lr_for(&self, alpha_now: f64, use_scheduler: bool) -> Result<f64> {
        let h = &self.report.hyper.lr;
        if use_scheduler {
            max_lr(alpha_now, h)
        } else {
            Ok(h.lr_base)
        }
    }

    fn tune(&mut self, lr: f64, epochs: usize, stream: u64) -> Result<()> {
        fine_tune(&mut self.net, &self.data.train, lr, epochs, self.ft, stream)?;
        self.report.fine_tune_epochs += epochs;
        Ok(())
    }

    fn finish(mut self) -> Result<(Network, RunReport)> {
        let extra = self.ft.final_extra_epochs;
        if extra > 0 {
            let a = alpha(&self.net, self.report.original_params)?.value();
            let lr = self.lr_for(a, self.report.toggles.use_scheduler)?;
            self.tune(lr, extra, u64::MAX)?;
            self.report.final_accuracy = test(&self.net, &self.data.test)?;
        } else {
            self.report.final_accuracy = match self.report.records.last() {
                Some(r) => r.acc_after,
                None => self.report.acc_orig,
            };
        }
        self.report.final_params = param_count(&self.net);
        self.report.total_seconds = self.started.elapsed().as_secs_f64();
        Ok((self.net, self.report))
    }
}

macro_rules! or_abort {
    ($run:ident, $step:expr, $e:expr) => {
        match $e {
            Ok(v) => v,
            Err(err) => return Err($run.abort($step, err)),
        }
    };
}

/// One gated pruning-fine-tuning pass over `schedule`.
///
/// The original accuracy is measured first. With freezing enabled, step 1 is
/// a probe: it always fine-tunes, its per-layer weight movement selects the
/// frozen layers, and freezing applies from step 2 on. Every later step
/// prunes, tests, and fine-tunes only when the drop from the original
/// accuracy reaches `theta` (or always, when the threshold is disabled).
pub fn pft(
    net: Network,
    schedule: &PruneSchedule,
    h: &HyperParams,
    data: &DataSplits,
    criterion: &Criterion,
    toggles: PipelineToggles,
    ft: &FineTuneConfig,
) -> Result<(Network, RunReport)> {
    h.validate()?;
    criterion.validate()?;
    schedule.validate(&net, true)?;
    let started = Instant::now();
    let acc_orig = test(&net, &data.test)?;
    let original_params = param_count(&net);
    let mut run = Run {
        report: RunReport {
            pipeline: "pft".into(),
            criterion: *criterion,
            toggles,
            hyper: *h,
            fine_tune: ft.clone(),
            acc_orig,
            original_params,
            final_params: original_params,
            records: Vec::with_capacity(schedule.len()),
            freeze: None,
            fine_tune_epochs: 0,
            final_accuracy: acc_orig,
            total_seconds: 0.0,
        },
        net,
        data,
        criterion: *criterion,
        ft,
        started,
    };

    for (i, action) in schedule.actions().iter().enumerate() {
        let t0 = Instant::now();
        let step = i + 1;
        or_abort!(run, step, run.prune(action));
        let acc_before = or_abort!(run, step, test(&run.net, &data.test));
        let a = or_abort!(run, step, alpha(&run.net, original_params)).value();
        let probe = toggles.use_freezing && i == 0;
        let triggered = probe || !toggles.use_threshold || acc_orig - acc_before >= h.theta;
        let mut lr_used = None;
        let mut acc_after = acc_before;
        if triggered {
            let lr = or_abort!(run, step, run.lr_for(a, toggles.use_scheduler));
            let epochs = ft.epochs_per_trigger;
            if probe {
                let mut moved = run.net.clone();
                let outcome = probe_and_freeze(&mut moved, h.eta, |n| {
                    fine_tune(n, &data.train, lr, epochs, ft, i as u64).map(|_| ())
                });
                let outcome = or_abort!(run, step, outcome);
                run.net = moved;
                run.report.fine_tune_epochs += epochs;
                run.report.freeze = Some(FreezeReport {
                    freeze: outcome.freeze,
                    deltas: outcome.deltas,
                });
            } else {
                or_abort!(run, step, run.tune(lr, epochs, i as u64));
            }
            lr_used = Some(lr);
            acc_after = or_abort!(run, step, test(&run.net, &data.test));
        }
        run.report.records.push(StepRecord {
            step,
            layer_index: action.layer_index,
            target_ratio: action.target_ratio,
            alpha: a,
            acc_before_ft: acc_before,
            triggered,
            probe,
            lr_max_used: lr_used,
            acc_after,
            step_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    run.finish()
}

/// Plain iterative pruning: every step prunes and then fine-tunes one
/// trigger's worth of epochs at the constant base rate.
pub fn baseline_pipeline(
    net: Network,
    schedule: &PruneSchedule,
    data: &DataSplits,
    criterion: &Criterion,
    lr_base: f64,
    ft: &FineTuneConfig,
) -> Result<(Network, RunReport)> {
    if !(lr_base > 0.0 && lr_base.is_finite()) {
        return Err(invalid(format!("lr_base {lr_base} must be positive")));
    }
    criterion.validate()?;
    schedule.validate(&net, true)?;
    let started = Instant::now();
    let acc_orig = test(&net, &data.test)?;
    let original_params = param_count(&net);
    let hyper = HyperParams {
        theta: f64::NEG_INFINITY,
        eta: 0.0,
        lr: crate::scheduler::LrHyper {
            lr_base,
            delta: lr_base / 2.0,
            p: 0.5,
            beta: 1.0,
        },
    };
    let mut run = Run {
        report: RunReport {
            pipeline: "baseline".into(),
            criterion: *criterion,
            toggles: PipelineToggles::NONE,
            hyper,
            fine_tune: ft.clone(),
            acc_orig,
            original_params,
            final_params: original_params,
            records: Vec::with_capacity(schedule.len()),
            freeze: None,
            fine_tune_epochs: 0,
            final_accuracy: acc_orig,
            total_seconds: 0.0,
        },
        net,
        data,
        criterion: *criterion,
        ft,
        started,
    };
    for (i, action) in schedule.actions().iter().enumerate() {
        let t0 = Instant::now();
        let step = i + 1;
        or_abort!(run, step, run.prune(action));
        let acc_before = or_abort!(run, step, test(&run.net, &data.test));
        let a = or_abort!(run, step, alpha(&run.net, original_params)).value();
        or_abort!(run, step, run.tune(lr_base, ft.epochs_per_trigger, i as u64));
        let acc_after = or_abort!(run, step, test(&run.net, &data.test));
        run.report.records.push(StepRecord {
            step,
            layer_index: action.layer_index,
            target_ratio: action.target_ratio,
            alpha: a,
            acc_before_ft: acc_before,
            triggered: true,
            probe: false,
            lr_max_used: Some(lr_base),
            acc_after,
            step_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    run.finish()
}

#[derive(Debug, Clone)]
pub struct IceOutcome {
    pub net: Network,
    pub report: RunReport,
    pub tune: TuneResult,
    /// Original accuracy on the subsampled test split used during tuning.
    pub tune_acc_orig: f64,
    pub tune_seconds: f64,
}

/// Stage 1 only: grid search over `space` with each point run on the
/// subsampled data, starting from a fresh copy of `net`.
pub fn auto_tune(
    net: &Network,
    schedule: &PruneSchedule,
    space: &SearchSpace,
    data: &DataSplits,
    spec: &SubsampleSpec,
    criterion: &Criterion,
    toggles: PipelineToggles,
    ft: &FineTuneConfig,
) -> Result<(TuneResult, f64)> {
    if space.is_empty() {
        return Err(invalid("search space is empty"));
    }
    let sub = data.subsample(spec)?;
    let acc_orig = test(net, &sub.test)?;
    let result = grid_search(space, |i, h| {
        let point_ft = FineTuneConfig {
            seed: derive_seed(ft.seed, i as u64),
            ..ft.clone()
        };
        let (_, rep) = pft(net.clone(), schedule, h, &sub, criterion, toggles, &point_ft)?;
        Ok((rep.total_seconds, acc_orig - rep.final_accuracy))
    })?;
    Ok((result, acc_orig))
}

/// Tunes on subsampled data, then runs once on the full data with the best point.
#[allow(clippy::too_many_arguments)]
pub fn ice_pipeline(
    net: &Network,
    schedule: &PruneSchedule,
    space: &SearchSpace,
    data: &DataSplits,
    spec: &SubsampleSpec,
    criterion: &Criterion,
    toggles: PipelineToggles,
    ft: &FineTuneConfig,
) -> Result<IceOutcome> {
    let t0 = Instant::now();
    let (tune, tune_acc_orig) = auto_tune(net, schedule, space, data, spec, criterion, toggles, ft)?;
    let tune_seconds = t0.elapsed().as_secs_f64();
    let (pruned, mut report) = pft(net.clone(), schedule, &tune.best, data, criterion, toggles, ft)?;
    report.pipeline = "ice".into();
    Ok(IceOutcome {
        net: pruned,
        report,
        tune,
        tune_acc_orig,
        tune_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SyntheticSpec};
    use crate::layer::LayerSpec;
    use crate::scheduler::LrHyper;

    fn tiny() -> (Network, DataSplits) {
        let spec = SyntheticSpec {
            classes: 3,
            per_class: 20,
            shape: [1, 6, 6],
            noise: 0.2,
            max_shift: 1,
            seed: 5,
        };
        let data = DataSplits {
            train: generate_synthetic(&spec, Split::Train).unwrap(),
            test: generate_synthetic(&spec, Split::Test).unwrap(),
        };
        let net = Network::new(
            vec![1, 6, 6],
            &[
                LayerSpec::Conv2d { filters: 4, kernel: 3, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 3 },
            ],
            2,
        )
        .unwrap();
        (net, data)
    }

    fn hyper(theta: f64, eta: f64) -> HyperParams {
        HyperParams {
            theta,
            eta,
            lr: LrHyper::new(0.01, 0.005, 0.3, 2.0).unwrap(),
        }
    }

    fn ft() -> FineTuneConfig {
        FineTuneConfig {
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn never_gate_runs_no_fine_tuning() {
        let (net, data) = tiny();
        let s = PruneSchedule::uniform(&net, 0.5).unwrap();
        let toggles = PipelineToggles {
            use_freezing: false,
            ..PipelineToggles::ALL
        };
        let (_, rep) = pft(net, &s, &hyper(f64::INFINITY, 0.0), &data, &Criterion::L1Norm, toggles, &ft()).unwrap();
        assert_eq!(rep.fine_tune_epochs, 0);
        assert!(rep.records.iter().all(|r| !r.triggered && r.lr_max_used.is_none()));
    }

    #[test]
    fn always_gate_matches_baseline_bitwise() {
        let (net, data) = tiny();
        let s = PruneSchedule::uniform(&net, 0.5).unwrap();
        let (a, ra) = pft(
            net.clone(),
            &s,
            &hyper(f64::NEG_INFINITY, 0.0),
            &data,
            &Criterion::L1Norm,
            PipelineToggles::NONE,
            &ft(),
        )
        .unwrap();
        let (b, rb) = baseline_pipeline(net, &s, &data, &Criterion::L1Norm, 0.01, &ft()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.fine_tune_epochs, 2);
        assert_eq!(rb.fine_tune_epochs, 2);
        assert_eq!(ra.final_accuracy, rb.final_accuracy);
    }

    #[test]
    fn probe_freezes_and_final_accuracy_matches() {
        let (net, data) = tiny();
        let s = PruneSchedule::uniform(&net, 0.5).unwrap();
        let (out, rep) = pft(net, &s, &hyper(0.0, 0.5), &data, &Criterion::L1Norm, PipelineToggles::ALL, &ft()).unwrap();
        assert!(rep.records[0].probe && rep.records[0].triggered);
        assert_eq!(rep.freeze.as_ref().unwrap().freeze.frozen_layer_indices.len(), 1);
        assert_eq!(out.frozen_indices().len(), 1);
        assert_eq!(test(&out, &data.test).unwrap(), rep.final_accuracy);
        assert!(rep.total_seconds >= rep.records.iter().map(|r| r.step_seconds).sum::<f64>());
    }

    #[test]
    fn baseline_rejects_empty_schedule() {
        assert!(PruneSchedule::new(vec![]).is_err());
    }

    #[test]
    fn seeds_are_distinct() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
