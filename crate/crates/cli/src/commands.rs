//! Subcommand implementations. Each writes its artifacts under the
//! configured output directory and returns the path of its summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use iceprune::autotune::write_trials_csv;
use iceprune::pipeline::{auto_tune, derive_seed, fine_tune};
use iceprune::pruning::alpha;
use iceprune::report::{write_freeze_csv, write_steps_csv, write_timing_csv};
use iceprune::{
    baseline_pipeline, checkpoint, ice_pipeline, pft, test, DataSplits, HyperParams, Network, PipelineToggles,
    RunReport, TuneResult,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, Experiment, Mode};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub params: u64,
    pub seconds: f64,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
}

/// Summary of one pruning run; the input of `compare` and `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    /// Variant name for ablation runs.
    #[serde(default)]
    pub variant: Option<String>,
    pub schedule_ratio: f64,
    pub steps: usize,
    pub acc_orig: f64,
    pub final_accuracy: f64,
    pub original_params: u64,
    pub final_params: u64,
    pub alpha: f64,
    pub fine_tune_epochs: usize,
    pub triggered: usize,
    /// Pruning time of the final run; tuning time is reported separately.
    pub total_seconds: f64,
    #[serde(default)]
    pub tune_seconds: Option<f64>,
    #[serde(default)]
    pub tuned: Option<HyperParams>,
    pub report: RunReport,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Opens `path` and writes the provenance comment line.
fn csv_file(path: &Path, provenance: &str) -> Result<BufWriter<File>> {
    let mut w = create(path)?;
    writeln!(w, "# {provenance}")?;
    Ok(w)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn load_data(exp: &Experiment) -> Result<DataSplits> {
    let data = exp.load_data().context("loading data")?;
    log::info!(
        "data: {} train, {} test, shape {:?}, {} classes",
        data.train.len(),
        data.test.len(),
        data.train.sample_shape(),
        data.train.class_count()
    );
    Ok(data)
}

pub fn pretrain(exp: &Experiment) -> Result<PathBuf> {
    let data = load_data(exp)?;
    let c = &exp.config;
    let layers = exp.layers(data.train.class_count());
    let mut net = Network::new(data.train.sample_shape().to_vec(), &layers, derive_seed(exp.seed(), 0))
        .map_err(|e| ConfigError(format!("model does not fit the data: {e}")))?;
    let t0 = Instant::now();
    for epoch in 0..c.pretrain.epochs {
        let loss = fine_tune(&mut net, &data.train, c.pretrain.lr, 1, &exp.fine_tune(), derive_seed(exp.seed(), 10 + epoch as u64))?;
        log::info!("pretrain epoch {}: loss {loss:.4}", epoch + 1);
    }
    let seconds = t0.elapsed().as_secs_f64();
    let train_accuracy = test(&net, &data.train)?;
    let test_accuracy = test(&net, &data.test)?;
    let ckpt = exp.checkpoint_path();
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(&net, &ckpt).with_context(|| format!("saving {}", ckpt.display()))?;
    let summary = PretrainSummary {
        config_hash: exp.hash.clone(),
        seed: exp.seed(),
        epochs: c.pretrain.epochs,
        lr: c.pretrain.lr,
        train_accuracy,
        test_accuracy,
        params: iceprune::param_count(&net),
        seconds,
        checkpoint_sha256: sha256_file(&ckpt)?,
        checkpoint: ckpt,
    };
    let out = exp.output_path("pretrain", "json");
    write_json(&out, &summary)?;
    println!(
        "pretrained: train acc {train_accuracy:.4}, test acc {test_accuracy:.4}, {:.1}s -> {}",
        seconds,
        summary.checkpoint.display()
    );
    Ok(out)
}

fn load_model(exp: &Experiment, data: &DataSplits) -> Result<Network> {
    let path = exp.checkpoint_path();
    if !path.is_file() {
        return Err(ConfigError(format!("checkpoint {} not found; run pretrain first", path.display())).into());
    }
    let net = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if net.input_shape() != data.train.sample_shape() || net.num_classes() != data.train.class_count() {
        return Err(ConfigError(format!(
            "checkpoint {} expects input {:?} and {} classes, data has {:?} and {}",
            path.display(),
            net.input_shape(),
            net.num_classes(),
            data.train.sample_shape(),
            data.train.class_count()
        ))
        .into());
    }
    Ok(net)
}

fn summarize(exp: &Experiment, mode: Mode, report: RunReport, pruned: &Network) -> Result<RunSummary> {
    Ok(RunSummary {
        config_hash: exp.hash.clone(),
        seed: exp.seed(),
        mode,
        variant: None,
        schedule_ratio: exp.config.schedule.ratio,
        steps: report.records.len(),
        acc_orig: report.acc_orig,
        final_accuracy: report.final_accuracy,
        original_params: report.original_params,
        final_params: report.final_params,
        alpha: alpha(pruned, report.original_params)?.value(),
        fine_tune_epochs: report.fine_tune_epochs,
        triggered: report.triggered_count(),
        total_seconds: report.total_seconds,
        tune_seconds: None,
        tuned: None,
        report,
    })
}

/// Writes steps, timing and freeze CSVs as `<prefix>-<hash>.<kind>.csv`.
fn write_report_csvs(exp: &Experiment, prefix: &str, report: &RunReport) -> Result<()> {
    let prov = exp.provenance();
    let name = |kind: &str| exp.output_path(prefix, &format!("{kind}.csv"));
    let mut w = csv_file(&name("steps"), &prov)?;
    write_steps_csv(report, &mut w)?;
    w.flush()?;
    let mut w = csv_file(&name("timing"), &prov)?;
    write_timing_csv(report, &mut w)?;
    w.flush()?;
    let mut w = csv_file(&name("freeze"), &prov)?;
    write_freeze_csv(report, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_trials(exp: &Experiment, prefix: &str, tune: &TuneResult) -> Result<PathBuf> {
    let path = exp.output_path(prefix, "trials.csv");
    let mut w = csv_file(&path, &exp.provenance())?;
    write_trials_csv(tune, &mut w)?;
    w.flush()?;
    Ok(path)
}

pub fn prune(exp: &Experiment) -> Result<PathBuf> {
    let data = load_data(exp)?;
    let net = load_model(exp, &data)?;
    let schedule = exp.schedule(&net)?;
    let crit = exp.criterion()?;
    let ft = exp.fine_tune();
    let mode = exp.config.prune.mode;
    let toggles = exp.toggles();
    let prefix = mode.name();
    log::info!("{prefix}: {} steps, criterion {}", schedule.len(), crit.name());
    let summary = match mode {
        Mode::Baseline => {
            let (pruned, report) = baseline_pipeline(net, &schedule, &data, &crit, exp.config.hyper.lr_base, &ft)?;
            finish_run(exp, prefix, mode, report, &pruned)?
        }
        Mode::Pft => {
            let (pruned, report) = pft(net, &schedule, &exp.hyper()?, &data, &crit, toggles, &ft)?;
            finish_run(exp, prefix, mode, report, &pruned)?
        }
        Mode::Ice => {
            let space = exp.search_space()?;
            let out = ice_pipeline(&net, &schedule, &space, &data, &exp.subsample(), &crit, toggles, &ft)?;
            write_trials(exp, prefix, &out.tune)?;
            let mut s = finish_run(exp, prefix, mode, out.report, &out.net)?;
            s.tune_seconds = Some(out.tune_seconds);
            s.tuned = Some(out.tune.best);
            s
        }
    };
    let path = exp.output_path(prefix, "json");
    write_json(&path, &summary)?;
    print_summary(&summary);
    Ok(path)
}

fn finish_run(exp: &Experiment, prefix: &str, mode: Mode, report: RunReport, pruned: &Network) -> Result<RunSummary> {
    write_report_csvs(exp, prefix, &report)?;
    checkpoint::save(pruned, &exp.output_path(prefix, "icep"))?;
    summarize(exp, mode, report, pruned)
}

pub fn autotune(exp: &Experiment) -> Result<PathBuf> {
    let data = load_data(exp)?;
    let net = load_model(exp, &data)?;
    let schedule = exp.schedule(&net)?;
    let space = exp.search_space()?;
    log::info!("autotune: {} grid points", space.len());
    let t0 = Instant::now();
    let (tune, acc_orig) = auto_tune(
        &net,
        &schedule,
        &space,
        &data,
        &exp.subsample(),
        &exp.criterion()?,
        exp.toggles(),
        &exp.fine_tune(),
    )?;
    let seconds = t0.elapsed().as_secs_f64();
    write_trials(exp, "autotune", &tune)?;
    #[derive(Serialize)]
    struct Out<'a> {
        config_hash: &'a str,
        seed: u64,
        subsample_acc_orig: f64,
        seconds: f64,
        tune: &'a TuneResult,
    }
    let path = exp.output_path("autotune", "json");
    write_json(
        &path,
        &Out {
            config_hash: &exp.hash,
            seed: exp.seed(),
            subsample_acc_orig: acc_orig,
            seconds,
            tune: &tune,
        },
    )?;
    let b = &tune.best;
    println!(
        "best: theta={} eta={} lr_base={} delta={} p={} beta={} (objective {:.4}, {} points, {:.1}s)",
        b.theta,
        b.eta,
        b.lr.lr_base,
        b.lr.delta,
        b.lr.p,
        b.lr.beta,
        tune.best_error,
        tune.trials.len(),
        seconds
    );
    Ok(path)
}

/// The four ablation variants: all components, then each one switched off.
pub const VARIANTS: [(&str, PipelineToggles); 4] = [
    ("full", PipelineToggles::ALL),
    (
        "no_threshold",
        PipelineToggles {
            use_threshold: false,
            ..PipelineToggles::ALL
        },
    ),
    (
        "no_freezing",
        PipelineToggles {
            use_freezing: false,
            ..PipelineToggles::ALL
        },
    ),
    (
        "no_scheduler",
        PipelineToggles {
            use_scheduler: false,
            ..PipelineToggles::ALL
        },
    ),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub threshold: String,
    pub freezing: String,
    pub scheduler: String,
    pub final_accuracy: f64,
    pub total_seconds: f64,
    pub fine_tune_epochs: usize,
    pub triggered: usize,
}

fn mark(on: bool) -> String {
    if on { "✓" } else { "✗" }.into()
}

/// Runs every variant from the same model, seed and fixed hyperparameters.
pub fn ablate(exp: &Experiment) -> Result<PathBuf> {
    let data = load_data(exp)?;
    let net = load_model(exp, &data)?;
    let schedule = exp.schedule(&net)?;
    let crit = exp.criterion()?;
    let hyper = exp.hyper()?;
    let ft = exp.fine_tune();
    let mut rows = Vec::new();
    for (name, toggles) in VARIANTS {
        log::info!("ablation variant {name}");
        let (pruned, report) = pft(net.clone(), &schedule, &hyper, &data, &crit, toggles, &ft)?;
        let prefix = format!("ablate-{name}");
        write_report_csvs(exp, &prefix, &report)?;
        let mut s = summarize(exp, Mode::Pft, report, &pruned)?;
        s.variant = Some(name.into());
        write_json(&exp.output_path(&prefix, "json"), &s)?;
        rows.push(AblationRow {
            variant: name.into(),
            threshold: mark(toggles.use_threshold),
            freezing: mark(toggles.use_freezing),
            scheduler: mark(toggles.use_scheduler),
            final_accuracy: s.final_accuracy,
            total_seconds: s.total_seconds,
            fine_tune_epochs: s.fine_tune_epochs,
            triggered: s.triggered,
        });
    }
    let path = exp.output_path("ablation", "csv");
    let mut w = csv_file(&path, &exp.provenance())?;
    {
        let mut wr = csv::Writer::from_writer(&mut w);
        for r in &rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
    }
    w.flush()?;
    println!("{:<14} {:>3} {:>3} {:>3} {:>9} {:>9} {:>7}", "variant", "thr", "frz", "sch", "accuracy", "seconds", "epochs");
    for r in &rows {
        println!(
            "{:<14} {:>3} {:>3} {:>3} {:>9.4} {:>9.2} {:>7}",
            r.variant, r.threshold, r.freezing, r.scheduler, r.final_accuracy, r.total_seconds, r.fine_tune_epochs
        );
    }
    Ok(path)
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read summary {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a run summary", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mode: String,
    pub ratio: f64,
    pub final_accuracy: f64,
    pub total_seconds: f64,
    /// Baseline seconds over this row's seconds; empty without a baseline row.
    pub speedup: Option<f64>,
    pub config_hash: String,
}

fn label(path: &Path, s: &RunSummary) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match &s.variant {
        Some(v) => format!("{v}:{stem}"),
        None => stem,
    }
}

/// Joins run summaries into `comparison.csv` and `scatter.csv` under `out_dir`.
pub fn compare(summaries: &[PathBuf], out_dir: &Path) -> Result<Vec<ComparisonRow>> {
    if summaries.is_empty() {
        bail!("compare needs at least one summary file");
    }
    let runs = summaries
        .iter()
        .map(|p| read_summary(p).map(|s| (p, s)))
        .collect::<Result<Vec<_>>>()?;
    let first = &runs[0].1;
    if runs.iter().any(|(_, s)| s.config_hash != first.config_hash) {
        log::warn!("summaries come from different configurations");
        eprintln!("warning: summaries come from different configurations");
    }
    let baseline = runs.iter().find(|(_, s)| s.mode == Mode::Baseline).map(|(_, s)| s.total_seconds);
    let rows: Vec<ComparisonRow> = runs
        .iter()
        .map(|(p, s)| ComparisonRow {
            label: label(p, s),
            mode: s.mode.name().into(),
            ratio: s.schedule_ratio,
            final_accuracy: s.final_accuracy,
            total_seconds: s.total_seconds,
            speedup: baseline.map(|b| b / s.total_seconds),
            config_hash: s.config_hash.clone(),
        })
        .collect();
    let prov = format!("config_hash={} seed={}", first.config_hash, first.seed);
    let mut w = csv_file(&out_dir.join("comparison.csv"), &prov)?;
    {
        let mut wr = csv::Writer::from_writer(&mut w);
        for r in &rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
    }
    w.flush()?;
    let mut w = csv_file(&out_dir.join("scatter.csv"), &prov)?;
    {
        let mut wr = csv::Writer::from_writer(&mut w);
        wr.write_record(["label", "seconds", "accuracy"])?;
        for r in &rows {
            wr.write_record([r.label.clone(), r.total_seconds.to_string(), r.final_accuracy.to_string()])?;
        }
        wr.flush()?;
    }
    w.flush()?;
    println!("{:<32} {:<9} {:>9} {:>9} {:>8}", "label", "mode", "accuracy", "seconds", "speedup");
    for r in &rows {
        let sp = r.speedup.map(|v| format!("{v:.2}x")).unwrap_or_else(|| "-".into());
        println!("{:<32} {:<9} {:>9.4} {:>9.2} {:>8}", r.label, r.mode, r.final_accuracy, r.total_seconds, sp);
    }
    Ok(rows)
}

fn print_summary(s: &RunSummary) {
    println!(
        "{} ({}): acc {:.4} -> {:.4}, params {} -> {} (alpha {:.3}), {} fine-tune epochs, {:.2}s{}",
        s.mode.name(),
        s.report.criterion.name(),
        s.acc_orig,
        s.final_accuracy,
        s.original_params,
        s.final_params,
        s.alpha,
        s.fine_tune_epochs,
        s.total_seconds,
        s.tune_seconds.map(|t| format!(" (+{t:.2}s tuning)")).unwrap_or_default()
    );
    if let Some(f) = &s.report.freeze {
        println!("frozen layers: {:?}", f.freeze.frozen_layer_indices);
    }
}

/// Prints a stored summary step by step; optionally re-emits its CSVs.
pub fn report(summary: &Path, emit: Option<&Path>) -> Result<()> {
    let s = read_summary(summary)?;
    print_summary(&s);
    println!("{:>4} {:>5} {:>6} {:>7} {:>8} {:>5} {:>10} {:>8}", "step", "layer", "ratio", "alpha", "acc_pre", "ft", "lr_max", "acc");
    for r in &s.report.records {
        let lr = r.lr_max_used.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>4} {:>5} {:>6.3} {:>7.4} {:>8.4} {:>5} {:>10} {:>8.4}",
            r.step,
            r.layer_index,
            r.target_ratio,
            r.alpha,
            r.acc_before_ft,
            if r.probe { "probe" } else if r.triggered { "yes" } else { "no" },
            lr,
            r.acc_after
        );
    }
    if let Some(dir) = emit {
        let prov = format!("config_hash={} seed={}", s.config_hash, s.seed);
        let stem = summary.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        let path = |kind: &str| dir.join(format!("{stem}.{kind}.csv"));
        let mut w = csv_file(&path("steps"), &prov)?;
        write_steps_csv(&s.report, &mut w)?;
        w.flush()?;
        let mut w = csv_file(&path("timing"), &prov)?;
        write_timing_csv(&s.report, &mut w)?;
        w.flush()?;
        let mut w = csv_file(&path("freeze"), &prov)?;
        write_freeze_csv(&s.report, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// Writes the configured generated dataset as `train.iced` and `test.iced`.
pub fn synth(exp: &Experiment, out_dir: &Path) -> Result<()> {
    if exp.config.data.generate.is_none() {
        return Err(ConfigError("synth needs a [data.generate] table".into()).into());
    }
    let data = load_data(exp)?;
    fs::create_dir_all(out_dir)?;
    data.train.save_synthetic(&out_dir.join("train.iced"))?;
    data.test.save_synthetic(&out_dir.join("test.iced"))?;
    println!("wrote {} and {} samples to {}", data.train.len(), data.test.len(), out_dir.display());
    Ok(())
}
