//! Experiment configuration: one TOML file per experiment.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs"
//!
//! [model]
//! checkpoint = "runs/pretrained.icep"
//!
//! [data]
//! format = "synthetic"
//! train = ["train.iced"]
//! test = ["test.iced"]
//!
//! [schedule]
//! ratio = 0.6
//!
//! [prune]
//! mode = "ice"
//! criterion = "l1"
//!
//! [hyper]
//! theta = 0.03
//! eta = 0.25
//! ```
//!
//! Every section except `[data]` is optional. Relative paths resolve against
//! the directory holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use iceprune::data::{self, DataFormat, Split, SyntheticSpec};
use iceprune::pipeline::derive_seed;
use iceprune::scheduler::InnerKind;
use iceprune::{
    Criterion, DataSplits, Dataset, FineTuneConfig, HyperParams, LayerSpec, LrHyper, Network, PipelineToggles,
    PruneAction, PruneSchedule, SearchSpace, SubsampleSpec,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Invalid configuration, detected before any compute. Exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub fine_tune: FineTuneSection,
    #[serde(default)]
    pub hyper: HyperSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub subsample: SubsampleSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layer list; defaults to the reference CNN sized for the dataset.
    pub layers: Option<Vec<LayerSpec>>,
    /// Written by `pretrain`, read by the pruning commands.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_format")]
    pub format: DataFormat,
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
    /// Generate the data in memory instead of reading files.
    pub generate: Option<Generate>,
}

fn default_format() -> DataFormat {
    DataFormat::Synthetic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generate {
    Prototypes {
        #[serde(default = "ten")]
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_shape")]
        shape: [usize; 3],
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default = "default_shift")]
        max_shift: usize,
        #[serde(default)]
        seed: u64,
    },
    Separable {
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_shape")]
        shape: [usize; 3],
        #[serde(default = "default_margin")]
        margin: f32,
        #[serde(default)]
        seed: u64,
    },
}

fn ten() -> usize {
    10
}
fn default_shape() -> [usize; 3] {
    [3, 16, 16]
}
fn default_noise() -> f32 {
    1.0
}
fn default_shift() -> usize {
    3
}
fn default_margin() -> f32 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 6, lr: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// `layer,ratio` file; overrides `ratio` and `steps`.
    pub path: Option<PathBuf>,
    /// Cumulative per-layer ratio reached by the end of a uniform schedule.
    pub ratio: f64,
    /// Number of steps. Defaults to one per prunable layer; larger values
    /// revisit the layers in rounds, raising the ratio each round.
    pub steps: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            path: None,
            ratio: 0.6,
            steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Pft,
    Ice,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Pft => "pft",
            Mode::Ice => "ice",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub mode: Mode,
    pub criterion: String,
    pub calib_batch_size: usize,
    pub histogram_bins: usize,
    pub use_threshold: bool,
    pub use_freezing: bool,
    pub use_scheduler: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ice,
            criterion: "l1".into(),
            calib_batch_size: iceprune::pruning::DEFAULT_CALIB_BATCH,
            histogram_bins: iceprune::pruning::DEFAULT_HISTOGRAM_BINS,
            use_threshold: true,
            use_freezing: true,
            use_scheduler: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneSection {
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs_per_trigger: usize,
    pub final_extra_epochs: usize,
    pub inner: InnerKind,
}

impl Default for FineTuneSection {
    fn default() -> Self {
        Self {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs_per_trigger: 1,
            final_extra_epochs: 0,
            inner: InnerKind::Constant,
        }
    }
}

/// Fixed hyperparameters for `pft` mode and ablations; also the base
/// learning rate of the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSection {
    pub theta: f64,
    pub eta: f64,
    pub lr_base: f64,
    pub delta: f64,
    pub p: f64,
    pub beta: f64,
}

impl Default for HyperSection {
    fn default() -> Self {
        Self {
            theta: 0.02,
            eta: 0.25,
            lr_base: 0.001,
            delta: 0.0005,
            p: 0.35,
            beta: 2.0,
        }
    }
}

/// Search axes. Unset axes come from `path` when given, else the default grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub path: Option<PathBuf>,
    pub theta: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub lr_base: Option<Vec<f64>>,
    pub delta: Option<Vec<f64>>,
    pub p: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsampleSection {
    pub fraction: f64,
    pub stratified: bool,
}

impl Default for SubsampleSection {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            stratified: true,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// cifar10 or synthetic.
    #[arg(long)]
    pub data_format: Option<String>,
    /// l1, random, entropy or mean_act.
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long)]
    pub lr_base: Option<f64>,
    #[arg(long)]
    pub lr_delta: Option<f64>,
    #[arg(long)]
    pub lr_p: Option<f64>,
    #[arg(long)]
    pub lr_beta: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    pub inner_schedule: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, c: &mut ExperimentConfig) -> Result<(), ConfigError> {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(d) = &self.output_dir {
            c.output_dir = d.clone();
        }
        if let Some(f) = &self.data_format {
            c.data.format = f.parse().map_err(|e: iceprune::Error| ConfigError(e.to_string()))?;
        }
        if let Some(name) = &self.criterion {
            c.prune.criterion = name.clone();
        }
        if let Some(k) = &self.inner_schedule {
            c.fine_tune.inner = k.parse().map_err(|e: iceprune::Error| ConfigError(e.to_string()))?;
        }
        let h = &mut c.hyper;
        for (slot, v) in [
            (&mut h.lr_base, self.lr_base),
            (&mut h.delta, self.lr_delta),
            (&mut h.p, self.lr_p),
            (&mut h.beta, self.lr_beta),
            (&mut h.theta, self.theta),
            (&mut h.eta, self.eta),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        Ok(())
    }
}

/// A validated configuration with its content hash.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// SHA-256 of the canonical TOML form, hex encoded.
    pub hash: String,
    /// Hash of the settings that determine the pretrained model only; names
    /// the default checkpoint so pruning configs can share it.
    pub pretrain_hash: String,
    base_dir: PathBuf,
}

impl Experiment {
    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        overrides.apply(&mut config)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, &base)
    }

    pub fn new(config: ExperimentConfig, base_dir: &Path) -> Result<Self, ConfigError> {
        let hash = config_hash(&config)?;
        let pretrain_hash = pretrain_hash(&config)?;
        let e = Self {
            config,
            hash,
            pretrain_hash,
            base_dir: base_dir.to_path_buf(),
        };
        e.validate()?;
        Ok(e)
    }

    pub fn short_hash(&self) -> &str {
        &self.hash[..12]
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    /// `<output_dir>/<prefix>-<short hash>.<ext>`
    pub fn output_path(&self, prefix: &str, ext: &str) -> PathBuf {
        self.output_dir().join(format!("{prefix}-{}.{ext}", self.short_hash()))
    }

    pub fn provenance(&self) -> String {
        format!("config_hash={} seed={}", self.hash, self.seed())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        let d = &c.data;
        if d.generate.is_none() {
            if d.train.is_empty() || d.test.is_empty() {
                return cfg_err("data needs train and test paths, or a [data.generate] table");
            }
            for p in d.train.iter().chain(&d.test) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return cfg_err(format!("dataset file {} does not exist", full.display()));
                }
            }
        }
        if let Some(g) = &d.generate {
            let (train, test) = match g {
                Generate::Prototypes {
                    train_per_class,
                    test_per_class,
                    ..
                }
                | Generate::Separable {
                    train_per_class,
                    test_per_class,
                    ..
                } => (*train_per_class, *test_per_class),
            };
            if train == 0 || test == 0 {
                return cfg_err("generated splits need at least one sample per class");
            }
        }
        if let Some(layers) = &c.model.layers {
            if layers.is_empty() {
                return cfg_err("model.layers is empty");
            }
        }
        if c.pretrain.epochs == 0 || !(c.pretrain.lr > 0.0) {
            return cfg_err("pretrain needs epochs >= 1 and lr > 0");
        }
        let ft = &c.fine_tune;
        if ft.batch_size == 0 || ft.epochs_per_trigger == 0 {
            return cfg_err("fine_tune needs batch_size >= 1 and epochs_per_trigger >= 1");
        }
        if !(0.0..1.0).contains(&c.schedule.ratio) {
            return cfg_err(format!("schedule ratio {} outside [0, 1)", c.schedule.ratio));
        }
        if c.schedule.steps == Some(0) {
            return cfg_err("schedule steps must be positive");
        }
        if let Some(p) = &c.schedule.path {
            PruneSchedule::load(&self.resolve(p)).map_err(|e| ConfigError(format!("schedule {}: {e}", p.display())))?;
        }
        self.criterion()?;
        self.hyper()?;
        self.search_space()?;
        let s = &c.subsample;
        if !(s.fraction > 0.0 && s.fraction <= 1.0) {
            return cfg_err(format!("subsample fraction {} outside (0, 1]", s.fraction));
        }
        Ok(())
    }

    pub fn criterion(&self) -> Result<Criterion, ConfigError> {
        let p = &self.config.prune;
        let c = match Criterion::from_name(&p.criterion, self.seed()) {
            Ok(Criterion::Entropy { .. }) => Criterion::Entropy {
                calib_batch_size: p.calib_batch_size,
                histogram_bins: p.histogram_bins,
            },
            Ok(Criterion::MeanActivation { .. }) => Criterion::MeanActivation {
                calib_batch_size: p.calib_batch_size,
            },
            Ok(c) => c,
            Err(e) => return cfg_err(e.to_string()),
        };
        c.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(c)
    }

    pub fn hyper(&self) -> Result<HyperParams, ConfigError> {
        let h = &self.config.hyper;
        let lr = LrHyper::new(h.lr_base, h.delta, h.p, h.beta).map_err(|e| ConfigError(e.to_string()))?;
        let hp = HyperParams {
            theta: h.theta,
            eta: h.eta,
            lr,
        };
        hp.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(hp)
    }

    pub fn search_space(&self) -> Result<SearchSpace, ConfigError> {
        let s = &self.config.search;
        let mut space = match &s.path {
            Some(p) => SearchSpace::load(&self.resolve(p)).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?,
            None => SearchSpace::default(),
        };
        for (slot, v) in [
            (&mut space.theta, &s.theta),
            (&mut space.eta, &s.eta),
            (&mut space.lr_base, &s.lr_base),
            (&mut space.delta, &s.delta),
            (&mut space.p, &s.p),
            (&mut space.beta, &s.beta),
        ] {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        space.normalize().map_err(|e| ConfigError(format!("search space: {e}")))
    }

    pub fn toggles(&self) -> PipelineToggles {
        let p = &self.config.prune;
        PipelineToggles {
            use_threshold: p.use_threshold,
            use_freezing: p.use_freezing,
            use_scheduler: p.use_scheduler,
        }
    }

    pub fn fine_tune(&self) -> FineTuneConfig {
        let f = &self.config.fine_tune;
        FineTuneConfig {
            batch_size: f.batch_size,
            momentum: f.momentum,
            weight_decay: f.weight_decay,
            epochs_per_trigger: f.epochs_per_trigger,
            final_extra_epochs: f.final_extra_epochs,
            inner: f.inner,
            seed: self.seed(),
        }
    }

    pub fn subsample(&self) -> SubsampleSpec {
        SubsampleSpec {
            fraction: self.config.subsample.fraction,
            seed: derive_seed(self.seed(), 1),
            stratified: self.config.subsample.stratified,
        }
    }

    pub fn load_data(&self) -> iceprune::Result<DataSplits> {
        let d = &self.config.data;
        if let Some(g) = &d.generate {
            return generate(g);
        }
        let read = |paths: &[PathBuf], split| -> iceprune::Result<Dataset> {
            let parts = paths
                .iter()
                .map(|p| data::load(&self.resolve(p), d.format, split))
                .collect::<iceprune::Result<Vec<_>>>()?;
            Dataset::concat(parts)
        };
        Ok(DataSplits {
            train: read(&d.train, Split::Train)?,
            test: read(&d.test, Split::Test)?,
        })
    }

    pub fn layers(&self, classes: usize) -> Vec<LayerSpec> {
        self.config
            .model
            .layers
            .clone()
            .unwrap_or_else(|| iceprune::reference_cnn(classes))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match &self.config.model.checkpoint {
            Some(p) => self.resolve(p),
            None => self
                .output_dir()
                .join(format!("pretrain-{}.icep", &self.pretrain_hash[..12])),
        }
    }

    pub fn schedule(&self, net: &Network) -> Result<PruneSchedule, ConfigError> {
        let s = &self.config.schedule;
        let sched = match &s.path {
            Some(p) => PruneSchedule::load(&self.resolve(p)).map_err(|e| ConfigError(e.to_string()))?,
            None => uniform_schedule(net, s.ratio, s.steps)?,
        };
        sched
            .validate(net, true)
            .map_err(|e| ConfigError(format!("schedule does not fit the model: {e}")))?;
        Ok(sched)
    }
}

fn generate(g: &Generate) -> iceprune::Result<DataSplits> {
    match *g {
        Generate::Prototypes {
            classes,
            train_per_class,
            test_per_class,
            shape,
            noise,
            max_shift,
            seed,
        } => {
            let spec = SyntheticSpec {
                classes,
                per_class: train_per_class,
                shape,
                noise,
                max_shift,
                seed,
            };
            Ok(DataSplits {
                train: data::generate_synthetic(&spec, Split::Train)?,
                test: data::generate_synthetic(
                    &SyntheticSpec {
                        per_class: test_per_class,
                        ..spec
                    },
                    Split::Test,
                )?,
            })
        }
        Generate::Separable {
            train_per_class,
            test_per_class,
            shape,
            margin,
            seed,
        } => Ok(DataSplits {
            train: data::generate_separable(train_per_class, shape, margin, seed)?,
            test: data::generate_separable(test_per_class, shape, margin, derive_seed(seed, 1))?.with_split(Split::Test),
        }),
    }
}

/// `steps` actions over the prunable layers, front to back. With more steps
/// than layers the layers are revisited in rounds and round `r` of `R`
/// targets `ratio * r / R`.
pub fn uniform_schedule(net: &Network, ratio: f64, steps: Option<usize>) -> Result<PruneSchedule, ConfigError> {
    let layers = net.prunable_indices();
    if layers.is_empty() {
        return cfg_err("model has no prunable layers");
    }
    let steps = steps.unwrap_or(layers.len());
    let rounds = steps.div_ceil(layers.len());
    let actions = (0..steps)
        .map(|j| PruneAction {
            layer_index: layers[j % layers.len()],
            target_ratio: ratio * (j / layers.len() + 1) as f64 / rounds as f64,
        })
        .collect();
    PruneSchedule::new(actions).map_err(|e| ConfigError(e.to_string()))
}

fn sha_toml<T: Serialize>(v: &T) -> Result<String, ConfigError> {
    let text = toml::to_string(v).map_err(|e| ConfigError(format!("cannot serialize config: {e}")))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Hash of the experiment. The output directory and the pruning mode are left
/// out so that baseline, pft and ice runs of one experiment share a hash.
fn config_hash(c: &ExperimentConfig) -> Result<String, ConfigError> {
    let mut canon = c.clone();
    canon.output_dir = PathBuf::new();
    canon.prune.mode = Mode::Ice;
    sha_toml(&canon)
}

fn pretrain_hash(c: &ExperimentConfig) -> Result<String, ConfigError> {
    #[derive(Serialize)]
    struct Key<'a> {
        seed: u64,
        layers: &'a Option<Vec<LayerSpec>>,
        data: &'a DataConfig,
        pretrain: &'a PretrainConfig,
        batch_size: usize,
        momentum: f32,
        weight_decay: f32,
    }
    sha_toml(&Key {
        seed: c.seed,
        layers: &c.model.layers,
        data: &c.data,
        pretrain: &c.pretrain,
        batch_size: c.fine_tune.batch_size,
        momentum: c.fine_tune.momentum,
        weight_decay: c.fine_tune.weight_decay,
    })
}
