//! End-to-end orchestration: configuration, stage artifacts, and the metrics
//! report.
//!
//! Every stage persists its artifact under the run directory and later stages
//! always continue from the persisted copy, so a resumed run and a fresh run
//! see identical inputs.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::averaging::{average_models, requantize_averaged, AveragedModel, CaptureBank};
use crate::checkpoint::{self, Artifact, Provenance, BANK_FILE, MANIFEST_FILE};
use crate::data::{load_idx, synthetic_blobs, Dataset};
use crate::error::{Error, Result};
use crate::nn::{evaluate, init_weights, Architecture, Evaluation, LayerSpec, Network};
use crate::qat::{self, EpochRecord, ShadowModel, TrainOptions};
use crate::quant::{direct_quantize_model, QuantizedModel};
use crate::schedule::ScheduleSpec;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const FROZEN_CONFIG: &str = "config.toml";

pub const PRETRAIN_DIR: &str = "pretrain";
pub const DIRECT_DIR: &str = "direct";
pub const BANK_DIR: &str = "retrain/bank";
pub const RETRAIN_FINAL_DIR: &str = "retrain/final";
pub const AVERAGED_DIR: &str = "averaged";
pub const REQUANTIZED_DIR: &str = "requantized";
pub const FINAL_DIR: &str = "final";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        num_classes: usize,
        samples_per_class: usize,
        #[serde(default)]
        test_samples_per_class: usize,
        dims: usize,
        spread: f64,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Keep only the first `subset` training samples.
        #[serde(default)]
        subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    /// Dense stack with ReLU; input and output widths come from the dataset.
    Mlp { hidden: Vec<usize> },
    Layers { layers: Vec<LayerSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub schedule: ScheduleSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_l2")]
    pub l2_scale: f64,
    /// Use an existing full-precision checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: usize,
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Derived from the pretraining rates when absent.
    #[serde(default)]
    pub max_lr: Option<f64>,
    #[serde(default)]
    pub min_lr: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_finetune_epochs")]
    pub epochs: usize,
    /// Defaults to a tenth of the cycle maximum.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: default_finetune_epochs(),
            lr: None,
            decay: default_decay(),
            batch_size: default_batch(),
            momentum: default_momentum(),
        }
    }
}

fn default_batch() -> usize {
    64
}
fn default_momentum() -> f64 {
    0.9
}
fn default_l2() -> f64 {
    5e-4
}
fn default_period() -> usize {
    6
}
fn default_steps() -> usize {
    1
}
fn default_finetune_epochs() -> usize {
    4
}
fn default_decay() -> f64 {
    0.1
}
fn default_bits() -> u32 {
    2
}
fn default_average() -> usize {
    7
}
fn default_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: PathBuf,
    /// Target weight bit width.
    #[serde(default = "default_bits")]
    pub bits: u32,
    /// Number of most recent captures to average.
    #[serde(default = "default_average")]
    pub average: usize,
    pub dataset: DatasetSpec,
    pub network: NetworkSpec,
    pub pretrain: PretrainConfig,
    pub retrain: RetrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    /// The small synthetic recipe used for the default run and the trend checks.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed,
            output_dir: PathBuf::from("runs/desk"),
            bits: 2,
            average: 7,
            dataset: DatasetSpec::Blobs {
                num_classes: 10,
                samples_per_class: 1000,
                test_samples_per_class: 1000,
                dims: 16,
                spread: 0.4,
                seed: None,
            },
            network: NetworkSpec::Mlp {
                hidden: vec![128, 128],
            },
            pretrain: PretrainConfig {
                schedule: ScheduleSpec::StepDecay {
                    initial_lr: 0.1,
                    factor: 0.1,
                    milestones: vec![30, 45],
                    total_epochs: 60,
                },
                batch_size: 16,
                momentum: 0.9,
                l2_scale: 5e-4,
                checkpoint: None,
            },
            retrain: RetrainConfig {
                epochs: 84,
                period: 6,
                steps: 1,
                max_lr: None,
                min_lr: None,
                batch_size: 16,
                momentum: 0.9,
            },
            finetune: FinetuneConfig {
                batch_size: 16,
                ..FinetuneConfig::default()
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            #[serde(default = "default_schema")]
            schema_version: u32,
        }
        let probe: Probe = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if probe.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: probe.schema_version,
                supported: CONFIG_SCHEMA_VERSION,
            });
        }
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a config file; relative dataset and checkpoint paths are taken
    /// relative to the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut cfg.dataset
        {
            rebase(train_images);
            rebase(train_labels);
            test_images.iter_mut().for_each(rebase);
            test_labels.iter_mut().for_each(rebase);
        }
        if let Some(p) = &mut cfg.pretrain.checkpoint {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn retrain_schedule(&self) -> Result<ScheduleSpec> {
        let r = &self.retrain;
        let (max_lr, min_lr) = match (r.max_lr, r.min_lr) {
            (Some(max), Some(min)) => (max, min),
            (None, None) => {
                crate::schedule::derive_cycle_bounds(&self.pretrain.schedule.distinct_lrs()?)?
            }
            _ => {
                return Err(Error::Config(
                    "retrain.max_lr and retrain.min_lr must be given together".into(),
                ))
            }
        };
        let spec = ScheduleSpec::Cyclical {
            max_lr,
            min_lr,
            period: r.period,
            steps: r.steps,
            total_epochs: r.epochs,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn finetune_lr(&self) -> Result<f64> {
        match self.finetune.lr {
            Some(lr) => Ok(lr),
            None => match self.retrain_schedule()? {
                ScheduleSpec::Cyclical { max_lr, .. } => Ok(max_lr / 10.0),
                ScheduleSpec::StepDecay { .. } => unreachable!(),
            },
        }
    }

    /// Fill every derived field and check internal consistency.
    pub fn resolve(mut self) -> Result<Self> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.schema_version,
                supported: CONFIG_SCHEMA_VERSION,
            });
        }
        if self.bits == 0 || self.bits > 8 {
            return Err(Error::Config(format!("bits {} must be in 1..=8", self.bits)));
        }
        self.pretrain.schedule.validate()?;
        if let ScheduleSpec::Cyclical { .. } = self.pretrain.schedule {
            return Err(Error::Config("pretraining needs a step-decay schedule".into()));
        }
        let schedule = self.retrain_schedule()?;
        if let ScheduleSpec::Cyclical {
            max_lr, min_lr, ..
        } = schedule
        {
            self.retrain.max_lr = Some(max_lr);
            self.retrain.min_lr = Some(min_lr);
        }
        let captures = schedule.capture_epochs()?.len();
        if self.average == 0 || self.average > captures {
            return Err(Error::Config(format!(
                "averaging {} models needs at least that many captures; the retrain schedule yields {captures}",
                self.average
            )));
        }
        self.finetune.lr = Some(self.finetune_lr()?);
        crate::schedule::finetune_lrs(self.finetune_lr()?, self.finetune.decay, self.finetune.epochs)?;
        for (what, b) in [
            ("pretrain", self.pretrain.batch_size),
            ("retrain", self.retrain.batch_size),
            ("finetune", self.finetune.batch_size),
        ] {
            if b == 0 {
                return Err(Error::Config(format!("{what}.batch_size must be >= 1")));
            }
        }
        if let DatasetSpec::Blobs { seed, .. } = &mut self.dataset {
            seed.get_or_insert(self.seed);
        }
        Ok(self)
    }
}

/// Training and optional held-out split, normalized with training statistics.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Splits {
    pub fn load(spec: &DatasetSpec, run_seed: u64) -> Result<Self> {
        let (train, test) = match spec {
            DatasetSpec::Blobs {
                num_classes,
                samples_per_class,
                test_samples_per_class,
                dims,
                spread,
                seed,
            } => {
                let seed = seed.unwrap_or(run_seed);
                let train = synthetic_blobs(*num_classes, *samples_per_class, *dims, *spread, seed)?;
                let test = (*test_samples_per_class > 0)
                    .then(|| {
                        synthetic_blobs(
                            *num_classes,
                            *test_samples_per_class,
                            *dims,
                            *spread,
                            seed ^ 0x9e37_79b9_7f4a_7c15,
                        )
                    })
                    .transpose()?;
                (train, test)
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                subset,
                test_subset,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                if let Some(n) = subset {
                    train = train.take(*n);
                }
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => {
                        let mut t = load_idx(i, l)?;
                        if let Some(n) = test_subset {
                            t = t.take(*n);
                        }
                        Some(t)
                    }
                    (None, None) => None,
                    _ => {
                        return Err(Error::Config(
                            "test_images and test_labels must be given together".into(),
                        ))
                    }
                };
                (train, test)
            }
        };
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let train = train.normalized();
        let norm = train.normalization();
        let test = test.map(|t| t.with_normalization(norm));
        Ok(Self { train, test })
    }

    pub fn get(&self, split: &str) -> Result<&Dataset> {
        match split {
            "train" => Ok(&self.train),
            "test" => self
                .test
                .as_ref()
                .ok_or_else(|| Error::Config("the dataset has no test split".into())),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

pub fn build_architecture(spec: &NetworkSpec, data: &Dataset) -> Architecture {
    let sample = data.sample_shape().to_vec();
    match spec {
        NetworkSpec::Mlp { hidden } => {
            let mut dims = vec![sample.iter().product()];
            dims.extend(hidden);
            dims.push(data.num_classes());
            let mlp = Architecture::mlp(&dims);
            if sample.len() == 1 {
                mlp
            } else {
                let mut layers = vec![LayerSpec::Flatten];
                layers.extend(mlp.layers);
                Architecture::new(sample, layers)
            }
        }
        NetworkSpec::Layers { layers } => Architecture::new(sample, layers.clone()),
    }
}

/// Loss and accuracy of one model on both splits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub train: Evaluation,
    pub test: Option<Evaluation>,
}

impl Scores {
    /// Held-out accuracy when available, training accuracy otherwise.
    pub fn accuracy(&self) -> f64 {
        self.test.unwrap_or(self.train).accuracy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub epoch: Option<usize>,
    pub bits: u32,
    pub scores: Scores,
    /// Artifact path relative to the run directory.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Full-precision and directly quantized pretrained models.
    pub baselines: Vec<ReportRow>,
    /// Averaged captures, then `Avg.`, `Direct`, and `Fine-tune`.
    pub rows: Vec<ReportRow>,
}

pub const CAPTURE_LABEL: &str = "Capture";
pub const AVG_LABEL: &str = "Avg.";
pub const DIRECT_LABEL: &str = "Direct";
pub const FINETUNE_LABEL: &str = "Fine-tune";
pub const FULL_PRECISION_LABEL: &str = "Full-precision";
pub const DIRECT_PRETRAINED_LABEL: &str = "Direct (pretrained)";

#[derive(Serialize, Deserialize)]
struct CsvRow {
    model: String,
    epoch: Option<usize>,
    bits: u32,
    train_loss: f64,
    train_accuracy: f64,
    test_loss: Option<f64>,
    test_accuracy: Option<f64>,
    checkpoint: String,
}

impl MetricsReport {
    fn row(&self, label: &str) -> &ReportRow {
        self.rows
            .iter()
            .chain(&self.baselines)
            .find(|r| r.label == label)
            .expect("report row present")
    }

    pub fn captures(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.label == CAPTURE_LABEL)
    }

    pub fn averaged(&self) -> &ReportRow {
        self.row(AVG_LABEL)
    }

    pub fn direct(&self) -> &ReportRow {
        self.row(DIRECT_LABEL)
    }

    pub fn finetuned(&self) -> &ReportRow {
        self.row(FINETUNE_LABEL)
    }

    pub fn full_precision(&self) -> &ReportRow {
        self.row(FULL_PRECISION_LABEL)
    }

    pub fn direct_pretrained(&self) -> &ReportRow {
        self.row(DIRECT_PRETRAINED_LABEL)
    }

    pub fn mean_capture_accuracy(&self) -> f64 {
        let accs: Vec<f64> = self.captures().map(|r| r.scores.accuracy()).collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    }

    pub fn max_capture_accuracy(&self) -> f64 {
        self.captures()
            .map(|r| r.scores.accuracy())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn write_rows(rows: &[ReportRow], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in rows {
            w.serialize(CsvRow {
                model: r.label.clone(),
                epoch: r.epoch,
                bits: r.bits,
                train_loss: r.scores.train.loss,
                train_accuracy: r.scores.train.accuracy,
                test_loss: r.scores.test.map(|e| e.loss),
                test_accuracy: r.scores.test.map(|e| e.accuracy),
                checkpoint: r.checkpoint.clone(),
            })
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        Self::write_rows(&self.rows, &dir.join("metrics.csv"))?;
        Self::write_rows(&self.baselines, &dir.join("baselines.csv"))?;
        let path = dir.join("summary.txt");
        fs::write(&path, self.summary()).map_err(|e| Error::io(&path, e))
    }

    /// Read back `metrics.csv` and `baselines.csv`.
    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<ReportRow>> {
            let path = dir.join(name);
            let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
            r.deserialize::<CsvRow>()
                .map(|row| {
                    let row = row.map_err(|e| csv_error(&path, e))?;
                    Ok(ReportRow {
                        label: row.model,
                        epoch: row.epoch,
                        bits: row.bits,
                        scores: Scores {
                            train: Evaluation {
                                loss: row.train_loss,
                                accuracy: row.train_accuracy,
                            },
                            test: row.test_loss.zip(row.test_accuracy).map(|(loss, accuracy)| {
                                Evaluation { loss, accuracy }
                            }),
                        },
                        checkpoint: row.checkpoint,
                    })
                })
                .collect()
        };
        Ok(Self {
            rows: read("metrics.csv")?,
            baselines: read("baselines.csv")?,
        })
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let held_out = self.rows.iter().any(|r| r.scores.test.is_some());
        out.push_str(&format!(
            "{:<22} {:>6} {:>5} {:>11} {:>10}\n",
            "model",
            "epoch",
            "bits",
            "train acc %",
            if held_out { "test acc %" } else { "" }
        ));
        for r in self.baselines.iter().chain(&self.rows) {
            let epoch = r.epoch.map(|e| e.to_string()).unwrap_or_default();
            let test = r
                .scores
                .test
                .map(|e| format!("{:.2}", 100.0 * e.accuracy))
                .unwrap_or_default();
            out.push_str(&format!(
                "{:<22} {:>6} {:>5} {:>11.2} {:>10}\n",
                r.label,
                epoch,
                r.bits,
                100.0 * r.scores.train.accuracy,
                test
            ));
        }
        out.push_str(&format!(
            "\nmean capture accuracy {:.2} %, best capture {:.2} %\n",
            100.0 * self.mean_capture_accuracy(),
            100.0 * self.max_capture_accuracy()
        ));
        out
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::malformed(path, e.to_string())
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        lr: f64,
        batch_loss: f64,
        train_loss: f64,
        train_accuracy: f64,
        test_loss: Option<f64>,
        test_accuracy: Option<f64>,
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for h in history {
        w.serialize(Row {
            epoch: h.epoch,
            lr: h.lr,
            batch_loss: h.train_loss,
            train_loss: h.metrics.train.loss,
            train_accuracy: h.metrics.train.accuracy,
            test_loss: h.metrics.test.map(|e| e.loss),
            test_accuracy: h.metrics.test.map(|e| e.accuracy),
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn in_stage<T>(stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    })
}

/// One run directory bound to one resolved configuration.
#[derive(Debug)]
pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
    data: Splits,
}

impl Pipeline {
    /// Resolve `cfg`, load the data, and claim the output directory. A
    /// directory holding a different frozen config is refused.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        let cfg = in_stage("config", || cfg.resolve())?;
        let out = cfg.output_dir.clone();
        in_stage("config", || {
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let frozen = out.join(FROZEN_CONFIG);
            if frozen.exists() {
                let text = fs::read_to_string(&frozen).map_err(|e| Error::io(&frozen, e))?;
                if RunConfig::from_toml(&text)? != cfg {
                    return Err(Error::Config(format!(
                        "{} was produced by a different configuration",
                        out.display()
                    )));
                }
            } else {
                fs::write(&frozen, cfg.to_toml()).map_err(|e| Error::io(&frozen, e))?;
            }
            Ok(())
        })?;
        let data = in_stage("data", || Splits::load(&cfg.dataset, cfg.seed))?;
        Ok(Self { cfg, out, data })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn data(&self) -> &Splits {
        &self.data
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn done(&self, rel: &str) -> bool {
        self.path(rel).join(MANIFEST_FILE).is_file()
    }

    fn provenance(&self, stage: &str, seed: u64, schedule: Option<&ScheduleSpec>) -> Provenance {
        Provenance {
            stage: Some(stage.into()),
            seed: Some(seed),
            epoch: None,
            lr: None,
            schedule_id: schedule.map(ScheduleSpec::id),
        }
    }

    fn scores(&self, net: &Network) -> Result<Scores> {
        Ok(Scores {
            train: evaluate(net, &self.data.train)?,
            test: self.data.test.as_ref().map(|t| evaluate(net, t)).transpose()?,
        })
    }

    fn stage_seed(&self, offset: u64) -> u64 {
        self.cfg.seed.wrapping_add(offset)
    }

    /// Step 1: full-precision training, or import of a supplied checkpoint.
    pub fn pretrain(&self) -> Result<Network> {
        in_stage("pretrain", || {
            let dir = self.path(PRETRAIN_DIR);
            if !self.done(PRETRAIN_DIR) {
                let p = &self.cfg.pretrain;
                let net = match &p.checkpoint {
                    Some(path) => {
                        info!("pretrain: importing {}", path.display());
                        checkpoint::load_network(path)?
                    }
                    None => {
                        info!("pretrain: training {} epochs", p.schedule.total_epochs());
                        let arch = build_architecture(&self.cfg.network, &self.data.train);
                        let init = init_weights(&arch, self.cfg.seed)?;
                        let opts = TrainOptions {
                            batch_size: p.batch_size,
                            momentum: p.momentum,
                            l2_scale: p.l2_scale,
                        };
                        let (net, history) = qat::pretrain(
                            init,
                            &self.data.train,
                            &p.schedule,
                            self.stage_seed(0),
                            &opts,
                            self.data.test.as_ref(),
                        )?;
                        write_history(&self.path("pretrain_history.csv"), &history)?;
                        net
                    }
                };
                let prov = self.provenance("pretrain", self.cfg.seed, Some(&p.schedule));
                checkpoint::save(&Artifact::FullPrecision(net), &dir, prov)?;
            }
            checkpoint::load_network(&dir)
        })
    }

    /// Step 2: direct quantization with MSE-optimal step sizes.
    pub fn quantize(&self) -> Result<QuantizedModel> {
        let net = self.pretrain()?;
        in_stage("quantize", || {
            let dir = self.path(DIRECT_DIR);
            if !self.done(DIRECT_DIR) {
                info!("quantize: {} bits", self.cfg.bits);
                let q = direct_quantize_model(&net, self.cfg.bits)?;
                let prov = self.provenance("quantize", self.cfg.seed, None);
                checkpoint::save(&Artifact::Quantized(q), &dir, prov)?;
            }
            match checkpoint::load(&dir)?.0 {
                Artifact::Quantized(q) => Ok(q),
                other => Err(Error::malformed(&dir, format!("unexpected {:?}", other.kind()))),
            }
        })
    }

    /// Step 3: cyclical retraining from the directly quantized model.
    pub fn retrain(&self) -> Result<CaptureBank> {
        let net = self.pretrain()?;
        let direct = self.quantize()?;
        in_stage("retrain-cyclical", || {
            let bank_dir = self.path(BANK_DIR);
            if !bank_dir.join(BANK_FILE).is_file() {
                let schedule = self.cfg.retrain_schedule()?;
                info!("retrain-cyclical: {}", schedule.id());
                let model = ShadowModel::new(net.clone(), direct.quantizer().clone())?;
                let r = &self.cfg.retrain;
                let opts = TrainOptions {
                    batch_size: r.batch_size,
                    momentum: r.momentum,
                    l2_scale: 0.0,
                };
                let seed = self.stage_seed(1);
                let outcome = qat::retrain(
                    model,
                    &self.data.train,
                    &schedule,
                    r.epochs,
                    seed,
                    &opts,
                    self.data.test.as_ref(),
                )?;
                write_history(&self.path("retrain_history.csv"), &outcome.history)?;
                let mut last = outcome.model;
                last.canonicalize();
                let prov = self.provenance("retrain-cyclical", seed, Some(&schedule));
                checkpoint::save(&Artifact::Shadow(last), self.path(RETRAIN_FINAL_DIR), prov.clone())?;
                checkpoint::save_bank(&outcome.bank, &bank_dir, &prov)?;
            }
            checkpoint::load_bank(&bank_dir)
        })
    }

    /// Step 4a: average the last `average` captures.
    pub fn average(&self) -> Result<AveragedModel> {
        let bank = self.retrain()?;
        in_stage("average", || {
            let dir = self.path(AVERAGED_DIR);
            if !self.done(AVERAGED_DIR) {
                info!("average: last {} of {} captures", self.cfg.average, bank.len());
                let avg = average_models(&bank, self.cfg.average)?;
                let prov = self.provenance("average", self.cfg.seed, None);
                checkpoint::save(&Artifact::Averaged(avg), &dir, prov)?;
            }
            checkpoint::load_averaged(&dir)
        })
    }

    /// Step 4b and 5: re-quantize the average and fine-tune it.
    pub fn finetune(&self) -> Result<ShadowModel> {
        let avg = self.average()?;
        in_stage("finetune", || {
            let rq_dir = self.path(REQUANTIZED_DIR);
            if !self.done(REQUANTIZED_DIR) {
                let mut rq = requantize_averaged(&avg, self.cfg.bits)?;
                rq.canonicalize();
                let prov = self.provenance("requantize", self.cfg.seed, None);
                checkpoint::save(&Artifact::Shadow(rq), &rq_dir, prov)?;
            }
            let rq = checkpoint::load_shadow(&rq_dir)?;
            let dir = self.path(FINAL_DIR);
            if !self.done(FINAL_DIR) {
                let f = &self.cfg.finetune;
                let lr = self.cfg.finetune_lr()?;
                info!("finetune: {} epochs from lr {lr}", f.epochs);
                let opts = TrainOptions {
                    batch_size: f.batch_size,
                    momentum: f.momentum,
                    l2_scale: 0.0,
                };
                let seed = self.stage_seed(2);
                let mut model = qat::finetune(rq, &self.data.train, lr, f.epochs, f.decay, seed, &opts)?;
                model.canonicalize();
                let prov = Provenance {
                    lr: Some(lr),
                    ..self.provenance("finetune", seed, None)
                };
                checkpoint::save(&Artifact::Shadow(model), &dir, prov)?;
            }
            checkpoint::load_shadow(&dir)
        })
    }

    /// Evaluate every persisted artifact and write the report files.
    pub fn report(&self) -> Result<MetricsReport> {
        let fp = self.pretrain()?;
        let direct = self.quantize()?;
        let bank = self.retrain()?;
        let avg = self.average()?;
        let final_model = self.finetune()?;
        in_stage("report", || {
            let rq = checkpoint::load_shadow(self.path(REQUANTIZED_DIR))?;
            let bits = self.cfg.bits;
            let row = |label: &str, epoch, bits, net: &Network, rel: String| -> Result<ReportRow> {
                Ok(ReportRow {
                    label: label.into(),
                    epoch,
                    bits,
                    scores: self.scores(net)?,
                    checkpoint: rel,
                })
            };
            let baselines = vec![
                row(FULL_PRECISION_LABEL, None, 32, &fp, PRETRAIN_DIR.into())?,
                row(DIRECT_PRETRAINED_LABEL, None, bits, direct.network(), DIRECT_DIR.into())?,
            ];
            let mut rows = Vec::new();
            for c in bank.last(self.cfg.average)? {
                let rel = format!("{BANK_DIR}/{}", checkpoint::capture_dir_name(c.epoch));
                rows.push(row(CAPTURE_LABEL, Some(c.epoch), bits, c.model.applied(), rel)?);
            }
            rows.push(row(AVG_LABEL, None, avg.effective_bits(), avg.network(), AVERAGED_DIR.into())?);
            rows.push(row(DIRECT_LABEL, None, bits, rq.applied(), REQUANTIZED_DIR.into())?);
            rows.push(row(FINETUNE_LABEL, None, bits, final_model.applied(), FINAL_DIR.into())?);
            let report = MetricsReport { baselines, rows };
            report.write(&self.out)?;
            Ok(report)
        })
    }
}

/// Run all five steps, persisting every intermediate artifact, and return the
/// metrics report. Completed stages found on disk are reused.
pub fn run_sqwa(cfg: RunConfig) -> Result<MetricsReport> {
    let pipeline = Pipeline::open(cfg)?;
    let report = pipeline.report()?;
    info!("sqwa: finished in {}", pipeline.output_dir().display());
    Ok(report)
}
