//! Experiment configuration, orchestration, checkpoints and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{
    compute_class_centers, predict_knn, predict_mlp, predict_sm, train_baseline, train_mlp_head, ClassCenters,
    HeadConfig,
};
use crate::datasets::{
    augment_gaussian, inject_label_noise, load_hhar, load_sample_set, load_usc_had, preprocess, save_sample_set, split,
    synth_dataset, Provenance, SampleSet, SplitMode, HHAR_ACTIVITIES, USC_HAD_ACTIVITIES,
};
use crate::denoiser::{
    denoise_embeddings, fit_distance_stats, qq_data, similarities_to_center, write_denoise_csv, DenoiseReport,
    DistanceStats,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::network::{embed_batch, SenConfig, SenWeights};
use crate::pairwise::{similarity_gap, train_sen, write_loss_history, TrainConfig};
use crate::seeding::{derive_seed, rng_for};
use crate::signal::{bin_count, tensorize, FrequencyLayout, InputTensor, TensorizeConfig};
use crate::tensor::{OptimizerKind, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Hhar,
    UscHad,
    Synth,
}

impl std::str::FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hhar" => Ok(DatasetSource::Hhar),
            "usc_had" => Ok(DatasetSource::UscHad),
            "synth" => Ok(DatasetSource::Synth),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetSource::Hhar => "hhar",
            DatasetSource::UscHad => "usc_had",
            DatasetSource::Synth => "synth",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Sm,
    Knn,
    Mlp,
    Baseline,
}

impl Classifier {
    pub fn name(self) -> &'static str {
        match self {
            Classifier::Sm => "sm",
            Classifier::Knn => "knn",
            Classifier::Mlp => "mlp",
            Classifier::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sm" => Ok(Classifier::Sm),
            "knn" => Ok(Classifier::Knn),
            "mlp" => Ok(Classifier::Mlp),
            "baseline" => Ok(Classifier::Baseline),
            other => Err(Error::Config(format!("unknown classifier `{other}`"))),
        }
    }
}

/// Every knob of an experiment. Serialized as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub data_path: Option<PathBuf>,
    /// Sample cache written by `prep` and reused when present.
    pub cache: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub sample_rate: f64,
    pub window: usize,
    pub max_gap: f64,
    pub tensorize: TensorizeConfig,
    /// `None` splits by `train_frac`; `Some(user)` holds that user out.
    pub holdout_user: Option<String>,
    pub train_frac: f64,
    pub augment_copies: usize,
    pub augment_std: f64,
    pub sen: SenConfig,
    pub train: TrainConfig,
    pub head: HeadConfig,
    pub classifiers: Vec<Classifier>,
    pub knn_k: usize,
    pub noise_rate: f64,
    pub noise_rates: Vec<f64>,
    pub stress_sizes: Vec<usize>,
    pub denoise_clean_per_class: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synth,
            data_path: None,
            cache: None,
            synth_classes: 6,
            synth_train_per_class: 30,
            synth_test_per_class: 50,
            sample_rate: 25.0,
            window: 150,
            max_gap: 1.0,
            tensorize: TensorizeConfig::default(),
            holdout_user: None,
            train_frac: 0.8,
            augment_copies: 0,
            augment_std: 0.1,
            sen: SenConfig::default(),
            train: TrainConfig::default(),
            head: HeadConfig::default(),
            classifiers: vec![Classifier::Sm, Classifier::Knn, Classifier::Mlp],
            knn_k: 5,
            noise_rate: 0.0,
            noise_rates: vec![0.1, 0.2, 0.3, 0.4],
            stress_sizes: vec![30, 80, 110, 140, 170, 200],
            denoise_clean_per_class: 30,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Applies one `key=value` setting. Keys shared between the pairwise
    /// trainer and the heads use a `head_` prefix for the heads.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "dataset" => self.dataset = parse(key, v)?,
            "data_path" => self.data_path = opt_path(v),
            "cache" => self.cache = opt_path(v),
            "synth_classes" => self.synth_classes = parse(key, v)?,
            "synth_train_per_class" => self.synth_train_per_class = parse(key, v)?,
            "synth_test_per_class" => self.synth_test_per_class = parse(key, v)?,
            "sample_rate" => {
                self.sample_rate = parse(key, v)?;
                self.tensorize.sample_rate = self.sample_rate;
            }
            "window" => self.window = parse(key, v)?,
            "max_gap" => self.max_gap = parse(key, v)?,
            "intervals" => {
                self.tensorize.intervals = parse(key, v)?;
                self.sen.intervals = self.tensorize.intervals;
            }
            "frequency_layout" => self.tensorize.layout = parse::<FrequencyLayout>(key, v)?,
            "holdout_user" => self.holdout_user = (!v.is_empty()).then(|| v.to_string()),
            "train_frac" => self.train_frac = parse(key, v)?,
            "augment_copies" => self.augment_copies = parse(key, v)?,
            "augment_std" => self.augment_std = parse(key, v)?,
            "conv_widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                self.sen.conv_widths = w
                    .try_into()
                    .map_err(|_| Error::Config("`conv_widths` needs exactly 4 values".into()))?;
            }
            "channels" => self.sen.channels = parse(key, v)?,
            "lstm_hidden" => self.sen.lstm_hidden = parse(key, v)?,
            "sigmoid_k" => self.train.sigmoid_k = parse(key, v)?,
            "batch_pairs" => self.train.batch_pairs = parse(key, v)?,
            "positive_fraction" => self.train.positive_fraction = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "optimizer" => self.train.optimizer = parse::<OptimizerKind>(key, v)?,
            "head_hidden" => self.head.hidden = parse(key, v)?,
            "head_epochs" => self.head.epochs = parse(key, v)?,
            "head_batch" => self.head.batch_size = parse(key, v)?,
            "head_learning_rate" => self.head.learning_rate = parse(key, v)?,
            "head_optimizer" => self.head.optimizer = parse::<OptimizerKind>(key, v)?,
            "classifiers" => self.classifiers = parse_list(key, v)?,
            "knn_k" => self.knn_k = parse(key, v)?,
            "noise_rate" => self.noise_rate = parse(key, v)?,
            "noise_rates" => self.noise_rates = parse_list(key, v)?,
            "stress_sizes" => self.stress_sizes = parse_list(key, v)?,
            "denoise_clean_per_class" => self.denoise_clean_per_class = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// All settings as `(key, value)` pairs, in a stable order that
    /// [`ExperimentConfig::set`] accepts back.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        vec![
            ("dataset", self.dataset.to_string()),
            ("data_path", path(&self.data_path)),
            ("cache", path(&self.cache)),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_train_per_class", self.synth_train_per_class.to_string()),
            ("synth_test_per_class", self.synth_test_per_class.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("window", self.window.to_string()),
            ("max_gap", self.max_gap.to_string()),
            ("intervals", self.tensorize.intervals.to_string()),
            (
                "frequency_layout",
                match self.tensorize.layout {
                    FrequencyLayout::BinOrder => "bin_order".into(),
                    FrequencyLayout::MagnitudeRanked => "magnitude_ranked".into(),
                },
            ),
            ("holdout_user", self.holdout_user.clone().unwrap_or_default()),
            ("train_frac", self.train_frac.to_string()),
            ("augment_copies", self.augment_copies.to_string()),
            ("augment_std", self.augment_std.to_string()),
            ("conv_widths", join(&self.sen.conv_widths)),
            ("channels", self.sen.channels.to_string()),
            ("lstm_hidden", self.sen.lstm_hidden.to_string()),
            ("sigmoid_k", self.train.sigmoid_k.to_string()),
            ("batch_pairs", self.train.batch_pairs.to_string()),
            ("positive_fraction", self.train.positive_fraction.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("learning_rate", self.train.learning_rate.to_string()),
            ("optimizer", optimizer_name(self.train.optimizer).into()),
            ("head_hidden", self.head.hidden.to_string()),
            ("head_epochs", self.head.epochs.to_string()),
            ("head_batch", self.head.batch_size.to_string()),
            ("head_learning_rate", self.head.learning_rate.to_string()),
            ("head_optimizer", optimizer_name(self.head.optimizer).into()),
            (
                "classifiers",
                self.classifiers.iter().map(|c| c.name()).collect::<Vec<_>>().join(","),
            ),
            ("knn_k", self.knn_k.to_string()),
            ("noise_rate", self.noise_rate.to_string()),
            ("noise_rates", join(&self.noise_rates)),
            ("stress_sizes", join(&self.stress_sizes)),
            ("denoise_clean_per_class", self.denoise_clean_per_class.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    /// `seed` must be present.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen_seed = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            seen_seed |= k.trim() == "seed";
            cfg.set(k.trim(), v)?;
        }
        if !seen_seed {
            return Err(Error::Config("`seed` is mandatory".into()));
        }
        Ok(cfg)
    }

    /// Loads a config file (if any), applies `--key=value` overrides and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Load {
                path: p.to_path_buf(),
                detail: e.to_string(),
            })?,
            None => String::new(),
        };
        for o in overrides {
            let kv = o
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("override `{o}` must look like --key=value")))?;
            text.push('\n');
            text.push_str(kv);
        }
        let cfg = ExperimentConfig::from_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of classes of the selected dataset.
    pub fn classes(&self) -> usize {
        match self.dataset {
            DatasetSource::Synth => self.synth_classes,
            DatasetSource::Hhar => HHAR_ACTIVITIES.len(),
            DatasetSource::UscHad => USC_HAD_ACTIVITIES.len(),
        }
    }

    /// Encoder configuration with the input geometry filled in from the
    /// tensorization settings.
    pub fn sen_config(&self) -> SenConfig {
        let mut sen = self.sen.clone();
        sen.intervals = self.tensorize.intervals;
        sen.freq_bins = bin_count(self.window / self.tensorize.intervals.max(1));
        sen.seed = self.seed;
        sen
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            classes: self.classes(),
            seed: self.seed,
            ..self.head.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset != DatasetSource::Synth {
            match &self.data_path {
                None => return Err(Error::Config(format!("dataset {} needs `data_path`", self.dataset))),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!("data_path {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        if self.tensorize.intervals == 0 || !self.window.is_multiple_of(self.tensorize.intervals) {
            return Err(Error::Config(format!(
                "window {} is not divisible into {} intervals",
                self.window, self.tensorize.intervals
            )));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} outside (0, 1)", self.train_frac)));
        }
        if let Some(r) = std::iter::once(&self.noise_rate)
            .chain(&self.noise_rates)
            .find(|r| !(0.0..1.0).contains(*r))
        {
            return Err(Error::Config(format!("noise rate {r} outside [0, 1)")));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        self.sen_config().validate()
    }
}

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
    }
}

/// Train and test sets of an experiment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: SampleSet,
    pub test: SampleSet,
}

fn build_full_set(cfg: &ExperimentConfig) -> Result<SampleSet> {
    let path = cfg
        .data_path
        .as_deref()
        .ok_or_else(|| Error::Config("missing data_path".into()))?;
    let recordings = match cfg.dataset {
        DatasetSource::Hhar => load_hhar(path)?.0,
        DatasetSource::UscHad => load_usc_had(path)?,
        DatasetSource::Synth => unreachable!("synthetic data is generated, not loaded"),
    };
    let samples = preprocess(&recordings, cfg.sample_rate, cfg.window, cfg.max_gap)?;
    let mut params = BTreeMap::new();
    params.insert("sample_rate".into(), cfg.sample_rate.to_string());
    params.insert("window".into(), cfg.window.to_string());
    params.insert("max_gap".into(), cfg.max_gap.to_string());
    SampleSet::new(
        samples,
        cfg.classes(),
        Provenance {
            dataset: cfg.dataset.to_string(),
            params,
            seed: cfg.seed,
        },
    )
}

/// Builds the full preprocessed sample set of a real dataset and writes it to
/// the configured cache.
pub fn run_prep(cfg: &ExperimentConfig) -> Result<SampleSet> {
    let cache = cfg
        .cache
        .as_deref()
        .ok_or_else(|| Error::Config("prep needs `cache`".into()))?;
    if cfg.dataset == DatasetSource::Synth {
        return Err(Error::Config(
            "prep applies to hhar and usc_had; use the synth command".into(),
        ));
    }
    let set = build_full_set(cfg)?;
    save_sample_set(&set, cache)?;
    Ok(set)
}

/// Loads or generates the data and splits it. Real data sets go through
/// the sample cache when one is configured; augmentation only touches the
/// training side.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test) = match cfg.dataset {
        DatasetSource::Synth => (
            synth_dataset(cfg.synth_classes, cfg.synth_train_per_class, cfg.seed)?,
            synth_dataset(
                cfg.synth_classes,
                cfg.synth_test_per_class,
                derive_seed(cfg.seed, "synth-test"),
            )?,
        ),
        _ => {
            let full = match &cfg.cache {
                Some(c) if c.exists() => load_sample_set(c)?,
                Some(c) => {
                    let set = build_full_set(cfg)?;
                    save_sample_set(&set, c)?;
                    set
                }
                None => build_full_set(cfg)?,
            };
            let mode = match &cfg.holdout_user {
                Some(user) => SplitMode::LeaveOneUserOut { user: user.clone() },
                None => SplitMode::Fraction {
                    train_frac: cfg.train_frac,
                    seed: cfg.seed,
                },
            };
            split(&full, &mode)?
        }
    };
    let train = if cfg.augment_copies > 0 {
        augment_gaussian(&train, cfg.augment_copies, cfg.augment_std, cfg.seed)?
    } else {
        train
    };
    Ok(PreparedData { train, test })
}

pub fn tensorize_set(set: &SampleSet, cfg: &TensorizeConfig) -> Result<Vec<InputTensor>> {
    set.samples.par_iter().map(|s| tensorize(s, cfg)).collect()
}

/// Everything the embedding-based classifiers need from one trained encoder.
pub struct TrainedSen {
    pub weights: SenWeights,
    pub loss_history: Vec<f64>,
    pub train_embeddings: Vec<Vec<f64>>,
    pub centers: ClassCenters,
}

/// Wraps existing weights, embedding the training set and its centers.
pub fn embed_trained(
    cfg: &ExperimentConfig,
    weights: SenWeights,
    inputs: &[InputTensor],
    labels: &[usize],
) -> Result<TrainedSen> {
    let train_embeddings = embed_batch(inputs, &weights)?;
    let centers = compute_class_centers(&train_embeddings, labels, cfg.classes())?;
    Ok(TrainedSen {
        weights,
        loss_history: Vec::new(),
        train_embeddings,
        centers,
    })
}

pub fn fit_sen(cfg: &ExperimentConfig, inputs: &[InputTensor], labels: &[usize]) -> Result<TrainedSen> {
    let (weights, loss_history) = train_sen(inputs, labels, &cfg.sen_config(), &cfg.train_config())?;
    Ok(TrainedSen {
        loss_history,
        ..embed_trained(cfg, weights, inputs, labels)?
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub metrics: BTreeMap<String, MetricsReport>,
    /// Same-class minus cross-class mean similarity of test embeddings.
    pub similarity_gap: Option<f64>,
    /// Predictions per classifier, in test order.
    #[serde(skip)]
    pub predictions: BTreeMap<String, Vec<usize>>,
}

/// Trains the encoder (and the baseline when selected) on `train` and
/// evaluates every selected classifier on `test`.
pub fn classify(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(ClassificationReport, Option<TrainedSen>)> {
    classify_with(cfg, data, None)
}

/// Like [`classify`], but with an already trained encoder when given.
pub fn classify_with(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    pretrained: Option<SenWeights>,
) -> Result<(ClassificationReport, Option<TrainedSen>)> {
    let classes = cfg.classes();
    let xtr = tensorize_set(&data.train, &cfg.tensorize)?;
    let xte = tensorize_set(&data.test, &cfg.tensorize)?;
    let ytr = data.train.labels();
    let yte = data.test.clean_labels.clone();
    let mut predictions = BTreeMap::new();
    let mut gap = None;

    let needs_sen = cfg.classifiers.iter().any(|c| *c != Classifier::Baseline);
    let sen = if needs_sen {
        let sen = match pretrained {
            Some(weights) => embed_trained(cfg, weights, &xtr, &ytr)?,
            None => fit_sen(cfg, &xtr, &ytr)?,
        };
        let test_emb = embed_batch(&xte, &sen.weights)?;
        gap = similarity_gap(&test_emb, &yte).ok();
        for clf in &cfg.classifiers {
            let preds: Vec<usize> = match clf {
                Classifier::Sm => test_emb
                    .iter()
                    .map(|e| predict_sm(e, &sen.centers))
                    .collect::<Result<_>>()?,
                Classifier::Knn => test_emb
                    .par_iter()
                    .map(|e| predict_knn(e, &sen.train_embeddings, &ytr, cfg.knn_k.min(ytr.len())))
                    .collect::<Result<_>>()?,
                Classifier::Mlp => {
                    let (head, _) = train_mlp_head(&sen.train_embeddings, &ytr, &cfg.head_config())?;
                    test_emb.iter().map(|e| predict_mlp(e, &head)).collect::<Result<_>>()?
                }
                Classifier::Baseline => continue,
            };
            predictions.insert(clf.name().to_string(), preds);
        }
        Some(sen)
    } else {
        None
    };
    if cfg.classifiers.contains(&Classifier::Baseline) {
        let (model, _) = train_baseline(&xtr, &ytr, &cfg.sen_config(), &cfg.head_config())?;
        let preds = xte.par_iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
        predictions.insert("baseline".into(), preds);
    }
    let metrics = predictions
        .iter()
        .map(|(k, p)| Ok((k.clone(), evaluate(&yte, p, classes)?)))
        .collect::<Result<_>>()?;
    Ok((
        ClassificationReport {
            metrics,
            similarity_gap: gap,
            predictions,
        },
        sen,
    ))
}

/// Applies the configured label-noise rate to the training side only.
fn with_train_noise(cfg: &ExperimentConfig, data: &PreparedData, rate: f64) -> Result<PreparedData> {
    Ok(PreparedData {
        train: inject_label_noise(&data.train, rate, derive_seed(cfg.seed, "train-noise"))?,
        test: data.test.clone(),
    })
}

pub fn run_classification(cfg: &ExperimentConfig) -> Result<ClassificationReport> {
    run_classification_with(cfg, None)
}

/// Classification run that reuses a saved encoder instead of training one.
pub fn run_classification_with(cfg: &ExperimentConfig, pretrained: Option<SenWeights>) -> Result<ClassificationReport> {
    let data = with_train_noise(cfg, &prepare_data(cfg)?, cfg.noise_rate)?;
    let (report, sen) = classify_with(cfg, &data, pretrained)?;
    let out = Outputs::create(cfg)?;
    out.json("metrics.json", &report)?;
    for (name, preds) in &report.predictions {
        let mut rows = String::from("sample_id,true_label,predicted_label\n");
        for (i, (t, p)) in data.test.clean_labels.iter().zip(preds).enumerate() {
            let _ = writeln!(rows, "{i},{t},{p}");
        }
        out.text(&format!("predictions_{name}.csv"), &rows)?;
    }
    if let Some(sen) = sen.filter(|s| !s.loss_history.is_empty()) {
        let loss = out.path("loss.csv");
        write_loss_history(&loss, &sen.loss_history)?;
        out.record("loss.csv")?;
        checkpoint_save(&sen.weights, &out.path("sen.senw"))?;
        out.record("sen.senw")?;
    }
    out.finish("classify")?;
    Ok(report)
}

/// Trains only the encoder and writes its checkpoint and loss curve.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainedSen> {
    let data = with_train_noise(cfg, &prepare_data(cfg)?, cfg.noise_rate)?;
    let xtr = tensorize_set(&data.train, &cfg.tensorize)?;
    let sen = fit_sen(cfg, &xtr, &data.train.labels())?;
    let out = Outputs::create(cfg)?;
    write_loss_history(&out.path("loss.csv"), &sen.loss_history)?;
    out.record("loss.csv")?;
    checkpoint_save(&sen.weights, &out.path("sen.senw"))?;
    out.record("sen.senw")?;
    out.finish("train")?;
    Ok(sen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressRow {
    pub per_class: usize,
    pub avg_f1: f64,
    pub accuracy: f64,
    /// Support-weighted mean precision.
    pub precision: f64,
}

fn weighted_precision(m: &MetricsReport) -> f64 {
    let n: usize = m.per_class.iter().map(|c| c.support).sum();
    m.per_class.iter().map(|c| c.precision * c.support as f64).sum::<f64>() / n.max(1) as f64
}

/// Trains on `m` samples per class for every configured size and scores
/// SEN-SM on the one fixed test split.
pub fn run_stress(cfg: &ExperimentConfig) -> Result<Vec<StressRow>> {
    let data = prepare_data(cfg)?;
    let xte = tensorize_set(&data.test, &cfg.tensorize)?;
    let yte = data.test.clean_labels.clone();
    let mut rows = Vec::with_capacity(cfg.stress_sizes.len());
    for &m in &cfg.stress_sizes {
        let mut rng = rng_for(cfg.seed, &format!("stress-{m}"));
        let subset = data.train.subset(&data.train.stratified_indices(m, &mut rng)?);
        let xtr = tensorize_set(&subset, &cfg.tensorize)?;
        let sen = fit_sen(cfg, &xtr, &subset.labels())?;
        let preds = embed_batch(&xte, &sen.weights)?
            .iter()
            .map(|e| predict_sm(e, &sen.centers))
            .collect::<Result<Vec<_>>>()?;
        let report = evaluate(&yte, &preds, cfg.classes())?;
        rows.push(StressRow {
            per_class: m,
            avg_f1: report.avg_f1,
            accuracy: report.accuracy,
            precision: weighted_precision(&report),
        });
    }
    let out = Outputs::create(cfg)?;
    let mut csv = String::from("per_class,avg_f1,accuracy,precision\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.per_class, r.avg_f1, r.accuracy, r.precision);
    }
    out.text("stress.csv", &csv)?;
    out.json("stress.json", &rows)?;
    out.finish("stress")?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub rate: f64,
    pub sen_sm: MetricsReport,
    pub baseline: MetricsReport,
}

/// For every noise rate, corrupts the training labels, trains SEN and the
/// baseline and scores both on the clean test split.
pub fn noise_rows(cfg: &ExperimentConfig, data: &PreparedData, rates: &[f64]) -> Result<Vec<NoiseRow>> {
    let mut run_cfg = cfg.clone();
    run_cfg.classifiers = vec![Classifier::Sm, Classifier::Baseline];
    rates
        .iter()
        .map(|&rate| {
            let noisy = with_train_noise(cfg, data, rate)?;
            let (report, _) = classify(&run_cfg, &noisy)?;
            Ok(NoiseRow {
                rate,
                sen_sm: report.metrics["sm"].clone(),
                baseline: report.metrics["baseline"].clone(),
            })
        })
        .collect()
}

pub fn run_noise_robustness(cfg: &ExperimentConfig) -> Result<Vec<NoiseRow>> {
    let data = prepare_data(cfg)?;
    let rows = noise_rows(cfg, &data, &cfg.noise_rates)?;
    let out = Outputs::create(cfg)?;
    let mut csv = String::from("noise_rate,sen_sm_accuracy,sen_sm_avg_f1,baseline_accuracy,baseline_avg_f1\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.rate, r.sen_sm.accuracy, r.sen_sm.avg_f1, r.baseline.accuracy, r.baseline.avg_f1
        );
    }
    out.text("noise.csv", &csv)?;
    out.json("noise.json", &rows)?;
    out.finish("noise")?;
    Ok(rows)
}

/// Outcome of a denoising experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiseOutcome {
    pub report: DenoiseReport,
    pub stats: DistanceStats,
    /// Claimed (possibly corrupted) labels of the contaminated set.
    pub claimed: Vec<usize>,
    pub truth: Vec<usize>,
    /// Q-Q rows of the clean subset's between-class similarities.
    #[serde(skip)]
    pub qq_csv: String,
    /// Embeddings of the contaminated set and the clean-subset centers.
    #[serde(skip)]
    pub embeddings: Vec<Vec<f64>>,
    #[serde(skip)]
    pub centers: ClassCenters,
}

/// Trains SEN on a small clean subset, fits the similarity statistics on
/// that same subset and filters the contaminated remainder.
pub fn denoise_experiment(cfg: &ExperimentConfig, data: &PreparedData) -> Result<DenoiseOutcome> {
    let pool = data.train.concat(&data.test);
    let mut rng = rng_for(cfg.seed, "denoise-clean");
    let clean_idx = pool.stratified_indices(cfg.denoise_clean_per_class, &mut rng)?;
    let mut is_clean = vec![false; pool.len()];
    clean_idx.iter().for_each(|&i| is_clean[i] = true);
    let rest: Vec<usize> = (0..pool.len()).filter(|&i| !is_clean[i]).collect();
    let clean = pool.subset(&clean_idx);
    let contaminated = inject_label_noise(
        &pool.subset(&rest),
        cfg.noise_rate,
        derive_seed(cfg.seed, "denoise-noise"),
    )?;

    let xc = tensorize_set(&clean, &cfg.tensorize)?;
    let sen = fit_sen(cfg, &xc, &clean.labels())?;
    let stats = fit_distance_stats(&sen.train_embeddings, &clean.labels(), &sen.centers)?;
    let xn = tensorize_set(&contaminated, &cfg.tensorize)?;
    let emb = embed_batch(&xn, &sen.weights)?;
    let claimed = contaminated.labels();
    let truth = contaminated.clean_labels.clone();
    let report = denoise_embeddings(&emb, &claimed, &sen.centers, &stats, Some(&truth))?;
    let qq_csv = qq_table(&sen.train_embeddings, &clean.labels(), &sen.centers)?;
    Ok(DenoiseOutcome {
        report,
        stats,
        claimed,
        truth,
        qq_csv,
        embeddings: emb,
        centers: sen.centers,
    })
}

pub fn run_denoise(cfg: &ExperimentConfig) -> Result<DenoiseOutcome> {
    let data = prepare_data(cfg)?;
    let outcome = denoise_experiment(cfg, &data)?;
    let out = Outputs::create(cfg)?;
    out.json("denoise.json", &outcome.report)?;
    out.json("distance_stats.json", &outcome.stats)?;
    write_denoise_csv(
        &out.path("denoise.csv"),
        &outcome.report,
        &outcome.claimed,
        Some(&outcome.truth),
    )?;
    out.record("denoise.csv")?;
    out.text("qq.csv", &outcome.qq_csv)?;
    out.finish("denoise")?;
    Ok(outcome)
}

/// Q-Q points of between-class similarities for every ordered class pair of
/// a labelled embedding set, as `claimed,other,theoretical,empirical` rows.
pub fn qq_table(embeddings: &[Vec<f64>], labels: &[usize], centers: &ClassCenters) -> Result<String> {
    let mut csv = String::from("class,other,theoretical,empirical\n");
    for c in 0..centers.len() {
        for o in (0..centers.len()).filter(|&o| o != c) {
            let sims = similarities_to_center(embeddings, labels, centers, c, o)?;
            for (t, e) in qq_data(&sims)? {
                let _ = writeln!(csv, "{c},{o},{t},{e}");
            }
        }
    }
    Ok(csv)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SENW";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes magic, version, the encoder configuration as JSON and every named
/// tensor (name, rank, extents, little-endian reals).
pub fn checkpoint_save(weights: &SenWeights, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_string(weights.config()).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    let params = weights.named_params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, detail: String) -> Error {
        Error::Load {
            path: self.path.to_path_buf(),
            detail,
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(self.err(format!("truncated while reading {field}")));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        let n = self.u64(field)?;
        if n > self.bytes.len() as u64 {
            return Err(self.err(format!("truncated while reading {field}")));
        }
        Ok(n as usize)
    }
}

/// Reads a checkpoint. With `expected`, tensors are checked against that
/// configuration instead of the stored one.
pub fn checkpoint_load(path: &Path, expected: Option<&SenConfig>) -> Result<SenWeights> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let mut c = Cursor { bytes: &bytes, path };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(c.err("magic: not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(c.err(format!("version: found {version}, expected {CHECKPOINT_VERSION}")));
    }
    let n = c.len("config length")?;
    let stored: SenConfig = serde_json::from_slice(c.take(n, "config")?).map_err(|e| c.err(format!("config: {e}")))?;
    let count = c.u64("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(64));
    for i in 0..count {
        let n = c.len("tensor name")?;
        let name = String::from_utf8(c.take(n, "tensor name")?.to_vec())
            .map_err(|_| c.err(format!("tensor {i}: name is not UTF-8")))?;
        let rank = c.u64(&format!("rank of `{name}`"))? as usize;
        if rank > 8 {
            return Err(c.err(format!("rank of `{name}`: {rank} is implausible")));
        }
        let shape = (0..rank)
            .map(|_| c.u64(&format!("shape of `{name}`")).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.saturating_mul(8), &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| c.err(format!("tensor `{name}`: {e}")))?;
        named.push((name, t));
    }
    if !c.bytes.is_empty() {
        return Err(c.err(format!("{} trailing bytes", c.bytes.len())));
    }
    SenWeights::from_tensors(expected.unwrap_or(&stored), named)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// File name → SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

/// Output directory bookkeeping; every written file is hashed into the
/// manifest.
pub struct Outputs {
    dir: PathBuf,
    cfg: ExperimentConfig,
    artifacts: std::cell::RefCell<BTreeMap<String, String>>,
}

impl Outputs {
    pub fn create(cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.output_dir)?;
        let out = Outputs {
            dir: cfg.output_dir.clone(),
            cfg: cfg.clone(),
            artifacts: Default::default(),
        };
        out.text("config.txt", &cfg.to_text())?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Hashes an already-written file into the manifest.
    pub fn record(&self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.path(name))?;
        self.artifacts.borrow_mut().insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn text(&self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.path(name), contents)?;
        self.record(name)
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        self.text(name, &s)
    }

    pub fn finish(&self, command: &str) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            seed: self.cfg.seed,
            config: self
                .cfg
                .entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            artifacts: self.artifacts.borrow().clone(),
        };
        let s = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(self.path("manifest.json"), s)?;
        Ok(manifest)
    }
}

/// Rebuilds the configuration recorded in a manifest.
pub fn config_from_manifest(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut cfg = ExperimentConfig::default();
    for (k, v) in &m.config {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}
