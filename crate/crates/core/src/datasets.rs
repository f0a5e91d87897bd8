//! Recording loaders, the resample/segment preprocessing chain, splits,
//! label perturbation, augmentation, synthetic data and the sample cache.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{rng_for, SenRng};
use crate::signal::{RawSample, AXES, SENSOR_COUNT};

pub const HHAR_ACTIVITIES: [&str; 6] = ["Standing", "Sitting", "Walking", "Upstairs", "Downstairs", "Biking"];
pub const USC_HAD_ACTIVITIES: [&str; 6] = ["Standing", "Sitting", "Walking", "Upstairs", "Downstairs", "Running"];

pub const TARGET_RATE: f64 = 25.0;
pub const WINDOW_SECONDS: f64 = 6.0;
/// Readings per window at the target rate.
pub const WINDOW_LEN: usize = 150;
pub const MAX_GAP_SECONDS: f64 = 1.0;

/// Timestamped three-axis readings from one sensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SensorStream {
    /// Seconds, strictly increasing.
    pub time: Vec<f64>,
    pub axes: [Vec<f64>; AXES],
}

impl SensorStream {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    fn push(&mut self, t: f64, v: [f64; AXES]) {
        self.time.push(t);
        for (axis, x) in self.axes.iter_mut().zip(v) {
            axis.push(x);
        }
    }
}

/// Continuous accelerometer + gyroscope capture of one activity.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sensors: [SensorStream; SENSOR_COUNT],
    pub user: String,
    pub device: String,
    pub activity: usize,
}

impl Recording {
    pub fn validate(&self) -> Result<()> {
        for (s, stream) in self.sensors.iter().enumerate() {
            if stream.axes.iter().any(|a| a.len() != stream.len()) {
                return Err(Error::Format(format!(
                    "sensor {s}: axis lengths differ from timestamps"
                )));
            }
            if stream.time.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Format(format!(
                    "sensor {s} of {}/{}: timestamps not strictly increasing",
                    self.user, self.device
                )));
            }
        }
        Ok(())
    }
}

/// Row counts from a delimited-file load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    /// Rejected row counts keyed by reason.
    pub rejected: BTreeMap<String, usize>,
    /// Segments seen on only one of the two sensors.
    pub unpaired_segments: usize,
}

impl ParseReport {
    fn reject(&mut self, reason: &str) {
        *self.rejected.entry(reason.to_string()).or_default() += 1;
    }

    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

/// Canonical HHAR activity index for a `gt` value.
pub fn hhar_activity(gt: &str) -> Option<usize> {
    let canonical = match gt.to_ascii_lowercase().as_str() {
        "stand" | "standing" => "Standing",
        "sit" | "sitting" => "Sitting",
        "walk" | "walking" => "Walking",
        "stairsup" | "upstairs" => "Upstairs",
        "stairsdown" | "downstairs" => "Downstairs",
        "bike" | "biking" => "Biking",
        _ => return None,
    };
    HHAR_ACTIVITIES.iter().position(|a| *a == canonical)
}

#[derive(Debug, Deserialize)]
struct HharRow {
    #[serde(rename = "Creation_Time")]
    creation_time: i64,
    x: f64,
    y: f64,
    z: f64,
    #[serde(rename = "User")]
    user: String,
    #[serde(rename = "Device")]
    device: String,
    gt: String,
}

type SegmentKey = (String, String, usize);
/// Timestamped readings per (user, device, activity) segment.
type Segments = BTreeMap<SegmentKey, Vec<(i64, [f64; 3])>>;

fn read_hhar_file(path: &Path, report: &mut ParseReport) -> Result<Segments> {
    let file = File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let mut groups = Segments::new();
    for row in reader.deserialize::<HharRow>() {
        report.rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                report.reject("malformed");
                continue;
            }
        };
        let Some(activity) = hhar_activity(&row.gt) else {
            report.reject("activity");
            continue;
        };
        if ![row.x, row.y, row.z].iter().all(|v| v.is_finite()) {
            report.reject("non-finite");
            continue;
        }
        report.rows_kept += 1;
        groups
            .entry((row.user, row.device, activity))
            .or_default()
            .push((row.creation_time, [row.x, row.y, row.z]));
    }
    Ok(groups)
}

/// Sorts by timestamp and drops repeated timestamps, keeping the first.
fn to_stream(mut rows: Vec<(i64, [f64; 3])>, origin: i64, report: &mut ParseReport) -> SensorStream {
    rows.sort_by_key(|r| r.0);
    let mut stream = SensorStream::default();
    let mut last = None;
    for (t, v) in rows {
        if last == Some(t) {
            report.reject("duplicate-timestamp");
            report.rows_kept -= 1;
            continue;
        }
        last = Some(t);
        stream.push((t - origin) as f64 * 1e-9, v);
    }
    stream
}

/// Loads the HHAR phone accelerometer and gyroscope files from `dir`.
///
/// Readings are grouped per (user, device, activity); timestamps come from
/// the nanosecond creation time and are shifted to start near zero.
pub fn load_hhar(dir: &Path) -> Result<(Vec<Recording>, ParseReport)> {
    let mut report = ParseReport::default();
    let acc = read_hhar_file(&dir.join("Phones_accelerometer.csv"), &mut report)?;
    let mut gyro = read_hhar_file(&dir.join("Phones_gyroscope.csv"), &mut report)?;
    let mut recordings = Vec::new();
    for (key, acc_rows) in acc {
        let Some(gyro_rows) = gyro.remove(&key) else {
            report.unpaired_segments += 1;
            continue;
        };
        let origin = acc_rows.iter().chain(&gyro_rows).map(|r| r.0).min().unwrap_or(0);
        let (user, device, activity) = key;
        recordings.push(Recording {
            sensors: [
                to_stream(acc_rows, origin, &mut report),
                to_stream(gyro_rows, origin, &mut report),
            ],
            user,
            device,
            activity,
        });
    }
    report.unpaired_segments += gyro.len();
    Ok((recordings, report))
}

/// USC-HAD activity number to canonical index; other activities are excluded.
pub fn usc_had_activity(number: u32) -> Option<usize> {
    let name = match number {
        1 => "Walking",
        4 => "Upstairs",
        5 => "Downstairs",
        6 => "Running",
        8 => "Sitting",
        9 => "Standing",
        _ => return None,
    };
    USC_HAD_ACTIVITIES.iter().position(|a| *a == name)
}

/// `a{activity}t{trial}.mat` → (activity, trial).
fn parse_trial_name(name: &str) -> Option<(u32, u32)> {
    let stem = name.strip_suffix(".mat")?.strip_prefix('a')?;
    let (act, trial) = stem.split_once('t')?;
    Some((act.parse().ok()?, trial.parse().ok()?))
}

fn numeric_values(data: &matfile::NumericData) -> Option<Vec<f64>> {
    use matfile::NumericData as N;
    Some(match data {
        N::Double { real, .. } => real.clone(),
        N::Single { real, .. } => real.iter().map(|&v| f64::from(v)).collect(),
        N::Int16 { real, .. } => real.iter().map(|&v| f64::from(v)).collect(),
        N::Int32 { real, .. } => real.iter().map(|&v| f64::from(v)).collect(),
        _ => return None,
    })
}

/// Reads one USC-HAD trial matrix: `sensor_readings` is `N × 6` with
/// accelerometer x/y/z followed by gyroscope x/y/z at 100 Hz.
pub fn read_usc_had_trial(path: &Path, user: &str, activity: usize) -> Result<Recording> {
    let load_err = |detail: String| Error::Load {
        path: path.to_path_buf(),
        detail,
    };
    let file = File::open(path).map_err(|e| load_err(e.to_string()))?;
    let mat = matfile::MatFile::parse(BufReader::new(file)).map_err(|e| load_err(e.to_string()))?;
    let array = mat
        .find_by_name("sensor_readings")
        .ok_or_else(|| load_err("no `sensor_readings` matrix".into()))?;
    let size = array.size();
    if size.len() != 2 || size[1] != 6 {
        return Err(load_err(format!(
            "`sensor_readings` has shape {size:?}, expected N × 6"
        )));
    }
    let values = numeric_values(array.data()).ok_or_else(|| load_err("unsupported numeric type".into()))?;
    let n = size[0];
    let column = |c: usize| values[c * n..(c + 1) * n].to_vec();
    let time: Vec<f64> = (0..n).map(|i| i as f64 / 100.0).collect();
    Ok(Recording {
        sensors: [
            SensorStream {
                time: time.clone(),
                axes: [column(0), column(1), column(2)],
            },
            SensorStream {
                time,
                axes: [column(3), column(4), column(5)],
            },
        ],
        user: user.to_string(),
        device: "MotionNode".to_string(),
        activity,
    })
}

/// Loads every `Subject*/a*t*.mat` trial under `dir` with a selected activity.
pub fn load_usc_had(dir: &Path) -> Result<Vec<Recording>> {
    let mut trials: Vec<(PathBuf, String, usize)> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Load {
        path: dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    for entry in entries {
        let entry = entry?;
        let subject = entry.file_name().to_string_lossy().into_owned();
        if !entry.file_type()?.is_dir() || !subject.starts_with("Subject") {
            continue;
        }
        for file in std::fs::read_dir(entry.path())? {
            let file = file?;
            let name = file.file_name().to_string_lossy().into_owned();
            let Some((act, _trial)) = parse_trial_name(&name) else {
                continue;
            };
            if let Some(activity) = usc_had_activity(act) {
                trials.push((file.path(), subject.clone(), activity));
            }
        }
    }
    trials.sort();
    trials
        .par_iter()
        .map(|(path, user, activity)| read_usc_had_trial(path, user, *activity))
        .collect()
}

/// Splits a stream into `[start, end]` spans with no interior gap above `max_gap`.
fn gap_free_spans(time: &[f64], max_gap: f64) -> Vec<(f64, f64)> {
    let mut spans = Vec::new();
    let Some(&first) = time.first() else {
        return spans;
    };
    let mut start = first;
    for w in time.windows(2) {
        if w[1] - w[0] > max_gap {
            spans.push((start, w[0]));
            start = w[1];
        }
    }
    spans.push((start, *time.last().expect("non-empty")));
    spans
}

/// Linear interpolation of `values` (sampled at `time`) on a sorted grid.
fn interpolate(time: &[f64], values: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut j = 0;
    grid.iter()
        .map(|&g| {
            while j + 2 < time.len() && time[j + 1] < g {
                j += 1;
            }
            if time.len() == 1 {
                return values[0];
            }
            let (t0, t1) = (time[j], time[j + 1]);
            let w = ((g - t0) / (t1 - t0)).clamp(0.0, 1.0);
            values[j] + w * (values[j + 1] - values[j])
        })
        .collect()
}

/// Resamples both sensors onto one even grid at `rate`, anchored at the
/// later stream start. Spans separated by a gap longer than `max_gap` in
/// either stream become separate recordings.
pub fn downsample(rec: &Recording, rate: f64, max_gap: f64) -> Result<Vec<Recording>> {
    rec.validate()?;
    for (s, stream) in rec.sensors.iter().enumerate() {
        if stream.len() >= 2 {
            let mut dts: Vec<f64> = stream.time.windows(2).map(|w| w[1] - w[0]).collect();
            dts.sort_by(f64::total_cmp);
            let native = 1.0 / dts[dts.len() / 2];
            if native < rate * 0.95 {
                return Err(Error::Contract(format!(
                    "sensor {s} of {}/{} runs at {native:.1} Hz, below the {rate} Hz target",
                    rec.user, rec.device
                )));
            }
        }
    }
    let a = gap_free_spans(&rec.sensors[0].time, max_gap);
    let b = gap_free_spans(&rec.sensors[1].time, max_gap);
    let mut out = Vec::new();
    for &(a0, a1) in &a {
        for &(b0, b1) in &b {
            let (start, end) = (a0.max(b0), a1.min(b1));
            if end < start {
                continue;
            }
            let n = ((end - start) * rate + 1e-9).floor() as usize + 1;
            let grid: Vec<f64> = (0..n).map(|i| start + i as f64 / rate).collect();
            let sensors = [0, 1].map(|s| {
                let src = &rec.sensors[s];
                // Restrict to the span so interpolation never crosses a gap.
                let (lo, hi) = span_bounds(&src.time, start, end);
                let t = &src.time[lo..hi];
                SensorStream {
                    time: grid.clone(),
                    axes: [0, 1, 2].map(|ax| interpolate(t, &src.axes[ax][lo..hi], &grid)),
                }
            });
            out.push(Recording {
                sensors,
                user: rec.user.clone(),
                device: rec.device.clone(),
                activity: rec.activity,
            });
        }
    }
    Ok(out)
}

/// Index range of the readings that bracket `[start, end]`.
fn span_bounds(time: &[f64], start: f64, end: f64) -> (usize, usize) {
    let lo = time.partition_point(|&t| t <= start).saturating_sub(1);
    let hi = (time.partition_point(|&t| t < end) + 1).min(time.len());
    (lo, hi.max(lo + 1))
}

/// Cuts an aligned recording into non-overlapping windows of `window`
/// readings; the remainder is dropped.
pub fn segment(rec: &Recording, window: usize) -> Result<Vec<RawSample>> {
    let n = rec.sensors[0].len();
    if rec.sensors[1].len() != n {
        return Err(Error::Format(format!(
            "segment needs aligned sensors, got {} and {} readings",
            n,
            rec.sensors[1].len()
        )));
    }
    Ok((0..n / window)
        .map(|w| {
            let r = w * window..(w + 1) * window;
            RawSample {
                sensors: [0, 1].map(|s| [0, 1, 2].map(|a| rec.sensors[s].axes[a][r.clone()].to_vec())),
                label: rec.activity,
                user: rec.user.clone(),
                device: rec.device.clone(),
            }
        })
        .collect())
}

/// Downsamples and segments every recording, preserving input order.
pub fn preprocess(recordings: &[Recording], rate: f64, window: usize, max_gap: f64) -> Result<Vec<RawSample>> {
    let per: Vec<Vec<RawSample>> = recordings
        .par_iter()
        .map(|rec| {
            let mut samples = Vec::new();
            for part in downsample(rec, rate, max_gap)? {
                samples.extend(segment(&part, window)?);
            }
            Ok(samples)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub params: BTreeMap<String, String>,
    pub seed: u64,
}

/// Samples with their current (possibly perturbed) labels in
/// `samples[i].label` and the original labels in `clean_labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<RawSample>,
    pub clean_labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(samples: Vec<RawSample>, classes: usize, provenance: Provenance) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= classes) {
            return Err(Error::Format(format!("label {} outside 0..{classes}", s.label)));
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.len() != first.len()) {
                return Err(Error::Format("samples differ in length".into()));
            }
        }
        Ok(SampleSet {
            clean_labels: samples.iter().map(|s| s.label).collect(),
            samples,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn users(&self) -> Vec<String> {
        let mut u: Vec<String> = self.samples.iter().map(|s| s.user.clone()).collect();
        u.sort();
        u.dedup();
        u
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Keeps the listed indices in the given order.
    pub fn subset(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenation of two sets drawn from the same source.
    pub fn concat(&self, other: &SampleSet) -> SampleSet {
        let mut out = self.clone();
        out.samples.extend(other.samples.iter().cloned());
        out.clean_labels.extend(&other.clean_labels);
        out
    }

    /// Indices of `per_class` randomly chosen samples of every class, in
    /// class order. Errors if a class is too small.
    pub fn stratified_indices(&self, per_class: usize, rng: &mut SenRng) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(per_class * self.classes);
        for class in 0..self.classes {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].label == class).collect();
            if members.len() < per_class {
                return Err(Error::Sampling(format!(
                    "class {class} has {} samples, {per_class} requested",
                    members.len()
                )));
            }
            let mut pick: Vec<usize> = sample_indices(rng, members.len(), per_class)
                .into_iter()
                .map(|k| members[k])
                .collect();
            pick.sort_unstable();
            out.extend(pick);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitMode {
    Fraction { train_frac: f64, seed: u64 },
    LeaveOneUserOut { user: String },
}

/// Returns `(train, test)`.
pub fn split(set: &SampleSet, mode: &SplitMode) -> Result<(SampleSet, SampleSet)> {
    match mode {
        SplitMode::Fraction { train_frac, seed } => {
            if !(*train_frac > 0.0 && *train_frac < 1.0) {
                return Err(Error::Config(format!("train fraction {train_frac} outside (0, 1)")));
            }
            let mut order: Vec<usize> = (0..set.len()).collect();
            order.shuffle(&mut rng_for(*seed, "split"));
            let n_train = (train_frac * set.len() as f64).round() as usize;
            Ok((set.subset(&order[..n_train]), set.subset(&order[n_train..])))
        }
        SplitMode::LeaveOneUserOut { user } => {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| &set.samples[i].user == user);
            if test.is_empty() {
                return Err(Error::UnknownUser(user.clone()));
            }
            Ok((set.subset(&train), set.subset(&test)))
        }
    }
}

/// Flips exactly `round(rate · N)` labels, each to a uniformly chosen
/// different class. Signals and `clean_labels` are untouched.
pub fn inject_label_noise(set: &SampleSet, rate: f64, seed: u64) -> Result<SampleSet> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("noise rate {rate} outside [0, 1]")));
    }
    let count = (rate * set.len() as f64).round() as usize;
    if count > 0 && set.classes < 2 {
        return Err(Error::Config("label noise needs at least 2 classes".into()));
    }
    let mut rng = rng_for(seed, "label-noise");
    let mut out = set.clone();
    for i in sample_indices(&mut rng, set.len(), count) {
        let current = out.samples[i].label;
        let mut new = rng.random_range(0..set.classes - 1);
        if new >= current {
            new += 1;
        }
        out.samples[i].label = new;
    }
    Ok(out)
}

fn axis_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Appends `copies` noisy duplicates of every sample. Noise on each axis has
/// standard deviation `noise_std_fraction` times that axis's own spread.
pub fn augment_gaussian(set: &SampleSet, copies: usize, noise_std_fraction: f64, seed: u64) -> Result<SampleSet> {
    if copies == 0 || noise_std_fraction < 0.0 {
        return Err(Error::Config(format!(
            "augmentation needs copies ≥ 1 and a non-negative noise fraction, got {copies} and {noise_std_fraction}"
        )));
    }
    let mut rng = rng_for(seed, "augment");
    let mut out = set.clone();
    for (sample, &clean) in set.samples.iter().zip(&set.clean_labels) {
        for _ in 0..copies {
            let mut copy = sample.clone();
            for sensor in copy.sensors.iter_mut() {
                for axis in sensor.iter_mut() {
                    let std = axis_std(axis) * noise_std_fraction;
                    if std > 0.0 {
                        let normal = Normal::new(0.0, std).expect("positive std");
                        axis.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
                    }
                }
            }
            out.samples.push(copy);
            out.clean_labels.push(clean);
        }
    }
    Ok(out)
}

pub const SYNTH_MAX_CLASSES: usize = 12;

/// Per-class sinusoid parameters: `(frequency Hz, amplitude)` pairs for
/// every sensor/axis.
fn synth_signature(class: usize) -> [[[(f64, f64); 2]; AXES]; SENSOR_COUNT] {
    // Signatures depend only on the class, so sets drawn with different seeds
    // share one distribution.
    let mut rng = rng_for(class as u64, "synth-signature");
    [0, 1].map(|_| {
        [0, 1, 2].map(|_| {
            let primary = 1.0 + class as f64 * 0.9 + rng.random_range(-0.2..0.2);
            let secondary = rng.random_range(1.0..11.0);
            [
                (primary, rng.random_range(0.8..1.5)),
                (secondary, rng.random_range(0.2..0.6)),
            ]
        })
    })
}

/// Desk-scale data set: each class is a distinct multi-sine signature per
/// sensor axis with random phases, amplitude jitter and Gaussian noise,
/// sampled at 25 Hz for 6 s.
pub fn synth_dataset(classes: usize, per_class: usize, seed: u64) -> Result<SampleSet> {
    if classes == 0 || classes > SYNTH_MAX_CLASSES {
        return Err(Error::Config(format!(
            "synthetic data supports 1..={SYNTH_MAX_CLASSES} classes, got {classes}"
        )));
    }
    let mut rng = rng_for(seed, "synth-samples");
    let noise = Normal::new(0.0, 0.35).expect("valid std");
    let mut samples = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let sig = synth_signature(class);
        for i in 0..per_class {
            let sensors = [0, 1].map(|s| {
                [0, 1, 2].map(|a| {
                    let comps: Vec<(f64, f64, f64)> = sig[s][a]
                        .iter()
                        .map(|&(f, amp)| {
                            (
                                f * rng.random_range(0.95..1.05),
                                amp * rng.random_range(0.7..1.3),
                                rng.random_range(0.0..std::f64::consts::TAU),
                            )
                        })
                        .collect();
                    let offset = if s == 0 && a == 2 { 9.8 } else { 0.0 };
                    (0..WINDOW_LEN)
                        .map(|n| {
                            let t = n as f64 / TARGET_RATE;
                            let clean: f64 = comps
                                .iter()
                                .map(|(f, amp, ph)| amp * (std::f64::consts::TAU * f * t + ph).sin())
                                .sum();
                            offset + clean + noise.sample(&mut rng)
                        })
                        .collect()
                })
            });
            samples.push(RawSample {
                sensors,
                label: class,
                user: format!("synth{}", i % 4),
                device: "synth".into(),
            });
        }
    }
    let mut params = BTreeMap::new();
    params.insert("classes".into(), classes.to_string());
    params.insert("per_class".into(), per_class.to_string());
    SampleSet::new(
        samples,
        classes,
        Provenance {
            dataset: "synth".into(),
            params,
            seed,
        },
    )
}

const CACHE_MAGIC: &[u8; 4] = b"SENS";
const CACHE_VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

/// Binary sample cache: magic, version, a JSON parameter block, then every
/// sample as labels, strings and little-endian reals.
pub fn save_sample_set(set: &SampleSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    let header = serde_json::json!({
        "classes": set.classes,
        "count": set.len(),
        "provenance": set.provenance,
    });
    write_str(&mut w, &header.to_string())?;
    for (s, &clean) in set.samples.iter().zip(&set.clean_labels) {
        write_u64(&mut w, s.label as u64)?;
        write_u64(&mut w, clean as u64)?;
        write_str(&mut w, &s.user)?;
        write_str(&mut w, &s.device)?;
        write_u64(&mut w, s.len() as u64)?;
        for axis in s.sensors.iter().flatten() {
            for v in axis {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct CacheReader<R> {
    inner: R,
    path: PathBuf,
}

impl<R: Read> CacheReader<R> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Load {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.err(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u64(what)? as usize;
        if n > 1 << 24 {
            return Err(self.err(format!("{what} length {n} is implausible")));
        }
        String::from_utf8(self.bytes(n, what)?).map_err(|_| self.err(format!("{what} is not UTF-8")))
    }
}

pub fn load_sample_set(path: &Path) -> Result<SampleSet> {
    let file = File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut r = CacheReader {
        inner: BufReader::new(file),
        path: path.to_path_buf(),
    };
    if r.bytes(4, "magic")? != CACHE_MAGIC {
        return Err(r.err("not a sample cache (bad magic)"));
    }
    let version = u32::from_le_bytes(r.bytes(4, "version")?.try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(r.err(format!("version {version}, expected {CACHE_VERSION}")));
    }
    let header: serde_json::Value =
        serde_json::from_str(&r.string("parameter block")?).map_err(|e| r.err(format!("parameter block: {e}")))?;
    let classes = header["classes"]
        .as_u64()
        .ok_or_else(|| r.err("parameter block lacks classes"))? as usize;
    let count = header["count"]
        .as_u64()
        .ok_or_else(|| r.err("parameter block lacks count"))? as usize;
    let provenance: Provenance =
        serde_json::from_value(header["provenance"].clone()).map_err(|e| r.err(format!("provenance: {e}")))?;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    let mut clean_labels = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let label = r.u64("label")? as usize;
        let clean = r.u64("clean label")? as usize;
        let user = r.string("user")?;
        let device = r.string("device")?;
        let n = r.u64("sample length")? as usize;
        if n > 1 << 24 {
            return Err(r.err(format!("sample length {n} is implausible")));
        }
        let mut read_axis = || -> Result<Vec<f64>> {
            let raw = r.bytes(8 * n, "readings")?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut axes = Vec::with_capacity(SENSOR_COUNT * AXES);
        for _ in 0..SENSOR_COUNT * AXES {
            axes.push(read_axis()?);
        }
        let mut it = axes.into_iter();
        let mut next3 = || [(); AXES].map(|_| it.next().expect("six axes"));
        let sensors = [next3(), next3()];
        if label >= classes || clean >= classes {
            return Err(r.err(format!("label {label}/{clean} outside 0..{classes}")));
        }
        samples.push(RawSample {
            sensors,
            label,
            user,
            device,
        });
        clean_labels.push(clean);
    }
    let mut tail = [0u8; 1];
    if r.inner.read(&mut tail)? != 0 {
        return Err(r.err("trailing bytes after the last sample"));
    }
    Ok(SampleSet {
        samples,
        clean_labels,
        classes,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(rate: f64, n: usize, f: impl Fn(f64) -> f64) -> SensorStream {
        let time: Vec<f64> = (0..n).map(|i| i as f64 / rate).collect();
        let v: Vec<f64> = time.iter().map(|&t| f(t)).collect();
        SensorStream {
            axes: [v.clone(), v.clone(), v],
            time,
        }
    }

    fn rec(a: SensorStream, b: SensorStream) -> Recording {
        Recording {
            sensors: [a, b],
            user: "u1".into(),
            device: "d1".into(),
            activity: 2,
        }
    }

    #[test]
    fn downsample_identity_grid() {
        let r = rec(stream(25.0, 60, |t| t.sin()), stream(25.0, 60, |t| t.cos()));
        let out = downsample(&r, 25.0, 1.0).unwrap();
        assert_eq!(out.len(), 1);
        for (a, b) in out[0].sensors[0].axes[0].iter().zip(&r.sensors[0].axes[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_constant_and_ramp() {
        let r = rec(stream(100.0, 400, |_| 3.5), stream(100.0, 400, |_| -1.0));
        let out = downsample(&r, 25.0, 1.0).unwrap();
        assert!(out[0].sensors[0].axes[1].iter().all(|v| (v - 3.5).abs() < 1e-12));
        assert_eq!(out[0].sensors[0].len(), 100);

        let r = rec(stream(50.0, 200, |t| 2.0 * t + 1.0), stream(50.0, 200, |t| t));
        let out = downsample(&r, 25.0, 1.0).unwrap();
        let s = &out[0].sensors[0];
        for (t, v) in s.time.iter().zip(&s.axes[0]) {
            assert!((v - (2.0 * t + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_anchors_at_later_start_and_splits_gaps() {
        let mut late = stream(50.0, 200, |t| t);
        late.time.iter_mut().for_each(|t| *t += 0.3);
        let r = rec(stream(50.0, 200, |t| t), late);
        let out = downsample(&r, 25.0, 1.0).unwrap();
        assert!((out[0].sensors[0].time[0] - 0.3).abs() < 1e-12);
        assert!((out[0].sensors[0].axes[0][0] - 0.3).abs() < 1e-12);

        let mut gapped = stream(50.0, 200, |t| t);
        for t in gapped.time.iter_mut().skip(100) {
            *t += 5.0;
        }
        let other = stream(50.0, 600, |t| t);
        let out = downsample(&rec(gapped, other), 25.0, 1.0).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|r| r.user == "u1" && r.activity == 2));
    }

    #[test]
    fn downsample_rejects_slow_source() {
        let r = rec(stream(10.0, 50, |t| t), stream(10.0, 50, |t| t));
        assert!(downsample(&r, 25.0, 1.0).is_err());
    }

    #[test]
    fn segment_counts() {
        for (n, expected) in [(300, 2), (149, 0), (7500, 50)] {
            let r = rec(stream(25.0, n, |t| t), stream(25.0, n, |t| -t));
            let s = segment(&r, WINDOW_LEN).unwrap();
            assert_eq!(s.len(), expected);
            assert!(s.iter().all(|x| x.label == 2 && x.user == "u1" && x.device == "d1"));
        }
        let r = rec(stream(25.0, 300, |t| t), stream(25.0, 300, |t| -t));
        let s = segment(&r, WINDOW_LEN).unwrap();
        assert_eq!(s[1].sensors[0][0][0], r.sensors[0].axes[0][150]);
    }

    #[test]
    fn hhar_activity_names() {
        assert_eq!(hhar_activity("stairsup"), Some(3));
        assert_eq!(hhar_activity("bike"), Some(5));
        assert_eq!(hhar_activity("null"), None);
        assert_eq!(usc_had_activity(6), Some(5));
        assert_eq!(usc_had_activity(2), None);
        assert_eq!(parse_trial_name("a12t3.mat"), Some((12, 3)));
        assert_eq!(parse_trial_name("notes.txt"), None);
    }

    fn tiny_set(n: usize) -> SampleSet {
        let samples = (0..n)
            .map(|i| RawSample {
                sensors: [0, 1].map(|s| [0, 1, 2].map(|a| (0..6).map(|k| (i * 100 + s * 10 + a + k) as f64).collect())),
                label: i % 3,
                user: format!("u{}", i % 5),
                device: "d".into(),
            })
            .collect();
        SampleSet::new(
            samples,
            3,
            Provenance {
                dataset: "test".into(),
                params: BTreeMap::new(),
                seed: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn split_modes() {
        let set = tiny_set(100);
        let mode = SplitMode::Fraction {
            train_frac: 0.8,
            seed: 3,
        };
        let (tr, te) = split(&set, &mode).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        assert_eq!(split(&set, &mode).unwrap().0, tr);
        let (tr, te) = split(&set, &SplitMode::LeaveOneUserOut { user: "u2".into() }).unwrap();
        assert_eq!(te.len(), 20);
        assert!(te.samples.iter().all(|s| s.user == "u2"));
        assert!(tr.samples.iter().all(|s| s.user != "u2"));
        assert!(matches!(
            split(&set, &SplitMode::LeaveOneUserOut { user: "nobody".into() }),
            Err(Error::UnknownUser(_))
        ));
        assert!(split(
            &set,
            &SplitMode::Fraction {
                train_frac: 1.0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn label_noise_counts() {
        let set = tiny_set(1000);
        assert_eq!(inject_label_noise(&set, 0.0, 1).unwrap(), set);
        let noisy = inject_label_noise(&set, 0.4, 1).unwrap();
        let flipped = noisy.labels().iter().zip(&set.labels()).filter(|(a, b)| a != b).count();
        assert_eq!(flipped, 400);
        assert_eq!(noisy.clean_labels, set.labels());
        for (a, b) in noisy.samples.iter().zip(&set.samples) {
            assert_eq!(a.sensors, b.sensors);
        }
        let all = inject_label_noise(&set, 1.0, 2).unwrap();
        assert!(all.labels().iter().zip(&set.labels()).all(|(a, b)| a != b));
    }

    #[test]
    fn augmentation() {
        let set = tiny_set(7);
        let aug = augment_gaussian(&set, 10, 0.1, 4).unwrap();
        assert_eq!(aug.len(), 77);
        assert_eq!(aug.labels()[7..17], [0; 10]);
        assert_eq!(aug, augment_gaussian(&set, 10, 0.1, 4).unwrap());
        let dup = augment_gaussian(&set, 2, 0.0, 4).unwrap();
        assert_eq!(dup.samples[7], set.samples[0]);
        assert!(augment_gaussian(&set, 0, 0.1, 4).is_err());
    }

    #[test]
    fn synth_shape_and_determinism() {
        let s = synth_dataset(6, 30, 5).unwrap();
        assert_eq!(s.len(), 180);
        assert_eq!(s.samples[0].len(), WINDOW_LEN);
        assert_eq!(s, synth_dataset(6, 30, 5).unwrap());
        assert!(synth_dataset(13, 1, 0).is_err());
    }

    #[test]
    fn cache_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.sens");
        let set = inject_label_noise(&tiny_set(9), 0.3, 1).unwrap();
        save_sample_set(&set, &path).unwrap();
        assert_eq!(load_sample_set(&path).unwrap(), set);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_sample_set(&path).unwrap_err().to_string().contains("truncated"));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_sample_set(&path).is_err());
    }

    proptest! {
        #[test]
        fn noise_flips_exact_count(n in 1usize..200, rate in 0.0f64..=1.0, seed in 0u64..100) {
            let set = tiny_set(n);
            let noisy = inject_label_noise(&set, rate, seed).unwrap();
            let flipped = noisy.labels().iter().zip(&set.labels()).filter(|(a, b)| a != b).count();
            prop_assert_eq!(flipped, (rate * n as f64).round() as usize);
        }
    }
}
