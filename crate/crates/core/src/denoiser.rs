//! Flags likely mislabeled samples by comparing their embeddings with class
//! centers, using similarity statistics fitted on a small clean set.
//!
//! A sample claiming class `c` is kept when
//! (a) its similarity to center `c` reaches the 5th percentile of clean
//!     in-class similarities, and
//! (b) its similarity to every other center `c'` stays below
//!     `mu[c][c'] + 2 sigma[c][c']`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::classifiers::ClassCenters;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::network::{embed_batch, SenWeights};
use crate::pairwise::cosine_similarity;
use crate::signal::InputTensor;

/// Percentile rank used for the in-class threshold.
pub const IN_CLASS_PERCENTILE: f64 = 5.0;
/// Width of the between-class band in standard deviations.
pub const BETWEEN_CLASS_SIGMAS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub in_p5: Vec<f64>,
    /// `mu[c][c2]`: mean similarity of class-`c` samples to center `c2`.
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl DistanceStats {
    pub fn classes(&self) -> usize {
        self.in_p5.len()
    }

    /// Upper similarity bound toward center `other` for a sample claiming `claimed`.
    pub fn between_threshold(&self, claimed: usize, other: usize) -> f64 {
        self.mu[claimed][other] + BETWEEN_CLASS_SIGMAS * self.sigma[claimed][other]
    }
}

/// Linearly interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Statistics("percentile of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Sample mean and `n − 1` standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Statistics(format!(
            "standard deviation needs 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Similarities of every class-`class` embedding to center `toward`.
pub fn similarities_to_center(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    centers: &ClassCenters,
    class: usize,
    toward: usize,
) -> Result<Vec<f64>> {
    let center = centers
        .center(toward)
        .ok_or_else(|| Error::Statistics(format!("no center for class {toward}")))?;
    embeddings
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == class)
        .map(|(e, _)| cosine_similarity(e, center))
        .collect()
}

pub fn fit_distance_stats(embeddings: &[Vec<f64>], labels: &[usize], centers: &ClassCenters) -> Result<DistanceStats> {
    if embeddings.len() != labels.len() {
        return Err(Error::dim(
            "fit_distance_stats",
            format!("{} embeddings vs {} labels", embeddings.len(), labels.len()),
        ));
    }
    let c = centers.len();
    let mut stats = DistanceStats {
        in_p5: vec![0.0; c],
        mu: vec![vec![0.0; c]; c],
        sigma: vec![vec![0.0; c]; c],
    };
    for class in 0..c {
        let count = labels.iter().filter(|&&l| l == class).count();
        if count < 2 {
            return Err(Error::Statistics(format!(
                "class {class} has {count} clean samples, at least 2 are needed"
            )));
        }
        for toward in 0..c {
            let sims = similarities_to_center(embeddings, labels, centers, class, toward)?;
            let (mu, sigma) = mean_std(&sims)?;
            stats.mu[class][toward] = mu;
            stats.sigma[class][toward] = sigma;
            if toward == class {
                stats.in_p5[class] = percentile(&sims, IN_CLASS_PERCENTILE)?;
            }
        }
    }
    Ok(stats)
}

fn check_coverage(claimed: usize, centers: &ClassCenters, stats: &DistanceStats) -> Result<()> {
    if stats.classes() != centers.len() || stats.mu.len() != centers.len() {
        return Err(Error::Statistics(format!(
            "statistics cover {} classes, centers {}",
            stats.classes(),
            centers.len()
        )));
    }
    if claimed >= stats.classes() {
        return Err(Error::Statistics(format!("no statistics for class {claimed}")));
    }
    Ok(())
}

/// Condition (a) alone: in-class similarity reaches the percentile threshold.
pub fn passes_in_class(e: &[f64], claimed: usize, centers: &ClassCenters, stats: &DistanceStats) -> Result<bool> {
    check_coverage(claimed, centers, stats)?;
    Ok(cosine_similarity(e, &centers.centers[claimed])? >= stats.in_p5[claimed])
}

pub fn is_clean(e: &[f64], claimed: usize, centers: &ClassCenters, stats: &DistanceStats) -> Result<bool> {
    if !passes_in_class(e, claimed, centers, stats)? {
        return Ok(false);
    }
    for other in (0..centers.len()).filter(|&o| o != claimed) {
        if cosine_similarity(e, &centers.centers[other])? >= stats.between_threshold(claimed, other) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Detection quality with "mislabeled" as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `None` when no sample is truly mislabeled.
    pub recall: Option<f64>,
    /// `None` when nothing was flagged.
    pub precision: Option<f64>,
    pub accuracy: f64,
    /// Index 0 is "clean", index 1 is "mislabeled".
    pub per_class_f1: Vec<f64>,
    pub avg_f1: f64,
    pub mislabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub kept: Vec<usize>,
    pub flagged: Vec<usize>,
    pub detection: Option<Detection>,
}

fn detection(flagged: &[bool], claimed: &[usize], truth: &[usize]) -> Result<Detection> {
    let actual: Vec<usize> = claimed.iter().zip(truth).map(|(c, t)| usize::from(c != t)).collect();
    let predicted: Vec<usize> = flagged.iter().map(|&f| usize::from(f)).collect();
    let m: MetricsReport = evaluate(&actual, &predicted, 2)?;
    let tp = m.confusion[1][1];
    let mislabeled = m.per_class[1].support;
    let flagged_count = m.confusion[0][1] + tp;
    Ok(Detection {
        recall: (mislabeled > 0).then(|| tp as f64 / mislabeled as f64),
        precision: (flagged_count > 0).then(|| tp as f64 / flagged_count as f64),
        accuracy: m.accuracy,
        per_class_f1: m.per_class.iter().map(|c| c.f1).collect(),
        avg_f1: m.avg_f1,
        mislabeled,
    })
}

/// Partitions already-embedded samples by [`is_clean`].
pub fn denoise_embeddings(
    embeddings: &[Vec<f64>],
    claimed: &[usize],
    centers: &ClassCenters,
    stats: &DistanceStats,
    ground_truth: Option<&[usize]>,
) -> Result<DenoiseReport> {
    if embeddings.len() != claimed.len() || ground_truth.is_some_and(|t| t.len() != claimed.len()) {
        return Err(Error::dim(
            "denoise",
            "embeddings, labels and ground truth differ in length",
        ));
    }
    let clean: Vec<bool> = embeddings
        .par_iter()
        .zip(claimed)
        .map(|(e, &c)| is_clean(e, c, centers, stats))
        .collect::<Result<_>>()?;
    let (kept, flagged): (Vec<usize>, Vec<usize>) = (0..clean.len()).partition(|&i| clean[i]);
    let flags: Vec<bool> = clean.iter().map(|c| !c).collect();
    let detection = ground_truth.map(|t| detection(&flags, claimed, t)).transpose()?;
    Ok(DenoiseReport {
        kept,
        flagged,
        detection,
    })
}

pub fn denoise_dataset(
    noisy_samples: &[InputTensor],
    noisy_labels: &[usize],
    weights: &SenWeights,
    centers: &ClassCenters,
    stats: &DistanceStats,
    ground_truth: Option<&[usize]>,
) -> Result<DenoiseReport> {
    let embeddings = embed_batch(noisy_samples, weights)?;
    denoise_embeddings(&embeddings, noisy_labels, centers, stats, ground_truth)
}

/// Standard-normal quantiles at `(i − 0.5)/n` paired with the standardized
/// order statistics of `similarities`.
pub fn qq_data(similarities: &[f64]) -> Result<Vec<(f64, f64)>> {
    if similarities.len() < 3 {
        return Err(Error::Statistics(format!(
            "Q-Q data needs at least 3 values, got {}",
            similarities.len()
        )));
    }
    let (mean, std) = mean_std(similarities)?;
    if std == 0.0 {
        return Err(Error::Statistics("Q-Q data of a constant list".into()));
    }
    let normal = Normal::standard();
    let mut sorted = similarities.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (normal.inverse_cdf((i as f64 + 0.5) / n), (v - mean) / std))
        .collect())
}

/// One row per input sample: index, claimed label, flagged, and (if known)
/// whether it was truly mislabeled.
pub fn write_denoise_csv(
    path: &Path,
    report: &DenoiseReport,
    claimed: &[usize],
    ground_truth: Option<&[usize]>,
) -> Result<()> {
    let mut flagged = vec![false; claimed.len()];
    for &i in &report.flagged {
        flagged[i] = true;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "index,claimed,flagged,mislabeled")?;
    for (i, &c) in claimed.iter().enumerate() {
        let truth = ground_truth.map_or(String::new(), |t| u8::from(t[i] != c).to_string());
        writeln!(out, "{i},{c},{},{truth}", u8::from(flagged[i]))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_qq_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "theoretical,empirical")?;
    for (t, e) in points {
        writeln!(out, "{t},{e}")?;
    }
    out.flush()?;
    Ok(())
}
