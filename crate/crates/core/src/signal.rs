//! Frequency-domain tensorization of two-sensor motion windows.
//!
//! Each sensor's three axes gain a fourth amplitude row, the window is cut
//! into `k` equal intervals, and every interval/axis is replaced by its real
//! Fourier spectrum as a magnitude row stacked over a frequency row.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SENSOR_COUNT: usize = 2;
pub const AXES: usize = 3;
/// Axes per sensor after the amplitude row is appended.
pub const AUGMENTED_AXES: usize = AXES + 1;

/// One fixed-length window of accelerometer (`sensors[0]`) and gyroscope
/// (`sensors[1]`) readings, each as x/y/z series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub sensors: [[Vec<f64>; AXES]; SENSOR_COUNT],
    pub label: usize,
    pub user: String,
    pub device: String,
}

impl RawSample {
    pub fn len(&self) -> usize {
        self.sensors[0][0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (s, sensor) in self.sensors.iter().enumerate() {
            for (a, axis) in sensor.iter().enumerate() {
                if axis.len() != n {
                    return Err(Error::dim(
                        "raw_sample",
                        format!("sensor {s} axis {a} has {} readings, expected {n}", axis.len()),
                    ));
                }
                if axis.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Contract(format!(
                        "sensor {s} axis {a} contains non-finite readings"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// How the frequency row of each axis is ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyLayout {
    /// Natural bin order; frequency rows are the fixed bin grid.
    #[default]
    BinOrder,
    /// Bins sorted by descending magnitude, frequencies carried along.
    MagnitudeRanked,
}

impl std::str::FromStr for FrequencyLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bin_order" => Ok(FrequencyLayout::BinOrder),
            "magnitude_ranked" => Ok(FrequencyLayout::MagnitudeRanked),
            other => Err(Error::Config(format!("unknown frequency layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorizeConfig {
    pub intervals: usize,
    pub sample_rate: f64,
    pub layout: FrequencyLayout,
}

impl Default for TensorizeConfig {
    fn default() -> Self {
        TensorizeConfig {
            intervals: 6,
            sample_rate: 25.0,
            layout: FrequencyLayout::BinOrder,
        }
    }
}

/// Frequency-domain input of shape `k × |S| × 2(d+1) × f`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub data: Tensor,
    pub intervals: usize,
    pub bins: usize,
}

impl InputTensor {
    pub fn sensors(&self) -> usize {
        self.data.shape()[1]
    }

    /// Magnitude and frequency rows of one interval/sensor/axis.
    pub fn axis_rows(&self, interval: usize, sensor: usize, axis: usize) -> &[f64] {
        let s = self.data.shape();
        let rows = s[2];
        let f = s[3];
        let start = ((interval * s[1] + sensor) * rows + 2 * axis) * f;
        &self.data.data()[start..start + 2 * f]
    }
}

/// Number of real-transform bins for an interval of `width` readings.
pub fn bin_count(width: usize) -> usize {
    width / 2 + 1
}

/// Appends the amplitude `sqrt(x² + y² + z²)` as a fourth row.
pub fn amplitude_augment(series: &[Vec<f64>; AXES]) -> [Vec<f64>; AUGMENTED_AXES] {
    let amplitude = series[0]
        .iter()
        .zip(&series[1])
        .zip(&series[2])
        .map(|((x, y), z)| (x * x + y * y + z * z).sqrt())
        .collect();
    [series[0].clone(), series[1].clone(), series[2].clone(), amplitude]
}

/// Cuts every row into `k` contiguous, equal-width, time-ordered blocks.
/// Returns `blocks[interval][row]`.
pub fn split_intervals(series: &[Vec<f64>], k: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = series.first().map_or(0, Vec::len);
    if k == 0 || !n.is_multiple_of(k) || n == 0 {
        return Err(Error::Segmentation { n, k });
    }
    let width = n / k;
    Ok((0..k)
        .map(|i| {
            series
                .iter()
                .map(|row| row[i * width..(i + 1) * width].to_vec())
                .collect()
        })
        .collect())
}

struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    width: usize,
    sample_rate: f64,
}

impl Spectrum {
    fn new(width: usize, sample_rate: f64) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(width);
        Spectrum {
            fft,
            width,
            sample_rate,
        }
    }

    fn transform(&self, values: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        let f = bin_count(self.width);
        let magnitudes = buf[..f].iter().map(|c| c.norm()).collect();
        let frequencies = (0..f)
            .map(|i| i as f64 * self.sample_rate / self.width as f64)
            .collect();
        (magnitudes, frequencies)
    }
}

/// Unnormalized real-input DFT of one interval: complex moduli of the first
/// `floor(w/2)+1` bins and their center frequencies in Hz.
pub fn interval_fft(values: &[f64], sample_rate: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() < 2 {
        return Err(Error::dim(
            "interval_fft",
            format!("need at least 2 readings, got {}", values.len()),
        ));
    }
    Ok(Spectrum::new(values.len(), sample_rate).transform(values))
}

/// Converts a raw sample into its `k × 2 × 8 × f` input tensor.
pub fn tensorize(sample: &RawSample, cfg: &TensorizeConfig) -> Result<InputTensor> {
    sample.validate()?;
    let n = sample.len();
    let k = cfg.intervals;
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::Segmentation { n, k });
    }
    let width = n / k;
    if width < 2 {
        return Err(Error::Segmentation { n, k });
    }
    let f = bin_count(width);
    let spectrum = Spectrum::new(width, cfg.sample_rate);
    let rows = 2 * AUGMENTED_AXES;

    let mut data = vec![0.0; k * SENSOR_COUNT * rows * f];
    for (s, sensor) in sample.sensors.iter().enumerate() {
        let augmented = amplitude_augment(sensor);
        let blocks = split_intervals(&augmented, k)?;
        for (t, block) in blocks.iter().enumerate() {
            for (a, axis) in block.iter().enumerate() {
                let (mut mags, mut freqs) = spectrum.transform(axis);
                if cfg.layout == FrequencyLayout::MagnitudeRanked {
                    let mut order: Vec<usize> = (0..f).collect();
                    // Stable sort keeps lower bins first among equal magnitudes.
                    order.sort_by(|&i, &j| mags[j].total_cmp(&mags[i]));
                    mags = order.iter().map(|&i| mags[i]).collect();
                    freqs = order.iter().map(|&i| freqs[i]).collect();
                }
                let base = ((t * SENSOR_COUNT + s) * rows + 2 * a) * f;
                data[base..base + f].copy_from_slice(&mags);
                data[base + f..base + 2 * f].copy_from_slice(&freqs);
            }
        }
    }
    Ok(InputTensor {
        data: Tensor::new(vec![k, SENSOR_COUNT, rows, f], data)?,
        intervals: k,
        bins: f,
    })
}
