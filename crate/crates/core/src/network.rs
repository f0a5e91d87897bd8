//! Hierarchical convolution + two-layer LSTM embedding encoder.
//!
//! Per interval: a within-axis convolution over each magnitude/frequency row
//! pair, an axis-merge convolution over the four stacked axes, and two
//! sensor-merge convolutions over the stacked sensors, each followed by ReLU.
//! The flattened interval features run through two LSTM layers in time order
//! and the second layer's outputs are averaged into the embedding.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::signal::{InputTensor, AUGMENTED_AXES, SENSOR_COUNT};
use crate::tensor::{glorot_uniform, uniform, LstmVars, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenConfig {
    /// Horizontal filter widths of the within-axis, axis-merge and the two
    /// sensor-merge convolutions.
    pub conv_widths: [usize; 4],
    pub channels: usize,
    /// LSTM state size, which is also the embedding length.
    pub lstm_hidden: usize,
    pub intervals: usize,
    pub freq_bins: usize,
    pub sensors: usize,
    pub seed: u64,
}

impl Default for SenConfig {
    fn default() -> Self {
        SenConfig {
            conv_widths: [5, 3, 3, 3],
            channels: 64,
            lstm_hidden: 64,
            intervals: 6,
            freq_bins: 13,
            sensors: SENSOR_COUNT,
            seed: 0,
        }
    }
}

const STAGES: [&str; 4] = ["within-axis", "axis-merge", "sensor-merge 1", "sensor-merge 2"];

impl SenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be at least 1".into()));
        }
        if self.lstm_hidden < 2 {
            return Err(Error::Config(format!(
                "lstm_hidden must be at least 2, got {}",
                self.lstm_hidden
            )));
        }
        if self.intervals == 0 || self.freq_bins == 0 {
            return Err(Error::Config("intervals and freq_bins must be positive".into()));
        }
        if self.sensors != SENSOR_COUNT {
            return Err(Error::Config(format!(
                "sensor count {} unsupported; the encoder stacks exactly {SENSOR_COUNT}",
                self.sensors
            )));
        }
        let mut width = self.freq_bins;
        for (stage, &fw) in STAGES.iter().zip(&self.conv_widths) {
            if fw == 0 || fw > width {
                return Err(Error::Config(format!(
                    "{stage} convolution width {fw} does not fit input width {width}"
                )));
            }
            width = width - fw + 1;
        }
        Ok(())
    }

    /// Horizontal extent entering the first stage followed by each stage's
    /// output width.
    pub fn stage_widths(&self) -> [usize; 5] {
        let mut w = [self.freq_bins; 5];
        for i in 0..4 {
            w[i + 1] = w[i] + 1 - self.conv_widths[i];
        }
        w
    }

    /// Length of the flattened per-interval feature fed to the first LSTM.
    pub fn feature_len(&self) -> usize {
        self.channels * self.stage_widths()[4]
    }

    pub fn embedding_len(&self) -> usize {
        self.lstm_hidden
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.intervals, self.sensors, 2 * AUGMENTED_AXES, self.freq_bins]
    }

    /// Names and shapes of every trainable tensor, in parameter order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let h = self.lstm_hidden;
        let [w1, w2, w3, w4] = self.conv_widths;
        vec![
            ("within_axis.filters".into(), vec![c, 1, 2, w1]),
            ("within_axis.bias".into(), vec![c]),
            ("axis_merge.filters".into(), vec![c, c, AUGMENTED_AXES, w2]),
            ("axis_merge.bias".into(), vec![c]),
            ("sensor_merge1.filters".into(), vec![c, c, self.sensors, w3]),
            ("sensor_merge1.bias".into(), vec![c]),
            ("sensor_merge2.filters".into(), vec![c, c, 1, w4]),
            ("sensor_merge2.bias".into(), vec![c]),
            ("lstm1.w_input".into(), vec![4 * h, self.feature_len()]),
            ("lstm1.w_hidden".into(), vec![4 * h, h]),
            ("lstm1.bias".into(), vec![4 * h]),
            ("lstm2.w_input".into(), vec![4 * h, h]),
            ("lstm2.w_hidden".into(), vec![4 * h, h]),
            ("lstm2.bias".into(), vec![4 * h]),
        ]
    }
}

/// All trainable tensors of the encoder, ordered as in
/// [`SenConfig::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct SenWeights {
    config: SenConfig,
    tensors: Vec<Tensor>,
}

struct ParamVars {
    within: (Var, Var),
    axis: (Var, Var),
    sensor1: (Var, Var),
    sensor2: (Var, Var),
    lstm1: LstmVars,
    lstm2: LstmVars,
}

impl SenWeights {
    /// Seeded initialization: Glorot-uniform convolutions with zero biases,
    /// LSTM weights and biases uniform in `±sqrt(1/hidden)`.
    pub fn init(config: &SenConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "sen-init");
        let lstm_bound = (1.0 / config.lstm_hidden as f64).sqrt();
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.starts_with("lstm") {
                    uniform(&shape, lstm_bound, &mut rng)
                } else if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let receptive = shape[2] * shape[3];
                    glorot_uniform(&shape, shape[1] * receptive, shape[0] * receptive, &mut rng)
                }
            })
            .collect();
        Ok(SenWeights {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds weights from tensors, checking names and shapes against the
    /// configuration.
    pub fn from_tensors(config: &SenConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if named.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want_shape)) in named.into_iter().zip(expected) {
            if name != want_name {
                return Err(Error::Format(format!("expected tensor `{want_name}`, found `{name}`")));
            }
            if t.shape() != want_shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, configuration requires {want_shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor `{name}` contains non-finite values")));
            }
            tensors.push(t);
        }
        Ok(SenWeights {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &SenConfig {
        &self.config
    }

    fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    fn check_input(&self, x: &InputTensor) -> Result<()> {
        let want = self.config.input_shape();
        if x.data.shape() != want {
            return Err(Error::dim(
                "embed",
                format!("input stage: got {:?}, configuration expects {want:?}", x.data.shape()),
            ));
        }
        Ok(())
    }

    fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: &InputTensor,
        trace: Option<&mut Vec<(&'static str, Vec<usize>)>>,
    ) -> Result<(Var, Vec<Var>)> {
        let vars = self.register(tape);
        let e = self.forward_with(tape, &vars, x, trace)?;
        Ok((e, vars))
    }

    /// Forward pass using parameter handles already on `tape`, in parameter
    /// order. Only the configuration of `self` is consulted.
    pub fn forward_with(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        x: &InputTensor,
        mut trace: Option<&mut Vec<(&'static str, Vec<usize>)>>,
    ) -> Result<Var> {
        self.check_input(x)?;
        if vars.len() != self.tensors.len() {
            return Err(Error::dim(
                "embed",
                format!("{} parameter handles for {} tensors", vars.len(), self.tensors.len()),
            ));
        }
        let p = ParamVars {
            within: (vars[0], vars[1]),
            axis: (vars[2], vars[3]),
            sensor1: (vars[4], vars[5]),
            sensor2: (vars[6], vars[7]),
            lstm1: LstmVars {
                w_input: vars[8],
                w_hidden: vars[9],
                bias: vars[10],
            },
            lstm2: LstmVars {
                w_input: vars[11],
                w_hidden: vars[12],
                bias: vars[13],
            },
        };
        let f = self.config.freq_bins;
        let conv_relu = |tape: &mut Tape<'_>, input: Var, (w, b): (Var, Var)| -> Result<Var> {
            let y = tape.conv1d(input, w, b)?;
            Ok(tape.relu(y))
        };

        let mut features = Vec::with_capacity(self.config.intervals);
        for t in 0..self.config.intervals {
            let mut sensor_maps = Vec::with_capacity(self.config.sensors);
            for s in 0..self.config.sensors {
                let mut axis_maps = Vec::with_capacity(AUGMENTED_AXES);
                for a in 0..AUGMENTED_AXES {
                    let rows = Tensor::new(vec![1, 2, f], x.axis_rows(t, s, a).to_vec())?;
                    let input = tape.constant(rows);
                    axis_maps.push(conv_relu(tape, input, p.within)?);
                }
                let stacked = tape.stack_height(&axis_maps)?;
                let merged = conv_relu(tape, stacked, p.axis)?;
                if t == 0 && s == 0 {
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.push(("within-axis", tape.value(axis_maps[0]).shape().to_vec()));
                        tr.push(("axis-stack", tape.value(stacked).shape().to_vec()));
                        tr.push(("axis-merge", tape.value(merged).shape().to_vec()));
                    }
                }
                sensor_maps.push(merged);
            }
            let stacked = tape.stack_height(&sensor_maps)?;
            let s1 = conv_relu(tape, stacked, p.sensor1)?;
            let s2 = conv_relu(tape, s1, p.sensor2)?;
            if t == 0 {
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(("sensor-stack", tape.value(stacked).shape().to_vec()));
                    tr.push(("sensor-merge 1", tape.value(s1).shape().to_vec()));
                    tr.push(("sensor-merge 2", tape.value(s2).shape().to_vec()));
                }
            }
            features.push(tape.reshape(s2, &[self.config.feature_len()])?);
        }

        let hid = self.config.lstm_hidden;
        let run_layer = |tape: &mut Tape<'_>, inputs: &[Var], w: &LstmVars| -> Result<Vec<Var>> {
            let mut h = tape.constant(Tensor::zeros(&[hid]));
            let mut c = tape.constant(Tensor::zeros(&[hid]));
            let mut outs = Vec::with_capacity(inputs.len());
            for &xt in inputs {
                let (hn, cn) = tape.lstm_step(xt, h, c, w)?;
                h = hn;
                c = cn;
                outs.push(h);
            }
            Ok(outs)
        };
        let first = run_layer(tape, &features, &p.lstm1)?;
        let second = run_layer(tape, &first, &p.lstm2)?;
        tape.mean(&second)
    }

    /// Records the forward pass on `tape`. Returns the embedding handle and
    /// the parameter handles in parameter order.
    pub fn embed_on_tape<'a>(&'a self, tape: &mut Tape<'a>, x: &InputTensor) -> Result<(Var, Vec<Var>)> {
        self.forward(tape, x, None)
    }

    pub fn embed(&self, x: &InputTensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (e, _) = self.forward(&mut tape, x, None)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Output shapes of each convolution stage for the first interval.
    pub fn stage_shapes(&self, x: &InputTensor) -> Result<Vec<(&'static str, Vec<usize>)>> {
        let mut trace = Vec::new();
        let mut tape = Tape::new();
        self.forward(&mut tape, x, Some(&mut trace))?;
        Ok(trace)
    }
}

impl ParamSet for SenWeights {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.tensors)
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }
}

/// Embeds every input; row `i` is `embed(xs[i])`.
pub fn embed_batch(xs: &[InputTensor], weights: &SenWeights) -> Result<Vec<Vec<f64>>> {
    xs.par_iter().map(|x| weights.embed(x)).collect()
}

/// Input of the configured shape with spectra drawn uniformly from [0, 2).
pub fn random_input(cfg: &SenConfig, seed: u64) -> InputTensor {
    let mut rng = rng_for(seed, "input");
    let shape = cfg.input_shape();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(0.0..2.0))
        .collect();
    InputTensor {
        data: Tensor::new(shape.to_vec(), data).expect("shape matches data"),
        intervals: cfg.intervals,
        bins: cfg.freq_bins,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> SenConfig {
        SenConfig {
            conv_widths: [2, 2, 2, 2],
            channels: 4,
            lstm_hidden: 8,
            intervals: 2,
            freq_bins: 5,
            sensors: 2,
            seed: 3,
        }
    }

    pub(crate) use super::random_input;

    #[test]
    fn default_width_chain() {
        let cfg = SenConfig::default();
        assert_eq!(cfg.stage_widths(), [13, 9, 7, 5, 3]);
        let small = SenConfig {
            channels: 3,
            lstm_hidden: 4,
            ..SenConfig::default()
        };
        let w = SenWeights::init(&small).unwrap();
        let shapes = w.stage_shapes(&random_input(&small, 1)).unwrap();
        let get = |n: &str| shapes.iter().find(|(s, _)| *s == n).unwrap().1.clone();
        assert_eq!(get("within-axis"), vec![3, 1, 9]);
        assert_eq!(get("axis-stack"), vec![3, 4, 9]);
        assert_eq!(get("axis-merge"), vec![3, 1, 7]);
        assert_eq!(get("sensor-stack"), vec![3, 2, 7]);
        assert_eq!(get("sensor-merge 1"), vec![3, 1, 5]);
        assert_eq!(get("sensor-merge 2"), vec![3, 1, 3]);
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let cfg = tiny_config();
        assert_eq!(SenWeights::init(&cfg).unwrap(), SenWeights::init(&cfg).unwrap());
        let other = SenConfig { seed: 4, ..cfg.clone() };
        assert_ne!(SenWeights::init(&cfg).unwrap(), SenWeights::init(&other).unwrap());
    }

    #[test]
    fn init_rejects_oversized_filter() {
        let cfg = SenConfig {
            conv_widths: [15, 3, 3, 3],
            ..SenConfig::default()
        };
        let err = SenWeights::init(&cfg).unwrap_err();
        assert!(err.to_string().contains("within-axis"));
        let cfg = SenConfig {
            conv_widths: [5, 3, 3, 6],
            ..SenConfig::default()
        };
        assert!(SenWeights::init(&cfg)
            .unwrap_err()
            .to_string()
            .contains("sensor-merge 2"));
        let cfg = SenConfig {
            lstm_hidden: 1,
            ..SenConfig::default()
        };
        assert!(SenWeights::init(&cfg).is_err());
    }

    #[test]
    fn embed_shape_and_determinism() {
        let cfg = tiny_config();
        let w = SenWeights::init(&cfg).unwrap();
        let x = random_input(&cfg, 9);
        let e = w.embed(&x).unwrap();
        assert_eq!(e.len(), 8);
        assert!(e.iter().all(|v| v.is_finite()));
        assert_eq!(e, w.embed(&x).unwrap());
    }

    #[test]
    fn single_interval_embedding_is_last_lstm_output() {
        let cfg = SenConfig {
            intervals: 1,
            ..tiny_config()
        };
        let w = SenWeights::init(&cfg).unwrap();
        let x = random_input(&cfg, 2);
        let mut tape = Tape::new();
        let (e, _) = w.embed_on_tape(&mut tape, &x).unwrap();
        // The mean node's operand is the lone second-layer output: its value
        // is the node immediately before the mean.
        let before = tape.value(Var::from_index(e.index() - 1)).clone();
        assert_eq!(tape.value(e).data(), before.data());
    }

    #[test]
    fn embed_rejects_wrong_shape() {
        let cfg = tiny_config();
        let w = SenWeights::init(&cfg).unwrap();
        let x = random_input(&SenConfig { freq_bins: 6, ..cfg }, 1);
        let err = w.embed(&x).unwrap_err();
        assert!(err.to_string().contains("input stage"));
    }

    #[test]
    fn batch_matches_individual_calls() {
        let cfg = tiny_config();
        let w = SenWeights::init(&cfg).unwrap();
        let xs: Vec<_> = (0..4).map(|i| random_input(&cfg, 100 + i)).collect();
        let batch = embed_batch(&xs, &w).unwrap();
        for (row, x) in batch.iter().zip(&xs) {
            assert_eq!(row, &w.embed(x).unwrap());
        }
        let single = embed_batch(&xs[..1], &w).unwrap();
        assert_eq!(single[0], batch[0]);
        let reversed: Vec<_> = xs.iter().rev().cloned().collect();
        let rb = embed_batch(&reversed, &w).unwrap();
        for i in 0..4 {
            assert_eq!(rb[i], batch[3 - i]);
        }
    }

    #[test]
    fn from_tensors_validates_names_and_shapes() {
        let cfg = tiny_config();
        let w = SenWeights::init(&cfg).unwrap();
        let named: Vec<(String, Tensor)> = w.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(SenWeights::from_tensors(&cfg, named.clone()).unwrap(), w);
        let bigger = SenConfig {
            channels: 5,
            ..cfg.clone()
        };
        let err = SenWeights::from_tensors(&bigger, named).unwrap_err();
        assert!(err.to_string().contains("within_axis.filters"));
    }
}
