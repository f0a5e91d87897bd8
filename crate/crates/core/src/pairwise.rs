//! Training the encoder from pairwise same-class indicators.
//!
//! For a pair with cosine similarity `Φ` the same-class probability is the
//! logistic `σ_k(Φ) = 1 / (1 + e^{-kΦ})`; the loss is the summed negative log
//! likelihood of the sampled indicators.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{random_input, SenConfig, SenWeights};
use crate::seeding::rng_for;
use crate::signal::InputTensor;
use crate::tensor::{grad_check, sigmoid, softplus, OptimizerKind, OptimizerState, ParamSet, Tape, Tensor, Var};

/// `eᵢᵀeⱼ / (|eᵢ|·|eⱼ|)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine_similarity",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Probability of the observed indicator: `σ_k(Φ)` when `same`, else its
/// complement.
pub fn pair_probability(phi: f64, same: bool, k: f64) -> f64 {
    if same {
        sigmoid(k * phi)
    } else {
        sigmoid(-k * phi)
    }
}

/// `J = -Σ (s·kΦ − ln(1 + e^{kΦ}))`, accumulated as
/// `max(z, 0) − s·z + ln(1 + e^{−|z|})` with `z = kΦ`.
pub fn pairwise_loss(phis: &[f64], targets: &[f64], k: f64) -> Result<f64> {
    if phis.len() != targets.len() {
        return Err(Error::dim(
            "pairwise_loss",
            format!("{} similarities vs {} indicators", phis.len(), targets.len()),
        ));
    }
    if k.is_nan() || k <= 0.0 {
        return Err(Error::Config(format!("sigmoid steepness must be positive, got {k}")));
    }
    Ok(phis
        .iter()
        .zip(targets)
        .map(|(&phi, &s)| {
            let z = k * phi;
            softplus(z) - s * z
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn targets(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| if p.same { 1.0 } else { 0.0 }).collect()
    }

    /// Distinct sample indices referenced by the batch, ascending.
    pub fn members(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.pairs.iter().flat_map(|p| [p.i, p.j]).collect();
        m.sort_unstable();
        m.dedup();
        m
    }
}

/// Draws `batch` ordered pairs, `round(batch · positive_fraction)` of them
/// same-class. Positives are uniform over all same-class ordered pairs and
/// negatives uniform over all cross-class ordered pairs; self-pairs never
/// occur.
pub fn sample_pairs<R: Rng + ?Sized>(
    labels: &[usize],
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Result<PairBatch> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::Sampling(format!(
            "positive fraction {positive_fraction} outside [0, 1]"
        )));
    }
    let positives = (batch as f64 * positive_fraction).round() as usize;
    let negatives = batch - positives;

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let pools: Vec<&Vec<usize>> = by_class.values().filter(|m| m.len() >= 2).collect();
    let weights: Vec<u64> = pools.iter().map(|m| (m.len() * (m.len() - 1)) as u64).collect();
    let total: u64 = weights.iter().sum();
    if positives > 0 && total == 0 {
        return Err(Error::Sampling(
            "no class has two samples to form a positive pair".into(),
        ));
    }
    if negatives > 0 && by_class.len() < 2 {
        return Err(Error::Sampling("a negative pair needs at least two classes".into()));
    }

    let mut pairs = Vec::with_capacity(batch);
    for _ in 0..positives {
        let mut r = rng.random_range(0..total);
        let mut chosen = pools[0];
        for (pool, &w) in pools.iter().zip(&weights) {
            if r < w {
                chosen = pool;
                break;
            }
            r -= w;
        }
        let a = rng.random_range(0..chosen.len());
        let mut b = rng.random_range(0..chosen.len() - 1);
        if b >= a {
            b += 1;
        }
        pairs.push(Pair {
            i: chosen[a],
            j: chosen[b],
            same: true,
        });
    }
    let n = labels.len();
    while pairs.len() < batch {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if labels[i] != labels[j] {
            pairs.push(Pair { i, j, same: false });
        }
    }
    Ok(PairBatch { pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sigmoid_k: f64,
    pub batch_pairs: usize,
    pub positive_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigmoid_k: 10.0,
            batch_pairs: 128,
            positive_fraction: 0.5,
            epochs: 100,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// One epoch is `ceil(N / B)` pair batches.
    pub fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_pairs.max(1))
    }
}

/// Runs one forward pass per member on its own tape and returns the members'
/// embeddings alongside the tapes needed for the backward pass.
fn forward_members<'w>(
    weights: &'w SenWeights,
    inputs: &[InputTensor],
    members: &[usize],
) -> Result<Vec<(Tape<'w>, Var, Vec<Var>)>> {
    members
        .par_iter()
        .map(|&m| {
            let mut tape = Tape::new();
            let (e, vars) = weights.embed_on_tape(&mut tape, &inputs[m])?;
            Ok((tape, e, vars))
        })
        .collect()
}

/// Backpropagates per-member upstream gradients and sums the parameter
/// gradients in member order.
fn backward_members(
    forwards: Vec<(Tape<'_>, Var, Vec<Var>)>,
    upstream: Vec<Vec<f64>>,
    param_count: usize,
) -> Result<Vec<Vec<f64>>> {
    let per_member: Vec<Vec<Vec<f64>>> = forwards
        .into_par_iter()
        .zip(upstream)
        .map(|((tape, e, vars), up)| {
            let mut g = tape.backward_seeded(vec![(e, up)])?;
            Ok(vars.iter().map(|&v| g.take(v)).collect())
        })
        .collect::<Result<_>>()?;
    let mut total: Vec<Vec<f64>> = Vec::with_capacity(param_count);
    for grads in per_member {
        if total.is_empty() {
            total = grads;
            continue;
        }
        for (t, g) in total.iter_mut().zip(grads) {
            t.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok(total)
}

/// Loss and parameter gradients for one pair batch.
pub fn pair_batch_gradients(
    weights: &SenWeights,
    inputs: &[InputTensor],
    batch: &PairBatch,
    sigmoid_k: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let members = batch.members();
    let forwards = forward_members(weights, inputs, &members)?;

    let mut loss_tape = Tape::new();
    let evars: Vec<Var> = forwards
        .iter()
        .map(|(t, e, _)| loss_tape.param_owned(t.value(*e).clone()))
        .collect();
    let slot = |idx: usize| members.binary_search(&idx).expect("pair member embedded");
    let phis = batch
        .pairs
        .iter()
        .map(|p| loss_tape.cosine(evars[slot(p.i)], evars[slot(p.j)]))
        .collect::<Result<Vec<_>>>()?;
    let phis = loss_tape.concat(&phis)?;
    let j = loss_tape.pair_nll(phis, &batch.targets(), sigmoid_k)?;
    let loss = loss_tape.value(j).data()[0];
    let mut lg = loss_tape.backward(j)?;
    let upstream: Vec<Vec<f64>> = evars.iter().map(|&v| lg.take(v)).collect();

    let grads = backward_members(forwards, upstream, weights.named_params().len())?;
    Ok((loss, grads))
}

/// Trains a freshly initialized encoder with the pairwise loss. Returns the
/// trained weights and the loss of every step.
pub fn train_sen(
    samples: &[InputTensor],
    labels: &[usize],
    sen_config: &SenConfig,
    train_config: &TrainConfig,
) -> Result<(SenWeights, Vec<f64>)> {
    let weights = SenWeights::init(sen_config)?;
    continue_training(weights, samples, labels, train_config)
}

/// Continues pairwise training from existing weights.
pub fn continue_training(
    mut weights: SenWeights,
    samples: &[InputTensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(SenWeights, Vec<f64>)> {
    if samples.len() < 2 || samples.len() != labels.len() {
        return Err(Error::Contract(format!(
            "training needs at least 2 labelled samples, got {} samples and {} labels",
            samples.len(),
            labels.len()
        )));
    }
    let mut rng = rng_for(cfg.seed, "pair-sampling");
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let steps = cfg.steps_for(samples.len());
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sample_pairs(labels, cfg.batch_pairs, cfg.positive_fraction, &mut rng)?;
        let (loss, grads) = pair_batch_gradients(&weights, samples, &batch, cfg.sigmoid_k)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("pairwise loss {loss} over {} pairs", batch.pairs.len()),
            });
        }
        opt.step(&mut weights, &grads)?;
        history.push(loss);
    }
    Ok((weights, history))
}

/// Writes `(step, loss)` rows with a header.
pub fn write_loss_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss")?;
    for (i, j) in history.iter().enumerate() {
        writeln!(out, "{i},{j}")?;
    }
    out.flush()?;
    Ok(())
}

/// Mean cosine similarity over same-class pairs minus the mean over
/// cross-class pairs.
pub fn similarity_gap(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let phi = cosine_similarity(&embeddings[i], &embeddings[j])?;
            if labels[i] == labels[j] {
                same += phi;
                ns += 1;
            } else {
                diff += phi;
                nd += 1;
            }
        }
    }
    if ns == 0 || nd == 0 {
        return Err(Error::Statistics("need both same- and cross-class pairs".into()));
    }
    Ok(same / ns as f64 - diff / nd as f64)
}

/// Gradient check of the whole encoder plus pairwise loss: one anchor input
/// paired with a positive and a negative, differentiated with respect to
/// every weight tensor.
pub fn check_sen_pairwise(cfg: &SenConfig, k: f64, eps: f64) -> Result<f64> {
    let weights = SenWeights::init(cfg)?;
    let xs: Vec<InputTensor> = (0..3)
        .map(|i| random_input(cfg, cfg.seed.wrapping_add(20 + i)))
        .collect();
    let inputs: Vec<Tensor> = weights.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |tape, vars| {
            let es = xs
                .iter()
                .map(|x| weights.forward_with(tape, vars, x, None))
                .collect::<Result<Vec<_>>>()?;
            let a = tape.cosine(es[0], es[1])?;
            let b = tape.cosine(es[0], es[2])?;
            let phis = tape.concat(&[a, b])?;
            tape.pair_nll(phis, &[1.0, 0.0], k)
        },
        &inputs,
        eps,
    )
}
