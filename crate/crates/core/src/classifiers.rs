//! Recognition heads over embeddings: class-center similarity matching,
//! k-nearest neighbours, a separately trained MLP head, and the jointly
//! trained cross-entropy baseline.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{SenConfig, SenWeights};
use crate::pairwise::cosine_similarity;
use crate::seeding::rng_for;
use crate::signal::InputTensor;
use crate::tensor::{glorot_uniform, OptimizerKind, OptimizerState, ParamSet, Tape, Tensor, Var};

/// Mean of the normalized training embeddings of each class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenters {
    pub centers: Vec<Vec<f64>>,
    pub class_ids: Vec<usize>,
}

impl ClassCenters {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, class: usize) -> Option<&[f64]> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .map(|i| self.centers[i].as_slice())
    }

    /// Cosine similarity of `e` to every center, in center order.
    pub fn similarities(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.centers.iter().map(|c| cosine_similarity(e, c)).collect()
    }
}

fn normalized(e: &[f64]) -> Result<Vec<f64>> {
    let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(e.iter().map(|v| v / n).collect())
}

/// Centers for classes `0..classes`; each is left un-renormalized.
pub fn compute_class_centers(embeddings: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<ClassCenters> {
    if embeddings.len() != labels.len() {
        return Err(Error::dim(
            "compute_class_centers",
            format!("{} embeddings vs {} labels", embeddings.len(), labels.len()),
        ));
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (e, &l) in embeddings.iter().zip(labels) {
        if l >= classes {
            return Err(Error::Contract(format!("label {l} outside 0..{classes}")));
        }
        let u = normalized(e)?;
        sums[l].iter_mut().zip(&u).for_each(|(s, v)| *s += v);
        counts[l] += 1;
    }
    for (class, (sum, &n)) in sums.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(Error::Coverage { class });
        }
        sum.iter_mut().for_each(|s| *s /= n as f64);
        if sum.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
            return Err(Error::DegenerateCenter { class });
        }
    }
    Ok(ClassCenters {
        centers: sums,
        class_ids: (0..classes).collect(),
    })
}

/// Index of the largest score; ties go to the earliest entry.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Class of the center with the highest cosine similarity to `e`.
pub fn predict_sm(e: &[f64], centers: &ClassCenters) -> Result<usize> {
    if centers.is_empty() {
        return Err(Error::Contract("no class centers".into()));
    }
    let sims = centers.similarities(e)?;
    // Ties resolve toward the lowest class id regardless of center order.
    let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(centers
        .class_ids
        .iter()
        .zip(&sims)
        .filter(|(_, &s)| s == best)
        .map(|(&c, _)| c)
        .min()
        .expect("non-empty"))
}

/// Majority label among the `k_nn` most cosine-similar training embeddings.
pub fn predict_knn(e: &[f64], train_embeddings: &[Vec<f64>], train_labels: &[usize], k_nn: usize) -> Result<usize> {
    if train_embeddings.is_empty() {
        return Err(Error::Contract("k-NN needs a non-empty training set".into()));
    }
    if k_nn == 0 || k_nn > train_embeddings.len() {
        return Err(Error::Contract(format!(
            "k_nn = {k_nn} must lie in 1..={}",
            train_embeddings.len()
        )));
    }
    let sims = train_embeddings
        .iter()
        .map(|t| cosine_similarity(e, t))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![0.0; classes];
    for &i in &order[..k_nn] {
        votes[train_labels[i]] += 1.0;
    }
    Ok(argmax(&votes))
}

/// Averaged cross entropy of predicted class distributions against labels.
pub fn cross_entropy(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probabilities.len() != labels.len() || labels.is_empty() {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} predictions vs {} labels", probabilities.len(), labels.len()),
        ));
    }
    let total: f64 = probabilities.iter().zip(labels).map(|(p, &y)| -p[y].ln()).sum();
    Ok(total / labels.len() as f64)
}

/// One-hidden-layer classifier: `softmax(b_out + W_out · relu(W_hid · e + b_hid))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub hidden_weights: Tensor,
    pub hidden_bias: Tensor,
    pub output_weights: Tensor,
    pub output_bias: Tensor,
}

impl MlpHead {
    pub fn init(embedding_len: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "mlp-init");
        MlpHead {
            hidden_weights: glorot_uniform(&[hidden, embedding_len], embedding_len, hidden, &mut rng),
            hidden_bias: Tensor::zeros(&[hidden]),
            output_weights: glorot_uniform(&[classes, hidden], hidden, classes, &mut rng),
            output_bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.output_bias.numel()
    }

    fn register<'a>(&'a self, tape: &mut Tape<'a>) -> [Var; 4] {
        [
            tape.param(&self.hidden_weights),
            tape.param(&self.hidden_bias),
            tape.param(&self.output_weights),
            tape.param(&self.output_bias),
        ]
    }

    fn logits_on_tape(tape: &mut Tape<'_>, e: Var, p: &[Var; 4]) -> Result<Var> {
        let hidden = tape.dense(e, p[0], p[1])?;
        let hidden = tape.relu(hidden);
        tape.dense(hidden, p[2], p[3])
    }

    /// Class probabilities for one embedding.
    pub fn probabilities(&self, e: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape);
        let ev = tape.constant(Tensor::vector(e.to_vec()));
        let logits = Self::logits_on_tape(&mut tape, ev, &p)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Mean cross entropy of the head over a labelled embedding set.
    pub fn loss(&self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let probs = embeddings
            .iter()
            .map(|e| self.probabilities(e))
            .collect::<Result<Vec<_>>>()?;
        cross_entropy(&probs, labels)
    }
}

impl ParamSet for MlpHead {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.hidden_weights".into(), &self.hidden_weights),
            ("head.hidden_bias".into(), &self.hidden_bias),
            ("head.output_weights".into(), &self.output_weights),
            ("head.output_bias".into(), &self.output_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden_weights,
            &mut self.hidden_bias,
            &mut self.output_weights,
            &mut self.output_bias,
        ]
    }
}

/// Argmax of the head's class distribution; ties go to the lowest class.
pub fn predict_mlp(e: &[f64], head: &MlpHead) -> Result<usize> {
    Ok(argmax(&head.probabilities(e)?))
}

/// Cross-entropy training schedule shared by the MLP head and the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 64,
            classes: 6,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

fn check_labels(n: usize, labels: &[usize], classes: usize) -> Result<()> {
    if n == 0 || n != labels.len() {
        return Err(Error::Contract(format!("{n} samples vs {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {bad} outside 0..{classes}")));
    }
    Ok(())
}

fn add_into(total: &mut Vec<Vec<f64>>, grads: Vec<Vec<f64>>) {
    if total.is_empty() {
        *total = grads;
    } else {
        for (t, g) in total.iter_mut().zip(grads) {
            t.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

/// Trains an MLP head on frozen embeddings. Returns the head and the mean
/// minibatch loss of every epoch.
pub fn train_mlp_head(embeddings: &[Vec<f64>], labels: &[usize], cfg: &HeadConfig) -> Result<(MlpHead, Vec<f64>)> {
    check_labels(embeddings.len(), labels, cfg.classes)?;
    let mut head = MlpHead::init(embeddings[0].len(), cfg.hidden, cfg.classes, cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = rng_for(cfg.seed, "mlp-batches");
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let p = head.register(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let e = tape.constant(Tensor::vector(embeddings[i].clone()));
                let logits = MlpHead::logits_on_tape(&mut tape, e, &p)?;
                losses.push(tape.softmax_cross_entropy(logits, labels[i])?);
            }
            let stacked = tape.concat(&losses)?;
            let total = tape.sum(stacked);
            let mean = tape.scale(total, 1.0 / chunk.len() as f64);
            let loss = tape.value(total).data()[0];
            let mut g = tape.backward(mean)?;
            let grads: Vec<Vec<f64>> = p.iter().map(|&v| g.take(v)).collect();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch,
                    detail: "MLP head cross entropy".into(),
                });
            }
            opt.step(&mut head, &grads)?;
            epoch_loss += loss;
        }
        history.push(epoch_loss / embeddings.len() as f64);
    }
    Ok((head, history))
}

/// Encoder and head trained jointly with cross entropy only.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub sen: SenWeights,
    pub head: MlpHead,
}

impl ParamSet for BaselineModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.sen.named_params();
        v.extend(self.head.named_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.sen.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

impl BaselineModel {
    pub fn predict(&self, x: &InputTensor) -> Result<usize> {
        predict_mlp(&self.sen.embed(x)?, &self.head)
    }

    fn sample_gradients(&self, x: &InputTensor, label: usize, weight: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (e, mut vars) = self.sen.embed_on_tape(&mut tape, x)?;
        let p = self.head.register(&mut tape);
        let logits = MlpHead::logits_on_tape(&mut tape, e, &p)?;
        let ce = tape.softmax_cross_entropy(logits, label)?;
        let loss = tape.value(ce).data()[0];
        let scaled = tape.scale(ce, weight);
        let mut g = tape.backward(scaled)?;
        vars.extend(p);
        Ok((loss, vars.iter().map(|&v| g.take(v)).collect()))
    }
}

/// Trains encoder and head jointly against the averaged cross entropy.
/// Returns the model and the mean training loss of every epoch.
pub fn train_baseline(
    samples: &[InputTensor],
    labels: &[usize],
    sen_config: &SenConfig,
    cfg: &HeadConfig,
) -> Result<(BaselineModel, Vec<f64>)> {
    check_labels(samples.len(), labels, cfg.classes)?;
    let mut model = BaselineModel {
        sen: SenWeights::init(sen_config)?,
        head: MlpHead::init(sen_config.embedding_len(), cfg.hidden, cfg.classes, cfg.seed),
    };
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = rng_for(cfg.seed, "baseline-batches");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let weight = 1.0 / chunk.len() as f64;
            let per_sample: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .map(|&i| model.sample_gradients(&samples[i], labels[i], weight))
                .collect::<Result<_>>()?;
            let mut total = Vec::new();
            let mut batch_loss = 0.0;
            for (loss, grads) in per_sample {
                batch_loss += loss;
                add_into(&mut total, grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: "baseline cross entropy".into(),
                });
            }
            opt.step(&mut model, &total)?;
            epoch_loss += batch_loss;
            step += 1;
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::{random_input, tiny_config};
    use crate::seeding::rng_for;
    use crate::tensor::relative_error;
    use rand::Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn centers_basic_cases() {
        let emb = vec![vec![3.0, 4.0], vec![0.0, 2.0]];
        let c = compute_class_centers(&emb, &[0, 1], 2).unwrap();
        assert_eq!(c.centers[0], vec![0.6, 0.8]);
        assert_eq!(c.centers[1], vec![0.0, 1.0]);

        let emb = vec![vec![2.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        let c = compute_class_centers(&emb, &[0, 0, 1], 2).unwrap();
        assert_eq!(c.centers[0], vec![1.0, 0.0]);
    }

    #[test]
    fn centers_errors() {
        let emb = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            compute_class_centers(&emb, &[0, 0, 1], 2),
            Err(Error::DegenerateCenter { class: 0 })
        ));
        assert!(matches!(
            compute_class_centers(&emb, &[0, 0, 0], 2),
            Err(Error::DegenerateCenter { .. }) | Err(Error::Coverage { class: 1 })
        ));
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            compute_class_centers(&emb, &[0, 0], 2),
            Err(Error::Coverage { class: 1 })
        ));
    }

    #[test]
    fn sm_self_match_and_ties() {
        let c = ClassCenters {
            centers: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, 1.0]],
            class_ids: vec![0, 1, 2, 3],
        };
        assert_eq!(predict_sm(&[-1.0, 0.0], &c).unwrap(), 2);
        assert_eq!(predict_sm(&[0.0, 5.0], &c).unwrap(), 1);
        assert!(predict_sm(&[0.0, 0.0], &c).is_err());
    }

    #[test]
    fn sm_matches_exhaustive_scan() {
        let mut rng = rng_for(1, "sm");
        for _ in 0..20 {
            let c = ClassCenters {
                centers: (0..3).map(|_| random_vec(&mut rng, 4)).collect(),
                class_ids: vec![0, 1, 2],
            };
            let e = random_vec(&mut rng, 4);
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, center) in c.centers.iter().enumerate() {
                let dot: f64 = e.iter().zip(center).map(|(a, b)| a * b).sum();
                let n = (e.iter().map(|v| v * v).sum::<f64>() * center.iter().map(|v| v * v).sum::<f64>()).sqrt();
                if dot / n > best.0 {
                    best = (dot / n, i);
                }
            }
            assert_eq!(predict_sm(&e, &c).unwrap(), best.1);
            assert_eq!(
                predict_sm(&e.iter().map(|v| v * 7.5).collect::<Vec<_>>(), &c).unwrap(),
                best.1
            );
        }
    }

    #[test]
    fn knn_cases() {
        let train = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.1]];
        assert_eq!(predict_knn(&[0.0, 1.0], &train, &[0, 1, 2], 1).unwrap(), 1);
        assert_eq!(predict_knn(&[0.3, -0.2], &train, &[4, 4, 4], 3).unwrap(), 4);
        assert!(predict_knn(&[1.0, 0.0], &[], &[], 1).is_err());
        assert!(predict_knn(&[1.0, 0.0], &train, &[0, 1, 2], 4).is_err());
        // Two-way vote tie between classes 2 and 1 goes to class 1.
        let train = vec![vec![1.0, 0.0], vec![1.0, 0.01]];
        assert_eq!(predict_knn(&[1.0, 0.0], &train, &[2, 1], 2).unwrap(), 1);
    }

    #[test]
    fn knn_matches_sort_oracle() {
        let mut rng = rng_for(2, "knn");
        for _ in 0..20 {
            let train: Vec<Vec<f64>> = (0..10).map(|_| random_vec(&mut rng, 3)).collect();
            let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
            let e = random_vec(&mut rng, 3);
            let mut scored: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| (cosine_similarity(&e, t).unwrap(), i))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut votes = [0; 3];
            for &(_, i) in &scored[..3] {
                votes[labels[i]] += 1;
            }
            let top = *votes.iter().max().unwrap();
            let expected = votes.iter().position(|&v| v == top).unwrap();
            assert_eq!(predict_knn(&e, &train, &labels, 3).unwrap(), expected);
        }
    }

    #[test]
    fn cross_entropy_limits() {
        let perfect = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(cross_entropy(&perfect, &[1, 0]).unwrap(), 0.0);
        let uniform = vec![vec![0.25; 4]; 3];
        assert!((cross_entropy(&uniform, &[0, 3, 2]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlp_zero_head_predicts_class_zero() {
        let head = MlpHead {
            hidden_weights: Tensor::zeros(&[4, 3]),
            hidden_bias: Tensor::zeros(&[4]),
            output_weights: Tensor::zeros(&[5, 4]),
            output_bias: Tensor::zeros(&[5]),
        };
        assert_eq!(predict_mlp(&[0.2, -0.4, 1.0], &head).unwrap(), 0);
        let mut favour = head.clone();
        favour.output_bias.data_mut()[2] = 1.0;
        assert_eq!(predict_mlp(&[0.2, -0.4, 1.0], &favour).unwrap(), 2);
    }

    #[test]
    fn mlp_matches_manual_forward() {
        let head = MlpHead::init(3, 4, 3, 11);
        let mut rng = rng_for(3, "mlp-e");
        for _ in 0..10 {
            let e = random_vec(&mut rng, 3);
            let w1 = head.hidden_weights.data();
            let hidden: Vec<f64> = (0..4)
                .map(|i| {
                    let z: f64 = (0..3).map(|j| w1[i * 3 + j] * e[j]).sum::<f64>() + head.hidden_bias.data()[i];
                    z.max(0.0)
                })
                .collect();
            let w2 = head.output_weights.data();
            let logits: Vec<f64> = (0..3)
                .map(|i| (0..4).map(|j| w2[i * 4 + j] * hidden[j]).sum::<f64>() + head.output_bias.data()[i])
                .collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
            for (a, b) in head.probabilities(&e).unwrap().iter().zip(&probs) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(predict_mlp(&e, &head).unwrap(), argmax(&probs));
        }
    }

    fn separable_embeddings(per_class: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_for(4, "sep");
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for _ in 0..per_class {
                let mut e = random_vec(&mut rng, 6).iter().map(|v| 0.2 * v).collect::<Vec<_>>();
                e[c] += 1.0;
                emb.push(e);
                labels.push(c);
            }
        }
        (emb, labels)
    }

    #[test]
    fn mlp_training_lowers_loss() {
        let (emb, labels) = separable_embeddings(20);
        let cfg = HeadConfig {
            hidden: 8,
            classes: 3,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let before = MlpHead::init(6, 8, 3, cfg.seed).loss(&emb, &labels).unwrap();
        let (head, history) = train_mlp_head(&emb, &labels, &cfg).unwrap();
        assert_eq!(history.len(), 30);
        let after = head.loss(&emb, &labels).unwrap();
        assert!(after < before);
        let correct = emb
            .iter()
            .zip(&labels)
            .filter(|(e, &l)| predict_mlp(e, &head).unwrap() == l)
            .count();
        assert!(correct as f64 / emb.len() as f64 >= 1.0 / 3.0);

        let zero = HeadConfig { epochs: 0, ..cfg };
        let (head0, h0) = train_mlp_head(&emb, &labels, &zero).unwrap();
        assert!(h0.is_empty());
        assert_eq!(head0, MlpHead::init(6, 8, 3, zero.seed));
    }

    fn baseline_inputs(cfg: &SenConfig, n: usize) -> (Vec<InputTensor>, Vec<usize>) {
        let xs: Vec<InputTensor> = (0..n)
            .map(|i| {
                let mut x = random_input(cfg, 60 + i as u64);
                // Class 1 gets a constant offset on every spectrum.
                if i % 2 == 1 {
                    x.data.data_mut().iter_mut().for_each(|v| *v += 1.5);
                }
                x
            })
            .collect();
        let labels = (0..n).map(|i| i % 2).collect();
        (xs, labels)
    }

    fn sample_loss(model: &BaselineModel, x: &InputTensor, label: usize) -> f64 {
        let p = model.head.probabilities(&model.sen.embed(x).unwrap()).unwrap();
        -p[label].ln()
    }

    #[test]
    fn baseline_gradients_match_differences() {
        let cfg = tiny_config();
        let (xs, _) = baseline_inputs(&cfg, 1);
        let model = BaselineModel {
            sen: SenWeights::init(&cfg).unwrap(),
            head: MlpHead::init(cfg.embedding_len(), 5, 2, 1),
        };
        let (x, label) = (&xs[0], 1);
        let (loss, grads) = model.sample_gradients(x, label, 1.0).unwrap();
        assert!((loss - sample_loss(&model, x, label)).abs() < 1e-12);
        let eps = 1e-5;
        let mut checked = 0;
        for (t, g) in grads.iter().enumerate() {
            // Largest coordinate, away from ReLU kinks where one-sided slopes differ.
            let (j, gj) = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap();
            if gj.abs() < 1e-8 {
                continue;
            }
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[t].data_mut()[j] += delta;
                sample_loss(&m, x, label)
            };
            let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            assert!(
                relative_error(*gj, numeric) < 1e-4,
                "tensor {t}: analytic {gj} numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked >= grads.len() - 2, "only {checked} tensors carried gradient");
    }

    #[test]
    fn baseline_training_fits_and_repeats() {
        let sen = tiny_config();
        let (xs, labels) = baseline_inputs(&sen, 12);
        let cfg = HeadConfig {
            hidden: 8,
            classes: 2,
            epochs: 15,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (model, history) = train_baseline(&xs, &labels, &sen, &cfg).unwrap();
        assert_eq!(history.len(), 15);
        assert!(history.last().unwrap() < &history[0], "{history:?}");
        let correct = xs
            .iter()
            .zip(&labels)
            .filter(|(x, &l)| model.predict(x).unwrap() == l)
            .count();
        assert!(correct >= 10, "{correct}/12");
        let (again, h2) = train_baseline(&xs, &labels, &sen, &cfg).unwrap();
        assert_eq!(history, h2);
        assert_eq!(model, again);
        assert!(train_baseline(&xs, &labels[..3], &sen, &cfg).is_err());
    }
}
