//! Gradient checks over every differentiable tape operation.

use super::{grad_check, uniform, LstmVars, Tape, Tensor, Var};
use crate::error::Result;
use crate::seeding::rng_for;

/// Outcome of checking one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "tensor-tests");
    uniform(shape, 1.0, &mut rng)
}

type Case = (&'static str, Vec<Tensor>, fn(&mut Tape<'_>, &[Var]) -> Result<Var>, f64);

/// Runs every op, each wrapped into a smooth scalar, through [`grad_check`].
pub fn check_ops(eps: f64) -> Result<Vec<OpCheck>> {
    let cases: Vec<Case> = vec![
        (
            "add",
            vec![random(&[4], 1), random(&[4], 2)],
            |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "sub",
            vec![random(&[4], 3), random(&[4], 4)],
            |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "scale",
            vec![random(&[3], 5)],
            |t, v| {
                let y = t.scale(v[0], -2.5);
                let y = t.mul(y, v[0])?;
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "mean",
            vec![random(&[3], 6), random(&[3], 7), random(&[3], 8)],
            |t, v| {
                let m = t.mean(v)?;
                let y = t.tanh(m);
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "ln",
            vec![Tensor::vector(vec![0.5, 1.5, 3.0])],
            |t, v| {
                let y = t.ln(v[0])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "matvec",
            vec![random(&[3, 4], 9), random(&[4], 10)],
            |t, v| {
                let y = t.matvec(v[0], v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "dense",
            vec![random(&[4], 11), random(&[2, 4], 12), random(&[2], 13)],
            |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                let y = t.logistic(y);
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "conv1d",
            vec![random(&[2, 3, 6], 14), random(&[3, 2, 2, 3], 15), random(&[3], 16)],
            |t, v| {
                let y = t.conv1d(v[0], v[1], v[2])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "relu",
            vec![Tensor::vector(vec![-0.7, 0.4, 1.3, -0.1])],
            |t, v| {
                let y = t.relu(v[0]);
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "logistic_k",
            vec![random(&[4], 17)],
            |t, v| {
                let y = t.logistic_k(v[0], 10.0);
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "softmax",
            vec![random(&[2, 3], 18)],
            |t, v| {
                let y = t.softmax(v[0])?;
                let w = t.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap());
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "slice+concat",
            vec![random(&[6], 19)],
            |t, v| {
                let a = t.slice(v[0], 1, 3)?;
                let b = t.slice(v[0], 3, 3)?;
                let c = t.concat(&[b, a])?;
                let w = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
                let y = t.mul(c, w)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "stack_height+reshape",
            vec![random(&[2, 1, 3], 20), random(&[2, 2, 3], 21)],
            |t, v| {
                let s = t.stack_height(v)?;
                let r = t.reshape(s, &[18])?;
                let w = t.constant(Tensor::vector((0..18).map(|i| i as f64 - 9.0).collect()));
                let y = t.mul(r, w)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            1e-6,
        ),
        (
            "cosine",
            vec![random(&[5], 22), random(&[5], 23)],
            |t, v| t.cosine(v[0], v[1]),
            1e-6,
        ),
        (
            "pair_nll",
            vec![Tensor::vector(vec![-0.9, -0.2, 0.3, 0.8])],
            |t, v| t.pair_nll(v[0], &[1.0, 0.0, 1.0, 0.0], 10.0),
            1e-6,
        ),
        (
            "softmax_cross_entropy",
            vec![random(&[4], 24)],
            |t, v| t.softmax_cross_entropy(v[0], 2),
            1e-6,
        ),
        (
            "lstm_step",
            vec![
                random(&[3], 25),
                random(&[2], 26),
                random(&[2], 27),
                random(&[8, 3], 28),
                random(&[8, 2], 29),
                random(&[8], 30),
            ],
            |t, v| {
                let w = LstmVars {
                    w_input: v[3],
                    w_hidden: v[4],
                    bias: v[5],
                };
                let (h, c) = t.lstm_step(v[0], v[1], v[2], &w)?;
                let hs = t.sum(h);
                let cs = t.sum(c);
                let y = t.concat(&[hs, cs])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            1e-6,
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f, tolerance)| {
            Ok(OpCheck {
                name,
                error: grad_check(f, &inputs, eps)?,
                tolerance,
            })
        })
        .collect()
}
