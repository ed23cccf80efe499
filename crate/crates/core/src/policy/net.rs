//! One-hidden-layer tanh network mapping positional token features to logits.
//!
//! Features are a one-hot of each of the last `min(4, len)` tokens (slot `j`
//! holds the token `j` positions from the end) followed by a one-hot of the
//! step index. Parameter layout: `W1 [hidden × input]`, `b1 [hidden]`,
//! `W2 [vocab × hidden]`, `b2 [vocab]`, all row-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mdp::State;

const CONTEXT_WINDOW: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetInit {
    Zeros,
    /// Uniform in `[-scale, scale]`.
    Random {
        seed: u64,
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub vocab: usize,
    pub horizon: usize,
    pub hidden: usize,
}

pub(crate) struct Forward {
    pub logits: Vec<f64>,
    hidden: Vec<f64>,
    active: Vec<usize>,
}

impl NetShape {
    pub fn new(vocab: usize, horizon: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("tiny net needs at least one hidden unit"));
        }
        Ok(Self { vocab, horizon, hidden })
    }

    pub fn input_dim(&self) -> usize {
        CONTEXT_WINDOW * self.vocab + self.horizon + 1
    }

    pub fn num_params(&self) -> usize {
        let (i, h, v) = (self.input_dim(), self.hidden, self.vocab);
        h * i + h + v * h + v
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let (i, h, v) = (self.input_dim(), self.hidden, self.vocab);
        let b1 = h * i;
        let w2 = b1 + h;
        let b2 = w2 + v * h;
        (b1, w2, b2)
    }

    pub(crate) fn init_params(&self, init: NetInit) -> Vec<f64> {
        match init {
            NetInit::Zeros => vec![0.0; self.num_params()],
            NetInit::Random { seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..self.num_params()).map(|_| rng.gen_range(-scale..=scale)).collect()
            }
        }
    }

    /// Indices of the nonzero (unit) features.
    fn active_features(&self, state: &State) -> Vec<usize> {
        let tokens = state.tokens();
        let mut active: Vec<usize> = tokens
            .iter()
            .rev()
            .take(CONTEXT_WINDOW)
            .enumerate()
            .map(|(j, &t)| j * self.vocab + t as usize)
            .collect();
        active.push(CONTEXT_WINDOW * self.vocab + state.depth().min(self.horizon));
        active
    }

    pub(crate) fn forward(&self, params: &[f64], state: &State) -> Forward {
        let input = self.input_dim();
        let (b1, w2, b2) = self.offsets();
        let active = self.active_features(state);
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|k| {
                let z = params[b1 + k] + active.iter().map(|&i| params[k * input + i]).sum::<f64>();
                z.tanh()
            })
            .collect();
        let logits = (0..self.vocab)
            .map(|v| {
                let row = &params[w2 + v * self.hidden..w2 + (v + 1) * self.hidden];
                params[b2 + v] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        Forward { logits, hidden, active }
    }

    /// Vector-Jacobian product of the logits at `state` with `dlogits`.
    pub(crate) fn backward(&self, params: &[f64], state: &State, dlogits: &[f64], grad: &mut [f64]) {
        let input = self.input_dim();
        let (b1, w2, b2) = self.offsets();
        let fwd = self.forward(params, state);
        let mut dhidden = vec![0.0; self.hidden];
        for (v, &d) in dlogits.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[b2 + v] += d;
            for k in 0..self.hidden {
                grad[w2 + v * self.hidden + k] += d * fwd.hidden[k];
                dhidden[k] += params[w2 + v * self.hidden + k] * d;
            }
        }
        for k in 0..self.hidden {
            let dz = dhidden[k] * (1.0 - fwd.hidden[k] * fwd.hidden[k]);
            grad[b1 + k] += dz;
            for &i in &fwd.active {
                grad[k * input + i] += dz;
            }
        }
    }

    pub(crate) fn forward_on_tape<'t>(&self, tape: &'t Tape, params: &[Var<'t>], state: &State) -> Vec<Var<'t>> {
        let input = self.input_dim();
        let (b1, w2, b2) = self.offsets();
        let active = self.active_features(state);
        let hidden: Vec<Var<'t>> = (0..self.hidden)
            .map(|k| {
                let mut terms = vec![params[b1 + k]];
                terms.extend(active.iter().map(|&i| params[k * input + i]));
                tape.sum(&terms).tanh()
            })
            .collect();
        (0..self.vocab)
            .map(|v| {
                let mut terms = vec![params[b2 + v]];
                terms.extend((0..self.hidden).map(|k| params[w2 + v * self.hidden + k] * hidden[k]));
                tape.sum(&terms)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_logits() {
        let shape = NetShape::new(3, 2, 5).unwrap();
        let params = shape.init_params(NetInit::Zeros);
        let f = shape.forward(&params, &State::prompt(vec![0, 1, 2, 1, 0]));
        assert_eq!(f.logits, vec![0.0; 3]);
    }

    #[test]
    fn features_distinguish_depth() {
        let shape = NetShape::new(3, 2, 5).unwrap();
        let a = shape.active_features(&State::prompt(vec![1]));
        let b = shape.active_features(&State::prompt(vec![0]).appended(1));
        assert_ne!(a, b);
        assert!(a.iter().chain(&b).all(|&i| i < shape.input_dim()));
    }
}
