//! Straight-through Gumbel-Softmax sampling.
//!
//! Forward values are exact one-hot vectors chosen by the argmax of the
//! perturbed logits `(logits + g) / tau`; gradients flow through the relaxed
//! `softmax((logits + g) / tau)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GumbelSampler {
    tau: f64,
    noise: bool,
    rng: ChaCha8Rng,
}

/// Result of one straight-through draw on plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct StSample {
    pub index: usize,
    pub onehot: Vec<f64>,
    pub soft: Vec<f64>,
}

impl GumbelSampler {
    pub fn new(tau: f64, noise: bool, seed: u64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
        }
        Ok(GumbelSampler {
            tau,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Noise-free sampler: argmax forward, `softmax(logits / tau)` backward.
    pub fn deterministic(tau: f64) -> Result<Self> {
        Self::new(tau, false, 0)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn noise_enabled(&self) -> bool {
        self.noise
    }

    pub fn set_noise(&mut self, on: bool) {
        self.noise = on;
    }

    /// One Gumbel(0, 1) draw per entry, or zeros with noise disabled.
    pub fn draw_noise(&mut self, n: usize) -> Vec<f64> {
        if !self.noise {
            return vec![0.0; n];
        }
        (0..n)
            .map(|_| {
                let mut u: f64 = self.rng.random();
                while u <= 0.0 {
                    u = self.rng.random();
                }
                -(-u.ln()).ln()
            })
            .collect()
    }

    fn perturb(&self, logits: &[f64], noise: &[f64]) -> Vec<f64> {
        logits
            .iter()
            .zip(noise)
            .map(|(l, g)| (l + g) / self.tau)
            .collect()
    }

    pub fn sample(&mut self, logits: &[f64], mask: Option<&[bool]>) -> Result<StSample> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("gumbel_st_sample"));
        }
        let noise = self.draw_noise(logits.len());
        let perturbed = self.perturb(logits, &noise);
        let soft = ops::softmax(&perturbed, mask)?;
        let index = ops::argmax(&perturbed, mask)?;
        Ok(StSample {
            index,
            onehot: ops::one_hot(logits.len(), index),
            soft,
        })
    }

    /// Records a straight-through draw on the tape. Returns the one-hot
    /// variable (forward hard, backward soft) and the chosen index.
    pub fn sample_on_tape(&mut self, tape: &mut Tape, logits: Var, mask: Option<&[bool]>) -> Result<(Var, usize)> {
        let n = tape.width(logits);
        let noise = self.draw_noise(n);
        let perturbed = if self.noise {
            let g = tape.vector(noise)?;
            tape.add(logits, g)?
        } else {
            logits
        };
        let perturbed = if self.tau == 1.0 {
            perturbed
        } else {
            tape.scale(perturbed, 1.0 / self.tau)?
        };
        let soft = tape.softmax(perturbed, mask)?;
        let index = ops::argmax(tape.value(perturbed), mask)?;
        let st = tape.straight_through(soft, ops::one_hot(n, index))?;
        Ok((st, index))
    }
}
