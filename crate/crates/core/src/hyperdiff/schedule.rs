use serde::{Deserialize, Serialize};

use crate::numkit::Tensor;
use crate::{Error, Result};

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 1e-2;

/// Linear DDPM schedule. Index 0 of every table holds the `t = 0`
/// convention (`ᾱ_0 = 1`); steps run `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let tm1 = (steps - 1) as f64;
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        let mut beta_tilde = vec![0.0; steps + 1];
        for t in 1..=steps {
            let tf = t as f64;
            beta[t] = (BETA_START * (steps as f64 - tf) + BETA_END * (tf - 1.0)) / tm1;
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            beta_tilde[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
        }
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t]
    }

    /// `(√ᾱ_t, √(1-ᾱ_t))`, the forward-process mixing coefficients.
    pub fn mix(&self, t: usize) -> (f64, f64) {
        (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt())
    }

    /// Signal and noise scales `(g_t, s_t)` of the ancestral sampler's state
    /// when it starts from `N(0, 1)` and every clean estimate is exact:
    /// `Ω_t = g_t·x0 + s_t·ξ`. Index 0 is unused.
    pub fn sampler_marginals(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(1.0, 0.0); self.steps + 1];
        let (mut g, mut s2) = (0.0, 1.0);
        out[self.steps] = (g, 1.0);
        for t in (2..=self.steps).rev() {
            let ab = self.alpha_bar[t];
            let c1 = self.alpha_bar[t - 1].sqrt() * self.beta[t] / (1.0 - ab);
            let c2 = self.alpha[t].sqrt() * (1.0 - self.alpha_bar[t - 1]) / (1.0 - ab);
            g = c1 + c2 * g;
            s2 = c2 * c2 * s2 + self.beta_tilde[t];
            out[t - 1] = (g, s2.sqrt());
        }
        out
    }

    /// `Ω_t = √ᾱ_t·x0 + √(1-ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        eps.ensure_shape(x0.shape())?;
        let (a, b) = self.mix(t);
        let mut out = x0.scaled(a);
        out.axpy(b, eps);
        Ok(out)
    }
}

/// Interleaved sinusoidal encoding of the step index.
pub fn pos_encode(t: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("positional encoding needs an even positive width, got {d}")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let arg = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Ok(out)
}
