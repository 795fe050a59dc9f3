//! Push-sum estimates of every agent's multiplier and policy parameters.
//!
//! Agent `i` keeps intermediates `μ̆^i_j`, `θ̆^i_j` and a weight `p_i`. One
//! mixing round with a column-stochastic `W` gives
//!
//! ```text
//! p_i ← Σ_l w_il p_l        μ̂^i_j = Σ_l w_il μ̆^l_j / p_i
//! ```
//!
//! and an injection of a fresh update `Δ_j` gives
//!
//! ```text
//! μ̆^i_j ← Σ_l w_il μ̆^l_j + w_ij N Δ_j
//! ```
//!
//! which keeps `(1/N) Σ_i μ̆^i_j` equal to the true `μ_j`. The correction term
//! is only present when `w_ij > 0`, that is when `i` receives from `j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WeightMatrix;

pub const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateBank {
    pub version: u32,
    pub p: Vec<f64>,
    /// `breve_mu[i][j] = μ̆^i_j`.
    pub breve_mu: Vec<Vec<f64>>,
    /// `breve_theta[i][j] = θ̆^i_j`.
    pub breve_theta: Vec<Vec<Vec<f64>>>,
    pub hat_mu: Vec<Vec<f64>>,
    pub hat_theta: Vec<Vec<Vec<f64>>>,
}

impl EstimateBank {
    /// `p = 1`, everything else zero.
    pub fn new(n: usize, dims: &[usize]) -> Self {
        assert_eq!(dims.len(), n, "one parameter dimension per agent");
        let zeros_theta: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
        Self {
            version: BANK_FORMAT_VERSION,
            p: vec![1.0; n],
            breve_mu: vec![vec![0.0; n]; n],
            breve_theta: vec![zeros_theta.clone(); n],
            hat_mu: vec![vec![0.0; n]; n],
            hat_theta: vec![zeros_theta; n],
        }
    }

    pub fn num_agents(&self) -> usize {
        self.p.len()
    }

    fn check_dim(&self, w: &WeightMatrix) -> Result<()> {
        if w.dim() != self.num_agents() {
            return Err(Error::Protocol(format!(
                "weight matrix is {0}x{0}, bank has {1} agents",
                w.dim(),
                self.num_agents()
            )));
        }
        Ok(())
    }

    /// `p ← W p`. Fails if any weight becomes non-positive.
    pub fn advance_weights(&mut self, w: &WeightMatrix) -> Result<()> {
        self.check_dim(w)?;
        let p = w.mul_vec(&self.p);
        if let Some(i) = p.iter().position(|&x| !(x > 0.0)) {
            return Err(Error::Protocol(format!(
                "push-sum weight of agent {} is {}; every learning graph needs self-loops",
                i + 1,
                p[i]
            )));
        }
        self.p = p;
        Ok(())
    }

    /// `μ̂ = W μ̆ / p` with the current `p`.
    pub fn refresh_mu_hat(&mut self, w: &WeightMatrix) -> Result<()> {
        self.check_dim(w)?;
        let n = self.num_agents();
        for i in 0..n {
            for j in 0..n {
                let mixed: f64 = w
                    .senders(i)
                    .iter()
                    .map(|&l| w.get(i, l) * self.breve_mu[l][j])
                    .sum();
                self.hat_mu[i][j] = mixed / self.p[i];
            }
        }
        Ok(())
    }

    /// `θ̂ = W θ̆ / p` with the current `p`.
    pub fn refresh_theta_hat(&mut self, w: &WeightMatrix) -> Result<()> {
        self.check_dim(w)?;
        let n = self.num_agents();
        for i in 0..n {
            for j in 0..n {
                let out = &mut self.hat_theta[i][j];
                out.iter_mut().for_each(|x| *x = 0.0);
                for &l in w.senders(i) {
                    let wil = w.get(i, l);
                    for (o, &b) in out.iter_mut().zip(&self.breve_theta[l][j]) {
                        *o += wil * b;
                    }
                }
                let pi = self.p[i];
                out.iter_mut().for_each(|x| *x /= pi);
            }
        }
        Ok(())
    }

    /// A full round: advance `p`, then recompute both hat tables.
    pub fn pushsum_ratio_step(&mut self, w: &WeightMatrix) -> Result<()> {
        self.advance_weights(w)?;
        self.refresh_mu_hat(w)?;
        self.refresh_theta_hat(w)
    }

    /// Mixes `μ̆` with `W` and injects `N Δ_j` scaled by `w_ij`.
    pub fn inject_mu(&mut self, w: &WeightMatrix, delta: &[f64]) -> Result<()> {
        self.check_dim(w)?;
        let n = self.num_agents();
        if delta.len() != n {
            return Err(Error::Contract("one multiplier delta per agent".into()));
        }
        let nf = n as f64;
        let next: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let mixed: f64 = w
                            .senders(i)
                            .iter()
                            .map(|&l| w.get(i, l) * self.breve_mu[l][j])
                            .sum();
                        mixed + w.get(i, j) * nf * delta[j]
                    })
                    .collect()
            })
            .collect();
        self.breve_mu = next;
        Ok(())
    }

    pub fn inject_theta(&mut self, w: &WeightMatrix, delta: &[Vec<f64>]) -> Result<()> {
        self.check_dim(w)?;
        let n = self.num_agents();
        if delta.len() != n {
            return Err(Error::Contract("one parameter delta per agent".into()));
        }
        let nf = n as f64;
        let mut next = self.breve_theta.clone();
        for (i, row) in next.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                if delta[j].len() != out.len() {
                    return Err(Error::Contract(format!(
                        "parameter delta for agent {} has the wrong length",
                        j + 1
                    )));
                }
                out.iter_mut().for_each(|x| *x = 0.0);
                for &l in w.senders(i) {
                    let wil = w.get(i, l);
                    for (o, &b) in out.iter_mut().zip(&self.breve_theta[l][j]) {
                        *o += wil * b;
                    }
                }
                let wij = w.get(i, j);
                if wij > 0.0 {
                    for (o, &d) in out.iter_mut().zip(&delta[j]) {
                        *o += wij * nf * d;
                    }
                }
            }
        }
        self.breve_theta = next;
        Ok(())
    }

    /// `(1/N) Σ_i μ̆^i_j` for each `j`.
    pub fn breve_mu_mean(&self) -> Vec<f64> {
        let n = self.num_agents();
        (0..n)
            .map(|j| self.breve_mu.iter().map(|row| row[j]).sum::<f64>() / n as f64)
            .collect()
    }

    /// `(1/N) Σ_i θ̆^i_j` for each `j`.
    pub fn breve_theta_mean(&self) -> Vec<Vec<f64>> {
        let n = self.num_agents();
        (0..n)
            .map(|j| {
                let mut acc = vec![0.0; self.breve_theta[0][j].len()];
                for row in &self.breve_theta {
                    for (a, &b) in acc.iter_mut().zip(&row[j]) {
                        *a += b;
                    }
                }
                acc.iter_mut().for_each(|x| *x /= n as f64);
                acc
            })
            .collect()
    }

    pub fn mass(&self) -> f64 {
        self.p.iter().sum()
    }

    /// `(1/N²) Σ_{i,j} |μ̂^i_j − μ_j|`.
    pub fn mu_consensus_error(&self, mu: &[f64]) -> f64 {
        let n = self.num_agents() as f64;
        let total: f64 = self
            .hat_mu
            .iter()
            .flat_map(|row| row.iter().zip(mu).map(|(h, m)| (h - m).abs()))
            .sum();
        total / (n * n)
    }

    /// `(1/N²) Σ_{i,j} ‖θ̂^i_j − θ_j‖²`.
    pub fn theta_consensus_error(&self, theta: &[Vec<f64>]) -> f64 {
        let n = self.num_agents() as f64;
        let total: f64 = self
            .hat_theta
            .iter()
            .flat_map(|row| {
                row.iter().zip(theta).map(|(h, t)| {
                    h.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
            })
            .sum();
        total / (n * n)
    }

    pub fn max_abs_mu_hat(&self) -> f64 {
        self.hat_mu
            .iter()
            .flatten()
            .fold(0.0_f64, |m, &x| m.max(x.abs()))
    }
}
