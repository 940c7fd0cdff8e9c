//! Particle approximation of the posterior over reward weights.
//!
//! The prior is uniform on the unit ball. After every ranking the particle set
//! is redrawn from the full posterior with a random-walk Metropolis-Hastings
//! chain that starts at the previous posterior mean.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::choice::{dot, plackett_luce_log_likelihood, ChoiceModel, Query, Ranking, WeightVector};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Standard deviation of the isotropic Gaussian proposal, per coordinate.
    pub proposal_scale: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub particles: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { proposal_scale: 0.1, burn_in: 500, thinning: 10, particles: 100 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.proposal_scale.is_finite() && self.proposal_scale > 0.0) {
            return Err(Error::InvalidArgument("proposal scale must be positive".into()));
        }
        if self.thinning == 0 || self.particles == 0 {
            return Err(Error::InvalidArgument("thinning and particle count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub query: Query,
    pub ranking: Ranking,
}

/// Posterior over `w` given every ranking observed so far.
#[derive(Debug, Clone)]
pub struct Belief {
    dim: usize,
    model: ChoiceModel,
    config: SamplerConfig,
    history: Vec<Observation>,
    particles: Vec<WeightVector>,
    // Features of every observation laid out best-first, back to back.
    ordered_features: Vec<f64>,
    stage_sizes: Vec<usize>,
}

/// Uniform draw from the `dim`-dimensional unit ball.
pub fn sample_unit_ball<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dot(&v, &v).sqrt();
    let radius = rng.random::<f64>().powf(1.0 / dim as f64);
    let scale = if norm > 0.0 { radius / norm } else { 0.0 };
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

impl Belief {
    /// Uniform prior over the unit ball, represented by `config.particles`
    /// independent draws.
    pub fn uniform<R: Rng + ?Sized>(
        dim: usize,
        model: ChoiceModel,
        config: SamplerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        config.validate()?;
        let particles =
            (0..config.particles).map(|_| WeightVector::new(sample_unit_ball(dim, rng))).collect::<Result<_>>()?;
        Ok(Self {
            dim,
            model,
            config,
            history: Vec::new(),
            particles,
            ordered_features: Vec::new(),
            stage_sizes: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model(&self) -> ChoiceModel {
        self.model
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn history(&self) -> &[Observation] {
        &self.history
    }

    pub fn particles(&self) -> &[WeightVector] {
        &self.particles
    }

    /// Unnormalized log posterior; `-inf` outside the unit ball.
    pub fn log_posterior(&self, w: &[f64]) -> f64 {
        if dot(w, w) > 1.0 {
            return f64::NEG_INFINITY;
        }
        let beta = self.model.beta();
        let mut logits = [0.0f64; 16];
        let mut heap = Vec::new();
        let mut offset = 0;
        let mut total = 0.0;
        for &k in &self.stage_sizes {
            let buf: &mut [f64] = if k <= logits.len() {
                &mut logits[..k]
            } else {
                heap.resize(k, 0.0);
                &mut heap[..]
            };
            for (slot, row) in buf.iter_mut().zip(self.ordered_features[offset..].chunks_exact(self.dim)) {
                *slot = beta * dot(w, row);
            }
            total += plackett_luce_log_likelihood(buf);
            offset += k * self.dim;
        }
        total
    }

    /// Records a ranking and redraws the particles from the new posterior.
    pub fn observe<R: Rng + ?Sized>(&mut self, query: &Query, ranking: &Ranking, rng: &mut R) -> Result<()> {
        check_dim(self.dim, query.dim())?;
        ranking.check_for(query)?;
        for &i in ranking.order() {
            self.ordered_features.extend_from_slice(query.items()[i].features.as_slice());
        }
        self.stage_sizes.push(query.len());
        self.history.push(Observation { query: query.clone(), ranking: ranking.clone() });
        self.refresh(rng)
    }

    fn refresh<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let step = self.config.proposal_scale;
        let mut current = self.estimate().into_inner();
        let mut current_lp = self.log_posterior(&current);
        if !current_lp.is_finite() {
            current.iter_mut().for_each(|x| *x = 0.0);
            current_lp = self.log_posterior(&current);
        }
        let mut proposal = vec![0.0; self.dim];
        let total = self.config.burn_in + self.config.particles * self.config.thinning;
        let mut particles = Vec::with_capacity(self.config.particles);
        for iter in 0..total {
            for (p, c) in proposal.iter_mut().zip(&current) {
                let z: f64 = StandardNormal.sample(rng);
                *p = c + step * z;
            }
            let lp = self.log_posterior(&proposal);
            let u: f64 = rng.random();
            if lp.is_finite() && u.ln() < lp - current_lp {
                std::mem::swap(&mut current, &mut proposal);
                current_lp = lp;
            }
            if iter >= self.config.burn_in && (iter - self.config.burn_in + 1).is_multiple_of(self.config.thinning) {
                particles.push(WeightVector::new(current.clone())?);
            }
        }
        self.particles = particles;
        Ok(())
    }

    /// `n` weight samples; without replacement while `n <= M`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<WeightVector> {
        let m = self.particles.len();
        if n <= m {
            index::sample(rng, m, n).into_iter().map(|i| self.particles[i].clone()).collect()
        } else {
            (0..n).map(|_| self.particles[rng.random_range(0..m)].clone()).collect()
        }
    }

    /// Posterior mean of the particle set.
    pub fn estimate(&self) -> WeightVector {
        let mut mean = vec![0.0; self.dim];
        for p in &self.particles {
            for (m, x) in mean.iter_mut().zip(p.as_slice()) {
                *m += x;
            }
        }
        let n = self.particles.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        WeightVector::new(mean).unwrap_or_else(|_| WeightVector::zeros(self.dim))
    }

    #[cfg(test)]
    pub(crate) fn with_particles(mut self, particles: Vec<WeightVector>) -> Self {
        self.particles = particles;
        self
    }
}
