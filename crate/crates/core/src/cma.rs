//! CMA-ES with rank-one and rank-mu covariance updates and cumulative
//! step-size adaptation.
//!
//! The optimizer never evaluates an objective itself: callers sample a
//! population, order it best-first by whatever means they have (here usually
//! a person's ranking) and hand it back through [`CmaState::update`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

const EIGEN_FLOOR: f64 = 1e-12;

/// Default population size `4 + floor(3 ln d)`.
pub fn default_population_size(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

/// Strategy constants derived from `(d, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyParams {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    /// `E ||N(0, I)||`
    pub chi_n: f64,
}

impl StrategyParams {
    pub fn new(dim: usize, lambda: usize) -> Self {
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu).map(|i| (lambda as f64 / 2.0 + 0.5).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Self { lambda, mu, weights, mu_eff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n }
    }
}

/// Search distribution `N(m, sigma^2 C)` plus evolution paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaState {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    sigma: f64,
    path_sigma: DVector<f64>,
    path_c: DVector<f64>,
    generation: u64,
    params: StrategyParams,
}

/// Points ordered best-first by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPopulation {
    points: Vec<DVector<f64>>,
}

impl RankedPopulation {
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).ok_or_else(|| Error::InvalidArgument("empty population".into()))?;
        for p in &points {
            check_dim(dim, p.len())?;
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("population"));
            }
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().map(|r| DVector::from_column_slice(r)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }
}

impl CmaState {
    /// Origin-centred, identity-covariance start. `lambda = None` picks the
    /// default population size.
    pub fn new(dim: usize, sigma0: f64, lambda: Option<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma0 must be positive, got {sigma0}")));
        }
        let lambda = lambda.unwrap_or_else(|| default_population_size(dim));
        if lambda < 2 {
            return Err(Error::InvalidArgument(format!("population size must be >= 2, got {lambda}")));
        }
        Ok(Self {
            mean: DVector::zeros(dim),
            covariance: DMatrix::identity(dim, dim),
            sigma: sigma0,
            path_sigma: DVector::zeros(dim),
            path_c: DVector::zeros(dim),
            generation: 0,
            params: StrategyParams::new(dim, lambda),
        })
    }

    pub fn with_mean(mut self, mean: &[f64]) -> Result<Self> {
        check_dim(self.dim(), mean.len())?;
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("mean"));
        }
        self.mean = DVector::from_column_slice(mean);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn path_sigma(&self) -> &DVector<f64> {
        &self.path_sigma
    }

    pub fn path_c(&self) -> &DVector<f64> {
        &self.path_c
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn params(&self) -> &StrategyParams {
        &self.params
    }

    pub fn population_size(&self) -> usize {
        self.params.lambda
    }

    /// `n` independent draws from `N(m, sigma^2 C)`.
    pub fn sample_population<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let chol = self.covariance.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        let lower = chol.l();
        let dim = self.dim();
        Ok((0..n)
            .map(|_| {
                let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
                &self.mean + (&lower * z) * self.sigma
            })
            .collect())
    }

    /// One generation of recombination, path cumulation, step-size and
    /// covariance adaptation.
    pub fn update(&self, population: &RankedPopulation) -> Result<CmaState> {
        let p = &self.params;
        if population.len() != p.lambda {
            return Err(Error::PopulationMismatch { expected: p.lambda, found: population.len() });
        }
        check_dim(self.dim(), population.points()[0].len())?;
        let n = self.dim() as f64;

        let steps: Vec<DVector<f64>> =
            population.points()[..p.mu].iter().map(|x| (x - &self.mean) / self.sigma).collect();
        let mut y_w = DVector::zeros(self.dim());
        for (w, y) in p.weights.iter().zip(&steps) {
            y_w.axpy(*w, y, 1.0);
        }
        let mean = &self.mean + &y_w * self.sigma;

        let inv_sqrt = self.inverse_sqrt_covariance();
        let path_sigma = &self.path_sigma * (1.0 - p.c_sigma)
            + (&inv_sqrt * &y_w) * (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
        let ps_norm = path_sigma.norm();
        let sigma = self.sigma * ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();

        let generation = self.generation + 1;
        let stall_threshold = (1.4 + 2.0 / (n + 1.0)) * p.chi_n;
        let correction = (1.0 - (1.0 - p.c_sigma).powf(2.0 * generation as f64)).sqrt();
        let h_sigma = if ps_norm / correction < stall_threshold { 1.0 } else { 0.0 };

        let path_c = &self.path_c * (1.0 - p.c_c) + &y_w * (h_sigma * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt());
        let delta_h = (1.0 - h_sigma) * p.c_c * (2.0 - p.c_c);

        let weight_sum: f64 = p.weights.iter().sum();
        let mut covariance = &self.covariance * (1.0 - p.c_1 - p.c_mu * weight_sum + p.c_1 * delta_h);
        covariance += (&path_c * path_c.transpose()) * p.c_1;
        for (w, y) in p.weights.iter().zip(&steps) {
            covariance += (y * y.transpose()) * (p.c_mu * w);
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;

        if !(sigma.is_finite() && sigma > 0.0)
            || mean.iter().any(|x| !x.is_finite())
            || covariance.iter().any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("CMA-ES update"));
        }

        let mut next =
            CmaState { mean, covariance, sigma, path_sigma, path_c, generation, params: self.params.clone() };
        next.regularize();
        Ok(next)
    }

    fn inverse_sqrt_covariance(&self) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(self.covariance.clone());
        let inv_sqrt_vals = eig.eigenvalues.map(|v| 1.0 / v.max(EIGEN_FLOOR).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt_vals) * eig.eigenvectors.transpose()
    }

    fn regularize(&mut self) {
        let min_eig = SymmetricEigen::new(self.covariance.clone()).eigenvalues.min();
        if min_eig <= EIGEN_FLOOR {
            let shift = EIGEN_FLOOR + (-min_eig).max(0.0);
            log::warn!(
                "covariance lost positive definiteness at generation {} (min eigenvalue {min_eig:e}); adding {shift:e} I",
                self.generation
            );
            for i in 0..self.dim() {
                self.covariance[(i, i)] += shift;
            }
        }
    }
}
