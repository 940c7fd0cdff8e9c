//! Simulated-user benchmark: metrics, episodes, paired multi-user runs and
//! the initial step-size sweep.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{Belief, SamplerConfig};
use crate::choice::{dot, ChoiceModel, Query, WeightVector};
use crate::error::{check_dim, Error, Result};
use crate::pool::{Bounds, FeaturePool};
use crate::query::{QueryStrategy, StrategyConfig, StrategyKind};

/// Derives an independent 64-bit seed from a base seed and a path of labels.
pub fn stream_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc.rotate_left(23) ^ mix(p)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedUser {
    omega_star: WeightVector,
    beta: f64,
}

impl SimulatedUser {
    /// `omega_star` must have unit norm (to 1e-12).
    pub fn new(omega_star: WeightVector, beta: f64) -> Result<Self> {
        if (omega_star.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("omega* must have unit norm, got {}", omega_star.norm())));
        }
        ChoiceModel::new(beta)?;
        Ok(Self { omega_star, beta })
    }

    /// Direction uniform on the unit sphere.
    pub fn random<R: Rng + ?Sized>(dim: usize, beta: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = dot(&v, &v).sqrt();
            if n > 1e-9 {
                let mut w: Vec<f64> = v.into_iter().map(|x| x / n).collect();
                // Renormalize once more so the norm is 1 to the last ulp or two.
                let n2 = dot(&w, &w).sqrt();
                w.iter_mut().for_each(|x| *x /= n2);
                return Self::new(WeightVector::new(w)?, beta);
            }
        }
    }

    pub fn omega_star(&self) -> &WeightVector {
        &self.omega_star
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn model(&self) -> ChoiceModel {
        ChoiceModel::new(self.beta).expect("validated on construction")
    }
}

/// Cosine similarity. A zero vector yields 0.
pub fn alignment(w_est: &WeightVector, w_star: &WeightVector) -> Result<f64> {
    check_dim(w_star.dim(), w_est.dim())?;
    let (a, b) = (w_est.norm(), w_star.norm());
    if a == 0.0 || b == 0.0 {
        log::debug!("alignment with a zero weight vector reported as 0");
        return Ok(0.0);
    }
    Ok((dot(w_est.as_slice(), w_star.as_slice()) / (a * b)).clamp(-1.0, 1.0))
}

/// Mean true reward of the query's items.
pub fn quality(query: &Query, w_star: &WeightVector) -> Result<f64> {
    check_dim(w_star.dim(), query.dim())?;
    let total: f64 = query.items().iter().map(|i| dot(w_star.as_slice(), i.features.as_slice())).sum();
    Ok(total / query.len() as f64)
}

/// True-reward gap between the pool's best item and the item the estimate
/// would pick.
pub fn regret(pool: &FeaturePool, w_est: &WeightVector, w_star: &WeightVector) -> Result<f64> {
    check_dim(pool.dim(), w_est.dim())?;
    check_dim(pool.dim(), w_star.dim())?;
    let best_true = argmax_reward(pool, w_star);
    let best_est = argmax_reward(pool, w_est);
    let r = |i: usize| dot(w_star.as_slice(), pool.items()[i].features.as_slice());
    Ok((r(best_true) - r(best_est)).max(0.0))
}

/// Index of the pool item with the highest reward under `w`; ties go to the
/// lowest index.
pub fn argmax_reward(pool: &FeaturePool, w: &WeightVector) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, item) in pool.items().iter().enumerate() {
        let r = dot(w.as_slice(), item.features.as_slice());
        if r > best.0 {
            best = (r, i);
        }
    }
    best.1
}

/// Area under a per-iteration curve, normalized by its length.
pub fn auc(curve: &[f64]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::InvalidArgument("AUC of an empty curve".into()));
    }
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Ordinary least-squares slope of `y` against `0..n`.
pub fn ols_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (v - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

/// Normal-approximation 95% interval for the mean of `values`.
pub fn mean_ci(values: &[f64]) -> Interval {
    let (mean, se) = mean_stderr(values.iter().copied());
    Interval { mean, low: mean - 1.96 * se, high: mean + 1.96 * se }
}

fn mean_stderr(values: impl ExactSizeIterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Alignment,
    Quality,
    Regret,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Alignment, Metric::Quality, Metric::Regret];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Alignment => "alignment",
            Metric::Quality => "quality",
            Metric::Regret => "regret",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub strategy: StrategyConfig,
    pub sampler: SamplerConfig,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub dim: usize,
    pub alignment: Vec<f64>,
    pub quality: Vec<f64>,
    pub regret: Vec<f64>,
}

impl EpisodeResult {
    pub fn curve(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::Alignment => &self.alignment,
            Metric::Quality => &self.quality,
            Metric::Regret => &self.regret,
        }
    }
}

/// One simulated interaction: query, simulated ranking, belief update,
/// optimizer feedback, metrics. Alignment and regret use the estimate after
/// the update; quality scores the query that was shown.
pub fn run_episode(
    config: &EpisodeConfig,
    pool: Arc<FeaturePool>,
    user: &SimulatedUser,
    seed: u64,
) -> Result<EpisodeResult> {
    let dim = pool.dim();
    check_dim(dim, user.omega_star().dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = user.model();
    let mut belief = Belief::uniform(dim, ChoiceModel::new(config.strategy.beta)?, config.sampler, &mut rng)?;
    let mut strategy = QueryStrategy::new(config.strategy.clone(), pool.clone())?;
    let mut out = EpisodeResult {
        strategy: config.strategy.kind,
        seed,
        dim,
        alignment: Vec::with_capacity(config.iterations),
        quality: Vec::with_capacity(config.iterations),
        regret: Vec::with_capacity(config.iterations),
    };
    for _ in 0..config.iterations {
        let query = strategy.next_query(&belief, &mut rng)?;
        let ranking = model.sample_ranking(user.omega_star(), &query, &mut rng)?;
        belief.observe(&query, &ranking, &mut rng)?;
        strategy.feedback(&query, &ranking, &belief)?;
        let est = belief.estimate();
        out.quality.push(quality(&query, user.omega_star())?);
        out.alignment.push(alignment(&est, user.omega_star())?);
        out.regret.push(regret(&pool, &est, user.omega_star())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub dims: Vec<usize>,
    pub strategies: Vec<StrategyKind>,
    pub users: usize,
    pub iterations: usize,
    pub query_size: usize,
    pub candidates: usize,
    pub posterior_samples: usize,
    pub beta: f64,
    pub sigma0: f64,
    pub pool_size: usize,
    pub surrogate_rank: bool,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            dims: vec![8, 16, 32],
            strategies: StrategyKind::ALL.to_vec(),
            users: 100,
            iterations: 30,
            query_size: 4,
            candidates: 1000,
            posterior_samples: 100,
            beta: 1.0,
            sigma0: 0.5,
            pool_size: 10_000,
            surrogate_rank: false,
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dims", self.dims.len()),
            ("strategies", self.strategies.len()),
            ("users", self.users),
            ("iterations", self.iterations),
            ("pool size", self.pool_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be non-empty / positive")));
            }
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument("dimensions must be >= 1".into()));
        }
        if self.pool_size < self.query_size {
            return Err(Error::InvalidArgument("pool smaller than the query size".into()));
        }
        self.sampler.validate()?;
        for &d in &self.dims {
            for &k in &self.strategies {
                self.strategy_config(k).validate(d)?;
            }
        }
        Ok(())
    }

    pub fn strategy_config(&self, kind: StrategyKind) -> StrategyConfig {
        StrategyConfig {
            kind,
            query_size: self.query_size,
            candidates: self.candidates,
            posterior_samples: self.posterior_samples,
            sigma0: self.sigma0,
            beta: self.beta,
            bounds: None,
            snap_to_pool: false,
            surrogate_rank: self.surrogate_rank,
        }
    }

    pub fn episode_config(&self, kind: StrategyKind) -> EpisodeConfig {
        EpisodeConfig { strategy: self.strategy_config(kind), sampler: self.sampler, iterations: self.iterations }
    }

    /// The synthetic pool used at dimension `dim`.
    pub fn pool(&self, dim: usize) -> Result<FeaturePool> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, &[POOL_STREAM, dim as u64]));
        FeaturePool::generate_synthetic(self.pool_size, Bounds::cube(dim, -1.0, 1.0)?, &mut rng)
    }

    /// The simulated user `index` at dimension `dim`; shared by every strategy.
    pub fn user(&self, dim: usize, index: usize) -> Result<SimulatedUser> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, &[USER_STREAM, dim as u64, index as u64]));
        SimulatedUser::random(dim, self.beta, &mut rng)
    }

    pub fn episode_seed(&self, dim: usize, index: usize) -> u64 {
        stream_seed(self.seed, &[EPISODE_STREAM, dim as u64, index as u64])
    }
}

const POOL_STREAM: u64 = 1;
const USER_STREAM: u64 = 2;
const EPISODE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub strategy: StrategyKind,
    pub dim: usize,
    pub users: usize,
    pub alignment: CurveSummary,
    pub quality: CurveSummary,
    pub regret: CurveSummary,
    /// 95% interval of the per-user OLS slope of the quality curve.
    pub quality_slope: Interval,
}

impl CellReport {
    pub fn metric(&self, metric: Metric) -> &CurveSummary {
        match metric {
            Metric::Alignment => &self.alignment,
            Metric::Quality => &self.quality,
            Metric::Regret => &self.regret,
        }
    }

    fn from_episodes(strategy: StrategyKind, dim: usize, episodes: &[EpisodeResult]) -> Result<Self> {
        let summarize = |metric: Metric| -> Result<CurveSummary> {
            let t = episodes.first().map_or(0, |e| e.curve(metric).len());
            let mut mean = Vec::with_capacity(t);
            let mut stderr = Vec::with_capacity(t);
            for i in 0..t {
                let (m, s) = mean_stderr(episodes.iter().map(|e| e.curve(metric)[i]));
                mean.push(m);
                stderr.push(s);
            }
            let auc = if t == 0 { f64::NAN } else { auc(&mean)? };
            Ok(CurveSummary { mean, stderr, auc })
        };
        let slopes: Vec<f64> = episodes.iter().map(|e| ols_slope(&e.quality)).collect();
        Ok(Self {
            strategy,
            dim,
            users: episodes.len(),
            alignment: summarize(Metric::Alignment)?,
            quality: summarize(Metric::Quality)?,
            regret: summarize(Metric::Regret)?,
            quality_slope: mean_ci(&slopes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub cells: Vec<CellReport>,
}

impl BenchmarkReport {
    pub fn cell(&self, strategy: StrategyKind, dim: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.strategy == strategy && c.dim == dim)
    }

    pub fn auc(&self, strategy: StrategyKind, dim: usize, metric: Metric) -> Option<f64> {
        self.cell(strategy, dim).map(|c| c.metric(metric).auc)
    }

    /// Columns: strategy, d, t, metric, mean, stderr. `t` counts from 1.
    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["strategy", "d", "t", "metric", "mean", "stderr"]).map_err(csv_err)?;
        for cell in &self.cells {
            for metric in Metric::ALL {
                let s = cell.metric(metric);
                for (t, (m, e)) in s.mean.iter().zip(&s.stderr).enumerate() {
                    w.write_record([
                        cell.strategy.name().to_string(),
                        cell.dim.to_string(),
                        (t + 1).to_string(),
                        metric.name().to_string(),
                        m.to_string(),
                        e.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Pool(e.to_string()))
    }

    /// Columns: strategy, d, metric, auc.
    pub fn write_auc_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["strategy", "d", "metric", "auc"]).map_err(csv_err)?;
        for cell in &self.cells {
            for metric in Metric::ALL {
                w.write_record([
                    cell.strategy.name().to_string(),
                    cell.dim.to_string(),
                    metric.name().to_string(),
                    cell.metric(metric).auc.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::Pool(e.to_string()))
    }

    /// Rows are strategies, columns are metric x dimension.
    pub fn auc_table(&self) -> String {
        let mut strategies: Vec<StrategyKind> = Vec::new();
        let mut dims: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !strategies.contains(&c.strategy) {
                strategies.push(c.strategy);
            }
            if !dims.contains(&c.dim) {
                dims.push(c.dim);
            }
        }
        let mut s = String::new();
        let cell_w = 9;
        s.push_str(&format!("{:<10}", ""));
        for metric in Metric::ALL {
            let title = match metric {
                Metric::Alignment => "Alignment",
                Metric::Quality => "Quality",
                Metric::Regret => "Regret",
            };
            s.push_str(&format!("| {:^w$}", title, w = cell_w * dims.len()));
        }
        s.push('\n');
        s.push_str(&format!("{:<10}", "Method"));
        for _ in Metric::ALL {
            s.push_str("| ");
            for d in &dims {
                s.push_str(&format!("{:^w$}", format!("d={d}"), w = cell_w));
            }
        }
        s.push('\n');
        for k in &strategies {
            s.push_str(&format!("{:<10}", k.label()));
            for metric in Metric::ALL {
                s.push_str("| ");
                for &d in &dims {
                    let v = self.auc(*k, d, metric).map_or("-".to_string(), |v| format!("{v:.3}"));
                    s.push_str(&format!("{v:^w$}", w = cell_w));
                }
            }
            s.push('\n');
        }
        s
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Pool(e.to_string())
}

/// Runs every strategy on the same users at every dimension. Episodes run in
/// parallel; the result does not depend on scheduling.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let mut cells = Vec::new();
    for &dim in &config.dims {
        let pool = Arc::new(config.pool(dim)?);
        let users: Vec<SimulatedUser> = (0..config.users).map(|u| config.user(dim, u)).collect::<Result<_>>()?;
        for &kind in &config.strategies {
            let episode = config.episode_config(kind);
            let episodes: Vec<EpisodeResult> = (0..config.users)
                .into_par_iter()
                .map(|u| run_episode(&episode, pool.clone(), &users[u], config.episode_seed(dim, u)))
                .collect::<Result<_>>()?;
            log::info!("finished {} at d={dim}", kind.name());
            cells.push(CellReport::from_episodes(kind, dim, &episodes)?);
        }
    }
    Ok(BenchmarkReport { cells })
}

/// `n` values evenly spaced over `[low, high]`.
pub fn linspace(low: f64, high: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![low],
        _ => (0..n).map(|i| low + (high - low) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn default_sigma_grid() -> Vec<f64> {
    linspace(0.01, 1.5, 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<(f64, BenchmarkReport)>,
}

impl SweepReport {
    /// Columns: sigma, strategy, d, metric, auc.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sigma", "strategy", "d", "metric", "auc"]).map_err(csv_err)?;
        for (sigma, report) in &self.points {
            for cell in &report.cells {
                for metric in Metric::ALL {
                    w.write_record([
                        sigma.to_string(),
                        cell.strategy.name().to_string(),
                        cell.dim.to_string(),
                        metric.name().to_string(),
                        cell.metric(metric).auc.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Pool(e.to_string()))
    }
}

/// Reruns the benchmark at each initial step size. Strategies without an
/// optimizer are dropped since `sigma0` does not affect them.
pub fn run_sigma_sweep(sigmas: &[f64], base: &BenchmarkConfig) -> Result<SweepReport> {
    if sigmas.is_empty() {
        return Err(Error::InvalidArgument("empty sigma grid".into()));
    }
    if let Some(bad) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidArgument(format!("sigma values must be positive, got {bad}")));
    }
    let mut config = base.clone();
    config.strategies.retain(|k| k.uses_cma());
    if config.strategies.is_empty() {
        return Err(Error::InvalidArgument("the sweep needs CMA-ES or CMA-ES-IG".into()));
    }
    let mut points = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        config.sigma0 = sigma;
        points.push((sigma, run_benchmark(&config)?));
    }
    Ok(SweepReport { points })
}

/// Writes `report` as `curves.csv` and `auc.csv` inside `dir`.
pub fn write_report_files(report: &BenchmarkReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let to_io = |e: Error| std::io::Error::other(e.to_string());
    report.write_curves_csv(std::fs::File::create(dir.join("curves.csv"))?).map_err(to_io)?;
    report.write_auc_csv(std::fs::File::create(dir.join("auc.csv"))?).map_err(to_io)?;
    Ok(())
}
