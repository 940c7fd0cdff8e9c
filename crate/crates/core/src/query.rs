//! Query generation: information gain, CMA-ES, and CMA-ES with medoid-based
//! information gain.

use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::Belief;
use crate::choice::{dot, FeatureVector, Item, Query, Ranking, WeightVector};
use crate::cma::{CmaState, RankedPopulation};
use crate::error::{check_dim, Error, Result};
use crate::pool::{Bounds, FeaturePool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "ig")]
    InfoGain,
    #[serde(rename = "cma-es")]
    CmaEs,
    #[serde(rename = "cma-es-ig")]
    CmaEsIg,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::InfoGain, StrategyKind::CmaEs, StrategyKind::CmaEsIg];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::InfoGain => "ig",
            StrategyKind::CmaEs => "cma-es",
            StrategyKind::CmaEsIg => "cma-es-ig",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::InfoGain => "IG",
            StrategyKind::CmaEs => "CMA-ES",
            StrategyKind::CmaEsIg => "CMA-ES-IG",
        }
    }

    pub fn uses_cma(&self) -> bool {
        !matches!(self, StrategyKind::InfoGain)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ig" | "infogain" | "info-gain" => Ok(StrategyKind::InfoGain),
            "cma-es" | "cmaes" | "cma" => Ok(StrategyKind::CmaEs),
            "cma-es-ig" | "cmaes-ig" | "cma-ig" => Ok(StrategyKind::CmaEsIg),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Items per query, `|Q|`.
    pub query_size: usize,
    /// Candidates considered per query, `D`.
    pub candidates: usize,
    /// Posterior samples used by the information-gain estimate.
    pub posterior_samples: usize,
    pub sigma0: f64,
    /// Rationality assumed when scoring information gain.
    pub beta: f64,
    /// Search box; `None` uses the pool's bounds.
    pub bounds: Option<Bounds>,
    /// Replace every generated vector by its nearest unused pool item.
    pub snap_to_pool: bool,
    /// CMA-ES-IG only: update the optimizer with all `D` candidates ranked by
    /// the current estimate instead of the user's `K` ranked items.
    pub surrogate_rank: bool,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            query_size: 4,
            candidates: 1000,
            posterior_samples: 100,
            sigma0: 0.5,
            beta: 1.0,
            bounds: None,
            snap_to_pool: false,
            surrogate_rank: false,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.query_size < 2 {
            return Err(Error::InvalidArgument(format!("query size must be >= 2, got {}", self.query_size)));
        }
        if self.candidates < self.query_size {
            return Err(Error::InvalidArgument(format!(
                "candidate count {} is smaller than the query size {}",
                self.candidates, self.query_size
            )));
        }
        if self.posterior_samples == 0 {
            return Err(Error::InvalidArgument("posterior sample count must be >= 1".into()));
        }
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(Error::InvalidArgument("sigma0 must be positive".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument("beta must be finite and >= 0".into()));
        }
        if let Some(b) = &self.bounds {
            check_dim(dim, b.dim())?;
            if !b.is_proper() {
                return Err(Error::InvalidArgument("bounds need low < high in every dimension".into()));
            }
        }
        Ok(())
    }
}

/// Sample-based information gain of the first choice from `items`:
///
/// `(1/M) sum_m sum_i P(i|w_m) log2(M P(i|w_m) / sum_j P(i|w_j))`
pub fn information_gain(items: &[FeatureVector], omegas: &[WeightVector], beta: f64) -> Result<f64> {
    if omegas.is_empty() {
        return Err(Error::InvalidArgument("need at least one posterior sample".into()));
    }
    if items.is_empty() {
        return Ok(0.0);
    }
    let dim = items[0].dim();
    for f in items {
        check_dim(dim, f.dim())?;
    }
    for w in omegas {
        check_dim(dim, w.dim())?;
    }
    let k = items.len();
    let mut logits = vec![0.0; omegas.len() * k];
    for (m, w) in omegas.iter().enumerate() {
        for (i, f) in items.iter().enumerate() {
            logits[m * k + i] = beta * dot(w.as_slice(), f.as_slice());
        }
    }
    Ok(IgScratch::default().evaluate(&logits, omegas.len(), k))
}

#[derive(Default)]
struct IgScratch {
    probs: Vec<f64>,
    col: Vec<f64>,
}

impl IgScratch {
    /// `logits` is `m x k`, row-major.
    fn evaluate(&mut self, logits: &[f64], m: usize, k: usize) -> f64 {
        self.probs.resize(m * k, 0.0);
        self.col.clear();
        self.col.resize(k, 0.0);
        for row in 0..m {
            let l = &logits[row * k..(row + 1) * k];
            let p = &mut self.probs[row * k..(row + 1) * k];
            crate::choice::softmax_into(l, p);
            for (c, v) in self.col.iter_mut().zip(p.iter()) {
                *c += v;
            }
        }
        let mf = m as f64;
        let mut total = 0.0;
        for row in 0..m {
            for (i, &p) in self.probs[row * k..(row + 1) * k].iter().enumerate() {
                if p > 0.0 {
                    total += p * (mf * p / self.col[i]).log2();
                }
            }
        }
        total / mf
    }
}

/// Greedy query construction over `candidates`, scoring each extension by
/// [`information_gain`]. A single item carries no information, so the seed
/// item is open: the construction is repeated from each of the
/// [`GREEDY_STARTS`] candidates whose reward varies most across `omegas`, and
/// the best result is kept. Ties go to the lowest index.
pub fn greedy_information_gain(
    candidates: &[FeatureVector],
    omegas: &[WeightVector],
    beta: f64,
    k: usize,
) -> Result<Vec<usize>> {
    if k > candidates.len() {
        return Err(Error::InvalidArgument(format!("cannot pick {k} items from {} candidates", candidates.len())));
    }
    if omegas.is_empty() {
        return Err(Error::InvalidArgument("need at least one posterior sample".into()));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let dim = candidates[0].dim();
    let m = omegas.len();
    // utilities[c * m + j] = beta * w_j . x_c
    let mut utilities = vec![0.0; candidates.len() * m];
    for (c, f) in candidates.iter().enumerate() {
        check_dim(dim, f.dim())?;
        for (j, w) in omegas.iter().enumerate() {
            utilities[c * m + j] = beta * dot(w.as_slice(), f.as_slice());
        }
    }

    let spread = |c: usize| {
        let u = &utilities[c * m..(c + 1) * m];
        let mean = u.iter().sum::<f64>() / m as f64;
        u.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
    };
    let mut order: Vec<(f64, usize)> = (0..candidates.len()).map(|c| (spread(c), c)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut scratch = IgScratch::default();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for &(_, start) in order.iter().take(GREEDY_STARTS) {
        let chosen = greedy_from(start, &utilities, m, candidates.len(), k);
        let ig = subset_information_gain(&chosen, &utilities, m, &mut scratch);
        if best.as_ref().is_none_or(|(b, _)| ig > *b) {
            best = Some((ig, chosen));
        }
    }
    Ok(best.map(|(_, c)| c).unwrap_or_default())
}

/// Number of seed items tried by [`greedy_information_gain`], taken in order
/// of decreasing reward variance.
pub const GREEDY_STARTS: usize = 4;

fn greedy_from(start: usize, utilities: &[f64], m: usize, n: usize, k: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    let mut taken = vec![false; n];
    taken[start] = true;
    let mut ext = Extension::default();
    while chosen.len() < k {
        ext.prepare(&chosen, utilities, m);
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for c in 0..n {
            if taken[c] {
                continue;
            }
            let ig = ext.score(&utilities[c * m..(c + 1) * m]);
            if ig > best.0 {
                best = (ig, c);
            }
        }
        taken[best.1] = true;
        chosen.push(best.1);
    }
    chosen
}

/// Scores `chosen + {c}` for many `c` without recomputing the softmax over
/// `chosen`. Uses `sum_i p log p = sum_i p u_i - logsumexp(u)` so each
/// posterior sample costs one `exp` and one `ln`.
#[derive(Default)]
struct Extension {
    w: usize,
    m: usize,
    // Per sample: max chosen utility, sum of shifted exps, sum of exp * u.
    shift: Vec<f64>,
    sum: Vec<f64>,
    weighted: Vec<f64>,
    // Shifted exps of the chosen items, m x w row-major.
    exps: Vec<f64>,
    col: Vec<f64>,
}

impl Extension {
    fn prepare(&mut self, chosen: &[usize], utilities: &[f64], m: usize) {
        let w = chosen.len();
        self.w = w;
        self.m = m;
        self.shift.clear();
        self.sum.clear();
        self.weighted.clear();
        self.exps.clear();
        for j in 0..m {
            let shift = chosen.iter().map(|&c| utilities[c * m + j]).fold(f64::NEG_INFINITY, f64::max);
            let (mut sum, mut weighted) = (0.0, 0.0);
            for &c in chosen {
                let u = utilities[c * m + j];
                let e = (u - shift).exp();
                self.exps.push(e);
                sum += e;
                weighted += e * u;
            }
            self.shift.push(shift);
            self.sum.push(sum);
            self.weighted.push(weighted);
        }
    }

    fn score(&mut self, extra: &[f64]) -> f64 {
        let (w, m) = (self.w, self.m);
        self.col.clear();
        self.col.resize(w + 1, 0.0);
        let mut neg_entropy = 0.0;
        for j in 0..m {
            let u = extra[j];
            let shift = self.shift[j];
            let (scale, e, top) =
                if u <= shift { (1.0, (u - shift).exp(), shift) } else { ((shift - u).exp(), 1.0, u) };
            let total = self.sum[j] * scale + e;
            let inv = 1.0 / total;
            for (c, x) in self.col.iter_mut().zip(&self.exps[j * w..(j + 1) * w]) {
                *c += x * scale * inv;
            }
            self.col[w] += e * inv;
            neg_entropy += (self.weighted[j] * scale + e * u) * inv - top - total.ln();
        }
        let spread: f64 = self.col.iter().filter(|&&c| c > 0.0).map(|c| c * c.ln()).sum();
        (neg_entropy - spread) / (m as f64 * std::f64::consts::LN_2) + (m as f64).log2()
    }
}

fn subset_information_gain(chosen: &[usize], utilities: &[f64], m: usize, scratch: &mut IgScratch) -> f64 {
    let k = chosen.len();
    let mut logits = vec![0.0; m * k];
    for (j, row) in logits.chunks_exact_mut(k).enumerate() {
        for (slot, &c) in row.iter_mut().zip(chosen) {
            *slot = utilities[c * m + j];
        }
    }
    scratch.evaluate(&logits, m, k)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in values.enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

/// k-medoids under Euclidean distance: greedy BUILD followed by PAM swaps
/// until no swap lowers the total distance. Returns sorted indices.
pub fn select_medoids<P: AsRef<[f64]>>(points: &[P], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot pick {k} medoids from {n} points")));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let dim = points[0].as_ref().len();
    for p in points {
        check_dim(dim, p.as_ref().len())?;
    }
    let dist = DistanceMatrix::new(points);

    // BUILD
    let mut medoids = Vec::with_capacity(k);
    let first = argmax((0..n).map(|i| -dist.row(i).iter().sum::<f64>()));
    medoids.push(first);
    let mut nearest: Vec<f64> = dist.row(first).to_vec();
    while medoids.len() < k {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for cand in 0..n {
            if medoids.contains(&cand) {
                continue;
            }
            let gain: f64 = dist.row(cand).iter().zip(&nearest).map(|(d, n)| (n - d).max(0.0)).sum();
            if gain > best.0 {
                best = (gain, cand);
            }
        }
        medoids.push(best.1);
        for (n, d) in nearest.iter_mut().zip(dist.row(best.1)) {
            *n = n.min(*d);
        }
    }

    // SWAP
    let mut first_dist = vec![0.0; n];
    let mut second_dist = vec![0.0; n];
    let mut owner = vec![0usize; n];
    for _ in 0..100 {
        for o in 0..n {
            let (mut d1, mut d2, mut own) = (f64::INFINITY, f64::INFINITY, 0);
            for (slot, &med) in medoids.iter().enumerate() {
                let d = dist.get(o, med);
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                    own = slot;
                } else if d < d2 {
                    d2 = d;
                }
            }
            first_dist[o] = d1;
            second_dist[o] = d2;
            owner[o] = own;
        }
        let mut best = (-1e-12, usize::MAX, usize::MAX);
        for cand in 0..n {
            if medoids.contains(&cand) {
                continue;
            }
            let row = dist.row(cand);
            // Removing nothing, adding cand: shared part of every swap delta.
            let mut base = 0.0;
            let mut removal = vec![0.0; k];
            for o in 0..n {
                let d = row[o];
                if d < first_dist[o] {
                    base += d - first_dist[o];
                } else {
                    removal[owner[o]] += d.min(second_dist[o]) - first_dist[o];
                }
            }
            for (slot, r) in removal.iter().enumerate() {
                let delta = base + r;
                if delta < best.0 {
                    best = (delta, slot, cand);
                }
            }
        }
        if best.1 == usize::MAX {
            break;
        }
        medoids[best.1] = best.2;
    }
    medoids.sort_unstable();
    Ok(medoids)
}

struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    fn new<P: AsRef<[f64]>>(points: &[P]) -> Self {
        let n = points.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let a = points[i].as_ref();
            for j in (i + 1)..n {
                let b = points[j].as_ref();
                let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self { n, data }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Per-session query generator state.
#[derive(Debug, Clone)]
pub struct QueryStrategy {
    config: StrategyConfig,
    bounds: Bounds,
    cma: Option<CmaState>,
    pool: Arc<FeaturePool>,
}

impl QueryStrategy {
    pub fn new(config: StrategyConfig, pool: Arc<FeaturePool>) -> Result<Self> {
        config.validate(pool.dim())?;
        let bounds = config.bounds.clone().unwrap_or_else(|| pool.bounds().clone());
        let cma = if config.kind.uses_cma() {
            let lambda = if config.surrogate_rank && config.kind == StrategyKind::CmaEsIg {
                config.candidates
            } else {
                config.query_size
            };
            let state = CmaState::new(pool.dim(), config.sigma0, Some(lambda))?;
            // Start at the origin unless the search box excludes it.
            if bounds.contains(&vec![0.0; pool.dim()]) {
                Some(state)
            } else {
                let centre: Vec<f64> = bounds.low().iter().zip(bounds.high()).map(|(l, h)| 0.5 * (l + h)).collect();
                Some(state.with_mean(&centre)?)
            }
        } else {
            None
        };
        Ok(Self { config, bounds, cma, pool })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn cma(&self) -> Option<&CmaState> {
        self.cma.as_ref()
    }

    pub fn pool(&self) -> &Arc<FeaturePool> {
        &self.pool
    }

    pub fn next_query<R: Rng + ?Sized>(&self, belief: &Belief, rng: &mut R) -> Result<Query> {
        check_dim(self.pool.dim(), belief.dim())?;
        match self.config.kind {
            StrategyKind::InfoGain => self.next_query_ig(belief, rng),
            StrategyKind::CmaEs => self.next_query_cma(rng),
            StrategyKind::CmaEsIg => self.next_query_cma_ig(rng),
        }
    }

    fn next_query_ig<R: Rng + ?Sized>(&self, belief: &Belief, rng: &mut R) -> Result<Query> {
        let k = self.config.query_size;
        if self.pool.len() < k {
            return Err(Error::Pool(format!("pool has {} items but queries need {k}", self.pool.len())));
        }
        let d = self.config.candidates.min(self.pool.len());
        let picks: Vec<usize> = index::sample(rng, self.pool.len(), d).into_vec();
        let candidates: Vec<FeatureVector> = picks.iter().map(|&i| self.pool.items()[i].features.clone()).collect();
        let omegas = belief.sample(self.config.posterior_samples, rng);
        let chosen = greedy_information_gain(&candidates, &omegas, self.config.beta, k)?;
        Query::new(chosen.into_iter().map(|c| self.pool.items()[picks[c]].to_item()).collect())
    }

    fn sample_clipped<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let cma = self.cma.as_ref().ok_or_else(|| Error::InvalidArgument("strategy has no CMA-ES state".into()))?;
        Ok(cma
            .sample_population(n, rng)?
            .into_iter()
            .map(|x| {
                let mut v: Vec<f64> = x.iter().copied().collect();
                self.bounds.clip(&mut v);
                v
            })
            .collect())
    }

    fn next_query_cma<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Query> {
        let samples = self.sample_clipped(self.config.query_size, rng)?;
        self.build_query(samples, "s")
    }

    fn next_query_cma_ig<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Query> {
        let samples = self.sample_clipped(self.config.candidates, rng)?;
        let chosen = select_medoids(&samples, self.config.query_size)?;
        let labelled: Vec<(usize, Vec<f64>)> = chosen.into_iter().map(|i| (i, samples[i].clone())).collect();
        if self.config.snap_to_pool {
            self.build_query(labelled.into_iter().map(|(_, v)| v).collect(), "c")
        } else {
            let generation = self.cma.as_ref().map_or(0, |c| c.generation());
            Query::new(
                labelled
                    .into_iter()
                    .map(|(i, v)| Ok(Item::new(format!("g{generation}-c{i}"), FeatureVector::new(v)?)))
                    .collect::<Result<_>>()?,
            )
        }
    }

    fn build_query(&self, vectors: Vec<Vec<f64>>, tag: &str) -> Result<Query> {
        if self.config.snap_to_pool {
            if self.pool.len() < vectors.len() {
                return Err(Error::Pool(format!(
                    "pool has {} items but queries need {}",
                    self.pool.len(),
                    vectors.len()
                )));
            }
            let mut used: Vec<usize> = Vec::with_capacity(vectors.len());
            for v in &vectors {
                let idx = self.pool.nearest_excluding(v, |i| used.contains(&i))?;
                used.push(idx);
            }
            Query::new(used.into_iter().map(|i| self.pool.items()[i].to_item()).collect())
        } else {
            let generation = self.cma.as_ref().map_or(0, |c| c.generation());
            Query::new(
                vectors
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| Ok(Item::new(format!("g{generation}-{tag}{i}"), FeatureVector::new(v)?)))
                    .collect::<Result<_>>()?,
            )
        }
    }

    /// Feeds the user's ranking back into the optimizer. The belief update
    /// itself belongs to the caller; `belief` must already include it.
    pub fn feedback(&mut self, query: &Query, ranking: &Ranking, belief: &Belief) -> Result<()> {
        ranking.check_for(query)?;
        let Some(cma) = self.cma.as_ref() else {
            return Ok(());
        };
        let population = if self.config.surrogate_rank && self.config.kind == StrategyKind::CmaEsIg {
            self.surrogate_population(cma, belief)?
        } else {
            if query.len() != cma.population_size() {
                return Err(Error::PopulationMismatch { expected: cma.population_size(), found: query.len() });
            }
            RankedPopulation::new(
                ranking
                    .order()
                    .iter()
                    .map(|&i| DVector::from_column_slice(query.items()[i].features.as_slice()))
                    .collect(),
            )?
        };
        self.cma = Some(cma.update(&population)?);
        Ok(())
    }

    fn surrogate_population(&self, cma: &CmaState, belief: &Belief) -> Result<RankedPopulation> {
        // Deterministic in the belief: the candidates are redrawn from a
        // stream keyed on the generation counter.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed ^ cma.generation());
        let estimate = belief.estimate();
        let mut samples = self.sample_clipped(cma.population_size(), &mut rng)?;
        samples.sort_by(|a, b| dot(estimate.as_slice(), b).total_cmp(&dot(estimate.as_slice(), a)));
        RankedPopulation::from_rows(&samples)
    }
}
