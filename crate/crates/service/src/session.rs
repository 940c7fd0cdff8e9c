//! One interactive preference-learning session: query out, ranking in.

use std::collections::HashSet;
use std::sync::Arc;

use prefopt_core::bench::{argmax_reward, stream_seed};
use prefopt_core::{
    Belief, ChoiceModel, FeaturePool, FeatureVector, Item, Media, Query, QueryStrategy, Ranking, SamplerConfig,
    StrategyConfig, StrategyKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ErrorCode, Result, ServiceError};
use crate::events::{now_ms, Event, EventPayload, EventSink, LogHeader, LoggedItem};

fn default_strategy() -> StrategyKind {
    StrategyKind::CmaEsIg
}
fn default_query_size() -> usize {
    4
}
fn default_candidates() -> usize {
    1000
}
fn default_posterior_samples() -> usize {
    100
}
fn default_sigma0() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    1.0
}
fn default_pool_size() -> usize {
    10_000
}

/// Body of `POST /sessions`. At most one of `dim` and `dataset` may be given;
/// with neither, the server's default pool is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default = "default_strategy")]
    pub strategy: StrategyKind,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default = "default_query_size")]
    pub query_size: usize,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_posterior_samples")]
    pub posterior_samples: usize,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub surrogate_rank: bool,
    /// Synthetic pools only.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SessionConfig {
    pub fn strategy_config(&self, dataset_mode: bool) -> StrategyConfig {
        StrategyConfig {
            kind: self.strategy,
            query_size: self.query_size,
            candidates: self.candidates,
            posterior_samples: self.posterior_samples,
            sigma0: self.sigma0,
            beta: self.beta,
            bounds: None,
            snap_to_pool: dataset_mode,
            surrogate_rank: self.surrogate_rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolSource {
    Synthetic { dim: usize, count: usize, seed: u64 },
    Dataset { id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: String,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<Media>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub query_id: String,
    pub items: Vec<ItemView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingAck {
    pub query_id: String,
    pub rounds: usize,
    pub estimate: Vec<f64>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestView {
    pub item: ItemView,
    pub predicted_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub strategy: StrategyKind,
    pub dim: usize,
    pub query_size: usize,
    pub pool: PoolSource,
    pub pool_size: usize,
    pub rounds: usize,
    pub events: u64,
    pub pending_query: Option<String>,
    pub favorite: Option<String>,
    pub estimate: Vec<f64>,
    pub digest: String,
}

#[derive(Debug, Clone)]
struct Pending {
    id: String,
    query: Query,
}

pub struct Session {
    id: String,
    config: SessionConfig,
    seed: u64,
    source: PoolSource,
    pool: Arc<FeaturePool>,
    belief: Belief,
    strategy: QueryStrategy,
    pending: Option<Pending>,
    ranked: HashSet<String>,
    last_ranked: Option<String>,
    displayed: HashSet<String>,
    favorite: Option<String>,
    issued: u64,
    rounds: usize,
    next_event: u64,
    sink: EventSink,
}

const INIT_STREAM: u64 = 0;
const EVENT_STREAM: u64 = 1;

/// sha256 of the pool's ids and feature bits.
pub fn pool_digest(pool: &FeaturePool) -> String {
    let mut h = Sha256::new();
    for item in pool.items() {
        h.update((item.id.len() as u64).to_le_bytes());
        h.update(item.id.as_bytes());
        for x in item.features.as_slice() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Session {
    /// Builds a fresh session. `sink` receives the header immediately when it
    /// is file-backed; pass the header it was created with.
    pub fn start(header: LogHeader, pool: Arc<FeaturePool>, sink: EventSink) -> Result<Self> {
        let dataset_mode = matches!(header.pool, PoolSource::Dataset { .. });
        let config = header.config.clone();
        let sampler = config.sampler.unwrap_or_default();
        sampler.validate().map_err(|e| ServiceError::new(ErrorCode::InvalidConfig, e.to_string()))?;
        let model =
            ChoiceModel::new(config.beta).map_err(|e| ServiceError::new(ErrorCode::InvalidConfig, e.to_string()))?;
        let strategy = QueryStrategy::new(config.strategy_config(dataset_mode), pool.clone())
            .map_err(|e| ServiceError::new(ErrorCode::InvalidConfig, e.to_string()))?;
        if config.query_size > pool.len() {
            return Err(ServiceError::new(
                ErrorCode::InvalidConfig,
                format!("query size {} exceeds the pool size {}", config.query_size, pool.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(header.seed, &[INIT_STREAM]));
        let belief = Belief::uniform(pool.dim(), model, sampler, &mut rng)?;
        Ok(Self {
            id: header.session_id,
            config,
            seed: header.seed,
            source: header.pool,
            pool,
            belief,
            strategy,
            pending: None,
            ranked: HashSet::new(),
            last_ranked: None,
            displayed: HashSet::new(),
            favorite: None,
            issued: 0,
            rounds: 0,
            next_event: 0,
            sink,
        })
    }

    /// Rebuilds a session by re-applying logged events. `sink` is where new
    /// events go afterwards.
    pub fn replay(header: LogHeader, events: &[Event], pool: Arc<FeaturePool>, sink: EventSink) -> Result<Self> {
        if pool_digest(&pool) != header.pool_digest {
            return Err(ServiceError::new(
                ErrorCode::LogCorrupt,
                format!("pool for session {} changed since the log was written", header.session_id),
            ));
        }
        let mut s = Self::start(header, pool, EventSink::Memory)?;
        for e in events {
            s.apply(e)?;
        }
        s.sink = sink;
        Ok(s)
    }

    fn apply(&mut self, event: &Event) -> Result<()> {
        if event.index != self.next_event {
            return Err(ServiceError::new(ErrorCode::LogCorrupt, "event indices out of order"));
        }
        match &event.payload {
            EventPayload::QueryIssued { query_id, items } => {
                let items = items
                    .iter()
                    .map(|i| Ok(Item::new(i.id.clone(), FeatureVector::new(i.features.clone())?)))
                    .collect::<prefopt_core::Result<Vec<_>>>()?;
                self.install_query(query_id.clone(), Query::new(items)?);
            }
            EventPayload::RankingSubmitted { query_id, order } => {
                self.check_ranking_target(Some(query_id))?;
                let ranking = Ranking::new(order.clone())?;
                self.absorb(ranking, event.rng_seed)?;
            }
            EventPayload::FavoriteSet { item_id } => {
                self.check_displayed(item_id)?;
                self.favorite = Some(item_id.clone());
            }
        }
        self.next_event += 1;
        Ok(())
    }

    fn record(&mut self, rng_seed: u64, payload: EventPayload) -> Result<()> {
        let event = Event { index: self.next_event, timestamp_ms: now_ms(), rng_seed, payload };
        self.sink.append(&event)?;
        self.next_event += 1;
        Ok(())
    }

    fn event_seed(&self) -> u64 {
        stream_seed(self.seed, &[EVENT_STREAM, self.next_event])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn strategy(&self) -> &QueryStrategy {
        &self.strategy
    }

    pub fn pool(&self) -> &Arc<FeaturePool> {
        &self.pool
    }

    pub fn favorite(&self) -> Option<&str> {
        self.favorite.as_deref()
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub(crate) fn set_sink(&mut self, sink: EventSink) {
        self.sink = sink;
    }

    pub fn log_path(&self) -> Option<&std::path::Path> {
        self.sink.path()
    }

    fn view(&self, item: &Item) -> ItemView {
        ItemView {
            id: item.id.clone(),
            features: item.features.as_slice().to_vec(),
            media: self.pool.get(&item.id).filter(|p| p.features == item.features).and_then(|p| p.media.clone()),
        }
    }

    fn install_query(&mut self, id: String, query: Query) {
        for item in query.items() {
            self.displayed.insert(item.id.clone());
        }
        self.issued += 1;
        self.pending = Some(Pending { id, query });
    }

    /// The pending query, generating and logging one if none is pending.
    pub fn current_query(&mut self) -> Result<QueryView> {
        if self.pending.is_none() {
            let seed = self.event_seed();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let query = self.strategy.next_query(&self.belief, &mut rng)?;
            let query_id = format!("q{}", self.issued);
            let items = query
                .items()
                .iter()
                .map(|i| LoggedItem { id: i.id.clone(), features: i.features.as_slice().to_vec() })
                .collect();
            self.record(seed, EventPayload::QueryIssued { query_id: query_id.clone(), items })?;
            self.install_query(query_id, query);
        }
        let p = self.pending.as_ref().expect("installed above");
        Ok(QueryView { query_id: p.id.clone(), items: p.query.items().iter().map(|i| self.view(i)).collect() })
    }

    fn check_ranking_target(&self, query_id: Option<&String>) -> Result<()> {
        match (query_id, &self.pending) {
            (Some(q), _) if self.ranked.contains(q) => {
                Err(ServiceError::new(ErrorCode::QueryAlreadyRanked, format!("query {q} was already ranked")))
            }
            // Without an explicit id, a second ranking right after the first
            // is a double submission of that query.
            (None, None) => match &self.last_ranked {
                Some(q) => {
                    Err(ServiceError::new(ErrorCode::QueryAlreadyRanked, format!("query {q} was already ranked")))
                }
                None => Err(ServiceError::new(ErrorCode::NoPendingQuery, "no query is waiting for a ranking")),
            },
            (Some(q), None) => Err(ServiceError::new(ErrorCode::UnknownQuery, format!("query {q} was never issued"))),
            (Some(q), Some(p)) if *q != p.id => {
                Err(ServiceError::new(ErrorCode::UnknownQuery, format!("query {q} is not the pending query {}", p.id)))
            }
            _ => Ok(()),
        }
    }

    fn absorb(&mut self, ranking: Ranking, seed: u64) -> Result<()> {
        let pending = self.pending.as_ref().expect("checked by caller");
        ranking.check_for(&pending.query)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut belief = self.belief.clone();
        belief.observe(&pending.query, &ranking, &mut rng)?;
        let mut strategy = self.strategy.clone();
        strategy.feedback(&pending.query, &ranking, &belief)?;
        self.belief = belief;
        self.strategy = strategy;
        let pending = self.pending.take().expect("checked by caller");
        self.ranked.insert(pending.id.clone());
        self.last_ranked = Some(pending.id);
        self.rounds += 1;
        Ok(())
    }

    /// Applies a best-first ranking (indices into the pending query's items).
    /// On any error the session is unchanged.
    pub fn submit_ranking(&mut self, order: Vec<usize>, query_id: Option<String>) -> Result<RankingAck> {
        self.check_ranking_target(query_id.as_ref())?;
        let ranking =
            Ranking::new(order.clone()).map_err(|e| ServiceError::new(ErrorCode::InvalidRanking, e.to_string()))?;
        let pending = self.pending.as_ref().expect("checked above");
        ranking.check_for(&pending.query).map_err(|e| ServiceError::new(ErrorCode::InvalidRanking, e.to_string()))?;
        let query_id = pending.id.clone();
        let seed = self.event_seed();
        // Log first: if the write fails nothing has changed.
        self.record(seed, EventPayload::RankingSubmitted { query_id: query_id.clone(), order })?;
        self.absorb(ranking, seed)?;
        Ok(RankingAck {
            query_id,
            rounds: self.rounds,
            estimate: self.belief.estimate().into_inner(),
            digest: self.digest(),
        })
    }

    fn check_displayed(&self, item_id: &str) -> Result<()> {
        if self.displayed.contains(item_id) {
            Ok(())
        } else {
            Err(ServiceError::new(
                ErrorCode::ItemNotDisplayed,
                format!("item {item_id} was never shown in this session"),
            ))
        }
    }

    pub fn set_favorite(&mut self, item_id: String) -> Result<()> {
        self.check_displayed(&item_id)?;
        self.record(0, EventPayload::FavoriteSet { item_id: item_id.clone() })?;
        self.favorite = Some(item_id);
        Ok(())
    }

    /// Pool item with the highest estimated reward; ties go to the lowest index.
    pub fn predicted_best(&self) -> BestView {
        let w = self.belief.estimate();
        let idx = argmax_reward(&self.pool, &w);
        let item = &self.pool.items()[idx];
        BestView {
            item: ItemView {
                id: item.id.clone(),
                features: item.features.as_slice().to_vec(),
                media: item.media.clone(),
            },
            predicted_reward: prefopt_core::reward(&w, &item.features).unwrap_or(f64::NAN),
        }
    }

    /// sha256 over the belief particles and the optimizer state, bit for bit.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |x: f64| h.update(x.to_bits().to_le_bytes());
        for p in self.belief.particles() {
            for &x in p.as_slice() {
                put(x);
            }
        }
        if let Some(cma) = self.strategy.cma() {
            cma.mean().iter().for_each(|&x| put(x));
            cma.covariance().iter().for_each(|&x| put(x));
            put(cma.sigma());
            cma.path_sigma().iter().for_each(|&x| put(x));
            cma.path_c().iter().for_each(|&x| put(x));
            h.update(cma.generation().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.id.clone(),
            strategy: self.config.strategy,
            dim: self.pool.dim(),
            query_size: self.config.query_size,
            pool: self.source.clone(),
            pool_size: self.pool.len(),
            rounds: self.rounds,
            events: self.next_event,
            pending_query: self.pending.as_ref().map(|p| p.id.clone()),
            favorite: self.favorite.clone(),
            estimate: self.belief.estimate().into_inner(),
            digest: self.digest(),
        }
    }
}
