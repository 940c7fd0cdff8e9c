//! Session registry, pool resolution and restore-from-logs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use prefopt_core::{Bounds, FeaturePool};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ErrorCode, Result, ServiceError};
use crate::events::{now_ms, read_log, truncate_torn_tail, EventSink, LogHeader, LOG_VERSION};
use crate::session::{pool_digest, PoolSource, Session, SessionConfig};

/// Pool used when a create request names neither `dim` nor `dataset`.
#[derive(Debug, Clone, PartialEq)]
pub enum DefaultPool {
    Synthetic { dim: usize },
    Dataset(String),
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub default_pool: DefaultPool,
    /// Seed of every synthetic pool; fixed so restarts see the same items.
    pub pool_seed: u64,
    /// One `<session id>.jsonl` per session. `None` keeps sessions in memory.
    pub log_dir: Option<PathBuf>,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self { default_pool: DefaultPool::Synthetic { dim: 8 }, pool_seed: 0, log_dir: None }
    }
}

pub type SessionHandle = Arc<Mutex<Session>>;

pub struct SessionManager {
    config: ManagerConfig,
    datasets: HashMap<String, Arc<FeaturePool>>,
    synthetic: Mutex<HashMap<(usize, usize, u64), Arc<FeaturePool>>>,
    sessions: RwLock<HashMap<String, SessionHandle>>,
    counter: AtomicU64,
}

/// Upper bound on synthetic pool dimension and size accepted over the API.
const MAX_DIM: usize = 1024;
const MAX_POOL: usize = 1_000_000;

impl SessionManager {
    pub fn new(config: ManagerConfig, datasets: HashMap<String, Arc<FeaturePool>>) -> Result<Self> {
        if let DefaultPool::Dataset(id) = &config.default_pool {
            if !datasets.contains_key(id) {
                return Err(ServiceError::new(
                    ErrorCode::UnknownDataset,
                    format!("default dataset {id} is not loaded"),
                ));
            }
        }
        if let Some(dir) = &config.log_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            config,
            datasets,
            synthetic: Mutex::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.datasets.keys().cloned().collect();
        ids.sort();
        ids
    }

    fn source_for(&self, config: &SessionConfig) -> Result<PoolSource> {
        match (config.dim, &config.dataset) {
            (Some(_), Some(_)) => {
                Err(ServiceError::new(ErrorCode::InvalidConfig, "give either dim or dataset, not both"))
            }
            (Some(dim), None) => {
                Ok(PoolSource::Synthetic { dim, count: config.pool_size, seed: self.config.pool_seed })
            }
            (None, Some(id)) => Ok(PoolSource::Dataset { id: id.clone() }),
            (None, None) => Ok(match &self.config.default_pool {
                DefaultPool::Synthetic { dim } => {
                    PoolSource::Synthetic { dim: *dim, count: config.pool_size, seed: self.config.pool_seed }
                }
                DefaultPool::Dataset(id) => PoolSource::Dataset { id: id.clone() },
            }),
        }
    }

    fn resolve(&self, source: &PoolSource) -> Result<Arc<FeaturePool>> {
        match source {
            PoolSource::Dataset { id } => self
                .datasets
                .get(id)
                .cloned()
                .ok_or_else(|| ServiceError::new(ErrorCode::UnknownDataset, format!("unknown dataset {id}"))),
            &PoolSource::Synthetic { dim, count, seed } => {
                if dim == 0 || dim > MAX_DIM || count == 0 || count > MAX_POOL {
                    return Err(ServiceError::new(
                        ErrorCode::InvalidConfig,
                        format!("synthetic pool needs 1 <= dim <= {MAX_DIM} and 1 <= pool_size <= {MAX_POOL}"),
                    ));
                }
                let mut cache = self.synthetic.lock().expect("pool cache poisoned");
                if let Some(p) = cache.get(&(dim, count, seed)) {
                    return Ok(p.clone());
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bounds = Bounds::cube(dim, -1.0, 1.0)?;
                let pool = Arc::new(FeaturePool::generate_synthetic(count, bounds, &mut rng)?);
                cache.insert((dim, count, seed), pool.clone());
                Ok(pool)
            }
        }
    }

    fn fresh_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let salt: u32 = rand::rng().random();
        format!("s{:x}-{n}-{salt:08x}", now_ms())
    }

    pub fn create(&self, config: SessionConfig) -> Result<(String, SessionHandle)> {
        let source = self.source_for(&config)?;
        let pool = self.resolve(&source)?;
        let id = self.fresh_id();
        let seed = config.seed.unwrap_or_else(|| rand::rng().random());
        let header = LogHeader {
            version: LOG_VERSION,
            session_id: id.clone(),
            created_ms: now_ms(),
            seed,
            config,
            pool: source,
            pool_digest: pool_digest(&pool),
        };
        // Validate before touching the disk so a bad request leaves no file.
        let mut session = Session::start(header.clone(), pool, EventSink::Memory)?;
        if let Some(dir) = &self.config.log_dir {
            let sink = EventSink::create(dir.join(format!("{id}.jsonl")), &header)?;
            session.set_sink(sink);
        }
        let handle = Arc::new(Mutex::new(session));
        self.sessions.write().expect("session map poisoned").insert(id.clone(), handle.clone());
        log::info!("created session {id}");
        Ok((id, handle))
    }

    pub fn get(&self, id: &str) -> Result<SessionHandle> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::new(ErrorCode::UnknownSession, format!("unknown session {id}")))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rebuilds one session from its log without registering it.
    pub fn replay_file(&self, path: &Path) -> Result<Session> {
        let (header, events) = read_log(path)?;
        let pool = self.resolve(&header.pool)?;
        truncate_torn_tail(path)?;
        let sink = EventSink::reopen(path)?;
        Session::replay(header, &events, pool, sink)
    }

    /// Loads every `*.jsonl` in the log directory. Logs that fail to replay
    /// are skipped with an error message; the count of restored sessions is
    /// returned.
    pub fn restore(&self) -> Result<usize> {
        let Some(dir) = &self.config.log_dir else { return Ok(0) };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut restored = 0;
        for path in paths {
            match self.replay_file(&path) {
                Ok(session) => {
                    let id = session.id().to_string();
                    self.sessions.write().expect("session map poisoned").insert(id, Arc::new(Mutex::new(session)));
                    restored += 1;
                }
                Err(e) => log::error!("skipping {}: {e}", path.display()),
            }
        }
        Ok(restored)
    }
}
