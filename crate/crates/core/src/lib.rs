//! Preference-based reward learning and query generation.
//!
//! A user's reward is linear in item features, `r = w . phi`. Rankings over
//! small queries update a particle posterior over `w`; queries come from one
//! of three strategies (information gain, CMA-ES, or CMA-ES with a medoid
//! spread criterion). [`bench`] reproduces simulated-user experiments.

pub mod belief;
pub mod bench;
pub mod choice;
pub mod cma;
mod error;
pub mod pool;
pub mod query;

pub use belief::{Belief, Observation, SamplerConfig};
pub use choice::{reward, ChoiceModel, FeatureVector, Item, Query, Ranking, WeightVector};
pub use cma::{CmaState, RankedPopulation};
pub use error::{Error, Result};
pub use pool::{Bounds, FeaturePool, Media, PoolItem};
pub use query::{QueryStrategy, StrategyConfig, StrategyKind};
