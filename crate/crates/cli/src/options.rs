//! Flag structs, config-file merging and manifests.
//!
//! A config file (TOML or JSON) uses the long flag names as keys. Values given
//! on the command line win over the file; anything left unset falls back to
//! the built-in default. A `manifest.json` written by a previous run is also a
//! valid config file.

use std::path::{Path, PathBuf};

use clap::Args;
use prefopt_core::bench::{default_sigma_grid, BenchmarkConfig};
use prefopt_core::{SamplerConfig, StrategyKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values. Exit code 1.
    Usage(String),
    /// Anything that goes wrong while running. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Simulation settings shared by `bench` and `sweep`.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimOptions {
    /// Strategies to run, comma separated: ig, cma-es, cma-es-ig.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<StrategyKind>>,
    /// Feature dimensions, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Simulated users per (strategy, d) cell.
    #[arg(long)]
    pub users: Option<usize>,
    /// Rankings per user.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Items per query (K).
    #[arg(long)]
    pub query_size: Option<usize>,
    /// Candidates sampled per query (D).
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Posterior samples used by information gain (M).
    #[arg(long)]
    pub posterior_samples: Option<usize>,
    /// Choice-model rationality, shared by the simulated user and the learner.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Initial CMA-ES step size.
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// Items in each synthetic pool.
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Update CMA-ES with all D candidates ranked by the current estimate.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub surrogate_rank: Option<bool>,
    /// Belief particles.
    #[arg(long)]
    pub particles: Option<usize>,
    /// Metropolis-Hastings burn-in steps.
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Metropolis-Hastings steps between kept particles.
    #[arg(long)]
    pub thinning: Option<usize>,
    /// Metropolis-Hastings proposal standard deviation.
    #[arg(long)]
    pub proposal_scale: Option<f64>,
    /// Master seed; every user, strategy and d draws from its own stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl SimOptions {
    pub fn to_benchmark(&self, defaults: &BenchmarkConfig) -> BenchmarkConfig {
        let d = defaults;
        BenchmarkConfig {
            dims: self.dims.clone().unwrap_or_else(|| d.dims.clone()),
            strategies: self.strategies.clone().unwrap_or_else(|| d.strategies.clone()),
            users: self.users.unwrap_or(d.users),
            iterations: self.iterations.unwrap_or(d.iterations),
            query_size: self.query_size.unwrap_or(d.query_size),
            candidates: self.candidates.unwrap_or(d.candidates),
            posterior_samples: self.posterior_samples.unwrap_or(d.posterior_samples),
            beta: self.beta.unwrap_or(d.beta),
            sigma0: self.sigma0.unwrap_or(d.sigma0),
            pool_size: self.pool_size.unwrap_or(d.pool_size),
            surrogate_rank: self.surrogate_rank.unwrap_or(d.surrogate_rank),
            sampler: SamplerConfig {
                proposal_scale: self.proposal_scale.unwrap_or(d.sampler.proposal_scale),
                burn_in: self.burn_in.unwrap_or(d.sampler.burn_in),
                thinning: self.thinning.unwrap_or(d.sampler.thinning),
                particles: self.particles.unwrap_or(d.sampler.particles),
            },
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    /// Every key filled in, for manifests.
    pub fn resolved(c: &BenchmarkConfig, out: PathBuf) -> Self {
        Self {
            strategies: Some(c.strategies.clone()),
            dims: Some(c.dims.clone()),
            users: Some(c.users),
            iterations: Some(c.iterations),
            query_size: Some(c.query_size),
            candidates: Some(c.candidates),
            posterior_samples: Some(c.posterior_samples),
            beta: Some(c.beta),
            sigma0: Some(c.sigma0),
            pool_size: Some(c.pool_size),
            surrogate_rank: Some(c.surrogate_rank),
            particles: Some(c.sampler.particles),
            burn_in: Some(c.sampler.burn_in),
            thinning: Some(c.sampler.thinning),
            proposal_scale: Some(c.sampler.proposal_scale),
            seed: Some(c.seed),
            out: Some(out),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepOptions {
    #[command(flatten)]
    #[serde(flatten)]
    pub sim: SimOptions,
    /// Initial step sizes, comma separated. Defaults to 10 values spread
    /// linearly over [0.01, 1.5].
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
}

impl SweepOptions {
    pub fn grid(&self) -> Vec<f64> {
        self.sigmas.clone().unwrap_or_else(default_sigma_grid)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ServeOptions {
    /// Address to listen on.
    #[arg(long)]
    pub listen: Option<String>,
    /// Pool CSV to serve; its file stem becomes the dataset id and the
    /// default pool. Without it sessions use a synthetic pool.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Dimension of the default synthetic pool.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Seed of every synthetic pool.
    #[arg(long)]
    pub pool_seed: Option<u64>,
    /// Directory for session logs and the manifest; sessions found there are
    /// restored on startup.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PoolOptions {
    /// Feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of items.
    #[arg(long)]
    pub count: Option<usize>,
    /// Lower bound of every coordinate.
    #[arg(long, allow_hyphen_values = true)]
    pub low: Option<f64>,
    /// Upper bound of every coordinate.
    #[arg(long, allow_hyphen_values = true)]
    pub high: Option<f64>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; the pool is written to `pool.csv` inside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_config_file(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let value = if path.extension().is_some_and(|x| x == "toml") {
        let t: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(usage)?
    } else {
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(usage(format!("{}: expected a table of settings", path.display())));
    }
    Ok(value)
}

/// Overlays `flags` on the settings in `file` (if any). Unknown file keys are
/// rejected; a manifest for another command is rejected.
pub fn merge<T>(command: &str, flags: &T, file: Option<&Path>) -> CliResult<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let Some(path) = file else {
        return serde_json::from_value(serde_json::to_value(flags).map_err(usage)?).map_err(usage);
    };
    let mut from_file = read_config_file(path)?;
    if let Some(m) = from_file.get("command") {
        if m != command {
            return Err(usage(format!("{} is a manifest for `{m}`, not `{command}`", path.display())));
        }
        from_file = from_file.get("config").cloned().unwrap_or(Value::Object(Map::new()));
    }
    let known = serde_json::to_value(T::default()).map_err(usage)?;
    let known = known.as_object().expect("option structs serialize to maps");
    let mut merged = from_file.as_object().cloned().unwrap_or_default();
    for key in merged.keys() {
        if !known.contains_key(key) {
            let mut names: Vec<&String> = known.keys().collect();
            names.sort();
            return Err(usage(format!("{}: unknown key `{key}` (expected one of {names:?})", path.display())));
        }
    }
    let flags = serde_json::to_value(flags).map_err(usage)?;
    for (k, v) in flags.as_object().expect("option structs serialize to maps") {
        if !v.is_null() {
            merged.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a T,
}

pub fn write_manifest<T: Serialize>(dir: &Path, command: &str, config: &T) -> CliResult<()> {
    let m = Manifest { command, version: env!("CARGO_PKG_VERSION"), config };
    let text = serde_json::to_string_pretty(&m).map_err(runtime)?;
    std::fs::write(dir.join("manifest.json"), text + "\n")
        .map_err(|e| runtime(format!("cannot write manifest in {}: {e}", dir.display())))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create output directory {}: {e}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "users = 5\ndims = [2, 3]\nquery-size = 3\n").unwrap();
        let flags = SimOptions { users: Some(7), ..Default::default() };
        let m = merge("bench", &flags, Some(&path)).unwrap();
        assert_eq!(m.users, Some(7));
        assert_eq!(m.dims, Some(vec![2, 3]));
        assert_eq!(m.query_size, Some(3));
        assert_eq!(m.seed, None);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"query_size": 3}"#).unwrap();
        let err = merge("bench", &SimOptions::default(), Some(&path)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("query_size"));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchmarkConfig { users: 3, seed: 42, ..Default::default() };
        let opts = SweepOptions { sim: SimOptions::resolved(&cfg, "x".into()), sigmas: Some(vec![0.1, 0.2]) };
        write_manifest(dir.path(), "sweep", &opts).unwrap();
        let back: SweepOptions =
            merge("sweep", &SweepOptions::default(), Some(&dir.path().join("manifest.json"))).unwrap();
        assert_eq!(back, opts);
        assert_eq!(back.sim.to_benchmark(&BenchmarkConfig::default()), cfg);
        assert!(merge("bench", &SimOptions::default(), Some(&dir.path().join("manifest.json"))).is_err());
    }
}
