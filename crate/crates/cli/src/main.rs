//! `prefopt`: benchmarks, step-size sweeps, synthetic pools and the session
//! server.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod options;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use prefopt_core::bench::{self, BenchmarkConfig};
use prefopt_core::{Bounds, FeaturePool, StrategyKind};
use prefopt_service::{DefaultPool, ManagerConfig, SessionManager};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use options::{
    ensure_dir, merge, runtime, usage, write_manifest, CliResult, PoolOptions, ServeOptions, SimOptions, SweepOptions,
};

#[derive(Debug, Parser)]
#[command(name = "prefopt", version, about = "Preference learning from rankings: simulation and serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate users ranking queries from each strategy; write curves.csv and
    /// auc.csv and print the AUC table.
    Bench {
        /// TOML or JSON file whose keys are the long flag names.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        options: SimOptions,
    },
    /// Rerun the benchmark over a grid of initial step sizes (CMA strategies
    /// only) and write sweep.csv.
    Sweep {
        /// TOML or JSON file whose keys are the long flag names.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        options: SweepOptions,
    },
    /// Serve the session API until interrupted.
    Serve {
        /// TOML or JSON file whose keys are the long flag names.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        options: ServeOptions,
    },
    /// Write a synthetic pool, uniform in a box, as pool.csv.
    Pool {
        /// TOML or JSON file whose keys are the long flag names.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        options: PoolOptions,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Bench { config, options } => cmd_bench(&options, config.as_deref()),
        Command::Sweep { config, options } => cmd_sweep(&options, config.as_deref()),
        Command::Serve { config, options } => cmd_serve(&options, config.as_deref()),
        Command::Pool { config, options } => cmd_pool(&options, config.as_deref()),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn cmd_bench(flags: &SimOptions, file: Option<&Path>) -> CliResult<()> {
    let opts = merge("bench", flags, file)?;
    let cfg = opts.to_benchmark(&BenchmarkConfig::default());
    cfg.validate().map_err(usage)?;
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("bench-out"));
    ensure_dir(&out)?;
    write_manifest(&out, "bench", &SimOptions::resolved(&cfg, out.clone()))?;
    log::info!(
        "benchmark: {} strategies x d={:?}, {} users x {} rankings",
        cfg.strategies.len(),
        cfg.dims,
        cfg.users,
        cfg.iterations
    );
    let report = bench::run_benchmark(&cfg).map_err(runtime)?;
    bench::write_report_files(&report, &out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", report.auc_table()).map_err(runtime)?;
    log::info!("wrote {}/curves.csv and {}/auc.csv", out.display(), out.display());
    Ok(())
}

fn cmd_sweep(flags: &SweepOptions, file: Option<&Path>) -> CliResult<()> {
    let opts = merge("sweep", flags, file)?;
    let defaults = BenchmarkConfig {
        dims: vec![8],
        strategies: vec![StrategyKind::CmaEs, StrategyKind::CmaEsIg],
        ..Default::default()
    };
    let cfg = opts.sim.to_benchmark(&defaults);
    cfg.validate().map_err(usage)?;
    if !cfg.strategies.iter().any(|k| k.uses_cma()) {
        return Err(usage("the sweep needs cma-es or cma-es-ig among --strategies"));
    }
    let grid = opts.grid();
    if grid.is_empty() || grid.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(usage("--sigmas must be positive numbers"));
    }
    let out = opts.sim.out.clone().unwrap_or_else(|| PathBuf::from("sweep-out"));
    ensure_dir(&out)?;
    let resolved = SweepOptions { sim: SimOptions::resolved(&cfg, out.clone()), sigmas: Some(grid.clone()) };
    write_manifest(&out, "sweep", &resolved)?;
    log::info!("sweep: {} step sizes, d={:?}, {} users", grid.len(), cfg.dims, cfg.users);
    let report = bench::run_sigma_sweep(&grid, &cfg).map_err(runtime)?;
    let path = out.join("sweep.csv");
    let file = std::fs::File::create(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    report.write_csv(file).map_err(runtime)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn cmd_pool(flags: &PoolOptions, file: Option<&Path>) -> CliResult<()> {
    let opts = merge("pool", flags, file)?;
    let resolved = PoolOptions {
        dim: Some(opts.dim.unwrap_or(8)),
        count: Some(opts.count.unwrap_or(10_000)),
        low: Some(opts.low.unwrap_or(-1.0)),
        high: Some(opts.high.unwrap_or(1.0)),
        seed: Some(opts.seed.unwrap_or(0)),
        out: Some(opts.out.clone().unwrap_or_else(|| PathBuf::from("pool-out"))),
    };
    let (dim, count) = (resolved.dim.unwrap(), resolved.count.unwrap());
    if dim == 0 || count == 0 {
        return Err(usage("--dim and --count must be at least 1"));
    }
    let bounds = Bounds::cube(dim, resolved.low.unwrap(), resolved.high.unwrap()).map_err(usage)?;
    let out = resolved.out.clone().unwrap();
    ensure_dir(&out)?;
    write_manifest(&out, "pool", &resolved)?;
    let mut rng = ChaCha8Rng::seed_from_u64(resolved.seed.unwrap());
    let pool = FeaturePool::generate_synthetic(count, bounds, &mut rng).map_err(runtime)?;
    let path = out.join("pool.csv");
    pool.save(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    log::info!("wrote {count} items of dimension {dim} to {}", path.display());
    Ok(())
}

fn cmd_serve(flags: &ServeOptions, file: Option<&Path>) -> CliResult<()> {
    let opts = merge("serve", flags, file)?;
    let resolved = ServeOptions {
        listen: Some(opts.listen.clone().unwrap_or_else(|| "127.0.0.1:8080".into())),
        dataset: opts.dataset.clone(),
        dim: Some(opts.dim.unwrap_or(8)),
        pool_seed: Some(opts.pool_seed.unwrap_or(0)),
        log_dir: Some(opts.log_dir.clone().unwrap_or_else(|| PathBuf::from("sessions"))),
    };
    let log_dir = resolved.log_dir.clone().unwrap();
    let mut datasets = HashMap::new();
    let default_pool = match &resolved.dataset {
        Some(path) => {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| usage(format!("cannot derive a dataset id from {}", path.display())))?
                .to_string();
            let pool = FeaturePool::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            log::info!("dataset {id}: {} items of dimension {}", pool.len(), pool.dim());
            datasets.insert(id.clone(), Arc::new(pool));
            DefaultPool::Dataset(id)
        }
        None => {
            let dim = resolved.dim.unwrap();
            if dim == 0 {
                return Err(usage("--dim must be at least 1"));
            }
            DefaultPool::Synthetic { dim }
        }
    };
    ensure_dir(&log_dir)?;
    write_manifest(&log_dir, "serve", &resolved)?;
    let manager = SessionManager::new(
        ManagerConfig { default_pool, pool_seed: resolved.pool_seed.unwrap(), log_dir: Some(log_dir.clone()) },
        datasets,
    )
    .map_err(runtime)?;
    let restored = manager.restore().map_err(runtime)?;
    if restored > 0 {
        log::info!("restored {restored} sessions from {}", log_dir.display());
    }
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async move {
        let addr = resolved.listen.unwrap();
        let listener =
            tokio::net::TcpListener::bind(&addr).await.map_err(|e| runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(runtime)?;
        println!("listening on http://{local}");
        std::io::stdout().flush().map_err(runtime)?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        prefopt_service::serve(listener, Arc::new(manager), shutdown).await.map_err(runtime)
    })
}
