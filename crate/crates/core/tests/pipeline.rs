use std::sync::Arc;

use prefopt_core::belief::sample_unit_ball;
use prefopt_core::bench::{self, BenchmarkConfig, Metric};
use prefopt_core::{
    Belief, Bounds, ChoiceModel, FeaturePool, Query, QueryStrategy, Ranking, SamplerConfig, StrategyConfig,
    StrategyKind, WeightVector,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick_sampler() -> SamplerConfig {
    SamplerConfig { burn_in: 100, thinning: 2, particles: 50, ..Default::default() }
}

#[test]
fn pool_file_drives_a_dataset_session() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = FeaturePool::generate_synthetic(300, Bounds::cube(4, -1.0, 1.0).unwrap(), &mut rng).unwrap();
    pool.save(&path).unwrap();
    let pool = Arc::new(FeaturePool::load(&path).unwrap());

    let star = WeightVector::new(vec![0.5, 0.5, 0.5, 0.5]).unwrap();
    let model = ChoiceModel::default();
    let mut belief = Belief::uniform(4, model, quick_sampler(), &mut rng).unwrap();
    for kind in StrategyKind::ALL {
        let mut cfg = StrategyConfig::new(kind);
        cfg.query_size = 3;
        cfg.candidates = 100;
        cfg.snap_to_pool = true;
        let mut strategy = QueryStrategy::new(cfg, pool.clone()).unwrap();
        for _ in 0..3 {
            let q = strategy.next_query(&belief, &mut rng).unwrap();
            assert_eq!(q.len(), 3);
            for item in q.items() {
                assert_eq!(pool.get(&item.id).unwrap().features, item.features);
            }
            let r = model.sample_ranking(&star, &q, &mut rng).unwrap();
            belief.observe(&q, &r, &mut rng).unwrap();
            strategy.feedback(&q, &r, &belief).unwrap();
        }
    }
    assert_eq!(belief.history().len(), 9);
}

#[test]
fn surrogate_rank_updates_with_all_candidates() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool = Arc::new(FeaturePool::generate_synthetic(100, Bounds::cube(3, -1.0, 1.0).unwrap(), &mut rng).unwrap());
    let mut cfg = StrategyConfig::new(StrategyKind::CmaEsIg);
    cfg.candidates = 40;
    cfg.surrogate_rank = true;
    let mut s = QueryStrategy::new(cfg, pool).unwrap();
    assert_eq!(s.cma().unwrap().population_size(), 40);
    let belief = Belief::uniform(3, ChoiceModel::default(), quick_sampler(), &mut rng).unwrap();
    let q = s.next_query(&belief, &mut rng).unwrap();
    assert_eq!(q.len(), 4);
    s.feedback(&q, &Ranking::identity(4), &belief).unwrap();
    assert_eq!(s.cma().unwrap().generation(), 1);
}

#[test]
fn benchmark_is_paired_and_reproducible() {
    let cfg = BenchmarkConfig {
        dims: vec![3],
        users: 4,
        iterations: 5,
        candidates: 40,
        posterior_samples: 20,
        pool_size: 500,
        sampler: quick_sampler(),
        seed: 9,
        ..Default::default()
    };
    // Same user for every strategy, different users across indices.
    assert_eq!(cfg.user(3, 1).unwrap(), cfg.user(3, 1).unwrap());
    assert_ne!(cfg.user(3, 1).unwrap(), cfg.user(3, 2).unwrap());

    let a = bench::run_benchmark(&cfg).unwrap();
    let b = bench::run_benchmark(&cfg).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/out");
    bench::write_report_files(&a, &out).unwrap();
    let auc = std::fs::read_to_string(out.join("auc.csv")).unwrap();
    let mut lines = auc.lines();
    assert_eq!(lines.next(), Some("strategy,d,metric,auc"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * Metric::ALL.len());
    for row in rows {
        let v: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(v.is_finite());
    }
}

#[test]
fn seed_changes_results() {
    let base = BenchmarkConfig {
        dims: vec![2],
        strategies: vec![StrategyKind::CmaEs],
        users: 2,
        iterations: 3,
        pool_size: 100,
        sampler: quick_sampler(),
        ..Default::default()
    };
    let other = BenchmarkConfig { seed: 1, ..base.clone() };
    assert_ne!(bench::run_benchmark(&base).unwrap(), bench::run_benchmark(&other).unwrap());
}

fn query_from(rows: &[Vec<f64>]) -> Query {
    Query::new(
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                prefopt_core::Item::new(format!("x{i}"), prefopt_core::FeatureVector::new(r.clone()).unwrap())
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Particles never leave the unit ball and stay at log-posterior > -inf,
    // whatever the history.
    #[test]
    fn particles_stay_in_support(seed in 0u64..1000, dim in 1usize..5, rounds in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ChoiceModel::new(2.0).unwrap();
        let mut b = Belief::uniform(dim, model, quick_sampler(), &mut rng).unwrap();
        let star = WeightVector::new(sample_unit_ball(dim, &mut rng)).unwrap();
        for _ in 0..rounds {
            let rows: Vec<Vec<f64>> = (0..3).map(|_| sample_unit_ball(dim, &mut rng).iter().map(|x| 3.0 * x).collect()).collect();
            let q = query_from(&rows);
            let r = model.sample_ranking(&star, &q, &mut rng).unwrap();
            b.observe(&q, &r, &mut rng).unwrap();
            prop_assert_eq!(b.particles().len(), 50);
            for p in b.particles() {
                prop_assert!(p.norm() <= 1.0);
                prop_assert!(b.log_posterior(p.as_slice()).is_finite());
            }
        }
    }

    #[test]
    fn queries_stay_in_bounds(seed in 0u64..1000, kind in 0usize..3, lo in -3.0f64..0.0, width in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = Bounds::cube(3, lo, lo + width).unwrap();
        let pool = Arc::new(FeaturePool::generate_synthetic(60, bounds.clone(), &mut rng).unwrap());
        let mut cfg = StrategyConfig::new(StrategyKind::ALL[kind]);
        cfg.candidates = 30;
        cfg.sigma0 = 2.0;
        let s = QueryStrategy::new(cfg, pool).unwrap();
        let b = Belief::uniform(3, ChoiceModel::default(), quick_sampler(), &mut rng).unwrap();
        let q = s.next_query(&b, &mut rng).unwrap();
        prop_assert_eq!(q.len(), 4);
        for item in q.items() {
            prop_assert!(bounds.contains(item.features.as_slice()));
        }
    }
}
