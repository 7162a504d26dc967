//! Shared fixtures for the benchmarks.

use latrec::eval::RankedQuery;
use latrec::model::{init_factors, Dims};
use latrec::synth::{generate, GenSpec, Regime};
use latrec::train::TrainingData;
use latrec::{Dataset, FactorState, ModelConfig, ModelKind, PriorParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A generated dataset with a cold-started LAT state and priors.
pub struct GibbsFixture {
    pub data: TrainingData,
    pub state: FactorState,
    pub priors: PriorParams,
}

pub fn gibbs_fixture(users: usize, items: usize, density: f64) -> GibbsFixture {
    let spec = GenSpec::for_regime(Regime::Mixed, users, items, 3, 2, 2, density, 7);
    let (ds, _) = generate(&spec).expect("valid spec");
    let config = ModelConfig::new(ModelKind::Lat, 2, 2, 7).expect("valid config");
    let priors = initial_priors(&ds, &config);
    let dims = Dims {
        num_users: ds.num_users,
        num_items: ds.num_items,
        num_facets: ds.num_facets,
        global_dim: 2,
        local_dim: 2,
    };
    let state = init_factors(&config, &priors, dims, &ds.user_features, &ds.item_features);
    GibbsFixture {
        data: TrainingData::new(&ds).expect("valid dataset"),
        state,
        priors,
    }
}

fn initial_priors(ds: &Dataset, config: &ModelConfig) -> PriorParams {
    let mut p = PriorParams::initial(ds.num_facets, ds.user_feature_dim, ds.item_feature_dim, config.local_dim);
    p.var_obs = 0.25;
    p
}

/// `n` random rankings of `len` items with about `rate` relevant.
pub fn rankings(n: usize, len: usize, rate: f64, seed: u64) -> Vec<RankedQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|q| RankedQuery {
            user: q,
            facet: 0,
            ranking: (0..len).map(|j| (j, rng.random::<f64>() < rate)).collect(),
        })
        .collect()
}
