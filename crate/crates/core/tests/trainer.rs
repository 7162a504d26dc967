use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use latrec::data::{Event, Features};
use latrec::model::{Dims, FactorState, ModelConfig, ModelKind, Presence, PriorParams};
use latrec::train::{
    complete_data_loglik, fit, m_step, write_trace, Block, GibbsSampler, SufficientStats, SweepKey, TrainOptions,
    TrainingData,
};
use latrec::{Dataset, FeatureVector};

mod common;
use common::{dataset, naive_loglik, random_features};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn fill_random(v: &mut [f64], rng: &mut ChaCha8Rng) {
    for x in v {
        *x = normal(rng);
    }
}

fn random_instance(seed: u64) -> (Dataset, FactorState, PriorParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, k, fg, fl, du, di) = (5, 4, 3, 2, 2, 2, 3);
    let mut events = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if rng.random_bool(0.5) {
                events.push(Event::new(i, j, rng.random_range(0..k), normal(&mut rng)));
            }
        }
    }
    let ds = dataset(
        m,
        n,
        k,
        events,
        random_features(&mut rng, m, du),
        random_features(&mut rng, n, di),
    );
    let mut s = FactorState::zeros(Dims {
        num_users: m,
        num_items: n,
        num_facets: k,
        global_dim: fg,
        local_dim: fl,
    });
    for b in [
        &mut s.user_facet_bias,
        &mut s.item_facet_bias,
        &mut s.user_bias,
        &mut s.item_bias,
        &mut s.user_global,
        &mut s.item_global,
        &mut s.facet_weight,
        &mut s.user_local,
        &mut s.item_local,
    ] {
        fill_random(b, &mut rng);
    }
    let mut p = PriorParams::initial(k, du, di, fl);
    for v in [
        &mut p.user_bias_coef,
        &mut p.item_bias_coef,
        &mut p.user_bias_weight,
        &mut p.item_bias_weight,
        &mut p.user_local_coef,
        &mut p.item_local_coef,
    ] {
        fill_random(v, &mut rng);
    }
    for v in [
        &mut p.var_user_facet_bias,
        &mut p.var_item_facet_bias,
        &mut p.var_user_local,
        &mut p.var_item_local,
    ] {
        for x in v.iter_mut() {
            *x = rng.random_range(0.2..2.0);
        }
    }
    p.var_user_global = rng.random_range(0.2..2.0);
    p.var_item_global = rng.random_range(0.2..2.0);
    p.var_obs = rng.random_range(0.2..2.0);
    (ds, s, p)
}

#[test]
fn loglik_matches_term_by_term_oracle() {
    for seed in 0..20 {
        let (ds, s, p) = random_instance(seed);
        let data = TrainingData::new(&ds).unwrap();
        let fast = complete_data_loglik(&s, &p, &data);
        let slow = naive_loglik(&ds, &s, &p, data.presence());
        assert_relative_eq!(fast, slow, epsilon = 1e-10, max_relative = 1e-12);
    }
}

#[test]
fn loglik_of_zero_everything_is_zero() {
    let ds = dataset(3, 2, 2, vec![], Features::default(), Features::default());
    let data = TrainingData::new(&ds).unwrap();
    let s = FactorState::zeros(Dims {
        num_users: 3,
        num_items: 2,
        num_facets: 2,
        global_dim: 2,
        local_dim: 1,
    });
    let p = PriorParams::initial(2, 0, 0, 1);
    assert_eq!(complete_data_loglik(&s, &p, &data), 0.0);
}

#[test]
fn perturbing_a_bias_changes_loglik_by_its_quadratic() {
    let ds = dataset(2, 2, 2, vec![], Features::default(), Features::default());
    let data = TrainingData::with_presence(&ds, Presence::all(2, 2, 2)).unwrap();
    let s = FactorState::zeros(Dims {
        num_users: 2,
        num_items: 2,
        num_facets: 2,
        global_dim: 1,
        local_dim: 1,
    });
    let mut p = PriorParams::initial(2, 0, 0, 1);
    p.var_user_facet_bias[1] = 0.4;
    let base = complete_data_loglik(&s, &p, &data);
    for delta in [0.1, -0.7, 2.5] {
        let mut t = s.clone();
        t.user_facet_bias[2 + 1] = delta;
        let change = complete_data_loglik(&t, &p, &data) - base;
        assert_relative_eq!(change, -delta * delta / (2.0 * 0.4), epsilon = 1e-12);
    }
}

fn dense_features(rows: &[&[f64]]) -> Features {
    Features {
        vectors: rows.iter().map(|r| FeatureVector::from_dense(r)).collect(),
        dim: rows.first().map_or(0, |r| r.len()),
    }
}

#[test]
fn m_step_recovers_exact_regressions() {
    let (m, n, k, fl) = (5, 2, 2, 2);
    let xs: [&[f64]; 5] = [
        &[1.0, 0.0, 0.5],
        &[0.0, 1.0, -1.0],
        &[1.0, 1.0, 0.0],
        &[0.3, -0.2, 1.0],
        &[-1.0, 0.4, 0.7],
    ];
    let users = dense_features(&xs);
    let mut events = Vec::new();
    for i in 0..m {
        for kk in 0..k {
            events.push(Event::new(i, i % n, kk, 0.0));
        }
    }
    let ds = dataset(m, n, k, events, users, Features::default());
    let data = TrainingData::new(&ds).unwrap();
    let du = 3;
    let g_true = [[0.5, -1.0, 2.0], [1.5, 0.0, -0.3]];
    let q_true = [0.8, -1.2];
    let big_g: Vec<f64> = (0..k * du * fl).map(|t| (t as f64 * 0.37).sin()).collect();
    let mut s = FactorState::zeros(Dims {
        num_users: m,
        num_items: n,
        num_facets: k,
        global_dim: 0,
        local_dim: fl,
    });
    s.user_bias = vec![0.3, -1.0, 0.9, 0.1, -0.4];
    for i in 0..m {
        for kk in 0..k {
            let x = xs[i];
            let a: f64 = (0..du).map(|f| g_true[kk][f] * x[f]).sum::<f64>() + q_true[kk] * s.user_bias[i];
            s.user_facet_bias[i * k + kk] = a;
            for l in 0..fl {
                s.user_local[(i * k + kk) * fl + l] = (0..du).map(|f| big_g[(kk * du + f) * fl + l] * x[f]).sum();
            }
        }
    }
    let stats = SufficientStats::from_state(&s, &data);
    let opts = TrainOptions {
        ridge_lambda: 0.0,
        ..TrainOptions::default()
    };
    let prev = PriorParams::initial(k, du, 0, fl);
    let (p, diag) = m_step(&stats, &data, &prev, &opts).unwrap();
    // the item design (no features, zero biases) is singular
    assert!(diag.max_condition.is_infinite());
    for kk in 0..k {
        for f in 0..du {
            assert_relative_eq!(p.g(kk)[f], g_true[kk][f], epsilon = 1e-8);
        }
        assert_relative_eq!(p.user_bias_weight[kk], q_true[kk], epsilon = 1e-8);
        assert_eq!(p.var_user_facet_bias[kk], opts.variance_floor);
        assert_eq!(p.var_user_local[kk], opts.variance_floor);
    }
    for (got, want) in p.user_local_coef.iter().zip(&big_g) {
        assert_relative_eq!(*got, *want, epsilon = 1e-8);
    }
}

#[test]
fn m_step_without_features_uses_raw_second_moment() {
    let events = vec![
        Event::new(0, 0, 0, 0.0),
        Event::new(1, 0, 0, 0.0),
        Event::new(2, 1, 0, 0.0),
    ];
    let ds = dataset(3, 2, 1, events, Features::default(), Features::default());
    let data = TrainingData::new(&ds).unwrap();
    let dims = Dims {
        num_users: 3,
        num_items: 2,
        num_facets: 1,
        global_dim: 0,
        local_dim: 0,
    };
    let draws = [[0.5, -1.0, 2.0], [0.1, 0.4, -0.3], [1.2, 0.0, 0.6]];
    let mut stats = SufficientStats::zeros(&data, 0, 0);
    let mut second = 0.0;
    for d in draws {
        let mut s = FactorState::zeros(dims);
        s.user_facet_bias = d.to_vec();
        stats.add_state(&s, &data);
        second += d.iter().map(|a| a * a).sum::<f64>();
    }
    let mean = stats.mean().unwrap();
    let opts = TrainOptions {
        ridge_lambda: 0.0,
        ..TrainOptions::default()
    };
    let (p, _) = m_step(&mean, &data, &PriorParams::initial(1, 0, 0, 0), &opts).unwrap();
    assert!(p.g(0).is_empty());
    assert_eq!(p.user_bias_weight[0], 0.0);
    assert_relative_eq!(p.var_user_facet_bias[0], second / 9.0, epsilon = 1e-12);
}

#[test]
fn m_step_clamps_zero_residuals_to_floor() {
    let events = vec![Event::new(0, 0, 0, 0.0), Event::new(1, 1, 1, 0.0)];
    let ds = dataset(2, 2, 2, events, Features::default(), Features::default());
    let data = TrainingData::new(&ds).unwrap();
    let s = FactorState::zeros(Dims {
        num_users: 2,
        num_items: 2,
        num_facets: 2,
        global_dim: 2,
        local_dim: 1,
    });
    let opts = TrainOptions {
        variance_floor: 1e-6,
        ..TrainOptions::default()
    };
    let (p, _) = m_step(
        &SufficientStats::from_state(&s, &data),
        &data,
        &PriorParams::initial(2, 0, 0, 1),
        &opts,
    )
    .unwrap();
    for v in p
        .var_user_facet_bias
        .iter()
        .chain(&p.var_item_facet_bias)
        .chain(&p.var_user_local)
        .chain(&p.var_item_local)
        .chain([&p.var_user_global, &p.var_item_global, &p.var_obs])
    {
        assert_eq!(*v, 1e-6);
    }
}

fn small_opts() -> TrainOptions {
    TrainOptions {
        em_iters: 4,
        gibbs_samples: 20,
        burn_in: 5,
        seed: 11,
        ..TrainOptions::default()
    }
}

fn small_real_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, k) = (12, 8, 2);
    let mut events = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if rng.random_bool(0.4) {
                events.push(Event::new(i, j, rng.random_range(0..k), normal(&mut rng)));
            }
        }
    }
    dataset(
        m,
        n,
        k,
        events,
        random_features(&mut rng, m, 2),
        random_features(&mut rng, n, 2),
    )
}

#[test]
fn all_zero_labels_collapse_to_floor() {
    let mut events = Vec::new();
    for i in 0..6 {
        for j in 0..4 {
            events.push(Event::new(i, j, (i + j) % 2, 0.0));
        }
    }
    let ds = dataset(6, 4, 2, events, Features::default(), Features::default());
    let config = ModelConfig::new(ModelKind::Lat, 1, 1, 3).unwrap();
    let opts = TrainOptions {
        em_iters: 30,
        gibbs_samples: 30,
        burn_in: 5,
        ..TrainOptions::default()
    };
    let out = fit(&ds, &config, &opts).unwrap();
    let model = out.model;
    for b in model.state.user_facet_bias.iter().chain(&model.state.item_facet_bias) {
        assert!(b.abs() < 1e-3, "bias {b}");
    }
    let p = &model.priors;
    for v in p.var_user_facet_bias.iter().chain(&p.var_item_facet_bias) {
        assert!(*v < 1e-6, "variance {v}");
    }
    assert!(p.var_obs < 1e-6, "var_y {}", p.var_obs);
}

#[test]
fn fit_is_deterministic_across_thread_counts() {
    let ds = small_real_dataset(5);
    let config = ModelConfig::new(ModelKind::Lat, 2, 1, 7).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fit(&ds, &config, &small_opts()).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    write_trace(&mut ta, &a.trace).unwrap();
    write_trace(&mut tb, &b.trace).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.trace.len(), 4);
}

#[test]
fn zero_local_dim_keeps_local_factors_empty() {
    let ds = small_real_dataset(6);
    let config = ModelConfig::new(ModelKind::Lat, 2, 0, 1).unwrap();
    let out = fit(&ds, &config, &small_opts()).unwrap();
    assert!(out.model.state.user_local.is_empty());
    assert!(out.model.state.item_local.is_empty());
    assert!(out.model.priors.user_local_coef.is_empty());
}

#[test]
fn cmf_has_no_facet_specific_parameters() {
    let ds = small_real_dataset(7);
    let config = ModelConfig::new(ModelKind::Cmf, 0, 2, 1).unwrap();
    let out = fit(&ds, &config, &small_opts()).unwrap();
    let m = &out.model;
    let k = ds.num_facets;
    let same = |v: &[f64], width: usize| {
        for unit in v.chunks(width * k) {
            let first = &unit[..width];
            assert!(unit.chunks(width).all(|c| c == first));
        }
    };
    same(&m.state.user_facet_bias, 1);
    same(&m.state.item_facet_bias, 1);
    same(&m.state.user_local, 2);
    same(&m.state.item_local, 2);
    let p = &m.priors;
    same(&p.user_bias_coef, p.user_feature_dim);
    same(&p.user_local_coef, p.user_feature_dim * 2);
    same(&p.var_user_facet_bias, 1);
    same(&p.var_item_local, 1);
    for i in 0..ds.num_users {
        for j in 0..ds.num_items {
            let s0 = m.state.score(i, j, 0).unwrap();
            for kk in 1..k {
                assert_eq!(m.state.score(i, j, kk).unwrap(), s0);
            }
        }
    }
}

#[test]
fn cmf_accepts_pairs_seen_in_several_facets() {
    let mut events = Vec::new();
    for i in 0..5 {
        for j in 0..4 {
            events.push(Event::new(i, j, 0, (i + j) as f64));
            events.push(Event::new(i, j, 1, (i * j) as f64 - 1.0));
        }
    }
    let ds = dataset(5, 4, 2, events, Features::default(), Features::default());
    let config = ModelConfig::new(ModelKind::Cmf, 0, 1, 2).unwrap();
    let out = fit(&ds, &config, &small_opts()).unwrap();
    let state = &out.model.state;
    assert_eq!(state.score(2, 3, 0).unwrap(), state.score(2, 3, 1).unwrap());
    assert!(out.model.presence.has_user_facet(4, 1));
}

#[test]
fn stored_state_scores_like_fallback() {
    let mut ds = small_real_dataset(8);
    ds.num_users += 2;
    ds.user_features.push(FeatureVector::new(vec![(0, 1.0)]).unwrap());
    ds.user_features.push(FeatureVector::empty());
    let config = ModelConfig::new(ModelKind::Lat, 2, 1, 4).unwrap();
    let out = fit(&ds, &config, &small_opts()).unwrap();
    let m = &out.model;
    for i in 0..ds.num_users {
        for j in 0..ds.num_items {
            for k in 0..ds.num_facets {
                let direct = m.state.score(i, j, k).unwrap();
                let fb = m
                    .predict(i, j, k, &ds.user_features[i], &ds.item_features[j])
                    .unwrap();
                assert_relative_eq!(direct, fb, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn invalid_options_are_rejected() {
    let ds = small_real_dataset(9);
    let config = ModelConfig::new(ModelKind::Bst, 1, 0, 1).unwrap();
    for opts in [
        TrainOptions {
            em_iters: 0,
            ..small_opts()
        },
        TrainOptions {
            gibbs_samples: 5,
            burn_in: 5,
            ..small_opts()
        },
        TrainOptions {
            variance_floor: 0.0,
            ..small_opts()
        },
        TrainOptions {
            ridge_lambda: -1.0,
            ..small_opts()
        },
    ] {
        assert!(fit(&ds, &config, &opts).is_err());
    }
}

/// Posterior of (u_0, u_1, u_2, w_0, w_1) in an M=N=3, K=2, F_g=1 model with
/// everything else frozen. The u_i are conditionally Gaussian given w, so
/// their posterior means reduce to a 2-D grid over w with the u integrals
/// done in closed form.
#[test]
fn long_chain_matches_quadrature_on_tiny_model() {
    let (m, n, k) = (3, 3, 2);
    let v = [0.9, -0.6, 1.3];
    let events = vec![
        Event::new(0, 0, 0, 1.1),
        Event::new(0, 1, 1, -0.4),
        Event::new(1, 2, 0, 0.8),
        Event::new(1, 0, 1, 0.5),
        Event::new(2, 1, 0, -0.9),
        Event::new(2, 2, 1, 1.6),
    ];
    let ds = dataset(m, n, k, events.clone(), Features::default(), Features::default());
    let data = TrainingData::new(&ds).unwrap();
    let mut p = PriorParams::initial(k, 0, 0, 0);
    p.var_obs = 0.5;
    p.var_user_global = 1.5;
    let mut s = FactorState::zeros(Dims {
        num_users: m,
        num_items: n,
        num_facets: k,
        global_dim: 1,
        local_dim: 0,
    });
    s.item_global = v.to_vec();
    s.facet_weight = vec![0.5, 0.5];

    // log p(w) - up to a constant - after integrating out the u_i
    let log_marginal_and_means = |w: [f64; 2]| {
        let mut lp = -0.5 * (w[0] * w[0] + w[1] * w[1]);
        let mut means = [0.0; 3];
        for (i, mean) in means.iter_mut().enumerate() {
            // u_i ~ N(0, var_u); y = u_i * z + e, z = v_j w_k
            let (mut zz, mut zy, mut yy) = (0.0, 0.0, 0.0);
            for e in events.iter().filter(|e| e.user == i) {
                let z = v[e.item] * w[e.facet];
                zz += z * z;
                zy += z * e.label;
                yy += e.label * e.label;
            }
            let prec = 1.0 / p.var_user_global + zz / p.var_obs;
            let mu = (zy / p.var_obs) / prec;
            *mean = mu;
            lp += -0.5 * (p.var_user_global * prec).ln() - 0.5 * (yy / p.var_obs - prec * mu * mu);
        }
        (lp, means)
    };
    let (lo, hi, steps) = (-5.0, 5.0, 801);
    let h = (hi - lo) / (steps - 1) as f64;
    let mut grid = Vec::with_capacity(steps * steps);
    let mut max_lp = f64::NEG_INFINITY;
    for a in 0..steps {
        for b in 0..steps {
            let w = [lo + a as f64 * h, lo + b as f64 * h];
            let (lp, mu) = log_marginal_and_means(w);
            max_lp = max_lp.max(lp);
            grid.push((w, lp, mu));
        }
    }
    // means, then E w_k^2, E u_i^2 and E u_i w_0 (the means vanish by the
    // (u, w) -> (-u, -w) symmetry, the second moments do not)
    let mut z = 0.0;
    let mut truth = [0.0f64; 13];
    for (w, lp, mu) in &grid {
        let wt = (lp - max_lp).exp();
        z += wt;
        let mut q = [0.0; 13];
        for i in 0..3 {
            let (m_i, prec) = (mu[i], 1.0 / p.var_user_global + cond_zz(&events, &v, i, *w) / p.var_obs);
            q[i] = m_i;
            q[7 + i] = m_i * m_i + 1.0 / prec;
            q[10 + i] = m_i * w[0];
        }
        q[3] = w[0];
        q[4] = w[1];
        q[5] = w[0] * w[0];
        q[6] = w[1] * w[1];
        for c in 0..13 {
            truth[c] += wt * q[c];
        }
    }
    for t in &mut truth {
        *t /= z;
    }

    let sampler = GibbsSampler::new(&data, 1e-8);
    let blocks = [Block::UserGlobal, Block::FacetWeight];
    let (burn, draws, nb) = (2_000u64, 200_000u64, 50usize);
    let mut batch = vec![[0.0f64; 13]; nb];
    for sweep in 0..burn + draws {
        let key = SweepKey {
            seed: 99,
            em_iter: 0,
            sweep,
        };
        sampler.sweep_blocks(&mut s, &p, &blocks, key).unwrap();
        if sweep >= burn {
            let b = ((sweep - burn) as usize * nb) / draws as usize;
            let (u, w) = (&s.user_global, &s.facet_weight);
            let x = [
                u[0],
                u[1],
                u[2],
                w[0],
                w[1],
                w[0] * w[0],
                w[1] * w[1],
                u[0] * u[0],
                u[1] * u[1],
                u[2] * u[2],
                u[0] * w[0],
                u[1] * w[0],
                u[2] * w[0],
            ];
            for c in 0..13 {
                batch[b][c] += x[c] / (draws as f64 / nb as f64);
            }
        }
    }
    for c in 0..13 {
        let mean = batch.iter().map(|b| b[c]).sum::<f64>() / nb as f64;
        let var = batch.iter().map(|b| (b[c] - mean).powi(2)).sum::<f64>() / (nb - 1) as f64;
        let se = (var / nb as f64).sqrt();
        assert!(
            (mean - truth[c]).abs() <= 3.0 * se,
            "quantity {c}: chain {mean}, quadrature {}, se {se}",
            truth[c]
        );
    }
}

fn cond_zz(events: &[Event], v: &[f64], user: usize, w: [f64; 2]) -> f64 {
    events
        .iter()
        .filter(|e| e.user == user)
        .map(|e| (v[e.item] * w[e.facet]).powi(2))
        .sum()
}
