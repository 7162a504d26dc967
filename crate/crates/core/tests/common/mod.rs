//! Fixtures and by-definition oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use latrec::data::{Event, EventsFile, Features};
use latrec::model::{FactorState, Presence, PriorParams};
use latrec::{Dataset, FeatureVector};

pub fn dataset(m: usize, n: usize, k: usize, events: Vec<Event>, users: Features, items: Features) -> Dataset {
    Dataset::new(
        EventsFile {
            num_users: m,
            num_items: n,
            num_facets: k,
            events,
        },
        users,
        items,
    )
    .unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Features {
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut entries = Vec::new();
        for f in 0..dim {
            if rng.random_bool(0.7) {
                entries.push((f, rng.random_range(-1.0..1.0)));
            }
        }
        vectors.push(FeatureVector::new(entries).unwrap());
    }
    Features { vectors, dim }
}

/// Term-by-term evaluation of the joint log-density, constants dropped.
pub fn naive_loglik(ds: &Dataset, s: &FactorState, p: &PriorParams, pres: &Presence) -> f64 {
    let d = s.dims;
    let (k_count, fg, fl) = (d.num_facets, d.global_dim, d.local_dim);
    let gauss = |x: f64, mean: f64, var: f64| -0.5 * var.ln() - (x - mean).powi(2) / (2.0 * var);
    let mut ll = 0.0;
    for e in &ds.events {
        let (i, j, k) = (e.user, e.item, e.facet);
        let mut score = s.user_facet_bias[i * k_count + k] + s.item_facet_bias[j * k_count + k];
        for l in 0..fg {
            score += s.user_global[i * fg + l] * s.item_global[j * fg + l] * s.facet_weight[k * fg + l];
        }
        for l in 0..fl {
            score += s.user_local[(i * k_count + k) * fl + l] * s.item_local[(j * k_count + k) * fl + l];
        }
        ll += gauss(e.label, score, p.var_obs);
    }
    let du = p.user_feature_dim;
    let di = p.item_feature_dim;
    for i in 0..d.num_users {
        if !pres.user[i] {
            continue;
        }
        let x = ds.user_features[i].to_dense(du);
        ll += -0.5 * s.user_bias[i].powi(2);
        for l in 0..fg {
            ll += gauss(s.user_global[i * fg + l], 0.0, p.var_user_global);
        }
        for k in 0..k_count {
            if !pres.user_facet[i * k_count + k] {
                continue;
            }
            let mut mean = p.user_bias_weight[k] * s.user_bias[i];
            for f in 0..du {
                mean += p.user_bias_coef[k * du + f] * x[f];
            }
            ll += gauss(s.user_facet_bias[i * k_count + k], mean, p.var_user_facet_bias[k]);
            for l in 0..fl {
                let mut m = 0.0;
                for f in 0..du {
                    m += p.user_local_coef[(k * du + f) * fl + l] * x[f];
                }
                ll += gauss(s.user_local[(i * k_count + k) * fl + l], m, p.var_user_local[k]);
            }
        }
    }
    for j in 0..d.num_items {
        if !pres.item[j] {
            continue;
        }
        let x = ds.item_features[j].to_dense(di);
        ll += -0.5 * s.item_bias[j].powi(2);
        for l in 0..fg {
            ll += gauss(s.item_global[j * fg + l], 0.0, p.var_item_global);
        }
        for k in 0..k_count {
            if !pres.item_facet[j * k_count + k] {
                continue;
            }
            let mut mean = p.item_bias_weight[k] * s.item_bias[j];
            for f in 0..di {
                mean += p.item_bias_coef[k * di + f] * x[f];
            }
            ll += gauss(s.item_facet_bias[j * k_count + k], mean, p.var_item_facet_bias[k]);
            for l in 0..fl {
                let mut m = 0.0;
                for f in 0..di {
                    m += p.item_local_coef[(k * di + f) * fl + l] * x[f];
                }
                ll += gauss(s.item_local[(j * k_count + k) * fl + l], m, p.var_item_local[k]);
            }
        }
    }
    ll -= 0.5 * s.facet_weight.iter().map(|w| w * w).sum::<f64>();
    ll
}

