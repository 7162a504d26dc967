//! Datasets drawn from the generative model with known ground truth.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{Dataset, Event, EventsFile, FeatureVector, Features};
use crate::error::{Error, Result};
use crate::model::{Dims, FactorState, FittedModel, ModelConfig, ModelKind, Presence, PriorParams};
use crate::rng::{stream, tag, StreamRng};

pub const DEFAULT_POSITIVE_RATE: f64 = 0.1;

/// Which part of the score carries the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Regime {
    /// Large shared tensor term, negligible facet-local factors.
    CorrelatedFacets,
    /// Negligible tensor term, large facet-local factors.
    IndependentFacets,
    /// Both terms matter.
    #[default]
    Mixed,
    /// Every facet carries identical factors.
    Collapsed,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "correlated" | "correlated-facets" => Ok(Regime::CorrelatedFacets),
            "independent" | "independent-facets" => Ok(Regime::IndependentFacets),
            "mixed" => Ok(Regime::Mixed),
            "collapsed" => Ok(Regime::Collapsed),
            _ => Err(Error::Config(format!(
                "unknown regime {s:?} (expected correlated, independent, mixed or collapsed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_facets: usize,
    pub global_dim: usize,
    pub local_dim: usize,
    pub user_feature_dim: usize,
    pub item_feature_dim: usize,
    /// True prior parameters.
    pub priors: PriorParams,
    /// w_k is drawn as `facet_weight_scale * N(0, I)`.
    pub facet_weight_scale: f64,
    /// Probability that a given (user, item, facet) triple is observed.
    pub density: f64,
    pub seed: u64,
    pub regime: Regime,
    /// Binarize responses so that this fraction is positive; `None` keeps
    /// the real-valued responses as labels.
    pub positive_rate: Option<f64>,
}

impl GenSpec {
    /// A spec whose true priors follow `regime`.
    #[allow(clippy::too_many_arguments)]
    pub fn for_regime(
        regime: Regime,
        num_users: usize,
        num_items: usize,
        num_facets: usize,
        global_dim: usize,
        local_dim: usize,
        density: f64,
        seed: u64,
    ) -> Self {
        let (du, di) = (4, 4);
        let (w_scale, var_local) = match regime {
            Regime::CorrelatedFacets => (1.5, 1e-3),
            Regime::IndependentFacets => (0.02, 1.0),
            Regime::Mixed => (1.0, 0.6),
            Regime::Collapsed => (1.0, 0.6),
        };
        let k = num_facets;
        let mut priors = PriorParams::initial(k, du, di, local_dim);
        let mut rng = stream(seed, &[tag::SYNTH, 1]);
        let mut draw = |v: &mut [f64], sd: f64| {
            for x in v {
                *x = sd * rng.sample::<f64, _>(StandardNormal);
            }
        };
        draw(&mut priors.user_bias_coef, 0.5);
        draw(&mut priors.item_bias_coef, 0.5);
        draw(&mut priors.user_local_coef, 0.3);
        draw(&mut priors.item_local_coef, 0.3);
        priors.user_bias_weight.fill(1.0);
        priors.item_bias_weight.fill(1.0);
        priors.var_user_facet_bias.fill(0.25);
        priors.var_item_facet_bias.fill(0.25);
        priors.var_user_local.fill(var_local);
        priors.var_item_local.fill(var_local);
        priors.var_user_global = 1.0;
        priors.var_item_global = 1.0;
        priors.var_obs = 0.25;
        if regime == Regime::Collapsed && k > 1 {
            let first = |v: &mut Vec<f64>| {
                let w = v.len() / k;
                let head = v[..w].to_vec();
                for c in v.chunks_mut(w) {
                    c.copy_from_slice(&head);
                }
            };
            first(&mut priors.user_bias_coef);
            first(&mut priors.item_bias_coef);
            first(&mut priors.user_local_coef);
            first(&mut priors.item_local_coef);
        }
        GenSpec {
            num_users,
            num_items,
            num_facets,
            global_dim,
            local_dim,
            user_feature_dim: du,
            item_feature_dim: di,
            priors,
            facet_weight_scale: w_scale,
            density,
            seed,
            regime,
            positive_rate: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if self.num_users == 0 || self.num_items == 0 || self.num_facets == 0 {
            return Err(Error::Config("need at least one user, item and facet".into()));
        }
        let p = &self.priors;
        if p.num_facets != self.num_facets
            || p.user_feature_dim != self.user_feature_dim
            || p.item_feature_dim != self.item_feature_dim
            || p.local_dim != self.local_dim
        {
            return Err(Error::Dimension("prior shapes do not match the generator dimensions".into()));
        }
        p.validate()?;
        if !(self.facet_weight_scale >= 0.0 && self.facet_weight_scale.is_finite()) {
            return Err(Error::Config(format!("facet weight scale {} is invalid", self.facet_weight_scale)));
        }
        if let Some(r) = self.positive_rate {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("positive rate must lie in (0, 1), got {r}")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            num_users: self.num_users,
            num_items: self.num_items,
            num_facets: self.num_facets,
            global_dim: self.global_dim,
            local_dim: self.local_dim,
        }
    }
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub state: FactorState,
    pub priors: PriorParams,
    /// Real-valued response of every event, in event order.
    pub responses: Vec<f64>,
    /// Binarization cut-off, when labels were binarized.
    pub threshold: Option<f64>,
}

impl Truth {
    /// The truth as a model file with every factor marked present.
    pub fn to_model(&self, seed: u64) -> FittedModel {
        let d = self.state.dims;
        FittedModel {
            config: ModelConfig {
                kind: ModelKind::Lat,
                global_dim: d.global_dim,
                local_dim: d.local_dim,
                seed,
                jitter: 0.0,
            },
            state: self.state.clone(),
            priors: self.priors.clone(),
            presence: Presence::all(d.num_users, d.num_items, d.num_facets),
        }
    }
}

fn normal_fill(rng: &mut StreamRng, v: &mut [f64], mean: &[f64], var: f64) {
    let sd = var.sqrt();
    for (x, m) in v.iter_mut().zip(mean) {
        *x = m + sd * rng.sample::<f64, _>(StandardNormal);
    }
}

fn dense_features(rng: &mut StreamRng, count: usize, dim: usize) -> Vec<FeatureVector> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            FeatureVector::from_dense(&v)
        })
        .collect()
}

/// Draws features, factors, observed triples and responses from `spec`.
pub fn generate(spec: &GenSpec) -> Result<(Dataset, Truth)> {
    spec.validate()?;
    let mut rng = stream(spec.seed, &[tag::SYNTH]);
    let (m, n, k, fl) = (spec.num_users, spec.num_items, spec.num_facets, spec.local_dim);
    let p = &spec.priors;
    let user_x = dense_features(&mut rng, m, spec.user_feature_dim);
    let item_x = dense_features(&mut rng, n, spec.item_feature_dim);
    let mut s = FactorState::zeros(spec.dims());

    let zeros = vec![0.0; m.max(n) * spec.global_dim.max(1)];
    normal_fill(&mut rng, &mut s.user_bias, &zeros, 1.0);
    normal_fill(&mut rng, &mut s.item_bias, &zeros, 1.0);
    normal_fill(&mut rng, &mut s.user_global, &zeros, p.var_user_global);
    normal_fill(&mut rng, &mut s.item_global, &zeros, p.var_item_global);
    let w_var = spec.facet_weight_scale * spec.facet_weight_scale;
    if w_var > 0.0 {
        normal_fill(&mut rng, &mut s.facet_weight, &zeros, w_var);
    }
    let facets = if spec.regime == Regime::Collapsed { 1 } else { k };
    for i in 0..m {
        for f in 0..facets {
            let mean = p.alpha_prior_mean(f, &user_x[i], s.user_bias[i]);
            s.user_facet_bias[i * k + f] = mean + p.var_user_facet_bias[f].sqrt() * rng.sample::<f64, _>(StandardNormal);
            let o = (i * k + f) * fl;
            let mean = p.user_local_prior_mean(f, &user_x[i]);
            normal_fill(&mut rng, &mut s.user_local[o..o + fl], &mean, p.var_user_local[f]);
        }
    }
    for j in 0..n {
        for f in 0..facets {
            let mean = p.beta_prior_mean(f, &item_x[j], s.item_bias[j]);
            s.item_facet_bias[j * k + f] = mean + p.var_item_facet_bias[f].sqrt() * rng.sample::<f64, _>(StandardNormal);
            let o = (j * k + f) * fl;
            let mean = p.item_local_prior_mean(f, &item_x[j]);
            normal_fill(&mut rng, &mut s.item_local[o..o + fl], &mean, p.var_item_local[f]);
        }
    }
    if spec.regime == Regime::Collapsed {
        copy_first_facet(&mut s);
    }

    let noise = Normal::new(0.0, p.var_obs.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut events = Vec::new();
    let mut responses = Vec::new();
    for i in 0..m {
        for j in 0..n {
            for f in 0..k {
                if spec.density < 1.0 && rng.random::<f64>() >= spec.density {
                    continue;
                }
                let y = s.score(i, j, f)? + noise.sample(&mut rng);
                events.push(Event::new(i, j, f, y));
                responses.push(y);
            }
        }
    }
    let threshold = match spec.positive_rate {
        Some(rate) => {
            let t = quantile_threshold(&responses, rate);
            for e in &mut events {
                e.label = if e.label > t { 1.0 } else { 0.0 };
            }
            Some(t)
        }
        None => None,
    };
    let ds = Dataset::new(
        EventsFile {
            num_users: m,
            num_items: n,
            num_facets: k,
            events,
        },
        Features {
            vectors: user_x,
            dim: spec.user_feature_dim,
        },
        Features {
            vectors: item_x,
            dim: spec.item_feature_dim,
        },
    )?;
    let truth = Truth {
        state: s,
        priors: p.clone(),
        responses,
        threshold,
    };
    Ok((ds, truth))
}

fn copy_first_facet(s: &mut FactorState) {
    let Dims {
        num_facets: k,
        local_dim: fl,
        global_dim: fg,
        ..
    } = s.dims;
    let rep = |v: &mut [f64], width: usize| {
        if width == 0 {
            return;
        }
        for unit in v.chunks_mut(k * width) {
            let (head, rest) = unit.split_at_mut(width);
            for c in rest.chunks_mut(width) {
                c.copy_from_slice(head);
            }
        }
    };
    rep(&mut s.user_facet_bias, 1);
    rep(&mut s.item_facet_bias, 1);
    rep(&mut s.user_local, fl);
    rep(&mut s.item_local, fl);
    rep(&mut s.facet_weight, fg);
}

/// Cut-off above which a fraction `rate` of `values` lies.
pub fn quantile_threshold(values: &[f64], rate: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let positives = ((values.len() as f64) * rate).round() as usize;
    let positives = positives.clamp(0, values.len());
    if positives == 0 {
        return sorted[values.len() - 1];
    }
    if positives == values.len() {
        return sorted[0] - 1.0;
    }
    let (lo, hi) = (sorted[values.len() - positives - 1], sorted[values.len() - positives]);
    0.5 * (lo + hi)
}

/// Labels 1 for the top `rate` fraction of responses; returns the cut-off.
pub fn binarize(events: &mut [Event], rate: f64) -> f64 {
    let labels: Vec<f64> = events.iter().map(|e| e.label).collect();
    let t = quantile_threshold(&labels, rate);
    for e in events {
        e.label = if e.label > t { 1.0 } else { 0.0 };
    }
    t
}

/// Item descriptions whose words depend on the item's factors, so that the
/// text baselines carry some signal: word `t` is drawn with probability
/// proportional to `exp(<v_j, e_t> + beta_j0 * c_t)` for fixed random word
/// embeddings `e_t` and loadings `c_t`.
pub fn generate_item_text(truth: &Truth, vocabulary: usize, words_per_item: usize, seed: u64) -> BTreeMap<usize, String> {
    let d = truth.state.dims;
    let fg = d.global_dim;
    let mut rng = stream(seed, &[tag::SYNTH, 2]);
    let emb: Vec<f64> = (0..vocabulary * fg).map(|_| rng.sample(StandardNormal)).collect();
    let load: Vec<f64> = (0..vocabulary).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = BTreeMap::new();
    for j in 0..d.num_items {
        let v = truth.state.v_global(j);
        let beta = truth.state.beta(j, 0);
        let logits: Vec<f64> = (0..vocabulary)
            .map(|t| emb[t * fg..(t + 1) * fg].iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + beta * load[t])
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let dist = rand::distr::weighted::WeightedIndex::new(&weights).expect("positive weights");
        let words: Vec<String> = (0..words_per_item).map(|_| format!("w{}", dist.sample(&mut rng))).collect();
        out.insert(j, words.join(" "));
    }
    out
}
