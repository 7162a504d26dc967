use nalgebra::DMatrix;

use crate::data::{Dataset, FeatureVector};
use crate::error::{Error, Result};
use crate::model::Presence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Obs {
    pub user: usize,
    pub item: usize,
    pub facet: usize,
    pub y: f64,
}

/// CSR-style grouping of observation ids by a key.
#[derive(Debug, Clone)]
pub(crate) struct Groups {
    offsets: Vec<usize>,
    ids: Vec<usize>,
}

impl Groups {
    fn build(num_keys: usize, keys: impl Iterator<Item = usize> + Clone) -> Self {
        let mut offsets = vec![0usize; num_keys + 1];
        for k in keys.clone() {
            offsets[k + 1] += 1;
        }
        for i in 0..num_keys {
            offsets[i + 1] += offsets[i];
        }
        let mut next = offsets.clone();
        let mut ids = vec![0usize; offsets[num_keys]];
        for (o, k) in keys.enumerate() {
            ids[next[k]] = o;
            next[k] += 1;
        }
        Groups { offsets, ids }
    }

    #[inline]
    pub fn get(&self, key: usize) -> &[usize] {
        &self.ids[self.offsets[key]..self.offsets[key + 1]]
    }
}

/// Observations indexed every way the sampler needs, plus the fixed parts
/// of the M-step designs.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub(crate) num_users: usize,
    pub(crate) num_items: usize,
    pub(crate) num_facets: usize,
    pub(crate) obs: Vec<Obs>,
    pub(crate) user_features: Vec<FeatureVector>,
    pub(crate) item_features: Vec<FeatureVector>,
    pub(crate) user_feature_dim: usize,
    pub(crate) item_feature_dim: usize,
    pub(crate) presence: Presence,
    pub(crate) by_user_facet: Groups,
    pub(crate) by_item_facet: Groups,
    pub(crate) by_user: Groups,
    pub(crate) by_item: Groups,
    pub(crate) by_facet: Groups,
    pub(crate) design: Design,
}

/// Feature Gram matrices over the users (items) present in each facet.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub user_gram: Vec<DMatrix<f64>>,
    pub item_gram: Vec<DMatrix<f64>>,
    pub user_count: Vec<usize>,
    pub item_count: Vec<usize>,
    pub active_users: usize,
    pub active_items: usize,
}

impl TrainingData {
    /// Indexes the dataset. Factors count as present when they touch at
    /// least one training observation.
    pub fn new(ds: &Dataset) -> Result<Self> {
        let presence = Presence::from_events(&ds.events, ds.num_users, ds.num_items, ds.num_facets);
        TrainingData::with_presence(ds, presence)
    }

    /// Indexes the dataset with an explicit presence mask (a factor marked
    /// present without observations is then treated as a latent variable with
    /// only its prior).
    pub fn with_presence(ds: &Dataset, presence: Presence) -> Result<Self> {
        ds.validate()?;
        Self::build(ds, presence)
    }

    /// Indexes events that may repeat a (user, item, facet) triple, each
    /// repeat counting as a separate observation.
    pub(crate) fn with_repeats(ds: &Dataset) -> Result<Self> {
        let presence = Presence::from_events(&ds.events, ds.num_users, ds.num_items, ds.num_facets);
        Self::build(ds, presence)
    }

    fn build(ds: &Dataset, presence: Presence) -> Result<Self> {
        let (m, n, k) = (ds.num_users, ds.num_items, ds.num_facets);
        if presence.user_facet.len() != m * k || presence.item_facet.len() != n * k {
            return Err(Error::Dimension("presence mask does not match dataset".into()));
        }
        let obs: Vec<Obs> = ds
            .events
            .iter()
            .map(|e| Obs {
                user: e.user,
                item: e.item,
                facet: e.facet,
                y: e.label,
            })
            .collect();
        let by_user_facet = Groups::build(m * k, obs.iter().map(|o| o.user * k + o.facet));
        let by_item_facet = Groups::build(n * k, obs.iter().map(|o| o.item * k + o.facet));
        let by_user = Groups::build(m, obs.iter().map(|o| o.user));
        let by_item = Groups::build(n, obs.iter().map(|o| o.item));
        let by_facet = Groups::build(k, obs.iter().map(|o| o.facet));

        let gram = |feats: &[FeatureVector], dim: usize, count: usize, present: &dyn Fn(usize) -> bool| {
            let mut g = DMatrix::zeros(dim, dim);
            let mut c = 0;
            for (idx, x) in feats.iter().enumerate().take(count) {
                if !present(idx) {
                    continue;
                }
                c += 1;
                for &(a, va) in x.entries() {
                    for &(b, vb) in x.entries() {
                        g[(a, b)] += va * vb;
                    }
                }
            }
            (g, c)
        };
        let mut design = Design {
            user_gram: Vec::with_capacity(k),
            item_gram: Vec::with_capacity(k),
            user_count: Vec::with_capacity(k),
            item_count: Vec::with_capacity(k),
            active_users: presence.user.iter().filter(|&&b| b).count(),
            active_items: presence.item.iter().filter(|&&b| b).count(),
        };
        for f in 0..k {
            let (g, c) = gram(&ds.user_features, ds.user_feature_dim, m, &|i| presence.has_user_facet(i, f));
            design.user_gram.push(g);
            design.user_count.push(c);
            let (g, c) = gram(&ds.item_features, ds.item_feature_dim, n, &|j| presence.has_item_facet(j, f));
            design.item_gram.push(g);
            design.item_count.push(c);
        }
        Ok(TrainingData {
            num_users: m,
            num_items: n,
            num_facets: k,
            obs,
            user_features: ds.user_features.clone(),
            item_features: ds.item_features.clone(),
            user_feature_dim: ds.user_feature_dim,
            item_feature_dim: ds.item_feature_dim,
            presence,
            by_user_facet,
            by_item_facet,
            by_user,
            by_item,
            by_facet,
            design,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn presence(&self) -> &Presence {
        &self.presence
    }

    pub fn num_observations(&self) -> usize {
        self.obs.len()
    }

    pub(crate) fn response_variance(&self) -> f64 {
        let n = self.obs.len() as f64;
        if self.obs.is_empty() {
            return 1.0;
        }
        let mean = self.obs.iter().map(|o| o.y).sum::<f64>() / n;
        self.obs.iter().map(|o| (o.y - mean).powi(2)).sum::<f64>() / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_index_all_observations() {
        let g = Groups::build(3, [2usize, 0, 2, 1, 2].into_iter());
        assert_eq!(g.get(0), &[1]);
        assert_eq!(g.get(1), &[3]);
        assert_eq!(g.get(2), &[0, 2, 4]);
    }
}
