//! Systematic-scan Gibbs sampler over all latent factors.
//!
//! Each block holds units that are conditionally independent given every
//! other block, so a block is sampled in parallel. Every unit draws from its
//! own stream keyed by (seed, EM iteration, sweep, block, unit), which makes
//! a sweep bit-identical regardless of thread count.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::data::TrainingData;
use crate::error::{Error, Result};
use crate::linalg::{FactoredGaussian, GaussianAccumulator};
use crate::model::{dot, triple, FactorState, PriorParams};
use crate::rng;

/// Parameter blocks of the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    /// alpha_ik
    UserFacetBias,
    /// beta_jk
    ItemFacetBias,
    /// alpha_i
    UserBias,
    /// beta_j
    ItemBias,
    /// u_ik
    UserLocal,
    /// v_jk
    ItemLocal,
    /// u_i
    UserGlobal,
    /// v_j
    ItemGlobal,
    /// w_k
    FacetWeight,
}

impl Block {
    /// Biases, then local factors, then global factors.
    pub const SCAN_ORDER: [Block; 9] = [
        Block::UserFacetBias,
        Block::ItemFacetBias,
        Block::UserBias,
        Block::ItemBias,
        Block::UserLocal,
        Block::ItemLocal,
        Block::UserGlobal,
        Block::ItemGlobal,
        Block::FacetWeight,
    ];

    fn id(self) -> u64 {
        self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::UserFacetBias => "alpha_ik",
            Block::ItemFacetBias => "beta_jk",
            Block::UserBias => "alpha_i",
            Block::ItemBias => "beta_j",
            Block::UserLocal => "u_ik",
            Block::ItemLocal => "v_jk",
            Block::UserGlobal => "u_i",
            Block::ItemGlobal => "v_j",
            Block::FacetWeight => "w_k",
        }
    }

    pub fn num_units(self, s: &FactorState) -> usize {
        let d = &s.dims;
        match self {
            Block::UserFacetBias | Block::UserLocal => d.num_users * d.num_facets,
            Block::ItemFacetBias | Block::ItemLocal => d.num_items * d.num_facets,
            Block::UserBias | Block::UserGlobal => d.num_users,
            Block::ItemBias | Block::ItemGlobal => d.num_items,
            Block::FacetWeight => d.num_facets,
        }
    }

    pub fn unit_dim(self, s: &FactorState) -> usize {
        match self {
            Block::UserFacetBias | Block::ItemFacetBias | Block::UserBias | Block::ItemBias => 1,
            Block::UserLocal | Block::ItemLocal => s.dims.local_dim,
            Block::UserGlobal | Block::ItemGlobal | Block::FacetWeight => s.dims.global_dim,
        }
    }

    fn storage(self, s: &mut FactorState) -> &mut [f64] {
        match self {
            Block::UserFacetBias => &mut s.user_facet_bias,
            Block::ItemFacetBias => &mut s.item_facet_bias,
            Block::UserBias => &mut s.user_bias,
            Block::ItemBias => &mut s.item_bias,
            Block::UserLocal => &mut s.user_local,
            Block::ItemLocal => &mut s.item_local,
            Block::UserGlobal => &mut s.user_global,
            Block::ItemGlobal => &mut s.item_global,
            Block::FacetWeight => &mut s.facet_weight,
        }
    }
}

/// Position of one sweep in the overall run; determines the random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepKey {
    pub seed: u64,
    pub em_iter: u64,
    pub sweep: u64,
}

impl SweepKey {
    pub fn unit_rng(&self, block: Block, unit: usize) -> rng::StreamRng {
        rng::stream(
            self.seed,
            &[rng::tag::GIBBS, self.em_iter, self.sweep, block.id(), unit as u64],
        )
    }
}

/// Mean and covariance (row-major) of a Gaussian full conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
}

/// Full conditional of a vector factor whose observations are
/// `residual ~ N(regressor' x, var_y)` and whose prior is
/// `N(prior_mean, prior_var I)`:
///
/// ```text
/// cov  = (I / prior_var + sum z z' / var_y)^-1
/// mean = cov (prior_mean / prior_var + sum z r / var_y)
/// ```
pub fn conditional_for_vector_factor(
    regressors: &[Vec<f64>],
    residuals: &[f64],
    prior_mean: &[f64],
    prior_var: f64,
    var_y: f64,
) -> Result<Conditional> {
    if regressors.len() != residuals.len() {
        return Err(Error::Dimension(format!(
            "{} regressors for {} residuals",
            regressors.len(),
            residuals.len()
        )));
    }
    if let Some(z) = regressors.iter().find(|z| z.len() != prior_mean.len()) {
        return Err(Error::Dimension(format!(
            "regressor of length {} for a factor of dimension {}",
            z.len(),
            prior_mean.len()
        )));
    }
    if !(prior_var > 0.0) || !(var_y > 0.0) {
        return Err(Error::Numerical(format!(
            "non-positive variance (prior {prior_var}, observation {var_y})"
        )));
    }
    let mut acc = GaussianAccumulator::new(prior_mean, prior_var);
    for (z, r) in regressors.iter().zip(residuals) {
        acc.add(z, *r, 1.0 / var_y);
    }
    let g = acc
        .factor(0.0)
        .ok_or_else(|| Error::Numerical("conditional precision is not positive definite".into()))?;
    Ok(to_conditional(&g))
}

fn to_conditional(g: &FactoredGaussian) -> Conditional {
    let cov: DMatrix<f64> = g.covariance();
    let d = cov.nrows();
    let mut covariance = Vec::with_capacity(d * d);
    for a in 0..d {
        for b in 0..d {
            covariance.push(cov[(a, b)]);
        }
    }
    Conditional {
        mean: g.mean.iter().copied().collect(),
        covariance,
    }
}

/// Gibbs sampler bound to one training set.
pub struct GibbsSampler<'a> {
    data: &'a TrainingData,
    variance_floor: f64,
}

impl<'a> GibbsSampler<'a> {
    pub fn new(data: &'a TrainingData, variance_floor: f64) -> Self {
        GibbsSampler {
            data,
            variance_floor,
        }
    }

    pub fn data(&self) -> &'a TrainingData {
        self.data
    }

    #[inline]
    fn floor(&self, v: f64) -> f64 {
        v.max(self.variance_floor)
    }

    fn accumulator(&self, s: &FactorState, p: &PriorParams, block: Block, unit: usize) -> GaussianAccumulator {
        let d = self.data;
        let k_count = d.num_facets;
        let obs_weight = 1.0 / self.floor(p.var_obs);
        match block {
            Block::UserFacetBias => {
                let (i, k) = (unit / k_count, unit % k_count);
                let mean = p.alpha_prior_mean(k, &d.user_features[i], s.user_bias[i]);
                let mut acc = GaussianAccumulator::new(&[mean], self.floor(p.var_user_facet_bias[k]));
                for &o in d.by_user_facet.get(unit) {
                    let ob = &d.obs[o];
                    let rest = s.beta(ob.item, k)
                        + triple(s.u_global(i), s.v_global(ob.item), s.w(k))
                        + dot(s.u_local(i, k), s.v_local(ob.item, k));
                    acc.add_scalar(1.0, ob.y - rest, obs_weight);
                }
                acc
            }
            Block::ItemFacetBias => {
                let (j, k) = (unit / k_count, unit % k_count);
                let mean = p.beta_prior_mean(k, &d.item_features[j], s.item_bias[j]);
                let mut acc = GaussianAccumulator::new(&[mean], self.floor(p.var_item_facet_bias[k]));
                for &o in d.by_item_facet.get(unit) {
                    let ob = &d.obs[o];
                    let rest = s.alpha(ob.user, k)
                        + triple(s.u_global(ob.user), s.v_global(j), s.w(k))
                        + dot(s.u_local(ob.user, k), s.v_local(j, k));
                    acc.add_scalar(1.0, ob.y - rest, obs_weight);
                }
                acc
            }
            Block::UserBias => {
                let i = unit;
                let mut acc = GaussianAccumulator::new(&[0.0], 1.0);
                for k in (0..k_count).filter(|&k| d.presence.has_user_facet(i, k)) {
                    let r = s.alpha(i, k) - d.user_features[i].dot(p.g(k));
                    acc.add_scalar(p.user_bias_weight[k], r, 1.0 / self.floor(p.var_user_facet_bias[k]));
                }
                acc
            }
            Block::ItemBias => {
                let j = unit;
                let mut acc = GaussianAccumulator::new(&[0.0], 1.0);
                for k in (0..k_count).filter(|&k| d.presence.has_item_facet(j, k)) {
                    let r = s.beta(j, k) - d.item_features[j].dot(p.d(k));
                    acc.add_scalar(p.item_bias_weight[k], r, 1.0 / self.floor(p.var_item_facet_bias[k]));
                }
                acc
            }
            Block::UserLocal => {
                let (i, k) = (unit / k_count, unit % k_count);
                let mean = p.user_local_prior_mean(k, &d.user_features[i]);
                let mut acc = GaussianAccumulator::new(&mean, self.floor(p.var_user_local[k]));
                for &o in d.by_user_facet.get(unit) {
                    let ob = &d.obs[o];
                    let rest = s.alpha(i, k) + s.beta(ob.item, k) + triple(s.u_global(i), s.v_global(ob.item), s.w(k));
                    acc.add(s.v_local(ob.item, k), ob.y - rest, obs_weight);
                }
                acc
            }
            Block::ItemLocal => {
                let (j, k) = (unit / k_count, unit % k_count);
                let mean = p.item_local_prior_mean(k, &d.item_features[j]);
                let mut acc = GaussianAccumulator::new(&mean, self.floor(p.var_item_local[k]));
                for &o in d.by_item_facet.get(unit) {
                    let ob = &d.obs[o];
                    let rest = s.alpha(ob.user, k) + s.beta(j, k) + triple(s.u_global(ob.user), s.v_global(j), s.w(k));
                    acc.add(s.u_local(ob.user, k), ob.y - rest, obs_weight);
                }
                acc
            }
            Block::UserGlobal => {
                let i = unit;
                let f = s.dims.global_dim;
                let mut acc = GaussianAccumulator::new(&vec![0.0; f], self.floor(p.var_user_global));
                let mut z = vec![0.0; f];
                for &o in d.by_user.get(i) {
                    let ob = &d.obs[o];
                    let k = ob.facet;
                    for ((zl, v), w) in z.iter_mut().zip(s.v_global(ob.item)).zip(s.w(k)) {
                        *zl = v * w;
                    }
                    let rest = s.alpha(i, k) + s.beta(ob.item, k) + dot(s.u_local(i, k), s.v_local(ob.item, k));
                    acc.add(&z, ob.y - rest, obs_weight);
                }
                acc
            }
            Block::ItemGlobal => {
                let j = unit;
                let f = s.dims.global_dim;
                let mut acc = GaussianAccumulator::new(&vec![0.0; f], self.floor(p.var_item_global));
                let mut z = vec![0.0; f];
                for &o in d.by_item.get(j) {
                    let ob = &d.obs[o];
                    let k = ob.facet;
                    for ((zl, u), w) in z.iter_mut().zip(s.u_global(ob.user)).zip(s.w(k)) {
                        *zl = u * w;
                    }
                    let rest = s.alpha(ob.user, k) + s.beta(j, k) + dot(s.u_local(ob.user, k), s.v_local(j, k));
                    acc.add(&z, ob.y - rest, obs_weight);
                }
                acc
            }
            Block::FacetWeight => {
                let k = unit;
                let f = s.dims.global_dim;
                let mut acc = GaussianAccumulator::new(&vec![0.0; f], 1.0);
                let mut z = vec![0.0; f];
                for &o in d.by_facet.get(k) {
                    let ob = &d.obs[o];
                    for ((zl, u), v) in z.iter_mut().zip(s.u_global(ob.user)).zip(s.v_global(ob.item)) {
                        *zl = u * v;
                    }
                    let rest = s.alpha(ob.user, k)
                        + s.beta(ob.item, k)
                        + dot(s.u_local(ob.user, k), s.v_local(ob.item, k));
                    acc.add(&z, ob.y - rest, obs_weight);
                }
                acc
            }
        }
    }

    fn factor(&self, acc: &GaussianAccumulator, block: Block) -> Result<FactoredGaussian> {
        acc.factor(self.variance_floor.max(1e-10))
            .ok_or_else(|| Error::Numerical(format!("conditional of {} is not positive definite", block.name())))
    }

    /// Exact full conditional of one unit given the rest of `state`.
    pub fn unit_conditional(
        &self,
        state: &FactorState,
        priors: &PriorParams,
        block: Block,
        unit: usize,
    ) -> Result<Conditional> {
        self.check_unit(state, block, unit)?;
        let acc = self.accumulator(state, priors, block, unit);
        Ok(to_conditional(&self.factor(&acc, block)?))
    }

    /// One draw from a unit's full conditional.
    pub fn draw_unit<R: Rng + ?Sized>(
        &self,
        state: &FactorState,
        priors: &PriorParams,
        block: Block,
        unit: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_unit(state, block, unit)?;
        let acc = self.accumulator(state, priors, block, unit);
        let g = self.factor(&acc, block)?;
        let eps = (0..block.unit_dim(state)).map(|_| StandardNormal.sample(rng)).collect();
        Ok(g.sample_with(eps))
    }

    fn check_unit(&self, state: &FactorState, block: Block, unit: usize) -> Result<()> {
        if unit >= block.num_units(state) {
            return Err(Error::Dimension(format!(
                "unit {unit} outside block {} of {} units",
                block.name(),
                block.num_units(state)
            )));
        }
        Ok(())
    }

    /// Resamples every unit of `block`. Returns the number of units whose
    /// conditional needed diagonal regularization.
    pub fn sample_block(
        &self,
        state: &mut FactorState,
        priors: &PriorParams,
        block: Block,
        key: SweepKey,
    ) -> Result<usize> {
        let dim = block.unit_dim(state);
        if dim == 0 {
            return Ok(0);
        }
        let units = block.num_units(state);
        let snapshot: &FactorState = state;
        let draws: Vec<Result<(Vec<f64>, bool)>> = (0..units)
            .into_par_iter()
            .map(|unit| {
                let acc = self.accumulator(snapshot, priors, block, unit);
                let g = self.factor(&acc, block)?;
                let mut rng = key.unit_rng(block, unit);
                let eps = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                Ok((g.sample_with(eps), g.regularized))
            })
            .collect();
        let mut regularized = 0;
        let target = block.storage(state);
        for (unit, draw) in draws.into_iter().enumerate() {
            let (values, reg) = draw?;
            target[unit * dim..(unit + 1) * dim].copy_from_slice(&values);
            regularized += usize::from(reg);
        }
        if regularized > 0 {
            log::warn!(
                "{regularized} conditional(s) of {} needed diagonal regularization",
                block.name()
            );
        }
        Ok(regularized)
    }

    /// One systematic-scan sweep over the given blocks.
    pub fn sweep_blocks(
        &self,
        state: &mut FactorState,
        priors: &PriorParams,
        blocks: &[Block],
        key: SweepKey,
    ) -> Result<usize> {
        let mut warnings = 0;
        for &b in blocks {
            warnings += self.sample_block(state, priors, b, key)?;
        }
        Ok(warnings)
    }
}

/// One full sweep in the fixed scan order (see [`Block::SCAN_ORDER`]).
pub fn gibbs_sweep(
    state: &mut FactorState,
    priors: &PriorParams,
    data: &TrainingData,
    key: SweepKey,
    variance_floor: f64,
) -> Result<usize> {
    GibbsSampler::new(data, variance_floor).sweep_blocks(state, priors, &Block::SCAN_ORDER, key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Event, EventsFile, Features};
    use crate::model::{Dims, Presence};
    use approx::assert_relative_eq;

    fn tiny(events: Vec<Event>, m: usize, n: usize, k: usize) -> Dataset {
        Dataset::new(
            EventsFile {
                num_users: m,
                num_items: n,
                num_facets: k,
                events,
            },
            Features::default(),
            Features::default(),
        )
        .unwrap()
    }

    #[test]
    fn vector_conditional_examples() {
        let c = conditional_for_vector_factor(&[], &[], &[0.5, -1.0], 2.0, 1.0).unwrap();
        for (got, want) in c.mean.iter().zip([0.5, -1.0]) {
            assert_relative_eq!(*got, want, epsilon = 1e-14);
        }
        for (got, want) in c.covariance.iter().zip([2.0, 0.0, 0.0, 2.0]) {
            assert_relative_eq!(*got, want, epsilon = 1e-14);
        }

        let r = 0.8;
        let c = conditional_for_vector_factor(&[vec![1.0, 0.0, 0.0]], &[r], &[0.0; 3], 1.0, 1.0).unwrap();
        assert_relative_eq!(c.mean[0], r / 2.0, epsilon = 1e-14);
        assert_relative_eq!(c.mean[1], 0.0, epsilon = 1e-14);
        assert_relative_eq!(c.covariance[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(c.covariance[4], 1.0, epsilon = 1e-14);
        assert_relative_eq!(c.covariance[8], 1.0, epsilon = 1e-14);

        // var_y -> infinity: posterior -> prior
        let c = conditional_for_vector_factor(&[vec![1.0, 2.0]], &[5.0], &[0.3, 0.1], 0.7, 1e14).unwrap();
        assert_relative_eq!(c.mean[0], 0.3, epsilon = 1e-9);
        assert_relative_eq!(c.mean[1], 0.1, epsilon = 1e-9);
        assert_relative_eq!(c.covariance[0], 0.7, epsilon = 1e-9);
        assert_relative_eq!(c.covariance[3], 0.7, epsilon = 1e-9);

        assert!(conditional_for_vector_factor(&[vec![1.0]], &[], &[0.0], 1.0, 1.0).is_err());
        assert!(conditional_for_vector_factor(&[vec![1.0]], &[1.0], &[0.0, 0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn unobserved_bias_draws_from_prior() {
        let ds = tiny(vec![Event::new(0, 0, 0, 1.0)], 2, 1, 2);
        let data = TrainingData::new(&ds).unwrap();
        let dims = Dims {
            num_users: 2,
            num_items: 1,
            num_facets: 2,
            global_dim: 0,
            local_dim: 0,
        };
        let mut s = FactorState::zeros(dims);
        s.user_bias[1] = 0.7;
        let mut p = PriorParams::initial(2, 0, 0, 0);
        p.user_bias_weight[1] = 2.0;
        p.var_user_facet_bias[1] = 0.3;
        let sampler = GibbsSampler::new(&data, 1e-8);
        // user 1, facet 1: no observations
        let c = sampler.unit_conditional(&s, &p, Block::UserFacetBias, 3).unwrap();
        assert_relative_eq!(c.mean[0], 1.4, epsilon = 1e-14);
        assert_relative_eq!(c.covariance[0], 0.3, epsilon = 1e-14);
    }

    #[test]
    fn single_observation_bias_conditional() {
        // y = 2.0 on (0, 0, 0); all other factors zero
        let ds = tiny(vec![Event::new(0, 0, 0, 2.0)], 1, 1, 1);
        let data = TrainingData::new(&ds).unwrap();
        let dims = Dims {
            num_users: 1,
            num_items: 1,
            num_facets: 1,
            global_dim: 1,
            local_dim: 1,
        };
        let s = FactorState::zeros(dims);
        let mut p = PriorParams::initial(1, 0, 0, 1);
        p.var_item_facet_bias[0] = 0.5;
        p.var_obs = 0.25;
        let c = GibbsSampler::new(&data, 1e-8)
            .unit_conditional(&s, &p, Block::ItemFacetBias, 0)
            .unwrap();
        // precision 1/0.5 + 1/0.25 = 6, mean = (2/0.25)/6
        assert_relative_eq!(c.covariance[0], 1.0 / 6.0, epsilon = 1e-14);
        assert_relative_eq!(c.mean[0], 8.0 / 6.0, epsilon = 1e-14);
    }

    #[test]
    fn sweeps_are_reproducible() {
        let mut evs = Vec::new();
        for u in 0..4 {
            for i in 0..3 {
                evs.push(Event::new(u, i, (u + i) % 2, (u * 3 + i) as f64 * 0.1));
            }
        }
        let ds = tiny(evs, 4, 3, 2);
        let data = TrainingData::with_presence(&ds, Presence::all(4, 3, 2)).unwrap();
        let dims = Dims {
            num_users: 4,
            num_items: 3,
            num_facets: 2,
            global_dim: 2,
            local_dim: 1,
        };
        let p = PriorParams::initial(2, 0, 0, 1);
        let run = || {
            let mut s = FactorState::zeros(dims);
            for sweep in 0..5 {
                let key = SweepKey { seed: 9, em_iter: 0, sweep };
                gibbs_sweep(&mut s, &p, &data, key, 1e-8).unwrap();
            }
            s
        };
        let a = run();
        let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        assert_eq!(a, b);
        assert!(a.first_non_finite_block().is_none());
        assert!(a.user_global.iter().any(|&v| v != 0.0));
    }
}
