//! Factor containers and scoring.
//!
//! The locally augmented tensor (LAT) score of user `i`, item `j`, facet `k`
//! is
//!
//! ```text
//! alpha_ik + beta_jk + <u_i, v_j, w_k> + u_ik . v_jk
//! ```
//!
//! where `<a, b, c> = sum_l a[l] b[l] c[l]`. The other models in the family
//! are realized on the same containers:
//!
//! * BST: no local factors (`local_dim == 0`).
//! * SMF: no global factors (`global_dim == 0`).
//! * CMF: SMF trained on facet-collapsed data, its single facet broadcast to
//!   every facet, so all facets share one parameter set.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Event, FeatureVector};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lat,
    Bst,
    Smf,
    Cmf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Lat, ModelKind::Bst, ModelKind::Smf, ModelKind::Cmf];

    fn code(self) -> u32 {
        match self {
            ModelKind::Lat => 0,
            ModelKind::Bst => 1,
            ModelKind::Smf => 2,
            ModelKind::Cmf => 3,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => ModelKind::Lat,
            1 => ModelKind::Bst,
            2 => ModelKind::Smf,
            3 => ModelKind::Cmf,
            other => return Err(Error::Format(format!("unknown model kind code {other}"))),
        })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Lat => "lat",
            ModelKind::Bst => "bst",
            ModelKind::Smf => "smf",
            ModelKind::Cmf => "cmf",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lat" => Ok(ModelKind::Lat),
            "bst" => Ok(ModelKind::Bst),
            "smf" => Ok(ModelKind::Smf),
            "cmf" => Ok(ModelKind::Cmf),
            other => Err(Error::Config(format!("unknown factor model `{other}`"))),
        }
    }
}

pub const DEFAULT_JITTER: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub global_dim: usize,
    pub local_dim: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian jitter added to factor vectors at
    /// initialization.
    pub jitter: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, global_dim: usize, local_dim: usize, seed: u64) -> Result<Self> {
        let c = ModelConfig {
            kind,
            global_dim,
            local_dim,
            seed,
            jitter: DEFAULT_JITTER,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Bst if self.local_dim != 0 => Err(Error::Config(
                "BST has no local factors; local dimension must be 0".into(),
            )),
            ModelKind::Smf | ModelKind::Cmf if self.global_dim != 0 => Err(Error::Config(format!(
                "{} has no global factors; global dimension must be 0",
                self.kind
            ))),
            _ if !(self.jitter >= 0.0 && self.jitter.is_finite()) => {
                Err(Error::Config(format!("invalid jitter {}", self.jitter)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub num_users: usize,
    pub num_items: usize,
    pub num_facets: usize,
    pub global_dim: usize,
    pub local_dim: usize,
}

/// All latent factors. Matrices are flat and row-major: `user_facet_bias[i *
/// K + k]`, `user_local[(i * K + k) * local_dim ..]`, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    pub dims: Dims,
    /// alpha_ik, M x K.
    pub user_facet_bias: Vec<f64>,
    /// beta_jk, N x K.
    pub item_facet_bias: Vec<f64>,
    /// alpha_i.
    pub user_bias: Vec<f64>,
    /// beta_j.
    pub item_bias: Vec<f64>,
    /// u_i, M x F_g.
    pub user_global: Vec<f64>,
    /// v_j, N x F_g.
    pub item_global: Vec<f64>,
    /// w_k, K x F_g.
    pub facet_weight: Vec<f64>,
    /// u_ik, M x K x F_l.
    pub user_local: Vec<f64>,
    /// v_jk, N x K x F_l.
    pub item_local: Vec<f64>,
}

impl FactorState {
    pub fn zeros(dims: Dims) -> Self {
        let Dims {
            num_users: m,
            num_items: n,
            num_facets: k,
            global_dim: fg,
            local_dim: fl,
        } = dims;
        FactorState {
            dims,
            user_facet_bias: vec![0.0; m * k],
            item_facet_bias: vec![0.0; n * k],
            user_bias: vec![0.0; m],
            item_bias: vec![0.0; n],
            user_global: vec![0.0; m * fg],
            item_global: vec![0.0; n * fg],
            facet_weight: vec![0.0; k * fg],
            user_local: vec![0.0; m * k * fl],
            item_local: vec![0.0; n * k * fl],
        }
    }

    #[inline]
    pub fn u_global(&self, i: usize) -> &[f64] {
        let f = self.dims.global_dim;
        &self.user_global[i * f..(i + 1) * f]
    }

    #[inline]
    pub fn v_global(&self, j: usize) -> &[f64] {
        let f = self.dims.global_dim;
        &self.item_global[j * f..(j + 1) * f]
    }

    #[inline]
    pub fn w(&self, k: usize) -> &[f64] {
        let f = self.dims.global_dim;
        &self.facet_weight[k * f..(k + 1) * f]
    }

    #[inline]
    pub fn u_local(&self, i: usize, k: usize) -> &[f64] {
        let f = self.dims.local_dim;
        let o = (i * self.dims.num_facets + k) * f;
        &self.user_local[o..o + f]
    }

    #[inline]
    pub fn v_local(&self, j: usize, k: usize) -> &[f64] {
        let f = self.dims.local_dim;
        let o = (j * self.dims.num_facets + k) * f;
        &self.item_local[o..o + f]
    }

    #[inline]
    pub fn alpha(&self, i: usize, k: usize) -> f64 {
        self.user_facet_bias[i * self.dims.num_facets + k]
    }

    #[inline]
    pub fn beta(&self, j: usize, k: usize) -> f64 {
        self.item_facet_bias[j * self.dims.num_facets + k]
    }

    /// Eq.-3 score without bounds checks beyond slice indexing.
    #[inline]
    pub(crate) fn score_unchecked(&self, i: usize, j: usize, k: usize) -> f64 {
        self.alpha(i, k)
            + self.beta(j, k)
            + triple(self.u_global(i), self.v_global(j), self.w(k))
            + dot(self.u_local(i, k), self.v_local(j, k))
    }

    pub fn score(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        self.check_index(i, j, k)?;
        Ok(self.score_unchecked(i, j, k))
    }

    fn check_index(&self, i: usize, j: usize, k: usize) -> Result<()> {
        let d = &self.dims;
        if i >= d.num_users || j >= d.num_items || k >= d.num_facets {
            return Err(Error::Dimension(format!(
                "index ({i}, {j}, {k}) outside {}x{}x{}",
                d.num_users, d.num_items, d.num_facets
            )));
        }
        Ok(())
    }

    /// Name and contents of each parameter block, in serialization order.
    pub fn blocks(&self) -> [(&'static str, &[f64]); 9] {
        [
            ("alpha_ik", &self.user_facet_bias),
            ("beta_jk", &self.item_facet_bias),
            ("alpha_i", &self.user_bias),
            ("beta_j", &self.item_bias),
            ("u_i", &self.user_global),
            ("v_j", &self.item_global),
            ("w_k", &self.facet_weight),
            ("u_ik", &self.user_local),
            ("v_jk", &self.item_local),
        ]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.user_facet_bias,
            &mut self.item_facet_bias,
            &mut self.user_bias,
            &mut self.item_bias,
            &mut self.user_global,
            &mut self.item_global,
            &mut self.facet_weight,
            &mut self.user_local,
            &mut self.item_local,
        ]
    }

    /// First block holding a non-finite entry.
    pub fn first_non_finite_block(&self) -> Option<&'static str> {
        self.blocks()
            .into_iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn triple(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter().zip(b).zip(c).map(|((x, y), z)| x * y * z).sum()
}

/// `sum_l u[l] v[l] w[l]`.
pub fn tensor_product(u: &[f64], v: &[f64], w: &[f64]) -> Result<f64> {
    if u.len() != v.len() || v.len() != w.len() {
        return Err(Error::Dimension(format!(
            "tensor product of lengths {}, {}, {}",
            u.len(),
            v.len(),
            w.len()
        )));
    }
    Ok(triple(u, v, w))
}

/// Prior parameters. Regression matrices for local factors are stored with
/// one row of length `local_dim` per feature, so that the prior mean of
/// `u_ik` is `sum_a x_i[a] * row(k, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    pub num_facets: usize,
    pub user_feature_dim: usize,
    pub item_feature_dim: usize,
    pub local_dim: usize,
    /// g_k, K x user_feature_dim.
    pub user_bias_coef: Vec<f64>,
    /// d_k, K x item_feature_dim.
    pub item_bias_coef: Vec<f64>,
    /// q_k.
    pub user_bias_weight: Vec<f64>,
    /// r_k.
    pub item_bias_weight: Vec<f64>,
    /// G_k, K x user_feature_dim x F_l.
    pub user_local_coef: Vec<f64>,
    /// D_k, K x item_feature_dim x F_l.
    pub item_local_coef: Vec<f64>,
    pub var_user_facet_bias: Vec<f64>,
    pub var_item_facet_bias: Vec<f64>,
    pub var_user_local: Vec<f64>,
    pub var_item_local: Vec<f64>,
    pub var_user_global: f64,
    pub var_item_global: f64,
    pub var_obs: f64,
}

impl PriorParams {
    /// Zero regression coefficients, unit bias couplings and unit variances.
    pub fn initial(num_facets: usize, du: usize, di: usize, local_dim: usize) -> Self {
        let k = num_facets;
        PriorParams {
            num_facets: k,
            user_feature_dim: du,
            item_feature_dim: di,
            local_dim,
            user_bias_coef: vec![0.0; k * du],
            item_bias_coef: vec![0.0; k * di],
            user_bias_weight: vec![1.0; k],
            item_bias_weight: vec![1.0; k],
            user_local_coef: vec![0.0; k * du * local_dim],
            item_local_coef: vec![0.0; k * di * local_dim],
            var_user_facet_bias: vec![1.0; k],
            var_item_facet_bias: vec![1.0; k],
            var_user_local: vec![1.0; k],
            var_item_local: vec![1.0; k],
            var_user_global: 1.0,
            var_item_global: 1.0,
            var_obs: 1.0,
        }
    }

    #[inline]
    pub fn g(&self, k: usize) -> &[f64] {
        let d = self.user_feature_dim;
        &self.user_bias_coef[k * d..(k + 1) * d]
    }

    #[inline]
    pub fn d(&self, k: usize) -> &[f64] {
        let d = self.item_feature_dim;
        &self.item_bias_coef[k * d..(k + 1) * d]
    }

    /// G_k as `user_feature_dim` rows of length `local_dim`.
    #[inline]
    pub fn user_loadings(&self, k: usize) -> &[f64] {
        let s = self.user_feature_dim * self.local_dim;
        &self.user_local_coef[k * s..(k + 1) * s]
    }

    #[inline]
    pub fn item_loadings(&self, k: usize) -> &[f64] {
        let s = self.item_feature_dim * self.local_dim;
        &self.item_local_coef[k * s..(k + 1) * s]
    }

    /// Prior mean of alpha_ik given alpha_i.
    #[inline]
    pub fn alpha_prior_mean(&self, k: usize, x: &FeatureVector, user_bias: f64) -> f64 {
        x.dot(self.g(k)) + self.user_bias_weight[k] * user_bias
    }

    #[inline]
    pub fn beta_prior_mean(&self, k: usize, x: &FeatureVector, item_bias: f64) -> f64 {
        x.dot(self.d(k)) + self.item_bias_weight[k] * item_bias
    }

    /// G_k x_i.
    pub fn user_local_prior_mean(&self, k: usize, x: &FeatureVector) -> Vec<f64> {
        project(self.user_loadings(k), self.local_dim, x)
    }

    /// D_k x_j.
    pub fn item_local_prior_mean(&self, k: usize, x: &FeatureVector) -> Vec<f64> {
        project(self.item_loadings(k), self.local_dim, x)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_facets;
        let (du, di, fl) = (self.user_feature_dim, self.item_feature_dim, self.local_dim);
        let shapes = [
            ("g_k", self.user_bias_coef.len(), k * du),
            ("d_k", self.item_bias_coef.len(), k * di),
            ("q_k", self.user_bias_weight.len(), k),
            ("r_k", self.item_bias_weight.len(), k),
            ("G_k", self.user_local_coef.len(), k * du * fl),
            ("D_k", self.item_local_coef.len(), k * di * fl),
            ("var_alpha_k", self.var_user_facet_bias.len(), k),
            ("var_beta_k", self.var_item_facet_bias.len(), k),
            ("var_u_k", self.var_user_local.len(), k),
            ("var_v_k", self.var_item_local.len(), k),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Dimension(format!("{name}: {got} entries, expected {want}")));
            }
        }
        let variances = self
            .var_user_facet_bias
            .iter()
            .chain(&self.var_item_facet_bias)
            .chain(&self.var_user_local)
            .chain(&self.var_item_local)
            .chain([&self.var_user_global, &self.var_item_global, &self.var_obs]);
        for v in variances {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("variance {v} is not positive")));
            }
        }
        Ok(())
    }

    fn arrays(&self) -> Vec<&[f64]> {
        vec![
            &self.user_bias_coef,
            &self.item_bias_coef,
            &self.user_bias_weight,
            &self.item_bias_weight,
            &self.user_local_coef,
            &self.item_local_coef,
            &self.var_user_facet_bias,
            &self.var_item_facet_bias,
            &self.var_user_local,
            &self.var_item_local,
            std::slice::from_ref(&self.var_user_global),
            std::slice::from_ref(&self.var_item_global),
            std::slice::from_ref(&self.var_obs),
        ]
    }

    /// First prior parameter block holding a non-finite entry.
    pub fn first_non_finite_block(&self) -> Option<&'static str> {
        const NAMES: [&str; 13] = [
            "g_k", "d_k", "q_k", "r_k", "G_k", "D_k", "var_alpha_k", "var_beta_k", "var_u_k", "var_v_k",
            "var_u0", "var_v0", "var_y",
        ];
        NAMES
            .into_iter()
            .zip(self.arrays())
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }
}

fn project(rows: &[f64], width: usize, x: &FeatureVector) -> Vec<f64> {
    let mut out = vec![0.0; width];
    if width == 0 {
        return out;
    }
    for &(a, val) in x.entries() {
        for (o, g) in out.iter_mut().zip(&rows[a * width..(a + 1) * width]) {
            *o += val * g;
        }
    }
    out
}

/// Which factors were informed by training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Presence {
    pub num_facets: usize,
    /// (i, k) had a type-k training observation.
    pub user_facet: Vec<bool>,
    pub item_facet: Vec<bool>,
    pub user: Vec<bool>,
    pub item: Vec<bool>,
    pub facet: Vec<bool>,
}

impl Presence {
    pub fn from_events(events: &[Event], m: usize, n: usize, k: usize) -> Self {
        let mut p = Presence::none(m, n, k);
        for e in events {
            p.user_facet[e.user * k + e.facet] = true;
            p.item_facet[e.item * k + e.facet] = true;
            p.user[e.user] = true;
            p.item[e.item] = true;
            p.facet[e.facet] = true;
        }
        p
    }

    pub fn none(m: usize, n: usize, k: usize) -> Self {
        Presence {
            num_facets: k,
            user_facet: vec![false; m * k],
            item_facet: vec![false; n * k],
            user: vec![false; m],
            item: vec![false; n],
            facet: vec![false; k],
        }
    }

    /// Every factor counts as present.
    pub fn all(m: usize, n: usize, k: usize) -> Self {
        Presence {
            num_facets: k,
            user_facet: vec![true; m * k],
            item_facet: vec![true; n * k],
            user: vec![true; m],
            item: vec![true; n],
            facet: vec![true; k],
        }
    }

    #[inline]
    pub fn has_user_facet(&self, i: usize, k: usize) -> bool {
        self.user_facet.get(i * self.num_facets + k).copied().unwrap_or(false)
    }

    #[inline]
    pub fn has_item_facet(&self, j: usize, k: usize) -> bool {
        self.item_facet.get(j * self.num_facets + k).copied().unwrap_or(false)
    }

    #[inline]
    pub fn has_user(&self, i: usize) -> bool {
        self.user.get(i).copied().unwrap_or(false)
    }

    #[inline]
    pub fn has_item(&self, j: usize) -> bool {
        self.item.get(j).copied().unwrap_or(false)
    }

    #[inline]
    pub fn has_facet(&self, k: usize) -> bool {
        self.facet.get(k).copied().unwrap_or(false)
    }
}

fn check_features(x: &FeatureVector, dim: usize, who: &str) -> Result<()> {
    if x.min_dim() > dim {
        return Err(Error::Dimension(format!(
            "{who} feature id {} >= feature dim {dim}",
            x.min_dim() - 1
        )));
    }
    Ok(())
}

/// Scores a triple, replacing factors that had no training support by
/// their prior predictions:
///
/// * alpha_ik -> g_k'x_i + q_k alpha_i, u_ik -> G_k x_i when (i, k) unseen;
/// * beta_jk -> d_k'x_j + r_k beta_j, v_jk -> D_k x_j when (j, k) unseen;
/// * alpha_i, u_i (beta_j, v_j) -> 0 when the user (item) is unseen.
///
/// Users and items beyond the state's index space are treated as unseen.
#[allow(clippy::too_many_arguments)]
pub fn score_with_fallback(
    state: &FactorState,
    priors: &PriorParams,
    x_user: &FeatureVector,
    x_item: &FeatureVector,
    i: usize,
    j: usize,
    k: usize,
    presence: &Presence,
) -> Result<f64> {
    let d = &state.dims;
    if k >= d.num_facets {
        return Err(Error::Dimension(format!("facet {k} >= {}", d.num_facets)));
    }
    check_features(x_user, priors.user_feature_dim, "user")?;
    check_features(x_item, priors.item_feature_dim, "item")?;
    let user_seen = i < d.num_users && presence.has_user(i);
    let item_seen = j < d.num_items && presence.has_item(j);
    let user_facet_seen = user_seen && presence.has_user_facet(i, k);
    let item_facet_seen = item_seen && presence.has_item_facet(j, k);

    let zeros = vec![0.0; d.global_dim];
    let alpha_i = if user_seen { state.user_bias[i] } else { 0.0 };
    let beta_j = if item_seen { state.item_bias[j] } else { 0.0 };
    let u_i = if user_seen { state.u_global(i) } else { &zeros };
    let v_j = if item_seen { state.v_global(j) } else { &zeros };
    let w_k = if presence.has_facet(k) { state.w(k) } else { &zeros };

    let alpha = if user_facet_seen {
        state.alpha(i, k)
    } else {
        priors.alpha_prior_mean(k, x_user, alpha_i)
    };
    let beta = if item_facet_seen {
        state.beta(j, k)
    } else {
        priors.beta_prior_mean(k, x_item, beta_j)
    };
    let local = match (user_facet_seen, item_facet_seen) {
        (true, true) => dot(state.u_local(i, k), state.v_local(j, k)),
        (true, false) => dot(state.u_local(i, k), &priors.item_local_prior_mean(k, x_item)),
        (false, true) => dot(&priors.user_local_prior_mean(k, x_user), state.v_local(j, k)),
        (false, false) => dot(
            &priors.user_local_prior_mean(k, x_user),
            &priors.item_local_prior_mean(k, x_item),
        ),
    };
    Ok(alpha + beta + triple(u_i, v_j, w_k) + local)
}

/// Biases at their prior regression means, facet weights at one, other
/// factor vectors at prior means; every factor vector then gets N(0, jitter^2)
/// noise.
pub fn init_factors(
    config: &ModelConfig,
    priors: &PriorParams,
    dims: Dims,
    user_features: &[FeatureVector],
    item_features: &[FeatureVector],
) -> FactorState {
    let mut s = FactorState::zeros(dims);
    let k_count = dims.num_facets;
    let fl = dims.local_dim;
    let mut rng = rng::stream(config.seed, &[rng::tag::INIT]);
    let mut jitter = |v: &mut [f64]| {
        if config.jitter > 0.0 {
            for x in v {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += config.jitter * z;
            }
        }
    };
    for i in 0..dims.num_users {
        for k in 0..k_count {
            s.user_facet_bias[i * k_count + k] = priors.alpha_prior_mean(k, &user_features[i], 0.0);
            let o = (i * k_count + k) * fl;
            s.user_local[o..o + fl].copy_from_slice(&priors.user_local_prior_mean(k, &user_features[i]));
        }
    }
    for j in 0..dims.num_items {
        for k in 0..k_count {
            s.item_facet_bias[j * k_count + k] = priors.beta_prior_mean(k, &item_features[j], 0.0);
            let o = (j * k_count + k) * fl;
            s.item_local[o..o + fl].copy_from_slice(&priors.item_local_prior_mean(k, &item_features[j]));
        }
    }
    s.facet_weight.fill(1.0);
    jitter(&mut s.user_global);
    jitter(&mut s.item_global);
    jitter(&mut s.facet_weight);
    jitter(&mut s.user_local);
    jitter(&mut s.item_local);
    s
}

/// Replicates a single-facet state across `num_facets` facets.
pub(crate) fn broadcast_state(single: &FactorState, num_facets: usize) -> FactorState {
    assert_eq!(single.dims.num_facets, 1);
    let mut dims = single.dims;
    dims.num_facets = num_facets;
    let rep = |v: &[f64], width: usize| -> Vec<f64> {
        v.chunks(width.max(1))
            .flat_map(|c| std::iter::repeat_n(c, num_facets).flatten().copied())
            .collect()
    };
    FactorState {
        dims,
        user_facet_bias: rep(&single.user_facet_bias, 1),
        item_facet_bias: rep(&single.item_facet_bias, 1),
        user_bias: single.user_bias.clone(),
        item_bias: single.item_bias.clone(),
        user_global: single.user_global.clone(),
        item_global: single.item_global.clone(),
        facet_weight: rep(&single.facet_weight, single.facet_weight.len()),
        user_local: if dims.local_dim == 0 { vec![] } else { rep(&single.user_local, dims.local_dim) },
        item_local: if dims.local_dim == 0 { vec![] } else { rep(&single.item_local, dims.local_dim) },
    }
}

pub(crate) fn broadcast_priors(single: &PriorParams, num_facets: usize) -> PriorParams {
    assert_eq!(single.num_facets, 1);
    let rep = |v: &[f64]| -> Vec<f64> { std::iter::repeat_n(v, num_facets).flatten().copied().collect() };
    PriorParams {
        num_facets,
        user_bias_coef: rep(&single.user_bias_coef),
        item_bias_coef: rep(&single.item_bias_coef),
        user_bias_weight: rep(&single.user_bias_weight),
        item_bias_weight: rep(&single.item_bias_weight),
        user_local_coef: rep(&single.user_local_coef),
        item_local_coef: rep(&single.item_local_coef),
        var_user_facet_bias: rep(&single.var_user_facet_bias),
        var_item_facet_bias: rep(&single.var_item_facet_bias),
        var_user_local: rep(&single.var_user_local),
        var_item_local: rep(&single.var_item_local),
        ..single.clone()
    }
}

/// A trained factor model: everything needed to score new triples.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub config: ModelConfig,
    pub state: FactorState,
    pub priors: PriorParams,
    pub presence: Presence,
}

const MAGIC: &[u8; 4] = b"LATM";
pub const FORMAT_VERSION: u32 = 1;

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn predict(&self, i: usize, j: usize, k: usize, x_user: &FeatureVector, x_item: &FeatureVector) -> Result<f64> {
        score_with_fallback(&self.state, &self.priors, x_user, x_item, i, j, k, &self.presence)
    }

    /// Serializes to the versioned binary model format:
    ///
    /// ```text
    /// magic "LATM" | version u32 | kind u32
    /// M N K F_g F_l user_dim item_dim seed : u64 each | jitter f64
    /// f64 arrays: alpha_ik beta_jk alpha_i beta_j u_i v_j w_k u_ik v_jk
    ///             g_k d_k q_k r_k G_k D_k var_alpha_k var_beta_k var_u_k
    ///             var_v_k var_u0 var_v0 var_y
    /// u8 arrays:  presence of (i,k) (j,k) i j k
    /// ```
    ///
    /// All integers and floats are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = &self.state.dims;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.kind.code().to_le_bytes());
        for v in [
            d.num_users,
            d.num_items,
            d.num_facets,
            d.global_dim,
            d.local_dim,
            self.priors.user_feature_dim,
            self.priors.item_feature_dim,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&self.config.jitter.to_le_bytes());
        for (_, block) in self.state.blocks() {
            for x in block {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for block in self.priors.arrays() {
            for x in block {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let p = &self.presence;
        for flags in [&p.user_facet, &p.item_facet, &p.user, &p.item, &p.facet] {
            out.extend(flags.iter().map(|&b| u8::from(b)));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = ModelKind::from_code(r.u32()?)?;
        let mut dim = || -> Result<usize> {
            let v = r.u64()?;
            usize::try_from(v).map_err(|_| Error::Format(format!("dimension {v} too large")))
        };
        let (m, n, k, fg, fl, du, di) = (dim()?, dim()?, dim()?, dim()?, dim()?, dim()?, dim()?);
        let seed = r.u64()?;
        let jitter = r.f64()?;
        let dims = Dims {
            num_users: m,
            num_items: n,
            num_facets: k,
            global_dim: fg,
            local_dim: fl,
        };
        let config = ModelConfig {
            kind,
            global_dim: fg,
            local_dim: fl,
            seed,
            jitter,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut state = FactorState::zeros(dims);
        for block in state.blocks_mut() {
            r.fill(block)?;
        }
        let mut priors = PriorParams::initial(k, du, di, fl);
        for block in [
            &mut priors.user_bias_coef,
            &mut priors.item_bias_coef,
            &mut priors.user_bias_weight,
            &mut priors.item_bias_weight,
            &mut priors.user_local_coef,
            &mut priors.item_local_coef,
            &mut priors.var_user_facet_bias,
            &mut priors.var_item_facet_bias,
            &mut priors.var_user_local,
            &mut priors.var_item_local,
        ] {
            r.fill(block)?;
        }
        priors.var_user_global = r.f64()?;
        priors.var_item_global = r.f64()?;
        priors.var_obs = r.f64()?;
        let mut presence = Presence::none(m, n, k);
        for flags in [
            &mut presence.user_facet,
            &mut presence.item_facet,
            &mut presence.user,
            &mut presence.item,
            &mut presence.facet,
        ] {
            let len = flags.len();
            for (f, b) in flags.iter_mut().zip(r.take_n(len)?) {
                *f = match b {
                    0 => false,
                    1 => true,
                    other => return Err(Error::Format(format!("invalid presence byte {other}"))),
                };
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(FittedModel {
            config,
            state,
            priors,
            presence,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        FittedModel::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated model stream at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take_n(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill(&mut self, out: &mut [f64]) -> Result<()> {
        let len = out.len().checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?;
        let raw = self.take(len)?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dims(fg: usize, fl: usize) -> Dims {
        Dims {
            num_users: 2,
            num_items: 2,
            num_facets: 2,
            global_dim: fg,
            local_dim: fl,
        }
    }

    #[test]
    fn tensor_product_examples() {
        assert_eq!(tensor_product(&[1.0, 2.0], &[3.0, 4.0], &[1.0, 1.0]).unwrap(), 11.0);
        assert_eq!(tensor_product(&[1.0, 2.0], &[3.0, 4.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(tensor_product(&[1.0, 2.0], &[3.0, 4.0], &[2.0, 0.0]).unwrap(), 6.0);
        assert!(matches!(
            tensor_product(&[1.0], &[1.0, 2.0], &[1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn score_examples() {
        let mut s = FactorState::zeros(dims(2, 1));
        assert_eq!(s.score(1, 1, 1).unwrap(), 0.0);
        s.user_facet_bias[0] = 0.5;
        s.item_facet_bias[0] = -0.2;
        assert_relative_eq!(s.score(0, 0, 0).unwrap(), 0.3, epsilon = 1e-15);

        s.user_facet_bias[0] = 0.1;
        s.item_facet_bias[0] = 0.1;
        s.user_global[..2].copy_from_slice(&[1.0, 1.0]);
        s.item_global[..2].copy_from_slice(&[1.0, 1.0]);
        s.facet_weight[..2].copy_from_slice(&[0.5, 0.5]);
        s.user_local[0] = 2.0;
        s.item_local[0] = 0.25;
        // 0.1 + 0.1 + (0.5 + 0.5) + 2 * 0.25
        assert_relative_eq!(s.score(0, 0, 0).unwrap(), 1.7, epsilon = 1e-12);
        assert!(matches!(s.score(2, 0, 0), Err(Error::Dimension(_))));
        assert!(matches!(s.score(0, 0, 2), Err(Error::Dimension(_))));
    }

    fn priors_zero(k: usize, fl: usize) -> PriorParams {
        let mut p = PriorParams::initial(k, 2, 2, fl);
        p.user_bias_weight.fill(0.0);
        p.item_bias_weight.fill(0.0);
        p
    }

    #[test]
    fn fallback_examples() {
        let mut s = FactorState::zeros(dims(1, 1));
        for (idx, v) in s.user_facet_bias.iter_mut().enumerate() {
            *v = 0.1 * idx as f64 + 0.3;
        }
        for (idx, v) in s.item_facet_bias.iter_mut().enumerate() {
            *v = -0.05 * idx as f64 + 0.7;
        }
        s.user_global.fill(0.4);
        s.item_global.fill(-1.2);
        s.facet_weight.fill(0.9);
        s.user_local.fill(1.5);
        s.item_local.fill(0.6);
        s.user_bias = vec![0.25, -0.5];
        let x = FeatureVector::new(vec![(0, 1.0)]).unwrap();
        let all = Presence::all(2, 2, 2);
        let mut p = priors_zero(2, 1);

        // seen everywhere -> plain score
        for (i, j, k) in [(0, 0, 0), (1, 1, 1), (0, 1, 1)] {
            assert_eq!(
                score_with_fallback(&s, &p, &x, &x, i, j, k, &all).unwrap(),
                s.score(i, j, k).unwrap()
            );
        }

        // user unseen entirely with g = G = 0 -> beta_jk (all other terms vanish)
        let mut pres = all.clone();
        pres.user[1] = false;
        pres.user_facet[2] = false;
        pres.user_facet[3] = false;
        let got = score_with_fallback(&s, &p, &x, &x, 1, 1, 1, &pres).unwrap();
        assert_relative_eq!(got, s.beta(1, 1), epsilon = 1e-15);
        // so does a brand-new user index
        let got = score_with_fallback(&s, &p, &x, &x, 7, 1, 1, &all).unwrap();
        assert_relative_eq!(got, s.beta(1, 1), epsilon = 1e-15);

        // user seen elsewhere only, q_k = 1, g_k = 0, zero item vectors -> alpha_i + beta_jk
        let mut s2 = s.clone();
        s2.item_global.fill(0.0);
        s2.item_local.fill(0.0);
        p.user_bias_weight.fill(1.0);
        let mut pres = all.clone();
        pres.user_facet[0] = false; // (i=0, k=0)
        let got = score_with_fallback(&s2, &p, &x, &x, 0, 1, 0, &pres).unwrap();
        assert_relative_eq!(got, s2.user_bias[0] + s2.beta(1, 0), epsilon = 1e-15);

        // feature ids beyond the prior's dimension are rejected
        let wide = FeatureVector::new(vec![(5, 1.0)]).unwrap();
        assert!(score_with_fallback(&s, &p, &wide, &x, 0, 0, 0, &all).is_err());
    }

    #[test]
    fn fallback_uses_regression_predictions() {
        let s = FactorState::zeros(dims(0, 2));
        let mut p = PriorParams::initial(2, 2, 2, 2);
        p.user_bias_coef = vec![0.0, 0.0, 1.0, 2.0]; // g_1 = [1, 2]
        p.item_local_coef = vec![0.0; 8];
        p.user_local_coef = vec![0.0; 8];
        // G_1 rows: feature 0 -> [1, 0], feature 1 -> [0, 1]
        p.user_local_coef[4..].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        // D_1 rows: feature 0 -> [2, 3]
        p.item_local_coef[4..6].copy_from_slice(&[2.0, 3.0]);
        let xu = FeatureVector::new(vec![(0, 1.0), (1, -1.0)]).unwrap();
        let xi = FeatureVector::new(vec![(0, 1.0)]).unwrap();
        let none = Presence::none(2, 2, 2);
        let got = score_with_fallback(&s, &p, &xu, &xi, 0, 0, 1, &none).unwrap();
        // alpha = 1 - 2 = -1, beta = 0, u = [1, -1], v = [2, 3] -> -1 + (2 - 3) = -2
        assert_relative_eq!(got, -2.0, epsilon = 1e-15);
    }

    #[test]
    fn init_factor_examples() {
        let d = dims(2, 2);
        let p = PriorParams::initial(2, 2, 2, 2);
        let feats = vec![FeatureVector::new(vec![(1, 1.0)]).unwrap(); 2];
        let cfg = ModelConfig::new(ModelKind::Lat, 2, 2, 11).unwrap();
        let a = init_factors(&cfg, &p, d, &feats, &feats);
        let b = init_factors(&cfg, &p, d, &feats, &feats);
        assert_eq!(a, b);
        assert!(a.user_facet_bias.iter().all(|&v| v == 0.0));
        assert!(a.user_global.iter().all(|&v| v != 0.0 && v.abs() < 0.1));
        let mut exact = cfg;
        exact.jitter = 0.0;
        let c = init_factors(&exact, &p, d, &feats, &feats);
        let mut expected = FactorState::zeros(d);
        expected.facet_weight.fill(1.0);
        assert_eq!(c, expected);
    }

    #[test]
    fn config_constraints() {
        assert!(ModelConfig::new(ModelKind::Bst, 2, 1, 0).is_err());
        assert!(ModelConfig::new(ModelKind::Smf, 1, 2, 0).is_err());
        assert!(ModelConfig::new(ModelKind::Cmf, 1, 2, 0).is_err());
        assert!(ModelConfig::new(ModelKind::Lat, 3, 2, 0).is_ok());
        for kind in ModelKind::ALL {
            assert_eq!(kind.to_string().parse::<ModelKind>().unwrap(), kind);
        }
    }

    fn random_model(seed: u64, fg: usize, fl: usize) -> FittedModel {
        let d = Dims {
            num_users: 3,
            num_items: 4,
            num_facets: 2,
            global_dim: fg,
            local_dim: fl,
        };
        let mut p = PriorParams::initial(2, 3, 2, fl);
        let mut r = rng::stream(seed, &[1]);
        let mut fill = |v: &mut Vec<f64>| {
            for x in v.iter_mut() {
                *x = StandardNormal.sample(&mut r);
            }
        };
        let mut s = FactorState::zeros(d);
        for b in s.blocks_mut() {
            fill(b);
        }
        fill(&mut p.user_local_coef);
        fill(&mut p.item_bias_coef);
        p.var_obs = 0.123;
        let events = vec![Event::new(0, 1, 1, 1.0), Event::new(2, 3, 0, 0.0)];
        FittedModel {
            config: ModelConfig::new(ModelKind::Lat, fg, fl, seed).unwrap(),
            state: s,
            priors: p,
            presence: Presence::from_events(&events, 3, 4, 2),
        }
    }

    #[test]
    fn model_file_errors() {
        let m = random_model(1, 2, 1);
        let bytes = m.to_bytes();
        assert!(matches!(
            FittedModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FittedModel::from_bytes(&bad), Err(Error::Format(_))));
        let mut old = bytes.clone();
        old[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            FittedModel::from_bytes(&old),
            Err(Error::Version { found: 9, .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(FittedModel::from_bytes(&long).is_err());
    }

    #[test]
    fn broadcast_ties_facets() {
        let single_dims = Dims {
            num_users: 2,
            num_items: 2,
            num_facets: 1,
            global_dim: 0,
            local_dim: 2,
        };
        let mut s = FactorState::zeros(single_dims);
        s.user_facet_bias = vec![1.0, 2.0];
        s.user_local = vec![1.0, 2.0, 3.0, 4.0];
        let b = broadcast_state(&s, 3);
        assert_eq!(b.user_facet_bias, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(b.u_local(1, 2), &[3.0, 4.0]);
        assert_eq!(b.u_local(0, 1), &[1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn model_round_trip(seed in 0u64..500, fg in 0usize..3, fl in 0usize..3) {
            let m = random_model(seed, fg, fl);
            let back = FittedModel::from_bytes(&m.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), m.to_bytes());
            prop_assert_eq!(back, m);
        }

        #[test]
        fn special_case_and_linearity(seed in 0u64..500, i in 0usize..3, j in 0usize..4, k in 0usize..2) {
            let m = random_model(seed, 2, 2);
            let s = &m.state;
            let full = s.score(i, j, k).unwrap();
            let bias = s.alpha(i, k) + s.beta(j, k);
            let tensor = tensor_product(s.u_global(i), s.v_global(j), s.w(k)).unwrap();
            let local = dot(s.u_local(i, k), s.v_local(j, k));
            prop_assert!((full - (bias + tensor + local)).abs() < 1e-12);

            // dropping local factors gives the BST score
            let mut bst = s.clone();
            bst.dims.local_dim = 0;
            bst.user_local.clear();
            bst.item_local.clear();
            prop_assert!((bst.score(i, j, k).unwrap() - (bias + tensor)).abs() < 1e-12);

            // dropping global factors gives the SMF score
            let mut smf = s.clone();
            smf.dims.global_dim = 0;
            smf.user_global.clear();
            smf.item_global.clear();
            smf.facet_weight.clear();
            prop_assert!((smf.score(i, j, k).unwrap() - (bias + local)).abs() < 1e-12);

            // doubling w_k doubles the tensor term exactly
            let mut doubled = s.clone();
            let fg = s.dims.global_dim;
            for x in &mut doubled.facet_weight[k * fg..(k + 1) * fg] { *x *= 2.0; }
            let t2 = tensor_product(doubled.u_global(i), doubled.v_global(j), doubled.w(k)).unwrap();
            prop_assert_eq!(t2, 2.0 * tensor);

            // linear in u_ik
            let mut shifted = s.clone();
            let o = (i * 2 + k) * 2;
            shifted.user_local[o] += 1.0;
            let delta = shifted.score(i, j, k).unwrap() - full;
            prop_assert!((delta - s.v_local(j, k)[0]).abs() < 1e-10);
        }

        #[test]
        fn tied_parameters_give_cmf_score(seed in 0u64..500, i in 0usize..3, j in 0usize..4) {
            let m = random_model(seed, 0, 2);
            let mut single = m.state.clone();
            single.dims.num_facets = 1;
            single.user_facet_bias = (0..3).map(|u| m.state.alpha(u, 0)).collect();
            single.item_facet_bias = (0..4).map(|v| m.state.beta(v, 0)).collect();
            single.user_local = (0..3).flat_map(|u| m.state.u_local(u, 0).to_vec()).collect();
            single.item_local = (0..4).flat_map(|v| m.state.v_local(v, 0).to_vec()).collect();
            let tied = broadcast_state(&single, 2);
            let cmf = single.alpha(i, 0) + single.beta(j, 0) + dot(single.u_local(i, 0), single.v_local(j, 0));
            for k in 0..2 {
                prop_assert_eq!(tied.score(i, j, k).unwrap(), cmf);
            }
        }
    }
}
